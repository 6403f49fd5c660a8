//! One-hot block embeddings of prompts and chain-of-thought targets.
//!
//! A column is the stacked vector `(x; y)` for the backward task and
//! `(x; y; z)` for the forward task, where `x`/`y` are node embeddings and
//! `z` is a stage token.
//!
//! Backward: `d1 = S`, node `i` is the basis vector `e_{i-1}` and the filler
//! `a_0` is the zero vector. Forward: `d1 = S + 1`, node `i` (including the
//! filler `0`) is `e_i`, and the stage tokens are `s_f = (1, 0)` and
//! `s_b = (0, 1)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trees::{Label, Tree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Backward,
    Forward,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Backward => "backward",
            Task::Forward => "forward",
        }
    }

    /// Reasoning steps for a tree of path length `m`.
    pub fn steps(self, path_len: usize) -> usize {
        match self {
            Task::Backward => path_len,
            Task::Forward => 2 * path_len,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backward" => Ok(Task::Backward),
            "forward" => Ok(Task::Forward),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stage token carried by forward-task columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    /// `s_f`: edges, the root column, and the root-to-goal half.
    Forward,
    /// `s_b`: the goal column and the goal-to-root half.
    Backward,
}

impl Stage {
    pub fn index(self) -> usize {
        match self {
            Stage::Forward => 0,
            Stage::Backward => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Stage::Forward
        } else {
            Stage::Backward
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingScheme {
    pub task: Task,
    pub vocab: usize,
    pub d1: usize,
    pub d2: usize,
}

impl EmbeddingScheme {
    pub fn new(task: Task, vocab: usize) -> Self {
        match task {
            Task::Backward => Self { task, vocab, d1: vocab, d2: 0 },
            Task::Forward => Self { task, vocab, d1: vocab + 1, d2: 2 },
        }
    }

    pub fn backward(vocab: usize) -> Self {
        Self::new(Task::Backward, vocab)
    }

    pub fn forward(vocab: usize) -> Self {
        Self::new(Task::Forward, vocab)
    }

    /// Length of one stacked column.
    pub fn dim(&self) -> usize {
        2 * self.d1 + self.d2
    }

    /// Coordinate of node `label` inside an `x`/`y` block; `None` for the
    /// backward filler, which is the zero vector.
    pub fn node_coord(&self, label: Label) -> Option<usize> {
        match self.task {
            Task::Backward => (label > 0).then(|| label as usize - 1),
            Task::Forward => Some(label as usize),
        }
    }

    /// Inverse of [`node_coord`](Self::node_coord).
    pub fn coord_label(&self, coord: usize) -> Label {
        match self.task {
            Task::Backward => coord as Label + 1,
            Task::Forward => coord as Label,
        }
    }

    /// Fresh column `(a_x; a_y[; s])`; label 0 is the filler `a_0`.
    pub fn column(&self, x: Label, y: Label, stage: Option<Stage>) -> Vec<f64> {
        let mut c = vec![0.0; self.dim()];
        if let Some(i) = self.node_coord(x) {
            c[i] = 1.0;
        }
        if let Some(i) = self.node_coord(y) {
            c[self.d1 + i] = 1.0;
        }
        if let (Some(s), true) = (stage, self.d2 > 0) {
            c[2 * self.d1 + s.index()] = 1.0;
        }
        c
    }

    pub fn x<'a>(&self, col: &'a [f64]) -> &'a [f64] {
        &col[..self.d1]
    }

    pub fn y<'a>(&self, col: &'a [f64]) -> &'a [f64] {
        &col[self.d1..2 * self.d1]
    }

    pub fn z<'a>(&self, col: &'a [f64]) -> &'a [f64] {
        &col[2 * self.d1..]
    }

    fn check_task(&self, task: Task) -> Result<()> {
        if self.task != task {
            return Err(Error::TaskMismatch {
                expected: task.to_string(),
                found: self.task.to_string(),
            });
        }
        Ok(())
    }
}

/// Column-stacked matrix; each column is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Columns {
    dim: usize,
    data: Vec<f64>,
}

impl Columns {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn with_capacity(dim: usize, cols: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * cols),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, col: &[f64]) {
        assert_eq!(col.len(), self.dim, "column length mismatch");
        self.data.extend_from_slice(col);
    }

    pub fn col(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.col(self.len() - 1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn truncate(&mut self, cols: usize) {
        self.data.truncate(cols * self.dim);
    }

    /// Largest absolute entrywise difference.
    pub fn max_abs_diff(&self, other: &Columns) -> f64 {
        assert_eq!(self.dim, other.dim);
        assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Squared Frobenius distance.
    pub fn dist_sq(&self, other: &Columns) -> f64 {
        assert_eq!(self.dim, other.dim);
        assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Model input `E`: `l` edge columns, then the root column and the goal column.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptMatrix {
    pub scheme: EmbeddingScheme,
    pub columns: Columns,
    pub edge_count: usize,
}

/// Ground-truth chain-of-thought outputs `O`, one column per step.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetMatrix {
    pub scheme: EmbeddingScheme,
    pub columns: Columns,
}

fn shuffled_edges(tree: &Tree, perm_seed: u64) -> Vec<(Label, Label)> {
    let mut edges = tree.edges();
    edges.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
    edges
}

/// `(a_{p(i)}, a_i)` for every edge in seeded random order, then
/// `(a_0, a_r)` and `(a_g, a_0)`.
pub fn embed_backward_prompt(scheme: &EmbeddingScheme, tree: &Tree, perm_seed: u64) -> Result<PromptMatrix> {
    scheme.check_task(Task::Backward)?;
    tree.check_vocab(scheme.vocab)?;
    let edges = shuffled_edges(tree, perm_seed);
    let mut columns = Columns::with_capacity(scheme.dim(), edges.len() + 2 + tree.path_len());
    for &(p, c) in &edges {
        columns.push(&scheme.column(p, c, None));
    }
    columns.push(&scheme.column(0, tree.root(), None));
    columns.push(&scheme.column(tree.goal(), 0, None));
    Ok(PromptMatrix {
        scheme: *scheme,
        columns,
        edge_count: edges.len(),
    })
}

/// Edge columns and the root column `(a_0, a_r)` carry `s_f`; the goal
/// column `(a_0, a_g)` carries `s_b`.
pub fn embed_forward_prompt(scheme: &EmbeddingScheme, tree: &Tree, perm_seed: u64) -> Result<PromptMatrix> {
    scheme.check_task(Task::Forward)?;
    tree.check_vocab(scheme.vocab)?;
    let edges = shuffled_edges(tree, perm_seed);
    let mut columns = Columns::with_capacity(scheme.dim(), edges.len() + 2 + 2 * tree.path_len());
    for &(p, c) in &edges {
        columns.push(&scheme.column(p, c, Some(Stage::Forward)));
    }
    columns.push(&scheme.column(0, tree.root(), Some(Stage::Forward)));
    columns.push(&scheme.column(0, tree.goal(), Some(Stage::Backward)));
    Ok(PromptMatrix {
        scheme: *scheme,
        columns,
        edge_count: edges.len(),
    })
}

pub fn embed_prompt(scheme: &EmbeddingScheme, tree: &Tree, perm_seed: u64) -> Result<PromptMatrix> {
    match scheme.task {
        Task::Backward => embed_backward_prompt(scheme, tree, perm_seed),
        Task::Forward => embed_forward_prompt(scheme, tree, perm_seed),
    }
}

/// Column `k` is `(a_{p^k(g)}, a_{p^{k-1}(g)})`.
pub fn target_backward(scheme: &EmbeddingScheme, tree: &Tree) -> Result<TargetMatrix> {
    scheme.check_task(Task::Backward)?;
    tree.check_vocab(scheme.vocab)?;
    let path = tree.path_g2r();
    let mut columns = Columns::with_capacity(scheme.dim(), path.len() - 1);
    for w in path.windows(2) {
        columns.push(&scheme.column(w[1], w[0], None));
    }
    Ok(TargetMatrix { scheme: *scheme, columns })
}

/// Goal-to-root pairs `(child, parent)` tagged `s_b`, then the turning
/// column `(a_r, a_{p^{m-1}(g)})` and the root-to-goal pairs tagged `s_f`.
pub fn target_forward(scheme: &EmbeddingScheme, tree: &Tree) -> Result<TargetMatrix> {
    scheme.check_task(Task::Forward)?;
    tree.check_vocab(scheme.vocab)?;
    let path = tree.path_g2r();
    let m = path.len() - 1;
    let mut columns = Columns::with_capacity(scheme.dim(), 2 * m);
    for w in path.windows(2) {
        columns.push(&scheme.column(w[0], w[1], Some(Stage::Backward)));
    }
    for w in path.windows(2).rev() {
        columns.push(&scheme.column(w[1], w[0], Some(Stage::Forward)));
    }
    Ok(TargetMatrix { scheme: *scheme, columns })
}

pub fn target(scheme: &EmbeddingScheme, tree: &Tree) -> Result<TargetMatrix> {
    match scheme.task {
        Task::Backward => target_backward(scheme, tree),
        Task::Forward => target_forward(scheme, tree),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::argmax;
    use crate::trees::{sample_perfect_tree, sample_test_tree, TestTreeConfig};

    fn onehot_label(scheme: &EmbeddingScheme, block: &[f64]) -> Label {
        if block.iter().all(|&v| v == 0.0) {
            return 0;
        }
        scheme.coord_label(argmax(block))
    }

    #[test]
    fn backward_prompt_depth_two() {
        let s = EmbeddingScheme::backward(7);
        let p = embed_backward_prompt(&s, &Tree::canonical(2), 0).unwrap();
        assert_eq!(p.columns.len(), 8);
        assert_eq!(p.edge_count, 6);
        assert_eq!(p.columns.col(6), s.column(0, 1, None).as_slice());
        assert_eq!(p.columns.col(7), s.column(4, 0, None).as_slice());
        // a_0 really is zero in the backward scheme
        assert!(s.x(p.columns.col(6)).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_prompt_covers_every_non_root_once() {
        let s = EmbeddingScheme::backward(31);
        for seed in 0..20 {
            let t = sample_perfect_tree(4, 31, seed).unwrap();
            let p = embed_backward_prompt(&s, &t, seed + 100).unwrap();
            assert_eq!(p.columns.len(), 32);
            let mut ys: Vec<Label> = (0..p.edge_count)
                .map(|i| onehot_label(&s, s.y(p.columns.col(i))))
                .collect();
            ys.sort();
            let mut expect: Vec<Label> = t.nodes().iter().copied().filter(|&n| n != t.root()).collect();
            expect.sort();
            assert_eq!(ys, expect);
        }
    }

    #[test]
    fn forward_prompt_layout() {
        let s = EmbeddingScheme::forward(7);
        let p = embed_forward_prompt(&s, &Tree::canonical(2), 1).unwrap();
        let l = p.edge_count;
        assert_eq!(p.columns.last(), s.column(0, 4, Some(Stage::Backward)).as_slice());
        let sb = p.columns.iter().filter(|c| s.z(c)[1] == 1.0).count();
        assert_eq!(sb, 1);
        assert_eq!(onehot_label(&s, s.x(p.columns.col(l))), 0);
        assert_eq!(onehot_label(&s, s.x(p.columns.col(l + 1))), 0);
        assert_eq!(s.x(p.columns.col(l))[0], 1.0);
    }

    #[test]
    fn targets_depth_two() {
        let t = Tree::canonical(2);
        let sb = EmbeddingScheme::backward(7);
        let o = target_backward(&sb, &t).unwrap();
        assert_eq!(o.columns.len(), 2);
        assert_eq!(o.columns.col(0), sb.column(2, 4, None).as_slice());
        assert_eq!(o.columns.col(1), sb.column(1, 2, None).as_slice());

        let sf = EmbeddingScheme::forward(7);
        let o = target_forward(&sf, &t).unwrap();
        let expect = [
            sf.column(4, 2, Some(Stage::Backward)),
            sf.column(2, 1, Some(Stage::Backward)),
            sf.column(1, 2, Some(Stage::Forward)),
            sf.column(2, 4, Some(Stage::Forward)),
        ];
        for (k, e) in expect.iter().enumerate() {
            assert_eq!(o.columns.col(k), e.as_slice(), "column {k}");
        }
    }

    #[test]
    fn target_structure_on_random_trees() {
        let cfg = TestTreeConfig::for_vocab(25);
        let sb = EmbeddingScheme::backward(25);
        let sf = EmbeddingScheme::forward(25);
        for seed in 0..50 {
            let t = sample_test_tree(&cfg, 25, seed).unwrap();
            let m = t.path_len();
            let ob = target_backward(&sb, &t).unwrap();
            assert_eq!(ob.columns.len(), m);
            for k in 1..m {
                assert_eq!(sb.y(ob.columns.col(k)), sb.x(ob.columns.col(k - 1)));
            }
            let of = target_forward(&sf, &t).unwrap();
            assert_eq!(of.columns.len(), 2 * m);
            let stages: Vec<usize> = of.columns.iter().map(|c| argmax(sf.z(c))).collect();
            assert!(stages[..m].iter().all(|&s| s == 1));
            assert!(stages[m..].iter().all(|&s| s == 0));
            // second half is the first half reversed with x/y swapped
            for k in 0..m {
                let a = of.columns.col(k);
                let b = of.columns.col(2 * m - 1 - k);
                assert_eq!(sf.x(a), sf.y(b));
                assert_eq!(sf.y(a), sf.x(b));
            }
            // decoding reproduces both paths
            let mut g2r = vec![onehot_label(&sf, sf.x(of.columns.col(0)))];
            g2r.extend((0..m).map(|k| onehot_label(&sf, sf.y(of.columns.col(k)))));
            assert_eq!(g2r, t.path_g2r());
            let mut r2g = vec![onehot_label(&sf, sf.x(of.columns.col(m)))];
            r2g.extend((m..2 * m).map(|k| onehot_label(&sf, sf.y(of.columns.col(k)))));
            assert_eq!(r2g, t.path_r2g());
        }
    }

    #[test]
    fn block_norms() {
        let s = EmbeddingScheme::forward(25);
        let t = sample_perfect_tree(3, 25, 4).unwrap();
        let p = embed_forward_prompt(&s, &t, 4).unwrap();
        let o = target_forward(&s, &t).unwrap();
        for c in p.columns.iter().chain(o.columns.iter()) {
            for block in [s.x(c), s.y(c)] {
                let n: f64 = block.iter().map(|v| v * v).sum();
                assert!(n == 0.0 || n == 1.0);
            }
            assert_eq!(s.z(c).iter().map(|v| v * v).sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn labels_beyond_vocab_are_rejected() {
        let t = Tree::canonical(2);
        assert!(matches!(
            embed_backward_prompt(&EmbeddingScheme::backward(6), &t, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            embed_forward_prompt(&EmbeddingScheme::backward(7), &t, 0),
            Err(Error::TaskMismatch { .. })
        ));
    }
}
