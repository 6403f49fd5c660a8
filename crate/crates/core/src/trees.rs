//! Labeled rooted trees with a designated goal leaf.
//!
//! Training instances are perfect binary trees whose node labels are drawn
//! without replacement from `1..=S`; test instances have 0 to 3 children per
//! node. Edge order is not part of a [`Tree`]: prompts permute edges
//! themselves.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Label = u32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tree {
    /// Node labels, root first, in breadth-first order.
    nodes: Vec<Label>,
    /// child -> parent
    parent: BTreeMap<Label, Label>,
    root: Label,
    goal: Label,
}

impl Tree {
    /// Builds a tree from `(parent, child)` edges and validates it.
    pub fn from_edges(root: Label, goal: Label, edges: &[(Label, Label)]) -> Result<Self> {
        let mut parent = BTreeMap::new();
        for &(p, c) in edges {
            if parent.insert(c, p).is_some() {
                return Err(Error::InvalidTree(format!("node {c} has two parents")));
            }
        }
        let mut children: BTreeMap<Label, Vec<Label>> = BTreeMap::new();
        for &(p, c) in edges {
            children.entry(p).or_default().push(c);
        }
        // breadth-first from the root; anything unreachable is an error
        let mut nodes = vec![root];
        let mut seen = BTreeSet::from([root]);
        let mut queue = VecDeque::from([root]);
        while let Some(n) = queue.pop_front() {
            for &c in children.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
                if !seen.insert(c) {
                    return Err(Error::InvalidTree(format!("cycle through node {c}")));
                }
                nodes.push(c);
                queue.push_back(c);
            }
        }
        let tree = Self {
            nodes,
            parent,
            root,
            goal,
        };
        tree.validate()?;
        Ok(tree)
    }

    /// The perfect binary tree of depth `m` with label `i` at heap position
    /// `i` and the goal at position `2^m` (the leftmost leaf).
    pub fn canonical(m: u32) -> Self {
        let n = (1u32 << (m + 1)) - 1;
        let edges: Vec<_> = (2..=n).map(|c| (c / 2, c)).collect();
        Self::from_edges(1, 1 << m, &edges).expect("canonical tree is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.parent.contains_key(&self.root) {
            return Err(Error::InvalidTree("root has a parent".into()));
        }
        let distinct: BTreeSet<_> = self.nodes.iter().collect();
        if distinct.len() != self.nodes.len() {
            return Err(Error::InvalidTree("duplicate labels".into()));
        }
        if self.nodes.len() != self.parent.len() + 1 {
            return Err(Error::InvalidTree("tree is not connected".into()));
        }
        if self.nodes.contains(&0) {
            return Err(Error::InvalidTree("label 0 is reserved".into()));
        }
        if !distinct.contains(&self.goal) {
            return Err(Error::InvalidTree(format!("goal {} not in tree", self.goal)));
        }
        if self.goal == self.root {
            return Err(Error::InvalidTree("goal equals root".into()));
        }
        if !self.is_leaf(self.goal) {
            return Err(Error::InvalidTree(format!("goal {} is not a leaf", self.goal)));
        }
        Ok(())
    }

    /// Checks every label lies in `1..=vocab`.
    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        match self.nodes.iter().find(|&&n| n as usize > vocab) {
            Some(n) => Err(Error::Config(format!("label {n} exceeds vocabulary size {vocab}"))),
            None => Ok(()),
        }
    }

    pub fn root(&self) -> Label {
        self.root
    }

    pub fn goal(&self) -> Label {
        self.goal
    }

    pub fn nodes(&self) -> &[Label] {
        &self.nodes
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self, n: Label) -> Option<Label> {
        self.parent.get(&n).copied()
    }

    /// `(parent, child)` pairs in breadth-first order of the child.
    pub fn edges(&self) -> Vec<(Label, Label)> {
        self.nodes
            .iter()
            .skip(1)
            .map(|&c| (self.parent[&c], c))
            .collect()
    }

    pub fn children(&self, n: Label) -> Vec<Label> {
        self.nodes
            .iter()
            .copied()
            .filter(|c| self.parent.get(c) == Some(&n))
            .collect()
    }

    pub fn is_leaf(&self, n: Label) -> bool {
        !self.parent.values().any(|&p| p == n)
    }

    pub fn depth_of(&self, mut n: Label) -> usize {
        let mut d = 0;
        while let Some(p) = self.parent(n) {
            n = p;
            d += 1;
        }
        d
    }

    /// Longest root-to-leaf distance in edges.
    pub fn height(&self) -> usize {
        self.nodes.iter().map(|&n| self.depth_of(n)).max().unwrap_or(0)
    }

    /// Goal-to-root path `[g, p(g), ..., r]`.
    pub fn path_g2r(&self) -> Vec<Label> {
        let mut path = vec![self.goal];
        let mut n = self.goal;
        while let Some(p) = self.parent(n) {
            path.push(p);
            n = p;
        }
        path
    }

    pub fn path_r2g(&self) -> Vec<Label> {
        let mut p = self.path_g2r();
        p.reverse();
        p
    }

    /// Number of edges between goal and root.
    pub fn path_len(&self) -> usize {
        self.depth_of(self.goal)
    }

    /// Heap-ordered view of a perfect binary tree with the goal path on the
    /// left spine. Off-path siblings are ordered by ascending label.
    pub fn canonical_ordering(&self) -> Result<CanonicalOrdering> {
        let m = self.height();
        let n = (1usize << (m + 1)) - 1;
        if self.n_nodes() != n || self.path_len() != m {
            return Err(Error::InvalidTree("not a perfect binary tree with a deepest goal".into()));
        }
        let on_path: BTreeSet<_> = self.path_g2r().into_iter().collect();
        let mut index = vec![0; n + 1];
        index[1] = self.root;
        for i in 1..(1usize << m) {
            let mut ch = self.children(index[i]);
            if ch.len() != 2 {
                return Err(Error::InvalidTree(format!("node {} has {} children", index[i], ch.len())));
            }
            ch.sort_by_key(|c| (!on_path.contains(c), *c));
            index[2 * i] = ch[0];
            index[2 * i + 1] = ch[1];
        }
        Ok(CanonicalOrdering { depth: m as u32, index })
    }

    /// `root goal; parent child; parent child; ...`
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {}", self.root, self.goal);
        for (p, c) in self.edges() {
            s.push_str(&format!("; {p} {c}"));
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let mut parts = line.split(';').map(str::trim);
        let head = parts.next().unwrap_or("");
        let pair = |s: &str| -> Result<(Label, Label)> {
            let v: Vec<_> = s.split_whitespace().collect();
            if v.len() != 2 {
                return Err(Error::Parse(format!("expected two labels, got `{s}`")));
            }
            let a = v[0].parse().map_err(|_| Error::Parse(format!("bad label `{}`", v[0])))?;
            let b = v[1].parse().map_err(|_| Error::Parse(format!("bad label `{}`", v[1])))?;
            Ok((a, b))
        };
        let (root, goal) = pair(head)?;
        let edges = parts.filter(|s| !s.is_empty()).map(pair).collect::<Result<Vec<_>>>()?;
        Self::from_edges(root, goal, &edges)
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_line())
    }
}

/// Position -> label map in heap order: `n_1` is the root, `n_{2i}` and
/// `n_{2i+1}` are the children of `n_i`, and the goal sits at `n_{2^m}`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CanonicalOrdering {
    depth: u32,
    // index[0] unused
    index: Vec<Label>,
}

impl CanonicalOrdering {
    pub fn depth(&self) -> u32 {
        self.depth
    }

    /// Label at 1-based heap position `pos`.
    pub fn at(&self, pos: usize) -> Label {
        self.index[pos]
    }

    pub fn len(&self) -> usize {
        self.index.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sibling position of `pos` (none for the root).
    pub fn sibling(pos: usize) -> Option<usize> {
        (pos > 1).then_some(pos ^ 1)
    }
}

pub fn perfect_tree_size(m: u32) -> usize {
    (1usize << (m + 1)) - 1
}

/// Uniform draw of a perfect binary tree of depth `m` with distinct labels
/// from `1..=vocab` and a uniformly chosen goal leaf.
pub fn sample_perfect_tree(m: u32, vocab: usize, seed: u64) -> Result<Tree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_perfect_tree_with(&mut rng, m, vocab)
}

pub fn sample_perfect_tree_with<R: Rng + ?Sized>(rng: &mut R, m: u32, vocab: usize) -> Result<Tree> {
    if m < 2 {
        return Err(Error::Config(format!("depth m = {m} must be at least 2")));
    }
    if m > 20 {
        return Err(Error::Config(format!("depth m = {m} is unreasonably large")));
    }
    let n = perfect_tree_size(m);
    if vocab < n {
        return Err(Error::Config(format!(
            "vocabulary size {vocab} is smaller than the {n} nodes of a depth-{m} perfect tree"
        )));
    }
    let labels: Vec<Label> = index::sample(rng, vocab, n)
        .into_iter()
        .map(|i| i as Label + 1)
        .collect();
    let leaf = rng.gen_range((1usize << m)..=n);
    let edges: Vec<_> = (2..=n).map(|c| (labels[c / 2 - 1], labels[c - 1])).collect();
    Tree::from_edges(labels[0], labels[leaf - 1], &edges)
}

/// Shape caps for the random test-tree generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTreeConfig {
    pub max_depth: usize,
    pub min_children: usize,
    pub max_children: usize,
    /// Upper bound on node count; must not exceed the vocabulary.
    pub max_nodes: usize,
    pub retries: usize,
}

impl TestTreeConfig {
    pub fn for_vocab(vocab: usize) -> Self {
        Self {
            max_depth: 5,
            min_children: 0,
            max_children: 3,
            max_nodes: vocab,
            retries: 1000,
        }
    }
}

/// Random tree where each node independently gets `min..=max` children
/// (uniform), subject to the depth and node caps. The goal is uniform over
/// leaves at depth 2 or more; shapes without such a leaf are redrawn.
pub fn sample_test_tree(cfg: &TestTreeConfig, vocab: usize, seed: u64) -> Result<Tree> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_test_tree_with(&mut rng, cfg, vocab)
}

pub fn sample_test_tree_with<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &TestTreeConfig,
    vocab: usize,
) -> Result<Tree> {
    if cfg.max_nodes > vocab {
        return Err(Error::Config(format!(
            "max_nodes {} exceeds vocabulary size {vocab}",
            cfg.max_nodes
        )));
    }
    if cfg.max_nodes < 3 || cfg.max_depth < 2 || cfg.min_children > cfg.max_children {
        return Err(Error::Config("test-tree caps admit no tree with a depth-2 leaf".into()));
    }
    for _ in 0..cfg.retries.max(1) {
        // shape first, as (parent position, depth) per node
        let mut shape: Vec<(usize, usize)> = vec![(0, 0)];
        let mut frontier = 0;
        while frontier < shape.len() {
            let depth = shape[frontier].1;
            if depth < cfg.max_depth {
                let k = rng.gen_range(cfg.min_children..=cfg.max_children);
                let k = k.min(cfg.max_nodes - shape.len());
                for _ in 0..k {
                    shape.push((frontier, depth + 1));
                }
            }
            frontier += 1;
        }
        let mut has_child = vec![false; shape.len()];
        for &(p, _) in &shape[1..] {
            has_child[p] = true;
        }
        let candidates: Vec<usize> = (1..shape.len())
            .filter(|&i| !has_child[i] && shape[i].1 >= 2)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let goal = candidates[rng.gen_range(0..candidates.len())];
        let labels: Vec<Label> = index::sample(rng, vocab, shape.len())
            .into_iter()
            .map(|i| i as Label + 1)
            .collect();
        let edges: Vec<_> = shape[1..]
            .iter()
            .enumerate()
            .map(|(i, &(p, _))| (labels[p], labels[i + 1]))
            .collect();
        return Tree::from_edges(labels[0], labels[goal], &edges);
    }
    Err(Error::RetriesExhausted(cfg.retries))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_depth_two_path() {
        let t = Tree::canonical(2);
        assert_eq!(t.n_nodes(), 7);
        assert_eq!(t.path_g2r(), vec![4, 2, 1]);
        assert_eq!(t.path_r2g(), vec![1, 2, 4]);
        assert_eq!(t.path_len(), 2);
    }

    #[test]
    fn perfect_tree_sizes() {
        for seed in 0..20 {
            let t = sample_perfect_tree(4, 31, seed).unwrap();
            assert_eq!(t.n_nodes(), 31);
            assert_eq!(t.path_len(), 4);
            assert!(t.is_leaf(t.goal()));
            t.check_vocab(31).unwrap();
        }
        let t = sample_perfect_tree(2, 7, 3).unwrap();
        assert_eq!(t.n_nodes(), 7);
        let mut labels = t.nodes().to_vec();
        labels.sort();
        assert_eq!(labels, (1..=7).collect::<Vec<_>>());
    }

    #[test]
    fn perfect_tree_rejects_small_vocab() {
        assert!(matches!(sample_perfect_tree(4, 30, 0), Err(Error::Config(_))));
        assert!(matches!(sample_perfect_tree(1, 30, 0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_is_deterministic() {
        assert_eq!(
            sample_perfect_tree(3, 20, 9).unwrap(),
            sample_perfect_tree(3, 20, 9).unwrap()
        );
        let cfg = TestTreeConfig::for_vocab(31);
        assert_eq!(
            sample_test_tree(&cfg, 31, 5).unwrap(),
            sample_test_tree(&cfg, 31, 5).unwrap()
        );
    }

    #[test]
    fn forced_single_child_gives_a_path_graph() {
        let cfg = TestTreeConfig {
            max_depth: 2,
            min_children: 1,
            max_children: 1,
            max_nodes: 10,
            retries: 1,
        };
        let t = sample_test_tree(&cfg, 10, 0).unwrap();
        assert_eq!(t.n_nodes(), 3);
        assert_eq!(t.path_len(), 2);
        assert_eq!(t.depth_of(t.goal()), 2);
    }

    #[test]
    fn impossible_caps_exhaust_retries() {
        let cfg = TestTreeConfig {
            max_depth: 3,
            min_children: 0,
            max_children: 0,
            max_nodes: 10,
            retries: 5,
        };
        assert!(matches!(sample_test_tree(&cfg, 10, 0), Err(Error::RetriesExhausted(5))));
    }

    #[test]
    fn canonical_ordering_puts_goal_on_left_spine() {
        let t = sample_perfect_tree(3, 40, 17).unwrap();
        let ord = t.canonical_ordering().unwrap();
        assert_eq!(ord.len(), 15);
        assert_eq!(ord.at(1), t.root());
        assert_eq!(ord.at(8), t.goal());
        let path: Vec<_> = [8, 4, 2, 1].iter().map(|&p| ord.at(p)).collect();
        assert_eq!(path, t.path_g2r());
        for i in 1..8 {
            assert_eq!(t.parent(ord.at(2 * i)), Some(ord.at(i)));
            assert_eq!(t.parent(ord.at(2 * i + 1)), Some(ord.at(i)));
        }
        assert_eq!(CanonicalOrdering::sibling(4), Some(5));
        assert_eq!(CanonicalOrdering::sibling(1), None);
    }

    #[test]
    fn line_format_round_trips() {
        let t = sample_test_tree(&TestTreeConfig::for_vocab(31), 31, 11).unwrap();
        assert_eq!(Tree::parse_line(&t.to_line()).unwrap(), t);
        assert_eq!(Tree::canonical(2).to_line(), "1 4; 1 2; 1 3; 2 4; 2 5; 3 6; 3 7");
    }

    #[test]
    fn malformed_trees_are_rejected() {
        assert!(Tree::parse_line("1 3; 1 2; 2 3; 3 1").is_err()); // cycle / root with parent
        assert!(Tree::parse_line("1 2; 1 2; 2 3").is_err()); // goal not a leaf
        assert!(Tree::parse_line("1 3; 1 2; 4 3").is_err()); // disconnected
        assert!(Tree::parse_line("1 x; 1 2").is_err());
        assert!(Tree::parse_line("1 2; 1 2; 1 2").is_err()); // two parents for 2
    }
}
