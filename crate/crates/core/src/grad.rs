//! Teacher-forced squared loss and its gradient.
//!
//! Under teacher forcing every column of every context is a one-hot
//! embedding (prompt or ground-truth target), so the analytic path works on
//! block indices: scores are table lookups and each gradient entry is a
//! scatter. The dense model code is only used by [`sample_loss`] and the
//! finite-difference check, which keeps the two implementations independent.

use rayon::prelude::*;

use crate::embedding::{embed_prompt, target, Columns, EmbeddingScheme, PromptMatrix, TargetMatrix};
use crate::error::{Error, Result};
use crate::linalg::softmax_in_place;
use crate::model::{step, BackwardParams, ForwardParams, Params, StepState};
use crate::trees::Tree;

/// Gradient with the same shapes as the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord {
    pub grads: Params,
    /// true for a batch mean, false for a single sample
    pub averaged: bool,
}

/// Outputs of each step computed on the prompt extended by the previous
/// target columns.
pub fn teacher_forced_outputs(params: &Params, prompt: &PromptMatrix, target: &TargetMatrix) -> Columns {
    let k = target.columns.len();
    let mut state = StepState::new(prompt);
    let mut out = Columns::with_capacity(prompt.scheme.dim(), k);
    for i in 0..k {
        out.push(&step(params, &state));
        state.push(target.columns.col(i));
    }
    out
}

/// `1/2 ||O - O_hat||_F^2` for one tree, evaluated with the dense model.
pub fn sample_loss(params: &Params, tree: &Tree, perm_seed: u64) -> Result<f64> {
    let scheme = params.scheme();
    let prompt = embed_prompt(&scheme, tree, perm_seed)?;
    let tgt = target(&scheme, tree)?;
    Ok(0.5 * teacher_forced_outputs(params, &prompt, &tgt).dist_sq(&tgt.columns))
}

/// Block indices of a one-hot column; `None` for an all-zero block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Slot {
    x: Option<usize>,
    y: Option<usize>,
    z: Option<usize>,
}

fn one_hot_index(block: &[f64]) -> Result<Option<usize>> {
    let mut found = None;
    for (i, &v) in block.iter().enumerate() {
        if v == 1.0 && found.is_none() {
            found = Some(i);
        } else if v != 0.0 {
            return Err(Error::Shape("teacher-forced column is not one-hot".into()));
        }
    }
    Ok(found)
}

fn slot(scheme: &EmbeddingScheme, col: &[f64]) -> Result<Slot> {
    Ok(Slot {
        x: one_hot_index(scheme.x(col))?,
        y: one_hot_index(scheme.y(col))?,
        z: one_hot_index(scheme.z(col))?,
    })
}

/// Prompt followed by all target columns, as block indices.
struct Context {
    slots: Vec<Slot>,
    prompt_len: usize,
}

impl Context {
    fn new(scheme: &EmbeddingScheme, tree: &Tree, perm_seed: u64) -> Result<Self> {
        let prompt = embed_prompt(scheme, tree, perm_seed)?;
        let tgt = target(scheme, tree)?;
        let mut slots = Vec::with_capacity(prompt.columns.len() + tgt.columns.len());
        for c in prompt.columns.iter().chain(tgt.columns.iter()) {
            slots.push(slot(scheme, c)?);
        }
        Ok(Self {
            slots,
            prompt_len: prompt.columns.len(),
        })
    }

    fn steps(&self) -> usize {
        self.slots.len() - self.prompt_len
    }

    /// Columns visible at step `k` (1-based), last one is the query.
    fn visible(&self, k: usize) -> &[Slot] {
        &self.slots[..self.prompt_len + k - 1]
    }

    fn target(&self, k: usize) -> Slot {
        self.slots[self.prompt_len + k - 1]
    }
}

#[inline]
fn at(v: &[f64], i: Option<usize>) -> f64 {
    i.map_or(0.0, |i| v[i])
}

/// Scratch buffers reused across steps.
struct Scratch {
    w1: Vec<f64>,
    w2: Vec<f64>,
    rv1: Vec<f64>,
    rv2: Vec<f64>,
    out: Vec<f64>,
}

impl Scratch {
    fn new(dim: usize) -> Self {
        Self {
            w1: Vec::new(),
            w2: Vec::new(),
            rv1: Vec::new(),
            rv2: Vec::new(),
            out: vec![0.0; dim],
        }
    }
}

/// Subtracts the one-hot target from `out` (laid out x|y|z) and returns the loss.
fn residual(out: &mut [f64], d1: usize, t: Slot) -> f64 {
    if let Some(i) = t.x {
        out[i] -= 1.0;
    }
    if let Some(i) = t.y {
        out[d1 + i] -= 1.0;
    }
    if let Some(i) = t.z {
        out[2 * d1 + i] -= 1.0;
    }
    0.5 * out.iter().map(|r| r * r).sum::<f64>()
}

/// Backward-task loss of one context; adds the gradient into `grad` if given.
fn backward_sample(p: &BackwardParams, ctx: &Context, mut grad: Option<&mut BackwardParams>, s: &mut Scratch) -> f64 {
    let d1 = p.b.rows;
    let mut loss = 0.0;
    for k in 1..=ctx.steps() {
        let cols = ctx.visible(k);
        let xq = cols[cols.len() - 1].x;
        // score_c = y_c^T B x_q
        s.w1.clear();
        s.w1.extend(cols.iter().map(|c| match (c.y, xq) {
            (Some(i), Some(j)) => p.b.get(i, j),
            _ => 0.0,
        }));
        softmax_in_place(&mut s.w1);

        s.out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &w) in cols.iter().zip(&s.w1) {
            if let Some(i) = c.x {
                s.out[i] += w;
            }
            if let Some(i) = c.y {
                s.out[d1 + i] += w;
            }
        }
        loss += residual(&mut s.out, d1, ctx.target(k));

        let (Some(g), Some(j)) = (grad.as_deref_mut(), xq) else {
            continue;
        };
        let (rx, ry) = s.out.split_at(d1);
        s.rv1.clear();
        s.rv1.extend(cols.iter().map(|c| at(rx, c.x) + at(ry, c.y)));
        let r_out: f64 = s.w1.iter().zip(&s.rv1).map(|(w, v)| w * v).sum();
        for ((c, &w), &rv) in cols.iter().zip(&s.w1).zip(&s.rv1) {
            if let Some(i) = c.y {
                g.b.add_at(i, j, w * (rv - r_out));
            }
        }
    }
    loss
}

/// Forward-task loss of one context; adds the gradient into `grad` if given.
fn forward_sample(p: &ForwardParams, ctx: &Context, mut grad: Option<&mut ForwardParams>, s: &mut Scratch) -> f64 {
    let d1 = p.b1.rows;
    let mut loss = 0.0;
    for k in 1..=ctx.steps() {
        let cols = ctx.visible(k);
        let q = cols[cols.len() - 1];
        let (yq, zq) = (q.y.expect("forward query has a node"), q.z.expect("forward query has a stage"));
        let score = |m1: &crate::linalg::Mat, m2: &crate::linalg::Mat, m3: &crate::linalg::Mat, c: &Slot| {
            c.x.map_or(0.0, |i| m1.get(i, yq)) + c.y.map_or(0.0, |i| m2.get(i, yq)) + c.z.map_or(0.0, |i| m3.get(i, zq))
        };
        s.w1.clear();
        s.w1.extend(cols.iter().map(|c| score(&p.b1, &p.b2, &p.b3, c)));
        softmax_in_place(&mut s.w1);
        s.w2.clear();
        s.w2.extend(cols.iter().map(|c| score(&p.c1, &p.c2, &p.c3, c)));
        softmax_in_place(&mut s.w2);

        s.out.iter_mut().for_each(|o| *o = 0.0);
        for ((c, &a), &b) in cols.iter().zip(&s.w1).zip(&s.w2) {
            // head 1 swaps parent and child
            if let Some(i) = c.y {
                s.out[i] += a;
            }
            if let Some(i) = c.x {
                s.out[d1 + i] += a;
            }
            if let Some(i) = c.z {
                s.out[2 * d1 + i] += b;
            }
        }
        loss += residual(&mut s.out, d1, ctx.target(k));

        let Some(g) = grad.as_deref_mut() else {
            continue;
        };
        let (rx, rest) = s.out.split_at(d1);
        let (ry, rz) = rest.split_at(d1);
        s.rv1.clear();
        s.rv1.extend(cols.iter().map(|c| at(rx, c.y) + at(ry, c.x)));
        s.rv2.clear();
        s.rv2.extend(cols.iter().map(|c| at(rz, c.z)));
        let r1: f64 = s.w1.iter().zip(&s.rv1).map(|(w, v)| w * v).sum();
        let r2: f64 = s.w2.iter().zip(&s.rv2).map(|(w, v)| w * v).sum();
        for (i, c) in cols.iter().enumerate() {
            let g1 = s.w1[i] * (s.rv1[i] - r1);
            let g2 = s.w2[i] * (s.rv2[i] - r2);
            if let Some(x) = c.x {
                g.b1.add_at(x, yq, g1);
                g.c1.add_at(x, yq, g2);
            }
            if let Some(y) = c.y {
                g.b2.add_at(y, yq, g1);
                g.c2.add_at(y, yq, g2);
            }
            if let Some(z) = c.z {
                g.b3.add_at(z, zq, g1);
                g.c3.add_at(z, zq, g2);
            }
        }
    }
    loss
}

fn accumulate(params: &Params, ctx: &Context, grad: Option<&mut Params>, s: &mut Scratch) -> f64 {
    match (params, grad) {
        (Params::Backward(p), Some(Params::Backward(g))) => backward_sample(p, ctx, Some(g), s),
        (Params::Backward(p), None) => backward_sample(p, ctx, None, s),
        (Params::Forward(p), Some(Params::Forward(g))) => forward_sample(p, ctx, Some(g), s),
        (Params::Forward(p), None) => forward_sample(p, ctx, None, s),
        _ => unreachable!("gradient buffer built from the same params"),
    }
}

/// Exact gradient of [`sample_loss`] by reverse accumulation.
pub fn grad_sample(params: &Params, tree: &Tree, perm_seed: u64) -> Result<GradRecord> {
    Ok(loss_and_grad_sample(params, tree, perm_seed)?.1)
}

/// Loss and gradient of one tree in a single pass.
pub fn loss_and_grad_sample(params: &Params, tree: &Tree, perm_seed: u64) -> Result<(f64, GradRecord)> {
    let scheme = params.scheme();
    let ctx = Context::new(&scheme, tree, perm_seed)?;
    let mut g = Params::zeros(&scheme);
    let loss = accumulate(params, &ctx, Some(&mut g), &mut Scratch::new(scheme.dim()));
    Ok((loss, GradRecord { grads: g, averaged: false }))
}

/// Teacher-forced loss of one tree through the index path (no gradient).
pub fn fast_loss(params: &Params, tree: &Tree, perm_seed: u64) -> Result<f64> {
    let scheme = params.scheme();
    let ctx = Context::new(&scheme, tree, perm_seed)?;
    Ok(accumulate(params, &ctx, None, &mut Scratch::new(scheme.dim())))
}

/// One training example: a tree and the seed of its edge permutation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tree: Tree,
    pub perm_seed: u64,
}

/// Samples per reduction leaf. Fixed so the summation order does not depend
/// on the number of threads.
const CHUNK: usize = 16;

fn pairwise<T>(mut items: Vec<T>, mut add: impl FnMut(&mut T, T)) -> Option<T> {
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add(&mut a, b);
            }
            next.push(a);
        }
        items = next;
    }
    items.pop()
}

/// Mean loss and mean gradient over a batch. Chunks are evaluated in
/// parallel and combined by a fixed pairwise reduction, so results are
/// bit-identical across runs and thread counts.
pub fn batch_loss_and_grad(params: &Params, samples: &[Sample]) -> Result<(f64, GradRecord)> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let scheme = params.scheme();
    let partial: Vec<(f64, Params)> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = Params::zeros(&scheme);
            let mut s = Scratch::new(scheme.dim());
            let mut loss = 0.0;
            for smp in chunk {
                let ctx = Context::new(&scheme, &smp.tree, smp.perm_seed)?;
                loss += accumulate(params, &ctx, Some(&mut g), &mut s);
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let (loss, mut g) = pairwise(partial, |a, b| {
        a.0 += b.0;
        a.1.axpy(1.0, &b.1).expect("same shapes");
    })
    .expect("non-empty");
    let n = samples.len() as f64;
    g.scale(1.0 / n);
    Ok((loss / n, GradRecord { grads: g, averaged: true }))
}

/// Mean teacher-forced loss over a corpus, same reduction scheme as the
/// batch gradient.
pub fn mean_loss(params: &Params, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let scheme = params.scheme();
    let partial: Vec<f64> = samples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut s = Scratch::new(scheme.dim());
            let mut loss = 0.0;
            for smp in chunk {
                let ctx = Context::new(&scheme, &smp.tree, smp.perm_seed)?;
                loss += accumulate(params, &ctx, None, &mut s);
            }
            Ok(loss)
        })
        .collect::<Result<_>>()?;
    let total = pairwise(partial, |a, b| *a += b).expect("non-empty");
    Ok(total / samples.len() as f64)
}

/// Step size policy for central differences.
///
/// Plain central differences at `h = 1e-5` carry an absolute roundoff of
/// roughly `1e-16 * loss / h`, which swamps gradient entries near `1e-7`.
/// Extrapolating over `h, h/2, ..., h/2^levels` cancels the even truncation
/// terms, so a much larger `h` can be used instead.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdStep {
    /// `h = scale * (1 + |entry|)`
    pub scale: f64,
    /// Richardson extrapolation levels; 0 is plain central differences
    pub levels: u32,
}

impl Default for FdStep {
    fn default() -> Self {
        Self { scale: 1e-5, levels: 0 }
    }
}

impl FdStep {
    /// Two extrapolation levels from `h = 2e-2`: error near `1e-13` absolute.
    pub fn accurate() -> Self {
        Self { scale: 2e-2, levels: 2 }
    }
}

/// Entrywise central differences of [`sample_loss`].
pub fn finite_diff_grad(params: &Params, tree: &Tree, perm_seed: u64, step: FdStep) -> Result<GradRecord> {
    let scheme = params.scheme();
    let prompt = embed_prompt(&scheme, tree, perm_seed)?;
    let tgt = target(&scheme, tree)?;
    let loss = |p: &Params| 0.5 * teacher_forced_outputs(p, &prompt, &tgt).dist_sq(&tgt.columns);
    let mut work = params.clone();
    let mut grads = Params::zeros(&scheme);
    let mut central = |idx: usize, theta: f64, h: f64| {
        work.flat_set(idx, theta + h);
        let up = loss(&work);
        work.flat_set(idx, theta - h);
        let down = loss(&work);
        work.flat_set(idx, theta);
        (up - down) / (2.0 * h)
    };
    let mut table = Vec::with_capacity(step.levels as usize + 1);
    for idx in 0..params.n_entries() {
        let theta = params.flat_get(idx);
        let h = step.scale * (1.0 + theta.abs());
        table.clear();
        for j in 0..=step.levels {
            table.push(central(idx, theta, h / f64::from(1u32 << j)));
        }
        // Neville-style tableau, collapsed in place
        for k in 1..=step.levels as usize {
            let f = 4f64.powi(k as i32);
            for j in (k..table.len()).rev() {
                table[j] = (f * table[j] - table[j - 1]) / (f - 1.0);
            }
        }
        grads.flat_set(idx, *table.last().expect("at least one step"));
    }
    Ok(GradRecord { grads, averaged: false })
}

/// Largest `|a - b| / max(|a|, |b|)` over entries where `max(|a|, |b|) > floor`,
/// and the number of entries compared.
pub fn max_rel_error(a: &Params, b: &Params, floor: f64) -> Result<(f64, usize)> {
    a.check_shape(b)?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for (x, y) in a.flat().into_iter().zip(b.flat()) {
        let m = x.abs().max(y.abs());
        if m > floor {
            worst = worst.max((x - y).abs() / m);
            n += 1;
        }
    }
    Ok((worst, n))
}
