//! One-layer attention models for the two path-finding tasks.
//!
//! Both models read only the last column as the query. The backward model is
//! a single head scoring keys by `y_c^T B x_q` and returning the attended
//! `(x; y)`. The forward model has two heads sharing the query `(y_q, z_q)`:
//! head 1 scores `x_c^T B1 y_q + y_c^T B2 y_q + z_c^T B3 z_q` and returns the
//! attended `(y; x)` (parent and child swapped); head 2 scores with `C1..C3`
//! and returns the attended stage block `z`.
//!
//! Attention always runs over every column of the current state, including
//! the query column itself.
//!
//! With one-hot embeddings the score matrices expressed in the embedding
//! basis (`H = A^T B A`, `U_l`, `V_l`) are the parameter matrices themselves,
//! so the tracked scalars below are read directly off `B` and `B1..C3`.

use serde::{Deserialize, Serialize};

use crate::embedding::{Columns, EmbeddingScheme, PromptMatrix, Task};
use crate::error::{Error, Result};
use crate::linalg::{dot, softmax_in_place, Mat};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardParams {
    pub b: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardParams {
    pub b1: Mat,
    pub b2: Mat,
    pub b3: Mat,
    pub c1: Mat,
    pub c2: Mat,
    pub c3: Mat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Params {
    Backward(BackwardParams),
    Forward(ForwardParams),
}

impl BackwardParams {
    pub fn zeros(scheme: &EmbeddingScheme) -> Self {
        Self {
            b: Mat::zeros(scheme.d1, scheme.d1),
        }
    }
}

impl ForwardParams {
    pub fn zeros(scheme: &EmbeddingScheme) -> Self {
        let (d1, d2) = (scheme.d1, scheme.d2);
        Self {
            b1: Mat::zeros(d1, d1),
            b2: Mat::zeros(d1, d1),
            b3: Mat::zeros(d2, d2),
            c1: Mat::zeros(d1, d1),
            c2: Mat::zeros(d1, d1),
            c3: Mat::zeros(d2, d2),
        }
    }
}

impl Params {
    pub fn zeros(scheme: &EmbeddingScheme) -> Self {
        match scheme.task {
            Task::Backward => Params::Backward(BackwardParams::zeros(scheme)),
            Task::Forward => Params::Forward(ForwardParams::zeros(scheme)),
        }
    }

    pub fn task(&self) -> Task {
        match self {
            Params::Backward(_) => Task::Backward,
            Params::Forward(_) => Task::Forward,
        }
    }

    /// Vocabulary size implied by the matrix shapes.
    pub fn vocab(&self) -> usize {
        match self {
            Params::Backward(p) => p.b.rows,
            Params::Forward(p) => p.b1.rows - 1,
        }
    }

    pub fn scheme(&self) -> EmbeddingScheme {
        EmbeddingScheme::new(self.task(), self.vocab())
    }

    pub fn names(&self) -> &'static [&'static str] {
        match self {
            Params::Backward(_) => &["B"],
            Params::Forward(_) => &["B1", "B2", "B3", "C1", "C2", "C3"],
        }
    }

    pub fn matrices(&self) -> Vec<&Mat> {
        match self {
            Params::Backward(p) => vec![&p.b],
            Params::Forward(p) => vec![&p.b1, &p.b2, &p.b3, &p.c1, &p.c2, &p.c3],
        }
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Mat> {
        match self {
            Params::Backward(p) => vec![&mut p.b],
            Params::Forward(p) => vec![&mut p.b1, &mut p.b2, &mut p.b3, &mut p.c1, &mut p.c2, &mut p.c3],
        }
    }

    pub fn n_entries(&self) -> usize {
        self.matrices().iter().map(|m| m.data.len()).sum()
    }

    /// Shape-checked `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Params) -> Result<()> {
        self.check_shape(other)?;
        for (a, b) in self.matrices_mut().into_iter().zip(other.matrices()) {
            a.axpy(scale, b);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.matrices_mut() {
            m.scale(s);
        }
    }

    pub fn check_shape(&self, other: &Params) -> Result<()> {
        let ok = self.task() == other.task()
            && self
                .matrices()
                .iter()
                .zip(other.matrices())
                .all(|(a, b)| a.same_shape(b));
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{} params of vocab {} vs {} params of vocab {}",
                self.task(),
                self.vocab(),
                other.task(),
                other.vocab()
            )))
        }
    }

    pub fn all_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.all_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.matrices().iter().fold(0.0, |a, m| a.max(m.max_abs()))
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.matrices().iter().map(|m| m.frobenius_sq()).sum()
    }

    /// Entry `idx` in the concatenation of all matrices.
    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for m in self.matrices() {
            if idx < m.data.len() {
                return m.data[idx];
            }
            idx -= m.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat_set(&mut self, mut idx: usize, v: f64) {
        for m in self.matrices_mut() {
            if idx < m.data.len() {
                m.data[idx] = v;
                return;
            }
            idx -= m.data.len();
        }
        panic!("flat index out of range")
    }

    pub fn flat(&self) -> Vec<f64> {
        self.matrices().iter().flat_map(|m| m.data.iter().copied()).collect()
    }
}

/// Current context: the prompt followed by the columns emitted so far.
#[derive(Clone, Debug)]
pub struct StepState {
    pub scheme: EmbeddingScheme,
    pub columns: Columns,
    pub prompt_len: usize,
}

impl StepState {
    pub fn new(prompt: &PromptMatrix) -> Self {
        Self {
            scheme: prompt.scheme,
            columns: prompt.columns.clone(),
            prompt_len: prompt.columns.len(),
        }
    }

    /// 1-based index of the step that the next call will compute.
    pub fn next_step(&self) -> usize {
        self.columns.len() - self.prompt_len + 1
    }

    pub fn push(&mut self, col: &[f64]) {
        self.columns.push(col);
    }
}

/// Attention weights of one step (one vector per head).
#[derive(Clone, Debug, PartialEq)]
pub struct Attention {
    pub heads: Vec<Vec<f64>>,
}

fn backward_attend(b: &Mat, scheme: &EmbeddingScheme, cols: &Columns) -> (Vec<f64>, Vec<f64>) {
    let q = b.matvec(scheme.x(cols.last()));
    let mut w: Vec<f64> = cols.iter().map(|c| dot(scheme.y(c), &q)).collect();
    softmax_in_place(&mut w);
    let mut out = vec![0.0; scheme.dim()];
    for (c, &wc) in cols.iter().zip(&w) {
        for (o, v) in out.iter_mut().zip(c) {
            *o += wc * v;
        }
    }
    (w, out)
}

/// Scores `x_c^T M1 y_q + y_c^T M2 y_q + z_c^T M3 z_q` for every column.
fn forward_scores(m1: &Mat, m2: &Mat, m3: &Mat, scheme: &EmbeddingScheme, cols: &Columns) -> Vec<f64> {
    let last = cols.last();
    let (yq, zq) = (scheme.y(last), scheme.z(last));
    let q1 = m1.matvec(yq);
    let q2 = m2.matvec(yq);
    let q3 = m3.matvec(zq);
    cols.iter()
        .map(|c| dot(scheme.x(c), &q1) + dot(scheme.y(c), &q2) + dot(scheme.z(c), &q3))
        .collect()
}

fn forward_attend(p: &ForwardParams, scheme: &EmbeddingScheme, cols: &Columns) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let d1 = scheme.d1;
    let mut w1 = forward_scores(&p.b1, &p.b2, &p.b3, scheme, cols);
    softmax_in_place(&mut w1);
    let mut w2 = forward_scores(&p.c1, &p.c2, &p.c3, scheme, cols);
    softmax_in_place(&mut w2);
    let mut out = vec![0.0; scheme.dim()];
    for ((c, &a), &b) in cols.iter().zip(&w1).zip(&w2) {
        // head 1 swaps the blocks: output x-block reads y, y-block reads x
        for i in 0..d1 {
            out[i] += a * c[d1 + i];
            out[d1 + i] += a * c[i];
        }
        for i in 2 * d1..c.len() {
            out[i] += b * c[i];
        }
    }
    (w1, w2, out)
}

/// One backward reasoning step: the attended column `(x; y)`.
pub fn step_backward(params: &BackwardParams, state: &StepState) -> Vec<f64> {
    backward_attend(&params.b, &state.scheme, &state.columns).1
}

/// One forward reasoning step: `(head-1 swapped (y; x); head-2 z)`.
pub fn step_forward(params: &ForwardParams, state: &StepState) -> Vec<f64> {
    forward_attend(params, &state.scheme, &state.columns).2
}

pub fn step(params: &Params, state: &StepState) -> Vec<f64> {
    match params {
        Params::Backward(p) => step_backward(p, state),
        Params::Forward(p) => step_forward(p, state),
    }
}

/// Output column together with the per-head attention weights.
pub fn step_with_attention(params: &Params, state: &StepState) -> (Vec<f64>, Attention) {
    match params {
        Params::Backward(p) => {
            let (w, out) = backward_attend(&p.b, &state.scheme, &state.columns);
            (out, Attention { heads: vec![w] })
        }
        Params::Forward(p) => {
            let (w1, w2, out) = forward_attend(p, &state.scheme, &state.columns);
            (out, Attention { heads: vec![w1, w2] })
        }
    }
}

/// Free-running chain of thought: each output is appended before the next step.
pub fn rollout(params: &Params, prompt: &PromptMatrix, steps: usize) -> Columns {
    let mut state = StepState::new(prompt);
    let mut outputs = Columns::with_capacity(prompt.scheme.dim(), steps);
    for _ in 0..steps {
        let o = step(params, &state);
        state.push(&o);
        outputs.push(&o);
    }
    outputs
}

/// `B = alpha * I`, i.e. `A^T B A = alpha I_S` under one-hot embeddings.
pub fn construct_backward(scheme: &EmbeddingScheme, alpha: f64) -> BackwardParams {
    let d = scheme.d1;
    BackwardParams {
        b: Mat::from_fn(d, d, |i, j| if i == j { alpha } else { 0.0 }),
    }
}

/// Coefficients of the two-head forward construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardConstruction {
    pub alpha1: f64,
    pub alpha2: f64,
    pub a: f64,
    pub b1: f64,
    pub b2: f64,
    pub c1: f64,
    pub c2: f64,
}

impl ForwardConstruction {
    pub fn new(alpha1: f64, alpha2: f64, a: f64, b1: f64, b2: f64, c1: f64, c2: f64) -> Self {
        Self { alpha1, alpha2, a, b1, b2, c1, c2 }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::ParamRange(msg.to_string()));
        if !(self.a > 0.0 && self.a <= 1.0) {
            return fail("a must lie in (0, 1]");
        }
        if !(self.b1 > 0.0) {
            return fail("b1 must be positive");
        }
        if !(self.b2 > 0.0 && self.b2 < self.a / 2.0) {
            return fail("b2 must lie in (0, a/2)");
        }
        if !(self.c1 > 0.0) {
            return fail("c1 must be positive");
        }
        if !(self.c2 > 0.0 && self.c2 < 0.5) {
            return fail("c2 must lie in (0, 1/2)");
        }
        if !(self.alpha1.is_finite() && self.alpha2.is_finite()) {
            return fail("alpha1 and alpha2 must be finite");
        }
        Ok(())
    }
}

impl Default for ForwardConstruction {
    fn default() -> Self {
        Self::new(30.0, 30.0, 1.0, 0.3, 0.2, 0.3, 0.3)
    }
}

/// Minimal matrices realising the forward construction: `B1` and `C1`
/// supported on the filler row, `B2`/`C2` diagonal on node coordinates,
/// `B3`/`C3` the 2x2 stage patterns.
pub fn construct_forward(scheme: &EmbeddingScheme, k: &ForwardConstruction) -> Result<ForwardParams> {
    k.validate()?;
    let d = scheme.d1;
    let row0 = |v: f64| Mat::from_fn(d, d, move |i, j| if i == 0 && j > 0 { v } else { 0.0 });
    let diag = |v: f64| Mat::from_fn(d, d, move |i, j| if i == j && i > 0 { v } else { 0.0 });
    let (a1, a2) = (k.alpha1, k.alpha2);
    Ok(ForwardParams {
        b1: row0(-k.a * a1),
        b2: diag(a1),
        b3: Mat {
            rows: 2,
            cols: 2,
            data: vec![-k.b1 * a1, k.b2 * a1, k.b1 * a1, -k.b2 * a1],
        },
        c1: row0(a2),
        c2: diag(a2),
        c3: Mat {
            rows: 2,
            cols: 2,
            data: vec![k.c1 * a2, -k.c2 * a2, -k.c1 * a2, k.c2 * a2],
        },
    })
}

/// Tracked entries of `H = A^T B A`.
#[derive(Clone, Debug, PartialEq)]
pub struct HStats {
    /// `H_{1,1}`
    pub mu: f64,
    /// `H_{1,2}`
    pub nu: f64,
    pub h: Mat,
    /// max - min over diagonal entries
    pub diag_spread: f64,
    /// max - min over off-diagonal entries
    pub offdiag_spread: f64,
}

pub fn extract_h(params: &BackwardParams) -> HStats {
    let h = params.b.clone();
    let n = h.rows;
    let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut omin, mut omax) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n {
        for j in 0..n {
            let v = h.get(i, j);
            if i == j {
                dmin = dmin.min(v);
                dmax = dmax.max(v);
            } else {
                omin = omin.min(v);
                omax = omax.max(v);
            }
        }
    }
    let spread = |lo: f64, hi: f64| if hi >= lo { hi - lo } else { 0.0 };
    HStats {
        mu: h.get(0, 0),
        nu: if n > 1 { h.get(0, 1) } else { 0.0 },
        diag_spread: spread(dmin, dmax),
        offdiag_spread: spread(omin, omax),
        h,
    }
}

/// Tracked scalars of `U_1..U_3` (from `B1..B3`) and `V_1..V_3` (from
/// `C1..C3`), indexed from 0 where index 0 is the filler `a_0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UvStats {
    /// `U_2[1,1]`
    pub mu1: f64,
    /// `U_1[1,1]`
    pub nu1: f64,
    /// `U_1[1,2]`
    pub nu11: f64,
    /// `U_2[1,2]`
    pub nu12: f64,
    /// mean of `U_1[0, 1..=S]`, which is `-a mu1` in the construction
    pub u1_row0_mean: f64,
    pub u3: [[f64; 2]; 2],
    /// mean of `V_1[0, 1..=S]`
    pub mu2: f64,
    /// mean of the node diagonal of `V_2`, which is `b mu2`
    pub v2_diag_mean: f64,
    /// `V_1[1,1]`
    pub nu2: f64,
    /// `V_1[1,2]`
    pub nu21: f64,
    /// `V_2[1,2]`
    pub nu22: f64,
    pub v3: [[f64; 2]; 2],
}

impl UvStats {
    /// Recovers `(alpha1, alpha2, a, b1, b2, c1, c2)` by inverting the
    /// construction patterns; `None` while `mu1` or `mu2` is zero.
    pub fn construction(&self) -> Option<ForwardConstruction> {
        if self.mu1 == 0.0 || self.mu2 == 0.0 {
            return None;
        }
        Some(ForwardConstruction {
            alpha1: self.mu1,
            alpha2: self.mu2,
            a: -self.u1_row0_mean / self.mu1,
            b1: -self.u3[0][0] / self.mu1,
            b2: self.u3[0][1] / self.mu1,
            c1: self.v3[0][0] / self.mu2,
            c2: -self.v3[0][1] / self.mu2,
        })
    }

    /// `b` in `V_2 = b mu2 I`; `None` while `mu2` is zero.
    pub fn b(&self) -> Option<f64> {
        (self.mu2 != 0.0).then(|| self.v2_diag_mean / self.mu2)
    }
}

pub fn extract_uv(p: &ForwardParams) -> UvStats {
    let s = p.b1.rows - 1;
    let row0_mean = |m: &Mat| (1..=s).map(|j| m.get(0, j)).sum::<f64>() / s as f64;
    let at = |m: &Mat, i: usize, j: usize| if i < m.rows && j < m.cols { m.get(i, j) } else { 0.0 };
    let two = |m: &Mat| [[m.get(0, 0), m.get(0, 1)], [m.get(1, 0), m.get(1, 1)]];
    UvStats {
        mu1: at(&p.b2, 1, 1),
        nu1: at(&p.b1, 1, 1),
        nu11: at(&p.b1, 1, 2),
        nu12: at(&p.b2, 1, 2),
        u1_row0_mean: row0_mean(&p.b1),
        u3: two(&p.b3),
        mu2: row0_mean(&p.c1),
        v2_diag_mean: (1..=s).map(|j| p.c2.get(j, j)).sum::<f64>() / s as f64,
        nu2: at(&p.c1, 1, 1),
        nu21: at(&p.c1, 1, 2),
        nu22: at(&p.c2, 1, 2),
        v3: two(&p.c3),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{embed_backward_prompt, embed_forward_prompt, target_backward, target_forward};
    use crate::trees::Tree;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn column_mean(cols: &Columns) -> Vec<f64> {
        let mut m = vec![0.0; cols.dim()];
        for c in cols.iter() {
            for (a, b) in m.iter_mut().zip(c) {
                *a += b / cols.len() as f64;
            }
        }
        m
    }

    #[test]
    fn zero_backward_params_average_columns() {
        let s = EmbeddingScheme::backward(7);
        let p = embed_backward_prompt(&s, &Tree::canonical(2), 0).unwrap();
        let st = StepState::new(&p);
        let out = step_backward(&BackwardParams::zeros(&s), &st);
        let mean = column_mean(&p.columns);
        for (a, b) in out.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_forward_params_average_swapped_columns() {
        let s = EmbeddingScheme::forward(7);
        let p = embed_forward_prompt(&s, &Tree::canonical(2), 0).unwrap();
        let out = step_forward(&ForwardParams::zeros(&s), &StepState::new(&p));
        let mean = column_mean(&p.columns);
        let d1 = s.d1;
        for i in 0..d1 {
            assert!((out[i] - mean[d1 + i]).abs() < 1e-15);
            assert!((out[d1 + i] - mean[i]).abs() < 1e-15);
        }
        for i in 2 * d1..s.dim() {
            assert!((out[i] - mean[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = EmbeddingScheme::backward(15);
        let mut b = BackwardParams::zeros(&s);
        b.b.data.iter_mut().for_each(|v| *v = rng.gen_range(-5.0..5.0));
        let t = crate::trees::sample_perfect_tree(3, 15, 2).unwrap();
        let p = embed_backward_prompt(&s, &t, 3).unwrap();
        let (_, att) = step_with_attention(&Params::Backward(b), &StepState::new(&p));
        assert!((att.heads[0].iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn constructed_backward_first_step() {
        // explicit weights: the (2,4) edge scores alpha, everything else 0,
        // over 8 columns
        let s = EmbeddingScheme::backward(7);
        let p = embed_backward_prompt(&s, &Tree::canonical(2), 5).unwrap();
        let b = construct_backward(&s, 30.0);
        let out = step_backward(&b, &StepState::new(&p));
        let expect = s.column(2, 4, None);
        let w_self = 30f64.exp() / (30f64.exp() + 7.0);
        for (a, e) in out.iter().zip(&expect) {
            assert!((a - e).abs() < 1e-3);
        }
        assert!((out[s.d1 + 3] - w_self).abs() < 1e-15);
    }

    #[test]
    fn construct_backward_is_scaled_identity() {
        let s = EmbeddingScheme::backward(5);
        let b = construct_backward(&s, 7.5);
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(b.b.get(i, j), if i == j { 7.5 } else { 0.0 });
            }
        }
        assert!(construct_backward(&s, 0.0).b.data.iter().all(|&v| v == 0.0));
        let h = extract_h(&construct_backward(&s, 5.0));
        assert_eq!((h.mu, h.nu, h.diag_spread, h.offdiag_spread), (5.0, 0.0, 0.0, 0.0));
        let h = extract_h(&BackwardParams::zeros(&s));
        assert_eq!((h.mu, h.nu, h.diag_spread, h.offdiag_spread), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn construct_forward_patterns() {
        let s = EmbeddingScheme::forward(10);
        let k = ForwardConstruction::default();
        let p = construct_forward(&s, &k).unwrap();
        for j in 1..=10 {
            assert_eq!(p.b1.get(0, j), -30.0);
            assert_eq!(p.c1.get(0, j), 30.0);
            for i in 1..=10 {
                assert_eq!(p.b1.get(i, j), 0.0);
                assert_eq!(p.c1.get(i, j), 0.0);
                let d = if i == j { 30.0 } else { 0.0 };
                assert_eq!(p.b2.get(i, j), d);
                assert_eq!(p.c2.get(i, j), d);
            }
        }
        assert_eq!(p.b3.data, vec![-0.3 * 30.0, 0.2 * 30.0, 0.3 * 30.0, -0.2 * 30.0]);
        assert_eq!(p.c3.data, vec![0.3 * 30.0, -0.3 * 30.0, -0.3 * 30.0, 0.3 * 30.0]);

        let zero = construct_forward(&s, &ForwardConstruction { alpha1: 0.0, alpha2: 0.0, ..k }).unwrap();
        assert!(Params::Forward(zero).max_abs() == 0.0);
    }

    #[test]
    fn construct_forward_rejects_out_of_range() {
        let s = EmbeddingScheme::forward(10);
        let base = ForwardConstruction::default();
        for bad in [
            ForwardConstruction { a: 0.0, ..base },
            ForwardConstruction { a: 1.5, ..base },
            ForwardConstruction { b1: 0.0, ..base },
            ForwardConstruction { b2: 0.5, ..base },
            ForwardConstruction { c1: -1.0, ..base },
            ForwardConstruction { c2: 0.5, ..base },
        ] {
            assert!(matches!(construct_forward(&s, &bad), Err(Error::ParamRange(_))), "{bad:?}");
        }
    }

    #[test]
    fn extract_uv_inverts_construction() {
        let s = EmbeddingScheme::forward(25);
        let k = ForwardConstruction::default();
        let stats = extract_uv(&construct_forward(&s, &k).unwrap());
        let back = stats.construction().unwrap();
        assert_eq!(back.alpha1, k.alpha1);
        assert_eq!(back.alpha2, k.alpha2);
        for (got, want) in [(back.a, k.a), (back.b1, k.b1), (back.b2, k.b2), (back.c1, k.c1), (back.c2, k.c2)] {
            assert!((got - want).abs() <= 4.0 * f64::EPSILON * want.abs(), "{got} vs {want}");
        }
        assert_eq!(stats.b(), Some(1.0));

        let zero = extract_uv(&ForwardParams::zeros(&s));
        assert_eq!(zero.mu1, 0.0);
        assert_eq!(zero.u3, [[0.0; 2]; 2]);
        assert!(zero.construction().is_none());
    }

    #[test]
    fn rollout_single_step_matches_step() {
        let s = EmbeddingScheme::forward(7);
        let p = embed_forward_prompt(&s, &Tree::canonical(2), 0).unwrap();
        let params = Params::Forward(construct_forward(&s, &ForwardConstruction::default()).unwrap());
        let r = rollout(&params, &p, 1);
        assert_eq!(r.col(0), step(&params, &StepState::new(&p)).as_slice());
    }

    #[test]
    fn constructed_rollouts_reach_targets() {
        let t = Tree::canonical(3);
        let sb = EmbeddingScheme::backward(15);
        let pb = Params::Backward(construct_backward(&sb, 30.0));
        let out = rollout(&pb, &embed_backward_prompt(&sb, &t, 1).unwrap(), 3);
        assert!(out.max_abs_diff(&target_backward(&sb, &t).unwrap().columns) < 1e-3);

        let sf = EmbeddingScheme::forward(15);
        let pf = Params::Forward(construct_forward(&sf, &ForwardConstruction::default()).unwrap());
        let out = rollout(&pf, &embed_forward_prompt(&sf, &t, 1).unwrap(), 6);
        let tgt = target_forward(&sf, &t).unwrap().columns;
        assert!(out.max_abs_diff(&tgt) < 1e-3, "{}", out.max_abs_diff(&tgt));
        // stage flips to s_f at step m + 1
        let z = sf.z(out.col(3));
        assert!((z[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn head_one_swaps_blocks() {
        // a single sharp key: the output x-block must equal that key's y-block
        let s = EmbeddingScheme::forward(7);
        let p = embed_forward_prompt(&s, &Tree::canonical(2), 2).unwrap();
        let params = construct_forward(&s, &ForwardConstruction::default()).unwrap();
        let st = StepState::new(&p);
        let (out, att) = step_with_attention(&Params::Forward(params), &st);
        let d1 = s.d1;
        let mut x_expect = vec![0.0; d1];
        let mut y_expect = vec![0.0; d1];
        for (c, &w) in st.columns.iter().zip(&att.heads[0]) {
            for i in 0..d1 {
                x_expect[i] += w * s.y(c)[i];
                y_expect[i] += w * s.x(c)[i];
            }
        }
        for i in 0..d1 {
            assert!((out[i] - x_expect[i]).abs() < 1e-15);
            assert!((out[d1 + i] - y_expect[i]).abs() < 1e-15);
        }
    }
}
