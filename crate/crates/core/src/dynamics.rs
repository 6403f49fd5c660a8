//! Expected gradient dynamics of the backward model from zero initialization.
//!
//! Under zero init and a label-symmetric training distribution `H` stays of
//! the form `mu I + nu (J - I)`, so gradient descent on the expected loss
//! reduces to a two-scalar iteration. Conditioning on the query node, the
//! teacher-forced context of step `k` is fully determined by counts:
//!
//! * the query's own edge column scores `mu`;
//! * every other column with a node in `y` scores `nu` (there are
//!   `N + k - 2` of them, path nodes emitted as targets appear twice);
//! * the goal column `(a_g, a_0)` scores 0.
//!
//! From those weights the output, the residual and the per-column softmax
//! gradient follow in closed form; [`monte_carlo_grad`] checks them against
//! backpropagation on sampled trees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::loss_and_grad_sample;
use crate::linalg::Mat;
use crate::model::{BackwardParams, Params};
use crate::trees::{perfect_tree_size, sample_perfect_tree_with};

/// Two-scalar state of the symmetric backward model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetricState {
    pub mu: f64,
    pub nu: f64,
    pub m: u32,
    pub s: usize,
}

impl SymmetricState {
    pub fn new(mu: f64, nu: f64, m: u32, s: usize) -> Result<Self> {
        let st = Self { mu, nu, m, s };
        if m < 1 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        if s < st.n() {
            return Err(Error::Config(format!("S = {s} is smaller than N = {}", st.n())));
        }
        Ok(st)
    }

    /// Number of tree nodes.
    pub fn n(&self) -> usize {
        perfect_tree_size(self.m)
    }

    /// `B = mu I + nu (J - I)`.
    pub fn params(&self) -> BackwardParams {
        BackwardParams {
            b: Mat::from_fn(self.s, self.s, |i, j| if i == j { self.mu } else { self.nu }),
        }
    }

    /// Attention on the query's own edge at step 1.
    pub fn alpha_hat(&self) -> f64 {
        self.attention(1).jj
    }

    /// Attention on the query's own edge at step `m`.
    pub fn alpha_check(&self) -> f64 {
        self.attention(self.m as usize).jj
    }

    fn attention(&self, k: usize) -> AttentionProfile {
        // shift by the largest score for stability
        let n = self.n() as f64;
        let top = self.mu.max(self.nu).max(0.0);
        let (em, en, e0) = ((self.mu - top).exp(), (self.nu - top).exp(), (-top).exp());
        let z = em + (n + k as f64 - 2.0) * en + e0;
        AttentionProfile {
            jj: em / z,
            off_path: en / z,
            on_path_double: 2.0 * en / z,
            zero: e0 / z,
        }
    }
}

/// Attention mass of the teacher-forced step-`k` query on each class of key.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionProfile {
    /// the query's own edge column
    pub jj: f64,
    /// a node appearing once as a child
    pub off_path: f64,
    /// a path node already emitted, counted twice
    pub on_path_double: f64,
    /// the goal column, whose key block is the zero vector
    pub zero: f64,
}

pub fn attention_profile(state: &SymmetricState, k: usize) -> Result<AttentionProfile> {
    if k < 1 || k > state.m as usize {
        return Err(Error::Config(format!("step {k} outside 1..={}", state.m)));
    }
    Ok(state.attention(k))
}

/// Expected gradient with respect to a diagonal and an off-diagonal entry
/// of `B`, plus the loss, all per tree (summed over steps).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpectedGrad {
    pub dmu: f64,
    pub dnu: f64,
    pub loss: f64,
}

pub fn expected_grad_backward(st: &SymmetricState) -> ExpectedGrad {
    let n = st.n() as f64;
    let s = st.s as f64;
    let internal = (1u64 << st.m) as f64 - 1.0;
    let (mut diag, mut off, mut loss) = (0.0, 0.0, 0.0);
    for k in 1..=st.m as usize {
        let a = st.attention(k);
        let (w, u, z0) = (a.jj, a.off_path, a.zero);
        let kf = k as f64;
        // y-block: query w, k-1 emitted path nodes 2u, remaining N-k nodes u
        let y_sq = w * w + 4.0 * (kf - 1.0) * u * u + (n - kf) * u * u;
        // x-block: goal z0, parent of query w+u, emitted parents 3u, other internal 2u
        let x_sq = z0 * z0 + (w + u).powi(2) + 9.0 * (kf - 1.0) * u * u + 4.0 * (internal - kf) * u * u;
        let o_dot = (w + u) + w;
        let r_out = x_sq + y_sq - o_dot;
        // residual against the query's own edge and against the goal column
        let r_own = (w + u - 1.0) + (w - 1.0);
        let r_goal = z0;
        let g_own = w * (r_own - r_out);
        // softmax gradients sum to zero; the goal column has no key
        let g_all_keys = -z0 * (r_goal - r_out);
        diag += g_own;
        off += g_all_keys - g_own;
        loss += 0.5 * (x_sq + y_sq - 2.0 * o_dot + 2.0);
    }
    ExpectedGrad {
        dmu: diag / s,
        dnu: off / (s * (s - 1.0)),
        loss,
    }
}

/// One row of the simulated trajectory; `t` is the state before update `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsRow {
    pub t: u64,
    pub mu: f64,
    pub nu: f64,
    pub alpha_hat: f64,
    pub alpha_check: f64,
    pub loss_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTrace {
    pub m: u32,
    pub s: usize,
    pub eta: f64,
    pub rows: Vec<DynamicsRow>,
}

/// Gradient descent on the expected loss from `mu = nu = 0`, recording
/// `steps + 1` rows.
pub fn simulate_expected_dynamics(eta: f64, steps: u64, m: u32, s: usize) -> Result<SimTrace> {
    simulate_until(eta, steps, m, s, |_| false)
}

/// Same as [`simulate_expected_dynamics`] but stops early once `stop` holds
/// for a recorded row.
pub fn simulate_until(eta: f64, steps: u64, m: u32, s: usize, mut stop: impl FnMut(&DynamicsRow) -> bool) -> Result<SimTrace> {
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::Config("eta must be finite and non-negative".into()));
    }
    let mut st = SymmetricState::new(0.0, 0.0, m, s)?;
    let mut rows = Vec::with_capacity(steps.min(1 << 20) as usize + 1);
    for t in 0..=steps {
        let g = expected_grad_backward(&st);
        let row = DynamicsRow {
            t,
            mu: st.mu,
            nu: st.nu,
            alpha_hat: st.alpha_hat(),
            alpha_check: st.alpha_check(),
            loss_proxy: g.loss,
        };
        rows.push(row);
        if stop(&row) {
            break;
        }
        st.mu -= eta * g.dmu;
        st.nu -= eta * g.dnu;
        if !(st.mu.is_finite() && st.nu.is_finite()) {
            return Err(Error::NonFinite {
                step: t,
                what: "expected dynamics".into(),
            });
        }
    }
    Ok(SimTrace { m, s, eta, rows })
}

/// Phase markers: the last step at which each threshold still holds, and
/// whether the trace goes past it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phases {
    pub t1: Option<u64>,
    pub t1_crossed: bool,
    pub t2: Option<u64>,
    pub t2_crossed: bool,
    pub t2_threshold: f64,
}

pub fn t2_threshold(epsilon: f64, m: u32) -> f64 {
    1.0 - (epsilon / (2.0 * m as f64)).sqrt()
}

/// `T1 = max{t : alpha_hat <= 1/2}`, `T2 = max{t : alpha_check <= 1 - sqrt(eps / 2m)}`.
pub fn detect_phases(trace: &SimTrace, epsilon: f64) -> Result<Phases> {
    if !(epsilon > 0.0) {
        return Err(Error::Config("epsilon must be positive".into()));
    }
    let thr = t2_threshold(epsilon, trace.m);
    let last = |f: &dyn Fn(&DynamicsRow) -> bool| trace.rows.iter().rev().find(|r| f(r)).map(|r| r.t);
    let t1 = last(&|r| r.alpha_hat <= 0.5);
    let t2 = last(&|r| r.alpha_check <= thr);
    let end = trace.rows.last().map(|r| r.t);
    Ok(Phases {
        t1,
        t1_crossed: t1.is_some() && t1 != end,
        t2,
        t2_crossed: t2.is_some() && t2 != end,
        t2_threshold: thr,
    })
}

/// Upper bound on `T1` for gradient descent with rate `eta`.
pub fn t1_upper_bound(m: u32, s: usize, eta: f64) -> f64 {
    let n = perfect_tree_size(m) as f64;
    6.0 * s as f64 * (n + m as f64) / (m as f64 * eta) * ((n + 1.0) / 2.0).ln()
}

/// Monte Carlo estimate of the expected gradient at a symmetric state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub samples: usize,
    /// mean over samples of the per-sample diagonal mean
    pub dmu: f64,
    pub dmu_se: f64,
    /// mean over samples of the per-sample off-diagonal mean
    pub dnu: f64,
    pub dnu_se: f64,
    /// mean of the single entry `G[0][0]`
    pub g00: f64,
    pub g00_se: f64,
    /// mean of the single entry `G[1][0]`
    pub g10: f64,
    pub g10_se: f64,
    pub loss: f64,
}

#[derive(Default)]
struct Moments {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn se(&self) -> f64 {
        if self.n < 2.0 {
            return f64::INFINITY;
        }
        (self.m2 / (self.n - 1.0) / self.n).sqrt()
    }
}

/// Averages backpropagated gradients over `samples` random perfect trees at
/// the symmetric state.
pub fn monte_carlo_grad(st: &SymmetricState, samples: usize, seed: u64) -> Result<McEstimate> {
    let params = Params::Backward(st.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = st.s;
    let (mut diag, mut off, mut e00, mut e10, mut loss) =
        (Moments::default(), Moments::default(), Moments::default(), Moments::default(), Moments::default());
    for i in 0..samples {
        let tree = sample_perfect_tree_with(&mut rng, st.m, s)?;
        let (l, g) = loss_and_grad_sample(&params, &tree, seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))?;
        let Params::Backward(g) = g.grads else { unreachable!() };
        let tr: f64 = (0..s).map(|i| g.b.get(i, i)).sum();
        let total: f64 = g.b.data.iter().sum();
        diag.push(tr / s as f64);
        off.push((total - tr) / (s * (s - 1)) as f64);
        e00.push(g.b.get(0, 0));
        e10.push(g.b.get(1, 0));
        loss.push(l);
    }
    Ok(McEstimate {
        samples,
        dmu: diag.mean,
        dmu_se: diag.se(),
        dnu: off.mean,
        dnu_se: off.se(),
        g00: e00.mean,
        g00_se: e00.se(),
        g10: e10.mean,
        g10_se: e10.se(),
        loss: loss.mean,
    })
}

/// Writes `t,mu,nu,alpha_hat,alpha_check,loss_proxy`.
pub fn write_trace_csv(trace: &SimTrace, path: &std::path::Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "mu", "nu", "alpha_hat", "alpha_check", "loss_proxy"])?;
    for r in &trace.rows {
        w.write_record([
            r.t.to_string(),
            r.mu.to_string(),
            r.nu.to_string(),
            r.alpha_hat.to_string(),
            r.alpha_check.to_string(),
            r.loss_proxy.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_examples() {
        let st = SymmetricState::new(0.0, 0.0, 3, 15).unwrap();
        assert!((attention_profile(&st, 1).unwrap().jj - 1.0 / 16.0).abs() < 1e-15);
        assert!((attention_profile(&st, 3).unwrap().jj - 1.0 / 18.0).abs() < 1e-15);
        let st = SymmetricState::new(5.0, 0.0, 3, 15).unwrap();
        let e5 = 5f64.exp();
        assert!((attention_profile(&st, 1).unwrap().jj - e5 / (14.0 + e5 + 1.0)).abs() < 1e-15);
        assert!(attention_profile(&st, 0).is_err());
        assert!(attention_profile(&st, 4).is_err());
    }

    #[test]
    fn profile_mass_adds_up() {
        let st = SymmetricState::new(1.3, -0.4, 3, 20).unwrap();
        for k in 1..=3 {
            let a = st.attention(k);
            let n = st.n() as f64;
            // N-2 other edges + root column, previous k-1 targets double the path nodes
            let total = a.jj + (n - 1.0 - (k as f64 - 1.0)) * a.off_path + (k as f64 - 1.0) * a.on_path_double + a.zero;
            assert!((total - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn diagonal_grows_from_zero() {
        let g = expected_grad_backward(&SymmetricState::new(0.0, 0.0, 3, 15).unwrap());
        assert!(g.dmu < 0.0);
    }

    #[test]
    fn closed_form_matches_backprop_on_single_trees() {
        // the symmetrized per-tree gradient does not depend on the labels
        for (mu, nu) in [(0.0, 0.0), (2.0, 0.3), (4.0, -0.2)] {
            let st = SymmetricState::new(mu, nu, 3, 17).unwrap();
            let mc = monte_carlo_grad(&st, 20, 5).unwrap();
            let e = expected_grad_backward(&st);
            assert!((mc.dmu - e.dmu).abs() < 1e-12, "{mu} {nu}");
            assert!((mc.dnu - e.dnu).abs() < 1e-12, "{mu} {nu}");
            assert!((mc.loss - e.loss).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rate_keeps_state() {
        let tr = simulate_expected_dynamics(0.0, 10, 3, 15).unwrap();
        assert_eq!(tr.rows.len(), 11);
        assert!(tr.rows.iter().all(|r| r.mu == 0.0 && r.nu == 0.0));
        let ph = detect_phases(&tr, 0.01).unwrap();
        assert_eq!((ph.t1, ph.t2), (Some(10), Some(10)));
        assert!(!ph.t1_crossed && !ph.t2_crossed);
        assert!(detect_phases(&tr, 0.0).is_err());
    }
}
