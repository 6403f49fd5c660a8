//! SGD on fresh batches of perfect binary trees, from zero initialization.
//!
//! Every random draw is a pure function of a named seed and its position
//! (step, sample index), so a run can be resumed from a checkpoint without
//! any generator state and still reproduce an uninterrupted run bit for bit.
//!
//! Trace rows are taken at every step `t` divisible by `eval_every`, from
//! the parameters after `t` updates; the row's training loss is that of
//! batch `t` at those parameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::embedding::{EmbeddingScheme, Task};
use crate::error::{Error, Result};
use crate::eval::corpus_test_loss;
use crate::grad::{batch_loss_and_grad, mean_loss, Sample};
use crate::model::{extract_h, extract_uv, Params, UvStats};
use crate::trees::{perfect_tree_size, sample_perfect_tree, sample_test_tree, TestTreeConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    /// depth of the training trees
    pub m: u32,
    /// vocabulary size
    pub s: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// total number of updates, counted from step 0 also when resuming
    pub max_steps: u64,
    pub eval_every: u64,
    pub test_set_size: usize,
    pub data_seed: u64,
    /// unused with zero initialization, kept so every run names all seeds
    pub init_seed: u64,
    pub test_seed: u64,
    /// fresh training trees used to measure the final training loss
    pub final_eval_size: usize,
    /// training-loss gate for asserting the generalization bounds
    pub eps0: f64,
    pub test_trees: TestTreeConfig,
    pub trace_path: Option<PathBuf>,
    pub checkpoint_path: Option<PathBuf>,
    pub report_path: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn backward() -> Self {
        Self {
            task: Task::Backward,
            m: 4,
            s: 31,
            batch_size: 256,
            learning_rate: 1.0,
            max_steps: 3000,
            eval_every: 50,
            test_set_size: 1024,
            data_seed: 1,
            init_seed: 2,
            test_seed: 3,
            final_eval_size: 1024,
            eps0: 0.05,
            test_trees: TestTreeConfig::for_vocab(31),
            trace_path: None,
            checkpoint_path: None,
            report_path: None,
        }
    }

    pub fn forward() -> Self {
        Self {
            task: Task::Forward,
            m: 3,
            s: 25,
            learning_rate: 0.2,
            max_steps: 20000,
            eval_every: 10,
            test_trees: TestTreeConfig::for_vocab(25),
            ..Self::backward()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Backward => Self::backward(),
            Task::Forward => Self::forward(),
        }
    }

    pub fn scheme(&self) -> EmbeddingScheme {
        EmbeddingScheme::new(self.task, self.s)
    }

    /// Node count of the training trees.
    pub fn n(&self) -> usize {
        perfect_tree_size(self.m)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.m < 2 || self.m > 20 {
            return fail(format!("m = {} outside 2..=20", self.m));
        }
        if self.s < self.n() {
            return fail(format!("S = {} is smaller than 2^(m+1) - 1 = {}", self.s, self.n()));
        }
        if self.batch_size < 1 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate = {} must be finite and non-negative", self.learning_rate));
        }
        if self.eval_every < 1 {
            return fail("eval_every must be at least 1".into());
        }
        if self.test_set_size < 1 || self.final_eval_size < 1 {
            return fail("test_set_size and final_eval_size must be at least 1".into());
        }
        if self.test_trees.max_nodes > self.s {
            return fail(format!("test_max_nodes = {} exceeds S = {}", self.test_trees.max_nodes, self.s));
        }
        if !(self.eps0 > 0.0) {
            return fail("eps0 must be positive".into());
        }
        Ok(())
    }
}

/// splitmix64 finalizer over a seed and two stream coordinates.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F).rotate_left(17);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TREE_STREAM: u64 = 0x7472_6565;
const PERM_STREAM: u64 = 0x7065_726d;
/// batch "step" used for the final training-loss measurement
const FINAL_STEP: u64 = u64::MAX;

/// Training batch of step `t`.
pub fn training_batch(cfg: &ExperimentConfig, t: u64) -> Result<Vec<Sample>> {
    (0..cfg.batch_size as u64)
        .map(|i| {
            Ok(Sample {
                tree: sample_perfect_tree(cfg.m, cfg.s, mix_seed(cfg.data_seed ^ TREE_STREAM, t, i))?,
                perm_seed: mix_seed(cfg.data_seed ^ PERM_STREAM, t, i),
            })
        })
        .collect()
}

/// Fixed test corpus drawn from `test_seed`.
pub fn test_corpus(cfg: &ExperimentConfig) -> Result<Vec<Sample>> {
    (0..cfg.test_set_size as u64)
        .map(|i| {
            Ok(Sample {
                tree: sample_test_tree(&cfg.test_trees, cfg.s, mix_seed(cfg.test_seed ^ TREE_STREAM, 0, i))?,
                perm_seed: mix_seed(cfg.test_seed ^ PERM_STREAM, 0, i),
            })
        })
        .collect()
}

/// Teacher-forced loss on `final_eval_size` fresh training trees.
pub fn final_train_loss(params: &Params, cfg: &ExperimentConfig) -> Result<f64> {
    let batch = ExperimentConfig {
        batch_size: cfg.final_eval_size,
        ..cfg.clone()
    };
    mean_loss(params, &training_batch(&batch, FINAL_STEP)?)
}

/// Scalars tracked per trace row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tracked {
    H { h11: f64, h12: f64 },
    Uv(UvStats),
}

impl Tracked {
    pub fn of(params: &Params) -> Self {
        match params {
            Params::Backward(p) => {
                let h = extract_h(p);
                Tracked::H { h11: h.mu, h12: h.nu }
            }
            Params::Forward(p) => Tracked::Uv(extract_uv(p)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub train_loss: f64,
    pub test_loss: f64,
    pub tracked: Tracked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsTrace {
    pub task: Task,
    pub rows: Vec<TraceRow>,
}

pub const BACKWARD_COLUMNS: [&str; 5] = ["step", "train_loss", "test_loss", "H_1_1", "H_1_2"];
pub const FORWARD_COLUMNS: [&str; 19] = [
    "step",
    "train_loss",
    "test_loss",
    "mu1",
    "nu1",
    "nu11",
    "nu12",
    "u1_row0_mean",
    "u3_00",
    "u3_01",
    "u3_10",
    "u3_11",
    "mu2",
    "v3_00",
    "v3_01",
    "v3_10",
    "v3_11",
    "nu21",
    "nu22",
];

impl TraceRow {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), self.train_loss.to_string(), self.test_loss.to_string()];
        let vals: Vec<f64> = match &self.tracked {
            Tracked::H { h11, h12 } => vec![*h11, *h12],
            Tracked::Uv(u) => vec![
                u.mu1,
                u.nu1,
                u.nu11,
                u.nu12,
                u.u1_row0_mean,
                u.u3[0][0],
                u.u3[0][1],
                u.u3[1][0],
                u.u3[1][1],
                u.mu2,
                u.v3[0][0],
                u.v3[0][1],
                u.v3[1][0],
                u.v3[1][1],
                u.nu21,
                u.nu22,
            ],
        };
        r.extend(vals.iter().map(|v| v.to_string()));
        r
    }
}

impl DynamicsTrace {
    pub fn columns(&self) -> &'static [&'static str] {
        match self.task {
            Task::Backward => &BACKWARD_COLUMNS,
            Task::Forward => &FORWARD_COLUMNS,
        }
    }

    /// Writes the trace; with `append`, rows go after an existing file's
    /// rows and the header is only written for a new file.
    pub fn write_csv(&self, path: &Path, append: bool) -> Result<()> {
        let existing = append && path.exists() && std::fs::metadata(path)?.len() > 0;
        let file = std::fs::OpenOptions::new()
            .create(true)
            .write(true)
            .append(existing)
            .truncate(!existing)
            .open(path)?;
        let mut w = csv::Writer::from_writer(file);
        if !existing {
            w.write_record(self.columns())?;
        }
        for row in &self.rows {
            w.write_record(row.record())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Values of one column by its CSV name.
    pub fn series(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self
            .columns()
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))?;
        Ok(self.rows.iter().map(|r| r.record()[idx].parse().expect("numeric")).collect())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Params,
    pub trace: DynamicsTrace,
    pub checkpoint: Checkpoint,
    /// teacher-forced loss on fresh training trees at the final parameters
    pub final_train_loss: f64,
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    run(cfg, None, &mut |_| {})
}

/// Continues a run from `ckpt` up to `cfg.max_steps` total updates.
pub fn resume(ckpt: &Checkpoint, cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    run(cfg, Some(ckpt), &mut |_| {})
}

/// Training loop; `observe` sees every trace row as it is recorded.
pub fn run(cfg: &ExperimentConfig, start: Option<&Checkpoint>, observe: &mut dyn FnMut(&TraceRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut params, t0) = match start {
        Some(c) => (c.params_for(cfg.task, cfg.s)?, c.step),
        None => (Params::zeros(&cfg.scheme()), 0),
    };
    if t0 > cfg.max_steps {
        return Err(Error::Config(format!(
            "checkpoint is at step {t0}, beyond max_steps {}",
            cfg.max_steps
        )));
    }
    let corpus = test_corpus(cfg)?;
    let mut rows = Vec::new();
    for t in t0..=cfg.max_steps {
        let record = t % cfg.eval_every == 0 && (t > t0 || start.is_none());
        if t == cfg.max_steps && !record {
            break;
        }
        let batch = training_batch(cfg, t)?;
        let (loss, grad) = batch_loss_and_grad(&params, &batch)?;
        if !loss.is_finite() || !grad.grads.all_finite() {
            let dump = dump_path(cfg);
            save_checkpoint(&Checkpoint::new(&params, t), &dump)?;
            return Err(Error::NonFinite {
                step: t,
                what: format!("loss {loss}; last good parameters saved to {}", dump.display()),
            });
        }
        if record {
            let row = TraceRow {
                step: t,
                train_loss: loss,
                test_loss: corpus_test_loss(&params, &corpus)?,
                tracked: Tracked::of(&params),
            };
            observe(&row);
            rows.push(row);
        }
        if t < cfg.max_steps {
            params.axpy(-cfg.learning_rate, &grad.grads)?;
        }
    }
    let checkpoint = Checkpoint::new(&params, cfg.max_steps);
    let final_train_loss = final_train_loss(&params, cfg)?;
    Ok(TrainOutcome {
        params,
        trace: DynamicsTrace { task: cfg.task, rows },
        checkpoint,
        final_train_loss,
    })
}

fn dump_path(cfg: &ExperimentConfig) -> PathBuf {
    match &cfg.checkpoint_path {
        Some(p) => {
            let mut s = p.clone().into_os_string();
            s.push(".nonfinite.json");
            PathBuf::from(s)
        }
        None => std::env::temp_dir().join(format!("cotree-{}-nonfinite.json", cfg.task)),
    }
}

/// Centered moving average with the window clipped at the ends.
pub fn smooth(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = i.saturating_sub((w - 1) / 2);
            let hi = (lo + w).min(xs.len());
            let lo = hi.saturating_sub(w);
            xs[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Sign changes of the first difference, ignoring steps with `|dx| <= tol`.
pub fn derivative_sign_changes(xs: &[f64], tol: f64) -> usize {
    let mut last = 0i8;
    let mut changes = 0;
    for w in xs.windows(2) {
        let d = w[1] - w[0];
        let s = if d > tol {
            1
        } else if d < -tol {
            -1
        } else {
            continue;
        };
        if last != 0 && s != last {
            changes += 1;
        }
        last = s;
    }
    changes
}
