//! Command-line experiment runner.
//!
//! Exit codes: 0 ok, 1 usage or configuration error, 2 a checked property
//! failed, 3 I/O or data error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{parse_config, parse_override};
use crate::dynamics::{detect_phases, simulate_expected_dynamics, t1_upper_bound, write_trace_csv};
use crate::embedding::{EmbeddingScheme, Task};
use crate::error::{Error, Result};
use crate::eval::{bound_check, generalization_report, write_report_csv, TrainShape};
use crate::grad::{finite_diff_grad, grad_sample, max_rel_error, FdStep};
use crate::model::{construct_backward, construct_forward, ForwardConstruction, Params};
use crate::plot::emit_plots;
use crate::training::{final_train_loss, mix_seed, run, test_corpus, ExperimentConfig};
use crate::trees::{perfect_tree_size, sample_perfect_tree, sample_test_tree, TestTreeConfig};

#[derive(Parser, Debug)]
#[command(name = "cotree", version, about = "Chain-of-thought path finding in trees with one-layer attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the backward (goal to root) model with SGD
    TrainBackward(TrainArgs),
    /// Train the two-stage forward model with SGD
    TrainForward(TrainArgs),
    /// Check that the explicit constructions solve a random corpus
    ConstructVerify(ConstructArgs),
    /// Simulate expected gradient descent of the symmetric backward model
    DynamicsSim(DynamicsArgs),
    /// Compare analytic and finite-difference gradients
    GradCheck(GradArgs),
    /// Evaluate a checkpoint on the test corpus and check the loss bounds
    Generalize(GeneralizeArgs),
    /// Render SVG charts from trace CSV files
    Plot(PlotArgs),
}

#[derive(Args, Debug, Default)]
pub struct ConfigArgs {
    /// `key = value` config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set max_steps=500` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub max_steps: Option<u64>,
}

impl ConfigArgs {
    fn load(&self, task: Task) -> Result<ExperimentConfig> {
        let mut ov = self.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
        if let Some(lr) = self.lr {
            ov.push(("learning_rate".into(), lr.to_string()));
        }
        if let Some(n) = self.max_steps {
            ov.push(("max_steps".into(), n.to_string()));
        }
        parse_config(self.config.as_deref(), task, &ov)
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Continue from this checkpoint; trace rows are appended
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Do not print trace rows
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct ConstructArgs {
    #[arg(long, default_value = "backward")]
    pub task: Task,
    #[arg(long = "S", default_value_t = 31)]
    pub s: usize,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 2)]
    pub min_depth: usize,
    #[arg(long, default_value_t = 4)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Backward scale
    #[arg(long, default_value_t = 30.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 30.0)]
    pub alpha1: f64,
    #[arg(long, default_value_t = 30.0)]
    pub alpha2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    #[arg(long, default_value_t = 0.3)]
    pub b1: f64,
    #[arg(long, default_value_t = 0.2)]
    pub b2: f64,
    #[arg(long, default_value_t = 0.3)]
    pub c1: f64,
    #[arg(long, default_value_t = 0.3)]
    pub c2: f64,
}

#[derive(Args, Debug)]
pub struct DynamicsArgs {
    #[arg(long, default_value_t = 3)]
    pub m: u32,
    #[arg(long = "S", default_value_t = 15)]
    pub s: usize,
    #[arg(long, default_value_t = 1.0)]
    pub eta: f64,
    #[arg(long, default_value_t = 0.01)]
    pub eps: f64,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value = "dynamics.csv")]
    pub out: PathBuf,
    /// Sidecar JSON with the phase markers; defaults to `<out>.phases.json`
    #[arg(long)]
    pub phases: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradArgs {
    #[arg(long, default_value = "backward")]
    pub task: Task,
    #[arg(long, default_value_t = 3)]
    pub m: u32,
    #[arg(long = "S", default_value_t = 15)]
    pub s: usize,
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameters are drawn uniformly from `[-spread, spread]`
    #[arg(long, default_value_t = 2.0)]
    pub spread: f64,
    /// Step `h = h_scale * (1 + |entry|)`
    #[arg(long, default_value_t = 2e-2)]
    pub h_scale: f64,
    /// Richardson extrapolation levels over `h, h/2, ...`; 0 gives plain
    /// central differences (pair with `--h-scale 1e-5`)
    #[arg(long, default_value_t = 2)]
    pub richardson: u32,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct GeneralizeArgs {
    /// Checkpoint to evaluate; the task is read from it
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Training loss used in the bound; measured on fresh training trees if omitted
    #[arg(long)]
    pub eps: Option<f64>,
    /// Report CSV; overrides `report_path`
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Trace CSV files
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    pub out_dir: PathBuf,
}

/// Result of a command that ran to completion.
#[derive(Debug, PartialEq)]
pub enum Outcome {
    Ok,
    /// a checked property did not hold
    Failed(String),
}

pub fn exit_code(r: &Result<Outcome>) -> i32 {
    match r {
        Ok(Outcome::Ok) => 0,
        Ok(Outcome::Failed(_)) => 2,
        Err(Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) | Error::Parse(_) | Error::MissingColumn(_)) => 3,
        Err(Error::NonFinite { .. }) => 2,
        Err(_) => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let r = execute(&cli.command);
    match &r {
        Ok(Outcome::Failed(msg)) => eprintln!("check failed: {msg}"),
        Err(e) => eprintln!("error: {e}"),
        _ => {}
    }
    exit_code(&r)
}

pub fn execute(cmd: &Command) -> Result<Outcome> {
    match cmd {
        Command::TrainBackward(a) => train_cmd(Task::Backward, a),
        Command::TrainForward(a) => train_cmd(Task::Forward, a),
        Command::ConstructVerify(a) => construct_verify(a),
        Command::DynamicsSim(a) => dynamics_sim(a),
        Command::GradCheck(a) => grad_check(a),
        Command::Generalize(a) => generalize(a),
        Command::Plot(a) => {
            for p in emit_plots(&a.inputs, &a.out_dir)? {
                println!("{}", p.display());
            }
            Ok(Outcome::Ok)
        }
    }
}

fn train_cmd(task: Task, a: &TrainArgs) -> Result<Outcome> {
    let cfg = a.cfg.load(task)?;
    let start = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let quiet = a.quiet;
    let out = run(&cfg, start.as_ref(), &mut |r| {
        if !quiet {
            println!("step {:>7}  train {:.6}  test {:.6}", r.step, r.train_loss, r.test_loss);
        }
    })?;
    if let Some(p) = &cfg.trace_path {
        out.trace.write_csv(p, start.is_some())?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        save_checkpoint(&out.checkpoint, p)?;
    }
    println!("final training loss {:.6}", out.final_train_loss);
    report_and_check(&cfg, &out.params, out.final_train_loss, cfg.report_path.as_deref(), false)
}

/// Runs the test corpus, writes the report and checks the bound when the
/// training loss is below the gate (only enforced if `enforce`).
fn report_and_check(cfg: &ExperimentConfig, params: &Params, eps: f64, report: Option<&Path>, enforce: bool) -> Result<Outcome> {
    let rep = generalization_report(params, &test_corpus(cfg)?)?;
    let shape = TrainShape {
        task: cfg.task,
        m: cfg.m as usize,
        n: cfg.n(),
    };
    let bounds = bound_check(&rep, eps, &shape)?;
    if let Some(p) = report {
        write_report_csv(&rep, &bounds, p)?;
    }
    let violations = bounds.iter().filter(|b| !b.ok).count();
    println!(
        "test loss {:.6}  exact match {:.4}  bound violations {violations}/{} at eps {eps:.6}",
        rep.mean_loss,
        rep.exact_match_rate,
        bounds.len()
    );
    if enforce && eps <= cfg.eps0 && violations > 0 {
        return Ok(Outcome::Failed(format!("{violations} bound violations with eps {eps} <= eps0 {}", cfg.eps0)));
    }
    Ok(Outcome::Ok)
}

fn generalize(a: &GeneralizeArgs) -> Result<Outcome> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = a.cfg.load(ckpt.task)?;
    let params = ckpt.params_for(cfg.task, cfg.s)?;
    let eps = match a.eps {
        Some(e) => e,
        None => final_train_loss(&params, &cfg)?,
    };
    let report = a.report.as_deref().or(cfg.report_path.as_deref());
    report_and_check(&cfg, &params, eps, report, true)
}

/// Random trees with goal depth in `min_depth..=max_depth` and at most
/// `vocab` nodes.
pub fn construction_corpus(vocab: usize, n: usize, min_depth: usize, max_depth: usize, seed: u64) -> Result<Vec<crate::trees::Tree>> {
    let cfg = TestTreeConfig {
        max_depth,
        ..TestTreeConfig::for_vocab(vocab)
    };
    let mut out = Vec::with_capacity(n);
    let mut i = 0u64;
    while out.len() < n {
        let t = sample_test_tree(&cfg, vocab, mix_seed(seed, 7, i))?;
        i += 1;
        if t.path_len() >= min_depth {
            out.push(t);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
pub struct ConstructSummary {
    pub trees: usize,
    pub exact: usize,
    pub flips_ok: usize,
    pub max_deviation: f64,
}

/// Rollout of the constructed parameters over a corpus.
pub fn verify_construction(params: &Params, corpus: &[crate::trees::Tree], seed: u64) -> Result<ConstructSummary> {
    let scheme = params.scheme();
    let mut s = ConstructSummary {
        trees: corpus.len(),
        exact: 0,
        flips_ok: 0,
        max_deviation: 0.0,
    };
    for (i, t) in corpus.iter().enumerate() {
        let prompt = crate::embedding::embed_prompt(&scheme, t, mix_seed(seed, 11, i as u64))?;
        let tgt = crate::embedding::target(&scheme, t)?;
        let out = crate::model::rollout(params, &prompt, tgt.columns.len());
        s.max_deviation = s.max_deviation.max(out.max_abs_diff(&tgt.columns));
        let got = crate::eval::decode_path(&out, &scheme);
        let want = crate::eval::decode_path(&tgt.columns, &scheme);
        if got.g2r == want.g2r && got.r2g == want.r2g && got.stages == want.stages {
            s.exact += 1;
        }
        if scheme.task == Task::Backward || got.stage_flip_step == Some(t.path_len() + 1) {
            s.flips_ok += 1;
        }
    }
    Ok(s)
}

fn construct_verify(a: &ConstructArgs) -> Result<Outcome> {
    let scheme = EmbeddingScheme::new(a.task, a.s);
    let params = match a.task {
        Task::Backward => Params::Backward(construct_backward(&scheme, a.alpha)),
        Task::Forward => Params::Forward(construct_forward(
            &scheme,
            &ForwardConstruction::new(a.alpha1, a.alpha2, a.a, a.b1, a.b2, a.c1, a.c2),
        )?),
    };
    let corpus = construction_corpus(a.s, a.trees, a.min_depth, a.max_depth, a.seed)?;
    let s = verify_construction(&params, &corpus, a.seed)?;
    let flips = match a.task {
        Task::Forward => format!(", {}/{} stage flips at the turning point", s.flips_ok, s.trees),
        Task::Backward => String::new(),
    };
    println!(
        "{} construction: {}/{} exact{flips}, max deviation {:.3e}",
        a.task, s.exact, s.trees, s.max_deviation
    );
    if s.exact < s.trees || s.flips_ok < s.trees {
        return Ok(Outcome::Failed(format!("{} of {} trees not solved", s.trees - s.exact.min(s.flips_ok), s.trees)));
    }
    Ok(Outcome::Ok)
}

#[derive(Debug, Serialize)]
struct PhaseSidecar {
    m: u32,
    #[serde(rename = "S")]
    s: usize,
    eta: f64,
    eps: f64,
    t1: Option<u64>,
    t1_crossed: bool,
    t2: Option<u64>,
    t2_crossed: bool,
    t2_threshold: f64,
    t1_upper_bound: f64,
}

fn dynamics_sim(a: &DynamicsArgs) -> Result<Outcome> {
    let trace = simulate_expected_dynamics(a.eta, a.steps, a.m, a.s)?;
    let ph = detect_phases(&trace, a.eps)?;
    write_trace_csv(&trace, &a.out)?;
    let side = PhaseSidecar {
        m: a.m,
        s: a.s,
        eta: a.eta,
        eps: a.eps,
        t1: ph.t1,
        t1_crossed: ph.t1_crossed,
        t2: ph.t2,
        t2_crossed: ph.t2_crossed,
        t2_threshold: ph.t2_threshold,
        t1_upper_bound: t1_upper_bound(a.m, a.s, a.eta),
    };
    let side_path = a.phases.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".phases.json");
        PathBuf::from(s)
    });
    std::fs::write(&side_path, serde_json::to_string_pretty(&side)? + "\n")?;
    let fmt = |t: Option<u64>, crossed: bool| match (t, crossed) {
        (Some(t), true) => t.to_string(),
        _ => "not reached".to_string(),
    };
    println!(
        "T1 = {} (bound {:.1}), T2 = {}",
        fmt(ph.t1, ph.t1_crossed),
        side.t1_upper_bound,
        fmt(ph.t2, ph.t2_crossed)
    );
    Ok(Outcome::Ok)
}

fn grad_check(a: &GradArgs) -> Result<Outcome> {
    use rand::{Rng, SeedableRng};
    let scheme = EmbeddingScheme::new(a.task, a.s);
    if a.s < perfect_tree_size(a.m) {
        return Err(Error::Config(format!("S = {} too small for m = {}", a.s, a.m)));
    }
    let step = FdStep {
        scale: a.h_scale,
        levels: a.richardson,
    };
    let mut worst = 0.0f64;
    for i in 0..a.pairs as u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(a.seed, 13, i));
        let mut params = Params::zeros(&scheme);
        for m in params.matrices_mut() {
            m.data.iter_mut().for_each(|v| *v = rng.gen_range(-a.spread..=a.spread));
        }
        let tree = sample_perfect_tree(a.m, a.s, rng.gen())?;
        let perm = rng.gen();
        let an = grad_sample(&params, &tree, perm)?;
        let fd = finite_diff_grad(&params, &tree, perm, step)?;
        let (err, n) = max_rel_error(&an.grads, &fd.grads, 1e-8)?;
        println!("pair {i:>3}: max relative error {err:.3e} over {n} entries");
        worst = worst.max(err);
    }
    println!("worst relative error {worst:.3e} (tolerance {:.1e})", a.tol);
    if worst > a.tol {
        return Ok(Outcome::Failed(format!("relative error {worst:.3e} above {:.1e}", a.tol)));
    }
    Ok(Outcome::Ok)
}
