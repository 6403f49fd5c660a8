//! Trains the two-head forward model and tracks the stage-matrix entries.
//!
//! ```text
//! cargo run --release --example train_forward -- [max_steps]
//! ```
//! Writes `forward_trace.csv` and `forward_checkpoint.json`.

use cotree::checkpoint::save_checkpoint;
use cotree::eval::{bound_check, generalization_report, write_report_csv, TrainShape};
use cotree::training::{run, test_corpus, ExperimentConfig, Tracked};

fn main() -> cotree::Result<()> {
    let mut cfg = ExperimentConfig::forward();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.max_steps = steps.parse().expect("max_steps");
    }
    let out = run(&cfg, None, &mut |r| {
        if let Tracked::Uv(u) = &r.tracked {
            println!(
                "{:>6} train {:.5} test {:.5} mu1 {:.3} mu2 {:.3} U3 {:+.4} {:+.4} V3 {:+.4} {:+.4}",
                r.step, r.train_loss, r.test_loss, u.mu1, u.mu2, u.u3[0][0], u.u3[0][1], u.v3[0][0], u.v3[0][1]
            );
        }
    })?;
    out.trace.write_csv("forward_trace.csv".as_ref(), false)?;
    save_checkpoint(&out.checkpoint, "forward_checkpoint.json".as_ref())?;

    let report = generalization_report(&out.params, &test_corpus(&cfg)?)?;
    let shape = TrainShape { task: cfg.task, m: cfg.m as usize, n: cfg.n() };
    let bounds = bound_check(&report, out.final_train_loss, &shape)?;
    write_report_csv(&report, &bounds, "forward_report.csv".as_ref())?;
    println!(
        "final train loss {:.5}; test loss {:.5}; exact match {:.3}; bound violations {}",
        out.final_train_loss,
        report.mean_loss,
        report.exact_match_rate,
        bounds.iter().filter(|b| !b.ok).count()
    );
    Ok(())
}
