//! Trains the backward model with SGD from zero and reports the final fit.
//!
//! ```text
//! cargo run --release --example train_backward -- [max_steps]
//! ```
//! Writes `backward_trace.csv` and `backward_checkpoint.json`.

use cotree::checkpoint::save_checkpoint;
use cotree::eval::{bound_check, generalization_report, TrainShape};
use cotree::model::extract_h;
use cotree::training::{run, test_corpus, ExperimentConfig};
use cotree::Params;

fn main() -> cotree::Result<()> {
    let mut cfg = ExperimentConfig::backward();
    if let Some(steps) = std::env::args().nth(1) {
        cfg.max_steps = steps.parse().expect("max_steps");
    }
    let out = run(&cfg, None, &mut |r| {
        println!("{:>6} train {:.5} test {:.5}", r.step, r.train_loss, r.test_loss);
    })?;
    out.trace.write_csv("backward_trace.csv".as_ref(), false)?;
    save_checkpoint(&out.checkpoint, "backward_checkpoint.json".as_ref())?;

    if let Params::Backward(p) = &out.params {
        let h = extract_h(p);
        println!(
            "H11 {:.4} H12 {:.4} diag spread {:.3e} off-diag spread {:.3e}",
            h.mu, h.nu, h.diag_spread, h.offdiag_spread
        );
    }
    let report = generalization_report(&out.params, &test_corpus(&cfg)?)?;
    let shape = TrainShape { task: cfg.task, m: cfg.m as usize, n: cfg.n() };
    let bounds = bound_check(&report, out.final_train_loss, &shape)?;
    println!(
        "final train loss {:.5}; test loss {:.5}; exact match {:.3}; bound violations {}",
        out.final_train_loss,
        report.mean_loss,
        report.exact_match_rate,
        bounds.iter().filter(|b| !b.ok).count()
    );
    Ok(())
}
