//! Evaluates a saved checkpoint on unseen tree shapes and checks the
//! test-loss bound per tree.
//!
//! ```text
//! cargo run --release --example train_backward
//! cargo run --release --example generalize -- backward_checkpoint.json
//! ```

use cotree::checkpoint::load_checkpoint;
use cotree::eval::{bound_check, generalization_report, write_report_csv, TrainShape};
use cotree::training::{final_train_loss, test_corpus, ExperimentConfig};

fn main() -> cotree::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "backward_checkpoint.json".into());
    let ckpt = load_checkpoint(path.as_ref())?;
    let cfg = ExperimentConfig::for_task(ckpt.task);
    let params = ckpt.params_for(cfg.task, cfg.s)?;
    let eps = final_train_loss(&params, &cfg)?;
    let report = generalization_report(&params, &test_corpus(&cfg)?)?;
    let shape = TrainShape { task: cfg.task, m: cfg.m as usize, n: cfg.n() };
    let bounds = bound_check(&report, eps, &shape)?;
    write_report_csv(&report, &bounds, format!("{}_report.csv", cfg.task).as_ref())?;

    println!("training loss {eps:.5}, mean test loss {:.5}", report.mean_loss);
    for depth in 2..=cfg.test_trees.max_depth {
        let rows: Vec<_> = report.rows.iter().filter(|r| r.path_len == depth).collect();
        if rows.is_empty() {
            continue;
        }
        let loss = rows.iter().map(|r| r.test_loss).sum::<f64>() / rows.len() as f64;
        let exact = rows.iter().filter(|r| r.exact_match).count();
        let bad = rows.iter().filter(|r| !bounds[r.tree_id].ok).count();
        println!("path length {depth}: {:>4} trees, loss {loss:.5}, exact {exact}, bound violations {bad}", rows.len());
    }
    Ok(())
}
