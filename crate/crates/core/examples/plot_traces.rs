//! Renders SVG charts for trace CSV files.
//!
//! ```text
//! cargo run --release --example plot_traces -- backward_trace.csv dynamics.csv
//! ```
//! Charts are written to `plots/`.

use std::path::PathBuf;

use cotree::plot::emit_plots;

fn main() -> cotree::Result<()> {
    let inputs: Vec<PathBuf> = std::env::args().skip(1).map(PathBuf::from).collect();
    if inputs.is_empty() {
        eprintln!("usage: plot_traces <trace.csv>...");
        std::process::exit(1);
    }
    for p in emit_plots(&inputs, "plots".as_ref())? {
        println!("{}", p.display());
    }
    Ok(())
}
