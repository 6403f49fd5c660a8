//! Expected-gradient dynamics of the symmetric backward model.
//!
//! Runs gradient descent on the two-scalar reduction from zero, prints the
//! phase markers and writes the trajectory to `dynamics.csv`.
//!
//! ```text
//! cargo run --release --example dynamics_sim -- [m] [S] [eta] [eps]
//! ```

use cotree::dynamics::{detect_phases, simulate_until, t1_upper_bound, t2_threshold, write_trace_csv};

fn main() -> cotree::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let m: u32 = arg(0, "3").parse().expect("m");
    let s: usize = arg(1, "15").parse().expect("S");
    let eta: f64 = arg(2, "1").parse().expect("eta");
    let eps: f64 = arg(3, "0.01").parse().expect("eps");

    let thr = t2_threshold(eps, m);
    let mut past = 0u64;
    // run a little beyond the second threshold
    let trace = simulate_until(eta, 2_000_000, m, s, |r| {
        if r.alpha_check > thr {
            past += 1;
        }
        past > 100
    })?;
    let ph = detect_phases(&trace, eps)?;
    let last = trace.rows.last().unwrap();
    println!("T1 = {:?} (bound {:.1})", ph.t1, t1_upper_bound(m, s, eta));
    println!("T2 = {:?}", ph.t2);
    println!(
        "final t={} mu={:.4} nu={:.5} loss={:.5}",
        last.t, last.mu, last.nu, last.loss_proxy
    );
    write_trace_csv(&trace, std::path::Path::new("dynamics.csv"))?;
    Ok(())
}
