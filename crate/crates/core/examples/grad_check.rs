//! Analytic gradients against central differences on random parameters.
//!
//! Plain differences at `h = 1e-5` are limited by roundoff on tiny entries;
//! the extrapolated oracle is accurate to about `1e-13`.
//!
//! ```text
//! cargo run --release --example grad_check
//! ```

use cotree::embedding::{EmbeddingScheme, Task};
use cotree::grad::{finite_diff_grad, grad_sample, max_rel_error, FdStep};
use cotree::trees::sample_perfect_tree;
use cotree::Params;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> cotree::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for task in [Task::Backward, Task::Forward] {
        let scheme = EmbeddingScheme::new(task, 15);
        let mut worst = [0.0f64; 2];
        for _ in 0..10 {
            let mut p = Params::zeros(&scheme);
            for m in p.matrices_mut() {
                m.data.iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            }
            let tree = sample_perfect_tree(3, 15, rng.gen())?;
            let seed = rng.gen();
            let a = grad_sample(&p, &tree, seed)?;
            for (w, step) in worst.iter_mut().zip([FdStep::default(), FdStep::accurate()]) {
                let n = finite_diff_grad(&p, &tree, seed, step)?;
                *w = w.max(max_rel_error(&a.grads, &n.grads, 1e-8)?.0);
            }
        }
        println!("{task}: worst relative error {:.3e} (plain), {:.3e} (extrapolated)", worst[0], worst[1]);
    }
    Ok(())
}
