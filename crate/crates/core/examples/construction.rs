//! Explicit parameters that solve both tasks without training.
//!
//! Rolls out the backward construction `B = alpha I` for several `alpha`
//! and the two-head forward construction on random trees, and prints the
//! worst deviation from the targets.
//!
//! ```text
//! cargo run --release --example construction
//! ```

use cotree::commands::{construction_corpus, verify_construction};
use cotree::embedding::EmbeddingScheme;
use cotree::model::{construct_backward, construct_forward, extract_uv, ForwardConstruction};
use cotree::Params;

fn main() -> cotree::Result<()> {
    let s = 31;
    let corpus = construction_corpus(s, 100, 2, 4, 0)?;

    let scheme = EmbeddingScheme::backward(s);
    for alpha in [5.0, 10.0, 20.0, 30.0] {
        let p = Params::Backward(construct_backward(&scheme, alpha));
        let r = verify_construction(&p, &corpus, 0)?;
        println!("backward alpha {alpha:>4}: {}/{} exact, max deviation {:.3e}", r.exact, r.trees, r.max_deviation);
    }

    let scheme = EmbeddingScheme::forward(s);
    let k = ForwardConstruction::default();
    let fp = construct_forward(&scheme, &k)?;
    let stats = extract_uv(&fp);
    println!("recovered coefficients {:?}", stats.construction());
    let r = verify_construction(&Params::Forward(fp), &corpus, 0)?;
    println!(
        "forward: {}/{} exact, {}/{} flip at the turning point, max deviation {:.3e}",
        r.exact, r.trees, r.flips_ok, r.trees, r.max_deviation
    );
    Ok(())
}
