//! Tape gradients against central finite differences, for each primitive and
//! for the joint training objective on small random models.
//!
//! ```bash
//! cargo run --release -p protopart --example gradcheck [trials]
//! ```

use protopart::gradcheck::{run_gradcheck, CHECKS, DEFAULT_FLOOR, DEFAULT_STEP};

fn main() -> protopart::Result<()> {
    let trials = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(10);
    let results = run_gradcheck(trials, 0, DEFAULT_STEP, DEFAULT_FLOOR)?;
    for check in CHECKS {
        let worst = results
            .iter()
            .filter(|r| r.check == check)
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max);
        println!("{check:<22} worst relative error {worst:.2e} over {trials} trials");
    }
    Ok(())
}
