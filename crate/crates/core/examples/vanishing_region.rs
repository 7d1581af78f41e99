//! Monte-Carlo volume of the region where every instance gradient is small.
//!
//! Usage: `cargo run --release --example vanishing_region [samples]`

use sharp_mil::gradlab::{self, Method};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples: u64 = std::env::args()
        .nth(1)
        .map(|s| s.parse())
        .transpose()?
        .unwrap_or(200_000);
    let methods = [Method::Traditional, Method::Sharp];
    for m in [2, 3, 5, 8] {
        let reports = gradlab::vanish_sweep(&methods, m, &gradlab::TAU_SWEEP, samples, 42)?;
        for tau in gradlab::TAU_SWEEP {
            let f = |method| {
                reports
                    .iter()
                    .find(|r| r.method == method && r.tau == tau)
                    .map(|r| r.fraction)
                    .unwrap_or(f64::NAN)
            };
            let (t, s) = (f(Method::Traditional), f(Method::Sharp));
            println!(
                "M={m} tau={tau:<5} traditional {t:.5} sharp {s:.5} -> {}",
                gradlab::verdict(s, t)
            );
        }
    }
    Ok(())
}
