//! One confident positive, one confident negative and M-2 undecided instances:
//! the noisy-OR gradient on an undecided instance nearly vanishes while the
//! sharp gradient stays large.

use sharp_mil::gradlab;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!(
        "{:>3} {:>8} {:>5} {:>14} {:>12}",
        "M", "eps", "delta", "traditional", "sharp"
    );
    for (m, eps) in [(3, 1e-3), (4, 1e-4), (6, 1e-4), (10, 1e-6)] {
        let c = gradlab::counterexample_case(m, eps, 0.3)?;
        println!(
            "{m:>3} {eps:>8.0e} {:>5} {:>14.4e} {:>12.5}",
            c.delta, c.grad_traditional, c.grad_sharp
        );
    }
    Ok(())
}
