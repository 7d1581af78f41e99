//! Temporal conv encoder plus super-bag fusion: forward pass and a full
//! reverse-mode vs finite-difference check.

use rand::Rng;
use sharp_mil::aggregate::{AttentionParams, BagEmbeddings, Weights};
use sharp_mil::diffcore::Tensor;
use sharp_mil::rng;
use sharp_mil::stencode::{self, ConvSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (m, d, r) = (9, 3, 5);
    let mut g = rng::stream(3, "example/encoder", 0);
    let h = BagEmbeddings::new(Tensor::matrix(
        m,
        d,
        (0..m * d).map(|_| g.random_range(-1.0..1.0)).collect(),
    )?)?;
    let kernels: Vec<ConvSpec> = [1, 2, 3]
        .iter()
        .map(|&k| ConvSpec::random(k, d, r, &mut g))
        .collect();
    let heads = (0..kernels.len())
        .map(|_| {
            let mut v = || {
                (0..r)
                    .map(|_| g.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            let (a, c) = (v(), v());
            AttentionParams::new(a, c, 0.0)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let fusion = Weights::uniform(kernels.len());

    let bag = stencode::super_bag(&h, &kernels, &heads, &fusion)?;
    for (k, p) in bag.kernels.iter().zip(bag.kernel_probs()) {
        println!("kernel {k}: p = {p:.6}");
    }
    println!("fused:    p = {:.6}", bag.prob());

    let report = stencode::encoder_gradcheck(&h, &kernels, &heads, &fusion)?;
    let entries: usize = report.analytic.values().map(Tensor::len).sum();
    println!(
        "gradcheck over {entries} entries: max abs error {:.2e}, max rel error {:.2e}, pass {}",
        report.max_abs_error, report.max_rel_error, report.pass
    );
    Ok(())
}
