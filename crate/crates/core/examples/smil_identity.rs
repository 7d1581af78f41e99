//! Attention pooling in embedding space equals S-MIL over per-instance
//! probabilities, for a random bag.

use rand::Rng;
use sharp_mil::aggregate::{self, AttentionParams, BagEmbeddings};
use sharp_mil::diffcore::Tensor;
use sharp_mil::rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (m, d) = (6, 4);
    let mut r = rng::stream(7, "example/identity", 0);
    let mut draw = |n: usize| {
        (0..n)
            .map(|_| r.random_range(-1.5..1.5))
            .collect::<Vec<f64>>()
    };
    let h = BagEmbeddings::new(Tensor::matrix(m, d, draw(m * d))?)?;
    let head = AttentionParams::new(draw(d), draw(d), 0.1)?;

    let alpha = aggregate::attention_weights(&h, &head)?;
    let embedded = aggregate::bag_prob_embedded(&h, &head, &alpha)?;
    let probs = aggregate::instance_probs(&h, &head)?;
    let pooled = aggregate::smil(&probs, &alpha)?;

    println!("alpha     {:?}", alpha.as_slice());
    println!("p_j       {:?}", probs.probs());
    println!("embedded  {embedded:.17}");
    println!("S-MIL     {pooled:.17}");
    println!("noisy-OR  {:.17}", aggregate::noisy_or(&probs));
    println!("mean      {:.17}", aggregate::mean_pool(&probs));
    Ok(())
}
