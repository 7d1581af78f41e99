//! Synthetic bags with temporally correlated real frames and shifted fakes.

use sharp_mil::bagsim::{self, GenConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = GenConfig {
        n_bags: 200,
        ..GenConfig::default()
    };
    let ds = bagsim::generate(&cfg)?;
    let fakes: usize = ds.bags.iter().map(|b| b.fake_count()).sum();
    println!(
        "{} bags, {} positive, {fakes} fake frames",
        ds.len(),
        ds.positives()
    );
    println!(
        "all bags satisfy the MIL axiom: {}",
        ds.bags.iter().all(|b| b.satisfies_mil_axiom())
    );

    let bag = ds
        .bags
        .iter()
        .find(|b| b.label == 1)
        .expect("some positive bag");
    println!("bag {} labels {:?}", bag.id, bag.instance_labels);
    let negative = ds
        .bags
        .iter()
        .find(|b| b.label == 0)
        .expect("some negative bag");
    println!(
        "lag-1 autocorrelation, negative bag {:.3}",
        bagsim::lag1_autocorrelation(&negative.instances)
    );

    let path = std::env::temp_dir().join("smil_train.jsonl");
    bagsim::write_jsonl(&ds, &path)?;
    let back = bagsim::read_jsonl(&path)?;
    println!("round trip through {}: {}", path.display(), back == ds);
    Ok(())
}
