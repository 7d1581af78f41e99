//! Train one model and print the per-epoch history.
//!
//! Usage: `cargo run --release --example train_model [aggregator] [fake rate]`

use sharp_mil::bagsim::{self, GenConfig, Split};
use sharp_mil::train::{self, Aggregator, Hyper, ModelConfig, SmilModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let aggregator: Aggregator = args.next().as_deref().unwrap_or("smil_weighted").parse()?;
    let rate: f64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.25);

    let cfg = bagsim::fake_rate_sweep(&GenConfig::default(), &[rate])?.remove(0);
    let tr = bagsim::generate_split(&cfg, Split::Train)?;
    let te = bagsim::generate_split(&cfg, Split::Test)?;
    let hp = Hyper {
        epochs: 10,
        ..Hyper::default()
    };
    let model = SmilModel::init(ModelConfig::new(cfg.d, vec![1, 2, 3], aggregator), hp.seed)?;
    println!(
        "{aggregator}, {} parameters, {} fake frames per positive bag",
        model.n_parameters(),
        cfg.fake_hi
    );

    let (model, history) = train::train(model, &tr.train_view(), Some(&te), &hp)?;
    print!("{}", history.to_csv());
    let m = train::evaluate(&model, &te)?;
    println!("final: {m:?}");
    Ok(())
}
