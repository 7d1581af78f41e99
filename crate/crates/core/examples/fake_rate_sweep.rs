//! Small sweep over fake rates and pooling rules, printed as CSV.

use sharp_mil::bagsim::GenConfig;
use sharp_mil::train::{self, Aggregator, Hyper, ModelConfig, SweepSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let spec = SweepSpec {
        data: GenConfig {
            n_bags: 600,
            n_test: 200,
            ..GenConfig::default()
        },
        hyper: Hyper {
            epochs: 8,
            ..Hyper::default()
        },
        model: ModelConfig::new(16, vec![1], Aggregator::Mean),
        rates: vec![0.1, 0.5, 1.0],
        aggregators: Aggregator::ALL.to_vec(),
        kernel_sets: vec![vec![1, 2, 3]],
        threads,
    };
    let rows = train::run_sweep(&spec)?;
    print!("{}", train::sweep_csv(&rows));
    Ok(())
}
