use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::bagsim::{self, Dataset, GenConfig, Split};
use crate::numfmt::write_sig17;

use super::{evaluate, train, Aggregator, EvalMetrics, Hyper, ModelConfig, SmilModel, TrainError};

pub const SWEEP_HEADER: &str = "rate,aggregator,kernels,bag_acc,bag_auc,instance_auc";

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub data: GenConfig,
    pub hyper: Hyper,
    /// Template for `hidden` and `filters`; kernels and aggregator are swept.
    pub model: ModelConfig,
    pub rates: Vec<f64>,
    pub aggregators: Vec<Aggregator>,
    pub kernel_sets: Vec<Vec<usize>>,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rate: f64,
    pub aggregator: Aggregator,
    pub kernels: Vec<usize>,
    pub metrics: EvalMetrics,
}

impl SweepRow {
    pub fn kernel_label(&self) -> String {
        self.kernels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Trains and evaluates one model on the split pair for one fake rate.
pub fn run_one(
    train_ds: &Dataset,
    test_ds: &Dataset,
    model: ModelConfig,
    hyper: &Hyper,
) -> Result<EvalMetrics, TrainError> {
    let init = SmilModel::init(model, hyper.seed)?;
    let (trained, _) = train(init, &train_ds.train_view(), None, hyper)?;
    evaluate(&trained, test_ds)
}

/// Every `(rate, aggregator, kernel set)` combination, sorted by that key.
/// The result does not depend on `threads`.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<SweepRow>, TrainError> {
    let configs = bagsim::fake_rate_sweep(&spec.data, &spec.rates)
        .map_err(|e| TrainError::Config(e.to_string()))?;
    let data_err = |e: bagsim::BagsimError| TrainError::Config(e.to_string());
    let splits: Vec<(Dataset, Dataset)> = configs
        .iter()
        .map(|c| {
            Ok((
                bagsim::generate_split(c, Split::Train).map_err(data_err)?,
                bagsim::generate_split(c, Split::Test).map_err(data_err)?,
            ))
        })
        .collect::<Result<_, TrainError>>()?;

    let mut jobs = Vec::new();
    for (ri, &rate) in spec.rates.iter().enumerate() {
        for &aggregator in &spec.aggregators {
            for kernels in &spec.kernel_sets {
                jobs.push((ri, rate, aggregator, kernels.clone()));
            }
        }
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SweepRow, TrainError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..spec.threads.max(1).min(jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some((ri, rate, aggregator, kernels)) = jobs.get(i).cloned() else {
                    break;
                };
                let model = ModelConfig {
                    kernels: kernels.clone(),
                    aggregator,
                    ..spec.model.clone()
                };
                let (tr, te) = &splits[ri];
                let row = run_one(tr, te, model, &spec.hyper).map(|metrics| SweepRow {
                    rate,
                    aggregator,
                    kernels,
                    metrics,
                });
                results.lock().expect("no poisoned workers")[i] = Some(row);
            });
        }
    });
    let mut rows = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>, _>>()?;
    rows.sort_by(|a, b| {
        a.rate
            .total_cmp(&b.rate)
            .then(a.aggregator.cmp(&b.aggregator))
            .then(a.kernels.cmp(&b.kernels))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.rate, r.aggregator, r.kernel_label());
        for v in [
            r.metrics.bag_accuracy,
            r.metrics.bag_auc,
            r.metrics.instance_auc_pos,
        ] {
            out.push(',');
            if let Some(v) = v {
                write_sig17(&mut out, v);
            }
        }
        out.push('\n');
    }
    out
}
