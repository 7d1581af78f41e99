//! Model assembly, optimisation, evaluation and persistence.
//!
//! A model maps each instance through a one-hidden-layer encoder, encodes the
//! sequence with one temporal convolution per kernel size, scores every
//! branch with the chosen bag aggregator and fuses branch logits with
//! softmax-normalised fusion weights.

pub mod metrics;
mod model;
mod optim;
mod persist;
mod sweep;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index::sample, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::bagsim::{Dataset, TrainBag};
use crate::diffcore::{DiffError, Tensor};
use crate::numfmt::write_sig17;
use crate::rng;

pub use metrics::{accuracy, auc, average_ranks};
pub use model::{
    bag_logit_node, bce_node, Aggregator, BagScores, ModelConfig, ModelGraph, SmilModel,
};
pub use optim::Adam;
pub use persist::{load_model, model_from_json, model_to_json, save_model, MODEL_VERSION};
pub use sweep::{run_one, run_sweep, sweep_csv, SweepRow, SweepSpec, SWEEP_HEADER};

pub const HISTORY_HEADER: &str = "epoch,train_loss,bag_acc,bag_auc,instance_auc";
/// Probability clamp used by [`bce_loss`].
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset mismatch: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error("model file version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
}

/// `-y ln p - (1 - y) ln(1 - p)` with `p` clamped to `[1e-12, 1 - 1e-12]`.
pub fn bce_loss(p: f64, y: u8) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    if y == 1 {
        -p.ln()
    } else {
        -(-p).ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr_halving_period: usize,
    /// Instances drawn per bag at every step.
    pub frames_per_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 30,
            batch: 32,
            lr_halving_period: 5,
            frames_per_step: 8,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 42,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr >= 0 (got {})", self.lr));
        }
        for (name, v) in [
            ("epochs", self.epochs),
            ("batch", self.batch),
            ("lr_halving_period", self.lr_halving_period),
            ("frames_per_step", self.frames_per_step),
        ] {
            if v == 0 {
                bad.push(format!("{name} >= 1"));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("beta1 and beta2 in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            bad.push(format!("eps > 0 (got {})", self.eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(TrainError::Config(bad.join("; ")))
        }
    }

    /// `lr * 2^-floor(epoch / period)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * 0.5f64.powi((epoch / self.lr_halving_period) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub bag_accuracy: Option<f64>,
    pub bag_auc: Option<f64>,
    /// Instance AUC over instances of positive bags.
    pub instance_auc_pos: Option<f64>,
    /// AUC of attention weights against instance labels on positive bags.
    pub attention_auc_pos: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test: Option<EvalMetrics>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }

    /// CSV with empty cells for undefined metrics.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = write!(out, "{},", e.epoch);
            write_sig17(&mut out, e.train_loss);
            let t = e.test;
            for v in [
                t.and_then(|m| m.bag_accuracy),
                t.and_then(|m| m.bag_auc),
                t.and_then(|m| m.instance_auc_pos),
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

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_csv()).map_err(|source| TrainError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn check_dims(model: &SmilModel, d: usize) -> Result<(), TrainError> {
    if d != model.config.d_in {
        return Err(TrainError::Data(format!(
            "instances have {d} features, model expects {}",
            model.config.d_in
        )));
    }
    Ok(())
}

/// Rows drawn for `bag` at `epoch`, in temporal order.
pub fn subsample_rows(bag: &TrainBag<'_>, epoch: usize, hp: &Hyper) -> Vec<usize> {
    let m = bag.instances.rows();
    if hp.frames_per_step >= m {
        return (0..m).collect();
    }
    let mut r = rng::stream(hp.seed, "subsample", ((epoch as u64) << 32) | bag.id as u64);
    let mut rows = sample(&mut r, m, hp.frames_per_step).into_vec();
    rows.sort_unstable();
    rows
}

/// Mean BCE of `bags` and its gradient with respect to every parameter.
pub fn batch_loss_and_grad(
    model: &SmilModel,
    graphs: &[ModelGraph; 2],
    bags: &[(u8, Tensor)],
) -> Result<(f64, BTreeMap<String, Tensor>), DiffError> {
    let mut bindings = model.params.clone();
    let mut total = 0.0;
    let mut grads: BTreeMap<String, Tensor> = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
        .collect();
    for (label, x) in bags {
        bindings.insert("x".into(), x.clone());
        let (loss, g) = graphs[usize::from(*label)]
            .graph
            .value_and_grad(&bindings)?;
        total += loss;
        for (name, acc) in grads.iter_mut() {
            if let Some(gi) = g.get(name) {
                acc.add_assign(gi);
            }
        }
    }
    let scale = 1.0 / bags.len() as f64;
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, grads))
}

/// Minimises mean bag BCE with Adam; `test`, when given, is evaluated after
/// every epoch.
pub fn train(
    mut model: SmilModel,
    data: &[TrainBag<'_>],
    test: Option<&Dataset>,
    hp: &Hyper,
) -> Result<(SmilModel, History), TrainError> {
    hp.validate()?;
    if data.is_empty() {
        return Err(TrainError::Data("training set is empty".into()));
    }
    for bag in data {
        check_dims(&model, bag.instances.cols())?;
        if hp.frames_per_step > bag.instances.rows() {
            return Err(TrainError::Config(format!(
                "frames_per_step {} exceeds bag length {}",
                hp.frames_per_step,
                bag.instances.rows()
            )));
        }
    }
    let graphs = [model.loss_graph(0), model.loss_graph(1)];
    let mut adam = Adam::new(hp.beta1, hp.beta2, hp.eps);
    let mut history = History::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..hp.epochs {
        let lr = hp.lr_at(epoch);
        order.sort_unstable();
        order.shuffle(&mut rng::stream(hp.seed, "shuffle", epoch as u64));
        let mut total = 0.0;
        for (step, chunk) in order.chunks(hp.batch).enumerate() {
            let batch: Vec<(u8, Tensor)> = chunk
                .iter()
                .map(|&i| {
                    let bag = &data[i];
                    (
                        bag.label,
                        bag.instances.select_rows(&subsample_rows(bag, epoch, hp)),
                    )
                })
                .collect();
            let (loss, grads) = batch_loss_and_grad(&model, &graphs, &batch).map_err(|e| {
                TrainError::NonFinite {
                    epoch,
                    step,
                    detail: e.to_string(),
                }
            })?;
            if !loss.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    step,
                    detail: format!("loss {loss}"),
                });
            }
            total += loss * chunk.len() as f64;
            adam.update(&mut model.params, &grads, lr);
        }
        let test_metrics = test.map(|ds| evaluate(&model, ds)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / data.len() as f64,
            test: test_metrics,
        });
    }
    Ok((model, history))
}

/// Scores of one full bag.
pub fn score_bag(
    model: &SmilModel,
    graph: &ModelGraph,
    instances: &Tensor,
) -> Result<BagScores, TrainError> {
    check_dims(model, instances.cols())?;
    let trace = graph.graph.evaluate(&model.bindings(instances))?;
    Ok(BagScores::from_trace(graph, &trace))
}

/// Per-bag scores on all instances of every bag.
pub fn predict(model: &SmilModel, ds: &Dataset) -> Result<Vec<BagScores>, TrainError> {
    let graph = model.logit_graph();
    ds.bags
        .iter()
        .map(|b| score_bag(model, &graph, &b.instances))
        .collect()
}

pub fn evaluate(model: &SmilModel, ds: &Dataset) -> Result<EvalMetrics, TrainError> {
    if ds.is_empty() {
        return Err(TrainError::Data("evaluation set is empty".into()));
    }
    let scores = predict(model, ds)?;
    let probs: Vec<f64> = scores.iter().map(BagScores::prob).collect();
    let labels: Vec<u8> = ds.bags.iter().map(|b| b.label).collect();

    let mut inst_scores = Vec::new();
    let mut att_scores = Vec::new();
    let mut inst_labels = Vec::new();
    for (bag, s) in ds.bags.iter().zip(&scores) {
        if bag.label == 1 {
            inst_scores.extend_from_slice(&s.instance_probs);
            if let Some(a) = &s.attention {
                att_scores.extend_from_slice(a);
            }
            inst_labels.extend_from_slice(&bag.instance_labels);
        }
    }
    Ok(EvalMetrics {
        bag_accuracy: accuracy(&probs, &labels),
        bag_auc: auc(&probs, &labels),
        instance_auc_pos: auc(&inst_scores, &inst_labels),
        attention_auc_pos: if att_scores.is_empty() {
            None
        } else {
            auc(&att_scores, &inst_labels)
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bagsim::{generate, generate_split, GenConfig, Split};

    fn tiny_model(agg: Aggregator, kernels: Vec<usize>, d: usize) -> SmilModel {
        let mut cfg = ModelConfig::new(d, kernels, agg);
        cfg.hidden = 8;
        cfg.filters = 6;
        SmilModel::init(cfg, 5).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(0.5, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(0.5, 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((bce_loss(1.0 - 1e-12, 1) - 1e-12).abs() < 1e-15);
        assert!(bce_loss(1.0, 1) > 0.0 && bce_loss(0.0, 0) > 0.0);
    }

    #[test]
    fn lr_schedule_halves_exactly() {
        let hp = Hyper::default();
        for e in 0..30 {
            assert_eq!(hp.lr_at(e), 2e-4 / f64::from(1u32 << (e / 5)));
        }
    }

    #[test]
    fn batch_loss_is_mean_of_bag_losses() {
        let cfg = GenConfig {
            n_bags: 6,
            m: 5,
            d: 3,
            fake_hi: 4,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let model = tiny_model(Aggregator::SmilWeighted, vec![1, 2], 3);
        let graphs = [model.loss_graph(0), model.loss_graph(1)];
        let bags: Vec<(u8, Tensor)> = ds
            .bags
            .iter()
            .map(|b| (b.label, b.instances.clone()))
            .collect();
        let (batch, grads) = batch_loss_and_grad(&model, &graphs, &bags).unwrap();
        let mut singles = 0.0;
        let mut g_sum = Tensor::zeros(model.params["fusion"].shape());
        for b in &bags {
            let (l, g) = batch_loss_and_grad(&model, &graphs, std::slice::from_ref(b)).unwrap();
            singles += l;
            g_sum.add_assign(&g["fusion"]);
        }
        assert!((batch - singles / 6.0).abs() < 1e-14);
        for (a, b) in grads["fusion"].data().iter().zip(g_sum.data()) {
            assert!((a - b / 6.0).abs() < 1e-14);
        }
    }

    #[test]
    fn one_separable_bag_loss_decreases() {
        let cfg = GenConfig {
            n_bags: 1,
            m: 4,
            d: 3,
            positive_fraction: 1.0,
            fake_lo: 4,
            fake_hi: 4,
            separation: 4.0,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let model = tiny_model(Aggregator::SmilUnit, vec![1], 3);
        let graphs = [model.loss_graph(0), model.loss_graph(1)];
        let bag = [(1u8, ds.bags[0].instances.clone())];
        let before = batch_loss_and_grad(&model, &graphs, &bag).unwrap().0;
        let hp = Hyper {
            epochs: 1,
            lr: 1e-2,
            frames_per_step: 4,
            ..Hyper::default()
        };
        let (trained, hist) = train(model, &ds.train_view(), None, &hp).unwrap();
        assert_eq!(hist.epochs[0].train_loss, before);
        let after = batch_loss_and_grad(&trained, &graphs, &bag).unwrap().0;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let cfg = GenConfig {
            n_bags: 10,
            n_test: 4,
            m: 6,
            d: 3,
            fake_hi: 5,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let test = generate_split(&cfg, Split::Test).unwrap();
        let model = tiny_model(Aggregator::NoisyOr, vec![1, 3], 3);
        let hp = Hyper {
            epochs: 3,
            lr: 0.0,
            batch: 4,
            frames_per_step: 4,
            ..Hyper::default()
        };
        let (trained, hist) = train(model.clone(), &ds.train_view(), Some(&test), &hp).unwrap();
        assert_eq!(trained, model);
        assert_eq!(hist.len(), 3);
        assert!(hist.epochs.windows(2).all(|w| w[0].test == w[1].test));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = GenConfig {
            n_bags: 12,
            n_test: 6,
            m: 6,
            d: 3,
            fake_hi: 5,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let test = generate_split(&cfg, Split::Test).unwrap();
        let hp = Hyper {
            epochs: 2,
            lr: 1e-2,
            batch: 5,
            frames_per_step: 4,
            ..Hyper::default()
        };
        let run = || {
            train(
                tiny_model(Aggregator::SmilWeighted, vec![1, 2, 3], 3),
                &ds.train_view(),
                Some(&test),
                &hp,
            )
            .unwrap()
        };
        let (m1, h1) = run();
        let (m2, h2) = run();
        assert_eq!(m1, m2);
        assert_eq!(h1.to_csv(), h2.to_csv());
        assert_eq!(h1.to_csv().lines().next(), Some(HISTORY_HEADER));
    }

    #[test]
    fn dimension_and_frame_checks() {
        let cfg = GenConfig {
            n_bags: 3,
            m: 4,
            d: 3,
            fake_hi: 3,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let hp = Hyper {
            epochs: 1,
            ..Hyper::default()
        };
        assert!(matches!(
            train(
                tiny_model(Aggregator::Max, vec![1], 3),
                &ds.train_view(),
                None,
                &hp
            ),
            Err(TrainError::Config(_))
        ));
        let hp = Hyper {
            epochs: 1,
            frames_per_step: 2,
            ..Hyper::default()
        };
        assert!(matches!(
            train(
                tiny_model(Aggregator::Max, vec![1], 5),
                &ds.train_view(),
                None,
                &hp
            ),
            Err(TrainError::Data(_))
        ));
    }

    #[test]
    fn subsample_is_sorted_and_epoch_dependent() {
        let t = Tensor::zeros(&[20, 2]);
        let bag = TrainBag {
            id: 7,
            label: 1,
            instances: &t,
        };
        let hp = Hyper::default();
        let a = subsample_rows(&bag, 0, &hp);
        let b = subsample_rows(&bag, 1, &hp);
        assert_eq!(a.len(), 8);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, b);
        assert_eq!(a, subsample_rows(&bag, 0, &hp));
    }
}
