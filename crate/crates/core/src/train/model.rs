use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bindings, Graph, NodeId, Tensor, Trace};
use crate::rng;
use crate::stencode::{self, ConvSpec};

use super::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Mean,
    Max,
    NoisyOr,
    SmilUnit,
    SmilWeighted,
}

impl Aggregator {
    pub const ALL: [Aggregator; 5] = [
        Aggregator::Mean,
        Aggregator::Max,
        Aggregator::NoisyOr,
        Aggregator::SmilUnit,
        Aggregator::SmilWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Mean => "mean",
            Aggregator::Max => "max",
            Aggregator::NoisyOr => "noisy_or",
            Aggregator::SmilUnit => "smil_unit",
            Aggregator::SmilWeighted => "smil_weighted",
        }
    }

    pub fn uses_attention(self) -> bool {
        self == Aggregator::SmilWeighted
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Aggregator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Aggregator::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown aggregator `{s}` (expected mean, max, noisy_or, smil_unit or smil_weighted)"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_in: usize,
    pub hidden: usize,
    /// Temporal kernel sizes, each in `1..=3`.
    pub kernels: Vec<usize>,
    /// Filters per kernel.
    pub filters: usize,
    pub aggregator: Aggregator,
}

impl ModelConfig {
    pub fn new(d_in: usize, kernels: Vec<usize>, aggregator: Aggregator) -> Self {
        Self {
            d_in,
            hidden: 32,
            kernels,
            filters: stencode::DEFAULT_FILTERS,
            aggregator,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.d_in == 0 || self.hidden == 0 || self.filters == 0 {
            return bad("d_in, hidden and filters must be positive".into());
        }
        if self.kernels.is_empty() {
            return bad("kernel set is empty".into());
        }
        if self.kernels.iter().any(|k| !(1..=3).contains(k)) {
            return bad(format!(
                "kernel sizes must lie in 1..=3, got {:?}",
                self.kernels
            ));
        }
        if self.kernels.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!(
                "kernel sizes must be strictly increasing, got {:?}",
                self.kernels
            ));
        }
        Ok(())
    }

    /// Expected shape of every parameter, by name.
    pub fn parameter_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut s = BTreeMap::new();
        s.insert("encoder.weight".to_string(), vec![self.d_in, self.hidden]);
        s.insert("encoder.bias".to_string(), vec![self.hidden]);
        for &k in &self.kernels {
            let p = format!("k{k}");
            s.insert(
                stencode::branch_leaf(&p, "weight"),
                vec![k, self.hidden, self.filters],
            );
            s.insert(stencode::branch_leaf(&p, "bias"), vec![self.filters]);
            s.insert(stencode::branch_leaf(&p, "classifier"), vec![self.filters]);
            s.insert(stencode::branch_leaf(&p, "head_bias"), vec![]);
            if self.aggregator.uses_attention() {
                s.insert(stencode::branch_leaf(&p, "attention"), vec![self.filters]);
            }
        }
        s.insert("fusion".to_string(), vec![self.kernels.len()]);
        s
    }

    pub fn kernel_label(&self) -> String {
        self.kernels
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }
}

/// Bag logit from instance logits `z` under `agg`.
///
/// `mean`: logit of the mean instance probability; `max`: `max z`;
/// `noisy_or`: logit of `1 - prod(1 - p)`; `smil_unit`: `sum z`;
/// `smil_weighted`: `sum softmax(scores) * z`.
pub fn bag_logit_node(g: &mut Graph, agg: Aggregator, z: NodeId, scores: Option<NodeId>) -> NodeId {
    match agg {
        Aggregator::Mean => {
            let p = g.sigmoid(z);
            let nz = g.neg(z);
            let q = g.sigmoid(nz);
            let sp = g.sum(p);
            let sq = g.sum(q);
            let lp = g.log(sp);
            let lq = g.log(sq);
            g.sub(lp, lq)
        }
        Aggregator::Max => g.max(z),
        Aggregator::NoisyOr => {
            let nz = g.neg(z);
            let lq = g.log_sigmoid(nz);
            let s = g.sum(lq);
            let l = g.log1mexp(s);
            g.sub(l, s)
        }
        Aggregator::SmilUnit => g.sum(z),
        Aggregator::SmilWeighted => {
            let alpha = g.softmax(scores.expect("smil_weighted needs attention scores"));
            g.dot(alpha, z)
        }
    }
}

/// Binary cross-entropy of a bag logit: `-ln sigma(L)` for positives,
/// `-ln sigma(-L)` for negatives.
pub fn bce_node(g: &mut Graph, logit: NodeId, label: u8) -> NodeId {
    let signed = if label == 1 { logit } else { g.neg(logit) };
    let ls = g.log_sigmoid(signed);
    g.neg(ls)
}

/// Node handles into a model graph built for one bag length.
#[derive(Debug, Clone)]
pub struct ModelGraph {
    pub graph: Graph,
    pub logit: NodeId,
    /// Per kernel, `[M]` instance logits.
    pub instance_logits: Vec<NodeId>,
    /// Per kernel, `[M]` attention weights (smil_weighted only).
    pub attention: Vec<NodeId>,
    /// `[K]` softmax-normalised fusion weights.
    pub fusion: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmilModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Tensor>,
}

fn uniform<R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("shape")
}

impl SmilModel {
    /// Glorot-uniform weights, zero biases, uniform fusion.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        let mut r = rng::stream(seed, "init", 0);
        let mut params = BTreeMap::new();
        let (d, h, f) = (config.d_in, config.hidden, config.filters);
        params.insert(
            "encoder.weight".into(),
            uniform(&mut r, &[d, h], (6.0 / (d + h) as f64).sqrt()),
        );
        params.insert("encoder.bias".into(), Tensor::zeros(&[h]));
        let head_bound = (6.0 / (f + 1) as f64).sqrt();
        for &k in &config.kernels {
            let p = format!("k{k}");
            let conv = ConvSpec::random(k, h, f, &mut r);
            params.insert(stencode::branch_leaf(&p, "weight"), conv.weight);
            params.insert(stencode::branch_leaf(&p, "bias"), conv.bias);
            params.insert(
                stencode::branch_leaf(&p, "classifier"),
                uniform(&mut r, &[f], head_bound),
            );
            params.insert(stencode::branch_leaf(&p, "head_bias"), Tensor::scalar(0.0));
            if config.aggregator.uses_attention() {
                params.insert(
                    stencode::branch_leaf(&p, "attention"),
                    uniform(&mut r, &[f], head_bound),
                );
            }
        }
        params.insert("fusion".into(), Tensor::zeros(&[config.kernels.len()]));
        Ok(Self { config, params })
    }

    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let shapes = config.parameter_shapes();
        for (name, shape) in &shapes {
            match params.get(name) {
                None => return Err(TrainError::Config(format!("missing parameter `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(TrainError::Config(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(TrainError::Config(format!(
                        "parameter `{name}` is not finite"
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = params.keys().find(|k| !shapes.contains_key(*k)) {
            return Err(TrainError::Config(format!(
                "unexpected parameter `{extra}`"
            )));
        }
        Ok(Self { config, params })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Graph from the bag leaf `x` (`[m, d_in]`, any `m`) to the bag logit.
    pub fn logit_graph(&self) -> ModelGraph {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let w = g.leaf("encoder.weight");
        let b = g.leaf("encoder.bias");
        let xw = g.matmul(x, w);
        let pre = g.add(xw, b);
        let hidden = g.relu(pre);
        let attn = self.config.aggregator.uses_attention();
        let mut logits = Vec::new();
        let mut instance_logits = Vec::new();
        let mut attention = Vec::new();
        for &k in &self.config.kernels {
            let br = stencode::build_branch(&mut g, hidden, &format!("k{k}"), attn);
            if let Some(s) = br.scores {
                let a = g.softmax(s);
                attention.push(a);
                logits.push(g.dot(a, br.logits));
            } else {
                logits.push(bag_logit_node(
                    &mut g,
                    self.config.aggregator,
                    br.logits,
                    None,
                ));
            }
            instance_logits.push(br.logits);
        }
        let stacked = g.stack(&logits);
        let fl = g.leaf("fusion");
        let fusion = g.softmax(fl);
        let logit = g.dot(fusion, stacked);
        g.set_output(logit);
        ModelGraph {
            graph: g,
            logit,
            instance_logits,
            attention,
            fusion,
        }
    }

    /// Same as [`Self::logit_graph`] with the BCE loss for `label` as output.
    pub fn loss_graph(&self, label: u8) -> ModelGraph {
        let mut mg = self.logit_graph();
        let loss = bce_node(&mut mg.graph, mg.logit, label);
        mg.graph.set_output(loss);
        mg
    }

    pub fn bindings(&self, x: &Tensor) -> Bindings {
        let mut b = self.params.clone();
        b.insert("x".into(), x.clone());
        b
    }
}

/// Per-bag scores read off an evaluated logit graph.
#[derive(Debug, Clone)]
pub struct BagScores {
    pub logit: f64,
    /// `sigma(sum_k beta_k z^j_k)` per instance.
    pub instance_probs: Vec<f64>,
    /// `sum_k beta_k alpha^j_k` per instance, smil_weighted only.
    pub attention: Option<Vec<f64>>,
}

impl BagScores {
    pub fn from_trace(mg: &ModelGraph, trace: &Trace) -> Self {
        let beta = trace.value(mg.fusion).data().to_vec();
        let m = trace.value(mg.instance_logits[0]).len();
        let blend = |nodes: &[NodeId]| -> Vec<f64> {
            (0..m)
                .map(|j| {
                    nodes
                        .iter()
                        .zip(&beta)
                        .map(|(&n, b)| b * trace.value(n).data()[j])
                        .sum()
                })
                .collect()
        };
        let fused = blend(&mg.instance_logits);
        Self {
            logit: trace.output(),
            instance_probs: fused.into_iter().map(crate::diffcore::sigmoid).collect(),
            attention: (!mg.attention.is_empty()).then(|| blend(&mg.attention)),
        }
    }

    pub fn prob(&self) -> f64 {
        crate::diffcore::sigmoid(self.logit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::{self, InstanceProbs};
    use crate::diffcore::{finite_diff, rel_error, GradCheck};
    use crate::gradlab::{self, GradPoint};

    fn instance_graph(agg: Aggregator) -> Graph {
        let mut g = Graph::new();
        let z = g.leaf("z");
        let l = bag_logit_node(&mut g, agg, z, None);
        let loss = bce_node(&mut g, l, 1);
        g.set_output(loss);
        g
    }

    fn logits_of(p: &[f64]) -> Tensor {
        Tensor::vector(p.iter().map(|&x| aggregate::logit(x)).collect())
    }

    #[test]
    fn bag_logits_match_aggregate_module() {
        let p = [0.2, 0.7, 0.45, 0.9];
        let ip = InstanceProbs::from_probs(&p).unwrap();
        let expect = [
            (Aggregator::Mean, aggregate::mean_pool(&ip)),
            (Aggregator::Max, aggregate::max_pool(&ip)),
            (Aggregator::NoisyOr, aggregate::noisy_or(&ip)),
            (Aggregator::SmilUnit, aggregate::smil_unit(&ip)),
        ];
        for (agg, prob) in expect {
            let mut g = Graph::new();
            let z = g.leaf("z");
            let l = bag_logit_node(&mut g, agg, z, None);
            g.set_output(l);
            let b: Bindings = [("z".to_string(), logits_of(&p))].into_iter().collect();
            let got = crate::diffcore::sigmoid(g.forward(&b).unwrap());
            assert!((got - prob).abs() < 1e-12, "{agg}: {got} vs {prob}");
        }
    }

    #[test]
    fn bce_values() {
        for (label, expect) in [(1u8, std::f64::consts::LN_2), (0, std::f64::consts::LN_2)] {
            let mut g = Graph::new();
            let l = g.leaf("l");
            let loss = bce_node(&mut g, l, label);
            g.set_output(loss);
            let b: Bindings = [("l".to_string(), Tensor::scalar(0.0))]
                .into_iter()
                .collect();
            assert!((g.forward(&b).unwrap() - expect).abs() < 1e-15);
        }
    }

    /// One instance near 1, one near 0, the rest at 0.5: the noisy-OR bag is
    /// saturated and starves the 0.5 instances, the sharp bag sits at 0.5.
    #[test]
    fn vanishing_contrast_three_ways() {
        let m = 5;
        let mut p = vec![0.5; m];
        p[0] = 1.0 - 1e-6;
        p[1] = 1e-6;
        let z = logits_of(&p);
        let b: Bindings = [("z".to_string(), z.clone())].into_iter().collect();
        let pt_probs = InstanceProbs::from_probs(&p).unwrap();
        for (agg, method) in [
            (Aggregator::NoisyOr, gradlab::Method::Traditional),
            (Aggregator::SmilUnit, gradlab::Method::Sharp),
        ] {
            let g = instance_graph(agg);
            let dz = g.backward(&b).unwrap()["z"].clone();
            let fd = finite_diff(
                |t| {
                    g.forward(&[("z".to_string(), t.clone())].into_iter().collect())
                        .unwrap()
                },
                &z,
                1e-6,
            )
            .unwrap();
            for (j, &pj) in p.iter().enumerate().skip(2) {
                let dp = dz.data()[j] / (pj * (1.0 - pj));
                let fd_p = fd.data()[j] / (pj * (1.0 - pj));
                let closed =
                    gradlab::grad_closed(method, &GradPoint::new(pt_probs.clone(), j).unwrap());
                assert!(
                    rel_error(dp, closed) < 1e-6,
                    "{agg} j={j}: autodiff {dp} closed {closed}"
                );
                assert!(
                    (fd_p - closed).abs() < 1e-6 * closed.abs().max(1e-3),
                    "{agg} j={j}: fd {fd_p} closed {closed}"
                );
                match agg {
                    Aggregator::NoisyOr => assert!(closed.abs() < 1e-5, "{closed}"),
                    _ => assert!(closed.abs() >= 1.0, "{closed}"),
                }
            }
        }
    }

    /// With only the 1 - 1e-6 instance and the rest at 0.5 both rules saturate.
    #[test]
    fn single_confident_instance_starves_both_rules() {
        let mut p = vec![0.5; 5];
        p[0] = 1.0 - 1e-6;
        let ip = InstanceProbs::from_probs(&p).unwrap();
        for method in [gradlab::Method::Traditional, gradlab::Method::Sharp] {
            let g = gradlab::grad_closed(method, &GradPoint::new(ip.clone(), 3).unwrap());
            assert!(g.abs() < 1e-4, "{method:?} {g}");
        }
    }

    #[test]
    fn model_gradcheck_every_aggregator() {
        let mut r = rng::stream(3, "test", 0);
        let x = uniform(&mut r, &[5, 3], 1.5);
        for agg in Aggregator::ALL {
            let mut cfg = ModelConfig::new(3, vec![1, 2, 3], agg);
            cfg.hidden = 4;
            cfg.filters = 3;
            let mut model = SmilModel::init(cfg, 9).unwrap();
            model
                .params
                .insert("fusion".into(), Tensor::vector(vec![0.3, -0.2, 0.1]));
            for label in [0u8, 1] {
                let mg = model.loss_graph(label);
                let report = GradCheck::default()
                    .run(&mg.graph, &model.bindings(&x))
                    .unwrap();
                assert!(
                    report.pass,
                    "{agg} y={label}: {} at {:?}",
                    report.max_rel_error, report.worst
                );
            }
        }
    }

    #[test]
    fn parameter_shapes_match_init() {
        for agg in Aggregator::ALL {
            let cfg = ModelConfig::new(16, vec![1, 3], agg);
            let model = SmilModel::init(cfg.clone(), 1).unwrap();
            let shapes: BTreeMap<String, Vec<usize>> = model
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect();
            assert_eq!(shapes, cfg.parameter_shapes());
            let count = model
                .logit_graph()
                .graph
                .leaf_names()
                .filter(|n| *n != "x")
                .count();
            assert_eq!(count, shapes.len(), "{agg}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::new(4, vec![], Aggregator::Mean)
            .validate()
            .is_err());
        assert!(ModelConfig::new(4, vec![4], Aggregator::Mean)
            .validate()
            .is_err());
        assert!(ModelConfig::new(4, vec![2, 1], Aggregator::Mean)
            .validate()
            .is_err());
        assert_eq!(
            "noisy_or".parse::<Aggregator>().unwrap(),
            Aggregator::NoisyOr
        );
        assert!("median"
            .parse::<Aggregator>()
            .unwrap_err()
            .contains("median"));
    }
}
