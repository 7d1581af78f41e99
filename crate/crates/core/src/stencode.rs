//! Spatial-temporal instance encoding.
//!
//! Each kernel size `k` turns the `M x d` bag into an `M x r` bag with a
//! zero-padded 1-d convolution followed by ReLU. Every encoded bag is scored by
//! attention-weighted S-MIL and the per-kernel scores are fused by an outer
//! S-MIL into one "super bag" probability.

use rand::Rng;

use crate::aggregate::{
    self, AggregateError, AttentionParams, BagEmbeddings, InstanceProbs, Weights,
};
use crate::diffcore::{
    self, sigmoid, Bindings, DiffError, GradCheck, GradReport, Graph, NodeId, Tensor,
};

/// Filters per kernel at desk scale.
pub const DEFAULT_FILTERS: usize = 32;
/// Filters per kernel used by the full-size video model.
pub const FULL_FILTERS: usize = 512;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StencodeError {
    #[error("{axis} axis: expected {expected}, got {got}")]
    Dimension {
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("kernel set is empty")]
    NoKernels,
    #[error("invalid convolution: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Parameters of one `Conv1d_{k,r}` block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec {
    /// `[k, d_in, r]`
    pub weight: Tensor,
    /// `[r]`
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self, StencodeError> {
        let [k, _, r] = weight.shape() else {
            return Err(StencodeError::BadSpec(format!(
                "weight shape {:?} is not [k, d_in, r]",
                weight.shape()
            )));
        };
        if *k == 0 || *r == 0 {
            return Err(StencodeError::BadSpec(
                "kernel size and filter count must be positive".into(),
            ));
        }
        if bias.shape() != [*r] {
            return Err(StencodeError::Dimension {
                axis: "filter",
                expected: *r,
                got: bias.len(),
            });
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(StencodeError::BadSpec("non-finite parameter".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(k: usize, d_in: usize, r: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[k, d_in, r]),
            bias: Tensor::zeros(&[r]),
        }
    }

    /// Uniform in `±sqrt(6 / (k * d_in + r))`, zero bias.
    pub fn random<R: Rng>(k: usize, d_in: usize, r: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (k * d_in + r) as f64).sqrt();
        let data = (0..k * d_in * r)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::new(vec![k, d_in, r], data).expect("shape matches"),
            bias: Tensor::zeros(&[r]),
        }
    }

    pub fn k(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn r(&self) -> usize {
        self.weight.shape()[2]
    }
}

/// `ReLU(Conv1d_{k,r}(H))`, same length `M` as the input.
pub fn conv1d_encode(h: &BagEmbeddings, spec: &ConvSpec) -> Result<BagEmbeddings, StencodeError> {
    if h.d() != spec.d_in() {
        return Err(StencodeError::Dimension {
            axis: "channel",
            expected: spec.d_in(),
            got: h.d(),
        });
    }
    let y = diffcore::conv1d_forward(h.tensor(), &spec.weight, &spec.bias)
        .map_err(StencodeError::BadSpec)?;
    Ok(BagEmbeddings::new(y.map(|x| x.max(0.0)))?)
}

/// A bag encoded at several temporal scales.
#[derive(Debug, Clone)]
pub struct SuperBag {
    pub kernels: Vec<usize>,
    pub encoded: Vec<BagEmbeddings>,
    pub kernel_logits: Vec<f64>,
    pub logit: f64,
}

impl SuperBag {
    pub fn kernel_probs(&self) -> Vec<f64> {
        self.kernel_logits.iter().map(|&z| sigmoid(z)).collect()
    }

    pub fn prob(&self) -> f64 {
        sigmoid(self.logit)
    }
}

pub fn super_bag(
    h: &BagEmbeddings,
    kernels: &[ConvSpec],
    heads: &[AttentionParams],
    fusion: &Weights,
) -> Result<SuperBag, StencodeError> {
    if kernels.is_empty() {
        return Err(StencodeError::NoKernels);
    }
    if heads.len() != kernels.len() {
        return Err(StencodeError::Dimension {
            axis: "head",
            expected: kernels.len(),
            got: heads.len(),
        });
    }
    if fusion.len() != kernels.len() {
        return Err(StencodeError::Dimension {
            axis: "fusion",
            expected: kernels.len(),
            got: fusion.len(),
        });
    }
    let mut encoded = Vec::with_capacity(kernels.len());
    let mut kernel_logits = Vec::with_capacity(kernels.len());
    for (spec, head) in kernels.iter().zip(heads) {
        let c = conv1d_encode(h, spec)?;
        let alpha = aggregate::attention_weights(&c, head)?;
        kernel_logits.push(aggregate::bag_logit_embedded(&c, head, &alpha)?);
        encoded.push(c);
    }
    let logit = aggregate::smil_logit(&InstanceProbs::from_logits(&kernel_logits)?, fusion)?;
    Ok(SuperBag {
        kernels: kernels.iter().map(ConvSpec::k).collect(),
        encoded,
        kernel_logits,
        logit,
    })
}

/// `S-MIL(p_1, ..., p_K)` with `p_k = S-MIL(ReLU(Conv1d_k(H)))`.
pub fn super_bag_prob(
    h: &BagEmbeddings,
    kernels: &[ConvSpec],
    heads: &[AttentionParams],
    fusion: &Weights,
) -> Result<f64, StencodeError> {
    super_bag(h, kernels, heads, fusion).map(|s| s.prob())
}

/// Graph nodes of one kernel branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchNodes {
    /// `[M, r]` after ReLU
    pub encoded: NodeId,
    /// `[M]` instance logits `c W + b`
    pub logits: NodeId,
    /// `[M]` raw attention scores `c w`, when the branch has an attention leaf
    pub scores: Option<NodeId>,
}

/// Leaf names used for kernel branch `prefix`.
pub fn branch_leaf(prefix: &str, part: &str) -> String {
    format!("{prefix}.{part}")
}

/// Adds one conv + head branch reading `input`. Leaves are
/// `{prefix}.weight`, `{prefix}.bias`, `{prefix}.classifier`,
/// `{prefix}.head_bias` and, with `attention`, `{prefix}.attention`.
pub fn build_branch(g: &mut Graph, input: NodeId, prefix: &str, attention: bool) -> BranchNodes {
    let w = g.leaf(&branch_leaf(prefix, "weight"));
    let b = g.leaf(&branch_leaf(prefix, "bias"));
    let conv = g.conv1d(input, w, b);
    let encoded = g.relu(conv);
    let cls = g.leaf(&branch_leaf(prefix, "classifier"));
    let hb = g.leaf(&branch_leaf(prefix, "head_bias"));
    let raw = g.matmul(encoded, cls);
    let logits = g.add(raw, hb);
    let scores = attention.then(|| {
        let att = g.leaf(&branch_leaf(prefix, "attention"));
        g.matmul(encoded, att)
    });
    BranchNodes {
        encoded,
        logits,
        scores,
    }
}

/// Loss `-ln p` of a positive super bag as a graph over `h` and all branch
/// parameters; fusion weights enter as constants.
pub fn super_bag_loss_graph(n_kernels: usize, fusion: &Weights) -> Graph {
    let mut g = Graph::new();
    let h = g.leaf("h");
    let mut kernel_logits = Vec::with_capacity(n_kernels);
    for i in 0..n_kernels {
        let br = build_branch(&mut g, h, &format!("k{i}"), true);
        let alpha = g.softmax(br.scores.expect("attention branch"));
        kernel_logits.push(g.dot(alpha, br.logits));
    }
    let stacked = g.stack(&kernel_logits);
    let beta = g.constant(Tensor::vector(fusion.as_slice().to_vec()));
    let logit = g.dot(beta, stacked);
    let ls = g.log_sigmoid(logit);
    let loss = g.neg(ls);
    g.set_output(loss);
    g
}

pub fn super_bag_bindings(
    h: &BagEmbeddings,
    kernels: &[ConvSpec],
    heads: &[AttentionParams],
) -> Bindings {
    let mut b = Bindings::new();
    b.insert("h".into(), h.tensor().clone());
    for (i, (spec, head)) in kernels.iter().zip(heads).enumerate() {
        let p = format!("k{i}");
        b.insert(branch_leaf(&p, "weight"), spec.weight.clone());
        b.insert(branch_leaf(&p, "bias"), spec.bias.clone());
        b.insert(
            branch_leaf(&p, "classifier"),
            Tensor::vector(head.classifier.clone()),
        );
        b.insert(branch_leaf(&p, "head_bias"), Tensor::scalar(head.bias));
        b.insert(
            branch_leaf(&p, "attention"),
            Tensor::vector(head.attention.clone()),
        );
    }
    b
}

/// Reverse-mode vs finite-difference check of the positive-bag loss with
/// respect to `H`, every conv weight and bias, and every head parameter.
pub fn encoder_gradcheck(
    h: &BagEmbeddings,
    kernels: &[ConvSpec],
    heads: &[AttentionParams],
    fusion: &Weights,
) -> Result<GradReport, StencodeError> {
    super_bag(h, kernels, heads, fusion)?;
    let g = super_bag_loss_graph(kernels.len(), fusion);
    Ok(GradCheck::default().run(&g, &super_bag_bindings(h, kernels, heads))?)
}
