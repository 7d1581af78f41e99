//! Where do instance gradients vanish?
//!
//! For a positive bag (`y = 1`) with loss `L = -ln p`, the gradient of the
//! loss with respect to one instance probability `p^j` is
//!
//! * sharp rule: `(p - 1) / (p^j (1 - p^j))`
//! * noisy-OR:   `(p̂ - 1) / (p̂ (1 - p^j))`
//!
//! This module evaluates both in closed form, tabulates them on the
//! two-instance grid, estimates by Monte Carlo how much of the probability
//! cube makes each one small, and builds the two-element counterexample where
//! noisy-OR vanishes while the sharp rule does not.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregate::{noisy_or_complement, AggregateError, InstanceProbs};
use crate::diffcore::{sigmoid, Graph, NodeId};
use crate::numfmt::write_sig17;
use crate::rng::counter_uniform;

/// Monte-Carlo samples are drawn from `(SAMPLE_CLAMP, 1 - SAMPLE_CLAMP)^M`.
pub const SAMPLE_CLAMP: f64 = 1e-6;

pub const DEFAULT_TAU: f64 = 0.05;
pub const TAU_SWEEP: [f64; 3] = [0.1, 0.05, 0.01];

pub const SURFACE_HEADER: &str = "p1,p2,grad_traditional,grad_sharp";

#[derive(Debug, thiserror::Error)]
pub enum GradLabError {
    #[error("instance index {j} out of range for a bag of {m}")]
    Index { j: usize, m: usize },
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Traditional,
    Sharp,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Traditional => "traditional",
            Method::Sharp => "sharp",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = GradLabError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "traditional" => Ok(Method::Traditional),
            "sharp" => Ok(Method::Sharp),
            other => Err(GradLabError::Param(format!("unknown method `{other}`"))),
        }
    }
}

/// An instance of a positive bag at which to take the loss gradient.
#[derive(Debug, Clone)]
pub struct GradPoint {
    probs: InstanceProbs,
    j: usize,
}

impl GradPoint {
    pub fn new(probs: InstanceProbs, j: usize) -> Result<Self, GradLabError> {
        if j >= probs.len() {
            return Err(GradLabError::Index { j, m: probs.len() });
        }
        Ok(Self { probs, j })
    }

    pub fn probs(&self) -> &InstanceProbs {
        &self.probs
    }

    pub fn j(&self) -> usize {
        self.j
    }
}

fn bag_logit(p: &InstanceProbs) -> f64 {
    p.logits().iter().sum()
}

/// `(p - 1) / (p^j (1 - p^j))` with `p` from the unweighted sharp rule.
pub fn grad_smil_closed(pt: &GradPoint) -> f64 {
    let p = &pt.probs;
    let one_minus_p = sigmoid(-bag_logit(p));
    -one_minus_p / (p.prob(pt.j) * p.complement(pt.j))
}

/// `(p̂ - 1) / (p̂ (1 - p^j))` with `p̂` from noisy-OR.
pub fn grad_traditional_closed(pt: &GradPoint) -> f64 {
    let p = &pt.probs;
    let one_minus_hat = noisy_or_complement(p);
    -one_minus_hat / ((1.0 - one_minus_hat) * p.complement(pt.j))
}

pub fn grad_closed(method: Method, pt: &GradPoint) -> f64 {
    match method {
        Method::Traditional => grad_traditional_closed(pt),
        Method::Sharp => grad_smil_closed(pt),
    }
}

/// Closed-form gradient with respect to every instance.
pub fn instance_grads(method: Method, p: &InstanceProbs) -> Vec<f64> {
    (0..p.len())
        .map(|j| {
            grad_closed(
                method,
                &GradPoint {
                    probs: p.clone(),
                    j,
                },
            )
        })
        .collect()
}

/// Stable loss `-ln p` (positive bag) as a graph over the leaf `p`, a vector of
/// `m` instance probabilities.
pub fn loss_graph(method: Method) -> (Graph, NodeId) {
    let mut g = Graph::new();
    let p = g.leaf("p");
    let neg = g.neg(p);
    let one_minus = g.shift(neg, 1.0);
    let log_q = g.log(one_minus);
    let out = match method {
        Method::Sharp => {
            let log_p = g.log(p);
            let z = g.sub(log_p, log_q);
            let s = g.sum(z);
            let ls = g.log_sigmoid(s);
            g.neg(ls)
        }
        Method::Traditional => {
            let s = g.sum(log_q);
            let l = g.log1mexp(s);
            g.neg(l)
        }
    };
    g.set_output(out);
    (g, p)
}

/// The same loss written literally as `-ln(1 / (1 + prod(1/p^j - 1)))` or
/// `-ln(1 - prod(1 - p^j))`, with the product taken as `exp(sum(ln))`.
pub fn literal_loss_graph(method: Method) -> Graph {
    let mut g = Graph::new();
    let p = g.leaf("p");
    let bag = match method {
        Method::Sharp => {
            let inv = g.powf(p, -1.0);
            let odds = g.shift(inv, -1.0);
            let logs = g.log(odds);
            let s = g.sum(logs);
            let prod = g.exp(s);
            let denom = g.shift(prod, 1.0);
            g.powf(denom, -1.0)
        }
        Method::Traditional => {
            let neg = g.neg(p);
            let q = g.shift(neg, 1.0);
            let logs = g.log(q);
            let s = g.sum(logs);
            let prod = g.exp(s);
            let negprod = g.neg(prod);
            g.shift(negprod, 1.0)
        }
    };
    let l = g.log(bag);
    let out = g.neg(l);
    g.set_output(out);
    g
}

/// Stable scalar loss used as a finite-difference oracle.
pub fn loss_value(method: Method, probs: &[f64]) -> f64 {
    match method {
        Method::Sharp => {
            let s: f64 = probs.iter().map(|&x| x.ln() - (-x).ln_1p()).sum();
            // softplus(-s)
            if s >= 0.0 {
                (-s).exp().ln_1p()
            } else {
                -s + s.exp().ln_1p()
            }
        }
        Method::Traditional => {
            let c: f64 = probs.iter().map(|&x| (-x).ln_1p()).sum::<f64>().exp();
            -(-c).ln_1p()
        }
    }
}

/// Both gradients over a square grid of `(p1, p2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSurface {
    pub n: usize,
    pub lo: f64,
    pub hi: f64,
    pub axis: Vec<f64>,
    /// `traditional[i * n + k]` is the gradient at `(axis[i], axis[k])`.
    pub traditional: Vec<f64>,
    pub sharp: Vec<f64>,
}

/// `d L(p̂) / d p^1` for two instances, as an explicit rational expression.
pub fn surface_traditional_literal(p1: f64, p2: f64) -> f64 {
    (p2 - 1.0) / (1.0 - (1.0 - p1) * (1.0 - p2))
}

/// `d L(p) / d p^1` for two instances, as an explicit rational expression.
pub fn surface_sharp_literal(p1: f64, p2: f64) -> f64 {
    (p2 - 1.0) / (p1 * (2.0 * p1 * p2 + 1.0 - p1 - p2))
}

pub fn surface_m2(n: usize, lo: f64, hi: f64) -> Result<GradSurface, GradLabError> {
    if n < 2 {
        return Err(GradLabError::Param(format!(
            "grid needs at least 2 points per axis, got {n}"
        )));
    }
    if !(lo >= 1e-3 && hi <= 1.0 - 1e-3 && lo < hi) {
        return Err(GradLabError::Param(format!(
            "range [{lo}, {hi}] must satisfy 1e-3 <= lo < hi <= 1 - 1e-3"
        )));
    }
    let step = (hi - lo) / (n - 1) as f64;
    let axis: Vec<f64> = (0..n)
        .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
        .collect();
    let mut traditional = Vec::with_capacity(n * n);
    let mut sharp = Vec::with_capacity(n * n);
    for &p1 in &axis {
        for &p2 in &axis {
            traditional.push(surface_traditional_literal(p1, p2));
            sharp.push(surface_sharp_literal(p1, p2));
        }
    }
    Ok(GradSurface {
        n,
        lo,
        hi,
        axis,
        traditional,
        sharp,
    })
}

impl GradSurface {
    /// Largest relative deviation between the grid entries and the general
    /// closed forms evaluated at the same points.
    pub fn closed_form_deviation(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, &p1) in self.axis.iter().enumerate() {
            for (k, &p2) in self.axis.iter().enumerate() {
                let pt = GradPoint::new(
                    InstanceProbs::from_probs(&[p1, p2]).expect("grid inside (0,1)"),
                    0,
                )
                .expect("index 0");
                let idx = i * self.n + k;
                worst = worst
                    .max(crate::diffcore::rel_error(
                        self.traditional[idx],
                        grad_traditional_closed(&pt),
                    ))
                    .max(crate::diffcore::rel_error(
                        self.sharp[idx],
                        grad_smil_closed(&pt),
                    ));
            }
        }
        worst
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.n * self.n * 96);
        out.push_str(SURFACE_HEADER);
        out.push('\n');
        for (i, &p1) in self.axis.iter().enumerate() {
            for (k, &p2) in self.axis.iter().enumerate() {
                let idx = i * self.n + k;
                for (c, v) in [p1, p2, self.traditional[idx], self.sharp[idx]]
                    .into_iter()
                    .enumerate()
                {
                    if c > 0 {
                        out.push(',');
                    }
                    write_sig17(&mut out, v);
                }
                out.push('\n');
            }
        }
        out
    }
}

pub fn export_surface(surface: &GradSurface, path: &Path) -> Result<(), GradLabError> {
    std::fs::write(path, surface.to_csv()).map_err(|source| GradLabError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanishReport {
    pub method: Method,
    pub m: usize,
    pub tau: f64,
    pub samples: u64,
    pub seed: u64,
    pub fraction: f64,
}

fn sample_point(m: usize, seed: u64, k: u64, buf: &mut Vec<f64>) {
    buf.clear();
    for c in 0..m as u64 {
        let u = counter_uniform(seed, k * m as u64 + c);
        buf.push(SAMPLE_CLAMP + (1.0 - 2.0 * SAMPLE_CLAMP) * u);
    }
}

/// `max_j |dL/dp^j|` at each Monte-Carlo sample. Sample `k` depends only on
/// `(seed, k)`, so both methods see identical points.
pub fn max_grad_norms(
    method: Method,
    m: usize,
    samples: u64,
    seed: u64,
) -> Result<Vec<f64>, GradLabError> {
    if m < 2 {
        return Err(GradLabError::Param(format!(
            "need at least 2 instances, got {m}"
        )));
    }
    if samples == 0 {
        return Err(GradLabError::Param("need at least one sample".into()));
    }
    let mut buf = Vec::with_capacity(m);
    let mut out = Vec::with_capacity(samples as usize);
    for k in 0..samples {
        sample_point(m, seed, k, &mut buf);
        let p = InstanceProbs::from_probs(&buf)?;
        let norm = instance_grads(method, &p)
            .into_iter()
            .fold(0.0f64, |acc, g| acc.max(g.abs()));
        out.push(norm);
    }
    Ok(out)
}

fn fraction_below(norms: &[f64], tau: f64) -> f64 {
    norms.iter().filter(|&&g| g < tau).count() as f64 / norms.len() as f64
}

fn check_tau(tau: f64) -> Result<(), GradLabError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(GradLabError::Param(format!(
            "threshold must be nonnegative, got {tau}"
        )));
    }
    Ok(())
}

/// Fraction of the open cube where every instance gradient is below `tau`.
pub fn vanish_fraction(
    method: Method,
    m: usize,
    tau: f64,
    samples: u64,
    seed: u64,
) -> Result<VanishReport, GradLabError> {
    check_tau(tau)?;
    let norms = max_grad_norms(method, m, samples, seed)?;
    Ok(VanishReport {
        method,
        m,
        tau,
        samples,
        seed,
        fraction: fraction_below(&norms, tau),
    })
}

/// One report per `(method, tau)`, sampling each method once.
pub fn vanish_sweep(
    methods: &[Method],
    m: usize,
    taus: &[f64],
    samples: u64,
    seed: u64,
) -> Result<Vec<VanishReport>, GradLabError> {
    taus.iter().try_for_each(|&t| check_tau(t))?;
    let mut out = Vec::new();
    for &method in methods {
        let norms = max_grad_norms(method, m, samples, seed)?;
        for &tau in taus {
            out.push(VanishReport {
                method,
                m,
                tau,
                samples,
                seed,
                fraction: fraction_below(&norms, tau),
            });
        }
    }
    Ok(out)
}

/// Two-element counterexample: `p = (eps, 1 - eps, delta, ..., delta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleCase {
    pub m: usize,
    pub epsilon: f64,
    pub delta: f64,
    /// Gradients with respect to the first `delta` instance.
    pub grad_traditional: f64,
    pub grad_sharp: f64,
    pub p_hat: f64,
    pub p: f64,
}

pub fn counterexample_case(
    m: usize,
    epsilon: f64,
    delta: f64,
) -> Result<CounterexampleCase, GradLabError> {
    if m < 3 {
        return Err(GradLabError::Param(format!(
            "need at least 3 instances, got {m}"
        )));
    }
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(GradLabError::Param(format!(
            "epsilon must lie in (0, 1e-3], got {epsilon}"
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(GradLabError::Param(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    let mut v = vec![delta; m];
    v[0] = epsilon;
    v[1] = 1.0 - epsilon;
    let probs = InstanceProbs::from_probs(&v)?;
    let pt = GradPoint::new(probs, 2)?;
    Ok(CounterexampleCase {
        m,
        epsilon,
        delta,
        grad_traditional: grad_traditional_closed(&pt),
        grad_sharp: grad_smil_closed(&pt),
        p_hat: 1.0 - noisy_or_complement(pt.probs()),
        p: sigmoid(bag_logit(pt.probs())),
    })
}

impl CounterexampleCase {
    /// Noisy-OR gradient has vanished while the sharp one has not.
    pub fn pass(&self) -> bool {
        self.grad_traditional.abs() < 1e-3 && self.grad_sharp.abs() > 0.5
    }
}

/// Comparison verdict for one threshold.
pub fn verdict(sharp: f64, traditional: f64) -> &'static str {
    if sharp < traditional {
        "sharp smaller"
    } else if sharp == traditional {
        "equal"
    } else {
        "sharp larger"
    }
}
