//! Synthetic partially-attacked bags.
//!
//! A bag is a length-`M` sequence of `d`-dimensional instances. Real
//! instances follow a stationary Gaussian AR(1) chain with marginal standard
//! deviation [`REAL_STD`]. A positive bag overlays a random subset of
//! positions with fakes: the underlying chain value is shifted by `Δ` along a
//! seed-fixed unit direction and perturbed by independent jitter, which also
//! breaks the chain's temporal smoothness.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::numfmt::write_sig17;
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;
/// Marginal per-coordinate standard deviation of real instances.
pub const REAL_STD: f64 = 0.5;

#[derive(Debug, thiserror::Error)]
pub enum BagsimError {
    #[error("invalid generator config: {}", .0.join("; "))]
    Config(Vec<String>),
    #[error("fake rate must lie in (0, 1], got {0}")]
    Rate(f64),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub seed: u64,
    /// Bags in the training split.
    pub n_bags: usize,
    /// Bags in the test split.
    pub n_test: usize,
    pub m: usize,
    pub d: usize,
    /// Smallest fake count in a positive bag.
    pub fake_lo: usize,
    /// Largest fake count in a positive bag.
    pub fake_hi: usize,
    pub separation: f64,
    pub temporal_corr: f64,
    pub jitter: f64,
    pub positive_fraction: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_bags: 2000,
            n_test: 400,
            m: 20,
            d: 16,
            fake_lo: 1,
            fake_hi: 19,
            separation: 2.0,
            temporal_corr: 0.8,
            jitter: 1.0,
            positive_fraction: 0.5,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), BagsimError> {
        let mut bad = Vec::new();
        if self.m < 2 {
            bad.push(format!("m >= 2 (got {})", self.m));
        }
        if self.d < 1 {
            bad.push(format!("d >= 1 (got {})", self.d));
        }
        if self.n_bags < 1 {
            bad.push(format!("n_bags >= 1 (got {})", self.n_bags));
        }
        if self.fake_lo < 1 {
            bad.push(format!("fake_lo >= 1 (got {})", self.fake_lo));
        }
        if self.fake_lo > self.fake_hi {
            bad.push(format!(
                "fake_lo <= fake_hi (got {} > {})",
                self.fake_lo, self.fake_hi
            ));
        }
        if self.fake_hi > self.m {
            bad.push(format!("fake_hi <= m (got {} > {})", self.fake_hi, self.m));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            bad.push(format!("separation >= 0 (got {})", self.separation));
        }
        if !(0.0..1.0).contains(&self.temporal_corr) {
            bad.push(format!(
                "temporal_corr in [0, 1) (got {})",
                self.temporal_corr
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            bad.push(format!("jitter >= 0 (got {})", self.jitter));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            bad.push(format!(
                "positive_fraction in [0, 1] (got {})",
                self.positive_fraction
            ));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(BagsimError::Config(bad))
        }
    }

    pub fn bags_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_bags,
            Split::Test => self.n_test,
        }
    }

    /// Unit direction along which fakes are shifted; shared by both splits.
    pub fn fake_direction(&self) -> Vec<f64> {
        let mut r = rng::stream(self.seed, "data/direction", 0);
        loop {
            let v: Vec<f64> = (0..self.d).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub id: usize,
    pub label: u8,
    /// `[M, d]`
    pub instances: Tensor,
    /// Evaluation only.
    pub instance_labels: Vec<u8>,
}

impl Bag {
    pub fn m(&self) -> usize {
        self.instances.shape()[0]
    }

    pub fn fake_count(&self) -> usize {
        self.instance_labels.iter().filter(|&&l| l == 1).count()
    }

    pub fn satisfies_mil_axiom(&self) -> bool {
        (self.label == 1) == (self.fake_count() >= 1)
    }
}

/// What a trainer is allowed to see of a bag.
#[derive(Debug, Clone, Copy)]
pub struct TrainBag<'a> {
    pub id: usize,
    pub label: u8,
    pub instances: &'a Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GenConfig,
    pub split: Split,
    pub bags: Vec<Bag>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn train_view(&self) -> Vec<TrainBag<'_>> {
        self.bags
            .iter()
            .map(|b| TrainBag {
                id: b.id,
                label: b.label,
                instances: &b.instances,
            })
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.bags.iter().filter(|b| b.label == 1).count()
    }
}

fn generate_bag(cfg: &GenConfig, split: Split, index: usize, direction: &[f64]) -> Bag {
    let mut r = rng::stream(cfg.seed, &format!("data/{split}"), index as u64);
    let (m, d) = (cfg.m, cfg.d);
    let positive = r.random::<f64>() < cfg.positive_fraction;
    let mut instance_labels = vec![0u8; m];
    if positive {
        let count = r.random_range(cfg.fake_lo..=cfg.fake_hi);
        for j in sample(&mut r, m, count) {
            instance_labels[j] = 1;
        }
    }

    let rho = cfg.temporal_corr;
    let innovation = REAL_STD * (1.0 - rho * rho).sqrt();
    let mut data = Vec::with_capacity(m * d);
    let mut state: Vec<f64> = (0..d)
        .map(|_| {
            let e: f64 = StandardNormal.sample(&mut r);
            REAL_STD * e
        })
        .collect();
    for (j, &fake) in instance_labels.iter().enumerate() {
        if j > 0 {
            for s in state.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut r);
                *s = rho * *s + innovation * e;
            }
        }
        if fake == 1 {
            for (s, u) in state.iter().zip(direction) {
                let e: f64 = StandardNormal.sample(&mut r);
                data.push(s + cfg.separation * u + cfg.jitter * e);
            }
        } else {
            data.extend_from_slice(&state);
        }
    }
    Bag {
        id: index,
        label: u8::from(positive),
        instances: Tensor::matrix(m, d, data).expect("generated shape"),
        instance_labels,
    }
}

/// Training split of `cfg`.
pub fn generate(cfg: &GenConfig) -> Result<Dataset, BagsimError> {
    generate_split(cfg, Split::Train)
}

pub fn generate_split(cfg: &GenConfig, split: Split) -> Result<Dataset, BagsimError> {
    cfg.validate()?;
    let direction = cfg.fake_direction();
    let bags = (0..cfg.bags_in(split))
        .map(|i| generate_bag(cfg, split, i, &direction))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        split,
        bags,
    })
}

/// Fake count `round(rate * M)` clamped to `[1, M - 1]`, except that rate 1
/// gives fully attacked bags.
pub fn fake_count_for_rate(rate: f64, m: usize) -> Result<usize, BagsimError> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(BagsimError::Rate(rate));
    }
    if rate == 1.0 {
        return Ok(m);
    }
    Ok(((rate * m as f64).round() as usize).clamp(1, m - 1))
}

pub fn fake_rate_sweep(base: &GenConfig, rates: &[f64]) -> Result<Vec<GenConfig>, BagsimError> {
    rates
        .iter()
        .map(|&rate| {
            let count = fake_count_for_rate(rate, base.m)?;
            let cfg = GenConfig {
                fake_lo: count,
                fake_hi: count,
                ..base.clone()
            };
            cfg.validate()?;
            Ok(cfg)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    split: Split,
    config: GenConfig,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct BagRecord {
    id: usize,
    label: u8,
    instances: Vec<Vec<f64>>,
    instance_labels: Vec<u8>,
}

fn write_bag_line(out: &mut String, bag: &Bag) {
    use std::fmt::Write as _;
    let _ = write!(
        out,
        "{{\"id\":{},\"label\":{},\"instances\":[",
        bag.id, bag.label
    );
    for (j, row) in bag
        .instances
        .data()
        .chunks(bag.instances.cols())
        .enumerate()
    {
        if j > 0 {
            out.push(',');
        }
        out.push('[');
        for (c, &x) in row.iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            write_sig17(out, x);
        }
        out.push(']');
    }
    out.push_str("],\"instance_labels\":[");
    for (j, l) in bag.instance_labels.iter().enumerate() {
        if j > 0 {
            out.push(',');
        }
        let _ = write!(out, "{l}");
    }
    out.push_str("]}\n");
}

/// Serializes a dataset: one header line, then one line per bag.
pub fn to_jsonl(ds: &Dataset) -> String {
    let header = Header {
        version: FORMAT_VERSION,
        split: ds.split,
        config: ds.config.clone(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for bag in &ds.bags {
        write_bag_line(&mut out, bag);
    }
    out
}

pub fn write_jsonl(ds: &Dataset, path: &Path) -> Result<(), BagsimError> {
    let io = |source| BagsimError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
    w.write_all(to_jsonl(ds).as_bytes()).map_err(io)?;
    w.flush().map_err(io)
}

fn parse_line<'de, T: Deserialize<'de>>(text: &'de str, line: usize) -> Result<T, BagsimError> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = if path.is_empty() || path == "." {
            inner.to_string()
        } else {
            format!("field `{path}`: {inner}")
        };
        BagsimError::Line { line, message }
    })
}

fn check_bag(rec: BagRecord, cfg: &GenConfig, line: usize) -> Result<Bag, BagsimError> {
    let fail = |message: String| BagsimError::Line { line, message };
    if rec.label > 1 {
        return Err(fail(format!(
            "field `label`: expected 0 or 1, got {}",
            rec.label
        )));
    }
    if rec.instances.len() != cfg.m {
        return Err(fail(format!(
            "field `instances`: expected {} rows, got {}",
            cfg.m,
            rec.instances.len()
        )));
    }
    if let Some((j, row)) = rec
        .instances
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != cfg.d)
    {
        return Err(fail(format!(
            "field `instances[{j}]`: expected {} values, got {}",
            cfg.d,
            row.len()
        )));
    }
    if rec.instance_labels.len() != cfg.m || rec.instance_labels.iter().any(|&l| l > 1) {
        return Err(fail(format!(
            "field `instance_labels`: expected {} values in {{0, 1}}",
            cfg.m
        )));
    }
    let bag = Bag {
        id: rec.id,
        label: rec.label,
        instances: Tensor::matrix(cfg.m, cfg.d, rec.instances.concat())
            .map_err(|e| fail(e.to_string()))?,
        instance_labels: rec.instance_labels,
    };
    if !bag.satisfies_mil_axiom() {
        return Err(fail(format!("bag {} violates the MIL axiom", bag.id)));
    }
    Ok(bag)
}

pub fn from_jsonl<R: BufRead>(reader: R) -> Result<Dataset, BagsimError> {
    let io = |source| BagsimError::Io {
        path: "<reader>".into(),
        source,
    };
    let mut lines = reader.lines();
    let first = lines
        .next()
        .ok_or(BagsimError::Line {
            line: 1,
            message: "missing header".into(),
        })?
        .map_err(io)?;
    let header: Header = parse_line(&first, 1)?;
    if header.version != FORMAT_VERSION {
        return Err(BagsimError::Line {
            line: 1,
            message: format!(
                "unsupported version {} (expected {FORMAT_VERSION})",
                header.version
            ),
        });
    }
    let mut bags = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (i, text) in lines.enumerate() {
        let line = i + 2;
        let text = text.map_err(io)?;
        if text.trim().is_empty() {
            continue;
        }
        let bag = check_bag(parse_line(&text, line)?, &header.config, line)?;
        if !seen.insert(bag.id) {
            return Err(BagsimError::Line {
                line,
                message: format!("duplicate bag id {}", bag.id),
            });
        }
        bags.push(bag);
    }
    Ok(Dataset {
        config: header.config,
        split: header.split,
        bags,
    })
}

pub fn read_jsonl(path: &Path) -> Result<Dataset, BagsimError> {
    let file = fs::File::open(path).map_err(|source| BagsimError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_jsonl(BufReader::new(file)).map_err(|e| match e {
        BagsimError::Io { source, .. } => BagsimError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

/// Mean over coordinates of the lag-1 sample autocorrelation of one bag.
pub fn lag1_autocorrelation(instances: &Tensor) -> f64 {
    let (m, d) = (instances.rows(), instances.cols());
    let mut total = 0.0;
    for c in 0..d {
        let x: Vec<f64> = (0..m).map(|j| instances.row(j)[c]).collect();
        let mean = x.iter().sum::<f64>() / m as f64;
        let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
        let cov: f64 = x.windows(2).map(|w| (w[0] - mean) * (w[1] - mean)).sum();
        total += if var > 0.0 { cov / var } else { 0.0 };
    }
    total / d as f64
}
