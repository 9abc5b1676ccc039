//! Online triplet mining with distance-weighted negative sampling.
//!
//! For pairwise distances `d` between points drawn uniformly from the unit
//! sphere in `n` dimensions the density is
//!
//! ```text
//! q(d) = Γ(n/2) / (√π Γ((n−1)/2)) · d^(n−2) · (1 − d²/4)^((n−3)/2)
//! ```
//!
//! Negatives are drawn with probability proportional to
//! `min(max_weight, 1/q(d))`, with `d` clamped below at `min_distance`.
//! Everything is evaluated in log space since `n` is in the thousands.

use std::collections::BTreeMap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Indices into a [`TripletBatch`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// `P` classes with `K` embeddings each.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    embeddings: Vec<Vec<f32>>,
    labels: Vec<u32>,
    per_class: usize,
}

impl TripletBatch {
    pub fn new(embeddings: Vec<Vec<f32>>, labels: Vec<u32>) -> Result<Self> {
        if embeddings.len() != labels.len() {
            return Err(Error::InvalidBatch(format!(
                "{} embeddings but {} labels",
                embeddings.len(),
                labels.len()
            )));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        if dim < 2 || embeddings.iter().any(|e| e.len() != dim) {
            return Err(Error::InvalidBatch(
                "embeddings must share one length of at least 2".into(),
            ));
        }
        let mut counts = BTreeMap::new();
        for &l in &labels {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        if counts.len() < 2 {
            return Err(Error::InvalidBatch("a batch needs at least 2 classes".into()));
        }
        let per_class = *counts.values().next().expect("non-empty");
        if let Some((class, &n)) = counts.iter().find(|(_, &n)| n != per_class || n < 2) {
            return Err(Error::InvalidBatch(format!(
                "class {class} has {n} members; every class needs the same count K >= 2"
            )));
        }
        Ok(Self {
            embeddings,
            labels,
            per_class,
        })
    }

    pub fn embeddings(&self) -> &[Vec<f32>] {
        &self.embeddings
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len() / self.per_class
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn dim(&self) -> usize {
        self.embeddings[0].len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplingConfig {
    /// Embedding scale; distances are divided by it to land on the unit sphere.
    pub alpha: f64,
    pub min_distance: f64,
    pub max_weight: f64,
}

/// `ln q(d)` for the unit sphere in `dim` dimensions.
pub fn log_sphere_distance_density(d: f64, dim: usize) -> f64 {
    let n = dim as f64;
    let log_norm = ln_gamma(n / 2.0) - 0.5 * std::f64::consts::PI.ln() - ln_gamma((n - 1.0) / 2.0);
    log_norm + (n - 2.0) * d.ln() + (n - 3.0) / 2.0 * (1.0 - d * d / 4.0).ln()
}

/// Unnormalized sampling weights of every negative of `anchor`, as
/// `(batch index, weight)`. The largest weight is 1.
pub fn negative_weights(batch: &TripletBatch, anchor: usize, cfg: &SamplingConfig) -> Vec<(usize, f64)> {
    let dim = batch.dim();
    let a = &batch.embeddings[anchor];
    let label = batch.labels[anchor];
    let upper = 2.0 - 1e-9;
    let logs: Vec<(usize, f64)> = (0..batch.len())
        .filter(|&j| batch.labels[j] != label)
        .map(|j| {
            let d = super::loss::euclidean(a, &batch.embeddings[j]) / cfg.alpha;
            let d = d.clamp(cfg.min_distance, upper);
            let log_w = (-log_sphere_distance_density(d, dim)).min(cfg.max_weight.ln());
            (j, log_w)
        })
        .collect();
    let top = logs.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
    logs.into_iter().map(|(j, l)| (j, (l - top).exp())).collect()
}

/// One triplet per ordered anchor–positive pair; the negative is sampled
/// from the other classes by distance weighting.
pub fn mine_triplets<R: Rng + ?Sized>(
    batch: &TripletBatch,
    cfg: &SamplingConfig,
    rng: &mut R,
) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(batch.len() * (batch.per_class - 1));
    for anchor in 0..batch.len() {
        let weights = negative_weights(batch, anchor, cfg);
        let sampler = WeightedIndex::new(weights.iter().map(|&(_, w)| w)).ok();
        for positive in 0..batch.len() {
            if positive == anchor || batch.labels[positive] != batch.labels[anchor] {
                continue;
            }
            let pick = match &sampler {
                Some(s) => s.sample(rng),
                None => rng.random_range(0..weights.len()),
            };
            out.push(Triplet {
                anchor,
                positive,
                negative: weights[pick].0,
            });
        }
    }
    out
}
