//! Distribution discrepancy between a class's visual particles and a
//! reference sample of that class: diagonal-Gaussian KL and RBF-kernel MMD.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::primitives::UnitVector;
use crate::prototypes::PrototypeStore;

pub const VARIANCE_FLOOR: f64 = 1e-6;
pub const BANDWIDTH_FLOOR: f64 = 1e-6;

/// Per-coordinate mean and (population) variance, variance floored at
/// [`VARIANCE_FLOOR`].
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianFit {
    pub fn fit<V: AsRef<[f64]>>(sample: &[V]) -> Result<Self> {
        let dim = check_sample(sample, 1, "gaussian fit")?;
        let n = sample.len() as f64;
        let mut mean = vec![0.0; dim];
        for v in sample {
            for (m, x) in mean.iter_mut().zip(v.as_ref()) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut variance = vec![0.0; dim];
        for v in sample {
            for ((s, x), m) in variance.iter_mut().zip(v.as_ref()).zip(&mean) {
                *s += (x - m) * (x - m);
            }
        }
        variance.iter_mut().for_each(|s| *s = (*s / n).max(VARIANCE_FLOOR));
        Ok(GaussianFit { mean, variance })
    }

    /// Closed-form `KL(self ‖ other)` between diagonal Gaussians.
    pub fn kl_to(&self, other: &GaussianFit) -> f64 {
        let terms = self
            .mean
            .iter()
            .zip(&self.variance)
            .zip(other.mean.iter().zip(&other.variance));
        0.5 * terms
            .map(|((mp, vp), (mq, vq))| vp / vq + (mq - mp) * (mq - mp) / vq - 1.0 + (vq / vp).ln())
            .sum::<f64>()
    }
}

fn check_sample<V: AsRef<[f64]>>(sample: &[V], min: usize, what: &str) -> Result<usize> {
    if sample.len() < min {
        return Err(Error::EmptyInput(format!(
            "{what} needs at least {min} vectors, got {}",
            sample.len()
        )));
    }
    let dim = sample[0].as_ref().len();
    match sample.iter().find(|v| v.as_ref().len() != dim) {
        Some(v) => Err(Error::dim(dim, v.as_ref().len(), "sample vectors")),
        None => Ok(dim),
    }
}

/// KL divergence between diagonal Gaussians fitted to the two samples.
pub fn kl_divergence<V: AsRef<[f64]>>(sample_p: &[V], sample_q: &[V]) -> Result<f64> {
    let p = GaussianFit::fit(sample_p)?;
    let q = GaussianFit::fit(sample_q)?;
    if p.mean.len() != q.mean.len() {
        return Err(Error::dim(p.mean.len(), q.mean.len(), "kl samples"));
    }
    Ok(p.kl_to(&q))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median of all pairwise Euclidean distances (mean of the two middle values
/// for an even count), floored at [`BANDWIDTH_FLOOR`].
pub fn median_bandwidth(pooled: &[&[f64]]) -> f64 {
    let mut dists = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            dists.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return BANDWIDTH_FLOOR;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let median = if dists.len() % 2 == 0 {
        0.5 * (dists[mid - 1] + dists[mid])
    } else {
        dists[mid]
    };
    median.max(BANDWIDTH_FLOOR)
}

/// Square root of the unbiased MMD² estimate (clamped at zero) under an RBF
/// kernel `exp(−‖x−y‖² / 2σ²)` with the pooled median-distance bandwidth.
pub fn mmd<V: AsRef<[f64]>>(sample_p: &[V], sample_q: &[V]) -> Result<f64> {
    let dp = check_sample(sample_p, 2, "mmd")?;
    let dq = check_sample(sample_q, 2, "mmd")?;
    if dp != dq {
        return Err(Error::dim(dp, dq, "mmd samples"));
    }
    let pooled: Vec<&[f64]> = sample_p.iter().chain(sample_q).map(|v| v.as_ref()).collect();
    let sigma = median_bandwidth(&pooled);
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let kernel = |a: &V, b: &V| (-gamma * sq_dist(a.as_ref(), b.as_ref())).exp();

    let within = |s: &[V]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += 2.0 * kernel(&s[i], &s[j]);
            }
        }
        total / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in sample_p {
        for y in sample_q {
            cross += kernel(x, y);
        }
    }
    cross /= (sample_p.len() * sample_q.len()) as f64;
    let mmd2 = within(sample_p) + within(sample_q) - 2.0 * cross;
    Ok(mmd2.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    /// `None` when the class has no particles.
    pub kl: Option<f64>,
    /// `None` when the class has fewer than two particles.
    pub mmd: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<ClassMetrics>,
    pub macro_kl: Option<f64>,
    pub macro_mmd: Option<f64>,
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let defined: Vec<f64> = values.flatten().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

/// KL and MMD of every class's particles against `reference[class]`.
pub fn snapshot_metrics(store: &PrototypeStore, reference: &[Vec<UnitVector>]) -> Result<MetricsTable> {
    if reference.len() < store.num_classes() {
        return Err(Error::Config(format!(
            "reference covers {} classes, store has {}",
            reference.len(),
            store.num_classes()
        )));
    }
    let mut rows = Vec::with_capacity(store.num_classes());
    for proto in store.prototypes() {
        let refs = &reference[proto.class_id];
        if refs.len() < 2 {
            return Err(Error::Config(format!(
                "reference for class {} has {} vectors, need at least 2",
                proto.class_id,
                refs.len()
            )));
        }
        let particles = proto.visual_particles();
        let kl = match particles.len() {
            0 => None,
            _ => Some(kl_divergence(particles, refs)?),
        };
        let mmd = match particles.len() {
            0 | 1 => None,
            _ => Some(mmd(particles, refs)?),
        };
        rows.push(ClassMetrics {
            class_id: proto.class_id,
            kl,
            mmd,
        });
    }
    Ok(MetricsTable {
        macro_kl: mean_defined(rows.iter().map(|r| r.kl)),
        macro_mmd: mean_defined(rows.iter().map(|r| r.mmd)),
        rows,
    })
}

impl MetricsTable {
    /// Tab-separated table with a trailing macro-average row.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "null".to_string(), crate::io::format_sig6);
        let mut out = String::from("class\tkl\tmmd\n");
        for r in &self.rows {
            let _ = writeln!(out, "{}\t{}\t{}", r.class_id, cell(r.kl), cell(r.mmd));
        }
        let _ = writeln!(out, "macro\t{}\t{}", cell(self.macro_kl), cell(self.macro_mmd));
        out
    }
}
