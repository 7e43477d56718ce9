//! Confidence-based importance weights over image augmentations and over the
//! points of a multimodal prototype.

use crate::error::{Error, Result};
use crate::primitives::{cosine_similarity, neg_entropy_score, softmax, ProbVector, UnitVector, PROB_FLOOR};

/// A test image as a weighted point cloud of augmentation embeddings.
/// Entry 0 is the unaugmented view.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDistribution {
    pub augment_features: Vec<UnitVector>,
    pub weights: ProbVector,
    pub sample_id: u64,
}

impl ImageDistribution {
    pub fn new(sample_id: u64, augment_features: Vec<UnitVector>, weights: ProbVector) -> Result<Self> {
        let first = augment_features
            .first()
            .ok_or_else(|| Error::EmptyInput("image distribution needs at least one view".into()))?;
        check_dims(&augment_features, first.dim(), "augmentation features")?;
        if weights.len() != augment_features.len() {
            return Err(Error::dim(
                augment_features.len(),
                weights.len(),
                "augmentation weights",
            ));
        }
        Ok(ImageDistribution {
            augment_features,
            weights,
            sample_id,
        })
    }
}

fn check_dims(vectors: &[UnitVector], dim: usize, context: &'static str) -> Result<()> {
    match vectors.iter().find(|v| v.dim() != dim) {
        Some(v) => Err(Error::dim(dim, v.dim(), context)),
        None => Ok(()),
    }
}

/// Weights over augmentations: each view is scored by the negative entropy
/// of its class distribution against `prototype_means`, and the scores are
/// softmaxed. Confident views get more mass.
pub fn compute_image_weights(
    augment_features: &[UnitVector],
    prototype_means: &[UnitVector],
    temperature: f64,
) -> Result<ProbVector> {
    let dim = dims_of(augment_features, prototype_means)?;
    check_dims(augment_features, dim, "augmentation features")?;
    check_dims(prototype_means, dim, "prototype means")?;

    let scores = augment_features
        .iter()
        .map(|x| {
            let sims = prototype_means
                .iter()
                .map(|z| cosine_similarity(x, z))
                .collect::<Result<Vec<_>>>()?;
            Ok(neg_entropy_score(&softmax(&sims, temperature)?))
        })
        .collect::<Result<Vec<_>>>()?;
    softmax(&scores, 1.0)
}

/// Weights over the `M+S` points of one class prototype.
///
/// For every augmentation, the points compete through a softmax restricted
/// to this class; each point's score accumulates `p ln p` over all
/// augmentations.
pub fn compute_prototype_weights(
    prototype_points: &[UnitVector],
    augment_features: &[UnitVector],
    temperature: f64,
) -> Result<ProbVector> {
    let dim = dims_of(prototype_points, augment_features)?;
    check_dims(prototype_points, dim, "prototype points")?;
    check_dims(augment_features, dim, "augmentation features")?;

    let mut scores = vec![0.0; prototype_points.len()];
    let mut sims = vec![0.0; prototype_points.len()];
    for x in augment_features {
        for (s, z) in sims.iter_mut().zip(prototype_points) {
            *s = cosine_similarity(z, x)?;
        }
        let p = softmax(&sims, temperature)?;
        for (score, &pm) in scores.iter_mut().zip(p.as_slice()) {
            *score += pm * pm.max(PROB_FLOOR).ln();
        }
    }
    softmax(&scores, 1.0)
}

fn dims_of(first: &[UnitVector], second: &[UnitVector]) -> Result<usize> {
    let a = first
        .first()
        .ok_or_else(|| Error::EmptyInput("weighting needs at least one point".into()))?;
    let b = second
        .first()
        .ok_or_else(|| Error::EmptyInput("weighting needs at least one reference point".into()))?;
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim(), "weighting inputs"));
    }
    Ok(a.dim())
}
