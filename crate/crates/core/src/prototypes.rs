//! Per-class multimodal prototypes: fixed description embeddings plus a
//! small cache of visual particles that learns from confident test samples.

use crate::error::{Error, Result};
use crate::primitives::{Matrix, ProbVector, UnitVector};

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalPrototype {
    pub class_id: usize,
    text_features: Vec<UnitVector>,
    visual_particles: Vec<UnitVector>,
    /// Point weights from the most recent sample that updated this class.
    pub last_weights: ProbVector,
}

impl MultimodalPrototype {
    /// Prototype whose particles start at the mean of `text_features`.
    pub fn new(class_id: usize, text_features: Vec<UnitVector>, particles: usize) -> Result<Self> {
        let visual_particles = init_visual_particles(&text_features, particles)?;
        Self::with_particles(class_id, text_features, visual_particles)
    }

    pub fn with_particles(
        class_id: usize,
        text_features: Vec<UnitVector>,
        visual_particles: Vec<UnitVector>,
    ) -> Result<Self> {
        let dim = text_features
            .first()
            .ok_or_else(|| Error::EmptyInput(format!("class {class_id} has no text features")))?
            .dim();
        if let Some(v) = text_features.iter().chain(&visual_particles).find(|v| v.dim() != dim) {
            return Err(Error::dim(dim, v.dim(), "prototype point"));
        }
        let last_weights = ProbVector::uniform(text_features.len() + visual_particles.len())?;
        Ok(MultimodalPrototype {
            class_id,
            text_features,
            visual_particles,
            last_weights,
        })
    }

    pub fn text_features(&self) -> &[UnitVector] {
        &self.text_features
    }

    pub fn visual_particles(&self) -> &[UnitVector] {
        &self.visual_particles
    }

    pub fn dim(&self) -> usize {
        self.text_features[0].dim()
    }

    /// Text features followed by visual particles.
    pub fn points(&self) -> Vec<UnitVector> {
        self.text_features
            .iter()
            .chain(&self.visual_particles)
            .cloned()
            .collect()
    }

    pub fn num_points(&self) -> usize {
        self.text_features.len() + self.visual_particles.len()
    }

    /// Normalized mean over all `M+S` points.
    pub fn mean(&self) -> Result<UnitVector> {
        UnitVector::mean_of(&self.points())
            .ok_or_else(|| Error::Numeric(format!("prototype of class {} has a vanishing mean", self.class_id)))
    }

    /// Normalized mean of the text features alone.
    pub fn text_mean(&self) -> UnitVector {
        UnitVector::mean_of(&self.text_features).unwrap_or_else(|| self.text_features[0].clone())
    }

    pub fn bitwise_eq(&self, other: &MultimodalPrototype) -> bool {
        let vecs_eq =
            |a: &[UnitVector], b: &[UnitVector]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bitwise_eq(y));
        self.class_id == other.class_id
            && vecs_eq(&self.text_features, &other.text_features)
            && vecs_eq(&self.visual_particles, &other.visual_particles)
            && self.last_weights.bitwise_eq(&other.last_weights)
    }
}

/// The prototypes of every class, with uniform `d`, `M` and `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeStore {
    prototypes: Vec<MultimodalPrototype>,
    dim: usize,
    descriptions: usize,
    particles: usize,
}

impl PrototypeStore {
    pub fn new(prototypes: Vec<MultimodalPrototype>) -> Result<Self> {
        let first = prototypes
            .first()
            .ok_or_else(|| Error::EmptyInput("prototype store needs at least one class".into()))?;
        let (dim, descriptions, particles) = (first.dim(), first.text_features.len(), first.visual_particles.len());
        for (i, p) in prototypes.iter().enumerate() {
            if p.class_id != i {
                return Err(Error::Config(format!(
                    "prototype at position {i} has class id {}",
                    p.class_id
                )));
            }
            if p.dim() != dim {
                return Err(Error::dim(dim, p.dim(), "prototype dimension"));
            }
            if p.text_features.len() != descriptions {
                return Err(Error::dim(
                    descriptions,
                    p.text_features.len(),
                    "descriptions per class",
                ));
            }
            if p.visual_particles.len() != particles {
                return Err(Error::dim(particles, p.visual_particles.len(), "particles per class"));
            }
        }
        Ok(PrototypeStore {
            prototypes,
            dim,
            descriptions,
            particles,
        })
    }

    /// Store built from per-class description embeddings, particles initialized
    /// from the text means.
    pub fn from_text(text: Vec<Vec<UnitVector>>, particles: usize) -> Result<Self> {
        let prototypes = text
            .into_iter()
            .enumerate()
            .map(|(c, feats)| MultimodalPrototype::new(c, feats, particles))
            .collect::<Result<Vec<_>>>()?;
        PrototypeStore::new(prototypes)
    }

    pub fn prototypes(&self) -> &[MultimodalPrototype] {
        &self.prototypes
    }

    pub fn prototype(&self, class: usize) -> &MultimodalPrototype {
        &self.prototypes[class]
    }

    pub fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn descriptions(&self) -> usize {
        self.descriptions
    }

    pub fn particles(&self) -> usize {
        self.particles
    }

    pub(crate) fn prototype_mut(&mut self, class: usize) -> &mut MultimodalPrototype {
        &mut self.prototypes[class]
    }

    pub fn bitwise_eq(&self, other: &PrototypeStore) -> bool {
        self.prototypes.len() == other.prototypes.len()
            && self
                .prototypes
                .iter()
                .zip(&other.prototypes)
                .all(|(a, b)| a.bitwise_eq(b))
    }
}

/// `particles` copies of the normalized text mean. Falls back to the first
/// text feature when the mean (nearly) vanishes.
pub fn init_visual_particles(text_features: &[UnitVector], particles: usize) -> Result<Vec<UnitVector>> {
    let first = text_features
        .first()
        .ok_or_else(|| Error::EmptyInput("cannot initialize particles without text features".into()))?;
    let mean = UnitVector::mean_of(text_features).unwrap_or_else(|| first.clone());
    Ok(vec![mean; particles])
}

/// Per-augmentation relevance `plan · weights`.
pub fn score_augmentations(plan: &Matrix, weights: &ProbVector) -> Result<Vec<f64>> {
    if plan.cols() != weights.len() {
        return Err(Error::dim(plan.cols(), weights.len(), "plan columns vs point weights"));
    }
    plan.mul_vec(weights.as_slice())
}

/// Top-`count` augmentations by score, descending, lower index first on ties.
pub fn select_top_s(augment_features: &[UnitVector], scores: &[f64], count: usize) -> Vec<(UnitVector, f64)> {
    let mut order: Vec<usize> = (0..augment_features.len().min(scores.len())).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
        .into_iter()
        .take(count)
        .map(|i| (augment_features[i].clone(), scores[i]))
        .collect()
}

/// Below this combined mass a particle is left as is.
const MIN_UPDATE_MASS: f64 = 1e-12;

/// Moves particle `s` toward candidate `s`:
/// `e ← normalize((w_{M+s}·e + θ_s·x_s) / (w_{M+s} + θ_s))`.
///
/// `weights` covers all `M+S` points of the class; only the particle slots
/// are read.
pub fn update_visual_particles(
    prototype: &mut MultimodalPrototype,
    candidates: &[(UnitVector, f64)],
    weights: &ProbVector,
) -> Result<()> {
    let m = prototype.text_features.len();
    if weights.len() != prototype.num_points() {
        return Err(Error::dim(prototype.num_points(), weights.len(), "prototype weights"));
    }
    if candidates.len() > prototype.visual_particles.len() {
        return Err(Error::dim(
            prototype.visual_particles.len(),
            candidates.len(),
            "update candidates vs particles",
        ));
    }
    let dim = prototype.dim();
    if let Some((x, _)) = candidates.iter().find(|(x, _)| x.dim() != dim) {
        return Err(Error::dim(dim, x.dim(), "update candidate"));
    }

    for (s, (x, theta)) in candidates.iter().enumerate() {
        let w = weights[m + s];
        let mass = w + theta;
        if mass < MIN_UPDATE_MASS {
            continue;
        }
        let particle = &prototype.visual_particles[s];
        let blended: Vec<f64> = particle
            .as_slice()
            .iter()
            .zip(x.as_slice())
            .map(|(e, xi)| (w * e + theta * xi) / mass)
            .collect();
        // Antipodal blends can cancel exactly; keep the old particle then.
        if let Ok(updated) = UnitVector::new(blended) {
            prototype.visual_particles[s] = updated;
        }
    }
    prototype.last_weights = weights.clone();
    Ok(())
}
