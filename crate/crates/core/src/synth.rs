//! Seeded synthetic embedding worlds with ambiguous class pairs.
//!
//! Classes `(0, 1)`, `(2, 3)`, ... are paired. Their visual clusters are
//! independent directions on the sphere, but their text anchors are pulled
//! toward the pair midpoint by `ambiguity`, so text alone struggles to tell
//! them apart.
//!
//! Draw order from one `ChaCha8Rng` seeded with `seed`, every draw a
//! standard normal unless noted:
//!
//! 1. class visual means, `C × d`;
//! 2. description perturbations, class-major then description-major, `C × M × d`;
//! 3. per sample: the class (`gen_range(0..C)`), the true-feature
//!    perturbation (`d`), then the perturbations of views `1..N` (`(N−1) × d`);
//! 4. held-out reference perturbations, class-major, `C × 100 × d`.
//!
//! Perturbations are scaled by their σ after drawing, so a zero noise level
//! does not shift later draws. View 0 of each sample is the unperturbed true
//! feature. Every emitted vector is normalized and then rounded to `f32`
//! precision, so worlds written to disk read back bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

use crate::engine::StreamRecord;
use crate::error::{Error, Result};
use crate::primitives::{cosine_similarity, UnitVector};
use crate::prototypes::PrototypeStore;

pub const REFERENCE_PER_CLASS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub classes: usize,
    pub descriptions: usize,
    pub augmentations: usize,
    pub particles: usize,
    pub samples: usize,
    pub text_noise: f64,
    pub augment_noise: f64,
    pub ambiguity: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            dim: 64,
            classes: 10,
            descriptions: 50,
            augmentations: 50,
            particles: 25,
            samples: 1000,
            text_noise: 0.05,
            augment_noise: 0.15,
            ambiguity: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dim", self.dim),
            ("classes", self.classes),
            ("descriptions", self.descriptions),
            ("augmentations", self.augmentations),
            ("particles", self.particles),
            ("samples", self.samples),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [("text_noise", self.text_noise), ("augment_noise", self.augment_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(Error::Config(format!(
                "ambiguity must lie in [0, 1], got {}",
                self.ambiguity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct World {
    /// Description embeddings with particles initialized from the text means.
    pub store: PrototypeStore,
    pub class_names: Vec<String>,
    pub stream: Vec<StreamRecord>,
    /// Held-out true features, `REFERENCE_PER_CLASS` per class.
    pub reference: Vec<Vec<UnitVector>>,
    pub visual_means: Vec<UnitVector>,
}

struct Sampler {
    rng: ChaCha8Rng,
    dim: usize,
}

impl Sampler {
    fn normals(&mut self, sigma: f64) -> Vec<f64> {
        (0..self.dim)
            .map(|_| sigma * self.rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    fn around(&mut self, center: &[f64], sigma: f64) -> Result<UnitVector> {
        let noise = self.normals(sigma);
        snap(center.iter().zip(noise).map(|(c, n)| c + n).collect())
    }
}

/// Normalizes, rounds to `f32`, and keeps the rounded values.
fn snap(values: Vec<f64>) -> Result<UnitVector> {
    let unit = UnitVector::new(values)?;
    let rounded = unit.as_slice().iter().map(|&x| x as f32 as f64).collect();
    Ok(UnitVector::with_norm_tolerance(rounded, 1e-6)?.0)
}

pub fn class_name(class: usize) -> String {
    format!("class_{class:03}")
}

pub fn generate_world(config: &SynthConfig) -> Result<World> {
    config.validate()?;
    let (c, d) = (config.classes, config.dim);
    let mut sampler = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        dim: d,
    };

    let visual_means = (0..c)
        .map(|_| {
            let draw = sampler.normals(1.0);
            snap(draw)
        })
        .collect::<Result<Vec<_>>>()?;

    let anchors = (0..c)
        .map(|class| {
            let own = visual_means[class].as_slice();
            let partner = class ^ 1;
            if partner >= c {
                return Ok(own.to_vec());
            }
            let other = visual_means[partner].as_slice();
            let a = config.ambiguity;
            let mixed = own
                .iter()
                .zip(other)
                .map(|(o, p)| (1.0 - a) * o + a * 0.5 * (o + p))
                .collect();
            Ok(UnitVector::new(mixed)?.as_slice().to_vec())
        })
        .collect::<Result<Vec<_>>>()?;

    let mut text = Vec::with_capacity(c);
    for anchor in &anchors {
        let feats = (0..config.descriptions)
            .map(|_| sampler.around(anchor, config.text_noise))
            .collect::<Result<Vec<_>>>()?;
        text.push(feats);
    }

    let mut stream = Vec::with_capacity(config.samples);
    for t in 0..config.samples {
        let class = sampler.rng.gen_range(0..c);
        let truth = sampler.around(visual_means[class].as_slice(), config.augment_noise)?;
        let mut views = Vec::with_capacity(config.augmentations);
        views.push(truth.clone());
        for _ in 1..config.augmentations {
            views.push(sampler.around(truth.as_slice(), config.augment_noise)?);
        }
        stream.push(StreamRecord {
            sample_id: t as u64,
            true_label: Some(class),
            augment_features: views,
        });
    }

    let mut reference = Vec::with_capacity(c);
    for mean in &visual_means {
        let held_out = (0..REFERENCE_PER_CLASS)
            .map(|_| sampler.around(mean.as_slice(), config.augment_noise))
            .collect::<Result<Vec<_>>>()?;
        reference.push(held_out);
    }

    Ok(World {
        store: PrototypeStore::from_text(text, config.particles)?,
        class_names: (0..c).map(class_name).collect(),
        stream,
        reference,
        visual_means,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldDescription {
    pub dim: usize,
    pub classes: usize,
    pub descriptions: usize,
    pub particles: usize,
    pub views: Option<usize>,
    pub samples: usize,
    pub class_counts: Vec<usize>,
    pub unlabeled: usize,
    /// Mean pairwise cosine between descriptions of the same class.
    pub text_within: Option<f64>,
    /// Mean cosine between text means of distinct classes.
    pub text_cross: Option<f64>,
    /// Mean cosine between text means of paired classes `(2k, 2k+1)`.
    pub text_paired: Option<f64>,
    /// Mean cosine of each labeled original view to its class centroid.
    pub visual_within: Option<f64>,
    /// Mean cosine between centroids of distinct labeled classes.
    pub visual_cross: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn cos(a: &UnitVector, b: &UnitVector) -> f64 {
    cosine_similarity(a, b).expect("dimensions checked by caller")
}

fn pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

pub fn describe_world(store: &PrototypeStore, stream: &[StreamRecord]) -> Result<WorldDescription> {
    let c = store.num_classes();
    let mut class_counts = vec![0usize; c];
    let mut unlabeled = 0;
    let mut members: Vec<Vec<&UnitVector>> = vec![Vec::new(); c];
    let mut views = None;
    for r in stream {
        let first = r
            .augment_features
            .first()
            .ok_or_else(|| Error::EmptyInput(format!("sample {} has no views", r.sample_id)))?;
        if first.dim() != store.dim() {
            return Err(Error::dim(store.dim(), first.dim(), "stream vector"));
        }
        views.get_or_insert(r.augment_features.len());
        match r.true_label {
            Some(y) if y < c => {
                class_counts[y] += 1;
                members[y].push(first);
            }
            Some(y) => {
                return Err(Error::Config(format!(
                    "sample {} has label {y} but the bundle has {c} classes",
                    r.sample_id
                )))
            }
            None => unlabeled += 1,
        }
    }

    let text_means: Vec<UnitVector> = store.prototypes().iter().map(|p| p.text_mean()).collect();
    let text_within = mean(store.prototypes().iter().flat_map(|p| {
        let t = p.text_features();
        pairs(t.len()).map(move |(i, j)| cos(&t[i], &t[j]))
    }));
    let text_cross = mean(pairs(c).map(|(i, j)| cos(&text_means[i], &text_means[j])));
    let text_paired = mean((0..c / 2).map(|k| cos(&text_means[2 * k], &text_means[2 * k + 1])));

    let centroids: Vec<Option<UnitVector>> = members
        .iter()
        .map(|m| UnitVector::mean_of(&m.iter().map(|v| (*v).clone()).collect::<Vec<_>>()))
        .collect();
    let visual_within = mean(
        members
            .iter()
            .zip(&centroids)
            .filter_map(|(m, cen)| cen.as_ref().map(|cen| (m, cen)))
            .flat_map(|(m, cen)| m.iter().map(move |v| cos(v, cen))),
    );
    let present: Vec<&UnitVector> = centroids.iter().flatten().collect();
    let visual_cross = mean(pairs(present.len()).map(|(i, j)| cos(present[i], present[j])));

    Ok(WorldDescription {
        dim: store.dim(),
        classes: c,
        descriptions: store.descriptions(),
        particles: store.particles(),
        views,
        samples: stream.len(),
        class_counts,
        unlabeled,
        text_within,
        text_cross,
        text_paired,
        visual_within,
        visual_cross,
    })
}

impl WorldDescription {
    pub fn to_text(&self) -> String {
        let num = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        let mut out = String::new();
        let views = self.views.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "dim {}  classes {}  descriptions {}  particles {}  views {views}  samples {}",
            self.dim, self.classes, self.descriptions, self.particles, self.samples
        );
        let _ = writeln!(out, "unlabeled {}", self.unlabeled);
        for (class, count) in self.class_counts.iter().enumerate() {
            let _ = writeln!(out, "class {class}: {count}");
        }
        let _ = writeln!(out, "text within-class cosine {}", num(self.text_within));
        let _ = writeln!(out, "text cross-class cosine {}", num(self.text_cross));
        let _ = writeln!(out, "text paired-class cosine {}", num(self.text_paired));
        let _ = writeln!(out, "visual within-class cosine {}", num(self.visual_within));
        let _ = writeln!(out, "visual cross-class cosine {}", num(self.visual_cross));
        out
    }
}
