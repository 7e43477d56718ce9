//! Streaming classification with online prototype updates.
//!
//! For each sample the engine weights the augmentations, solves one entropic
//! OT problem per class between the augmentation cloud and that class's
//! multimodal prototype, turns the transport costs into class probabilities,
//! and (when the top probability clears `tau`) folds the best-transported
//! augmentations into the predicted class's visual particles.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::primitives::{cosine_similarity, softmax, Matrix, ProbVector, UnitVector};
use crate::prototypes::{score_augmentations, select_top_s, update_visual_particles, PrototypeStore};
use crate::sinkhorn::{solve_sinkhorn, OtSolution, SinkhornConfig};
use crate::weighting::{compute_image_weights, compute_prototype_weights};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    /// Confidence gate: a sample updates the cache when its top class
    /// probability is at least this value.
    pub tau: f64,
    /// Number of augmentations folded into the particles per update.
    pub top_s: usize,
    /// Temperature of the cosine softmaxes used for importance weights.
    pub class_temperature: f64,
    /// Temperature of the softmax over negated transport costs.
    pub prediction_temperature: f64,
    pub sinkhorn: SinkhornConfig,
    /// Push every update into all classes instead of the predicted one.
    pub update_all_classes: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            tau: 0.8,
            top_s: 25,
            class_temperature: 0.01,
            prediction_temperature: 0.01,
            sinkhorn: SinkhornConfig::default(),
            update_all_classes: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        for (name, t) in [
            ("class temperature", self.class_temperature),
            ("prediction temperature", self.prediction_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {t}")));
            }
        }
        self.sinkhorn.validate()
    }
}

/// One test sample: its augmentation embeddings (view 0 is the original)
/// and, when known, its label.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRecord {
    pub sample_id: u64,
    pub true_label: Option<usize>,
    pub augment_features: Vec<UnitVector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub sample_id: u64,
    pub probabilities: ProbVector,
    pub predicted_class: usize,
    pub max_probability: f64,
    pub updated_cache: bool,
    /// Per-class transport cost (cosine distance for the zero-shot baseline).
    pub ot_costs: Vec<f64>,
    pub true_label: Option<usize>,
    /// Sinkhorn iterations summed over the per-class solves.
    pub ot_iterations: usize,
}

impl PredictionRecord {
    pub fn is_correct(&self) -> Option<bool> {
        self.true_label.map(|y| y == self.predicted_class)
    }

    pub fn bitwise_eq(&self, other: &PredictionRecord) -> bool {
        self.sample_id == other.sample_id
            && self.probabilities.bitwise_eq(&other.probabilities)
            && self.predicted_class == other.predicted_class
            && self.max_probability.to_bits() == other.max_probability.to_bits()
            && self.updated_cache == other.updated_cache
            && crate::primitives::bits_eq(&self.ot_costs, &other.ot_costs)
            && self.true_label == other.true_label
            && self.ot_iterations == other.ot_iterations
    }
}

/// Aggregate statistics of a stream run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StreamSummary {
    pub processed: usize,
    pub skipped: usize,
    pub labeled: usize,
    pub correct: usize,
    pub cache_updates: usize,
    /// Mean Sinkhorn iterations per OT solve; `None` without solves.
    pub mean_ot_iterations: Option<f64>,
}

impl StreamSummary {
    /// Accuracy over labeled samples; `None` when nothing was labeled.
    pub fn accuracy(&self) -> Option<f64> {
        (self.labeled > 0).then(|| self.correct as f64 / self.labeled as f64)
    }

    pub(crate) fn from_records(records: &[PredictionRecord], skipped: usize, solves_per_record: usize) -> Self {
        let labeled = records.iter().filter(|r| r.true_label.is_some()).count();
        let correct = records.iter().filter(|r| r.is_correct() == Some(true)).count();
        let solves = records.len() * solves_per_record;
        let iterations: usize = records.iter().map(|r| r.ot_iterations).sum();
        StreamSummary {
            processed: records.len(),
            skipped,
            labeled,
            correct,
            cache_updates: records.iter().filter(|r| r.updated_cache).count(),
            mean_ot_iterations: (solves > 0).then(|| iterations as f64 / solves as f64),
        }
    }
}

#[derive(Debug)]
pub struct SkippedSample {
    pub sample_id: u64,
    pub error: Error,
}

#[derive(Debug)]
pub struct StreamOutput {
    pub predictions: Vec<PredictionRecord>,
    pub skipped: Vec<SkippedSample>,
    pub summary: StreamSummary,
}

/// Class with the highest cosine similarity to `image_feature`; lowest index on ties.
pub fn zero_shot_predict(image_feature: &UnitVector, class_features: &[UnitVector]) -> Result<usize> {
    if class_features.is_empty() {
        return Err(Error::EmptyInput(
            "zero-shot prediction needs at least one class".into(),
        ));
    }
    let sims = class_features
        .iter()
        .map(|z| cosine_similarity(z, image_feature))
        .collect::<Result<Vec<_>>>()?;
    Ok(crate::primitives::argmax(&sims))
}

fn cost_matrix(views: &[UnitVector], points: &[UnitVector]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(views.len() * points.len());
    for x in views {
        for z in points {
            data.push((1.0 - cosine_similarity(x, z)?).max(0.0));
        }
    }
    Matrix::from_rows(views.len(), points.len(), data)
}

fn check_record(record: &StreamRecord, dim: usize) -> Result<()> {
    if record.augment_features.is_empty() {
        return Err(Error::EmptyInput("sample has no augmentation features".into()));
    }
    match record.augment_features.iter().find(|v| v.dim() != dim) {
        Some(v) => Err(Error::dim(dim, v.dim(), "sample feature vs store")),
        None => Ok(()),
    }
}

/// Runs one sample through the pipeline. Returns the prediction together
/// with the transport solution of the predicted class.
pub fn process_sample_traced(
    record: &StreamRecord,
    store: &mut PrototypeStore,
    config: &EngineConfig,
) -> Result<(PredictionRecord, OtSolution)> {
    let with_id = |e: Error| Error::Sample {
        sample_id: record.sample_id,
        source: Box::new(e),
    };
    config.validate()?;
    check_record(record, store.dim()).map_err(with_id)?;
    let views = &record.augment_features;

    let means = store
        .prototypes()
        .iter()
        .map(|p| p.mean())
        .collect::<Result<Vec<_>>>()
        .map_err(with_id)?;
    let image_weights = compute_image_weights(views, &means, config.class_temperature).map_err(with_id)?;

    // Per-class problems only read the frozen store.
    let solved = store
        .prototypes()
        .par_iter()
        .map(|proto| {
            let points = proto.points();
            let point_weights = compute_prototype_weights(&points, views, config.class_temperature)?;
            let cost = cost_matrix(views, &points)?;
            let solution = solve_sinkhorn(&image_weights, &point_weights, &cost, &config.sinkhorn)?;
            Ok((point_weights, solution))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(with_id)?;

    let ot_costs: Vec<f64> = solved.iter().map(|(_, s)| s.transport_cost).collect();
    let negated: Vec<f64> = ot_costs.iter().map(|c| -c).collect();
    let probabilities = softmax(&negated, config.prediction_temperature).map_err(with_id)?;
    let predicted_class = probabilities.argmax();
    let max_probability = probabilities[predicted_class];
    let ot_iterations = solved.iter().map(|(_, s)| s.iterations).sum();

    let updated_cache = max_probability >= config.tau && config.top_s > 0 && store.particles() > 0;
    if updated_cache {
        let (weights, solution) = &solved[predicted_class];
        let scores = score_augmentations(&solution.plan, weights).map_err(with_id)?;
        let count = config.top_s.min(store.particles());
        let candidates = select_top_s(views, &scores, count);
        if config.update_all_classes {
            for (class, (w, _)) in solved.iter().enumerate() {
                update_visual_particles(store.prototype_mut(class), &candidates, w).map_err(with_id)?;
            }
        } else {
            update_visual_particles(store.prototype_mut(predicted_class), &candidates, weights).map_err(with_id)?;
        }
    }

    let prediction = PredictionRecord {
        sample_id: record.sample_id,
        probabilities,
        predicted_class,
        max_probability,
        updated_cache,
        ot_costs,
        true_label: record.true_label,
        ot_iterations,
    };
    let (_, plan) = solved
        .into_iter()
        .nth(predicted_class)
        .expect("predicted class is in range");
    Ok((prediction, plan))
}

pub fn process_sample(
    record: &StreamRecord,
    store: &mut PrototypeStore,
    config: &EngineConfig,
) -> Result<PredictionRecord> {
    process_sample_traced(record, store, config).map(|(p, _)| p)
}

/// Processes `records` strictly in order, mutating `store` as it goes.
/// Samples that fail are skipped and reported.
pub fn run_stream(records: &[StreamRecord], store: &mut PrototypeStore, config: &EngineConfig) -> Result<StreamOutput> {
    run_stream_with(records, store, config, |_, _| Ok(()))
}

/// Like [`run_stream`], calling `observe` with every prediction and the
/// predicted class's transport solution. An observer error aborts the run.
pub fn run_stream_with<F>(
    records: &[StreamRecord],
    store: &mut PrototypeStore,
    config: &EngineConfig,
    mut observe: F,
) -> Result<StreamOutput>
where
    F: FnMut(&PredictionRecord, &OtSolution) -> Result<()>,
{
    config.validate()?;
    let mut predictions = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for record in records {
        match process_sample_traced(record, store, config) {
            Ok((prediction, plan)) => {
                observe(&prediction, &plan)?;
                predictions.push(prediction);
            }
            Err(error) => {
                log::warn!("skipping sample {}: {error}", record.sample_id);
                skipped.push(SkippedSample {
                    sample_id: record.sample_id,
                    error,
                });
            }
        }
    }
    let summary = StreamSummary::from_records(&predictions, skipped.len(), store.num_classes());
    Ok(StreamOutput {
        predictions,
        skipped,
        summary,
    })
}

/// Zero-shot baseline over a stream: view 0 of each sample against the
/// per-class mean description embedding. Probabilities are the cosine
/// softmax at `class_temperature`; `ot_costs` hold cosine distances.
pub fn run_zero_shot(records: &[StreamRecord], store: &PrototypeStore, class_temperature: f64) -> Result<StreamOutput> {
    let class_features: Vec<UnitVector> = store.prototypes().iter().map(|p| p.text_mean()).collect();
    let mut predictions = Vec::with_capacity(records.len());
    let mut skipped = Vec::new();
    for record in records {
        let outcome = (|| {
            check_record(record, store.dim())?;
            let image = &record.augment_features[0];
            let predicted_class = zero_shot_predict(image, &class_features)?;
            let sims = class_features
                .iter()
                .map(|z| cosine_similarity(z, image))
                .collect::<Result<Vec<_>>>()?;
            let probabilities = softmax(&sims, class_temperature)?;
            Ok(PredictionRecord {
                sample_id: record.sample_id,
                max_probability: probabilities[predicted_class],
                probabilities,
                predicted_class,
                updated_cache: false,
                ot_costs: sims.iter().map(|s| 1.0 - s).collect(),
                true_label: record.true_label,
                ot_iterations: 0,
            })
        })();
        match outcome {
            Ok(p) => predictions.push(p),
            Err(error) => skipped.push(SkippedSample {
                sample_id: record.sample_id,
                error: Error::Sample {
                    sample_id: record.sample_id,
                    source: Box::new(error),
                },
            }),
        }
    }
    let summary = StreamSummary::from_records(&predictions, skipped.len(), 0);
    Ok(StreamOutput {
        predictions,
        skipped,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prototypes::PrototypeStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uv(v: &[f64]) -> UnitVector {
        UnitVector::new(v.to_vec()).unwrap()
    }

    fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> UnitVector {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if let Ok(u) = UnitVector::new(v) {
                return u;
            }
        }
    }

    fn random_store(rng: &mut ChaCha8Rng, c: usize, m: usize, s: usize, d: usize) -> PrototypeStore {
        let text = (0..c).map(|_| (0..m).map(|_| random_unit(rng, d)).collect()).collect();
        PrototypeStore::from_text(text, s).unwrap()
    }

    fn random_stream(rng: &mut ChaCha8Rng, len: usize, n: usize, d: usize, c: usize) -> Vec<StreamRecord> {
        (0..len)
            .map(|i| StreamRecord {
                sample_id: i as u64,
                true_label: Some(rng.gen_range(0..c)),
                augment_features: (0..n).map(|_| random_unit(rng, d)).collect(),
            })
            .collect()
    }

    #[test]
    fn zero_shot_cases() {
        let x = uv(&[0.3, 0.4]);
        assert_eq!(zero_shot_predict(&x, &[uv(&[0.0, 1.0])]).unwrap(), 0);
        let classes = [uv(&[1.0, 0.0, 0.0]), uv(&[0.0, 1.0, 0.0]), uv(&[0.0, 0.0, 1.0])];
        assert_eq!(zero_shot_predict(&classes[2], &classes).unwrap(), 2);
        let r = 0.5f64.sqrt();
        assert_eq!(
            zero_shot_predict(&uv(&[r, r]), &[uv(&[1.0, 0.0]), uv(&[0.0, 1.0])]).unwrap(),
            0
        );
        assert!(zero_shot_predict(&x, &[uv(&[1.0, 0.0, 0.0])]).is_err());
    }

    #[test]
    fn degenerate_problem_reduces_to_zero_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let config = EngineConfig::default();
        for _ in 0..200 {
            let mut store = random_store(&mut rng, 5, 1, 0, 6);
            let record = random_stream(&mut rng, 1, 1, 6, 5).remove(0);
            let texts: Vec<UnitVector> = store
                .prototypes()
                .iter()
                .map(|p| p.text_features()[0].clone())
                .collect();
            let expected = zero_shot_predict(&record.augment_features[0], &texts).unwrap();
            let pred = process_sample(&record, &mut store, &config).unwrap();
            assert_eq!(pred.predicted_class, expected);
            for (c, z) in texts.iter().enumerate() {
                let cos = cosine_similarity(&record.augment_features[0], z).unwrap();
                assert!((pred.ot_costs[c] - (1.0 - cos)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_prototypes_tie_to_class_zero() {
        let text = vec![vec![uv(&[1.0, 0.2]), uv(&[0.1, 1.0])]; 2];
        let mut store = PrototypeStore::from_text(text, 2).unwrap();
        let record = StreamRecord {
            sample_id: 9,
            true_label: None,
            augment_features: vec![uv(&[0.4, 0.6]), uv(&[0.9, 0.1])],
        };
        let config = EngineConfig {
            tau: 1.0,
            ..EngineConfig::default()
        };
        let pred = process_sample(&record, &mut store, &config).unwrap();
        assert_eq!(pred.probabilities.as_slice(), &[0.5, 0.5]);
        assert_eq!(pred.predicted_class, 0);
        assert!(!pred.updated_cache);
    }

    #[test]
    fn closed_gate_leaves_store_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = random_store(&mut rng, 4, 3, 2, 8);
        let initial = store.clone();
        let stream = random_stream(&mut rng, 30, 5, 8, 4);
        // A unit prediction temperature keeps every probability strictly below one.
        let config = EngineConfig {
            tau: 1.0,
            prediction_temperature: 1.0,
            ..EngineConfig::default()
        };
        let out = run_stream(&stream, &mut store, &config).unwrap();
        assert!(out
            .predictions
            .iter()
            .all(|p| p.max_probability < 1.0 && !p.updated_cache));
        assert!(store.bitwise_eq(&initial));
    }

    #[test]
    fn open_gate_updates_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = random_store(&mut rng, 3, 2, 2, 4);
        let stream = random_stream(&mut rng, 1, 4, 4, 3);
        let config = EngineConfig {
            tau: 0.0,
            ..EngineConfig::default()
        };
        let out = run_stream(&stream, &mut store, &config).unwrap();
        assert_eq!(out.summary.cache_updates, 1);
        assert!(out.predictions[0].updated_cache);
    }

    #[test]
    fn empty_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = random_store(&mut rng, 2, 1, 1, 3);
        let initial = store.clone();
        let out = run_stream(&[], &mut store, &EngineConfig::default()).unwrap();
        assert!(out.predictions.is_empty());
        assert_eq!(out.summary.accuracy(), None);
        assert!(store.bitwise_eq(&initial));
    }

    #[test]
    fn bad_sample_is_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = random_store(&mut rng, 2, 1, 1, 3);
        let mut stream = random_stream(&mut rng, 3, 2, 3, 2);
        stream[1].augment_features[0] = uv(&[1.0, 0.0]);
        let out = run_stream(&stream, &mut store, &EngineConfig::default()).unwrap();
        assert_eq!(out.summary.skipped, 1);
        assert_eq!(out.skipped[0].sample_id, 1);
        assert!(matches!(out.skipped[0].error.root(), Error::Dimension { .. }));
        assert_eq!(out.predictions.len(), 2);
    }

    #[test]
    fn costs_reproduce_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = random_store(&mut rng, 4, 3, 3, 6);
        let stream = random_stream(&mut rng, 20, 6, 6, 4);
        let config = EngineConfig {
            tau: 0.3,
            ..EngineConfig::default()
        };
        let out = run_stream(&stream, &mut store, &config).unwrap();
        for p in &out.predictions {
            let neg: Vec<f64> = p.ot_costs.iter().map(|c| -c).collect();
            let q = softmax(&neg, config.prediction_temperature).unwrap();
            for (a, b) in q.as_slice().iter().zip(p.probabilities.as_slice()) {
                assert!((a - b).abs() <= 1e-9);
            }
            assert_eq!(p.predicted_class, p.probabilities.argmax());
        }
    }

    #[test]
    fn update_all_classes_touches_every_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = random_store(&mut rng, 3, 2, 2, 5);
        let initial = store.clone();
        let stream = random_stream(&mut rng, 1, 4, 5, 3);
        let config = EngineConfig {
            tau: 0.0,
            update_all_classes: true,
            ..EngineConfig::default()
        };
        run_stream(&stream, &mut store, &config).unwrap();
        for c in 0..3 {
            assert!(!store.prototype(c).bitwise_eq(initial.prototype(c)));
        }
    }

    #[test]
    fn only_predicted_class_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = random_store(&mut rng, 4, 2, 3, 5);
        let before = store.clone();
        let record = random_stream(&mut rng, 1, 6, 5, 4).remove(0);
        let config = EngineConfig {
            tau: 0.0,
            ..EngineConfig::default()
        };
        let pred = process_sample(&record, &mut store, &config).unwrap();
        for c in 0..4 {
            let same = store.prototype(c).bitwise_eq(before.prototype(c));
            assert_eq!(same, c != pred.predicted_class);
        }
    }

    #[test]
    fn zero_top_s_never_updates() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = random_store(&mut rng, 3, 2, 2, 4);
        let initial = store.clone();
        let stream = random_stream(&mut rng, 10, 3, 4, 3);
        let config = EngineConfig {
            tau: 0.0,
            top_s: 0,
            ..EngineConfig::default()
        };
        let out = run_stream(&stream, &mut store, &config).unwrap();
        assert_eq!(out.summary.cache_updates, 0);
        assert!(store.bitwise_eq(&initial));
    }

    #[test]
    fn zero_shot_stream_uses_text_means() {
        let text = vec![
            vec![uv(&[1.0, 0.0]), uv(&[1.0, 0.1])],
            vec![uv(&[0.0, 1.0]), uv(&[0.1, 1.0])],
        ];
        let store = PrototypeStore::from_text(text, 0).unwrap();
        let stream = vec![
            StreamRecord {
                sample_id: 0,
                true_label: Some(1),
                augment_features: vec![uv(&[0.2, 1.0])],
            },
            StreamRecord {
                sample_id: 1,
                true_label: None,
                augment_features: vec![uv(&[1.0, 0.3])],
            },
        ];
        let out = run_zero_shot(&stream, &store, 0.01).unwrap();
        assert_eq!(out.predictions[0].predicted_class, 1);
        assert_eq!(out.predictions[1].predicted_class, 0);
        assert_eq!(out.summary.labeled, 1);
        assert_eq!(out.summary.accuracy(), Some(1.0));
    }
}
