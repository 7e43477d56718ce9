//! Seeded end-to-end scenarios: synthesize a world, run the zero-shot
//! baseline, a static (gate closed) run and an adaptive run, and check
//! named assertions against the measured metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::snapshot_metrics;
use crate::engine::{run_stream, run_zero_shot, EngineConfig, StreamOutput, StreamSummary};
use crate::error::{Error, Result};
use crate::io::format_sig6;
use crate::sinkhorn::SinkhornConfig;
use crate::synth::{generate_world, SynthConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSpec {
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::tau")]
    pub tau: f64,
    #[serde(default = "defaults::top_s")]
    pub top_s: usize,
    #[serde(default = "defaults::temperature")]
    pub class_temperature: f64,
    #[serde(default = "defaults::temperature")]
    pub prediction_temperature: f64,
    #[serde(default = "defaults::max_iterations")]
    pub max_iterations: usize,
    #[serde(default = "defaults::tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub update_all_classes: bool,
}

mod defaults {
    use crate::engine::EngineConfig;

    pub fn epsilon() -> f64 {
        EngineConfig::default().sinkhorn.epsilon
    }
    pub fn tau() -> f64 {
        EngineConfig::default().tau
    }
    pub fn top_s() -> usize {
        EngineConfig::default().top_s
    }
    pub fn temperature() -> f64 {
        EngineConfig::default().class_temperature
    }
    pub fn max_iterations() -> usize {
        EngineConfig::default().sinkhorn.max_iterations
    }
    pub fn tolerance() -> f64 {
        EngineConfig::default().sinkhorn.tolerance
    }
    pub fn checkpoint_fraction() -> f64 {
        0.25
    }
}

impl From<&EngineSpec> for EngineConfig {
    fn from(s: &EngineSpec) -> Self {
        EngineConfig {
            tau: s.tau,
            top_s: s.top_s,
            class_temperature: s.class_temperature,
            prediction_temperature: s.prediction_temperature,
            sinkhorn: SinkhornConfig {
                epsilon: s.epsilon,
                max_iterations: s.max_iterations,
                tolerance: s.tolerance,
            },
            update_all_classes: s.update_all_classes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Op {
    #[serde(rename = ">=")]
    Ge,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "==")]
    Eq,
}

impl Op {
    pub fn holds(self, measured: f64, threshold: f64) -> bool {
        match self {
            Op::Ge => measured >= threshold,
            Op::Gt => measured > threshold,
            Op::Le => measured <= threshold,
            Op::Lt => measured < threshold,
            Op::Eq => measured == threshold,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Op::Ge => ">=",
            Op::Gt => ">",
            Op::Le => "<=",
            Op::Lt => "<",
            Op::Eq => "==",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Assertion {
    pub name: String,
    /// Acceptance criterion number this assertion implements.
    pub criterion: u32,
    pub metric: String,
    pub op: Op,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub name: String,
    /// Fraction of the stream after which the early diagnostics snapshot is taken.
    #[serde(default = "defaults::checkpoint_fraction")]
    pub checkpoint_fraction: f64,
    pub synth: SynthConfig,
    pub engine: EngineSpec,
    #[serde(default, rename = "assertion")]
    pub assertions: Vec<Assertion>,
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ScenarioSpec = toml::from_str(text).map_err(|e| Error::Config(format!("scenario: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(reason) => Error::format(path, reason),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        EngineConfig::from(&self.engine).validate()?;
        if !(self.checkpoint_fraction > 0.0 && self.checkpoint_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "checkpoint_fraction must lie in (0, 1], got {}",
                self.checkpoint_fraction
            )));
        }
        for a in &self.assertions {
            if !METRICS.contains(&a.metric.as_str()) {
                return Err(Error::Config(format!(
                    "assertion '{}': unknown metric '{}'",
                    a.name, a.metric
                )));
            }
        }
        Ok(())
    }
}

/// Metric names a scenario may assert on. Accuracies and gains are in
/// percentage points; boolean metrics are 1 or 0.
pub const METRICS: &[&str] = &[
    "zeroshot_accuracy",
    "static_accuracy",
    "protomm_accuracy",
    "gain_over_zeroshot",
    "gain_over_static",
    "protomm_cache_updates",
    "static_cache_updates",
    "skipped_samples",
    "static_store_unchanged",
    "protomm_equals_static",
    "kl_initial",
    "kl_early",
    "kl_final",
    "mmd_initial",
    "mmd_early",
    "mmd_final",
    "kl_drop",
    "mmd_drop",
];

#[derive(Debug, Clone, PartialEq)]
pub struct AssertionOutcome {
    pub assertion: Assertion,
    pub measured: Option<f64>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioReport {
    pub name: String,
    pub metrics: BTreeMap<String, f64>,
    pub outcomes: Vec<AssertionOutcome>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("scenario {}\n", self.name);
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "  {k} = {}", format_sig6(*v));
        }
        for o in &self.outcomes {
            let a = &o.assertion;
            let measured = o.measured.map_or_else(|| "undefined".to_string(), format_sig6);
            let _ = writeln!(
                out,
                "{} [criterion {}] {}: {} {} {} (measured {measured})",
                if o.passed { "PASS" } else { "FAIL" },
                a.criterion,
                a.name,
                a.metric,
                a.op.symbol(),
                format_sig6(a.threshold),
            );
        }
        let _ = writeln!(
            out,
            "{}",
            if self.passed() {
                "scenario passed"
            } else {
                "scenario FAILED"
            }
        );
        out
    }
}

fn percent(summary: &StreamSummary) -> Option<f64> {
    summary.accuracy().map(|a| 100.0 * a)
}

fn merge(first: StreamOutput, second: StreamOutput, classes: usize) -> StreamOutput {
    let mut predictions = first.predictions;
    predictions.extend(second.predictions);
    let mut skipped = first.skipped;
    skipped.extend(second.skipped);
    let summary = StreamSummary::from_records(&predictions, skipped.len(), classes);
    StreamOutput {
        predictions,
        skipped,
        summary,
    }
}

pub fn run_scenario(spec: &ScenarioSpec) -> Result<ScenarioReport> {
    spec.validate()?;
    let world = generate_world(&spec.synth)?;
    let config = EngineConfig::from(&spec.engine);
    let classes = world.store.num_classes();
    let initial = snapshot_metrics(&world.store, &world.reference)?;

    let zero_shot = run_zero_shot(&world.stream, &world.store, config.class_temperature)?;

    let static_config = EngineConfig { tau: 1.0, ..config };
    let mut static_store = world.store.clone();
    let static_run = run_stream(&world.stream, &mut static_store, &static_config)?;

    let split = ((spec.checkpoint_fraction * world.stream.len() as f64).ceil() as usize).min(world.stream.len());
    let mut store = world.store.clone();
    let early_run = run_stream(&world.stream[..split], &mut store, &config)?;
    let early = snapshot_metrics(&store, &world.reference)?;
    let late_run = run_stream(&world.stream[split..], &mut store, &config)?;
    let fin = snapshot_metrics(&store, &world.reference)?;
    let adaptive = merge(early_run, late_run, classes);

    let mut metrics = BTreeMap::new();
    let mut put = |k: &str, v: Option<f64>| {
        if let Some(v) = v {
            metrics.insert(k.to_string(), v);
        }
    };
    let (zs, st, pm) = (
        percent(&zero_shot.summary),
        percent(&static_run.summary),
        percent(&adaptive.summary),
    );
    let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
    let flag = |b: bool| Some(if b { 1.0 } else { 0.0 });
    put("zeroshot_accuracy", zs);
    put("static_accuracy", st);
    put("protomm_accuracy", pm);
    put("gain_over_zeroshot", diff(pm, zs));
    put("gain_over_static", diff(pm, st));
    put("protomm_cache_updates", Some(adaptive.summary.cache_updates as f64));
    put("static_cache_updates", Some(static_run.summary.cache_updates as f64));
    put(
        "skipped_samples",
        Some((adaptive.summary.skipped + static_run.summary.skipped + zero_shot.summary.skipped) as f64),
    );
    put("static_store_unchanged", flag(static_store.bitwise_eq(&world.store)));
    put(
        "protomm_equals_static",
        flag(
            adaptive.predictions.len() == static_run.predictions.len()
                && adaptive
                    .predictions
                    .iter()
                    .zip(&static_run.predictions)
                    .all(|(a, b)| a.bitwise_eq(b)),
        ),
    );
    put("kl_initial", initial.macro_kl);
    put("kl_early", early.macro_kl);
    put("kl_final", fin.macro_kl);
    put("mmd_initial", initial.macro_mmd);
    put("mmd_early", early.macro_mmd);
    put("mmd_final", fin.macro_mmd);
    put("kl_drop", diff(early.macro_kl, fin.macro_kl));
    put("mmd_drop", diff(early.macro_mmd, fin.macro_mmd));

    let outcomes = spec
        .assertions
        .iter()
        .map(|a| {
            let measured = metrics.get(&a.metric).copied();
            AssertionOutcome {
                assertion: a.clone(),
                measured,
                passed: measured.is_some_and(|m| a.op.holds(m, a.threshold)),
            }
        })
        .collect();
    Ok(ScenarioReport {
        name: spec.name.clone(),
        metrics,
        outcomes,
    })
}
