use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use protomm::bench::{run_scenario, ScenarioSpec};
use protomm::diagnostics::snapshot_metrics;
use protomm::engine::{run_stream_with, run_zero_shot, EngineConfig, StreamOutput};
use protomm::io::{
    self, read_bundle, read_reference, read_stream, write_bundle, write_plan, write_reference, write_stream,
};
use protomm::sinkhorn::SinkhornConfig;
use protomm::synth::{describe_world, generate_world, SynthConfig};
use protomm::Error;

#[derive(Parser)]
#[command(
    name = "protomm",
    version,
    about = "Test-time adaptation with multimodal prototypes and optimal transport"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: bundle.toml/bundle.bin, stream.bin and reference.bin
    Synth(SynthArgs),
    /// Classify view 0 of every sample against the mean description embedding
    Zeroshot(ZeroshotArgs),
    /// Run the adaptive engine over a stream
    Run(RunArgs),
    /// Compare a store's visual particles with held-out reference features
    Diagnose(DiagnoseArgs),
    /// Summarize a bundle and stream
    Describe(DescribeArgs),
    /// Scenario harness
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Run a scenario spec and report each assertion
    Run {
        spec: PathBuf,
        /// Also write the report here
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Descriptions per class (M)
    #[arg(long, default_value_t = 50)]
    descriptions: usize,
    /// Views per sample, original included (N)
    #[arg(long, default_value_t = 50)]
    augmentations: usize,
    /// Visual particles per class (S)
    #[arg(long, default_value_t = 25)]
    particles: usize,
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 0.05)]
    text_noise: f64,
    #[arg(long, default_value_t = 0.15)]
    augment_noise: f64,
    /// Share of the text anchor pulled toward the paired class, in [0, 1]
    #[arg(long, default_value_t = 0.5)]
    ambiguity: f64,
}

#[derive(Args)]
struct Inputs {
    /// Bundle manifest (TOML)
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    stream: PathBuf,
    /// Results file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ZeroshotArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Temperature of the reported cosine softmax
    #[arg(long, default_value_t = 0.01)]
    class_temp: f64,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: Inputs,
    /// Entropic regularization
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    /// Confidence gate for cache updates
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    /// Augmentations folded into the particles per update
    #[arg(long, default_value_t = 25)]
    top_s: usize,
    /// Temperature of the importance-weight softmaxes
    #[arg(long, default_value_t = 0.01)]
    class_temp: f64,
    /// Temperature of the softmax over negated transport costs
    #[arg(long, default_value_t = 0.01)]
    pred_temp: f64,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    /// Update every class's particles, not only the predicted one
    #[arg(long)]
    update_all_classes: bool,
    /// Write the final store (with particles) as a bundle
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Write the predicted class's transport plan for every sample here
    #[arg(long)]
    dump_plans: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Bundle or checkpoint manifest
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    reference: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    stream: PathBuf,
}

enum Failure {
    /// Completed, but some samples were skipped or assertions failed.
    Partial,
    Fatal(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn configure_threads() -> protomm::Result<()> {
    let Ok(value) = std::env::var("PROTOMM_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("PROTOMM_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let config = SynthConfig {
        seed: args.seed,
        dim: args.dim,
        classes: args.classes,
        descriptions: args.descriptions,
        augmentations: args.augmentations,
        particles: args.particles,
        samples: args.samples,
        text_noise: args.text_noise,
        augment_noise: args.augment_noise,
        ambiguity: args.ambiguity,
    };
    let world = generate_world(&config)?;
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let dir = &args.out_dir;
    write_bundle(
        &dir.join("bundle.toml"),
        &world.store,
        &world.class_names,
        false,
        Some(config.seed),
    )?;
    write_stream(&dir.join("stream.bin"), config.dim, config.augmentations, &world.stream)?;
    write_reference(&dir.join("reference.bin"), config.dim, &world.reference)?;
    println!(
        "wrote {} samples over {} classes to {}",
        config.samples,
        config.classes,
        dir.display()
    );
    Ok(())
}

fn finish(output: &StreamOutput, out: &Path, run_info: &[(String, String)]) -> CmdResult {
    io::write_results(out, &output.predictions, &output.summary, run_info)?;
    for s in &output.skipped {
        eprintln!("skipped sample {}: {}", s.sample_id, s.error);
    }
    let accuracy = output
        .summary
        .accuracy()
        .map_or_else(|| "n/a".to_string(), |a| format!("{:.2}%", 100.0 * a));
    println!(
        "processed {}, skipped {}, accuracy {accuracy}, cache updates {}",
        output.summary.processed, output.summary.skipped, output.summary.cache_updates
    );
    if output.skipped.is_empty() {
        Ok(())
    } else {
        Err(Failure::Partial)
    }
}

fn info(pairs: &[(&str, String)]) -> Vec<(String, String)> {
    let mut all = vec![("version".to_string(), env!("CARGO_PKG_VERSION").to_string())];
    all.extend(pairs.iter().map(|(k, v)| (k.to_string(), v.clone())));
    all
}

fn cmd_zeroshot(args: ZeroshotArgs) -> CmdResult {
    let bundle = read_bundle(&args.inputs.bundle)?;
    let stream = read_stream(&args.inputs.stream)?;
    let output = run_zero_shot(&stream.records, &bundle.store, args.class_temp)?;
    let run_info = info(&[
        ("command", "zeroshot".into()),
        ("bundle", args.inputs.bundle.display().to_string()),
        ("stream", args.inputs.stream.display().to_string()),
        ("class_temperature", args.class_temp.to_string()),
    ]);
    finish(&output, &args.inputs.out, &run_info)
}

fn cmd_run(args: RunArgs) -> CmdResult {
    let config = EngineConfig {
        tau: args.tau,
        top_s: args.top_s,
        class_temperature: args.class_temp,
        prediction_temperature: args.pred_temp,
        sinkhorn: SinkhornConfig {
            epsilon: args.epsilon,
            max_iterations: args.max_iter,
            tolerance: args.tol,
        },
        update_all_classes: args.update_all_classes,
    };
    config.validate()?;
    let bundle = read_bundle(&args.inputs.bundle)?;
    let stream = read_stream(&args.inputs.stream)?;
    let mut store = bundle.store;
    if let Some(dir) = &args.dump_plans {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (m, s) = (store.descriptions(), store.particles());
    let col_labels: Vec<String> = (0..m)
        .map(|j| format!("text_{j}"))
        .chain((0..s).map(|j| format!("particle_{j}")))
        .collect();
    let output = run_stream_with(&stream.records, &mut store, &config, |prediction, solution| {
        let Some(dir) = &args.dump_plans else {
            return Ok(());
        };
        let rows: Vec<String> = (0..solution.plan.rows()).map(|i| format!("view_{i}")).collect();
        let path = dir.join(format!(
            "sample_{}_class_{}.tsv",
            prediction.sample_id, prediction.predicted_class
        ));
        write_plan(&path, &solution.plan, &rows, &col_labels)
    })?;
    if let Some(path) = &args.checkpoint_out {
        write_bundle(path, &store, &bundle.manifest.class_names, true, bundle.manifest.seed)?;
    }
    let run_info = info(&[
        ("command", "run".into()),
        ("bundle", args.inputs.bundle.display().to_string()),
        ("stream", args.inputs.stream.display().to_string()),
        ("epsilon", config.sinkhorn.epsilon.to_string()),
        ("tau", config.tau.to_string()),
        ("top_s", config.top_s.to_string()),
        ("class_temperature", config.class_temperature.to_string()),
        ("prediction_temperature", config.prediction_temperature.to_string()),
        ("max_iterations", config.sinkhorn.max_iterations.to_string()),
        ("tolerance", config.sinkhorn.tolerance.to_string()),
        ("update_all_classes", config.update_all_classes.to_string()),
    ]);
    finish(&output, &args.inputs.out, &run_info)
}

fn cmd_diagnose(args: DiagnoseArgs) -> CmdResult {
    let bundle = read_bundle(&args.bundle)?;
    let reference = read_reference(&args.reference)?;
    print!("{}", snapshot_metrics(&bundle.store, &reference)?.to_text());
    Ok(())
}

fn cmd_describe(args: DescribeArgs) -> CmdResult {
    let bundle = read_bundle(&args.bundle)?;
    let stream = read_stream(&args.stream)?;
    print!("{}", describe_world(&bundle.store, &stream.records)?.to_text());
    Ok(())
}

fn cmd_bench(spec: &Path, report_path: Option<&Path>) -> CmdResult {
    let spec = ScenarioSpec::load(spec)?;
    let report = run_scenario(&spec)?;
    let text = report.to_text();
    print!("{text}");
    if let Some(path) = report_path {
        fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Partial)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Zeroshot(a) => cmd_zeroshot(a),
        Command::Run(a) => cmd_run(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Describe(a) => cmd_describe(a),
        Command::Bench {
            command: BenchCommand::Run { spec, report },
        } => cmd_bench(&spec, report.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Partial) => ExitCode::from(2),
        Err(Failure::Fatal(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
