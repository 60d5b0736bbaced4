//! `toa`: data generation, training, theory probes and operator inspection.

mod config;
mod failure;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};
use toa_core::operators::GapConfig;
use toa_core::report::{heatmap_svg, reconstruction_csv, spectra_csv};
use toa_core::serial::matrix_to_csv;
use toa_core::synthetic::{
    curve_to_csv, dataset_to_csv, extract_operator, generate, operator_low_band_fraction, regime_examples,
    train_with_progress, Checkpoint, ModelConfig, Regime, SyntheticSpec, TrainConfig,
};
use toa_core::theory::{self, Probe, ProbeConfig};
use toa_core::{Error, ToaVariant};

use failure::{Failure, EXIT_PROBE_FAILURE};
use manifest::{emit, RunManifest};

#[derive(Parser, Debug)]
#[command(name = "toa", version, about = "Temporal operator attention experiments")]
struct Cli {
    /// Directory for all outputs of this run.
    #[arg(long, global = true, env = "TOA_OUT_DIR", default_value = "toa-out")]
    out_dir: PathBuf,

    /// JSON config file (or a previous run manifest); flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV.
    Generate(GenerateArgs),
    /// Train a model on the synthetic benchmark.
    Train(TrainArgs),
    /// Run the operator theory probes.
    Theory(TheoryArgs),
    /// Export operators, spectra, heatmaps and reconstructions from a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// L = 96 with periods {8, 24} and the matching short training budget.
    #[arg(long)]
    short: bool,
    /// Data seed.
    #[arg(long)]
    data_seed: Option<u64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Restrict every sample to one regime.
    #[arg(long)]
    regime: Option<Regime>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Alias for --data-seed.
    #[arg(long, conflicts_with = "data_seed")]
    seed: Option<u64>,
    #[arg(long)]
    count: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    variant: Option<ToaVariant>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Stochastic operator regularization during training.
    #[arg(long, value_enum)]
    sor: Option<Switch>,
    /// Upper clamp on the sampled drop rate.
    #[arg(long)]
    p_max: Option<f64>,
    /// Parameter initialization seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sor_seed: Option<u64>,
    /// Fixed training pool size; fresh samples every step when omitted.
    #[arg(long)]
    train_samples: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Worker threads; anything above 1 forfeits bit-exact reruns.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    /// `all` or one probe name.
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long)]
    gap_steps: Option<usize>,
    #[arg(long)]
    gap_restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// Checkpoint written by `train`.
    checkpoint: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = cli.config.as_deref().map(config::load_file).transpose()?;
    std::fs::create_dir_all(&cli.out_dir).map_err(|e| Failure::io(&cli.out_dir, e))?;
    match cli.command {
        Command::Generate(args) => cmd_generate(args, file.as_ref(), &cli.out_dir),
        Command::Train(args) => cmd_train(args, file.as_ref(), &cli.out_dir),
        Command::Theory(args) => cmd_theory(args, file.as_ref(), &cli.out_dir),
        Command::Inspect(args) => cmd_inspect(args, &cli.out_dir),
    }
}

fn data_spec(args: &DataArgs, file: Option<&Value>) -> Result<SyntheticSpec, Failure> {
    let base = if args.short {
        SyntheticSpec::short()
    } else {
        SyntheticSpec::default()
    };
    let mut spec = config::layered(&base, file, "data")?;
    if let Some(s) = args.data_seed {
        spec.seed = s;
    }
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma = s;
    }
    if args.regime.is_some() {
        spec.regime = args.regime;
    }
    spec.validate()?;
    Ok(spec)
}

fn cmd_generate(args: GenerateArgs, file: Option<&Value>, out: &Path) -> Result<(), Failure> {
    let mut spec = data_spec(&args.data, file)?;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    let count = match args.count {
        Some(n) => n,
        None => file.and_then(|f| f.get("count")).and_then(Value::as_u64).unwrap_or(100) as usize,
    };
    if count == 0 {
        return Err(Failure::usage("--count must be positive"));
    }
    let samples = generate(&spec, count)?;
    let mut manifest = RunManifest::new(
        "generate",
        json!({"data": spec, "count": count}),
        json!({"data": spec.seed}),
        1,
    );
    emit(out, "dataset.csv", &dataset_to_csv(&samples), &mut manifest.outputs)?;
    manifest.metrics = json!({"samples": count, "length": spec.length});
    manifest.write(out)?;
    println!("wrote {count} samples to {}", out.join("dataset.csv").display());
    Ok(())
}

fn train_configs(args: &TrainArgs, file: Option<&Value>) -> Result<(SyntheticSpec, ModelConfig, TrainConfig), Failure> {
    let data = data_spec(&args.data, file)?;

    let variant = match args.variant {
        Some(v) => v,
        None => match file.and_then(|f| f.pointer("/model/variant")) {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| Failure::usage(format!("model.variant: {e}")))?,
            None => ToaVariant::ToaGated,
        },
    };
    let mut model = config::layered(&ModelConfig::new(variant), file, "model")?;
    model.variant = variant;
    if let Some(s) = args.sor {
        model.sor.enabled = matches!(s, Switch::On);
    }
    if let Some(p) = args.p_max {
        model.sor.p_max = p;
    }
    if let Some(s) = args.sor_seed {
        model.sor.seed = s;
    }
    model.validate()?;

    let base = if args.data.short {
        TrainConfig::short()
    } else {
        TrainConfig::default()
    };
    let mut train = config::layered(&base, file, "train")?;
    let overrides = [
        (args.steps, &mut train.steps),
        (args.batch_size, &mut train.batch_size),
        (args.eval_samples, &mut train.eval_samples),
        (args.eval_every, &mut train.eval_every),
        (args.threads, &mut train.threads),
    ];
    for (flag, slot) in overrides {
        if let Some(v) = flag {
            *slot = v;
        }
    }
    if let Some(lr) = args.lr {
        train.learning_rate = lr;
    }
    if let Some(s) = args.seed {
        train.seed = s;
    }
    if args.train_samples.is_some() {
        train.train_samples = args.train_samples;
    }
    train.validate()?;
    Ok((data, model, train))
}

fn cmd_train(args: TrainArgs, file: Option<&Value>, out: &Path) -> Result<(), Failure> {
    let (data, model_cfg, train_cfg) = train_configs(&args, file)?;
    let mut manifest = RunManifest::new(
        "train",
        json!({"data": data, "model": model_cfg, "train": train_cfg}),
        json!({"data": data.seed, "init": train_cfg.seed, "sor": model_cfg.sor.seed}),
        train_cfg.threads,
    );
    eprintln!(
        "training {} on L = {} for {} steps (SOR {})",
        model_cfg.variant,
        data.length,
        train_cfg.steps,
        if model_cfg.sor.enabled { "on" } else { "off" }
    );
    let outcome = train_with_progress(&model_cfg, &train_cfg, &data, |r| {
        if let Some(e) = r.eval_mse {
            eprintln!("step {:>6}  loss {:.6}  eval {:.6}", r.step, r.loss, e);
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(err @ Error::Diverged { step, .. }) => {
            manifest.metrics = json!({"diverged_at_step": step});
            manifest.write(out)?;
            return Err(err.into());
        }
        Err(err) => return Err(err.into()),
    };

    let checkpoint = Checkpoint::new(&outcome.model, &data, &train_cfg, outcome.final_eval_mse);
    emit(out, "checkpoint.json", &checkpoint.to_json()?, &mut manifest.outputs)?;
    emit(out, "metrics.csv", &curve_to_csv(&outcome.curve), &mut manifest.outputs)?;
    manifest.metrics = json!({
        "initial_eval_mse": outcome.initial_eval_mse,
        "final_eval_mse": outcome.final_eval_mse,
        "final_train_loss": outcome.curve.last().map(|r| r.loss),
    });
    manifest.write(out)?;
    println!("final eval MSE {}", toa_core::serial::fmt_f64(outcome.final_eval_mse));
    Ok(())
}

fn cmd_theory(args: TheoryArgs, file: Option<&Value>, out: &Path) -> Result<(), Failure> {
    let probes: Vec<Probe> = if args.which.eq_ignore_ascii_case("all") {
        Probe::ALL.to_vec()
    } else {
        vec![args.which.parse::<Probe>()?]
    };
    let mut cfg = config::layered(&ProbeConfig::default(), file, "theory")?;
    let gap = &mut cfg.gap;
    if let Some(s) = args.gap_steps {
        gap.steps = s;
    }
    if let Some(r) = args.gap_restarts {
        gap.restarts = r;
    }
    if let Some(s) = args.seed {
        gap.seed = s;
    }
    if gap.restarts == 0 || gap.batch == 0 {
        return Err(Failure::usage("gap restarts and batch must be positive"));
    }
    let GapConfig { seed, .. } = cfg.gap;

    let mut reports = Vec::with_capacity(probes.len());
    for probe in probes {
        let report = theory::run(probe, &cfg)?;
        let worst = report.checks.iter().filter(|c| !c.passed).count();
        println!(
            "{:<12} {}  ({} checks{})",
            probe.name(),
            if report.passed() { "PASS" } else { "FAIL" },
            report.checks.len(),
            if worst > 0 {
                format!(", {worst} failed")
            } else {
                String::new()
            }
        );
        reports.push(report);
    }
    let passed = reports.iter().all(|r| r.passed());
    let mut manifest = RunManifest::new(
        "theory",
        json!({"theory": cfg, "which": args.which}),
        json!({"gap": seed}),
        1,
    );
    let body = json!({"passed": passed, "reports": reports});
    emit(
        out,
        "theory.json",
        &(serde_json::to_string_pretty(&body).expect("report serializes") + "\n"),
        &mut manifest.outputs,
    )?;
    manifest.metrics = json!({"passed": passed, "probes": reports.len()});
    manifest.write(out)?;
    if passed {
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_PROBE_FAILURE,
            "one or more probes failed; see theory.json",
        ))
    }
}

fn cmd_inspect(args: InspectArgs, out: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.checkpoint)
        .map_err(|e| Failure::corrupt(format!("{}: {e}", args.checkpoint.display())))?;
    let checkpoint = Checkpoint::from_json(&text).map_err(|e| Failure::corrupt(e.to_string()))?;
    let model = checkpoint
        .decode_model()
        .map_err(|e| Failure::corrupt(format!("checkpoint: {e}")))?;

    let mut manifest = RunManifest::new(
        "inspect",
        json!({"checkpoint": args.checkpoint, "data": checkpoint.data}),
        json!({"data": checkpoint.data.seed}),
        1,
    );
    let examples = regime_examples(&checkpoint.data)?;
    let mut predictions = Vec::with_capacity(examples.len());
    let mut summary = Vec::new();
    for sample in &examples {
        predictions.push(model.predict(&sample.noisy)?);
        for op in extract_operator(&model, &sample.noisy)? {
            let stem = format!("operator_{}_l{}_h{}", sample.regime, op.layer, op.head);
            emit(
                out,
                &format!("{stem}.csv"),
                &matrix_to_csv(&op.matrix),
                &mut manifest.outputs,
            )?;
            emit(
                out,
                &format!("{stem}_spectra.csv"),
                &spectra_csv(&op.matrix)?,
                &mut manifest.outputs,
            )?;
            let title = format!(
                "{} layer {} head {} ({})",
                model.variant(),
                op.layer,
                op.head,
                sample.regime
            );
            emit(
                out,
                &format!("{stem}.svg"),
                &heatmap_svg(&op.matrix, &title),
                &mut manifest.outputs,
            )?;
            summary.push(json!({
                "regime": sample.regime,
                "layer": op.layer,
                "head": op.head,
                "min_entry": op.matrix.min_entry(),
                "max_entry": op.matrix.max_entry(),
                "low_band_fraction": operator_low_band_fraction(&op.matrix)?,
            }));
        }
    }
    emit(
        out,
        "reconstruction.csv",
        &reconstruction_csv(&examples, &predictions),
        &mut manifest.outputs,
    )?;
    manifest.metrics = json!({"final_eval_mse": checkpoint.final_eval_mse, "operators": summary});
    manifest.write(out)?;
    println!("wrote {} files to {}", manifest.outputs.len(), out.display());
    Ok(())
}
