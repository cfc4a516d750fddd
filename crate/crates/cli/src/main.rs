use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use approxdram::characterize::{characterize, BerGrid, CharMode, CharacterizationResult, NetworkProbe, DEFAULT_INCREMENT};
use approxdram::device::{
    default_vendor_profile, profile_device_with, read_trace_file, write_trace_file, DataPattern, GroundTruthDevice,
    OperatingPoint, PartitionId,
};
use approxdram::dram::{inject_in_place, AccessKey, ErrorModelFile, LayoutDescriptor, LayoutMode, WeakCellMap};
use approxdram::fit::{fit_and_select, FitReport};
use approxdram::mapping::{coarse_plan, data_sizes, fine_map, PartitionCatalog};
use approxdram::nn::{
    curricular_retrain, curricular_schedule, evaluate_accuracy, load_checkpoint, make_synthetic_dataset, save_checkpoint,
    train_baseline, Correction, Dataset, DatasetKind, DramEnv, Network, TrainConfig,
};
use approxdram::numerics::{decode_bits, encode_bits, read_ednt_file, write_ednt_file, Dtype};
use approxdram::pipeline::{device_env, run_pipeline, PipelineConfig};
use approxdram::{sha256_hex, Error};

/// Approximate-DRAM error modeling and DNN error-tolerance toolkit.
#[derive(Parser, Debug)]
#[command(name = "approxdram", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default synthetic device profile.
    GenDevice(GenDeviceArgs),
    /// Read every partition at an operating point and record an error trace.
    Profile(ProfileArgs),
    /// Fit every error-model family to a trace and select one.
    Fit(FitArgs),
    /// Generate a synthetic classification dataset.
    GenData(GenDataArgs),
    /// Train a baseline network and capture its value thresholds.
    Train(TrainArgs),
    /// Pass a tensor file through an error model.
    Inject(InjectArgs),
    /// Measure accuracy, optionally under an approximate-DRAM environment.
    Eval(EvalArgs),
    /// Curricular retraining with injected errors.
    Retrain(RetrainArgs),
    /// Find the tolerable bit error rate, globally or per data type.
    Characterize(CharacterizeArgs),
    /// Choose operating points or place data on partitions.
    Map(MapArgs),
    /// Run profile, fit, train, boost, characterize, map and closure.
    Pipeline(PipelineArgs),
    /// Merge JSON artifacts into one summary.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct GenDeviceArgs {
    /// Weak-cell map seed of the device.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PatternArg {
    Solid,
    Checkerboard,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[arg(long)]
    device: Option<PathBuf>,
    /// ΔV_DD in volts (non-positive).
    #[arg(long, allow_hyphen_values = true, default_value_t = -0.35)]
    vdd: f64,
    /// Δt_RCD in nanoseconds (non-positive).
    #[arg(long, allow_hyphen_values = true, default_value_t = -6.0)]
    trcd: f64,
    #[arg(long, default_value_t = 16)]
    rounds: u32,
    #[arg(long, value_enum, default_value = "solid")]
    pattern: PatternArg,
    /// Keep only the cells of this partition.
    #[arg(long)]
    partition: Option<PartitionId>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value = "spiral")]
    kind: DatasetKind,
    #[arg(long, default_value_t = 4000)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Arch {
    Mlp,
    Conv,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "mlp")]
    arch: Arch,
    /// Hidden widths of the MLP, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value = "fp32")]
    dtype: Dtype,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint manifest to write; tensors go beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InjectArgs {
    /// EDNT tensor to corrupt.
    #[arg(long)]
    input: PathBuf,
    /// Error model file (family, geometry, params, map seed).
    #[arg(long)]
    model: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Access counter of this read.
    #[arg(long, default_value_t = 0)]
    counter: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Where the approximate-DRAM environment comes from.
#[derive(Args, Debug)]
struct EnvArgs {
    /// Environment JSON.
    #[arg(long, conflicts_with = "fit")]
    env: Option<PathBuf>,
    /// Fit report whose chosen model, over the device's cells, forms the environment.
    #[arg(long)]
    fit: Option<PathBuf>,
    #[arg(long)]
    device: Option<PathBuf>,
    #[arg(long)]
    correction: Option<Correction>,
    /// Draw a fresh weak-cell map per trial.
    #[arg(long)]
    resample_map: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    /// Scale every data type to this BER.
    #[arg(long)]
    ber: Option<f64>,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RetrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    target_ber: f64,
    #[arg(long, default_value_t = 12)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CharacterizeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long, default_value = "coarse")]
    mode: CharMode,
    /// Largest accepted accuracy drop, in points.
    #[arg(long, default_value_t = 1.0)]
    target_drop: f64,
    /// Drops are measured from this accuracy instead of the model's own.
    #[arg(long)]
    reference_accuracy: Option<f64>,
    #[arg(long, default_value = "default")]
    grid: BerGrid,
    #[arg(long, default_value_t = DEFAULT_INCREMENT)]
    increment: f64,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MapArgs {
    /// Characterization result.
    #[arg(long)]
    char: PathBuf,
    #[arg(long)]
    device: Option<PathBuf>,
    /// Checkpoint; needed in fine mode for data sizes.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    mode: Option<CharMode>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    /// Pipeline configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    device: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    target_drop: Option<f64>,
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    dtype: Option<Dtype>,
    #[arg(long)]
    correction: Option<Correction>,
    /// Directory for the baseline and boosted checkpoints.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// JSON artifacts to merge.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_text(path: &Path) -> approxdram::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> approxdram::Result<T> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> approxdram::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn load_device(path: Option<&Path>) -> approxdram::Result<GroundTruthDevice> {
    match path {
        Some(p) => GroundTruthDevice::from_json(&read_text(p)?),
        None => Ok(default_vendor_profile()),
    }
}

fn load_data(path: &Path) -> approxdram::Result<Dataset> {
    Dataset::from_json(&read_text(path)?)
}

fn load_env(a: &EnvArgs) -> approxdram::Result<Option<DramEnv>> {
    let mut env = match (&a.env, &a.fit) {
        (Some(p), _) => read_json::<DramEnv>(p)?,
        (None, Some(p)) => {
            let fit: FitReport = read_json(p)?;
            device_env(&load_device(a.device.as_deref())?, &fit, Correction::Zero)?
        }
        (None, None) => return Ok(None),
    };
    if let Some(c) = a.correction {
        env.correction = c;
    }
    env.resample_map |= a.resample_map;
    env.validate()?;
    Ok(Some(env))
}

fn require_env(a: &EnvArgs) -> approxdram::Result<DramEnv> {
    load_env(a)?.ok_or_else(|| Error::InvalidArgument("an environment is required: pass --env or --fit".into()))
}

fn gen_device(a: GenDeviceArgs) -> approxdram::Result<()> {
    let mut d = default_vendor_profile();
    if let Some(s) = a.seed {
        d.seed = s;
    }
    emit(&d, a.out.as_deref())
}

fn profile(a: ProfileArgs) -> approxdram::Result<()> {
    let dev = load_device(a.device.as_deref())?;
    let op = OperatingPoint::new(a.vdd, a.trcd)?;
    let pattern = match a.pattern {
        PatternArg::Solid => DataPattern::Solid,
        PatternArg::Checkerboard => DataPattern::Checkerboard,
    };
    let mut trace = profile_device_with(&dev, op, a.rounds, a.seed, pattern)?;
    if let Some(p) = a.partition {
        trace = trace.restrict(dev.partition_cells(p)?)?;
    }
    write_trace_file(&trace, &a.out)?;
    emit(
        &json!({"cells": trace.cell_count(), "flips": trace.total_flips(), "flip_rate": trace.flip_rate()}),
        None,
    )
}

fn fit(a: FitArgs) -> approxdram::Result<()> {
    emit(&fit_and_select(&read_trace_file(&a.trace)?)?, a.out.as_deref())
}

fn gen_data(a: GenDataArgs) -> approxdram::Result<()> {
    let ds = make_synthetic_dataset(a.samples, a.classes, a.kind, a.seed)?;
    fs::write(&a.out, ds.to_json()?)?;
    Ok(())
}

fn train(a: TrainArgs) -> approxdram::Result<()> {
    let ds = load_data(&a.data)?;
    let init = match a.arch {
        Arch::Mlp => {
            let mut widths = vec![ds.input_len];
            widths.extend(&a.hidden);
            widths.push(ds.classes);
            Network::<f32>::mlp(&widths, a.dtype, a.seed)?
        }
        Arch::Conv => Network::<f32>::small_conv(ds.classes, a.dtype, a.seed)?,
    };
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch: a.batch, seed: a.seed };
    let (net, _) = train_baseline(init, &ds, &cfg)?;
    let acc = evaluate_accuracy(&net, &ds, None, 1, 0)?.mean;
    let provenance = json!({"command": "train", "config": cfg, "dataset_seed": ds.seed, "accuracy": acc});
    save_checkpoint(&net, &a.out, provenance)?;
    emit(&json!({"accuracy": acc, "parameters": net.param_count()}), None)
}

fn inject(a: InjectArgs) -> approxdram::Result<()> {
    let tensor = read_ednt_file(&a.input)?;
    let file: ErrorModelFile = read_json(&a.model)?;
    let model = file.model()?;
    let mut img = encode_bits(&tensor);
    let layout = LayoutDescriptor::sequential(file.geometry, &[(0, img.bit_len() as u64)], LayoutMode::Aligned)?;
    let range = layout.range(layout.placement(0).expect("one object"));
    let map = WeakCellMap::generate_in(&model, &file.geometry, file.seed, std::slice::from_ref(&range))?;
    let flips = inject_in_place(&mut img, range.start, map.cells(), &file.geometry, &model, AccessKey::new(a.seed, a.counter), None);
    let out = decode_bits(&img, tensor.dtype(), tensor.shape(), tensor.scale())?;
    write_ednt_file(&out, &a.out)?;
    emit(&json!({"bits": img.bit_len(), "weak_cells": map.len(), "flips": flips}), None)
}

fn eval(a: EvalArgs) -> approxdram::Result<()> {
    let (net, _) = load_checkpoint::<f32>(&a.model)?;
    let ds = load_data(&a.data)?;
    let env = match (load_env(&a.env)?, a.ber) {
        (Some(e), Some(b)) => Some(e.with_ber(b)?),
        (Some(e), None) => Some(e),
        (None, Some(_)) => return Err(Error::InvalidArgument("--ber needs an environment".into())),
        (None, None) => None,
    };
    let stats = evaluate_accuracy(&net, &ds, env.as_ref(), a.trials, a.seed)?;
    emit(&json!({"ber": a.ber, "seed": a.seed, "accuracy": stats}), a.out.as_deref())
}

fn retrain(a: RetrainArgs) -> approxdram::Result<()> {
    let (net, _) = load_checkpoint::<f32>(&a.model)?;
    let ds = load_data(&a.data)?;
    let env = require_env(&a.env)?;
    let schedule = curricular_schedule(a.target_ber, a.epochs)?;
    let cfg = TrainConfig { epochs: a.epochs, lr: a.lr, batch: a.batch, seed: a.seed };
    let boosted = curricular_retrain(net, &ds, &env, &schedule, &cfg)?;
    let provenance = json!({"command": "retrain", "config": cfg, "schedule": schedule, "env": env});
    save_checkpoint(&boosted, &a.out, provenance)?;
    emit(&json!({"accuracy": evaluate_accuracy(&boosted, &ds, None, 1, 0)?.mean, "schedule": schedule}), None)
}

fn characterize_cmd(a: CharacterizeArgs) -> approxdram::Result<()> {
    let (net, _) = load_checkpoint::<f32>(&a.model)?;
    let ds = load_data(&a.data)?;
    let env = require_env(&a.env)?;
    let probe = NetworkProbe { net: &net, data: &ds, env: &env, reference_accuracy: a.reference_accuracy };
    let mut result = characterize(&probe, a.mode, a.target_drop, &a.grid, a.increment, a.trials, a.seed)?;
    result.env = Some(env);
    emit(&result, a.out.as_deref())
}

fn map(a: MapArgs) -> approxdram::Result<()> {
    let ch: CharacterizationResult = read_json(&a.char)?;
    let dev = load_device(a.device.as_deref())?;
    let plan = match a.mode.unwrap_or(ch.mode) {
        CharMode::Coarse => coarse_plan(ch.coarse_ber, &dev)?,
        CharMode::Fine => {
            let path = a.model.as_deref().ok_or_else(|| Error::InvalidArgument("fine mapping needs --model".into()))?;
            let (net, _) = load_checkpoint::<f32>(path)?;
            let sizes = data_sizes(&net)?;
            let catalog = PartitionCatalog::from_device(&dev)?;
            let plan = fine_map(&ch, &sizes, &catalog)?;
            plan.check_feasible(&ch.per_type, &sizes, &catalog)?;
            plan
        }
    };
    emit(&plan, a.out.as_deref())
}

fn pipeline(a: PipelineArgs) -> approxdram::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json::<PipelineConfig>(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.trials {
        cfg.trials = v;
    }
    if let Some(v) = a.target_drop {
        cfg.target_drop = v;
    }
    if let Some(v) = a.grid {
        cfg.grid = v;
    }
    if let Some(v) = a.dtype {
        cfg.dtype = v;
    }
    if let Some(v) = a.correction {
        cfg.correction = v;
    }
    let dev = load_device(a.device.as_deref())?;
    let run = run_pipeline(&cfg, &dev)?;
    if let Some(dir) = &a.models {
        fs::create_dir_all(dir)?;
        let provenance = json!({"command": "pipeline", "config_digest": run.report.config_digest});
        save_checkpoint(&run.baseline, dir.join("baseline.json"), provenance.clone())?;
        save_checkpoint(&run.boosted, dir.join("boosted.json"), provenance)?;
    }
    emit(&run.report, a.out.as_deref())
}

fn report(a: ReportArgs) -> approxdram::Result<()> {
    let mut artifacts = serde_json::Map::new();
    let mut digests = serde_json::Map::new();
    for p in &a.inputs {
        let text = read_text(p)?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact").to_string();
        if artifacts.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("two artifacts named {name:?}")));
        }
        digests.insert(name.clone(), Value::String(sha256_hex(text.as_bytes())));
        artifacts.insert(name, value);
    }
    emit(&json!({"format": "approxdram-summary/1", "digests": digests, "artifacts": artifacts}), a.out.as_deref())
}

fn run(cli: Cli) -> approxdram::Result<()> {
    match cli.command {
        Command::GenDevice(a) => gen_device(a),
        Command::Profile(a) => profile(a),
        Command::Fit(a) => fit(a),
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Inject(a) => inject(a),
        Command::Eval(a) => eval(a),
        Command::Retrain(a) => retrain(a),
        Command::Characterize(a) => characterize_cmd(a),
        Command::Map(a) => map(a),
        Command::Pipeline(a) => pipeline(a),
        Command::Report(a) => report(a),
    }
}

fn diagnostic(kind: &str, message: &str) {
    eprintln!("{}", json!({"error": {"kind": kind, "message": message}}));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            diagnostic("usage", e.to_string().trim_end());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            diagnostic(e.kind(), &e.to_string());
            ExitCode::FAILURE
        }
    }
}
