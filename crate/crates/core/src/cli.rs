//! Command-line front end.
//!
//! Every command ends by printing one status line to stdout:
//! `ddsr-status: ok <command>` or
//! `ddsr-status: error <kind> exit=<code>`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::ablation::{rows_to_columns, run_ablation_grid, AblationAxis};
use crate::config::{Config, FusionSchedule, PrototypeMode, StageSelection};
use crate::data::{load_predictions, read_file, save_predictions, write_file, Dataset};
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_fixed};
use crate::losses::WgForm;
use crate::net::{Activation, Network};
use crate::pipeline::{evaluate, run, MetricsRecord};
use crate::synth::{Benchmark, SynthParams};
use crate::teachers::{FileTeacher, PromptedTeacher, TeacherOracle};

pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Parser)]
#[command(name = "ddsr", version, about = "Dual-teacher distillation with subnetwork rectification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark: target.csv and benchmark.json.
    Synth(SynthArgs),
    /// Export both teachers' predictions on a dataset.
    Teachers(TeachersArgs),
    /// Fuse two teacher prediction files.
    Fuse(FuseArgs),
    /// Train a target model.
    Run(RunArgs),
    /// Report a checkpoint's accuracy on a labeled dataset.
    Eval(EvalArgs),
    /// Sweep one configuration axis.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, allow_negative_numbers = true)]
    pub angle: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with further benchmark parameters; flags win.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TeachersArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    /// Dataset to score (defaults to the benchmark's target set).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long = "black-box")]
    pub black_box: PathBuf,
    #[arg(long)]
    pub vil: PathBuf,
    #[arg(long, default_value_t = crate::fusion::DEFAULT_GU_THRESHOLD, allow_negative_numbers = true)]
    pub threshold: f64,
    /// Use a fixed weight on the ViL teacher instead of the adaptive rule.
    #[arg(long)]
    pub clip_weight: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    Full,
    OneOnly,
}

/// Inputs shared by `run` and `ablate`, plus one flag per config key.
#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// benchmark.json from `synth`; supplies any teacher not given as a file.
    #[arg(long)]
    pub benchmark: Option<PathBuf>,
    #[arg(long = "teacher-b")]
    pub teacher_b: Option<PathBuf>,
    #[arg(long = "teacher-c")]
    pub teacher_c: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage_one_epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub zeta: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub gu_threshold: Option<f64>,
    #[arg(long)]
    pub clip_weight: Option<f64>,
    #[arg(long)]
    pub prompt_period: Option<usize>,
    #[arg(long)]
    pub prompt_steps: Option<usize>,
    #[arg(long)]
    pub prompt_lr: Option<f64>,
    #[arg(long)]
    pub lr0: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub fusion_schedule: Option<String>,
    #[arg(long)]
    pub wg_form: Option<String>,
    #[arg(long)]
    pub prototype_mode: Option<String>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub activation: Option<Activation>,
    #[arg(long, value_enum)]
    pub stage: Option<StageArg>,
    /// Disable a loss term (kd, mix, im, sr, self); repeatable.
    #[arg(long)]
    pub ablate: Vec<String>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Also write two-column `epoch value` series under `<out>/plot/`.
    #[arg(long)]
    pub plot: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Switches,
    Threshold,
    Gamma,
    EpsZeta,
    ClipWeight,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated values; `eps-zeta` takes `e:z` pairs. Defaults to the
    /// standard sweep for the axis.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub values: Vec<String>,
}

fn json_enum<T: for<'de> Deserialize<'de>>(key: &str, v: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(v.to_string()))
        .map_err(|_| Error::Config(format!("invalid value `{v}` for --{key}")))
}

impl TrainingArgs {
    /// Config file (if any) with command-line overrides applied.
    pub fn resolve_config(&self) -> Result<Config> {
        let mut c = match &self.config {
            Some(p) => serde_json::from_str::<Config>(&read_file(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Config::default(),
        };
        macro_rules! over {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { c.$f = v; } )* };
        }
        over!(
            seed,
            threads,
            epochs,
            stage_one_epochs,
            batch_size,
            epsilon,
            zeta,
            beta,
            gamma,
            gu_threshold,
            prompt_period,
            prompt_steps,
            prompt_lr,
            lr0,
            momentum,
            weight_decay,
            hidden,
            activation
        );
        if let Some(w) = self.clip_weight {
            c.clip_weight = Some(w);
        }
        if let Some(v) = &self.fusion_schedule {
            c.fusion_schedule = json_enum::<FusionSchedule>("fusion-schedule", v)?;
        }
        if let Some(v) = &self.wg_form {
            c.wg_form = v.parse::<WgForm>()?;
        }
        if let Some(v) = &self.prototype_mode {
            c.prototype_mode = json_enum::<PrototypeMode>("prototype-mode", v)?;
        }
        if let Some(s) = self.stage {
            c.stage = match s {
                StageArg::Full => StageSelection::Full,
                StageArg::OneOnly => StageSelection::OneOnly,
            };
        }
        for name in &self.ablate {
            c.switches.set(name, false)?;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Everything `run` and `ablate` read, loaded before any output is written.
pub struct TrainingInputs {
    pub config: Config,
    pub data: Dataset,
    pub teacher_b: TeacherOracle,
    pub teacher_c: TeacherOracle,
    pub digests: Vec<(PathBuf, String)>,
    pub benchmark_seed: Option<u64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_benchmark(path: &Path) -> Result<Benchmark> {
    let text = read_file(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::parse(path, e.line(), e.to_string()))?;
    let b = v.get("benchmark").cloned().unwrap_or(v);
    serde_json::from_value(b).map_err(|e| Error::parse(path, 1, e.to_string()))
}

pub fn load_training_inputs(args: &TrainingArgs) -> Result<TrainingInputs> {
    if let Some(p) = args.config.as_ref().filter(|p| !p.is_file()) {
        return Err(Error::Config(format!("config file {} does not exist", p.display())));
    }
    let config = args.resolve_config()?;
    let mut digests = Vec::new();
    let mut record = |p: &Path| -> Result<()> {
        if !p.is_file() {
            return Err(Error::invalid(format!("input file {} does not exist", p.display())));
        }
        digests.push((p.to_path_buf(), sha256_file(p)?));
        Ok(())
    };
    if let Some(p) = &args.config {
        record(p)?;
    }
    let benchmark = match &args.benchmark {
        Some(p) => {
            record(p)?;
            Some(load_benchmark(p)?)
        }
        None => None,
    };
    let data = match (&args.data, &benchmark) {
        (Some(p), _) => {
            record(p)?;
            Dataset::load(p)?
        }
        (None, Some(b)) => b.target()?,
        (None, None) => return Err(Error::Config("--data or --benchmark is required".into())),
    };
    let c = data.classes();
    let teacher_b = match (&args.teacher_b, &benchmark) {
        (Some(p), _) => {
            record(p)?;
            TeacherOracle::File(FileTeacher::load(p, c)?)
        }
        (None, Some(b)) => TeacherOracle::Synthetic(b.teacher_b.clone()),
        (None, None) => return Err(Error::Config("--teacher-b or --benchmark is required".into())),
    };
    let teacher_c = match (&args.teacher_c, &benchmark) {
        (Some(p), _) => {
            record(p)?;
            TeacherOracle::File(FileTeacher::load(p, c)?)
        }
        (None, Some(b)) => TeacherOracle::Prompted(PromptedTeacher::new(b.teacher_c.clone(), config.prompt_lr)?),
        (None, None) => return Err(Error::Config("--teacher-c or --benchmark is required".into())),
    };
    // Fail on uncovered ids now rather than mid-run.
    teacher_b.query(&data)?;
    teacher_c.query(&data)?;
    Ok(TrainingInputs {
        config,
        data,
        teacher_b,
        teacher_c,
        digests,
        benchmark_seed: benchmark.map(|b| b.params.seed),
    })
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(format!("creating {}", p.display()), e))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    write_file(path, &s)
}

pub fn cmd_synth(args: &SynthArgs) -> Result<String> {
    let mut params = match &args.params {
        Some(p) => serde_json::from_str::<SynthParams>(&read_file(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => SynthParams::default(),
    };
    params.classes = args.classes;
    params.dim = args.dim;
    params.n = args.n;
    params.seed = args.seed;
    if let Some(a) = args.angle {
        params.angle = a;
    }
    if let Some(n) = args.noise {
        params.noise = n;
    }
    let bench = Benchmark::build(&params)?;
    let target = bench.target()?;
    create_dir(&args.out)?;
    let data_path = args.out.join("target.csv");
    target.save(&data_path)?;
    let bayes = bench.bayes_accuracy()?;
    write_json(
        &args.out.join("benchmark.json"),
        &json!({
            "benchmark": bench,
            "target_sha256": sha256_file(&data_path)?,
            "bayes_accuracy": bayes,
        }),
    )?;
    Ok(format!(
        "wrote {} ({} samples, Bayes accuracy {bayes:.4})",
        data_path.display(),
        target.len()
    ))
}

pub fn cmd_teachers(args: &TeachersArgs) -> Result<String> {
    let bench = load_benchmark(&args.benchmark)?;
    let data = match &args.data {
        Some(p) => Dataset::load(p)?,
        None => bench.target()?,
    };
    let yb = bench.teacher_b.query(&data)?;
    let yc = bench.teacher_c.query(&data)?;
    create_dir(&args.out)?;
    save_predictions(&yb, &args.out.join("teacher_b.csv"))?;
    save_predictions(&yc, &args.out.join("teacher_c.csv"))?;
    let mut msg = format!("wrote teacher predictions for {} samples", data.len());
    if let Some(truth) = data.labels() {
        let ab = crate::synth::accuracy(&yb.argmax_labels(), truth)?;
        let ac = crate::synth::accuracy(&yc.argmax_labels(), truth)?;
        let _ = write!(msg, "; accuracy teacher_b {ab:.4}, teacher_c {ac:.4}");
    }
    Ok(msg)
}

pub fn cmd_fuse(args: &FuseArgs) -> Result<String> {
    let yb = load_predictions(&args.black_box, None)?;
    let yc = load_predictions(&args.vil, Some(yb.classes()))?;
    if yb.ids() != yc.ids() {
        return Err(Error::invalid("teacher files list different sample ids (or order)"));
    }
    let (fused, report) = match args.clip_weight {
        Some(w) => fuse_fixed(&yb, &yc, w)?,
        None => fuse(&yb, &yc, args.threshold)?,
    };
    save_predictions(&fused, &args.out)?;
    let line = serde_json::to_string(&report)?;
    if let Some(p) = &args.report {
        write_json(p, &report)?;
    }
    Ok(line)
}

fn metrics_ndjson(metrics: &[MetricsRecord]) -> Result<String> {
    let mut s = String::new();
    for m in metrics {
        s.push_str(&serde_json::to_string(m)?);
        s.push('\n');
    }
    Ok(s)
}

fn plot_series(metrics: &[MetricsRecord]) -> Vec<(&'static str, String)> {
    type Getter = fn(&MetricsRecord) -> Option<f64>;
    let series: [(&str, Getter); 12] = [
        ("accuracy", |m| m.target_accuracy),
        ("gu_of_target", |m| Some(m.gu_of_target)),
        ("learning_rate", |m| Some(m.learning_rate)),
        ("total", |m| Some(m.losses.total)),
        ("kd", |m| Some(m.losses.kd)),
        ("mix", |m| Some(m.losses.mix)),
        ("im", |m| Some(m.losses.im)),
        ("od", |m| Some(m.losses.od)),
        ("wg", |m| Some(m.losses.wg)),
        ("cm", |m| Some(m.losses.cm)),
        ("self", |m| Some(m.losses.self_ce)),
        ("alpha", |m| m.fusion.map(|f| f.alpha)),
    ];
    series
        .into_iter()
        .map(|(name, get)| {
            let mut s = format!("# epoch {name}\n");
            for m in metrics {
                if let Some(v) = get(m) {
                    let _ = writeln!(s, "{} {v:.12e}", m.epoch);
                }
            }
            (name, s)
        })
        .collect()
}

pub fn cmd_run(args: &RunArgs) -> Result<String> {
    let inputs = load_training_inputs(&args.training)?;
    let out = &args.training.out;
    let cfg = &inputs.config;
    let files = [
        "manifest.json",
        "metrics.ndjson",
        "fused_epoch1.csv",
        "stage_one.ckpt",
        "final.ckpt",
        "predictions.csv",
        "summary.json",
    ];
    create_dir(out)?;
    let manifest = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "metrics_schema_version": METRICS_SCHEMA_VERSION,
        "config": cfg,
        "seeds": { "run": cfg.seed, "benchmark": inputs.benchmark_seed },
        "inputs": inputs.digests.iter().map(|(p, d)| json!({"path": p, "sha256": d})).collect::<Vec<_>>(),
        "teachers": { "black_box": inputs.teacher_b.kind(), "vil": inputs.teacher_c.kind() },
        "outputs": files,
    });
    write_json(&out.join("manifest.json"), &manifest)?;

    let outcome = run(cfg, &inputs.data, &inputs.teacher_b, inputs.teacher_c.clone(), &mut |_| {})?;
    write_file(&out.join("metrics.ndjson"), &metrics_ndjson(&outcome.metrics)?)?;
    save_predictions(&outcome.first_fusion, &out.join("fused_epoch1.csv"))?;
    outcome.stage_one_net.save(&out.join("stage_one.ckpt"))?;
    outcome.net.save(&out.join("final.ckpt"))?;
    let (probs, _) = outcome.net.predict(inputs.data.features())?;
    let preds = crate::prob::PredictionMatrix::new(inputs.data.ids().to_vec(), probs, inputs.data.classes())?;
    save_predictions(&preds, &out.join("predictions.csv"))?;
    let prompt = match &outcome.teacher_c {
        TeacherOracle::Prompted(t) => Some(t.prompt().to_vec()),
        _ => None,
    };
    write_json(
        &out.join("summary.json"),
        &json!({
            "stage_one_accuracy": outcome.stage_one_accuracy,
            "final_accuracy": outcome.final_accuracy,
            "final_gu_of_target": outcome.metrics.last().map(|m| m.gu_of_target),
            "epochs_run": outcome.metrics.len(),
            "final_prompt": prompt,
        }),
    )?;
    if args.plot {
        let dir = out.join("plot");
        create_dir(&dir)?;
        for (name, body) in plot_series(&outcome.metrics) {
            write_file(&dir.join(format!("{name}.dat")), &body)?;
        }
    }
    let acc = |a: Option<f64>| a.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    Ok(format!(
        "stage one accuracy {}, final accuracy {}",
        acc(outcome.stage_one_accuracy),
        acc(outcome.final_accuracy)
    ))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<String> {
    let net = Network::load(&args.checkpoint)?;
    let data = Dataset::load(&args.data)?;
    if data.dim() != net.layout().input_dim() || data.classes() != net.layout().classes() {
        return Err(Error::invalid("checkpoint and dataset shapes differ"));
    }
    let acc = evaluate(&net, &data)?;
    let report = json!({ "accuracy": acc, "samples": data.len() });
    if let Some(p) = &args.out {
        write_json(p, &report)?;
    }
    Ok(format!("accuracy {acc:.6}"))
}

fn parse_values(axis: AxisArg, raw: &[String]) -> Result<AblationAxis> {
    let floats = |raw: &[String], default: &[f64]| -> Result<Vec<f64>> {
        if raw.is_empty() {
            return Ok(default.to_vec());
        }
        raw.iter()
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad axis value `{s}`")))
            })
            .collect()
    };
    Ok(match axis {
        AxisArg::Switches => AblationAxis::Switches(if raw.is_empty() {
            crate::config::Switches::NAMES.iter().map(|s| s.to_string()).collect()
        } else {
            raw.to_vec()
        }),
        AxisArg::Threshold => AblationAxis::Threshold(floats(raw, &[0.0, 0.05, 0.1, 0.2])?),
        AxisArg::Gamma => AblationAxis::Gamma(floats(raw, &[0.64, 0.74, 0.84, 0.94, 1.0])?),
        AxisArg::ClipWeight => AblationAxis::ClipWeight(floats(raw, &[0.2, 0.4, 0.6, 0.8])?),
        AxisArg::EpsZeta => {
            if raw.is_empty() {
                AblationAxis::EpsZeta(vec![(0.0, 0.0), (0.6, 0.0), (0.0, 0.3), (0.6, 0.3), (1.0, 0.5)])
            } else {
                AblationAxis::EpsZeta(
                    raw.iter()
                        .map(|s| {
                            let (e, z) = s
                                .split_once(':')
                                .ok_or_else(|| Error::Config(format!("expected e:z, got `{s}`")))?;
                            let p = |v: &str| {
                                v.trim()
                                    .parse::<f64>()
                                    .map_err(|_| Error::Config(format!("bad axis value `{s}`")))
                            };
                            Ok((p(e)?, p(z)?))
                        })
                        .collect::<Result<_>>()?,
                )
            }
        }
    })
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<String> {
    let axis = parse_values(args.axis, &args.values)?;
    let inputs = load_training_inputs(&args.training)?;
    axis.configs(&inputs.config)?;
    let out = &args.training.out;
    create_dir(out)?;
    let rows = run_ablation_grid(&inputs.config, &axis, &inputs.data, &inputs.teacher_b, &inputs.teacher_c)?;
    write_json(&out.join("ablation.json"), &json!({ "axis": axis, "rows": rows }))?;
    write_file(&out.join("ablation.dat"), &rows_to_columns(&rows))?;
    Ok(format!("{} configurations written to {}", rows.len(), out.display()))
}

pub fn execute(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Teachers(a) => cmd_teachers(a),
        Command::Fuse(a) => cmd_fuse(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Teachers(_) => "teachers",
        Command::Fuse(_) => "fuse",
        Command::Run(_) => "run",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    }
}

/// Runs a parsed command, prints the status line and returns the exit code.
pub fn main_with(cli: Cli) -> i32 {
    let name = command_name(&cli.command);
    match execute(&cli) {
        Ok(msg) => {
            println!("{msg}");
            println!("ddsr-status: ok {name}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            println!("ddsr-status: error {} exit={}", e.kind(), e.exit_code());
            e.exit_code()
        }
    }
}
