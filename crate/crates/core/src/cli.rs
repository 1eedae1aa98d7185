//! Command-line front end. Every subcommand also reads `--config FILE`, a
//! list of `key=value` lines keyed by long flag names; flags given on the
//! command line win over the file.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use crate::checks::{check_op, SuiteConfig, DEFAULT_TOLERANCE, OPS};
use crate::data::{self, generate_dataset, load_dataset, load_pnm, pnm};
use crate::error::Error;
use crate::haar::haar_levels;
use crate::nn::{HaarNet, HaarNetConfig, ParamStore};
use crate::train::{
    checkpoint_stats, default_boundary_tol, evaluate, load_model, train_loop, MetricAccumulator,
    MetricReport, PreparedData, TrainConfig, Trainer, LOG_HEADER,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Column header of `eval` output.
pub const EVAL_HEADER: &str = "miou,pixel_acc,boundary_f1";

#[derive(Parser, Debug)]
#[command(
    name = "haarnet",
    version,
    about = "Morphological Haar wavelet networks on synthetic RGB-D scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes synthetic RGB-D scenes with label maps.
    Generate(GenerateArgs),
    /// Morphological Haar decomposition of a PGM/PPM image.
    Transform(TransformArgs),
    /// Trains the segmentation network on a generated dataset.
    Train(TrainArgs),
    /// Scores a checkpoint, or a directory of predicted label maps.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable operator.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GenerateArgs {
    /// Dataset root; scenes go to `<out>/scenes/<seed>/`.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub count: usize,
    /// Height and width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
    pub size: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// key=value file of flag defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TransformArgs {
    /// Binary PGM (P5) or PPM (P6) image.
    #[arg(long = "in", default_value = "input.pgm")]
    pub input: PathBuf,
    #[arg(long, default_value = "transform")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub levels: usize,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Switches {
    /// Morphological up-sampling in the decoder.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub mup: Switch,
    /// Dilation-based activations instead of ReLU.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub mrelu: Switch,
    /// Wavelet fusion of the RGB and depth streams.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub mhw: Switch,
}

impl Switches {
    fn net(&self, classes: usize, seed: u64) -> HaarNetConfig {
        HaarNetConfig {
            num_classes: classes,
            seed,
            ..HaarNetConfig::default()
        }
        .with_switches(self.mup.on(), self.mrelu.on(), self.mhw.on())
    }
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Dataset root written by `generate`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Receives `log.csv`, checkpoints and `model.mten`.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 300)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Exponent of the polynomial learning-rate decay.
    #[arg(long, default_value_t = 0.9)]
    pub power: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Seeds the weights and the batch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint every this many epochs; 0 keeps only the final model.
    #[arg(long, default_value_t = 0)]
    pub save_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub switches: Switches,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Dataset root with the ground truth.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "run/model.mten")]
    pub checkpoint: PathBuf,
    /// Score label maps from this dataset-layout directory instead of
    /// running the network.
    #[arg(long)]
    pub pred: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[command(flatten)]
    pub switches: Switches,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
#[command(args_override_self = true)]
pub struct GradcheckArgs {
    /// Seeded cases per operator.
    #[arg(long, default_value_t = 100)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest allowed relative error.
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    /// Operators to check, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = OPS.map(String::from))]
    pub ops: Vec<String>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Failure of a command, carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite { .. } => EXIT_CHECK_FAILED,
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<i32, Failure>;

/// Splits `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> std::result::Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value, got {line:?}", i + 1))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[OsString]) -> Option<PathBuf> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Inserts the pairs of the `--config` file as flags ahead of the command
/// line, which then overrides them.
pub fn expand_config(argv: Vec<OsString>) -> std::result::Result<Vec<OsString>, Failure> {
    let Some(path) = config_path(argv.get(2..).unwrap_or_default()) else {
        return Ok(argv);
    };
    let sub_name = argv[1].to_string_lossy().into_owned();
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(&sub_name)
        .ok_or_else(|| Failure::usage(format!("unknown command {sub_name}")))?;
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let pairs =
        parse_config(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
    let mut flags = Vec::new();
    for (key, value) in pairs {
        let known = sub
            .get_arguments()
            .any(|a| a.get_long() == Some(key.as_str()));
        if !known || key == "config" {
            return Err(Failure::usage(format!(
                "{}: unknown key {key:?}",
                path.display()
            )));
        }
        flags.push(OsString::from(format!("--{key}")));
        flags.extend(value.split_whitespace().map(OsString::from));
    }
    let mut out = argv[..2].to_vec();
    out.extend(flags);
    out.extend_from_slice(&argv[2..]);
    Ok(out)
}

/// Parses `argv` (program name first) and runs the command; returns the
/// process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(f) => {
            eprintln!("error: {}", f.message);
            return f.code;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Transform(a) => cmd_transform(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

pub fn cmd_generate(a: &GenerateArgs) -> Outcome {
    let (h, w) = (a.size[0], a.size[1]);
    generate_dataset(&a.out, a.count, h, w, a.classes, a.seed)?;
    println!(
        "wrote {} scenes of {h}x{w} to {}",
        a.count,
        a.out.join("scenes").display()
    );
    Ok(EXIT_OK)
}

/// Maps `[-m, m]` to `[0, 255]` with zero at 128, `m = max |v|`.
pub fn rescale_detail(values: &[f32]) -> Vec<u8> {
    let m = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    values
        .iter()
        .map(|&v| {
            let t = if m > 0.0 { v / m } else { 0.0 };
            (127.5 + 127.5 * t).round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

fn to_bytes(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn raster_name(dir: &Path, stem: &str, channels: usize) -> PathBuf {
    dir.join(format!(
        "{stem}.{}",
        if channels == 3 { "ppm" } else { "pgm" }
    ))
}

pub fn cmd_transform(a: &TransformArgs) -> Outcome {
    if a.levels == 0 {
        return Err(Failure::usage("--levels must be at least 1"));
    }
    let image = load_pnm(&a.input)?;
    let levels = haar_levels(&image, a.levels)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for (l, band) in levels.iter().enumerate() {
        let l = l + 1;
        let s = band.approx.shape();
        data::save_tensor(a.out.join(format!("level{l}_approx.mten")), &band.approx)?;
        data::save_tensor(a.out.join(format!("level{l}_details.mten")), &band.details)?;
        pnm::save_planes(
            raster_name(&a.out, &format!("level{l}_approx"), s.c),
            s.c,
            s.h,
            s.w,
            &to_bytes(band.approx.data()),
        )?;
        for (name, pick) in [("v", 0), ("h", 1), ("d", 2)] {
            let planes: Vec<f32> = (0..s.c)
                .flat_map(|c| band.details.plane(0, 3 * c + pick).to_vec())
                .collect();
            let path = raster_name(&a.out, &format!("level{l}_{name}"), s.c);
            pnm::save_planes(path, s.c, s.h, s.w, &rescale_detail(&planes))?;
        }
        println!("level {l}: {}x{}", s.h, s.w);
    }
    Ok(EXIT_OK)
}

pub fn cmd_train(a: &TrainArgs) -> Outcome {
    let samples = load_dataset(&a.data)?;
    let stats = a.resume.as_deref().map(checkpoint_stats).transpose()?;
    let data = PreparedData::new(&samples, stats)?;
    let cfg = TrainConfig {
        lr0: a.lr,
        epochs: a.epochs,
        momentum: a.momentum,
        power: a.power,
        batch_size: a.batch_size,
        seed: a.seed,
        net: a.switches.net(a.classes, a.seed),
        save_every: a.save_every,
        ignore_index: None,
    };
    let mut trainer = Trainer::new(cfg, data)?;
    println!("parameters: {}", trainer.store.num_parameters());
    if let Some(path) = &a.resume {
        trainer.load_checkpoint(path)?;
        println!("resumed at epoch {}", trainer.epoch);
    }
    let logs = train_loop(&mut trainer, &a.out)?;
    println!("{LOG_HEADER}");
    for l in &logs {
        println!("{}", l.csv_row());
    }
    Ok(EXIT_OK)
}

fn report_row(r: &MetricReport) -> String {
    format!("{:?},{:?},{:?}", r.miou, r.pixel_accuracy, r.boundary_f1)
}

pub fn cmd_eval(a: &EvalArgs) -> Outcome {
    let samples = load_dataset(&a.data)?;
    let report = match &a.pred {
        Some(dir) => {
            let preds = load_dataset(dir)?;
            if preds.len() != samples.len()
                || preds.iter().zip(&samples).any(|(p, s)| p.seed != s.seed)
            {
                return Err(Failure::usage(format!(
                    "{} does not hold one prediction per scene of {}",
                    dir.display(),
                    a.data.display()
                )));
            }
            let gt = &samples[0].labels;
            let mut acc =
                MetricAccumulator::new(a.classes, default_boundary_tol(gt.height(), gt.width()))?;
            for (p, s) in preds.iter().zip(&samples) {
                acc.add(&p.labels, &s.labels)?;
            }
            acc.report()
        }
        None => {
            let stats = checkpoint_stats(&a.checkpoint)?;
            let data = PreparedData::new(&samples, Some(stats))?;
            let mut store = ParamStore::new();
            let net = HaarNet::new(a.switches.net(a.classes, 0), &mut store)?;
            load_model(&mut store, &a.checkpoint)?;
            evaluate(&net, &mut store, &data, a.batch_size)?
        }
    };
    println!("{EVAL_HEADER}");
    println!("{}", report_row(&report));
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> Outcome {
    let cfg = SuiteConfig {
        cases: a.cases,
        seed: a.seed,
        tolerance: a.tolerance,
    };
    let mut failed = false;
    for name in &a.ops {
        let op = OPS.iter().find(|&&o| o == name).ok_or_else(|| {
            Failure::usage(format!(
                "unknown operator {name}; expected one of {}",
                OPS.join(", ")
            ))
        })?;
        let report = check_op(op, &cfg)?;
        failed |= !report.passed();
        println!("{report}");
    }
    Ok(if failed { EXIT_CHECK_FAILED } else { EXIT_OK })
}
