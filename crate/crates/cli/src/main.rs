//! `calib`: dataset generation, gradient checks, training, evaluation and
//! the attention cost benchmark.

mod config;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use calib_core::deform::{complexity_probe, write_probe_csv};
use calib_core::eval::{evaluate, evaluate_model, ground_truth_output, write_report};
use calib_core::loss::Weighting;
use calib_core::model::{load_checkpoint, save_checkpoint, train, write_loss_csv, Model, ModelConfig, TrainConfig};
use calib_core::scene::{generate_dataset, read_dataset, write_dataset, GeneratorConfig, SceneRecord};
use calib_core::verify::{gradient_suite, Scope};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde::Serialize;

const RUN_CONFIG_SUFFIX: &str = ".run.conf";
const RUN_CONFIG_FILE: &str = "run.conf";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{}: {message}", location(path, *line))]
    Config {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },
    #[error("{path}: {source}", path = path.display())]
    Input {
        path: PathBuf,
        source: calib_core::Error,
    },
    #[error(transparent)]
    Core(#[from] calib_core::Error),
    #[error("{path}: {source}", path = path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("gradient check failed: {0}")]
    Verification(String),
}

fn location(path: &Path, line: Option<usize>) -> String {
    match line {
        Some(l) => format!("{}:{l}", path.display()),
        None => path.display().to_string(),
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Verification(_) => 1,
            _ => 2,
        }
    }
}

type Outcome = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "calib", version, about = "Single-image camera calibration with line queries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic JSONL dataset.
    GenData(GenDataArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Train a model and write its checkpoint and loss curve.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground truth itself) on a dataset.
    Eval(EvalArgs),
    /// Count and time dense versus deformable attention.
    BenchAttn(BenchArgs),
}

impl Command {
    fn config_file(&self) -> Option<&Path> {
        match self {
            Command::GenData(a) => a.config.as_deref(),
            Command::Gradcheck(a) => a.config.as_deref(),
            Command::Train(a) => a.config.as_deref(),
            Command::Eval(a) => a.config.as_deref(),
            Command::BenchAttn(a) => a.config.as_deref(),
        }
    }
}

#[derive(clap::Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GenDataArgs {
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    count: usize,
    #[arg(long, env = "SOFI_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    #[arg(long, default_value_t = 32)]
    lines: usize,
    #[arg(long, default_value_t = -15.0, allow_negative_numbers = true)]
    pitch_min: f64,
    #[arg(long, default_value_t = 15.0, allow_negative_numbers = true)]
    pitch_max: f64,
    #[arg(long, default_value_t = -10.0, allow_negative_numbers = true)]
    roll_min: f64,
    #[arg(long, default_value_t = 10.0, allow_negative_numbers = true)]
    roll_max: f64,
    #[arg(long, default_value_t = 40.0)]
    fov_min: f64,
    #[arg(long, default_value_t = 80.0)]
    fov_max: f64,
    #[arg(long, default_value_t = 0.3)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 0.4)]
    vertical_fraction: f64,
    /// Endpoint noise, normalized units.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    /// Read defaults from a key = value file; flags override it.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ScopeArg {
    Ops,
    Attention,
    Model,
    All,
}

#[derive(clap::Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = ScopeArg::All)]
    scope: ScopeArg,
    #[arg(long, env = "SOFI_SEED", default_value_t = 0)]
    seed: u64,
    /// Also write the resolved configuration next to this path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint path; the loss curve and resolved config go beside it.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, env = "SOFI_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    /// Weigh all five loss terms equally instead of favoring the camera terms.
    #[arg(long)]
    equal_weights: bool,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 32)]
    n_lines: usize,
    #[arg(long, default_value_t = 3)]
    encoder_layers: usize,
    #[arg(long, default_value_t = 4)]
    decoder_layers: usize,
    #[arg(long, default_value_t = 32)]
    k_enc: usize,
    #[arg(long, default_value_t = 8)]
    k_dec: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ffn: usize,
    /// Add the line positional queries before the first decoder layer only.
    #[arg(long)]
    no_qpos_propagation: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, required_unless_present = "ground_truth")]
    ckpt: Option<PathBuf>,
    /// Output directory for the summary and CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Score the ground truth against itself instead of a model.
    #[arg(long)]
    ground_truth: bool,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(clap::Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
struct BenchArgs {
    /// Square map sides, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64])]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    /// Sampling points per head.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Timing repeats; the fastest is kept.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn ensure_parent(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(io_err(dir)),
        _ => Ok(()),
    }
}

/// Logs the resolved arguments and writes them to `path`.
fn record_config(args: &impl Serialize, path: &Path) -> Outcome {
    let text = config::render(args);
    eprint!("resolved configuration ({}):\n{text}", path.display());
    ensure_parent(path)?;
    fs::write(path, text).map_err(io_err(path))
}

fn load_data(path: &Path) -> Result<Vec<SceneRecord>, CliError> {
    read_dataset(path).map_err(|source| match source {
        // Open failures already name the path.
        calib_core::Error::File { .. } => CliError::Core(source),
        _ => CliError::Input {
            path: path.to_path_buf(),
            source,
        },
    })
}

fn gen_data(args: &GenDataArgs) -> Outcome {
    let config = GeneratorConfig {
        pitch_range: (args.pitch_min, args.pitch_max),
        roll_range: (args.roll_min, args.roll_max),
        fov_range: (args.fov_min, args.fov_max),
        lines_per_image: args.lines,
        outlier_fraction: args.outlier_fraction,
        vertical_fraction: args.vertical_fraction,
        image_size: args.image_size,
        jitter: args.jitter,
        ..GeneratorConfig::default()
    };
    record_config(args, &config::sibling(&args.out, RUN_CONFIG_SUFFIX))?;
    let records = generate_dataset(&config, args.count, args.seed)?;
    write_dataset(&records, &args.out)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn gradcheck(args: &GradcheckArgs) -> Outcome {
    if let Some(out) = &args.out {
        record_config(args, &config::sibling(out, RUN_CONFIG_SUFFIX))?;
    }
    let scopes: Vec<Scope> = match args.scope {
        ScopeArg::Ops => vec![Scope::Ops],
        ScopeArg::Attention => vec![Scope::Attention],
        ScopeArg::Model => vec![Scope::Model],
        ScopeArg::All => Scope::ALL.to_vec(),
    };
    let mut failed = Vec::new();
    println!("{:<10} {:<56} {:>12} {:>10} {:>8}", "scope", "target", "max_rel_err", "tolerance", "status");
    for scope in scopes {
        for row in gradient_suite(scope, args.seed)? {
            let status = if row.passed() { "pass" } else { "FAIL" };
            println!(
                "{:<10} {:<56} {:>12.3e} {:>10.0e} {:>8}",
                scope.to_string(),
                row.target,
                row.max_rel_err,
                row.tolerance,
                status
            );
            if !row.passed() {
                failed.push(format!("{scope}/{} ({:.3e})", row.target, row.max_rel_err));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}

fn train_cmd(args: &TrainArgs) -> Outcome {
    record_config(args, &config::sibling(&args.out, RUN_CONFIG_SUFFIX))?;
    let data = load_data(&args.data)?;
    let image_size = data.first().map_or(ModelConfig::default().image_size, |r| r.image.h);
    let model_config = ModelConfig {
        image_size,
        d: args.d,
        n_lines: args.n_lines,
        encoder_layers: args.encoder_layers,
        decoder_layers: args.decoder_layers,
        k_enc: args.k_enc,
        k_dec: args.k_dec,
        heads: args.heads,
        ffn: args.ffn,
        propagate_qpos: !args.no_qpos_propagation,
        ..ModelConfig::default()
    };
    let mut model = Model::new(model_config, args.seed)?;
    let train_config = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        weight_decay: args.weight_decay,
        seed: args.seed,
        weighting: if args.equal_weights {
            Weighting::Equal
        } else {
            Weighting::CameraFirst
        },
    };
    let history = if args.epochs == 0 {
        Vec::new()
    } else {
        let start = Instant::now();
        train(&mut model, &data, &train_config, |e| {
            eprintln!(
                "epoch {:>4}  lr {:.1e}  total {:.4}  zvp {:.4}  hl {:.4}  fov {:.3}  class {:.4}  score {:.4}  ({:.0?})",
                e.epoch,
                e.lr,
                e.losses.total,
                e.losses.l_zvp,
                e.losses.l_hl,
                e.losses.l_fov,
                e.losses.l_class,
                e.losses.l_score,
                start.elapsed()
            );
        })?
    };
    ensure_parent(&args.out)?;
    save_checkpoint(&model, &args.out)?;
    let curve = config::sibling(&args.out, ".losses.csv");
    let file = File::create(&curve).map_err(io_err(&curve))?;
    write_loss_csv(&history, BufWriter::new(file)).map_err(io_err(&curve))?;
    eprintln!("wrote {} and {}", args.out.display(), curve.display());
    Ok(())
}

fn eval_cmd(args: &EvalArgs) -> Outcome {
    record_config(args, &args.out.join(RUN_CONFIG_FILE))?;
    let data = load_data(&args.data)?;
    let report = match (&args.ckpt, args.ground_truth) {
        (_, true) => {
            let preds = data.iter().map(ground_truth_output).collect::<Result<Vec<_>, _>>()?;
            evaluate(&preds, &data)?
        }
        (Some(ckpt), false) => {
            let model = load_checkpoint(ckpt)?;
            evaluate_model(&model, &data)?
        }
        (None, false) => unreachable!("clap requires --ckpt without --ground-truth"),
    };
    write_report(&report, &args.out)?;
    let s = &report.summary;
    println!(
        "records {}  excluded {}  up {:.3}/{:.3}  pitch {:.3}/{:.3}  roll {:.3}/{:.3}  fov {:.3}/{:.3}  auc@0.10 {:.2}  auc@0.15 {:.2}  auc@0.25 {:.2}",
        s.n_records,
        s.n_excluded,
        s.up_mean,
        s.up_med,
        s.pitch_mean,
        s.pitch_med,
        s.roll_mean,
        s.roll_med,
        s.fov_mean,
        s.fov_med,
        s.auc_010,
        s.auc_015,
        s.auc_025
    );
    Ok(())
}

fn bench(args: &BenchArgs) -> Outcome {
    record_config(args, &config::sibling(&args.out, RUN_CONFIG_SUFFIX))?;
    let rows = complexity_probe(&args.sizes, args.d, args.k, args.repeats)?;
    ensure_parent(&args.out)?;
    let file = File::create(&args.out).map_err(io_err(&args.out))?;
    write_probe_csv(&rows, BufWriter::new(file)).map_err(io_err(&args.out))?;
    println!("{:<10} {:<11} {:>14} {:>14}", "size", "mode", "flops", "wall_ns");
    for r in &rows {
        println!("{:<10} {:<11} {:>14} {:>14}", r.resolution, r.mode, r.flops, r.wall_ns);
    }
    Ok(())
}

/// Parses the command line, folding in a `--config` file when given: its
/// pairs become flags placed before the user's own, which override them.
fn parse(argv: Vec<OsString>) -> Result<Cli, clap::Error> {
    let cli = Cli::try_parse_from(&argv)?;
    let Some(path) = cli.command.config_file().map(Path::to_path_buf) else {
        return Ok(cli);
    };
    let expanded = (|| {
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let pairs = config::parse(&path, &text)?;
        let name = argv[1].to_string_lossy().into_owned();
        let command = Cli::command();
        let sub = command.find_subcommand(&name).expect("subcommand already parsed");
        config::to_flags(&path, &pairs, sub)
    })();
    let flags = match expanded {
        Ok(f) => f,
        Err(e) => {
            return Err(Cli::command().error(clap::error::ErrorKind::InvalidValue, e.to_string()));
        }
    };
    let mut full = vec![argv[0].clone(), argv[1].clone()];
    full.extend(flags.into_iter().map(OsString::from));
    full.extend(argv[2..].iter().cloned());
    let mut command = Cli::command();
    command = command.mut_subcommands(|s| s.args_override_self(true));
    let matches = command.try_get_matches_from(full)?;
    <Cli as clap::FromArgMatches>::from_arg_matches(&matches)
}

fn main() -> ExitCode {
    let cli = match parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::BenchAttn(a) => bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
