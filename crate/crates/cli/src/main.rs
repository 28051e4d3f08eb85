//! `ctrlgen`: generate datasets, train, evaluate, sweep and interpolate.
//!
//! Every command reads the same INI experiment config (`--config`, or the
//! built-in defaults) and works inside its output directory, which
//! `CTRLGEN_OUT` overrides. Errors print one line, `error[CODE]: message`,
//! and exit 1; usage errors exit 2.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrlgen::config::ExperimentConfig;
use ctrlgen::eval::{self, evaluate};
use ctrlgen::formats;
use ctrlgen::optim::OptimizerKind;
use ctrlgen::rng::{self, Stream};
use ctrlgen::synth::{self, generate_dataset, parse_intervals, PROPERTY_NAMES};
use ctrlgen::trainer::{run_training, warm_start, UpdateSchedule};
use ctrlgen::{Ablation, Error, ImageSample, PropertyVector, ReplayDataset, Resolution, TargetMode};
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(name = "ctrlgen", version, about = "Property-controllable generation on mini-dSprites")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (INI). Defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the train and test splits into the output directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// In-distribution ranges, "lo:hi,lo:hi,lo:hi".
        #[arg(long)]
        ranges_id: Option<String>,
        /// Out-of-distribution ranges, "lo:hi,lo:hi,lo:hi".
        #[arg(long)]
        ranges_ood: Option<String>,
    },
    /// Train a model on the generated training split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        warm_start: Option<PathBuf>,
        /// none | base | ours-1 | ours-2 | ours-3
        #[arg(long)]
        ablation: Option<Ablation>,
        /// Literal gradient step instead of Adam.
        #[arg(long)]
        plain_sgd: bool,
        /// One update per outer iteration from the summed inner-step gradients.
        #[arg(long)]
        accumulate: bool,
        #[arg(long)]
        iterations: Option<usize>,
        /// File stem for the checkpoint and metrics CSV.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// id | ood; defaults to the config's eval.mode.
        #[arg(long)]
        mode: Option<TargetMode>,
    },
    /// Retrain over a list of loss weights and write the trade-off curve.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "alpha")]
        param: String,
        /// Comma-separated values, at least two.
        #[arg(long)]
        values: String,
    },
    /// Decode a sweep along one property with everything else fixed.
    Interp {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// size | x_pos | y_pos
        #[arg(long, default_value = "size")]
        property: String,
        /// Comma-separated target values; defaults to 8 evenly spaced
        /// values across the property's in-distribution and OOD ranges.
        #[arg(long)]
        values: Option<String>,
        /// Seed for the shared latent z; defaults to the config seed.
        #[arg(long)]
        z_seed: Option<u64>,
    },
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(Error::Io(e))
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid usage");
            eprintln!("error[USAGE]: {}", line.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::GenData { common, ranges_id, ranges_ood } => gen_data(&common, ranges_id, ranges_ood),
        Command::Train { common, warm_start, ablation, plain_sgd, accumulate, iterations, name } => {
            train(&common, warm_start, ablation, plain_sgd, accumulate, iterations, &name)
        }
        Command::Eval { common, checkpoint, mode } => eval_cmd(&common, &checkpoint, mode),
        Command::Sweep { common, param, values } => sweep(&common, &param, &values),
        Command::Interp { common, checkpoint, property, values, z_seed } => {
            interp(&common, &checkpoint, &property, values.as_deref(), z_seed)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[USAGE]: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(dir) = std::env::var_os("CTRLGEN_OUT") {
        cfg.output_dir = PathBuf::from(dir);
    }
    Ok(cfg)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    std::fs::create_dir_all(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_values(s: &str) -> Result<Vec<f64>, Failure> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| Failure::Usage(format!("`{v}` is not a number in --values"))))
        .collect()
}

fn load_split(dir: &Path, name: &str, expect: Resolution) -> Result<Vec<ImageSample>, Error> {
    let (res, samples) = formats::load_dataset(&dir.join(name)).map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", dir.join(name).display()))),
        e => e,
    })?;
    if res != expect {
        return Err(Error::Config {
            field: "dataset.resolution".into(),
            msg: format!("{name} is {}x{}, config says {}x{}", res.h, res.w, expect.h, expect.w),
        });
    }
    Ok(samples)
}

fn gen_data(common: &Common, ranges_id: Option<String>, ranges_ood: Option<String>) -> CmdResult {
    let mut cfg = load_config(common)?;
    let flag = |field: &str, s: &str| {
        parse_intervals(s).map_err(|e| Error::Config { field: field.into(), msg: e.to_string() })
    };
    if let Some(s) = ranges_id {
        cfg.dataset.ranges.in_dist = flag("--ranges-id", &s)?;
    }
    if let Some(s) = ranges_ood {
        cfg.dataset.ranges.ood = flag("--ranges-ood", &s)?;
    }
    cfg.validate()?;
    let d = &cfg.dataset;
    let split = generate_dataset(d.n, &d.ranges, d.resolution, cfg.seed, d.split_ratio)?;
    let dir = out_dir(&cfg)?;
    println!(
        "n {} (train {}, test {}) at {}x{}",
        d.n,
        split.train.len(),
        split.test.len(),
        d.resolution.h,
        d.resolution.w
    );
    println!("ranges id  {}", synth::format_intervals(&d.ranges.in_dist));
    println!("ranges ood {}", synth::format_intervals(&d.ranges.ood));
    for (name, samples) in [("train.cgds", &split.train), ("test.cgds", &split.test)] {
        let bytes = formats::encode_dataset(samples, d.resolution)?;
        let path = dir.join(name);
        std::fs::write(&path, &bytes)?;
        println!("sha256 {}  {}", sha256_hex(&bytes), path.display());
    }
    Ok(())
}

fn train(
    common: &Common,
    warm: Option<PathBuf>,
    ablation: Option<Ablation>,
    plain_sgd: bool,
    accumulate: bool,
    iterations: Option<usize>,
    name: &str,
) -> CmdResult {
    let cfg = load_config(common)?;
    let mut tc = cfg.training.clone();
    if let Some(a) = ablation {
        tc.ablation = a;
    }
    if plain_sgd {
        tc.optimizer = OptimizerKind::Sgd;
    }
    if accumulate {
        tc.schedule = UpdateSchedule::Accumulate;
    }
    if let Some(n) = iterations {
        tc.iterations = n;
    }
    let dir = out_dir(&cfg)?;
    let data = load_split(&dir, "train.cgds", cfg.dataset.resolution)?;
    let mut pool = ReplayDataset::new(data, cfg.dataset.resolution, tc.capacity_factor)?;
    let outcome = match warm {
        Some(path) => warm_start(formats::load_checkpoint(&path)?, &cfg.model, &mut pool, &tc)?,
        None => run_training(&mut pool, cfg.model.clone(), &tc)?,
    };
    let ckpt = dir.join(format!("{name}.cgck"));
    let metrics = dir.join(format!("{name}-metrics.csv"));
    formats::save_checkpoint(&ckpt, &outcome.model)?;
    std::fs::write(&metrics, outcome.log.to_csv())?;
    let eff = tc.effective();
    println!(
        "trained {} ({}) for {} iterations: N1 {} N2 {}, alpha {} beta {} xi {}, {} generated samples in pool",
        cfg.model.kind.name(),
        tc.ablation,
        eff.iterations,
        eff.seen_steps,
        eff.unseen_steps,
        eff.weights.alpha,
        eff.weights.beta,
        eff.weights.xi,
        pool.generated_len()
    );
    if let Some(last) = outcome.log.iterations.last() {
        println!("final total loss {:.6}", last.breakdown.total);
    }
    println!("checkpoint {}", ckpt.display());
    println!("metrics    {}", metrics.display());
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<ctrlgen::ModelParams, Error> {
    let model = formats::load_checkpoint(path)?;
    if model.arch() != &cfg.model {
        return Err(Error::ArchitectureMismatch(format!(
            "checkpoint `{}` vs config `{}`",
            model.arch().descriptor(),
            cfg.model.descriptor()
        )));
    }
    Ok(model)
}

fn eval_cmd(common: &Common, checkpoint: &Path, mode: Option<TargetMode>) -> CmdResult {
    let cfg = load_config(common)?;
    let mode = mode.unwrap_or(cfg.eval_mode);
    if mode == TargetMode::Union {
        return Err(Failure::Usage("--mode must be id or ood".into()));
    }
    let model = load_model(&cfg, checkpoint)?;
    let dir = out_dir(&cfg)?;
    let test = load_split(&dir, "test.cgds", cfg.dataset.resolution)?;
    let report = evaluate(&model, &test, &cfg.dataset.ranges, mode, &cfg.eval, cfg.seed)?;
    let stem = checkpoint.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let csv = dir.join(format!("{stem}-eval-{mode}.csv"));
    std::fs::write(&csv, report.to_csv())?;
    std::fs::write(dir.join(format!("{stem}-eval-{mode}.txt")), report.to_text())?;
    print!("{}", report.to_text());
    println!("report {}", csv.display());
    Ok(())
}

fn sweep(common: &Common, param: &str, values: &str) -> CmdResult {
    if param != "alpha" {
        return Err(Failure::Usage(format!("--param `{param}` is not supported; only alpha")));
    }
    let alphas = parse_values(values)?;
    if alphas.len() < 2 {
        return Err(Failure::Usage(format!("--values needs at least 2 values, got {}", alphas.len())));
    }
    let cfg = load_config(common)?;
    let dir = out_dir(&cfg)?;
    let train = load_split(&dir, "train.cgds", cfg.dataset.resolution)?;
    let test = load_split(&dir, "test.cgds", cfg.dataset.resolution)?;
    let rows = eval::tradeoff_sweep(&train, &test, &cfg.model, &cfg.training, &alphas, &cfg.eval)?;
    let csv = eval::tradeoff_csv(&rows);
    let path = dir.join(format!("sweep-{param}.csv"));
    std::fs::write(&path, &csv)?;
    print!("{csv}");
    println!("curve {}", path.display());
    Ok(())
}

fn interp(common: &Common, checkpoint: &Path, property: &str, values: Option<&str>, z_seed: Option<u64>) -> CmdResult {
    let cfg = load_config(common)?;
    let k = PROPERTY_NAMES
        .iter()
        .position(|p| *p == property)
        .ok_or_else(|| Failure::Usage(format!("unknown property `{property}`; expected size, x_pos or y_pos")))?;
    let ranges = &cfg.dataset.ranges;
    let values = match values {
        Some(s) => parse_values(s)?,
        None => {
            let ivs = &ranges.intervals(TargetMode::Union)[k];
            let lo = ivs.iter().map(|i| i.lo).fold(f64::INFINITY, f64::min);
            let hi = ivs.iter().map(|i| i.hi).fold(f64::NEG_INFINITY, f64::max);
            // Only the covered part of [lo, hi] is allowed; keep the grid
            // points that land inside an interval.
            (0..8)
                .map(|i| lo + (hi - lo) * i as f64 / 7.0)
                .filter(|v| ivs.iter().any(|iv| *v >= iv.lo && *v <= iv.hi))
                .collect()
        }
    };
    let model = load_model(&cfg, checkpoint)?;
    let base = PropertyVector::new(ranges.in_dist.iter().map(|iv| 0.5 * (iv.lo + iv.hi)).collect());
    let mut rng = rng::stream(z_seed.unwrap_or(cfg.seed), Stream::Evaluation);
    let z = rng::normal_vec(&mut rng, cfg.model.dim_z);
    let grid = eval::interpolation_sweep(&model, ranges, k, &values, &base, &z)?;
    let dir = out_dir(&cfg)?;
    let stem = format!("interp-{property}");
    grid.write(&dir, &stem)?;
    print!("{}", grid.to_csv());
    println!("image {}", dir.join(format!("{stem}.pgm")).display());
    Ok(())
}
