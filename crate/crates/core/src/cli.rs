//! `cemcd` command line: synth, train, eval, predict and ablate.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data error,
//! 4 training divergence, 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_assignment, parse_key_values, RunConfig};
use crate::data::{synthesize_dataset, write_dataset, write_list, DiskDataset, SampleSource, Split, SynthesisConfig};
use crate::error::{Error, Result};
use crate::infer::{evaluate, predict, write_prediction};
use crate::loss::{cem_mask, CemConfig, LossKind};
use crate::metrics::report;
use crate::network::ChangeDetector;
use crate::train::{run_ablation, train, Sweep, Trainer};

pub const OUT_ENV: &str = "CEMCD_OUT";
pub const DEFAULT_OUT: &str = "cemcd-out";

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "cemcd", version, about = "Bitemporal change detection with cross-entropy masking")]
pub struct Cli {
    /// Root directory for every file the command writes.
    #[arg(long, global = true, env = OUT_ENV)]
    pub out: Option<PathBuf>,

    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset under --out.
    Synth(SynthArgs),
    /// Train a model; writes checkpoints, the CSV log and the resolved config.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Write probability maps, masks and overlays for one split.
    Predict(PredictArgs),
    /// Sweep the masking ratio or the loss and tabulate multi-seed results.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
    #[arg(long = "change-frac", default_value_t = 0.05)]
    pub change_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 10)]
    pub max_objects: usize,
    /// Smallest object side as a fraction of the tile.
    #[arg(long, default_value_t = 0.06)]
    pub min_size: f64,
    /// Largest object side as a fraction of the tile.
    #[arg(long, default_value_t = 0.25)]
    pub max_size: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Fraction of samples listed in list/val.txt.
    #[arg(long, default_value_t = 0.2)]
    pub val_frac: f64,
    /// Fraction of samples listed in list/test.txt.
    #[arg(long, default_value_t = 0.2)]
    pub test_frac: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

impl Toggle {
    fn on(self) -> bool {
        self == Toggle::On
    }
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root containing A/, B/, label/ and optionally list/.
    #[arg(long)]
    pub data: PathBuf,
    /// Declared tile side of the dataset.
    #[arg(long, default_value_t = 256)]
    pub tile: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// key=value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub crop: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<u64>,
    /// Extra key=value overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl RunArgs {
    /// File entries, then named flags, then `--set` overrides.
    fn entries(&self) -> Result<Vec<(String, String)>> {
        let mut entries = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .map_err(|e| Error::config(format!("cannot read {}: {e}", p.display())))?;
                parse_key_values(&text)?
            }
            None => Vec::new(),
        };
        let mut flag = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                entries.push((k.to_string(), v));
            }
        };
        flag("loss.kind", self.loss.map(|k| k.to_string()));
        flag("loss.delta", self.delta.map(|v| v.to_string()));
        flag("epochs", self.epochs.map(|v| v.to_string()));
        flag("base_lr", self.lr.map(|v| v.to_string()));
        flag("batch_size", self.batch_size.map(|v| v.to_string()));
        flag("seed", self.seed.map(|v| v.to_string()));
        flag("crop", self.crop.map(|v| v.to_string()));
        flag("max_iterations", self.max_iterations.map(|v| v.to_string()));
        for s in &self.set {
            entries.push(parse_assignment(s)?);
        }
        Ok(entries)
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply(&self.entries()?)?;
        Ok(cfg)
    }

    /// Apply the overrides to a resumed trainer; the architecture is fixed.
    fn apply_to(&self, trainer: &mut Trainer<f32>) -> Result<()> {
        let network = trainer.model.config().clone();
        let mut cfg = RunConfig {
            train: trainer.config().clone(),
            network: network.clone(),
        };
        cfg.apply(&self.entries()?)?;
        let fixed = |n: &crate::network::NetworkConfig| (n.encoder.clone(), n.head_width, n.residual_blocks);
        if fixed(&cfg.network) != fixed(&network) {
            return Err(Error::config("model settings cannot change when resuming"));
        }
        trainer.set_config(cfg.train)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// Continue from a trainer checkpoint (defaults to none).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub tta: Toggle,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    pub tta: Toggle,
    /// Masking ratio for the dropped-pixel overlay.
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    /// Seed of the overlay mask draw.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only the first N samples.
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub run: RunArgs,
    /// `delta=0.2,0.3,...` or `loss=cem,focal,...`.
    #[arg(long)]
    pub sweep: String,
    /// Seeds per setting.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::DatasetLayout(_)
        | Error::Shape(_)
        | Error::Synthesis(_)
        | Error::Image { .. }
        | Error::EmptyEvaluation
        | Error::Checkpoint { .. }
        | Error::Io(_) => EXIT_DATA,
        Error::Divergence { .. } => EXIT_DIVERGENCE,
        Error::Json(_) => EXIT_OTHER,
    }
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    let mut stdout = std::io::stdout().lock();
    match execute(&cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

/// Run a parsed command, writing human-readable output to `w`.
pub fn execute<W: Write>(cli: &Cli, w: &mut W) -> Result<()> {
    let out = out_root(cli);
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, &out, w),
        Command::Train(a) => cmd_train(a, &out, w),
        Command::Eval(a) => cmd_eval(a, &out, w),
        Command::Predict(a) => cmd_predict(a, &out, w),
        Command::Ablate(a) => cmd_ablate(a, &out, w),
    }
}

pub fn cmd_synth<W: Write>(a: &SynthArgs, out: &Path, w: &mut W) -> Result<()> {
    let cfg = SynthesisConfig {
        num_samples: a.n,
        tile_size: a.tile,
        change_fraction_target: a.change_frac,
        object_count_range: (a.min_objects, a.max_objects),
        object_size_range: (a.min_size, a.max_size),
        noise_level: a.noise,
        seed: a.seed,
    };
    if !(a.val_frac >= 0.0 && a.test_frac >= 0.0 && a.val_frac + a.test_frac < 1.0) {
        return Err(Error::config("val and test fractions must be >= 0 and sum below 1"));
    }
    let samples = synthesize_dataset(&cfg)?;
    write_dataset(out, &samples)?;
    let ids: Vec<String> = samples.iter().map(|s| s.id().to_string()).collect();
    let n_val = (a.val_frac * a.n as f64).floor() as usize;
    let n_test = (a.test_frac * a.n as f64).floor() as usize;
    let n_train = a.n - n_val - n_test;
    write_list(out, Split::Train, &ids[..n_train])?;
    write_list(out, Split::Val, &ids[n_train..n_train + n_val])?;
    write_list(out, Split::Test, &ids[n_train + n_val..])?;
    fs::write(out.join("synthesis.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mean = samples.iter().map(|s| s.change_fraction()).sum::<f64>() / samples.len() as f64;
    writeln!(
        w,
        "wrote {} samples to {} (train {n_train}, val {n_val}, test {n_test}); mean change fraction {:.4}",
        samples.len(),
        out.display(),
        mean
    )?;
    Ok(())
}

fn open_split(d: &DataArgs, split: Split) -> Result<DiskDataset> {
    DiskDataset::open(&d.data, split, d.tile)
}

/// The validation split, if the dataset declares one.
fn optional_val(d: &DataArgs) -> Result<Vec<crate::data::BitemporalSample>> {
    if d.data.join("list").join("val.txt").is_file() {
        open_split(d, Split::Val)?.load_all()
    } else {
        Ok(Vec::new())
    }
}

pub fn cmd_train<W: Write>(a: &TrainArgs, out: &Path, w: &mut W) -> Result<()> {
    let resumed = match &a.resume {
        Some(path) => {
            let mut t = Trainer::<f32>::resume(path)?;
            a.run.apply_to(&mut t)?;
            Some(t)
        }
        None => None,
    };
    let cfg = a.run.resolve()?;
    let train_set = open_split(&a.data, Split::Train)?.load_all()?;
    let val = optional_val(&a.data)?;
    let trainer = match resumed {
        Some(mut t) => {
            t.fit(&train_set, &val, Some(out))?;
            t
        }
        None => train(&cfg, &train_set, &val, Some(out))?,
    };
    let st = trainer.state();
    writeln!(
        w,
        "trained {} epochs ({} iterations); final loss {:.5}; best val mF1 {}",
        st.epoch,
        st.iteration,
        st.history.last().map_or(f64::NAN, |r| r.train_loss),
        st.best_val_mf1.map_or("n/a".into(), |v| format!("{:.2}", 100.0 * v))
    )?;
    writeln!(w, "checkpoints in {}", out.display())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ChangeDetector<f32>> {
    let ck = crate::checkpoint::Checkpoint::load(path)?;
    ChangeDetector::from_checkpoint(&ck)
}

pub fn cmd_eval<W: Write>(a: &EvalArgs, out: &Path, w: &mut W) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = open_split(&a.data, a.split)?;
    let counts = evaluate(&model, &data, a.tta.on())?;
    let metrics = report(&counts)?;
    let stem = format!("eval_{}_tta_{}", a.split, if a.tta.on() { "on" } else { "off" });
    metrics.write_files(&counts, out, &stem)?;
    write!(w, "{}", metrics.to_key_values())?;
    Ok(())
}

pub fn cmd_predict<W: Write>(a: &PredictArgs, out: &Path, w: &mut W) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let data = open_split(&a.data, a.split)?;
    let cem = CemConfig::new(a.delta)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let dir = out.join("predictions");
    let n = a.limit.map_or(data.len(), |l| l.min(data.len()));
    for i in 0..n {
        let sample = data.get(i)?;
        let probs = predict(&model, &sample, a.tta.on())?;
        let mask = cem_mask(sample.gt().view(), &cem, &mut rng);
        write_prediction(&dir, &sample, probs.view(), Some(&mask))?;
    }
    writeln!(w, "wrote predictions for {n} samples to {}", dir.display())?;
    Ok(())
}

pub fn cmd_ablate<W: Write>(a: &AblateArgs, out: &Path, w: &mut W) -> Result<()> {
    let sweep: Sweep = a.sweep.parse()?;
    if a.seeds == 0 {
        return Err(Error::config("--seeds must be positive"));
    }
    let cfg = a.run.resolve()?;
    let train_set = open_split(&a.data, Split::Train)?.load_all()?;
    let val = optional_val(&a.data)?;
    let test = open_split(&a.data, Split::Test)?.load_all()?;
    let seeds: Vec<u64> = (0..a.seeds).map(|k| cfg.train.seed + k).collect();
    run_ablation(&cfg, &sweep, &seeds, &train_set, &val, &test, Some(out))?;
    write!(w, "{}", fs::read_to_string(out.join("ablation.md"))?)?;
    Ok(())
}
