//! SGD training with a polynomial learning-rate schedule, validation-based
//! checkpointing, resumable state and multi-seed runs.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{debug, info, warn};
use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_bool, RunConfig};
use crate::data::{augment, AugmentConfig, BitemporalSample, SampleSource, SIZE_MULTIPLE};
use crate::error::{Error, Result};
use crate::infer::evaluate;
use crate::loss::{cem_mask, LossConfig, LossKind};
use crate::metrics::{report, ConfusionCounts, MetricReport};
use crate::network::{stack_images, ChangeDetector};
use crate::nn::{lit, Module, Real};

const DATA_STREAM: u64 = 1;
const MASK_STREAM: u64 = 2;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_mf1,val_miou";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleUnit {
    Epoch,
    Iteration,
}

impl std::fmt::Display for ScheduleUnit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleUnit::Epoch => "epoch",
            ScheduleUnit::Iteration => "iteration",
        })
    }
}

impl FromStr for ScheduleUnit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "epoch" => Ok(ScheduleUnit::Epoch),
            "iteration" => Ok(ScheduleUnit::Iteration),
            _ => Err(Error::config(format!("unknown schedule unit '{s}'"))),
        }
    }
}

/// `base · (1 − t / horizon)^power`, zero once `t` reaches the horizon.
pub fn lr_at(t: f64, base: f64, horizon: f64, power: f64) -> f64 {
    let frac = (1.0 - t.max(0.0) / horizon).max(0.0);
    base * frac.powf(power)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub decay_exponent: f64,
    pub schedule_horizon: f64,
    pub schedule_unit: ScheduleUnit,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Stop after this many optimizer steps.
    pub max_iterations: Option<u64>,
    /// Use flip averaging when scoring the validation split.
    pub tta: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 35,
            base_lr: 0.01,
            decay_exponent: 2.0,
            schedule_horizon: 50.0,
            schedule_unit: ScheduleUnit::Epoch,
            momentum: 0.9,
            batch_size: 4,
            seed: 0,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            max_iterations: None,
            tta: false,
        }
    }
}

fn num<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse '{value}'")))
}

impl TrainConfig {
    pub fn lr(&self, epoch: usize, iteration: u64) -> f64 {
        let t = match self.schedule_unit {
            ScheduleUnit::Epoch => epoch as f64,
            ScheduleUnit::Iteration => iteration as f64,
        };
        lr_at(t, self.base_lr, self.schedule_horizon, self.decay_exponent)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(self.schedule_horizon > 0.0) {
            return Err(Error::config("schedule_horizon must be positive"));
        }
        if !(self.decay_exponent >= 0.0) {
            return Err(Error::config("decay_exponent must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::config("flip_prob must be in [0, 1]"));
        }
        if self.augment.crop < SIZE_MULTIPLE || self.augment.crop % SIZE_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "crop must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.augment.crop
            )));
        }
        Ok(())
    }

    /// Apply one key; returns `false` for keys this struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        if self.loss.set(key, value)? {
            return Ok(true);
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "base_lr" => self.base_lr = num(key, value)?,
            "decay_exponent" => self.decay_exponent = num(key, value)?,
            "schedule_horizon" => self.schedule_horizon = num(key, value)?,
            "schedule_unit" => self.schedule_unit = value.parse()?,
            "momentum" => self.momentum = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "crop" => self.augment.crop = num(key, value)?,
            "flip_prob" => self.augment.flip_prob = num(key, value)?,
            "max_iterations" => {
                self.max_iterations = match value {
                    "" | "none" => None,
                    v => Some(num(key, v)?),
                }
            }
            "tta" => self.tta = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(String, String)> {
        let mut e: Vec<(String, String)> = vec![
            ("epochs".into(), self.epochs.to_string()),
            ("base_lr".into(), self.base_lr.to_string()),
            ("decay_exponent".into(), self.decay_exponent.to_string()),
            ("schedule_horizon".into(), self.schedule_horizon.to_string()),
            ("schedule_unit".into(), self.schedule_unit.to_string()),
            ("momentum".into(), self.momentum.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("crop".into(), self.augment.crop.to_string()),
            ("flip_prob".into(), self.augment.flip_prob.to_string()),
            (
                "max_iterations".into(),
                self.max_iterations.map_or("none".into(), |v| v.to_string()),
            ),
            ("tta".into(), if self.tta { "on" } else { "off" }.into()),
        ];
        e.extend(self.loss.entries());
        e
    }

    fn budget_exhausted(&self, iteration: u64) -> bool {
        self.max_iterations.is_some_and(|m| iteration >= m)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_mf1: Option<f64>,
    pub val_miou: Option<f64>,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{},{:.8},{:.6},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            opt(self.val_mf1),
            opt(self.val_miou)
        )
    }
}

/// Progress persisted alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub iteration: u64,
    pub best_val_mf1: Option<f64>,
    /// Steps on which the mask kept no pixel.
    pub cem_fallbacks: u64,
    pub history: Vec<EpochRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
    pub fell_back: bool,
}

pub struct Trainer<T: Real> {
    pub model: ChangeDetector<T>,
    config: TrainConfig,
    state: TrainState,
    data_rng: ChaCha8Rng,
    mask_rng: ChaCha8Rng,
    best: Option<ChangeDetector<T>>,
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn effective_crop(cfg: &AugmentConfig, sample: &BitemporalSample) -> AugmentConfig {
    let side = sample.height().min(sample.width());
    AugmentConfig {
        crop: cfg.crop.min(side / SIZE_MULTIPLE * SIZE_MULTIPLE),
        ..*cfg
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(model: ChangeDetector<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            data_rng: stream(config.seed, DATA_STREAM),
            mask_rng: stream(config.seed, MASK_STREAM),
            config,
            state: TrainState::default(),
            best: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Replace the schedule and loss settings, e.g. to extend a resumed run.
    pub fn set_config(&mut self, config: TrainConfig) -> Result<()> {
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Best model seen on validation, or the current one.
    pub fn best_model(&self) -> &ChangeDetector<T> {
        self.best.as_ref().unwrap_or(&self.model)
    }

    pub fn into_best_model(self) -> ChangeDetector<T> {
        self.best.unwrap_or(self.model)
    }

    fn divergence(&self, out: Option<&Path>) -> Error {
        let last_good = out.map(|d| d.join(LAST_CHECKPOINT)).filter(|p| p.exists());
        Error::Divergence {
            epoch: self.state.epoch,
            iteration: self.state.iteration,
            last_good,
        }
    }

    /// One optimizer step on an already augmented batch.
    pub fn step(&mut self, batch: &[BitemporalSample], lr: f64) -> Result<StepOutcome> {
        let pairs: Vec<_> = batch.iter().map(|s| (s.pre().view(), s.post().view())).collect();
        let (pre, post) = stack_images::<T>(&pairs)?;
        let gts: Vec<_> = batch.iter().map(|s| s.gt().view()).collect();
        let gt = ndarray::stack(Axis(0), &gts).map_err(|_| Error::shape("labels in a batch must share one size"))?;

        self.model.zero_grad();
        let logits = self.model.forward_train(pre, post)?;
        let z = logits.index_axis_move(Axis(1), 0);
        let mask = self
            .config
            .loss
            .uses_mask()
            .then(|| cem_mask(gt.view(), &self.config.loss.cem(), &mut self.mask_rng));
        let out = self.config.loss.evaluate_logits(z.view(), gt.view(), mask.as_ref())?;
        if !out.value.is_finite() {
            return Err(self.divergence(None));
        }
        self.model.backward(&out.grad.insert_axis(Axis(1)));
        self.apply_sgd(lr);
        self.state.iteration += 1;
        if out.fell_back {
            self.state.cem_fallbacks += 1;
        }
        Ok(StepOutcome {
            loss: out.value,
            lr,
            fell_back: out.fell_back,
        })
    }

    /// `v ← μ v + g; w ← w − lr · v` for every trainable tensor.
    fn apply_sgd(&mut self, lr: f64) {
        let mu: T = lit(self.config.momentum);
        let lr: T = lit(lr);
        self.model.visit_mut("", &mut |_, p| {
            if !p.trainable {
                return;
            }
            ndarray::Zip::from(&mut p.value)
                .and(&mut p.velocity)
                .and(&p.grad)
                .for_each(|w, v, &g| {
                    *v = mu * *v + g;
                    *w -= lr * *v;
                });
        });
    }

    fn parameters_finite(&self) -> bool {
        let mut ok = true;
        self.model.visit("", &mut |_, p| ok &= p.value.iter().all(|v| v.is_finite()));
        ok
    }

    /// One pass over `train` followed by validation.
    pub fn run_epoch<S, V>(&mut self, train: &S, val: &V, out: Option<&Path>) -> Result<EpochRecord>
    where
        S: SampleSource + ?Sized,
        V: SampleSource + ?Sized,
    {
        if train.is_empty() {
            return Err(Error::DatasetLayout("training split is empty".into()));
        }
        let epoch = self.state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.data_rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.batch_size) {
            if self.config.budget_exhausted(self.state.iteration) {
                break;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    let s = train.get(i)?;
                    augment(&s, &effective_crop(&self.config.augment, &s), &mut self.data_rng)
                })
                .collect::<Result<Vec<_>>>()?;
            let lr = self.config.lr(epoch, self.state.iteration);
            let step = match self.step(&batch, lr) {
                Err(Error::Divergence { .. }) => return Err(self.divergence(out)),
                other => other?,
            };
            if !self.parameters_finite() {
                return Err(self.divergence(out));
            }
            debug!("epoch {epoch} iter {} loss {:.5} lr {lr:.6}", self.state.iteration, step.loss);
            losses.push(step.loss);
        }
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        let (val_mf1, val_miou) = if val.is_empty() {
            (None, None)
        } else {
            let r = report(&evaluate(&self.model, val, self.config.tta)?)?;
            (Some(r.mf1), Some(r.miou))
        };
        let record = EpochRecord {
            epoch,
            lr: self.config.lr(epoch, self.state.iteration),
            train_loss,
            val_mf1,
            val_miou,
        };
        self.state.epoch += 1;
        self.state.history.push(record.clone());

        if let Some(v) = val_mf1 {
            if self.state.best_val_mf1.map_or(true, |b| v > b) {
                self.state.best_val_mf1 = Some(v);
                self.best = Some(self.model.clone());
                if let Some(dir) = out {
                    self.model.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        if let Some(dir) = out {
            append_log(&dir.join(TRAIN_LOG), &record)?;
            self.save(&dir.join(LAST_CHECKPOINT))?;
        }
        info!(
            "epoch {epoch}: loss {train_loss:.5}{}",
            val_mf1.map_or(String::new(), |v| format!(", val mF1 {:.2}", 100.0 * v))
        );
        Ok(record)
    }

    /// Train until the epoch count or iteration budget is reached.
    pub fn fit<S, V>(&mut self, train: &S, val: &V, out: Option<&Path>) -> Result<&TrainState>
    where
        S: SampleSource + ?Sized,
        V: SampleSource + ?Sized,
    {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        while self.state.epoch < self.config.epochs && !self.config.budget_exhausted(self.state.iteration) {
            self.run_epoch(train, val, out)?;
        }
        if self.state.cem_fallbacks > 0 {
            warn!("{} steps fell back to the unmasked loss", self.state.cem_fallbacks);
        }
        if self.best.is_none() {
            if let Some(dir) = out {
                self.model.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(&self.state)
    }

    /// Everything needed to continue training bit-for-bit.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("trainer");
        self.model.describe(&mut ck);
        ck.add_module("", &self.model);
        ck.add_velocities("", &self.model);
        for (k, v) in self.config.entries() {
            ck.set_meta(&format!("cfg.{k}"), v);
        }
        ck.set_meta("state", serde_json::to_string(&self.state).expect("state serializes"));
        ck.set_meta("rng.data", self.data_rng.get_word_pos());
        ck.set_meta("rng.mask", self.mask_rng.get_word_pos());
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind() != Some("trainer") {
            return Err(Error::checkpoint(
                "not a trainer checkpoint",
                "trainer",
                ck.kind().unwrap_or("none"),
            ));
        }
        let mut config = TrainConfig::default();
        for (k, v) in &ck.metadata {
            if let Some(key) = k.strip_prefix("cfg.") {
                if !config.set(key, v)? {
                    return Err(Error::checkpoint("unknown config entry", "train config key", key));
                }
            }
        }
        let mut model = ChangeDetector::from_checkpoint(ck)?;
        ck.load_velocities("", &mut model)?;
        let mut trainer = Self::new(model, config)?;
        trainer.state = serde_json::from_str(ck.meta("state")?)?;
        trainer.data_rng.set_word_pos(ck.meta_parse("rng.data")?);
        trainer.mask_rng.set_word_pos(ck.meta_parse("rng.mask")?);
        Ok(trainer)
    }

    pub fn resume(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{LOG_HEADER}")?;
    }
    writeln!(f, "{}", record.csv_line())?;
    Ok(())
}

/// Build a model from `run` and train it.
pub fn train<S, V>(run: &RunConfig, train: &S, val: &V, out: Option<&Path>) -> Result<Trainer<f32>>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
{
    run.validate()?;
    let model = ChangeDetector::<f32>::new(&run.seeded_network())?;
    let mut trainer = Trainer::new(model, run.train.clone())?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.cfg"), run.to_text())?;
    }
    trainer.fit(train, val, out)?;
    Ok(trainer)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub counts: ConfusionCounts,
    pub report: MetricReport,
    pub cem_fallbacks: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedResult>,
    pub mean: MetricReport,
    pub min: MetricReport,
    pub max: MetricReport,
}

impl SeedSummary {
    pub fn aggregate(runs: Vec<SeedResult>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let n = runs.len() as f64;
        let mut mean = [0.0; 9];
        let mut min = [f64::INFINITY; 9];
        let mut max = [f64::NEG_INFINITY; 9];
        for r in &runs {
            for (i, v) in r.report.values().into_iter().enumerate() {
                mean[i] += v / n;
                min[i] = min[i].min(v);
                max[i] = max[i].max(v);
            }
        }
        Ok(Self {
            runs,
            mean: MetricReport::from_values(mean),
            min: MetricReport::from_values(min),
            max: MetricReport::from_values(max),
        })
    }
}

pub const SEED_REPORT: &str = "report.json";

/// Train and test one model per seed. With `out`, each run is stored under
/// `seed_<n>/` and runs already present there are reused.
pub fn run_seeds<S, V, U>(
    run: &RunConfig,
    seeds: &[u64],
    train_src: &S,
    val: &V,
    test: &U,
    out: Option<&Path>,
) -> Result<SeedSummary>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
    U: SampleSource + ?Sized,
{
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let dir = out.map(|d| d.join(format!("seed_{seed}")));
        if let Some(done) = dir.as_ref().map(|d| d.join(SEED_REPORT)).filter(|p| p.exists()) {
            info!("seed {seed}: reusing {}", done.display());
            runs.push(serde_json::from_str(&fs::read_to_string(done)?)?);
            continue;
        }
        let mut cfg = run.clone();
        cfg.train.seed = seed;
        let trainer = train(&cfg, train_src, val, dir.as_deref())?;
        let fallbacks = trainer.state().cem_fallbacks;
        let model = trainer.into_best_model();
        let counts = evaluate(&model, test, cfg.train.tta)?;
        let result = SeedResult {
            seed,
            counts,
            report: report(&counts)?,
            cem_fallbacks: fallbacks,
        };
        if let Some(d) = &dir {
            fs::write(d.join(SEED_REPORT), serde_json::to_string_pretty(&result)?)?;
        }
        runs.push(result);
    }
    SeedSummary::aggregate(runs)
}

/// Read every `seed_*/report.json` below `dir`.
pub fn load_seed_results(dir: &Path) -> Result<Vec<SeedResult>> {
    let mut runs: Vec<SeedResult> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path().join(SEED_REPORT);
        if path.exists() {
            runs.push(serde_json::from_str(&fs::read_to_string(path)?)?);
        }
    }
    runs.sort_by_key(|r| r.seed);
    Ok(runs)
}

/// A one-parameter sweep over the loss configuration.
#[derive(Clone, Debug, PartialEq)]
pub enum Sweep {
    Delta(Vec<f64>),
    Loss(Vec<LossKind>),
}

impl FromStr for Sweep {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (key, values) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("sweep must look like key=v1,v2, got '{s}'")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(format!("sweep over '{key}' has no values")));
        }
        match key.trim() {
            "delta" | "loss.delta" => values
                .iter()
                .map(|v| num::<f64>("delta", v))
                .collect::<Result<_>>()
                .map(Sweep::Delta),
            "loss" | "loss.kind" => values
                .iter()
                .map(|v| v.parse())
                .collect::<Result<_>>()
                .map(Sweep::Loss),
            other => Err(Error::config(format!("cannot sweep over '{other}'; use delta or loss"))),
        }
    }
}

impl Sweep {
    /// `(label, loss configuration)` for every setting.
    pub fn settings(&self, base: &LossConfig) -> Result<Vec<(String, LossConfig)>> {
        let settings: Vec<(String, LossConfig)> = match self {
            Sweep::Delta(ds) => ds
                .iter()
                .map(|&d| {
                    (
                        format!("delta={d}"),
                        LossConfig {
                            kind: LossKind::Cem,
                            delta: d,
                            ..*base
                        },
                    )
                })
                .collect(),
            Sweep::Loss(ks) => ks
                .iter()
                .map(|&k| (format!("loss={k}"), LossConfig { kind: k, ..*base }))
                .collect(),
        };
        for (_, cfg) in &settings {
            cfg.validate()?;
        }
        Ok(settings)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: String,
    pub summary: SeedSummary,
}

pub fn run_ablation<S, V, U>(
    run: &RunConfig,
    sweep: &Sweep,
    seeds: &[u64],
    train_src: &S,
    val: &V,
    test: &U,
    out: Option<&Path>,
) -> Result<Vec<AblationRow>>
where
    S: SampleSource + ?Sized,
    V: SampleSource + ?Sized,
    U: SampleSource + ?Sized,
{
    let mut rows = Vec::new();
    for (label, loss) in sweep.settings(&run.train.loss)? {
        info!("ablation setting {label}");
        let mut cfg = run.clone();
        cfg.train.loss = loss;
        let dir: Option<PathBuf> = out.map(|d| d.join("runs").join(label.replace('=', "_")));
        let summary = run_seeds(&cfg, seeds, train_src, val, test, dir.as_deref())?;
        rows.push(AblationRow { setting: label, summary });
    }
    if let Some(dir) = out {
        write_ablation_table(dir, &rows)?;
    }
    Ok(rows)
}

const TABLE_KEYS: [&str; 5] = ["precision", "recall", "f1", "iou", "mf1"];

/// Write `ablation.csv` and `ablation.md` (mean with min–max, in percent).
pub fn write_ablation_table(dir: &Path, rows: &[AblationRow]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut csv = String::from("setting,seeds");
    for k in TABLE_KEYS {
        let _ = write!(csv, ",{k}_mean,{k}_min,{k}_max");
    }
    csv.push('\n');
    let mut md = String::from("| setting | seeds |");
    for k in TABLE_KEYS {
        let _ = write!(md, " {k} |");
    }
    md.push_str("\n|---|---|");
    md.push_str(&"---|".repeat(TABLE_KEYS.len()));
    md.push('\n');
    for row in rows {
        let s = &row.summary;
        let _ = write!(csv, "{},{}", row.setting, s.runs.len());
        let _ = write!(md, "| {} | {} |", row.setting, s.runs.len());
        for k in TABLE_KEYS {
            let pct = |r: &MetricReport| 100.0 * r.get(k).expect("known metric");
            let (mean, lo, hi) = (pct(&s.mean), pct(&s.min), pct(&s.max));
            let _ = write!(csv, ",{mean:.2},{lo:.2},{hi:.2}");
            let _ = write!(md, " {mean:.2} ({lo:.2}–{hi:.2}) |");
        }
        csv.push('\n');
        md.push('\n');
    }
    fs::write(dir.join("ablation.csv"), csv)?;
    fs::write(dir.join("ablation.md"), md)?;
    Ok(())
}
