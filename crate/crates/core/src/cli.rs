//! Command-line harness: configuration, subcommands and output files.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{adapt_hybrid, adapt_offline, finetune, AdaptationConfig, AdaptationMode, TraceRecord};
use crate::bayes::BeliefRecord;
use crate::data::{episodes, extract_windows, generate, ingest, transfer_preset, DomainSpec, EpisodeSpec, FileFormat, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::evaluation::{first_window_per_agent, offline_curve, online_protocol, summarize_online, OfflineCheckpoint, OfflineOptions, OnlineOptions, StepSummary};
use crate::model::{ModelConfig, ModelParameters, TensorRecord};
use crate::plot::{Chart, Series};
use crate::training::{derive_seed, draw_noise, gradient_check, train, Episode, GradCheckReport, LossOptions, TrainConfig, TrainStatus};

/// Sizes of the generated datasets and window layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_scenes: usize,
    pub adapt_scenes: usize,
    pub eval_scenes: usize,
    /// Frames between consecutive training episode starts.
    pub episode_stride: usize,
    /// Frames between adaptation episode starts.
    pub adapt_stride: usize,
    /// History frames of online evaluation windows.
    pub history: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_scenes: 60,
            adapt_scenes: 20,
            eval_scenes: 30,
            episode_stride: 8,
            adapt_stride: 23,
            history: 8,
        }
    }
}

/// Everything a subcommand needs. All randomness derives from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adaptation: AdaptationConfig,
    pub online: OnlineOptions,
    pub offline: OfflineOptions,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let pair = transfer_preset("speed-shift").expect("built-in preset");
        Self {
            name: "peds-transfer".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            source: pair.source,
            target: pair.target,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            adaptation: AdaptationConfig::default(),
            online: OnlineOptions::default(),
            offline: OfflineOptions::default(),
        }
    }
}

impl ExperimentConfig {
    /// `peds-transfer`, `freq-transfer`, `oracle`, or any transfer pair name.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let (pair, name) = match name {
            "peds-transfer" => ("speed-shift", name),
            "freq-transfer" => ("freq-shift", name),
            "oracle" => {
                let target = transfer_preset("freq-shift")?.target;
                return Ok(Self {
                    name: name.into(),
                    source: target.clone(),
                    target,
                    online: OnlineOptions { steps: 10, ..base.online.clone() },
                    ..base
                });
            }
            other => (other, other),
        };
        let tp = transfer_preset(pair)?;
        let steps = if pair == "freq-shift" { 10 } else { 8 };
        Ok(Self {
            name: name.into(),
            source: tp.source,
            target: tp.target,
            online: OnlineOptions { steps, ..base.online.clone() },
            ..base
        })
    }

    /// Pushes the top-level seed into every component. Derived seeds keep
    /// to 63 bits so the resolved file stays valid TOML.
    pub fn apply_seed(&mut self) {
        let s = self.seed;
        let sub = |k: u64| derive_seed(s, k, 0) >> 1;
        self.source.seed = sub(1);
        self.target.seed = sub(2);
        self.model.init_seed = sub(3);
        self.train.seed = sub(4);
        self.adaptation.seed = sub(5);
        self.online.seed = sub(6);
        self.offline.seed = sub(7);
        self.offline.metrics.seed = sub(8);
    }

    pub fn validate(&self) -> Result<()> {
        self.source.validate()?;
        self.target.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.adaptation.validate()?;
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed {} exceeds {}", self.seed, i64::MAX)));
        }
        if self.data.episode_stride == 0 || self.data.adapt_stride == 0 {
            return Err(Error::Config("episode strides must be positive".into()));
        }
        if self.online.horizon == 0 || self.offline.horizon == 0 || self.online.particles == 0 || self.offline.particles == 0 {
            return Err(Error::Config("evaluation horizon and particle counts must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// SHA-256 of the resolved configuration text, excluding the output
    /// directory.
    pub fn hash(&self) -> Result<String> {
        let cfg = Self { output_dir: PathBuf::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(cfg.to_toml()?.as_bytes())))
    }

    pub fn episode_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            encoder_frames: self.model.encoder_frames,
            observed: self.train.observed,
            horizon: self.train.horizon,
            stride: self.data.episode_stride,
        }
    }

    fn path(&self, file: &str) -> PathBuf {
        self.output_dir.join(file)
    }
}

#[derive(Debug, Parser)]
#[command(name = "adaptraj", version, about = "Adaptive last-layer trajectory forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; unset fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Experiment preset used as the base before the file is applied.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prints the resolved configuration and exits.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Online,
    Offline,
    K0,
    Finetune,
    K0Finetune,
    Hybrid,
}

impl From<ModeArg> for AdaptationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Online => Self::Online,
            ModeArg::Offline => Self::Offline,
            ModeArg::K0 => Self::K0,
            ModeArg::Finetune => Self::Finetune,
            ModeArg::K0Finetune => Self::K0Finetune,
            ModeArg::Hybrid => Self::Hybrid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    Online,
    Offline,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes source, target-adaptation and target-evaluation datasets.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides every scene count.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Meta-trains on the source dataset and writes a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Adapts a checkpoint to a target dataset.
    Adapt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        switch_count: Option<usize>,
    },
    /// Runs the online or offline evaluation protocol.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "online")]
        protocol: Protocol,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Evaluation dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Adaptation dataset for the offline protocol.
        #[arg(long)]
        adapt_data: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Renders evaluation reports as SVG charts.
    Plot {
        #[arg(required = true, num_args = 1..)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compares analytic and finite-difference loss gradients.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        width: Option<usize>,
    },
}

/// Loads the preset, then the file, then flag overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = toml::Value::try_from(&cfg).map_err(|e| Error::Serde(e.to_string()))?;
        let over: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let merged = merge(base, over);
        cfg = merged.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    cfg.apply_seed();
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: toml::Value, over: toml::Value) -> toml::Value {
    match (base, over) {
        (toml::Value::Table(mut b), toml::Value::Table(o)) => {
            for (k, v) in o {
                let merged = match b.remove(&k) {
                    Some(old) => merge(old, v),
                    None => v,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, o) => o,
    }
}

/// Writes via a temporary file in the target directory and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(path, format!("{text}\n").as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), line: e.line(), message: e.to_string() })
}

fn write_jsonl<T: Serialize>(path: &Path, hash: &str, rows: &[T]) -> Result<()> {
    let mut out = format!("{}\n", serde_json::json!({ "config_hash": hash }));
    for r in rows {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

fn log_event(event: &str, fields: serde_json::Value) {
    let mut obj = serde_json::json!({ "event": event });
    if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{obj}");
}

/// Sidecar describing a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub dt: f64,
    pub units: String,
    pub provenance: String,
    pub config_hash: String,
    pub records: usize,
    pub agents: usize,
    pub scenes: usize,
}

pub fn manifest_path(data: &Path) -> PathBuf {
    let mut s = data.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

pub fn write_dataset(path: &Path, ds: &TrajectoryDataset, hash: &str) -> Result<()> {
    let body = format!("# config_hash={hash}\n# scene agent frame x y\n{}", ds.to_records());
    write_atomic(path, body.as_bytes())?;
    write_json(
        &manifest_path(path),
        &DatasetManifest {
            dt: ds.dt,
            units: "m".into(),
            provenance: ds.provenance.clone(),
            config_hash: hash.into(),
            records: ds.record_count(),
            agents: ds.agent_count(),
            scenes: ds.scenes.len(),
        },
    )
}

/// Reads a dataset file using the `dt` of its manifest.
pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let manifest: DatasetManifest = read_json(&manifest_path(path))?;
    let mut ds = ingest(path, FileFormat::Whitespace, manifest.dt)?;
    ds.provenance = manifest.provenance;
    Ok(ds)
}

pub const CHECKPOINT_FORMAT: &str = "adaptraj-checkpoint/1";

/// Model parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    /// Producing configuration, without the output directory.
    pub config: ExperimentConfig,
    pub model: ModelConfig,
    pub tensors: Vec<TensorRecord>,
    /// Prior belief over the last layer, duplicated from the `prior.*` tensors.
    pub prior: BeliefRecord,
    pub best_epoch: usize,
    pub status: TrainStatus,
}

impl Checkpoint {
    pub fn new(params: &ModelParameters, cfg: &ExperimentConfig, best_epoch: usize, status: TrainStatus) -> Result<Self> {
        Ok(Self {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: cfg.hash()?,
            config: ExperimentConfig { output_dir: PathBuf::new(), ..cfg.clone() },
            model: params.config.clone(),
            tensors: params.to_records(),
            prior: BeliefRecord::from(&params.prior_belief()),
            best_epoch,
            status,
        })
    }

    pub fn params(&self) -> Result<ModelParameters> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("unsupported checkpoint format `{}`", self.format)));
        }
        ModelParameters::from_records(&self.model, &self.tensors)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefFile {
    pub config_hash: String,
    pub mode: AdaptationMode,
    pub belief: BeliefRecord,
}

/// Report written by `evaluate` and read by `plot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub config_hash: String,
    pub experiment: String,
    pub protocol: Protocol,
    pub mode: AdaptationMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub online: Option<Vec<StepSummary>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offline: Option<Vec<OfflineCheckpoint>>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, scenes } => {
            let cfg = resolve_config(&common)?;
            if common.print_config {
                return print_config(&cfg);
            }
            cmd_generate(&cfg, scenes).map(|_| ())
        }
        Command::Train { common, data, resume, epochs } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if common.print_config {
                return print_config(&cfg);
            }
            cmd_train(&cfg, data.as_deref(), resume.as_deref()).map(|_| ())
        }
        Command::Adapt { common, checkpoint, data, mode, switch_count } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(m) = mode {
                cfg.adaptation.mode = m.into();
            }
            if let Some(m) = switch_count {
                cfg.adaptation.switch_count = m;
            }
            if common.print_config {
                return print_config(&cfg);
            }
            cmd_adapt(&cfg, checkpoint.as_deref(), data.as_deref())
        }
        Command::Evaluate { common, protocol, checkpoint, data, adapt_data, mode } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(m) = mode {
                cfg.adaptation.mode = m.into();
                cfg.online.mode = m.into();
            }
            if common.print_config {
                return print_config(&cfg);
            }
            cmd_evaluate(&cfg, protocol, checkpoint.as_deref(), data.as_deref(), adapt_data.as_deref()).map(|_| ())
        }
        Command::Plot { reports, out } => cmd_plot(&reports, out.as_deref()).map(|_| ()),
        Command::Gradcheck { common, width } => {
            let mut cfg = resolve_config(&common)?;
            if let Some(w) = width {
                cfg.model = ModelConfig { init_seed: cfg.model.init_seed, ..ModelConfig::with_width(w) };
            }
            if common.print_config {
                return print_config(&cfg);
            }
            let report = cmd_gradcheck(&cfg)?;
            if report.max_rel_err >= 1e-4 {
                return Err(Error::Numerical(format!("gradient check failed: max relative error {:e}", report.max_rel_err)));
            }
            Ok(())
        }
    }
}

fn print_config(cfg: &ExperimentConfig) -> Result<()> {
    print!("{}", cfg.to_toml()?);
    Ok(())
}

/// Paths written by `generate`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedFiles {
    pub source: PathBuf,
    pub target_adapt: PathBuf,
    pub target_eval: PathBuf,
}

pub fn cmd_generate(cfg: &ExperimentConfig, scenes: Option<usize>) -> Result<GeneratedFiles> {
    let hash = cfg.hash()?;
    let n = |k: usize| scenes.unwrap_or(k);
    let src = generate(&cfg.source, n(cfg.data.train_scenes), &mut ChaCha8Rng::seed_from_u64(cfg.source.seed))?;
    let adapt = generate(&cfg.target, n(cfg.data.adapt_scenes), &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.target.seed, 0, 1)))?;
    let eval = generate(&cfg.target, n(cfg.data.eval_scenes), &mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.target.seed, 0, 2)))?;
    let files = GeneratedFiles {
        source: cfg.path("source.txt"),
        target_adapt: cfg.path("target_adapt.txt"),
        target_eval: cfg.path("target_eval.txt"),
    };
    write_dataset(&files.source, &src, &hash)?;
    write_dataset(&files.target_adapt, &adapt, &hash)?;
    write_dataset(&files.target_eval, &eval, &hash)?;
    write_atomic(&cfg.path("config.toml"), cfg.to_toml()?.as_bytes())?;
    log_event("generate", serde_json::json!({ "records": src.record_count() + adapt.record_count() + eval.record_count(), "config_hash": hash }));
    Ok(files)
}

fn load_episodes(cfg: &ExperimentConfig, path: &Path, stride: usize) -> Result<Vec<Episode>> {
    let ds = read_dataset(path)?;
    let spec = EpisodeSpec { stride, ..cfg.episode_spec() };
    let eps = episodes(&ds, &spec)?;
    if eps.is_empty() {
        return Err(Error::InvalidInput(format!("{} yields no episodes of {} frames", path.display(), spec.frames())));
    }
    Ok(eps)
}

pub fn cmd_train(cfg: &ExperimentConfig, data: Option<&Path>, resume: Option<&Path>) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("source.txt"));
    let eps = load_episodes(cfg, &data, cfg.data.episode_stride)?;
    let init = match resume {
        Some(p) => read_json::<Checkpoint>(p)?.params()?,
        None => ModelParameters::init(&cfg.model)?,
    };
    let outcome = train(&init, &eps, &cfg.train)?;
    for r in &outcome.log.records {
        log_event("epoch", serde_json::to_value(r).map_err(|e| Error::Serde(e.to_string()))?);
    }
    write_jsonl(&cfg.path("train_log.jsonl"), &hash, &outcome.log.records)?;
    let path = cfg.path("checkpoint.json");
    write_json(&path, &Checkpoint::new(&outcome.params, cfg, outcome.best_epoch, outcome.status.clone())?)?;
    if let TrainStatus::Diverged { epoch, message } = &outcome.status {
        log_event("diverged", serde_json::json!({ "epoch": epoch, "message": message }));
    }
    Ok(path)
}

fn load_checkpoint(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<ModelParameters> {
    let path = path.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("checkpoint.json"));
    read_json::<Checkpoint>(&path)?.params()
}

pub fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let hash = cfg.hash()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("target_adapt.txt"));
    let eps = load_episodes(cfg, &data, cfg.data.adapt_stride)?;
    let mode = cfg.adaptation.mode;
    let belief_out = |belief: &crate::bayes::FactoredBelief| {
        write_json(&cfg.path("belief.json"), &BeliefFile { config_hash: hash.clone(), mode, belief: BeliefRecord::from(belief) })
    };
    let trace: Vec<TraceRecord> = match mode {
        AdaptationMode::Online => {
            return Err(Error::Config("online adaptation runs per agent inside `evaluate --protocol online`".into()));
        }
        AdaptationMode::Offline | AdaptationMode::K0 => {
            let out = adapt_offline(&params, &eps, &cfg.adaptation)?;
            belief_out(&out.belief)?;
            out.trace
        }
        AdaptationMode::Finetune | AdaptationMode::K0Finetune => {
            let out = finetune(&params, &eps, &cfg.adaptation, &cfg.train)?;
            write_json(&cfg.path("checkpoint_adapted.json"), &Checkpoint::new(&out.params, cfg, 0, out.status)?)?;
            belief_out(&out.params.prior_belief())?;
            out.trace
        }
        AdaptationMode::Hybrid => {
            let out = adapt_hybrid(&params, &eps, &cfg.adaptation, &cfg.train)?;
            write_json(&cfg.path("checkpoint_adapted.json"), &Checkpoint::new(&out.params, cfg, 0, out.status)?)?;
            belief_out(&out.belief)?;
            out.trace
        }
    };
    write_jsonl(&cfg.path("adapt_trace.jsonl"), &hash, &trace)?;
    log_event("adapt", serde_json::json!({ "updates": trace.len(), "exact": trace.iter().filter(|r| r.is_exact()).count() }));
    Ok(())
}

fn csv_header(hash: &str, columns: &str) -> String {
    format!("# config_hash={hash}\n{columns}\n")
}

pub fn cmd_evaluate(cfg: &ExperimentConfig, protocol: Protocol, checkpoint: Option<&Path>, data: Option<&Path>, adapt_data: Option<&Path>) -> Result<PathBuf> {
    let hash = cfg.hash()?;
    let params = load_checkpoint(cfg, checkpoint)?;
    let data = data.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("target_eval.txt"));
    let ds = read_dataset(&data)?;
    let mode = match protocol {
        Protocol::Online => cfg.online.mode,
        Protocol::Offline => cfg.adaptation.mode,
    };
    let mut report = EvaluationReport {
        config_hash: hash.clone(),
        experiment: cfg.name.clone(),
        protocol,
        mode,
        online: None,
        offline: None,
    };
    let stem = format!("{}_{}", protocol_name(protocol), mode_name(mode));
    match protocol {
        Protocol::Online => {
            let need = cfg.online.steps + cfg.online.horizon;
            let windows = first_window_per_agent(&extract_windows(&ds, cfg.data.history, need), need);
            if windows.is_empty() {
                return Err(Error::InvalidInput(format!("{} has no agent with {need} future frames", data.display())));
            }
            let results = online_protocol(&params, &params.prior_belief(), &windows, &cfg.online)?;
            let summary = summarize_online(&results, cfg.offline.metrics.bootstrap, cfg.online.seed)?;
            let mut csv = csv_header(&hash, "step,median_ade,ade_lo,ade_hi,mean_ade,mean_fde,median_fde,mean_nll");
            for s in &summary {
                csv.push_str(&format!("{},{},{},{},{},{},{},{}\n", s.step, s.median_ade, s.lo, s.hi, s.mean_ade, s.mean_fde, s.median_fde, s.mean_nll));
            }
            write_atomic(&cfg.path(&format!("{stem}_curve.csv")), csv.as_bytes())?;
            report.online = Some(summary);
        }
        Protocol::Offline => {
            let adapt_path = adapt_data.map(Path::to_path_buf).unwrap_or_else(|| cfg.path("target_adapt.txt"));
            let adapt = load_episodes(cfg, &adapt_path, cfg.data.adapt_stride)?;
            let history = cfg.model.encoder_frames + cfg.offline.observed - 1;
            let windows = first_window_per_agent(&extract_windows(&ds, history, cfg.offline.horizon), cfg.offline.horizon);
            if windows.is_empty() {
                return Err(Error::InvalidInput(format!("{} has no full evaluation window", data.display())));
            }
            let curve = offline_curve(&params, &adapt, &windows, &cfg.adaptation, &cfg.train, &cfg.offline)?;
            let mut csv = csv_header(&hash, "updates,ade,ade_lo,ade_hi,fde,fde_lo,fde_hi,nll,nll_lo,nll_hi,ece,max_deviation");
            for c in &curve {
                let r = &c.report;
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                    c.updates, r.ade.value, r.ade.lo, r.ade.hi, r.fde.value, r.fde.lo, r.fde.hi, r.nll.value, r.nll.lo, r.nll.hi, r.ece, r.max_deviation
                ));
                let mut cal = csv_header(&hash, "level,coverage");
                for (l, c) in &r.calibration_curve {
                    cal.push_str(&format!("{l},{c}\n"));
                }
                write_atomic(&cfg.path(&format!("{stem}_calibration_{}.csv", c.updates)), cal.as_bytes())?;
            }
            write_atomic(&cfg.path(&format!("{stem}_curve.csv")), csv.as_bytes())?;
            report.offline = Some(curve);
        }
    }
    let path = cfg.path(&format!("{stem}_report.json"));
    write_json(&path, &report)?;
    Ok(path)
}

fn protocol_name(p: Protocol) -> &'static str {
    match p {
        Protocol::Online => "online",
        Protocol::Offline => "offline",
    }
}

fn mode_name(m: AdaptationMode) -> String {
    serde_json::to_value(m).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Writes one chart per metric, with a series per report.
pub fn cmd_plot(reports: &[PathBuf], out: Option<&Path>) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Config("plot needs at least one report".into()));
    }
    let loaded: Vec<EvaluationReport> = reports.iter().map(|p| read_json(p)).collect::<Result<_>>()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| reports[0].parent().map(Path::to_path_buf).unwrap_or_default());
    let hash = loaded.iter().map(|r| r.config_hash.as_str()).collect::<Vec<_>>().join(",");
    let label = |r: &EvaluationReport| mode_name(r.mode);
    let mut charts: Vec<(String, Chart)> = Vec::new();

    let online: Vec<&EvaluationReport> = loaded.iter().filter(|r| r.online.is_some()).collect();
    if !online.is_empty() {
        let mk = |title: &str, y: &str, f: &dyn Fn(&StepSummary) -> f64, band: bool| Chart {
            title: title.into(),
            x_label: "observed steps".into(),
            y_label: y.into(),
            diagonal: false,
            config_hash: hash.clone(),
            series: online
                .iter()
                .map(|r| {
                    let s = r.online.as_ref().expect("filtered");
                    Series {
                        name: label(r),
                        points: s.iter().map(|x| (x.step as f64, f(x))).collect(),
                        band: band.then(|| s.iter().map(|x| (x.step as f64, x.lo, x.hi)).collect()),
                    }
                })
                .collect(),
        };
        charts.push(("online_ade.svg".into(), mk("Median ADE vs observed steps", "ADE (m)", &|x| x.median_ade, true)));
        charts.push(("online_fde.svg".into(), mk("Mean FDE vs observed steps", "FDE (m)", &|x| x.mean_fde, false)));
        charts.push(("online_nll.svg".into(), mk("Mean NLL vs observed steps", "NLL (nats)", &|x| x.mean_nll, false)));
    }

    let offline: Vec<&EvaluationReport> = loaded.iter().filter(|r| r.offline.is_some()).collect();
    if !offline.is_empty() {
        type Pick = dyn Fn(&OfflineCheckpoint) -> (f64, Option<(f64, f64)>);
        let mk = |title: &str, y: &str, f: &Pick| Chart {
            title: title.into(),
            x_label: "updates".into(),
            y_label: y.into(),
            diagonal: false,
            config_hash: hash.clone(),
            series: offline
                .iter()
                .map(|r| {
                    let c = r.offline.as_ref().expect("filtered");
                    let vals: Vec<_> = c.iter().map(|x| (x.updates as f64, f(x))).collect();
                    let band: Vec<_> = vals.iter().filter_map(|(u, (_, b))| b.map(|(lo, hi)| (*u, lo, hi))).collect();
                    Series {
                        name: label(r),
                        points: vals.iter().map(|(u, (v, _))| (*u, *v)).collect(),
                        band: (!band.is_empty()).then_some(band),
                    }
                })
                .collect(),
        };
        charts.push(("offline_nll.svg".into(), mk("NLL vs updates", "NLL (nats)", &|c| (c.report.nll.value, Some((c.report.nll.lo, c.report.nll.hi))))));
        charts.push(("offline_ade.svg".into(), mk("ADE vs updates", "ADE (m)", &|c| (c.report.ade.value, Some((c.report.ade.lo, c.report.ade.hi))))));
        charts.push(("offline_ece.svg".into(), mk("ECE vs updates", "ECE", &|c| (c.report.ece, None))));
        let mut series = Vec::new();
        for r in &offline {
            for c in r.offline.as_ref().expect("filtered") {
                series.push(Series {
                    name: format!("{} @{}", label(r), c.updates),
                    points: c.report.calibration_curve.clone(),
                    band: None,
                });
            }
        }
        charts.push((
            "offline_calibration.svg".into(),
            Chart {
                title: "Calibration".into(),
                x_label: "nominal level".into(),
                y_label: "empirical coverage".into(),
                series,
                diagonal: true,
                config_hash: hash.clone(),
            },
        ));
    }

    let mut written = Vec::new();
    for (name, chart) in charts {
        let path = dir.join(name);
        write_atomic(&path, chart.to_svg().as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

/// Gradient check on one short source episode.
pub fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<GradCheckReport> {
    let hash = cfg.hash()?;
    let params = ModelParameters::init(&cfg.model)?;
    let spec = EpisodeSpec { encoder_frames: cfg.model.encoder_frames, observed: 3, horizon: 3, stride: usize::MAX / 2 };
    let ds = generate(&cfg.source, 1, &mut ChaCha8Rng::seed_from_u64(cfg.source.seed))?;
    let ep = episodes(&ds, &spec)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::InvalidInput("source domain too short for a gradient-check episode".into()))?;
    let ep = Episode { anchors: vec![3], ..ep };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let noises = draw_noise(&params.config, &ep, 3, 4, &mut rng);
    let report = gradient_check(&params, &ep, &LossOptions::from(&cfg.train), &noises)?;
    write_json(&cfg.path("gradcheck.json"), &serde_json::json!({ "config_hash": hash, "report": report }))?;
    log_event("gradcheck", serde_json::json!({ "max_rel_err": report.max_rel_err }));
    Ok(report)
}
