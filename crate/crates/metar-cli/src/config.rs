//! Flat run configuration: one namespace of `key = value` pairs shared by
//! every subcommand, loadable from a file with command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use metar::data::{BackgroundMode, Split, SynthConfig};
use metar::episode::SamplerConfig;
use metar::eval::{Ablation, EvalConfig, ReportFormat};
use metar::grad::GradMode;
use metar::model::Hyperparams;
use metar::train::{TrainConfig, TransEConfig};
use metar::{Error, Result};

/// Where initial entity embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    Random,
    Pretrained,
}

impl std::fmt::Display for InitKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InitKind::Random => "random",
            InitKind::Pretrained => "pretrained",
        })
    }
}

impl std::str::FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(InitKind::Random),
            "pretrained" => Ok(InitKind::Pretrained),
            other => Err(Error::InvalidConfig(format!(
                "unknown init {other:?} (expected random|pretrained)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub background: BackgroundMode,
    pub seed: u64,
    pub workers: usize,

    pub dim: usize,
    pub hidden_sizes: Vec<usize>,
    pub gamma: f64,
    pub beta: f64,
    pub leaky_slope: f64,

    pub k: usize,
    pub n_query_pos: usize,
    pub n_neg_per_pos: usize,

    pub batch_tasks: usize,
    pub lr: f64,
    pub eval_every: u64,
    pub patience: usize,
    pub max_iters: u64,
    pub grad_mode: GradMode,
    pub ablation: Ablation,
    pub init: InitKind,

    pub n_entities: usize,
    pub n_train_rel: usize,
    pub n_dev_rel: usize,
    pub n_test_rel: usize,
    pub triples_per_rel: usize,
    pub noise_sigma: f64,
    pub candidate_pool: usize,

    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_margin: f64,

    pub split: Split,
    pub checkpoint_path: PathBuf,
    pub pretrain_path: PathBuf,
    pub log_path: PathBuf,
    /// Empty means stdout.
    pub report_path: Option<PathBuf>,
    pub report_format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os("METAR_DATA_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("."));
        Self {
            data_dir,
            background: BackgroundMode::InTrain,
            seed: 42,
            workers: 1,
            dim: 100,
            hidden_sizes: vec![500, 200],
            gamma: 1.0,
            beta: 1.0,
            leaky_slope: 0.01,
            k: 1,
            n_query_pos: 3,
            n_neg_per_pos: 1,
            batch_tasks: 64,
            lr: 0.001,
            eval_every: 1000,
            patience: 30,
            max_iters: 100_000,
            grad_mode: GradMode::FullSecondOrder,
            ablation: Ablation::Standard,
            init: InitKind::Random,
            n_entities: 200,
            n_train_rel: 20,
            n_dev_rel: 3,
            n_test_rel: 5,
            triples_per_rel: 30,
            noise_sigma: 0.0,
            candidate_pool: 50,
            pretrain_epochs: 50,
            pretrain_lr: 0.01,
            pretrain_margin: 1.0,
            split: Split::Test,
            checkpoint_path: PathBuf::from("metar.ckpt"),
            pretrain_path: PathBuf::from("transe.ckpt"),
            log_path: PathBuf::from("train_log.json"),
            report_path: None,
            report_format: ReportFormat::Text,
        }
    }
}

fn parse<T>(key: &str, value: &str) -> Result<T>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("invalid value {value:?} for {key}: {e}")))
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|part| parse(key, part.trim())).collect()
}

impl RunConfig {
    /// Apply one key. Unknown keys are rejected, malformed values reported.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "background" => self.background = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "workers" => self.workers = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "hidden_sizes" => self.hidden_sizes = parse_sizes(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "leaky_slope" => self.leaky_slope = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "n_query_pos" => self.n_query_pos = parse(key, value)?,
            "n_neg_per_pos" => self.n_neg_per_pos = parse(key, value)?,
            "batch_tasks" => self.batch_tasks = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "grad_mode" => self.grad_mode = parse(key, value)?,
            "ablation" => self.ablation = parse(key, value)?,
            "init" => self.init = parse(key, value)?,
            "n_entities" => self.n_entities = parse(key, value)?,
            "n_train_rel" => self.n_train_rel = parse(key, value)?,
            "n_dev_rel" => self.n_dev_rel = parse(key, value)?,
            "n_test_rel" => self.n_test_rel = parse(key, value)?,
            "triples_per_rel" => self.triples_per_rel = parse(key, value)?,
            "noise_sigma" => self.noise_sigma = parse(key, value)?,
            "candidate_pool" => self.candidate_pool = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, value)?,
            "pretrain_margin" => self.pretrain_margin = parse(key, value)?,
            "split" => self.split = parse(key, value)?,
            "checkpoint_path" => self.checkpoint_path = PathBuf::from(value),
            "pretrain_path" => self.pretrain_path = PathBuf::from(value),
            "log_path" => self.log_path = PathBuf::from(value),
            "report_path" => {
                self.report_path = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "report_format" => self.report_format = parse(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown config key {other:?} (run `metar help` for the key list)"
                )));
            }
        }
        Ok(())
    }

    /// Load `key = value` lines; `#` starts a comment, blank lines ignored.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                Error::MissingFile(path.into())
            } else {
                Error::Io { path: path.into(), source }
            }
        })?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::MalformedLine {
                path: path.into(),
                line: i + 1,
                reason: "expected `key = value`".into(),
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key in a fixed order, as reloadable `key = value` lines.
    pub fn canonical(&self) -> String {
        let sizes =
            self.hidden_sizes.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let report_path =
            self.report_path.as_deref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("ablation", self.ablation.to_string());
        kv("background", self.background.to_string());
        kv("batch_tasks", self.batch_tasks.to_string());
        kv("beta", self.beta.to_string());
        kv("candidate_pool", self.candidate_pool.to_string());
        kv("checkpoint_path", self.checkpoint_path.display().to_string());
        kv("data_dir", self.data_dir.display().to_string());
        kv("dim", self.dim.to_string());
        kv("eval_every", self.eval_every.to_string());
        kv("gamma", self.gamma.to_string());
        kv("grad_mode", self.grad_mode.to_string());
        kv("hidden_sizes", sizes);
        kv("init", self.init.to_string());
        kv("k", self.k.to_string());
        kv("leaky_slope", self.leaky_slope.to_string());
        kv("log_path", self.log_path.display().to_string());
        kv("lr", self.lr.to_string());
        kv("max_iters", self.max_iters.to_string());
        kv("n_dev_rel", self.n_dev_rel.to_string());
        kv("n_entities", self.n_entities.to_string());
        kv("n_neg_per_pos", self.n_neg_per_pos.to_string());
        kv("n_query_pos", self.n_query_pos.to_string());
        kv("n_test_rel", self.n_test_rel.to_string());
        kv("n_train_rel", self.n_train_rel.to_string());
        kv("noise_sigma", self.noise_sigma.to_string());
        kv("patience", self.patience.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("pretrain_lr", self.pretrain_lr.to_string());
        kv("pretrain_margin", self.pretrain_margin.to_string());
        kv("pretrain_path", self.pretrain_path.display().to_string());
        kv("report_format", self.report_format.to_string());
        kv("report_path", report_path);
        kv("seed", self.seed.to_string());
        kv("split", self.split.name().to_string());
        kv("triples_per_rel", self.triples_per_rel.to_string());
        kv("workers", self.workers.to_string());
        out
    }

    /// Canonical text of the keys that shape the learned model; path,
    /// reporting, and split keys are excluded so relocating files or
    /// evaluating another split does not change the stored fingerprint.
    pub fn fingerprint_text(&self) -> String {
        let excluded = [
            "data_dir",
            "checkpoint_path",
            "pretrain_path",
            "log_path",
            "report_path",
            "report_format",
            "split",
        ];
        self.canonical()
            .lines()
            .filter(|line| {
                let key = line.split('=').next().unwrap_or("").trim();
                !excluded.contains(&key)
            })
            .map(|line| format!("{line}\n"))
            .collect()
    }

    pub fn hyperparams(&self) -> Hyperparams {
        Hyperparams {
            dim: self.dim,
            gamma: self.gamma,
            beta: self.beta,
            leaky_slope: self.leaky_slope,
            hidden_sizes: self.hidden_sizes.clone(),
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            k: self.k,
            n_query_pos: self.n_query_pos,
            n_neg_per_pos: self.n_neg_per_pos,
            seed: self.seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            batch_tasks: self.batch_tasks,
            lr: self.lr,
            eval_every: self.eval_every,
            patience: self.patience,
            max_iters: self.max_iters,
            grad_mode: self.grad_mode,
            ablation: self.ablation,
            seed: self.seed,
            workers: self.workers,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            n_entities: self.n_entities,
            dim: self.dim,
            n_train_rel: self.n_train_rel,
            n_dev_rel: self.n_dev_rel,
            n_test_rel: self.n_test_rel,
            triples_per_rel: self.triples_per_rel,
            noise_sigma: self.noise_sigma,
            candidate_pool: self.candidate_pool,
            seed: self.seed,
        }
    }

    pub fn transe(&self) -> TransEConfig {
        TransEConfig {
            dim: self.dim,
            epochs: self.pretrain_epochs,
            lr: self.pretrain_lr,
            margin: self.pretrain_margin,
            seed: self.seed,
        }
    }

    pub fn eval(&self, mode: Ablation) -> EvalConfig {
        EvalConfig { split: self.split, k: self.k, mode, seed: self.seed }
    }
}
