//! Command-line front end: argument parsing, the key=value configuration
//! file, and one function per command. Every failure maps to an exit code.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::op_suite;
use crate::data::{
    read_csv, read_raw_csv, reshape, split_groups, unreshape, write_csv, write_raw_csv, DataError, NormStats,
    RawDataset, Split, SplitSpec, Window, WindowSpec,
};
use crate::dynamics::{fhn_generate, lorenz_generate, DynamicsError, FhnConfig, Lorenz63Config};
use crate::evaluation::{
    aggregate, attention_record, evaluate_model, evaluate_persistence, importance, predict_all, prediction_rows,
    write_attention_csv, write_error_csv, write_importance_csv, write_predictions_csv, EvalError, ACCURATE_BELOW,
};
use crate::model::{load_model, IstftModel, ModelConfig, ModelError, ModelFile};
use crate::training::{train, LossKind, TrainConfig, TrainError};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_GRADCHECK: i32 = 5;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ISTFT_THREADS";

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numeric(String),
    GradCheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::GradCheck(_) => EXIT_GRADCHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numerical failure: {m}"),
            CliError::GradCheck(m) => write!(f, "gradient check failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DynamicsError> for CliError {
    fn from(e: DynamicsError) -> Self {
        match e {
            DynamicsError::Config(_) => CliError::Config(e.to_string()),
            DynamicsError::Diverged { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => CliError::Config(e.to_string()),
            ModelError::Forward(_) | ModelError::Backward(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Diverged { .. } => CliError::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::NoWindows | TrainError::Log(_) => CliError::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

#[derive(Debug, Parser)]
#[command(name = "istft", version, about = "Multi-output temporal fusion transformer for parametric dynamical systems")]
pub struct Cli {
    #[command(flatten)]
    pub opts: Options,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every command. Hyperparameter flags override the
/// configuration file; commands ignore the ones they do not use.
#[derive(Debug, Default, Clone, Args)]
pub struct Options {
    /// key=value configuration file with [model], [train], [data] and [system] sections.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file of the command.
    #[arg(long, global = true, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "mae|mse")]
    pub loss: Option<String>,
    #[arg(long = "n-k", global = true)]
    pub n_k: Option<usize>,
    #[arg(long = "n-tau", global = true)]
    pub n_tau: Option<usize>,
    #[arg(long = "n-omega", global = true)]
    pub n_omega: Option<usize>,
    #[arg(long = "d-model", global = true)]
    pub d_model: Option<usize>,
    #[arg(long, global = true)]
    pub heads: Option<usize>,
    #[arg(long, global = true)]
    pub dropout: Option<f64>,
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub batch: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patience: Option<usize>,
    /// Maximum global gradient norm.
    #[arg(long, global = true)]
    pub clip: Option<f64>,
    /// Number of trajectories to generate.
    #[arg(long = "n-p", global = true)]
    pub n_p: Option<usize>,
    /// Saved time steps per trajectory.
    #[arg(long = "n-T", global = true)]
    pub n_t_total: Option<usize>,
    /// Any configuration key, e.g. `--set system.rho=28`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum System {
    Lorenz63,
    Fhn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Part {
    Train,
    Validate,
    Test,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a benchmark system and write the reshaped CSV.
    Generate {
        #[arg(value_enum)]
        system: System,
        /// Write the one-row-per-time-step layout instead.
        #[arg(long)]
        raw: bool,
    },
    /// Convert a one-row-per-time-step CSV into the reshaped layout.
    Reshape {
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
    },
    /// Split, normalize, window and train; writes the model file.
    Train {
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Loss log (`epoch,train_loss,val_loss,seconds`); defaults to `<out>.log.csv`.
        #[arg(long, value_name = "PATH")]
        log: Option<PathBuf>,
    },
    /// Forecasts in original units: `window,group_id,time,output_id,y_pred,y_true`.
    Predict {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
    },
    /// Error measure per window and output: `group_id,output_id,mode,epsilon`.
    Evaluate {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        /// Evaluate the persistence forecast instead of the model.
        #[arg(long)]
        persistence: bool,
    },
    /// Head-averaged attention matrix of one window.
    ExportAttention {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Group to take the window from; defaults to the first test group.
        #[arg(long)]
        group: Option<u64>,
        /// 1-based window index within the group.
        #[arg(long, default_value_t = 1)]
        window: usize,
        /// Keep only the leading N rows and columns.
        #[arg(long)]
        crop: Option<usize>,
    },
    /// Variable-selection weights: `group,variable,weight`.
    ExportImportance {
        #[arg(long, value_name = "PATH")]
        model: PathBuf,
        #[arg(long, value_name = "PATH")]
        data: PathBuf,
        /// Restrict to one group (test case); defaults to every window of the part.
        #[arg(long)]
        group: Option<u64>,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
    },
    /// Finite-difference checks of every graph operation and of a full model.
    Gradcheck {
        /// Check this model instead of a small random one.
        #[arg(long, value_name = "PATH")]
        model: Option<PathBuf>,
        /// Window source for `--model`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        op_tol: f64,
        #[arg(long, default_value_t = 1e-4)]
        model_tol: f64,
    },
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "model.d_model",
    "model.heads",
    "model.dropout",
    "train.loss",
    "train.lr",
    "train.batch",
    "train.epochs",
    "train.patience",
    "train.clip",
    "data.n_k",
    "data.n_tau",
    "data.n_omega",
    "data.train",
    "data.validate",
    "data.test",
    "data.train_ids",
    "data.validate_ids",
    "data.test_ids",
    "system.n_p",
    "system.n_T",
    "system.dt",
    "system.sigma",
    "system.rho",
    "system.beta",
    "system.n_x",
    "system.substeps",
    "system.b",
    "system.gamma",
    "system.eps_min",
    "system.eps_max",
    "system.c_min",
    "system.c_max",
];

/// Flat `section.key -> value` settings from the file, then the flags.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Settings(pub BTreeMap<String, String>);

impl Settings {
    /// Parses `[section]` headers, `key = value` lines and `#` comments.
    pub fn parse(text: &str) -> Result<Settings, CliError> {
        let mut out = Settings::default();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1)))?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            out.insert(&key, v.trim())?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KNOWN_KEYS.contains(&key) {
            return Err(CliError::Config(format!("unknown setting `{key}`")));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// File contents (if any) overridden by `--set` pairs and dedicated flags.
    pub fn resolve(opts: &Options) -> Result<Settings, CliError> {
        let mut s = match &opts.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                Settings::parse(&text)?
            }
            None => Settings::default(),
        };
        for pair in &opts.set {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects SECTION.KEY=VALUE, got `{pair}`")))?;
            s.insert(k.trim(), v.trim())?;
        }
        let flags: [(&str, Option<String>); 15] = [
            ("seed", opts.seed.map(|v| v.to_string())),
            ("train.loss", opts.loss.clone()),
            ("data.n_k", opts.n_k.map(|v| v.to_string())),
            ("data.n_tau", opts.n_tau.map(|v| v.to_string())),
            ("data.n_omega", opts.n_omega.map(|v| v.to_string())),
            ("model.d_model", opts.d_model.map(|v| v.to_string())),
            ("model.heads", opts.heads.map(|v| v.to_string())),
            ("model.dropout", opts.dropout.map(|v| v.to_string())),
            ("train.lr", opts.lr.map(|v| v.to_string())),
            ("train.batch", opts.batch.map(|v| v.to_string())),
            ("train.epochs", opts.epochs.map(|v| v.to_string())),
            ("train.patience", opts.patience.map(|v| v.to_string())),
            ("train.clip", opts.clip.map(|v| v.to_string())),
            ("system.n_p", opts.n_p.map(|v| v.to_string())),
            ("system.n_T", opts.n_t_total.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                s.insert(k, &v)?;
            }
        }
        Ok(s)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::Config(format!("`{key}` = `{v}`: {e}")))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn ids(&self, key: &str) -> Result<Option<Vec<u64>>, CliError> {
        self.0
            .get(key)
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| {
                        s.trim()
                            .parse::<u64>()
                            .map_err(|e| CliError::Config(format!("`{key}`: `{s}`: {e}")))
                    })
                    .collect()
            })
            .transpose()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get_or("seed", 0)
    }

    pub fn window_spec(&self) -> Result<WindowSpec, CliError> {
        Ok(WindowSpec {
            n_k: self.get_or("data.n_k", 1)?,
            n_tau: self.get_or("data.n_tau", 15)?,
            n_omega: self.get_or("data.n_omega", 1)?,
        })
    }

    /// Explicit id lists win over counts; by default 10 % of the groups (rounded)
    /// each go to validation and test and the rest to training.
    pub fn split_spec(&self, n_groups: usize) -> Result<SplitSpec, CliError> {
        let lists = [self.ids("data.train_ids")?, self.ids("data.validate_ids")?, self.ids("data.test_ids")?];
        if lists.iter().any(Option::is_some) {
            let [train, validate, test] = lists.map(Option::unwrap_or_default);
            return Ok(SplitSpec::Lists { train, validate, test });
        }
        let tenth = ((n_groups as f64) * 0.1).round() as usize;
        let validate = self.get_or("data.validate", tenth)?;
        let test = self.get_or("data.test", tenth)?;
        let train = self.get_or("data.train", n_groups.saturating_sub(validate + test))?;
        Ok(SplitSpec::Counts { train, validate, test })
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let d = TrainConfig::default();
        let loss: String = self.get_or("train.loss", d.loss.to_string())?;
        let cfg = TrainConfig {
            loss: LossKind::from_str(&loss).map_err(CliError::Config)?,
            learning_rate: self.get_or("train.lr", d.learning_rate)?,
            batch_size: self.get_or("train.batch", d.batch_size)?,
            max_epochs: self.get_or("train.epochs", d.max_epochs)?,
            patience: self.get("train.patience")?,
            max_grad_norm: self.get_or("train.clip", d.max_grad_norm)?,
            seed: self.seed()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model_config(&self, data: &RawDataset, spec: &WindowSpec) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            d_model: self.get_or("model.d_model", 32)?,
            n_heads: self.get_or("model.heads", 4)?,
            dropout: self.get_or("model.dropout", 0.1)?,
            n_outputs: data.n_outputs,
            n_inputs: data.n_inputs,
            n_params: data.n_params,
            n_k: spec.n_k,
            n_tau: spec.n_tau,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn lorenz_config(&self) -> Result<Lorenz63Config, CliError> {
        let d = Lorenz63Config::default();
        Ok(Lorenz63Config {
            sigma: self.get_or("system.sigma", d.sigma)?,
            rho: self.get_or("system.rho", d.rho)?,
            beta: self.get_or("system.beta", d.beta)?,
            dt: self.get_or("system.dt", d.dt)?,
            n_steps: self.get_or("system.n_T", d.n_steps)?,
            n_groups: self.get_or("system.n_p", d.n_groups)?,
            seed: self.seed()?,
        })
    }

    pub fn fhn_config(&self) -> Result<FhnConfig, CliError> {
        let d = FhnConfig::default();
        Ok(FhnConfig {
            eps_range: (self.get_or("system.eps_min", d.eps_range.0)?, self.get_or("system.eps_max", d.eps_range.1)?),
            c_range: (self.get_or("system.c_min", d.c_range.0)?, self.get_or("system.c_max", d.c_range.1)?),
            b: self.get_or("system.b", d.b)?,
            gamma: self.get_or("system.gamma", d.gamma)?,
            n_x: self.get_or("system.n_x", d.n_x)?,
            n_steps: self.get_or("system.n_T", d.n_steps)?,
            dt: self.get_or("system.dt", d.dt)?,
            substeps: self.get_or("system.substeps", d.substeps)?,
            n_groups: self.get_or("system.n_p", d.n_groups)?,
            seed: self.seed()?,
        })
    }
}

/// Applies `ISTFT_THREADS` to the global worker pool.
pub fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A second initialization in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn required_out(opts: &Options) -> Result<&Path, CliError> {
    opts.out
        .as_deref()
        .ok_or_else(|| CliError::Config("--out PATH is required for this command".into()))
}

fn load_data(path: &Path) -> Result<RawDataset, CliError> {
    Ok(unreshape(&read_csv(path)?)?)
}

fn part_ids(split: &Option<Split>, data: &RawDataset, part: Part) -> Result<Vec<u64>, CliError> {
    let ids = match (split, part) {
        (_, Part::All) | (None, _) => data.group_ids(),
        (Some(s), Part::Train) => s.train.clone(),
        (Some(s), Part::Validate) => s.validate.clone(),
        (Some(s), Part::Test) => s.test.clone(),
    };
    if ids.is_empty() {
        return Err(CliError::Data(format!("the {} partition is empty", format!("{part:?}").to_lowercase())));
    }
    Ok(ids)
}

/// Windows of the stored configuration over the chosen groups, normalized
/// with the stored statistics.
fn model_windows(file: &ModelFile, settings: &Settings, data: &RawDataset, ids: &[u64]) -> Result<Vec<Window>, CliError> {
    let c = &file.config;
    if (data.n_inputs, data.n_params, data.n_outputs) != (c.n_inputs, c.n_params, c.n_outputs) {
        return Err(CliError::Data(format!(
            "data has n_I={}, p={}, n_o={} but the model expects {}, {}, {}",
            data.n_inputs, data.n_params, data.n_outputs, c.n_inputs, c.n_params, c.n_outputs
        )));
    }
    let stored: usize = file.settings.get("data.n_omega").and_then(|v| v.parse().ok()).unwrap_or(1);
    let spec = WindowSpec {
        n_k: c.n_k,
        n_tau: c.n_tau,
        n_omega: settings.get_or("data.n_omega", stored)?,
    };
    let subset = file.norm.normalize(&data.select(ids)?)?;
    Ok(spec.windows(&subset)?)
}

pub fn cmd_generate(opts: &Options, system: System, raw: bool) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let data = match system {
        System::Lorenz63 => lorenz_generate(&s.lorenz_config()?)?,
        System::Fhn => fhn_generate(&s.fhn_config()?)?,
    };
    if raw {
        write_raw_csv(&data, out)?;
    } else {
        write_csv(&reshape(&data)?, out)?;
    }
    println!(
        "wrote {} groups x {} steps x {} outputs to {}",
        data.groups.len(),
        data.n_steps(),
        data.n_outputs,
        out.display()
    );
    Ok(())
}

pub fn cmd_reshape(opts: &Options, input: &Path) -> Result<(), CliError> {
    let out = required_out(opts)?;
    let d = reshape(&read_raw_csv(input)?)?;
    write_csv(&d, out)?;
    println!("wrote {} rows to {}", d.rows.len(), out.display());
    Ok(())
}

pub fn cmd_train(opts: &Options, data_path: &Path, log: Option<&Path>) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let seed = s.seed()?;
    let tc = s.train_config()?;
    let spec = s.window_spec()?;
    let data = load_data(data_path)?;
    let mcfg = s.model_config(&data, &spec)?;

    let split = split_groups(&data.group_ids(), &s.split_spec(data.groups.len())?, seed)?;
    if split.train.is_empty() {
        return Err(CliError::Config("the training partition is empty".into()));
    }
    let norm = NormStats::fit(&data.select(&split.train)?)?;
    let windows = |ids: &[u64]| -> Result<Vec<Window>, CliError> {
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        Ok(spec.windows(&norm.normalize(&data.select(ids)?)?)?)
    };
    let (train_w, val_w) = (windows(&split.train)?, windows(&split.validate)?);

    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".log.csv");
        PathBuf::from(p)
    });
    let file = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut writer = BufWriter::new(file);
    let model = IstftModel::new(mcfg, seed)?;
    let outcome = train(model, &train_w, &val_w, &tc, Some(&mut writer))?;
    writer.flush().map_err(|e| io_err(&log_path, e))?;

    let mut mf = ModelFile::new(&outcome.model, norm);
    mf.split = Some(split);
    mf.settings = s.0.clone();
    mf.settings.insert("data.n_omega".into(), spec.n_omega.to_string());
    mf.settings.insert("train.best_epoch".into(), outcome.best_epoch.to_string());
    mf.write(out)?;
    let last = outcome.reports.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} windows; final train loss {}, best {} at epoch {}; model {} log {}",
        outcome.reports.len(),
        train_w.len(),
        last.train_loss,
        outcome.best_loss,
        outcome.best_epoch,
        out.display(),
        log_path.display()
    );
    Ok(())
}

pub fn cmd_predict(opts: &Options, model_path: &Path, data_path: &Path, part: Part) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let (model, file) = load_model(model_path)?;
    let data = load_data(data_path)?;
    let windows = model_windows(&file, &s, &data, &part_ids(&file.split, &data, part)?)?;
    let batches = predict_all(&model, &windows)?;
    let rows = prediction_rows(&windows, &batches, &file.norm);
    if rows.iter().any(|r| !r.y_pred.is_finite()) {
        return Err(CliError::Numeric("non-finite prediction".into()));
    }
    write_predictions_csv(&rows, out)?;
    println!("wrote {} predictions for {} windows to {}", rows.len(), windows.len(), out.display());
    Ok(())
}

pub fn cmd_evaluate(
    opts: &Options,
    model_path: &Path,
    data_path: &Path,
    part: Part,
    persistence: bool,
) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let (model, file) = load_model(model_path)?;
    let data = load_data(data_path)?;
    let windows = model_windows(&file, &s, &data, &part_ids(&file.split, &data, part)?)?;
    let records = if persistence {
        evaluate_persistence(&windows, &file.norm)?
    } else {
        evaluate_model(&model, &windows, &file.norm)?
    };
    write_error_csv(&records, out)?;
    let summary = aggregate(&records, ACCURATE_BELOW)?;
    for k in 0..summary.mean.len() {
        println!(
            "output {}: mean epsilon {:.6}, {}/{} cases below {ACCURATE_BELOW}",
            k + 1,
            summary.mean[k],
            summary.below[k],
            summary.n_cases
        );
    }
    Ok(())
}

pub fn cmd_export_attention(
    opts: &Options,
    model_path: &Path,
    data_path: &Path,
    group: Option<u64>,
    window: usize,
    crop: Option<usize>,
) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let (model, file) = load_model(model_path)?;
    let data = load_data(data_path)?;
    let gid = match group {
        Some(g) => g,
        None => part_ids(&file.split, &data, Part::Test)?[0],
    };
    let windows = model_windows(&file, &s, &data, &[gid])?;
    let w = window
        .checked_sub(1)
        .and_then(|i| windows.get(i))
        .ok_or_else(|| CliError::Config(format!("group {gid} has {} windows, asked for {window}", windows.len())))?;
    let rec = attention_record(&model, w, crop)?;
    write_attention_csv(&rec, out)?;
    println!("wrote {0}x{0} attention of group {gid} to {1}", rec.labels.len(), out.display());
    Ok(())
}

pub fn cmd_export_importance(
    opts: &Options,
    model_path: &Path,
    data_path: &Path,
    group: Option<u64>,
    part: Part,
) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let out = required_out(opts)?;
    let (model, file) = load_model(model_path)?;
    let data = load_data(data_path)?;
    let ids = match group {
        Some(g) => vec![g],
        None => part_ids(&file.split, &data, part)?,
    };
    let rec = importance(&model, &model_windows(&file, &s, &data, &ids)?)?;
    write_importance_csv(&rec, out)?;
    for (g, ws) in rec.groups() {
        let parts: Vec<String> = ws.iter().map(|(v, w)| format!("{v}={w:.4}")).collect();
        println!("{g}: {}", parts.join(" "));
    }
    Ok(())
}

/// A random window matching `cfg`.
fn random_window(cfg: &ModelConfig, seed: u64) -> Window {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_t = cfg.n_t();
    Window {
        group_id: 1,
        start: 0,
        n_k: cfg.n_k,
        mu: (0..cfg.n_params).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        times: (0..n_t).map(|i| i as f64).collect(),
        u: (0..n_t).map(|_| (0..cfg.n_inputs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
        y: (0..n_t).map(|_| (0..cfg.n_outputs).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
    }
}

/// The small model checked when no model file is given.
pub fn gradcheck_toy_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        dropout: 0.1,
        n_outputs: 2,
        n_inputs: 1,
        n_params: 2,
        n_k: 1,
        n_tau: 2,
    }
}

pub fn cmd_gradcheck(
    opts: &Options,
    model_path: Option<&Path>,
    data_path: Option<&Path>,
    op_tol: f64,
    model_tol: f64,
) -> Result<(), CliError> {
    let s = Settings::resolve(opts)?;
    let seed = s.seed()?;
    let mut failures = Vec::new();
    let suite = op_suite(seed, 1e-5).map_err(|e| CliError::Numeric(e.to_string()))?;
    for (name, rep) in &suite {
        let ok = rep.passes(op_tol);
        println!("{:<16} {:>4} entries  max rel error {:.3e}  {}", name, rep.checked, rep.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push(name.to_string());
        }
    }
    let (model, window) = match model_path {
        Some(p) => {
            let (model, file) = load_model(p)?;
            let window = match data_path {
                Some(d) => {
                    let data = load_data(d)?;
                    let ids = part_ids(&file.split, &data, Part::All)?;
                    model_windows(&file, &s, &data, &ids[..1])?.swap_remove(0)
                }
                None => random_window(&model.config, seed),
            };
            (model, window)
        }
        None => {
            let cfg = gradcheck_toy_config();
            (IstftModel::new(cfg.clone(), seed)?, random_window(&cfg, seed.wrapping_add(1)))
        }
    };
    let rep = model.gradcheck(&window, 1e-5, 16, seed)?;
    let ok = rep.passes(model_tol);
    println!("{:<16} {:>4} entries  max rel error {:.3e}  {}", "full model", rep.checked, rep.max_rel_error, if ok { "ok" } else { "FAIL" });
    if !ok {
        failures.push("full model".into());
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::GradCheck(failures.join(", ")))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let o = &cli.opts;
    match &cli.command {
        Command::Generate { system, raw } => cmd_generate(o, *system, *raw),
        Command::Reshape { input } => cmd_reshape(o, input),
        Command::Train { data, log } => cmd_train(o, data, log.as_deref()),
        Command::Predict { model, data, part } => cmd_predict(o, model, data, *part),
        Command::Evaluate {
            model,
            data,
            part,
            persistence,
        } => cmd_evaluate(o, model, data, *part, *persistence),
        Command::ExportAttention {
            model,
            data,
            group,
            window,
            crop,
        } => cmd_export_attention(o, model, data, *group, *window, *crop),
        Command::ExportImportance { model, data, group, part } => cmd_export_importance(o, model, data, *group, *part),
        Command::Gradcheck {
            model,
            data,
            op_tol,
            model_tol,
        } => cmd_gradcheck(o, model.as_deref(), data.as_deref(), *op_tol, *model_tol),
    }
}
