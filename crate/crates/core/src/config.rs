//! Run configuration: a line-based `key = value` file with `[model]`,
//! `[train]`, and `[prune]` sections. Every key has a default, unknown keys
//! and malformed values are rejected with their line number, and
//! `--set section.key=value` overrides win over file values. The fully
//! resolved config is echoed into each run directory as `config.resolved`
//! and round-trips through the parser.

use std::fs;
use std::path::Path;

use crate::lm::{CellKind, LmConfig};
use crate::prune::PruneSchedule;
use crate::train::TrainConfig;
use crate::StepMode;

pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {detail}")]
    Parse { file: String, line: usize, detail: String },
    #[error("bad --set {arg:?}: {detail}")]
    BadOverride { arg: String, detail: String },
}

/// Model architecture settings. Vocabulary size comes from the corpus at
/// build time, so it is not a config key; `max_vocab` caps it.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub cell: CellKind,
    pub mode: StepMode,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    /// 0 means unlimited.
    pub max_vocab: usize,
    pub dropout_p: f64,
    pub dropconnect_p: f64,
    pub train_theta: bool,
    pub surrogate_lambda: f64,
    pub surrogate_epsilon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            cell: CellKind::Egru,
            mode: StepMode::Event,
            embed_dim: 128,
            hidden_dims: vec![128, 128, 128],
            max_vocab: 0,
            dropout_p: 0.0,
            dropconnect_p: 0.0,
            train_theta: true,
            surrogate_lambda: 0.3,
            surrogate_epsilon: 1.0,
        }
    }
}

impl ModelSection {
    pub fn to_lm_config(&self, vocab_size: usize) -> LmConfig {
        LmConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dims: self.hidden_dims.clone(),
            cell: self.cell,
            mode: self.mode,
            dropout_p: self.dropout_p,
            dropconnect_p: self.dropconnect_p,
            train_theta: self.train_theta,
            surrogate_lambda: self.surrogate_lambda,
            surrogate_epsilon: self.surrogate_epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub prune: PruneSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection::default(),
            train: TrainConfig::default(),
            prune: PruneSchedule::with_defaults(0.8, 4),
        }
    }
}

impl RunConfig {
    /// Structural checks that do not need the corpus. The architecture is
    /// re-validated against the real vocabulary when a model is built.
    pub fn validate(&self) -> Result<(), String> {
        self.model.to_lm_config(2).validate()?;
        self.train.validate().map_err(|e| e.to_string())?;
        if !(0.0..1.0).contains(&self.prune.target_sparsity) {
            return Err(format!(
                "prune.target_sparsity {} must be in [0, 1)",
                self.prune.target_sparsity
            ));
        }
        if self.prune.n_steps == 0 {
            return Err("prune.n_steps must be at least 1".into());
        }
        if !(self.prune.lr_scale > 0.0) {
            return Err(format!("prune.lr_scale {} must be positive", self.prune.lr_scale));
        }
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(raw: &str, kind: &str) -> Result<T, String> {
    raw.parse::<T>().map_err(|_| format!("expected {kind}, got {raw:?}"))
}

fn parse_bool(raw: &str) -> Result<bool, String> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got {raw:?}")),
    }
}

fn parse_dims(raw: &str) -> Result<Vec<usize>, String> {
    let dims: Result<Vec<usize>, String> = raw
        .split(',')
        .map(|p| parse_num::<usize>(p.trim(), "a positive integer"))
        .collect();
    let dims = dims?;
    if dims.is_empty() || dims.contains(&0) {
        return Err(format!("hidden_dims needs positive widths, got {raw:?}"));
    }
    Ok(dims)
}

/// Applies one `section.key = value`; the error is the bare detail, and the
/// caller attaches where it came from.
fn set(cfg: &mut RunConfig, section: &str, key: &str, raw: &str) -> Result<(), String> {
    let t = &mut cfg.train;
    let p = &mut cfg.prune;
    let m = &mut cfg.model;
    match (section, key) {
        ("model", "cell") => {
            m.cell = match raw {
                "egru" => CellKind::Egru,
                "lstm" => CellKind::Lstm,
                _ => return Err(format!("expected egru or lstm, got {raw:?}")),
            }
        }
        ("model", "mode") => {
            m.mode = match raw {
                "event" => StepMode::Event,
                "dense" => StepMode::Dense,
                "smooth" => StepMode::Smooth,
                _ => return Err(format!("expected event, dense, or smooth, got {raw:?}")),
            }
        }
        ("model", "embed_dim") => m.embed_dim = parse_num(raw, "a positive integer")?,
        ("model", "hidden_dims") => m.hidden_dims = parse_dims(raw)?,
        ("model", "max_vocab") => m.max_vocab = parse_num(raw, "an integer")?,
        ("model", "dropout_p") => m.dropout_p = parse_num(raw, "a number")?,
        ("model", "dropconnect_p") => m.dropconnect_p = parse_num(raw, "a number")?,
        ("model", "train_theta") => m.train_theta = parse_bool(raw)?,
        ("model", "surrogate_lambda") => m.surrogate_lambda = parse_num(raw, "a number")?,
        ("model", "surrogate_epsilon") => m.surrogate_epsilon = parse_num(raw, "a number")?,
        ("train", "lr") => t.lr = parse_num(raw, "a number")?,
        ("train", "beta1") => t.beta1 = parse_num(raw, "a number")?,
        ("train", "beta2") => t.beta2 = parse_num(raw, "a number")?,
        ("train", "adam_eps") => t.adam_eps = parse_num(raw, "a number")?,
        ("train", "wd_weights") => t.wd_weights = parse_num(raw, "a number")?,
        ("train", "wd_bias") => t.wd_bias = parse_num(raw, "a number")?,
        ("train", "bptt_len") => t.bptt_len = parse_num(raw, "a positive integer")?,
        ("train", "batch_size") => t.batch_size = parse_num(raw, "a positive integer")?,
        ("train", "epochs") => t.epochs = parse_num(raw, "an integer")?,
        ("train", "grad_clip_norm") => t.grad_clip_norm = parse_num(raw, "a number")?,
        ("train", "seed") => t.seed = parse_num(raw, "an integer")?,
        ("prune", "target_sparsity") => p.target_sparsity = parse_num(raw, "a number")?,
        ("prune", "n_steps") => p.n_steps = parse_num(raw, "a positive integer")?,
        ("prune", "finetune_epochs") => p.finetune_epochs = parse_num(raw, "an integer")?,
        ("prune", "lr_scale") => p.lr_scale = parse_num(raw, "a number")?,
        ("model" | "train" | "prune", _) => {
            return Err(format!("unknown key {key:?} in section [{section}]"))
        }
        _ => return Err(format!("unknown section [{section}]")),
    }
    Ok(())
}

/// Parses config text. `file` labels errors (a path, or a placeholder for
/// inline text). Comments start with `#`; a value runs to end of line or
/// the first `#`.
pub fn parse_str(text: &str, file: &str) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();
    let mut section: Option<String> = None;
    for (i, raw_line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |detail: String| ConfigError::Parse {
            file: file.to_string(),
            line: line_no,
            detail,
        };
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(format!("unterminated section header {line:?}")))?;
            if !matches!(name, "model" | "train" | "prune") {
                return Err(err(format!("unknown section [{name}]")));
            }
            section = Some(name.to_string());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got {line:?}")))?;
        let section = section
            .as_deref()
            .ok_or_else(|| err(format!("key {:?} before any [section]", key.trim())))?;
        set(&mut cfg, section, key.trim(), value.trim()).map_err(err)?;
    }
    Ok(cfg)
}

/// Loads the file (defaults when `path` is `None`), then applies
/// `--set section.key=value` overrides in order; later settings win.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            parse_str(&text, &p.display().to_string())?
        }
        None => RunConfig::default(),
    };
    for arg in overrides {
        let bad = |detail: &str| ConfigError::BadOverride {
            arg: arg.clone(),
            detail: detail.to_string(),
        };
        let (path_part, value) =
            arg.split_once('=').ok_or_else(|| bad("expected section.key=value"))?;
        let (section, key) = path_part
            .split_once('.')
            .ok_or_else(|| bad("expected section.key=value"))?;
        set(&mut cfg, section.trim(), key.trim(), value.trim())
            .map_err(|detail| bad(&detail))?;
    }
    Ok(cfg)
}

/// Full settings in file syntax; parsing it back reproduces the config.
pub fn resolved(cfg: &RunConfig) -> String {
    let m = &cfg.model;
    let t = &cfg.train;
    let p = &cfg.prune;
    let cell = match m.cell {
        CellKind::Egru => "egru",
        CellKind::Lstm => "lstm",
    };
    let mode = match m.mode {
        StepMode::Event => "event",
        StepMode::Dense => "dense",
        StepMode::Smooth => "smooth",
    };
    let dims: Vec<String> = m.hidden_dims.iter().map(|d| d.to_string()).collect();
    format!(
        "[model]\n\
         cell = {cell}\n\
         mode = {mode}\n\
         embed_dim = {}\n\
         hidden_dims = {}\n\
         max_vocab = {}\n\
         dropout_p = {}\n\
         dropconnect_p = {}\n\
         train_theta = {}\n\
         surrogate_lambda = {}\n\
         surrogate_epsilon = {}\n\
         \n[train]\n\
         lr = {}\n\
         beta1 = {}\n\
         beta2 = {}\n\
         adam_eps = {}\n\
         wd_weights = {}\n\
         wd_bias = {}\n\
         bptt_len = {}\n\
         batch_size = {}\n\
         epochs = {}\n\
         grad_clip_norm = {}\n\
         seed = {}\n\
         \n[prune]\n\
         target_sparsity = {}\n\
         n_steps = {}\n\
         finetune_epochs = {}\n\
         lr_scale = {}\n",
        m.embed_dim,
        dims.join(","),
        m.max_vocab,
        m.dropout_p,
        m.dropconnect_p,
        m.train_theta,
        m.surrogate_lambda,
        m.surrogate_epsilon,
        t.lr,
        t.beta1,
        t.beta2,
        t.adam_eps,
        t.wd_weights,
        t.wd_bias,
        t.bptt_len,
        t.batch_size,
        t.epochs,
        t.grad_clip_norm,
        t.seed,
        p.target_sparsity,
        p.n_steps,
        p.finetune_epochs,
        p.lr_scale,
    )
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> std::io::Result<()> {
    fs::write(dir.join(RESOLVED_FILE), resolved(cfg))
}
