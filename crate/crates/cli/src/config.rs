//! `key = value` run configuration and its merge with command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use clap::Args;
use proof_core::model::{Heads, ProjectionMode};
use proof_core::trainer::{ExemplarPolicy, TrainConfig};
use serde::Serialize;

pub const DEFAULT_INC: usize = 10;

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// keys are lower-cased with `_` folded to `-`.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected `key = value`, got {raw:?}", n + 1))?;
        let key = k.trim().to_ascii_lowercase().replace('_', "-");
        if key.is_empty() {
            return Err(format!("line {}: empty key", n + 1));
        }
        out.insert(key, v.trim().to_string());
    }
    Ok(out)
}

pub fn parse_mode(s: &str) -> Result<ProjectionMode, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "plain" => Ok(ProjectionMode::Plain),
        "residual" => Ok(ProjectionMode::Residual),
        other => Err(format!("unknown projection mode {other:?} (expected plain or residual)")),
    }
}

pub fn parse_heads(s: &str) -> Result<Heads, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "full" => Ok(Heads::Full),
        "projection" => Ok(Heads::Projection),
        other => Err(format!("unknown head set {other:?} (expected full or projection)")),
    }
}

/// Training flags shared by `train`, `sweep` and `retrieve`. Every field is
/// optional so that unset flags fall through to the config file and then
/// to the defaults.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    /// `key = value` file; flags given on the command line win over it
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Classes in the first task (0: every task has `inc` classes)
    #[arg(long)]
    pub base: Option<usize>,
    /// Classes per incremental task
    #[arg(long)]
    pub inc: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// Initial learning rate of the cosine schedule
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Context prompt rows per task
    #[arg(long = "prompt-len")]
    pub prompt_len: Option<usize>,
    #[arg(long = "logit-scale")]
    pub logit_scale: Option<f64>,
    /// plain | residual
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ProjectionMode>,
    /// full | projection
    #[arg(long, value_parser = parse_heads)]
    pub heads: Option<Heads>,
    /// fixed:K | perclass:k
    #[arg(long)]
    pub policy: Option<ExemplarPolicy>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub base: usize,
    pub inc: usize,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            base: 0,
            inc: DEFAULT_INC,
        }
    }
}

fn parsed<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("config key {key}: {e}"))
}

impl Settings {
    pub fn apply_config(&mut self, map: &BTreeMap<String, String>) -> Result<(), String> {
        for (k, v) in map {
            let t = &mut self.train;
            match k.as_str() {
                "base" => self.base = parsed(k, v)?,
                "inc" => self.inc = parsed(k, v)?,
                "seed" => t.seed = parsed(k, v)?,
                "epochs" => t.epochs = parsed(k, v)?,
                "batch" | "batch-size" => t.batch_size = parsed(k, v)?,
                "lr" | "lr0" => t.lr0 = parsed(k, v)?,
                "momentum" => t.momentum = parsed(k, v)?,
                "prompt-len" | "prompt-length" => t.prompt_length = parsed(k, v)?,
                "logit-scale" => t.logit_scale = parsed(k, v)?,
                "mode" => t.mode = parse_mode(v)?,
                "heads" => t.heads = parse_heads(v)?,
                "policy" => t.policy = parsed(k, v)?,
                other => return Err(format!("unknown config key {other:?}")),
            }
        }
        Ok(())
    }

    pub fn apply_flags(&mut self, f: &TrainFlags) {
        let t = &mut self.train;
        if let Some(v) = f.base {
            self.base = v;
        }
        if let Some(v) = f.inc {
            self.inc = v;
        }
        if let Some(v) = f.seed {
            t.seed = v;
        }
        if let Some(v) = f.epochs {
            t.epochs = v;
        }
        if let Some(v) = f.batch {
            t.batch_size = v;
        }
        if let Some(v) = f.lr {
            t.lr0 = v;
        }
        if let Some(v) = f.momentum {
            t.momentum = v;
        }
        if let Some(v) = f.prompt_len {
            t.prompt_length = v;
        }
        if let Some(v) = f.logit_scale {
            t.logit_scale = v;
        }
        if let Some(v) = f.mode {
            t.mode = v;
        }
        if let Some(v) = f.heads {
            t.heads = v;
        }
        if let Some(v) = f.policy {
            t.policy = v;
        }
    }

    /// Defaults, then the config file named by `--config`, then flags.
    pub fn resolve(flags: &TrainFlags) -> Result<Self, String> {
        let mut s = Self::default();
        if let Some(path) = &flags.config {
            s.apply_config(&read_config(path)?)?;
        }
        s.apply_flags(flags);
        s.train.validate().map_err(|e| e.to_string())?;
        Ok(s)
    }
}

fn read_config(path: &Path) -> Result<BTreeMap<String, String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    parse_config(&text).map_err(|e| format!("{}: {e}", path.display()))
}
