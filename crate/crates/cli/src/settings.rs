//! Presets, `key=value` override files and run directories.

use std::fmt::Write as _;
use std::path::Path;

use demmae_core::{Error, ModelConfig, PretrainPlan, Result, TrainPlan};

use crate::args::Common;

/// Everything a command needs besides its paths.
#[derive(Clone, Debug)]
pub struct Settings {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainPlan,
    pub finetune: TrainPlan,
    /// Explicit `finetune.class_weights`; otherwise they come from the
    /// training histogram.
    pub class_weights_given: bool,
    /// Pre-training preview period; 0 disables previews.
    pub preview_every: Option<usize>,
    /// Override lines in file order, for the run record.
    pub overrides: Vec<(String, String)>,
}

impl Settings {
    /// Preset defaults, then the `--config` file, then `--seed`.
    pub fn load(common: &Common) -> Result<Self> {
        let model = ModelConfig::preset(&common.preset)?;
        let mut s = Settings {
            preset: common.preset.clone(),
            seed: common.seed,
            model,
            pretrain: PretrainPlan {
                seed: common.seed,
                ..Default::default()
            },
            finetune: TrainPlan {
                seed: common.seed,
                ..Default::default()
            },
            class_weights_given: false,
            preview_every: None,
            overrides: Vec::new(),
        };
        if let Some(path) = &common.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            for (key, value) in parse_overrides(&text)? {
                s.apply(&key, &value)?;
                s.overrides.push((key, value));
            }
        }
        s.model.validate()?;
        Ok(s)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split_once('.') {
            Some(("model", k)) => self.model.set(k, value),
            Some(("pretrain", k)) => self.pretrain.set(k, value),
            Some(("finetune", k)) => {
                self.class_weights_given |= k == "class_weights";
                self.finetune.set(k, value)
            }
            None if key == "preview_every" => {
                let n = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid value {value:?} for preview_every")))?;
                self.preview_every = Some(n);
                Ok(())
            }
            _ => Err(Error::Config(format!("unknown config key {key:?}"))),
        }
    }

    /// The effective settings as `key=value` lines.
    pub fn record(&self, command: &str, extra: &[(&str, String)]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command={command}");
        let _ = writeln!(out, "preset={}", self.preset);
        let _ = writeln!(out, "seed={}", self.seed);
        for (k, v) in extra {
            let _ = writeln!(out, "{k}={v}");
        }
        for (k, v) in self.model.to_record() {
            let _ = writeln!(out, "model.{k}={v}");
        }
        for (k, v) in &self.overrides {
            let _ = writeln!(out, "override.{k}={v}");
        }
        out
    }
}

/// `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_overrides(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key=value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn init_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {n} threads: {e}")))?;
    }
    Ok(())
}

/// Rejects an output directory that exists and is not empty.
pub fn check_fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        let mut entries = std::fs::read_dir(path)
            .map_err(|e| Error::Config(format!("{} is not a usable directory: {e}", path.display())))?;
        if entries.next().is_some() {
            return Err(Error::Config(format!("{} exists and is not empty", path.display())));
        }
    }
    Ok(())
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}
