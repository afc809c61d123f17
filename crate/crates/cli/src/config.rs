//! Flat `key=value` configuration with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use casc_core::loss::TrainingMode;
use casc_core::trainer::ExperimentConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub experiment: ExperimentConfig,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: ExperimentConfig::default(),
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "run_dir" => self.run_dir = PathBuf::from(value.trim()),
            _ => {
                if !self.experiment.set(key, value)? {
                    bail!("unknown configuration key {key:?}");
                }
            }
        }
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected key=value", n + 1))?;
            self.set(k.trim(), v.trim())
                .with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text, &path.display().to_string())?;
        Ok(cfg)
    }

    /// Resolved experiment settings as `# key=value` lines. Paths are left
    /// out so identical experiments echo identically wherever they run.
    pub fn header(&self, command: &str) -> String {
        let mut out = format!("# command={command}\n");
        for (k, v) in self.experiment.to_pairs() {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out
    }
}

/// Overrides shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<TrainingMode>,
    pub set: Vec<String>,
}

pub fn resolve(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &o.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v)?;
    }
    if let Some(seed) = o.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(mode) = o.mode {
        cfg.experiment.mode = mode;
    }
    cfg.experiment.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_flags() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# comment\nseed = 5\nlr=0.5 # trailing\n\ndata_dir=/tmp/x\n", "t").unwrap();
        assert_eq!(cfg.experiment.seed, 5);
        assert_eq!(cfg.experiment.lr, 0.5);
        assert_eq!(cfg.data_dir, PathBuf::from("/tmp/x"));
        assert!(cfg.apply_text("nonsense\n", "t").is_err());
        assert!(cfg.apply_text("color=blue\n", "t").is_err());
    }

    #[test]
    fn header_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("epochs", "7").unwrap();
        let header = cfg.header("train");
        let mut back = RunConfig::default();
        let body: String = header.lines().skip(1).map(|l| format!("{}\n", &l[2..])).collect();
        back.apply_text(&body, "h").unwrap();
        assert_eq!(back, cfg);
    }
}
