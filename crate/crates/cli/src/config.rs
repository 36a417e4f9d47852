//! `key = value` configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub const CACHE_ENV: &str = "CRITHEIGHTS_CACHE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Double,
    /// Multiprecision brute-force reference, for spot checks only.
    Reference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub tree_resolution: usize,
    pub refinement_limit: usize,
    pub angle_grid: usize,
    pub cache_dir: PathBuf,
    pub precision: Precision,
    pub workers: usize,
    pub seed: u64,
}

impl Default for Config {
    fn default() -> Self {
        let cache = std::env::var_os("XDG_CACHE_HOME")
            .map(PathBuf::from)
            .or_else(|| std::env::var_os("HOME").map(|h| PathBuf::from(h).join(".cache")))
            .unwrap_or_else(|| PathBuf::from("."))
            .join("critheights");
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            tree_resolution: 64,
            refinement_limit: 3,
            angle_grid: 64,
            cache_dir: cache,
            precision: Precision::Double,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            seed: 0x5eed,
        }
    }
}

impl Config {
    /// Defaults, then the file (if any), then the cache environment variable.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = path {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in config {}", path.display()))?;
        }
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            cfg.cache_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected key = value", lineno + 1);
            };
            self.set(key.trim(), value.trim()).with_context(|| format!("line {}", lineno + 1))?;
        }
        self.validate()
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || format!("invalid value {value:?} for {key}");
        match key {
            "tolerance" => self.tolerance = value.parse().with_context(bad)?,
            "max_iterations" => self.max_iterations = value.parse().with_context(bad)?,
            "tree_resolution" => self.tree_resolution = value.parse().with_context(bad)?,
            "refinement_limit" => self.refinement_limit = value.parse().with_context(bad)?,
            "angle_grid" => self.angle_grid = value.parse().with_context(bad)?,
            "cache_dir" => self.cache_dir = PathBuf::from(value),
            "workers" => self.workers = value.parse().with_context(bad)?,
            "seed" => self.seed = value.parse().with_context(bad)?,
            "precision" => {
                self.precision = match value {
                    "double" => Precision::Double,
                    "reference" => Precision::Reference,
                    _ => bail!(bad()),
                }
            }
            _ => bail!("unknown key {key:?}"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            bail!("tolerance must be positive");
        }
        if self.max_iterations == 0 {
            bail!("max_iterations must be at least 1");
        }
        if self.workers == 0 {
            bail!("workers must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let mut cfg = Config::default();
        cfg.apply_text(
            "tolerance = 1e-12\n# comment\nworkers=3 # trailing\nprecision = reference\ncache_dir = /tmp/x\n",
        )
        .unwrap();
        assert_eq!(cfg.tolerance, 1e-12);
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.precision, Precision::Reference);
        assert_eq!(cfg.cache_dir, PathBuf::from("/tmp/x"));
    }

    #[test]
    fn rejects_bad_entries() {
        for text in ["tolerance = 0", "workers = 0", "bogus = 1", "tolerance", "precision = quad"] {
            assert!(Config::default().apply_text(text).is_err(), "{text}");
        }
    }
}
