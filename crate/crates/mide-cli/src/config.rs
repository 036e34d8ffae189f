//! Flat key-value run configuration with dotted section prefixes.
//!
//! Format: one `key = value` pair per line, `#` starts a comment, keys are
//! dotted lowercase paths (`train.lr_phi`). Unknown keys are rejected, and
//! every parse error names the offending key and line. The full schema is
//! documented in `docs/config.md`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use mide::{MideError, Result};

/// Known configuration keys.
const SCHEMA: &[&str] = &[
    "seed",
    "paths.obs",
    "paths.maps",
    "paths.sites",
    "paths.model",
    "model.heights",
    "model.theta_max",
    "model.normalize_propagator",
    "model.boxcox_offset",
    "model.boxcox_lambda",
    "model.alpha",
    "model.ell_same_init",
    "model.ell_cross_init",
    "model.sigma_eps_init",
    "model.ell_eps_init",
    "model.sigma_eta_init",
    "model.ell_eta_init",
    "extractor.conv_channels",
    "extractor.feat_dim",
    "extractor.context_len",
    "train.subseq_len",
    "train.batch_size",
    "train.batches_per_epoch",
    "train.lr_phi",
    "train.lr_omega",
    "train.momentum",
    "train.max_epochs",
    "train.patience",
    "train.lr_decay_patience",
    "train.burn_in",
    "train.val_fraction",
    "train.omega_warmup_epochs",
    "train.online_window_steps",
    "train.online_iters",
    "train.grad_clip",
    "protocol.horizon",
    "protocol.stride",
    "protocol.offline_fraction",
    "protocol.max_rolls",
    "sim.t_steps",
    "sim.step_seconds",
    "sim.start_time",
    "sim.lambda",
    "sim.offset",
    "sim.diurnal",
    "sim.schedule",
    "sim.theta_height_scale",
    "sim.hold_steps",
    "sim.theta_max",
    "sim.normalize_propagator",
    "sim.allow_unstable",
    "sim.burn_in_steps",
    "sim.missing_rate",
    "sim.raster_width",
    "sim.raster_height",
    "sim.raster_bbox",
    "sim.raster_noise_sd",
    "sim.ell_same",
    "sim.ell_cross",
    "sim.sigma_eps",
    "sim.ell_eps",
    "sim.sigma_eta",
    "sim.ell_eta",
    "diagnose.max_lag_hours",
    "power.draws",
];

/// A parsed configuration file.
#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    entries: HashMap<String, (String, usize)>,
    base_dir: PathBuf,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MideError::io(path.display().to_string(), e))?;
        let mut cfg = RunConfig {
            entries: HashMap::new(),
            base_dir: path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let eq = line.find('=').ok_or_else(|| {
                MideError::Config(format!(
                    "line {line_no}: expected 'key = value', got '{line}'"
                ))
            })?;
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if !SCHEMA.contains(&key.as_str()) {
                return Err(MideError::Config(format!(
                    "unknown key '{key}' at line {line_no}"
                )));
            }
            if cfg.entries.insert(key.clone(), (value, line_no)).is_some() {
                return Err(MideError::Config(format!(
                    "duplicate key '{key}' at line {line_no}"
                )));
            }
        }
        cfg.check_paths()?;
        Ok(cfg)
    }

    /// Referenced input paths must exist at load time.
    fn check_paths(&self) -> Result<()> {
        for key in ["paths.obs", "paths.maps", "paths.sites", "paths.model"] {
            if let Some((v, line)) = self.entries.get(key) {
                let p = self.resolve_path(v);
                if !p.exists() {
                    return Err(MideError::Config(format!(
                        "key '{key}' at line {line}: path {} does not exist",
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Paths are resolved relative to the config file location.
    pub fn resolve_path(&self, value: &str) -> PathBuf {
        let p = Path::new(value);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.entries.get(key).map(|(v, _)| self.resolve_path(v))
    }

    fn raw(&self, key: &str) -> Option<&(String, usize)> {
        self.entries.get(key)
    }

    fn parse_err(&self, key: &str, line: usize, what: &str) -> MideError {
        MideError::Config(format!("key '{key}' at line {line}: {what}"))
    }

    pub fn str_or<'a>(&'a self, key: &str, default: &'a str) -> &'a str {
        self.raw(key).map(|(v, _)| v.as_str()).unwrap_or(default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| self.parse_err(key, *line, &format!("'{v}' is not a number"))),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| self.parse_err(key, *line, &format!("'{v}' is not a nonnegative integer"))),
        }
    }

    pub fn i64_or(&self, key: &str, default: i64) -> Result<i64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| self.parse_err(key, *line, &format!("'{v}' is not an integer"))),
        }
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => v
                .parse()
                .map_err(|_| self.parse_err(key, *line, &format!("'{v}' is not an unsigned integer"))),
        }
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => match v.as_str() {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                other => Err(self.parse_err(key, *line, &format!("'{other}' is not a boolean"))),
            },
        }
    }

    /// `auto` (or absence) maps to `None`.
    pub fn f64_auto(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => {
                if v == "auto" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| {
                        self.parse_err(key, *line, &format!("'{v}' is not a number or 'auto'"))
                    })
                }
            }
        }
    }

    pub fn usize_opt(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some((v, line)) => {
                if v == "none" {
                    Ok(None)
                } else {
                    v.parse().map(Some).map_err(|_| {
                        self.parse_err(key, *line, &format!("'{v}' is not an integer or 'none'"))
                    })
                }
            }
        }
    }

    pub fn f64_list_or(&self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some((v, line)) => v
                .split(',')
                .map(|s| {
                    s.trim().parse::<f64>().map_err(|_| {
                        self.parse_err(key, *line, &format!("'{s}' is not a number"))
                    })
                })
                .collect(),
        }
    }

    pub fn timestamp_or(&self, key: &str, default: i64) -> Result<i64> {
        match self.raw(key) {
            None => Ok(default),
            Some((v, line)) => mide::io::parse_unix(v)
                .map_err(|e| self.parse_err(key, *line, &e.to_string())),
        }
    }

}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_cfg(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.cfg");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn parses_known_keys_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            "# comment\nseed = 7\ntrain.lr_phi = 0.002 # inline\nmodel.heights = 100, 140, 180\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.u64_or("seed", 0).unwrap(), 7);
        assert_eq!(cfg.f64_or("train.lr_phi", 0.0).unwrap(), 0.002);
        assert_eq!(
            cfg.f64_list_or("model.heights", &[]).unwrap(),
            vec![100.0, 140.0, 180.0]
        );
        assert_eq!(cfg.usize_or("train.batch_size", 4).unwrap(), 4);
    }

    #[test]
    fn rejects_unknown_key_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "seed = 1\nmodle.heights = 100\n");
        let err = RunConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("modle.heights"), "{err}");
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn rejects_missing_referenced_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "paths.obs = does-not-exist.csv\n");
        let err = RunConfig::load(&p).unwrap_err().to_string();
        assert!(err.contains("does-not-exist.csv"), "{err}");
    }

    #[test]
    fn auto_and_none_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(
            dir.path(),
            "model.theta_max = auto\nprotocol.max_rolls = none\n",
        );
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.f64_auto("model.theta_max").unwrap(), None);
        assert_eq!(cfg.usize_opt("protocol.max_rolls").unwrap(), None);
        assert_eq!(cfg.f64_auto("model.boxcox_lambda").unwrap(), None);
    }

    #[test]
    fn bad_value_names_key_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_cfg(dir.path(), "\n\ntrain.lr_phi = fast\n");
        let cfg = RunConfig::load(&p).unwrap();
        let err = cfg.f64_or("train.lr_phi", 1.0).unwrap_err().to_string();
        assert!(err.contains("train.lr_phi") && err.contains("line 3"), "{err}");
    }
}
