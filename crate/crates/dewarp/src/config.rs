//! Run configuration: two named presets, a flat key=value file format,
//! and a resolved echo that parses back to the identical config.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mae::ModelDims;
use crate::transformer::default_heads;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub h: usize,
    pub w: usize,
    pub patch: usize,
    pub dim: usize,
    pub k1: usize,
    pub k2: usize,
    pub mask_ratio: f64,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub from_scratch: bool,
    pub data_dir: String,
}

impl RunConfig {
    /// Full-size configuration: 288x288 pages, 16px patches, width 512,
    /// depths 6/4, 65 epochs at batch 64.
    pub fn paper() -> Self {
        RunConfig {
            h: 288,
            w: 288,
            patch: 16,
            dim: 512,
            k1: 6,
            k2: 4,
            mask_ratio: 0.75,
            max_lr: 1e-4,
            warmup_frac: 0.3,
            epochs: 65,
            batch: 64,
            seed: 0,
            freeze_encoder: false,
            from_scratch: false,
            data_dir: String::new(),
        }
    }

    /// Laptop-scale configuration that trains in minutes.
    pub fn desk() -> Self {
        RunConfig {
            h: 96,
            w: 96,
            patch: 8,
            dim: 128,
            k1: 4,
            k2: 2,
            mask_ratio: 0.75,
            max_lr: 1e-4,
            warmup_frac: 0.3,
            epochs: 20,
            batch: 8,
            seed: 0,
            freeze_encoder: false,
            from_scratch: false,
            data_dir: String::new(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            other => Err(Error::Validation(format!(
                "unknown preset {other:?} (expected \"paper\" or \"desk\")"
            ))),
        }
    }

    pub fn heads(&self) -> usize {
        default_heads(self.dim)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            h: self.h,
            w: self.w,
            p: self.patch,
            d: self.dim,
            k1: self.k1,
            k2: self.k2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::Validation(format!(
                "mask_ratio {} outside [0,1)",
                self.mask_ratio
            )));
        }
        if !(self.max_lr > 0.0) || !self.max_lr.is_finite() {
            return Err(Error::Validation(format!("max_lr {} must be positive", self.max_lr)));
        }
        if !(0.0 < self.warmup_frac && self.warmup_frac < 1.0) {
            return Err(Error::Validation(format!(
                "warmup_frac {} outside (0,1)",
                self.warmup_frac
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Validation("epochs and batch must be positive".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| {
                Error::Validation(format!("config key {key}: cannot parse {value:?}"))
            })
        }
        fn flag(key: &str, value: &str) -> Result<bool> {
            match value.trim() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                other => Err(Error::Validation(format!(
                    "config key {key}: expected true/false, got {other:?}"
                ))),
            }
        }
        match key {
            "h" => self.h = num(key, value)?,
            "w" => self.w = num(key, value)?,
            "patch" => self.patch = num(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "heads" => {
                // head count is derived from the width; accept the echo of
                // that derivation, reject anything else
                let v: usize = num(key, value)?;
                if v != self.heads() {
                    return Err(Error::Validation(format!(
                        "heads is derived from dim (width {} gives {}), cannot set {v}",
                        self.dim,
                        self.heads()
                    )));
                }
            }
            "k1" => self.k1 = num(key, value)?,
            "k2" => self.k2 = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "max_lr" => self.max_lr = num(key, value)?,
            "warmup_frac" => self.warmup_frac = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "freeze_encoder" => self.freeze_encoder = flag(key, value)?,
            "from_scratch" => self.from_scratch = flag(key, value)?,
            "data_dir" => self.data_dir = value.trim().to_string(),
            other => {
                return Err(Error::Validation(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Applies a key=value file on top of this config.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(path, format!("line {}: no '='", lineno + 1)));
            };
            self.set(key.trim(), value)
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// All resolved settings, sorted by key. `with_paths` controls whether
    /// machine-local path values are included (checkpoint echoes drop them).
    pub fn to_kv(&self, with_paths: bool) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("h".into(), self.h.to_string());
        kv.insert("w".into(), self.w.to_string());
        kv.insert("patch".into(), self.patch.to_string());
        kv.insert("dim".into(), self.dim.to_string());
        kv.insert("heads".into(), self.heads().to_string());
        kv.insert("k1".into(), self.k1.to_string());
        kv.insert("k2".into(), self.k2.to_string());
        kv.insert("mask_ratio".into(), self.mask_ratio.to_string());
        kv.insert("max_lr".into(), self.max_lr.to_string());
        kv.insert("warmup_frac".into(), self.warmup_frac.to_string());
        kv.insert("epochs".into(), self.epochs.to_string());
        kv.insert("batch".into(), self.batch.to_string());
        kv.insert("seed".into(), self.seed.to_string());
        kv.insert("freeze_encoder".into(), self.freeze_encoder.to_string());
        kv.insert("from_scratch".into(), self.from_scratch.to_string());
        if with_paths {
            kv.insert("data_dir".into(), self.data_dir.clone());
        }
        kv
    }

    /// Rebuilds a config from an echoed key set, e.g. a checkpoint header.
    /// Starts from the desk preset; keys absent from the map keep desk values.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<RunConfig> {
        let mut cfg = RunConfig::desk();
        for (k, v) in kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv(true) {
            out.push_str(&format!("{k}={v}\n"));
        }
        out
    }

    pub fn write_echo(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.echo()).map_err(|e| Error::io(path, e))
    }

    /// Checks that checkpoint-echoed settings agree with this config on
    /// the keys that shape tensors.
    pub fn check_compatible(&self, echoed: &BTreeMap<String, String>) -> Result<()> {
        let mine = self.to_kv(false);
        for key in ["h", "w", "patch", "dim", "k1", "k2"] {
            match (mine.get(key), echoed.get(key)) {
                (Some(a), Some(b)) if a == b => {}
                (Some(a), Some(b)) => {
                    return Err(Error::Checkpoint(format!(
                        "checkpoint was built with {key}={b}, run wants {key}={a}"
                    )));
                }
                _ => {
                    return Err(Error::Checkpoint(format!("checkpoint echo lacks key {key}")));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::paper().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert_eq!(RunConfig::paper().heads(), 8);
        assert_eq!(RunConfig::desk().heads(), 2);
        assert!(RunConfig::preset("huge").is_err());
    }

    #[test]
    fn echo_parses_back_identically() {
        let mut cfg = RunConfig::desk();
        cfg.seed = 17;
        cfg.data_dir = "corpus".into();
        let dir = std::env::temp_dir().join("dewarp-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("echo.cfg");
        cfg.write_echo(&p).unwrap();
        let mut back = RunConfig::desk();
        back.apply_file(&p).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn file_overrides_and_comments() {
        let dir = std::env::temp_dir().join("dewarp-config-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("partial.cfg");
        std::fs::write(&p, "# comment\nmask_ratio=0.5\n\nseed=4\n").unwrap();
        let mut cfg = RunConfig::desk();
        cfg.apply_file(&p).unwrap();
        assert_eq!(cfg.mask_ratio, 0.5);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.h, 96);
    }

    #[test]
    fn geometry_violations_get_specific_messages() {
        let mut cfg = RunConfig::desk();
        cfg.h = 97;
        let msg = format!("{}", cfg.validate().unwrap_err());
        assert!(msg.contains("97"), "{msg}");
        let mut odd = RunConfig::desk();
        odd.dim = 130;
        assert!(odd.validate().is_err());
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        let mut cfg = RunConfig::desk();
        assert!(cfg.set("learning_rate", "0.1").is_err());
        assert!(cfg.set("epochs", "many").is_err());
        assert!(cfg.set("freeze_encoder", "yes").is_err());
        assert!(cfg.set("heads", "3").is_err());
        cfg.set("heads", "2").unwrap();
    }

    #[test]
    fn compatibility_check_names_the_key() {
        let cfg = RunConfig::desk();
        let mut echoed = cfg.to_kv(false);
        echoed.insert("dim".into(), "256".into());
        let msg = format!("{}", cfg.check_compatible(&echoed).unwrap_err());
        assert!(msg.contains("dim"), "{msg}");
        cfg.check_compatible(&cfg.to_kv(false)).unwrap();
    }
}
