//! Run configuration and its flat `key = value` text format.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::ConfigError;
use crate::eval::CvConfig;
use crate::objectives::{LossConfig, Negatives};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: String,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_lr: f64,
    pub meta_lr: f64,
    pub tau: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub aug_ratio: f64,
    pub seed: u64,
    pub enable_dr: bool,
    pub enable_rr: bool,
    pub fixed_r: Option<f64>,
    pub hidden: Vec<usize>,
    pub projection: [usize; 2],
    pub negatives: Negatives,
    /// Drops the second-order path in the meta gradient (comparison only).
    pub first_order_meta: bool,
    pub cv_folds: usize,
    pub cv_seeds: usize,
    pub c_grid: Vec<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "MUTAG".into(),
            batch_size: 128,
            epochs: 20,
            pretrain_lr: 0.01,
            meta_lr: 0.01,
            tau: 0.1,
            lambda: 0.001,
            alpha: 10.0,
            aug_ratio: 0.2,
            seed: 0,
            enable_dr: true,
            enable_rr: true,
            fixed_r: None,
            hidden: vec![32, 32, 32],
            projection: [512, 512],
            negatives: Negatives::Exclusive,
            first_order_meta: false,
            cv_folds: 10,
            cv_seeds: 5,
            c_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0],
        }
    }
}

const KEYS: &[&str] = &[
    "dataset",
    "batch_size",
    "epochs",
    "pretrain_lr",
    "meta_lr",
    "tau",
    "lambda",
    "alpha",
    "aug_ratio",
    "seed",
    "enable_dr",
    "enable_rr",
    "fixed_R",
    "hidden",
    "projection",
    "negatives",
    "first_order_meta",
    "cv_folds",
    "cv_seeds",
    "c_grid",
];

/// Ordered `key -> value` pairs before interpretation.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = Self::default();
        for (i, line) in text.lines().enumerate() {
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                detail: format!("expected `key = value`, found `{body}`"),
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    detail: "empty key".into(),
                });
            }
            if !KEYS.contains(&key) {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    detail: format!("unknown key `{key}`"),
                });
            }
            raw.entries.insert(key.to_string(), value.trim().to_string());
        }
        Ok(raw)
    }

    /// Applies a `KEY=VALUE` override.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (key, value) = assignment.split_once('=').ok_or_else(|| ConfigError::InvalidValue {
            key: assignment.to_string(),
            value: String::new(),
            detail: "expected KEY=VALUE".into(),
        })?;
        let key = key.trim();
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Overlays every entry of `other` onto `self`.
    pub fn merge(&mut self, other: &RawConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        for (key, value) in &self.entries {
            let invalid = |detail: &str| ConfigError::InvalidValue {
                key: key.clone(),
                value: value.clone(),
                detail: detail.to_string(),
            };
            let num = || value.parse::<f64>().map_err(|_| invalid("expected a number"));
            let count = || value.parse::<usize>().map_err(|_| invalid("expected a non-negative integer"));
            let flag = || value.parse::<bool>().map_err(|_| invalid("expected true or false"));
            let list = || -> Result<Vec<usize>, ConfigError> {
                value
                    .split(',')
                    .map(|s| s.trim().parse::<usize>().map_err(|_| invalid("expected a comma-separated list of integers")))
                    .collect()
            };
            match key.as_str() {
                "dataset" => cfg.dataset = value.clone(),
                "batch_size" => cfg.batch_size = count()?,
                "epochs" => cfg.epochs = count()?,
                "pretrain_lr" => cfg.pretrain_lr = num()?,
                "meta_lr" => cfg.meta_lr = num()?,
                "tau" => cfg.tau = num()?,
                "lambda" => cfg.lambda = num()?,
                "alpha" => cfg.alpha = num()?,
                "aug_ratio" => cfg.aug_ratio = num()?,
                "seed" => cfg.seed = value.parse().map_err(|_| invalid("expected an unsigned integer"))?,
                "enable_dr" => cfg.enable_dr = flag()?,
                "enable_rr" => cfg.enable_rr = flag()?,
                "fixed_R" => {
                    cfg.fixed_r = match value.as_str() {
                        "none" | "" => None,
                        _ => Some(num()?),
                    }
                }
                "hidden" => cfg.hidden = list()?,
                "projection" => {
                    let widths = list()?;
                    cfg.projection = widths
                        .try_into()
                        .map_err(|_| invalid("expected two widths"))?;
                }
                "negatives" => {
                    cfg.negatives = match value.as_str() {
                        "exclusive" => Negatives::Exclusive,
                        "inclusive" => Negatives::Inclusive,
                        _ => return Err(invalid("expected exclusive or inclusive")),
                    }
                }
                "first_order_meta" => cfg.first_order_meta = flag()?,
                "cv_folds" => cfg.cv_folds = count()?,
                "cv_seeds" => cfg.cv_seeds = count()?,
                "c_grid" => {
                    cfg.c_grid = value
                        .split(',')
                        .map(|s| s.trim().parse::<f64>().map_err(|_| invalid("expected a comma-separated list of numbers")))
                        .collect::<Result<_, _>>()?
                }
                other => return Err(ConfigError::UnknownKey(other.to_string())),
            }
        }
        if cfg.fixed_r.is_some() {
            if self.get("enable_dr") == Some("true") {
                return Err(ConfigError::Inconsistent(
                    "fixed_R requires enable_dr = false".into(),
                ));
            }
            cfg.enable_dr = false;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        RawConfig::parse(text)?.resolve()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Inconsistent(msg));
        for (name, v) in [
            ("pretrain_lr", self.pretrain_lr),
            ("meta_lr", self.meta_lr),
            ("tau", self.tau),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return fail(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("lambda", self.lambda), ("alpha", self.alpha)] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.aug_ratio) {
            return fail(format!("aug_ratio must lie in [0, 1], got {}", self.aug_ratio));
        }
        if let Some(r) = self.fixed_r {
            if !(0.0..=1.0).contains(&r) {
                return fail(format!("fixed_R must lie in [0, 1], got {r}"));
            }
            if self.enable_dr {
                return fail("fixed_R requires enable_dr = false".into());
            }
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) || self.projection.contains(&0) {
            return fail("layer widths must be positive".into());
        }
        if self.cv_folds < 2 || self.cv_seeds == 0 || self.c_grid.is_empty() {
            return fail("need cv_folds >= 2, cv_seeds >= 1 and a non-empty c_grid".into());
        }
        if self.c_grid.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return fail("c_grid entries must be positive".into());
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            alpha: self.alpha,
            negatives: self.negatives,
            enable_rr: self.enable_rr,
        }
    }

    /// Downstream cross-validation settings; fold shuffles derive from `seed`.
    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            folds: self.cv_folds,
            seeds: self.cv_seeds,
            c_grid: self.c_grid.clone(),
            base_seed: self.seed,
            ..CvConfig::default()
        }
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "dataset = {}", self.dataset);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "pretrain_lr = {:?}", self.pretrain_lr);
        let _ = writeln!(s, "meta_lr = {:?}", self.meta_lr);
        let _ = writeln!(s, "tau = {:?}", self.tau);
        let _ = writeln!(s, "lambda = {:?}", self.lambda);
        let _ = writeln!(s, "alpha = {:?}", self.alpha);
        let _ = writeln!(s, "aug_ratio = {:?}", self.aug_ratio);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "enable_dr = {}", self.enable_dr);
        let _ = writeln!(s, "enable_rr = {}", self.enable_rr);
        match self.fixed_r {
            Some(r) => {
                let _ = writeln!(s, "fixed_R = {r:?}");
            }
            None => {
                let _ = writeln!(s, "fixed_R = none");
            }
        }
        let _ = writeln!(s, "hidden = {}", join(&self.hidden));
        let _ = writeln!(s, "projection = {}", join(&self.projection));
        let neg = match self.negatives {
            Negatives::Exclusive => "exclusive",
            Negatives::Inclusive => "inclusive",
        };
        let _ = writeln!(s, "negatives = {neg}");
        let _ = writeln!(s, "first_order_meta = {}", self.first_order_meta);
        let _ = writeln!(s, "cv_folds = {}", self.cv_folds);
        let _ = writeln!(s, "cv_seeds = {}", self.cv_seeds);
        let grid: Vec<String> = self.c_grid.iter().map(|c| format!("{c:?}")).collect();
        let _ = writeln!(s, "c_grid = {}", grid.join(","));
        s
    }
}
