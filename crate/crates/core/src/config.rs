//! Flat `key=value` run configuration.
//!
//! Every experiment knob lives in one flat text file so two configs diff as
//! line diffs.  Every key has a default; unknown and duplicate keys are
//! rejected so a typo cannot silently fall back to a default.  `to_text`
//! echoes the effective configuration in a fixed key order and parses back
//! to an identical value.

use crate::spatial::Adjacency;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("config line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("config line {line}: duplicate key {key:?}")]
    DuplicateKey { line: usize, key: String },
    #[error("config key {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("config: {0}")]
    Invalid(String),
}

/// Full experiment configuration.  Field-by-field defaults:
///
/// | key | default | meaning |
/// |---|---|---|
/// | `seed` | 7 | master RNG seed for data, init, and noise |
/// | `t` | 10 | frames per sequence |
/// | `image_h`, `image_w` | 48 | full-resolution frame size |
/// | `d` | 2 | downsampling factor for the cheap global view |
/// | `crop` | 16 | square side of each full-resolution crop |
/// | `k` | 2 | crops per frame |
/// | `lambda` | 3 | backbone layers in the pre-scan half (stem convs + attention) |
/// | `m` | 1 | maximum skip range (policy emits m+1 logits) |
/// | `tau` | 1.0 | Gumbel-softmax temperature |
/// | `theta_e` | 1.0 | efficiency-loss weight in joint training |
/// | `theta_h` | 1,0.5,1 | per-head classification loss weights |
/// | `lr` | 0.01 | SGD learning rate |
/// | `momentum` | 0.0 | SGD momentum |
/// | `epochs` | 60 | training epochs per phase |
/// | `lr_decay_epochs` | (empty) | epochs at which lr multiplies by the decay factor |
/// | `lr_decay_factor` | 0.1 | multiplier applied at each decay epoch |
/// | `adjacency` | manhattan2 | region connectivity: `manhattan2` or `eightway` |
/// | `tau_s` | 0.5 | suppression fraction of the attention maximum |
/// | `normalize_efficiency_loss` | true | divide the efficiency loss by the all-full budget |
/// | `n_train` | 120 | training sequences |
/// | `n_eval` | 60 | held-out sequences |
/// | `classes` | 3 | trajectory classes (2 or 3) |
/// | `c_stem` | 8 | stem/attention channels |
/// | `c_head` | 16 | backbone output features |
/// | `attn_r` | 3 | attention footprint side (odd) |
/// | `c_hall` | 4 | hallucinator hidden channels |
/// | `gru_hidden` | 32 | classifier GRU width |
/// | `policy_hidden` | 128 | skip-policy GRU width |
/// | `policy_layers` | 2 | skip-policy GRU depth |
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub t: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub d: usize,
    pub crop: usize,
    pub k: usize,
    pub lambda: usize,
    pub m: usize,
    pub tau: f64,
    pub theta_e: f64,
    pub theta_h: [f64; 3],
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub adjacency: Adjacency,
    pub tau_s: f64,
    pub normalize_efficiency_loss: bool,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub c_stem: usize,
    pub c_head: usize,
    pub attn_r: usize,
    pub c_hall: usize,
    pub gru_hidden: usize,
    pub policy_hidden: usize,
    pub policy_layers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            t: 10,
            image_h: 48,
            image_w: 48,
            d: 2,
            crop: 16,
            k: 2,
            lambda: 3,
            m: 1,
            tau: 1.0,
            theta_e: 1.0,
            theta_h: [1.0, 0.5, 1.0],
            lr: 0.01,
            momentum: 0.0,
            epochs: 60,
            lr_decay_epochs: Vec::new(),
            lr_decay_factor: 0.1,
            adjacency: Adjacency::Manhattan2,
            tau_s: 0.5,
            normalize_efficiency_loss: true,
            n_train: 120,
            n_eval: 60,
            classes: 3,
            c_stem: 8,
            c_head: 16,
            attn_r: 3,
            c_hall: 4,
            gru_hidden: 32,
            policy_hidden: 128,
            policy_layers: 2,
        }
    }
}

fn adjacency_name(a: Adjacency) -> &'static str {
    match a {
        Adjacency::Manhattan2 => "manhattan2",
        Adjacency::EightWay => "eightway",
    }
}

impl RunConfig {
    /// Parse a flat key=value text.  `#` starts a comment; blank lines are
    /// skipped; keys not listed in the table above are errors, as are
    /// repeated keys.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: body.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|e| match e {
                ConfigError::UnknownKey { key, .. } => ConfigError::UnknownKey { line, key },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.parse().map_err(|e| ConfigError::BadValue {
                key: key.to_string(),
                reason: format!("{e}"),
            })
        }
        match key {
            "seed" => self.seed = parse(key, value)?,
            "t" => self.t = parse(key, value)?,
            "image_h" => self.image_h = parse(key, value)?,
            "image_w" => self.image_w = parse(key, value)?,
            "d" => self.d = parse(key, value)?,
            "crop" => self.crop = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "theta_e" => self.theta_e = parse(key, value)?,
            "theta_h" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        reason: format!("expected three comma-separated weights, got {value:?}"),
                    });
                }
                for (slot, p) in self.theta_h.iter_mut().zip(parts) {
                    *slot = parse(key, p)?;
                }
            }
            "lr" => self.lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_decay_epochs" => {
                self.lr_decay_epochs = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|p| parse(key, p.trim()))
                        .collect::<Result<_, _>>()?
                };
            }
            "lr_decay_factor" => self.lr_decay_factor = parse(key, value)?,
            "adjacency" => {
                self.adjacency = match value {
                    "manhattan2" => Adjacency::Manhattan2,
                    "eightway" => Adjacency::EightWay,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.to_string(),
                            reason: format!(
                                "expected manhattan2 or eightway, got {other:?}"
                            ),
                        })
                    }
                };
            }
            "tau_s" => self.tau_s = parse(key, value)?,
            "normalize_efficiency_loss" => {
                self.normalize_efficiency_loss = parse(key, value)?
            }
            "n_train" => self.n_train = parse(key, value)?,
            "n_eval" => self.n_eval = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "c_stem" => self.c_stem = parse(key, value)?,
            "c_head" => self.c_head = parse(key, value)?,
            "attn_r" => self.attn_r = parse(key, value)?,
            "c_hall" => self.c_hall = parse(key, value)?,
            "gru_hidden" => self.gru_hidden = parse(key, value)?,
            "policy_hidden" => self.policy_hidden = parse(key, value)?,
            "policy_layers" => self.policy_layers = parse(key, value)?,
            other => {
                return Err(ConfigError::UnknownKey {
                    line: 0,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    /// Echo the effective configuration; parses back to an equal value.
    pub fn to_text(&self) -> String {
        let decay: Vec<String> = self.lr_decay_epochs.iter().map(usize::to_string).collect();
        format!(
            "seed={}\nt={}\nimage_h={}\nimage_w={}\nd={}\ncrop={}\nk={}\nlambda={}\nm={}\n\
             tau={}\ntheta_e={}\ntheta_h={},{},{}\nlr={}\nmomentum={}\nepochs={}\n\
             lr_decay_epochs={}\nlr_decay_factor={}\nadjacency={}\ntau_s={}\n\
             normalize_efficiency_loss={}\nn_train={}\nn_eval={}\nclasses={}\nc_stem={}\n\
             c_head={}\nattn_r={}\nc_hall={}\ngru_hidden={}\npolicy_hidden={}\npolicy_layers={}\n",
            self.seed,
            self.t,
            self.image_h,
            self.image_w,
            self.d,
            self.crop,
            self.k,
            self.lambda,
            self.m,
            self.tau,
            self.theta_e,
            self.theta_h[0],
            self.theta_h[1],
            self.theta_h[2],
            self.lr,
            self.momentum,
            self.epochs,
            decay.join(","),
            self.lr_decay_factor,
            adjacency_name(self.adjacency),
            self.tau_s,
            self.normalize_efficiency_loss,
            self.n_train,
            self.n_eval,
            self.classes,
            self.c_stem,
            self.c_head,
            self.attn_r,
            self.c_hall,
            self.gru_hidden,
            self.policy_hidden,
            self.policy_layers,
        )
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if self.t == 0 {
            return fail("t must be at least 1".into());
        }
        if self.d == 0 || self.image_h % self.d != 0 || self.image_w % self.d != 0 {
            return fail(format!(
                "image dims {}x{} must divide by d={}",
                self.image_h, self.image_w, self.d
            ));
        }
        if self.crop == 0 || self.crop > self.image_h || self.crop > self.image_w {
            return fail(format!(
                "crop {} must fit inside {}x{} images",
                self.crop, self.image_h, self.image_w
            ));
        }
        if self.lambda < 2 {
            return fail("lambda must be at least 2 (one stem conv plus attention)".into());
        }
        if self.m == 0 {
            return fail("m must be at least 1".into());
        }
        if self.tau <= 0.0 {
            return fail(format!("tau must be positive, got {}", self.tau));
        }
        if self.theta_e < 0.0 {
            return fail(format!("theta_e must be nonnegative, got {}", self.theta_e));
        }
        if self.theta_h.iter().any(|&w| w < 0.0) {
            return fail(format!("theta_h must be nonnegative, got {:?}", self.theta_h));
        }
        if self.lr <= 0.0 {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must be in [0,1), got {}", self.momentum));
        }
        if self.lr_decay_factor <= 0.0 {
            return fail(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        if !(self.tau_s > 0.0 && self.tau_s < 1.0) {
            return fail(format!("tau_s must be in (0,1), got {}", self.tau_s));
        }
        if !(2..=3).contains(&self.classes) {
            return fail(format!(
                "classes must be 2 or 3 (one per trajectory kind), got {}",
                self.classes
            ));
        }
        if self.attn_r == 0 || self.attn_r % 2 == 0 {
            return fail(format!("attn_r must be odd, got {}", self.attn_r));
        }
        for (name, v) in [
            ("c_stem", self.c_stem),
            ("c_head", self.c_head),
            ("c_hall", self.c_hall),
            ("gru_hidden", self.gru_hidden),
            ("policy_hidden", self.policy_hidden),
            ("policy_layers", self.policy_layers),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        Ok(())
    }
}
