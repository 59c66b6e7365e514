//! Run configuration: every hyperparameter in one flat struct, readable from
//! a `key = value` text file with strict schema validation.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// How the second subnet's input is made distinct from the first's.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiversityMode {
    /// Gaussian perturbation followed by the learned diversifier (default).
    DNet,
    /// Feed the noise-perturbed trajectory directly.
    Noise,
    /// Zero out two random observed timesteps.
    Drop,
    /// Zero out a contiguous two-step span.
    Mask,
}

impl DiversityMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DiversityMode::DNet => "dnet",
            DiversityMode::Noise => "noise",
            DiversityMode::Drop => "drop",
            DiversityMode::Mask => "mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dnet" => Ok(DiversityMode::DNet),
            "noise" => Ok(DiversityMode::Noise),
            "drop" => Ok(DiversityMode::Drop),
            "mask" => Ok(DiversityMode::Mask),
            other => Err(Error::Validation(format!(
                "unknown diversity_mode {other:?} (expected dnet|noise|drop|mask)"
            ))),
        }
    }

    pub const ALL: [DiversityMode; 4] = [
        DiversityMode::DNet,
        DiversityMode::Noise,
        DiversityMode::Drop,
        DiversityMode::Mask,
    ];
}

/// Loss used for the primary trajectory-regression task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimaryLoss {
    Huber,
    Mse,
}

impl PrimaryLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            PrimaryLoss::Huber => "huber",
            PrimaryLoss::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "huber" => Ok(PrimaryLoss::Huber),
            "mse" => Ok(PrimaryLoss::Mse),
            other => Err(Error::Validation(format!(
                "unknown primary_loss {other:?} (expected huber|mse)"
            ))),
        }
    }
}

/// All hyperparameters of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct CcfConfig {
    /// Observed timesteps per window.
    pub t_ob: usize,
    /// Predicted timesteps per window.
    pub t_pred: usize,
    /// Number of trajectory classes (anchors and candidates).
    pub k: usize,
    /// Embedding size.
    pub d: usize,
    /// Attention heads; must divide `d`.
    pub heads: usize,
    /// Encoder layers.
    pub l_e: usize,
    /// Decoder layers.
    pub l_d: usize,
    /// Diversifier hidden width.
    pub dnet_hidden: usize,
    /// Maximum neighbors kept per window.
    pub neighbor_cap: usize,
    /// Noise factor scaling the Gaussian perturbation.
    pub alpha: f64,
    /// Weight of the cross-correction terms in the total loss.
    pub lambda: f64,
    /// Huber transition point.
    pub huber_delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of windows (chronologically earliest) used for training.
    pub train_frac: f64,
    /// Ablation: drop the classification loss terms.
    pub no_secondary_task: bool,
    /// Ablation: drop the cross-correction loss terms.
    pub no_cross_correction: bool,
    pub diversity_mode: DiversityMode,
    pub primary_loss: PrimaryLoss,
    /// Whether gradients from the second subnet reach the diversifier
    /// through its output.
    pub dnet_feedback: bool,
}

impl Default for CcfConfig {
    fn default() -> Self {
        CcfConfig {
            t_ob: 8,
            t_pred: 12,
            k: 20,
            d: 64,
            heads: 4,
            l_e: 1,
            l_d: 1,
            dnet_hidden: 64,
            neighbor_cap: 16,
            alpha: 0.1,
            lambda: 0.1,
            huber_delta: 1.0,
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 1,
            train_frac: 0.8,
            no_secondary_task: false,
            no_cross_correction: false,
            diversity_mode: DiversityMode::DNet,
            primary_loss: PrimaryLoss::Huber,
            dnet_feedback: true,
        }
    }
}

impl CcfConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("t_ob", self.t_ob),
            ("t_pred", self.t_pred),
            ("d", self.d),
            ("heads", self.heads),
            ("l_d", self.l_d),
            ("dnet_hidden", self.dnet_hidden),
            ("batch_size", self.batch_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Validation(format!("{name} must be positive")));
            }
        }
        if self.k < 2 {
            return Err(Error::Validation("k must be at least 2".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Validation(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        if self.alpha < 0.0 {
            return Err(Error::Validation("alpha must be nonnegative".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Validation("lambda must be nonnegative".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::Validation("huber_delta must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Validation("learning_rate must be positive".into()));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Validation(
                "train_frac must be strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }

    /// Canonical text form: one `key = value` per line, fixed key order.
    /// Feeding it back through [`CcfConfig::parse`] reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("t_ob", self.t_ob.to_string());
        kv("t_pred", self.t_pred.to_string());
        kv("k", self.k.to_string());
        kv("d", self.d.to_string());
        kv("heads", self.heads.to_string());
        kv("l_e", self.l_e.to_string());
        kv("l_d", self.l_d.to_string());
        kv("dnet_hidden", self.dnet_hidden.to_string());
        kv("neighbor_cap", self.neighbor_cap.to_string());
        kv("alpha", format_f64(self.alpha));
        kv("lambda", format_f64(self.lambda));
        kv("huber_delta", format_f64(self.huber_delta));
        kv("learning_rate", format_f64(self.learning_rate));
        kv("batch_size", self.batch_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("seed", self.seed.to_string());
        kv("train_frac", format_f64(self.train_frac));
        kv("no_secondary_task", self.no_secondary_task.to_string());
        kv("no_cross_correction", self.no_cross_correction.to_string());
        kv("diversity_mode", self.diversity_mode.as_str().to_string());
        kv("primary_loss", self.primary_loss.as_str().to_string());
        kv("dnet_feedback", self.dnet_feedback.to_string());
        s
    }

    /// Parses `key = value` text. Every key must name a known field; unknown
    /// keys are hard errors. `#` starts a comment; blank lines are skipped.
    /// Missing keys keep their defaults.
    pub fn parse(text: &str, path_label: &str) -> Result<CcfConfig> {
        let mut cfg = CcfConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: format!("expected `key = value`, got {raw:?}"),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let err = |msg: String| Error::Parse {
                path: path_label.to_string(),
                line: line_no,
                msg,
            };
            macro_rules! num {
                ($t:ty) => {
                    value
                        .parse::<$t>()
                        .map_err(|_| err(format!("key {key:?}: invalid value {value:?}")))?
                };
            }
            match key {
                "t_ob" => cfg.t_ob = num!(usize),
                "t_pred" => cfg.t_pred = num!(usize),
                "k" => cfg.k = num!(usize),
                "d" => cfg.d = num!(usize),
                "heads" => cfg.heads = num!(usize),
                "l_e" => cfg.l_e = num!(usize),
                "l_d" => cfg.l_d = num!(usize),
                "dnet_hidden" => cfg.dnet_hidden = num!(usize),
                "neighbor_cap" => cfg.neighbor_cap = num!(usize),
                "alpha" => cfg.alpha = num!(f64),
                "lambda" => cfg.lambda = num!(f64),
                "huber_delta" => cfg.huber_delta = num!(f64),
                "learning_rate" => cfg.learning_rate = num!(f64),
                "batch_size" => cfg.batch_size = num!(usize),
                "epochs" => cfg.epochs = num!(usize),
                "seed" => cfg.seed = num!(u64),
                "train_frac" => cfg.train_frac = num!(f64),
                "no_secondary_task" => cfg.no_secondary_task = num!(bool),
                "no_cross_correction" => cfg.no_cross_correction = num!(bool),
                "diversity_mode" => cfg.diversity_mode = DiversityMode::parse(value)?,
                "primary_loss" => cfg.primary_loss = PrimaryLoss::parse(value)?,
                "dnet_feedback" => cfg.dnet_feedback = num!(bool),
                unknown => {
                    return Err(err(format!("unknown config key {unknown:?}")));
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<CcfConfig> {
        let text = std::fs::read_to_string(path)?;
        CcfConfig::parse(&text, &path.display().to_string())
    }
}

/// f64 formatting that survives an exact text round trip.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    if s.parse::<f64>() == Ok(v) {
        s
    } else {
        format!("{v:e}")
    }
}
