//! Flat `key = value` configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional; unknown
//! keys are rejected so that typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gabor::{FilterKind, GaborParams};

/// Which detector objective the detector phase minimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorObjective {
    /// Repeatability term plus weighted multi-scale triplet term.
    Combined,
    Msip,
    MsTrip,
}

impl FromStr for DetectorObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "combined" => Ok(Self::Combined),
            "msip" => Ok(Self::Msip),
            "mstrip" => Ok(Self::MsTrip),
            other => Err(Error::Config(format!("unknown detector objective {other:?}"))),
        }
    }
}

impl DetectorObjective {
    pub fn name(self) -> &'static str {
        match self {
            Self::Combined => "combined",
            Self::Msip => "msip",
            Self::MsTrip => "mstrip",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub gabor: GaborParams,
    pub filter: FilterKind,
    pub sign_split: bool,
    pub multiscale: bool,
    /// Descriptor dimension D.
    pub dim: usize,
    /// Width of the first encoder stage; later stages use `width` and `2 * width`.
    pub width: usize,
    /// Channels of the detector's hidden layers.
    pub detector_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gabor: GaborParams::default(),
            filter: FilterKind::Gabor,
            sign_split: true,
            multiscale: true,
            dim: 32,
            width: 32,
            detector_width: 16,
        }
    }
}

impl ModelConfig {
    pub fn pyramid_levels(&self) -> usize {
        if self.multiscale {
            3
        } else {
            1
        }
    }

    pub fn block_channels(&self) -> usize {
        if self.sign_split {
            24
        } else {
            8
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub mu: f64,
    pub beta: f64,
    pub windows: Vec<usize>,
    pub lambdas: Vec<f64>,
    /// Chebyshev radius, in grid cells, of the negative-exclusion zone.
    pub exclusion_cells: usize,
    /// Pixel radius around the true match excluded from descriptor negatives.
    pub exclusion_px: f64,
    /// Soft-argmax temperature on raw scores.
    pub temperature: f64,
    pub detector: DetectorObjective,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            beta: 0.4,
            windows: vec![8, 16, 24, 32],
            lambdas: vec![64.0, 16.0, 4.0, 1.0],
            exclusion_cells: 1,
            exclusion_px: 8.0,
            temperature: 1.0,
            detector: DetectorObjective::Combined,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub crop: usize,
    pub batch: usize,
    /// Anchors per image for the descriptor loss.
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub lr_halve_every: usize,
    pub momentum: f64,
    /// Global gradient-norm bound per update; 0 disables clipping.
    pub clip: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub min_valid: f64,
    pub jitter: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crop: 96,
            batch: 8,
            k: 20,
            steps: 1000,
            lr: 0.01,
            lr_halve_every: 1000,
            momentum: 0.9,
            clip: 1.0,
            seed: 0,
            checkpoint_every: 0,
            min_valid: 0.7,
            jitter: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub nms_window: usize,
    pub top: usize,
    pub pairs: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            nms_window: 15,
            top: 100,
            pairs: 50,
            seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on|off, got {v:?}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        let e = &mut self.eval;
        match key {
            "gabor.size" => m.gabor.size = parse_num(key, v)?,
            "gabor.sigma" => m.gabor.sigma = parse_num(key, v)?,
            "gabor.lambda" => m.gabor.lambda = parse_num(key, v)?,
            "gabor.gamma" => m.gabor.gamma = parse_num(key, v)?,
            "gabor.psi" => m.gabor.psi = parse_num(key, v)?,
            "block.filter" => m.filter = v.parse()?,
            "block.sign_split" => m.sign_split = parse_switch(key, v)?,
            "descriptor.multiscale" => m.multiscale = parse_switch(key, v)?,
            "descriptor.dim" => m.dim = parse_num(key, v)?,
            "descriptor.width" => m.width = parse_num(key, v)?,
            "descriptor.profile" => match v {
                "desk" => m.width = 32,
                "paper" => {
                    m.width = 64;
                    m.dim = 256;
                }
                _ => return Err(Error::Config(format!("{key}: expected desk|paper, got {v:?}"))),
            },
            "detector.width" => m.detector_width = parse_num(key, v)?,
            "detector.nms_window" => e.nms_window = parse_num(key, v)?,
            "detector.topk" => t.k = parse_num(key, v)?,
            "detector.temperature" => l.temperature = parse_num(key, v)?,
            "loss.mu" => l.mu = parse_num(key, v)?,
            "loss.beta" => l.beta = parse_num(key, v)?,
            "loss.windows" => l.windows = parse_list(key, v)?,
            "loss.lambdas" => l.lambdas = parse_list(key, v)?,
            "loss.exclusion_cells" => l.exclusion_cells = parse_num(key, v)?,
            "loss.exclusion_px" => l.exclusion_px = parse_num(key, v)?,
            "loss.detector" => l.detector = v.parse()?,
            "train.crop" => t.crop = parse_num(key, v)?,
            "train.batch" => t.batch = parse_num(key, v)?,
            "train.steps" => t.steps = parse_num(key, v)?,
            "train.lr" => t.lr = parse_num(key, v)?,
            "train.lr_halve_every" => t.lr_halve_every = parse_num(key, v)?,
            "train.momentum" => t.momentum = parse_num(key, v)?,
            "train.seed" => t.seed = parse_num(key, v)?,
            "train.clip" => t.clip = parse_num(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "train.min_valid" => t.min_valid = parse_num(key, v)?,
            "train.jitter" => t.jitter = parse_switch(key, v)?,
            "eval.top" => e.top = parse_num(key, v)?,
            "eval.pairs" => e.pairs = parse_num(key, v)?,
            "eval.seed" => e.seed = parse_num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.model
            .gabor
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.model.dim == 0 || self.model.width == 0 || self.model.detector_width == 0 {
            return bad("descriptor.dim, descriptor.width and detector.width must be positive".into());
        }
        let l = &self.loss;
        if l.windows.len() != l.lambdas.len() || l.windows.is_empty() {
            return bad("loss.windows and loss.lambdas must be non-empty and of equal length".into());
        }
        if l.windows.iter().any(|&s| s < 2) || l.lambdas.iter().any(|&x| x <= 0.0) {
            return bad("loss windows must be >= 2 and lambdas positive".into());
        }
        if !(l.mu > 0.0 && l.beta >= 0.0 && l.temperature > 0.0) {
            return bad("loss.mu and detector.temperature must be positive, loss.beta non-negative".into());
        }
        let t = &self.train;
        let largest = *l.windows.iter().max().unwrap_or(&1);
        if t.crop % 4 != 0 || t.crop % largest != 0 {
            return bad(format!("train.crop {} must be divisible by 4 and by the largest window {largest}", t.crop));
        }
        if !(t.lr >= 0.0 && (0.0..1.0).contains(&t.momentum) && t.clip >= 0.0) {
            return bad("train.lr and train.clip must be non-negative, train.momentum in [0, 1)".into());
        }
        if t.batch == 0 || t.k == 0 {
            return bad("train.batch and detector.topk must be positive".into());
        }
        if self.eval.nms_window % 2 == 0 {
            return bad("detector.nms_window must be odd".into());
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order, round-trips through
    /// [`Config::parse`].
    pub fn to_text(&self) -> String {
        let (m, l, t, e) = (&self.model, &self.loss, &self.train, &self.eval);
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("gabor.size", m.gabor.size.to_string());
        kv("gabor.sigma", m.gabor.sigma.to_string());
        kv("gabor.lambda", m.gabor.lambda.to_string());
        kv("gabor.gamma", m.gabor.gamma.to_string());
        kv("gabor.psi", m.gabor.psi.to_string());
        kv("block.filter", m.filter.to_string());
        kv("block.sign_split", switch(m.sign_split).into());
        kv("descriptor.multiscale", switch(m.multiscale).into());
        kv("descriptor.dim", m.dim.to_string());
        kv("descriptor.width", m.width.to_string());
        kv("detector.width", m.detector_width.to_string());
        kv("detector.nms_window", e.nms_window.to_string());
        kv("detector.topk", t.k.to_string());
        kv("detector.temperature", l.temperature.to_string());
        kv("loss.mu", l.mu.to_string());
        kv("loss.beta", l.beta.to_string());
        kv("loss.windows", join(&l.windows));
        kv("loss.lambdas", join(&l.lambdas));
        kv("loss.exclusion_cells", l.exclusion_cells.to_string());
        kv("loss.exclusion_px", l.exclusion_px.to_string());
        kv("loss.detector", l.detector.name().into());
        kv("train.crop", t.crop.to_string());
        kv("train.batch", t.batch.to_string());
        kv("train.steps", t.steps.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.lr_halve_every", t.lr_halve_every.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.seed", t.seed.to_string());
        kv("train.clip", t.clip.to_string());
        kv("train.checkpoint_every", t.checkpoint_every.to_string());
        kv("train.min_valid", t.min_valid.to_string());
        kv("train.jitter", switch(t.jitter).into());
        kv("eval.top", e.top.to_string());
        kv("eval.pairs", e.pairs.to_string());
        kv("eval.seed", e.seed.to_string());
        s
    }

    /// SHA-256 of the canonical text, lowercase hex.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}
