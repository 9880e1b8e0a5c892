//! Flat TOML run configuration. Every key has a default; unknown keys are
//! rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{load_idx, make_synthetic, split, LabeledDataset, SyntheticKind};
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, Grid2D, TransferKind, TransferPair};
use crate::propagation::{Activation, ActivationKind};
use crate::training::{Architecture, BcdConfig, RegConfig, StepRule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub train_images: String,
    pub train_labels: String,
    pub max_examples: usize,
    pub synthetic_n: usize,
    pub grid_n: usize,
    pub noise: f64,
    pub smooth_sigma: f64,
    pub train_fraction: f64,
    pub layers: usize,
    pub final_time: f64,
    pub channels: usize,
    pub kernel: usize,
    pub activation: String,
    pub act_gain: f64,
    pub learn_embed: bool,
    pub init_scale: f64,
    pub lambda_w: f64,
    pub lambda_theta: f64,
    pub outer_iters: usize,
    pub newton_steps: usize,
    pub step_rule: String,
    pub step_size: f64,
    pub armijo_beta: f64,
    pub armijo_c: f64,
    pub batch_size: usize,
    pub transfer: String,
    pub blur_sigma: f64,
    pub coarse_levels: usize,
    pub level_iters: Vec<usize>,
    pub depths: Vec<usize>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: "bars".into(),
            train_images: String::new(),
            train_labels: String::new(),
            max_examples: 0,
            synthetic_n: 200,
            grid_n: 16,
            noise: 0.1,
            smooth_sigma: 0.0,
            train_fraction: 0.8,
            layers: 2,
            final_time: 1.0,
            channels: 4,
            kernel: 3,
            activation: "tanh".into(),
            act_gain: 1.0,
            learn_embed: false,
            init_scale: 0.1,
            lambda_w: 1e-3,
            lambda_theta: 1e-3,
            outer_iters: 10,
            newton_steps: 5,
            step_rule: "armijo".into(),
            step_size: 1.0,
            armijo_beta: 0.5,
            armijo_c: 1e-4,
            batch_size: 0,
            transfer: "constant".into(),
            blur_sigma: 0.0,
            coarse_levels: 1,
            level_iters: Vec::new(),
            depths: vec![2, 4],
            seed: 0,
        }
    }
}

/// `(key, default, description)` for every configuration key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset", "\"bars\"", "bars | blobs | idx"),
    ("train_images", "\"\"", "IDX image file (dataset = idx)"),
    ("train_labels", "\"\"", "IDX label file (dataset = idx)"),
    (
        "max_examples",
        "0",
        "keep only the first n IDX examples (0 = all)",
    ),
    ("synthetic_n", "200", "number of synthetic examples"),
    ("grid_n", "16", "synthetic image side length"),
    ("noise", "0.1", "synthetic pixel noise standard deviation"),
    (
        "smooth_sigma",
        "0.0",
        "Gaussian smoothing of every input image, in pixels (0 = off)",
    ),
    (
        "train_fraction",
        "0.8",
        "training share of the seeded split (1 = no validation set)",
    ),
    ("layers", "2", "number of layers N"),
    ("final_time", "1.0", "final time T; the step is T / N"),
    ("channels", "4", "feature channels"),
    ("kernel", "3", "stencil size k (odd)"),
    ("activation", "\"tanh\"", "tanh | identity"),
    ("act_gain", "1.0", "activation gain a in sigma(a z)"),
    ("learn_embed", "false", "train the input embedding stencils"),
    (
        "init_scale",
        "0.1",
        "standard deviation of random initial weights",
    ),
    (
        "lambda_w",
        "0.001",
        "spatial smoothness weight on classifier fields",
    ),
    (
        "lambda_theta",
        "0.001",
        "smoothness weight on layer parameters across time",
    ),
    ("outer_iters", "10", "block-coordinate-descent iterations"),
    ("newton_steps", "5", "classifier Newton steps per iteration"),
    ("step_rule", "\"armijo\"", "fixed | armijo"),
    ("step_size", "1.0", "fixed step, or initial Armijo step"),
    ("armijo_beta", "0.5", "Armijo backtracking factor"),
    ("armijo_c", "0.0001", "Armijo sufficient-decrease constant"),
    ("batch_size", "0", "examples per iteration (0 = full batch)"),
    (
        "transfer",
        "\"constant\"",
        "constant | bilinear restriction/prolongation pair",
    ),
    (
        "blur_sigma",
        "0.0",
        "blur before each pyramid restriction, in pixels",
    ),
    (
        "coarse_levels",
        "1",
        "number of coarse pyramid levels (multilevel)",
    ),
    (
        "level_iters",
        "[]",
        "iterations per level, finest first (empty = outer_iters)",
    ),
    (
        "depths",
        "[2, 4]",
        "network depths for deepen, each dividing the next",
    ),
    ("seed", "0", "random seed (overridden by --seed)"),
];

/// The key table formatted for `--help`.
pub fn keys_help() -> String {
    let width = KEYS
        .iter()
        .map(|k| k.0.len() + k.1.len() + 3)
        .max()
        .unwrap_or(0);
    let mut s = String::from("Config keys (flat TOML, all optional):\n");
    for (key, default, doc) in KEYS {
        let head = format!("{key} = {default}");
        s.push_str(&format!("  {head:<width$}  {doc}\n"));
    }
    s
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| bad(e.to_string().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical TOML form; used for hashing.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic_kind()?;
        self.transfer_pair()?;
        self.activation_value()?;
        self.step_rule_value()?;
        if self.layers == 0 {
            return Err(bad("layers must be positive"));
        }
        if !(self.final_time > 0.0) {
            return Err(bad("final_time must be positive"));
        }
        if self.channels == 0 {
            return Err(bad("channels must be positive"));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(bad("kernel must be odd"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(bad("train_fraction must lie in (0, 1]"));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("smooth_sigma", self.smooth_sigma),
            ("blur_sigma", self.blur_sigma),
            ("init_scale", self.init_scale),
            ("lambda_w", self.lambda_w),
            ("lambda_theta", self.lambda_theta),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be a nonnegative number")));
            }
        }
        if self.depths.is_empty() {
            return Err(bad("depths must not be empty"));
        }
        if self.level_iters.contains(&0) {
            return Err(bad("level_iters entries must be positive"));
        }
        Ok(())
    }

    /// `None` for IDX input.
    pub fn synthetic_kind(&self) -> Result<Option<SyntheticKind>> {
        match self.dataset.as_str() {
            "idx" => Ok(None),
            name => SyntheticKind::from_name(name)
                .map(Some)
                .ok_or_else(|| bad(format!("unknown dataset `{name}` (bars, blobs, idx)"))),
        }
    }

    pub fn transfer_pair(&self) -> Result<TransferPair> {
        TransferKind::from_name(&self.transfer)
            .map(TransferPair::new)
            .ok_or_else(|| {
                bad(format!(
                    "unknown transfer `{}` (constant, bilinear)",
                    self.transfer
                ))
            })
    }

    pub fn activation_value(&self) -> Result<Activation> {
        let kind = ActivationKind::from_name(&self.activation).ok_or_else(|| {
            bad(format!(
                "unknown activation `{}` (tanh, identity)",
                self.activation
            ))
        })?;
        Ok(Activation {
            kind,
            gain: self.act_gain,
        })
    }

    fn step_rule_value(&self) -> Result<StepRule> {
        match self.step_rule.as_str() {
            "fixed" => Ok(StepRule::Fixed {
                step: self.step_size,
            }),
            "armijo" => Ok(StepRule::Armijo {
                step0: self.step_size,
                beta: self.armijo_beta,
                c: self.armijo_c,
            }),
            other => Err(bad(format!("unknown step_rule `{other}` (fixed, armijo)"))),
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Ok(Architecture {
            layers: self.layers,
            final_time: self.final_time,
            channels: self.channels,
            k: self.kernel,
            activation: self.activation_value()?,
            learn_embed: self.learn_embed,
            init_scale: self.init_scale,
        })
    }

    pub fn reg(&self) -> RegConfig {
        RegConfig {
            lambda_w: self.lambda_w,
            lambda_theta: self.lambda_theta,
        }
    }

    pub fn bcd(&self) -> Result<BcdConfig> {
        Ok(BcdConfig {
            outer_iters: self.outer_iters,
            newton_steps: self.newton_steps,
            step_rule: self.step_rule_value()?,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            seed: self.seed,
        })
    }

    /// Per-level configs, finest first, for `levels` pyramid levels.
    pub fn level_configs(&self, levels: usize) -> Result<Vec<BcdConfig>> {
        let base = self.bcd()?;
        if self.level_iters.is_empty() {
            return Ok(vec![base; levels]);
        }
        if self.level_iters.len() != levels {
            return Err(bad(format!(
                "level_iters has {} entries, expected {levels}",
                self.level_iters.len()
            )));
        }
        Ok(self
            .level_iters
            .iter()
            .map(|&n| BcdConfig {
                outer_iters: n,
                ..base
            })
            .collect())
    }

    /// Loads or generates the data, applies smoothing, and splits it.
    pub fn datasets(&self) -> Result<(LabeledDataset, Option<LabeledDataset>)> {
        let data = match self.synthetic_kind()? {
            Some(kind) => {
                let grid = Grid2D::unit_square(self.grid_n)?;
                make_synthetic(kind, self.synthetic_n, grid, self.noise, self.seed)?
            }
            None => {
                if self.train_images.is_empty() || self.train_labels.is_empty() {
                    return Err(bad("dataset = idx needs train_images and train_labels"));
                }
                let d = load_idx(
                    &PathBuf::from(&self.train_images),
                    &PathBuf::from(&self.train_labels),
                )?;
                if self.max_examples > 0 {
                    d.truncated(self.max_examples)
                } else {
                    d
                }
            }
        };
        let data = if self.smooth_sigma > 0.0 {
            data.map_images(|img| gaussian_blur(img, self.smooth_sigma))?
        } else {
            data
        };
        if self.train_fraction >= 1.0 {
            return Ok((data, None));
        }
        let (train, val) = split(&data, self.train_fraction, self.seed)?;
        Ok((train, Some(val)))
    }
}
