//! Run configuration: JSON with unknown keys rejected. Presets cover the
//! synthetic experiments; everything can be overridden per field.

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use nspvi::train::TrainConfig;
use nspvi::variational::UsapConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// "1-hidden", "2-hidden", or "explicit" (then `hidden_sizes` is required).
    pub architecture: String,
    /// Hidden-layer widths, bottom to top.
    pub hidden_sizes: Vec<usize>,
    /// Observed process count (K_0).
    pub n_types: usize,
    pub window: f64,
    /// Generative constant rate for the top layer.
    pub top_rate: f64,
    /// Generative kernel for every edge (shared, as in the synthetic setup).
    pub gen_kernel: KernelConfig,
    /// Freeze the shape parameter of the model kernels during training.
    pub fix_k_shape: bool,
    pub usap: UsapDims,
    pub train: TrainSection,
    /// Benchmark sample counts.
    pub sweep: Vec<usize>,
    pub counts: SplitCounts,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            architecture: "1-hidden".into(),
            hidden_sizes: vec![],
            n_types: 2,
            window: 20.0,
            top_rate: 0.15,
            gen_kernel: KernelConfig { p: 2.5, k: 1.0, lam: 2.0 },
            fix_k_shape: true,
            usap: UsapDims::default(),
            train: TrainSection::default(),
            sweep: vec![1, 2, 4, 8, 16],
            counts: SplitCounts { train: 1000, validation: 100, test: 100 },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub p: f64,
    pub k: f64,
    pub lam: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UsapDims {
    pub d_k: usize,
    pub d_v: usize,
    pub d_m: usize,
    pub d_h: usize,
    pub heads: usize,
}

impl Default for UsapDims {
    fn default() -> Self {
        Self { d_k: 8, d_v: 8, d_m: 32, d_h: 64, heads: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub iterations: usize,
    pub model_step: f64,
    pub variational_step: f64,
    pub batch_size: Option<usize>,
    pub burn_in: usize,
    pub thin: usize,
    pub val_cadence: usize,
    pub patience: usize,
    pub val_samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            iterations: d.iterations,
            model_step: d.model_step,
            variational_step: d.variational_step,
            batch_size: d.batch_size,
            burn_in: d.burn_in,
            thin: d.thin,
            val_cadence: d.val_cadence,
            patience: d.patience,
            val_samples: d.val_samples,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl RunConfig {
    pub fn load(path: Option<&std::path::Path>) -> anyhow::Result<Self> {
        let mut cfg = match path {
            None => Self::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
        };
        cfg.validate()?;
        // fill in preset widths if none were given
        if cfg.hidden_sizes.is_empty() {
            cfg.hidden_sizes = match cfg.architecture.as_str() {
                "1-hidden" => vec![1],
                "2-hidden" => vec![1, 1],
                _ => unreachable!("validated above"),
            };
        }
        Ok(cfg)
    }

    fn validate(&self) -> anyhow::Result<()> {
        match self.architecture.as_str() {
            "1-hidden" | "2-hidden" => {}
            "explicit" => {
                if self.hidden_sizes.is_empty() {
                    bail!("architecture \"explicit\" requires non-empty hidden_sizes");
                }
            }
            other => bail!("unknown architecture {other:?} (1-hidden | 2-hidden | explicit)"),
        }
        if self.n_types == 0 {
            bail!("n_types must be >= 1");
        }
        if !(self.window > 0.0) {
            bail!("window must be positive");
        }
        if self.sweep.is_empty() || self.sweep.contains(&0) {
            bail!("sweep must be a non-empty list of positive sample counts");
        }
        Ok(())
    }

    /// `K_0..K_L`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.n_types];
        sizes.extend(&self.hidden_sizes);
        sizes
    }

    pub fn usap_config(&self) -> UsapConfig {
        UsapConfig {
            layer_sizes: self.layer_sizes(),
            d_k: self.usap.d_k,
            d_v: self.usap.d_v,
            d_m: self.usap.d_m,
            d_h: self.usap.d_h,
            heads: self.usap.heads,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            iterations: self.train.iterations,
            model_step: self.train.model_step,
            variational_step: self.train.variational_step,
            batch_size: self.train.batch_size,
            burn_in: self.train.burn_in,
            thin: self.train.thin,
            val_cadence: self.train.val_cadence,
            patience: self.train.patience,
            val_samples: self.train.val_samples,
            fix_k_shape: self.fix_k_shape,
            seed,
            ..TrainConfig::default()
        }
    }
}
