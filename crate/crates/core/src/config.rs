//! Run configuration shared by every subcommand.
//!
//! Strict JSON schema: unknown keys are rejected everywhere, and the
//! cross-module divisibility invariants are validated before anything runs.
//! The default is the reference pipeline (448×448 regions, patch 16, shuffle
//! 2) whose shapes compose end to end: 28×28 raw tokens → 14×14 compressed →
//! 7×7 = 49 adaptor outputs per slice.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::lm::ToyLmConfig;
use crate::nta::NtaConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub pairs: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            pairs: 32,
            stage1_steps: 150,
            stage2_steps: 350,
            batch_size: 4,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub nta: NtaConfig,
    pub lm: ToyLmConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// The reference pipeline: patch 16 on 448×448 slices gives 28×28 raw
    /// tokens, pixel shuffle r=2 compresses to 14×14 at d = 4·token_dim,
    /// and the adaptor emits 7×7 = 49 tokens per slice.
    pub fn reference() -> Self {
        RunConfig {
            seed: 0,
            frontend: FrontendConfig {
                patch_size: 16,
                ..FrontendConfig::default()
            },
            nta: NtaConfig::default(),
            lm: ToyLmConfig {
                d_model: NtaConfig::default().dim_lang,
                max_seq_len: 256,
                ..ToyLmConfig::default()
            },
            train: TrainConfig::default(),
        }
    }

    /// Small-scale configuration for the memorization run: 128×128 images,
    /// 8×8 raw tokens, 4×4 compressed grid, 2×2 = 4 adaptor outputs.
    pub fn toy() -> Self {
        RunConfig {
            seed: 1,
            frontend: FrontendConfig {
                threshold_px: 128,
                vit_region_w: 128,
                vit_region_h: 128,
                patch_size: 16,
                shuffle_rate_r: 2,
                n_max: 12,
                token_dim: 8,
            },
            nta: NtaConfig {
                dim_d: 32,
                pooled_h: 2,
                pooled_w: 2,
                heads: 4,
                dim_lang: 32,
                ..NtaConfig::default()
            },
            lm: ToyLmConfig {
                vocab_size: crate::synth::synth_vocab().len(),
                d_model: 32,
                layers: 2,
                heads: 2,
                max_seq_len: 32,
                base_lr: 1.2e-2,
                ..ToyLmConfig::default()
            },
            train: TrainConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.nta.validate()?;
        self.lm.validate()?;
        let r = self.frontend.shuffle_rate_r;
        let compressed_dim = self.frontend.token_dim * r * r;
        if compressed_dim != self.nta.dim_d {
            return Err(Error::config(format!(
                "adaptor dim_d {} must equal token_dim·r² = {compressed_dim}",
                self.nta.dim_d
            )));
        }
        let grid_h = self.frontend.tokens_per_side_h() / r;
        let grid_w = self.frontend.tokens_per_side_w() / r;
        if grid_h % 2 != 0 || grid_w % 2 != 0 {
            return Err(Error::config(format!(
                "compressed grid {grid_h}×{grid_w} must have even dims for the adaptor head"
            )));
        }
        if self.nta.pooled_count() >= grid_h * grid_w {
            return Err(Error::config(format!(
                "pooled query count {} must be below the {} compressed tokens",
                self.nta.pooled_count(),
                grid_h * grid_w
            )));
        }
        if self.lm.d_model != self.nta.dim_lang {
            return Err(Error::config(format!(
                "lm d_model {} must equal adaptor dim_lang {}",
                self.lm.d_model, self.nta.dim_lang
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            detail: format!("{}: {e}", path.display()),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Tokens per slice after compression, as (grid_h, grid_w).
    pub fn compressed_grid(&self) -> (usize, usize) {
        let r = self.frontend.shuffle_rate_r;
        (
            self.frontend.tokens_per_side_h() / r,
            self.frontend.tokens_per_side_w() / r,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_and_toy_validate() {
        RunConfig::reference().validate().unwrap();
        RunConfig::toy().validate().unwrap();
    }

    #[test]
    fn reference_produces_49_output_tokens_per_slice() {
        let cfg = RunConfig::reference();
        let (h, w) = cfg.compressed_grid();
        assert_eq!((h, w), (14, 14));
        assert_eq!((h / 2) * (w / 2), 49);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"nta": {"dim_q": 4}}"#);
        assert!(err.is_err());
    }

    #[test]
    fn cross_module_invariants_are_checked() {
        let mut cfg = RunConfig::reference();
        cfg.nta.dim_d = 32; // token_dim·r² = 64
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));

        let mut cfg = RunConfig::reference();
        cfg.lm.d_model = 48;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = RunConfig::toy();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
