//! Architecture hyperparameters.
//!
//! Defaults: encoders at width 128, fusion at width 512 with 6 layers and 8
//! heads. The conformer encoder uses a 5 Å cosine cutoff with 50 Gaussian
//! radial features (γ = 10 Å⁻²) and 3 interaction blocks; these three numbers
//! are conventions, not values taken from a reference run.

use crate::attention::AttentionKind;
use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};

/// Atom feature columns: element, degree, formal charge + 2.
pub const DEFAULT_ATOM_FEATURES: [usize; 3] = [10, 7, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Filled from the dataset vocabulary when zero.
    pub vocab_size: usize,
    pub atom_feature_sizes: Vec<usize>,
    pub d_enc: usize,
    pub d_model: usize,
    pub smiles_layers: usize,
    pub smiles_heads: usize,
    pub gine_layers: usize,
    pub schnet_blocks: usize,
    pub rbf_count: usize,
    pub cutoff: f64,
    pub rbf_gamma: f64,
    pub fusion_layers: usize,
    pub fusion_heads: usize,
    pub ff_mult: usize,
    pub targets: usize,
    pub attention: AttentionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            atom_feature_sizes: DEFAULT_ATOM_FEATURES.to_vec(),
            d_enc: 128,
            d_model: 512,
            smiles_layers: 2,
            smiles_heads: 4,
            gine_layers: 6,
            schnet_blocks: 3,
            rbf_count: 50,
            cutoff: 5.0,
            rbf_gamma: 10.0,
            fusion_layers: 6,
            fusion_heads: 8,
            ff_mult: 2,
            targets: 1,
            attention: AttentionKind::default(),
        }
    }
}

impl ModelConfig {
    /// Small model used for finite-difference checks (run it in F64).
    pub fn minimal() -> Self {
        Self {
            d_enc: 16,
            d_model: 32,
            smiles_layers: 1,
            smiles_heads: 2,
            gine_layers: 2,
            schnet_blocks: 2,
            rbf_count: 8,
            fusion_layers: 2,
            fusion_heads: 4,
            ..Self::default()
        }
    }

    /// Reduced widths for training runs on a single CPU core.
    pub fn desk() -> Self {
        Self {
            d_enc: 32,
            d_model: 64,
            smiles_layers: 1,
            smiles_heads: 2,
            gine_layers: 3,
            schnet_blocks: 3,
            rbf_count: 25,
            fusion_layers: 2,
            fusion_heads: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 {
            bail!(Config, "vocab_size must cover PAD, UNK and one character, got {}", self.vocab_size);
        }
        if self.atom_feature_sizes.is_empty() || self.atom_feature_sizes.contains(&0) {
            bail!(Config, "atom feature sizes must be non-empty and positive");
        }
        for (what, d, h) in [
            ("smiles", self.d_enc, self.smiles_heads),
            ("fusion", self.d_model, self.fusion_heads),
        ] {
            if h == 0 || d % h != 0 {
                bail!(Config, "{what} width {d} is not divisible by {h} heads");
            }
        }
        if self.d_enc == 0 || self.targets == 0 || self.ff_mult == 0 {
            bail!(Config, "widths, ff_mult and target count must be positive");
        }
        if !(self.cutoff > 0.0) || self.rbf_count < 2 {
            bail!(Config, "cutoff must be positive and rbf_count at least 2");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_widths() {
        let c = ModelConfig::default();
        assert_eq!((c.d_enc, c.d_model, c.fusion_layers, c.fusion_heads, c.gine_layers), (128, 512, 6, 8, 6));
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = ModelConfig::minimal();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        let partial: ModelConfig = serde_json::from_str(r#"{"d_model": 64}"#).unwrap();
        assert_eq!(partial.d_model, 64);
        assert_eq!(partial.d_enc, 128);
        assert!(serde_json::from_str::<ModelConfig>(r#"{"d_modle": 64}"#).is_err());
    }

    #[test]
    fn validation_rejects_bad_heads() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..ModelConfig::default()
        };
        c.validate().unwrap();
        c.fusion_heads = 7;
        assert!(c.validate().is_err());
    }
}
