use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::DeviceProfile;
use crate::stream::ring::{window_samples, DEFAULT_WINDOW_S};

/// Architecture hyperparameters of the dual transformer decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub window_samples: usize,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_temporal_layers: usize,
    pub n_spatial_layers: usize,
    pub rel_pos_max_offset: usize,
    pub n_intent_classes: usize,
    pub signature_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// Default architecture for `n_channels` inputs at 250 Hz.
    pub fn with_channels(n_channels: usize) -> Self {
        Self {
            n_channels,
            window_samples: 500,
            patch_len: 25,
            patch_stride: 25,
            d_model: 64,
            n_heads: 4,
            n_temporal_layers: 2,
            n_spatial_layers: 2,
            rel_pos_max_offset: 20,
            n_intent_classes: 5,
            signature_dim: 32,
            ffn_dim: 128,
            dropout: 0.1,
        }
    }

    pub fn for_profile(profile: &DeviceProfile) -> Self {
        Self {
            window_samples: window_samples(DEFAULT_WINDOW_S, profile.sampling_rate_hz),
            ..Self::with_channels(profile.n_channels())
        }
    }

    pub fn wired() -> Self {
        Self::for_profile(&DeviceProfile::wired())
    }

    pub fn wireless() -> Self {
        Self::for_profile(&DeviceProfile::wireless())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_channels == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return fail("channel count, width, heads and ffn width must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.patch_len == 0 || self.patch_stride == 0 || self.patch_len > self.window_samples {
            return fail(format!(
                "patch length {} and stride {} do not fit a {}-sample window",
                self.patch_len, self.patch_stride, self.window_samples
            ));
        }
        if (self.window_samples - self.patch_len) % self.patch_stride != 0 {
            return fail(format!(
                "(window {} - patch {}) is not a multiple of stride {}",
                self.window_samples, self.patch_len, self.patch_stride
            ));
        }
        if self.n_intent_classes < 2 {
            return fail("at least two intent classes are required".into());
        }
        if self.signature_dim == 0 {
            return fail("signature dimension must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn n_patches(&self) -> usize {
        (self.window_samples - self.patch_len) / self.patch_stride + 1
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parameter count as a closed-form function of the configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let f = self.ffn_dim;
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        let rel = self.n_heads * (2 * self.rel_pos_max_offset + 1);
        let patch = d * self.patch_len + d;
        let pool = d * d + d;
        let spatial_embed = self.n_channels * d;
        let heads = 2 * d + (d * self.n_intent_classes + self.n_intent_classes) + (d * self.signature_dim + self.signature_dim);
        patch
            + self.n_temporal_layers * (block + rel)
            + pool
            + spatial_embed
            + self.n_spatial_layers * block
            + heads
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding; binds checkpoints to configs.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&canonical).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::wired();
        c.validate().unwrap();
        assert_eq!(c.n_channels, 32);
        assert_eq!(c.n_patches(), 20);
        assert_eq!(ModelConfig::wireless().n_channels, 12);
    }

    #[test]
    fn invalid_configs() {
        let base = ModelConfig::wired();
        for c in [
            ModelConfig { n_heads: 3, ..base.clone() },
            ModelConfig { patch_stride: 24, ..base.clone() },
            ModelConfig { n_intent_classes: 1, ..base.clone() },
            ModelConfig { patch_len: 501, ..base.clone() },
            ModelConfig { dropout: 1.0, ..base.clone() },
        ] {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn digest_tracks_config() {
        let a = ModelConfig::wired();
        let b = ModelConfig { d_model: 32, ..a.clone() };
        assert_eq!(a.digest(), ModelConfig::wired().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
