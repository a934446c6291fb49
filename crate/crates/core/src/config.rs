//! Structural configuration shared by the conditional and denoising networks.

use crate::error::{Error, Result};

/// Channel plan, neighborhood size, and resolution ratios for both networks.
///
/// `channels[0]` is the full-resolution (stem) width; `channels[i]` is the
/// width after encoder level `i`. The built-in conditional encoder reuses the
/// first `cond_levels + 1` entries so that position encoders can be shared
/// per resolution level between the two networks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub channels: Vec<usize>,
    pub k: usize,
    pub ratios: Vec<f64>,
    pub time_dim: usize,
    pub label_scale: f64,
    /// Width of optional per-point input features (0 = positions only).
    pub feature_dim: usize,
    /// Encoder/decoder depth of the built-in conditional network.
    pub cond_levels: usize,
    /// Condition on post-head logits instead of pre-head features.
    pub use_logits: bool,
}

impl ModelConfig {
    /// Defaults at full desk scale: 4 levels, widths 32/64/128/256 (the last
    /// repeated for the deepest level), 16 neighbors, quarter-rate
    /// downsampling per level.
    pub fn default_for(n_classes: usize) -> Self {
        ModelConfig {
            n_classes,
            channels: vec![32, 64, 128, 256, 256],
            k: 16,
            ratios: vec![0.25, 0.25, 0.25, 0.25],
            time_dim: 32,
            label_scale: 1.0,
            feature_dim: 0,
            cond_levels: 2,
            use_logits: false,
        }
    }

    /// Number of encoder (and decoder) levels.
    pub fn levels(&self) -> usize {
        self.channels.len() - 1
    }

    /// Width of the semantic condition produced by the built-in encoder.
    pub fn semantic_dim(&self) -> usize {
        if self.use_logits {
            self.n_classes
        } else {
            self.channels[0]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.channels.len() < 3 {
            return Err(Error::InvalidArgument(
                "channel plan needs a stem width and at least 2 levels".into(),
            ));
        }
        if self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channel widths must be > 0".into()));
        }
        if self.ratios.len() != self.levels() {
            return Err(Error::InvalidArgument(format!(
                "{} ratios for {} levels",
                self.ratios.len(),
                self.levels()
            )));
        }
        if self.ratios.iter().any(|r| !(*r > 0.0 && *r <= 1.0)) {
            return Err(Error::InvalidArgument(
                "ratios must lie in (0, 1]".into(),
            ));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArgument(
                "time embedding dimension must be positive and even".into(),
            ));
        }
        if self.label_scale <= 0.0 {
            return Err(Error::InvalidArgument("label scale must be > 0".into()));
        }
        if self.cond_levels < 1 || self.cond_levels > self.levels() {
            return Err(Error::InvalidArgument(format!(
                "conditional encoder depth {} outside 1..={}",
                self.cond_levels,
                self.levels()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_validates() {
        ModelConfig::default_for(3).validate().unwrap();
    }

    #[test]
    fn invalid_plans_are_rejected() {
        let mut cfg = ModelConfig::default_for(3);
        cfg.ratios.pop();
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default_for(3);
        cfg.time_dim = 7;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default_for(1);
        cfg.n_classes = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::default_for(3);
        cfg.cond_levels = 9;
        assert!(cfg.validate().is_err());
    }
}
