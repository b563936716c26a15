//! Feature-space stand-ins for image augmentation: the weak view adds a
//! little Gaussian noise, the strong view adds a lot and zeroes a fixed
//! fraction of coordinates.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Noise levels relative to the dataset's feature scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub mask_fraction: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { weak_sigma: 0.02, strong_sigma: 0.2, mask_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmenter {
    weak_sigma: f64,
    strong_sigma: f64,
    mask_fraction: f64,
}

impl Augmenter {
    /// Absolute noise levels.
    pub fn new(weak_sigma: f64, strong_sigma: f64, mask_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&mask_fraction) {
            return Err(Error::Config(format!("mask fraction {mask_fraction} outside [0, 1)")));
        }
        if !(weak_sigma >= 0.0) || !(strong_sigma >= 0.0) {
            return Err(Error::Config("augmentation sigmas must be non-negative".into()));
        }
        Ok(Self { weak_sigma, strong_sigma, mask_fraction })
    }

    pub fn from_config(config: &AugmentConfig, feature_scale: f64) -> Result<Self> {
        Self::new(
            config.weak_sigma * feature_scale,
            config.strong_sigma * feature_scale,
            config.mask_fraction,
        )
    }

    pub fn weak_sigma(&self) -> f64 {
        self.weak_sigma
    }

    pub fn weak(&self, x: &[f64], seed: u64) -> Vec<f64> {
        if self.weak_sigma == 0.0 {
            return x.to_vec();
        }
        let mut rng = rng::stream(seed, "aug-weak");
        x.iter().map(|v| v + self.weak_sigma * rng::normal(&mut rng)).collect()
    }

    /// Number of coordinates the strong view zeroes for dimension `dim`.
    pub fn masked_count(&self, dim: usize) -> usize {
        (self.mask_fraction * dim as f64).round() as usize
    }

    pub fn strong(&self, x: &[f64], seed: u64) -> Vec<f64> {
        let mut rng = rng::stream(seed, "aug-strong");
        let mut out: Vec<f64> = if self.strong_sigma == 0.0 {
            x.to_vec()
        } else {
            x.iter().map(|v| v + self.strong_sigma * rng::normal(&mut rng)).collect()
        };
        let k = self.masked_count(x.len());
        if k > 0 {
            for i in index::sample(&mut rng, x.len(), k) {
                out[i] = 0.0;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_is_identity() {
        let x = vec![1.0, -2.0, 3.5];
        let aug = Augmenter::new(0.0, 0.0, 0.0).unwrap();
        assert_eq!(aug.weak(&x, 4), x);
        assert_eq!(aug.strong(&x, 4), x);
    }

    #[test]
    fn seeded_views_repeat() {
        let x = vec![0.3; 8];
        let aug = Augmenter::new(0.1, 0.5, 0.25).unwrap();
        assert_eq!(aug.weak(&x, 11), aug.weak(&x, 11));
        assert_eq!(aug.strong(&x, 11), aug.strong(&x, 11));
        assert_ne!(aug.weak(&x, 11), aug.weak(&x, 12));
    }

    #[test]
    fn mask_count_contract() {
        let x: Vec<f64> = (1..=10).map(f64::from).collect();
        let aug = Augmenter::new(0.0, 0.0, 0.2).unwrap();
        for seed in 0..50 {
            let out = aug.strong(&x, seed);
            assert_eq!(out.iter().filter(|v| **v == 0.0).count(), 2);
        }
    }

    #[test]
    fn mask_fraction_bounds() {
        assert!(Augmenter::new(0.0, 0.0, 1.0).is_err());
        assert!(Augmenter::new(0.0, 0.0, -0.1).is_err());
        assert!(Augmenter::new(-1.0, 0.0, 0.1).is_err());
    }
}
