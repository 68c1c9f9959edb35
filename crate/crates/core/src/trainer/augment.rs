use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::model::Features;

/// Data augmentation applied to each surviving training example.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub speed_rates: Vec<f64>,
    pub noise_sigma: f64,
    pub time_mask_max: usize,
    pub feat_mask_max: usize,
}

impl AugmentConfig {
    /// Identity augmentation.
    pub fn off() -> Self {
        AugmentConfig {
            speed_rates: vec![1.0],
            noise_sigma: 0.0,
            time_mask_max: 0,
            feat_mask_max: 0,
        }
    }

    pub fn is_off(&self) -> bool {
        self.speed_rates.iter().all(|&r| r == 1.0)
            && self.noise_sigma == 0.0
            && self.time_mask_max == 0
            && self.feat_mask_max == 0
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            speed_rates: vec![0.9, 1.0, 1.1],
            noise_sigma: 0.05,
            time_mask_max: 2,
            feat_mask_max: 2,
        }
    }
}

/// Speed-perturbed length: `round(T / rate)`, at least 1.
pub fn perturbed_len(t_len: usize, rate: f64) -> usize {
    ((t_len as f64 / rate).round() as usize).max(1)
}

/// Resamples frames so output frame `i` is input frame `min(T-1, floor(i * rate))`.
pub fn speed_perturb(features: &Features, rate: f64) -> Features {
    let t_len = features.frames();
    let new_len = perturbed_len(t_len, rate);
    let mut data = Vec::with_capacity(new_len * features.dim());
    for i in 0..new_len {
        let src = ((i as f64 * rate).floor() as usize).min(t_len - 1);
        data.extend_from_slice(features.frame(src));
    }
    Features::new(data, features.dim()).expect("frame width is preserved")
}

/// Speed perturbation, additive noise, then one time mask and one feature
/// mask. Returns the new features and the speed rate used.
pub fn augment<R: Rng + ?Sized>(
    features: &Features,
    rng: &mut R,
    config: &AugmentConfig,
) -> (Features, f64) {
    let rate = if config.speed_rates.is_empty() {
        1.0
    } else {
        config.speed_rates[rng.random_range(0..config.speed_rates.len())]
    };
    let mut out = if rate == 1.0 {
        features.clone()
    } else {
        speed_perturb(features, rate)
    };
    if config.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma is positive");
        for x in out.as_mut_slice() {
            *x += normal.sample(rng);
        }
    }
    let (t_len, dim) = (out.frames(), out.dim());
    if config.time_mask_max > 0 {
        let width = rng.random_range(0..=config.time_mask_max.min(t_len));
        let start = rng.random_range(0..=t_len - width);
        for t in start..start + width {
            out.frame_mut(t).fill(0.0);
        }
    }
    if config.feat_mask_max > 0 {
        let width = rng.random_range(0..=config.feat_mask_max.min(dim));
        let start = rng.random_range(0..=dim - width);
        for t in 0..t_len {
            out.frame_mut(t)[start..start + width].fill(0.0);
        }
    }
    (out, rate)
}
