use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ranges for the photometric training augmentations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Additive brightness shift drawn from `[-max, max]`.
    pub brightness_delta_max: f32,
    pub contrast_factor_range: [f32; 2],
    pub saturation_factor_range: [f32; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness_delta_max: 0.2,
            contrast_factor_range: [0.8, 1.25],
            saturation_factor_range: [0.8, 1.25],
        }
    }
}

impl AugmentConfig {
    pub fn new(brightness_delta_max: f32, contrast: [f32; 2], saturation: [f32; 2]) -> Result<Self> {
        let cfg = AugmentConfig {
            brightness_delta_max,
            contrast_factor_range: contrast,
            saturation_factor_range: saturation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn identity() -> Self {
        AugmentConfig {
            brightness_delta_max: 0.0,
            contrast_factor_range: [1.0, 1.0],
            saturation_factor_range: [1.0, 1.0],
        }
    }

    /// Every range must contain the identity transform.
    pub fn validate(&self) -> Result<()> {
        let contains_one = |[lo, hi]: [f32; 2]| (0.0..=1.0).contains(&lo) && hi >= 1.0 && hi.is_finite();
        if !(self.brightness_delta_max >= 0.0 && self.brightness_delta_max.is_finite())
            || !contains_one(self.contrast_factor_range)
            || !contains_one(self.saturation_factor_range)
        {
            return Err(Error::InvalidConfig(format!(
                "augmentation ranges must contain the identity: {self:?}"
            )));
        }
        Ok(())
    }
}

fn luma(r: f32, g: f32, b: f32) -> f32 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn uniform(rng: &mut Rng, [lo, hi]: [f32; 2]) -> f32 {
    lo + (hi - lo) * rng.random::<f32>()
}

/// Adds `delta` to every value, clamping to `[0, 1]`.
pub fn adjust_brightness(image: &Image, delta: f32) -> Image {
    let mut out = image.clone();
    if delta != 0.0 {
        out.data_mut().iter_mut().for_each(|v| *v = (*v + delta).clamp(0.0, 1.0));
    }
    out
}

/// Blends every value with the image's mean luma: `m + factor·(v − m)`.
pub fn adjust_contrast(image: &Image, factor: f32) -> Image {
    let mut out = image.clone();
    if factor == 1.0 {
        return out;
    }
    let plane = out.height() * out.width();
    let d = out.data();
    let mean = ((0..plane)
        .map(|p| luma(d[p], d[plane + p], d[2 * plane + p]) as f64)
        .sum::<f64>()
        / plane as f64) as f32;
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0));
    out
}

/// Blends every pixel with its own luma: `g + factor·(v − g)`. A factor of 0
/// yields a grayscale image.
pub fn adjust_saturation(image: &Image, factor: f32) -> Image {
    let mut out = image.clone();
    if factor == 1.0 {
        return out;
    }
    let plane = out.height() * out.width();
    let d = out.data_mut();
    for p in 0..plane {
        let gray = luma(d[p], d[plane + p], d[2 * plane + p]);
        for c in 0..3 {
            let v = &mut d[c * plane + p];
            *v = (gray + factor * (*v - gray)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Random brightness, contrast and saturation, applied in that order.
///
/// Exactly three uniform draws are taken from `rng` per call (brightness
/// delta, contrast factor, saturation factor) so the stream position does not
/// depend on the image. Output is clamped to `[0, 1]` after each transform.
pub fn augment(image: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Image {
    let delta = cfg.brightness_delta_max * (2.0 * rng.random::<f32>() - 1.0);
    let contrast = uniform(rng, cfg.contrast_factor_range);
    let saturation = uniform(rng, cfg.saturation_factor_range);
    let out = adjust_brightness(image, delta);
    let out = adjust_contrast(&out, contrast);
    adjust_saturation(&out, saturation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn sample() -> Image {
        Image::from_fn(8, 8, |c, y, x| ((c * 31 + y * 7 + x * 3) % 23) as f32 / 22.0)
    }

    #[test]
    fn identity_config_returns_input() {
        let img = sample();
        let mut rng = seeded(1);
        assert_eq!(augment(&img, &AugmentConfig::identity(), &mut rng), img);
    }

    #[test]
    fn brightness_shift_on_constant_image() {
        let out = adjust_brightness(&Image::filled(4, 4, [0.5; 3]), 0.1);
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
    }

    #[test]
    fn zero_saturation_gives_gray() {
        let out = adjust_saturation(&sample(), 0.0);
        let d = out.data();
        for p in 0..64 {
            assert_eq!(d[p], d[64 + p]);
            assert_eq!(d[p], d[128 + p]);
        }
    }

    #[test]
    fn output_stays_in_unit_range() {
        let cfg = AugmentConfig::new(0.5, [0.2, 3.0], [0.0, 4.0]).unwrap();
        let mut rng = seeded(9);
        for _ in 0..50 {
            let out = augment(&sample(), &cfg, &mut rng);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn ranges_must_contain_identity() {
        assert!(AugmentConfig::new(0.2, [1.1, 1.3], [0.8, 1.2]).is_err());
        assert!(AugmentConfig::new(-0.1, [0.8, 1.2], [0.8, 1.2]).is_err());
        assert!(AugmentConfig::default().validate().is_ok());
    }
}
