//! Synthetic rooftop sequences with a known reroof year.
//!
//! Each building gets a fixed scene (ground, roof footprint, rooftop units)
//! and two roof surfaces rendered from the `before` and `after` materials.
//! Every yearly image then receives independent confounders: sub-pixel
//! translation, Gaussian blur and an exposure gain.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::preprocess::IMAGE_SIZE;
use super::{DatasetSplit, ImageSequence, ReroofLabel};
use crate::error::{Error, Result};
use crate::exec;
use crate::rng::{self, streams, Rng};

/// Roof surface appearance: a mean colour plus low-pass filtered grain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub mean_color: [f32; 3],
    /// Per-building standard deviation around `mean_color`.
    pub color_jitter: f32,
    /// Gaussian smoothing radius (px) of the grain noise.
    pub grain_scale: f32,
    /// Standard deviation of the grain after smoothing.
    pub grain_amplitude: f32,
}

impl Material {
    /// Weathered dark membrane.
    pub fn aged() -> Self {
        Material {
            mean_color: [0.40, 0.37, 0.33],
            color_jitter: 0.05,
            grain_scale: 2.5,
            grain_amplitude: 0.06,
        }
    }

    /// Fresh reflective coating.
    pub fn fresh() -> Self {
        Material {
            mean_color: [0.80, 0.81, 0.83],
            color_jitter: 0.04,
            grain_scale: 1.0,
            grain_amplitude: 0.025,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_buildings: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Probability that a building is reroofed inside the year span.
    pub transition_prob: f64,
    pub blur_sigma_range: [f32; 2],
    pub exposure_gain_range: [f32; 2],
    /// Maximum absolute translation (px) per axis.
    pub jitter_px: f32,
    pub material_before: Material,
    pub material_after: Material,
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub image_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_buildings: 230,
            first_year: 2012,
            last_year: 2018,
            transition_prob: 180.0 / 230.0,
            blur_sigma_range: [0.0, 1.0],
            exposure_gain_range: [0.85, 1.15],
            jitter_px: 1.0,
            material_before: Material::aged(),
            material_after: Material::fresh(),
            validation_fraction: 25.0 / 230.0,
            test_fraction: 55.0 / 230.0,
            image_size: IMAGE_SIZE,
        }
    }
}

impl SynthConfig {
    /// No blur, unit gain and no translation.
    pub fn without_confounders(mut self) -> Self {
        self.blur_sigma_range = [0.0, 0.0];
        self.exposure_gain_range = [1.0, 1.0];
        self.jitter_px = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.transition_prob) {
            return bad(format!("transition_prob {} outside [0, 1]", self.transition_prob));
        }
        if self.last_year <= self.first_year {
            return bad(format!("year span {}..={} needs two years", self.first_year, self.last_year));
        }
        if !(self.jitter_px >= 0.0) {
            return bad(format!("jitter_px {} must be non-negative", self.jitter_px));
        }
        let ordered = |[lo, hi]: [f32; 2]| lo >= 0.0 && lo <= hi && hi.is_finite();
        if !ordered(self.blur_sigma_range) || !ordered(self.exposure_gain_range) {
            return bad("blur and gain ranges must be ordered and non-negative".into());
        }
        let (v, t) = (self.validation_fraction, self.test_fraction);
        if !(v >= 0.0 && t >= 0.0 && v + t <= 1.0) {
            return bad(format!("split fractions {v} + {t} exceed 1"));
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} is too small", self.image_size));
        }
        Ok(())
    }

    /// `(train, validation, test)` building counts.
    pub fn split_counts(&self) -> (usize, usize, usize) {
        let n = self.num_buildings;
        let val = ((n as f64 * self.validation_fraction).round() as usize).min(n);
        let test = ((n as f64 * self.test_fraction).round() as usize).min(n - val);
        (n - val - test, val, test)
    }

    fn years(&self) -> Vec<i32> {
        (self.first_year..=self.last_year).collect()
    }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur of one `h × w` plane with edge clamping.
fn blur_plane(plane: &[f32], h: usize, w: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * plane[y * w + clamp(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clamp(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Smoothed white noise rescaled to unit standard deviation.
fn grain_field(rng: &mut Rng, size: usize, scale: f32) -> Vec<f32> {
    let noise: Vec<f32> = (0..size * size).map(|_| StandardNormal.sample(rng)).collect();
    let mut field = blur_plane(&noise, size, size, scale);
    let n = field.len() as f32;
    let mean = field.iter().sum::<f32>() / n;
    let std = (field.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n).sqrt();
    field.iter_mut().for_each(|v| *v = (*v - mean) / std.max(1e-6));
    field
}

#[derive(Clone, Copy)]
struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y0..self.y1).contains(&y) && (self.x0..self.x1).contains(&x)
    }
}

fn jittered_color(rng: &mut Rng, m: &Material) -> [f32; 3] {
    let shift: f32 = StandardNormal.sample(rng);
    let mut c = m.mean_color;
    for ch in c.iter_mut() {
        let own: f32 = StandardNormal.sample(rng);
        *ch = (*ch + m.color_jitter * (0.8 * shift + 0.6 * own)).clamp(0.0, 1.0);
    }
    c
}

fn roof_surface(rng: &mut Rng, m: &Material, size: usize) -> Vec<[f32; 3]> {
    let color = jittered_color(rng, m);
    let grain = grain_field(rng, size, m.grain_scale);
    grain
        .iter()
        .map(|g| color.map(|c| c + m.grain_amplitude * g))
        .collect()
}

fn render_building(cfg: &SynthConfig, seed: u64, index: usize) -> Result<ImageSequence> {
    let mut rng = rng::stream(seed, streams::SYNTH_BASE + index as u64);
    let s = cfg.image_size;
    let years = cfg.years();

    // Scene layout.
    let ground = [
        rng.random_range(0.30..0.55f32),
        rng.random_range(0.30..0.55f32),
        rng.random_range(0.25..0.50f32),
    ];
    let roof_w = (s as f32 * rng.random_range(0.55..0.85f32)) as usize;
    let roof_h = (s as f32 * rng.random_range(0.55..0.85f32)) as usize;
    let x0 = (s - roof_w) / 2 + rng.random_range(0..=(s - roof_w) / 4);
    let y0 = (s - roof_h) / 2 + rng.random_range(0..=(s - roof_h) / 4);
    let roof = Rect {
        x0,
        y0,
        x1: (x0 + roof_w).min(s),
        y1: (y0 + roof_h).min(s),
    };
    let n_units = rng.random_range(0..=3usize);
    let units: Vec<Rect> = (0..n_units)
        .map(|_| {
            let side = rng.random_range(3..=6usize);
            let ux = rng.random_range(roof.x0..roof.x1.saturating_sub(side).max(roof.x0 + 1));
            let uy = rng.random_range(roof.y0..roof.y1.saturating_sub(side).max(roof.y0 + 1));
            Rect {
                x0: ux,
                y0: uy,
                x1: (ux + side).min(roof.x1),
                y1: (uy + side).min(roof.y1),
            }
        })
        .collect();

    // Ground truth.
    let reroofed = rng.random::<f64>() < cfg.transition_prob;
    let label = if reroofed {
        ReroofLabel::ReroofYear(years[rng.random_range(1..years.len())])
    } else {
        ReroofLabel::NoReroof
    };

    let before = roof_surface(&mut rng, &cfg.material_before, s);
    let after = roof_surface(&mut rng, &cfg.material_after, s);
    let canvas = |surface: &[[f32; 3]]| {
        Image::from_fn(s, s, |c, y, x| {
            if units.iter().any(|u| u.contains(y, x)) {
                0.72
            } else if roof.contains(y, x) {
                surface[y * s + x][c]
            } else {
                ground[c]
            }
        })
    };
    let scenes = [canvas(&before), canvas(&after)];

    let mut images = Vec::with_capacity(years.len());
    for &year in &years {
        let dx = cfg.jitter_px * (2.0 * rng.random::<f32>() - 1.0);
        let dy = cfg.jitter_px * (2.0 * rng.random::<f32>() - 1.0);
        let [blo, bhi] = cfg.blur_sigma_range;
        let sigma = blo + (bhi - blo) * rng.random::<f32>();
        let [glo, ghi] = cfg.exposure_gain_range;
        let gain = glo + (ghi - glo) * rng.random::<f32>();

        let new_roof = matches!(label, ReroofLabel::ReroofYear(t) if year >= t);
        let scene = &scenes[new_roof as usize];
        let shifted = if dx == 0.0 && dy == 0.0 {
            scene.clone()
        } else {
            translate(scene, dx, dy)
        };
        let mut data = Vec::with_capacity(3 * s * s);
        for c in 0..3 {
            data.extend(blur_plane(shifted.plane(c), s, s, sigma).into_iter().map(|v| (v * gain).clamp(0.0, 1.0)));
        }
        images.push(Image::new(s, s, data)?);
    }
    ImageSequence::new(format!("b{index:05}"), years, images, label)
}

/// Bilinear resampling at `(y − dy, x − dx)` with edge clamping.
fn translate(img: &Image, dx: f32, dy: f32) -> Image {
    let (h, w) = (img.height(), img.width());
    let sample = |c: usize, fy: f32, fx: f32| {
        let fy = fy.clamp(0.0, (h - 1) as f32);
        let fx = fx.clamp(0.0, (w - 1) as f32);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f32, fx - x0 as f32);
        let top = img.get(c, y0, x0) * (1.0 - tx) + img.get(c, y0, x1) * tx;
        let bot = img.get(c, y1, x0) * (1.0 - tx) + img.get(c, y1, x1) * tx;
        top * (1.0 - ty) + bot * ty
    };
    Image::from_fn(h, w, |c, y, x| sample(c, y as f32 - dy, x as f32 - dx))
}

/// Renders `cfg.num_buildings` buildings with ids `b00000…` and assigns
/// the first block to train, then validation, then test.
///
/// Building `i` draws only from its own stream of `seed`, so output is
/// identical regardless of worker count.
pub fn generate_synthetic(cfg: &SynthConfig, seed: u64) -> Result<DatasetSplit> {
    cfg.validate()?;
    let (n_train, n_val, _) = cfg.split_counts();
    let mut all = exec::map_range(cfg.num_buildings, |i| render_building(cfg, seed, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let test = all.split_off(n_train + n_val);
    let validation = all.split_off(n_train);
    let split = DatasetSplit {
        train: all,
        validation,
        test,
    };
    split.validate()?;
    Ok(split)
}
