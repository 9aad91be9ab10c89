use super::image::Image;
use crate::error::{Error, Result};

/// Side length of the model input.
pub const IMAGE_SIZE: usize = 64;

/// Pixel rectangle inside a raw image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CropSpec {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropSpec {
    /// Largest centred square of a `width × height` frame.
    pub fn center_square(width: usize, height: usize) -> Self {
        let side = width.min(height);
        CropSpec {
            x: (width - side) / 2,
            y: (height - side) / 2,
            width: side,
            height: side,
        }
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
///
/// Output pixel `(i, j)` samples the input at
/// `((i + ½)·H_in/H_out − ½, (j + ½)·W_in/W_out − ½)`.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Image {
    if (img.height(), img.width()) == (out_h, out_w) {
        return img.clone();
    }
    let sy = img.height() as f32 / out_h as f32;
    let sx = img.width() as f32 / out_w as f32;
    let coords = |i: usize, scale: f32, len: usize| {
        let s = ((i as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(len - 1);
        (lo, hi, s - lo as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|i| coords(i, sy, img.height())).collect();
    let xs: Vec<_> = (0..out_w).map(|j| coords(j, sx, img.width())).collect();
    Image::from_fn(out_h, out_w, |c, i, j| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let top = img.get(c, y0, x0) * (1.0 - fx) + img.get(c, y0, x1) * fx;
        let bottom = img.get(c, y1, x0) * (1.0 - fx) + img.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Crops (by default the largest centred square), resizes to
/// `IMAGE_SIZE × IMAGE_SIZE` and clamps to `[0, 1]`.
pub fn preprocess(raw: &Image, crop: Option<CropSpec>) -> Result<Image> {
    let crop = crop.unwrap_or_else(|| CropSpec::center_square(raw.width(), raw.height()));
    if crop.width == 0
        || crop.height == 0
        || crop.x + crop.width > raw.width()
        || crop.y + crop.height > raw.height()
    {
        return Err(Error::Precondition(format!(
            "crop {crop:?} lies outside the {}×{} image",
            raw.width(),
            raw.height()
        )));
    }
    let cropped = if (crop.width, crop.height) == (raw.width(), raw.height()) {
        raw.clone()
    } else {
        Image::from_fn(crop.height, crop.width, |c, y, x| raw.get(c, crop.y + y, crop.x + x))
    };
    let mut out = resize_bilinear(&cropped, IMAGE_SIZE, IMAGE_SIZE);
    out.clamp_unit();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_input_of_target_size_is_unchanged() {
        let img = Image::from_fn(64, 64, |c, y, x| ((c * 7 + y * 3 + x) % 17) as f32 / 16.0);
        assert_eq!(preprocess(&img, None).unwrap(), img);
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = Image::filled(128, 128, [0.3, 0.6, 0.9]);
        assert_eq!(preprocess(&img, None).unwrap(), Image::filled(64, 64, [0.3, 0.6, 0.9]));
    }

    #[test]
    fn crop_outside_image_is_rejected() {
        let img = Image::filled(10, 10, [0.0; 3]);
        let crop = CropSpec {
            x: 5,
            y: 0,
            width: 6,
            height: 6,
        };
        assert!(preprocess(&img, Some(crop)).is_err());
    }

    #[test]
    fn center_square_of_wide_frame() {
        assert_eq!(
            CropSpec::center_square(100, 60),
            CropSpec {
                x: 20,
                y: 0,
                width: 60,
                height: 60
            }
        );
    }
}
