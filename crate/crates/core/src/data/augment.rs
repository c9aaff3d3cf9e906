use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::Rng;

/// Fraction-of-area range used by training crops.
pub const DEFAULT_CROP_SCALE: (f64, f64) = (0.5, 1.0);

/// Random-resized-crop to `out_size`×`out_size` with the default scale range.
pub fn augment<R: Rng + ?Sized>(image: &RgbImage, out_size: u32, rng: &mut R) -> RgbImage {
    random_resized_crop(image, out_size, DEFAULT_CROP_SCALE, rng)
}

/// Crops a square covering a uniformly drawn fraction of the source area
/// (clamped to the shorter side), at a uniform position, and resizes it
/// with a linear filter.
pub fn random_resized_crop<R: Rng + ?Sized>(
    image: &RgbImage,
    out_size: u32,
    scale: (f64, f64),
    rng: &mut R,
) -> RgbImage {
    let (w, h) = image.dimensions();
    let s = if scale.1 > scale.0 {
        rng.random_range(scale.0..=scale.1)
    } else {
        scale.0
    };
    let area = s * w as f64 * h as f64;
    let side = (area.sqrt().round() as u32).clamp(1, w.min(h));
    let x0 = rng.random_range(0..=w - side);
    let y0 = rng.random_range(0..=h - side);
    let crop = imageops::crop_imm(image, x0, y0, side, side).to_image();
    resize(&crop, out_size, out_size)
}

pub fn resize(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    if image.dimensions() == (width, height) {
        return image.clone();
    }
    imageops::resize(image, width, height, FilterType::Triangle)
}
