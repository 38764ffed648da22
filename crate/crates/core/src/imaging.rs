//! Mask and RGB image containers plus PNG/JPEG I/O.
//!
//! Pixels are stored channel-first as `f64` in `[0, 1]`. Masks on disk are
//! single-channel 8-bit PNGs with 0 = background and 255 = foreground.

use std::io::Cursor;
use std::path::Path;

use image::{imageops::FilterType, DynamicImage, GrayImage, ImageFormat, Luma, Rgb, RgbImage as RawRgb};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A `[1, h, w]` mask with values in `[0, 1]`; binary masks hold only 0 and 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    t: Tensor,
}

/// A `[3, h, w]` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    t: Tensor,
}

fn check_range(t: &Tensor, what: &str) -> Result<()> {
    if t.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::shape(format!("{what} values must lie in [0, 1]")));
    }
    Ok(())
}

impl Mask {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        let t = match *t.shape() {
            [1, _, _] => t,
            [h, w] => t.reshape(&[1, h, w])?,
            _ => return Err(Error::shape(format!("mask must be [1, h, w], got {:?}", t.shape()))),
        };
        check_range(&t, "mask")?;
        Ok(Self { t })
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_tensor(Tensor::new(vec![1, height, width], data)?)
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { t: Tensor::zeros(&[1, height, width]) }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { t: Tensor::ones(&[1, height, width]) }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self { t: Tensor::from_fn(&[1, height, width], |i| f(i / width, i % width) as u8 as f64) }
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn data(&self) -> &[f64] {
        self.t.data()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.t.data()[row * self.width() + col]
    }

    pub fn is_binary(&self) -> bool {
        self.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_empty(&self) -> bool {
        self.data().iter().all(|&v| v == 0.0)
    }

    pub fn area(&self) -> f64 {
        self.t.sum()
    }

    /// Hard threshold: values `>= level` become foreground.
    pub fn threshold(&self, level: f64) -> Mask {
        Mask { t: self.t.map(|v| if v >= level { 1.0 } else { 0.0 }) }
    }

    pub fn complement(&self) -> Mask {
        Mask { t: self.t.map(|v| 1.0 - v) }
    }

    /// Intersection over union of the thresholded masks; two empty masks
    /// count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut union) = (0.0, 0.0);
        for (&a, &b) in self.data().iter().zip(other.data()) {
            let (a, b) = (a >= 0.5, b >= 0.5);
            inter += (a && b) as u8 as f64;
            union += (a || b) as u8 as f64;
        }
        if union == 0.0 {
            1.0
        } else {
            inter / union
        }
    }
}

impl RgbImage {
    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [3, _, _] => {}
            _ => return Err(Error::shape(format!("rgb image must be [3, h, w], got {:?}", t.shape()))),
        }
        check_range(&t, "image")?;
        Ok(Self { t })
    }

    /// Clamp into `[0, 1]` instead of rejecting out-of-range values.
    pub fn from_tensor_clamped(t: Tensor) -> Result<Self> {
        Self::from_tensor(t.map(|v| v.clamp(0.0, 1.0)))
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self { t: Tensor::from_fn(&[3, height, width], |i| rgb[i / (height * width)]) }
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn data(&self) -> &[f64] {
        self.t.data()
    }

    pub fn at(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.t.at(&[channel, row, col])
    }

    /// Zero every pixel outside `mask` (soft masks scale).
    pub fn masked(&self, mask: &Mask) -> Result<RgbImage> {
        if mask.dims() != self.dims() {
            return Err(Error::shape(format!("mask {:?} vs image {:?}", mask.dims(), self.dims())));
        }
        let hw = self.height() * self.width();
        let m = mask.data();
        Ok(RgbImage { t: Tensor::from_fn(&[3, self.height(), self.width()], |i| self.t.data()[i] * m[i % hw]) })
    }

    /// Replicate a mask into three identical channels.
    pub fn from_mask(mask: &Mask) -> RgbImage {
        let hw = mask.height() * mask.width();
        RgbImage { t: Tensor::from_fn(&[3, mask.height(), mask.width()], |i| mask.data()[i % hw]) }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Mask {
    pub fn to_gray(&self) -> GrayImage {
        let (h, w) = self.dims();
        GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(self.at(y as usize, x as usize))]))
    }

    /// Foreground where the 8-bit value is at least 128.
    pub fn from_gray(img: &GrayImage) -> Mask {
        let (w, h) = (img.width() as usize, img.height() as usize);
        Mask::from_fn(h, w, |r, c| img.get_pixel(c as u32, r as u32)[0] >= 128)
    }

    pub fn resize_nearest(&self, height: usize, width: usize) -> Mask {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let img = image::imageops::resize(&self.to_gray(), width as u32, height as u32, FilterType::Nearest);
        Mask::from_gray(&img)
    }
}

impl RgbImage {
    pub fn to_rgb8(&self) -> RawRgb {
        let (h, w) = self.dims();
        RawRgb::from_fn(w as u32, h as u32, |x, y| {
            let (r, c) = (y as usize, x as usize);
            Rgb([to_u8(self.at(0, r, c)), to_u8(self.at(1, r, c)), to_u8(self.at(2, r, c))])
        })
    }

    pub fn from_rgb8(img: &RawRgb) -> RgbImage {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let t = Tensor::from_fn(&[3, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            img.get_pixel((p % w) as u32, (p / w) as u32)[ch] as f64 / 255.0
        });
        RgbImage { t }
    }

    pub fn resize(&self, height: usize, width: usize) -> RgbImage {
        if self.dims() == (height, width) {
            return self.clone();
        }
        let img = image::imageops::resize(&self.to_rgb8(), width as u32, height as u32, FilterType::Triangle);
        RgbImage::from_rgb8(&img)
    }
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    mask.threshold(0.5).to_gray().write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// Decode any image as a mask. Returns the mask and whether the input held
/// values other than 0 and 255 (and was therefore thresholded).
pub fn decode_mask(bytes: &[u8]) -> Result<(Mask, bool)> {
    let gray = image::load_from_memory(bytes)?.to_luma8();
    let thresholded = gray.pixels().any(|p| p[0] != 0 && p[0] != 255);
    Ok((Mask::from_gray(&gray), thresholded))
}

pub fn encode_rgb_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    img.to_rgb8().write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn decode_rgb(bytes: &[u8]) -> Result<RgbImage> {
    Ok(RgbImage::from_rgb8(&image::load_from_memory(bytes)?.to_rgb8()))
}

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Load a mask file, requiring a single-channel image.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = open(path)?;
    if img.color().channel_count() != 1 {
        return Err(Error::Manifest {
            line: 0,
            reason: format!("{} is not a single-channel mask", path.display()),
        });
    }
    Ok(Mask::from_gray(&img.to_luma8()))
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(RgbImage::from_rgb8(&open(path)?.to_rgb8()))
}

pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)?)?;
    Ok(())
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    std::fs::write(path, encode_rgb_png(img)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_is_bit_exact() {
        let m = Mask::from_fn(5, 7, |r, c| (r * 3 + c) % 4 == 0);
        let bytes = encode_mask_png(&m).unwrap();
        let (back, thresholded) = decode_mask(&bytes).unwrap();
        assert_eq!(back, m);
        assert!(!thresholded);
        let gray = image::load_from_memory(&bytes).unwrap();
        assert_eq!(gray.color().channel_count(), 1);
        assert!(gray.to_luma8().pixels().all(|p| p[0] == 0 || p[0] == 255));
    }

    #[test]
    fn grey_levels_are_thresholded_with_flag() {
        let img = GrayImage::from_fn(4, 1, |x, _| Luma([[0u8, 127, 128, 255][x as usize]]));
        let mut bytes = Vec::new();
        img.write_to(&mut Cursor::new(&mut bytes), ImageFormat::Png).unwrap();
        let (m, thresholded) = decode_mask(&bytes).unwrap();
        assert!(thresholded);
        assert_eq!(m.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn rgb_png_round_trips_8bit_values() {
        let img = RgbImage::from_tensor(Tensor::from_fn(&[3, 4, 4], |i| (i * 17 % 256) as f64 / 255.0)).unwrap();
        let back = decode_rgb(&encode_rgb_png(&img).unwrap()).unwrap();
        assert!(back.tensor().max_abs_diff(img.tensor()) < 1e-12);
    }

    #[test]
    fn masked_zeroes_background() {
        let img = RgbImage::filled(2, 2, [0.5, 0.25, 1.0]);
        let m = Mask::from_fn(2, 2, |r, _| r == 0);
        let out = img.masked(&m).unwrap();
        assert_eq!(out.at(2, 0, 1), 1.0);
        assert_eq!(out.at(2, 1, 1), 0.0);
    }

    #[test]
    fn iou_of_empty_masks_is_one() {
        assert_eq!(Mask::zeros(3, 3).iou(&Mask::zeros(3, 3)), 1.0);
        assert_eq!(Mask::ones(3, 3).iou(&Mask::zeros(3, 3)), 0.0);
    }

    #[test]
    fn range_is_validated() {
        assert!(Mask::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(RgbImage::from_tensor(Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
