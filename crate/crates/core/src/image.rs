//! Pixel containers shared by every stage: float RGB planes and binary masks.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::fsutil;

/// Smallest side accepted for images entering the pipeline.
pub const MIN_SIDE: usize = 32;

/// Row-major H×W×3 float image with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlane {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImagePlane {
    /// Checked constructor enforcing the pipeline invariants (finite, [0,1], sides ≥ 32).
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} is below the {MIN_SIDE}px minimum"
            )));
        }
        let plane = Self::from_raw(height, width, data)?;
        if let Some(v) = plane.data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::InvalidImage(format!("pixel value {v} outside [0,1]")));
        }
        Ok(plane)
    }

    /// Buffer without the range/size checks; used for intermediate products
    /// (pooled levels, decoded features) that are clamped by their producer.
    pub fn from_raw(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "buffer of {} values does not match {height}x{width}x3",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x).map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    }

    pub fn max_abs_diff(&self, other: &ImagePlane) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn mse(&self, other: &ImagePlane) -> f64 {
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            / n
    }

    /// Per-channel mean over pixels selected by `select`.
    pub fn channel_mean(&self, mut select: impl FnMut(usize) -> bool) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        let mut n = 0usize;
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            if select(i) {
                for c in 0..3 {
                    acc[c] += px[c] as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return [0.0; 3];
        }
        acc.map(|a| a / n as f64)
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions")
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self> {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let data: Vec<f32> = rgb.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Self::new(h as usize, w as usize, data)
    }

    /// Encode as an 8-bit PNG and write atomically.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = encode_png(&DynamicImage::ImageRgb8(self.to_rgb8()))?;
        fsutil::write_atomic(path, &bytes)
    }
}

/// H×W mask with values in {0, 1}; 1 marks the salient object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidImage(format!(
                "mask buffer of {} values does not match {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|v| *v > 1) {
            return Err(Error::InvalidImage("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            data: vec![value as u8; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x) as u8);
            }
        }
        Self { height, width, data }
    }

    /// Threshold a soft map: values ≥ 0.5 become foreground.
    pub fn from_soft(height: usize, width: usize, soft: &[f32]) -> Result<Self> {
        if soft.len() != height * width {
            return Err(Error::InvalidImage("soft mask size mismatch".into()));
        }
        let data = soft.iter().map(|v| (*v >= 0.5) as u8).collect();
        Ok(Self { height, width, data })
    }

    pub fn checkerboard(height: usize, width: usize, cell: usize) -> Self {
        Self::from_fn(height, width, |y, x| (y / cell + x / cell).is_multiple_of(2))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] == 1
    }

    pub fn is_set(&self, index: usize) -> bool {
        self.data[index] == 1
    }

    pub fn inverted(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| 1 - v).collect(),
        }
    }

    pub fn area_fraction(&self) -> f64 {
        let on = self.data.iter().filter(|v| **v == 1).count();
        on as f64 / self.data.len() as f64
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|v| *v as f32).collect()
    }

    /// Nearest-neighbour resample; stays binary.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            let sy = ((y as f64 + 0.5) * self.height as f64 / height as f64).floor() as usize;
            let sx = ((x as f64 + 0.5) * self.width as f64 / width as f64).floor() as usize;
            self.get(sy.min(self.height - 1), sx.min(self.width - 1))
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().map(|v| v * 255).collect();
        let gray = GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        fsutil::write_atomic(path, &encode_png(&DynamicImage::ImageLuma8(gray))?)
    }

    /// Load a single-channel mask image, thresholding at 0.5.
    pub fn load(path: &Path) -> Result<Self> {
        let img = decode_file(path)?;
        let gray = img.to_luma32f();
        let (w, h) = gray.dimensions();
        Self::from_soft(h as usize, w as usize, gray.as_raw())
    }
}

pub(crate) fn decode_file(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(Error::FileNotFound(path.to_path_buf()));
    }
    let reader = ImageReader::open(path)?
        .with_guessed_format()
        .map_err(|e| Error::CorruptImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    if reader.format().is_none() {
        return Err(Error::UnsupportedFormat(path.display().to_string()));
    }
    reader.decode().map_err(|e| match e {
        image::ImageError::Unsupported(u) => Error::UnsupportedFormat(u.to_string()),
        other => Error::CorruptImage {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidImage(format!("png encode: {e}")))?;
    Ok(out.into_inner())
}

/// Separable Gaussian blur of a single-channel map, edge-clamped.
pub fn gaussian_blur(height: usize, width: usize, data: &[f32], sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= s);

    let mut tmp = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sx = (x as isize + j as isize - radius).clamp(0, width as isize - 1) as usize;
                acc += k * data[y * width + sx];
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0f32; data.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                let sy = (y as isize + j as isize - radius).clamp(0, height as isize - 1) as usize;
                acc += k * tmp[sy * width + x];
            }
            out[y * width + x] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checked_constructor_rejects_small_and_out_of_range() {
        assert!(ImagePlane::new(16, 64, vec![0.0; 16 * 64 * 3]).is_err());
        assert!(ImagePlane::new(32, 32, vec![1.5; 32 * 32 * 3]).is_err());
        assert!(ImagePlane::new(32, 32, vec![f32::NAN; 32 * 32 * 3]).is_err());
        assert!(ImagePlane::new(32, 32, vec![0.25; 32 * 32 * 3]).is_ok());
    }

    #[test]
    fn soft_mask_thresholds_at_half() {
        let m = BinaryMask::from_soft(1, 4, &[0.2, 0.8, 0.5, 0.49]).unwrap();
        assert_eq!(m.data(), &[0, 1, 1, 0]);
    }

    #[test]
    fn nearest_resize_stays_binary() {
        let m = BinaryMask::checkerboard(64, 64, 8);
        let r = m.resize_nearest(37, 91);
        assert!(r.data().iter().all(|v| *v <= 1));
        assert_eq!(r.dims(), (37, 91));
    }

    #[test]
    fn blur_preserves_constants() {
        let d = vec![0.7f32; 100];
        let b = gaussian_blur(10, 10, &d, 2.5);
        assert!(b.iter().all(|v| (v - 0.7).abs() < 1e-6));
    }
}
