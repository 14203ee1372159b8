//! Planar float image patches and the PNG/JPEG codec boundary.
//!
//! Pixels are stored channel-major (CHW) so patches convert to tensors
//! without reshuffling. Every patch carries its value-range convention:
//! unit range [0,1] at the I/O boundary, signed range [-1,1] inside the
//! model.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::ImageReader;

use crate::error::{Error, Result, Stage};

/// Value-range convention for pixel data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ValueRange {
    /// [0, 1]; used for files, masks and loss evaluation.
    Unit,
    /// [-1, 1]; used for generator and discriminator activations.
    Signed,
}

/// H×W×C float image stored as planar CHW data.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    channels: usize,
    height: usize,
    width: usize,
    range: ValueRange,
    data: Vec<f32>,
}

impl ImagePatch {
    pub fn zeros(channels: usize, height: usize, width: usize, range: ValueRange) -> Self {
        ImagePatch {
            channels,
            height,
            width,
            range,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_data(
        channels: usize,
        height: usize,
        width: usize,
        range: ValueRange,
        data: Vec<f32>,
    ) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dimension(
                Stage::Datapipe,
                format!(
                    "expected {} values for a {}x{}x{} patch, got {}",
                    channels * height * width,
                    height,
                    width,
                    channels,
                    data.len()
                ),
            ));
        }
        Ok(ImagePatch { channels, height, width, range, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// One channel plane, row-major.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub(crate) fn with_range(mut self, range: ValueRange) -> Self {
        self.range = range;
        self
    }

    /// (C, H, W) tensor view of the patch.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Tensor::from_vec(self.data.clone(), (self.channels, self.height, self.width), device)
            .map_err(Error::tensor(Stage::Datapipe))
    }

    /// Rebuild a patch from a (C, H, W) tensor.
    pub fn from_tensor(tensor: &Tensor, range: ValueRange) -> Result<Self> {
        let err = Error::tensor(Stage::Datapipe);
        let (channels, height, width) = tensor.dims3().map_err(Error::tensor(Stage::Datapipe))?;
        let data = tensor
            .to_dtype(DType::F32)
            .and_then(|t| t.flatten_all()?.to_vec1::<f32>())
            .map_err(err)?;
        ImagePatch::from_data(channels, height, width, range, data)
    }
}

/// Bilinear resize; pixel centers aligned via the half-pixel convention.
/// Exact copy when the target size equals the source size.
pub fn resize_bilinear(src: &ImagePatch, height: usize, width: usize) -> ImagePatch {
    if height == src.height && width == src.width {
        return src.clone();
    }
    let mut out = ImagePatch::zeros(src.channels, height, width, src.range);
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    for c in 0..src.channels {
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (src.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(src.height - 1);
            let wy = (fy - y0 as f64) as f32;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (src.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(src.width - 1);
                let wx = (fx - x0 as f64) as f32;
                let v = src.get(c, y0, x0) * (1.0 - wy) * (1.0 - wx)
                    + src.get(c, y0, x1) * (1.0 - wy) * wx
                    + src.get(c, y1, x0) * wy * (1.0 - wx)
                    + src.get(c, y1, x1) * wy * wx;
                out.set(c, y, x, v);
            }
        }
    }
    out
}

/// Nearest-neighbor resize for label maps; preserves the value set.
pub fn resize_nearest(src: &ImagePatch, height: usize, width: usize) -> ImagePatch {
    if height == src.height && width == src.width {
        return src.clone();
    }
    let mut out = ImagePatch::zeros(src.channels, height, width, src.range);
    let sy = src.height as f64 / height as f64;
    let sx = src.width as f64 / width as f64;
    for c in 0..src.channels {
        for y in 0..height {
            let iy = (((y as f64 + 0.5) * sy).floor() as usize).min(src.height - 1);
            for x in 0..width {
                let ix = (((x as f64 + 0.5) * sx).floor() as usize).min(src.width - 1);
                out.set(c, y, x, src.get(c, iy, ix));
            }
        }
    }
    out
}

/// Decode an RGB image file into a unit-range patch.
pub fn load_rgb(path: &Path) -> Result<ImagePatch> {
    let img = ImageReader::open(path)
        .map_err(Error::io(Stage::Datapipe, path))?
        .decode()
        .map_err(Error::image(Stage::Datapipe, path))?
        .to_rgb8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let mut patch = ImagePatch::zeros(3, height, width, ValueRange::Unit);
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            patch.set(c, y as usize, x as usize, px.0[c] as f32 / 255.0);
        }
    }
    Ok(patch)
}

/// Decode a grayscale image file into a single-channel unit-range patch.
pub fn load_gray(path: &Path) -> Result<ImagePatch> {
    let img = ImageReader::open(path)
        .map_err(Error::io(Stage::Datapipe, path))?
        .decode()
        .map_err(Error::image(Stage::Datapipe, path))?
        .to_luma8();
    let (width, height) = (img.width() as usize, img.height() as usize);
    let mut patch = ImagePatch::zeros(1, height, width, ValueRange::Unit);
    for (x, y, px) in img.enumerate_pixels() {
        patch.set(0, y as usize, x as usize, px.0[0] as f32 / 255.0);
    }
    Ok(patch)
}

/// Write an 8-bit grayscale PNG from row-major bytes.
pub fn save_gray_png(path: &Path, data: &[u8], height: usize, width: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::dimension(Stage::Datapipe, "gray buffer does not match dimensions"))?;
    img.save(path).map_err(Error::image(Stage::Datapipe, path))
}

/// Write an 8-bit RGB PNG from interleaved row-major bytes.
pub fn save_rgb_png(path: &Path, data: &[u8], height: usize, width: usize) -> Result<()> {
    let img = image::RgbImage::from_raw(width as u32, height as u32, data.to_vec())
        .ok_or_else(|| Error::dimension(Stage::Datapipe, "rgb buffer does not match dimensions"))?;
    img.save(path).map_err(Error::image(Stage::Datapipe, path))
}

/// Quantize a unit-range patch to interleaved RGB bytes (3-channel patches)
/// or replicated gray (1-channel patches).
pub fn to_rgb8(patch: &ImagePatch) -> Vec<u8> {
    let (h, w) = (patch.height(), patch.width());
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let ch = if patch.channels() == 1 { 0 } else { c };
                let v = (patch.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                out.push(v);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_roundtrip_through_tensor() {
        let data: Vec<f32> = (0..2 * 3 * 4).map(|i| i as f32 / 10.0).collect();
        let patch = ImagePatch::from_data(2, 3, 4, ValueRange::Unit, data.clone()).unwrap();
        let tensor = patch.to_tensor(&Device::Cpu).unwrap();
        assert_eq!(tensor.dims(), &[2, 3, 4]);
        let back = ImagePatch::from_tensor(&tensor, ValueRange::Unit).unwrap();
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn from_data_rejects_wrong_length() {
        assert!(ImagePatch::from_data(3, 2, 2, ValueRange::Unit, vec![0.0; 11]).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let data: Vec<f32> = (0..3 * 5 * 7).map(|i| (i % 13) as f32 / 13.0).collect();
        let patch = ImagePatch::from_data(3, 5, 7, ValueRange::Unit, data).unwrap();
        assert_eq!(resize_bilinear(&patch, 5, 7), patch);
        assert_eq!(resize_nearest(&patch, 5, 7), patch);
    }

    #[test]
    fn resize_bilinear_preserves_constant_images() {
        let patch = ImagePatch::from_data(1, 8, 8, ValueRange::Unit, vec![0.37; 64]).unwrap();
        let up = resize_bilinear(&patch, 13, 5);
        for &v in up.data() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn resize_bilinear_2x_downscale_averages_blocks() {
        // With the half-pixel convention a 2x downscale lands exactly between
        // the four source pixels, so each output is their plain average.
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let patch = ImagePatch::from_data(1, 4, 4, ValueRange::Unit, data).unwrap();
        let down = resize_bilinear(&patch, 2, 2);
        assert!((down.get(0, 0, 0) - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-6);
        assert!((down.get(0, 1, 1) - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-6);
    }

    #[test]
    fn nearest_resize_keeps_binary_values() {
        let mut patch = ImagePatch::zeros(1, 6, 6, ValueRange::Unit);
        for y in 0..6 {
            for x in 0..6 {
                patch.set(0, y, x, ((x + y) % 2) as f32);
            }
        }
        let up = resize_nearest(&patch, 9, 9);
        for &v in up.data() {
            assert!(v == 0.0 || v == 1.0);
        }
    }
}
