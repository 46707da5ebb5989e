//! Dense image containers.
//!
//! [`Image`] is an H x W x 3 RGB image with interleaved `f64` channels in
//! `[0, 1]`. [`Plane`] is a single-channel H x W map. Both are row-major.
//! All internal math runs in `f64`; quantization to 8-bit happens only at
//! the PNG boundary.

use std::path::Path;

use crate::error::{Error, Result};

/// RGB image, row-major, channels interleaved, values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    /// Black image of the given size.
    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    /// Builds an image by evaluating `f(y, x)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                img.set(y, x, f(y, x));
            }
        }
        img
    }

    /// Wraps an existing interleaved buffer. `data.len()` must equal
    /// `height * width * 3`.
    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::DimMismatch(format!(
                "image buffer has {} values, expected {}x{}x3 = {}",
                data.len(),
                height,
                width,
                height * width * 3
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of pixels.
    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    /// Flat interleaved view.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Applies `f` to every channel value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Clamps every channel to `[0, 1]`.
    pub fn clamp01(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Mean over all channel values.
    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// True if any channel value is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Bilinear resize to an exact target size.
    ///
    /// Samples with pixel centers aligned: source coordinate for output
    /// column `x` is `(x + 0.5) * w_in / w_out - 0.5`, clamped to the image.
    /// The identity size returns a copy.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        assert!(out_h > 0 && out_w > 0, "resize target must be non-empty");
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let sy_scale = self.height as f64 / out_h as f64;
        let sx_scale = self.width as f64 / out_w as f64;
        Image::from_fn(out_h, out_w, |y, x| {
            let sy = ((y as f64 + 0.5) * sy_scale - 0.5).clamp(0.0, (self.height - 1) as f64);
            let sx = ((x as f64 + 0.5) * sx_scale - 0.5).clamp(0.0, (self.width - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let x1 = (x0 + 1).min(self.width - 1);
            let fy = sy - y0 as f64;
            let fx = sx - x0 as f64;
            let mut out = [0.0; 3];
            let p00 = self.get(y0, x0);
            let p01 = self.get(y0, x1);
            let p10 = self.get(y1, x0);
            let p11 = self.get(y1, x1);
            for c in 0..3 {
                let top = p00[c] * (1.0 - fx) + p01[c] * fx;
                let bot = p10[c] * (1.0 - fx) + p11[c] * fx;
                out[c] = top * (1.0 - fy) + bot * fy;
            }
            out
        })
    }

    /// Bilinear resize by a scale factor, rounding each dimension to the
    /// nearest integer and keeping it at least 1.
    pub fn resize_by_factor(&self, factor: f64) -> Image {
        assert!(
            factor.is_finite() && factor > 0.0,
            "resize factor must be positive and finite"
        );
        let out_h = ((self.height as f64 * factor).round() as usize).max(1);
        let out_w = ((self.width as f64 * factor).round() as usize).max(1);
        self.resize_bilinear(out_h, out_w)
    }

    /// Loads a PNG as an RGB image, mapping 8-bit values to `[0, 1]`.
    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let decoded = image::open(path).map_err(|e| Error::codec(path, e))?;
        let rgb = decoded.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let data = rgb
            .as_raw()
            .iter()
            .map(|&v| v as f64 / 255.0)
            .collect::<Vec<_>>();
        Image::from_vec(h, w, data)
    }

    /// Saves as an 8-bit PNG, clamping to `[0, 1]` and rounding.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect::<Vec<_>>();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::codec(path, e))
    }
}

/// Single-channel map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Plane {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut p = Plane::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                p.set(y, x, f(y, x));
            }
        }
        p
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::DimMismatch(format!(
                "plane buffer has {} values, expected {}x{} = {}",
                data.len(),
                height,
                width,
                height * width
            )));
        }
        Ok(Plane {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Broadcasts the plane to a grey RGB image.
    pub fn to_image(&self) -> Image {
        Image::from_fn(self.height, self.width, |y, x| {
            let v = self.get(y, x);
            [v, v, v]
        })
    }

    /// Loads a PNG, converting to a single channel by the rec601 luma of
    /// its RGB pixels.
    pub fn load_png_luma(path: impl AsRef<Path>) -> Result<Plane> {
        let img = Image::load_png(path)?;
        Ok(Plane::from_fn(img.height(), img.width(), |y, x| {
            let [r, g, b] = img.get(y, x);
            0.299 * r + 0.587 * g + 0.114 * b
        }))
    }

    /// Saves as an 8-bit greyscale PNG.
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect::<Vec<_>>();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path).map_err(|e| Error::codec(path, e))
    }
}

/// Peak signal-to-noise ratio in dB between two images in `[0, 1]`.
///
/// `10 * log10(1 / mse)` over all channels; identical images return
/// positive infinity.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimMismatch(format!(
            "psnr inputs {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let n = a.as_slice().len();
    let mse = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}
