//! Color-space machinery: RGB/YIQ conversion, luminance extraction for
//! luminance-only style transfer, and linear color statistics matching.
//!
//! YIQ separates luminance Y from chrominance I and Q. The forward
//! transform is the NTSC matrix with first row (0.299, 0.587, 0.114); its
//! chrominance rows sum to zero, so any gray maps to `(g, 0, 0)`.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};

/// Luminance weights: the first row of the NTSC matrix.
pub const Y_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

const RGB_TO_YIQ: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [0.596, -0.274, -0.322],
    [0.211, -0.523, 0.312],
];

fn forward_matrix() -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| RGB_TO_YIQ[r][c])
}

fn inverse_matrix() -> Matrix3<f64> {
    forward_matrix()
        .try_inverse()
        .expect("NTSC matrix is invertible")
}

/// Luminance and chrominance planes of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct YiqImage {
    pub y: Plane,
    pub i: Plane,
    pub q: Plane,
}

impl YiqImage {
    pub fn height(&self) -> usize {
        self.y.height()
    }

    pub fn width(&self) -> usize {
        self.y.width()
    }
}

/// Linear NTSC transform from RGB.
pub fn rgb_to_yiq(x: &Image) -> YiqImage {
    let (h, w) = (x.height(), x.width());
    let mut y = Plane::zeros(h, w);
    let mut i = Plane::zeros(h, w);
    let mut q = Plane::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let rgb = x.get(r, c);
            let dot = |row: &[f64; 3]| row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
            y.set(r, c, dot(&RGB_TO_YIQ[0]));
            i.set(r, c, dot(&RGB_TO_YIQ[1]));
            q.set(r, c, dot(&RGB_TO_YIQ[2]));
        }
    }
    YiqImage { y, i, q }
}

/// Exact inverse of [`rgb_to_yiq`]; no clamping is applied.
pub fn yiq_to_rgb(x: &YiqImage) -> Image {
    let inv = inverse_matrix();
    Image::from_fn(x.height(), x.width(), |r, c| {
        let v = inv * Vector3::new(x.y.get(r, c), x.i.get(r, c), x.q.get(r, c));
        [v[0], v[1], v[2]]
    })
}

/// Replicates the luminance channel into all three channels, making a
/// chroma-free image suitable as feature-extractor input.
pub fn luminance_triplicate(x: &Image) -> Image {
    Image::from_fn(x.height(), x.width(), |r, c| {
        let rgb = x.get(r, c);
        let y = Y_WEIGHTS[0] * rgb[0] + Y_WEIGHTS[1] * rgb[1] + Y_WEIGHTS[2] * rgb[2];
        [y, y, y]
    })
}

/// Vector-Jacobian product of [`luminance_triplicate`]: each input channel
/// receives its luminance weight times the summed upstream channels.
pub fn luminance_triplicate_vjp(upstream: &Image) -> Image {
    Image::from_fn(upstream.height(), upstream.width(), |r, c| {
        let u = upstream.get(r, c);
        let s = u[0] + u[1] + u[2];
        [Y_WEIGHTS[0] * s, Y_WEIGHTS[1] * s, Y_WEIGHTS[2] * s]
    })
}

/// Mean pixel color.
pub fn pixel_mean(x: &Image) -> [f64; 3] {
    let n = x.pixel_count() as f64;
    let mut m = [0.0; 3];
    for y in 0..x.height() {
        for c in 0..x.width() {
            let rgb = x.get(y, c);
            for k in 0..3 {
                m[k] += rgb[k] / n;
            }
        }
    }
    m
}

/// Population covariance of the pixel colors.
pub fn pixel_covariance(x: &Image) -> Matrix3<f64> {
    let mean = pixel_mean(x);
    let n = x.pixel_count() as f64;
    let mut cov = Matrix3::zeros();
    for y in 0..x.height() {
        for c in 0..x.width() {
            let rgb = x.get(y, c);
            let d = Vector3::new(rgb[0] - mean[0], rgb[1] - mean[1], rgb[2] - mean[2]);
            cov += d * d.transpose() / n;
        }
    }
    cov
}

fn sqrt_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

fn inv_sqrt_psd(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(*m);
    let vals = eig.eigenvalues.map(|v| 1.0 / v.max(0.0).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Which statistics a color transfer matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchMode {
    /// Full linear matching of mean and covariance.
    Full,
    /// Shift the mean only.
    MeanOnly,
}

/// Result of a color transfer: the clamped output plus the pre-clamp image
/// whose statistics match the target exactly.
#[derive(Debug, Clone)]
pub struct ColorTransfer {
    pub output: Image,
    pub preclamp: Image,
}

/// Recolors `style` by the affine map `x' = A (x - mean_style) + mean_content`
/// with `A = cov_content^{1/2} cov_style^{-1/2}` (symmetric square roots),
/// so the pre-clamp output's mean and covariance match the content's. A
/// near-singular style covariance is regularized with `1e-5 * I` and logged.
pub fn histogram_match_linear(style: &Image, content: &Image) -> ColorTransfer {
    histogram_match(style, content, MatchMode::Full)
}

/// As [`histogram_match_linear`] with a selectable matching mode.
pub fn histogram_match(style: &Image, content: &Image, mode: MatchMode) -> ColorTransfer {
    let mu_s = pixel_mean(style);
    let mu_c = pixel_mean(content);
    let a = match mode {
        MatchMode::MeanOnly => Matrix3::identity(),
        MatchMode::Full => {
            let mut cov_s = pixel_covariance(style);
            let cov_c = pixel_covariance(content);
            let min_eig = SymmetricEigen::new(cov_s)
                .eigenvalues
                .iter()
                .fold(f64::INFINITY, |m, &v| m.min(v));
            if min_eig < 1e-8 {
                log::warn!(
                    "style color covariance is near-singular (min eigenvalue {min_eig:.2e}); \
                     regularizing with 1e-5"
                );
                cov_s += Matrix3::identity() * 1e-5;
            }
            sqrt_psd(&cov_c) * inv_sqrt_psd(&cov_s)
        }
    };
    let preclamp = Image::from_fn(style.height(), style.width(), |y, x| {
        let rgb = style.get(y, x);
        let d = Vector3::new(rgb[0] - mu_s[0], rgb[1] - mu_s[1], rgb[2] - mu_s[2]);
        let v = a * d;
        [v[0] + mu_c[0], v[1] + mu_c[1], v[2] + mu_c[2]]
    });
    ColorTransfer {
        output: preclamp.clamp01(),
        preclamp,
    }
}

/// Applies color matching toward `palette_source`'s statistics to each
/// render. Disabled, it returns the renders unchanged bit-for-bit.
pub fn recolor(
    renders: &[Image],
    palette_source: &Image,
    enabled: bool,
    mode: MatchMode,
) -> Vec<Image> {
    if !enabled {
        return renders.to_vec();
    }
    renders
        .iter()
        .map(|r| histogram_match(r, palette_source, mode).output)
        .collect()
}

/// Mean absolute chrominance (|I| + |Q|) difference between two images,
/// the deviation measure for color-preservation checks.
pub fn chroma_deviation(a: &Image, b: &Image) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::DimMismatch(format!(
            "chroma deviation inputs {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let ya = rgb_to_yiq(a);
    let yb = rgb_to_yiq(b);
    let n = (a.height() * a.width()) as f64;
    let mut acc = 0.0;
    for y in 0..a.height() {
        for x in 0..a.width() {
            acc += (ya.i.get(y, x) - yb.i.get(y, x)).abs()
                + (ya.q.get(y, x) - yb.q.get(y, x)).abs();
        }
    }
    Ok(acc / n)
}
