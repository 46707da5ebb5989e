//! Minimal convolutional primitives: 3x3 convolution, rectification, and
//! 2x2 pooling, each with a hand-written vector-Jacobian product for the
//! input path. Weights are fixed at construction; nothing here trains.
//!
//! Feature maps are row-major with interleaved channels, so the channel
//! vector at one spatial position is a contiguous slice.

use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;

/// Dense activation tensor, height x width x channels, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::DimMismatch(format!(
                "feature buffer has {} values, expected {}x{}x{} = {}",
                data.len(),
                height,
                width,
                channels,
                channels * height * width
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Treats an RGB image as a 3-channel feature map.
    pub fn from_image(img: &Image) -> Self {
        FeatureMap {
            channels: 3,
            height: img.height(),
            width: img.width(),
            data: img.as_slice().to_vec(),
        }
    }

    /// Interprets a 3-channel map as an RGB image.
    pub fn into_image(self) -> Result<Image> {
        if self.channels != 3 {
            return Err(Error::DimMismatch(format!(
                "expected 3 channels to form an image, got {}",
                self.channels
            )));
        }
        Image::from_vec(self.height, self.width, self.data)
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

    pub fn position_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Contiguous channel vector at one spatial position.
    #[inline]
    pub fn vector(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

/// One 3x3 convolution layer with fixed weights, zero padding, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    in_channels: usize,
    out_channels: usize,
    /// Layout `[out][in][ky][kx]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if weights.len() != out_channels * in_channels * 9 {
            return Err(Error::DimMismatch(format!(
                "conv weights have {} values, expected {}",
                weights.len(),
                out_channels * in_channels * 9
            )));
        }
        if bias.len() != out_channels {
            return Err(Error::DimMismatch(format!(
                "conv bias has {} values, expected {out_channels}",
                bias.len()
            )));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Validation("conv weights must be finite".into()));
        }
        Ok(ConvLayer {
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    /// Weights drawn once from `rng`, scaled for rectified fan-in, bias 0.
    pub fn seeded(in_channels: usize, out_channels: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (in_channels as f64 * 9.0)).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        let weights = (0..out_channels * in_channels * 9)
            .map(|_| normal.sample(rng))
            .collect();
        ConvLayer {
            in_channels,
            out_channels,
            weights,
            bias: vec![0.0; out_channels],
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    #[inline]
    fn weight(&self, oc: usize, ic: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((oc * self.in_channels + ic) * 3 + ky) * 3 + kx]
    }

    /// Forward convolution with zero padding; output keeps the input size.
    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        assert_eq!(input.channels, self.in_channels, "channel mismatch");
        let (h, w) = (input.height, input.width);
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for y in 0..h {
            for x in 0..w {
                for oc in 0..self.out_channels {
                    let mut acc = self.bias[oc];
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let v = input.vector(iy as usize, ix as usize);
                            for ic in 0..self.in_channels {
                                acc += self.weight(oc, ic, ky, kx) * v[ic];
                            }
                        }
                    }
                    out.set(y, x, oc, acc);
                }
            }
        }
        out
    }

    /// Input gradient of the convolution for an upstream output gradient.
    pub fn input_vjp(&self, upstream: &FeatureMap) -> FeatureMap {
        assert_eq!(upstream.channels, self.out_channels, "channel mismatch");
        let (h, w) = (upstream.height, upstream.width);
        let mut grad = FeatureMap::zeros(self.in_channels, h, w);
        for y in 0..h {
            for x in 0..w {
                for oc in 0..self.out_channels {
                    let u = upstream.get(y, x, oc);
                    if u == 0.0 {
                        continue;
                    }
                    for ky in 0..3usize {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3usize {
                            let ix = x as isize + kx as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let base = ((iy as usize) * w + ix as usize) * self.in_channels;
                            for ic in 0..self.in_channels {
                                grad.data[base + ic] += self.weight(oc, ic, ky, kx) * u;
                            }
                        }
                    }
                }
            }
        }
        grad
    }
}

/// Rectified linear activation.
pub fn relu(x: &FeatureMap) -> FeatureMap {
    FeatureMap {
        channels: x.channels,
        height: x.height,
        width: x.width,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Routes upstream gradients through the rectification mask of the
/// pre-activation input.
pub fn relu_vjp(pre: &FeatureMap, upstream: &FeatureMap) -> FeatureMap {
    assert_eq!(pre.data.len(), upstream.data.len(), "shape mismatch");
    FeatureMap {
        channels: pre.channels,
        height: pre.height,
        width: pre.width,
        data: pre
            .data
            .iter()
            .zip(&upstream.data)
            .map(|(&p, &u)| if p > 0.0 { u } else { 0.0 })
            .collect(),
    }
}

fn pooled_len(n: usize) -> usize {
    n.div_ceil(2)
}

/// 2x2 average pooling with ceil semantics: edge windows shrink and divide
/// by the number of valid cells.
pub fn avgpool2(x: &FeatureMap) -> FeatureMap {
    let (oh, ow) = (pooled_len(x.height), pooled_len(x.width));
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    for y in 0..oh {
        for xo in 0..ow {
            let y1 = (2 * y + 2).min(x.height);
            let x1 = (2 * xo + 2).min(x.width);
            let count = ((y1 - 2 * y) * (x1 - 2 * xo)) as f64;
            for c in 0..x.channels {
                let mut acc = 0.0;
                for iy in 2 * y..y1 {
                    for ix in 2 * xo..x1 {
                        acc += x.get(iy, ix, c);
                    }
                }
                out.set(y, xo, c, acc / count);
            }
        }
    }
    out
}

/// Input gradient of [`avgpool2`] for an input of `in_h` x `in_w`.
pub fn avgpool2_vjp(in_h: usize, in_w: usize, upstream: &FeatureMap) -> FeatureMap {
    assert_eq!(upstream.height, pooled_len(in_h), "pooled height mismatch");
    assert_eq!(upstream.width, pooled_len(in_w), "pooled width mismatch");
    let mut grad = FeatureMap::zeros(upstream.channels, in_h, in_w);
    for y in 0..upstream.height {
        for xo in 0..upstream.width {
            let y1 = (2 * y + 2).min(in_h);
            let x1 = (2 * xo + 2).min(in_w);
            let count = ((y1 - 2 * y) * (x1 - 2 * xo)) as f64;
            for c in 0..upstream.channels {
                let share = upstream.get(y, xo, c) / count;
                for iy in 2 * y..y1 {
                    for ix in 2 * xo..x1 {
                        let i = (iy * in_w + ix) * grad.channels + c;
                        grad.data[i] += share;
                    }
                }
            }
        }
    }
    grad
}

/// 2x2 max pooling with ceil semantics. Returns the pooled map and the flat
/// input index of each window's (first) maximum for the backward pass.
pub fn maxpool2(x: &FeatureMap) -> (FeatureMap, Vec<usize>) {
    let (oh, ow) = (pooled_len(x.height), pooled_len(x.width));
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; x.channels * oh * ow];
    for y in 0..oh {
        for xo in 0..ow {
            let y1 = (2 * y + 2).min(x.height);
            let x1 = (2 * xo + 2).min(x.width);
            for c in 0..x.channels {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for iy in 2 * y..y1 {
                    for ix in 2 * xo..x1 {
                        let i = (iy * x.width + ix) * x.channels + c;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                out.set(y, xo, c, best);
                arg[(y * ow + xo) * x.channels + c] = best_i;
            }
        }
    }
    (out, arg)
}

/// Input gradient of [`maxpool2`]: upstream values route to the recorded
/// argmax cells.
pub fn maxpool2_vjp(
    in_h: usize,
    in_w: usize,
    argmax: &[usize],
    upstream: &FeatureMap,
) -> FeatureMap {
    assert_eq!(argmax.len(), upstream.data.len(), "argmax length mismatch");
    let mut grad = FeatureMap::zeros(upstream.channels, in_h, in_w);
    for (i, &u) in upstream.data.iter().enumerate() {
        grad.data[argmax[i]] += u;
    }
    grad
}

pub(crate) fn write_f32s<W: Write>(w: &mut W, vals: &[f64]) -> std::io::Result<()> {
    for &v in vals {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f32s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(seed: u64, c: usize, h: usize, w: usize) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FeatureMap::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut weights = vec![0.0; 9];
        weights[4] = 1.0;
        let layer = ConvLayer::new(1, 1, weights, vec![0.0]).unwrap();
        let x = random_map(1, 1, 4, 5);
        assert_eq!(layer.forward(&x), x);
    }

    #[test]
    fn conv_sums_neighbors_with_zero_padding() {
        // All-ones 3x3 kernel on an all-ones 3x3 image counts the valid
        // neighborhood: 4 in corners, 6 on edges, 9 in the middle.
        let layer = ConvLayer::new(1, 1, vec![1.0; 9], vec![0.0]).unwrap();
        let x = FeatureMap::from_vec(1, 3, 3, vec![1.0; 9]).unwrap();
        let y = layer.forward(&x);
        assert_eq!(
            y.as_slice(),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn avgpool_ceil_divides_by_valid_count() {
        // 3x3 input pools to 2x2; the ragged edges average fewer cells.
        let x = FeatureMap::from_vec(
            1,
            3,
            3,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = avgpool2(&x);
        assert_eq!((y.height(), y.width()), (2, 2));
        assert_relative_eq!(y.get(0, 0, 0), 3.0);
        assert_relative_eq!(y.get(0, 1, 0), 4.5);
        assert_relative_eq!(y.get(1, 0, 0), 7.5);
        assert_relative_eq!(y.get(1, 1, 0), 9.0);
    }

    #[test]
    fn maxpool_tracks_argmax() {
        let x = FeatureMap::from_vec(1, 2, 2, vec![1.0, 5.0, 2.0, 0.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.as_slice(), &[5.0]);
        assert_eq!(arg, vec![1]);
        let up = FeatureMap::from_vec(1, 1, 1, vec![3.0]).unwrap();
        let g = maxpool2_vjp(2, 2, &arg, &up);
        assert_eq!(g.as_slice(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn relu_masks_negative_preactivations() {
        let pre = FeatureMap::from_vec(1, 1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&pre).as_slice(), &[0.0, 0.0, 2.0]);
        let up = FeatureMap::from_vec(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert_eq!(relu_vjp(&pre, &up).as_slice(), &[0.0, 0.0, 1.0]);
    }

    fn max_rel(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-10);
        a.iter()
            .zip(b)
            .fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn conv_input_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ConvLayer::seeded(2, 3, &mut rng);
        let x = random_map(4, 2, 4, 4);
        let upstream = random_map(5, 3, 4, 4);
        let grad = layer.input_vjp(&upstream);
        let dot = |m: &FeatureMap| -> f64 {
            layer
                .forward(m)
                .as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-4;
        let mut fd = vec![0.0; x.as_slice().len()];
        for i in 0..fd.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            fd[i] = (dot(&plus) - dot(&minus)) / (2.0 * h);
        }
        assert!(max_rel(grad.as_slice(), &fd) < 1e-6);
    }

    #[test]
    fn avgpool_vjp_matches_finite_differences() {
        let x = random_map(7, 2, 5, 3);
        let upstream = random_map(8, 2, 3, 2);
        let grad = avgpool2_vjp(5, 3, &upstream);
        let dot = |m: &FeatureMap| -> f64 {
            avgpool2(m)
                .as_slice()
                .iter()
                .zip(upstream.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-4;
        let mut fd = vec![0.0; x.as_slice().len()];
        for i in 0..fd.len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= h;
            fd[i] = (dot(&plus) - dot(&minus)) / (2.0 * h);
        }
        assert!(max_rel(grad.as_slice(), &fd) < 1e-6);
    }

    #[test]
    fn seeded_layers_are_deterministic() {
        let a = ConvLayer::seeded(3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        let b = ConvLayer::seeded(3, 4, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn f32_wire_roundtrip() {
        let vals = vec![0.0, 1.5, -2.25, 0.125];
        let mut buf = Vec::new();
        write_f32s(&mut buf, &vals).unwrap();
        let back = read_f32s(&mut buf.as_slice(), vals.len()).unwrap();
        assert_eq!(back, vals);
    }
}
