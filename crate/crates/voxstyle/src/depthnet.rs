//! Monocular depth estimation backing the geometry-stabilising loss term.
//!
//! The trainer never needs metric depth — only a differentiable per-pixel
//! map whose *relative* structure reacts to geometry changes in the render.
//! Two backends provide that map:
//!
//! * a self-contained stub: the inverse luminance `1 - Y(x)` smoothed with a
//!   fixed seeded positive 5x5 kernel under replicate padding (bright things
//!   tend to be close in casually captured scenes, and smoothing keeps the
//!   map from chasing texture), and
//! * a small pretrained convolutional regressor loaded from a weights file
//!   (3x3 convs with ReLU between layers, a linear final layer, one output
//!   channel).
//!
//! Either raw map is then normalised per image to `[0, 1]`:
//!
//! ```text
//! d_i = (s_i - min s) / (max s - min s + 1e-12)
//! ```
//!
//! so the loss compares relative layouts rather than absolute scales. The
//! normalisation is differentiated exactly, including the dependence of the
//! min/max pivots on the input (subgradient at ties: first occurrence in
//! row-major order).
//!
//! Weights file format (`voxstyle-depthnet 1`):
//!
//! ```text
//! voxstyle-depthnet 1
//! channels <output channels per layer, last must be 1>
//! end-header
//! <little-endian f32 payload: per layer, conv weights then bias>
//! ```
//!
//! Conv weights are laid out `[out][in][ky][kx]`; the first layer takes 3
//! input channels (RGB in `[0, 1]`, no further input normalisation).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::color::Y_WEIGHTS;
use crate::convnet::{read_f32s, relu, relu_vjp, write_f32s, ConvLayer, FeatureMap};
use crate::error::{Error, Result};
use crate::image::{Image, Plane};

/// Environment variable naming a depth-regressor weights file. When unset
/// (or unreadable) the estimator falls back to the smoothing stub.
pub const DEPTHNET_ENV: &str = "VOXSTYLE_DEPTHNET";

const FILE_MAGIC: &str = "voxstyle-depthnet 1";
const NORM_EPS: f64 = 1e-12;

/// A raw (pre-normalisation) depth map producer. Implementations must be
/// deterministic: identical inputs give bit-identical maps.
pub trait DepthBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Raw depth map, same height and width as the input.
    fn raw_depth(&self, x: &Image) -> Result<Plane>;

    /// Pulls a cotangent on the raw map back to the input image.
    fn raw_depth_vjp(&self, x: &Image, upstream: &Plane) -> Result<Image>;
}

/// The self-contained backend: smoothed inverse luminance.
pub struct LuminanceStub {
    kernel: [[f64; 5]; 5],
}

impl LuminanceStub {
    pub fn new() -> Self {
        // The kernel is arbitrary but fixed: positive weights, normalised to
        // sum 1, drawn from a seeded stream so every build agrees on it.
        let mut rng = ChaCha8Rng::seed_from_u64(u64::from_le_bytes(*b"voxdepth"));
        let mut kernel = [[0.0; 5]; 5];
        let mut sum = 0.0;
        for row in kernel.iter_mut() {
            for k in row.iter_mut() {
                *k = 0.5 + rng.gen::<f64>();
                sum += *k;
            }
        }
        for row in kernel.iter_mut() {
            for k in row.iter_mut() {
                *k /= sum;
            }
        }
        LuminanceStub { kernel }
    }

    /// The fixed smoothing kernel (rows sum to 1 across the whole kernel).
    pub fn kernel(&self) -> &[[f64; 5]; 5] {
        &self.kernel
    }

    fn inverse_luminance(x: &Image) -> Plane {
        Plane::from_fn(x.height(), x.width(), |y, xx| {
            let p = x.get(y, xx);
            1.0 - (Y_WEIGHTS[0] * p[0] + Y_WEIGHTS[1] * p[1] + Y_WEIGHTS[2] * p[2])
        })
    }
}

impl Default for LuminanceStub {
    fn default() -> Self {
        Self::new()
    }
}

impl DepthBackend for LuminanceStub {
    fn name(&self) -> &str {
        "smoothed-inverse-luminance"
    }

    fn raw_depth(&self, x: &Image) -> Result<Plane> {
        let (h, w) = (x.height(), x.width());
        let inv = Self::inverse_luminance(x);
        let mut out = Plane::zeros(h, w);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (dy, row) in self.kernel.iter().enumerate() {
                    let sy = (y + dy).saturating_sub(2).min(h - 1);
                    for (dx, &k) in row.iter().enumerate() {
                        let sx = (xx + dx).saturating_sub(2).min(w - 1);
                        acc += k * inv.get(sy, sx);
                    }
                }
                out.set(y, xx, acc);
            }
        }
        Ok(out)
    }

    fn raw_depth_vjp(&self, x: &Image, upstream: &Plane) -> Result<Image> {
        let (h, w) = (x.height(), x.width());
        if upstream.height() != h || upstream.width() != w {
            return Err(Error::DimMismatch(format!(
                "depth cotangent is {}x{} but the image is {h}x{w}",
                upstream.height(),
                upstream.width()
            )));
        }
        // Adjoint of the replicate-padded correlation: scatter each output
        // cotangent into the clamped source cells it read from.
        let mut ginv = Plane::zeros(h, w);
        for y in 0..h {
            for xx in 0..w {
                let u = upstream.get(y, xx);
                if u == 0.0 {
                    continue;
                }
                for (dy, row) in self.kernel.iter().enumerate() {
                    let sy = (y + dy).saturating_sub(2).min(h - 1);
                    for (dx, &k) in row.iter().enumerate() {
                        let sx = (xx + dx).saturating_sub(2).min(w - 1);
                        ginv.set(sy, sx, ginv.get(sy, sx) + k * u);
                    }
                }
            }
        }
        // d(1 - Y)/d rgb_c = -Y_WEIGHTS[c].
        Ok(Image::from_fn(h, w, |y, xx| {
            let g = ginv.get(y, xx);
            [-Y_WEIGHTS[0] * g, -Y_WEIGHTS[1] * g, -Y_WEIGHTS[2] * g]
        }))
    }
}

/// The pretrained backend: a stack of 3x3 convs ending in one linear output
/// channel.
pub struct ConvRegressor {
    layers: Vec<ConvLayer>,
}

impl ConvRegressor {
    pub fn new(layers: Vec<ConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Validation("a depth regressor needs at least one layer".into()));
        }
        let mut carry = 3;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_channels() != carry {
                return Err(Error::Validation(format!(
                    "depth regressor layer {i} expects {} input channels, got {}",
                    carry,
                    layer.in_channels()
                )));
            }
            carry = layer.out_channels();
        }
        if carry != 1 {
            return Err(Error::Validation(format!(
                "the final depth regressor layer must emit 1 channel, got {carry}"
            )));
        }
        Ok(ConvRegressor { layers })
    }

    /// Pre-activation maps for every layer (ReLU applies between layers,
    /// not after the last).
    fn forward_pres(&self, x: &Image) -> Vec<FeatureMap> {
        let mut pres = Vec::with_capacity(self.layers.len());
        let mut cur = FeatureMap::from_image(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let pre = layer.forward(&cur);
            if i + 1 < self.layers.len() {
                cur = relu(&pre);
            }
            pres.push(pre);
        }
        pres
    }
}

impl DepthBackend for ConvRegressor {
    fn name(&self) -> &str {
        "conv-regressor"
    }

    fn raw_depth(&self, x: &Image) -> Result<Plane> {
        let pres = self.forward_pres(x);
        let out = pres.last().expect("at least one layer");
        let mut plane = Plane::zeros(x.height(), x.width());
        for y in 0..x.height() {
            for xx in 0..x.width() {
                plane.set(y, xx, out.get(y, xx, 0));
            }
        }
        Ok(plane)
    }

    fn raw_depth_vjp(&self, x: &Image, upstream: &Plane) -> Result<Image> {
        if upstream.height() != x.height() || upstream.width() != x.width() {
            return Err(Error::DimMismatch(format!(
                "depth cotangent is {}x{} but the image is {}x{}",
                upstream.height(),
                upstream.width(),
                x.height(),
                x.width()
            )));
        }
        let pres = self.forward_pres(x);
        let mut g = FeatureMap::zeros(1, x.height(), x.width());
        for y in 0..x.height() {
            for xx in 0..x.width() {
                g.set(y, xx, 0, upstream.get(y, xx));
            }
        }
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].input_vjp(&g);
            if i > 0 {
                g = relu_vjp(&pres[i - 1], &g);
            }
        }
        g.into_image()
    }
}

/// Depth estimator: a backend plus the per-image min-max normalisation.
pub struct DepthEstimator {
    backend: Box<dyn DepthBackend>,
    normalize: bool,
}

impl DepthEstimator {
    /// The self-contained smoothing stub, normalised output.
    pub fn stub() -> Self {
        DepthEstimator {
            backend: Box::new(LuminanceStub::new()),
            normalize: true,
        }
    }

    /// A conv regressor loaded from a weights file, normalised output.
    pub fn pretrained_from_file(path: impl AsRef<Path>) -> Result<Self> {
        let layers = read_depthnet_file(path)?;
        Ok(DepthEstimator {
            backend: Box::new(ConvRegressor::new(layers)?),
            normalize: true,
        })
    }

    /// Uses the weights file named by `VOXSTYLE_DEPTHNET` when set and
    /// loadable; otherwise downgrades to the stub (with a warning when a
    /// file was named but unusable).
    pub fn from_env_or_stub() -> Self {
        match std::env::var(DEPTHNET_ENV) {
            Ok(path) if !path.is_empty() => match Self::pretrained_from_file(&path) {
                Ok(est) => est,
                Err(e) => {
                    log::warn!(
                        "could not load depth weights from {path}: {e}; \
                         falling back to the smoothing stub"
                    );
                    Self::stub()
                }
            },
            _ => {
                log::debug!("{DEPTHNET_ENV} not set; using the smoothing stub");
                Self::stub()
            }
        }
    }

    /// Wraps an arbitrary backend; mainly for tests and experiments.
    pub fn custom(backend: Box<dyn DepthBackend>, normalize: bool) -> Self {
        DepthEstimator { backend, normalize }
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn normalized(&self) -> bool {
        self.normalize
    }

    pub fn set_normalized(&mut self, on: bool) {
        self.normalize = on;
    }

    /// The depth map for `x`; in `[0, 1]` when normalisation is on.
    pub fn estimate(&self, x: &Image) -> Result<Plane> {
        let raw = self.backend.raw_depth(x)?;
        if !self.normalize {
            return Ok(raw);
        }
        let (lo, hi) = min_max(&raw);
        let range = hi - lo + NORM_EPS;
        Ok(raw.map(|v| (v - lo) / range))
    }

    /// Pulls a cotangent on the (possibly normalised) depth map back to the
    /// input image, differentiating through the min/max pivots.
    pub fn estimate_vjp(&self, x: &Image, upstream: &Plane) -> Result<Image> {
        if !self.normalize {
            return self.backend.raw_depth_vjp(x, upstream);
        }
        let raw = self.backend.raw_depth(x)?;
        if upstream.height() != raw.height() || upstream.width() != raw.width() {
            return Err(Error::DimMismatch(format!(
                "depth cotangent is {}x{} but the map is {}x{}",
                upstream.height(),
                upstream.width(),
                raw.height(),
                raw.width()
            )));
        }
        let (a, b) = arg_min_max(&raw);
        let lo = raw.as_slice()[a];
        let range = raw.as_slice()[b] - lo + NORM_EPS;
        // d_i = (s_i - s_a) / (s_b - s_a + eps). With G = sum of upstream and
        // H = sum of upstream * (s - s_a):
        //   grad_j = u_j / range          (direct term)
        //   grad_a += (H / range^2 - G / range)
        //   grad_b -= H / range^2
        let mut big_g = 0.0;
        let mut big_h = 0.0;
        for (u, s) in upstream.as_slice().iter().zip(raw.as_slice()) {
            big_g += u;
            big_h += u * (s - lo);
        }
        let mut grad_raw = upstream.map(|u| u / range);
        {
            let slice = grad_raw.as_mut_slice();
            slice[a] += big_h / (range * range) - big_g / range;
            slice[b] -= big_h / (range * range);
        }
        self.backend.raw_depth_vjp(x, &grad_raw)
    }
}

fn min_max(p: &Plane) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in p.as_slice() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    (lo, hi)
}

/// Flat indices of the first minimum and first maximum, row-major.
fn arg_min_max(p: &Plane) -> (usize, usize) {
    let s = p.as_slice();
    let mut a = 0;
    let mut b = 0;
    for (i, &v) in s.iter().enumerate() {
        if v < s[a] {
            a = i;
        }
        if v > s[b] {
            b = i;
        }
    }
    (a, b)
}

/// Reads a `voxstyle-depthnet 1` weights file into conv layers.
fn read_depthnet_file(path: impl AsRef<Path>) -> Result<Vec<ConvLayer>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };

    let mut header = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte)
            .map_err(|_| bad("header ended before 'end-header'".into()))?;
        header.push(byte[0]);
        if header.ends_with(b"end-header\n") {
            break;
        }
        if header.len() > 4096 {
            return Err(bad("header longer than 4096 bytes".into()));
        }
    }
    let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(FILE_MAGIC) {
        return Err(bad(format!("missing magic line '{FILE_MAGIC}'")));
    }
    let mut channels: Option<Vec<usize>> = None;
    for line in lines {
        if line == "end-header" {
            break;
        }
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("channels") => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    parts.map(str::parse).collect();
                channels = Some(parsed.map_err(|_| bad("channels must be integers".into()))?);
            }
            Some(other) => return Err(bad(format!("unknown header key '{other}'"))),
            None => {}
        }
    }
    let channels = channels.ok_or_else(|| bad("missing 'channels' line".into()))?;
    if channels.is_empty() {
        return Err(bad("channels line lists no layers".into()));
    }
    if *channels.last().unwrap() != 1 {
        return Err(bad("the last layer must emit 1 channel".into()));
    }

    let mut layers = Vec::with_capacity(channels.len());
    let mut in_c = 3;
    for &out_c in &channels {
        if out_c == 0 {
            return Err(bad("a layer cannot emit 0 channels".into()));
        }
        let weights = read_f32s(&mut r, out_c * in_c * 9)
            .map_err(|_| bad("payload ended inside conv weights".into()))?;
        let bias = read_f32s(&mut r, out_c)
            .map_err(|_| bad("payload ended inside conv bias".into()))?;
        layers.push(ConvLayer::new(in_c, out_c, weights, bias)?);
        in_c = out_c;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing bytes after the declared layers".into()));
    }
    Ok(layers)
}

/// Writes a `voxstyle-depthnet 1` weights file. The layer chain must start
/// at 3 input channels and end at 1 output channel.
pub fn write_depthnet_file(path: impl AsRef<Path>, layers: &[ConvLayer]) -> Result<()> {
    let path = path.as_ref();
    // Reuse the chain validation.
    ConvRegressor::new(layers.to_vec())?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{FILE_MAGIC}").map_err(io_err)?;
    let chans: Vec<String> = layers.iter().map(|l| l.out_channels().to_string()).collect();
    writeln!(w, "channels {}", chans.join(" ")).map_err(io_err)?;
    writeln!(w, "end-header").map_err(io_err)?;
    for layer in layers {
        write_f32s(&mut w, layer.weights()).map_err(io_err)?;
        write_f32s(&mut w, layer.bias()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
