//! Quantitative evaluation of stylized fields.
//!
//! Three numbers summarize a run, computed over `N` paired novel views
//! (`N` = 120 for a frontal arc, 200 for an orbit):
//!
//! - *content distance*: the mean perceptual distance between each
//!   stylized render and the photo-realistic render of the same view,
//!
//!   ```text
//!   cd = (1/N) sum_i d(photoreal_i, stylized_i)
//!   ```
//!
//! - *style FID*: the Fréchet distance between embedded stylized renders
//!   and the style image replicated `N` times,
//!
//!   ```text
//!   FID = |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})
//!   ```
//!
//!   over embedding mean `mu` and covariance `S` (unbiased, `N - 1`);
//!   the replicated style set has exactly zero covariance, which the
//!   square root must tolerate;
//!
//! - their product form `(1 + cd) * (1 + FID)`, which rewards doing well
//!   on both axes at once.
//!
//! The distance and the embedder are pluggable backends so tests can pin
//! exact values with seeded doubles. The masked variant applies each
//! view's binary mask to *both* render sets (masked-out pixels become
//! exact black) before computing anything, so scores reflect only the
//! stylized region; the style image is never masked.

use crate::error::{Error, Result};
use crate::features::{BlockId, FeatureExtractor};
use crate::image::{Image, Plane};
use crate::losses::feature_mse;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A perceptual distance between two images of the same size, zero for
/// identical inputs.
pub trait PerceptualDistance: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, reference: &Image, other: &Image) -> Result<f64>;
}

/// Test double: squared error normalized by the reference's energy,
/// `sum (a - b)^2 / (sum a^2 + 1e-12)`. Zero for identical images,
/// including two black ones.
#[derive(Debug, Clone, Copy, Default)]
pub struct NormalizedMse;

impl PerceptualDistance for NormalizedMse {
    fn name(&self) -> &str {
        "normalized-mse"
    }

    fn distance(&self, reference: &Image, other: &Image) -> Result<f64> {
        if (reference.height(), reference.width()) != (other.height(), other.width()) {
            return Err(Error::DimMismatch(format!(
                "distance inputs {}x{} vs {}x{}",
                reference.height(),
                reference.width(),
                other.height(),
                other.width()
            )));
        }
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in reference.as_slice().iter().zip(other.as_slice()) {
            num += (a - b) * (a - b);
            den += a * a;
        }
        Ok(num / (den + 1e-12))
    }
}

/// Default perceptual backend: mean feature-space squared error over a
/// few extractor blocks.
pub struct FeatureDistance<'a> {
    fx: &'a FeatureExtractor,
    blocks: Vec<BlockId>,
    name: String,
}

impl<'a> FeatureDistance<'a> {
    pub fn new(fx: &'a FeatureExtractor) -> Self {
        Self::with_blocks(fx, vec![BlockId::L2, BlockId::L3, BlockId::L4])
    }

    pub fn with_blocks(fx: &'a FeatureExtractor, blocks: Vec<BlockId>) -> Self {
        assert!(!blocks.is_empty(), "a feature distance needs blocks");
        let name = format!("feature-mse@{}", fx.backend_name());
        FeatureDistance { fx, blocks, name }
    }
}

impl PerceptualDistance for FeatureDistance<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn distance(&self, reference: &Image, other: &Image) -> Result<f64> {
        let fa = self.fx.extract(reference, &self.blocks)?;
        let fb = self.fx.extract(other, &self.blocks)?;
        let mut acc = 0.0;
        for block in &self.blocks {
            acc += feature_mse(&fa[block], &fb[block])?;
        }
        Ok(acc / self.blocks.len() as f64)
    }
}

/// Maps an image to a fixed-length activation vector.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, x: &Image) -> Result<Vec<f64>>;
}

/// Test double: a seeded random linear projection of the image resized to
/// a small fixed grid. Deterministic for a given seed and dimension.
pub struct ProjectionEmbedder {
    dim: usize,
    side: usize,
    weights: Vec<f64>,
    name: String,
}

impl ProjectionEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        let side = 16usize;
        let n_in = side * side * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (n_in as f64).sqrt();
        let weights = (0..dim * n_in)
            .map(|_| {
                let g: f64 = StandardNormal.sample(&mut rng);
                scale * g
            })
            .collect();
        ProjectionEmbedder {
            dim,
            side,
            weights,
            name: format!("seeded-projection-{dim}"),
        }
    }
}

impl Embedder for ProjectionEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, x: &Image) -> Result<Vec<f64>> {
        let small = x.resize_bilinear(self.side, self.side);
        let flat = small.as_slice();
        let n_in = flat.len();
        let mut out = vec![0.0; self.dim];
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weights[k * n_in..(k + 1) * n_in];
            *o = row.iter().zip(flat).map(|(w, v)| w * v).sum();
        }
        Ok(out)
    }
}

/// Default embedder: channel-wise global average of one deep extractor
/// block, in the spirit of pooled classifier activations.
pub struct PooledConvEmbedder<'a> {
    fx: &'a FeatureExtractor,
    block: BlockId,
    name: String,
}

impl<'a> PooledConvEmbedder<'a> {
    pub fn new(fx: &'a FeatureExtractor) -> Self {
        Self::with_block(fx, BlockId::L4)
    }

    pub fn with_block(fx: &'a FeatureExtractor, block: BlockId) -> Self {
        let name = format!("pooled-conv-{}@{}", block.name(), fx.backend_name());
        PooledConvEmbedder { fx, block, name }
    }
}

impl Embedder for PooledConvEmbedder<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn dim(&self) -> usize {
        self.fx.block_channels(self.block)
    }

    fn embed(&self, x: &Image) -> Result<Vec<f64>> {
        let feats = self.fx.extract(x, &[self.block])?;
        let f = &feats[&self.block];
        let area = (f.height() * f.width()) as f64;
        let mut out = vec![0.0; f.channels()];
        for y in 0..f.height() {
            for x in 0..f.width() {
                for (o, v) in out.iter_mut().zip(f.vector(y, x)) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= area;
        }
        Ok(out)
    }
}

/// Embeds a set in index order.
pub fn embed_set(images: &[Image], e: &dyn Embedder) -> Result<Vec<Vec<f64>>> {
    images.iter().map(|x| e.embed(x)).collect()
}

fn moments(set: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = set.len();
    let mut mu = DVector::zeros(dim);
    for v in set {
        for (m, x) in mu.iter_mut().zip(v) {
            *m += x;
        }
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    if n > 1 {
        for v in set {
            let d = DVector::from_row_slice(v) - &mu;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mu, cov)
}

/// Principal square root of a symmetric positive-semidefinite matrix via
/// the eigendecomposition. The input is symmetrized first; a clearly
/// negative spectrum (below `-1e-6`) is regularized with `1e-6 * I` and
/// logged, and any remaining small negatives clamp to zero.
fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if min_eig < -1e-6 {
        log::warn!(
            "covariance square root: spectrum reaches {min_eig:.3e}; regularizing with 1e-6"
        );
        let dim = sym.nrows();
        eig = (sym + DMatrix::identity(dim, dim) * 1e-6).symmetric_eigen();
    }
    for v in eig.eigenvalues.iter_mut() {
        *v = v.max(0.0).sqrt();
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&eig.eigenvalues) * eig.eigenvectors.transpose()
}

/// Fréchet distance between the Gaussian moment matches of two embedding
/// sets: `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
/// Covariances use the unbiased `N - 1` normalization; a single-element
/// set has zero covariance.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let dim = match (a.first(), b.first()) {
        (Some(x), Some(y)) if x.len() == y.len() => x.len(),
        (Some(x), Some(y)) => {
            return Err(Error::DimMismatch(format!(
                "embedding dims {} vs {}",
                x.len(),
                y.len()
            )))
        }
        _ => {
            return Err(Error::Validation(
                "both embedding sets must be non-empty".into(),
            ))
        }
    };
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::DimMismatch(format!(
                "ragged embedding set: {} vs {dim}",
                v.len()
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding holds non-finite values".into()));
        }
    }
    let (mu_a, cov_a) = moments(a, dim);
    let (mu_b, cov_b) = moments(b, dim);
    let s1 = sqrtm_psd(&cov_a);
    let cross = sqrtm_psd(&(&s1 * &cov_b * &s1));
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let trace_term = (cov_a + cov_b - cross * 2.0).trace();
    // Exactly matched moments can land a hair below zero in floating point.
    Ok((mean_term + trace_term).max(0.0))
}

/// Mean perceptual distance between paired stylized and photo-realistic
/// renders.
pub fn content_dist(
    stylized: &[Image],
    photoreal: &[Image],
    d: &dyn PerceptualDistance,
) -> Result<f64> {
    if stylized.len() != photoreal.len() {
        return Err(Error::Validation(format!(
            "{} stylized renders but {} photo-realistic ones",
            stylized.len(),
            photoreal.len()
        )));
    }
    if stylized.is_empty() {
        return Err(Error::Validation("the evaluation set is empty".into()));
    }
    let mut acc = 0.0;
    for (g, c) in stylized.iter().zip(photoreal) {
        acc += d.distance(c, g)?;
    }
    Ok(acc / stylized.len() as f64)
}

/// Fréchet distance between embedded stylized renders and the style image
/// replicated once per render. The replicated set has zero covariance, so
/// the value reduces to `|mu_g - e_s|^2 + Tr(S_g)` — but it is computed
/// through the general formula.
pub fn style_fid(stylized: &[Image], style: &Image, e: &dyn Embedder) -> Result<f64> {
    if stylized.is_empty() {
        return Err(Error::Validation("the evaluation set is empty".into()));
    }
    let embedded = embed_set(stylized, e)?;
    let style_embedding = e.embed(style)?;
    let replicated = vec![style_embedding; stylized.len()];
    frechet_distance(&embedded, &replicated)
}

/// The combined score `(1 + cd) * (1 + sf)`.
pub fn artfid(cd: f64, sf: f64) -> Result<f64> {
    if !(cd.is_finite() && sf.is_finite()) || cd < 0.0 || sf < 0.0 {
        return Err(Error::Validation(format!(
            "scores must be finite and non-negative, got {cd} and {sf}"
        )));
    }
    Ok((1.0 + cd) * (1.0 + sf))
}

/// Paired render sets plus the style image, with optional per-view masks.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub photoreal: Vec<Image>,
    pub stylized: Vec<Image>,
    pub style: Image,
    pub masks: Option<Vec<Plane>>,
}

impl EvalSet {
    pub fn new(photoreal: Vec<Image>, stylized: Vec<Image>, style: Image) -> Result<Self> {
        if photoreal.len() != stylized.len() {
            return Err(Error::Validation(format!(
                "{} photo-realistic renders but {} stylized ones",
                photoreal.len(),
                stylized.len()
            )));
        }
        if photoreal.is_empty() {
            return Err(Error::Validation("the evaluation set is empty".into()));
        }
        for (i, (c, g)) in photoreal.iter().zip(&stylized).enumerate() {
            if (c.height(), c.width()) != (g.height(), g.width()) {
                return Err(Error::DimMismatch(format!(
                    "view {i}: photo-realistic {}x{} vs stylized {}x{}",
                    c.height(),
                    c.width(),
                    g.height(),
                    g.width()
                )));
            }
        }
        Ok(EvalSet {
            photoreal,
            stylized,
            style,
            masks: None,
        })
    }

    /// Attaches one binary mask per view.
    pub fn with_masks(mut self, masks: Vec<Plane>) -> Result<Self> {
        if masks.len() != self.photoreal.len() {
            return Err(Error::Validation(format!(
                "{} masks for {} views",
                masks.len(),
                self.photoreal.len()
            )));
        }
        for (i, (m, c)) in masks.iter().zip(&self.photoreal).enumerate() {
            if (m.height(), m.width()) != (c.height(), c.width()) {
                return Err(Error::DimMismatch(format!(
                    "view {i}: mask {}x{} vs render {}x{}",
                    m.height(),
                    m.width(),
                    c.height(),
                    c.width()
                )));
            }
            if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!(
                    "view {i}: mask values must be exactly 0 or 1"
                )));
            }
        }
        self.masks = Some(masks);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.photoreal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.photoreal.is_empty()
    }
}

/// Kept pixels are copied bit-for-bit; masked-out pixels become exact
/// black.
fn mask_to_black(x: &Image, m: &Plane) -> Image {
    Image::from_fn(x.height(), x.width(), |y, xx| {
        if m.get(y, xx) == 1.0 {
            x.get(y, xx)
        } else {
            [0.0, 0.0, 0.0]
        }
    })
}

/// The three scores plus everything a report record needs.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub content_dist: f64,
    pub style_fid: f64,
    pub artfid: f64,
    pub n: usize,
    pub masked: bool,
    pub distance_backend: String,
    pub embedder_backend: String,
}

/// Computes all three metrics over the set. With `masked` set, each
/// view's mask is applied to both render sets first (the masks must have
/// been attached).
pub fn evaluate(
    set: &EvalSet,
    d: &dyn PerceptualDistance,
    e: &dyn Embedder,
    masked: bool,
) -> Result<EvalSummary> {
    let (photoreal, stylized): (Vec<Image>, Vec<Image>) = if masked {
        let masks = set.masks.as_ref().ok_or_else(|| {
            Error::Config("masked evaluation requires masks for every view".into())
        })?;
        (
            set.photoreal
                .iter()
                .zip(masks)
                .map(|(x, m)| mask_to_black(x, m))
                .collect(),
            set.stylized
                .iter()
                .zip(masks)
                .map(|(x, m)| mask_to_black(x, m))
                .collect(),
        )
    } else {
        (set.photoreal.clone(), set.stylized.clone())
    };
    let cd = content_dist(&stylized, &photoreal, d)?;
    let sf = style_fid(&stylized, &set.style, e)?;
    Ok(EvalSummary {
        content_dist: cd,
        style_fid: sf,
        artfid: artfid(cd, sf)?,
        n: set.len(),
        masked,
        distance_backend: d.name().to_string(),
        embedder_backend: e.name().to_string(),
    })
}

/// The masked variant: scores reflect only the in-mask region.
pub fn mask_in_eval(
    set: &EvalSet,
    d: &dyn PerceptualDistance,
    e: &dyn Embedder,
) -> Result<EvalSummary> {
    evaluate(set, d, e, true)
}

/// One line of the metrics report, serialized as JSON.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRecord {
    pub scene: String,
    pub style: String,
    pub config: String,
    pub n: usize,
    pub content_dist: f64,
    pub style_fid: f64,
    pub artfid: f64,
    pub masked: bool,
    pub distance_backend: String,
    pub embedder_backend: String,
}

impl MetricsRecord {
    pub fn from_summary(
        scene: impl Into<String>,
        style: impl Into<String>,
        config: impl Into<String>,
        summary: &EvalSummary,
    ) -> Self {
        MetricsRecord {
            scene: scene.into(),
            style: style.into(),
            config: config.into(),
            n: summary.n,
            content_dist: summary.content_dist,
            style_fid: summary.style_fid,
            artfid: summary.artfid,
            masked: summary.masked,
            distance_backend: summary.distance_backend.clone(),
            embedder_backend: summary.embedder_backend.clone(),
        }
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        serde_json::from_str(line)
            .map_err(|e| Error::Validation(format!("bad metrics record: {e}")))
    }
}
