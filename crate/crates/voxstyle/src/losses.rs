//! The stylization objective and its pieces.
//!
//! The trainer minimises, over rendered images `x`,
//!
//! ```text
//! L(x) = a * L_style(x) + b * L_content(x) + g * L_tv(x) + d * L_depth(x)
//! ```
//!
//! * `L_style` matches deep features of the render against a style exemplar
//!   by nearest-neighbour cosine distance: for every render feature vector
//!   `u` find the style vector `v` maximising `cos(u, v)` and average
//!   `1 - cos`. With the norm guard folded in,
//!
//!   ```text
//!   cos(u, v) = (u . v) / ((|u| + 1e-8) * (|v| + 1e-8))
//!   ```
//!
//!   Each style can weight several feature blocks, pre-resize the exemplar
//!   per block (coarser or finer brush feel), restrict matching to the
//!   luminance channel, and carry a blend weight against other styles.
//! * `L_content` is the mean squared difference of content-block features
//!   between the render and its photo-real reference.
//! * `L_tv` is the mean squared difference of horizontally and vertically
//!   adjacent pixels, averaged over every neighbour pair and channel.
//! * `L_depth` is the mean squared difference between the monocular depth
//!   maps of the render and the reference.
//!
//! Gradients are hand-derived vector-Jacobian products throughout; the
//! nearest-neighbour assignment and the depth min/max pivots are treated as
//! locally constant (exact away from ties).

use std::collections::{BTreeMap, BTreeSet};

use crate::color::{luminance_triplicate, luminance_triplicate_vjp};
use crate::convnet::FeatureMap;
use crate::depthnet::DepthEstimator;
use crate::error::{Error, Result};
use crate::features::{BlockId, FeatureExtractor, Trace};
use crate::field::SceneKind;
use crate::image::{Image, Plane};

/// Norm guard in the cosine denominator.
const COSINE_EPS: f64 = 1e-8;
/// Below this norm a render vector's direction is treated as constant.
const TINY_NORM: f64 = 1e-12;
/// Allowed range for per-block style scales.
pub const BLOCK_SCALE_RANGE: (f64, f64) = (0.125, 8.0);

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean over render positions of the nearest-neighbour cosine distance to
/// the style set. Range `[0, 2]`.
pub fn nnfm_loss(render: &FeatureMap, style: &FeatureMap) -> Result<f64> {
    Ok(nnfm_inner(render, style, false)?.0)
}

/// The loss together with its gradient with respect to the render features.
pub fn nnfm_loss_grad(render: &FeatureMap, style: &FeatureMap) -> Result<(f64, FeatureMap)> {
    let (loss, grad) = nnfm_inner(render, style, true)?;
    Ok((loss, grad.expect("gradient was requested")))
}

fn nnfm_inner(
    render: &FeatureMap,
    style: &FeatureMap,
    want_grad: bool,
) -> Result<(f64, Option<FeatureMap>)> {
    let c = render.channels();
    if style.channels() != c {
        return Err(Error::DimMismatch(format!(
            "feature-matching channel mismatch: render has {c} channels, style has {}",
            style.channels()
        )));
    }
    let style_vecs: Vec<&[f64]> = style.as_slice().chunks_exact(c).collect();
    let style_norms: Vec<f64> = style_vecs.iter().map(|v| norm(v)).collect();
    let n = render.position_count() as f64;
    let mut grad = want_grad.then(|| FeatureMap::zeros(c, render.height(), render.width()));
    let mut total = 0.0;
    for (p, u) in render.as_slice().chunks_exact(c).enumerate() {
        let u_norm = norm(u);
        let pu = u_norm + COSINE_EPS;
        let mut best = 0;
        let mut best_cos = f64::NEG_INFINITY;
        for (q, v) in style_vecs.iter().enumerate() {
            let cos = dot(u, v) / (pu * (style_norms[q] + COSINE_EPS));
            if cos > best_cos {
                best_cos = cos;
                best = q;
            }
        }
        total += 1.0 - best_cos;
        if let Some(g) = grad.as_mut() {
            // d(1 - cos)/du = -v / (pu * qv) + cos * u / (pu * |u|); the
            // second term differentiates the |u| in the denominator and is
            // dropped for vanishing vectors.
            let qv = style_norms[best] + COSINE_EPS;
            let v = style_vecs[best];
            let out = &mut g.as_mut_slice()[p * c..(p + 1) * c];
            for k in 0..c {
                let mut d = -v[k] / (pu * qv);
                if u_norm > TINY_NORM {
                    d += best_cos * u[k] / (pu * u_norm);
                }
                out[k] += d / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Mean squared difference over all feature elements.
pub fn feature_mse(a: &FeatureMap, b: &FeatureMap) -> Result<f64> {
    if a.channels() != b.channels() || a.height() != b.height() || a.width() != b.width() {
        return Err(Error::DimMismatch(format!(
            "feature maps differ: {}x{}x{} vs {}x{}x{}",
            a.channels(),
            a.height(),
            a.width(),
            b.channels(),
            b.height(),
            b.width()
        )));
    }
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Content-block feature MSE between the render and its reference.
pub fn content_loss(render: &Image, content: &Image, fx: &FeatureExtractor) -> Result<f64> {
    let block = fx.content_block();
    let fr = fx.extract(render, &[block])?;
    let fc = fx.extract(content, &[block])?;
    feature_mse(&fr[&block], &fc[&block])
}

/// Total-variation smoothness: mean squared difference of horizontally and
/// vertically adjacent pixels over every neighbour pair and channel. Images
/// without any neighbour pair score 0.
pub fn tv_loss(x: &Image) -> f64 {
    tv_inner(x, false).0
}

pub fn tv_loss_grad(x: &Image) -> (f64, Image) {
    let (loss, grad) = tv_inner(x, true);
    (loss, grad.expect("gradient was requested"))
}

fn tv_inner(x: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (h, w) = (x.height(), x.width());
    let pairs = 3 * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    let mut grad = want_grad.then(|| Image::zeros(h, w));
    if pairs == 0 {
        return (0.0, grad);
    }
    let n = pairs as f64;
    let data = x.as_slice();
    let idx = |y: usize, xx: usize, c: usize| (y * w + xx) * 3 + c;
    let mut total = 0.0;
    for y in 0..h {
        for xx in 0..w {
            for c in 0..3 {
                if xx + 1 < w {
                    let d = data[idx(y, xx + 1, c)] - data[idx(y, xx, c)];
                    total += d * d;
                    if let Some(g) = grad.as_mut() {
                        let gs = g.as_mut_slice();
                        gs[idx(y, xx + 1, c)] += 2.0 * d / n;
                        gs[idx(y, xx, c)] -= 2.0 * d / n;
                    }
                }
                if y + 1 < h {
                    let d = data[idx(y + 1, xx, c)] - data[idx(y, xx, c)];
                    total += d * d;
                    if let Some(g) = grad.as_mut() {
                        let gs = g.as_mut_slice();
                        gs[idx(y + 1, xx, c)] += 2.0 * d / n;
                        gs[idx(y, xx, c)] -= 2.0 * d / n;
                    }
                }
            }
        }
    }
    (total / n, grad)
}

/// Mean squared difference between the depth maps of two images.
pub fn depth_loss(render: &Image, content: &Image, est: &DepthEstimator) -> Result<f64> {
    if render.height() != content.height() || render.width() != content.width() {
        return Err(Error::DimMismatch(format!(
            "depth comparison needs equal sizes, got {}x{} vs {}x{}",
            render.height(),
            render.width(),
            content.height(),
            content.width()
        )));
    }
    let dr = est.estimate(render)?;
    let dc = est.estimate(content)?;
    Ok(plane_mse(&dr, &dc))
}

fn plane_mse(a: &Plane, b: &Plane) -> f64 {
    let n = a.as_slice().len() as f64;
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// One style exemplar and how to apply it.
#[derive(Debug, Clone)]
pub struct StyleSpec {
    pub image: Image,
    /// NNFM weight per feature block, indexed `l1..l5`. Non-negative with
    /// at least one positive entry.
    pub block_weights: [f64; 5],
    /// Pre-resize factor applied to the exemplar before extracting each
    /// block's features; within [1/8, 8]. Larger factors make the style's
    /// strokes effectively finer on that block.
    pub block_scales: [f64; 5],
    /// Relative weight when several styles blend.
    pub blend_weight: f64,
    /// Match features of the luminance channel only (both sides are
    /// collapsed to a triplicated-luminance image first).
    pub luminance_only: bool,
}

impl StyleSpec {
    /// The single-style default: block `l3` with weight 1, no resize, full
    /// RGB matching.
    pub fn new(image: Image) -> Self {
        let mut block_weights = [0.0; 5];
        block_weights[BlockId::L3.index()] = 1.0;
        StyleSpec {
            image,
            block_weights,
            block_scales: [1.0; 5],
            blend_weight: 1.0,
            luminance_only: false,
        }
    }

    pub fn with_block_weight(mut self, block: BlockId, w: f64) -> Self {
        self.block_weights[block.index()] = w;
        self
    }

    /// Replaces all block weights at once.
    pub fn with_only_blocks(mut self, weights: &[(BlockId, f64)]) -> Self {
        self.block_weights = [0.0; 5];
        for &(block, w) in weights {
            self.block_weights[block.index()] = w;
        }
        self
    }

    pub fn with_block_scale(mut self, block: BlockId, t: f64) -> Self {
        self.block_scales[block.index()] = t;
        self
    }

    /// One scale for every block.
    pub fn with_uniform_scale(mut self, t: f64) -> Self {
        self.block_scales = [t; 5];
        self
    }

    pub fn with_blend_weight(mut self, lambda: f64) -> Self {
        self.blend_weight = lambda;
        self
    }

    pub fn with_luminance_only(mut self, on: bool) -> Self {
        self.luminance_only = on;
        self
    }

    /// Blocks with a positive weight, shallow to deep.
    pub fn active_blocks(&self) -> Vec<BlockId> {
        BlockId::ALL
            .into_iter()
            .filter(|b| self.block_weights[b.index()] > 0.0)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.has_non_finite() {
            return Err(Error::NonFinite("style image holds non-finite values".into()));
        }
        for (i, &w) in self.block_weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "block weight for {} must be finite and non-negative, got {w}",
                    BlockId::ALL[i]
                )));
            }
        }
        if self.active_blocks().is_empty() {
            return Err(Error::Config(
                "a style needs at least one positive block weight".into(),
            ));
        }
        let (lo, hi) = BLOCK_SCALE_RANGE;
        for block in self.active_blocks() {
            let t = self.block_scales[block.index()];
            if !t.is_finite() || !(lo..=hi).contains(&t) {
                return Err(Error::Config(format!(
                    "style scale for {block} must lie in [{lo}, {hi}], got {t}"
                )));
            }
        }
        if !self.blend_weight.is_finite() || self.blend_weight < 0.0 {
            return Err(Error::Config(format!(
                "blend weight must be finite and non-negative, got {}",
                self.blend_weight
            )));
        }
        Ok(())
    }
}

/// A style with its per-block exemplar features extracted once up front.
#[derive(Debug)]
pub struct PreparedStyle {
    blend_weight: f64,
    luminance_only: bool,
    /// `(block, weight, exemplar features)` for each active block.
    terms: Vec<(BlockId, f64, FeatureMap)>,
}

/// Resizes (and, for luminance styles, collapses) the exemplar per block
/// and extracts its features. Only active blocks touch the extractor.
pub fn prepare_style(spec: &StyleSpec, fx: &FeatureExtractor) -> Result<PreparedStyle> {
    spec.validate()?;
    let source = if spec.luminance_only {
        luminance_triplicate(&spec.image)
    } else {
        spec.image.clone()
    };
    let mut terms = Vec::new();
    for block in spec.active_blocks() {
        let scaled = source.resize_by_factor(spec.block_scales[block.index()]);
        let mut feats = fx.extract(&scaled, &[block])?;
        terms.push((
            block,
            spec.block_weights[block.index()],
            feats.remove(&block).expect("requested block is present"),
        ));
    }
    Ok(PreparedStyle {
        blend_weight: spec.blend_weight,
        luminance_only: spec.luminance_only,
        terms,
    })
}

impl PreparedStyle {
    pub fn blend_weight(&self) -> f64 {
        self.blend_weight
    }

    pub fn luminance_only(&self) -> bool {
        self.luminance_only
    }

    pub fn blocks(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.terms.iter().map(|t| t.0)
    }

    /// `sum_l w_l * nnfm_l` against already-extracted render features.
    fn loss_against(&self, feats: &BTreeMap<BlockId, FeatureMap>) -> Result<f64> {
        let mut total = 0.0;
        for (block, w, style_f) in &self.terms {
            total += w * nnfm_loss(&feats[block], style_f)?;
        }
        Ok(total)
    }

    /// As [`loss_against`](Self::loss_against), also adding
    /// `scale * w_l * grad_l` into the per-block upstream accumulator.
    fn loss_and_upstream(
        &self,
        feats: &BTreeMap<BlockId, FeatureMap>,
        scale: f64,
        upstream: &mut BTreeMap<BlockId, FeatureMap>,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (block, w, style_f) in &self.terms {
            let (loss, grad) = nnfm_loss_grad(&feats[block], style_f)?;
            total += w * loss;
            add_scaled_features(upstream, *block, &grad, scale * w);
        }
        Ok(total)
    }
}

fn add_scaled_features(
    acc: &mut BTreeMap<BlockId, FeatureMap>,
    block: BlockId,
    src: &FeatureMap,
    scale: f64,
) {
    let entry = acc
        .entry(block)
        .or_insert_with(|| FeatureMap::zeros(src.channels(), src.height(), src.width()));
    for (dst, s) in entry.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *dst += scale * s;
    }
}

fn add_scaled_image(acc: &mut Image, src: &Image, scale: f64) {
    for (dst, s) in acc.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *dst += scale * s;
    }
}

/// The weighted multi-block style loss for one exemplar, without its blend
/// weight: `sum_l w_l * nnfm(F_l(resize(style, T_l)), F_l(render))`.
pub fn scaled_style_loss(render: &Image, spec: &StyleSpec, fx: &FeatureExtractor) -> Result<f64> {
    let prepared = prepare_style(spec, fx)?;
    let source = if prepared.luminance_only {
        luminance_triplicate(render)
    } else {
        render.clone()
    };
    let blocks: Vec<BlockId> = prepared.blocks().collect();
    let feats = fx.extract(&source, &blocks)?;
    prepared.loss_against(&feats)
}

/// Blend of several styles: `sum_i lambda_i * scaled_style_loss_i`. Styles
/// with zero blend weight are validated but never extracted.
pub fn blended_style_loss(
    render: &Image,
    specs: &[StyleSpec],
    fx: &FeatureExtractor,
) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Config("at least one style is required".into()));
    }
    let mut total = 0.0;
    for spec in specs {
        spec.validate()?;
        if spec.blend_weight == 0.0 {
            continue;
        }
        total += spec.blend_weight * scaled_style_loss(render, spec, fx)?;
    }
    Ok(total)
}

/// Term weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub style: f64,
    pub content: f64,
    pub tv: f64,
    pub depth: f64,
}

impl LossWeights {
    /// Stylization defaults. The content weight is the capture-kind preset:
    /// 0.001 for a frontal arc, 0.005 for an orbit.
    pub fn baseline(kind: SceneKind) -> Self {
        LossWeights {
            style: 1.0,
            content: match kind {
                SceneKind::ForwardFacing => 0.001,
                SceneKind::Orbit => 0.005,
            },
            tv: 1e-3,
            depth: 0.0,
        }
    }

    /// Color-preserving variant: the content pull is softened to a tenth
    /// (0.0001 frontal / 0.0005 orbit) because luminance-only matching
    /// already leaves chroma to the content.
    pub fn color_preserving(kind: SceneKind) -> Self {
        let mut w = Self::baseline(kind);
        w.content /= 10.0;
        w
    }

    /// Switches the geometry-stabilising depth term on at its default
    /// weight 0.003.
    pub fn with_depth(mut self) -> Self {
        self.depth = 0.003;
        self
    }

    pub fn zero() -> Self {
        LossWeights {
            style: 0.0,
            content: 0.0,
            tv: 0.0,
            depth: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("style", self.style),
            ("content", self.content),
            ("tv", self.tv),
            ("depth", self.depth),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!(
                    "{name} weight must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Raw (unweighted) values of each objective term.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub style: f64,
    pub content: f64,
    pub tv: f64,
    pub depth: f64,
}

impl LossBreakdown {
    /// Recombines the terms under the given weights.
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.style * self.style + w.content * self.content + w.tv * self.tv + w.depth * self.depth
    }
}

/// A scalar objective over a rendered image with a pullback to its pixels.
pub trait ImageLoss {
    fn value(&self, x: &Image) -> Result<f64>;
    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)>;
}

/// The combined objective for one view: prepared styles, the content
/// reference's features, and (optionally) its depth map, evaluated against
/// any render of that view.
pub struct TotalLoss<'a> {
    fx: &'a FeatureExtractor,
    depth: Option<&'a DepthEstimator>,
    weights: LossWeights,
    styles: Vec<PreparedStyle>,
    height: usize,
    width: usize,
    content_features: FeatureMap,
    depth_reference: Option<Plane>,
    measure_all: bool,
}

impl<'a> TotalLoss<'a> {
    pub fn new(
        content: &Image,
        specs: &[StyleSpec],
        weights: LossWeights,
        fx: &'a FeatureExtractor,
        depth: Option<&'a DepthEstimator>,
    ) -> Result<Self> {
        weights.validate()?;
        if weights.style > 0.0 && specs.iter().all(|s| s.blend_weight == 0.0) {
            return Err(Error::Config(
                "the style weight is positive but no style carries blend weight".into(),
            ));
        }
        if weights.depth > 0.0 && depth.is_none() {
            return Err(Error::Config(
                "the depth weight is positive but no depth estimator was given".into(),
            ));
        }
        let mut styles = Vec::new();
        for spec in specs {
            spec.validate()?;
            if spec.blend_weight > 0.0 {
                styles.push(prepare_style(spec, fx)?);
            }
        }
        let block = fx.content_block();
        let content_features = fx
            .extract(content, &[block])?
            .remove(&block)
            .expect("requested block is present");
        let depth_reference = match depth {
            Some(est) => Some(est.estimate(content)?),
            None => None,
        };
        Ok(TotalLoss {
            fx,
            depth,
            weights,
            styles,
            height: content.height(),
            width: content.width(),
            content_features,
            depth_reference,
            measure_all: false,
        })
    }

    /// When set, zero-weighted terms are still measured for the breakdown
    /// (they never contribute gradient). Used by validation passes that
    /// track, say, the depth error of a run trained without the depth term.
    pub fn set_measure_all(&mut self, on: bool) {
        self.measure_all = on;
    }

    pub fn weights(&self) -> &LossWeights {
        &self.weights
    }

    /// Term values only.
    pub fn breakdown(&self, x: &Image) -> Result<LossBreakdown> {
        Ok(self.eval_inner(x, false)?.0)
    }

    /// Term values plus the gradient of the weighted total.
    pub fn breakdown_and_grad(&self, x: &Image) -> Result<(LossBreakdown, Image)> {
        let (bd, grad) = self.eval_inner(x, true)?;
        Ok((bd, grad.expect("gradient was requested")))
    }

    fn eval_inner(&self, x: &Image, want_grad: bool) -> Result<(LossBreakdown, Option<Image>)> {
        if x.height() != self.height || x.width() != self.width {
            return Err(Error::DimMismatch(format!(
                "render is {}x{} but this view's reference is {}x{}",
                x.height(),
                x.width(),
                self.height,
                self.width
            )));
        }
        let w = self.weights;
        let style_on = (w.style > 0.0 || self.measure_all) && !self.styles.is_empty();
        let content_on = w.content > 0.0 || self.measure_all;
        let style_grad = want_grad && w.style > 0.0;
        let content_grad = want_grad && w.content > 0.0;

        let mut bd = LossBreakdown::default();
        let mut grad = want_grad.then(|| Image::zeros(self.height, self.width));

        // Which render blocks each image path needs.
        let mut rgb_blocks: BTreeSet<BlockId> = BTreeSet::new();
        let mut lum_blocks: BTreeSet<BlockId> = BTreeSet::new();
        if style_on {
            for style in &self.styles {
                if style.luminance_only {
                    lum_blocks.extend(style.blocks());
                } else {
                    rgb_blocks.extend(style.blocks());
                }
            }
        }
        if content_on {
            rgb_blocks.insert(self.fx.content_block());
        }

        // RGB path: style terms on the plain render plus the content term.
        if !rgb_blocks.is_empty() {
            let blocks: Vec<BlockId> = rgb_blocks.iter().copied().collect();
            let has_rgb_style = style_on && self.styles.iter().any(|s| !s.luminance_only);
            let need_grad = (style_grad && has_rgb_style) || content_grad;
            let mut traced: Option<Trace> = None;
            let mut plain: Option<BTreeMap<BlockId, FeatureMap>> = None;
            if need_grad {
                traced = Some(self.fx.extract_traced(x, &blocks)?);
            } else {
                plain = Some(self.fx.extract(x, &blocks)?);
            }
            let feats: &BTreeMap<BlockId, FeatureMap> = match (&traced, &plain) {
                (Some(t), _) => t.captures(),
                (None, Some(p)) => p,
                (None, None) => unreachable!("one extraction path always runs"),
            };

            let mut upstream: BTreeMap<BlockId, FeatureMap> = BTreeMap::new();
            if style_on {
                for style in self.styles.iter().filter(|s| !s.luminance_only) {
                    bd.style += style.blend_weight
                        * if style_grad {
                            style.loss_and_upstream(
                                feats,
                                w.style * style.blend_weight,
                                &mut upstream,
                            )?
                        } else {
                            style.loss_against(feats)?
                        };
                }
            }
            if content_on {
                let block = self.fx.content_block();
                let fr = &feats[&block];
                bd.content = feature_mse(fr, &self.content_features)?;
                if content_grad {
                    let scale = 2.0 * w.content / fr.as_slice().len() as f64;
                    let mut g = FeatureMap::zeros(fr.channels(), fr.height(), fr.width());
                    for ((dst, a), b) in g
                        .as_mut_slice()
                        .iter_mut()
                        .zip(fr.as_slice())
                        .zip(self.content_features.as_slice())
                    {
                        *dst = scale * (a - b);
                    }
                    add_scaled_features(&mut upstream, block, &g, 1.0);
                }
            }
            if let (Some(t), false) = (&traced, upstream.is_empty()) {
                let g = t.grad_input(&upstream)?;
                add_scaled_image(grad.as_mut().expect("grad requested"), &g, 1.0);
            }
        }

        // Luminance path: styles matched on the triplicated-luminance image.
        if !lum_blocks.is_empty() {
            let blocks: Vec<BlockId> = lum_blocks.iter().copied().collect();
            let lum = luminance_triplicate(x);
            let mut traced: Option<Trace> = None;
            let mut plain: Option<BTreeMap<BlockId, FeatureMap>> = None;
            if style_grad {
                traced = Some(self.fx.extract_traced(&lum, &blocks)?);
            } else {
                plain = Some(self.fx.extract(&lum, &blocks)?);
            }
            let feats: &BTreeMap<BlockId, FeatureMap> = match (&traced, &plain) {
                (Some(t), _) => t.captures(),
                (None, Some(p)) => p,
                (None, None) => unreachable!("one extraction path always runs"),
            };

            let mut upstream: BTreeMap<BlockId, FeatureMap> = BTreeMap::new();
            for style in self.styles.iter().filter(|s| s.luminance_only) {
                bd.style += style.blend_weight
                    * if style_grad {
                        style.loss_and_upstream(feats, w.style * style.blend_weight, &mut upstream)?
                    } else {
                        style.loss_against(feats)?
                    };
            }
            if let (Some(t), false) = (&traced, upstream.is_empty()) {
                let g_lum = t.grad_input(&upstream)?;
                let g = luminance_triplicate_vjp(&g_lum);
                add_scaled_image(grad.as_mut().expect("grad requested"), &g, 1.0);
            }
        }

        // Smoothness term.
        if want_grad && w.tv > 0.0 {
            let (loss, g) = tv_loss_grad(x);
            bd.tv = loss;
            add_scaled_image(grad.as_mut().expect("grad requested"), &g, w.tv);
        } else {
            bd.tv = tv_loss(x);
        }

        // Geometry-stabilising depth term.
        if let (Some(est), Some(dref)) = (self.depth, &self.depth_reference) {
            if w.depth > 0.0 || self.measure_all {
                let d = est.estimate(x)?;
                bd.depth = plane_mse(&d, dref);
                if want_grad && w.depth > 0.0 {
                    let count = d.as_slice().len() as f64;
                    let upstream = Plane::from_fn(d.height(), d.width(), |y, xx| {
                        2.0 * w.depth * (d.get(y, xx) - dref.get(y, xx)) / count
                    });
                    let g = est.estimate_vjp(x, &upstream)?;
                    add_scaled_image(grad.as_mut().expect("grad requested"), &g, 1.0);
                }
            }
        }

        Ok((bd, grad))
    }
}

impl ImageLoss for TotalLoss<'_> {
    fn value(&self, x: &Image) -> Result<f64> {
        Ok(self.breakdown(x)?.weighted_total(&self.weights))
    }

    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)> {
        let (bd, grad) = self.breakdown_and_grad(x)?;
        Ok((bd.weighted_total(&self.weights), grad))
    }
}

/// The combined objective as a one-shot call: scalar plus per-term values.
pub fn total_loss(
    render: &Image,
    content: &Image,
    specs: &[StyleSpec],
    weights: LossWeights,
    fx: &FeatureExtractor,
    depth: Option<&DepthEstimator>,
) -> Result<(f64, LossBreakdown)> {
    let tl = TotalLoss::new(content, specs, weights, fx, depth)?;
    let bd = tl.breakdown(render)?;
    Ok((bd.weighted_total(&weights), bd))
}

/// One-shot combined objective with its pixel gradient.
pub fn total_loss_grad(
    render: &Image,
    content: &Image,
    specs: &[StyleSpec],
    weights: LossWeights,
    fx: &FeatureExtractor,
    depth: Option<&DepthEstimator>,
) -> Result<(f64, LossBreakdown, Image)> {
    let tl = TotalLoss::new(content, specs, weights, fx, depth)?;
    let (bd, grad) = tl.breakdown_and_grad(render)?;
    Ok((bd.weighted_total(&weights), bd, grad))
}
