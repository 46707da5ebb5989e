//! Deferred back-propagation and gradient routing.
//!
//! Optimising a field through full-frame rendering would differentiate the
//! whole image pipeline at once. Instead the work splits in two:
//!
//! 1. evaluate the image-space objective on a finished render and keep its
//!    pixel gradient as a *cached-gradients map*, with the field untouched;
//! 2. re-render the view patch by patch, seeding each patch's output with
//!    its slice of the cached map, and accumulate parameter gradients.
//!
//! Because rendering is linear in the seeded cotangent, the patchwise sum
//! equals the direct end-to-end gradient of `<g, render(field)>` while peak
//! memory stays bounded by one patch.
//!
//! The cached map is also where *spatial* control lives: binary region
//! masks gate the map elementwise (`grad := mask o grad`), and per-region
//! maps for disjoint masks recombine by
//!
//! ```text
//! grad = sum_r mask_r o grad_r
//! ```
//!
//! so each image region can push its own style into the field. Masks must
//! be pairwise disjoint — overlap would silently double-count gradients —
//! and gating/combination are exact: untouched entries survive bit-for-bit
//! and masked-out entries are exactly zero.

use crate::error::{Error, Result};
use crate::field::{Camera, FieldGrads, PatchRect, RenderSettings, VoxelField};
use crate::image::{Image, Plane};
use crate::losses::{ImageLoss, LossBreakdown, LossWeights, StyleSpec, TotalLoss};
use crate::features::FeatureExtractor;

/// Default patch edge for the re-rendering pass.
pub const DEFAULT_PATCH: usize = 64;

/// The pixel gradient of one view's objective, held between the two phases
/// of deferred back-propagation.
#[derive(Debug, Clone)]
pub struct CachedGradMap {
    view: String,
    grad: Image,
}

impl CachedGradMap {
    /// Wraps a finite gradient buffer; the view id travels with the map so
    /// later failures can name their origin.
    pub fn new(view: impl Into<String>, grad: Image) -> Result<Self> {
        let view = view.into();
        if grad.has_non_finite() {
            return Err(Error::NonFinite(format!(
                "cached gradients for view '{view}' hold non-finite values"
            )));
        }
        Ok(CachedGradMap { view, grad })
    }

    pub fn view(&self) -> &str {
        &self.view
    }

    pub fn grad(&self) -> &Image {
        &self.grad
    }

    pub fn height(&self) -> usize {
        self.grad.height()
    }

    pub fn width(&self) -> usize {
        self.grad.width()
    }
}

/// A named binary region mask over one view.
#[derive(Debug, Clone)]
pub struct RegionMask {
    region: String,
    mask: Plane,
}

impl RegionMask {
    /// Validates that every entry is exactly 0 or 1.
    pub fn new(region: impl Into<String>, mask: Plane) -> Result<Self> {
        let region = region.into();
        if mask.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Validation(format!(
                "mask '{region}' holds values other than 0 and 1"
            )));
        }
        Ok(RegionMask { region, mask })
    }

    /// An all-ones mask.
    pub fn full(region: impl Into<String>, height: usize, width: usize) -> Self {
        RegionMask {
            region: region.into(),
            mask: Plane::from_fn(height, width, |_, _| 1.0),
        }
    }

    pub fn region(&self) -> &str {
        &self.region
    }

    pub fn plane(&self) -> &Plane {
        &self.mask
    }

    pub fn height(&self) -> usize {
        self.mask.height()
    }

    pub fn width(&self) -> usize {
        self.mask.width()
    }

    /// Fraction of pixels inside the region.
    pub fn coverage(&self) -> f64 {
        let n = self.mask.as_slice().len();
        if n == 0 {
            return 0.0;
        }
        self.mask.as_slice().iter().sum::<f64>() / n as f64
    }

    pub fn is_empty(&self) -> bool {
        self.mask.as_slice().iter().all(|&v| v == 0.0)
    }

    /// The complementary region (`1 - mask`).
    pub fn complement(&self) -> RegionMask {
        RegionMask {
            region: format!("not-{}", self.region),
            mask: self.mask.map(|v| 1.0 - v),
        }
    }

    /// `mask o image`: kept pixels are copied bit-for-bit, masked-out
    /// pixels become exact black.
    pub fn gate_image(&self, x: &Image) -> Result<Image> {
        if x.height() != self.height() || x.width() != self.width() {
            return Err(Error::DimMismatch(format!(
                "mask '{}' is {}x{} but the image is {}x{}",
                self.region,
                self.height(),
                self.width(),
                x.height(),
                x.width()
            )));
        }
        Ok(Image::from_fn(x.height(), x.width(), |y, xx| {
            if self.mask.get(y, xx) == 1.0 {
                x.get(y, xx)
            } else {
                [0.0, 0.0, 0.0]
            }
        }))
    }
}

/// Evaluates the objective on a render and returns its value with the
/// cached pixel-gradient map. The field never participates here.
pub fn compute_cached_grads(
    view: &str,
    render: &Image,
    loss: &dyn ImageLoss,
) -> Result<(f64, CachedGradMap)> {
    let (value, grad) = loss.value_and_grad(render)?;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective for view '{view}' is non-finite"
        )));
    }
    Ok((value, CachedGradMap::new(view, grad)?))
}

/// Gates a cached map with a binary mask: entries outside the region become
/// exactly 0, entries inside are unchanged bit-for-bit.
pub fn apply_mask(g: &CachedGradMap, m: &RegionMask) -> Result<CachedGradMap> {
    if g.height() != m.height() || g.width() != m.width() {
        return Err(Error::DimMismatch(format!(
            "mask '{}' is {}x{} but the cached map for view '{}' is {}x{}",
            m.region(),
            m.height(),
            m.width(),
            g.view(),
            g.height(),
            g.width()
        )));
    }
    Ok(CachedGradMap {
        view: g.view.clone(),
        grad: m.gate_image(&g.grad)?,
    })
}

/// Combines per-region cached maps over pairwise-disjoint masks:
/// `sum_r mask_r o grad_r`. Disjointness makes the sum an assignment, so
/// the result is bit-exact and independent of the pair order.
pub fn combine_region_grads(pairs: &[(RegionMask, CachedGradMap)]) -> Result<CachedGradMap> {
    let (first_mask, first_map) = pairs
        .first()
        .ok_or_else(|| Error::Config("at least one region is required".into()))?;
    let (h, w) = (first_map.height(), first_map.width());
    let view = first_map.view.clone();
    for (m, g) in pairs {
        if g.view != view {
            return Err(Error::Validation(format!(
                "cached maps mix views '{view}' and '{}'",
                g.view
            )));
        }
        if m.height() != h || m.width() != w || g.height() != h || g.width() != w {
            return Err(Error::DimMismatch(format!(
                "region '{}' does not match the {h}x{w} view",
                m.region()
            )));
        }
    }
    let _ = first_mask;
    // Disjointness: no pixel may belong to two masks.
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    let mut overlap = 0usize;
    for (i, (m, _)) in pairs.iter().enumerate() {
        for (p, &v) in m.plane().as_slice().iter().enumerate() {
            if v == 1.0 {
                match owner[p] {
                    None => owner[p] = Some(i),
                    Some(_) => overlap += 1,
                }
            }
        }
    }
    if overlap > 0 {
        return Err(Error::Validation(format!(
            "region masks overlap on {overlap} pixels"
        )));
    }
    let mut out = Image::zeros(h, w);
    for (p, own) in owner.iter().enumerate() {
        if let Some(i) = own {
            let g = pairs[*i].1.grad.as_slice();
            out.as_mut_slice()[p * 3..p * 3 + 3].copy_from_slice(&g[p * 3..p * 3 + 3]);
        }
    }
    Ok(CachedGradMap { view, grad: out })
}

/// The objective of one region: the combined loss evaluated on the masked
/// render against the masked content reference, under the region's style.
/// Its pixel gradient is supported only inside the mask.
pub struct RegionLoss<'a> {
    mask: RegionMask,
    inner: Option<TotalLoss<'a>>,
}

impl<'a> RegionLoss<'a> {
    /// An all-zeros mask yields a constant-zero objective (with a warning):
    /// there is nothing to style.
    pub fn new(
        content: &Image,
        mask: RegionMask,
        spec: &StyleSpec,
        weights: LossWeights,
        fx: &'a FeatureExtractor,
    ) -> Result<Self> {
        if mask.is_empty() {
            log::warn!(
                "region '{}' has an empty mask; its loss is constant zero",
                mask.region()
            );
            return Ok(RegionLoss { mask, inner: None });
        }
        let masked_content = mask.gate_image(content)?;
        let inner = TotalLoss::new(&masked_content, std::slice::from_ref(spec), weights, fx, None)?;
        Ok(RegionLoss {
            mask,
            inner: Some(inner),
        })
    }

    pub fn mask(&self) -> &RegionMask {
        &self.mask
    }

    /// See [`TotalLoss::set_measure_all`].
    pub fn set_measure_all(&mut self, on: bool) {
        if let Some(inner) = &mut self.inner {
            inner.set_measure_all(on);
        }
    }

    /// The region's raw style term (for per-region progress tracking).
    pub fn style_term(&self, x: &Image) -> Result<f64> {
        Ok(self.breakdown(x)?.style)
    }

    /// Per-term values of the region's objective.
    pub fn breakdown(&self, x: &Image) -> Result<LossBreakdown> {
        match &self.inner {
            Some(inner) => inner.breakdown(&self.mask.gate_image(x)?),
            None => Ok(LossBreakdown::default()),
        }
    }

    /// Per-term values plus the gradient, which is supported only inside
    /// the mask.
    pub fn breakdown_and_grad(&self, x: &Image) -> Result<(LossBreakdown, Image)> {
        match &self.inner {
            Some(inner) => {
                let (bd, grad) = inner.breakdown_and_grad(&self.mask.gate_image(x)?)?;
                Ok((bd, self.mask.gate_image(&grad)?))
            }
            None => Ok((
                LossBreakdown::default(),
                Image::zeros(x.height(), x.width()),
            )),
        }
    }
}

impl ImageLoss for RegionLoss<'_> {
    fn value(&self, x: &Image) -> Result<f64> {
        match &self.inner {
            Some(inner) => inner.value(&self.mask.gate_image(x)?),
            None => Ok(0.0),
        }
    }

    fn value_and_grad(&self, x: &Image) -> Result<(f64, Image)> {
        match &self.inner {
            Some(inner) => {
                let (value, grad) = inner.value_and_grad(&self.mask.gate_image(x)?)?;
                // Chain through the gating: d(mask o x)/dx zeroes the
                // outside, so the outside gradient is exactly zero.
                Ok((value, self.mask.gate_image(&grad)?))
            }
            None => Ok((0.0, Image::zeros(x.height(), x.width()))),
        }
    }
}

/// One region's objective as a plain scalar.
pub fn region_loss(
    render: &Image,
    content: &Image,
    mask: &RegionMask,
    spec: &StyleSpec,
    weights: LossWeights,
    fx: &FeatureExtractor,
) -> Result<f64> {
    RegionLoss::new(content, mask.clone(), spec, weights, fx)?.value(render)
}

/// Phase two of deferred back-propagation: re-renders the view in patches,
/// seeding each patch with its slice of the cached map, and accumulates the
/// field-parameter gradient of `<g, render(field)>`. Patches walk the image
/// in a fixed row-major order, so the result is deterministic.
pub fn deferred_backprop(
    field: &VoxelField,
    cam: &Camera,
    settings: &RenderSettings,
    g: &CachedGradMap,
    patch: usize,
) -> Result<FieldGrads> {
    if g.height() != cam.height() || g.width() != cam.width() {
        return Err(Error::DimMismatch(format!(
            "cached map for view '{}' is {}x{} but the camera renders {}x{}",
            g.view(),
            g.height(),
            g.width(),
            cam.height(),
            cam.width()
        )));
    }
    if patch == 0 {
        return Err(Error::Validation(
            "patch size must be at least 1 pixel".into(),
        ));
    }
    let mut grads = FieldGrads::zeros(field);
    for rect in PatchRect::tile(cam.height(), cam.width(), patch) {
        let upstream = slice_patch(g.grad(), &rect);
        field.render_patch_vjp(cam, settings, &rect, &upstream, &mut grads);
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite(format!(
            "field gradients for view '{}' are non-finite",
            g.view()
        )));
    }
    Ok(grads)
}

fn slice_patch(img: &Image, rect: &PatchRect) -> Image {
    Image::from_fn(rect.height, rect.width, |y, x| {
        img.get(rect.y0 + y, rect.x0 + x)
    })
}
