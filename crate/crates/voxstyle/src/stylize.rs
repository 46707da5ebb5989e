//! The stylization loop: gradient optimization of a fitted field's colors
//! under a chosen combination of perceptual controls.
//!
//! Each *epoch* visits every training view once in a seeded shuffled order
//! and takes one gradient step per view:
//!
//! 1. render the view from the current field;
//! 2. evaluate the combined objective (style, content, smoothness, and
//!    optionally depth) against references rendered from the *input*
//!    field, keeping the pixel gradient as a cached map;
//! 3. when spatial control is active, evaluate one objective per bound
//!    region instead and recombine the per-region maps over their
//!    disjoint masks;
//! 4. push the map through patchwise deferred back-propagation and step
//!    the color parameters with the scheduled learning rate.
//!
//! The learning rate decays exponentially from `lr_start` to `lr_end`
//! over the whole run (per step, not per epoch):
//!
//! ```text
//! lr(k) = lr_start * (lr_end / lr_start)^(k / total_steps)
//! ```
//!
//! The density grid never changes: stylization edits appearance, not
//! geometry. With plain gradient descent (the default), parameters that
//! receive a zero gradient at every step survive bit-for-bit — the basis
//! of the spatial-control guarantee that voxels outside the masked
//! region's rays are untouched.
//!
//! Controls compose through the configuration: color preservation forces
//! luminance-only style matching and a softer content pull; pattern scale
//! lives on each style's scale factors; spatial control binds region
//! masks to styles; depth control adds the depth-consistency term. The
//! optional end-of-run recolor maps the stylized palette onto the style
//! image's color statistics, and is forced off whenever color
//! preservation, spatial control, or style blending is active — those
//! modes define their own color handling.

use crate::color::{histogram_match, MatchMode};
use crate::depthnet::DepthEstimator;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::field::{SceneKind, VoxelField, ViewSet};
use crate::gradrouter::{
    combine_region_grads, deferred_backprop, CachedGradMap, RegionLoss, RegionMask, DEFAULT_PATCH,
};
use crate::image::Image;
use crate::losses::{LossBreakdown, LossWeights, StyleSpec, TotalLoss};
use crate::optim::{gd_step, Adam};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which perceptual controls a run activates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControlFlags {
    /// Match style on luminance only, keeping the scene's own colors.
    pub color_preserve: bool,
    /// Pattern-scale control (carried by each style's scale factors).
    pub scale: bool,
    /// Per-region styles routed through binary masks.
    pub spatial: bool,
    /// Depth-consistency term against the input field's perceived depth.
    pub depth: bool,
}

impl ControlFlags {
    pub fn any(&self) -> bool {
        self.color_preserve || self.scale || self.spatial || self.depth
    }
}

/// Binds one named mask set to the style it should receive.
#[derive(Debug, Clone)]
pub struct RegionBinding {
    pub region: String,
    pub spec: StyleSpec,
}

/// Parameter-update rule for the stylization steps.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Optimizer {
    /// Plain gradient descent. Keeps zero-gradient parameters bit-exact,
    /// which the spatial-control guarantees rely on.
    #[default]
    GradientDescent,
    /// Adaptive-moment estimation (the reconstruction optimizer).
    AdaptiveMoment,
}

/// Full description of one stylization run.
#[derive(Debug, Clone)]
pub struct StylizeConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub controls: ControlFlags,
    /// Global styles (ignored under spatial control, which takes its
    /// styles from the region bindings).
    pub specs: Vec<StyleSpec>,
    pub regions: Vec<RegionBinding>,
    pub recolor_enabled: bool,
    pub optimizer: Optimizer,
    /// Patch edge for deferred back-propagation.
    pub patch: usize,
    pub seed: u64,
}

impl StylizeConfig {
    /// The uncontrolled baseline: one full-color style, capture-kind
    /// weight preset, ten epochs at the standard schedule.
    pub fn baseline(kind: SceneKind, spec: StyleSpec) -> Self {
        StylizeConfig {
            epochs: 10,
            lr_start: 1e-1,
            lr_end: 1e-2,
            weights: LossWeights::baseline(kind),
            controls: ControlFlags::default(),
            specs: vec![spec],
            regions: Vec::new(),
            recolor_enabled: false,
            optimizer: Optimizer::default(),
            patch: DEFAULT_PATCH,
            seed: 0,
        }
    }

    /// Color preservation: luminance-only matching with the softened
    /// content weight.
    pub fn color_preserving(kind: SceneKind, spec: StyleSpec) -> Self {
        let mut cfg = Self::baseline(kind, spec);
        cfg.controls.color_preserve = true;
        cfg.weights = LossWeights::color_preserving(kind);
        cfg
    }

    /// Spatial control: styles arrive through region bindings.
    pub fn spatial(kind: SceneKind, bindings: Vec<RegionBinding>) -> Self {
        let mut cfg = StylizeConfig {
            specs: Vec::new(),
            regions: bindings,
            ..Self::baseline(kind, StyleSpec::new(Image::zeros(1, 1)))
        };
        cfg.controls.spatial = true;
        cfg
    }

    /// Style blending: several styles with their blend weights.
    pub fn multi_style(kind: SceneKind, specs: Vec<StyleSpec>) -> Self {
        let mut cfg = Self::baseline(kind, StyleSpec::new(Image::zeros(1, 1)));
        cfg.specs = specs;
        cfg
    }

    /// Adds the depth-consistency term at its preset weight.
    pub fn with_depth_control(mut self) -> Self {
        self.controls.depth = true;
        if self.weights.depth == 0.0 {
            self.weights = self.weights.with_depth();
        }
        self
    }

    pub fn with_recolor(mut self) -> Self {
        self.recolor_enabled = true;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.optimizer = optimizer;
        self
    }

    /// More than one style participates (blending, or several regions).
    pub fn is_multi_style(&self) -> bool {
        if self.controls.spatial {
            self.regions.len() > 1
        } else {
            self.specs.iter().filter(|s| s.blend_weight > 0.0).count() > 1
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("a run needs at least one epoch".into()));
        }
        if !(self.lr_start.is_finite() && self.lr_end.is_finite())
            || !(self.lr_start > self.lr_end && self.lr_end > 0.0)
        {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start > lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.patch == 0 {
            return Err(Error::Config("patch size must be at least 1".into()));
        }
        self.weights.validate()?;
        if self.controls.spatial {
            if self.regions.is_empty() {
                return Err(Error::Config(
                    "spatial control requires at least one region binding".into(),
                ));
            }
            if !self.specs.is_empty() {
                return Err(Error::Config(
                    "spatial control takes its styles from region bindings; \
                     the global style list must be empty"
                        .into(),
                ));
            }
            if self.weights.depth > 0.0 {
                return Err(Error::Config(
                    "the depth term is not available under spatial control".into(),
                ));
            }
            for (i, b) in self.regions.iter().enumerate() {
                if self.regions[..i].iter().any(|o| o.region == b.region) {
                    return Err(Error::Config(format!(
                        "region '{}' is bound twice",
                        b.region
                    )));
                }
                b.spec.validate()?;
            }
        } else {
            if !self.regions.is_empty() {
                return Err(Error::Config(
                    "region bindings require the spatial control".into(),
                ));
            }
            if self.weights.style > 0.0 && self.specs.is_empty() {
                return Err(Error::Config(
                    "the style weight is positive but no style was given".into(),
                ));
            }
            for spec in &self.specs {
                spec.validate()?;
            }
        }
        Ok(())
    }

    /// Validates and normalizes the configuration: color preservation
    /// forces luminance-only matching on every style, and recoloring is
    /// forced off (with a logged notice) whenever color preservation,
    /// spatial control, or style blending is active.
    pub fn effective(&self) -> Result<StylizeConfig> {
        self.validate()?;
        let mut cfg = self.clone();
        if cfg.controls.color_preserve {
            for spec in &mut cfg.specs {
                spec.luminance_only = true;
            }
            for binding in &mut cfg.regions {
                binding.spec.luminance_only = true;
            }
        }
        if cfg.controls.depth && cfg.weights.depth == 0.0 {
            cfg.weights = cfg.weights.with_depth();
        }
        if cfg.recolor_enabled {
            let reason = if cfg.controls.color_preserve {
                Some("color preservation keeps the scene's own palette")
            } else if cfg.controls.spatial {
                Some("spatial control styles regions independently")
            } else if cfg.is_multi_style() {
                Some("style blending has no single palette source")
            } else {
                None
            };
            if let Some(reason) = reason {
                log::warn!("recoloring disabled: {reason}");
                cfg.recolor_enabled = false;
            }
        }
        Ok(cfg)
    }
}

/// The scheduled learning rate before step `step` of `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &StylizeConfig) -> f64 {
    assert!(total_steps >= 1, "a schedule needs at least one step");
    assert!(step <= total_steps, "step {step} past the schedule end");
    let t = step as f64 / total_steps as f64;
    cfg.lr_start * (cfg.lr_end / cfg.lr_start).powf(t)
}

/// One optimization step's record: the per-term losses measured before
/// the step, and the rate applied.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub view: usize,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub total: f64,
}

/// One epoch's validation record (images are handed to the observer, not
/// stored here).
#[derive(Debug, Clone, serde::Serialize)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean: LossBreakdown,
    pub per_view: Vec<(usize, LossBreakdown)>,
}

/// Everything a finished run reports besides the field itself.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Steps taken (`epochs * views`).
    pub step: usize,
    /// The schedule position after the last step (`lr_end` at completion).
    pub lr: f64,
    /// One record per step, in execution order.
    pub history: Vec<StepRecord>,
    /// One record per epoch.
    pub validations: Vec<ValidationRecord>,
    /// The view-order generator's state at the end of the run.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    /// Mean raw style term over the steps of one epoch (1-based).
    pub fn mean_style_in_epoch(&self, epoch: usize) -> Option<f64> {
        let steps: Vec<f64> = self
            .history
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.losses.style)
            .collect();
        if steps.is_empty() {
            None
        } else {
            Some(steps.iter().sum::<f64>() / steps.len() as f64)
        }
    }
}

/// A validation pass: per-term losses and renders over the fixed subset.
#[derive(Debug, Clone)]
pub struct EpochValidation {
    pub mean: LossBreakdown,
    pub per_view: Vec<(usize, LossBreakdown)>,
    pub renders: Vec<(usize, Image)>,
}

/// The fixed validation subset for `n` views: first, middle, last.
pub fn validation_subset(n: usize) -> Vec<usize> {
    let mut subset = vec![0, n / 2, n.saturating_sub(1)];
    subset.dedup();
    subset
}

/// Called after each epoch with the epoch number (1-based) and the
/// validation pass; an error aborts the run.
pub type EpochObserver<'a> = dyn FnMut(usize, &EpochValidation) -> Result<()> + 'a;

/// Renders the fixed validation subset of `views` from `current` and
/// measures every objective term (including zero-weighted ones) against
/// references rendered from `reference`. On the unmodified input field
/// the content term is exactly zero: the render *is* the reference.
pub fn validate_epoch(
    current: &VoxelField,
    reference: &VoxelField,
    views: &ViewSet,
    cfg: &StylizeConfig,
    fx: &FeatureExtractor,
    depth: Option<&DepthEstimator>,
) -> Result<EpochValidation> {
    views.validate()?;
    if views.is_empty() {
        return Err(Error::Validation("the view set is empty".into()));
    }
    let cfg = cfg.effective()?;
    let mut per_view = Vec::new();
    let mut renders = Vec::new();
    let mut mean = LossBreakdown::default();
    let subset = validation_subset(views.len());
    for &v in &subset {
        let cam = &views.cameras[v];
        let content = reference.render_view(cam, &views.settings);
        let render = current.render_view(cam, &views.settings);
        let bd = if cfg.controls.spatial {
            let mut sum = LossBreakdown::default();
            for binding in &cfg.regions {
                let mask = region_mask_for_view(views, binding, v)?;
                let mut rl = RegionLoss::new(&content, mask, &binding.spec, cfg.weights, fx)?;
                rl.set_measure_all(true);
                add_breakdown(&mut sum, &rl.breakdown(&render)?);
            }
            sum
        } else {
            let mut loss = TotalLoss::new(&content, &cfg.specs, cfg.weights, fx, depth)?;
            loss.set_measure_all(true);
            loss.breakdown(&render)?
        };
        add_breakdown(&mut mean, &bd);
        per_view.push((v, bd));
        renders.push((v, render));
    }
    let n = subset.len() as f64;
    mean.style /= n;
    mean.content /= n;
    mean.tv /= n;
    mean.depth /= n;
    Ok(EpochValidation {
        mean,
        per_view,
        renders,
    })
}

/// Runs the full stylization loop and returns the stylized field with the
/// complete training state. The input field's density grid is carried
/// over frozen and bit-identical; the same seed and configuration always
/// reproduce the same field bit-for-bit.
pub fn run_stylization(
    field: &VoxelField,
    views: &ViewSet,
    cfg: &StylizeConfig,
    fx: &FeatureExtractor,
    depth: Option<&DepthEstimator>,
    mut observer: Option<&mut EpochObserver>,
) -> Result<(VoxelField, TrainState)> {
    views.validate()?;
    if views.is_empty() {
        return Err(Error::Validation("the view set is empty".into()));
    }
    let cfg = cfg.effective()?;
    if cfg.controls.spatial {
        for binding in &cfg.regions {
            if !views.masks.contains_key(&binding.region) {
                return Err(Error::Validation(format!(
                    "region '{}' is bound to a style but the view set has no such mask set",
                    binding.region
                )));
            }
        }
    }

    let mut work = field.clone();
    work.set_density_frozen(true);

    // Per-view content references come from the *input* field, so they are
    // the photo-realistic appearance the content and depth terms pull back
    // toward.
    let content_refs: Vec<Image> = views
        .cameras
        .iter()
        .map(|cam| field.render_view(cam, &views.settings))
        .collect();

    // Per-view objectives, built once and reused across epochs.
    let mut view_losses: Vec<TotalLoss> = Vec::new();
    let mut region_losses: Vec<Vec<(RegionMask, RegionLoss)>> = Vec::new();
    for (v, content) in content_refs.iter().enumerate() {
        if cfg.controls.spatial {
            let mut per_region = Vec::new();
            for binding in &cfg.regions {
                let mask = region_mask_for_view(views, binding, v)?;
                per_region.push((
                    mask.clone(),
                    RegionLoss::new(content, mask, &binding.spec, cfg.weights, fx)?,
                ));
            }
            region_losses.push(per_region);
        } else {
            view_losses.push(TotalLoss::new(content, &cfg.specs, cfg.weights, fx, depth)?);
        }
    }

    let n_views = views.len();
    let total_steps = cfg.epochs * n_views;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n_views).collect();
    let mut adam = match cfg.optimizer {
        Optimizer::AdaptiveMoment => Some(Adam::new(work.color_param_grid().len())),
        Optimizer::GradientDescent => None,
    };

    let mut state = TrainState {
        epoch: 0,
        step: 0,
        lr: lr_at(0, total_steps, &cfg),
        history: Vec::with_capacity(total_steps),
        validations: Vec::with_capacity(cfg.epochs),
        rng: rng.clone(),
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for &v in &order {
            let cam = &views.cameras[v];
            let render = work.render_view(cam, &views.settings);
            let view_name = format!("view-{v:03}");

            let (bd, grad_map) = if cfg.controls.spatial {
                let mut sum = LossBreakdown::default();
                let mut pairs: Vec<(RegionMask, CachedGradMap)> = Vec::new();
                for (mask, rl) in &region_losses[v] {
                    let (bd, grad) = rl.breakdown_and_grad(&render)?;
                    check_finite_terms(&bd, epoch, &view_name, Some(mask.region()))?;
                    add_breakdown(&mut sum, &bd);
                    pairs.push((mask.clone(), CachedGradMap::new(view_name.clone(), grad)?));
                }
                (sum, combine_region_grads(&pairs)?)
            } else {
                let (bd, grad) = view_losses[v].breakdown_and_grad(&render)?;
                check_finite_terms(&bd, epoch, &view_name, None)?;
                (bd, CachedGradMap::new(view_name, grad)?)
            };

            let grads = deferred_backprop(&work, cam, &views.settings, &grad_map, cfg.patch)?;
            let lr = lr_at(state.step, total_steps, &cfg);
            match &mut adam {
                Some(adam) => adam.step(work.color_param_grid_mut(), &grads.color_params, lr),
                None => gd_step(work.color_param_grid_mut(), &grads.color_params, lr),
            }
            state.history.push(StepRecord {
                epoch,
                view: v,
                lr,
                total: bd.weighted_total(&cfg.weights),
                losses: bd,
            });
            state.step += 1;
        }
        state.epoch = epoch;
        state.lr = lr_at(state.step, total_steps, &cfg);

        let validation = validate_epoch(&work, field, views, &cfg, fx, depth)?;
        state.validations.push(ValidationRecord {
            epoch,
            lr: state.lr,
            mean: validation.mean,
            per_view: validation.per_view.clone(),
        });
        if let Some(obs) = observer.as_mut() {
            obs(epoch, &validation)?;
        }
    }
    state.rng = rng;

    if cfg.recolor_enabled {
        work = recolor_field(&work, &cfg.specs[0].image, 0.01);
    }
    Ok((work, state))
}

/// Maps the colors of occupied voxels (density above `min_density`) onto
/// the style image's color statistics. Empty space keeps its parameters.
pub fn recolor_field(field: &VoxelField, style: &Image, min_density: f64) -> VoxelField {
    let (nx, ny, nz) = field.resolution();
    let mut occupied = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if field.density_at(x, y, z) > min_density {
                    occupied.push((x, y, z, field.color_rgb_at(x, y, z)));
                }
            }
        }
    }
    if occupied.is_empty() {
        log::warn!("recolor skipped: no voxel exceeds density {min_density}");
        return field.clone();
    }
    let palette = Image::from_fn(occupied.len(), 1, |i, _| occupied[i].3);
    let matched = histogram_match(&palette, style, MatchMode::Full).output;
    let mut out = field.clone();
    for (i, &(x, y, z, _)) in occupied.iter().enumerate() {
        out.set_color_rgb(x, y, z, matched.get(i, 0));
    }
    out
}

fn region_mask_for_view(views: &ViewSet, binding: &RegionBinding, v: usize) -> Result<RegionMask> {
    let planes = views.masks.get(&binding.region).ok_or_else(|| {
        Error::Validation(format!(
            "region '{}' is bound to a style but the view set has no such mask set",
            binding.region
        ))
    })?;
    RegionMask::new(binding.region.clone(), planes[v].clone())
}

fn add_breakdown(acc: &mut LossBreakdown, bd: &LossBreakdown) {
    acc.style += bd.style;
    acc.content += bd.content;
    acc.tv += bd.tv;
    acc.depth += bd.depth;
}

fn check_finite_terms(
    bd: &LossBreakdown,
    epoch: usize,
    view: &str,
    region: Option<&str>,
) -> Result<()> {
    for (name, v) in [
        ("style", bd.style),
        ("content", bd.content),
        ("tv", bd.tv),
        ("depth", bd.depth),
    ] {
        if !v.is_finite() {
            let at = match region {
                Some(r) => format!("{view}, region '{r}'"),
                None => view.to_string(),
            };
            return Err(Error::NonFinite(format!(
                "the {name} term is non-finite at epoch {epoch}, {at}"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::rgb_to_yiq;
    use crate::field::{Camera, RenderSettings};
    use crate::image::Plane;
    use approx::assert_relative_eq;
    use nalgebra::{Matrix3, Vector3};
    use rand::Rng;

    fn test_field(seed: u64, n: usize) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::new((n, n, n), [-1.0, -1.0, 1.0], [1.0, 1.0, 3.0]).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    f.set_density(x, y, z, rng.gen::<f64>() * 6.0);
                    f.set_color_rgb(
                        x,
                        y,
                        z,
                        [
                            0.2 + 0.6 * rng.gen::<f64>(),
                            0.2 + 0.6 * rng.gen::<f64>(),
                            0.2 + 0.6 * rng.gen::<f64>(),
                        ],
                    );
                }
            }
        }
        f
    }

    fn shifted_camera(size: usize, dx: f64) -> Camera {
        Camera::new(
            size as f64,
            size as f64,
            size as f64 / 2.0,
            size as f64 / 2.0,
            size,
            size,
            Matrix3::identity(),
            Vector3::new(dx, 0.0, -1.0),
        )
        .unwrap()
    }

    fn test_views(field: &VoxelField, size: usize, n: usize) -> ViewSet {
        let cameras: Vec<Camera> = (0..n)
            .map(|i| shifted_camera(size, (i as f64 - (n - 1) as f64 / 2.0) * 0.2))
            .collect();
        let settings = RenderSettings::new(12, 1.0, 4.0, [0.9, 0.9, 0.9]).unwrap();
        let images = cameras
            .iter()
            .map(|c| field.render_view(c, &settings))
            .collect();
        ViewSet::new(cameras, images, settings).unwrap()
    }

    fn stripe_style(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(size, size, |y, _| {
            let base = if y % 4 < 2 { 0.85 } else { 0.15 };
            [
                (base + 0.1 * rng.gen::<f64>()).clamp(0.0, 1.0),
                (base * 0.5 + 0.1 * rng.gen::<f64>()).clamp(0.0, 1.0),
                (0.3 + 0.1 * rng.gen::<f64>()).clamp(0.0, 1.0),
            ]
        })
    }

    fn quick_cfg(spec: StyleSpec) -> StylizeConfig {
        StylizeConfig::baseline(SceneKind::ForwardFacing, spec)
            .with_epochs(2)
            .with_seed(7)
    }

    #[test]
    fn schedule_hits_the_pinned_endpoints_and_midpoint() {
        let cfg = StylizeConfig::baseline(
            SceneKind::ForwardFacing,
            StyleSpec::new(Image::zeros(8, 8)),
        );
        assert_relative_eq!(lr_at(0, 100, &cfg), 0.1, epsilon = 1e-15);
        assert_relative_eq!(lr_at(100, 100, &cfg), 0.01, epsilon = 1e-15);
        assert_relative_eq!(lr_at(50, 100, &cfg), 0.031622776601683794, epsilon = 1e-12);
        // Monotone decay, always inside [lr_end, lr_start].
        for k in 0..100 {
            let a = lr_at(k, 100, &cfg);
            let b = lr_at(k + 1, 100, &cfg);
            assert!(b < a && (0.01..=0.1).contains(&a));
        }
    }

    #[test]
    fn config_validation_rejects_broken_setups() {
        let spec = StyleSpec::new(Image::zeros(8, 8));
        let base = StylizeConfig::baseline(SceneKind::ForwardFacing, spec.clone());
        assert!(base.validate().is_ok());
        assert!(base.clone().with_epochs(0).validate().is_err());

        let mut bad_lr = base.clone();
        bad_lr.lr_end = bad_lr.lr_start;
        assert!(bad_lr.validate().is_err());

        let mut no_style = base.clone();
        no_style.specs.clear();
        assert!(no_style.validate().is_err());

        let mut spatial = StylizeConfig::spatial(SceneKind::ForwardFacing, Vec::new());
        assert!(spatial.validate().is_err());
        spatial.regions.push(RegionBinding {
            region: "left".into(),
            spec: spec.clone(),
        });
        assert!(spatial.validate().is_ok());
        spatial.regions.push(RegionBinding {
            region: "left".into(),
            spec: spec.clone(),
        });
        assert!(spatial.validate().is_err());

        let mut stray_regions = base.clone();
        stray_regions.regions.push(RegionBinding {
            region: "left".into(),
            spec,
        });
        assert!(stray_regions.validate().is_err());
    }

    #[test]
    fn recolor_is_forced_off_under_the_documented_modes() {
        let spec = StyleSpec::new(Image::zeros(8, 8));
        let color = StylizeConfig::color_preserving(SceneKind::ForwardFacing, spec.clone())
            .with_recolor()
            .effective()
            .unwrap();
        assert!(!color.recolor_enabled);
        assert!(color.specs.iter().all(|s| s.luminance_only));

        let spatial = StylizeConfig::spatial(
            SceneKind::ForwardFacing,
            vec![RegionBinding {
                region: "left".into(),
                spec: spec.clone(),
            }],
        )
        .with_recolor()
        .effective()
        .unwrap();
        assert!(!spatial.recolor_enabled);

        let multi = StylizeConfig::multi_style(
            SceneKind::ForwardFacing,
            vec![
                spec.clone().with_blend_weight(0.5),
                spec.clone().with_blend_weight(0.5),
            ],
        )
        .with_recolor()
        .effective()
        .unwrap();
        assert!(!multi.recolor_enabled);

        let plain = StylizeConfig::baseline(SceneKind::ForwardFacing, spec)
            .with_recolor()
            .effective()
            .unwrap();
        assert!(plain.recolor_enabled);
    }

    #[test]
    fn zero_weights_leave_the_field_bit_identical() {
        let field = test_field(1, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let mut cfg = quick_cfg(StyleSpec::new(stripe_style(2, 16)));
        cfg.weights = LossWeights::zero();
        let (out, state) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        assert_eq!(out.color_param_grid(), field.color_param_grid());
        assert_eq!(out.density_grid(), field.density_grid());
        assert_eq!(state.step, 2 * 3);
        assert_eq!(state.validations.len(), 2);
    }

    #[test]
    fn runs_are_reproducible_and_leave_density_untouched() {
        let field = test_field(3, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(4, 16)));
        let (a, state_a) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        let (b, _) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        assert_eq!(a.color_param_grid(), b.color_param_grid());
        assert_eq!(a.density_grid(), field.density_grid());
        assert!(a.density_frozen());
        // The colors actually moved.
        assert_ne!(a.color_param_grid(), field.color_param_grid());
        // Schedule bookkeeping: lr ends at lr_end exactly, history is full.
        assert_relative_eq!(state_a.lr, 0.01, epsilon = 1e-15);
        assert_eq!(state_a.history.len(), state_a.step);
        for r in &state_a.history {
            assert_relative_eq!(
                r.total,
                r.losses.weighted_total(&cfg.weights),
                epsilon = 1e-9
            );
        }
    }

    #[test]
    fn a_different_seed_changes_the_visit_order() {
        let field = test_field(3, 5);
        let views = test_views(&field, 12, 4);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(4, 16))).with_epochs(1);
        let (_, s1) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        let (_, s2) =
            run_stylization(&field, &views, &cfg.clone().with_seed(99), &fx, None, None).unwrap();
        let order = |s: &TrainState| s.history.iter().map(|r| r.view).collect::<Vec<_>>();
        assert_ne!(order(&s1), order(&s2));
    }

    #[test]
    fn epoch_zero_validation_has_exactly_zero_content_loss() {
        let field = test_field(5, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(6, 16)));
        let val = validate_epoch(&field, &field, &views, &cfg, &fx, None).unwrap();
        assert_eq!(val.mean.content, 0.0);
        for (_, bd) in &val.per_view {
            assert_eq!(bd.content, 0.0);
        }
        // The style term is measured and positive: the field does not look
        // like the style image.
        assert!(val.mean.style > 0.0);
    }

    #[test]
    fn the_style_term_falls_over_a_short_run() {
        let field = test_field(7, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(8, 16))).with_epochs(3);
        let (_, state) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        let first = state.mean_style_in_epoch(1).unwrap();
        let last = state.mean_style_in_epoch(3).unwrap();
        assert!(
            last < first,
            "style term should fall: epoch 1 {first:.4}, epoch 3 {last:.4}"
        );
    }

    #[test]
    fn observer_sees_every_epoch_in_order() {
        let field = test_field(9, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(10, 16)));
        let mut seen = Vec::new();
        let mut obs = |epoch: usize, val: &EpochValidation| {
            seen.push((epoch, val.renders.len()));
            Ok(())
        };
        let (_, state) =
            run_stylization(&field, &views, &cfg, &fx, None, Some(&mut obs)).unwrap();
        assert_eq!(seen, vec![(1, 3), (2, 3)]);
        assert_eq!(state.validations.len(), 2);
        assert_eq!(state.validations[0].epoch, 1);
    }

    #[test]
    fn observer_errors_abort_the_run() {
        let field = test_field(11, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let cfg = quick_cfg(StyleSpec::new(stripe_style(12, 16)));
        let mut obs = |_: usize, _: &EpochValidation| -> Result<()> {
            Err(Error::Config("observer bailed".into()))
        };
        assert!(run_stylization(&field, &views, &cfg, &fx, None, Some(&mut obs)).is_err());
    }

    #[test]
    fn luminance_only_runs_ignore_style_chroma() {
        let field = test_field(13, 5);
        let views = test_views(&field, 12, 3);
        let fx = FeatureExtractor::deterministic();
        let style = stripe_style(14, 16);
        // A chroma-only edit: same luminance plane, chrominance damped.
        let yiq = rgb_to_yiq(&style);
        let chroma_edit = crate::color::yiq_to_rgb(&crate::color::YiqImage {
            y: yiq.y.clone(),
            i: yiq.i.map(|v| v * 0.3),
            q: yiq.q.map(|v| v * 0.3),
        });

        let cfg_a = StylizeConfig::color_preserving(
            SceneKind::ForwardFacing,
            StyleSpec::new(style),
        )
        .with_epochs(2)
        .with_seed(7);
        let mut cfg_b = cfg_a.clone();
        cfg_b.specs = vec![StyleSpec::new(chroma_edit)];

        let (fa, sa) = run_stylization(&field, &views, &cfg_a, &fx, None, None).unwrap();
        let (fb, sb) = run_stylization(&field, &views, &cfg_b, &fx, None, None).unwrap();
        for (ra, rb) in sa.history.iter().zip(&sb.history) {
            assert!(
                (ra.losses.style - rb.losses.style).abs() <= 1e-6,
                "style terms diverged: {} vs {}",
                ra.losses.style,
                rb.losses.style
            );
        }
        for (a, b) in fa.color_param_grid().iter().zip(fb.color_param_grid()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn spatial_runs_keep_unbound_pixels_and_reject_unknown_regions() {
        let field = test_field(15, 5);
        let mut views = test_views(&field, 12, 3);
        // Left half of every view belongs to the styled region.
        let planes: Vec<Plane> = (0..views.len())
            .map(|_| Plane::from_fn(12, 12, |_, x| (x < 6) as u8 as f64))
            .collect();
        views.masks.insert("left".into(), planes);
        let fx = FeatureExtractor::deterministic();
        let cfg = StylizeConfig::spatial(
            SceneKind::ForwardFacing,
            vec![RegionBinding {
                region: "left".into(),
                spec: StyleSpec::new(stripe_style(16, 16)),
            }],
        )
        .with_epochs(2)
        .with_seed(7);
        let (out, state) = run_stylization(&field, &views, &cfg, &fx, None, None).unwrap();
        assert_eq!(out.density_grid(), field.density_grid());
        assert_ne!(out.color_param_grid(), field.color_param_grid());
        assert_eq!(state.validations.len(), 2);

        let mut unbound = cfg.clone();
        unbound.regions[0].region = "right".into();
        match run_stylization(&field, &views, &unbound, &fx, None, None) {
            Err(Error::Validation(msg)) => assert!(msg.contains("right")),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn recoloring_moves_palette_statistics_toward_the_style() {
        let field = test_field(17, 6);
        let style = Image::from_fn(16, 16, |y, x| {
            [
                0.8 + 0.1 * ((y * x) % 3) as f64 / 3.0,
                0.1 + 0.05 * ((y + x) % 5) as f64 / 5.0,
                0.1,
            ]
        });
        let out = recolor_field(&field, &style, 0.01);
        assert_eq!(out.density_grid(), field.density_grid());
        let mean_channel = |f: &VoxelField, c: usize| {
            let (nx, ny, nz) = f.resolution();
            let mut acc = 0.0;
            let mut n = 0.0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        if f.density_at(x, y, z) > 0.01 {
                            acc += f.color_rgb_at(x, y, z)[c];
                            n += 1.0;
                        }
                    }
                }
            }
            acc / n
        };
        // The style is strongly red; the recolored palette must be too.
        assert!(mean_channel(&out, 0) > mean_channel(&out, 1) + 0.3);
        assert!((mean_channel(&out, 0) - 0.8).abs() < 0.15);
    }

    #[test]
    fn validation_subset_is_small_and_deduplicated() {
        assert_eq!(validation_subset(1), vec![0]);
        assert_eq!(validation_subset(2), vec![0, 1]);
        assert_eq!(validation_subset(3), vec![0, 1, 2]);
        assert_eq!(validation_subset(10), vec![0, 5, 9]);
    }
}
