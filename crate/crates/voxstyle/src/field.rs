//! Dense voxel radiance field with differentiable volume rendering.
//!
//! The field stores a density grid and an unbounded color-parameter grid on
//! a regular lattice spanning an axis-aligned bounding box. Node `i` along an
//! axis with `n` nodes sits at `min + i * (max - min) / (n - 1)`. Color
//! parameters are mapped to `[0, 1]` by a logistic squash per node and the
//! squashed colors are interpolated. Points outside the box have density 0.
//!
//! Rendering marches `S` samples per ray, placed at the midpoints of a
//! uniform partition of `[near, far]`, and composites with the
//! emission-absorption model
//!
//! ```text
//! T_i = exp(-sum_{j<i} sigma_j * delta),   a_i = 1 - exp(-sigma_i * delta),
//! w_i = T_i * a_i,   pixel = sum_i w_i * c_i + T_final * background.
//! ```
//!
//! The backward pass is derived by hand. For an upstream pixel gradient `u`,
//! the color path is `d(u . pixel)/d c_i = w_i * u`, scattered to the eight
//! interpolation corners by their trilinear weights and through the logistic
//! derivative. For density, differentiating the recurrence gives
//!
//! ```text
//! d(u . pixel)/d sigma_k
//!   = delta * ( T_k e^{-sigma_k delta} (u . c_k)
//!               - sum_{i>k} w_i (u . c_i)
//!               - T_final (u . background) ),
//! ```
//!
//! which one reverse sweep evaluates with a suffix accumulator.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::optim::Adam;

/// Capture geometry of a scene: a narrow frontal camera arc, or an orbit
/// around the subject. Several weight presets and evaluation defaults key
/// off this.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SceneKind {
    ForwardFacing,
    Orbit,
}

impl SceneKind {
    pub fn name(self) -> &'static str {
        match self {
            SceneKind::ForwardFacing => "forward-facing",
            SceneKind::Orbit => "orbit",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "forward-facing" => Ok(SceneKind::ForwardFacing),
            "orbit" => Ok(SceneKind::Orbit),
            _ => Err(Error::Config(format!(
                "unknown scene kind '{s}' (expected forward-facing or orbit)"
            ))),
        }
    }

    /// Default novel-view count for evaluation renders: 120 for a frontal
    /// arc, 200 for an orbit.
    pub fn default_eval_views(self) -> usize {
        match self {
            SceneKind::ForwardFacing => 120,
            SceneKind::Orbit => 200,
        }
    }
}

/// Logistic squash mapping an unbounded color parameter to `(0, 1)`.
#[inline]
pub fn squash(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`squash`]; the input is clamped away from 0 and 1.
#[inline]
pub fn logit(c: f64) -> f64 {
    let c = c.clamp(1e-9, 1.0 - 1e-9);
    (c / (1.0 - c)).ln()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic per-sample jitter offset in `[0, 1)`.
fn jitter_unit(seed: u64, pixel: u64, sample: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(pixel ^ splitmix64(sample)));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Dense voxel radiance field: density plus squashed diffuse color per node.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelField {
    resolution: (usize, usize, usize),
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    density: Vec<f64>,
    color_params: Vec<f64>,
    density_frozen: bool,
}

impl VoxelField {
    /// Empty field: zero density, colors squashing to mid gray.
    pub fn new(
        resolution: (usize, usize, usize),
        bbox_min: [f64; 3],
        bbox_max: [f64; 3],
    ) -> Result<Self> {
        let (nx, ny, nz) = resolution;
        if nx < 2 || ny < 2 || nz < 2 {
            return Err(Error::Config(format!(
                "field resolution {nx}x{ny}x{nz} needs at least 2 nodes per axis"
            )));
        }
        for a in 0..3 {
            if !(bbox_min[a] < bbox_max[a]) {
                return Err(Error::Config(format!(
                    "bbox axis {a}: min {} must be below max {}",
                    bbox_min[a], bbox_max[a]
                )));
            }
        }
        let n = nx * ny * nz;
        Ok(VoxelField {
            resolution,
            bbox_min,
            bbox_max,
            density: vec![0.0; n],
            color_params: vec![0.0; n * 3],
            density_frozen: false,
        })
    }

    /// Rebuilds a field from raw grids, validating the invariants. Used by
    /// checkpoint loading.
    pub fn from_grids(
        resolution: (usize, usize, usize),
        bbox_min: [f64; 3],
        bbox_max: [f64; 3],
        density: Vec<f64>,
        color_params: Vec<f64>,
        density_frozen: bool,
    ) -> Result<Self> {
        let mut field = VoxelField::new(resolution, bbox_min, bbox_max)?;
        let n = field.voxel_count();
        if density.len() != n {
            return Err(Error::DimMismatch(format!(
                "density grid has {} values, expected {n}",
                density.len()
            )));
        }
        if color_params.len() != n * 3 {
            return Err(Error::DimMismatch(format!(
                "color grid has {} values, expected {}",
                color_params.len(),
                n * 3
            )));
        }
        if density.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Validation(
                "density grid must be finite and nonnegative".into(),
            ));
        }
        if color_params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("color grid must be finite".into()));
        }
        field.density = density;
        field.color_params = color_params;
        field.density_frozen = density_frozen;
        Ok(field)
    }

    pub fn resolution(&self) -> (usize, usize, usize) {
        self.resolution
    }

    pub fn bbox_min(&self) -> [f64; 3] {
        self.bbox_min
    }

    pub fn bbox_max(&self) -> [f64; 3] {
        self.bbox_max
    }

    pub fn voxel_count(&self) -> usize {
        let (nx, ny, nz) = self.resolution;
        nx * ny * nz
    }

    pub fn density_frozen(&self) -> bool {
        self.density_frozen
    }

    pub fn set_density_frozen(&mut self, frozen: bool) {
        self.density_frozen = frozen;
    }

    pub fn density_grid(&self) -> &[f64] {
        &self.density
    }

    pub fn color_param_grid(&self) -> &[f64] {
        &self.color_params
    }

    pub fn color_param_grid_mut(&mut self) -> &mut [f64] {
        &mut self.color_params
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        let (nx, ny, _) = self.resolution;
        (z * ny + y) * nx + x
    }

    /// World position of node `(x, y, z)`.
    pub fn node_position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let (nx, ny, nz) = self.resolution;
        let t = |i: usize, n: usize, a: usize| {
            self.bbox_min[a] + i as f64 * (self.bbox_max[a] - self.bbox_min[a]) / (n - 1) as f64
        };
        [t(x, nx, 0), t(y, ny, 1), t(z, nz, 2)]
    }

    pub fn density_at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.density[self.voxel_index(x, y, z)]
    }

    /// Sets one node's density. Densities must stay nonnegative.
    pub fn set_density(&mut self, x: usize, y: usize, z: usize, v: f64) {
        assert!(v.is_finite() && v >= 0.0, "density must be finite and >= 0");
        let i = self.voxel_index(x, y, z);
        self.density[i] = v;
    }

    /// Sets one node's color by storing the logit of each channel.
    pub fn set_color_rgb(&mut self, x: usize, y: usize, z: usize, rgb: [f64; 3]) {
        let i = self.voxel_index(x, y, z) * 3;
        for c in 0..3 {
            self.color_params[i + c] = logit(rgb[c]);
        }
    }

    pub fn color_rgb_at(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let i = self.voxel_index(x, y, z) * 3;
        [
            squash(self.color_params[i]),
            squash(self.color_params[i + 1]),
            squash(self.color_params[i + 2]),
        ]
    }

    /// Squashed copy of the color grid, cached once per render.
    fn squashed_colors(&self) -> Vec<f64> {
        self.color_params.iter().map(|&p| squash(p)).collect()
    }

    #[inline]
    fn inside_bbox(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.bbox_min[a] && p[a] <= self.bbox_max[a])
    }

    /// Trilinear cell for a point inside the box: base node index and the
    /// fractional offsets along each axis.
    #[inline]
    fn cell_of(&self, p: [f64; 3]) -> ([usize; 3], [f64; 3]) {
        let (nx, ny, nz) = self.resolution;
        let ns = [nx, ny, nz];
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = (p[a] - self.bbox_min[a]) / (self.bbox_max[a] - self.bbox_min[a])
                * (ns[a] - 1) as f64;
            let i = (u.floor() as usize).min(ns[a] - 2);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        (base, frac)
    }

    /// The eight corner voxel indices and trilinear weights around `p`.
    /// `p` must be inside the box.
    #[inline]
    fn corners_of(&self, p: [f64; 3]) -> [(usize, f64); 8] {
        let (base, frac) = self.cell_of(p);
        let mut out = [(0usize, 0f64); 8];
        let mut k = 0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let w = (if dx == 1 { frac[0] } else { 1.0 - frac[0] })
                        * (if dy == 1 { frac[1] } else { 1.0 - frac[1] })
                        * (if dz == 1 { frac[2] } else { 1.0 - frac[2] });
                    out[k] = (
                        self.voxel_index(base[0] + dx, base[1] + dy, base[2] + dz),
                        w,
                    );
                    k += 1;
                }
            }
        }
        out
    }

    /// Trilinear density and squashed color at a world point. Points outside
    /// the bounding box return density 0 and black.
    pub fn trilinear_sample(&self, p: [f64; 3]) -> (f64, [f64; 3]) {
        if !self.inside_bbox(p) {
            return (0.0, [0.0; 3]);
        }
        let colors = self.squashed_colors();
        self.sample_with(&colors, p)
    }

    #[inline]
    fn sample_with(&self, squashed: &[f64], p: [f64; 3]) -> (f64, [f64; 3]) {
        let corners = self.corners_of(p);
        let mut d = 0.0;
        let mut rgb = [0.0; 3];
        for &(idx, w) in &corners {
            d += w * self.density[idx];
            for c in 0..3 {
                rgb[c] += w * squashed[idx * 3 + c];
            }
        }
        (d, rgb)
    }

    /// Renders the full view.
    pub fn render_view(&self, cam: &Camera, s: &RenderSettings) -> Image {
        self.render_patch(cam, s, &PatchRect::full(cam))
    }

    /// Renders the pixels inside `rect`; the output image has the patch's
    /// dimensions. A patch render equals the same slice of the full render.
    pub fn render_patch(&self, cam: &Camera, s: &RenderSettings, rect: &PatchRect) -> Image {
        rect.check(cam);
        let squashed = self.squashed_colors();
        let mut out = Image::zeros(rect.height, rect.width);
        for py in 0..rect.height {
            for px in 0..rect.width {
                let rgb = self.composite_pixel(cam, s, &squashed, rect.y0 + py, rect.x0 + px);
                out.set(py, px, rgb);
            }
        }
        out
    }

    #[inline]
    fn composite_pixel(
        &self,
        cam: &Camera,
        s: &RenderSettings,
        squashed: &[f64],
        y: usize,
        x: usize,
    ) -> [f64; 3] {
        let (origin, dir) = cam.ray(y, x);
        let delta = (s.far - s.near) / s.samples_per_ray as f64;
        let pixel = (y * cam.width() + x) as u64;
        let mut t = 1.0;
        let mut acc = [0.0f64; 3];
        for i in 0..s.samples_per_ray {
            let off = match s.jitter_seed {
                Some(seed) => jitter_unit(seed, pixel, i as u64),
                None => 0.5,
            };
            let dist = s.near + (i as f64 + off) * delta;
            let p = [
                origin[0] + dist * dir[0],
                origin[1] + dist * dir[1],
                origin[2] + dist * dir[2],
            ];
            if !self.inside_bbox(p) {
                continue;
            }
            let (sigma, rgb) = self.sample_with(squashed, p);
            if sigma <= 0.0 {
                continue;
            }
            let tau = sigma * delta;
            let alpha = -(-tau).exp_m1();
            let w = t * alpha;
            for c in 0..3 {
                acc[c] += w * rgb[c];
            }
            t *= (-tau).exp();
        }
        for c in 0..3 {
            acc[c] += t * s.background[c];
        }
        acc
    }

    /// Per-sample compositing profile of one ray, for inspection and tests.
    /// The recomposed pixel equals [`render_view`](Self::render_view) at
    /// `(y, x)` bit-for-bit.
    pub fn ray_profile(&self, cam: &Camera, s: &RenderSettings, y: usize, x: usize) -> RayProfile {
        let squashed = self.squashed_colors();
        let (origin, dir) = cam.ray(y, x);
        let delta = (s.far - s.near) / s.samples_per_ray as f64;
        let pixel = (y * cam.width() + x) as u64;
        let mut t = 1.0;
        let mut profile = RayProfile {
            transmittance_before: Vec::with_capacity(s.samples_per_ray),
            weights: Vec::with_capacity(s.samples_per_ray),
            colors: Vec::with_capacity(s.samples_per_ray),
            transmittance_final: 1.0,
        };
        for i in 0..s.samples_per_ray {
            let off = match s.jitter_seed {
                Some(seed) => jitter_unit(seed, pixel, i as u64),
                None => 0.5,
            };
            let dist = s.near + (i as f64 + off) * delta;
            let p = [
                origin[0] + dist * dir[0],
                origin[1] + dist * dir[1],
                origin[2] + dist * dir[2],
            ];
            profile.transmittance_before.push(t);
            if !self.inside_bbox(p) {
                profile.weights.push(0.0);
                profile.colors.push([0.0; 3]);
                continue;
            }
            let (sigma, rgb) = self.sample_with(&squashed, p);
            if sigma <= 0.0 {
                profile.weights.push(0.0);
                profile.colors.push(rgb);
                continue;
            }
            let tau = sigma * delta;
            profile.weights.push(t * -(-tau).exp_m1());
            profile.colors.push(rgb);
            t *= (-tau).exp();
        }
        profile.transmittance_final = t;
        profile
    }

    /// Full-frame vector-Jacobian product of [`render_view`](Self::render_view):
    /// the gradient of `sum(upstream . pixel)` with respect to the grids.
    /// Frozen density yields an all-zero density gradient.
    pub fn render_vjp(&self, cam: &Camera, s: &RenderSettings, upstream: &Image) -> FieldGrads {
        let mut grads = FieldGrads::zeros(self);
        self.render_patch_vjp(cam, s, &PatchRect::full(cam), upstream, &mut grads);
        grads
    }

    /// Patch vector-Jacobian product, accumulating into `grads`. `upstream`
    /// has the patch's dimensions and holds the pixel gradients for the
    /// patch's slice of the image.
    pub fn render_patch_vjp(
        &self,
        cam: &Camera,
        s: &RenderSettings,
        rect: &PatchRect,
        upstream: &Image,
        grads: &mut FieldGrads,
    ) {
        rect.check(cam);
        assert_eq!(
            (upstream.height(), upstream.width()),
            (rect.height, rect.width),
            "upstream patch dimensions must match the rect"
        );
        let squashed = self.squashed_colors();
        let delta = (s.far - s.near) / s.samples_per_ray as f64;
        let want_density = !self.density_frozen;
        // Per-sample scratch, reused across pixels.
        let mut samples: Vec<SampleRecord> = Vec::with_capacity(s.samples_per_ray);
        for py in 0..rect.height {
            for px in 0..rect.width {
                let y = rect.y0 + py;
                let x = rect.x0 + px;
                let u = upstream.get(py, px);
                if u == [0.0, 0.0, 0.0] {
                    continue;
                }
                let (origin, dir) = cam.ray(y, x);
                let pixel = (y * cam.width() + x) as u64;
                samples.clear();
                let mut t = 1.0;
                for i in 0..s.samples_per_ray {
                    let off = match s.jitter_seed {
                        Some(seed) => jitter_unit(seed, pixel, i as u64),
                        None => 0.5,
                    };
                    let dist = s.near + (i as f64 + off) * delta;
                    let p = [
                        origin[0] + dist * dir[0],
                        origin[1] + dist * dir[1],
                        origin[2] + dist * dir[2],
                    ];
                    if !self.inside_bbox(p) {
                        continue;
                    }
                    let (sigma, rgb) = self.sample_with(&squashed, p);
                    if sigma <= 0.0 && !want_density {
                        continue;
                    }
                    let tau = sigma * delta;
                    let decay = (-tau).exp();
                    let w = t * -(-tau).exp_m1();
                    samples.push(SampleRecord {
                        point: p,
                        t_before: t,
                        decay,
                        weight: w,
                        u_dot_c: u[0] * rgb[0] + u[1] * rgb[1] + u[2] * rgb[2],
                    });
                    t *= decay;
                }
                let u_dot_bg =
                    u[0] * s.background[0] + u[1] * s.background[1] + u[2] * s.background[2];
                // Color path: d(u.pixel)/d c_i = w_i u, scattered through the
                // trilinear weights and the logistic derivative.
                for rec in &samples {
                    if rec.weight == 0.0 {
                        continue;
                    }
                    for (idx, cw) in self.corners_of(rec.point) {
                        if cw == 0.0 {
                            continue;
                        }
                        for c in 0..3 {
                            let sq = squashed[idx * 3 + c];
                            grads.color_params[idx * 3 + c] +=
                                u[c] * rec.weight * cw * sq * (1.0 - sq);
                        }
                    }
                }
                // Density path: reverse sweep with the suffix accumulator
                // G_k = sum_{i>k} w_i (u . c_i).
                if want_density {
                    let mut suffix = 0.0;
                    for rec in samples.iter().rev() {
                        let dsigma = delta
                            * (rec.t_before * rec.decay * rec.u_dot_c - suffix - t * u_dot_bg);
                        suffix += rec.weight * rec.u_dot_c;
                        if dsigma == 0.0 {
                            continue;
                        }
                        for (idx, cw) in self.corners_of(rec.point) {
                            grads.density[idx] += dsigma * cw;
                        }
                    }
                }
            }
        }
    }
}

struct SampleRecord {
    point: [f64; 3],
    t_before: f64,
    decay: f64,
    weight: f64,
    u_dot_c: f64,
}

/// Per-sample record of one ray's compositing, from
/// [`VoxelField::ray_profile`].
#[derive(Debug, Clone)]
pub struct RayProfile {
    /// Transmittance before each sample.
    pub transmittance_before: Vec<f64>,
    /// Compositing weight of each sample.
    pub weights: Vec<f64>,
    /// Interpolated squashed color of each sample.
    pub colors: Vec<[f64; 3]>,
    /// Transmittance after the last sample (the background weight).
    pub transmittance_final: f64,
}

impl RayProfile {
    /// Recomposes the pixel from the recorded profile.
    pub fn pixel(&self, background: [f64; 3]) -> [f64; 3] {
        let mut acc = [0.0; 3];
        for (w, c) in self.weights.iter().zip(&self.colors) {
            for k in 0..3 {
                acc[k] += w * c[k];
            }
        }
        for k in 0..3 {
            acc[k] += self.transmittance_final * background[k];
        }
        acc
    }
}

/// Gradients with respect to a field's grids, same layouts as the field.
#[derive(Debug, Clone)]
pub struct FieldGrads {
    pub density: Vec<f64>,
    pub color_params: Vec<f64>,
}

impl FieldGrads {
    pub fn zeros(field: &VoxelField) -> Self {
        FieldGrads {
            density: vec![0.0; field.voxel_count()],
            color_params: vec![0.0; field.voxel_count() * 3],
        }
    }

    pub fn add_assign(&mut self, other: &FieldGrads) {
        assert_eq!(self.density.len(), other.density.len());
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.color_params.iter_mut().zip(&other.color_params) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.density.iter().all(|v| v.is_finite())
            && self.color_params.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.density
            .iter()
            .chain(&self.color_params)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Pinhole camera: intrinsics in pixels plus a rigid world-from-camera pose.
/// The camera looks along its +z axis, x right, y down the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    rotation: Matrix3<f64>,
    position: Vector3<f64>,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Matrix3<f64>,
        position: Vector3<f64>,
    ) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::Validation(format!(
                "focal lengths must be positive, got fx={fx} fy={fy}"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Validation("camera image size must be nonzero".into()));
        }
        let gram = rotation.transpose() * rotation;
        let dev = (gram - Matrix3::identity())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        if dev > 1e-6 {
            return Err(Error::Validation(format!(
                "camera rotation is not orthonormal (max deviation {dev:.2e})"
            )));
        }
        Ok(Camera {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            position,
        })
    }

    /// Camera at `position` looking at `target`, with the image x axis
    /// horizontal with respect to `up`. Principal point at the image center.
    pub fn look_at(
        position: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let pos = Vector3::from(position);
        let fwd = (Vector3::from(target) - pos)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("camera position equals target".into()))?;
        let right = fwd
            .cross(&Vector3::from(up))
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Validation("camera up is parallel to the view direction".into()))?;
        let down = fwd.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, fwd]);
        Camera::new(
            focal,
            focal,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            pos,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn intrinsics(&self) -> (f64, f64, f64, f64) {
        (self.fx, self.fy, self.cx, self.cy)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn position(&self) -> &Vector3<f64> {
        &self.position
    }

    /// World-space ray through the center of pixel `(y, x)`: origin and a
    /// unit direction, so ray distance is metric.
    pub fn ray(&self, y: usize, x: usize) -> ([f64; 3], [f64; 3]) {
        let d = Vector3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let dir = (self.rotation * d).normalize();
        (
            [self.position[0], self.position[1], self.position[2]],
            [dir[0], dir[1], dir[2]],
        )
    }
}

/// Ray-march configuration shared by all renders of a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub samples_per_ray: usize,
    pub near: f64,
    pub far: f64,
    pub background: [f64; 3],
    /// Seed for per-sample jitter; `None` keeps the deterministic midpoint
    /// rule. Defaults off.
    pub jitter_seed: Option<u64>,
}

impl RenderSettings {
    pub fn new(samples_per_ray: usize, near: f64, far: f64, background: [f64; 3]) -> Result<Self> {
        let s = RenderSettings {
            samples_per_ray,
            near,
            far,
            background,
            jitter_seed: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples_per_ray < 2 {
            return Err(Error::Validation(format!(
                "samples_per_ray must be at least 2, got {}",
                self.samples_per_ray
            )));
        }
        if !(0.0 < self.near && self.near < self.far) {
            return Err(Error::Validation(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!(
                "background color must lie in [0,1], got {:?}",
                self.background
            )));
        }
        Ok(())
    }
}

/// Pixel rectangle of a view: `y0..y0+height` by `x0..x0+width`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub y0: usize,
    pub x0: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchRect {
    pub fn full(cam: &Camera) -> Self {
        PatchRect {
            y0: 0,
            x0: 0,
            height: cam.height(),
            width: cam.width(),
        }
    }

    /// Tiles an image into patches of at most `size` pixels per side, row
    /// major. The tiles partition the image exactly.
    pub fn tile(height: usize, width: usize, size: usize) -> Vec<PatchRect> {
        assert!(size >= 1, "patch size must be at least 1");
        let mut out = Vec::new();
        let mut y0 = 0;
        while y0 < height {
            let h = size.min(height - y0);
            let mut x0 = 0;
            while x0 < width {
                let w = size.min(width - x0);
                out.push(PatchRect {
                    y0,
                    x0,
                    height: h,
                    width: w,
                });
                x0 += w;
            }
            y0 += h;
        }
        out
    }

    fn check(&self, cam: &Camera) {
        assert!(
            self.height >= 1
                && self.width >= 1
                && self.y0 + self.height <= cam.height()
                && self.x0 + self.width <= cam.width(),
            "patch rect {self:?} exceeds the {}x{} image",
            cam.height(),
            cam.width()
        );
    }
}

/// Posed views with ground-truth images, shared render settings, and
/// optional per-region binary masks (region id to one plane per view).
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub cameras: Vec<Camera>,
    pub images: Vec<Image>,
    pub masks: BTreeMap<String, Vec<Plane>>,
    pub settings: RenderSettings,
}

impl ViewSet {
    pub fn new(cameras: Vec<Camera>, images: Vec<Image>, settings: RenderSettings) -> Result<Self> {
        let set = ViewSet {
            cameras,
            images,
            masks: BTreeMap::new(),
            settings,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        if self.cameras.len() != self.images.len() {
            return Err(Error::Validation(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        for (i, (cam, img)) in self.cameras.iter().zip(&self.images).enumerate() {
            if (cam.height(), cam.width()) != (img.height(), img.width()) {
                return Err(Error::DimMismatch(format!(
                    "view {i}: camera {}x{} vs image {}x{}",
                    cam.height(),
                    cam.width(),
                    img.height(),
                    img.width()
                )));
            }
        }
        for (region, planes) in &self.masks {
            if planes.len() != self.cameras.len() {
                return Err(Error::Validation(format!(
                    "region '{region}' has {} masks for {} views",
                    planes.len(),
                    self.cameras.len()
                )));
            }
            for (i, (m, cam)) in planes.iter().zip(&self.cameras).enumerate() {
                if (m.height(), m.width()) != (cam.height(), cam.width()) {
                    return Err(Error::DimMismatch(format!(
                        "region '{region}' view {i}: mask {}x{} vs image {}x{}",
                        m.height(),
                        m.width(),
                        cam.height(),
                        cam.width()
                    )));
                }
                if m.as_slice().iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Validation(format!(
                        "region '{region}' view {i}: mask values must be exactly 0 or 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Photo-realistic reconstruction settings for [`fit_photoreal`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            iters: 2000,
            lr: 0.05,
            seed: 0,
        }
    }
}

/// Per-iteration mean squared error, recorded before each step.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub losses: Vec<f64>,
}

/// Fits the field to the view set by minimizing mean squared pixel error,
/// one adaptive-moment step per iteration on a single view, visiting views
/// in a seeded shuffled order. A frozen density grid is left bit-identical.
pub fn fit_photoreal(
    field: &VoxelField,
    views: &ViewSet,
    cfg: &FitConfig,
) -> Result<(VoxelField, FitReport)> {
    views.validate()?;
    if views.len() < 2 {
        return Err(Error::Validation(format!(
            "reconstruction needs at least 2 views, got {}",
            views.len()
        )));
    }
    let mut field = field.clone();
    let mut losses = Vec::with_capacity(cfg.iters);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..views.len()).collect();
    let mut adam_color = Adam::new(field.color_params.len());
    let mut adam_density = Adam::new(field.density.len());
    for iter in 0..cfg.iters {
        let slot = iter % views.len();
        if slot == 0 {
            order.shuffle(&mut rng);
        }
        let v = order[slot];
        let cam = &views.cameras[v];
        let gt = &views.images[v];
        let render = field.render_view(cam, &views.settings);
        let n = (render.height() * render.width() * 3) as f64;
        let mut upstream = Image::zeros(render.height(), render.width());
        let mut loss = 0.0;
        for y in 0..render.height() {
            for x in 0..render.width() {
                let r = render.get(y, x);
                let g = gt.get(y, x);
                let mut u = [0.0; 3];
                for c in 0..3 {
                    let d = r[c] - g[c];
                    loss += d * d / n;
                    u[c] = 2.0 * d / n;
                }
                upstream.set(y, x, u);
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "reconstruction loss at iteration {iter}, view {v}"
            )));
        }
        losses.push(loss);
        let grads = field.render_vjp(cam, &views.settings, &upstream);
        if !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "reconstruction gradients at iteration {iter}, view {v}"
            )));
        }
        adam_color.step(&mut field.color_params, &grads.color_params, cfg.lr);
        if !field.density_frozen {
            adam_density.step(&mut field.density, &grads.density, cfg.lr);
            for d in &mut field.density {
                *d = d.max(0.0);
            }
        }
    }
    Ok((field, FitReport { losses }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn small_field() -> VoxelField {
        VoxelField::new((4, 4, 4), [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap()
    }

    fn random_field(seed: u64, res: (usize, usize, usize)) -> VoxelField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = VoxelField::new(res, [-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]).unwrap();
        let (nx, ny, nz) = res;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    f.set_density(x, y, z, rng.gen_range(0.0..2.0));
                    f.set_color_rgb(
                        x,
                        y,
                        z,
                        [
                            rng.gen_range(0.05..0.95),
                            rng.gen_range(0.05..0.95),
                            rng.gen_range(0.05..0.95),
                        ],
                    );
                }
            }
        }
        f
    }

    fn front_camera(size: usize, focal: f64) -> Camera {
        Camera::look_at(
            [0.0, 0.0, -3.0],
            [0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            focal,
            size,
            size,
        )
        .unwrap()
    }

    #[test]
    fn trilinear_at_node_returns_voxel_values() {
        let mut f = small_field();
        f.set_density(1, 2, 3, 1.5);
        f.set_color_rgb(1, 2, 3, [0.2, 0.6, 0.9]);
        let p = f.node_position(1, 2, 3);
        let (d, rgb) = f.trilinear_sample(p);
        assert_relative_eq!(d, 1.5, max_relative = 1e-12);
        for c in 0..3 {
            assert_relative_eq!(rgb[c], [0.2, 0.6, 0.9][c], epsilon = 1e-9);
        }
    }

    #[test]
    fn trilinear_midpoint_averages_pair() {
        let mut f = small_field();
        f.set_density(0, 0, 0, 0.0);
        f.set_density(1, 0, 0, 2.0);
        let a = f.node_position(0, 0, 0);
        let b = f.node_position(1, 0, 0);
        let mid = [(a[0] + b[0]) / 2.0, a[1], a[2]];
        let (d, _) = f.trilinear_sample(mid);
        assert_relative_eq!(d, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn trilinear_cube_center_averages_eight_corners() {
        // Densities 1..8 on a 2x2x2 corner cube; equal weights 1/8 at the
        // center give 4.5.
        let mut f = small_field();
        let mut v = 1.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    f.set_density(dx, dy, dz, v);
                    v += 1.0;
                }
            }
        }
        let a = f.node_position(0, 0, 0);
        let b = f.node_position(1, 1, 1);
        let center = [
            (a[0] + b[0]) / 2.0,
            (a[1] + b[1]) / 2.0,
            (a[2] + b[2]) / 2.0,
        ];
        let (d, _) = f.trilinear_sample(center);
        assert_relative_eq!(d, 4.5, max_relative = 1e-12);
    }

    #[test]
    fn trilinear_outside_bbox_is_empty() {
        let mut f = small_field();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    f.set_density(x, y, z, 5.0);
                }
            }
        }
        assert_eq!(f.trilinear_sample([1.1, 0.0, 0.0]).0, 0.0);
        assert_eq!(f.trilinear_sample([0.0, -2.0, 0.0]).0, 0.0);
    }

    #[test]
    fn camera_rejects_bad_inputs() {
        let rot = Matrix3::identity();
        let pos = Vector3::zeros();
        assert!(Camera::new(0.0, 1.0, 0.5, 0.5, 2, 2, rot, pos).is_err());
        let skewed = Matrix3::new(1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(Camera::new(1.0, 1.0, 0.5, 0.5, 2, 2, skewed, pos).is_err());
        assert!(Camera::look_at([0.0; 3], [0.0; 3], [0.0, 0.0, 1.0], 1.0, 2, 2).is_err());
    }

    #[test]
    fn look_at_points_center_pixel_at_target() {
        let cam = Camera::look_at(
            [0.5, -2.0, 1.0],
            [0.5, 1.0, 1.0],
            [0.0, 0.0, 1.0],
            10.0,
            8,
            8,
        )
        .unwrap();
        // Mean of the four central rays is the optical axis.
        let mut dir = [0.0; 3];
        for (y, x) in [(3, 3), (3, 4), (4, 3), (4, 4)] {
            let (_, d) = cam.ray(y, x);
            for a in 0..3 {
                dir[a] += d[a] / 4.0;
            }
        }
        let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        assert_relative_eq!(dir[0] / norm, 0.0, epsilon = 1e-9);
        assert_relative_eq!(dir[1] / norm, 1.0, epsilon = 1e-9);
        assert_relative_eq!(dir[2] / norm, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn empty_field_renders_exact_background() {
        let f = small_field();
        let cam = front_camera(8, 8.0);
        let s = RenderSettings::new(16, 1.5, 4.5, [0.3, 0.5, 0.7]).unwrap();
        let img = f.render_view(&cam, &s);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(img.get(y, x), [0.3, 0.5, 0.7]);
            }
        }
    }

    #[test]
    fn opaque_field_renders_its_color() {
        // With sigma * delta >= 50 the first in-box sample saturates.
        let mut f = small_field();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    f.set_density(x, y, z, 500.0);
                    f.set_color_rgb(x, y, z, [0.8, 0.25, 0.45]);
                }
            }
        }
        let cam = front_camera(8, 16.0);
        let s = RenderSettings::new(8, 1.5, 4.5, [0.0, 0.0, 0.0]).unwrap();
        let img = f.render_view(&cam, &s);
        let center = img.get(4, 4);
        for c in 0..3 {
            assert!((center[c] - [0.8, 0.25, 0.45][c]).abs() < 1e-6);
        }
    }

    #[test]
    fn two_sample_compositing_blends_half_and_half() {
        // One pixel, two samples landing exactly on two constant-valued node
        // planes. With sigma_1 * delta = ln 2 and the second plane opaque:
        // w_1 = 1 - e^{-ln 2} = 0.5 and T_2 = 0.5, so the pixel is the
        // equal blend of the two colors.
        let c1 = [0.2, 0.4, 0.8];
        let c2 = [0.9, 0.1, 0.3];
        let mut f = VoxelField::new((2, 2, 2), [-1.0, -1.0, 1.0], [1.0, 1.0, 2.0]).unwrap();
        for y in 0..2 {
            for x in 0..2 {
                f.set_density(x, y, 0, std::f64::consts::LN_2);
                f.set_color_rgb(x, y, 0, c1);
                f.set_density(x, y, 1, 60.0);
                f.set_color_rgb(x, y, 1, c2);
            }
        }
        let cam = Camera::new(
            1.0,
            1.0,
            0.5,
            0.5,
            1,
            1,
            Matrix3::identity(),
            Vector3::zeros(),
        )
        .unwrap();
        // Samples at depths 1.0 and 2.0, delta = 1, both exactly on the node
        // planes of the box.
        let s = RenderSettings::new(2, 0.5, 2.5, [0.5, 0.5, 0.5]).unwrap();
        let img = f.render_view(&cam, &s);
        let got = img.get(0, 0);
        for c in 0..3 {
            assert_relative_eq!(got[c], 0.5 * c1[c] + 0.5 * c2[c], epsilon = 1e-7);
        }
    }

    #[test]
    fn ray_profile_matches_render_and_transmittance_decreases() {
        let f = random_field(11, (5, 5, 5));
        let cam = front_camera(6, 6.0);
        let s = RenderSettings::new(24, 1.5, 4.5, [0.2, 0.2, 0.2]).unwrap();
        let img = f.render_view(&cam, &s);
        for y in 0..6 {
            for x in 0..6 {
                let prof = f.ray_profile(&cam, &s, y, x);
                let recomposed = prof.pixel(s.background);
                let direct = img.get(y, x);
                for c in 0..3 {
                    assert_eq!(recomposed[c], direct[c]);
                }
                let mut prev = 1.0;
                for &t in &prof.transmittance_before {
                    assert!(t <= prev + 1e-15);
                    prev = t;
                }
                assert!(prof.transmittance_final <= prev + 1e-15);
            }
        }
    }

    #[test]
    fn pixels_stay_in_convex_hull_of_colors_and_background() {
        let f = random_field(17, (6, 6, 6));
        let cam = front_camera(8, 8.0);
        let s = RenderSettings::new(32, 1.5, 4.5, [0.9, 0.05, 0.5]).unwrap();
        let img = f.render_view(&cam, &s);
        for y in 0..8 {
            for x in 0..8 {
                let prof = f.ray_profile(&cam, &s, y, x);
                let px = img.get(y, x);
                for c in 0..3 {
                    let mut lo = s.background[c];
                    let mut hi = s.background[c];
                    for (col, w) in prof.colors.iter().zip(&prof.weights) {
                        if *w > 0.0 {
                            lo = lo.min(col[c]);
                            hi = hi.max(col[c]);
                        }
                    }
                    assert!(px[c] >= lo - 1e-12 && px[c] <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn patch_renders_tile_to_the_full_image() {
        let f = random_field(23, (4, 4, 4));
        let cam = front_camera(9, 9.0);
        let s = RenderSettings::new(12, 1.5, 4.5, [0.1, 0.2, 0.3]).unwrap();
        let full = f.render_view(&cam, &s);
        for size in [2, 4, 9] {
            for rect in PatchRect::tile(9, 9, size) {
                let patch = f.render_patch(&cam, &s, &rect);
                for py in 0..rect.height {
                    for px in 0..rect.width {
                        assert_eq!(patch.get(py, px), full.get(rect.y0 + py, rect.x0 + px));
                    }
                }
            }
        }
    }

    #[test]
    fn jitter_is_seed_deterministic() {
        let f = random_field(5, (4, 4, 4));
        let cam = front_camera(6, 6.0);
        let mut s = RenderSettings::new(8, 1.5, 4.5, [0.0; 3]).unwrap();
        s.jitter_seed = Some(42);
        let a = f.render_view(&cam, &s);
        let b = f.render_view(&cam, &s);
        assert_eq!(a, b);
        s.jitter_seed = Some(43);
        let c = f.render_view(&cam, &s);
        assert!(a != c);
    }

    /// Max relative deviation between two gradient vectors, normalized by
    /// the reference's largest entry.
    fn max_rel(analytic: &[f64], reference: &[f64]) -> f64 {
        let scale = reference
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-10);
        analytic
            .iter()
            .zip(reference)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs() / scale))
    }

    fn upstream_probe(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
    }

    fn probe_dot(field: &VoxelField, cam: &Camera, s: &RenderSettings, u: &Image) -> f64 {
        let img = field.render_view(cam, s);
        img.as_slice()
            .iter()
            .zip(u.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn color_gradients_match_finite_differences() {
        let f = random_field(31, (4, 4, 4));
        let cam = front_camera(8, 8.0);
        let s = RenderSettings::new(8, 1.5, 4.5, [0.4, 0.4, 0.4]).unwrap();
        let u = upstream_probe(7, 8, 8);
        let grads = f.render_vjp(&cam, &s, &u);
        let h = 1e-3;
        let mut fd = vec![0.0; f.color_params.len()];
        for i in 0..fd.len() {
            let mut plus = f.clone();
            plus.color_params[i] += h;
            let mut minus = f.clone();
            minus.color_params[i] -= h;
            fd[i] = (probe_dot(&plus, &cam, &s, &u) - probe_dot(&minus, &cam, &s, &u)) / (2.0 * h);
        }
        assert!(max_rel(&grads.color_params, &fd) <= 1e-3);
    }

    #[test]
    fn density_gradients_match_finite_differences() {
        let f = random_field(37, (4, 4, 4));
        let cam = front_camera(8, 8.0);
        let s = RenderSettings::new(8, 1.5, 4.5, [0.4, 0.4, 0.4]).unwrap();
        let u = upstream_probe(9, 8, 8);
        let grads = f.render_vjp(&cam, &s, &u);
        let h = 1e-3;
        let mut fd = vec![0.0; f.density.len()];
        for i in 0..fd.len() {
            let mut plus = f.clone();
            plus.density[i] += h;
            let mut minus = f.clone();
            minus.density[i] -= h;
            fd[i] = (probe_dot(&plus, &cam, &s, &u) - probe_dot(&minus, &cam, &s, &u)) / (2.0 * h);
        }
        assert!(max_rel(&grads.density, &fd) <= 1e-3);
    }

    #[test]
    fn frozen_density_gets_identically_zero_gradients() {
        let mut f = random_field(41, (4, 4, 4));
        f.set_density_frozen(true);
        let cam = front_camera(8, 8.0);
        let s = RenderSettings::new(8, 1.5, 4.5, [0.4, 0.4, 0.4]).unwrap();
        let grads = f.render_vjp(&cam, &s, &upstream_probe(3, 8, 8));
        assert!(grads.density.iter().all(|&g| g == 0.0));
        assert!(grads.color_params.iter().any(|&g| g != 0.0));
    }

    fn two_view_set(field: &VoxelField, size: usize) -> ViewSet {
        let s = RenderSettings::new(12, 1.5, 4.5, [0.7, 0.7, 0.7]).unwrap();
        let cams = vec![
            Camera::look_at(
                [0.4, 0.0, -3.0],
                [0.0; 3],
                [0.0, 1.0, 0.0],
                size as f64,
                size,
                size,
            )
            .unwrap(),
            Camera::look_at(
                [-0.4, 0.2, -3.0],
                [0.0; 3],
                [0.0, 1.0, 0.0],
                size as f64,
                size,
                size,
            )
            .unwrap(),
        ];
        let images = cams.iter().map(|c| field.render_view(c, &s)).collect();
        ViewSet::new(cams, images, s).unwrap()
    }

    #[test]
    fn fit_at_the_generating_field_starts_at_zero_loss() {
        let f = random_field(51, (4, 4, 4));
        let views = two_view_set(&f, 8);
        let cfg = FitConfig {
            iters: 1,
            ..FitConfig::default()
        };
        let (_, report) = fit_photoreal(&f, &views, &cfg).unwrap();
        assert_eq!(report.losses[0], 0.0);
    }

    #[test]
    fn fit_with_frozen_density_recovers_slab_colors() {
        // Opaque slab facing the cameras; ground truth is a constant color.
        // With density frozen the color fit is effectively convex.
        let mut gt = VoxelField::new((4, 4, 4), [-1.0; 3], [1.0, 1.0, 1.0]).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                for z in 0..4 {
                    gt.set_density(x, y, z, if z == 1 { 200.0 } else { 0.0 });
                    gt.set_color_rgb(x, y, z, [0.3, 0.6, 0.9]);
                }
            }
        }
        let views = two_view_set(&gt, 12);
        let mut init = gt.clone();
        for z in 0..4 {
            for y in 0..4 {
                for x in 0..4 {
                    init.set_color_rgb(x, y, z, [0.5, 0.5, 0.5]);
                }
            }
        }
        init.set_density_frozen(true);
        let cfg = FitConfig {
            iters: 400,
            lr: 0.08,
            seed: 1,
        };
        let (fitted, _) = fit_photoreal(&init, &views, &cfg).unwrap();
        assert_eq!(fitted.density_grid(), gt.density_grid());
        let mut err = 0.0;
        let mut n = 0.0;
        for (cam, img) in views.cameras.iter().zip(&views.images) {
            let r = fitted.render_view(cam, &views.settings);
            for (a, b) in r.as_slice().iter().zip(img.as_slice()) {
                err += (a - b).abs();
                n += 1.0;
            }
        }
        assert!(err / n <= 2.0 / 255.0, "mean abs error {}", err / n);
    }
}
