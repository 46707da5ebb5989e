//! Scene bundles, checkpoints, synthetic scenes, and render paths.
//!
//! Everything that crosses the filesystem boundary lives here. Images are
//! lossless 8-bit PNG; grids cross as little-endian `f32`; metadata is
//! plain structured text, so every format can be inspected — and fixed —
//! with a text editor and a hex dump.
//!
//! A *scene bundle* is a directory:
//!
//! ```text
//! scene/
//!   cameras.txt            capture kind, ray bounds, per-view poses
//!   images/view_000.png    8-bit RGB views, lexicographic order
//!   masks/<region>/view_000.png
//!                          optional binary region masks (0 or 255)
//!   field.ckpt             optional ground-truth field
//! ```
//!
//! The synthetic generator packs a few colored opaque primitives into a
//! field, renders posed views along an arc (or a full orbit), and derives
//! one mask region per primitive by exact first-hit ray attribution — so
//! masks are binary, pairwise disjoint, and agree with the geometry the
//! renderer integrates. Stored views are the quantized renders of the
//! ground-truth field: re-rendering and quantizing reproduces the files
//! bit-for-bit, which downstream tests lean on.

use crate::error::{Error, Result};
use crate::eval::MetricsRecord;
use crate::field::{Camera, RenderSettings, SceneKind, ViewSet, VoxelField};
use crate::image::{Image, Plane};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

/// The canonical synthetic-scene frame: primitives live in a unit-ish box
/// ahead of the cameras, centered here.
const SCENE_CENTER: [f64; 3] = [0.0, 0.0, 2.0];
const FIELD_BBOX_MIN: [f64; 3] = [-1.0, -1.0, 1.0];
const FIELD_BBOX_MAX: [f64; 3] = [1.0, 1.0, 3.0];
const PRIMITIVE_DENSITY: f64 = 40.0;

// ---------------------------------------------------------------------------
// 8-bit image files

/// Rounds each channel to the nearest 8-bit level, exactly as PNG storage
/// does, so an in-memory image can be compared against a saved-and-loaded
/// one.
pub fn quantize_to_8bit(x: &Image) -> Image {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an RGB image as 8-bit PNG.
pub fn write_image_png(path: impl AsRef<Path>, x: &Image) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::RgbImage::new(x.width() as u32, x.height() as u32);
    for y in 0..x.height() {
        for xx in 0..x.width() {
            let [r, g, b] = x.get(y, xx);
            buf.put_pixel(xx as u32, y as u32, image::Rgb([to_u8(r), to_u8(g), to_u8(b)]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::codec(path, e))
}

/// Reads an 8-bit PNG into unit-range floats.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::codec(path, e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Image::from_fn(h, w, |y, x| {
        let p = img.get_pixel(x as u32, y as u32);
        [
            p[0] as f64 / 255.0,
            p[1] as f64 / 255.0,
            p[2] as f64 / 255.0,
        ]
    }))
}

/// Writes a binary mask as an 8-bit grayscale PNG with values 0 and 255.
pub fn write_mask_png(path: impl AsRef<Path>, m: &Plane) -> Result<()> {
    let path = path.as_ref();
    let mut buf = image::GrayImage::new(m.width() as u32, m.height() as u32);
    for y in 0..m.height() {
        for x in 0..m.width() {
            let v = if m.get(y, x) == 1.0 { 255 } else { 0 };
            buf.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::codec(path, e))
}

/// Reads a mask PNG; every pixel must be exactly 0 or 255.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Plane> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::codec(path, e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut plane = Plane::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            match img.get_pixel(x as u32, y as u32)[0] {
                0 => {}
                255 => plane.set(y, x, 1.0),
                v => {
                    return Err(Error::Validation(format!(
                        "mask {} has non-binary pixel value {v} at ({y}, {x})",
                        path.display()
                    )))
                }
            }
        }
    }
    Ok(plane)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &str = "voxstyle-checkpoint 1";

/// Saves a field as a text header plus two little-endian `f32` grids
/// (density, then color parameters).
pub fn save_checkpoint(field: &VoxelField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let (nx, ny, nz) = field.resolution();
    writeln!(w, "{CHECKPOINT_MAGIC}").map_err(io_err)?;
    writeln!(w, "resolution {nx} {ny} {nz}").map_err(io_err)?;
    let [ax, ay, az] = field.bbox_min();
    writeln!(w, "bbox-min {ax} {ay} {az}").map_err(io_err)?;
    let [bx, by, bz] = field.bbox_max();
    writeln!(w, "bbox-max {bx} {by} {bz}").map_err(io_err)?;
    writeln!(w, "density-frozen {}", field.density_frozen()).map_err(io_err)?;
    writeln!(w, "end-header").map_err(io_err)?;
    for &v in field.density_grid() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    for &v in field.color_param_grid() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Saving the loaded
/// field again produces a byte-identical file.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<VoxelField> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut line = String::new();
    let next_line = |r: &mut BufReader<fs::File>, line: &mut String| -> Result<String> {
        line.clear();
        r.read_line(line).map_err(|e| Error::io(path, e))?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut r, &mut line)? != CHECKPOINT_MAGIC {
        return Err(bad(format!("expected magic line '{CHECKPOINT_MAGIC}'")));
    }
    let mut resolution = None;
    let mut bbox_min = None;
    let mut bbox_max = None;
    let mut frozen = None;
    loop {
        let l = next_line(&mut r, &mut line)?;
        if l == "end-header" {
            break;
        }
        let (key, rest) = l
            .split_once(' ')
            .ok_or_else(|| bad(format!("unparseable header line '{l}'")))?;
        match key {
            "resolution" => {
                let v = parse_numbers::<usize>(rest, 3).map_err(&bad)?;
                resolution = Some((v[0], v[1], v[2]));
            }
            "bbox-min" => {
                let v = parse_numbers::<f64>(rest, 3).map_err(&bad)?;
                bbox_min = Some([v[0], v[1], v[2]]);
            }
            "bbox-max" => {
                let v = parse_numbers::<f64>(rest, 3).map_err(&bad)?;
                bbox_max = Some([v[0], v[1], v[2]]);
            }
            "density-frozen" => {
                frozen = Some(rest.parse::<bool>().map_err(|_| {
                    bad(format!("density-frozen must be true or false, got '{rest}'"))
                })?);
            }
            other => return Err(bad(format!("unknown header key '{other}'"))),
        }
    }
    let resolution = resolution.ok_or_else(|| bad("missing 'resolution' line".into()))?;
    let bbox_min = bbox_min.ok_or_else(|| bad("missing 'bbox-min' line".into()))?;
    let bbox_max = bbox_max.ok_or_else(|| bad("missing 'bbox-max' line".into()))?;
    let frozen = frozen.ok_or_else(|| bad("missing 'density-frozen' line".into()))?;
    let n = resolution.0 * resolution.1 * resolution.2;
    let density = read_f32_grid(&mut r, n, path)?;
    let colors = read_f32_grid(&mut r, n * 3, path)?;
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
        return Err(bad("trailing data after declared grids".into()));
    }
    VoxelField::from_grids(resolution, bbox_min, bbox_max, density, colors, frozen)
}

fn read_f32_grid(r: &mut impl Read, count: usize, path: &Path) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 4];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                path: path.to_path_buf(),
                reason: format!("truncated grid: expected {count} f32 values"),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn parse_numbers<T: std::str::FromStr>(s: &str, want: usize) -> std::result::Result<Vec<T>, String> {
    let vals: std::result::Result<Vec<T>, _> =
        s.split_whitespace().map(|t| t.parse::<T>()).collect();
    match vals {
        Ok(v) if v.len() == want => Ok(v),
        Ok(v) => Err(format!("expected {want} numbers, got {}", v.len())),
        Err(_) => Err(format!("unparseable numbers in '{s}'")),
    }
}

// ---------------------------------------------------------------------------
// Scene bundles

/// A posed multi-view capture with optional region masks and an optional
/// ground-truth field.
#[derive(Debug, Clone)]
pub struct SceneBundle {
    pub kind: SceneKind,
    /// View names in lexicographic order; file stems under `images/`.
    pub view_names: Vec<String>,
    pub cameras: Vec<Camera>,
    /// 8-bit-quantized view images.
    pub images: Vec<Image>,
    /// Region name → one binary mask per view.
    pub masks: BTreeMap<String, Vec<Plane>>,
    /// Ray-march settings the views were (or should be) rendered with.
    pub settings: RenderSettings,
    pub gt_field: Option<VoxelField>,
}

impl SceneBundle {
    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.len() != self.images.len() {
            return Err(Error::Validation(format!(
                "{} cameras but {} images",
                self.cameras.len(),
                self.images.len()
            )));
        }
        if self.view_names.len() != self.cameras.len() {
            return Err(Error::Validation(format!(
                "{} view names but {} cameras",
                self.view_names.len(),
                self.cameras.len()
            )));
        }
        if self.cameras.is_empty() {
            return Err(Error::Validation("a scene needs at least one view".into()));
        }
        let mut sorted = self.view_names.clone();
        sorted.sort();
        if sorted != self.view_names {
            return Err(Error::Validation(
                "view names must be in lexicographic order".into(),
            ));
        }
        for name in &self.view_names {
            if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Validation(format!(
                    "view name '{name}' is not filesystem-safe"
                )));
            }
        }
        for region in self.masks.keys() {
            if region.is_empty()
                || !region.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Validation(format!(
                    "region name '{region}' is not filesystem-safe"
                )));
            }
        }
        // Camera/image/mask dimension agreement is ViewSet's check.
        self.view_set()?;
        Ok(())
    }

    /// The training-facing view of the bundle.
    pub fn view_set(&self) -> Result<ViewSet> {
        let mut set = ViewSet::new(
            self.cameras.clone(),
            self.images.clone(),
            self.settings.clone(),
        )?;
        set.masks = self.masks.clone();
        set.validate()?;
        Ok(set)
    }

    /// Writes the bundle as a scene directory.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.validate()?;
        let images_dir = dir.join("images");
        fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        write_camera_file(dir.join("cameras.txt"), self)?;
        for (name, img) in self.view_names.iter().zip(&self.images) {
            write_image_png(images_dir.join(format!("{name}.png")), img)?;
        }
        for (region, planes) in &self.masks {
            let region_dir = dir.join("masks").join(region);
            fs::create_dir_all(&region_dir).map_err(|e| Error::io(&region_dir, e))?;
            for (name, m) in self.view_names.iter().zip(planes) {
                write_mask_png(region_dir.join(format!("{name}.png")), m)?;
            }
        }
        if let Some(field) = &self.gt_field {
            save_checkpoint(field, dir.join("field.ckpt"))?;
        }
        Ok(())
    }

    /// Reads a scene directory written by [`SceneBundle::save`] (or laid
    /// out by hand to the same scheme).
    pub fn load(dir: impl AsRef<Path>) -> Result<SceneBundle> {
        let dir = dir.as_ref();
        let header = read_camera_file(dir.join("cameras.txt"))?;
        let images_dir = dir.join("images");
        let mut stems: Vec<String> = Vec::new();
        let entries = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&images_dir, e))?;
            let path = entry.path();
            if path.extension().and_then(|s| s.to_str()) == Some("png") {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    stems.push(stem.to_string());
                }
            }
        }
        stems.sort();
        if stems.len() != header.cameras.len() {
            return Err(Error::Validation(format!(
                "{} cameras in cameras.txt but {} images on disk",
                header.cameras.len(),
                stems.len()
            )));
        }
        if stems != header.view_names {
            return Err(Error::Validation(
                "image file names do not match the views in cameras.txt".into(),
            ));
        }
        let images = stems
            .iter()
            .map(|s| read_image_png(images_dir.join(format!("{s}.png"))))
            .collect::<Result<Vec<_>>>()?;
        let mut masks = BTreeMap::new();
        let masks_dir = dir.join("masks");
        if masks_dir.is_dir() {
            let entries = fs::read_dir(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&masks_dir, e))?;
                if !entry.path().is_dir() {
                    continue;
                }
                let region = entry
                    .file_name()
                    .into_string()
                    .map_err(|_| Error::Validation("region directory name is not UTF-8".into()))?;
                let region_dir = entry.path();
                // Every mask file must pair with an existing view.
                let listing = fs::read_dir(&region_dir).map_err(|e| Error::io(&region_dir, e))?;
                for f in listing {
                    let f = f.map_err(|e| Error::io(&region_dir, e))?;
                    if let Some(stem) = f.path().file_stem().and_then(|s| s.to_str()) {
                        if !stems.iter().any(|s| s == stem) {
                            return Err(Error::Validation(format!(
                                "mask '{region}/{stem}' pairs with no view image"
                            )));
                        }
                    }
                }
                let planes = stems
                    .iter()
                    .map(|s| {
                        let p = region_dir.join(format!("{s}.png"));
                        if !p.is_file() {
                            return Err(Error::Validation(format!(
                                "region '{region}' is missing a mask for view '{s}'"
                            )));
                        }
                        read_mask_png(p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                masks.insert(region, planes);
            }
        }
        let ckpt = dir.join("field.ckpt");
        let gt_field = if ckpt.is_file() {
            Some(load_checkpoint(ckpt)?)
        } else {
            None
        };
        let bundle = SceneBundle {
            kind: header.kind,
            view_names: stems,
            cameras: header.cameras,
            images,
            masks,
            settings: header.settings,
            gt_field,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

// ---------------------------------------------------------------------------
// Camera file

const CAMERA_MAGIC: &str = "voxstyle-cameras 1";

#[derive(Debug)]
struct CameraFile {
    kind: SceneKind,
    settings: RenderSettings,
    view_names: Vec<String>,
    cameras: Vec<Camera>,
}

fn write_camera_file(path: impl AsRef<Path>, bundle: &SceneBundle) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    let s = &bundle.settings;
    writeln!(w, "{CAMERA_MAGIC}").map_err(io_err)?;
    writeln!(w, "kind {}", bundle.kind.name()).map_err(io_err)?;
    writeln!(w, "near {}", s.near).map_err(io_err)?;
    writeln!(w, "far {}", s.far).map_err(io_err)?;
    writeln!(w, "samples {}", s.samples_per_ray).map_err(io_err)?;
    let [r, g, b] = s.background;
    writeln!(w, "background {r} {g} {b}").map_err(io_err)?;
    writeln!(w, "views {}", bundle.cameras.len()).map_err(io_err)?;
    for (name, cam) in bundle.view_names.iter().zip(&bundle.cameras) {
        writeln!(w, "view {name}").map_err(io_err)?;
        writeln!(w, "size {} {}", cam.width(), cam.height()).map_err(io_err)?;
        let (fx, fy, cx, cy) = cam.intrinsics();
        writeln!(w, "intrinsics {fx} {fy} {cx} {cy}").map_err(io_err)?;
        let rot = cam.rotation();
        let pos = cam.position();
        for i in 0..3 {
            writeln!(
                w,
                "pose {} {} {} {}",
                rot[(i, 0)],
                rot[(i, 1)],
                rot[(i, 2)],
                pos[i]
            )
            .map_err(io_err)?;
        }
        writeln!(w, "pose 0 0 0 1").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_camera_file(path: impl AsRef<Path>) -> Result<CameraFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some(CAMERA_MAGIC) {
        return Err(bad(format!("expected magic line '{CAMERA_MAGIC}'")));
    }
    let mut kind = None;
    let mut near = None;
    let mut far = None;
    let mut samples = 32usize;
    let mut background = [1.0, 1.0, 1.0];
    let mut n_views = None;
    for line in lines.by_ref() {
        let (key, rest) = line
            .split_once(' ')
            .ok_or_else(|| bad(format!("unparseable header line '{line}'")))?;
        match key {
            "kind" => kind = Some(SceneKind::parse(rest)?),
            "near" => near = Some(parse_numbers::<f64>(rest, 1).map_err(&bad)?[0]),
            "far" => far = Some(parse_numbers::<f64>(rest, 1).map_err(&bad)?[0]),
            "samples" => samples = parse_numbers::<usize>(rest, 1).map_err(&bad)?[0],
            "background" => {
                let v = parse_numbers::<f64>(rest, 3).map_err(&bad)?;
                background = [v[0], v[1], v[2]];
            }
            "views" => {
                n_views = Some(parse_numbers::<usize>(rest, 1).map_err(&bad)?[0]);
                break;
            }
            other => return Err(bad(format!("unknown header key '{other}'"))),
        }
    }
    let kind = kind.ok_or_else(|| bad("missing 'kind' line".into()))?;
    let near = near.ok_or_else(|| bad("missing 'near' line".into()))?;
    let far = far.ok_or_else(|| bad("missing 'far' line".into()))?;
    let n_views = n_views.ok_or_else(|| bad("missing 'views' line".into()))?;
    let settings = RenderSettings::new(samples, near, far, background)?;

    let mut view_names = Vec::with_capacity(n_views);
    let mut cameras = Vec::with_capacity(n_views);
    for v in 0..n_views {
        let shortfall = || bad(format!("camera list ends early at view {v}"));
        let name_line = lines.next().ok_or_else(shortfall)?;
        let name = name_line
            .strip_prefix("view ")
            .ok_or_else(|| bad(format!("expected 'view <name>', got '{name_line}'")))?
            .to_string();
        let size_line = lines.next().ok_or_else(shortfall)?;
        let size = parse_numbers::<usize>(
            size_line
                .strip_prefix("size ")
                .ok_or_else(|| bad(format!("expected 'size', got '{size_line}'")))?,
            2,
        )
        .map_err(&bad)?;
        let intr_line = lines.next().ok_or_else(shortfall)?;
        let intr = parse_numbers::<f64>(
            intr_line
                .strip_prefix("intrinsics ")
                .ok_or_else(|| bad(format!("expected 'intrinsics', got '{intr_line}'")))?,
            4,
        )
        .map_err(&bad)?;
        let mut rows = Vec::with_capacity(4);
        for _ in 0..4 {
            let pose_line = lines.next().ok_or_else(shortfall)?;
            rows.push(
                parse_numbers::<f64>(
                    pose_line
                        .strip_prefix("pose ")
                        .ok_or_else(|| bad(format!("expected 'pose', got '{pose_line}'")))?,
                    4,
                )
                .map_err(&bad)?,
            );
        }
        if rows[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(bad(format!(
                "view {name}: the last pose row must be '0 0 0 1'"
            )));
        }
        let rotation = Matrix3::new(
            rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
            rows[2][1], rows[2][2],
        );
        let position = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
        view_names.push(name);
        cameras.push(Camera::new(
            intr[0], intr[1], intr[2], intr[3], size[0], size[1], rotation, position,
        )?);
    }
    if lines.next().is_some() {
        return Err(bad("trailing lines after the declared views".into()));
    }
    Ok(CameraFile {
        kind,
        settings,
        view_names,
        cameras,
    })
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Parameters of the synthetic generator.
#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub resolution: (usize, usize, usize),
    pub n_views: usize,
    pub image_size: usize,
    pub kind: SceneKind,
    pub samples_per_ray: usize,
}

impl SyntheticSpec {
    pub fn new(seed: u64) -> Self {
        SyntheticSpec {
            seed,
            resolution: (24, 24, 24),
            n_views: 8,
            image_size: 48,
            kind: SceneKind::ForwardFacing,
            samples_per_ray: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 4 {
            return Err(Error::Config(format!(
                "a synthetic scene needs at least 4 views, got {}",
                self.n_views
            )));
        }
        let (nx, ny, nz) = self.resolution;
        if nx < 2 || ny < 2 || nz < 2 || self.image_size < 16 || self.samples_per_ray < 4 {
            return Err(Error::Config(
                "synthetic resolution, image size, or sample count is too small".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Primitive {
    Sphere { center: [f64; 3], radius: f64 },
    Cuboid { center: [f64; 3], half: [f64; 3] },
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Primitive::Sphere { center, radius } => {
                let d2 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum::<f64>();
                d2 <= radius * radius
            }
            Primitive::Cuboid { center, half } => {
                (0..3).all(|a| (p[a] - center[a]).abs() <= half[a])
            }
        }
    }

    /// Nearest intersection distance of the unit-direction ray, if any.
    fn first_hit(&self, origin: [f64; 3], dir: [f64; 3]) -> Option<f64> {
        match self {
            Primitive::Sphere { center, radius } => {
                let oc: Vec<f64> = (0..3).map(|a| center[a] - origin[a]).collect();
                let b = oc[0] * dir[0] + oc[1] * dir[1] + oc[2] * dir[2];
                let disc = b * b - (oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2])
                    + radius * radius;
                if disc < 0.0 {
                    return None;
                }
                let t = b - disc.sqrt();
                (t > 0.0).then_some(t)
            }
            Primitive::Cuboid { center, half } => {
                let mut t_enter = f64::NEG_INFINITY;
                let mut t_exit = f64::INFINITY;
                for a in 0..3 {
                    let lo = center[a] - half[a];
                    let hi = center[a] + half[a];
                    if dir[a].abs() < 1e-12 {
                        if origin[a] < lo || origin[a] > hi {
                            return None;
                        }
                        continue;
                    }
                    let t0 = (lo - origin[a]) / dir[a];
                    let t1 = (hi - origin[a]) / dir[a];
                    t_enter = t_enter.max(t0.min(t1));
                    t_exit = t_exit.min(t0.max(t1));
                }
                (t_enter <= t_exit && t_enter > 0.0).then_some(t_enter)
            }
        }
    }

    fn shape_name(&self) -> &'static str {
        match self {
            Primitive::Sphere { .. } => "sphere",
            Primitive::Cuboid { .. } => "cuboid",
        }
    }
}

fn synthetic_cameras(kind: SceneKind, n: usize, image_size: usize) -> Result<Vec<Camera>> {
    let focal = image_size as f64;
    (0..n)
        .map(|i| {
            let t = match kind {
                SceneKind::ForwardFacing => {
                    if n == 1 {
                        0.5
                    } else {
                        i as f64 / (n - 1) as f64
                    }
                }
                SceneKind::Orbit => i as f64 / n as f64,
            };
            trajectory_camera(kind, t, image_size, image_size, focal)
        })
        .collect()
}

/// The camera at parameter `t` in `[0, 1]` of the canonical trajectory:
/// a lateral arc ahead of the scene for forward-facing captures, a full
/// circle around it for orbits. Both look at the scene center.
fn trajectory_camera(
    kind: SceneKind,
    t: f64,
    width: usize,
    height: usize,
    focal: f64,
) -> Result<Camera> {
    let position = match kind {
        SceneKind::ForwardFacing => [(t - 0.5) * 1.1, -0.05, -1.1],
        SceneKind::Orbit => {
            let theta = std::f64::consts::TAU * t;
            [
                SCENE_CENTER[0] + 2.6 * theta.sin(),
                -0.45,
                SCENE_CENTER[2] - 2.6 * theta.cos(),
            ]
        }
    };
    Camera::look_at(position, SCENE_CENTER, [0.0, -1.0, 0.0], focal, width, height)
}

fn synthetic_settings(kind: SceneKind, samples_per_ray: usize) -> Result<RenderSettings> {
    let (near, far) = match kind {
        SceneKind::ForwardFacing => (1.6, 4.6),
        SceneKind::Orbit => (0.8, 4.5),
    };
    RenderSettings::new(samples_per_ray, near, far, [0.94, 0.94, 0.97])
}

/// Builds a deterministic synthetic scene: 2–3 colored opaque primitives
/// in an otherwise empty field, posed views of it, and one binary mask
/// region per primitive from exact first-hit ray attribution (so region
/// masks are pairwise disjoint by construction). Each mask covers at
/// least 1% of every view; the stored images are the quantized renders of
/// the returned ground-truth field.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SceneBundle> {
    spec.validate()?;
    let settings = synthetic_settings(spec.kind, spec.samples_per_ray)?;
    let cameras = synthetic_cameras(spec.kind, spec.n_views, spec.image_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x73796e_u64);

    // Re-jitter until every region clears the per-view coverage floor;
    // each attempt is a deterministic function of the seed.
    let mut primitives = None;
    for _attempt in 0..64 {
        let candidate = sample_primitives(&mut rng);
        if coverage_ok(&candidate, &cameras, &settings) {
            primitives = Some(candidate);
            break;
        }
    }
    let primitives = primitives.ok_or_else(|| {
        Error::Validation("could not place primitives with 1% mask coverage per view".into())
    })?;

    // Voxelize. Parameters are snapped to f32 so the field survives a
    // checkpoint round trip bit-identically.
    let mut field = VoxelField::new(spec.resolution, FIELD_BBOX_MIN, FIELD_BBOX_MAX)?;
    let (nx, ny, nz) = spec.resolution;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = field.node_position(x, y, z);
                if let Some((prim, color)) = primitives.iter().find(|(pr, _)| pr.contains(p)) {
                    let _ = prim;
                    field.set_density(x, y, z, PRIMITIVE_DENSITY as f32 as f64);
                    field.set_color_rgb(x, y, z, *color);
                }
            }
        }
    }
    snap_field_to_f32(&mut field);

    let images: Vec<Image> = cameras
        .iter()
        .map(|cam| quantize_to_8bit(&field.render_view(cam, &settings)))
        .collect();

    let mut masks = BTreeMap::new();
    for (k, (prim, _)) in primitives.iter().enumerate() {
        let planes: Vec<Plane> = cameras
            .iter()
            .map(|cam| attribution_mask(&primitives, k, cam, &settings))
            .collect();
        masks.insert(format!("{}-{k}", prim.shape_name()), planes);
    }

    let view_names = (0..spec.n_views).map(|i| format!("view_{i:03}")).collect();
    let bundle = SceneBundle {
        kind: spec.kind,
        view_names,
        cameras,
        images,
        masks,
        settings,
        gt_field: Some(field),
    };
    bundle.validate()?;
    Ok(bundle)
}

fn sample_primitives(rng: &mut ChaCha8Rng) -> Vec<(Primitive, [f64; 3])> {
    fn j(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen::<f64>() * 0.1 - 0.05
    }
    fn jitter_point(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
        [base[0] + j(rng), base[1] + j(rng), base[2] + j(rng)]
    }
    fn jitter_color(rng: &mut ChaCha8Rng, base: [f64; 3]) -> [f64; 3] {
        [
            (base[0] + j(rng)).clamp(0.05, 0.95),
            (base[1] + j(rng)).clamp(0.05, 0.95),
            (base[2] + j(rng)).clamp(0.05, 0.95),
        ]
    }
    let sphere_a = (
        Primitive::Sphere {
            center: jitter_point(rng, [-0.45, -0.32, 1.75]),
            radius: 0.38,
        },
        jitter_color(rng, [0.85, 0.16, 0.12]),
    );
    let sphere_b = (
        Primitive::Sphere {
            center: jitter_point(rng, [0.50, 0.30, 2.35]),
            radius: 0.42,
        },
        jitter_color(rng, [0.15, 0.32, 0.85]),
    );
    let cuboid = (
        Primitive::Cuboid {
            center: jitter_point(rng, [0.05, -0.05, 2.70]),
            half: [0.30, 0.24, 0.28],
        },
        jitter_color(rng, [0.18, 0.78, 0.25]),
    );
    if rng.gen::<f64>() < 0.5 {
        vec![sphere_a, sphere_b]
    } else {
        vec![sphere_a, sphere_b, cuboid]
    }
}

/// The pixels whose rays hit primitive `k` before any other.
fn attribution_mask(
    primitives: &[(Primitive, [f64; 3])],
    k: usize,
    cam: &Camera,
    settings: &RenderSettings,
) -> Plane {
    Plane::from_fn(cam.height(), cam.width(), |y, x| {
        let (origin, dir) = cam.ray(y, x);
        let mut best: Option<(usize, f64)> = None;
        for (i, (prim, _)) in primitives.iter().enumerate() {
            if let Some(t) = prim.first_hit(origin, dir) {
                if t >= settings.near && t <= settings.far && best.map_or(true, |(_, bt)| t < bt) {
                    best = Some((i, t));
                }
            }
        }
        (best.map(|(i, _)| i) == Some(k)) as u8 as f64
    })
}

fn coverage_ok(
    primitives: &[(Primitive, [f64; 3])],
    cameras: &[Camera],
    settings: &RenderSettings,
) -> bool {
    for cam in cameras {
        let floor = (cam.height() * cam.width()) as f64 * 0.01;
        for k in 0..primitives.len() {
            let mask = attribution_mask(primitives, k, cam, settings);
            if mask.as_slice().iter().sum::<f64>() < floor {
                return false;
            }
        }
    }
    true
}

fn snap_field_to_f32(field: &mut VoxelField) {
    let (nx, ny, nz) = field.resolution();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let d = field.density_at(x, y, z);
                field.set_density(x, y, z, d as f32 as f64);
            }
        }
    }
    for v in field.color_param_grid_mut() {
        *v = *v as f32 as f64;
    }
}

// ---------------------------------------------------------------------------
// Render paths

/// A novel-view trajectory: `n` poses along the canonical arc or orbit,
/// rendered with the template camera's intrinsics.
#[derive(Debug, Clone)]
pub struct PathSpec {
    pub kind: SceneKind,
    pub n: usize,
    pub template: Camera,
    pub settings: RenderSettings,
}

impl PathSpec {
    /// `n` defaults to the capture kind's evaluation count (120 for a
    /// frontal arc, 200 for an orbit).
    pub fn new(kind: SceneKind, template: Camera, settings: RenderSettings) -> Self {
        PathSpec {
            kind,
            n: kind.default_eval_views(),
            template,
            settings,
        }
    }

    pub fn with_views(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    /// The trajectory cameras, matching the synthetic capture poses when
    /// `n` equals the capture's view count.
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        if self.n == 0 {
            return Err(Error::Config("a render path needs at least one view".into()));
        }
        let (fx, _, _, _) = self.template.intrinsics();
        (0..self.n)
            .map(|i| {
                let t = match self.kind {
                    SceneKind::ForwardFacing => {
                        if self.n == 1 {
                            0.5
                        } else {
                            i as f64 / (self.n - 1) as f64
                        }
                    }
                    SceneKind::Orbit => i as f64 / self.n as f64,
                };
                trajectory_camera(
                    self.kind,
                    t,
                    self.template.width(),
                    self.template.height(),
                    fx,
                )
            })
            .collect()
    }
}

/// Renders the trajectory into `out_dir` as `frame_000.png`, ... and
/// returns the written paths. Deterministic: repeated invocations write
/// identical frames.
pub fn render_path(
    field: &VoxelField,
    spec: &PathSpec,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let cameras = spec.cameras()?;
    let mut paths = Vec::with_capacity(cameras.len());
    for (i, cam) in cameras.iter().enumerate() {
        let frame = field.render_view(cam, &spec.settings);
        let path = out_dir.join(format!("frame_{i:03}.png"));
        write_image_png(&path, &frame)?;
        paths.push(path);
    }
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Run manifests and metric reports

/// The reproducibility record written into a run directory before any
/// optimization starts. With the deterministic backends, config plus seed
/// fully determine the outputs.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunManifest {
    /// The subcommand that produced the run.
    pub command: String,
    /// Scene path or name.
    pub scene: String,
    /// Flattened configuration snapshot.
    pub config: String,
    pub seed: u64,
    /// Crate version that wrote the run.
    pub version: String,
    /// Unix seconds at run start.
    pub created_unix: u64,
    /// Output locations, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(
        command: impl Into<String>,
        scene: impl Into<String>,
        config: impl Into<String>,
        seed: u64,
    ) -> Self {
        RunManifest {
            command: command.into(),
            scene: scene.into(),
            config: config.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_unix: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            outputs: Vec::new(),
        }
    }

    /// Writes `manifest.toml` into the run directory. A manifest is
    /// immutable: writing over an existing one is an error.
    pub fn save(&self, run_dir: impl AsRef<Path>) -> Result<PathBuf> {
        let run_dir = run_dir.as_ref();
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join("manifest.toml");
        if path.exists() {
            return Err(Error::Validation(format!(
                "{} already holds a manifest; runs are write-once",
                run_dir.display()
            )));
        }
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(run_dir: impl AsRef<Path>) -> Result<RunManifest> {
        let path = run_dir.as_ref().join("manifest.toml");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path,
            reason: format!("bad manifest: {e}"),
        })
    }
}

/// Appends one metrics record to a JSON-lines report.
pub fn append_metrics_record(path: impl AsRef<Path>, record: &MetricsRecord) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(file, "{}", record.to_json_line()).map_err(|e| Error::io(path, e))
}

/// Reads every record of a JSON-lines report.
pub fn read_metrics_report(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(MetricsRecord::from_json_line)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::EvalSummary;
    use rand::Rng;
    use tempfile::tempdir;

    fn small_spec(seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            seed,
            resolution: (16, 16, 16),
            n_views: 5,
            image_size: 32,
            kind: SceneKind::ForwardFacing,
            samples_per_ray: 24,
        }
    }

    #[test]
    fn image_png_roundtrip_preserves_quantized_values() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Image::from_fn(9, 13, |_, _| [rng.gen(), rng.gen(), rng.gen()]);
        let path = dir.path().join("x.png");
        write_image_png(&path, &img).unwrap();
        let back = read_image_png(&path).unwrap();
        assert_eq!(back.as_slice(), quantize_to_8bit(&img).as_slice());
    }

    #[test]
    fn mask_png_roundtrip_and_binary_enforcement() {
        let dir = tempdir().unwrap();
        let mask = Plane::from_fn(7, 5, |y, x| ((y + x) % 3 == 0) as u8 as f64);
        let path = dir.path().join("m.png");
        write_mask_png(&path, &mask).unwrap();
        assert_eq!(read_mask_png(&path).unwrap().as_slice(), mask.as_slice());

        // A gray pixel must be rejected.
        let mut gray = image::GrayImage::new(4, 4);
        gray.put_pixel(2, 1, image::Luma([128]));
        let bad_path = dir.path().join("bad.png");
        gray.save_with_format(&bad_path, image::ImageFormat::Png)
            .unwrap();
        match read_mask_png(&bad_path) {
            Err(Error::Validation(msg)) => assert!(msg.contains("128"), "got: {msg}"),
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut field = VoxelField::new((5, 4, 3), [-1.0, -1.0, 1.0], [1.0, 1.0, 3.0]).unwrap();
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    field.set_density(x, y, z, rng.gen::<f64>() * 10.0);
                    field.set_color_rgb(x, y, z, [rng.gen(), rng.gen(), rng.gen()]);
                }
            }
        }
        field.set_density_frozen(true);
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&field, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        save_checkpoint(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert!(loaded.density_frozen());
        assert_eq!(loaded.resolution(), (5, 4, 3));
    }

    #[test]
    fn checkpoint_rejects_malformed_files() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.ckpt");
        fs::write(&p, b"not a checkpoint\n").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format { .. })));

        // Truncated payload.
        let field = VoxelField::new((3, 3, 3), [-1.0, -1.0, 1.0], [1.0, 1.0, 3.0]).unwrap();
        let good = dir.path().join("good.ckpt");
        save_checkpoint(&field, &good).unwrap();
        let bytes = fs::read(&good).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &bytes[..bytes.len() - 5]).unwrap();
        match load_checkpoint(&cut) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("truncated")),
            other => panic!("expected a format error, got {other:?}"),
        }
        // Trailing garbage.
        let mut padded = bytes.clone();
        padded.push(0);
        let pad = dir.path().join("pad.ckpt");
        fs::write(&pad, &padded).unwrap();
        match load_checkpoint(&pad) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("trailing")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_scenes_are_seed_deterministic() {
        let a = make_synthetic(&small_spec(11)).unwrap();
        let b = make_synthetic(&small_spec(11)).unwrap();
        assert_eq!(a.view_names, b.view_names);
        assert_eq!(a.cameras, b.cameras);
        for (x, y) in a.images.iter().zip(&b.images) {
            assert_eq!(x.as_slice(), y.as_slice());
        }
        assert_eq!(a.masks.keys().collect::<Vec<_>>(), b.masks.keys().collect::<Vec<_>>());
        for (r, planes) in &a.masks {
            for (x, y) in planes.iter().zip(&b.masks[r]) {
                assert_eq!(x.as_slice(), y.as_slice());
            }
        }
        let fa = a.gt_field.as_ref().unwrap();
        let fb = b.gt_field.as_ref().unwrap();
        assert_eq!(fa.density_grid(), fb.density_grid());
        assert_eq!(fa.color_param_grid(), fb.color_param_grid());

        // A different seed moves the primitives.
        let c = make_synthetic(&small_spec(12)).unwrap();
        assert_ne!(
            a.gt_field.as_ref().unwrap().density_grid(),
            c.gt_field.as_ref().unwrap().density_grid()
        );
    }

    #[test]
    fn synthetic_masks_are_binary_disjoint_and_cover_one_percent() {
        for seed in [11, 21, 31] {
            let bundle = make_synthetic(&small_spec(seed)).unwrap();
            for v in 0..bundle.len() {
                let mut owners = Plane::zeros(32, 32);
                for planes in bundle.masks.values() {
                    let m = &planes[v];
                    let coverage: f64 = m.as_slice().iter().sum();
                    assert!(
                        coverage >= (32.0 * 32.0) * 0.01,
                        "seed {seed} view {v}: coverage {coverage} too small"
                    );
                    assert!(m.as_slice().iter().all(|&x| x == 0.0 || x == 1.0));
                    for (o, &x) in owners.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *o += x;
                    }
                }
                // Pairwise disjoint: no pixel owned twice.
                assert!(owners.as_slice().iter().all(|&x| x <= 1.0));
            }
        }
    }

    #[test]
    fn synthetic_images_are_the_quantized_field_renders() {
        let bundle = make_synthetic(&small_spec(13)).unwrap();
        let field = bundle.gt_field.as_ref().unwrap();
        for (cam, img) in bundle.cameras.iter().zip(&bundle.images) {
            let re = quantize_to_8bit(&field.render_view(cam, &bundle.settings));
            assert_eq!(re.as_slice(), img.as_slice());
        }
    }

    #[test]
    fn scene_bundle_roundtrips_through_a_directory() {
        let dir = tempdir().unwrap();
        let bundle = make_synthetic(&small_spec(14)).unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = SceneBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.kind, bundle.kind);
        assert_eq!(loaded.view_names, bundle.view_names);
        assert_eq!(loaded.cameras, bundle.cameras);
        assert_eq!(loaded.settings, bundle.settings);
        for (a, b) in loaded.images.iter().zip(&bundle.images) {
            assert_eq!(a.as_slice(), b.as_slice());
        }
        for (r, planes) in &bundle.masks {
            for (a, b) in loaded.masks[r].iter().zip(planes) {
                assert_eq!(a.as_slice(), b.as_slice());
            }
        }
        let lf = loaded.gt_field.as_ref().unwrap();
        let bf = bundle.gt_field.as_ref().unwrap();
        assert_eq!(lf.density_grid(), bf.density_grid());
        assert_eq!(lf.color_param_grid(), bf.color_param_grid());

        // Re-rendering the loaded field still reproduces the stored PNGs.
        for (cam, img) in loaded.cameras.iter().zip(&loaded.images) {
            let re = quantize_to_8bit(&lf.render_view(cam, &loaded.settings));
            assert_eq!(re.as_slice(), img.as_slice());
        }
    }

    #[test]
    fn scene_load_rejects_count_mismatches_and_orphan_masks() {
        let dir = tempdir().unwrap();
        let bundle = make_synthetic(&small_spec(15)).unwrap();
        bundle.save(dir.path()).unwrap();

        // Remove one image: counts no longer match.
        fs::remove_file(dir.path().join("images/view_002.png")).unwrap();
        match SceneBundle::load(dir.path()) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains('5') && msg.contains('4'), "got: {msg}")
            }
            other => panic!("expected a validation error, got {other:?}"),
        }

        // Restore, then orphan a mask.
        bundle.save(dir.path()).err();
        write_image_png(
            dir.path().join("images/view_002.png"),
            &bundle.images[2],
        )
        .unwrap();
        let region = bundle.masks.keys().next().unwrap().clone();
        let orphan = dir.path().join("masks").join(&region).join("view_999.png");
        write_mask_png(&orphan, &Plane::zeros(32, 32)).unwrap();
        match SceneBundle::load(dir.path()) {
            Err(Error::Validation(msg)) => assert!(msg.contains("view_999"), "got: {msg}"),
            other => panic!("expected a validation error, got {other:?}"),
        }
        fs::remove_file(&orphan).unwrap();

        // Remove one view's mask: the region is incomplete.
        let missing = dir.path().join("masks").join(&region).join("view_001.png");
        fs::remove_file(&missing).unwrap();
        match SceneBundle::load(dir.path()) {
            Err(Error::Validation(msg)) => {
                assert!(msg.contains("view_001") && msg.contains(&region), "got: {msg}")
            }
            other => panic!("expected a validation error, got {other:?}"),
        }
    }

    #[test]
    fn orbit_scenes_build_and_roundtrip() {
        let mut spec = small_spec(16);
        spec.kind = SceneKind::Orbit;
        spec.n_views = 6;
        let bundle = make_synthetic(&spec).unwrap();
        assert_eq!(bundle.kind, SceneKind::Orbit);
        let dir = tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let loaded = SceneBundle::load(dir.path()).unwrap();
        assert_eq!(loaded.cameras, bundle.cameras);
    }

    #[test]
    fn render_path_defaults_counts_and_matches_training_poses() {
        let spec = small_spec(17);
        let bundle = make_synthetic(&spec).unwrap();
        let field = bundle.gt_field.as_ref().unwrap();

        let path_spec = PathSpec::new(
            SceneKind::ForwardFacing,
            bundle.cameras[0].clone(),
            bundle.settings.clone(),
        );
        assert_eq!(path_spec.n, 120);
        assert_eq!(
            PathSpec::new(
                SceneKind::Orbit,
                bundle.cameras[0].clone(),
                bundle.settings.clone()
            )
            .n,
            200
        );

        // A 5-pose path reproduces the 5 training cameras; frame 2 equals
        // the stored view bit-for-bit.
        let dir = tempdir().unwrap();
        let frames = render_path(field, &path_spec.clone().with_views(5), dir.path()).unwrap();
        assert_eq!(frames.len(), 5);
        let frame2 = read_image_png(&frames[2]).unwrap();
        assert_eq!(frame2.as_slice(), bundle.images[2].as_slice());

        // Determinism across invocations.
        let dir2 = tempdir().unwrap();
        let again = render_path(field, &path_spec.with_views(5), dir2.path()).unwrap();
        assert_eq!(
            fs::read(&frames[4]).unwrap(),
            fs::read(&again[4]).unwrap()
        );
    }

    #[test]
    fn manifests_are_write_once_and_roundtrip() {
        let dir = tempdir().unwrap();
        let mut manifest = RunManifest::new("stylize", "scenes/demo", "epochs = 10", 7);
        manifest.outputs = vec!["checkpoints/final.ckpt".into(), "metrics.jsonl".into()];
        manifest.save(dir.path()).unwrap();
        let loaded = RunManifest::load(dir.path()).unwrap();
        assert_eq!(loaded, manifest);
        assert!(matches!(
            manifest.save(dir.path()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn metrics_reports_append_and_read_back() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let summary = EvalSummary {
            content_dist: 0.1,
            style_fid: 2.5,
            artfid: 3.85,
            n: 5,
            masked: false,
            distance_backend: "normalized-mse".into(),
            embedder_backend: "seeded-projection-8".into(),
        };
        let r1 = MetricsRecord::from_summary("scene-a", "style-a", "baseline", &summary);
        let r2 = MetricsRecord::from_summary("scene-a", "style-a", "color", &summary);
        append_metrics_record(&path, &r1).unwrap();
        append_metrics_record(&path, &r2).unwrap();
        let back = read_metrics_report(&path).unwrap();
        assert_eq!(back, vec![r1, r2]);
    }

    #[test]
    fn camera_files_reject_malformed_content() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("cameras.txt");
        fs::write(&p, "wrong magic\n").unwrap();
        assert!(matches!(read_camera_file(&p), Err(Error::Format { .. })));

        fs::write(
            &p,
            "voxstyle-cameras 1\nkind forward-facing\nnear 1\nfar 4\nviews 1\nview a\nsize 8 8\nintrinsics 8 8 4 4\npose 1 0 0 0\npose 0 1 0 0\npose 0 0 1 0\npose 0 0 0 2\n",
        )
        .unwrap();
        match read_camera_file(&p) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("0 0 0 1")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
