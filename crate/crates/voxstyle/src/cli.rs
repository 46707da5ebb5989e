//! The command-line surface tying the pipeline together.
//!
//! Five subcommands cover the end-to-end flow:
//!
//! ```text
//! voxstyle make-synthetic --out scenes/demo --seed 7
//! voxstyle reconstruct    --scene scenes/demo --out runs/photo
//! voxstyle stylize        --scene scenes/demo --field runs/photo/checkpoints/photoreal.ckpt \
//!                         --style styles/wave.png --out runs/wave --control color
//! voxstyle render         --scene scenes/demo --field runs/wave/checkpoints/stylized.ckpt \
//!                         --out runs/wave
//! voxstyle evaluate       --scene scenes/demo --photoreal ... --stylized ... \
//!                         --style styles/wave.png --out runs/wave
//! ```
//!
//! Each run directory gets a write-once `manifest.toml` before any
//! optimization starts; `reconstruct` and `stylize` add `checkpoints/` and a
//! JSON-lines training log, `render` adds `frames/`, `evaluate` appends to
//! `metrics.jsonl`.
//!
//! `stylize` reads an optional TOML config, with flags overriding file
//! values:
//!
//! ```toml
//! epochs = 10
//! lr_start = 0.1
//! lr_end = 0.01
//! patch = 64
//! seed = 7
//! recolor = false
//! optimizer = "gradient-descent"   # or "adaptive-moment"
//! controls = ["color", "depth"]    # color | scale | spatial | depth
//! depth_weight = 0.003
//! scale = 2.0                      # pattern-scale factor for --control scale
//!
//! [[style]]                        # global styles (blend when several)
//! image = "styles/wave.png"
//! blend = 1.0
//!
//! [[region_style]]                 # per-region styles for --control spatial
//! region = "sphere-0"
//! image = "styles/fire.png"
//! ```
//!
//! Exit codes: 0 success, 2 configuration or validation failure, 3 I/O or
//! file-format failure, 4 numerical failure.

use crate::dataio::{
    append_metrics_record, load_checkpoint, make_synthetic, read_image_png, render_path,
    save_checkpoint, PathSpec, RunManifest, SceneBundle, SyntheticSpec,
};
use crate::depthnet::DepthEstimator;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalSet, FeatureDistance, MetricsRecord, PooledConvEmbedder};
use crate::features::FeatureExtractor;
use crate::field::{fit_photoreal, FitConfig, SceneKind, VoxelField};
use crate::image::Plane;
use crate::losses::{LossWeights, StyleSpec};
use crate::stylize::{
    run_stylization, EpochValidation, Optimizer, RegionBinding, StylizeConfig,
};
use clap::{Args, Parser, Subcommand};
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "voxstyle",
    version,
    about = "Perceptually controllable style transfer for voxel radiance fields"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a deterministic synthetic scene bundle.
    MakeSynthetic(MakeSyntheticArgs),
    /// Fit a photo-realistic field to a scene's posed views.
    Reconstruct(ReconstructArgs),
    /// Optimize a style onto a reconstructed field (density frozen).
    Stylize(StylizeArgs),
    /// Render a novel-view path from a checkpoint.
    Render(RenderArgs),
    /// Score stylized renders against photo-real renders and a style.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct MakeSyntheticArgs {
    /// Scene directory to create.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Grid nodes per axis.
    #[arg(long, default_value_t = 24)]
    resolution: usize,
    #[arg(long, default_value_t = 8)]
    views: usize,
    /// Square view size in pixels.
    #[arg(long, default_value_t = 48)]
    image_size: usize,
    /// Capture kind: forward-facing or orbit.
    #[arg(long, default_value = "forward-facing", value_parser = SceneKind::parse)]
    kind: SceneKind,
    /// Ray-march samples per ray.
    #[arg(long, default_value_t = 32)]
    samples: usize,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Scene directory.
    #[arg(long)]
    scene: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config (iters, lr, seed, resolution).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid nodes per axis of the fitted field.
    #[arg(long)]
    resolution: Option<usize>,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ReconstructFileConfig {
    iters: Option<usize>,
    lr: Option<f64>,
    seed: Option<u64>,
    resolution: Option<usize>,
}

#[derive(Debug, Args)]
struct StylizeArgs {
    /// Scene directory (poses, views, and region masks).
    #[arg(long)]
    scene: PathBuf,
    /// Photo-realistic input checkpoint.
    #[arg(long)]
    field: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Optional TOML config; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Style image; repeat to blend several styles.
    #[arg(long)]
    style: Vec<PathBuf>,
    /// Per-region binding `region=style.png`; repeat per region.
    #[arg(long)]
    region_style: Vec<String>,
    /// Enable a control: color, scale, spatial, or depth. Repeatable.
    #[arg(long)]
    control: Vec<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Patch edge for deferred back-propagation.
    #[arg(long)]
    patch: Option<usize>,
    /// Pattern-scale factor applied under --control scale.
    #[arg(long)]
    scale_factor: Option<f64>,
    /// Depth-term weight applied under --control depth.
    #[arg(long)]
    depth_weight: Option<f64>,
    /// gradient-descent (default) or adaptive-moment.
    #[arg(long)]
    optimizer: Option<String>,
    /// Recolor the final field toward the style palette.
    #[arg(long)]
    recolor: bool,
}

#[derive(Debug, Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct StylizeFileConfig {
    epochs: Option<usize>,
    lr_start: Option<f64>,
    lr_end: Option<f64>,
    patch: Option<usize>,
    seed: Option<u64>,
    recolor: Option<bool>,
    optimizer: Option<String>,
    depth_weight: Option<f64>,
    scale: Option<f64>,
    controls: Option<Vec<String>>,
    style: Option<Vec<StyleFileEntry>>,
    region_style: Option<Vec<RegionStyleFileEntry>>,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleFileEntry {
    image: PathBuf,
    blend: Option<f64>,
}

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionStyleFileEntry {
    region: String,
    image: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    /// Scene directory supplying the capture kind and camera template.
    #[arg(long)]
    scene: PathBuf,
    /// Field checkpoint to render.
    #[arg(long)]
    field: PathBuf,
    /// Run directory; frames land in <out>/frames.
    #[arg(long)]
    out: PathBuf,
    /// Frame count; defaults to 120 (forward-facing) or 200 (orbit).
    #[arg(long)]
    views: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Scene directory (poses and, for --masked, region masks).
    #[arg(long)]
    scene: PathBuf,
    /// Photo-realistic reference checkpoint.
    #[arg(long)]
    photoreal: PathBuf,
    /// Stylized checkpoint to score.
    #[arg(long)]
    stylized: PathBuf,
    /// The style image the run targeted.
    #[arg(long)]
    style: PathBuf,
    /// Run directory; the record is appended to <out>/metrics.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Novel-view count; defaults to the scene's own views (required when
    /// --masked, whose masks exist only for those).
    #[arg(long)]
    views: Option<usize>,
    /// Restrict scoring to the scene's mask region(s).
    #[arg(long)]
    masked: bool,
    /// Mask region to score under --masked; defaults to the union.
    #[arg(long)]
    mask_region: Option<String>,
    /// Config label recorded with the metrics.
    #[arg(long, default_value = "default")]
    label: String,
}

/// Parses and dispatches one invocation; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            // clap renders help to stdout and errors to stderr itself.
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::MakeSynthetic(args) => cmd_make_synthetic(&args),
        Command::Reconstruct(args) => cmd_reconstruct(&args),
        Command::Stylize(args) => cmd_stylize(&args),
        Command::Render(args) => cmd_render(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn read_toml_config<T: serde::de::DeserializeOwned + Default>(
    path: Option<&PathBuf>,
) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!(
                "bad config {}: {e}",
                p.display()
            )))
        }
    }
}

fn path_label(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn cmd_make_synthetic(args: &MakeSyntheticArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        resolution: (args.resolution, args.resolution, args.resolution),
        n_views: args.views,
        image_size: args.image_size,
        kind: args.kind,
        samples_per_ray: args.samples,
    };
    let bundle = make_synthetic(&spec)?;
    bundle.save(&args.out)?;
    let snapshot = format!(
        "seed = {}\nresolution = {}\nviews = {}\nimage_size = {}\nkind = \"{}\"\nsamples = {}",
        args.seed,
        args.resolution,
        args.views,
        args.image_size,
        args.kind.name(),
        args.samples
    );
    let mut manifest = RunManifest::new(
        "make-synthetic",
        args.out.display().to_string(),
        snapshot,
        args.seed,
    );
    manifest.outputs = vec!["cameras.txt".into(), "images".into(), "masks".into(), "field.ckpt".into()];
    manifest.save(&args.out)?;
    println!(
        "wrote {} ({} views, {} mask regions) to {}",
        args.kind.name(),
        bundle.len(),
        bundle.masks.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let file: ReconstructFileConfig = read_toml_config(args.config.as_ref())?;
    let cfg = FitConfig {
        iters: args.iters.or(file.iters).unwrap_or(150),
        lr: args.lr.or(file.lr).unwrap_or(0.5),
        seed: args.seed.or(file.seed).unwrap_or(7),
    };
    let bundle = SceneBundle::load(&args.scene)?;
    let views = bundle.view_set()?;
    // Start from an empty field shaped like the ground truth when the
    // bundle carries one; otherwise a cube at the requested resolution
    // over the canonical bounds.
    let init = match (&bundle.gt_field, args.resolution.or(file.resolution)) {
        (_, Some(r)) => {
            let (bb_min, bb_max) = match &bundle.gt_field {
                Some(f) => (f.bbox_min(), f.bbox_max()),
                None => ([-1.0, -1.0, 1.0], [1.0, 1.0, 3.0]),
            };
            VoxelField::new((r, r, r), bb_min, bb_max)?
        }
        (Some(gt), None) => VoxelField::new(gt.resolution(), gt.bbox_min(), gt.bbox_max())?,
        (None, None) => VoxelField::new((24, 24, 24), [-1.0, -1.0, 1.0], [1.0, 1.0, 3.0])?,
    };
    let snapshot = format!(
        "iters = {}\nlr = {}\nseed = {}\nresolution = {:?}",
        cfg.iters,
        cfg.lr,
        cfg.seed,
        init.resolution()
    );
    let mut manifest = RunManifest::new(
        "reconstruct",
        args.scene.display().to_string(),
        snapshot,
        cfg.seed,
    );
    manifest.outputs = vec!["checkpoints/photoreal.ckpt".into(), "fit_log.jsonl".into()];
    manifest.save(&args.out)?;

    let (field, report) = fit_photoreal(&init, &views, &cfg)?;
    let ckpt_dir = args.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    save_checkpoint(&field, ckpt_dir.join("photoreal.ckpt"))?;
    let log_path = args.out.join("fit_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    for (i, loss) in report.losses.iter().enumerate() {
        writeln!(log, "{{\"iter\":{i},\"loss\":{loss}}}").map_err(|e| Error::io(&log_path, e))?;
    }
    println!(
        "fit {} iters: loss {:.6} -> {:.6}; checkpoint at {}",
        cfg.iters,
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.losses.last().copied().unwrap_or(f64::NAN),
        ckpt_dir.join("photoreal.ckpt").display()
    );
    Ok(())
}

fn parse_control(name: &str) -> Result<&'static str> {
    match name {
        "color" => Ok("color"),
        "scale" => Ok("scale"),
        "spatial" => Ok("spatial"),
        "depth" => Ok("depth"),
        other => Err(Error::Config(format!(
            "unknown control '{other}' (expected color, scale, spatial, or depth)"
        ))),
    }
}

fn parse_optimizer(name: &str) -> Result<Optimizer> {
    match name {
        "gradient-descent" | "gd" => Ok(Optimizer::GradientDescent),
        "adaptive-moment" | "adam" => Ok(Optimizer::AdaptiveMoment),
        other => Err(Error::Config(format!(
            "unknown optimizer '{other}' (expected gradient-descent or adaptive-moment)"
        ))),
    }
}

fn parse_region_binding(s: &str) -> Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((region, path)) if !region.is_empty() && !path.is_empty() => {
            Ok((region.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::Config(format!(
            "region binding '{s}' is not of the form region=style.png"
        ))),
    }
}

/// Merges file config and flags into a [`StylizeConfig`], loading every
/// referenced style image. Flags override file values.
fn build_stylize_config(
    kind: SceneKind,
    args: &StylizeArgs,
    file: &StylizeFileConfig,
) -> Result<(StylizeConfig, String)> {
    let mut controls = Vec::new();
    for c in file.controls.iter().flatten().map(String::as_str) {
        controls.push(parse_control(c)?);
    }
    for c in &args.control {
        let c = parse_control(c)?;
        if !controls.contains(&c) {
            controls.push(c);
        }
    }
    let color = controls.contains(&"color");
    let scale = controls.contains(&"scale");
    let spatial = controls.contains(&"spatial");
    let depth = controls.contains(&"depth");

    // Global styles: flags win over the file list.
    let styles: Vec<(PathBuf, Option<f64>)> = if !args.style.is_empty() {
        args.style.iter().map(|p| (p.clone(), None)).collect()
    } else {
        file.style
            .iter()
            .flatten()
            .map(|e| (e.image.clone(), e.blend))
            .collect()
    };
    let mut bindings: Vec<(String, PathBuf)> = Vec::new();
    for s in &args.region_style {
        bindings.push(parse_region_binding(s)?);
    }
    if bindings.is_empty() {
        for e in file.region_style.iter().flatten() {
            bindings.push((e.region.clone(), e.image.clone()));
        }
    }

    if spatial && !styles.is_empty() {
        return Err(Error::Config(
            "spatial control takes styles via region bindings, not --style".into(),
        ));
    }
    if !spatial && !bindings.is_empty() {
        return Err(Error::Config(
            "region bindings need --control spatial".into(),
        ));
    }
    if !spatial && styles.is_empty() {
        return Err(Error::Config("no style image given".into()));
    }

    let mut cfg = if spatial {
        let region_bindings = bindings
            .iter()
            .map(|(region, path)| {
                Ok(RegionBinding {
                    region: region.clone(),
                    spec: StyleSpec::new(read_image_png(path)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StylizeConfig::spatial(kind, region_bindings)
    } else if styles.len() > 1 {
        let n = styles.len() as f64;
        let specs = styles
            .iter()
            .map(|(path, blend)| {
                Ok(StyleSpec::new(read_image_png(path)?)
                    .with_blend_weight(blend.unwrap_or(1.0 / n)))
            })
            .collect::<Result<Vec<_>>>()?;
        StylizeConfig::multi_style(kind, specs)
    } else {
        let (path, blend) = &styles[0];
        let spec = StyleSpec::new(read_image_png(path)?).with_blend_weight(blend.unwrap_or(1.0));
        StylizeConfig::baseline(kind, spec)
    };

    if color {
        cfg.controls.color_preserve = true;
        let depth_weight = cfg.weights.depth;
        cfg.weights = LossWeights::color_preserving(kind);
        cfg.weights.depth = depth_weight;
    }
    if scale {
        cfg.controls.scale = true;
        let factor = args.scale_factor.or(file.scale).unwrap_or(2.0);
        for spec in &mut cfg.specs {
            *spec = spec.clone().with_uniform_scale(factor);
        }
        for binding in &mut cfg.regions {
            binding.spec = binding.spec.clone().with_uniform_scale(factor);
        }
    }
    if depth {
        cfg = cfg.with_depth_control();
        if let Some(w) = args.depth_weight.or(file.depth_weight) {
            cfg.weights.depth = w;
        }
    }
    if let Some(e) = args.epochs.or(file.epochs) {
        cfg.epochs = e;
    }
    if let Some(v) = args.lr_start.or(file.lr_start) {
        cfg.lr_start = v;
    }
    if let Some(v) = args.lr_end.or(file.lr_end) {
        cfg.lr_end = v;
    }
    if let Some(v) = args.patch.or(file.patch) {
        cfg.patch = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }
    if args.recolor || file.recolor == Some(true) {
        cfg.recolor_enabled = true;
    }
    if let Some(name) = args.optimizer.as_deref().or(file.optimizer.as_deref()) {
        cfg.optimizer = parse_optimizer(name)?;
    }
    cfg.validate()?;

    let style_desc = if spatial {
        bindings
            .iter()
            .map(|(r, p)| format!("{r} = \"{}\"", p.display()))
            .collect::<Vec<_>>()
            .join(", ")
    } else {
        styles
            .iter()
            .map(|(p, _)| format!("\"{}\"", p.display()))
            .collect::<Vec<_>>()
            .join(", ")
    };
    let snapshot = format!(
        "kind = \"{}\"\nepochs = {}\nlr_start = {}\nlr_end = {}\npatch = {}\nseed = {}\n\
         optimizer = \"{}\"\nrecolor = {}\ncontrols = [{}]\nstyle_weight = {}\n\
         content_weight = {}\ntv_weight = {}\ndepth_weight = {}\nstyles = [{}]",
        kind.name(),
        cfg.epochs,
        cfg.lr_start,
        cfg.lr_end,
        cfg.patch,
        cfg.seed,
        match cfg.optimizer {
            Optimizer::GradientDescent => "gradient-descent",
            Optimizer::AdaptiveMoment => "adaptive-moment",
        },
        cfg.recolor_enabled,
        controls
            .iter()
            .map(|c| format!("\"{c}\""))
            .collect::<Vec<_>>()
            .join(", "),
        cfg.weights.style,
        cfg.weights.content,
        cfg.weights.tv,
        cfg.weights.depth,
        style_desc,
    );
    Ok((cfg, snapshot))
}

fn cmd_stylize(args: &StylizeArgs) -> Result<()> {
    let file: StylizeFileConfig = read_toml_config(args.config.as_ref())?;
    let bundle = SceneBundle::load(&args.scene)?;
    let (cfg, snapshot) = build_stylize_config(bundle.kind, args, &file)?;
    let views = bundle.view_set()?;
    let field = load_checkpoint(&args.field)?;

    let mut manifest = RunManifest::new(
        "stylize",
        args.scene.display().to_string(),
        snapshot,
        cfg.seed,
    );
    manifest.outputs = vec!["checkpoints/stylized.ckpt".into(), "train_log.jsonl".into()];
    manifest.save(&args.out)?;

    let fx = FeatureExtractor::from_env_or_deterministic()?;
    let estimator;
    let depth = if cfg.weights.depth > 0.0 || cfg.controls.depth {
        estimator = DepthEstimator::from_env_or_stub();
        Some(&estimator)
    } else {
        None
    };
    let mut log_epoch = |epoch: usize, v: &EpochValidation| -> crate::Result<()> {
        log::info!(
            "epoch {epoch}: style {:.6}, content {:.6}, tv {:.6}, depth {:.6} (validation mean)",
            v.mean.style,
            v.mean.content,
            v.mean.tv,
            v.mean.depth
        );
        Ok(())
    };
    let observer: &mut crate::stylize::EpochObserver = &mut log_epoch;
    let (styled, state) = run_stylization(&field, &views, &cfg, &fx, depth, Some(observer))?;

    let ckpt_dir = args.out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    save_checkpoint(&styled, ckpt_dir.join("stylized.ckpt"))?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let jsonl_err = |e: serde_json::Error| Error::Validation(format!("log record: {e}"));
    for record in &state.history {
        let line = serde_json::to_string(record).map_err(jsonl_err)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    for record in &state.validations {
        let line = serde_json::to_string(record).map_err(jsonl_err)?;
        writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
    }
    println!(
        "stylized {} epochs ({} steps); checkpoint at {}",
        state.epoch,
        state.step,
        ckpt_dir.join("stylized.ckpt").display()
    );
    Ok(())
}

fn cmd_render(args: &RenderArgs) -> Result<()> {
    let bundle = SceneBundle::load(&args.scene)?;
    let field = load_checkpoint(&args.field)?;
    let mut spec = PathSpec::new(
        bundle.kind,
        bundle.cameras[0].clone(),
        bundle.settings.clone(),
    );
    if let Some(n) = args.views {
        spec = spec.with_views(n);
    }
    let snapshot = format!(
        "field = \"{}\"\nkind = \"{}\"\nviews = {}",
        args.field.display(),
        bundle.kind.name(),
        spec.n
    );
    let mut manifest = RunManifest::new(
        "render",
        args.scene.display().to_string(),
        snapshot,
        0,
    );
    manifest.outputs = vec!["frames".into()];
    manifest.save(&args.out)?;
    let frames = render_path(&field, &spec, args.out.join("frames"))?;
    println!("rendered {} frames to {}", frames.len(), args.out.join("frames").display());
    Ok(())
}

fn union_masks(bundle: &SceneBundle, region: Option<&str>) -> Result<Vec<Plane>> {
    if bundle.masks.is_empty() {
        return Err(Error::Config(
            "--masked needs a masks directory in the scene bundle, and this scene has none".into(),
        ));
    }
    match region {
        Some(name) => bundle.masks.get(name).cloned().ok_or_else(|| {
            Error::Config(format!(
                "scene has no mask region '{name}' (available: {})",
                bundle.masks.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        }),
        None => {
            let mut union: Vec<Plane> = bundle
                .masks
                .values()
                .next()
                .expect("nonempty map")
                .clone();
            for planes in bundle.masks.values().skip(1) {
                for (u, m) in union.iter_mut().zip(planes) {
                    for (a, &b) in u.as_mut_slice().iter_mut().zip(m.as_slice()) {
                        *a = a.max(b);
                    }
                }
            }
            Ok(union)
        }
    }
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let bundle = SceneBundle::load(&args.scene)?;
    if args.masked && args.views.is_some() {
        return Err(Error::Config(
            "--masked scores the scene's own views (masks exist only for those); drop --views"
                .into(),
        ));
    }
    let masks = if args.masked {
        Some(union_masks(&bundle, args.mask_region.as_deref())?)
    } else {
        None
    };
    let photoreal_field = load_checkpoint(&args.photoreal)?;
    let stylized_field = load_checkpoint(&args.stylized)?;
    let style = read_image_png(&args.style)?;
    let cameras = match args.views {
        None => bundle.cameras.clone(),
        Some(n) => PathSpec::new(
            bundle.kind,
            bundle.cameras[0].clone(),
            bundle.settings.clone(),
        )
        .with_views(n)
        .cameras()?,
    };
    let snapshot = format!(
        "photoreal = \"{}\"\nstylized = \"{}\"\nstyle = \"{}\"\nviews = {}\nmasked = {}",
        args.photoreal.display(),
        args.stylized.display(),
        args.style.display(),
        cameras.len(),
        args.masked
    );
    let mut manifest = RunManifest::new(
        "evaluate",
        args.scene.display().to_string(),
        snapshot,
        0,
    );
    manifest.outputs = vec!["metrics.jsonl".into()];
    manifest.save(&args.out)?;

    let photoreal: Vec<_> = cameras
        .iter()
        .map(|c| photoreal_field.render_view(c, &bundle.settings))
        .collect();
    let stylized: Vec<_> = cameras
        .iter()
        .map(|c| stylized_field.render_view(c, &bundle.settings))
        .collect();
    let mut set = EvalSet::new(photoreal, stylized, style)?;
    if let Some(masks) = masks {
        set = set.with_masks(masks)?;
    }
    let fx = FeatureExtractor::from_env_or_deterministic()?;
    let d = FeatureDistance::new(&fx);
    let e = PooledConvEmbedder::new(&fx);
    let summary = evaluate(&set, &d, &e, args.masked)?;
    let record = MetricsRecord::from_summary(
        path_label(&args.scene),
        path_label(&args.style),
        args.label.clone(),
        &summary,
    );
    append_metrics_record(args.out.join("metrics.jsonl"), &record)?;
    println!(
        "content_dist {:.6}  style_fid {:.6}  artfid {:.6}  (n = {}, masked = {})",
        summary.content_dist, summary.style_fid, summary.artfid, summary.n, summary.masked
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::read_metrics_report;
    use tempfile::tempdir;

    fn run_vec(argv: &[&str]) -> i32 {
        run(argv.iter().map(|s| s.to_string()))
    }

    fn make_tiny_scene(dir: &Path, kind: &str) -> PathBuf {
        let scene = dir.join("scene");
        let code = run_vec(&[
            "voxstyle",
            "make-synthetic",
            "--out",
            scene.to_str().unwrap(),
            "--seed",
            "11",
            "--resolution",
            "16",
            "--views",
            "4",
            "--image-size",
            "32",
            "--samples",
            "24",
            "--kind",
            kind,
        ]);
        assert_eq!(code, 0);
        scene
    }

    #[test]
    fn help_and_version_exit_zero_unknown_flag_exits_two() {
        assert_eq!(run_vec(&["voxstyle", "--help"]), 0);
        assert_eq!(run_vec(&["voxstyle", "--version"]), 0);
        assert_eq!(run_vec(&["voxstyle", "stylize", "--bogus-flag"]), 2);
        assert_eq!(run_vec(&["voxstyle", "no-such-subcommand"]), 2);
    }

    #[test]
    fn make_synthetic_writes_a_loadable_scene_with_manifest() {
        let dir = tempdir().unwrap();
        let scene = make_tiny_scene(dir.path(), "forward-facing");
        let bundle = SceneBundle::load(&scene).unwrap();
        assert_eq!(bundle.len(), 4);
        assert!(!bundle.masks.is_empty());
        let manifest = RunManifest::load(&scene).unwrap();
        assert_eq!(manifest.command, "make-synthetic");
        assert!(manifest.config.contains("seed = 11"));
    }

    #[test]
    fn reconstruct_writes_checkpoint_and_fit_log() {
        let dir = tempdir().unwrap();
        let scene = make_tiny_scene(dir.path(), "forward-facing");
        let out = dir.path().join("photo");
        let code = run_vec(&[
            "voxstyle",
            "reconstruct",
            "--scene",
            scene.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--iters",
            "10",
        ]);
        assert_eq!(code, 0);
        let field = load_checkpoint(out.join("checkpoints/photoreal.ckpt")).unwrap();
        assert_eq!(field.resolution(), (16, 16, 16));
        let log = fs::read_to_string(out.join("fit_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 10);
        let manifest = RunManifest::load(&out).unwrap();
        assert_eq!(manifest.command, "reconstruct");

        // A second run into the same directory trips the write-once manifest.
        assert_eq!(
            run_vec(&[
                "voxstyle",
                "reconstruct",
                "--scene",
                scene.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
                "--iters",
                "2",
            ]),
            2
        );
    }

    fn write_style_png(dir: &Path) -> PathBuf {
        let path = dir.join("style.png");
        let style = crate::image::Image::from_fn(16, 16, |y, x| {
            let t = ((y / 4 + x / 4) % 2) as f64;
            [0.2 + 0.6 * t, 0.15, 0.7 - 0.5 * t]
        });
        crate::dataio::write_image_png(&path, &style).unwrap();
        path
    }

    #[test]
    fn stylize_end_to_end_writes_checkpoint_and_log() {
        let dir = tempdir().unwrap();
        let scene = make_tiny_scene(dir.path(), "forward-facing");
        let style = write_style_png(dir.path());
        let gt = scene.join("field.ckpt");
        let out = dir.path().join("wave");
        let code = run_vec(&[
            "voxstyle",
            "stylize",
            "--scene",
            scene.to_str().unwrap(),
            "--field",
            gt.to_str().unwrap(),
            "--style",
            style.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "1",
            "--patch",
            "16",
        ]);
        assert_eq!(code, 0);
        let styled = load_checkpoint(out.join("checkpoints/stylized.ckpt")).unwrap();
        assert!(styled.density_frozen());
        let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        // 4 step records + 1 validation record.
        assert_eq!(log.lines().count(), 5);
        assert!(log.contains("\"lr\""));
        let manifest = RunManifest::load(&out).unwrap();
        assert!(manifest.config.contains("epochs = 1"));
    }

    #[test]
    fn stylize_config_file_is_read_and_flags_override() {
        let dir = tempdir().unwrap();
        let style = write_style_png(dir.path());
        let config_path = dir.path().join("c.toml");
        fs::write(
            &config_path,
            format!(
                "epochs = 3\nseed = 99\n[[style]]\nimage = \"{}\"\n",
                style.display()
            ),
        )
        .unwrap();
        let args = StylizeArgs {
            scene: PathBuf::new(),
            field: PathBuf::new(),
            out: PathBuf::new(),
            config: Some(config_path.clone()),
            style: vec![],
            region_style: vec![],
            control: vec![],
            epochs: Some(2),
            lr_start: None,
            lr_end: None,
            seed: None,
            patch: None,
            scale_factor: None,
            depth_weight: None,
            optimizer: None,
            recolor: false,
        };
        let file: StylizeFileConfig = read_toml_config(Some(&config_path)).unwrap();
        let (cfg, snapshot) =
            build_stylize_config(SceneKind::ForwardFacing, &args, &file).unwrap();
        assert_eq!(cfg.epochs, 2, "the flag overrides the file");
        assert_eq!(cfg.seed, 99, "the file fills what flags leave unset");
        assert!(snapshot.contains("epochs = 2"));

        // Unknown config keys are rejected with the key named.
        fs::write(&config_path, "epochz = 3\n").unwrap();
        let err = read_toml_config::<StylizeFileConfig>(Some(&config_path)).unwrap_err();
        assert!(err.to_string().contains("epochz"), "got: {err}");
    }

    #[test]
    fn color_control_sets_luminance_and_content_weight_preset() {
        let dir = tempdir().unwrap();
        let style = write_style_png(dir.path());
        let args = StylizeArgs {
            scene: PathBuf::new(),
            field: PathBuf::new(),
            out: PathBuf::new(),
            config: None,
            style: vec![style],
            region_style: vec![],
            control: vec!["color".into()],
            epochs: None,
            lr_start: None,
            lr_end: None,
            seed: None,
            patch: None,
            scale_factor: None,
            depth_weight: None,
            optimizer: None,
            recolor: false,
        };
        let (cfg, _) = build_stylize_config(
            SceneKind::ForwardFacing,
            &args,
            &StylizeFileConfig::default(),
        )
        .unwrap();
        assert!(cfg.controls.color_preserve);
        assert_eq!(
            cfg.weights,
            LossWeights::color_preserving(SceneKind::ForwardFacing)
        );
        let effective = cfg.effective().unwrap();
        assert!(effective.specs.iter().all(|s| s.luminance_only));
    }

    #[test]
    fn unknown_control_is_a_config_error() {
        let dir = tempdir().unwrap();
        let style = write_style_png(dir.path());
        let args = StylizeArgs {
            scene: PathBuf::new(),
            field: PathBuf::new(),
            out: PathBuf::new(),
            config: None,
            style: vec![style],
            region_style: vec![],
            control: vec!["colour".into()],
            epochs: None,
            lr_start: None,
            lr_end: None,
            seed: None,
            patch: None,
            scale_factor: None,
            depth_weight: None,
            optimizer: None,
            recolor: false,
        };
        let err = build_stylize_config(
            SceneKind::ForwardFacing,
            &args,
            &StylizeFileConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn spatial_with_recolor_keeps_flags_for_downstream_forcing() {
        // The CLI passes the combination through; run_stylization's
        // effective() forces recolor off and logs the notice.
        let dir = tempdir().unwrap();
        let style = write_style_png(dir.path());
        let args = StylizeArgs {
            scene: PathBuf::new(),
            field: PathBuf::new(),
            out: PathBuf::new(),
            config: None,
            style: vec![],
            region_style: vec![format!("sphere-0={}", style.display())],
            control: vec!["spatial".into()],
            epochs: None,
            lr_start: None,
            lr_end: None,
            seed: None,
            patch: None,
            scale_factor: None,
            depth_weight: None,
            optimizer: None,
            recolor: true,
        };
        let (cfg, _) = build_stylize_config(
            SceneKind::ForwardFacing,
            &args,
            &StylizeFileConfig::default(),
        )
        .unwrap();
        assert!(cfg.controls.spatial && cfg.recolor_enabled);
        assert!(
            !cfg.effective().unwrap().recolor_enabled,
            "forced off downstream"
        );
    }

    #[test]
    fn render_writes_frames() {
        let dir = tempdir().unwrap();
        let scene = make_tiny_scene(dir.path(), "forward-facing");
        let out = dir.path().join("r");
        let code = run_vec(&[
            "voxstyle",
            "render",
            "--scene",
            scene.to_str().unwrap(),
            "--field",
            scene.join("field.ckpt").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--views",
            "3",
        ]);
        assert_eq!(code, 0);
        for i in 0..3 {
            assert!(out.join(format!("frames/frame_{i:03}.png")).is_file());
        }
    }

    #[test]
    fn evaluate_appends_records_and_masked_needs_masks() {
        let dir = tempdir().unwrap();
        let scene = make_tiny_scene(dir.path(), "forward-facing");
        let style = write_style_png(dir.path());
        let gt = scene.join("field.ckpt");
        let eval_args = |out: &Path, masked: bool| -> Vec<String> {
            let mut v: Vec<String> = [
                "voxstyle",
                "evaluate",
                "--scene",
                scene.to_str().unwrap(),
                "--photoreal",
                gt.to_str().unwrap(),
                "--stylized",
                gt.to_str().unwrap(),
                "--style",
                style.to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ]
            .iter()
            .map(|s| s.to_string())
            .collect();
            if masked {
                v.push("--masked".into());
            }
            v
        };
        let out_a = dir.path().join("e-plain");
        let out_b = dir.path().join("e-masked");
        assert_eq!(run(eval_args(&out_a, false)), 0);
        assert_eq!(run(eval_args(&out_b, true)), 0);
        let plain = read_metrics_report(out_a.join("metrics.jsonl")).unwrap();
        let masked = read_metrics_report(out_b.join("metrics.jsonl")).unwrap();
        assert_eq!((plain.len(), masked.len()), (1, 1));
        assert!(!plain[0].masked);
        assert!(masked[0].masked);
        // Identical fields: zero content distance, so artfid = 1 + style_fid.
        assert!(plain[0].content_dist.abs() <= 1e-12);
        assert!(plain[0].artfid >= 1.0);
        assert!(plain[0].distance_backend.contains("deterministic-test"));

        // Strip the masks and ask for masked scoring: config error.
        fs::remove_dir_all(scene.join("masks")).unwrap();
        let out_c = dir.path().join("e-no-masks");
        assert_eq!(run(eval_args(&out_c, true)), 2);
    }
}
