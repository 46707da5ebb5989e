//! Multi-block convolutional feature extraction over images.
//!
//! An extractor runs a five-stage pipeline of 3x3 convolutions with
//! rectification and 2x2 pooling between stages. Block `l_k` is the
//! activation captured at the end of stage `k`, before pooling, so its
//! spatial downsample factor is `2^(k-1)` and a `H x W` input yields
//! `ceil(H / 2^(k-1))` rows. Deeper blocks see larger input regions and
//! drive coarser style patterns.
//!
//! Two backends share the pipeline shape: a deterministic test backend with
//! fixed seeded weights, average pooling, and raw `[0, 1]` inputs, and a
//! pretrained backbone loaded from a weights file, with max pooling and
//! per-channel input normalization. Extraction is deterministic for a fixed
//! backend: identical inputs give bit-identical feature maps.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::convnet::{
    avgpool2, avgpool2_vjp, maxpool2, maxpool2_vjp, read_f32s, relu, relu_vjp, write_f32s,
    ConvLayer,
};
pub use crate::convnet::FeatureMap;
use crate::error::{Error, Result};
use crate::image::Image;

/// Environment variable naming a backbone weights file; when unset the
/// deterministic test backend is used.
pub const BACKBONE_ENV: &str = "VOXSTYLE_BACKBONE";

const FILE_MAGIC: &str = "voxstyle-backbone 1";
const DETERMINISTIC_SEED: u64 = u64::from_le_bytes(*b"voxstyle");
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Identifier of one capture point in the five-stage pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    L1,
    L2,
    L3,
    L4,
    L5,
}

impl BlockId {
    pub const ALL: [BlockId; 5] = [
        BlockId::L1,
        BlockId::L2,
        BlockId::L3,
        BlockId::L4,
        BlockId::L5,
    ];

    /// Zero-based stage index.
    pub fn index(self) -> usize {
        match self {
            BlockId::L1 => 0,
            BlockId::L2 => 1,
            BlockId::L3 => 2,
            BlockId::L4 => 3,
            BlockId::L5 => 4,
        }
    }

    /// Spatial downsample factor `2^(k-1)` of block `l_k`.
    pub fn downsample(self) -> usize {
        1 << self.index()
    }

    /// Smallest input side length for which this block is non-degenerate.
    pub fn min_input(self) -> usize {
        self.downsample()
    }

    pub fn name(self) -> &'static str {
        ["l1", "l2", "l3", "l4", "l5"][self.index()]
    }

    pub fn parse(s: &str) -> Result<BlockId> {
        match s {
            "l1" => Ok(BlockId::L1),
            "l2" => Ok(BlockId::L2),
            "l3" => Ok(BlockId::L3),
            "l4" => Ok(BlockId::L4),
            "l5" => Ok(BlockId::L5),
            _ => Err(Error::Config(format!(
                "unknown feature block '{s}' (expected l1..l5)"
            ))),
        }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// Per-channel input normalization applied before the first convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    None,
    ImageNet,
}

struct Stage {
    convs: Vec<ConvLayer>,
}

/// Counts of extractor activity since the last reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditCounts {
    /// How many times each block was captured into a result.
    pub captures: [u64; 5],
    /// Number of extraction calls.
    pub calls: u64,
}

/// Multi-block convolutional feature extractor. Immutable after
/// construction; concurrent extraction is safe.
pub struct FeatureExtractor {
    backend_name: &'static str,
    stages: Vec<Stage>,
    pool: PoolKind,
    norm: NormMode,
    content_block: BlockId,
    audit_captures: [AtomicU64; 5],
    audit_calls: AtomicU64,
}

impl fmt::Debug for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FeatureExtractor")
            .field("backend", &self.backend_name)
            .field("pool", &self.pool)
            .field("norm", &self.norm)
            .field("content_block", &self.content_block)
            .finish()
    }
}

impl FeatureExtractor {
    /// Deterministic test backend: one seeded convolution per stage with
    /// zero bias, average pooling, raw `[0, 1]` inputs.
    pub fn deterministic() -> Self {
        let channels = [8usize, 16, 24, 32, 32];
        let mut rng = ChaCha8Rng::seed_from_u64(DETERMINISTIC_SEED);
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 3;
        for out_c in channels {
            stages.push(Stage {
                convs: vec![ConvLayer::seeded(in_c, out_c, &mut rng)],
            });
            in_c = out_c;
        }
        FeatureExtractor {
            backend_name: "deterministic-test",
            stages,
            pool: PoolKind::Avg,
            norm: NormMode::None,
            content_block: BlockId::L3,
            audit_captures: Default::default(),
            audit_calls: AtomicU64::new(0),
        }
    }

    /// Loads a pretrained backbone from a weights file (see
    /// [`write_backbone_file`] for the format).
    pub fn from_backbone_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let header = read_header(&mut reader, path)?;
        let mut stages = Vec::with_capacity(5);
        let mut in_c = 3;
        for (stage_idx, (&n_convs, &out_c)) in header
            .stage_convs
            .iter()
            .zip(&header.channels)
            .enumerate()
        {
            let mut convs = Vec::with_capacity(n_convs);
            for conv_idx in 0..n_convs {
                let weights = read_f32s(&mut reader, out_c * in_c * 9)
                    .map_err(|e| Error::io(path, e))?;
                let bias = read_f32s(&mut reader, out_c).map_err(|e| Error::io(path, e))?;
                convs.push(ConvLayer::new(in_c, out_c, weights, bias).map_err(|_| {
                    Error::Format {
                        path: path.into(),
                        reason: format!("bad conv tensor at stage {stage_idx} conv {conv_idx}"),
                    }
                })?);
                in_c = out_c;
            }
            stages.push(Stage { convs });
        }
        let mut probe = [0u8; 1];
        if reader.read(&mut probe).map_err(|e| Error::io(path, e))? != 0 {
            return Err(Error::Format {
                path: path.into(),
                reason: "trailing data after declared weights".into(),
            });
        }
        Ok(FeatureExtractor {
            backend_name: "pretrained-backbone",
            stages,
            pool: header.pool,
            norm: header.norm,
            content_block: BlockId::L3,
            audit_captures: Default::default(),
            audit_calls: AtomicU64::new(0),
        })
    }

    /// Backend selected by the `VOXSTYLE_BACKBONE` environment variable;
    /// when unset, downgrades to the deterministic test backend with a
    /// logged warning. A set-but-unloadable path is an error.
    pub fn from_env_or_deterministic() -> Result<Self> {
        match std::env::var(BACKBONE_ENV) {
            Ok(path) if !path.is_empty() => Self::from_backbone_file(path),
            _ => {
                log::warn!(
                    "{BACKBONE_ENV} not set; using the deterministic test feature backend"
                );
                Ok(Self::deterministic())
            }
        }
    }

    pub fn backend_name(&self) -> &'static str {
        self.backend_name
    }

    /// The block used for content loss; defaults to `l3`.
    pub fn content_block(&self) -> BlockId {
        self.content_block
    }

    /// Output channel count of the given block.
    pub fn block_channels(&self, block: BlockId) -> usize {
        self.stages[block.index()]
            .convs
            .last()
            .expect("every stage holds at least one convolution")
            .out_channels()
    }

    pub fn set_content_block(&mut self, block: BlockId) {
        self.content_block = block;
    }

    pub fn audit(&self) -> AuditCounts {
        let mut captures = [0u64; 5];
        for (c, a) in captures.iter_mut().zip(&self.audit_captures) {
            *c = a.load(Ordering::Relaxed);
        }
        AuditCounts {
            captures,
            calls: self.audit_calls.load(Ordering::Relaxed),
        }
    }

    pub fn reset_audit(&self) {
        for a in &self.audit_captures {
            a.store(0, Ordering::Relaxed);
        }
        self.audit_calls.store(0, Ordering::Relaxed);
    }

    fn check_size(&self, x: &Image, blocks: &[BlockId]) -> Result<()> {
        if let Some(deepest) = blocks.iter().copied().max() {
            let min = deepest.min_input();
            if x.height() < min || x.width() < min {
                return Err(Error::ImageTooSmall {
                    block: deepest.name(),
                    height: x.height(),
                    width: x.width(),
                    min,
                });
            }
        }
        Ok(())
    }

    fn normalized_input(&self, x: &Image) -> FeatureMap {
        match self.norm {
            NormMode::None => FeatureMap::from_image(x),
            NormMode::ImageNet => {
                let mut m = FeatureMap::from_image(x);
                for (i, v) in m.as_mut_slice().iter_mut().enumerate() {
                    let c = i % 3;
                    *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
                }
                m
            }
        }
    }

    /// Extracts the requested blocks. Only stages up to the deepest
    /// requested block run.
    pub fn extract(&self, x: &Image, blocks: &[BlockId]) -> Result<BTreeMap<BlockId, FeatureMap>> {
        self.check_size(x, blocks)?;
        self.audit_calls.fetch_add(1, Ordering::Relaxed);
        let mut out = BTreeMap::new();
        let Some(deepest) = blocks.iter().copied().max() else {
            return Ok(out);
        };
        let mut cur = self.normalized_input(x);
        for k in 0..=deepest.index() {
            for conv in &self.stages[k].convs {
                cur = relu(&conv.forward(&cur));
            }
            let block = BlockId::ALL[k];
            if blocks.contains(&block) {
                self.audit_captures[k].fetch_add(1, Ordering::Relaxed);
                out.insert(block, cur.clone());
            }
            if k < deepest.index() {
                cur = match self.pool {
                    PoolKind::Avg => avgpool2(&cur),
                    PoolKind::Max => maxpool2(&cur).0,
                };
            }
        }
        Ok(out)
    }

    /// Extracts the requested blocks while recording everything needed to
    /// back-propagate feature gradients to the input image.
    pub fn extract_traced(&self, x: &Image, blocks: &[BlockId]) -> Result<Trace<'_>> {
        self.check_size(x, blocks)?;
        self.audit_calls.fetch_add(1, Ordering::Relaxed);
        let mut trace = Trace {
            extractor: self,
            records: Vec::new(),
            captures: BTreeMap::new(),
            input_height: x.height(),
            input_width: x.width(),
        };
        let Some(deepest) = blocks.iter().copied().max() else {
            return Ok(trace);
        };
        let mut cur = self.normalized_input(x);
        for k in 0..=deepest.index() {
            for (ci, conv) in self.stages[k].convs.iter().enumerate() {
                let pre = conv.forward(&cur);
                cur = relu(&pre);
                trace.records.push(Record::Conv {
                    stage: k,
                    conv: ci,
                    pre,
                });
            }
            let block = BlockId::ALL[k];
            if blocks.contains(&block) {
                self.audit_captures[k].fetch_add(1, Ordering::Relaxed);
                trace.records.push(Record::Capture(block));
                trace.captures.insert(block, cur.clone());
            }
            if k < deepest.index() {
                let (in_h, in_w) = (cur.height(), cur.width());
                let arg = match self.pool {
                    PoolKind::Avg => {
                        cur = avgpool2(&cur);
                        None
                    }
                    PoolKind::Max => {
                        let (pooled, arg) = maxpool2(&cur);
                        cur = pooled;
                        Some(arg)
                    }
                };
                trace.records.push(Record::Pool { in_h, in_w, arg });
            }
        }
        Ok(trace)
    }
}

enum Record {
    Conv {
        stage: usize,
        conv: usize,
        pre: FeatureMap,
    },
    Pool {
        in_h: usize,
        in_w: usize,
        arg: Option<Vec<usize>>,
    },
    Capture(BlockId),
}

/// A recorded forward pass through the extractor, holding the captured
/// feature maps and the state for the backward sweep.
pub struct Trace<'a> {
    extractor: &'a FeatureExtractor,
    records: Vec<Record>,
    captures: BTreeMap<BlockId, FeatureMap>,
    input_height: usize,
    input_width: usize,
}

impl Trace<'_> {
    pub fn feature(&self, block: BlockId) -> Option<&FeatureMap> {
        self.captures.get(&block)
    }

    pub fn captures(&self) -> &BTreeMap<BlockId, FeatureMap> {
        &self.captures
    }

    /// Back-propagates per-block feature gradients to an image-shaped
    /// gradient. Blocks missing from `upstream` contribute nothing.
    pub fn grad_input(&self, upstream: &BTreeMap<BlockId, FeatureMap>) -> Result<Image> {
        for (block, g) in upstream {
            match self.captures.get(block) {
                None => {
                    return Err(Error::Validation(format!(
                        "gradient supplied for block {block} that was not captured"
                    )))
                }
                Some(f) => {
                    if (g.channels(), g.height(), g.width())
                        != (f.channels(), f.height(), f.width())
                    {
                        return Err(Error::DimMismatch(format!(
                            "block {block} gradient {}x{}x{} vs features {}x{}x{}",
                            g.height(),
                            g.width(),
                            g.channels(),
                            f.height(),
                            f.width(),
                            f.channels()
                        )));
                    }
                }
            }
        }
        let mut grad: Option<FeatureMap> = None;
        for record in self.records.iter().rev() {
            match record {
                Record::Capture(block) => {
                    if let Some(up) = upstream.get(block) {
                        match &mut grad {
                            None => grad = Some(up.clone()),
                            Some(g) => {
                                for (a, b) in g.as_mut_slice().iter_mut().zip(up.as_slice()) {
                                    *a += b;
                                }
                            }
                        }
                    }
                }
                Record::Pool { in_h, in_w, arg } => {
                    if let Some(g) = grad.take() {
                        grad = Some(match arg {
                            None => avgpool2_vjp(*in_h, *in_w, &g),
                            Some(arg) => maxpool2_vjp(*in_h, *in_w, arg, &g),
                        });
                    }
                }
                Record::Conv { stage, conv, pre } => {
                    if let Some(g) = grad.take() {
                        let masked = relu_vjp(pre, &g);
                        grad = Some(self.extractor.stages[*stage].convs[*conv].input_vjp(&masked));
                    }
                }
            }
        }
        let mut grad = match grad {
            Some(g) => g,
            None => FeatureMap::zeros(3, self.input_height, self.input_width),
        };
        if let NormMode::ImageNet = self.extractor.norm {
            for (i, v) in grad.as_mut_slice().iter_mut().enumerate() {
                *v /= IMAGENET_STD[i % 3];
            }
        }
        grad.into_image()
    }
}

struct Header {
    stage_convs: Vec<usize>,
    channels: Vec<usize>,
    norm: NormMode,
    pool: PoolKind,
}

fn read_header(reader: &mut impl Read, path: &Path) -> Result<Header> {
    let bad = |reason: String| Error::Format {
        path: path.into(),
        reason,
    };
    let mut text = String::new();
    let mut byte = [0u8; 1];
    // The header is line-oriented text terminated by `end-header`; reading
    // byte-wise leaves the reader positioned at the binary payload.
    loop {
        let n = reader
            .read(&mut byte)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(bad("missing end-header line".into()));
        }
        text.push(byte[0] as char);
        if text.ends_with("end-header\n") {
            break;
        }
        if text.len() > 4096 {
            return Err(bad("header exceeds 4096 bytes".into()));
        }
    }
    let mut lines = text.lines();
    if lines.next() != Some(FILE_MAGIC) {
        return Err(bad(format!("expected magic line '{FILE_MAGIC}'")));
    }
    let mut stage_convs = None;
    let mut channels = None;
    let mut norm = NormMode::None;
    let mut pool = PoolKind::Max;
    for line in lines {
        if line == "end-header" {
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let rest: Vec<&str> = parts.collect();
        let parse_counts = |rest: &[&str], key: &str| -> Result<Vec<usize>> {
            let vals = rest
                .iter()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad(format!("non-numeric value in '{key}' line")))?;
            if vals.len() != 5 || vals.iter().any(|&v| v == 0) {
                return Err(bad(format!("'{key}' line needs 5 positive values")));
            }
            Ok(vals)
        };
        match key {
            "stages" => stage_convs = Some(parse_counts(&rest, "stages")?),
            "channels" => channels = Some(parse_counts(&rest, "channels")?),
            "normalize" => {
                norm = match rest.as_slice() {
                    ["imagenet"] => NormMode::ImageNet,
                    ["none"] => NormMode::None,
                    _ => return Err(bad("normalize must be 'imagenet' or 'none'".into())),
                }
            }
            "pool" => {
                pool = match rest.as_slice() {
                    ["max"] => PoolKind::Max,
                    ["avg"] => PoolKind::Avg,
                    _ => return Err(bad("pool must be 'max' or 'avg'".into())),
                }
            }
            other => return Err(bad(format!("unknown header key '{other}'"))),
        }
    }
    Ok(Header {
        stage_convs: stage_convs.ok_or_else(|| bad("missing 'stages' line".into()))?,
        channels: channels.ok_or_else(|| bad("missing 'channels' line".into()))?,
        norm,
        pool,
    })
}

/// Writes a backbone weights file:
///
/// ```text
/// voxstyle-backbone 1
/// stages <convs per stage, 5 numbers>
/// channels <output channels per stage, 5 numbers>
/// normalize imagenet|none
/// pool max|avg
/// end-header
/// <little-endian f32 payload: per stage, per conv, weights then bias>
/// ```
///
/// Conv weights are laid out `[out][in][ky][kx]`; the first conv takes 3
/// input channels and channels carry across stages.
pub fn write_backbone_file(
    path: impl AsRef<Path>,
    stages: &[Vec<ConvLayer>],
    norm: NormMode,
    pool: PoolKind,
) -> Result<()> {
    let path = path.as_ref();
    if stages.len() != 5 || stages.iter().any(|s| s.is_empty()) {
        return Err(Error::Validation(
            "a backbone needs 5 stages with at least one conv each".into(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    writeln!(w, "{FILE_MAGIC}").map_err(io_err)?;
    let counts: Vec<String> = stages.iter().map(|s| s.len().to_string()).collect();
    writeln!(w, "stages {}", counts.join(" ")).map_err(io_err)?;
    let chans: Vec<String> = stages
        .iter()
        .map(|s| s.last().unwrap().out_channels().to_string())
        .collect();
    writeln!(w, "channels {}", chans.join(" ")).map_err(io_err)?;
    writeln!(
        w,
        "normalize {}",
        if norm == NormMode::ImageNet {
            "imagenet"
        } else {
            "none"
        }
    )
    .map_err(io_err)?;
    writeln!(w, "pool {}", if pool == PoolKind::Max { "max" } else { "avg" }).map_err(io_err)?;
    writeln!(w, "end-header").map_err(io_err)?;
    for stage in stages {
        for conv in stage {
            write_f32s(&mut w, conv.weights()).map_err(io_err)?;
            write_f32s(&mut w, conv.bias()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_image(seed: u64, h: usize, w: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, |_, _| {
            [rng.gen(), rng.gen(), rng.gen()]
        })
    }

    #[test]
    fn extraction_is_deterministic() {
        let fx = FeatureExtractor::deterministic();
        let img = random_image(1, 20, 20);
        let a = fx.extract(&img, &BlockId::ALL).unwrap();
        let b = fx.extract(&img, &BlockId::ALL).unwrap();
        for block in BlockId::ALL {
            assert_eq!(a[&block], b[&block]);
        }
    }

    #[test]
    fn block_dims_follow_the_downsample_schedule() {
        let fx = FeatureExtractor::deterministic();
        let img = random_image(2, 64, 64);
        let maps = fx.extract(&img, &[BlockId::L3]).unwrap();
        let l3 = &maps[&BlockId::L3];
        assert_eq!((l3.height(), l3.width()), (16, 16));

        // Odd sizes round up at every pooling step. Width 9 admits blocks
        // up to l4 (whose minimum extent is 8).
        let img = random_image(3, 17, 9);
        let shallow = [BlockId::L1, BlockId::L2, BlockId::L3, BlockId::L4];
        let maps = fx.extract(&img, &shallow).unwrap();
        let dims: Vec<(usize, usize)> = shallow
            .iter()
            .map(|b| (maps[b].height(), maps[b].width()))
            .collect();
        assert_eq!(dims, vec![(17, 9), (9, 5), (5, 3), (3, 2)]);
    }

    #[test]
    fn zero_image_yields_zero_features() {
        let fx = FeatureExtractor::deterministic();
        let img = Image::zeros(16, 16);
        let maps = fx.extract(&img, &BlockId::ALL).unwrap();
        for block in BlockId::ALL {
            assert!(maps[&block].as_slice().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn too_small_input_names_the_deepest_block() {
        let fx = FeatureExtractor::deterministic();
        let img = random_image(4, 15, 20);
        match fx.extract(&img, &[BlockId::L1, BlockId::L5]) {
            Err(Error::ImageTooSmall { block, min, .. }) => {
                assert_eq!(block, "l5");
                assert_eq!(min, 16);
            }
            other => panic!("expected sizing error, got {other:?}"),
        }
        assert!(fx.extract(&img, &[BlockId::L1, BlockId::L3]).is_ok());
    }

    #[test]
    fn content_block_defaults_to_l3_and_can_be_overridden() {
        let mut fx = FeatureExtractor::deterministic();
        assert_eq!(fx.content_block(), BlockId::L3);
        fx.set_content_block(BlockId::parse("l2").unwrap());
        assert_eq!(fx.content_block(), BlockId::L2);
        assert!(BlockId::parse("l9").is_err());
    }

    #[test]
    fn audit_counts_captured_blocks_only() {
        let fx = FeatureExtractor::deterministic();
        let img = random_image(5, 16, 16);
        fx.extract(&img, &[BlockId::L1, BlockId::L2]).unwrap();
        let audit = fx.audit();
        assert_eq!(audit.captures, [1, 1, 0, 0, 0]);
        assert_eq!(audit.calls, 1);
        fx.extract(&img, &[BlockId::L3]).unwrap();
        assert_eq!(fx.audit().captures, [1, 1, 1, 0, 0]);
        fx.reset_audit();
        assert_eq!(fx.audit().captures, [0; 5]);
        assert_eq!(fx.audit().calls, 0);
    }

    fn fd_check(fx: &FeatureExtractor, img: &Image, blocks: &[BlockId], seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = fx.extract_traced(img, blocks).unwrap();
        let mut upstream = BTreeMap::new();
        for (&b, f) in trace.captures() {
            let mut u = FeatureMap::zeros(f.channels(), f.height(), f.width());
            for v in u.as_mut_slice() {
                *v = rng.gen_range(-1.0..1.0);
            }
            upstream.insert(b, u);
        }
        let grad = trace.grad_input(&upstream).unwrap();
        let dot = |x: &Image| -> f64 {
            let maps = fx.extract(x, blocks).unwrap();
            upstream
                .iter()
                .map(|(b, u)| {
                    maps[b]
                        .as_slice()
                        .iter()
                        .zip(u.as_slice())
                        .map(|(a, c)| a * c)
                        .sum::<f64>()
                })
                .sum()
        };
        let h = 1e-5;
        let scale = grad
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-10);
        for i in 0..img.as_slice().len() {
            let mut plus = img.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = img.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (dot(&plus) - dot(&minus)) / (2.0 * h);
            assert!(
                (grad.as_slice()[i] - fd).abs() / scale < 1e-4,
                "entry {i}: analytic {} vs fd {fd}",
                grad.as_slice()[i]
            );
        }
    }

    #[test]
    fn traced_gradients_match_finite_differences() {
        let fx = FeatureExtractor::deterministic();
        let img = random_image(6, 8, 8);
        fd_check(&fx, &img, &[BlockId::L1, BlockId::L3], 7);
    }

    #[test]
    fn backbone_file_roundtrip_and_traced_gradients() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.weights");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut stages = Vec::new();
        let mut in_c = 3;
        for out_c in [4usize, 6, 6, 8, 8] {
            stages.push(vec![
                ConvLayer::seeded(in_c, out_c, &mut rng),
                ConvLayer::seeded(out_c, out_c, &mut rng),
            ]);
            in_c = out_c;
        }
        write_backbone_file(&path, &stages, NormMode::ImageNet, PoolKind::Max).unwrap();
        let fx = FeatureExtractor::from_backbone_file(&path).unwrap();
        assert_eq!(fx.backend_name(), "pretrained-backbone");
        let img = random_image(8, 16, 16);
        let maps = fx.extract(&img, &[BlockId::L2]).unwrap();
        assert_eq!(maps[&BlockId::L2].channels(), 6);
        fd_check(&fx, &img, &[BlockId::L2], 9);
    }

    #[test]
    fn truncated_backbone_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.weights");
        std::fs::write(
            &path,
            b"voxstyle-backbone 1\nstages 1 1 1 1 1\nchannels 2 2 2 2 2\nend-header\n\x00\x00",
        )
        .unwrap();
        assert!(FeatureExtractor::from_backbone_file(&path).is_err());
    }

    #[test]
    fn env_fallback_uses_deterministic_backend() {
        // The suite does not set the backbone variable, so the fallback
        // must produce the deterministic backend.
        if std::env::var(BACKBONE_ENV).is_err() {
            let fx = FeatureExtractor::from_env_or_deterministic().unwrap();
            assert_eq!(fx.backend_name(), "deterministic-test");
        }
    }
}
