//! Declarative search-space description: a fixed stem followed by a chain of
//! searchable blocks, each with operation and output-channel candidates.
//!
//! Candidate order is part of the checkpoint format: α and β indices refer to
//! positions in [`BlockSpec::op_candidates`] and [`BlockSpec::channel_candidates`].

use std::fmt;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::json::{self, Node, Owned};

pub const SCHEMA_VERSION: u64 = 1;
pub const DEFAULT_KERNELS: [usize; 3] = [3, 5, 7];
pub const DEFAULT_EXPANSIONS: [usize; 2] = [3, 6];
pub const DEFAULT_N_MAX: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpCandidate {
    MbConv { kernel: usize, expansion: usize },
    Skip,
}

impl OpCandidate {
    pub fn is_skip(&self) -> bool {
        matches!(self, OpCandidate::Skip)
    }
}

impl fmt::Display for OpCandidate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OpCandidate::MbConv { kernel, expansion } => write!(f, "k{kernel}e{expansion}"),
            OpCandidate::Skip => write!(f, "skip"),
        }
    }
}

/// Inclusive arithmetic range `min, min+step, ..., max`, with both bounds
/// multiples of `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ChannelRange {
    pub min: usize,
    pub max: usize,
    pub step: usize,
}

impl ChannelRange {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.min == 0 {
            return Err("minimum channel count must be positive".into());
        }
        if self.min > self.max {
            return Err(format!("minimum {} exceeds maximum {}", self.min, self.max));
        }
        if self.step == 0 {
            return Err("step must be positive".into());
        }
        // bounds must lie on the step grid, not just the span
        if !self.min.is_multiple_of(self.step) || !(self.max - self.min).is_multiple_of(self.step) {
            return Err(format!(
                "step {} does not divide range {}..{}",
                self.step, self.min, self.max
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    /// 1-based position among the searchable blocks.
    pub index: usize,
    pub n_max: usize,
    pub stride: usize,
    pub kernels: Vec<usize>,
    pub expansions: Vec<usize>,
    pub channels: ChannelRange,
}

impl BlockSpec {
    pub fn channel_candidates(&self) -> Vec<usize> {
        (self.channels.min..=self.channels.max)
            .step_by(self.channels.step)
            .collect()
    }

    pub fn num_channel_candidates(&self) -> usize {
        (self.channels.max - self.channels.min) / self.channels.step + 1
    }

    pub fn max_channels(&self) -> usize {
        self.channels.max
    }

    /// Candidates for 1-based layer `layer`: MBConv variants in (kernel,
    /// expansion) order, plus a trailing skip on every layer but the first.
    pub fn op_candidates(&self, layer: usize) -> Result<Vec<OpCandidate>> {
        if layer < 1 || layer > self.n_max {
            return Err(Error::param(format!(
                "layer {layer} outside 1..={} of block {}",
                self.n_max, self.index
            )));
        }
        let mut kernels = self.kernels.clone();
        kernels.sort_unstable();
        let mut expansions = self.expansions.clone();
        expansions.sort_unstable();
        let mut ops: Vec<OpCandidate> = kernels
            .iter()
            .flat_map(|&kernel| {
                expansions
                    .iter()
                    .map(move |&expansion| OpCandidate::MbConv { kernel, expansion })
            })
            .collect();
        if layer > 1 {
            ops.push(OpCandidate::Skip);
        }
        Ok(ops)
    }

    pub fn num_op_candidates(&self, layer: usize) -> usize {
        self.kernels.len() * self.expansions.len() + usize::from(layer > 1)
    }
}

/// Fixed stem: a stride-2 3×3 convolution, then a k3 e1 MBConv.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StemSpec {
    pub conv_out: usize,
    pub mbconv_out: usize,
}

impl StemSpec {
    pub const CONV_KERNEL: usize = 3;
    pub const CONV_STRIDE: usize = 2;
    pub const MBCONV_KERNEL: usize = 3;
}

/// The hand-crafted network being adapted, as a uniform per-block description.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SourceSpec {
    pub channels: Vec<usize>,
    pub depths: Vec<usize>,
    pub kernel: usize,
    pub expansion: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpaceConfig {
    pub input_resolution: (usize, usize),
    pub input_channels: usize,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    pub source: SourceSpec,
}

impl SearchSpaceConfig {
    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Spatial size of the stem output.
    pub fn stem_resolution(&self) -> (usize, usize) {
        let (h, w) = self.input_resolution;
        (strided(h, StemSpec::CONV_STRIDE), strided(w, StemSpec::CONV_STRIDE))
    }

    /// (input, output) spatial sizes of every searchable block.
    pub fn block_resolutions(&self) -> Vec<((usize, usize), (usize, usize))> {
        let mut cur = self.stem_resolution();
        self.blocks
            .iter()
            .map(|b| {
                let out = (strided(cur.0, b.stride), strided(cur.1, b.stride));
                let r = (cur, out);
                cur = out;
                r
            })
            .collect()
    }

    /// Width of the tensor entering block `i` (0-based) inside the supernet.
    pub fn supernet_input_width(&self, i: usize) -> usize {
        if i == 0 {
            self.stem.mbconv_out
        } else {
            self.blocks[i - 1].max_channels()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc = Owned::parse(text)?;
        parse_config(doc.root())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_sorted_string(&ConfigDoc::from(self))
    }

    /// The bundled configuration reproducing the MobileNetV2-based space.
    pub fn table1() -> Self {
        Self::from_json(TABLE1_JSON).expect("bundled config is valid")
    }

    /// The bundled desk-scale configuration used by tests and examples.
    pub fn desk() -> Self {
        Self::from_json(DESK_JSON).expect("bundled config is valid")
    }
}

pub const TABLE1_JSON: &str = include_str!("../configs/table1.json");
pub const DESK_JSON: &str = include_str!("../configs/desk.json");

fn strided(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

fn parse_odd_kernels(n: Node<'_>) -> Result<Vec<usize>> {
    let ks = n.uint_list()?;
    if ks.is_empty() {
        return Err(n.error("candidate set must not be empty"));
    }
    if let Some(k) = ks.iter().find(|&&k| k % 2 == 0) {
        return Err(n.error(format!("kernel size {k} must be odd")));
    }
    distinct(n, ks)
}

fn parse_expansions(n: Node<'_>) -> Result<Vec<usize>> {
    let es = n.uint_list()?;
    if es.is_empty() {
        return Err(n.error("candidate set must not be empty"));
    }
    if let Some(e) = es.iter().find(|&&e| e < 2) {
        return Err(n.error(format!("expansion factor {e} must be at least 2")));
    }
    distinct(n, es)
}

fn distinct(n: Node<'_>, mut v: Vec<usize>) -> Result<Vec<usize>> {
    v.sort_unstable();
    if v.windows(2).any(|w| w[0] == w[1]) {
        return Err(n.error("duplicate candidate"));
    }
    Ok(v)
}

fn positive(n: Node<'_>) -> Result<usize> {
    let v = n.uint()?;
    if v == 0 {
        return Err(n.error("must be positive"));
    }
    Ok(v)
}

pub fn parse_config(root: Node<'_>) -> Result<SearchSpaceConfig> {
    root.only_keys(&[
        "v",
        "input_resolution",
        "input_channels",
        "stem",
        "kernels",
        "expansions",
        "blocks",
        "source",
    ])?;
    root.field("v", |n| {
        let v = n.uint()? as u64;
        if v != SCHEMA_VERSION {
            return Err(n.error(format!("unsupported schema version {v}")));
        }
        Ok(())
    })?;
    let input_resolution = root.field("input_resolution", |n| {
        let v = n.uint_list()?;
        match v.as_slice() {
            [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
            _ => Err(n.error("expected [height, width] with positive entries")),
        }
    })?;
    let input_channels = root.optional("input_channels", positive)?.unwrap_or(3);
    let stem = root.field("stem", |n| {
        n.only_keys(&["conv_out", "mbconv_out"])?;
        Ok(StemSpec {
            conv_out: n.field("conv_out", positive)?,
            mbconv_out: n.field("mbconv_out", positive)?,
        })
    })?;
    let kernels = root
        .optional("kernels", parse_odd_kernels)?
        .unwrap_or_else(|| DEFAULT_KERNELS.to_vec());
    let expansions = root
        .optional("expansions", parse_expansions)?
        .unwrap_or_else(|| DEFAULT_EXPANSIONS.to_vec());
    let blocks = root.field("blocks", |n| {
        let blocks = n.items(|i, b| {
            b.only_keys(&["n_max", "stride", "channels", "kernels", "expansions"])?;
            let n_max = b.optional("n_max", positive)?.unwrap_or(DEFAULT_N_MAX);
            let stride = b.field("stride", |s| {
                let v = s.uint()?;
                if v != 1 && v != 2 {
                    return Err(s.error(format!("stride must be 1 or 2, got {v}")));
                }
                Ok(v)
            })?;
            let channels = b.field("channels", |c| {
                let v = c.uint_list()?;
                let [min, max, step] = v.as_slice() else {
                    return Err(c.error("expected [minimum, maximum, step]"));
                };
                let range = ChannelRange {
                    min: *min,
                    max: *max,
                    step: *step,
                };
                range.validate().map_err(|m| c.error(m))?;
                Ok(range)
            })?;
            Ok(BlockSpec {
                index: i + 1,
                n_max,
                stride,
                kernels: b
                    .optional("kernels", parse_odd_kernels)?
                    .unwrap_or_else(|| kernels.clone()),
                expansions: b
                    .optional("expansions", parse_expansions)?
                    .unwrap_or_else(|| expansions.clone()),
                channels,
            })
        })?;
        if blocks.is_empty() {
            return Err(n.error("at least one searchable block is required"));
        }
        Ok(blocks)
    })?;
    let source = root
        .optional("source", |n| {
            n.only_keys(&["channels", "depths", "kernel", "expansion"])?;
            let channels = n.field("channels", |c| {
                let v = c.uint_list()?;
                if v.len() != blocks.len() || v.contains(&0) {
                    return Err(c.error(format!("expected {} positive widths", blocks.len())));
                }
                Ok(v)
            })?;
            let depths = n.field("depths", |c| {
                let v = c.uint_list()?;
                if v.len() != blocks.len() || v.contains(&0) {
                    return Err(c.error(format!("expected {} positive depths", blocks.len())));
                }
                Ok(v)
            })?;
            let kernel = n.field("kernel", |k| {
                let v = positive(k)?;
                if v % 2 == 0 {
                    return Err(k.error("kernel size must be odd"));
                }
                Ok(v)
            })?;
            let expansion = n.field("expansion", |e| {
                let v = e.uint()?;
                if v < 2 {
                    return Err(e.error("expansion factor must be at least 2"));
                }
                Ok(v)
            })?;
            Ok(SourceSpec {
                channels,
                depths,
                kernel,
                expansion,
            })
        })?
        .unwrap_or_else(|| SourceSpec {
            channels: blocks.iter().map(BlockSpec::max_channels).collect(),
            depths: blocks.iter().map(|b| b.n_max).collect(),
            kernel: 3,
            expansion: 6,
        });
    Ok(SearchSpaceConfig {
        input_resolution,
        input_channels,
        stem,
        blocks,
        source,
    })
}

#[derive(Serialize)]
struct BlockDoc {
    n_max: usize,
    stride: usize,
    channels: [usize; 3],
    kernels: Vec<usize>,
    expansions: Vec<usize>,
}

#[derive(Serialize)]
struct ConfigDoc {
    v: u64,
    input_resolution: [usize; 2],
    input_channels: usize,
    stem: StemSpec,
    blocks: Vec<BlockDoc>,
    source: SourceSpec,
}

impl From<&SearchSpaceConfig> for ConfigDoc {
    fn from(c: &SearchSpaceConfig) -> Self {
        ConfigDoc {
            v: SCHEMA_VERSION,
            input_resolution: [c.input_resolution.0, c.input_resolution.1],
            input_channels: c.input_channels,
            stem: c.stem,
            blocks: c
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    n_max: b.n_max,
                    stride: b.stride,
                    channels: [b.channels.min, b.channels.max, b.channels.step],
                    kernels: b.kernels.clone(),
                    expansions: b.expansions.clone(),
                })
                .collect(),
            source: c.source.clone(),
        }
    }
}
