//! Discrete architectures: argmax derivation from a trained supernet, the
//! architecture JSON format, and runnable networks with their own parameters.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::json::{self, Node, Owned};
use crate::layers::{self, Ctx, GradScope, MbConvShape};
use crate::numerics::{argmax, BnMode, ParameterBundle, Tape, Tensor, Var};
use crate::searchspace::{OpCandidate, SearchSpaceConfig, StemSpec, SCHEMA_VERSION};
use crate::supernet::{alpha_name, beta_name, Supernet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct DerivedOp {
    pub kernel: usize,
    pub expansion: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DerivedBlock {
    pub channels: usize,
    pub stride: usize,
    pub ops: Vec<DerivedOp>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiscreteArchitecture {
    pub input_resolution: (usize, usize),
    pub input_channels: usize,
    pub stem: StemSpec,
    pub blocks: Vec<DerivedBlock>,
}

/// Candidate indices picked per block: one channel index and one op index
/// per layer (skip included).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub channels: Vec<usize>,
    pub ops: Vec<Vec<usize>>,
}

impl Selection {
    pub fn to_architecture(&self, config: &SearchSpaceConfig) -> Result<DiscreteArchitecture> {
        if self.channels.len() != config.num_blocks() || self.ops.len() != config.num_blocks() {
            return Err(Error::contract("selection does not cover every block"));
        }
        let blocks = config
            .blocks
            .iter()
            .zip(self.channels.iter().zip(&self.ops))
            .map(|(spec, (&ci, ops))| {
                let cands = spec.channel_candidates();
                let channels = *cands
                    .get(ci)
                    .ok_or_else(|| Error::contract(format!("block {}: channel index {ci} out of range", spec.index)))?;
                if ops.len() != spec.n_max {
                    return Err(Error::contract(format!(
                        "block {}: {} layer choices for {} layers",
                        spec.index,
                        ops.len(),
                        spec.n_max
                    )));
                }
                let mut chosen = Vec::new();
                for (l, &o) in ops.iter().enumerate() {
                    let cand = spec.op_candidates(l + 1)?;
                    match cand.get(o) {
                        Some(OpCandidate::MbConv { kernel, expansion }) => chosen.push(DerivedOp {
                            kernel: *kernel,
                            expansion: *expansion,
                            stride: if chosen.is_empty() { spec.stride } else { 1 },
                        }),
                        Some(OpCandidate::Skip) => {}
                        None => {
                            return Err(Error::contract(format!(
                                "block {} layer {}: op index {o} out of range",
                                spec.index,
                                l + 1
                            )))
                        }
                    }
                }
                Ok(DerivedBlock {
                    channels,
                    stride: spec.stride,
                    ops: chosen,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscreteArchitecture {
            input_resolution: config.input_resolution,
            input_channels: config.input_channels,
            stem: config.stem,
            blocks,
        })
    }
}

/// Argmax over logits with ties going to the lowest index.
pub fn select(config: &SearchSpaceConfig, alpha: &[Vec<Vec<f32>>], beta: &[Vec<f32>]) -> Result<Selection> {
    if alpha.len() != config.num_blocks() || beta.len() != config.num_blocks() {
        return Err(Error::contract("logits do not cover every block"));
    }
    for (spec, (a, b)) in config.blocks.iter().zip(alpha.iter().zip(beta)) {
        if b.len() != spec.num_channel_candidates() || a.len() != spec.n_max {
            return Err(Error::contract(format!(
                "block {}: logit shapes do not match the space",
                spec.index
            )));
        }
        for (l, v) in a.iter().enumerate() {
            if v.len() != spec.num_op_candidates(l + 1) {
                return Err(Error::contract(format!(
                    "block {} layer {}: wrong α length",
                    spec.index,
                    l + 1
                )));
            }
        }
    }
    Ok(Selection {
        channels: beta.iter().map(|b| argmax(b)).collect(),
        ops: alpha.iter().map(|a| a.iter().map(|v| argmax(v)).collect()).collect(),
    })
}

pub fn derive_architecture(
    config: &SearchSpaceConfig,
    alpha: &[Vec<Vec<f32>>],
    beta: &[Vec<f32>],
) -> Result<DiscreteArchitecture> {
    select(config, alpha, beta)?.to_architecture(config)
}

/// Raw α/β logits of a supernet, block-major.
pub fn logits(net: &Supernet) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<f32>>)> {
    logits_from_params(&net.config, &net.params)
}

/// Raw α/β logits read from a supernet checkpoint laid out for `config`.
pub fn logits_from_params(
    config: &SearchSpaceConfig,
    params: &ParameterBundle,
) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<f32>>)> {
    let mut alpha = Vec::new();
    let mut beta = Vec::new();
    for spec in &config.blocks {
        let i = spec.index;
        alpha.push(
            (1..=spec.n_max)
                .map(|l| params.get(&alpha_name(i, l)).map(|t| t.data().to_vec()))
                .collect::<Result<Vec<_>>>()?,
        );
        beta.push(params.get(&beta_name(i))?.data().to_vec());
    }
    Ok((alpha, beta))
}

pub fn derive_from_supernet(net: &Supernet) -> Result<DiscreteArchitecture> {
    let (alpha, beta) = logits(net)?;
    derive_architecture(&net.config, &alpha, &beta)
}

impl DiscreteArchitecture {
    /// The hand-crafted source network described by the config.
    pub fn source(config: &SearchSpaceConfig) -> Self {
        let s = &config.source;
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| DerivedBlock {
                channels: s.channels[i],
                stride: spec.stride,
                ops: (0..s.depths[i])
                    .map(|l| DerivedOp {
                        kernel: s.kernel,
                        expansion: s.expansion,
                        stride: if l == 0 { spec.stride } else { 1 },
                    })
                    .collect(),
            })
            .collect();
        DiscreteArchitecture {
            input_resolution: config.input_resolution,
            input_channels: config.input_channels,
            stem: config.stem,
            blocks,
        }
    }

    pub fn output_channels(&self) -> usize {
        self.blocks.last().map_or(self.stem.mbconv_out, |b| b.channels)
    }

    /// Concrete geometry of every layer, with true input widths.
    pub fn layer_shapes(&self) -> Vec<Vec<MbConvShape>> {
        let mut c_in = self.stem.mbconv_out;
        self.blocks
            .iter()
            .map(|b| {
                let shapes = b
                    .ops
                    .iter()
                    .enumerate()
                    .map(|(l, op)| MbConvShape {
                        c_in: if l == 0 { c_in } else { b.channels },
                        c_out: b.channels,
                        kernel: op.kernel,
                        expansion: op.expansion,
                        stride: op.stride,
                    })
                    .collect();
                c_in = b.channels;
                shapes
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::contract("architecture has no blocks"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.ops.is_empty() {
                return Err(Error::contract(format!("block {} has no operations", i + 1)));
            }
            for (l, op) in b.ops.iter().enumerate() {
                let want = if l == 0 { b.stride } else { 1 };
                if op.stride != want {
                    return Err(Error::contract(format!(
                        "block {} op {}: stride {} should be {want}",
                        i + 1,
                        l + 1,
                        op.stride
                    )));
                }
            }
        }
        for shapes in self.layer_shapes() {
            for s in shapes {
                s.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_sorted_string(&ArchDoc::from(self))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc = Owned::parse(text)?;
        let arch = parse_arch(doc.root())?;
        arch.validate()?;
        Ok(arch)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[derive(Serialize)]
struct OpDoc {
    kind: &'static str,
    kernel: usize,
    expansion: usize,
    stride: usize,
}

#[derive(Serialize)]
struct BlockDoc {
    channels: usize,
    stride: usize,
    ops: Vec<OpDoc>,
}

#[derive(Serialize)]
struct ArchDoc {
    v: u64,
    input_resolution: [usize; 2],
    input_channels: usize,
    stem: StemSpec,
    blocks: Vec<BlockDoc>,
}

impl From<&DiscreteArchitecture> for ArchDoc {
    fn from(a: &DiscreteArchitecture) -> Self {
        ArchDoc {
            v: SCHEMA_VERSION,
            input_resolution: [a.input_resolution.0, a.input_resolution.1],
            input_channels: a.input_channels,
            stem: a.stem,
            blocks: a
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    channels: b.channels,
                    stride: b.stride,
                    ops: b
                        .ops
                        .iter()
                        .map(|o| OpDoc {
                            kind: "mbconv",
                            kernel: o.kernel,
                            expansion: o.expansion,
                            stride: o.stride,
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

fn parse_arch(root: Node<'_>) -> Result<DiscreteArchitecture> {
    root.only_keys(&["v", "input_resolution", "input_channels", "stem", "blocks"])?;
    root.field("v", |n| {
        if n.uint()? as u64 != SCHEMA_VERSION {
            return Err(n.error("unsupported schema version"));
        }
        Ok(())
    })?;
    let input_resolution = root.field("input_resolution", |n| match n.uint_list()?.as_slice() {
        [h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        _ => Err(n.error("expected [height, width] with positive entries")),
    })?;
    let input_channels = root.field("input_channels", |n| n.uint())?;
    let stem = root.field("stem", |n| {
        n.only_keys(&["conv_out", "mbconv_out"])?;
        Ok(StemSpec {
            conv_out: n.field("conv_out", |c| c.uint())?,
            mbconv_out: n.field("mbconv_out", |c| c.uint())?,
        })
    })?;
    let blocks = root.field("blocks", |n| {
        n.items(|_, b| {
            b.only_keys(&["channels", "stride", "ops"])?;
            let channels = b.field("channels", |c| c.uint())?;
            let stride = b.field("stride", |s| s.uint())?;
            let ops = b.field("ops", |ops| {
                ops.items(|_, o| {
                    let kind = o.field("kind", |k| k.str().map(str::to_string))?;
                    if kind != "mbconv" {
                        return Err(Error::parse(
                            format!("{}.kind", o.path()),
                            format!("unknown op kind `{kind}`"),
                        ));
                    }
                    o.only_keys(&["kind", "kernel", "expansion", "stride"])?;
                    Ok(DerivedOp {
                        kernel: o.field("kernel", |k| k.uint())?,
                        expansion: o.field("expansion", |e| e.uint())?,
                        stride: o.field("stride", |s| s.uint())?,
                    })
                })
            })?;
            Ok(DerivedBlock { channels, stride, ops })
        })
    })?;
    Ok(DiscreteArchitecture {
        input_resolution,
        input_channels,
        stem,
        blocks,
    })
}

pub fn layer_prefix(block: usize, layer: usize) -> String {
    format!("block{block}/layer{layer}")
}

/// Fresh backbone parameters for `arch` (stem and blocks, no head).
pub fn instantiate(arch: &DiscreteArchitecture, seed: u64) -> Result<ParameterBundle> {
    arch.validate()?;
    let mut bundle = ParameterBundle::new();
    layers::init_stem(&mut bundle, seed, &arch.stem, arch.input_channels);
    for (i, shapes) in arch.layer_shapes().iter().enumerate() {
        for (l, shape) in shapes.iter().enumerate() {
            layers::init_mbconv(&mut bundle, seed, &layer_prefix(i + 1, l + 1), shape);
        }
    }
    bundle.metadata = Some(arch.to_json()?);
    Ok(bundle)
}

/// Per-block outputs of the discrete backbone over the tensors in `ctx`.
pub fn forward(arch: &DiscreteArchitecture, ctx: &mut Ctx<'_>, x: Var) -> Result<Vec<Var>> {
    let mut h = layers::stem_forward(ctx, x, &arch.stem, arch.input_channels)?;
    let mut outs = Vec::with_capacity(arch.blocks.len());
    for (i, shapes) in arch.layer_shapes().iter().enumerate() {
        for (l, shape) in shapes.iter().enumerate() {
            h = layers::mbconv_forward(ctx, h, &layer_prefix(i + 1, l + 1), shape)?;
        }
        outs.push(h);
    }
    Ok(outs)
}

/// Eval-mode forward without gradients; returns per-block feature maps.
pub fn evaluate(arch: &DiscreteArchitecture, params: &mut ParameterBundle, input: Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let x = tape.constant(input);
    let outs = {
        let mut ctx = Ctx::new(&mut tape, params, BnMode::Eval, GradScope::None);
        forward(arch, &mut ctx, x)?
    };
    Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
}
