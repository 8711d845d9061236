//! Continuous relaxation of the search space.
//!
//! A layer is a softmax(α)-weighted sum of its candidate operations. A block
//! runs its `n_max` layers once at the widest candidate width and multiplies
//! the result by a softmax(β)-weighted sum of channel masks. The next block
//! consumes that masked full-width map.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, Ctx, GradScope, MbConvShape};
use crate::numerics::{softmax, BnMode, ParameterBundle, Tape, Tensor, Var};
use crate::searchspace::{BlockSpec, OpCandidate, SearchSpaceConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Mask m covers channels `[c_{m-1}, c_m)`.
    #[default]
    NonOverlapping,
    /// Mask m covers channels `[0, c_m)`.
    Overlapping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// One block at the widest width, shared by every channel candidate.
    #[default]
    Shared,
    /// One block per channel candidate, each at its own width; outputs are
    /// zero-padded to the widest width before weighting.
    Individual,
}

impl FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_overlapping" | "non-overlapping" => Ok(MaskMode::NonOverlapping),
            "overlapping" => Ok(MaskMode::Overlapping),
            _ => Err(Error::param(format!("unknown mask mode `{s}`"))),
        }
    }
}

impl FromStr for BlockMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(BlockMode::Shared),
            "individual" => Ok(BlockMode::Individual),
            _ => Err(Error::param(format!("unknown block mode `{s}`"))),
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::NonOverlapping => "non_overlapping",
            MaskMode::Overlapping => "overlapping",
        })
    }
}

impl fmt::Display for BlockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockMode::Shared => "shared",
            BlockMode::Individual => "individual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SupernetOptions {
    pub mask_mode: MaskMode,
    pub block_mode: BlockMode,
}

/// Binary channel masks of one block, one per channel candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMasks {
    pub mode: MaskMode,
    pub candidates: Vec<usize>,
    /// `masks[m][ch]` ∈ {0, 1}, each of length `c_M`.
    pub masks: Vec<Vec<f32>>,
}

impl ChannelMasks {
    pub fn width(&self) -> usize {
        self.masks.first().map_or(0, Vec::len)
    }

    /// Row-major `[width × M]` matrix whose columns are the masks.
    pub fn matrix(&self) -> Vec<f32> {
        let (w, m) = (self.width(), self.masks.len());
        let mut out = vec![0.0; w * m];
        for (j, mask) in self.masks.iter().enumerate() {
            for (ch, &v) in mask.iter().enumerate() {
                out[ch * m + j] = v;
            }
        }
        out
    }

    /// `Σ_m weights[m] · mask_m`.
    pub fn combine(&self, weights: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.width()];
        for (mask, &p) in self.masks.iter().zip(weights) {
            for (o, &v) in out.iter_mut().zip(mask) {
                *o += p * v;
            }
        }
        out
    }
}

pub fn build_masks(candidates: &[usize], mode: MaskMode) -> Result<ChannelMasks> {
    if candidates.is_empty() || candidates.windows(2).any(|w| w[0] >= w[1]) || candidates[0] == 0 {
        return Err(Error::param(format!(
            "channel candidates must be positive and strictly ascending, got {candidates:?}"
        )));
    }
    let width = *candidates.last().expect("non-empty");
    let masks = candidates
        .iter()
        .enumerate()
        .map(|(m, &c)| {
            let lo = match mode {
                MaskMode::NonOverlapping if m > 0 => candidates[m - 1],
                _ => 0,
            };
            (0..width)
                .map(|ch| if ch >= lo && ch < c { 1.0 } else { 0.0 })
                .collect()
        })
        .collect();
    Ok(ChannelMasks {
        mode,
        candidates: candidates.to_vec(),
        masks,
    })
}

pub fn alpha_name(block: usize, layer: usize) -> String {
    format!("alpha/{block}/{layer}")
}

pub fn beta_name(block: usize) -> String {
    format!("beta/{block}")
}

/// One mixed operation: its candidates and their concrete geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedLayer {
    /// Parameter prefix, e.g. `block2/layer1`.
    pub prefix: String,
    pub alpha: String,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub ops: Vec<OpCandidate>,
}

impl MixedLayer {
    pub fn new(
        prefix: String,
        alpha: String,
        c_in: usize,
        c_out: usize,
        stride: usize,
        ops: Vec<OpCandidate>,
    ) -> Result<Self> {
        if ops.iter().any(OpCandidate::is_skip) && (stride != 1 || c_in != c_out) {
            return Err(Error::contract(format!(
                "{prefix}: skip needs stride 1 and equal widths (stride {stride}, {c_in} -> {c_out})"
            )));
        }
        Ok(MixedLayer {
            prefix,
            alpha,
            c_in,
            c_out,
            stride,
            ops,
        })
    }

    pub fn op_prefix(&self, o: usize) -> String {
        format!("{}/op{o}", self.prefix)
    }

    /// Geometry of candidate `o`, `None` for skip.
    pub fn op_shape(&self, o: usize) -> Option<MbConvShape> {
        match self.ops[o] {
            OpCandidate::MbConv { kernel, expansion } => Some(MbConvShape {
                c_in: self.c_in,
                c_out: self.c_out,
                kernel,
                expansion,
                stride: self.stride,
            }),
            OpCandidate::Skip => None,
        }
    }

    fn init(&self, bundle: &mut ParameterBundle, seed: u64) {
        for o in 0..self.ops.len() {
            if let Some(shape) = self.op_shape(o) {
                layers::init_mbconv(bundle, seed, &self.op_prefix(o), &shape);
            }
        }
    }

    /// Output of candidate `o` alone.
    pub fn candidate_forward(&self, ctx: &mut Ctx<'_>, x: Var, o: usize) -> Result<Var> {
        match self.op_shape(o) {
            Some(shape) => layers::mbconv_forward(ctx, x, &self.op_prefix(o), &shape),
            None => Ok(x),
        }
    }

    /// `Σ_o softmax(α)_o · o(x)`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.c_in {
            return Err(Error::dim(format!(
                "{}: expected {} channels, got {c}",
                self.prefix, self.c_in
            )));
        }
        let outs = (0..self.ops.len())
            .map(|o| self.candidate_forward(ctx, x, o))
            .collect::<Result<Vec<_>>>()?;
        let logits = ctx.param(&self.alpha)?;
        let weights = ctx.tape.softmax(logits)?;
        ctx.tape.weighted_sum(&outs, weights)
    }
}

/// A chain of mixed layers at one fixed width.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub width: usize,
    pub layers: Vec<MixedLayer>,
}

impl LayerStack {
    fn new(spec: &BlockSpec, c_in: usize, width: usize, prefix: &str) -> Result<Self> {
        let layers = (1..=spec.n_max)
            .map(|l| {
                let (cin, stride) = if l == 1 { (c_in, spec.stride) } else { (width, 1) };
                MixedLayer::new(
                    format!("{prefix}/layer{l}"),
                    alpha_name(spec.index, l),
                    cin,
                    width,
                    stride,
                    spec.op_candidates(l)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerStack { width, layers })
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        self.layers.iter().try_fold(x, |h, layer| layer.forward(ctx, h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedBlock {
    pub spec: BlockSpec,
    pub c_in: usize,
    pub masks: ChannelMasks,
    pub mode: BlockMode,
    /// One stack in shared mode, one per channel candidate in individual mode.
    pub stacks: Vec<LayerStack>,
}

impl MixedBlock {
    pub fn new(spec: &BlockSpec, c_in: usize, options: SupernetOptions) -> Result<Self> {
        let candidates = spec.channel_candidates();
        let masks = build_masks(&candidates, options.mask_mode)?;
        let i = spec.index;
        let stacks = match options.block_mode {
            BlockMode::Shared => vec![LayerStack::new(spec, c_in, spec.max_channels(), &format!("block{i}"))?],
            BlockMode::Individual => candidates
                .iter()
                .enumerate()
                .map(|(m, &c)| LayerStack::new(spec, c_in, c, &format!("block{i}/cand{m}")))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(MixedBlock {
            spec: spec.clone(),
            c_in,
            masks,
            mode: options.block_mode,
            stacks,
        })
    }

    pub fn index(&self) -> usize {
        self.spec.index
    }

    pub fn width(&self) -> usize {
        self.spec.max_channels()
    }

    pub fn beta(&self) -> String {
        beta_name(self.spec.index)
    }

    /// The shared layers (first stack in individual mode).
    pub fn layers(&self) -> &[MixedLayer] {
        &self.stacks[0].layers
    }

    fn init(&self, bundle: &mut ParameterBundle, seed: u64) {
        for stack in &self.stacks {
            for layer in &stack.layers {
                layer.init(bundle, seed);
            }
        }
        for (l, layer) in self.layers().iter().enumerate() {
            bundle.insert(
                alpha_name(self.index(), l + 1),
                Tensor::zeros(&[layer.ops.len()]).trainable(),
            );
        }
        bundle.insert(self.beta(), Tensor::zeros(&[self.masks.candidates.len()]).trainable());
    }

    /// Shared: `B(x) ∘ Σ_c softmax(β)_c 𝕄_c` with a single pass of the layers.
    /// Individual: `Σ_c softmax(β)_c · pad(B_c(x))`.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.tape.shape(x)[1];
        if c != self.c_in {
            return Err(Error::dim(format!(
                "block{}: expected {} channels, got {c}",
                self.index(),
                self.c_in
            )));
        }
        let logits = ctx.param(&self.beta())?;
        let p = ctx.tape.softmax(logits)?;
        match self.mode {
            BlockMode::Shared => {
                let h = self.stacks[0].forward(ctx, x)?;
                let m = self.masks.candidates.len();
                let scale = ctx.tape.matvec_const(self.masks.matrix(), self.width(), m, p)?;
                ctx.tape.channel_scale(h, scale)
            }
            BlockMode::Individual => {
                let outs = self
                    .stacks
                    .iter()
                    .map(|stack| {
                        let h = stack.forward(ctx, x)?;
                        ctx.tape.pad_channels(h, self.width())
                    })
                    .collect::<Result<Vec<_>>>()?;
                ctx.tape.weighted_sum(&outs, p)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SupernetOutput {
    /// One feature map per block, each at that block's widest width.
    pub blocks: Vec<Var>,
    pub features: Var,
}

/// Stem plus mixed blocks. Operation weights, α, β and BN statistics all live
/// in `params` under their reserved names.
#[derive(Debug, Clone)]
pub struct Supernet {
    pub config: SearchSpaceConfig,
    pub options: SupernetOptions,
    pub blocks: Vec<MixedBlock>,
    pub params: ParameterBundle,
}

impl Supernet {
    /// Structure only, with an empty parameter bundle.
    pub fn skeleton(config: &SearchSpaceConfig, options: SupernetOptions) -> Result<Self> {
        let blocks = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| MixedBlock::new(spec, config.supernet_input_width(i), options))
            .collect::<Result<Vec<_>>>()?;
        Ok(Supernet {
            config: config.clone(),
            options,
            blocks,
            params: ParameterBundle::new(),
        })
    }

    /// Fresh supernet: truncated-normal convolutions, unit BN, zero logits.
    pub fn build(config: &SearchSpaceConfig, options: SupernetOptions, seed: u64) -> Result<Self> {
        let mut net = Self::skeleton(config, options)?;
        layers::init_stem(&mut net.params, seed, &config.stem, config.input_channels);
        for block in &net.blocks {
            block.init(&mut net.params, seed);
        }
        Ok(net)
    }

    /// Rebuilds the structure around a loaded checkpoint and checks that every
    /// expected tensor is present with the right shape.
    pub fn from_params(config: &SearchSpaceConfig, options: SupernetOptions, params: ParameterBundle) -> Result<Self> {
        let reference = Self::build(config, options, 0)?;
        for (name, t) in reference.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::contract(format!("checkpoint lacks `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::contract(format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        let mut net = reference;
        net.params = params;
        Ok(net)
    }

    pub fn output_channels(&self) -> usize {
        self.blocks
            .last()
            .map_or(self.config.stem.mbconv_out, MixedBlock::width)
    }

    /// Forward over the tensors in `ctx.params`, which may be another bundle.
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<SupernetOutput> {
        forward_blocks(&self.config, &self.blocks, ctx, x)
    }

    /// Convenience forward over `self.params`.
    pub fn run(&mut self, tape: &mut Tape, input: Tensor, mode: BnMode, scope: GradScope) -> Result<SupernetOutput> {
        let x = tape.constant(input);
        let mut ctx = Ctx::new(tape, &mut self.params, mode, scope);
        forward_blocks(&self.config, &self.blocks, &mut ctx, x)
    }

    pub fn alpha(&self, block: usize, layer: usize) -> Result<&[f32]> {
        Ok(self.params.get(&alpha_name(block, layer))?.data())
    }

    pub fn beta(&self, block: usize) -> Result<&[f32]> {
        Ok(self.params.get(&beta_name(block))?.data())
    }

    /// Names of every architecture logit tensor.
    pub fn arch_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| layers::is_arch_name(n))
            .map(str::to_string)
            .collect()
    }

    /// Names of every trainable operation weight (stem, blocks, head).
    pub fn weight_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, t)| t.requires_grad && !layers::is_arch_name(n))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// Per-block softmax(β) and per-layer softmax(α).
    pub fn probabilities(&self) -> Result<(Vec<Vec<Vec<f32>>>, Vec<Vec<f32>>)> {
        let mut alpha = Vec::new();
        let mut beta = Vec::new();
        for b in &self.blocks {
            alpha.push(
                (1..=b.spec.n_max)
                    .map(|l| self.alpha(b.index(), l).map(softmax))
                    .collect::<Result<Vec<_>>>()?,
            );
            beta.push(softmax(self.beta(b.index())?));
        }
        Ok((alpha, beta))
    }
}

pub(crate) fn forward_blocks(
    config: &SearchSpaceConfig,
    blocks: &[MixedBlock],
    ctx: &mut Ctx<'_>,
    x: Var,
) -> Result<SupernetOutput> {
    let mut h = layers::stem_forward(ctx, x, &config.stem, config.input_channels)?;
    let mut outs = Vec::with_capacity(blocks.len());
    for block in blocks {
        h = block.forward(ctx, h)?;
        outs.push(h);
    }
    Ok(SupernetOutput {
        blocks: outs,
        features: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::backward;
    use crate::rng::{prng, truncated_normal};

    fn tiny_config(n_max: usize, channels: &str) -> SearchSpaceConfig {
        SearchSpaceConfig::from_json(&format!(
            r#"{{"v": 1, "input_resolution": [8, 8], "stem": {{"conv_out": 4, "mbconv_out": 4}},
                "kernels": [3, 5], "expansions": [3],
                "blocks": [{{"n_max": {n_max}, "stride": 2, "channels": {channels}}}]}}"#
        ))
        .unwrap()
    }

    fn input(shape: &[usize], seed: u64) -> Tensor {
        truncated_normal(&mut prng(seed, "x"), shape, 1.0)
    }

    #[test]
    fn mask_examples() {
        let non = build_masks(&[2, 4], MaskMode::NonOverlapping).unwrap();
        assert_eq!(non.masks, vec![vec![1.0, 1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0]]);
        let over = build_masks(&[2, 4], MaskMode::Overlapping).unwrap();
        assert_eq!(over.masks, vec![vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4]]);
        assert_eq!(non.matrix(), vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(build_masks(&[4, 2], MaskMode::Overlapping).is_err());
    }

    #[test]
    fn table1_block_candidate_counts() {
        let net = Supernet::skeleton(&SearchSpaceConfig::table1(), SupernetOptions::default()).unwrap();
        let m: Vec<usize> = net.blocks.iter().map(|b| b.masks.candidates.len()).collect();
        assert_eq!(m, [7, 11, 13, 15, 33, 37]);
        for b in &net.blocks {
            assert_eq!(b.layers()[0].stride, b.spec.stride);
            assert!(b.layers()[1..].iter().all(|l| l.stride == 1 && l.c_in == b.width()));
            assert!(b.layers().iter().all(|l| l.c_out == b.width()));
        }
    }

    #[test]
    fn init_is_uniform_and_deterministic() {
        let cfg = SearchSpaceConfig::desk();
        let a = Supernet::build(&cfg, SupernetOptions::default(), 11).unwrap();
        let b = Supernet::build(&cfg, SupernetOptions::default(), 11).unwrap();
        assert_eq!(a.params.to_bytes().unwrap(), b.params.to_bytes().unwrap());
        let (alpha, beta) = a.probabilities().unwrap();
        assert!(alpha[0][1].iter().all(|&p| (p - 1.0 / 7.0).abs() < 1e-7));
        assert!(beta[1].iter().all(|&p| (p - 0.25).abs() < 1e-7));
        let c = Supernet::build(&cfg, SupernetOptions::default(), 12).unwrap();
        assert_ne!(a.params.to_bytes().unwrap(), c.params.to_bytes().unwrap());
    }

    #[test]
    fn skip_on_strided_layer_is_rejected() {
        let err = MixedLayer::new("l".into(), "a".into(), 4, 4, 2, vec![OpCandidate::Skip]);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn desk_block_resolutions() {
        let mut net = Supernet::build(&SearchSpaceConfig::desk(), SupernetOptions::default(), 0).unwrap();
        let mut tape = Tape::new();
        let out = net
            .run(&mut tape, input(&[1, 3, 32, 32], 0), BnMode::Eval, GradScope::None)
            .unwrap();
        let sizes: Vec<&[usize]> = out.blocks.iter().map(|&v| &tape.shape(v)[2..]).collect();
        assert_eq!(sizes, [&[8, 8], &[4, 4], &[2, 2]]);
    }

    #[test]
    fn zero_input_is_finite_and_batch_independent_in_eval() {
        let mut net = Supernet::build(&SearchSpaceConfig::desk(), SupernetOptions::default(), 1).unwrap();
        let mut tape = Tape::new();
        let out = net
            .run(&mut tape, Tensor::zeros(&[1, 3, 32, 32]), BnMode::Eval, GradScope::None)
            .unwrap();
        assert!(tape.value(out.features).is_finite());

        let one = input(&[1, 3, 32, 32], 4);
        let mut twice = one.data().to_vec();
        twice.extend_from_slice(one.data());
        let mut t1 = Tape::new();
        let a = net.run(&mut t1, one, BnMode::Eval, GradScope::None).unwrap();
        let mut t2 = Tape::new();
        let b = net
            .run(
                &mut t2,
                Tensor::new(vec![2, 3, 32, 32], twice).unwrap(),
                BnMode::Eval,
                GradScope::None,
            )
            .unwrap();
        let fa = t1.value(a.features).data();
        let fb = t2.value(b.features).data();
        assert_eq!(&fb[..fa.len()], fa);
        assert_eq!(&fb[fa.len()..], fa);
    }

    #[test]
    fn single_candidate_block_is_unmasked() {
        let cfg = tiny_config(2, "[4, 4, 1]");
        let mut net = Supernet::build(&cfg, SupernetOptions::default(), 2).unwrap();
        let block = net.blocks[0].clone();
        let x0 = input(&[2, 4, 4, 4], 1);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let mut ctx = Ctx::new(&mut tape, &mut net.params, BnMode::Eval, GradScope::None);
        let masked = block.forward(&mut ctx, x).unwrap();
        let raw = block.stacks[0].forward(&mut ctx, x).unwrap();
        assert_eq!(tape.value(masked).data(), tape.value(raw).data());
    }

    #[test]
    fn uniform_beta_scales_every_channel_by_one_over_m() {
        let cfg = tiny_config(1, "[2, 8, 2]");
        let mut net = Supernet::build(&cfg, SupernetOptions::default(), 3).unwrap();
        let block = net.blocks[0].clone();
        let mut tape = Tape::new();
        let x = tape.constant(input(&[1, 4, 4, 4], 2));
        let mut ctx = Ctx::new(&mut tape, &mut net.params, BnMode::Eval, GradScope::None);
        let masked = block.forward(&mut ctx, x).unwrap();
        let raw = block.stacks[0].forward(&mut ctx, x).unwrap();
        for (m, r) in tape.value(masked).data().iter().zip(tape.value(raw).data()) {
            assert!((m - r / 4.0).abs() <= 1e-7 * r.abs().max(1.0));
        }
    }

    #[test]
    fn shared_block_pass_count_is_independent_of_m() {
        let count = |channels: &str| {
            let cfg = tiny_config(2, channels);
            let mut net = Supernet::build(&cfg, SupernetOptions::default(), 0).unwrap();
            let mut tape = Tape::new();
            net.run(&mut tape, input(&[1, 3, 8, 8], 0), BnMode::Train, GradScope::All)
                .unwrap();
            tape.op_counts()
        };
        assert_eq!(count("[8, 8, 1]"), count("[2, 8, 2]"));
    }

    #[test]
    fn every_logit_gets_a_gradient() {
        for options in [
            SupernetOptions::default(),
            SupernetOptions {
                mask_mode: MaskMode::Overlapping,
                block_mode: BlockMode::Individual,
            },
        ] {
            let cfg = tiny_config(2, "[2, 6, 2]");
            let mut net = Supernet::build(&cfg, options, 5).unwrap();
            for name in net.arch_names() {
                // break the symmetry of zero init
                let t = net.params.get_mut(&name).unwrap();
                let v = truncated_normal(&mut prng(1, &name), t.shape(), 0.5);
                t.data_mut().copy_from_slice(v.data());
            }
            let mut tape = Tape::new();
            let out = net
                .run(
                    &mut tape,
                    input(&[2, 3, 8, 8], 3),
                    BnMode::Train,
                    GradScope::Architecture,
                )
                .unwrap();
            let sq = tape.mul(out.features, out.features).unwrap();
            let loss = tape.sum(sq);
            backward(&tape, loss, &mut net.params).unwrap();
            for name in net.arch_names() {
                let g = net.params.get(&name).unwrap().grad.as_ref().expect(&name);
                assert!(g.iter().all(|v| v.is_finite()));
            }
            let gb = net.params.get("beta/1").unwrap().grad.clone().unwrap();
            assert!(gb.windows(2).any(|w| w[0] != w[1]));
            assert!(net
                .params
                .get("block1/layer1/op0/dw/weight")
                .map_or(true, |t| t.grad.is_none()));
        }
    }
}
