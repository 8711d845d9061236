//! Transfer of source-network weights onto the supernet and onto derived
//! architectures.
//!
//! Every target tensor is resized from its source counterpart by one
//! positional rule. Channel axes (0 and 1 of a conv kernel, 0 of a vector)
//! keep leading slices and either zero-fill or drop trailing ones. Kernel
//! axes (2 and 3) are aligned on their centres. Layers beyond the source
//! depth copy the source block's last layer. Entries a rule fills with 0 are
//! remembered so [`add_mapping_noise`] can perturb exactly those.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::derive::{self, layer_prefix, DiscreteArchitecture};
use crate::error::{Error, Result};
use crate::json;
use crate::layers::{self, is_arch_name};
use crate::numerics::{ParameterBundle, Tensor};
use crate::rng;
use crate::supernet::Supernet;

pub const DEFAULT_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingRule {
    Direct,
    DepthCopy,
    ChannelPad,
    ChannelTruncate,
    KernelEmbed,
    KernelCrop,
}

impl MappingRule {
    /// Rules under which an eps = 0 mapping computes the source function.
    pub fn preserves_function(self) -> bool {
        matches!(
            self,
            MappingRule::Direct | MappingRule::KernelEmbed | MappingRule::ChannelPad
        )
    }
}

impl fmt::Display for MappingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MappingRule::Direct => "direct",
            MappingRule::DepthCopy => "depth-copy",
            MappingRule::ChannelPad => "channel-pad",
            MappingRule::ChannelTruncate => "channel-truncate",
            MappingRule::KernelEmbed => "kernel-embed",
            MappingRule::KernelCrop => "kernel-crop",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub rule: MappingRule,
    pub source: String,
    pub noise: bool,
}

/// One entry per mapped target tensor. Architecture logits are not mapped
/// and never appear.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MappingReport {
    pub entries: BTreeMap<String, MappingEntry>,
    /// Flat indices of zero-assigned entries in trainable target tensors.
    zero_assigned: BTreeMap<String, Vec<usize>>,
}

impl MappingReport {
    pub fn zero_assigned(&self, name: &str) -> &[usize] {
        self.zero_assigned.get(name).map_or(&[], Vec::as_slice)
    }

    pub fn count(&self, rule: MappingRule) -> usize {
        self.entries.values().filter(|e| e.rule == rule).count()
    }

    pub fn to_json(&self) -> Result<String> {
        json::to_sorted_string(&self.entries)
    }

    /// Reads the rule table back. Zero-assignment positions are not stored,
    /// so the result cannot drive [`add_mapping_noise`].
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(MappingReport {
            entries: serde_json::from_str(text)?,
            zero_assigned: BTreeMap::new(),
        })
    }

    /// Checks that `bundle`'s mapped tensors and the report coincide.
    pub fn check_complete(&self, bundle: &ParameterBundle) -> Result<()> {
        let expected: Vec<&str> = bundle.names().filter(|n| !is_arch_name(n)).collect();
        let got: Vec<&str> = self.entries.keys().map(String::as_str).collect();
        if expected != got {
            let missing: Vec<_> = expected.iter().filter(|n| !self.entries.contains_key(**n)).collect();
            return Err(Error::contract(format!(
                "mapping report incomplete, missing {missing:?}"
            )));
        }
        Ok(())
    }

    fn record(
        &mut self,
        target: &str,
        source: &str,
        rule: MappingRule,
        zeros: Vec<usize>,
        trainable: bool,
    ) -> Result<()> {
        let entry = MappingEntry {
            rule,
            source: source.to_string(),
            noise: false,
        };
        if self.entries.insert(target.to_string(), entry).is_some() {
            return Err(Error::contract(format!("{target} mapped twice")));
        }
        if trainable && !zeros.is_empty() {
            self.zero_assigned.insert(target.to_string(), zeros);
        }
        Ok(())
    }
}

/// Source layer (1-based) feeding each of `target` layers, and whether it is
/// a copy of the last source layer.
pub fn map_depth(source_depth: usize, target_depth: usize) -> Result<Vec<(usize, bool)>> {
    if source_depth == 0 {
        return Err(Error::param("source block has no layers"));
    }
    Ok((1..=target_depth)
        .map(|l| {
            if l <= source_depth {
                (l, false)
            } else {
                (source_depth, true)
            }
        })
        .collect())
}

/// Positional resize; returns the new tensor and the flat indices that had
/// no source entry. Those are set to `fill`.
fn remap(src: &Tensor, target: &[usize], fill: f32) -> Result<(Tensor, Vec<usize>)> {
    let s = src.shape();
    if s.len() != target.len() {
        return Err(Error::dim(format!(
            "cannot map rank {} tensor {s:?} to {target:?}",
            s.len()
        )));
    }
    let rank = s.len();
    let mut offset = vec![0isize; rank];
    if rank == 4 {
        for a in 2..4 {
            if s[a].is_multiple_of(2) || target[a].is_multiple_of(2) {
                return Err(Error::param(format!(
                    "kernel sizes must be odd, got {} and {}",
                    s[a], target[a]
                )));
            }
            offset[a] = (s[a] as isize - target[a] as isize) / 2;
        }
    }
    let mut src_strides = vec![1usize; rank];
    for a in (0..rank.saturating_sub(1)).rev() {
        src_strides[a] = src_strides[a + 1] * s[a + 1];
    }
    let numel: usize = target.iter().product();
    let mut data = vec![fill; numel];
    let mut zeros = Vec::new();
    let mut idx = vec![0usize; rank];
    for (flat, out) in data.iter_mut().enumerate() {
        let mut src_flat = 0usize;
        let mut hit = true;
        for a in 0..rank {
            let j = idx[a] as isize + offset[a];
            if j < 0 || j as usize >= s[a] {
                hit = false;
                break;
            }
            src_flat += j as usize * src_strides[a];
        }
        if hit {
            *out = src.data()[src_flat];
        } else {
            zeros.push(flat);
        }
        for a in (0..rank).rev() {
            idx[a] += 1;
            if idx[a] < target[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    let mut t = Tensor::new(target.to_vec(), data)?;
    t.requires_grad = src.requires_grad;
    Ok((t, zeros))
}

/// Centre-embeds (zero ring) or centre-crops the two trailing kernel axes.
pub fn map_kernel(weight: &Tensor, target_k: usize) -> Result<Tensor> {
    let s = weight.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("kernel mapping needs a 4-d weight, got {s:?}")));
    }
    if target_k.is_multiple_of(2) {
        return Err(Error::param(format!("target kernel {target_k} must be odd")));
    }
    Ok(remap(weight, &[s[0], s[1], target_k, target_k], 0.0)?.0)
}

/// Zero-pads or truncates trailing slices along a channel `axis`.
pub fn map_channels(weight: &Tensor, axis: usize, target_c: usize) -> Result<Tensor> {
    let s = weight.shape();
    let channel_axes = if s.len() == 4 { 2 } else { s.len() };
    if axis >= channel_axes {
        return Err(Error::param(format!("axis {axis} is not a channel axis of {s:?}")));
    }
    let mut target = s.to_vec();
    target[axis] = target_c;
    Ok(remap(weight, &target, 0.0)?.0)
}

fn classify(src: &[usize], target: &[usize], depth_copy: bool) -> MappingRule {
    if depth_copy {
        return MappingRule::DepthCopy;
    }
    if src.len() == 4 && src[2] != target[2] {
        return if target[2] > src[2] {
            MappingRule::KernelEmbed
        } else {
            MappingRule::KernelCrop
        };
    }
    let channel_axes = src.len().min(2);
    let diff: Vec<_> = (0..channel_axes).filter(|&a| src[a] != target[a]).collect();
    if diff.is_empty() {
        MappingRule::Direct
    } else if diff.iter().any(|&a| target[a] < src[a]) {
        MappingRule::ChannelTruncate
    } else {
        MappingRule::ChannelPad
    }
}

/// Maps one tensor into `target` and records it.
fn map_tensor(
    source: &ParameterBundle,
    src_name: &str,
    target: &mut ParameterBundle,
    tgt_name: &str,
    depth_copy: bool,
    report: &mut MappingReport,
) -> Result<()> {
    let src = source
        .get(src_name)
        .map_err(|_| Error::contract(format!("no source tensor {src_name} for {tgt_name}")))?;
    let old = target.get(tgt_name)?;
    let shape = old.shape().to_vec();
    let trainable = old.requires_grad;
    let fill = if tgt_name.ends_with("running_var") { 1.0 } else { 0.0 };
    let rule = classify(src.shape(), &shape, depth_copy);
    let (mut t, zeros) = remap(src, &shape, fill)?;
    t.requires_grad = trainable;
    target.insert(tgt_name, t);
    report.record(tgt_name, src_name, rule, zeros, trainable)
}

/// `(target prefix, source prefix, depth copy)` for every layer-like unit.
type PrefixMap = Vec<(String, String, bool)>;

fn map_prefixed(
    source: &ParameterBundle,
    target: &mut ParameterBundle,
    prefixes: &PrefixMap,
    report: &mut MappingReport,
) -> Result<()> {
    let names: Vec<String> = target
        .names()
        .filter(|n| !is_arch_name(n))
        .map(str::to_string)
        .collect();
    for name in names {
        let hit = prefixes
            .iter()
            .filter(|(t, _, _)| name.starts_with(t.as_str()) && name[t.len()..].starts_with('/'))
            .max_by_key(|(t, _, _)| t.len());
        let Some((t, s, copy)) = hit else {
            return Err(Error::contract(format!("no mapping rule covers {name}")));
        };
        let src_name = format!("{s}{}", &name[t.len()..]);
        map_tensor(source, &src_name, target, &name, *copy, report)?;
    }
    Ok(())
}

fn check_stem(
    source_arch: &DiscreteArchitecture,
    stem: crate::searchspace::StemSpec,
    input_channels: usize,
) -> Result<()> {
    if source_arch.stem != stem || source_arch.input_channels != input_channels {
        return Err(Error::contract(format!(
            "incompatible stem: source {:?} with {} input channels, target {:?} with {}",
            source_arch.stem, source_arch.input_channels, stem, input_channels
        )));
    }
    Ok(())
}

fn add_head_if_sourced(
    source: &ParameterBundle,
    target: &mut ParameterBundle,
    c_in: usize,
    prefixes: &mut PrefixMap,
) -> Result<()> {
    if let Ok(w) = source.get("head/fc/weight") {
        if !target.contains("head/fc/weight") {
            layers::init_head(target, 0, c_in, w.shape()[0]);
        }
        prefixes.push(("head".into(), "head".into(), false));
    }
    Ok(())
}

/// Architecture stored in a bundle's metadata.
pub fn source_architecture(bundle: &ParameterBundle) -> Result<DiscreteArchitecture> {
    let meta = bundle
        .metadata
        .as_deref()
        .ok_or_else(|| Error::contract("source bundle carries no architecture metadata"))?;
    DiscreteArchitecture::from_json(meta)
}

/// Maps the source onto every op candidate of every mixed layer (and every
/// candidate stack in individual mode). Skip candidates carry no tensors.
pub fn map_to_supernet(
    source_arch: &DiscreteArchitecture,
    source: &ParameterBundle,
    mut net: Supernet,
    eps: f32,
    seed: u64,
) -> Result<(Supernet, MappingReport)> {
    check_stem(source_arch, net.config.stem, net.config.input_channels)?;
    if source_arch.blocks.len() != net.blocks.len() {
        return Err(Error::contract(format!(
            "source has {} blocks, search space has {}",
            source_arch.blocks.len(),
            net.blocks.len()
        )));
    }
    let mut prefixes: PrefixMap = vec![("stem".into(), "stem".into(), false)];
    for block in &net.blocks {
        let i = block.index();
        let depths = map_depth(source_arch.blocks[i - 1].ops.len(), block.spec.n_max)?;
        for stack in &block.stacks {
            for (layer, &(src_l, copy)) in stack.layers.iter().zip(&depths) {
                for o in 0..layer.ops.len() {
                    if layer.op_shape(o).is_some() {
                        prefixes.push((layer.op_prefix(o), layer_prefix(i, src_l), copy));
                    }
                }
            }
        }
    }
    let c_out = net.output_channels();
    add_head_if_sourced(source, &mut net.params, c_out, &mut prefixes)?;
    let mut report = MappingReport::default();
    map_prefixed(source, &mut net.params, &prefixes, &mut report)?;
    report.check_complete(&net.params)?;
    add_mapping_noise(&mut net.params, &mut report, eps, seed)?;
    Ok((net, report))
}

/// Builds a fresh bundle for `arch` and fills it from the source.
pub fn map_to_derived(
    source_arch: &DiscreteArchitecture,
    source: &ParameterBundle,
    arch: &DiscreteArchitecture,
    eps: f32,
    seed: u64,
) -> Result<(ParameterBundle, MappingReport)> {
    check_stem(source_arch, arch.stem, arch.input_channels)?;
    if source_arch.blocks.len() != arch.blocks.len() {
        return Err(Error::contract(format!(
            "source has {} blocks, target has {}",
            source_arch.blocks.len(),
            arch.blocks.len()
        )));
    }
    let mut target = derive::instantiate(arch, seed)?;
    let mut prefixes: PrefixMap = vec![("stem".into(), "stem".into(), false)];
    for (b, (src, dst)) in source_arch.blocks.iter().zip(&arch.blocks).enumerate() {
        for (l, (src_l, copy)) in map_depth(src.ops.len(), dst.ops.len())?.into_iter().enumerate() {
            prefixes.push((layer_prefix(b + 1, l + 1), layer_prefix(b + 1, src_l), copy));
        }
    }
    add_head_if_sourced(source, &mut target, arch.output_channels(), &mut prefixes)?;
    let mut report = MappingReport::default();
    map_prefixed(source, &mut target, &prefixes, &mut report)?;
    report.check_complete(&target)?;
    add_mapping_noise(&mut target, &mut report, eps, seed)?;
    Ok((target, report))
}

/// Adds i.i.d. uniform `[-eps, eps]` noise to zero-assigned trainable entries.
pub fn add_mapping_noise(params: &mut ParameterBundle, report: &mut MappingReport, eps: f32, seed: u64) -> Result<()> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::param(format!(
            "noise eps must be finite and non-negative, got {eps}"
        )));
    }
    if eps == 0.0 {
        return Ok(());
    }
    for (name, idx) in &report.zero_assigned {
        let mut r = rng::prng(rng::derive_seed(seed, "noise"), name);
        let data = params.get_mut(name)?.data_mut();
        for &k in idx {
            data[k] += rng::uniform(&mut r, -eps, eps);
        }
        if let Some(e) = report.entries.get_mut(name) {
            e.noise = true;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreservationReport {
    pub samples: usize,
    pub tolerance: f32,
    pub max_deviation: f32,
    /// Block output with the largest deviation, e.g. `block2`.
    pub worst: String,
    pub per_block: Vec<f32>,
}

impl PreservationReport {
    pub fn passed(&self) -> bool {
        self.max_deviation <= self.tolerance
    }

    pub fn ensure(&self) -> Result<()> {
        if self.passed() {
            Ok(())
        } else {
            Err(Error::Preservation(format!(
                "{} deviates by {:.3e} (tolerance {:.1e})",
                self.worst, self.max_deviation, self.tolerance
            )))
        }
    }
}

/// Max |source(x) − mapped(x)| over shared channels of every block output, in
/// eval mode on `samples` random inputs.
#[allow(clippy::too_many_arguments)]
pub fn verify_function_preservation(
    source_arch: &DiscreteArchitecture,
    source: &ParameterBundle,
    mapped_arch: &DiscreteArchitecture,
    mapped: &ParameterBundle,
    report: &MappingReport,
    samples: usize,
    tol: f32,
    seed: u64,
) -> Result<PreservationReport> {
    if let Some((name, e)) = report
        .entries
        .iter()
        .find(|(_, e)| e.noise || !e.rule.preserves_function())
    {
        return Err(Error::contract(format!(
            "{name} was mapped by {}{}; only eps = 0 direct, kernel-embed and channel-pad mappings preserve function",
            e.rule,
            if e.noise { " with noise" } else { "" }
        )));
    }
    if samples == 0 {
        return Err(Error::param("need at least one sample"));
    }
    let (h, w) = source_arch.input_resolution;
    if mapped_arch.input_resolution != (h, w) {
        return Err(Error::contract("source and mapped resolutions differ"));
    }
    let shape = [samples, source_arch.input_channels, h, w];
    let x = rng::truncated_normal(&mut rng::prng(seed, "verify"), &shape, 1.0);
    let a = derive::evaluate(source_arch, &mut source.clone(), x.clone())?;
    let b = derive::evaluate(mapped_arch, &mut mapped.clone(), x)?;
    let per_block: Vec<f32> = a
        .iter()
        .zip(&b)
        .map(|(a, b)| shared_deviation(a, b))
        .collect::<Result<_>>()?;
    let (worst, max_deviation) = per_block
        .iter()
        .enumerate()
        .fold((0, 0.0f32), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc });
    Ok(PreservationReport {
        samples,
        tolerance: tol,
        max_deviation,
        worst: format!("block{}", worst + 1),
        per_block,
    })
}

fn shared_deviation(a: &Tensor, b: &Tensor) -> Result<f32> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(Error::dim(format!(
            "block outputs {sa:?} and {sb:?} are not comparable"
        )));
    }
    let (n, hw) = (sa[0], sa[2] * sa[3]);
    let c = sa[1].min(sb[1]);
    let mut worst = 0.0f32;
    for i in 0..n {
        for ch in 0..c {
            let pa = &a.data()[(i * sa[1] + ch) * hw..][..hw];
            let pb = &b.data()[(i * sb[1] + ch) * hw..][..hw];
            for (x, y) in pa.iter().zip(pb) {
                worst = worst.max((x - y).abs());
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive::{DerivedBlock, DerivedOp};
    use crate::searchspace::SearchSpaceConfig;
    use crate::supernet::{BlockMode, SupernetOptions};
    use proptest::prelude::*;

    fn seq(shape: &[usize]) -> Tensor {
        let n = shape.iter().product::<usize>();
        Tensor::new(shape.to_vec(), (1..=n).map(|v| v as f32).collect()).unwrap()
    }

    #[test]
    fn kernel_embed_and_crop() {
        let w = seq(&[1, 1, 3, 3]);
        let e = map_kernel(&w, 5).unwrap();
        let d = e.data();
        assert_eq!(d.iter().filter(|&&v| v == 0.0).count(), 16);
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(d[(y + 1) * 5 + x + 1], w.data()[y * 3 + x]);
            }
        }
        assert_eq!(map_kernel(&e, 3).unwrap(), w);
        assert_eq!(map_kernel(&w, 3).unwrap(), w);
        assert!(matches!(map_kernel(&w, 4), Err(Error::Parameter(_))));
        let c = map_kernel(&seq(&[1, 1, 5, 5]), 3).unwrap();
        assert_eq!(c.data(), &[7.0, 8.0, 9.0, 12.0, 13.0, 14.0, 17.0, 18.0, 19.0]);
    }

    #[test]
    fn channel_widening_keeps_top_left() {
        let w = seq(&[4, 4, 1, 1]);
        let m = map_channels(&map_channels(&w, 0, 6).unwrap(), 1, 6).unwrap();
        assert_eq!(m.shape(), &[6, 6, 1, 1]);
        for o in 0..6 {
            for i in 0..6 {
                let v = m.data()[o * 6 + i];
                if o < 4 && i < 4 {
                    assert_eq!(v, w.data()[o * 4 + i]);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(map_channels(&w, 1, 4).unwrap(), w);
        let t = map_channels(&w, 0, 2).unwrap();
        assert_eq!(t.data(), &w.data()[..8]);
        assert!(map_channels(&w, 2, 4).is_err());
    }

    #[test]
    fn depth_rule() {
        assert_eq!(
            map_depth(2, 4).unwrap(),
            vec![(1, false), (2, false), (2, true), (2, true)]
        );
        assert_eq!(
            map_depth(4, 4).unwrap(),
            (1..=4).map(|l| (l, false)).collect::<Vec<_>>()
        );
        assert_eq!(map_depth(4, 2).unwrap(), vec![(1, false), (2, false)]);
        assert!(map_depth(0, 2).is_err());
    }

    #[test]
    fn rule_priority() {
        assert_eq!(classify(&[4, 4, 3, 3], &[6, 2, 5, 5], true), MappingRule::DepthCopy);
        assert_eq!(classify(&[4, 4, 3, 3], &[6, 4, 5, 5], false), MappingRule::KernelEmbed);
        assert_eq!(classify(&[4, 4, 5, 5], &[4, 4, 3, 3], false), MappingRule::KernelCrop);
        assert_eq!(classify(&[4, 4, 1, 1], &[6, 4, 1, 1], false), MappingRule::ChannelPad);
        assert_eq!(
            classify(&[4, 4, 1, 1], &[6, 2, 1, 1], false),
            MappingRule::ChannelTruncate
        );
        assert_eq!(classify(&[4], &[4], false), MappingRule::Direct);
    }

    #[test]
    fn padded_running_var_is_one() {
        let mut src = ParameterBundle::new();
        layers::init_bn(&mut src, "x/bn", 2);
        src.get_mut("x/bn/gamma")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[2.0, 3.0]);
        let mut dst = ParameterBundle::new();
        layers::init_bn(&mut dst, "x/bn", 4);
        let mut report = MappingReport::default();
        for s in ["gamma", "beta", "running_mean", "running_var"] {
            let n = format!("x/bn/{s}");
            map_tensor(&src, &n, &mut dst, &n, false, &mut report).unwrap();
        }
        assert_eq!(dst.get("x/bn/gamma").unwrap().data(), &[2.0, 3.0, 0.0, 0.0]);
        assert_eq!(dst.get("x/bn/running_var").unwrap().data(), &[1.0; 4]);
        assert_eq!(dst.get("x/bn/running_mean").unwrap().data(), &[0.0; 4]);
        assert_eq!(report.zero_assigned("x/bn/gamma"), &[2, 3]);
        assert!(report.zero_assigned("x/bn/running_mean").is_empty());
        assert!(report.entries.values().all(|e| e.rule == MappingRule::ChannelPad));
    }

    fn desk_source() -> (SearchSpaceConfig, DiscreteArchitecture, ParameterBundle) {
        let config = SearchSpaceConfig::desk();
        let arch = DiscreteArchitecture::source(&config);
        let params = derive::instantiate(&arch, 3).unwrap();
        (config, arch, params)
    }

    #[test]
    fn supernet_mapping_is_complete() {
        let (config, arch, src) = desk_source();
        for mode in [BlockMode::Shared, BlockMode::Individual] {
            let options = SupernetOptions {
                block_mode: mode,
                ..Default::default()
            };
            let net = Supernet::build(&config, options, 1).unwrap();
            let (net, report) = map_to_supernet(&arch, &src, net, 0.0, 0).unwrap();
            report.check_complete(&net.params).unwrap();
            assert!(report.count(MappingRule::KernelEmbed) > 0);
            assert!(report.count(MappingRule::DepthCopy) > 0);
            // stem is copied verbatim
            assert_eq!(report.entries["stem/conv/weight"].rule, MappingRule::Direct);
            assert_eq!(
                net.params.get("stem/conv/weight").unwrap(),
                src.get("stem/conv/weight").unwrap()
            );
        }
    }

    #[test]
    fn matching_candidate_is_direct_copy() {
        // the source uses the space's widest widths and k3e6, so that candidate copies verbatim
        let config = SearchSpaceConfig::desk();
        let mut arch = DiscreteArchitecture::source(&config);
        for (b, spec) in arch.blocks.iter_mut().zip(&config.blocks) {
            b.channels = spec.max_channels();
        }
        let src = derive::instantiate(&arch, 5).unwrap();
        let net = Supernet::build(&config, SupernetOptions::default(), 1).unwrap();
        let (net, report) = map_to_supernet(&arch, &src, net, 0.0, 0).unwrap();
        let layer = &net.blocks[0].layers()[0];
        let o = layer.ops.iter().position(|op| op.to_string() == "k3e6").unwrap();
        let name = format!("{}/dw/weight", layer.op_prefix(o));
        assert_eq!(report.entries[&name].rule, MappingRule::Direct);
        assert_eq!(
            net.params.get(&name).unwrap(),
            src.get("block1/layer1/dw/weight").unwrap()
        );
        let k7 = layer.ops.iter().position(|op| op.to_string() == "k7e6").unwrap();
        assert_eq!(
            report.entries[&format!("{}/dw/weight", layer.op_prefix(k7))].rule,
            MappingRule::KernelEmbed
        );
    }

    #[test]
    fn incompatible_stem_rejected() {
        let (config, mut arch, src) = desk_source();
        arch.stem.conv_out += 1;
        let net = Supernet::build(&config, SupernetOptions::default(), 1).unwrap();
        assert!(matches!(
            map_to_supernet(&arch, &src, net, 0.0, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn identity_derived_mapping() {
        let (_, arch, src) = desk_source();
        let (dst, report) = map_to_derived(&arch, &src, &arch, 0.0, 9).unwrap();
        assert!(report.entries.values().all(|e| e.rule == MappingRule::Direct));
        for (name, t) in src.iter() {
            assert_eq!(dst.get(name).unwrap().data(), t.data(), "{name}");
        }
        let p = verify_function_preservation(&arch, &src, &arch, &dst, &report, 4, 1e-5, 0).unwrap();
        assert_eq!(p.max_deviation, 0.0);
    }

    fn widened(arch: &DiscreteArchitecture) -> DiscreteArchitecture {
        let mut w = arch.clone();
        w.blocks[1].channels += 4;
        w
    }

    fn embed_kernels(arch: &DiscreteArchitecture) -> DiscreteArchitecture {
        let mut w = arch.clone();
        for b in &mut w.blocks {
            for op in &mut b.ops {
                op.kernel = 5;
            }
        }
        w
    }

    fn perturb_bn(params: &mut ParameterBundle) {
        // non-trivial statistics so the check exercises BN
        let names: Vec<String> = params
            .names()
            .filter(|n| n.contains("/bn/"))
            .map(str::to_string)
            .collect();
        for n in names {
            let mut r = rng::prng(11, &n);
            let t = params.get_mut(&n).unwrap();
            let pos = n.ends_with("running_var") || n.ends_with("gamma");
            for v in t.data_mut() {
                let u = rng::uniform(&mut r, 0.0, 0.5);
                *v = if pos { 0.75 + u } else { u - 0.25 };
            }
        }
    }

    #[test]
    fn channel_pad_preserves_function() {
        let (_, arch, mut src) = desk_source();
        perturb_bn(&mut src);
        let dst_arch = widened(&arch);
        let (dst, report) = map_to_derived(&arch, &src, &dst_arch, 0.0, 0).unwrap();
        assert!(report.count(MappingRule::ChannelPad) > 0);
        let p = verify_function_preservation(&arch, &src, &dst_arch, &dst, &report, 16, 1e-5, 1).unwrap();
        assert!(p.passed(), "{p:?}");
        // widened block emits exactly zero on new channels
        let x = rng::truncated_normal(&mut rng::prng(2, "x"), &[2, 3, 32, 32], 1.0);
        let out = derive::evaluate(&dst_arch, &mut dst.clone(), x).unwrap();
        let b = &out[1];
        let (c, hw) = (b.shape()[1], b.shape()[2] * b.shape()[3]);
        for n in 0..2 {
            for ch in arch.blocks[1].channels..c {
                assert!(b.data()[(n * c + ch) * hw..][..hw].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn kernel_embed_preserves_function() {
        let (_, arch, mut src) = desk_source();
        perturb_bn(&mut src);
        let dst_arch = embed_kernels(&arch);
        let (dst, report) = map_to_derived(&arch, &src, &dst_arch, 0.0, 0).unwrap();
        assert!(report.count(MappingRule::KernelEmbed) > 0);
        let p = verify_function_preservation(&arch, &src, &dst_arch, &dst, &report, 16, 1e-5, 1).unwrap();
        assert!(p.passed(), "{p:?}");
    }

    #[test]
    fn verify_rejects_lossy_mappings() {
        let (_, arch, src) = desk_source();
        let mut deeper = arch.clone();
        deeper.blocks[0].ops.push(DerivedOp {
            kernel: 3,
            expansion: 6,
            stride: 1,
        });
        let (dst, report) = map_to_derived(&arch, &src, &deeper, 0.0, 0).unwrap();
        assert!(verify_function_preservation(&arch, &src, &deeper, &dst, &report, 2, 1e-5, 0).is_err());
        let (dst, report) = map_to_derived(&arch, &src, &widened(&arch), 1e-4, 0).unwrap();
        assert!(verify_function_preservation(&arch, &src, &widened(&arch), &dst, &report, 2, 1e-5, 0).is_err());
    }

    #[test]
    fn violation_names_worst_block() {
        let (_, arch, src) = desk_source();
        let (mut dst, report) = map_to_derived(&arch, &src, &arch, 0.0, 0).unwrap();
        let t = dst.get_mut("block3/layer1/project/bn/beta").unwrap();
        t.data_mut()[0] += 0.5;
        let p = verify_function_preservation(&arch, &src, &arch, &dst, &report, 2, 1e-5, 0).unwrap();
        assert_eq!(p.worst, "block3");
        let msg = p.ensure().unwrap_err().to_string();
        assert!(msg.contains("block3"), "{msg}");
    }

    #[test]
    fn noise_touches_only_zero_assigned() {
        let (_, arch, src) = desk_source();
        let dst_arch = embed_kernels(&widened(&arch));
        let (clean, clean_report) = map_to_derived(&arch, &src, &dst_arch, 0.0, 0).unwrap();
        let (noisy, report) = map_to_derived(&arch, &src, &dst_arch, 1e-4, 7).unwrap();
        let (again, _) = map_to_derived(&arch, &src, &dst_arch, 1e-4, 7).unwrap();
        assert_eq!(noisy, again);
        let mut touched = 0;
        for (name, c) in clean.iter() {
            let n = noisy.get(name).unwrap();
            let zeros = clean_report.zero_assigned(name);
            for (k, (a, b)) in c.data().iter().zip(n.data()).enumerate() {
                if zeros.binary_search(&k).is_ok() {
                    assert_eq!(*a, 0.0);
                    assert!(*b != 0.0 && b.abs() <= 1e-4);
                    touched += 1;
                } else {
                    assert_eq!(a, b, "{name}[{k}]");
                }
            }
            assert_eq!(report.entries[name].noise, !zeros.is_empty());
        }
        assert!(touched > 0);
    }

    #[test]
    fn rejects_topology_change() {
        let (_, arch, src) = desk_source();
        let mut fewer = arch.clone();
        fewer.blocks.pop();
        assert!(map_to_derived(&arch, &src, &fewer, 0.0, 0).is_err());
        let extra = DerivedBlock {
            channels: 8,
            stride: 1,
            ops: vec![],
        };
        let mut more = arch.clone();
        more.blocks.push(extra);
        assert!(map_to_derived(&arch, &src, &more, 0.0, 0).is_err());
    }

    #[test]
    fn head_is_mapped_when_present() {
        let (_, arch, mut src) = desk_source();
        layers::init_head(&mut src, 4, arch.output_channels(), 4);
        let mut dst_arch = arch.clone();
        dst_arch.blocks[2].channels += 8;
        let (dst, report) = map_to_derived(&arch, &src, &dst_arch, 0.0, 0).unwrap();
        assert_eq!(report.entries["head/fc/weight"].rule, MappingRule::ChannelPad);
        assert_eq!(
            dst.get("head/fc/weight").unwrap().shape(),
            &[4, dst_arch.output_channels()]
        );
    }

    proptest! {
        #[test]
        fn kernel_round_trip(k in 0usize..3, grow in 1usize..3, o in 1usize..4, i in 1usize..4, seed in 0u64..1000) {
            let k = 2 * k + 1;
            let w = rng::truncated_normal(&mut rng::prng(seed, "w"), &[o, i, k, k], 1.0);
            let e = map_kernel(&w, k + 2 * grow).unwrap();
            prop_assert_eq!(map_kernel(&e, k).unwrap(), w);
        }

        #[test]
        fn zero_eps_mapping_idempotent(extra in 0usize..3, seed in 0u64..50) {
            let (_, arch, src) = desk_source();
            let mut dst_arch = arch.clone();
            dst_arch.blocks[0].channels += 4 * extra;
            let (a, ra) = map_to_derived(&arch, &src, &dst_arch, 0.0, seed).unwrap();
            let (b, rb) = map_to_derived(&arch, &src, &dst_arch, 0.0, seed + 1).unwrap();
            prop_assert_eq!(ra, rb);
            for (name, t) in a.iter() {
                prop_assert_eq!(t.data(), b.get(name).unwrap().data());
            }
            // mapping the result onto itself changes nothing
            let (c, rc) = map_to_derived(&dst_arch, &a, &dst_arch, 0.0, seed).unwrap();
            prop_assert!(rc.entries.values().all(|e| e.rule == MappingRule::Direct));
            for (name, t) in a.iter() {
                prop_assert_eq!(t.data(), c.get(name).unwrap().data());
            }
        }
    }
}
