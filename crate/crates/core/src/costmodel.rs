//! Multiply-add cost of candidate operations and the differentiable expected
//! cost of the relaxed network.
//!
//! Table convention: layer 1 of block i reads the widest candidate width of
//! block i−1 (the stem output for the first block), as the supernet does;
//! layers 2.. read the candidate width `c` itself. Only convolutions count.

use serde::Serialize;

use crate::derive::DiscreteArchitecture;
use crate::error::{Error, Result};
use crate::layers::{self, MbConvShape};
use crate::numerics::{Tape, Tensor, Var};
use crate::searchspace::{OpCandidate, SearchSpaceConfig};
use crate::supernet::{alpha_name, beta_name};

/// Regularization strength used when no value is given.
pub const DEFAULT_LAMBDA: f32 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CostConfig {
    pub lambda: f32,
    /// Divides the expected cost before it enters the loss.
    pub reference: f64,
}

impl CostConfig {
    pub fn new(lambda: f32, reference: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::param(format!(
                "lambda must be finite and non-negative, got {lambda}"
            )));
        }
        if !(reference > 0.0) {
            return Err(Error::param("cost reference must be positive"));
        }
        Ok(CostConfig { lambda, reference })
    }

    /// Normalized by the source network's MAdds.
    pub fn for_source(config: &SearchSpaceConfig, lambda: f32) -> Result<Self> {
        let source = DiscreteArchitecture::source(config);
        Self::new(lambda, madds_of_network(&source) as f64)
    }
}

pub fn madds_of_op(op: OpCandidate, c_in: usize, c_out: usize, h: usize, w: usize, stride: usize) -> Result<f64> {
    if c_in == 0 || c_out == 0 || h == 0 || w == 0 || stride == 0 {
        return Err(Error::param(format!(
            "non-positive dimension in cost query ({c_in}, {c_out}, {h}x{w}, stride {stride})"
        )));
    }
    Ok(match op {
        OpCandidate::Skip => 0.0,
        OpCandidate::MbConv { kernel, expansion } => MbConvShape {
            c_in,
            c_out,
            kernel,
            expansion,
            stride,
        }
        .madds(h, w) as f64,
    })
}

/// `C^{i,ℓ}_{c,o}` for every block, layer, channel candidate and op.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MAddsTable {
    pub stem: f64,
    /// `entries[i][ℓ][c][o]`, zero-based.
    pub entries: Vec<Vec<Vec<Vec<f64>>>>,
    /// (input, output) spatial size per block.
    pub resolutions: Vec<((usize, usize), (usize, usize))>,
}

impl MAddsTable {
    pub fn build(config: &SearchSpaceConfig) -> Result<Self> {
        let resolutions = config.block_resolutions();
        let entries = config
            .blocks
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let (rin, rout) = resolutions[i];
                let c_prev = config.supernet_input_width(i);
                (1..=spec.n_max)
                    .map(|l| {
                        let ops = spec.op_candidates(l)?;
                        spec.channel_candidates()
                            .iter()
                            .map(|&c| {
                                ops.iter()
                                    .map(|&op| {
                                        if l == 1 {
                                            madds_of_op(op, c_prev, c, rin.0, rin.1, spec.stride)
                                        } else {
                                            madds_of_op(op, c, c, rout.0, rout.1, 1)
                                        }
                                    })
                                    .collect::<Result<Vec<_>>>()
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MAddsTable {
            stem: layers::stem_madds(&config.stem, config.input_channels, config.input_resolution) as f64,
            entries,
            resolutions,
        })
    }

    pub fn get(&self, block: usize, layer: usize, channel: usize, op: usize) -> Option<f64> {
        self.entries.get(block)?.get(layer)?.get(channel)?.get(op).copied()
    }

    /// Expected cost in plain arithmetic, for probabilities `alpha[i][ℓ][o]`
    /// and `beta[i][c]`. Returns (total, per block).
    pub fn expected(&self, alpha: &[Vec<Vec<f32>>], beta: &[Vec<f32>]) -> Result<(f64, Vec<f64>)> {
        self.check(alpha, beta)?;
        let per_block: Vec<f64> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, blk)| {
                beta[i]
                    .iter()
                    .enumerate()
                    .map(|(c, &pc)| {
                        let inner: f64 = blk
                            .iter()
                            .enumerate()
                            .map(|(l, layer)| {
                                layer[c]
                                    .iter()
                                    .zip(&alpha[i][l])
                                    .map(|(&cost, &po)| cost * po as f64)
                                    .sum::<f64>()
                            })
                            .sum();
                        pc as f64 * inner
                    })
                    .sum()
            })
            .collect();
        Ok((self.stem + per_block.iter().sum::<f64>(), per_block))
    }

    fn check(&self, alpha: &[Vec<Vec<f32>>], beta: &[Vec<f32>]) -> Result<()> {
        if alpha.len() != self.entries.len() || beta.len() != self.entries.len() {
            return Err(Error::contract("logits do not match the cost table's block count"));
        }
        for (i, blk) in self.entries.iter().enumerate() {
            if alpha[i].len() != blk.len() || beta[i].len() != blk[0].len() {
                return Err(Error::contract(format!(
                    "block {}: logits do not match the cost table",
                    i + 1
                )));
            }
            if blk.iter().zip(&alpha[i]).any(|(layer, a)| layer[0].len() != a.len()) {
                return Err(Error::contract(format!(
                    "block {}: α length does not match the cost table",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// `stem + Σ_i Σ_c softmax(β_i)_c Σ_ℓ Σ_o softmax(α_{i,ℓ})_o C^{i,ℓ}_{c,o}`
/// recorded on the tape. `logit` maps a parameter name to its tape node.
pub fn expected_cost(
    tape: &mut Tape,
    table: &MAddsTable,
    mut logit: impl FnMut(&mut Tape, &str) -> Result<Var>,
) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(table.stem as f32));
    for (i, blk) in table.entries.iter().enumerate() {
        let m = blk[0].len();
        let mut per_channel: Option<Var> = None;
        for (l, layer) in blk.iter().enumerate() {
            let n = layer[0].len();
            let a = logit(tape, &alpha_name(i + 1, l + 1))?;
            if tape.value(a).numel() != n {
                return Err(Error::contract(format!(
                    "α for block {} layer {} has the wrong length",
                    i + 1,
                    l + 1
                )));
            }
            let pa = tape.softmax(a)?;
            let matrix: Vec<f32> = layer.iter().flatten().map(|&v| v as f32).collect();
            let q = tape.matvec_const(matrix, m, n, pa)?;
            per_channel = Some(match per_channel {
                Some(acc) => tape.add(acc, q)?,
                None => q,
            });
        }
        let b = logit(tape, &beta_name(i + 1))?;
        if tape.value(b).numel() != m {
            return Err(Error::contract(format!("β for block {} has the wrong length", i + 1)));
        }
        let pb = tape.softmax(b)?;
        let block_cost = tape.dot(per_channel.expect("n_max >= 1"), pb)?;
        total = tape.add(total, block_cost)?;
    }
    Ok(total)
}

/// `model_loss + λ · cost / reference`.
pub fn total_loss(tape: &mut Tape, model_loss: Var, cost: Var, cfg: &CostConfig) -> Result<Var> {
    if !tape.value(model_loss).is_scalar() || !tape.value(cost).is_scalar() {
        return Err(Error::dim("total_loss expects scalar terms"));
    }
    if cfg.lambda == 0.0 {
        return Ok(model_loss);
    }
    let reg = tape.scale(cost, (cfg.lambda as f64 / cfg.reference) as f32);
    tape.add(model_loss, reg)
}

/// Cost of a discrete architecture under the table convention, so that it
/// equals [`expected_cost`] at saturated logits.
pub fn madds_of_discrete(arch: &DiscreteArchitecture, config: &SearchSpaceConfig) -> Result<(f64, Vec<f64>)> {
    if arch.blocks.len() != config.num_blocks() || arch.stem != config.stem {
        return Err(Error::contract("architecture does not belong to this search space"));
    }
    let resolutions = config.block_resolutions();
    let mut per_block = Vec::with_capacity(arch.blocks.len());
    for (i, (blk, spec)) in arch.blocks.iter().zip(&config.blocks).enumerate() {
        if !spec.channel_candidates().contains(&blk.channels) {
            return Err(Error::contract(format!(
                "block {}: {} is not a channel candidate",
                i + 1,
                blk.channels
            )));
        }
        if blk.ops.is_empty() || blk.ops.len() > spec.n_max {
            return Err(Error::contract(format!(
                "block {}: depth {} outside 1..={}",
                i + 1,
                blk.ops.len(),
                spec.n_max
            )));
        }
        let (rin, rout) = resolutions[i];
        let mut cost = 0.0;
        for (l, op) in blk.ops.iter().enumerate() {
            let cand = OpCandidate::MbConv {
                kernel: op.kernel,
                expansion: op.expansion,
            };
            if !spec.op_candidates(l + 1)?.contains(&cand) {
                return Err(Error::contract(format!(
                    "block {} op {}: {cand} is not a candidate",
                    i + 1,
                    l + 1
                )));
            }
            cost += if l == 0 {
                if op.stride != spec.stride {
                    return Err(Error::contract(format!(
                        "block {}: first op must have stride {}",
                        i + 1,
                        spec.stride
                    )));
                }
                madds_of_op(
                    cand,
                    config.supernet_input_width(i),
                    blk.channels,
                    rin.0,
                    rin.1,
                    spec.stride,
                )?
            } else {
                madds_of_op(cand, blk.channels, blk.channels, rout.0, rout.1, 1)?
            };
        }
        per_block.push(cost);
    }
    let stem = layers::stem_madds(&config.stem, config.input_channels, config.input_resolution) as f64;
    Ok((stem + per_block.iter().sum::<f64>(), per_block))
}

/// Exact convolution multiply-adds of the network as built, with true input
/// widths between blocks.
pub fn madds_of_network(arch: &DiscreteArchitecture) -> u64 {
    let (mut h, mut w) = arch.input_resolution;
    let stem = layers::stem_madds(&arch.stem, arch.input_channels, (h, w));
    let s = crate::searchspace::StemSpec::CONV_STRIDE;
    (h, w) = ((h - 1) / s + 1, (w - 1) / s + 1);
    let mut total = stem;
    for shapes in arch.layer_shapes() {
        for shape in shapes {
            total += shape.madds(h, w);
            (h, w) = ((h - 1) / shape.stride + 1, (w - 1) / shape.stride + 1);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::derive::{self, Selection};
    use crate::layers::{Ctx, GradScope};
    use crate::numerics::{BnMode, ParameterBundle};
    use crate::rng::{prng, truncated_normal};
    use crate::supernet::{Supernet, SupernetOptions};

    #[test]
    fn skip_is_free_and_area_scales() {
        assert_eq!(madds_of_op(OpCandidate::Skip, 8, 8, 4, 4, 1).unwrap(), 0.0);
        let op = OpCandidate::MbConv {
            kernel: 5,
            expansion: 6,
        };
        let a = madds_of_op(op, 8, 12, 4, 4, 1).unwrap();
        let b = madds_of_op(op, 8, 12, 8, 8, 1).unwrap();
        assert_eq!(b, 4.0 * a);
        assert!(matches!(madds_of_op(op, 0, 12, 4, 4, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn k3e3_matches_instrumented_forward() {
        let shape = MbConvShape {
            c_in: 8,
            c_out: 8,
            kernel: 3,
            expansion: 3,
            stride: 1,
        };
        let mut b = ParameterBundle::new();
        layers::init_mbconv(&mut b, 0, "m", &shape);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 4, 4]));
        let mut ctx = Ctx::new(&mut tape, &mut b, BnMode::Eval, GradScope::None);
        layers::mbconv_forward(&mut ctx, x, "m", &shape).unwrap();
        let op = OpCandidate::MbConv {
            kernel: 3,
            expansion: 3,
        };
        assert_eq!(madds_of_op(op, 8, 8, 4, 4, 1).unwrap(), tape.conv_madds() as f64);
        // 8*24*16 + 9*24*16 + 24*8*16
        assert_eq!(tape.conv_madds(), 9600);
    }

    #[test]
    fn table_entries_follow_convention() {
        let cfg = SearchSpaceConfig::desk();
        let t = MAddsTable::build(&cfg).unwrap();
        for (i, spec) in cfg.blocks.iter().enumerate() {
            let (rin, rout) = t.resolutions[i];
            for l in 0..spec.n_max {
                let ops = spec.op_candidates(l + 1).unwrap();
                for (c, &ch) in spec.channel_candidates().iter().enumerate() {
                    for (o, &op) in ops.iter().enumerate() {
                        let v = t.get(i, l, c, o).unwrap();
                        let want = if l == 0 {
                            madds_of_op(op, cfg.supernet_input_width(i), ch, rin.0, rin.1, spec.stride).unwrap()
                        } else {
                            madds_of_op(op, ch, ch, rout.0, rout.1, 1).unwrap()
                        };
                        assert_eq!(v, want);
                        assert!(v >= 0.0);
                        assert_eq!(op.is_skip(), v == 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn table1_cost_grows_with_width() {
        let cfg = SearchSpaceConfig::table1();
        let t = MAddsTable::build(&cfg).unwrap();
        let cands = cfg.blocks[2].channel_candidates();
        let (lo, hi) = (
            cands.iter().position(|&c| c == 48).unwrap(),
            cands.iter().position(|&c| c == 72).unwrap(),
        );
        for l in 0..4 {
            for o in 0..6 {
                assert!(t.get(2, l, hi, o).unwrap() > t.get(2, l, lo, o).unwrap());
            }
        }
    }

    #[test]
    fn uniform_single_layer_is_table_mean() {
        let cfg = SearchSpaceConfig::from_json(
            r#"{"v": 1, "input_resolution": [8, 8], "stem": {"conv_out": 4, "mbconv_out": 4},
                "kernels": [3, 5], "expansions": [3], "blocks": [{"n_max": 1, "stride": 1, "channels": [4, 8, 4]}]}"#,
        )
        .unwrap();
        let t = MAddsTable::build(&cfg).unwrap();
        let (total, per) = t.expected(&[vec![vec![0.5, 0.5]]], &[vec![0.5, 0.5]]).unwrap();
        let mean = t.entries[0][0].iter().flatten().sum::<f64>() / 4.0;
        assert!((per[0] - mean).abs() < 1e-9 * mean);
        assert!((total - t.stem - mean).abs() < 1e-9 * mean);
    }

    fn onehot(n: usize, k: usize) -> Vec<f32> {
        (0..n).map(|i| if i == k { 50.0 } else { 0.0 }).collect()
    }

    #[test]
    fn saturated_logits_give_discrete_cost() {
        let cfg = SearchSpaceConfig::desk();
        let t = MAddsTable::build(&cfg).unwrap();
        let mut rng = prng(2, "choices");
        for _ in 0..10 {
            let sel = Selection {
                channels: cfg
                    .blocks
                    .iter()
                    .map(|b| crate::rng::uniform(&mut rng, 0.0, b.num_channel_candidates() as f32) as usize)
                    .collect(),
                ops: cfg
                    .blocks
                    .iter()
                    .map(|b| {
                        (1..=b.n_max)
                            .map(|l| crate::rng::uniform(&mut rng, 0.0, b.num_op_candidates(l) as f32) as usize)
                            .collect()
                    })
                    .collect(),
            };
            let arch = sel.to_architecture(&cfg).unwrap();
            let mut net = Supernet::build(&cfg, SupernetOptions::default(), 0).unwrap();
            for (i, b) in cfg.blocks.iter().enumerate() {
                net.params
                    .get_mut(&beta_name(i + 1))
                    .unwrap()
                    .data_mut()
                    .copy_from_slice(&onehot(b.num_channel_candidates(), sel.channels[i]));
                for l in 0..b.n_max {
                    let v = onehot(b.num_op_candidates(l + 1), sel.ops[i][l]);
                    net.params
                        .get_mut(&alpha_name(i + 1, l + 1))
                        .unwrap()
                        .data_mut()
                        .copy_from_slice(&v);
                }
            }
            let mut tape = Tape::new();
            let params = &net.params;
            let c = expected_cost(&mut tape, &t, |tape, name| Ok(tape.constant(params.get(name)?.clone()))).unwrap();
            let (discrete, _) = madds_of_discrete(&arch, &cfg).unwrap();
            let got = tape.value(c).item() as f64;
            assert!((got - discrete).abs() <= 1e-6 * discrete, "{got} vs {discrete}");
            assert_eq!(derive::derive_from_supernet(&net).unwrap(), arch);
        }
    }

    #[test]
    fn tape_cost_matches_scalar_enumeration() {
        let cfg = SearchSpaceConfig::desk();
        let t = MAddsTable::build(&cfg).unwrap();
        let mut net = Supernet::build(&cfg, SupernetOptions::default(), 0).unwrap();
        for name in net.arch_names() {
            let p = net.params.get_mut(&name).unwrap();
            let r = truncated_normal(&mut prng(7, &name), p.shape(), 1.0);
            p.data_mut().copy_from_slice(r.data());
        }
        let (alpha, beta) = net.probabilities().unwrap();
        let (oracle, _) = t.expected(&alpha, &beta).unwrap();
        let mut tape = Tape::new();
        let params = &net.params;
        let c = expected_cost(&mut tape, &t, |tape, name| Ok(tape.constant(params.get(name)?.clone()))).unwrap();
        assert!(((tape.value(c).item() as f64) - oracle).abs() <= 1e-6 * oracle);
    }

    #[test]
    fn zero_lambda_total_is_model_loss() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::scalar(1.25));
        let c = tape.constant(Tensor::scalar(1.0e6));
        let cfg = CostConfig::new(0.0, 1.0e6).unwrap();
        let t = total_loss(&mut tape, m, c, &cfg).unwrap();
        assert_eq!(tape.value(t).item(), 1.25);
        let z = tape.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut tape, m, z, &CostConfig::new(1.0, 1.0).unwrap()).unwrap();
        assert_eq!(tape.value(t).item(), 1.25);
        assert!(CostConfig::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn network_madds_matches_instrumented_forward() {
        let cfg = SearchSpaceConfig::desk();
        let arch = DiscreteArchitecture::source(&cfg);
        let mut params = derive::instantiate(&arch, 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 32, 32]));
        let mut ctx = Ctx::new(&mut tape, &mut params, BnMode::Eval, GradScope::None);
        derive::forward(&arch, &mut ctx, x).unwrap();
        assert_eq!(madds_of_network(&arch), tape.conv_madds());
    }
}
