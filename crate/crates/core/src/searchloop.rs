//! Warm-up then alternating first-order search over two disjoint data halves.
//!
//! Warm-up epochs train only operation weights on trainA. Afterwards every
//! trainA batch gets a weight step on the model loss, followed by an
//! architecture step on a trainB batch minimizing model loss plus the scaled
//! expected cost with respect to α and β only.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::{self, CostConfig, MAddsTable};
use crate::derive;
use crate::error::{Error, Result};
use crate::layers::{Ctx, GradScope};
use crate::numerics::{self, argmax, BnMode, OptimizerConfig, OptimizerState, Tape};
use crate::rng;
use crate::supernet::{forward_blocks, Supernet};
use crate::toytask::{self, ProxyHead, SyntheticDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    #[default]
    Constant,
    Cosine,
}

pub fn lr_schedule(step: usize, total_steps: usize, base_lr: f32, mode: LrMode) -> f32 {
    match mode {
        LrMode::Constant => base_lr,
        LrMode::Cosine => {
            if total_steps == 0 {
                return base_lr;
            }
            let t = step.min(total_steps) as f64 / total_steps as f64;
            (base_lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SearchSchedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_opt: OptimizerConfig,
    pub arch_opt: OptimizerConfig,
    pub clip_norm: f32,
    pub lr_mode: LrMode,
}

impl Default for SearchSchedule {
    fn default() -> Self {
        SearchSchedule {
            total_epochs: 14,
            warmup_epochs: 8,
            batch_size: 8,
            seed: 0,
            weight_opt: OptimizerConfig::sgd(0.02, 0.9, 1e-4),
            arch_opt: OptimizerConfig::adam(3e-4, 1e-3),
            clip_norm: 10.0,
            lr_mode: LrMode::Constant,
        }
    }
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::param(format!(
                "warm-up epochs {} exceed total epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataSplit {
    pub train_a: Vec<usize>,
    pub train_b: Vec<usize>,
}

/// Shuffled halves; trainA takes the extra sample when the size is odd.
pub fn split_data(size: usize, seed: u64) -> Result<DataSplit> {
    if size < 2 {
        return Err(Error::param(format!("cannot split {size} samples into two sets")));
    }
    let perm = rng::permutation(&mut rng::prng(seed, "split"), size);
    let half = size.div_ceil(2);
    Ok(DataSplit {
        train_a: perm[..half].to_vec(),
        train_b: perm[half..].to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    W,
    Arch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub phase: Phase,
    pub model_loss: f32,
    /// Expected cost divided by the cost reference.
    pub expected_cost: f32,
    pub total_loss: f32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EpochSnapshot {
    pub epoch: usize,
    pub alpha_argmax: Vec<Vec<usize>>,
    pub beta_argmax: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SearchHistory {
    pub steps: Vec<StepRecord>,
    pub snapshots: Vec<EpochSnapshot>,
}

impl SearchHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.steps {
            w.serialize(s)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Vec<StepRecord>> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        Ok(r.deserialize().collect::<std::result::Result<Vec<StepRecord>, _>>()?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        File::create(path)?.write_all(self.to_csv()?.as_bytes())?;
        Ok(())
    }

    pub fn phase_losses(&self, phase: Phase) -> Vec<f32> {
        self.steps
            .iter()
            .filter(|s| s.phase == phase)
            .map(|s| s.model_loss)
            .collect()
    }
}

fn snapshot(net: &Supernet, epoch: usize) -> Result<EpochSnapshot> {
    let (alpha, beta) = derive::logits(net)?;
    Ok(EpochSnapshot {
        epoch,
        alpha_argmax: alpha.iter().map(|a| a.iter().map(|v| argmax(v)).collect()).collect(),
        beta_argmax: beta.iter().map(|b| argmax(b)).collect(),
    })
}

fn check_finite(value: f32, step: usize, phase: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            phase: phase.into(),
            value,
        })
    }
}

pub fn search(
    net: Supernet,
    data: &SyntheticDataset,
    schedule: &SearchSchedule,
    cost: &CostConfig,
) -> Result<(Supernet, SearchHistory)> {
    search_observed(net, data, schedule, cost, |_, _| {})
}

/// [`search`] calling `on_step` after every recorded step.
pub fn search_observed(
    mut net: Supernet,
    data: &SyntheticDataset,
    schedule: &SearchSchedule,
    cost: &CostConfig,
    mut on_step: impl FnMut(&StepRecord, &Supernet),
) -> Result<(Supernet, SearchHistory)> {
    schedule.validate()?;
    let head = ProxyHead {
        c_in: net.output_channels(),
        n_classes: data.spec.n_classes,
    };
    if !net.params.contains("head/fc/weight") {
        head.init(&mut net.params, rng::derive_seed(schedule.seed, "head"));
    }
    let table = MAddsTable::build(&net.config)?;
    let split = split_data(data.len(), schedule.seed)?;
    let mut w_opt = OptimizerState::new(schedule.weight_opt, net.weight_names())?;
    let mut a_opt = OptimizerState::new(schedule.arch_opt, net.arch_names())?;
    let mut rng = rng::prng(schedule.seed, "searchloop");

    let a_batches_per_epoch = split.train_a.len().div_ceil(schedule.batch_size);
    let total_w_steps = a_batches_per_epoch * schedule.total_epochs;
    let mut history = SearchHistory::default();
    let mut w_steps = 0usize;
    let scale = cost.lambda as f64 / cost.reference;

    for epoch in 1..=schedule.total_epochs {
        let alternate = epoch > schedule.warmup_epochs;
        let a_batches = toytask::epoch_batches(&split.train_a, schedule.batch_size, &mut rng);
        let b_batches = if alternate {
            toytask::epoch_batches(&split.train_b, schedule.batch_size, &mut rng)
        } else {
            Vec::new()
        };
        for (k, batch) in a_batches.iter().enumerate() {
            // weight step on trainA
            let (x, y) = data.batch(batch)?;
            let mut tape = Tape::new();
            let model = {
                let xv = tape.constant(x);
                let mut ctx = Ctx::new(&mut tape, &mut net.params, BnMode::Train, GradScope::Weights);
                let out = forward_blocks(&net.config, &net.blocks, &mut ctx, xv)?;
                let logits = head.forward(&mut ctx, out.features)?;
                toytask::model_loss(ctx.tape, logits, &y)?
            };
            let model_loss = tape.value(model).item();
            let step = history.steps.len();
            check_finite(model_loss, step, "w")?;
            let (alpha_p, beta_p) = net.probabilities()?;
            let norm_cost = table.expected(&alpha_p, &beta_p)?.0 / cost.reference;
            w_opt.set_lr(lr_schedule(
                w_steps,
                total_w_steps,
                schedule.weight_opt.lr,
                schedule.lr_mode,
            ))?;
            w_opt.zero_grad(&mut net.params)?;
            numerics::backward(&tape, model, &mut net.params)?;
            w_opt.clip_grad_norm(&mut net.params, schedule.clip_norm)?;
            w_opt.step(&mut net.params)?;
            w_opt.zero_grad(&mut net.params)?;
            w_steps += 1;
            let rec = StepRecord {
                step,
                epoch,
                phase: Phase::W,
                model_loss,
                expected_cost: norm_cost as f32,
                total_loss: (model_loss as f64 + cost.lambda as f64 * norm_cost) as f32,
            };
            history.steps.push(rec);
            on_step(&rec, &net);

            if !alternate {
                continue;
            }
            // architecture step on trainB
            let (x, y) = data.batch(&b_batches[k % b_batches.len()])?;
            let mut tape = Tape::new();
            let (model, expected, total) = {
                let xv = tape.constant(x);
                let mut ctx = Ctx::new(&mut tape, &mut net.params, BnMode::Train, GradScope::Architecture);
                ctx.update_stats = false;
                let out = forward_blocks(&net.config, &net.blocks, &mut ctx, xv)?;
                let logits = head.forward(&mut ctx, out.features)?;
                let model = toytask::model_loss(ctx.tape, logits, &y)?;
                let params = &*ctx.params;
                let expected = costmodel::expected_cost(ctx.tape, &table, |tape, name| {
                    let id = params.id(name)?;
                    Ok(tape.param(id, params.by_id(id), true))
                })?;
                let total = costmodel::total_loss(ctx.tape, model, expected, cost)?;
                (model, expected, total)
            };
            let model_loss = tape.value(model).item();
            let expected_raw = tape.value(expected).item() as f64;
            let step = history.steps.len();
            check_finite(tape.value(total).item(), step, "arch")?;
            a_opt.zero_grad(&mut net.params)?;
            numerics::backward(&tape, total, &mut net.params)?;
            a_opt.clip_grad_norm(&mut net.params, schedule.clip_norm)?;
            a_opt.step(&mut net.params)?;
            a_opt.zero_grad(&mut net.params)?;
            let norm_cost = expected_raw / cost.reference;
            let rec = StepRecord {
                step,
                epoch,
                phase: Phase::Arch,
                model_loss,
                expected_cost: norm_cost as f32,
                total_loss: (model_loss as f64 + expected_raw * scale) as f32,
            };
            history.steps.push(rec);
            on_step(&rec, &net);
        }
        history.snapshots.push(snapshot(&net, epoch)?);
    }
    net.params.zero_grad();
    Ok((net, history))
}
