//! Procedural shape-classification task standing in for a real dataset.
//!
//! Each sample is one shape, drawn at one of three scales in a random colour
//! on a uniform-noise background. The class is the shape type.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::derive::{self, DiscreteArchitecture};
use crate::error::{Error, Result};
use crate::layers::{self, Ctx, GradScope};
use crate::numerics::{self, argmax, BnMode, OptimizerConfig, OptimizerState, ParameterBundle, Tape, Tensor, Var};
use crate::rng::{self, Prng};

pub const SHAPES: [&str; 8] = [
    "square", "disk", "triangle", "cross", "ring", "saltire", "frame", "diamond",
];
/// Shape half-extent as a fraction of half the shorter image side.
pub const SCALES: [f32; 3] = [0.35, 0.6, 0.85];
pub const BACKGROUND_MAX: f32 = 0.4;
pub const FOREGROUND_MIN: f32 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub resolution: (usize, usize),
    pub n_classes: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n_samples: usize, n_classes: usize, seed: u64) -> Self {
        DatasetSpec {
            n_samples,
            resolution: (32, 32),
            n_classes,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > SHAPES.len() {
            return Err(Error::param(format!(
                "n_classes must be in 2..={}, got {}",
                SHAPES.len(),
                self.n_classes
            )));
        }
        if self.n_samples < self.n_classes {
            return Err(Error::param(format!(
                "{} samples cannot cover {} classes",
                self.n_samples, self.n_classes
            )));
        }
        if self.resolution.0 < 8 || self.resolution.1 < 8 {
            return Err(Error::param("resolution must be at least 8x8"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub spec: DatasetSpec,
    /// `[N, 3, H, W]`, values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Whether the point `(dx, dy)`, in units of the shape's half-extent,
/// lies inside shape `class`.
pub fn inside(class: usize, dx: f32, dy: f32) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    let cheb = ax.max(ay);
    let r = (dx * dx + dy * dy).sqrt();
    match class {
        0 => cheb <= 1.0,
        1 => r <= 1.0,
        2 => (-1.0..=1.0).contains(&dy) && ax <= (dy + 1.0) / 2.0,
        3 => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
        4 => (0.55..=1.0).contains(&r),
        5 => (ax - ay).abs() <= 0.3 && cheb <= 1.0,
        6 => (0.6..=1.0).contains(&cheb),
        7 => ax + ay <= 1.0,
        _ => false,
    }
}

pub fn generate(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    Ok(generate_with_placements(spec)?.0)
}

/// Where a sample's shape was drawn.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub cx: f32,
    pub cy: f32,
    pub radius: f32,
}

impl Placement {
    /// Pixels covered by shape `class` at this placement, row-major.
    pub fn silhouette(&self, class: usize, h: usize, w: usize) -> Vec<bool> {
        (0..h * w)
            .map(|p| {
                let dx = ((p % w) as f32 + 0.5 - self.cx) / self.radius;
                let dy = ((p / w) as f32 + 0.5 - self.cy) / self.radius;
                inside(class, dx, dy)
            })
            .collect()
    }
}

pub fn generate_with_placements(spec: &DatasetSpec) -> Result<(SyntheticDataset, Vec<Placement>)> {
    spec.validate()?;
    let (h, w) = spec.resolution;
    let mut rng = rng::prng(spec.seed, "toytask");
    let order = rng::permutation(&mut rng, spec.n_samples);
    let labels: Vec<usize> = order.iter().map(|&i| i % spec.n_classes).collect();
    let mut data = Vec::with_capacity(spec.n_samples * 3 * h * w);
    let mut placements = Vec::with_capacity(spec.n_samples);
    for &label in &labels {
        let (img, place) = draw(&mut rng, label, h, w);
        data.extend(img);
        placements.push(place);
    }
    let dataset = SyntheticDataset {
        spec: *spec,
        images: Tensor::new(vec![spec.n_samples, 3, h, w], data)?,
        labels,
    };
    Ok((dataset, placements))
}

fn draw(rng: &mut Prng, class: usize, h: usize, w: usize) -> (Vec<f32>, Placement) {
    let scale = SCALES[(rng::uniform(rng, 0.0, SCALES.len() as f32) as usize).min(SCALES.len() - 1)];
    let radius = scale * h.min(w) as f32 / 2.0;
    let place = Placement {
        cx: rng::uniform(rng, radius, w as f32 - radius),
        cy: rng::uniform(rng, radius, h as f32 - radius),
        radius,
    };
    let colour: Vec<f32> = (0..3).map(|_| rng::uniform(rng, FOREGROUND_MIN, 1.0)).collect();
    let mask = place.silhouette(class, h, w);
    let mut img = vec![0.0f32; 3 * h * w];
    for c in 0..3 {
        for p in 0..h * w {
            let bg = rng::uniform(rng, 0.0, BACKGROUND_MAX);
            img[c * h * w + p] = if mask[p] { colour[c] } else { bg };
        }
    }
    (img, place)
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    spec: DatasetSpec,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.labels
                    .get(i)
                    .copied()
                    .ok_or_else(|| Error::param(format!("sample {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((self.images.select_rows(indices)?, labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Writes the tensor container at `path` and the spec to `path.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut b = ParameterBundle::new();
        b.insert("images", self.images.clone());
        let labels = self.labels.iter().map(|&l| l as f32).collect();
        b.insert("labels", Tensor::new(vec![self.len()], labels)?);
        b.save(path)?;
        fs::write(
            sidecar(path),
            crate::json::to_sorted_string(&Sidecar { spec: self.spec })?,
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar(path))?)?;
        let b = ParameterBundle::load(path)?;
        let mut images = b.get("images")?.clone();
        images.requires_grad = false;
        let labels: Vec<usize> = b.get("labels")?.data().iter().map(|&l| l as usize).collect();
        let (h, w) = side.spec.resolution;
        if images.shape() != [side.spec.n_samples, 3, h, w] || labels.len() != side.spec.n_samples {
            return Err(Error::Format("dataset tensors do not match their spec".into()));
        }
        if labels.iter().any(|&l| l >= side.spec.n_classes) {
            return Err(Error::Format("dataset label out of range".into()));
        }
        Ok(SyntheticDataset {
            spec: side.spec,
            images,
            labels,
        })
    }
}

/// Global average pool plus a linear classifier over the last block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProxyHead {
    pub c_in: usize,
    pub n_classes: usize,
}

impl ProxyHead {
    pub fn init(&self, bundle: &mut ParameterBundle, seed: u64) {
        layers::init_head(bundle, seed, self.c_in, self.n_classes);
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, features: Var) -> Result<Var> {
        let logits = layers::head_forward(ctx, features)?;
        if ctx.tape.shape(logits)[1] != self.n_classes {
            return Err(Error::dim("head output does not match the class count"));
        }
        Ok(logits)
    }
}

/// Mean cross-entropy over the batch.
pub fn model_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub clip_norm: f32,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(epochs: usize, seed: u64) -> Self {
        FinetuneConfig {
            epochs,
            batch_size: 16,
            optimizer: OptimizerConfig::sgd(0.05, 0.9, 5e-5),
            clip_norm: 10.0,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneResult {
    pub params: ParameterBundle,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f32>,
    /// Loss of every step, in order.
    pub step_losses: Vec<f32>,
}

/// Shuffled mini-batches over `indices`, one permutation per epoch.
pub fn epoch_batches(indices: &[usize], batch_size: usize, rng: &mut Prng) -> Vec<Vec<usize>> {
    let perm = rng::permutation(rng, indices.len());
    perm.chunks(batch_size.max(1))
        .map(|c| c.iter().map(|&p| indices[p]).collect())
        .collect()
}

fn logits_of(arch: &DiscreteArchitecture, head: &ProxyHead, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let outs = derive::forward(arch, ctx, x)?;
    head.forward(ctx, *outs.last().expect("at least one block"))
}

/// Trains every parameter of the derived network and its head with SGD.
pub fn finetune(
    arch: &DiscreteArchitecture,
    params: ParameterBundle,
    data: &SyntheticDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneResult> {
    let mut params = params;
    let head = ProxyHead {
        c_in: arch.output_channels(),
        n_classes: data.spec.n_classes,
    };
    if !params.contains("head/fc/weight") {
        head.init(&mut params, rng::derive_seed(cfg.seed, "head"));
    }
    let names: Vec<String> = params
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect();
    let mut opt = OptimizerState::new(cfg.optimizer, names)?;
    let mut rng = rng::prng(cfg.seed, "finetune");
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    for _ in 0..cfg.epochs {
        let mut total = 0.0f64;
        let batches = epoch_batches(&indices, cfg.batch_size, &mut rng);
        for batch in &batches {
            let (x, y) = data.batch(batch)?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let loss = {
                let mut ctx = Ctx::new(&mut tape, &mut params, BnMode::Train, GradScope::All);
                let logits = logits_of(arch, &head, &mut ctx, xv)?;
                model_loss(ctx.tape, logits, &y)?
            };
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    step: step_losses.len(),
                    phase: "finetune".into(),
                    value,
                });
            }
            opt.zero_grad(&mut params)?;
            numerics::backward(&tape, loss, &mut params)?;
            opt.clip_grad_norm(&mut params, cfg.clip_norm)?;
            opt.step(&mut params)?;
            step_losses.push(value);
            total += value as f64;
        }
        epoch_losses.push((total / batches.len() as f64) as f32);
    }
    params.zero_grad();
    Ok(FinetuneResult {
        params,
        epoch_losses,
        step_losses,
    })
}

/// Eval-mode (mean loss, accuracy) of a network with a head.
pub fn evaluate(
    arch: &DiscreteArchitecture,
    params: &mut ParameterBundle,
    data: &SyntheticDataset,
    batch_size: usize,
) -> Result<(f32, f32)> {
    let head = ProxyHead {
        c_in: arch.output_channels(),
        n_classes: data.spec.n_classes,
    };
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut ctx = Ctx::new(&mut tape, params, BnMode::Eval, GradScope::None);
        let logits = logits_of(arch, &head, &mut ctx, xv)?;
        let l = model_loss(ctx.tape, logits, &y)?;
        loss += tape.value(l).item() as f64 * chunk.len() as f64;
        let lv = tape.value(logits).data();
        let c = data.spec.n_classes;
        correct += y
            .iter()
            .enumerate()
            .filter(|&(i, &t)| argmax(&lv[i * c..(i + 1) * c]) == t)
            .count();
    }
    Ok(((loss / data.len() as f64) as f32, correct as f32 / data.len() as f32))
}
