//! Building blocks shared by the supernet, derived networks and the proxy
//! head: conv + BN units, the MBConv operation and the fixed stem.
//!
//! Every unit reads its tensors by name from a [`ParameterBundle`], so a
//! network is a naming scheme plus a forward routine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, BnMode, ParameterBundle, Tape, Tensor, Var, BN_EPS, BN_MOMENTUM};
use crate::rng;
use crate::searchspace::StemSpec;

pub const INIT_STD: f32 = 0.02;

/// Which parameters a forward pass records gradients for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Operation weights (everything but `alpha/*` and `beta/*`).
    Weights,
    /// Architecture logits only.
    Architecture,
    None,
}

pub fn is_arch_name(name: &str) -> bool {
    name.starts_with("alpha/") || name.starts_with("beta/")
}

impl GradScope {
    pub fn tracks(self, name: &str) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Weights => !is_arch_name(name),
            GradScope::Architecture => is_arch_name(name),
            GradScope::None => false,
        }
    }
}

/// State threaded through one forward pass.
pub struct Ctx<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a mut ParameterBundle,
    pub mode: BnMode,
    pub scope: GradScope,
    /// Fold train-mode batch statistics into the running estimates.
    pub update_stats: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a mut ParameterBundle, mode: BnMode, scope: GradScope) -> Self {
        Ctx {
            tape,
            params,
            mode,
            scope,
            update_stats: mode == BnMode::Train,
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        let track = self.scope.tracks(name);
        Ok(self.tape.param(id, self.params.by_id(id), track))
    }

    pub fn batch_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}/gamma"))?;
        let beta = self.param(&format!("{prefix}/beta"))?;
        let mean_name = format!("{prefix}/running_mean");
        let var_name = format!("{prefix}/running_var");
        match self.mode {
            BnMode::Train => {
                let (y, stats) = self.tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
                if self.update_stats {
                    let (m, v) = self.params.pair_mut(&mean_name, &var_name)?;
                    norm::update_running(m.data_mut(), v.data_mut(), &stats, BN_MOMENTUM);
                }
                Ok(y)
            }
            BnMode::Eval => {
                let m = self.params.get(&mean_name)?.data().to_vec();
                let v = self.params.get(&var_name)?.data().to_vec();
                self.tape.batch_norm_eval(x, gamma, beta, &m, &v, BN_EPS)
            }
        }
    }

    /// Convolution (`{prefix}/weight`), BN (`{prefix}/bn/*`) and optional ReLU6.
    pub fn conv_bn(&mut self, x: Var, prefix: &str, stride: usize, groups: usize, act: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}/weight"))?;
        let k = self.tape.shape(w)[2];
        let y = self.tape.conv2d(x, w, stride, (k - 1) / 2, groups)?;
        let y = self.batch_norm(y, &format!("{prefix}/bn"))?;
        Ok(if act { self.tape.relu6(y) } else { y })
    }
}

/// Adds `{prefix}/weight` (truncated normal) and `{prefix}/bn/*` (γ 1, shift 0,
/// mean 0, var 1). Each tensor draws from its own name-seeded stream.
pub fn init_conv_bn(bundle: &mut ParameterBundle, seed: u64, prefix: &str, shape: [usize; 4]) {
    let wname = format!("{prefix}/weight");
    let w = rng::truncated_normal(&mut rng::prng(seed, &wname), &shape, INIT_STD).trainable();
    bundle.insert(wname, w);
    init_bn(bundle, &format!("{prefix}/bn"), shape[0]);
}

pub fn init_bn(bundle: &mut ParameterBundle, prefix: &str, c: usize) {
    bundle.insert(format!("{prefix}/gamma"), Tensor::ones(&[c]).trainable());
    bundle.insert(format!("{prefix}/beta"), Tensor::zeros(&[c]).trainable());
    bundle.insert(format!("{prefix}/running_mean"), Tensor::zeros(&[c]));
    bundle.insert(format!("{prefix}/running_var"), Tensor::ones(&[c]));
}

/// Concrete MBConv geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MbConvShape {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub expansion: usize,
    pub stride: usize,
}

impl MbConvShape {
    pub fn hidden(&self) -> usize {
        self.c_in * self.expansion
    }

    pub fn has_expand(&self) -> bool {
        self.expansion != 1
    }

    pub fn has_residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.expansion == 0 {
            return Err(Error::param(format!("degenerate MBConv {self:?}")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::param(format!("MBConv kernel {} must be odd", self.kernel)));
        }
        if self.stride == 0 {
            return Err(Error::param("MBConv stride must be at least 1"));
        }
        Ok(())
    }

    /// `(suffix, weight shape)` of each conv unit, in execution order.
    pub fn units(&self) -> Vec<(&'static str, [usize; 4])> {
        let h = self.hidden();
        let mut u = Vec::with_capacity(3);
        if self.has_expand() {
            u.push(("expand", [h, self.c_in, 1, 1]));
        }
        u.push(("dw", [h, 1, self.kernel, self.kernel]));
        u.push(("project", [self.c_out, h, 1, 1]));
        u
    }

    /// Multiply-adds for an `h × w` input.
    pub fn madds(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = ((h - 1) / self.stride + 1, (w - 1) / self.stride + 1);
        let hid = self.hidden() as u64;
        let (h, w, ho, wo) = (h as u64, w as u64, ho as u64, wo as u64);
        let expand = if self.has_expand() {
            self.c_in as u64 * hid * h * w
        } else {
            0
        };
        let k2 = (self.kernel * self.kernel) as u64;
        expand + k2 * hid * ho * wo + hid * self.c_out as u64 * ho * wo
    }
}

pub fn init_mbconv(bundle: &mut ParameterBundle, seed: u64, prefix: &str, shape: &MbConvShape) {
    for (unit, wshape) in shape.units() {
        init_conv_bn(bundle, seed, &format!("{prefix}/{unit}"), wshape);
    }
}

/// Pointwise expand + ReLU6, depthwise + ReLU6, pointwise project, and an
/// identity residual when stride is 1 and widths match.
pub fn mbconv_forward(ctx: &mut Ctx<'_>, x: Var, prefix: &str, shape: &MbConvShape) -> Result<Var> {
    let c = ctx.tape.shape(x)[1];
    if c != shape.c_in {
        return Err(Error::dim(format!(
            "{prefix}: expected {} input channels, got {c}",
            shape.c_in
        )));
    }
    let mut h = x;
    if shape.has_expand() {
        h = ctx.conv_bn(h, &format!("{prefix}/expand"), 1, 1, true)?;
    }
    h = ctx.conv_bn(h, &format!("{prefix}/dw"), shape.stride, shape.hidden(), true)?;
    h = ctx.conv_bn(h, &format!("{prefix}/project"), 1, 1, false)?;
    if shape.has_residual() {
        h = ctx.tape.add(h, x)?;
    }
    Ok(h)
}

/// The fixed stem's two stages.
pub fn stem_shapes(stem: &StemSpec, input_channels: usize) -> ([usize; 4], MbConvShape) {
    let conv = [
        stem.conv_out,
        input_channels,
        StemSpec::CONV_KERNEL,
        StemSpec::CONV_KERNEL,
    ];
    let mb = MbConvShape {
        c_in: stem.conv_out,
        c_out: stem.mbconv_out,
        kernel: StemSpec::MBCONV_KERNEL,
        expansion: 1,
        stride: 1,
    };
    (conv, mb)
}

pub fn init_stem(bundle: &mut ParameterBundle, seed: u64, stem: &StemSpec, input_channels: usize) {
    let (conv, mb) = stem_shapes(stem, input_channels);
    init_conv_bn(bundle, seed, "stem/conv", conv);
    init_mbconv(bundle, seed, "stem/mbconv", &mb);
}

pub fn stem_forward(ctx: &mut Ctx<'_>, x: Var, stem: &StemSpec, input_channels: usize) -> Result<Var> {
    let c = ctx.tape.shape(x);
    if c.len() != 4 || c[1] != input_channels {
        return Err(Error::dim(format!(
            "stem expects [N, {input_channels}, H, W], got {c:?}"
        )));
    }
    let (_, mb) = stem_shapes(stem, input_channels);
    let h = ctx.conv_bn(x, "stem/conv", StemSpec::CONV_STRIDE, 1, true)?;
    mbconv_forward(ctx, h, "stem/mbconv", &mb)
}

pub fn stem_madds(stem: &StemSpec, input_channels: usize, resolution: (usize, usize)) -> u64 {
    let (conv, mb) = stem_shapes(stem, input_channels);
    let s = StemSpec::CONV_STRIDE;
    let (ho, wo) = ((resolution.0 - 1) / s + 1, (resolution.1 - 1) / s + 1);
    let conv_cost = (conv[0] * conv[1] * conv[2] * conv[3] * ho * wo) as u64;
    conv_cost + mb.madds(ho, wo)
}

/// Global-average-pool plus linear classifier (`head/fc/*`).
pub fn init_head(bundle: &mut ParameterBundle, seed: u64, c_in: usize, n_classes: usize) {
    let w = rng::truncated_normal(&mut rng::prng(seed, "head/fc/weight"), &[n_classes, c_in], INIT_STD).trainable();
    bundle.insert("head/fc/weight", w);
    bundle.insert("head/fc/bias", Tensor::zeros(&[n_classes]).trainable());
}

pub fn head_forward(ctx: &mut Ctx<'_>, features: Var) -> Result<Var> {
    let pooled = ctx.tape.global_avg_pool(features)?;
    let w = ctx.param("head/fc/weight")?;
    let b = ctx.param("head/fc/bias")?;
    ctx.tape.linear(pooled, w, b)
}
