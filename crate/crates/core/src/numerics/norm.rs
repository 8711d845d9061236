//! Per-channel batch normalization kernels on NCHW buffers.

pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Values saved by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    /// Normalized input (train) or centered-and-scaled input (eval).
    pub xhat: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Batch statistics observed in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, used for the running estimate.
    pub var: Vec<f32>,
}

pub(crate) fn dims(shape: &[usize]) -> (usize, usize, usize) {
    let spatial: usize = shape[2..].iter().product();
    (shape[0], shape[1], spatial)
}

pub fn forward_train(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> (Vec<f32>, BnSaved, BatchStats) {
    let (n, c, hw) = dims(shape);
    let count = (n * hw) as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    for ch in 0..c {
        let mut acc = 0.0f64;
        for b in 0..n {
            acc += x[(b * c + ch) * hw..][..hw].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = (acc / count as f64) as f32;
        let mut sq = 0.0f64;
        for b in 0..n {
            sq += x[(b * c + ch) * hw..][..hw]
                .iter()
                .map(|&v| ((v - m) as f64).powi(2))
                .sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = (sq / count as f64) as f32;
    }
    let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let v = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
    let stats = BatchStats {
        mean,
        var: var.iter().map(|v| v * unbiased).collect(),
    };
    (y, BnSaved { xhat, inv_std }, stats)
}

pub fn forward_eval(
    x: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    running_mean: &[f32],
    running_var: &[f32],
    eps: f32,
) -> (Vec<f32>, BnSaved) {
    let (n, c, hw) = dims(shape);
    let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = vec![0.0f32; x.len()];
    let mut y = vec![0.0f32; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let v = (x[i] - running_mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    (y, BnSaved { xhat, inv_std })
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn backward(
    grad_out: &[f32],
    shape: &[usize],
    gamma: &[f32],
    saved: &BnSaved,
    mode: BnMode,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (n, c, hw) = dims(shape);
    let count = (n * hw) as f32;
    let mut g_gamma = vec![0.0f32; c];
    let mut g_beta = vec![0.0f32; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                g_gamma[ch] += grad_out[i] * saved.xhat[i];
                g_beta[ch] += grad_out[i];
            }
        }
    }
    let mut g_x = vec![0.0f32; grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let scale = gamma[ch] * saved.inv_std[ch];
            match mode {
                BnMode::Eval => {
                    for i in base..base + hw {
                        g_x[i] = grad_out[i] * scale;
                    }
                }
                BnMode::Train => {
                    let mean_dy = g_beta[ch] / count;
                    let mean_dy_xhat = g_gamma[ch] / count;
                    for i in base..base + hw {
                        g_x[i] = scale * (grad_out[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
                    }
                }
            }
        }
    }
    (g_x, g_gamma, g_beta)
}

/// Exponential moving-average update of running statistics.
pub fn update_running(running_mean: &mut [f32], running_var: &mut [f32], stats: &BatchStats, momentum: f32) {
    for (r, m) in running_mean.iter_mut().zip(&stats.mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, v) in running_var.iter_mut().zip(&stats.var) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
}
