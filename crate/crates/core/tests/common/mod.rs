//! Finite-difference gradient checking shared by the integration suites.

#![allow(dead_code)]

use nas_adapt::numerics::{Tape, Tensor, Var};
use nas_adapt::rng::{prng, truncated_normal, uniform, Prng};
use nas_adapt::Result;
use rand::Rng;

pub const FD_STEP: f32 = 1e-2;
pub const FD_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 10;

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random primitive instance: leaf values and the op applied to them.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn loss_of(case: &Case, inputs: &[Tensor], probe: &Tensor, track: bool) -> Result<(Tape, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = track;
            tape.leaf(t)
        })
        .collect();
    let out = (case.build)(&mut tape, &vars)?;
    let p = tape.constant(probe.clone());
    let loss = tape.dot(out, p)?;
    Ok((tape, vars, loss))
}

/// Largest norm-wise relative error ‖g_fd − g_ad‖ / max(‖g_fd‖, ‖g_ad‖) over
/// the case's inputs. The scalar loss is `⟨op(inputs), r⟩` for a fixed random
/// probe `r`, so every output entry contributes.
pub fn relative_error(case: &Case, seed: u64) -> Result<f64> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = case.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&mut tape, &vars)?;
        tape.shape(out).to_vec()
    };
    let probe = truncated_normal(&mut prng(seed, "probe"), &out_shape, 1.0);
    let (tape, vars, loss) = loss_of(case, &case.inputs, &probe, true)?;
    let grads = tape.backward(loss)?;
    let mut worst = 0.0f64;
    for (j, var) in vars.iter().enumerate() {
        let ad = grads
            .get(*var)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; case.inputs[j].numel()]);
        let mut num = 0.0f64;
        let mut den_fd = 0.0f64;
        let mut den_ad = 0.0f64;
        for k in 0..case.inputs[j].numel() {
            let eval = |delta: f32| -> Result<f64> {
                let mut inputs = case.inputs.clone();
                inputs[j].data_mut()[k] += delta;
                let (tape, _, loss) = loss_of(case, &inputs, &probe, false)?;
                Ok(tape.value(loss).item() as f64)
            };
            let fd = (eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP as f64);
            let a = ad[k] as f64;
            num += (fd - a).powi(2);
            den_fd += fd * fd;
            den_ad += a * a;
        }
        let den = den_fd.sqrt().max(den_ad.sqrt());
        if den > 1e-8 {
            worst = worst.max(num.sqrt() / den);
        }
    }
    Ok(worst)
}

pub fn normal(rng: &mut Prng, shape: &[usize]) -> Tensor {
    let seed = rng.random::<u64>();
    truncated_normal(&mut prng(seed, "normal"), shape, 1.0)
}

/// Values at least `margin` away from the kinks of ReLU6.
pub fn away_from_kinks(rng: &mut Prng, shape: &[usize], margin: f32) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = uniform(rng, -3.0, 9.0);
            if v.abs() > margin && (v - 6.0).abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn dim(rng: &mut Prng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Every differentiable primitive, each drawing a random instance from a seed.
pub fn primitives() -> Vec<(&'static str, fn(u64) -> Case)> {
    vec![
        ("conv2d", conv2d),
        ("conv2d_depthwise", conv2d_depthwise),
        ("relu6", relu6),
        ("batch_norm_train", batch_norm_train),
        ("batch_norm_eval", batch_norm_eval),
        ("add", add),
        ("mul", mul),
        ("scale", scale),
        ("sum", sum),
        ("weighted_sum", weighted_sum),
        ("channel_scale", channel_scale),
        ("softmax", softmax),
        ("matvec_const", matvec_const),
        ("dot", dot),
        ("linear", linear),
        ("global_avg_pool", global_avg_pool),
        ("cross_entropy", cross_entropy),
        ("pad_channels", pad_channels),
    ]
}

fn conv2d(seed: u64) -> Case {
    let mut r = prng(seed, "conv2d");
    let (n, ci, co) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let k = [1, 3, 5][dim(&mut r, 0, 2)];
    let stride = dim(&mut r, 1, 2);
    let hw = dim(&mut r, 3, 6);
    let x = normal(&mut r, &[n, ci, hw, hw]);
    let w = normal(&mut r, &[co, ci, k, k]);
    Case {
        inputs: vec![x, w],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, (k - 1) / 2, 1)),
    }
}

fn conv2d_depthwise(seed: u64) -> Case {
    let mut r = prng(seed, "conv2d_depthwise");
    let (n, c) = (dim(&mut r, 1, 2), dim(&mut r, 2, 4));
    let k = [3, 5, 7][dim(&mut r, 0, 2)];
    let stride = dim(&mut r, 1, 2);
    let hw = dim(&mut r, 2, 6);
    let x = normal(&mut r, &[n, c, hw, hw]);
    let w = normal(&mut r, &[c, 1, k, k]);
    Case {
        inputs: vec![x, w],
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], stride, (k - 1) / 2, c)),
    }
}

fn relu6(seed: u64) -> Case {
    let mut r = prng(seed, "relu6");
    let shape = [
        dim(&mut r, 1, 2),
        dim(&mut r, 1, 3),
        dim(&mut r, 1, 4),
        dim(&mut r, 1, 4),
    ];
    Case {
        inputs: vec![away_from_kinks(&mut r, &shape, 4.0 * FD_STEP)],
        build: Box::new(|t, v| Ok(t.relu6(v[0]))),
    }
}

fn bn_inputs(r: &mut Prng) -> (Tensor, Tensor, Tensor) {
    let c = dim(r, 1, 3);
    let shape = [dim(r, 2, 3), c, dim(r, 2, 3), dim(r, 2, 3)];
    let x = normal(r, &shape);
    let g = Tensor::new(vec![c], (0..c).map(|_| uniform(r, 0.5, 1.5)).collect()).unwrap();
    let b = normal(r, &[c]);
    (x, g, b)
}

fn batch_norm_train(seed: u64) -> Case {
    let mut r = prng(seed, "batch_norm_train");
    let (x, g, b) = bn_inputs(&mut r);
    Case {
        inputs: vec![x, g, b],
        build: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
    }
}

fn batch_norm_eval(seed: u64) -> Case {
    let mut r = prng(seed, "batch_norm_eval");
    let (x, g, b) = bn_inputs(&mut r);
    let c = g.numel();
    let mean: Vec<f32> = (0..c).map(|_| uniform(&mut r, -0.5, 0.5)).collect();
    let var: Vec<f32> = (0..c).map(|_| uniform(&mut r, 0.5, 2.0)).collect();
    Case {
        inputs: vec![x, g, b],
        build: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    }
}

fn same_shape_pair(name: &str, seed: u64) -> (Tensor, Tensor) {
    let mut r = prng(seed, name);
    let shape = [dim(&mut r, 1, 3), dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
    (normal(&mut r, &shape), normal(&mut r, &shape))
}

fn add(seed: u64) -> Case {
    let (a, b) = same_shape_pair("add", seed);
    Case {
        inputs: vec![a, b],
        build: Box::new(|t, v| t.add(v[0], v[1])),
    }
}

fn mul(seed: u64) -> Case {
    let (a, b) = same_shape_pair("mul", seed);
    Case {
        inputs: vec![a, b],
        build: Box::new(|t, v| t.mul(v[0], v[1])),
    }
}

fn scale(seed: u64) -> Case {
    let mut r = prng(seed, "scale");
    let k = uniform(&mut r, -3.0, 3.0);
    let x = {
        let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
        normal(&mut r, &s)
    };
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| Ok(t.scale(v[0], k))),
    }
}

fn sum(seed: u64) -> Case {
    let mut r = prng(seed, "sum");
    let x = {
        let s = [dim(&mut r, 1, 4), dim(&mut r, 1, 4)];
        normal(&mut r, &s)
    };
    Case {
        inputs: vec![x],
        build: Box::new(|t, v| Ok(t.sum(v[0]))),
    }
}

fn weighted_sum(seed: u64) -> Case {
    let mut r = prng(seed, "weighted_sum");
    let m = dim(&mut r, 1, 4);
    let shape = [
        dim(&mut r, 1, 2),
        dim(&mut r, 1, 3),
        dim(&mut r, 1, 3),
        dim(&mut r, 1, 3),
    ];
    let mut inputs: Vec<Tensor> = (0..m).map(|_| normal(&mut r, &shape)).collect();
    inputs.push(normal(&mut r, &[m]));
    Case {
        inputs,
        build: Box::new(move |t, v| t.weighted_sum(&v[..m], v[m])),
    }
}

fn channel_scale(seed: u64) -> Case {
    let mut r = prng(seed, "channel_scale");
    let c = dim(&mut r, 1, 4);
    let x = {
        let s = [dim(&mut r, 1, 2), c, dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
        normal(&mut r, &s)
    };
    let s = normal(&mut r, &[c]);
    Case {
        inputs: vec![x, s],
        build: Box::new(|t, v| t.channel_scale(v[0], v[1])),
    }
}

fn softmax(seed: u64) -> Case {
    let mut r = prng(seed, "softmax");
    let x = {
        let s = [dim(&mut r, 1, 8)];
        normal(&mut r, &s)
    };
    Case {
        inputs: vec![x],
        build: Box::new(|t, v| t.softmax(v[0])),
    }
}

fn matvec_const(seed: u64) -> Case {
    let mut r = prng(seed, "matvec_const");
    let (rows, cols) = (dim(&mut r, 1, 8), dim(&mut r, 1, 4));
    let m = normal(&mut r, &[rows, cols]).into_data();
    let x = normal(&mut r, &[cols]);
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| t.matvec_const(m.clone(), rows, cols, v[0])),
    }
}

fn dot(seed: u64) -> Case {
    let (a, b) = same_shape_pair("dot", seed);
    Case {
        inputs: vec![a, b],
        build: Box::new(|t, v| t.dot(v[0], v[1])),
    }
}

fn linear(seed: u64) -> Case {
    let mut r = prng(seed, "linear");
    let (n, i, o) = (dim(&mut r, 1, 3), dim(&mut r, 1, 5), dim(&mut r, 1, 4));
    let x = normal(&mut r, &[n, i]);
    let w = normal(&mut r, &[o, i]);
    let b = normal(&mut r, &[o]);
    Case {
        inputs: vec![x, w, b],
        build: Box::new(|t, v| t.linear(v[0], v[1], v[2])),
    }
}

fn global_avg_pool(seed: u64) -> Case {
    let mut r = prng(seed, "global_avg_pool");
    let x = {
        let s = [
            dim(&mut r, 1, 2),
            dim(&mut r, 1, 3),
            dim(&mut r, 1, 4),
            dim(&mut r, 1, 4),
        ];
        normal(&mut r, &s)
    };
    Case {
        inputs: vec![x],
        build: Box::new(|t, v| t.global_avg_pool(v[0])),
    }
}

fn cross_entropy(seed: u64) -> Case {
    let mut r = prng(seed, "cross_entropy");
    let (n, c) = (dim(&mut r, 1, 4), dim(&mut r, 2, 5));
    let x = normal(&mut r, &[n, c]);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| t.cross_entropy(v[0], &labels)),
    }
}

fn pad_channels(seed: u64) -> Case {
    let mut r = prng(seed, "pad_channels");
    let c = dim(&mut r, 1, 3);
    let extra = dim(&mut r, 0, 3);
    let x = {
        let s = [dim(&mut r, 1, 2), c, dim(&mut r, 1, 3), dim(&mut r, 1, 3)];
        normal(&mut r, &s)
    };
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| t.pad_channels(v[0], c + extra)),
    }
}
