//! Direct 2-D convolution kernels on NCHW buffers.
//!
//! Each output plane (or weight slice, for the weight gradient) is produced by
//! exactly one task, so results are bit-identical regardless of thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a kernel runs on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub height: usize,
    pub width: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize, groups: usize) -> Result<Self> {
        if stride < 1 {
            return Err(Error::param(format!("conv2d stride must be >= 1, got {stride}")));
        }
        if groups < 1 {
            return Err(Error::param("conv2d groups must be >= 1"));
        }
        let [batch, c_in, height, width] = *input else {
            return Err(Error::dim(format!("conv2d input must be NCHW, got {input:?}")));
        };
        let [c_out, c_in_per_group, kh, kw] = *weight else {
            return Err(Error::dim(format!(
                "conv2d weight must be [Cout, Cin/groups, k, k], got {weight:?}"
            )));
        };
        if kh != kw {
            return Err(Error::dim(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::dim(format!(
                "channels ({c_in} in, {c_out} out) not divisible by {groups} groups"
            )));
        }
        if c_in / groups != c_in_per_group {
            return Err(Error::dim(format!(
                "weight expects {c_in_per_group} input channels per group, input gives {}",
                c_in / groups
            )));
        }
        if height + 2 * padding < kh || width + 2 * padding < kw {
            return Err(Error::dim(format!(
                "kernel {kh} larger than padded input {height}x{width} (padding {padding})"
            )));
        }
        Ok(ConvGeometry {
            batch,
            c_in,
            height,
            width,
            c_out,
            kernel: kh,
            stride,
            padding,
            groups,
            out_height: (height + 2 * padding - kh) / stride + 1,
            out_width: (width + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn c_in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn c_out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.out_height, self.out_width]
    }

    /// Multiply-adds of one forward pass over the whole batch.
    pub fn madds(&self) -> u64 {
        (self.batch * self.c_out * self.c_in_per_group() * self.kernel * self.kernel * self.out_height * self.out_width)
            as u64
    }

    /// Output columns `ox` whose input column `ox*stride + k - padding` is in range.
    fn valid_cols(&self, k: usize) -> (usize, usize) {
        axis_range(k, self.stride, self.padding, self.width, self.out_width)
    }

    fn valid_rows(&self, k: usize) -> (usize, usize) {
        axis_range(k, self.stride, self.padding, self.height, self.out_height)
    }
}

fn axis_range(k: usize, stride: usize, padding: usize, len: usize, out_len: usize) -> (usize, usize) {
    // smallest o with o*stride + k >= padding
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    // largest o with o*stride + k - padding <= len - 1
    let limit = len + padding - 1;
    if limit < k {
        return (0, 0);
    }
    let hi = ((limit - k) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

fn run_planes<F>(out: &mut [f32], plane: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync + Send,
{
    if work < PARALLEL_THRESHOLD {
        out.chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    } else {
        out.par_chunks_mut(plane).enumerate().for_each(|(i, p)| f(i, p));
    }
}

pub fn forward(input: &[f32], weight: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = (g.out_height, g.out_width);
    let (h, w) = (g.height, g.width);
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cin_g = g.c_in_per_group();
    let cout_g = g.c_out_per_group();
    let mut out = vec![0.0f32; g.batch * g.c_out * oh * ow];
    run_planes(&mut out, oh * ow, g.madds() as usize, |plane_idx, plane| {
        let n = plane_idx / g.c_out;
        let oc = plane_idx % g.c_out;
        let group = oc / cout_g;
        for icl in 0..cin_g {
            let ic = group * cin_g + icl;
            let x = &input[(n * g.c_in + ic) * h * w..][..h * w];
            let wk = &weight[(oc * cin_g + icl) * k * k..][..k * k];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_rows(ky);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox0, ox1) = g.valid_cols(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let xrow = &x[iy * w..][..w];
                        let orow = &mut plane[oy * ow..][..ow];
                        if s == 1 {
                            let off = ox0 + kx - p;
                            for (o, xv) in orow[ox0..ox1].iter_mut().zip(&xrow[off..]) {
                                *o += wv * xv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                orow[ox] += wv * xrow[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn backward_input(grad_out: &[f32], weight: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = (g.out_height, g.out_width);
    let (h, w) = (g.height, g.width);
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cin_g = g.c_in_per_group();
    let cout_g = g.c_out_per_group();
    let mut grad_in = vec![0.0f32; g.batch * g.c_in * h * w];
    run_planes(&mut grad_in, h * w, g.madds() as usize, |plane_idx, plane| {
        let n = plane_idx / g.c_in;
        let ic = plane_idx % g.c_in;
        let group = ic / cin_g;
        let icl = ic % cin_g;
        for ocl in 0..cout_g {
            let oc = group * cout_g + ocl;
            let gy = &grad_out[(n * g.c_out + oc) * oh * ow..][..oh * ow];
            let wk = &weight[(oc * cin_g + icl) * k * k..][..k * k];
            for ky in 0..k {
                let (oy0, oy1) = g.valid_rows(ky);
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    let (ox0, ox1) = g.valid_cols(kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy * s + ky - p;
                        let grow = &gy[oy * ow..][..ow];
                        let xrow = &mut plane[iy * w..][..w];
                        if s == 1 {
                            let off = ox0 + kx - p;
                            for (xv, gv) in xrow[off..].iter_mut().zip(&grow[ox0..ox1]) {
                                *xv += wv * gv;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                xrow[ox * s + kx - p] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    grad_in
}

pub fn backward_weight(grad_out: &[f32], input: &[f32], g: &ConvGeometry) -> Vec<f32> {
    let (oh, ow) = (g.out_height, g.out_width);
    let (h, w) = (g.height, g.width);
    let (k, s, p) = (g.kernel, g.stride, g.padding);
    let cin_g = g.c_in_per_group();
    let cout_g = g.c_out_per_group();
    let mut grad_w = vec![0.0f32; g.c_out * cin_g * k * k];
    run_planes(&mut grad_w, cin_g * k * k, g.madds() as usize, |oc, slice| {
        let group = oc / cout_g;
        for n in 0..g.batch {
            let gy = &grad_out[(n * g.c_out + oc) * oh * ow..][..oh * ow];
            for icl in 0..cin_g {
                let ic = group * cin_g + icl;
                let x = &input[(n * g.c_in + ic) * h * w..][..h * w];
                for ky in 0..k {
                    let (oy0, oy1) = g.valid_rows(ky);
                    for kx in 0..k {
                        let (ox0, ox1) = g.valid_cols(kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let mut acc = 0.0f32;
                        for oy in oy0..oy1 {
                            let iy = oy * s + ky - p;
                            let grow = &gy[oy * ow..][..ow];
                            let xrow = &x[iy * w..][..w];
                            if s == 1 {
                                let off = ox0 + kx - p;
                                for (gv, xv) in grow[ox0..ox1].iter().zip(&xrow[off..]) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * xrow[ox * s + kx - p];
                                }
                            }
                        }
                        slice[(icl * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    });
    grad_w
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Reference convolution on an explicitly zero-padded input.
    fn naive(input: &[f32], weight: &[f32], g: &ConvGeometry) -> Vec<f32> {
        let (hp, wp) = (g.height + 2 * g.padding, g.width + 2 * g.padding);
        let mut padded = vec![0.0; g.batch * g.c_in * hp * wp];
        for n in 0..g.batch {
            for c in 0..g.c_in {
                for y in 0..g.height {
                    for x in 0..g.width {
                        padded[((n * g.c_in + c) * hp + y + g.padding) * wp + x + g.padding] =
                            input[((n * g.c_in + c) * g.height + y) * g.width + x];
                    }
                }
            }
        }
        let cin_g = g.c_in_per_group();
        let cout_g = g.c_out_per_group();
        let mut out = vec![0.0; g.batch * g.c_out * g.out_height * g.out_width];
        for n in 0..g.batch {
            for oc in 0..g.c_out {
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        let mut acc = 0.0;
                        for icl in 0..cin_g {
                            let ic = (oc / cout_g) * cin_g + icl;
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    acc += weight[((oc * cin_g + icl) * g.kernel + ky) * g.kernel + kx]
                                        * padded
                                            [((n * g.c_in + ic) * hp + oy * g.stride + ky) * wp + ox * g.stride + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + oc) * g.out_height + oy) * g.out_width + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64, len: usize) -> Vec<f32> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                state = state
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_naive_reference() {
        let cases = [
            ([2, 4, 7, 6], [6, 4, 3, 3], 1, 1, 1),
            ([1, 4, 7, 7], [4, 1, 5, 5], 2, 2, 4),
            ([2, 6, 8, 5], [6, 1, 7, 7], 1, 3, 6),
            ([1, 3, 9, 9], [4, 3, 3, 3], 2, 1, 1),
            ([2, 4, 5, 5], [8, 4, 1, 1], 1, 0, 1),
            ([1, 4, 6, 6], [4, 2, 3, 3], 2, 1, 2),
            ([1, 2, 2, 2], [2, 1, 7, 7], 1, 3, 2),
            ([2, 2, 1, 3], [3, 2, 5, 5], 2, 2, 1),
        ];
        for (i, (x_shape, w_shape, s, p, groups)) in cases.into_iter().enumerate() {
            let g = ConvGeometry::new(&x_shape, &w_shape, s, p, groups).unwrap();
            let x = lcg(i as u64, x_shape.iter().product());
            let w = lcg(100 + i as u64, w_shape.iter().product());
            let fast = forward(&x, &w, &g);
            let slow = naive(&x, &w, &g);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-5, "case {i}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry::new(&[1, 3, 32, 32], &[8, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (16, 16));
        let g = ConvGeometry::new(&[1, 3, 7, 7], &[8, 3, 3, 3], 2, 1, 1).unwrap();
        assert_eq!(g.out_height, 4);
    }

    #[test]
    fn rejects_bad_geometry() {
        assert!(matches!(
            ConvGeometry::new(&[1, 3, 8, 8], &[8, 3, 3, 3], 0, 1, 1),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            ConvGeometry::new(&[1, 3, 8, 8], &[8, 2, 3, 3], 1, 1, 1),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            ConvGeometry::new(&[1, 3, 8, 8], &[8, 1, 3, 3], 1, 1, 2),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn adjoint_identities() {
        // <conv(x, w), gy> == <x, backward_input(gy, w)> == <w, backward_weight(gy, x)>
        for (xs, ws, s, p, groups) in [
            ([2, 4, 6, 6], [4, 1, 5, 5], 2, 2, 4),
            ([1, 3, 2, 2], [3, 1, 7, 7], 1, 3, 3),
        ] {
            adjoint_case(xs, ws, s, p, groups);
        }
    }

    fn adjoint_case(xs: [usize; 4], ws: [usize; 4], s: usize, p: usize, groups: usize) {
        let g = ConvGeometry::new(&xs, &ws, s, p, groups).unwrap();
        let x = lcg(1, xs.iter().product());
        let w = lcg(2, ws.iter().product());
        let gy = lcg(3, g.batch * g.c_out * g.out_height * g.out_width);
        let y = forward(&x, &w, &g);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let gx = backward_input(&gy, &w, &g);
        let mid: f64 = x.iter().zip(&gx).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let gw = backward_weight(&gy, &x, &g);
        let rhs: f64 = w.iter().zip(&gw).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - mid).abs() < 1e-4);
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
