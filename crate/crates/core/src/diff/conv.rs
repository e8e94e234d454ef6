//! 2-d convolution (im2col + GEMM), nearest upsampling and instance
//! normalization, all on single `[C,H,W]` samples.

use super::ops::as1;
use super::{Arr, Tape, Var};
use ndarray::{Array1, Array2, Array3, Ix3, Ix4};

pub(crate) fn as3(a: &Arr) -> ndarray::ArrayView3<'_, f64> {
    a.view().into_dimensionality::<Ix3>().expect("expected 3-d tensor")
}

pub(crate) fn as4(a: &Arr) -> ndarray::ArrayView4<'_, f64> {
    a.view().into_dimensionality::<Ix4>().expect("expected 4-d tensor")
}

fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

/// `[C,H,W]` -> patch matrix `[H'*W', C*kh*kw]` with zero padding.
fn im2col(
    x: &ndarray::ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut patches = Array2::<f64>::zeros((oh * ow, c * kh * kw));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut out_row = patches.row_mut(row);
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[ci * kh * kw + ky * kw + kx] = x[(ci, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    patches
}

/// Adjoint of [`im2col`]: scatter-adds patch gradients back onto the input.
fn col2im(
    dp: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut dx = Array3::<f64>::zeros((c, h, w));
    for oy in 0..oh {
        for ox in 0..ow {
            let row = dp.row(oy * ow + ox);
            let base_y = (oy * stride) as isize - pad as isize;
            let base_x = (ox * stride) as isize - pad as isize;
            for ci in 0..c {
                for ky in 0..kh {
                    let iy = base_y + ky as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = base_x + kx as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[(ci, iy as usize, ix as usize)] += row[ci * kh * kw + ky * kw + kx];
                    }
                }
            }
        }
    }
    dx
}

impl Tape {
    /// Convolution of `x [C,H,W]` with `w [O,C,kh,kw]` plus bias `b [O]`,
    /// zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xv = as3(self.value(x));
        let wv = as4(self.value(w));
        let bv = as1(self.value(b));
        let (o, ci, kh, kw) = wv.dim();
        let (c, h, wd) = xv.dim();
        assert_eq!(c, ci, "conv2d channel mismatch");
        assert_eq!(o, bv.len(), "conv2d bias mismatch");
        let oh = conv_out_len(h, kh, stride, pad);
        let ow = conv_out_len(wd, kw, stride, pad);

        let patches = im2col(&xv, kh, kw, stride, pad);
        let wmat = to_matrix(&wv.to_owned().into_dyn(), o, ci * kh * kw);
        // [O, K] x [K, n_p] -> [O, n_p]
        let mut out_op = wmat.dot(&patches.t());
        out_op += &bv.view().insert_axis(ndarray::Axis(1));
        let value = out_op
            .into_shape_with_order((o, oh, ow))
            .expect("conv output reshape")
            .into_dyn();

        self.push_op(
            value,
            vec![x, w, b],
            Box::new(move |ctx| {
                let xv = as3(ctx.parent(0));
                let wv = as4(ctx.parent(1));
                let (o, ci, kh2, kw2) = wv.dim();
                let (c, h, wd) = xv.dim();
                let g = as3(ctx.grad());
                let n_p = g.dim().1 * g.dim().2;
                let gmat = to_matrix(ctx.grad(), o, n_p); // [O, n_p]

                let patches = im2col(&xv, kh2, kw2, stride, pad);
                let wmat = to_matrix(ctx.parent(1), o, ci * kh2 * kw2);

                let dw = gmat
                    .dot(&patches)
                    .into_shape_with_order((o, ci, kh2, kw2))
                    .expect("dw reshape")
                    .into_dyn();
                let db = gmat.sum_axis(ndarray::Axis(1)).into_dyn();
                let dp = gmat.t().dot(&wmat); // [n_p, K]
                let dx = col2im(&dp, c, h, wd, kh2, kw2, stride, pad).into_dyn();
                vec![dx, dw, db]
            }),
        )
    }

    /// Nearest-neighbour 2x upsampling of `[C,H,W]`.
    pub fn upsample_nearest2(&mut self, x: Var) -> Var {
        let xv = as3(self.value(x));
        let (c, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((c, h * 2, w * 2));
        for ci in 0..c {
            for y in 0..h * 2 {
                for xx in 0..w * 2 {
                    out[(ci, y, xx)] = xv[(ci, y / 2, xx / 2)];
                }
            }
        }
        self.push_op(
            out.into_dyn(),
            vec![x],
            Box::new(|ctx| {
                let g = as3(ctx.grad());
                let (c, h2, w2) = g.dim();
                let mut dx = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
                for ci in 0..c {
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            dx[(ci, y / 2, xx / 2)] += g[(ci, y, xx)];
                        }
                    }
                }
                vec![dx.into_dyn()]
            }),
        )
    }

    /// Per-channel instance normalization of `[C,H,W]` followed by the affine
    /// `gamma * xhat + beta`. The denominator is `sqrt(var + eps)` with
    /// population variance over the channel's spatial extent.
    pub fn instance_norm_affine(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = as3(self.value(x));
        let gv = as1(self.value(gamma));
        let bv = as1(self.value(beta));
        let (c, h, w) = xv.dim();
        assert_eq!(gv.len(), c, "gamma length mismatch");
        assert_eq!(bv.len(), c, "beta length mismatch");

        let mut out = Array3::<f64>::zeros((c, h, w));
        for ci in 0..c {
            let plane = xv.index_axis(ndarray::Axis(0), ci);
            let (mu, var) = plane_stats(&plane);
            let inv = 1.0 / (var + eps).sqrt();
            let (g, b) = (gv[ci], bv[ci]);
            out.index_axis_mut(ndarray::Axis(0), ci)
                .assign(&plane.map(|&v| g * (v - mu) * inv + b));
        }

        self.push_op(
            out.into_dyn(),
            vec![x, gamma, beta],
            Box::new(move |ctx| {
                let xv = as3(ctx.parent(0));
                let gv = as1(ctx.parent(1));
                let g_out = as3(ctx.grad());
                let (c, h, w) = xv.dim();
                let n = (h * w) as f64;

                let mut dx = Array3::<f64>::zeros((c, h, w));
                let mut dgamma = Array1::<f64>::zeros(c);
                let mut dbeta = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let plane = xv.index_axis(ndarray::Axis(0), ci);
                    let gp = g_out.index_axis(ndarray::Axis(0), ci);
                    let (mu, var) = plane_stats(&plane);
                    let inv = 1.0 / (var + eps).sqrt();

                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (xval, gval) in plane.iter().zip(gp.iter()) {
                        let xh = (xval - mu) * inv;
                        sum_g += gval;
                        sum_gx += gval * xh;
                    }
                    dbeta[ci] = sum_g;
                    dgamma[ci] = sum_gx;

                    let gamma_c = gv[ci];
                    let mean_g = sum_g / n;
                    let mean_gx = sum_gx / n;
                    for ((xval, gval), dst) in plane
                        .iter()
                        .zip(gp.iter())
                        .zip(dx.index_axis_mut(ndarray::Axis(0), ci).iter_mut())
                    {
                        let xh = (xval - mu) * inv;
                        *dst = gamma_c * inv * (gval - mean_g - xh * mean_gx);
                    }
                }
                vec![dx.into_dyn(), dgamma.into_dyn(), dbeta.into_dyn()]
            }),
        )
    }
}

/// Flattens an arbitrary tensor into an owned standard-layout `[rows, cols]`.
fn to_matrix(a: &Arr, rows: usize, cols: usize) -> Array2<f64> {
    let flat: Vec<f64> = a.iter().copied().collect();
    Array2::from_shape_vec((rows, cols), flat).expect("matrix reshape")
}

fn plane_stats(plane: &ndarray::ArrayView2<'_, f64>) -> (f64, f64) {
    let n = plane.len() as f64;
    let mu = plane.sum() / n;
    let var = plane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, var)
}
