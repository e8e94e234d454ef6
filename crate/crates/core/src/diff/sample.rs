//! Differentiable bilinear sampling and volumetric ray compositing.
//!
//! Bilinear sampling works in cell-index space: the value of cell `(iy, ix)`
//! sits at continuous coordinate `(x = ix, y = iy)` and positions are clamped
//! to the border before interpolation.

use super::conv::as3;
use super::ops::as2;
use super::{Tape, Var};
use ndarray::{Array1, Array2, Array3, Ix2, Ix3};
use std::sync::Arc;

/// Depth denominator floor in compositing, `depth = sum(w t) / max(sum w, ..)`.
pub const DEPTH_EPS: f64 = 1e-8;

struct BilinearCell {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// False when the pre-clamp position fell outside the border along x/y;
    /// the positional derivative vanishes there.
    inside_x: bool,
    inside_y: bool,
}

fn bilinear_cell(x: f64, y: f64, w: usize, h: usize) -> BilinearCell {
    let max_x = (w - 1) as f64;
    let max_y = (h - 1) as f64;
    let inside_x = (0.0..=max_x).contains(&x);
    let inside_y = (0.0..=max_y).contains(&y);
    let cx = x.clamp(0.0, max_x);
    let cy = y.clamp(0.0, max_y);
    let x0 = cx.floor() as usize;
    let y0 = cy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    BilinearCell {
        x0,
        x1,
        y0,
        y1,
        fx: cx - x0 as f64,
        fy: cy - y0 as f64,
        inside_x,
        inside_y,
    }
}

fn sample_plane(plane: &ndarray::ArrayView2<'_, f64>, cell: &BilinearCell) -> f64 {
    let (fx, fy) = (cell.fx, cell.fy);
    plane[(cell.y0, cell.x0)] * (1.0 - fx) * (1.0 - fy)
        + plane[(cell.y0, cell.x1)] * fx * (1.0 - fy)
        + plane[(cell.y1, cell.x0)] * (1.0 - fx) * fy
        + plane[(cell.y1, cell.x1)] * fx * fy
}

/// d(sample)/dx and d(sample)/dy, zero where the position was clamped.
fn sample_plane_pos_grad(plane: &ndarray::ArrayView2<'_, f64>, cell: &BilinearCell) -> (f64, f64) {
    let (fx, fy) = (cell.fx, cell.fy);
    let ddx = if cell.inside_x {
        (plane[(cell.y0, cell.x1)] - plane[(cell.y0, cell.x0)]) * (1.0 - fy)
            + (plane[(cell.y1, cell.x1)] - plane[(cell.y1, cell.x0)]) * fy
    } else {
        0.0
    };
    let ddy = if cell.inside_y {
        (plane[(cell.y1, cell.x0)] - plane[(cell.y0, cell.x0)]) * (1.0 - fx)
            + (plane[(cell.y1, cell.x1)] - plane[(cell.y0, cell.x1)]) * fx
    } else {
        0.0
    };
    (ddx, ddy)
}

impl Tape {
    /// Warps `feat [C,H,W]` by `flow [2,H,W]` (du, dv in cell units):
    /// `out[c,y,x] = bilinear(feat_c, x + du(y,x), y + dv(y,x))`.
    pub fn grid_sample_flow(&mut self, feat: Var, flow: Var) -> Var {
        let fv = as3(self.value(feat));
        let flv = as3(self.value(flow));
        let (c, h, w) = fv.dim();
        assert_eq!(flv.dim(), (2, h, w), "flow shape mismatch");

        let mut out = Array3::<f64>::zeros((c, h, w));
        for y in 0..h {
            for x in 0..w {
                let cell = bilinear_cell(
                    x as f64 + flv[(0, y, x)],
                    y as f64 + flv[(1, y, x)],
                    w,
                    h,
                );
                for ci in 0..c {
                    out[(ci, y, x)] = sample_plane(&fv.index_axis(ndarray::Axis(0), ci), &cell);
                }
            }
        }

        self.push_op(
            out.into_dyn(),
            vec![feat, flow],
            Box::new(|ctx| {
                let fv = as3(ctx.parent(0));
                let flv = as3(ctx.parent(1));
                let g = as3(ctx.grad());
                let (c, h, w) = fv.dim();
                let mut dfeat = Array3::<f64>::zeros((c, h, w));
                let mut dflow = Array3::<f64>::zeros((2, h, w));
                for y in 0..h {
                    for x in 0..w {
                        let cell = bilinear_cell(
                            x as f64 + flv[(0, y, x)],
                            y as f64 + flv[(1, y, x)],
                            w,
                            h,
                        );
                        let (fx, fy) = (cell.fx, cell.fy);
                        let mut du = 0.0;
                        let mut dv = 0.0;
                        for ci in 0..c {
                            let go = g[(ci, y, x)];
                            dfeat[(ci, cell.y0, cell.x0)] += go * (1.0 - fx) * (1.0 - fy);
                            dfeat[(ci, cell.y0, cell.x1)] += go * fx * (1.0 - fy);
                            dfeat[(ci, cell.y1, cell.x0)] += go * (1.0 - fx) * fy;
                            dfeat[(ci, cell.y1, cell.x1)] += go * fx * fy;
                            let (ddx, ddy) = sample_plane_pos_grad(
                                &fv.index_axis(ndarray::Axis(0), ci),
                                &cell,
                            );
                            du += go * ddx;
                            dv += go * ddy;
                        }
                        dflow[(0, y, x)] = du;
                        dflow[(1, y, x)] = dv;
                    }
                }
                vec![dfeat.into_dyn(), dflow.into_dyn()]
            }),
        )
    }

    /// Samples `feat [C,H,W]` at fixed cell-space points -> `[N,C]`.
    /// Positions are not differentiated.
    pub fn sample_at_points(&mut self, feat: Var, points: Arc<Vec<[f64; 2]>>) -> Var {
        let (c, h, w) = as3(self.value(feat)).dim();
        let n = points.len();
        let plane = h * w;
        let fslice = self.value(feat).as_slice().expect("standard layout");
        let mut out = Vec::with_capacity(n * c);
        for p in points.iter() {
            let cell = bilinear_cell(p[0], p[1], w, h);
            let (fx, fy) = (cell.fx, cell.fy);
            let i00 = cell.y0 * w + cell.x0;
            let i01 = cell.y0 * w + cell.x1;
            let i10 = cell.y1 * w + cell.x0;
            let i11 = cell.y1 * w + cell.x1;
            let (w00, w01, w10, w11) = (
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            );
            for ci in 0..c {
                let base = ci * plane;
                out.push(
                    fslice[base + i00] * w00
                        + fslice[base + i01] * w01
                        + fslice[base + i10] * w10
                        + fslice[base + i11] * w11,
                );
            }
        }
        let out = Array2::from_shape_vec((n, c), out).unwrap();
        self.push_op(
            out.into_dyn(),
            vec![feat],
            Box::new(move |ctx| {
                let (c, h, w) = as3(ctx.parent(0)).dim();
                let plane = h * w;
                let g = ctx.grad().as_slice().expect("standard layout");
                let mut dfeat = vec![0.0f64; c * plane];
                for (i, p) in points.iter().enumerate() {
                    let cell = bilinear_cell(p[0], p[1], w, h);
                    let (fx, fy) = (cell.fx, cell.fy);
                    let i00 = cell.y0 * w + cell.x0;
                    let i01 = cell.y0 * w + cell.x1;
                    let i10 = cell.y1 * w + cell.x0;
                    let i11 = cell.y1 * w + cell.x1;
                    let (w00, w01, w10, w11) = (
                        (1.0 - fx) * (1.0 - fy),
                        fx * (1.0 - fy),
                        (1.0 - fx) * fy,
                        fx * fy,
                    );
                    let grow = &g[i * c..(i + 1) * c];
                    for (ci, &go) in grow.iter().enumerate() {
                        let base = ci * plane;
                        dfeat[base + i00] += go * w00;
                        dfeat[base + i01] += go * w01;
                        dfeat[base + i10] += go * w10;
                        dfeat[base + i11] += go * w11;
                    }
                }
                vec![Array3::from_shape_vec((c, h, w), dfeat).unwrap().into_dyn()]
            }),
        )
    }

    /// Volumetric compositing of a ray batch.
    ///
    /// Inputs: `sigma [R,S]` (nonnegative densities), `color [R,S,3]`;
    /// constants: sorted sample depths `t [R,S]`, per-ray `far`, and the
    /// `background [3]` blended with residual transmittance.
    ///
    /// Output is packed per ray as `[rgb(3), depth, acc, weights(S)]`; see
    /// [`CompositeLayout`].
    pub fn composite_pack(
        &mut self,
        sigma: Var,
        color: Var,
        t: Arc<Array2<f64>>,
        far: Arc<Array1<f64>>,
        background: [f64; 3],
    ) -> Var {
        let sv = self
            .value(sigma)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("sigma 2-d");
        let cv = self
            .value(color)
            .view()
            .into_dimensionality::<Ix3>()
            .expect("color 3-d");
        let (r, s) = sv.dim();
        assert_eq!(cv.dim(), (r, s, 3), "color shape mismatch");
        assert_eq!(t.dim(), (r, s), "t shape mismatch");
        assert_eq!(far.len(), r, "far length mismatch");

        let layout = CompositeLayout { n_samples: s };
        let mut out = Array2::<f64>::zeros((r, layout.width()));
        for ri in 0..r {
            let trow = t.row(ri);
            debug_assert!(trow.windows(2).into_iter().all(|p| p[0] <= p[1]), "unsorted t");
            let mut transmittance = 1.0;
            let mut rgb = [0.0f64; 3];
            let mut wsum = 0.0;
            let mut wtsum = 0.0;
            for k in 0..s {
                let delta = if k + 1 < s {
                    trow[k + 1] - trow[k]
                } else {
                    (far[ri] - trow[k]).max(0.0)
                };
                let alpha = 1.0 - (-sv[(ri, k)] * delta).exp();
                let wk = alpha * transmittance;
                transmittance *= 1.0 - alpha;
                for ch in 0..3 {
                    rgb[ch] += wk * cv[(ri, k, ch)];
                }
                wsum += wk;
                wtsum += wk * trow[k];
                out[(ri, layout.weight(k))] = wk;
            }
            for ch in 0..3 {
                out[(ri, ch)] = rgb[ch] + (1.0 - wsum) * background[ch];
            }
            out[(ri, layout.depth())] = wtsum / wsum.max(DEPTH_EPS);
            out[(ri, layout.acc())] = wsum;
        }

        self.push_op(
            out.into_dyn(),
            vec![sigma, color],
            Box::new(move |ctx| {
                let sv = ctx
                    .parent(0)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .expect("sigma 2-d");
                let cv = ctx
                    .parent(1)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .expect("color 3-d");
                let packed = as2(ctx.output());
                let g = as2(ctx.grad());
                let (r, s) = sv.dim();
                let layout = CompositeLayout { n_samples: s };

                let mut dsigma = Array2::<f64>::zeros((r, s));
                let mut dcolor = Array3::<f64>::zeros((r, s, 3));
                for ri in 0..r {
                    let trow = t.row(ri);
                    let wsum = packed[(ri, layout.acc())];
                    let depth = packed[(ri, layout.depth())];
                    let denom = wsum.max(DEPTH_EPS);
                    let g_rgb = [g[(ri, 0)], g[(ri, 1)], g[(ri, 2)]];
                    let g_depth = g[(ri, layout.depth())];
                    let g_acc = g[(ri, layout.acc())];

                    // Total dL/dw_k across all packed outputs.
                    let mut u = vec![0.0f64; s];
                    for k in 0..s {
                        let mut uk = g[(ri, layout.weight(k))] + g_acc;
                        for ch in 0..3 {
                            uk += g_rgb[ch] * (cv[(ri, k, ch)] - background[ch]);
                            dcolor[(ri, k, ch)] =
                                g_rgb[ch] * packed[(ri, layout.weight(k))];
                        }
                        uk += if wsum > DEPTH_EPS {
                            g_depth * (trow[k] - depth) / denom
                        } else {
                            g_depth * trow[k] / DEPTH_EPS
                        };
                        u[k] = uk;
                    }

                    // dL/dsigma_k = delta_k * (u_k T_{k+1} - sum_{j>k} u_j w_j)
                    let mut suffix = 0.0;
                    let mut dsig = vec![0.0f64; s];
                    let mut transmittance_after = vec![0.0f64; s];
                    let mut transmittance = 1.0;
                    for k in 0..s {
                        let delta = if k + 1 < s {
                            trow[k + 1] - trow[k]
                        } else {
                            (far[ri] - trow[k]).max(0.0)
                        };
                        let alpha = 1.0 - (-sv[(ri, k)] * delta).exp();
                        transmittance *= 1.0 - alpha;
                        transmittance_after[k] = transmittance;
                    }
                    for k in (0..s).rev() {
                        let delta = if k + 1 < s {
                            trow[k + 1] - trow[k]
                        } else {
                            (far[ri] - trow[k]).max(0.0)
                        };
                        dsig[k] = delta * (u[k] * transmittance_after[k] - suffix);
                        suffix += u[k] * packed[(ri, layout.weight(k))];
                    }
                    for k in 0..s {
                        dsigma[(ri, k)] = dsig[k];
                    }
                }
                vec![dsigma.into_dyn(), dcolor.into_dyn()]
            }),
        )
    }
}

/// Column layout of [`Tape::composite_pack`] output rows.
#[derive(Clone, Copy, Debug)]
pub struct CompositeLayout {
    pub n_samples: usize,
}

impl CompositeLayout {
    pub fn width(&self) -> usize {
        5 + self.n_samples
    }
    pub fn rgb(&self) -> std::ops::Range<usize> {
        0..3
    }
    pub fn depth(&self) -> usize {
        3
    }
    pub fn acc(&self) -> usize {
        4
    }
    pub fn weight(&self, k: usize) -> usize {
        5 + k
    }
    pub fn weights(&self) -> std::ops::Range<usize> {
        5..5 + self.n_samples
    }
}

/// Plain (non-tape) bilinear sample of one `[H,W]` plane at cell-space (x, y).
pub fn bilinear_sample_plane(plane: &ndarray::ArrayView2<'_, f64>, x: f64, y: f64) -> f64 {
    let (h, w) = plane.dim();
    let cell = bilinear_cell(x, y, w, h);
    sample_plane(plane, &cell)
}
