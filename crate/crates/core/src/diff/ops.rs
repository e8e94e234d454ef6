//! Elementwise, matrix and shape ops for the tape.

use super::{Arr, Tape, Var};
use ndarray::{concatenate, Array1, Array2, Axis, Ix1, Ix2, IxDyn, Slice};

/// Elementwise map over a (standard-layout) tensor via its slice; the hot
/// path for activations and their derivatives.
pub(crate) fn unary_map(a: &Arr, f: impl Fn(f64) -> f64) -> Arr {
    match a.as_slice() {
        Some(s) => {
            let data: Vec<f64> = s.iter().map(|&x| f(x)).collect();
            Arr::from_shape_vec(a.raw_dim(), data).unwrap()
        }
        None => a.map(|&x| f(x)),
    }
}

pub(crate) fn binary_map(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    debug_assert_eq!(a.shape(), b.shape());
    match (a.as_slice(), b.as_slice()) {
        (Some(sa), Some(sb)) => {
            let data: Vec<f64> = sa.iter().zip(sb.iter()).map(|(&x, &y)| f(x, y)).collect();
            Arr::from_shape_vec(a.raw_dim(), data).unwrap()
        }
        _ => {
            let mut out = a.clone();
            out.zip_mut_with(b, |x, &y| *x = f(*x, y));
            out
        }
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // ln(1 + e^x) without overflow
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let value = binary_map(self.value(a), self.value(b), |x, y| x + y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| vec![ctx.grad().clone(), ctx.grad().clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let value = binary_map(self.value(a), self.value(b), |x, y| x - y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| vec![ctx.grad().clone(), unary_map(ctx.grad(), |g| -g)]),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let value = binary_map(self.value(a), self.value(b), |x, y| x * y);
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| {
                vec![
                    binary_map(ctx.grad(), ctx.parent(1), |g, y| g * y),
                    binary_map(ctx.grad(), ctx.parent(0), |g, x| g * x),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = unary_map(self.value(a), |x| x * c);
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| vec![unary_map(ctx.grad(), |g| g * c)]),
        )
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), |x| x * sigmoid_scalar(x));
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| {
                vec![binary_map(ctx.grad(), ctx.parent(0), |g, x| {
                    let s = sigmoid_scalar(x);
                    g * s * (1.0 + x * (1.0 - s))
                })]
            }),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), softplus_scalar);
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| {
                vec![binary_map(ctx.grad(), ctx.parent(0), |g, x| g * sigmoid_scalar(x))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = unary_map(self.value(a), sigmoid_scalar);
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| {
                vec![binary_map(ctx.grad(), ctx.output(), |g, y| g * y * (1.0 - y))]
            }),
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Arr::from_elem(IxDyn(&[1]), self.value(a).sum());
        self.push_op(
            value,
            vec![a],
            Box::new(|ctx| {
                let g = ctx.grad()[[0]];
                vec![Arr::from_elem(IxDyn(ctx.parent(0).shape()), g)]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// `a [N,K] x b [K,M] -> [N,M]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = as2(self.value(a));
        let bv = as2(self.value(b));
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dim mismatch");
        let value = av.dot(&bv).into_dyn();
        self.push_op(
            value,
            vec![a, b],
            Box::new(|ctx| {
                let g = as2(ctx.grad());
                let a = as2(ctx.parent(0));
                let b = as2(ctx.parent(1));
                vec![g.dot(&b.t()).into_dyn(), a.t().dot(&g).into_dyn()]
            }),
        )
    }

    /// Adds a `[M]` bias to every row of `[N,M]`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let m = {
            let av = as2(self.value(a));
            let bv = as1(self.value(bias));
            assert_eq!(av.ncols(), bv.len(), "bias length mismatch");
            bv.len()
        };
        let value = {
            let a_slice = self.value(a).as_slice().expect("standard layout");
            let b_slice = self.value(bias).as_slice().expect("standard layout");
            let mut data = Vec::with_capacity(a_slice.len());
            for row in a_slice.chunks_exact(m) {
                data.extend(row.iter().zip(b_slice.iter()).map(|(&x, &b)| x + b));
            }
            Arr::from_shape_vec(self.value(a).raw_dim(), data).unwrap()
        };
        self.push_op(
            value,
            vec![a, bias],
            Box::new(move |ctx| {
                let g = ctx.grad().as_slice().expect("standard layout");
                let mut db = vec![0.0f64; m];
                for row in g.chunks_exact(m) {
                    for (acc, &gv) in db.iter_mut().zip(row.iter()) {
                        *acc += gv;
                    }
                }
                vec![
                    ctx.grad().clone(),
                    Arr::from_shape_vec(ndarray::IxDyn(&[m]), db).unwrap(),
                ]
            }),
        )
    }

    /// Linear layer: `x [N,K] * w [K,M] + b [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_bias(y, b)
    }

    /// Scales row i of `[N,M]` by the constant `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Array1<f64>) -> Var {
        let (n, m) = {
            let av = as2(self.value(a));
            assert_eq!(av.nrows(), w.len(), "row weight length mismatch");
            av.dim()
        };
        let scale_by = move |src: &Arr, w: &Array1<f64>| -> Arr {
            let s = src.as_slice().expect("standard layout");
            let mut data = Vec::with_capacity(n * m);
            for (i, row) in s.chunks_exact(m).enumerate() {
                let wi = w[i];
                data.extend(row.iter().map(|&x| x * wi));
            }
            Arr::from_shape_vec(src.raw_dim(), data).unwrap()
        };
        let value = scale_by(self.value(a), &w);
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| vec![scale_by(ctx.grad(), &w)]),
        )
    }

    /// Concatenation along `axis`; result is standard layout.
    pub fn concat(&mut self, axis: usize, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        // fast path: [N, M_i] matrices concatenated column-wise
        let all_2d = vars.iter().all(|v| self.shape(*v).len() == 2);
        let value = if axis == 1 && all_2d {
            let n = self.shape(vars[0])[0];
            let widths: Vec<usize> = vars.iter().map(|v| self.shape(*v)[1]).collect();
            let total: usize = widths.iter().sum();
            let slices: Vec<&[f64]> = vars
                .iter()
                .map(|v| self.value(*v).as_slice().expect("standard layout"))
                .collect();
            let mut data = Vec::with_capacity(n * total);
            for row in 0..n {
                for (slice, &m) in slices.iter().zip(widths.iter()) {
                    data.extend_from_slice(&slice[row * m..(row + 1) * m]);
                }
            }
            Arr::from_shape_vec(IxDyn(&[n, total]), data).unwrap()
        } else {
            let views: Vec<_> = vars.iter().map(|v| self.value(*v).view()).collect();
            let value = concatenate(Axis(axis), &views).expect("concat shape mismatch");
            if value.is_standard_layout() {
                value
            } else {
                let shape = value.raw_dim();
                Arr::from_shape_vec(shape, value.iter().copied().collect()).unwrap()
            }
        };
        let sizes: Vec<usize> = vars.iter().map(|v| self.shape(*v)[axis]).collect();
        self.push_op(
            value,
            vars.to_vec(),
            Box::new(move |ctx| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut start = 0isize;
                for &s in &sizes {
                    let piece = ctx
                        .grad()
                        .slice_axis(Axis(axis), Slice::from(start..start + s as isize));
                    out.push(piece.to_owned());
                    start += s as isize;
                }
                out
            }),
        )
    }

    /// Columns `[from, to)` of a `[N,M]` matrix.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = as2(self.value(a));
        assert!(from <= to && to <= av.ncols());
        let value = av.slice(ndarray::s![.., from..to]).to_owned().into_dyn();
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                let mut g = Array2::<f64>::zeros(as2(ctx.parent(0)).raw_dim());
                g.slice_mut(ndarray::s![.., from..to]).assign(&as2(ctx.grad()));
                vec![g.into_dyn()]
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self
            .value(a)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape element count mismatch");
        let old_shape: Vec<usize> = self.shape(a).to_vec();
        self.push_op(
            value,
            vec![a],
            Box::new(move |ctx| {
                vec![ctx
                    .grad()
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward")]
            }),
        )
    }
}

pub(crate) fn as2(a: &Arr) -> ndarray::ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("expected 2-d tensor")
}

pub(crate) fn as1(a: &Arr) -> ndarray::ArrayView1<'_, f64> {
    a.view().into_dimensionality::<Ix1>().expect("expected 1-d tensor")
}
