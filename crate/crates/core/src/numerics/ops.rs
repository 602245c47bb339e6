//! Elementary differentiable ops: broadcasting arithmetic, pointwise
//! nonlinearities, axis reductions, softmax, matmul and layout ops.

use super::graph::{Graph, Var};
use super::tensor::{broadcast_shapes, broadcast_strides, for_each_broadcast, Tensor};
use crate::error::{Error, Result};

/// `shape` split around `axis` as (outer, len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut out = shape.to_vec();
    if keepdim || shape.len() == 1 {
        out[axis] = 1;
    } else {
        out.remove(axis);
    }
    out
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Graph {
    fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shapes(&sa_shape, &sb_shape).ok_or(Error::ShapeMismatch {
            op: name,
            lhs: sa_shape.clone(),
            rhs: sb_shape.clone(),
        })?;
        let (x, y) = (self.value(a).data(), self.value(b).data());
        let mut out = Tensor::zeros(&out_shape);
        if sa_shape == sb_shape {
            let od = out.data_mut();
            for i in 0..od.len() {
                od[i] = apply(op, x[i], y[i]);
            }
        } else {
            let sa = broadcast_strides(&sa_shape, &out_shape);
            let sb = broadcast_strides(&sb_shape, &out_shape);
            let od = out.data_mut();
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| od[o] = apply(op, x[i], y[j]));
        }
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let (x, y) = (ctx.inputs[0], ctx.inputs[1]);
                let out = ctx.output.shape();
                let (xd, yd, g) = (x.data(), y.data(), ctx.grad);
                let sa = broadcast_strides(x.shape(), out);
                let sb = broadcast_strides(y.shape(), out);
                let mut ga = ctx.needs[0].then(|| vec![0.0; xd.len()]);
                let mut gb = ctx.needs[1].then(|| vec![0.0; yd.len()]);
                for_each_broadcast(out, &sa, &sb, |o, i, j| {
                    let (da, db) = match op {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (yd[j], xd[i]),
                        Binary::Div => (1.0 / yd[j], -xd[i] / (yd[j] * yd[j])),
                    };
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[o] * da;
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g[o] * db;
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// Pointwise op given the forward map and the derivative as a function
    /// of (input, output).
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::new(src.shape(), data).expect("same shape");
        self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let (xi, yo) = (ctx.inputs[0].data(), ctx.output.data());
                let g = ctx
                    .grad
                    .iter()
                    .zip(xi.iter().zip(yo))
                    .map(|(g, (&a, &b))| g * df(a, b))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, move |v| v + c, |_, _| 1.0)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| x.signum() * (x != 0.0) as u8 as f64)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        // NaN passes through so divergence stays visible downstream.
        self.unary(x, |v| if v < 0.0 { 0.0 } else { v }, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Sum over `axis`; `keepdim` leaves a unit axis in place.
    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_linear(x, axis, keepdim, 1.0, "sum")
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        check_axis("mean", self.shape(x), axis)?;
        let n = self.shape(x)[axis] as f64;
        self.reduce_linear(x, axis, keepdim, 1.0 / n, "mean")
    }

    fn reduce_linear(
        &mut self,
        x: Var,
        axis: usize,
        keepdim: bool,
        factor: f64,
        op: &'static str,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis(op, &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(&xd[base..base + inner]) {
                    *d += s;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= factor);
        let out = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        let base = (o * len + k) * inner;
                        for i in 0..inner {
                            gx[base + i] = ctx.grad[o * inner + i] * factor;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Max over `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("max", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    let v = xd[(o * len + k) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = k;
                    }
                }
            }
        }
        let out = Tensor::new(&reduced_shape(&shape, axis, keepdim), out)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = arg[o * inner + i];
                        gx[(o * len + k) * inner + i] = ctx.grad[o * inner + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        self.push(
            Tensor::scalar(s),
            vec![x],
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Softmax over `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[at(k)] /= z;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| g[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = y[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Numerically stable `log(softmax(x))` over `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", &shape, axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| xd[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..len).map(|k| (xd[at(k)] - m).exp()).sum::<f64>().ln();
                for k in 0..len {
                    out[at(k)] = xd[at(k)] - lse;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let gsum: f64 = (0..len).map(|k| g[at(k)]).sum();
                        for k in 0..len {
                            gx[at(k)] = g[at(k)] - y[at(k)].exp() * gsum;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[m, n] x [n, p] -> [m, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, n, p) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * p];
        gemm(
            m,
            n,
            p,
            self.value(a).data(),
            (n, 1),
            self.value(b).data(),
            (p, 1),
            &mut out,
            (p, 1),
            false,
        );
        let out = Tensor::new(&[m, p], out)?;
        Ok(self.push(
            out,
            vec![a, b],
            Box::new(move |ctx| {
                let (ad, bd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let g = ctx.grad;
                let ga = ctx.needs[0].then(|| {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * n];
                    gemm(m, p, n, g, (p, 1), bd, (1, p), &mut ga, (n, 1), false);
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; n * p];
                    gemm(n, m, p, ad, (1, n), g, (p, 1), &mut gb, (p, 1), false);
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::new(shape, src.data().to_vec())?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        check_axis("concat", &first, axis)?;
        let mut lens = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut start = 0;
        for (&v, &len) in xs.iter().zip(&lens) {
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total + start) * inner;
                out[dst..dst + len * inner].copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            start += len;
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(
            out,
            xs.to_vec(),
            Box::new(move |ctx| {
                let mut start = 0;
                lens.iter()
                    .zip(&ctx.needs)
                    .map(|(&len, &need)| {
                        let g = need.then(|| {
                            let mut g = vec![0.0; outer * len * inner];
                            for o in 0..outer {
                                let src = (o * total + start) * inner;
                                g[o * len * inner..(o + 1) * len * inner]
                                    .copy_from_slice(&ctx.grad[src..src + len * inner]);
                            }
                            g
                        });
                        start += len;
                        g
                    })
                    .collect()
            }),
        ))
    }

    /// Picks channel vectors from `[N, C, H, W]` at `(n, y, x)` positions,
    /// giving `[M, C]`.
    pub fn gather_pixels(&mut self, x: Var, positions: &[(usize, usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || positions.is_empty() {
            return Err(Error::InvalidShape {
                op: "gather_pixels",
                shape,
                reason: "expected [N, C, H, W] and at least one position".into(),
            });
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if let Some(p) = positions.iter().find(|p| p.0 >= n || p.1 >= h || p.2 >= w) {
            return Err(Error::InvalidShape {
                op: "gather_pixels",
                shape,
                reason: format!("position {p:?} out of range"),
            });
        }
        let xd = self.value(x).data();
        let index = move |b: usize, ch: usize, y: usize, xx: usize| ((b * c + ch) * h + y) * w + xx;
        let m = positions.len();
        let mut out = vec![0.0; m * c];
        for (row, &(b, y, xx)) in positions.iter().enumerate() {
            for ch in 0..c {
                out[row * c + ch] = xd[index(b, ch, y, xx)];
            }
        }
        let positions = positions.to_vec();
        let out = Tensor::new(&[m, c], out)?;
        Ok(self.push(
            out,
            vec![x],
            Box::new(move |ctx| {
                let mut gx = vec![0.0; n * c * h * w];
                for (row, &(b, y, xx)) in positions.iter().enumerate() {
                    for ch in 0..c {
                        gx[index(b, ch, y, xx)] += ctx.grad[row * c + ch];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

fn apply(op: Binary, a: f64, b: f64) -> f64 {
    match op {
        Binary::Add => a + b,
        Binary::Sub => a - b,
        Binary::Mul => a * b,
        Binary::Div => a / b,
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `C (+)= A · B` for strided row-major views; strides are (row, col).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    let max_a = (m - 1) * rsa + (k - 1) * csa;
    let max_b = (k - 1) * rsb + (n - 1) * csb;
    let max_c = (m - 1) * rsc + (n - 1) * csc;
    assert!(max_a < a.len() && max_b < b.len() && max_c < c.len(), "gemm view out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds of all three strided views were checked above and
    // `c` is borrowed mutably, so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
