//! 2-D convolution over `[N, C, H, W]` via im2col and strided gemm.

use super::graph::{Graph, Var};
use super::ops::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub fn same(k: usize) -> Self {
        Conv2dSpec { stride: 1, padding: k / 2 }
    }

    pub fn strided(k: usize, stride: usize) -> Self {
        Conv2dSpec { stride, padding: k / 2 }
    }
}

struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Calls `f(col_index, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (l, ncols) = (self.ho * self.wo, self.cols());
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    for b in 0..self.n {
                        let plane = (b * self.c + ch) * self.h * self.w;
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let row_base = plane + iy as usize * self.w;
                            let col_base = row * ncols + b * l + oy * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                f(col_base + ox, row_base + ix as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// `x: [N, C, H, W]`, `weight: [O, C, k, k]`, `bias: [O]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: xs,
                rhs: ws,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let k = ws[2];
        let (h, w) = (xs[2], xs[3]);
        if h + 2 * spec.padding < k || w + 2 * spec.padding < k || spec.stride == 0 {
            return Err(Error::InvalidShape {
                op: "conv2d",
                shape: xs,
                reason: format!("kernel {k} does not fit"),
            });
        }
        let geo = Geometry {
            n: xs[0],
            c: xs[1],
            h,
            w,
            k,
            ho: (h + 2 * spec.padding - k) / spec.stride + 1,
            wo: (w + 2 * spec.padding - k) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        };
        let o = ws[0];
        let (rows, ncols, l) = (geo.rows(), geo.cols(), geo.ho * geo.wo);

        let xd = self.value(x).data();
        let mut cols = vec![0.0; rows * ncols];
        geo.for_each_tap(|ci, xi| cols[ci] = xd[xi]);

        let wd = self.value(weight).data();
        let mut out = vec![0.0; geo.n * o * l];
        for b in 0..geo.n {
            gemm(
                o,
                rows,
                l,
                wd,
                (rows, 1),
                &cols[b * l..],
                (ncols, 1),
                &mut out[b * o * l..],
                (l, 1),
                false,
            );
        }
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for b in 0..geo.n {
                for (oc, &bias) in bd.iter().enumerate() {
                    out[(b * o + oc) * l..(b * o + oc + 1) * l]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
        }
        let out = Tensor::new(&[geo.n, o, geo.ho, geo.wo], out)?;

        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(
            out,
            inputs,
            Box::new(move |ctx| {
                let g = ctx.grad;
                let wd = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; rows * ncols];
                    for b in 0..geo.n {
                        gemm(
                            rows,
                            o,
                            l,
                            wd,
                            (1, rows),
                            &g[b * o * l..],
                            (l, 1),
                            &mut dcols[b * l..],
                            (ncols, 1),
                            false,
                        );
                    }
                    let mut gx = vec![0.0; geo.n * geo.c * geo.h * geo.w];
                    geo.for_each_tap(|ci, xi| gx[xi] += dcols[ci]);
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; o * rows];
                    for b in 0..geo.n {
                        gemm(
                            o,
                            l,
                            rows,
                            &g[b * o * l..],
                            (l, 1),
                            &cols[b * l..],
                            (1, ncols),
                            &mut gw,
                            (rows, 1),
                            true,
                        );
                    }
                    gw
                });
                let mut grads = vec![gx, gw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let mut gb = vec![0.0; o];
                        for b in 0..geo.n {
                            for (oc, acc) in gb.iter_mut().enumerate() {
                                *acc += g[(b * o + oc) * l..(b * o + oc + 1) * l].iter().sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                grads
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, k) = (w.shape()[0], w.shape()[2]);
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        Tensor::from_fn(&[n, o, ho, wo], |i| {
            let mut acc = b[i[1]];
            for ch in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let iy = (i[2] * stride + ky) as isize - pad as isize;
                        let ix = (i[3] * stride + kx) as isize - pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                            acc += x.at(&[i[0], ch, iy as usize, ix as usize]) * w.at(&[i[1], ch, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn matches_nested_loops() {
        use rand::SeedableRng;
        let mut rng = rand_pcg::Pcg64Mcg::seed_from_u64(3);
        for &(stride, k) in &[(1, 3), (2, 3), (1, 1), (2, 5)] {
            let x = Tensor::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, k, k], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
            let expect = naive(&x, &w, b.data(), stride, k / 2);
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv2d(xv, wv, Some(bv), Conv2dSpec::strided(k, stride)).unwrap();
            assert_eq!(g.shape(y), expect.shape());
            assert!(g.value(y).max_abs_diff(&expect) < 1e-12);
        }
    }
}
