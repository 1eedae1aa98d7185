//! 2-D cross-correlation via im2col and SGEMM.

use rand::Rng;

use super::params::{Ctx, ParamId, ParamStore};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvSpec {
    pub fn same(k: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: 1,
            padding: dilation * (k - 1) / 2,
            dilation,
        }
    }

    fn extent(&self, len: usize, k: usize) -> Result<usize> {
        let reach = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::config("stride and dilation must be positive"));
        }
        if padded < reach {
            return Err(Error::shape(format!(
                "kernel reach {reach} exceeds padded extent {padded}"
            )));
        }
        Ok((padded - reach) / self.stride + 1)
    }
}

/// `c = a * b + beta * c` for row-major `a: m x k`, `b: k x n`, either
/// optionally transposed in storage.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the stated layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Geometry {
    input: Shape,
    out: Shape,
    k: usize,
    spec: ConvSpec,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let (s, o, k) = (self.input, self.out, self.k);
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        let op = o.plane();
        for ci in 0..s.c {
            let src = &x[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ci * k + ky) * k + kx) * op..][..op];
                    for oy in 0..o.h {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        let dst = &mut row[oy * o.w..(oy + 1) * o.w];
                        if iy < 0 || iy >= s.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let line = &src[iy as usize * s.w..(iy as usize + 1) * s.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            *d = if ix < 0 || ix >= s.w as isize {
                                0.0
                            } else {
                                line[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let (s, o, k) = (self.input, self.out, self.k);
        let ConvSpec {
            stride,
            padding,
            dilation,
        } = self.spec;
        let op = o.plane();
        for ci in 0..s.c {
            let dst = &mut dx[ci * s.plane()..(ci + 1) * s.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ci * k + ky) * k + kx) * op..][..op];
                    for oy in 0..o.h {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= s.h as isize {
                            continue;
                        }
                        for ox in 0..o.w {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix >= 0 && ix < s.w as isize {
                                dst[iy as usize * s.w + ix as usize] += row[oy * o.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Cross-correlation of `x (N, Cin, H, W)` with `w (Cout, Cin, k, k)`
    /// plus an optional `(1, Cout, 1, 1)` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let s = self.shape(x);
        let ws = self.shape(w);
        if ws.c != s.c || ws.h != ws.w {
            return Err(Error::shape(format!(
                "conv2d: weights {ws} do not match input {s}"
            )));
        }
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != Shape::new(1, ws.n, 1, 1) {
                return Err(Error::shape(format!(
                    "conv2d: bias must be (1, {}, 1, 1), got {bs}",
                    ws.n
                )));
            }
        }
        let k = ws.h;
        let out = Shape::new(s.n, ws.n, spec.extent(s.h, k)?, spec.extent(s.w, k)?);
        let geo = Geometry {
            input: s,
            out,
            k,
            spec,
        };
        let cout = ws.n;

        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let bd = bias.map(|b| self.value(b).data().to_vec());
        let per_in = s.c * s.plane();
        let per_out = cout * out.plane();
        let mut data = vec![0.0f32; out.numel()];
        par::for_each_chunk(&mut data, per_out, |n, y| {
            if let Some(b) = &bd {
                for (co, chunk) in y.chunks_mut(out.plane()).enumerate() {
                    chunk.fill(b[co]);
                }
            }
            let xn = &xd[n * per_in..(n + 1) * per_in];
            let beta = if bd.is_some() { 1.0 } else { 0.0 };
            if geo.is_pointwise() {
                gemm(cout, s.c, out.plane(), wd, false, xn, false, beta, y);
            } else {
                let mut cols = vec![0.0f32; geo.col_rows() * out.plane()];
                geo.im2col(xn, &mut cols);
                gemm(
                    cout,
                    geo.col_rows(),
                    out.plane(),
                    wd,
                    false,
                    &cols,
                    false,
                    beta,
                    y,
                );
            }
        });

        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(
            self.record(Tensor::from_parts(out, data), &parents, move |ctx| {
                let (xt, wt) = (ctx.inputs[0], ctx.inputs[1]);
                let (xd, wd, gd) = (xt.data(), wt.data(), ctx.grad.data());
                let rows = geo.col_rows();
                let op = out.plane();

                // Per-sample weight gradients, summed in sample order afterwards.
                let need_w = ctx.needs[1];
                let need_x = ctx.needs[0];
                let per_sample: Vec<(Option<Vec<f32>>, Option<Vec<f32>>)> =
                    par::map_indices(s.n, |n| {
                        let xn = &xd[n * per_in..(n + 1) * per_in];
                        let gn = &gd[n * per_out..(n + 1) * per_out];
                        let cols_owned;
                        let cols: &[f32] = if geo.is_pointwise() {
                            xn
                        } else if need_w {
                            let mut c = vec![0.0f32; rows * op];
                            geo.im2col(xn, &mut c);
                            cols_owned = c;
                            &cols_owned
                        } else {
                            &[]
                        };
                        let dw = need_w.then(|| {
                            let mut dw = vec![0.0f32; cout * rows];
                            gemm(cout, op, rows, gn, false, cols, true, 0.0, &mut dw);
                            dw
                        });
                        let dx = need_x.then(|| {
                            if geo.is_pointwise() {
                                let mut dx = vec![0.0f32; per_in];
                                gemm(s.c, cout, op, wd, true, gn, false, 0.0, &mut dx);
                                dx
                            } else {
                                let mut dcols = vec![0.0f32; rows * op];
                                gemm(rows, cout, op, wd, true, gn, false, 0.0, &mut dcols);
                                let mut dx = vec![0.0f32; per_in];
                                geo.col2im(&dcols, &mut dx);
                                dx
                            }
                        });
                        (dx, dw)
                    });

                let mut gx = need_x.then(|| Vec::with_capacity(s.numel()));
                let mut gw = need_w.then(|| vec![0.0f32; wt.numel()]);
                for (dx, dw) in per_sample {
                    if let (Some(acc), Some(dx)) = (gx.as_mut(), dx) {
                        acc.extend_from_slice(&dx);
                    }
                    if let (Some(acc), Some(dw)) = (gw.as_mut(), dw) {
                        for (a, v) in acc.iter_mut().zip(&dw) {
                            *a += v;
                        }
                    }
                }
                let mut grads = vec![
                    gx.map(|d| Tensor::from_parts(s, d)),
                    gw.map(|d| Tensor::from_parts(wt.shape(), d)),
                ];
                if ctx.inputs.len() == 3 {
                    let gb = ctx.needs[2].then(|| {
                        let mut b = vec![0.0f32; cout];
                        for n in 0..s.n {
                            for (co, acc) in b.iter_mut().enumerate() {
                                let start = n * per_out + co * op;
                                *acc += gd[start..start + op].iter().sum::<f32>();
                            }
                        }
                        Tensor::from_parts(Shape::new(1, cout, 1, 1), b)
                    });
                    grads.push(gb);
                }
                grads
            }),
        )
    }
}

/// Convolution layer with parameters held in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    pub k: usize,
}

impl Conv2d {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        spec: ConvSpec,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * k * k) as f32;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::uniform(
            Shape::new(out_channels, in_channels, k, k),
            -bound,
            bound,
            rng,
        );
        Conv2d::with_weights(
            store,
            name,
            w,
            Tensor::zeros(Shape::new(1, out_channels, 1, 1)),
            spec,
        )
    }

    pub fn with_weights(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Tensor,
        spec: ConvSpec,
    ) -> Self {
        let ws = weight.shape();
        Conv2d {
            weight: store.add(format!("{name}.weight"), weight, true),
            bias: store.add(format!("{name}.bias"), bias, true),
            spec,
            in_channels: ws.c,
            out_channels: ws.n,
            k: ws.h,
        }
    }

    pub fn num_parameters(in_channels: usize, out_channels: usize, k: usize) -> usize {
        out_channels * in_channels * k * k + out_channels
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let w = ctx.var(self.weight);
        let b = ctx.var(self.bias);
        ctx.graph.conv2d(x, w, Some(b), self.spec)
    }
}

/// Convolution of plain tensors.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: ConvSpec,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let wv = g.constant(weight.clone());
    let bv = bias.map(|b| g.constant(b.clone()));
    let y = g.conv2d(xv, wv, bv, spec)?;
    Ok(g.value(y).clone())
}
