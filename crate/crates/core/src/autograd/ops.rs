//! Elementwise, reduction and layout operations recorded on a [`Graph`].

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Binary elementwise operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    /// Ties route the gradient to the first operand.
    Max,
}

impl BinaryKind {
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
            BinaryKind::Max => {
                if b > a {
                    b
                } else {
                    a
                }
            }
        }
    }
}

/// Output shape when each dimension agrees or one side is 1.
pub(crate) fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let (da, db) = (a.dims(), b.dims());
    let mut out = [0; 4];
    for i in 0..4 {
        out[i] = if da[i] == db[i] || db[i] == 1 {
            da[i]
        } else if da[i] == 1 {
            db[i]
        } else {
            return Err(Error::shape(format!("cannot broadcast {a} with {b}")));
        };
    }
    Ok(Shape::from_dims(out))
}

/// Strides of `s` read against `out`, zero along broadcast axes.
fn broadcast_strides(s: Shape, out: Shape) -> [usize; 4] {
    let st = s.strides();
    let (d, o) = (s.dims(), out.dims());
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if d[i] == 1 && o[i] != 1 { 0 } else { st[i] };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_broadcast(
    out: Shape,
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let mut o = 0;
    for n in 0..out.n {
        for c in 0..out.c {
            for h in 0..out.h {
                let ia = n * sa[0] + c * sa[1] + h * sa[2];
                let ib = n * sb[0] + c * sb[1] + h * sb[2];
                for w in 0..out.w {
                    f(o, ia + w * sa[3], ib + w * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Sums `grad` (shaped like the broadcast output) back onto `target`.
fn reduce_to(grad: &Tensor, target: Shape, weight: impl Fn(usize, usize) -> f32) -> Tensor {
    let out = grad.shape();
    let st = broadcast_strides(target, out);
    let mut acc = vec![0.0f32; target.numel()];
    let g = grad.data();
    for_each_broadcast(out, st, [0; 4], |o, i, _| acc[i] += g[o] * weight(o, i));
    Tensor::from_parts(target, acc)
}

impl Graph {
    /// Elementwise binary op with broadcasting over size-1 dimensions.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape())?;
        let value = if ta.shape() == tb.shape() {
            Tensor::from_parts(
                out_shape,
                ta.data()
                    .iter()
                    .zip(tb.data())
                    .map(|(&x, &y)| kind.apply(x, y))
                    .collect(),
            )
        } else {
            let sa = broadcast_strides(ta.shape(), out_shape);
            let sb = broadcast_strides(tb.shape(), out_shape);
            let mut data = vec![0.0; out_shape.numel()];
            let (da, db) = (ta.data(), tb.data());
            for_each_broadcast(out_shape, sa, sb, |o, i, j| {
                data[o] = kind.apply(da[i], db[j])
            });
            Tensor::from_parts(out_shape, data)
        };
        Ok(self.record(value, &[a, b], move |ctx| {
            let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
            let out = ctx.output.shape();
            let sa = broadcast_strides(ta.shape(), out);
            let sb = broadcast_strides(tb.shape(), out);
            let (da, db) = (ta.data(), tb.data());
            // Per-output-element local derivative w.r.t. each operand.
            let mut wa = vec![0.0f32; out.numel()];
            let mut wb = vec![0.0f32; out.numel()];
            for_each_broadcast(out, sa, sb, |o, i, j| {
                let (x, y) = (da[i], db[j]);
                let (p, q) = match kind {
                    BinaryKind::Add => (1.0, 1.0),
                    BinaryKind::Sub => (1.0, -1.0),
                    BinaryKind::Mul => (y, x),
                    BinaryKind::Max => {
                        if y > x {
                            (0.0, 1.0)
                        } else {
                            (1.0, 0.0)
                        }
                    }
                };
                wa[o] = p;
                wb[o] = q;
            });
            let ga = ctx.needs[0].then(|| reduce_to(ctx.grad, ta.shape(), |o, _| wa[o]));
            let gb = ctx.needs[1].then(|| reduce_to(ctx.grad, tb.shape(), |o, _| wb[o]));
            vec![ga, gb]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Max, a, b)
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f32) -> f32,
        df: impl Fn(f32, f32) -> f32 + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.record(value, &[x], move |ctx| {
            let g = Tensor::from_parts(
                ctx.grad.shape(),
                ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(ctx.output.data())
                    .zip(ctx.grad.data())
                    .map(|((&x, &y), &g)| df(x, y) * g)
                    .collect(),
            );
            vec![Some(g)]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |_, s| s * (1.0 - s))
    }

    /// `max(x, 0)` with derivative 0 at the origin.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, relu, |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, move |v| v * k, move |_, _| k)
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, move |v| v + k, |_, _| 1.0)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.record(Tensor::scalar(s), &[x], |ctx| {
            let g = ctx.grad.data()[0];
            vec![Some(Tensor::full(ctx.inputs[0].shape(), g))]
        })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `sum(x * w)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let wv = self.constant(w.clone());
        let p = self.mul(x, wv)?;
        Ok(self.sum(p))
    }

    /// Largest element as a scalar; the gradient goes to the first maximiser
    /// in row-major order.
    pub fn max_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mut best = 0;
        for (i, &v) in t.data().iter().enumerate() {
            if v > t.data()[best] {
                best = i;
            }
        }
        let m = t.data()[best];
        self.record(Tensor::scalar(m), &[x], move |ctx| {
            let mut g = Tensor::zeros(ctx.inputs[0].shape());
            g.data_mut()[best] = ctx.grad.data()[0];
            vec![Some(g)]
        })
    }

    /// Spatial mean per sample and channel, `(N, C, H, W) -> (N, C, 1, 1)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.shape();
        let p = s.plane();
        let data: Vec<f32> = t
            .data()
            .chunks(p)
            .map(|c| c.iter().sum::<f32>() / p as f32)
            .collect();
        self.record(
            Tensor::from_parts(Shape::new(s.n, s.c, 1, 1), data),
            &[x],
            move |ctx| {
                let inv = 1.0 / p as f32;
                let mut g = Vec::with_capacity(s.numel());
                for &v in ctx.grad.data() {
                    g.extend(std::iter::repeat_n(v * inv, p));
                }
                vec![Some(Tensor::from_parts(s, g))]
            },
        )
    }

    /// Repeats size-1 dimensions of `x` up to `shape`.
    pub fn expand(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let src = self.shape(x);
        if broadcast_shape(shape, src)? != shape {
            return Err(Error::shape(format!("cannot expand {src} to {shape}")));
        }
        let st = broadcast_strides(src, shape);
        let d = self.value(x).data();
        let mut data = vec![0.0; shape.numel()];
        for_each_broadcast(shape, st, [0; 4], |o, i, _| data[o] = d[i]);
        Ok(
            self.record(Tensor::from_parts(shape, data), &[x], move |ctx| {
                vec![Some(reduce_to(ctx.grad, src, |_, _| 1.0))]
            }),
        )
    }

    /// Concatenates along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(
            *parts
                .first()
                .ok_or_else(|| Error::shape("concat of zero tensors"))?,
        );
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape(format!(
                    "concat_channels: {s} does not match {first}"
                )));
            }
            widths.push(s.c);
        }
        let total: usize = widths.iter().sum();
        let out = first.with_channels(total);
        let plane = first.plane();
        let mut data = Vec::with_capacity(out.numel());
        for n in 0..first.n {
            for (&p, &c) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                data.extend_from_slice(&d[n * c * plane..(n + 1) * c * plane]);
            }
        }
        Ok(
            self.record(Tensor::from_parts(out, data), parts, move |ctx| {
                let g = ctx.grad.data();
                let mut grads: Vec<Vec<f32>> = widths
                    .iter()
                    .map(|&c| Vec::with_capacity(first.n * c * plane))
                    .collect();
                let mut off = 0;
                for _ in 0..first.n {
                    for (buf, &c) in grads.iter_mut().zip(&widths) {
                        buf.extend_from_slice(&g[off..off + c * plane]);
                        off += c * plane;
                    }
                }
                grads
                    .into_iter()
                    .zip(&widths)
                    .map(|(d, &c)| Some(Tensor::from_parts(first.with_channels(c), d)))
                    .collect()
            }),
        )
    }

    /// Extends height and width to `(h, w)` by repeating the last row and
    /// column.
    pub fn pad_replicate(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if h < s.h || w < s.w || s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!("cannot replicate-pad {s} to {h}x{w}")));
        }
        if (h, w) == (s.h, s.w) {
            return Ok(x);
        }
        let out = s.with_spatial(h, w);
        let src = move |y: usize, x: usize| y.min(s.h - 1) * s.w + x.min(s.w - 1);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(out.numel());
        for plane in d.chunks(s.plane()) {
            for y in 0..h {
                for xx in 0..w {
                    data.push(plane[src(y, xx)]);
                }
            }
        }
        Ok(
            self.record(Tensor::from_parts(out, data), &[x], move |ctx| {
                let mut g = vec![0.0; s.numel()];
                for (gp, op) in g.chunks_mut(s.plane()).zip(ctx.grad.data().chunks(h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            gp[src(y, xx)] += op[y * w + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s, g))]
            }),
        )
    }

    /// Nearest-neighbour up-sampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::config("up-sampling factor must be positive"));
        }
        let s = self.shape(x);
        let out = s.with_spatial(s.h * factor, s.w * factor);
        let d = self.value(x).data();
        let mut data = Vec::with_capacity(out.numel());
        for plane in d.chunks(s.plane()) {
            for y in 0..out.h {
                for xx in 0..out.w {
                    data.push(plane[(y / factor) * s.w + xx / factor]);
                }
            }
        }
        Ok(
            self.record(Tensor::from_parts(out, data), &[x], move |ctx| {
                let mut g = vec![0.0; s.numel()];
                for (gp, op) in g
                    .chunks_mut(s.plane())
                    .zip(ctx.grad.data().chunks(out.plane()))
                {
                    for y in 0..out.h {
                        for xx in 0..out.w {
                            gp[(y / factor) * s.w + xx / factor] += op[y * out.w + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_parts(s, g))]
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn relu(x: f32) -> f32 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(kind: BinaryKind, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(a));
        let b = g.constant(Tensor::row(b));
        let y = g.binary(kind, a, b).unwrap();
        g.value(y).data().to_vec()
    }

    #[test]
    fn elementwise_examples() {
        assert_eq!(eval(BinaryKind::Mul, &[2.0], &[3.0]), vec![6.0]);
        assert_eq!(
            eval(BinaryKind::Max, &[1.0, f32::NEG_INFINITY], &[0.0, 4.0]),
            vec![1.0, 4.0]
        );
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0]));
        let s = g.sigmoid(x);
        assert_eq!(g.value(s).data(), &[0.5]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(Shape::new(1, 2, 3, 3)));
        let b = g.constant(Tensor::zeros(Shape::new(1, 3, 3, 3)));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn channel_broadcast_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(Shape::new(2, 2, 2, 2)));
        let bias = g.param(Tensor::new(Shape::new(1, 2, 1, 1), vec![1.0, -1.0]).unwrap());
        let y = g.add(x, bias).unwrap();
        assert_eq!(g.value(y).at(1, 1, 1, 1), 0.0);
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(bias).unwrap().data(), &[8.0, 8.0]);
    }

    #[test]
    fn max_tie_goes_to_first_operand() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(&[2.0, 1.0]));
        let b = g.param(Tensor::row(&[2.0, 5.0]));
        let y = g.maximum(a, b).unwrap();
        let l = g.sum(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(a).unwrap().data(), &[1.0, 0.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn concat_then_sum_routes_back() {
        let mut g = Graph::new();
        let a = g.param(Tensor::full(Shape::new(2, 1, 2, 2), 1.0));
        let b = g.param(Tensor::full(Shape::new(2, 3, 2, 2), 2.0));
        let c = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(c), Shape::new(2, 4, 2, 2));
        assert_eq!(g.value(c).at(1, 0, 0, 0), 1.0);
        assert_eq!(g.value(c).at(1, 3, 1, 1), 2.0);
        let w = Tensor::new(g.shape(c), (0..32).map(|i| i as f32).collect()).unwrap();
        let l = g.weighted_sum(c, &w).unwrap();
        g.backward(l).unwrap();
        assert_eq!(
            g.grad(a).unwrap().data(),
            &[0.0, 1.0, 2.0, 3.0, 16.0, 17.0, 18.0, 19.0]
        );
    }

    #[test]
    fn nearest_upsample_and_pad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::plane2d(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let u = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(u).data()[..4], [1.0, 1.0, 2.0, 2.0]);
        let p = g.pad_replicate(x, 3, 3).unwrap();
        assert_eq!(
            g.value(p).data(),
            &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 3.0, 4.0, 4.0]
        );
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 2.0, 2.0, 4.0]);
    }
}
