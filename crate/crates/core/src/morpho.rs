//! Max-plus morphology: dilation, erosion, dilation-based activation,
//! equidistant up-sampling and closing.
//!
//! Dilation evaluates `g(x) = max_z f(x - z) + h(z)` per channel, with the
//! structuring element anchored at `(0, 0)` and `z` ranging over
//! `{0..k-1}^2`. Output position `o` sits at padded input position
//! `o * stride + k - 1`, so a `k x k` element at stride `k` covers exactly
//! the non-overlapping `k x k` windows. Erosion is the adjoint:
//! `e(y) = min_z f(y + z) - h(z)`.
//!
//! Dilation pads with `-inf`, erosion with `+inf`; neither routes gradient
//! into padding. Argmax ties resolve to the first maximiser in row-major
//! order of the input window.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Shape, Tensor};

const NONE: u32 = u32::MAX;

/// Per-channel `k x k` additive kernel over the max-plus semi-ring.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuringElement {
    channels: usize,
    k: usize,
    values: Vec<f32>,
    learnable: bool,
}

impl StructuringElement {
    /// Builds an element from `channels * k * k` values in `(c, zy, zx)` order.
    ///
    /// Learnable elements must be finite; `-inf` is only allowed in fixed
    /// masks.
    pub fn new(channels: usize, k: usize, values: Vec<f32>, learnable: bool) -> Result<Self> {
        if k == 0 || channels == 0 {
            return Err(Error::shape(
                "structuring element needs k >= 1 and channels >= 1",
            ));
        }
        if values.len() != channels * k * k {
            return Err(Error::shape(format!(
                "structuring element expects {} values, got {}",
                channels * k * k,
                values.len()
            )));
        }
        if values.iter().any(|v| v.is_nan() || *v == f32::INFINITY) {
            return Err(Error::contract(
                "structuring element values must not be NaN or +inf",
            ));
        }
        if learnable && values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "learnable structuring elements must be finite",
            ));
        }
        Ok(StructuringElement {
            channels,
            k,
            values,
            learnable,
        })
    }

    /// All-zero `k x k` element (max filter / max pooling window).
    pub fn flat(channels: usize, k: usize) -> Self {
        StructuringElement {
            channels,
            k,
            values: vec![0.0; channels * k * k],
            learnable: false,
        }
    }

    /// `0` at the anchor and `-inf` elsewhere; the identity of dilation.
    pub fn delta(channels: usize, k: usize) -> Self {
        let mut values = vec![f32::NEG_INFINITY; channels * k * k];
        for c in 0..channels {
            values[c * k * k] = 0.0;
        }
        StructuringElement {
            channels,
            k,
            values,
            learnable: false,
        }
    }

    pub fn learnable(mut self) -> Result<Self> {
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(
                "learnable structuring elements must be finite",
            ));
        }
        self.learnable = true;
        Ok(self)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> usize {
        self.k
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, c: usize, zy: usize, zx: usize) -> f32 {
        self.values[(c * self.k + zy) * self.k + zx]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// The element as a `(1, C, k, k)` tensor, the layout graph ops expect.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            Shape::new(1, self.channels, self.k, self.k),
            self.values.clone(),
        )
    }

    pub fn from_tensor(t: &Tensor, learnable: bool) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.h != s.w {
            return Err(Error::shape(format!(
                "structuring element tensor must be (1, C, k, k), got {s}"
            )));
        }
        StructuringElement::new(s.c, s.h, t.data().to_vec(), learnable)
    }
}

/// Parameters of the dilation-based activation `max(h0, f (+) h)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphActivationParams {
    pub h0: Vec<f32>,
    pub se: StructuringElement,
}

impl MorphActivationParams {
    /// `h0 = 0`, `h = delta(1)`: exactly ReLU.
    pub fn relu(channels: usize) -> Self {
        MorphActivationParams {
            h0: vec![0.0; channels],
            se: StructuringElement::delta(channels, 1),
        }
    }
}

fn output_extent(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("stride must be positive"));
    }
    let padded = len + 2 * pad;
    if padded < k {
        return Err(Error::shape(format!(
            "kernel size {k} exceeds padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn check_se(f: Shape, se: Shape) -> Result<usize> {
    if se.n != 1 || se.h != se.w || se.h == 0 {
        return Err(Error::shape(format!(
            "structuring element must be (1, C, k, k), got {se}"
        )));
    }
    if se.c != f.c {
        return Err(Error::shape(format!(
            "structuring element has {} channels, input has {}",
            se.c, f.c
        )));
    }
    Ok(se.h)
}

/// Dilation or erosion evaluated per plane, returning the winning input
/// index (within the plane) for every output element.
#[derive(Clone, Copy)]
enum Morph {
    Dilate,
    Erode,
}

struct Geometry {
    input: Shape,
    out: Shape,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: Shape, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let ho = output_extent(input.h, k, stride, pad)?;
        let wo = output_extent(input.w, k, stride, pad)?;
        Ok(Geometry {
            input,
            out: input.with_spatial(ho, wo),
            k,
            stride,
            pad,
        })
    }

    /// Unpadded input coordinate for output `o` and offset `z`, if inside.
    fn source(&self, op: Morph, o: usize, z: usize, len: usize) -> Option<usize> {
        let p = match op {
            Morph::Dilate => (o * self.stride + self.k - 1).checked_sub(z)?,
            Morph::Erode => o * self.stride + z,
        };
        let i = p.checked_sub(self.pad)?;
        (i < len).then_some(i)
    }

    /// Kernel offset that links output `o` with input `i`.
    fn offset(&self, op: Morph, o: usize, i: usize) -> usize {
        match op {
            Morph::Dilate => o * self.stride + self.k - 1 - (i + self.pad),
            Morph::Erode => i + self.pad - o * self.stride,
        }
    }
}

fn morph_forward(op: Morph, f: &Tensor, h: &Tensor, geo: &Geometry) -> (Tensor, Vec<u32>) {
    let (k, s, out) = (geo.k, geo.input, geo.out);
    let fd = f.data();
    let hd = h.data();
    let mut values = vec![0.0f32; out.numel()];
    let mut args = vec![NONE; out.numel()];
    // Scan offsets so that input positions are visited in row-major order.
    let scan: Vec<usize> = match op {
        Morph::Dilate => (0..k).rev().collect(),
        Morph::Erode => (0..k).collect(),
    };
    par::for_each_chunk2(
        &mut values,
        out.plane(),
        &mut args,
        out.plane(),
        |plane, vals, arg| {
            let c = plane % s.c;
            let src = &fd[plane * s.plane()..(plane + 1) * s.plane()];
            let kern = &hd[c * k * k..(c + 1) * k * k];
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let mut best = match op {
                        Morph::Dilate => f32::NEG_INFINITY,
                        Morph::Erode => f32::INFINITY,
                    };
                    let mut best_i = NONE;
                    for &zy in &scan {
                        let Some(iy) = geo.source(op, oy, zy, s.h) else {
                            continue;
                        };
                        for &zx in &scan {
                            let Some(ix) = geo.source(op, ox, zx, s.w) else {
                                continue;
                            };
                            let hz = kern[zy * k + zx];
                            let x = src[iy * s.w + ix];
                            let better = match op {
                                Morph::Dilate => {
                                    let v = x + hz;
                                    (v > best).then_some(v)
                                }
                                Morph::Erode => {
                                    let v = x - hz;
                                    (v < best).then_some(v)
                                }
                            };
                            if let Some(v) = better {
                                best = v;
                                best_i = (iy * s.w + ix) as u32;
                            }
                        }
                    }
                    vals[oy * out.w + ox] = best;
                    arg[oy * out.w + ox] = best_i;
                }
            }
        },
    );
    (Tensor::from_parts(out, values), args)
}

fn morph_backward(
    op: Morph,
    geo: &Geometry,
    args: &[u32],
    grad: &Tensor,
    need_f: bool,
    need_h: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (k, s, out) = (geo.k, geo.input, geo.out);
    let g = grad.data();
    let gf = need_f.then(|| {
        let mut d = vec![0.0f32; s.numel()];
        par::for_each_chunk(&mut d, s.plane(), |plane, gp| {
            let base = plane * out.plane();
            for o in 0..out.plane() {
                let a = args[base + o];
                if a != NONE {
                    gp[a as usize] += g[base + o];
                }
            }
        });
        Tensor::from_parts(s, d)
    });
    let gh = need_h.then(|| {
        let sign = match op {
            Morph::Dilate => 1.0,
            Morph::Erode => -1.0,
        };
        let partial: Vec<Vec<f32>> = par::map_indices(s.n * s.c, |plane| {
            let mut acc = vec![0.0f32; k * k];
            let base = plane * out.plane();
            for oy in 0..out.h {
                for ox in 0..out.w {
                    let o = oy * out.w + ox;
                    let a = args[base + o];
                    if a == NONE {
                        continue;
                    }
                    let (iy, ix) = (a as usize / s.w, a as usize % s.w);
                    let z = geo.offset(op, oy, iy) * k + geo.offset(op, ox, ix);
                    acc[z] += sign * g[base + o];
                }
            }
            acc
        });
        let mut d = vec![0.0f32; s.c * k * k];
        for (plane, acc) in partial.iter().enumerate() {
            let c = plane % s.c;
            for (dst, v) in d[c * k * k..(c + 1) * k * k].iter_mut().zip(acc) {
                *dst += v;
            }
        }
        Tensor::from_parts(Shape::new(1, s.c, k, k), d)
    });
    (gf, gh)
}

impl Graph {
    fn morph(&mut self, op: Morph, f: Var, se: Var, stride: usize, padding: usize) -> Result<Var> {
        let k = check_se(self.shape(f), self.shape(se))?;
        let geo = Geometry::new(self.shape(f), k, stride, padding)?;
        let (value, args) = morph_forward(op, self.value(f), self.value(se), &geo);
        Ok(self.record(value, &[f, se], move |ctx| {
            let (gf, gh) = morph_backward(op, &geo, &args, ctx.grad, ctx.needs[0], ctx.needs[1]);
            vec![gf, gh]
        }))
    }

    /// Channel-wise dilation by a `(1, C, k, k)` structuring element.
    pub fn dilate2d(&mut self, f: Var, se: Var, stride: usize, padding: usize) -> Result<Var> {
        self.morph(Morph::Dilate, f, se, stride, padding)
    }

    /// Channel-wise erosion, the adjoint of [`Graph::dilate2d`].
    pub fn erode2d(&mut self, f: Var, se: Var, stride: usize, padding: usize) -> Result<Var> {
        self.morph(Morph::Erode, f, se, stride, padding)
    }

    /// `max(h0_c, (f (+) h)(x))` with `h0` shaped `(1, C, 1, 1)`.
    ///
    /// The element must have odd size; it is applied at stride 1 with
    /// symmetric `(k - 1) / 2` padding so the spatial size is kept. Where
    /// `h0` ties with the dilation, `h0` takes the gradient.
    pub fn morph_activation(&mut self, f: Var, h0: Var, se: Var) -> Result<Var> {
        let fs = self.shape(f);
        let hs = self.shape(h0);
        if hs != Shape::new(1, fs.c, 1, 1) {
            return Err(Error::shape(format!(
                "h0 must be (1, {}, 1, 1), got {hs}",
                fs.c
            )));
        }
        let k = check_se(fs, self.shape(se))?;
        if k % 2 == 0 {
            return Err(Error::config(format!(
                "activation structuring element must have odd size, got {k}"
            )));
        }
        let d = self.dilate2d(f, se, 1, (k - 1) / 2)?;
        self.maximum(h0, d)
    }

    /// Equidistant up-sampling: `f(x)` is placed at `factor * x` in a
    /// `-inf` canvas, which is then dilated by `se` so every output
    /// position receives a value.
    pub fn morph_upsample(&mut self, f: Var, se: Var, factor: usize) -> Result<Var> {
        let s = self.shape(f);
        let k = check_se(s, self.shape(se))?;
        check_upsample(k, factor)?;
        if !self.value(se).all_finite() {
            return Err(Error::config(
                "up-sampling structuring element must be finite",
            ));
        }
        let (value, args) = upsample_forward(self.value(f), self.value(se), k, factor);
        Ok(self.record(value, &[f, se], move |ctx| {
            let g = ctx.grad.data();
            let out = ctx.grad.shape();
            let gf = ctx.needs[0].then(|| {
                let mut d = vec![0.0f32; s.numel()];
                par::for_each_chunk(&mut d, s.plane(), |plane, gp| {
                    let base = plane * out.plane();
                    for o in 0..out.plane() {
                        gp[(args[base + o] / (k * k) as u32) as usize] += g[base + o];
                    }
                });
                Tensor::from_parts(s, d)
            });
            let gh = ctx.needs[1].then(|| {
                let mut d = vec![0.0f32; s.c * k * k];
                for plane in 0..s.n * s.c {
                    let c = plane % s.c;
                    let base = plane * out.plane();
                    for o in 0..out.plane() {
                        let z = (args[base + o] % (k * k) as u32) as usize;
                        d[c * k * k + z] += g[base + o];
                    }
                }
                Tensor::from_parts(Shape::new(1, s.c, k, k), d)
            });
            vec![gf, gh]
        }))
    }

    /// `erode(dilate(f, se, 1, k - 1), se, 1, 0)`: same spatial size as `f`.
    pub fn closing(&mut self, f: Var, se: Var) -> Result<Var> {
        let k = check_se(self.shape(f), self.shape(se))?;
        let d = self.dilate2d(f, se, 1, k - 1)?;
        self.erode2d(d, se, 1, 0)
    }
}

fn check_upsample(k: usize, factor: usize) -> Result<()> {
    if factor < 2 {
        return Err(Error::config(format!(
            "up-sampling factor must be >= 2, got {factor}"
        )));
    }
    if k < factor {
        return Err(Error::config(format!(
            "a {k}x{k} structuring element leaves positions uncovered at factor {factor}"
        )));
    }
    Ok(())
}

/// Returns the output plus, per output element, `src * k * k + z`.
fn upsample_forward(f: &Tensor, h: &Tensor, k: usize, factor: usize) -> (Tensor, Vec<u32>) {
    let s = f.shape();
    let out = s.with_spatial(s.h * factor, s.w * factor);
    let (fd, hd) = (f.data(), h.data());
    let mut values = vec![0.0f32; out.numel()];
    let mut args = vec![0u32; out.numel()];
    par::for_each_chunk2(
        &mut values,
        out.plane(),
        &mut args,
        out.plane(),
        |plane, vals, arg| {
            let c = plane % s.c;
            let src = &fd[plane * s.plane()..(plane + 1) * s.plane()];
            let kern = &hd[c * k * k..(c + 1) * k * k];
            for y in 0..out.h {
                for x in 0..out.w {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_arg = 0u32;
                    for zy in (0..k.min(y + 1)).rev() {
                        let py = y - zy;
                        if py % factor != 0 {
                            continue;
                        }
                        for zx in (0..k.min(x + 1)).rev() {
                            let px = x - zx;
                            if px % factor != 0 {
                                continue;
                            }
                            let i = (py / factor) * s.w + px / factor;
                            let v = src[i] + kern[zy * k + zx];
                            if v > best {
                                best = v;
                                best_arg = (i * k * k + zy * k + zx) as u32;
                            }
                        }
                    }
                    vals[y * out.w + x] = best;
                    arg[y * out.w + x] = best_arg;
                }
            }
        },
    );
    (Tensor::from_parts(out, values), args)
}

fn with_graph(
    f: &Tensor,
    se: &StructuringElement,
    op: impl FnOnce(&mut Graph, Var, Var) -> Result<Var>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let sv = g.constant(se.to_tensor());
    let y = op(&mut g, fv, sv)?;
    Ok(g.value(y).clone())
}

/// Dilation of a plain tensor (no gradient tracking).
pub fn dilate2d(
    f: &Tensor,
    se: &StructuringElement,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    with_graph(f, se, |g, f, s| g.dilate2d(f, s, stride, padding))
}

pub fn erode2d(
    f: &Tensor,
    se: &StructuringElement,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    with_graph(f, se, |g, f, s| g.erode2d(f, s, stride, padding))
}

pub fn morph_activation(f: &Tensor, p: &MorphActivationParams) -> Result<Tensor> {
    if p.h0.len() != f.shape().c {
        return Err(Error::shape(format!(
            "h0 has {} entries, input has {} channels",
            p.h0.len(),
            f.shape().c
        )));
    }
    let h0 = Tensor::from_parts(Shape::new(1, p.h0.len(), 1, 1), p.h0.clone());
    with_graph(f, &p.se, |g, f, s| {
        let h = g.constant(h0);
        g.morph_activation(f, h, s)
    })
}

pub fn morph_upsample(f: &Tensor, se: &StructuringElement, factor: usize) -> Result<Tensor> {
    with_graph(f, se, |g, f, s| g.morph_upsample(f, s, factor))
}

pub fn closing(f: &Tensor, se: &StructuringElement) -> Result<Tensor> {
    with_graph(f, se, |g, f, s| g.closing(f, s))
}

/// Checks that an up-sampler with a `k x k` element covers every output
/// position at `factor`.
pub fn validate_upsample(k: usize, factor: usize) -> Result<()> {
    check_upsample(k, factor)
}
