//! Morphological Haar wavelet down-sampling and the gated RGB-D fusion
//! block built on it.
//!
//! One decomposition level splits every channel into a max-pooled
//! approximation (dilation by a flat `2 x 2` element at stride 2) and three
//! linear detail bands computed by stride-2 cross-correlation with
//!
//! ```text
//! vertical      horizontal    diagonal
//! [-1 -1]       [-1  1]       [ 1 -1]
//! [ 1  1]       [-1  1]       [-1  1]
//! ```
//!
//! The fusion block gates each modality's approximation with a sigmoid of
//! a per-pixel two-layer network applied to the detail bands of *both*
//! modalities.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::morpho::StructuringElement;
use crate::nn::{Activation, ActivationKind, Conv2d, ConvSpec, Ctx, ParamStore};
use crate::par;
use crate::tensor::{Shape, Tensor};

/// Subbands of one decomposition level.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarSubbands {
    /// `(N, C, H/2, W/2)`.
    pub approx: Tensor,
    /// `(N, 3C, H/2, W/2)`; channel `3c + {0, 1, 2}` holds the vertical,
    /// horizontal and diagonal detail of source channel `c`.
    pub details: Tensor,
}

impl HaarSubbands {
    pub fn vertical(&self, n: usize, c: usize) -> &[f32] {
        self.details.plane(n, 3 * c)
    }

    pub fn horizontal(&self, n: usize, c: usize) -> &[f32] {
        self.details.plane(n, 3 * c + 1)
    }

    pub fn diagonal(&self, n: usize, c: usize) -> &[f32] {
        self.details.plane(n, 3 * c + 2)
    }
}

impl Graph {
    fn haar_details(&mut self, f: Var) -> Var {
        let s = self.shape(f);
        let out = Shape::new(s.n, 3 * s.c, s.h / 2, s.w / 2);
        let op = out.plane();
        let fd = self.value(f).data();
        let mut data = vec![0.0f32; out.numel()];
        par::for_each_chunk(&mut data, 3 * op, |plane, dst| {
            let src = &fd[plane * s.plane()..(plane + 1) * s.plane()];
            for y in 0..out.h {
                for x in 0..out.w {
                    let i = 2 * y * s.w + 2 * x;
                    let (a, b, c, d) = (src[i], src[i + 1], src[i + s.w], src[i + s.w + 1]);
                    let o = y * out.w + x;
                    dst[o] = (c + d) - (a + b);
                    dst[op + o] = (b + d) - (a + c);
                    dst[2 * op + o] = (a - b) - (c - d);
                }
            }
        });
        self.record(Tensor::from_parts(out, data), &[f], move |ctx| {
            let g = ctx.grad.data();
            let mut gf = vec![0.0f32; s.numel()];
            par::for_each_chunk(&mut gf, s.plane(), |plane, dst| {
                let src = &g[plane * 3 * op..(plane + 1) * 3 * op];
                for y in 0..out.h {
                    for x in 0..out.w {
                        let o = y * out.w + x;
                        let (gv, gh, gd) = (src[o], src[op + o], src[2 * op + o]);
                        let i = 2 * y * s.w + 2 * x;
                        dst[i] = -gv - gh + gd;
                        dst[i + 1] = -gv + gh - gd;
                        dst[i + s.w] = gv - gh - gd;
                        dst[i + s.w + 1] = gv + gh + gd;
                    }
                }
            });
            vec![Some(Tensor::from_parts(s, gf))]
        })
    }

    /// One wavelet level: `(approx, details)`. Odd heights or widths are
    /// first extended by replicating the last row or column.
    pub fn haar_forward(&mut self, f: Var) -> Result<(Var, Var)> {
        let s = self.shape(f);
        if s.h == 0 || s.w == 0 {
            return Err(Error::shape(format!(
                "haar_forward on empty spatial extent {s}"
            )));
        }
        let f = self.pad_replicate(f, s.h + s.h % 2, s.w + s.w % 2)?;
        let flat = self.constant(StructuringElement::flat(s.c, 2).to_tensor());
        let approx = self.dilate2d(f, flat, 2, 0)?;
        let details = self.haar_details(f);
        Ok((approx, details))
    }
}

/// One level of the morphological Haar decomposition of a plain tensor.
pub fn haar_forward(f: &Tensor) -> Result<HaarSubbands> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let (a, d) = g.haar_forward(fv)?;
    Ok(HaarSubbands {
        approx: g.value(a).clone(),
        details: g.value(d).clone(),
    })
}

/// `L` successive levels, each decomposing the previous approximation.
pub fn haar_levels(f: &Tensor, levels: usize) -> Result<Vec<HaarSubbands>> {
    let mut out: Vec<HaarSubbands> = Vec::with_capacity(levels);
    for _ in 0..levels {
        let src = out.last().map_or(f, |b| &b.approx);
        let next = haar_forward(src)?;
        out.push(next);
    }
    Ok(out)
}

/// Per-pixel two-layer gate network: `1x1 conv -> activation -> 1x1 conv`.
#[derive(Clone, Debug)]
pub struct GateNet {
    pub fc1: Conv2d,
    pub act: Activation,
    pub fc2: Conv2d,
}

impl GateNet {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        hidden: usize,
        outputs: usize,
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (inputs as f32).sqrt();
        let w1 = Tensor::uniform(Shape::new(hidden, inputs, 1, 1), -bound, bound, rng);
        let b1 = Tensor::uniform(Shape::new(1, hidden, 1, 1), -bound, bound, rng);
        let fc1 = Conv2d::with_weights(store, &format!("{name}.fc1"), w1, b1, ConvSpec::default());
        let act = Activation::new(store, &format!("{name}.act"), hidden, act);
        let fc2 = Conv2d::with_weights(
            store,
            &format!("{name}.fc2"),
            Tensor::zeros(Shape::new(outputs, hidden, 1, 1)),
            Tensor::zeros(Shape::new(1, outputs, 1, 1)),
            ConvSpec::default(),
        );
        GateNet { fc1, act, fc2 }
    }

    /// Gate logits (before the sigmoid).
    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(ctx, x)?;
        let h = self.act.forward(ctx, h)?;
        self.fc2.forward(ctx, h)
    }
}

/// Morphological Haar wavelet fusion block for an RGB and a depth stream.
#[derive(Clone, Debug)]
pub struct MhwBlock {
    pub gate_rgb: GateNet,
    pub gate_d: GateNet,
    pub rgb_channels: usize,
    pub depth_channels: usize,
}

/// Output of [`MhwBlock::forward_with_gates`].
pub struct MhwOutput {
    pub rgb: Var,
    pub depth: Var,
    pub gate_rgb: Var,
    pub gate_d: Var,
}

impl MhwBlock {
    pub fn hidden_width(rgb_channels: usize, depth_channels: usize) -> usize {
        (3 * rgb_channels + 3 * depth_channels).div_ceil(4)
    }

    /// Both gate networks start with zero output layers, i.e. a uniform
    /// gate of 0.5.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rgb_channels: usize,
        depth_channels: usize,
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        let inputs = 3 * rgb_channels + 3 * depth_channels;
        let hidden = Self::hidden_width(rgb_channels, depth_channels);
        MhwBlock {
            gate_rgb: GateNet::new(
                store,
                &format!("{name}.gate_rgb"),
                inputs,
                hidden,
                rgb_channels,
                act,
                rng,
            ),
            gate_d: GateNet::new(
                store,
                &format!("{name}.gate_d"),
                inputs,
                hidden,
                depth_channels,
                act,
                rng,
            ),
            rgb_channels,
            depth_channels,
        }
    }

    /// Closed-form count of trainable scalars.
    pub fn num_parameters(
        rgb_channels: usize,
        depth_channels: usize,
        act: ActivationKind,
    ) -> usize {
        let inputs = 3 * rgb_channels + 3 * depth_channels;
        let hidden = Self::hidden_width(rgb_channels, depth_channels);
        let net = |out: usize| {
            Conv2d::num_parameters(inputs, hidden, 1)
                + act.num_parameters(hidden)
                + Conv2d::num_parameters(hidden, out, 1)
        };
        net(rgb_channels) + net(depth_channels)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var, depth: Var) -> Result<(Var, Var)> {
        let o = self.forward_with_gates(ctx, rgb, depth)?;
        Ok((o.rgb, o.depth))
    }

    pub fn forward_with_gates(&self, ctx: &mut Ctx<'_>, rgb: Var, depth: Var) -> Result<MhwOutput> {
        let (sr, sd) = (ctx.graph.shape(rgb), ctx.graph.shape(depth));
        if (sr.n, sr.h, sr.w) != (sd.n, sd.h, sd.w) {
            return Err(Error::shape(format!(
                "modalities disagree in batch or spatial extent: {sr} vs {sd}"
            )));
        }
        if sr.c != self.rgb_channels || sd.c != self.depth_channels {
            return Err(Error::shape(format!(
                "fusion block expects {}/{} channels, got {sr} and {sd}",
                self.rgb_channels, self.depth_channels
            )));
        }
        let (approx_rgb, details_rgb) = ctx.graph.haar_forward(rgb)?;
        let (approx_d, details_d) = ctx.graph.haar_forward(depth)?;
        let phi = ctx.graph.concat_channels(&[details_rgb, details_d])?;
        let logits_rgb = self.gate_rgb.forward(ctx, phi)?;
        let logits_d = self.gate_d.forward(ctx, phi)?;
        let gate_rgb = ctx.graph.sigmoid(logits_rgb);
        let gate_d = ctx.graph.sigmoid(logits_d);
        Ok(MhwOutput {
            rgb: ctx.graph.mul(approx_rgb, gate_rgb)?,
            depth: ctx.graph.mul(approx_d, gate_d)?,
            gate_rgb,
            gate_d,
        })
    }
}

/// Runs the fusion block on plain tensors (eval mode).
pub fn mhw_fuse(
    rgb: &Tensor,
    depth: &Tensor,
    block: &MhwBlock,
    store: &mut ParamStore,
) -> Result<(Tensor, Tensor)> {
    let mut ctx = Ctx::new(store, false);
    let r = ctx.graph.constant(rgb.clone());
    let d = ctx.graph.constant(depth.clone());
    let (a, b) = block.forward(&mut ctx, r, d)?;
    Ok((ctx.graph.value(a).clone(), ctx.graph.value(b).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morpho::dilate2d;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_window_example() {
        let b = haar_forward(&Tensor::plane2d(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(b.approx.data(), &[4.0]);
        assert_eq!(b.vertical(0, 0), &[4.0]);
        assert_eq!(b.horizontal(0, 0), &[2.0]);
        assert_eq!(b.diagonal(0, 0), &[0.0]);
    }

    #[test]
    fn constant_input_has_zero_details() {
        let f = Tensor::full(Shape::new(2, 3, 6, 4), 0.3);
        let b = haar_forward(&f).unwrap();
        assert!(b.approx.data().iter().all(|&v| v == 0.3));
        assert!(b.details.data().iter().all(|&v| v == 0.0));
        assert_eq!(b.details.shape(), Shape::new(2, 9, 3, 2));
    }

    #[test]
    fn approx_is_flat_dilation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = Tensor::uniform(Shape::new(2, 3, 8, 6), -4.0, 4.0, &mut rng);
        let b = haar_forward(&f).unwrap();
        assert_eq!(
            b.approx,
            dilate2d(&f, &StructuringElement::flat(3, 2), 2, 0).unwrap()
        );
    }

    #[test]
    fn odd_sizes_replicate_pad() {
        let f = Tensor::plane2d(&[&[1.0, 2.0, 5.0], &[3.0, 4.0, 6.0], &[0.0, 0.0, 9.0]]);
        let b = haar_forward(&f).unwrap();
        assert_eq!(b.approx.data(), &[4.0, 6.0, 0.0, 9.0]);
        // right column window [[5,5],[6,6]]: vertical 2, horizontal 0
        assert_eq!(b.vertical(0, 0)[1], 2.0);
        assert_eq!(b.horizontal(0, 0)[1], 0.0);
    }

    #[test]
    fn empty_input_is_shape_error() {
        let f = Tensor::zeros(Shape::new(1, 1, 0, 4));
        assert!(matches!(haar_forward(&f), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_gate_weights_halve_approximation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = MhwBlock::new(&mut store, "mhw", 2, 1, ActivationKind::Relu, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            let z = Tensor::zeros(store.get(id).shape());
            store.set(id, z).unwrap();
        }
        let rgb = Tensor::uniform(Shape::new(1, 2, 4, 4), -1.0, 1.0, &mut rng);
        let d = Tensor::uniform(Shape::new(1, 1, 4, 4), 0.0, 1.0, &mut rng);
        let (or, od) = mhw_fuse(&rgb, &d, &block, &mut store).unwrap();
        let ar = haar_forward(&rgb).unwrap().approx;
        let ad = haar_forward(&d).unwrap().approx;
        assert_eq!(or, ar.map(|v| v * 0.5));
        assert_eq!(od, ad.map(|v| v * 0.5));
    }

    #[test]
    fn modality_mismatch_is_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let block = MhwBlock::new(&mut store, "mhw", 2, 1, ActivationKind::Relu, &mut rng);
        let rgb = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let d = Tensor::zeros(Shape::new(1, 1, 6, 4));
        assert!(matches!(
            mhw_fuse(&rgb, &d, &block, &mut store),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn parameter_count_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for act in [
            ActivationKind::Relu,
            ActivationKind::Morph(Default::default()),
        ] {
            let mut store = ParamStore::new();
            MhwBlock::new(&mut store, "m", 16, 16, act, &mut rng);
            assert_eq!(
                store.num_parameters(),
                MhwBlock::num_parameters(16, 16, act)
            );
        }
    }
}
