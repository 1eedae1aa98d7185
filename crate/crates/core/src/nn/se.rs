//! Squeeze-and-excitation channel attention, one parameter set per
//! modality.

use rand::Rng;

use super::{Activation, ActivationKind, Conv2d, ConvSpec, Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};

/// `GAP -> 1x1 conv (C -> ceil(C/4)) -> activation -> 1x1 conv -> sigmoid`,
/// then a per-channel rescale of the input.
#[derive(Clone, Debug)]
pub struct SeBranch {
    pub fc1: Conv2d,
    pub act: Activation,
    pub fc2: Conv2d,
    pub channels: usize,
}

impl SeBranch {
    pub fn hidden_width(channels: usize) -> usize {
        channels.div_ceil(4)
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        let hidden = Self::hidden_width(channels);
        SeBranch {
            fc1: Conv2d::new(
                store,
                &format!("{name}.fc1"),
                channels,
                hidden,
                1,
                ConvSpec::default(),
                rng,
            ),
            act: Activation::new(store, &format!("{name}.act"), hidden, act),
            fc2: Conv2d::new(
                store,
                &format!("{name}.fc2"),
                hidden,
                channels,
                1,
                ConvSpec::default(),
                rng,
            ),
            channels,
        }
    }

    pub fn num_parameters(channels: usize, act: ActivationKind) -> usize {
        let hidden = Self::hidden_width(channels);
        Conv2d::num_parameters(channels, hidden, 1)
            + act.num_parameters(hidden)
            + Conv2d::num_parameters(hidden, channels, 1)
    }

    /// The `(N, C, 1, 1)` gate.
    pub fn gate(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = ctx.graph.shape(x).c;
        if c != self.channels {
            return Err(Error::shape(format!(
                "SE branch expects {} channels, got {c}",
                self.channels
            )));
        }
        let s = ctx.graph.global_avg_pool(x);
        let h = self.fc1.forward(ctx, s)?;
        let h = self.act.forward(ctx, h)?;
        let z = self.fc2.forward(ctx, h)?;
        Ok(ctx.graph.sigmoid(z))
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let g = self.gate(ctx, x)?;
        ctx.graph.mul(x, g)
    }
}

/// Separate SE attention for the RGB and depth feature volumes.
#[derive(Clone, Debug)]
pub struct SeGate {
    pub rgb: SeBranch,
    pub depth: SeBranch,
}

impl SeGate {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        rgb_channels: usize,
        depth_channels: usize,
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        SeGate {
            rgb: SeBranch::new(store, &format!("{name}.rgb"), rgb_channels, act, rng),
            depth: SeBranch::new(store, &format!("{name}.depth"), depth_channels, act, rng),
        }
    }

    pub fn num_parameters(
        rgb_channels: usize,
        depth_channels: usize,
        act: ActivationKind,
    ) -> usize {
        SeBranch::num_parameters(rgb_channels, act) + SeBranch::num_parameters(depth_channels, act)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var, depth: Var) -> Result<(Var, Var)> {
        let (sr, sd) = (ctx.graph.shape(rgb), ctx.graph.shape(depth));
        if (sr.n, sr.h, sr.w) != (sd.n, sd.h, sd.w) {
            return Err(Error::shape(format!(
                "SE gate inputs disagree: {sr} vs {sd}"
            )));
        }
        Ok((self.rgb.forward(ctx, rgb)?, self.depth.forward(ctx, depth)?))
    }
}
