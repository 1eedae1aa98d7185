use rand::Rng;

use super::{Activation, ActivationKind, BatchNorm2d, Conv2d, ConvSpec, Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::Result;

/// `conv -> batch norm -> activation`.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub act: Activation,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        k: usize,
        spec: ConvSpec,
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        ConvBnAct {
            conv: Conv2d::new(
                store,
                &format!("{name}.conv"),
                in_channels,
                out_channels,
                k,
                spec,
                rng,
            ),
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels),
            act: Activation::new(store, &format!("{name}.act"), out_channels, act),
        }
    }

    pub fn num_parameters(
        in_channels: usize,
        out_channels: usize,
        k: usize,
        act: ActivationKind,
    ) -> usize {
        Conv2d::num_parameters(in_channels, out_channels, k)
            + BatchNorm2d::num_parameters(out_channels)
            + act.num_parameters(out_channels)
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        self.act.forward(ctx, y)
    }
}
