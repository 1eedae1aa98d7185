use super::params::{Ctx, ParamId, ParamStore};
use crate::autograd::Var;
use crate::error::Result;
use crate::morpho::StructuringElement;
use crate::tensor::{Shape, Tensor};

/// Structuring element used by the dilation-based activation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ActivationKernel {
    /// Fixed `delta(1)`; only `h0` learns (a learnable ReLU threshold).
    #[default]
    Delta,
    /// Learnable `3 x 3` element, zero-initialised.
    Learnable3x3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Morph(ActivationKernel),
}

impl ActivationKind {
    pub fn num_parameters(self, channels: usize) -> usize {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Morph(ActivationKernel::Delta) => channels,
            ActivationKind::Morph(ActivationKernel::Learnable3x3) => channels + 9 * channels,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Activation {
    kind: ActivationKind,
    channels: usize,
    h0: Option<ParamId>,
    se: Option<ParamId>,
}

impl Activation {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: ActivationKind) -> Self {
        let (h0, se) = match kind {
            ActivationKind::Relu => (None, None),
            ActivationKind::Morph(kernel) => {
                let h0 = store.add(
                    format!("{name}.h0"),
                    Tensor::zeros(Shape::new(1, channels, 1, 1)),
                    true,
                );
                let se = (kernel == ActivationKernel::Learnable3x3).then(|| {
                    store.add(
                        format!("{name}.se"),
                        StructuringElement::flat(channels, 3).to_tensor(),
                        true,
                    )
                });
                (Some(h0), se)
            }
        };
        Activation {
            kind,
            channels,
            h0,
            se,
        }
    }

    pub fn kind(&self) -> ActivationKind {
        self.kind
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let Some(h0) = self.h0 else {
            return Ok(ctx.graph.relu(x));
        };
        let h0 = ctx.var(h0);
        let se = match self.se {
            Some(id) => ctx.var(id),
            None => ctx
                .graph
                .constant(StructuringElement::delta(self.channels, 1).to_tensor()),
        };
        ctx.graph.morph_activation(x, h0, se)
    }
}
