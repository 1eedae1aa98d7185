//! Atrous spatial pyramid pooling.

use rand::Rng;

use super::{ActivationKind, ConvBnAct, ConvSpec, Ctx, ParamStore};
use crate::autograd::Var;
use crate::error::{Error, Result};

/// Parallel `1x1`, two dilated `3x3` and image-pooling branches,
/// concatenated and projected back to `width` channels. Every branch and
/// the projection end in batch norm + activation.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub point: ConvBnAct,
    pub atrous: Vec<ConvBnAct>,
    pub pool: ConvBnAct,
    pub project: ConvBnAct,
    pub rates: Vec<usize>,
    pub in_channels: usize,
    pub width: usize,
}

impl Aspp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        width: usize,
        rates: &[usize],
        act: ActivationKind,
        rng: &mut R,
    ) -> Self {
        let point = ConvBnAct::new(
            store,
            &format!("{name}.b0"),
            in_channels,
            width,
            1,
            ConvSpec::default(),
            act,
            rng,
        );
        let atrous = rates
            .iter()
            .enumerate()
            .map(|(i, &r)| {
                ConvBnAct::new(
                    store,
                    &format!("{name}.b{}", i + 1),
                    in_channels,
                    width,
                    3,
                    ConvSpec::same(3, r),
                    act,
                    rng,
                )
            })
            .collect();
        let pool = ConvBnAct::new(
            store,
            &format!("{name}.pool"),
            in_channels,
            width,
            1,
            ConvSpec::default(),
            act,
            rng,
        );
        let branches = rates.len() + 2;
        let project = ConvBnAct::new(
            store,
            &format!("{name}.project"),
            branches * width,
            width,
            1,
            ConvSpec::default(),
            act,
            rng,
        );
        Aspp {
            point,
            atrous,
            pool,
            project,
            rates: rates.to_vec(),
            in_channels,
            width,
        }
    }

    pub fn num_parameters(
        in_channels: usize,
        width: usize,
        rates: usize,
        act: ActivationKind,
    ) -> usize {
        ConvBnAct::num_parameters(in_channels, width, 1, act) * 2
            + ConvBnAct::num_parameters(in_channels, width, 3, act) * rates
            + ConvBnAct::num_parameters((rates + 2) * width, width, 1, act)
    }

    /// Rejects maps on which a dilated tap can never land inside the image.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let reach = self.rates.iter().copied().max().unwrap_or(0);
        if h <= reach || w <= reach {
            return Err(Error::config(format!(
                "ASPP input {h}x{w} is too small for dilation rate {reach}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x);
        self.check_extent(s.h, s.w)?;
        let mut branches = vec![self.point.forward(ctx, x)?];
        for b in &self.atrous {
            branches.push(b.forward(ctx, x)?);
        }
        let pooled = ctx.graph.global_avg_pool(x);
        let pooled = self.pool.forward(ctx, pooled)?;
        branches.push(ctx.graph.expand(pooled, s.with_channels(self.width))?);
        let cat = ctx.graph.concat_channels(&branches)?;
        self.project.forward(ctx, cat)
    }
}
