//! Miniature dual-stream HaarNet for RGB-D segmentation.
//!
//! ```text
//! rgb ─ stem ─ stage1 ─┐        ┌─ stage2 ─┐        ┌─ stage3 ─┐        ┌─┐
//!                      ├─ down ─┤          ├─ down ─┤          ├─ down ─┤ concat ─ 1x1 ─ ASPP
//! d   ─ stem ─ stage1 ─┘        └─ stage2 ─┘        └─ stage3 ─┘        └─┘
//!
//! decoder (x3): up-sample ─ concat(SE(rgb skip) + SE(d skip)) ─ 1x1 conv-bn-act
//! head: 1x1 conv to classes at full resolution
//! ```
//!
//! `down` is the Haar fusion block when `use_mhw` is set and a plain
//! stride-2 flat dilation otherwise; `up` is morphological up-sampling
//! when `use_mup` is set and nearest-neighbour otherwise; activations are
//! dilation-based when `use_mrelu` is set and ReLU otherwise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    ActivationKernel, ActivationKind, Aspp, Conv2d, ConvBnAct, ConvSpec, Ctx, ParamId, ParamStore,
    SeGate,
};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::haar::MhwBlock;
use crate::morpho::StructuringElement;
use crate::tensor::Tensor;

pub const RGB_CHANNELS: usize = 3;
pub const DEPTH_CHANNELS: usize = 1;
const UPSAMPLE_K: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct HaarNetConfig {
    pub num_classes: usize,
    /// Channel widths of the three encoder stages.
    pub widths: [usize; 3],
    pub bottleneck: usize,
    pub aspp_rates: [usize; 2],
    pub use_mup: bool,
    pub use_mrelu: bool,
    pub use_mhw: bool,
    pub activation_kernel: ActivationKernel,
    pub seed: u64,
}

impl Default for HaarNetConfig {
    fn default() -> Self {
        HaarNetConfig {
            num_classes: 5,
            widths: [16, 32, 64],
            bottleneck: 128,
            aspp_rates: [2, 4],
            use_mup: true,
            use_mrelu: true,
            use_mhw: true,
            activation_kernel: ActivationKernel::Delta,
            seed: 0,
        }
    }
}

impl HaarNetConfig {
    pub fn with_switches(mut self, mup: bool, mrelu: bool, mhw: bool) -> Self {
        self.use_mup = mup;
        self.use_mrelu = mrelu;
        self.use_mhw = mhw;
        self
    }

    pub fn activation(&self) -> ActivationKind {
        if self.use_mrelu {
            ActivationKind::Morph(self.activation_kernel)
        } else {
            ActivationKind::Relu
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.widths.contains(&0) || self.bottleneck == 0 {
            return Err(Error::config("channel widths must be positive"));
        }
        if self.aspp_rates.contains(&0) {
            return Err(Error::config("ASPP rates must be positive"));
        }
        Ok(())
    }

    /// Decoder output widths, deepest first.
    fn decoder_widths(&self) -> [usize; 3] {
        [self.widths[2], self.widths[1], self.widths[0]]
    }

    /// Closed-form number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        let act = self.activation();
        let [w1, w2, w3] = self.widths;
        let b = self.bottleneck;
        let stream = |cin: usize| {
            ConvBnAct::num_parameters(cin, w1, 3, act)
                + ConvBnAct::num_parameters(w1, w1, 3, act) * 2
                + ConvBnAct::num_parameters(w1, w2, 3, act)
                + ConvBnAct::num_parameters(w2, w2, 3, act)
                + ConvBnAct::num_parameters(w2, w3, 3, act)
                + ConvBnAct::num_parameters(w3, w3, 3, act)
        };
        let mut total = stream(RGB_CHANNELS) + stream(DEPTH_CHANNELS);
        if self.use_mhw {
            total += self
                .widths
                .iter()
                .map(|&w| MhwBlock::num_parameters(w, w, act))
                .sum::<usize>();
        }
        total += ConvBnAct::num_parameters(2 * w3, b, 1, act);
        total += Aspp::num_parameters(b, b, self.aspp_rates.len(), act);
        let mut up_c = b;
        for (skip, out) in [w3, w2, w1].into_iter().zip(self.decoder_widths()) {
            if self.use_mup {
                total += up_c * UPSAMPLE_K * UPSAMPLE_K;
            }
            total += SeGate::num_parameters(skip, skip, act);
            total += ConvBnAct::num_parameters(up_c + skip, out, 1, act);
            up_c = out;
        }
        total + Conv2d::num_parameters(w1, self.num_classes, 1)
    }
}

/// Down-sampling between encoder stages.
#[derive(Clone, Debug)]
pub enum Down {
    Mhw(MhwBlock),
    MaxPool,
}

/// Up-sampling in the decoder.
#[derive(Clone, Debug)]
pub enum Up {
    Morph { se: ParamId },
    Nearest,
}

#[derive(Clone, Debug)]
struct Stream {
    stem: ConvBnAct,
    stages: [[ConvBnAct; 2]; 3],
}

#[derive(Clone, Debug)]
struct DecoderStep {
    up: Up,
    skip_gate: SeGate,
    project: ConvBnAct,
}

#[derive(Clone, Debug)]
pub struct HaarNet {
    config: HaarNetConfig,
    rgb: Stream,
    depth: Stream,
    down: Vec<Down>,
    fuse: ConvBnAct,
    aspp: Aspp,
    decoder: Vec<DecoderStep>,
    head: Conv2d,
}

impl HaarNet {
    /// Registers all parameters in `store` with seeded initialisation.
    pub fn new(config: HaarNetConfig, store: &mut ParamStore) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let act = config.activation();
        let same3 = ConvSpec::same(3, 1);
        let pw = ConvSpec::default();
        let [w1, w2, w3] = config.widths;

        let mut stream = |name: &str, cin: usize, store: &mut ParamStore| {
            let mut block = |s: &str, i: usize, o: usize, store: &mut ParamStore| {
                ConvBnAct::new(store, &format!("{name}.{s}"), i, o, 3, same3, act, &mut rng)
            };
            Stream {
                stem: block("stem", cin, w1, store),
                stages: [
                    [
                        block("stage1.0", w1, w1, store),
                        block("stage1.1", w1, w1, store),
                    ],
                    [
                        block("stage2.0", w1, w2, store),
                        block("stage2.1", w2, w2, store),
                    ],
                    [
                        block("stage3.0", w2, w3, store),
                        block("stage3.1", w3, w3, store),
                    ],
                ],
            }
        };
        let rgb = stream("rgb", RGB_CHANNELS, store);
        let depth = stream("depth", DEPTH_CHANNELS, store);

        let down = config
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                if config.use_mhw {
                    Down::Mhw(MhwBlock::new(
                        store,
                        &format!("down{}", i + 1),
                        w,
                        w,
                        act,
                        &mut rng,
                    ))
                } else {
                    Down::MaxPool
                }
            })
            .collect();

        let fuse = ConvBnAct::new(
            store,
            "bottleneck.fuse",
            2 * w3,
            config.bottleneck,
            1,
            pw,
            act,
            &mut rng,
        );
        let aspp = Aspp::new(
            store,
            "bottleneck.aspp",
            config.bottleneck,
            config.bottleneck,
            &config.aspp_rates,
            act,
            &mut rng,
        );

        let mut decoder = Vec::with_capacity(3);
        let mut up_c = config.bottleneck;
        for (i, (skip, out)) in [w3, w2, w1]
            .into_iter()
            .zip(config.decoder_widths())
            .enumerate()
        {
            let name = format!("decoder{}", i + 1);
            let up = if config.use_mup {
                let se = StructuringElement::flat(up_c, UPSAMPLE_K);
                Up::Morph {
                    se: store.add(format!("{name}.up.se"), se.to_tensor(), true),
                }
            } else {
                Up::Nearest
            };
            decoder.push(DecoderStep {
                up,
                skip_gate: SeGate::new(
                    store,
                    &format!("{name}.skip_se"),
                    skip,
                    skip,
                    act,
                    &mut rng,
                ),
                project: ConvBnAct::new(
                    store,
                    &format!("{name}.project"),
                    up_c + skip,
                    out,
                    1,
                    pw,
                    act,
                    &mut rng,
                ),
            });
            up_c = out;
        }
        let head = Conv2d::new(store, "head", w1, config.num_classes, 1, pw, &mut rng);

        Ok(HaarNet {
            config,
            rgb,
            depth,
            down,
            fuse,
            aspp,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &HaarNetConfig {
        &self.config
    }

    /// `rgb (N, 3, H, W)`, `depth (N, 1, H, W)` to logits
    /// `(N, num_classes, H, W)`. `H` and `W` must be divisible by 8.
    pub fn forward(&self, ctx: &mut Ctx<'_>, rgb: Var, depth: Var) -> Result<Var> {
        let (sr, sd) = (ctx.graph.shape(rgb), ctx.graph.shape(depth));
        if sr.c != RGB_CHANNELS || sd.c != DEPTH_CHANNELS {
            return Err(Error::shape(format!(
                "expected 3-channel RGB and 1-channel depth, got {sr} and {sd}"
            )));
        }
        if (sr.n, sr.h, sr.w) != (sd.n, sd.h, sd.w) {
            return Err(Error::shape(format!("RGB {sr} and depth {sd} disagree")));
        }
        if sr.h % 8 != 0 || sr.w % 8 != 0 || sr.h == 0 || sr.w == 0 {
            return Err(Error::shape(format!(
                "spatial size {}x{} must be a positive multiple of 8",
                sr.h, sr.w
            )));
        }
        self.aspp.check_extent(sr.h / 8, sr.w / 8)?;

        let mut r = self.rgb.stem.forward(ctx, rgb)?;
        let mut d = self.depth.stem.forward(ctx, depth)?;
        let mut skips = Vec::with_capacity(3);
        for (i, down) in self.down.iter().enumerate() {
            for (br, bd) in self.rgb.stages[i].iter().zip(&self.depth.stages[i]) {
                r = br.forward(ctx, r)?;
                d = bd.forward(ctx, d)?;
            }
            skips.push((r, d));
            (r, d) = match down {
                Down::Mhw(block) => block.forward(ctx, r, d)?,
                Down::MaxPool => {
                    let c = ctx.graph.shape(r).c;
                    let flat = ctx
                        .graph
                        .constant(StructuringElement::flat(c, 2).to_tensor());
                    (
                        ctx.graph.dilate2d(r, flat, 2, 0)?,
                        ctx.graph.dilate2d(d, flat, 2, 0)?,
                    )
                }
            };
        }

        let x = ctx.graph.concat_channels(&[r, d])?;
        let x = self.fuse.forward(ctx, x)?;
        let mut x = self.aspp.forward(ctx, x)?;

        for (step, &(sr, sd)) in self.decoder.iter().zip(skips.iter().rev()) {
            let up = match step.up {
                Up::Morph { se } => {
                    let se = ctx.var(se);
                    ctx.graph.morph_upsample(x, se, 2)?
                }
                Up::Nearest => ctx.graph.upsample_nearest(x, 2)?,
            };
            let (gr, gd) = step.skip_gate.forward(ctx, sr, sd)?;
            let skip = ctx.graph.add(gr, gd)?;
            let cat = ctx.graph.concat_channels(&[up, skip])?;
            x = step.project.forward(ctx, cat)?;
        }
        self.head.forward(ctx, x)
    }

    /// Eval-mode logits for plain tensors.
    pub fn predict(&self, store: &mut ParamStore, rgb: &Tensor, depth: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(store, false);
        let r = ctx.graph.constant(rgb.clone());
        let d = ctx.graph.constant(depth.clone());
        let y = self.forward(&mut ctx, r, d)?;
        Ok(ctx.graph.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    pub(crate) fn small(mup: bool, mrelu: bool, mhw: bool) -> HaarNetConfig {
        HaarNetConfig {
            num_classes: 3,
            widths: [4, 6, 8],
            bottleneck: 8,
            aspp_rates: [1, 2],
            seed: 5,
            ..HaarNetConfig::default()
        }
        .with_switches(mup, mrelu, mhw)
    }

    #[test]
    fn parameter_count_matches_registration() {
        for bits in 0..8 {
            let cfg = small(bits & 1 != 0, bits & 2 != 0, bits & 4 != 0);
            let mut store = ParamStore::new();
            HaarNet::new(cfg.clone(), &mut store).unwrap();
            assert_eq!(store.num_parameters(), cfg.num_parameters(), "{cfg:?}");
        }
        let cfg = HaarNetConfig::default();
        let mut store = ParamStore::new();
        HaarNet::new(cfg.clone(), &mut store).unwrap();
        assert_eq!(store.num_parameters(), cfg.num_parameters());
    }

    #[test]
    fn output_shape_and_size_checks() {
        let cfg = small(true, true, true);
        let mut store = ParamStore::new();
        let net = HaarNet::new(cfg, &mut store).unwrap();
        let y = net
            .predict(
                &mut store,
                &Tensor::zeros(Shape::new(2, 3, 32, 24)),
                &Tensor::zeros(Shape::new(2, 1, 32, 24)),
            )
            .unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 32, 24));
        let bad = net.predict(
            &mut store,
            &Tensor::zeros(Shape::new(1, 3, 28, 32)),
            &Tensor::zeros(Shape::new(1, 1, 28, 32)),
        );
        assert!(matches!(bad, Err(Error::Shape(_))));
        let tiny = net.predict(
            &mut store,
            &Tensor::zeros(Shape::new(1, 3, 16, 16)),
            &Tensor::zeros(Shape::new(1, 1, 16, 16)),
        );
        assert!(matches!(tiny, Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_same_logits() {
        let cfg = small(true, true, true);
        let run = || {
            let mut store = ParamStore::new();
            let net = HaarNet::new(cfg.clone(), &mut store).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let rgb = Tensor::uniform(Shape::new(2, 3, 32, 32), 0.0, 1.0, &mut rng);
            let d = Tensor::uniform(Shape::new(2, 1, 32, 32), 0.0, 1.0, &mut rng);
            net.predict(&mut store, &rgb, &d).unwrap()
        };
        assert_eq!(run().data(), run().data());
    }
}
