//! Linear building blocks and the miniature dual-stream HaarNet.

mod activation;
mod aspp;
mod batchnorm;
mod block;
mod conv;
mod haarnet;
mod params;
mod se;

pub use activation::{Activation, ActivationKernel, ActivationKind};
pub use aspp::Aspp;
pub use batchnorm::{BatchNorm2d, BatchStats, BN_EPS, BN_MOMENTUM};
pub use block::ConvBnAct;
pub use conv::{conv2d, Conv2d, ConvSpec};
pub use haarnet::{Down, HaarNet, HaarNetConfig, Up};
pub use params::{Ctx, ParamId, ParamStore};
pub use se::{SeBranch, SeGate};
