use super::params::{Ctx, ParamId, ParamStore};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Per-channel batch statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
    /// Number of values per channel.
    pub count: usize,
}

fn channel_stats(x: &Tensor) -> BatchStats {
    let s = x.shape();
    let p = s.plane();
    let count = s.n * p;
    let mut mean = vec![0.0f32; s.c];
    let mut var = vec![0.0f32; s.c];
    for c in 0..s.c {
        let mut sum = 0.0f64;
        for n in 0..s.n {
            sum += x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = sum / count as f64;
        let mut sq = 0.0f64;
        for n in 0..s.n {
            sq += x
                .plane(n, c)
                .iter()
                .map(|&v| (v as f64 - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (sq / count as f64) as f32;
    }
    BatchStats { mean, var, count }
}

impl Graph {
    /// Batch normalisation with batch statistics. Returns the output and the
    /// statistics used.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let s = self.shape(x);
        check_affine(s, self.shape(gamma), self.shape(beta))?;
        if s.n < 2 {
            return Err(Error::contract(
                "batch norm in train mode needs a batch of at least 2",
            ));
        }
        let stats = channel_stats(self.value(x));
        let inv_std: Vec<f32> = stats
            .var
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect();
        let xhat = normalise(self.value(x), &stats.mean, &inv_std);
        let value = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        let v = self.record(value, &[x, gamma, beta], move |ctx| {
            let g = ctx.grad;
            let gamma = ctx.inputs[1].data();
            let p = s.plane();
            let count = (s.n * p) as f64;
            let mut gx = ctx.needs[0].then(|| vec![0.0f32; s.numel()]);
            let mut dgamma = vec![0.0f32; s.c];
            let mut dbeta = vec![0.0f32; s.c];
            for c in 0..s.c {
                let (mut sg, mut sgx) = (0.0f64, 0.0f64);
                for n in 0..s.n {
                    let off = (n * s.c + c) * p;
                    for i in off..off + p {
                        sg += g.data()[i] as f64;
                        sgx += g.data()[i] as f64 * xhat.data()[i] as f64;
                    }
                }
                dgamma[c] = sgx as f32;
                dbeta[c] = sg as f32;
                if let Some(gx) = gx.as_mut() {
                    let mg = (sg / count) as f32;
                    let mgx = (sgx / count) as f32;
                    let scale = gamma[c] * inv_std[c];
                    for n in 0..s.n {
                        let off = (n * s.c + c) * p;
                        for i in off..off + p {
                            gx[i] = scale * (g.data()[i] - mg - xhat.data()[i] * mgx);
                        }
                    }
                }
            }
            let cs = Shape::new(1, s.c, 1, 1);
            vec![
                gx.map(|d| Tensor::from_parts(s, d)),
                Some(Tensor::from_parts(cs, dgamma)),
                Some(Tensor::from_parts(cs, dbeta)),
            ]
        });
        Ok((v, stats))
    }

    /// Batch normalisation with fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        var: &[f32],
    ) -> Result<Var> {
        let s = self.shape(x);
        check_affine(s, self.shape(gamma), self.shape(beta))?;
        if mean.len() != s.c || var.len() != s.c {
            return Err(Error::shape(
                "running statistics do not match channel count",
            ));
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xhat = normalise(self.value(x), mean, &inv_std);
        let value = affine(&xhat, self.value(gamma).data(), self.value(beta).data());
        Ok(self.record(value, &[x, gamma, beta], move |ctx| {
            let g = ctx.grad.data();
            let gamma = ctx.inputs[1].data();
            let p = s.plane();
            let mut gx = vec![0.0f32; s.numel()];
            let mut dgamma = vec![0.0f32; s.c];
            let mut dbeta = vec![0.0f32; s.c];
            for n in 0..s.n {
                for c in 0..s.c {
                    let off = (n * s.c + c) * p;
                    for i in off..off + p {
                        gx[i] = g[i] * gamma[c] * inv_std[c];
                        dgamma[c] += g[i] * xhat.data()[i];
                        dbeta[c] += g[i];
                    }
                }
            }
            let cs = Shape::new(1, s.c, 1, 1);
            vec![
                Some(Tensor::from_parts(s, gx)),
                Some(Tensor::from_parts(cs, dgamma)),
                Some(Tensor::from_parts(cs, dbeta)),
            ]
        }))
    }
}

fn check_affine(s: Shape, gamma: Shape, beta: Shape) -> Result<()> {
    let cs = Shape::new(1, s.c, 1, 1);
    if gamma != cs || beta != cs {
        return Err(Error::shape(format!(
            "batch norm scale/shift must be {cs}, got {gamma} and {beta}"
        )));
    }
    Ok(())
}

fn normalise(x: &Tensor, mean: &[f32], inv_std: &[f32]) -> Tensor {
    let s = x.shape();
    let p = s.plane();
    let mut out = x.data().to_vec();
    for (i, chunk) in out.chunks_mut(p).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = (*v - mean[c]) * inv_std[c];
        }
    }
    Tensor::from_parts(s, out)
}

fn affine(xhat: &Tensor, gamma: &[f32], beta: &[f32]) -> Tensor {
    let s = xhat.shape();
    let p = s.plane();
    let mut out = xhat.data().to_vec();
    for (i, chunk) in out.chunks_mut(p).enumerate() {
        let c = i % s.c;
        for v in chunk {
            *v = *v * gamma[c] + beta[c];
        }
    }
    Tensor::from_parts(s, out)
}

/// Batch-norm layer: learnable scale/shift plus running statistics kept as
/// buffers (`momentum` 0.1, unbiased running variance).
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let cs = Shape::new(1, channels, 1, 1);
        BatchNorm2d {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(cs), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(cs), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(cs), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(cs), false),
            channels,
        }
    }

    pub fn num_parameters(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward(&self, ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let gamma = ctx.var(self.gamma);
        let beta = ctx.var(self.beta);
        if ctx.is_train() {
            let (y, stats) = ctx.graph.batchnorm_train(x, gamma, beta)?;
            let unbias = if stats.count > 1 {
                stats.count as f32 / (stats.count - 1) as f32
            } else {
                1.0
            };
            let rm = ctx.store().get(self.running_mean).data();
            let rv = ctx.store().get(self.running_var).data();
            let cs = Shape::new(1, self.channels, 1, 1);
            let new_mean: Vec<f32> = rm
                .iter()
                .zip(&stats.mean)
                .map(|(r, m)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * m)
                .collect();
            let new_var: Vec<f32> = rv
                .iter()
                .zip(&stats.var)
                .map(|(r, v)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * v * unbias)
                .collect();
            ctx.update_buffer(self.running_mean, Tensor::from_parts(cs, new_mean));
            ctx.update_buffer(self.running_var, Tensor::from_parts(cs, new_var));
            Ok(y)
        } else {
            let rm = ctx.store().get(self.running_mean).data().to_vec();
            let rv = ctx.store().get(self.running_var).data().to_vec();
            ctx.graph.batchnorm_eval(x, gamma, beta, &rm, &rv)
        }
    }
}
