//! SGD with Nesterov momentum and the polynomial learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// One Nesterov step in place: `v = mu v + g; p = p - lr (g + mu v)`.
pub fn sgd_nesterov_step(
    param: &mut [f32],
    grad: &[f32],
    velocity: &mut [f32],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::shape(format!(
            "parameter ({}), gradient ({}) and velocity ({}) lengths differ",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * (g + momentum * *v);
    }
    Ok(())
}

/// `lr0 (1 - epoch / epochs)^power`.
pub fn poly_lr(epoch: usize, lr0: f64, epochs: usize, power: f64) -> Result<f64> {
    if epoch > epochs {
        return Err(Error::contract(format!(
            "epoch {epoch} is past the schedule end {epochs}"
        )));
    }
    Ok(lr0 * (1.0 - epoch as f64 / epochs as f64).powf(power))
}

/// Velocity buffers for every trainable parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Nesterov {
    pub momentum: f32,
    velocity: Vec<(ParamId, Tensor)>,
}

impl Nesterov {
    pub fn new(store: &ParamStore, momentum: f32) -> Self {
        let velocity = store
            .trainable_ids()
            .map(|id| (id, Tensor::zeros(store.get(id).shape())))
            .collect();
        Nesterov { momentum, velocity }
    }

    /// Applies one step. A parameter without gradient is treated as having a
    /// zero gradient.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[(ParamId, Option<Tensor>)],
        lr: f32,
    ) -> Result<()> {
        for (id, v) in self.velocity.iter_mut() {
            let g = grads
                .iter()
                .find(|(gid, _)| gid == id)
                .and_then(|(_, g)| g.as_ref());
            let zero;
            let g = match g {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; v.numel()];
                    &zero
                }
            };
            sgd_nesterov_step(
                store.get_mut(*id).data_mut(),
                g,
                v.data_mut(),
                lr,
                self.momentum,
            )?;
        }
        Ok(())
    }

    pub fn velocities(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.velocity.iter().map(|(id, t)| (*id, t))
    }

    pub fn set_velocity(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = self
            .velocity
            .iter_mut()
            .find(|(vid, _)| *vid == id)
            .ok_or_else(|| Error::contract("no velocity for a non-trainable parameter"))?;
        if slot.1.shape() != value.shape() {
            return Err(Error::shape(format!(
                "velocity {} does not match {}",
                value.shape(),
                slot.1.shape()
            )));
        }
        slot.1 = value;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = [1.0f32, 2.0];
        let mut v = [0.0f32; 2];
        sgd_nesterov_step(&mut p, &[0.5, -1.0], &mut v, 0.1, 0.0).unwrap();
        assert_eq!(p, [1.0 - 0.1 * 0.5, 2.0 + 0.1]);
    }

    #[test]
    fn first_step_scales_by_one_plus_momentum() {
        let mut p = [1.0f32];
        let mut v = [0.0f32];
        sgd_nesterov_step(&mut p, &[2.0], &mut v, 0.25, 0.5).unwrap();
        assert_eq!(p[0], 1.0 - 0.25 * 1.5 * 2.0);
        assert_eq!(v[0], 2.0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(poly_lr(0, 5e-3, 300, 0.9).unwrap(), 5e-3);
        assert_eq!(poly_lr(300, 5e-3, 300, 0.9).unwrap(), 0.0);
        assert!(poly_lr(301, 5e-3, 300, 0.9).is_err());
    }

    #[test]
    fn length_mismatch() {
        assert!(sgd_nesterov_step(&mut [0.0], &[0.0, 1.0], &mut [0.0], 0.1, 0.9).is_err());
    }
}
