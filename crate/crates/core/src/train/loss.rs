//! Pixel-wise softmax cross-entropy.

use crate::autograd::{Graph, Var};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Graph {
    /// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
    /// `logits` is `(N, K, H, W)`, `labels` is `(N, H, W)`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &LabelMap,
        ignore_index: Option<u32>,
    ) -> Result<Var> {
        let s = self.shape(logits);
        if (labels.batch(), labels.height(), labels.width()) != (s.n, s.h, s.w) {
            return Err(Error::shape(format!(
                "labels {}x{}x{} do not match logits {s}",
                labels.batch(),
                labels.height(),
                labels.width()
            )));
        }
        let plane = s.plane();
        let x = self.value(logits).data();
        // softmax probabilities, kept for the backward pass
        let mut prob = vec![0.0f32; s.numel()];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for n in 0..s.n {
            let base = n * s.c * plane;
            for p in 0..plane {
                let label = labels.data()[n * plane + p];
                if Some(label) == ignore_index {
                    continue;
                }
                if label as usize >= s.c {
                    return Err(Error::contract(format!(
                        "label {label} outside [0, {}) at image {n}, pixel {p}",
                        s.c
                    )));
                }
                let at = |c: usize| base + c * plane + p;
                let m = (0..s.c).map(|c| x[at(c)]).fold(f32::NEG_INFINITY, f32::max);
                let z: f64 = (0..s.c).map(|c| ((x[at(c)] - m) as f64).exp()).sum();
                for c in 0..s.c {
                    prob[at(c)] = (((x[at(c)] - m) as f64).exp() / z) as f32;
                }
                total += z.ln() - (x[at(label as usize)] - m) as f64;
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("every pixel is ignored"));
        }
        let value = Tensor::scalar((total / count as f64) as f32);
        let labels = labels.clone();
        Ok(self.record(value, &[logits], move |ctx| {
            let scale = ctx.grad.data()[0] / count as f32;
            let mut g = vec![0.0f32; s.numel()];
            for n in 0..s.n {
                let base = n * s.c * plane;
                for p in 0..plane {
                    let label = labels.data()[n * plane + p];
                    if Some(label) == ignore_index {
                        continue;
                    }
                    for c in 0..s.c {
                        let i = base + c * plane + p;
                        let onehot = if c == label as usize { 1.0 } else { 0.0 };
                        g[i] = (prob[i] - onehot) * scale;
                    }
                }
            }
            vec![Some(Tensor::from_parts(s, g))]
        }))
    }
}

/// Cross-entropy of plain tensors.
pub fn cross_entropy(logits: &Tensor, labels: &LabelMap, ignore_index: Option<u32>) -> Result<f32> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.cross_entropy(x, labels, ignore_index)?;
    Ok(g.value(y).data()[0])
}
