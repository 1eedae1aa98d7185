//! Per-channel standardization with training-split statistics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STD_FLOOR: f32 = 1e-6;

/// Per-channel mean and (population) standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl ChannelStats {
    /// Accumulates in f64 over every pixel of every image.
    pub fn compute<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Self> {
        let mut sum = Vec::<f64>::new();
        let mut sq = Vec::<f64>::new();
        let mut count = 0usize;
        for t in images {
            let s = t.shape();
            if sum.is_empty() {
                sum = vec![0.0; s.c];
                sq = vec![0.0; s.c];
            } else if s.c != sum.len() {
                return Err(Error::shape(format!(
                    "channel count {} differs from {}",
                    s.c,
                    sum.len()
                )));
            }
            for n in 0..s.n {
                for c in 0..s.c {
                    for &v in t.plane(n, c) {
                        sum[c] += v as f64;
                        sq[c] += (v as f64) * (v as f64);
                    }
                }
            }
            count += s.n * s.plane();
        }
        if count == 0 {
            return Err(Error::contract("statistics need at least one pixel"));
        }
        let m = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / m).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, mu)| ((q / m - mu * mu).max(0.0)).sqrt() as f32)
            .collect();
        Ok(ChannelStats {
            mean: mean.into_iter().map(|v| v as f32).collect(),
            std,
        })
    }
}

/// `(x - mean) / max(std, STD_FLOOR)` per channel.
pub fn normalize(x: &Tensor, stats: &ChannelStats) -> Result<Tensor> {
    let s = x.shape();
    if s.c != stats.mean.len() || s.c != stats.std.len() {
        return Err(Error::shape(format!(
            "{} channels but statistics for {}",
            s.c,
            stats.mean.len()
        )));
    }
    let mut out = x.clone();
    let plane = s.plane();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let c = i % s.c;
        let mut std = stats.std[c];
        if std < STD_FLOOR {
            log::warn!("channel {c} has standard deviation {std}; using {STD_FLOOR}");
            std = STD_FLOOR;
        }
        let mean = stats.mean[c];
        for v in chunk {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}

/// Depth is used as-is, clamped to `[0, 1]`.
pub fn normalize_depth(d: &Tensor) -> Tensor {
    d.map(|v| v.clamp(0.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standardizes_training_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<Tensor> = (0..4)
            .map(|_| Tensor::uniform(Shape::new(1, 3, 8, 8), 0.0, 1.0, &mut rng))
            .collect();
        let stats = ChannelStats::compute(&imgs).unwrap();
        let normed: Vec<Tensor> = imgs.iter().map(|t| normalize(t, &stats).unwrap()).collect();
        let after = ChannelStats::compute(&normed).unwrap();
        for c in 0..3 {
            assert!(after.mean[c].abs() < 1e-5);
            assert!((after.std[c] - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn constant_channel_floors() {
        let t = Tensor::full(Shape::new(1, 1, 2, 2), 0.3);
        let stats = ChannelStats::compute([&t]).unwrap();
        assert_eq!(stats.std[0], 0.0);
        assert!(normalize(&t, &stats)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }
}
