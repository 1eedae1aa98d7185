//! Straight-loop f64 forward passes of the smooth operators. The suite takes
//! its numeric gradients from these, clear of f32 rounding.

use crate::data::LabelMap;
use crate::nn::{ConvSpec, BN_EPS};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug)]
pub struct Map {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Map {
    pub fn zeros(shape: Shape) -> Self {
        Map {
            shape,
            data: vec![0.0; shape.numel()],
        }
    }

    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let s = self.shape;
        ((n * s.c + c) * s.h + h) * s.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }
}

impl From<&Tensor> for Map {
    fn from(t: &Tensor) -> Self {
        Map {
            shape: t.shape(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

/// `sum_i <w_i, y_i>`.
pub fn weighted(ys: &[Map], ws: &[Tensor]) -> f64 {
    ys.iter()
        .zip(ws)
        .map(|(y, w)| {
            y.data
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a * b as f64)
                .sum::<f64>()
        })
        .sum()
}

/// Cross-correlation with zero padding.
pub fn conv(x: &Map, weight: &Map, bias: &[f64], spec: ConvSpec) -> Map {
    let (s, k) = (x.shape, weight.shape.h);
    let reach = spec.dilation * (k - 1) + 1;
    let oh = (s.h + 2 * spec.padding - reach) / spec.stride + 1;
    let ow = (s.w + 2 * spec.padding - reach) / spec.stride + 1;
    let cout = weight.shape.n;
    let mut y = Map::zeros(Shape::new(s.n, cout, oh, ow));
    for n in 0..s.n {
        for o in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = bias[o];
                    for c in 0..s.c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let yy = (i * spec.stride + ky * spec.dilation) as isize
                                    - spec.padding as isize;
                                let xx = (j * spec.stride + kx * spec.dilation) as isize
                                    - spec.padding as isize;
                                if yy < 0 || xx < 0 || yy as usize >= s.h || xx as usize >= s.w {
                                    continue;
                                }
                                acc +=
                                    weight.at(o, c, ky, kx) * x.at(n, c, yy as usize, xx as usize);
                            }
                        }
                    }
                    let at = y.idx(n, o, i, j);
                    y.data[at] = acc;
                }
            }
        }
    }
    y
}

/// Training-mode batch normalisation with the biased batch variance.
pub fn batchnorm(x: &Map, gamma: &[f64], beta: &[f64]) -> Map {
    let s = x.shape;
    let count = (s.n * s.h * s.w) as f64;
    let mut y = x.clone();
    for c in 0..s.c {
        let vals = || {
            (0..s.n).flat_map(move |n| (0..s.h).flat_map(move |h| (0..s.w).map(move |w| (n, h, w))))
        };
        let mean = vals().map(|(n, h, w)| x.at(n, c, h, w)).sum::<f64>() / count;
        let var = vals()
            .map(|(n, h, w)| (x.at(n, c, h, w) - mean).powi(2))
            .sum::<f64>()
            / count;
        let inv = 1.0 / (var + BN_EPS as f64).sqrt();
        for (n, h, w) in vals() {
            let at = y.idx(n, c, h, w);
            y.data[at] = gamma[c] * (x.data[at] - mean) * inv + beta[c];
        }
    }
    y
}

/// Morphological activation with the delta element: `max(h0_c, x)`.
pub fn offset_max(x: &Map, h0: &[f64]) -> Map {
    let s = x.shape;
    let mut y = x.clone();
    for (i, v) in y.data.iter_mut().enumerate() {
        *v = v.max(h0[(i / s.plane()) % s.c]);
    }
    y
}

pub fn sigmoid(x: &Map) -> Map {
    Map {
        shape: x.shape,
        data: x.data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect(),
    }
}

pub fn mul(a: &Map, b: &Map) -> Map {
    Map {
        shape: a.shape,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

pub fn concat(parts: &[Map]) -> Map {
    let s = parts[0].shape;
    let c: usize = parts.iter().map(|p| p.shape.c).sum();
    let mut data = Vec::with_capacity(s.n * c * s.plane());
    for n in 0..s.n {
        for p in parts {
            let len = p.shape.c * s.plane();
            data.extend_from_slice(&p.data[n * len..(n + 1) * len]);
        }
    }
    Map {
        shape: Shape::new(s.n, c, s.h, s.w),
        data,
    }
}

/// Spatial mean, broadcast back to `h x w`.
pub fn pooled(x: &Map) -> (Map, impl Fn(&Map) -> Map) {
    let s = x.shape;
    let mut m = Map::zeros(Shape::new(s.n, s.c, 1, 1));
    for (i, plane) in x.data.chunks(s.plane()).enumerate() {
        m.data[i] = plane.iter().sum::<f64>() / s.plane() as f64;
    }
    let expand = move |p: &Map| Map {
        shape: Shape::new(s.n, p.shape.c, s.h, s.w),
        data: p
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, s.plane()))
            .collect(),
    };
    (m, expand)
}

/// One Haar level of an even-sized map: `(max approximation, details)`
/// with details at channel `3c + {vertical, horizontal, diagonal}`.
pub fn haar(x: &Map) -> (Map, Map) {
    let s = x.shape;
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut approx = Map::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut details = Map::zeros(Shape::new(s.n, 3 * s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..oh {
                for j in 0..ow {
                    let a = x.at(n, c, 2 * i, 2 * j);
                    let b = x.at(n, c, 2 * i, 2 * j + 1);
                    let cc = x.at(n, c, 2 * i + 1, 2 * j);
                    let d = x.at(n, c, 2 * i + 1, 2 * j + 1);
                    let at = approx.idx(n, c, i, j);
                    approx.data[at] = a.max(b).max(cc).max(d);
                    for (t, v) in [(cc + d) - (a + b), (b + d) - (a + cc), (a - b) - (cc - d)]
                        .into_iter()
                        .enumerate()
                    {
                        let at = details.idx(n, 3 * c + t, i, j);
                        details.data[at] = v;
                    }
                }
            }
        }
    }
    (approx, details)
}

/// Mean of `-log softmax(logits)[label]` over every pixel.
pub fn cross_entropy(logits: &Map, labels: &LabelMap) -> f64 {
    let s = logits.shape;
    let mut total = 0.0;
    for n in 0..s.n {
        for h in 0..s.h {
            for w in 0..s.w {
                let m = (0..s.c)
                    .map(|c| logits.at(n, c, h, w))
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..s.c).map(|c| (logits.at(n, c, h, w) - m).exp()).sum();
                let label = labels.data()[(n * s.h + h) * s.w + w] as usize;
                total += z.ln() + m - logits.at(n, label, h, w);
            }
        }
    }
    total / (s.n * s.h * s.w) as f64
}
