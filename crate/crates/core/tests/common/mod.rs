//! Nested-loop oracles shared by the integration tests.
#![allow(dead_code)]

use haarnet::data::LabelMap;
use haarnet::tensor::{Shape, Tensor};
use rand::Rng;

/// `g(o) = max_z f(o s + k - 1 - z - p) + h(z)` with `-inf` outside `f`.
pub fn dilate(f: &Tensor, h: &[f32], k: usize, stride: usize, pad: usize) -> Tensor {
    let s = f.shape();
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for zy in 0..k {
                        for zx in 0..k {
                            let py = (y * stride + k - 1 - zy) as isize - pad as isize;
                            let px = (x * stride + k - 1 - zx) as isize - pad as isize;
                            if py < 0 || px < 0 || py as usize >= s.h || px as usize >= s.w {
                                continue;
                            }
                            best = best.max(
                                f.at(n, c, py as usize, px as usize) + h[(c * k + zy) * k + zx],
                            );
                        }
                    }
                    out.set(n, c, y, x, best);
                }
            }
        }
    }
    out
}

/// `g(o) = min_z f(o s + z - p) - h(z)` with `+inf` outside `f`.
pub fn erode(f: &Tensor, h: &[f32], k: usize, stride: usize, pad: usize) -> Tensor {
    let s = f.shape();
    let oh = (s.h + 2 * pad - k) / stride + 1;
    let ow = (s.w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::INFINITY;
                    for zy in 0..k {
                        for zx in 0..k {
                            let py = (y * stride + zy) as isize - pad as isize;
                            let px = (x * stride + zx) as isize - pad as isize;
                            if py < 0 || px < 0 || py as usize >= s.h || px as usize >= s.w {
                                continue;
                            }
                            best = best.min(
                                f.at(n, c, py as usize, px as usize) - h[(c * k + zy) * k + zx],
                            );
                        }
                    }
                    out.set(n, c, y, x, best);
                }
            }
        }
    }
    out
}

/// Non-overlapping 2x2 max pooling.
pub fn maxpool2(f: &Tensor) -> Tensor {
    let s = f.shape();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, s.h / 2, s.w / 2));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h / 2 {
                for x in 0..s.w / 2 {
                    let v = [(0, 0), (0, 1), (1, 0), (1, 1)]
                        .iter()
                        .map(|&(dy, dx)| f.at(n, c, 2 * y + dy, 2 * x + dx))
                        .fold(f32::NEG_INFINITY, f32::max);
                    out.set(n, c, y, x, v);
                }
            }
        }
    }
    out
}

/// Haar subbands of an even-sized map: approx and `(v, h, d)` per channel.
pub fn haar(f: &Tensor) -> (Tensor, Tensor) {
    let s = f.shape();
    let (oh, ow) = (s.h / 2, s.w / 2);
    let mut approx = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut details = Tensor::zeros(Shape::new(s.n, 3 * s.c, oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..oh {
                for x in 0..ow {
                    let a = f.at(n, c, 2 * y, 2 * x);
                    let b = f.at(n, c, 2 * y, 2 * x + 1);
                    let cc = f.at(n, c, 2 * y + 1, 2 * x);
                    let d = f.at(n, c, 2 * y + 1, 2 * x + 1);
                    approx.set(n, c, y, x, a.max(b).max(cc).max(d));
                    details.set(n, 3 * c, y, x, (cc + d) - (a + b));
                    details.set(n, 3 * c + 1, y, x, (b + d) - (a + cc));
                    details.set(n, 3 * c + 2, y, x, (a - b) - (cc - d));
                }
            }
        }
    }
    (approx, details)
}

/// Brute-force metrics: `(miou, pixel accuracy, boundary F1)`.
pub fn metrics(
    pred: &[u32],
    gt: &[u32],
    h: usize,
    w: usize,
    k: usize,
    tol: f64,
) -> (f64, f64, f64) {
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let acc = correct as f64 / gt.len() as f64;
    let mut ious = Vec::new();
    for c in 0..k as u32 {
        let inter = pred
            .iter()
            .zip(gt)
            .filter(|&(&p, &g)| p == c && g == c)
            .count();
        let union = pred
            .iter()
            .zip(gt)
            .filter(|&(&p, &g)| p == c || g == c)
            .count();
        if union > 0 {
            ious.push(inter as f64 / union as f64);
        }
    }
    let miou = ious.iter().sum::<f64>() / ious.len() as f64;
    let mut f1s = Vec::new();
    for c in 0..k as u32 {
        if !gt.contains(&c) {
            continue;
        }
        let pb = boundary(pred, h, w, c);
        let gb = boundary(gt, h, w, c);
        let f1 = match (pb.is_empty(), gb.is_empty()) {
            (true, true) => 1.0,
            (true, false) | (false, true) => 0.0,
            _ => {
                let p = within(&pb, &gb, tol) as f64 / pb.len() as f64;
                let r = within(&gb, &pb, tol) as f64 / gb.len() as f64;
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            }
        };
        f1s.push(f1);
    }
    (miou, acc, f1s.iter().sum::<f64>() / f1s.len() as f64)
}

fn boundary(l: &[u32], h: usize, w: usize, c: u32) -> Vec<(f64, f64)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if l[y * w + x] != c {
                continue;
            }
            let nbrs = [
                (y as isize - 1, x as isize),
                (y as isize + 1, x as isize),
                (y as isize, x as isize - 1),
                (y as isize, x as isize + 1),
            ];
            if nbrs.iter().any(|&(yy, xx)| {
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && l[yy as usize * w + xx as usize] != c
            }) {
                out.push((y as f64, x as f64));
            }
        }
    }
    out
}

/// Points of `a` whose distance to the nearest point of `b` is at most `tol`.
fn within(a: &[(f64, f64)], b: &[(f64, f64)], tol: f64) -> usize {
    a.iter()
        .filter(|(y, x)| {
            let d = b
                .iter()
                .map(|(v, u)| ((y - v).powi(2) + (x - u).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min);
            d <= tol
        })
        .count()
}

/// Mean softmax cross-entropy in f64.
pub fn cross_entropy(logits: &Tensor, labels: &LabelMap) -> f64 {
    let s = logits.shape();
    let mut total = 0.0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let z: Vec<f64> = (0..s.c).map(|c| logits.at(n, c, y, x) as f64).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[labels.get(n, y, x) as usize];
            }
        }
    }
    total / (s.n * s.h * s.w) as f64
}

pub fn random_labels<R: Rng>(n: usize, h: usize, w: usize, k: u32, rng: &mut R) -> LabelMap {
    LabelMap::batched(
        n,
        h,
        w,
        (0..n * h * w).map(|_| rng.random_range(0..k)).collect(),
    )
    .unwrap()
}

/// Finite structuring-element values on a coarse grid.
pub fn random_se<R: Rng>(c: usize, k: usize, rng: &mut R) -> Vec<f32> {
    (0..c * k * k)
        .map(|_| rng.random_range(-8i32..=8) as f32 / 4.0)
        .collect()
}

pub fn random_shape<R: Rng>(rng: &mut R, k: usize) -> Shape {
    Shape::new(
        1,
        rng.random_range(1..=4),
        rng.random_range(k..=16),
        rng.random_range(k..=16),
    )
}
