//! Confusion-matrix metrics and boundary F1.

use crate::data::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub boundary_f1: f64,
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// `confusion[gt * K + pred]`.
    pub confusion: Vec<u64>,
    pub num_classes: usize,
}

/// `max(1, ceil(0.0075 * diagonal))` pixels.
pub fn default_boundary_tol(h: usize, w: usize) -> f64 {
    (0.0075 * ((h * h + w * w) as f64).sqrt()).ceil().max(1.0)
}

/// Pixels of class `c` with a 4-neighbour of another label.
fn boundary(labels: &[u32], h: usize, w: usize, c: u32) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l != c {
                continue;
            }
            let differs = (y > 0 && labels[(y - 1) * w + x] != l)
                || (y + 1 < h && labels[(y + 1) * w + x] != l)
                || (x > 0 && labels[y * w + x - 1] != l)
                || (x + 1 < w && labels[y * w + x + 1] != l);
            if differs {
                out.push((y, x));
            }
        }
    }
    out
}

/// Number of points of `from` within Euclidean distance `tol` of some
/// point of `to`.
fn matched(from: &[(usize, usize)], to_mask: &[bool], h: usize, w: usize, tol: f64) -> u64 {
    let r = tol.floor() as isize;
    let tol2 = tol * tol;
    let mut n = 0;
    for &(y, x) in from {
        let hit = (-r..=r).any(|dy| {
            (-r..=r).any(|dx| {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                yy >= 0
                    && xx >= 0
                    && (yy as usize) < h
                    && (xx as usize) < w
                    && ((dy * dy + dx * dx) as f64) <= tol2
                    && to_mask[yy as usize * w + xx as usize]
            })
        });
        n += hit as u64;
    }
    n
}

/// Streaming accumulator; counts from several images merge by addition.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricAccumulator {
    k: usize,
    tol: f64,
    confusion: Vec<u64>,
    /// Per class: matched predicted, predicted, matched ground truth,
    /// ground truth boundary pixels.
    boundary: Vec<[u64; 4]>,
    present: Vec<bool>,
}

impl MetricAccumulator {
    pub fn new(k: usize, tol: f64) -> Result<Self> {
        if tol < 1.0 {
            return Err(Error::contract(format!(
                "boundary tolerance {tol} is below one pixel"
            )));
        }
        Ok(MetricAccumulator {
            k,
            tol,
            confusion: vec![0; k * k],
            boundary: vec![[0; 4]; k],
            present: vec![false; k],
        })
    }

    /// Adds every image of a batch.
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        let (n, h, w) = (gt.batch(), gt.height(), gt.width());
        if (pred.batch(), pred.height(), pred.width()) != (n, h, w) {
            return Err(Error::shape(format!(
                "prediction {}x{}x{} and ground truth {n}x{h}x{w} differ",
                pred.batch(),
                pred.height(),
                pred.width()
            )));
        }
        if let Some(&l) = pred
            .data()
            .iter()
            .chain(gt.data())
            .find(|&&l| l as usize >= self.k)
        {
            return Err(Error::contract(format!(
                "label {l} outside [0, {})",
                self.k
            )));
        }
        for i in 0..n {
            self.add_image(pred.image(i), gt.image(i), h, w);
        }
        Ok(())
    }

    fn add_image(&mut self, pred: &[u32], gt: &[u32], h: usize, w: usize) {
        let k = self.k;
        for (&p, &g) in pred.iter().zip(gt) {
            self.confusion[g as usize * k + p as usize] += 1;
            self.present[g as usize] = true;
        }
        for c in 0..k {
            let pb = boundary(pred, h, w, c as u32);
            let gb = boundary(gt, h, w, c as u32);
            let mut pmask = vec![false; h * w];
            let mut gmask = vec![false; h * w];
            pb.iter().for_each(|&(y, x)| pmask[y * w + x] = true);
            gb.iter().for_each(|&(y, x)| gmask[y * w + x] = true);
            let b = &mut self.boundary[c];
            b[0] += matched(&pb, &gmask, h, w, self.tol);
            b[1] += pb.len() as u64;
            b[2] += matched(&gb, &pmask, h, w, self.tol);
            b[3] += gb.len() as u64;
        }
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
        for (a, b) in self.boundary.iter_mut().zip(&other.boundary) {
            for j in 0..4 {
                a[j] += b[j];
            }
        }
        for (a, b) in self.present.iter_mut().zip(&other.present) {
            *a |= b;
        }
    }

    pub fn report(&self) -> MetricReport {
        let k = self.k;
        let total: u64 = self.confusion.iter().sum();
        let trace: u64 = (0..k).map(|c| self.confusion[c * k + c]).sum();
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.confusion[c * k + c];
                let gt: u64 = (0..k).map(|j| self.confusion[c * k + j]).sum();
                let pred: u64 = (0..k).map(|j| self.confusion[j * k + c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let ious: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let f1s: Vec<f64> = (0..k)
            .filter(|&c| self.present[c])
            .map(|c| class_f1(self.boundary[c]))
            .collect();
        MetricReport {
            miou: mean(&ious),
            pixel_accuracy: if total == 0 {
                0.0
            } else {
                trace as f64 / total as f64
            },
            boundary_f1: mean(&f1s),
            per_class_iou,
            confusion: self.confusion.clone(),
            num_classes: k,
        }
    }
}

/// F1 from boundary counts; 1 when neither map has a boundary of the
/// class, 0 when only one has.
fn class_f1([mp, np, mg, ng]: [u64; 4]) -> f64 {
    match (np, ng) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let p = mp as f64 / np as f64;
            let r = mg as f64 / ng as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        }
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn metrics(
    pred: &LabelMap,
    gt: &LabelMap,
    k: usize,
    boundary_tol: f64,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(k, boundary_tol)?;
    acc.add(pred, gt)?;
    Ok(acc.report())
}
