//! Synthetic RGB-D segmentation scenes: random rectangles, disks and
//! triangles with per-class colours and depth-ordered occlusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Mean colour per class; class 0 is background.
pub const PALETTE: [[f32; 3]; 8] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.85],
    [0.90, 0.85, 0.15],
    [0.80, 0.20, 0.80],
    [0.15, 0.80, 0.85],
    [0.95, 0.55, 0.10],
];

pub const COLOUR_NOISE: f32 = 0.05;
pub const MIN_CLASS_PIXELS: usize = 16;
pub const MIN_SIZE: usize = 32;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disk { cx: f32, cy: f32, r: f32 },
    Triangle { p: [(f32, f32); 3] },
}

impl ShapeKind {
    /// Whether the centre of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
        match *self {
            ShapeKind::Rect { x0, y0, x1, y1 } => px >= x0 && px < x1 && py >= y0 && py < y1,
            ShapeKind::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Triangle { p } => {
                let edge = |a: (f32, f32), b: (f32, f32)| {
                    (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0)
                };
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlacedShape {
    pub kind: ShapeKind,
    pub class: u32,
    /// Distance from the camera; smaller is nearer.
    pub depth: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1, 3, H, W)` in `[0, 1]`.
    pub rgb: Tensor,
    /// `(1, 1, H, W)` in `[0, 1]`.
    pub depth: Tensor,
    pub labels: LabelMap,
    /// Shapes in placement order.
    pub shapes: Vec<PlacedShape>,
}

fn random_shape(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ShapeKind {
    let s = h.min(w) as f32;
    let (hf, wf) = (h as f32, w as f32);
    match rng.random_range(0..3) {
        0 => {
            let rw = rng.random_range(s / 8.0..s / 2.0);
            let rh = rng.random_range(s / 8.0..s / 2.0);
            let x0 = rng.random_range(0.0..wf - rw);
            let y0 = rng.random_range(0.0..hf - rh);
            ShapeKind::Rect {
                x0,
                y0,
                x1: x0 + rw,
                y1: y0 + rh,
            }
        }
        1 => {
            let r = rng.random_range(s / 16.0..s / 4.0);
            ShapeKind::Disk {
                cx: rng.random_range(r..wf - r),
                cy: rng.random_range(r..hf - r),
                r,
            }
        }
        _ => loop {
            let b = rng.random_range(s / 6.0..s / 2.0);
            let ox = rng.random_range(0.0..wf - b);
            let oy = rng.random_range(0.0..hf - b);
            let mut pt = || (ox + rng.random_range(0.0..b), oy + rng.random_range(0.0..b));
            let p = [pt(), pt(), pt()];
            let area = ((p[1].0 - p[0].0) * (p[2].1 - p[0].1)
                - (p[2].0 - p[0].0) * (p[1].1 - p[0].1))
                .abs()
                / 2.0;
            if area >= b * b / 8.0 {
                break ShapeKind::Triangle { p };
            }
        },
    }
}

/// Label of the nearest shape covering each pixel, 0 where none does.
fn rasterise(shapes: &[PlacedShape], h: usize, w: usize) -> (Vec<u32>, Vec<Option<usize>>) {
    let mut order: Vec<usize> = (0..shapes.len()).collect();
    // far to near, so nearer shapes overwrite
    order.sort_by(|&a, &b| shapes[b].depth.total_cmp(&shapes[a].depth));
    let mut labels = vec![0u32; h * w];
    let mut owner = vec![None; h * w];
    for &i in &order {
        for y in 0..h {
            for x in 0..w {
                if shapes[i].kind.contains(y, x) {
                    labels[y * w + x] = shapes[i].class;
                    owner[y * w + x] = Some(i);
                }
            }
        }
    }
    (labels, owner)
}

fn acceptable(labels: &[u32], k: usize) -> bool {
    let mut hist = vec![0usize; k];
    for &l in labels {
        hist[l as usize] += 1;
    }
    hist[0] > 0
        && hist[1..].iter().any(|&c| c > 0)
        && hist[1..].iter().all(|&c| c == 0 || c >= MIN_CLASS_PIXELS)
}

/// Deterministic scene for `seed` with `k` classes (background included).
pub fn synth_scene(seed: u64, h: usize, w: usize, k: usize) -> Result<Scene> {
    if k < 2 {
        return Err(Error::config(format!("need at least 2 classes, got {k}")));
    }
    if k > PALETTE.len() {
        return Err(Error::config(format!(
            "{k} classes requested but the colour palette holds {}",
            PALETTE.len()
        )));
    }
    if h < MIN_SIZE || w < MIN_SIZE {
        return Err(Error::config(format!(
            "scenes must be at least {MIN_SIZE}x{MIN_SIZE}, got {h}x{w}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        let count = rng.random_range(3..=7);
        let mut shapes: Vec<PlacedShape> = Vec::with_capacity(count);
        while shapes.len() < count {
            let depth = rng.random_range(0.05f32..0.5);
            if shapes.iter().any(|s| (s.depth - depth).abs() < 0.01) {
                continue;
            }
            shapes.push(PlacedShape {
                kind: random_shape(&mut rng, h, w),
                class: rng.random_range(1..k as u32),
                depth,
            });
        }
        let (labels, owner) = rasterise(&shapes, h, w);
        if !acceptable(&labels, k) {
            continue;
        }
        return Ok(paint(&mut rng, shapes, labels, &owner, h, w));
    }
    Err(Error::config(format!(
        "could not place shapes for seed {seed}"
    )))
}

fn paint(
    rng: &mut ChaCha8Rng,
    shapes: Vec<PlacedShape>,
    labels: Vec<u32>,
    owner: &[Option<usize>],
    h: usize,
    w: usize,
) -> Scene {
    let tint = |class: u32, rng: &mut ChaCha8Rng| {
        let base = PALETTE[class as usize];
        [0, 1, 2].map(|c| base[c] + rng.random_range(-0.05f32..0.05))
    };
    let background = tint(0, rng);
    let tints: Vec<[f32; 3]> = shapes.iter().map(|s| tint(s.class, rng)).collect();

    let d0 = rng.random_range(0.7f32..0.8);
    let gx = rng.random_range(-0.1f32..0.1);
    let gy = rng.random_range(-0.1f32..0.1);

    let noise = Normal::new(0.0f32, COLOUR_NOISE).expect("valid sigma");
    let plane = h * w;
    let mut rgb = vec![0.0f32; 3 * plane];
    let mut depth = vec![0.0f32; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (colour, d) = match owner[i] {
                Some(s) => (tints[s], shapes[s].depth),
                None => (
                    background,
                    d0 + gx * (x as f32 / w as f32 - 0.5) + gy * (y as f32 / h as f32 - 0.5),
                ),
            };
            for c in 0..3 {
                rgb[c * plane + i] = (colour[c] + noise.sample(rng)).clamp(0.0, 1.0);
            }
            depth[i] = d;
        }
    }
    Scene {
        rgb: Tensor::from_parts(Shape::new(1, 3, h, w), rgb),
        depth: Tensor::from_parts(Shape::new(1, 1, h, w), depth),
        labels: LabelMap::new(h, w, labels).expect("consistent size"),
        shapes,
    }
}
