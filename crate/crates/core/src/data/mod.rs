//! Synthetic scenes, label maps, normalization and on-disk layouts.

pub mod normalize;
pub mod pnm;
pub mod synth;
pub mod tensorfile;

use std::path::{Path, PathBuf};

pub use normalize::{normalize, normalize_depth, ChannelStats, STD_FLOOR};
pub use pnm::{decode_pnm, encode_pnm, load_pnm, Raster};
pub use synth::{synth_scene, PlacedShape, Scene, ShapeKind, PALETTE};
pub use tensorfile::{load_entries, load_tensor, save_entries, save_tensor, NdArray};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Integer class ids laid out `(N, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    n: usize,
    h: usize,
    w: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        Self::batched(1, h, w, data)
    }

    pub fn batched(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape(format!(
                "label map {n}x{h}x{w} needs {} entries, got {}",
                n * h * w,
                data.len()
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn batch(&self) -> usize {
        self.n
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u32 {
        self.data[(n * self.h + y) * self.w + x]
    }

    /// Single image `i` of the batch.
    pub fn image(&self, i: usize) -> &[u32] {
        &self.data[i * self.h * self.w..(i + 1) * self.h * self.w]
    }

    /// As a `(N, 1, H, W)` float tensor (exact for ids below 2^24).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(
            Shape::new(self.n, 1, self.h, self.w),
            self.data.iter().map(|&l| l as f32).collect(),
        )
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.c != 1 {
            return Err(Error::shape(format!(
                "label tensor must have one channel, got {s}"
            )));
        }
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < 16_777_216.0 {
                    Ok(v as u32)
                } else {
                    Err(Error::contract(format!(
                        "label value {v} is not a class id"
                    )))
                }
            })
            .collect::<Result<_>>()?;
        Self::batched(s.n, s.h, s.w, data)
    }

    pub fn stack(items: &[&LabelMap]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("cannot stack zero label maps"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if (m.h, m.w) != (first.h, first.w) {
                return Err(Error::shape("label maps differ in size"));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        Self::batched(n, first.h, first.w, data)
    }
}

/// One scene as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seed: u64,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub labels: LabelMap,
}

pub fn scene_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("scenes").join(seed.to_string())
}

pub fn write_scene(root: &Path, seed: u64, scene: &Scene) -> Result<()> {
    let dir = scene_dir(root, seed);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    save_tensor(dir.join("rgb.mten"), &scene.rgb)?;
    save_tensor(dir.join("depth.mten"), &scene.depth)?;
    save_tensor(dir.join("labels.mten"), &scene.labels.to_tensor())
}

pub fn read_scene(root: &Path, seed: u64) -> Result<Sample> {
    let dir = scene_dir(root, seed);
    let rgb = load_tensor(dir.join("rgb.mten"))?;
    let depth = load_tensor(dir.join("depth.mten"))?;
    let labels = LabelMap::from_tensor(&load_tensor(dir.join("labels.mten"))?)?;
    let (s, d) = (rgb.shape(), depth.shape());
    if s.c != 3 || d.c != 1 || (s.h, s.w) != (d.h, d.w) || (s.h, s.w) != (labels.h, labels.w) {
        return Err(Error::shape(format!(
            "scene {seed}: rgb {s}, depth {d} and labels disagree"
        )));
    }
    Ok(Sample {
        seed,
        rgb,
        depth,
        labels,
    })
}

/// Generates scenes `seed .. seed + count` in parallel and writes them
/// under `root/scenes/`.
pub fn generate_dataset(
    root: &Path,
    count: usize,
    h: usize,
    w: usize,
    k: usize,
    seed: u64,
) -> Result<()> {
    let scenes = generate_scenes(count, h, w, k, seed)?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(root, seed + i as u64, s)?;
    }
    Ok(())
}

pub fn generate_scenes(
    count: usize,
    h: usize,
    w: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<Scene>> {
    crate::par::map_indices(count, |i| synth_scene(seed + i as u64, h, w, k))
        .into_iter()
        .collect()
}

/// All scenes under `root/scenes/`, ordered by seed.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    let dir = root.join("scenes");
    let entries = std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut seeds = Vec::new();
    for e in entries {
        let e = e.map_err(|e| Error::io(&dir, e))?;
        if let Some(seed) = e.file_name().to_str().and_then(|s| s.parse::<u64>().ok()) {
            seeds.push(seed);
        }
    }
    seeds.sort_unstable();
    seeds.into_iter().map(|s| read_scene(root, s)).collect()
}

impl From<(u64, Scene)> for Sample {
    fn from((seed, s): (u64, Scene)) -> Self {
        Sample {
            seed,
            rgb: s.rgb,
            depth: s.depth,
            labels: s.labels,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(dir.path(), 3, 32, 32, 4, 10).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[1].seed, 11);
        let s = synth_scene(11, 32, 32, 4).unwrap();
        assert_eq!(loaded[1], Sample::from((11, s)));
    }

    #[test]
    fn label_tensor_round_trip() {
        let m = LabelMap::batched(2, 1, 2, vec![0, 3, 1, 2]).unwrap();
        assert_eq!(LabelMap::from_tensor(&m.to_tensor()).unwrap(), m);
        assert_eq!(m.get(1, 0, 1), 2);
        assert!(LabelMap::from_tensor(&Tensor::row(&[0.5])).is_err());
    }
}
