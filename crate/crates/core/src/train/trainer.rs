//! Epoch loop, evaluation and checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{default_boundary_tol, poly_lr, MetricAccumulator, MetricReport, Nesterov};
use crate::data::{self, normalize, normalize_depth, ChannelStats, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::nn::{Ctx, HaarNet, HaarNetConfig, ParamStore};
use crate::tensor::Tensor;

pub const LOG_HEADER: &str = "epoch,lr,loss,miou,pixel_acc,boundary_f1";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub power: f64,
    pub batch_size: usize,
    /// Seeds batch shuffling; the network has its own seed in `net`.
    pub seed: u64,
    pub net: HaarNetConfig,
    /// Checkpoint every this many epochs; 0 disables.
    pub save_every: usize,
    pub ignore_index: Option<u32>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-3,
            epochs: 300,
            momentum: 0.9,
            power: 0.9,
            batch_size: 8,
            seed: 0,
            net: HaarNetConfig::default(),
            save_every: 0,
            ignore_index: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config(format!(
                "learning rate {} must be positive",
                self.lr0
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum {} must lie in [0, 1)",
                self.momentum
            )));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        self.net.validate()
    }

    pub fn lr(&self, epoch: usize) -> Result<f64> {
        poly_lr(epoch, self.lr0, self.epochs, self.power)
    }
}

/// Normalized tensors ready for batching.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub rgb: Vec<Tensor>,
    pub depth: Vec<Tensor>,
    pub labels: Vec<LabelMap>,
    pub stats: ChannelStats,
}

impl PreparedData {
    /// Normalizes with `stats`, or with statistics of `samples` themselves.
    pub fn new(samples: &[Sample], stats: Option<ChannelStats>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        let stats = match stats {
            Some(s) => s,
            None => ChannelStats::compute(samples.iter().map(|s| &s.rgb))?,
        };
        Ok(PreparedData {
            rgb: samples
                .iter()
                .map(|s| normalize(&s.rgb, &stats))
                .collect::<Result<_>>()?,
            depth: samples.iter().map(|s| normalize_depth(&s.depth)).collect(),
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, LabelMap)> {
        let rgb: Vec<&Tensor> = idx.iter().map(|&i| &self.rgb[i]).collect();
        let depth: Vec<&Tensor> = idx.iter().map(|&i| &self.depth[i]).collect();
        let labels: Vec<&LabelMap> = idx.iter().map(|&i| &self.labels[i]).collect();
        Ok((
            Tensor::stack_batch(&rgb)?,
            Tensor::stack_batch(&depth)?,
            LabelMap::stack(&labels)?,
        ))
    }
}

/// Shuffled batches for one epoch. A trailing batch of one sample joins the
/// previous batch, since batch norm cannot train on a single sample.
pub fn batch_plan(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// First-maximum class per pixel of `(N, K, H, W)` logits.
pub fn argmax_labels(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let plane = s.plane();
    let mut out = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = logits.data()[n * s.c * plane + p];
            for c in 1..s.c {
                let v = logits.data()[(n * s.c + c) * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            out.push(best as u32);
        }
    }
    LabelMap::batched(s.n, s.h, s.w, out).expect("sizes agree")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based index of the finished epoch.
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub report: MetricReport,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:?},{:?},{:?},{:?},{:?}",
            self.epoch,
            self.lr,
            self.loss,
            self.report.miou,
            self.report.pixel_accuracy,
            self.report.boundary_f1
        )
    }
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: HaarNet,
    pub store: ParamStore,
    pub opt: Nesterov,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub steps: usize,
    pub data: PreparedData,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: PreparedData) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::contract("dataset is empty"));
        }
        let mut store = ParamStore::new();
        let net = HaarNet::new(cfg.net.clone(), &mut store)?;
        let opt = Nesterov::new(&store, cfg.momentum as f32);
        Ok(Trainer {
            cfg,
            net,
            store,
            opt,
            epoch: 0,
            steps: 0,
            data,
        })
    }

    /// Forward, backward and update on one batch; returns the loss and the
    /// training-mode logits.
    pub fn step(&mut self, idx: &[usize], lr: f32) -> Result<(f32, Tensor)> {
        let (rgb, depth, labels) = self.data.batch(idx)?;
        let mut ctx = Ctx::new(&mut self.store, true);
        let r = ctx.graph.constant(rgb);
        let d = ctx.graph.constant(depth);
        let logits = self.net.forward(&mut ctx, r, d)?;
        let loss = ctx
            .graph
            .cross_entropy(logits, &labels, self.cfg.ignore_index)?;
        let value = ctx.graph.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: self.steps,
                value,
            });
        }
        let out = ctx.graph.value(logits).clone();
        ctx.graph.backward(loss)?;
        let grads = ctx.grads();
        drop(ctx);
        self.opt.step(&mut self.store, &grads, lr)?;
        self.steps += 1;
        Ok((value, out))
    }

    /// One pass over the training data. Metrics are measured on the
    /// training-mode predictions made along the way.
    pub fn train_epoch(&mut self) -> Result<EpochLog> {
        let lr = self.cfg.lr(self.epoch)?;
        let plan = batch_plan(
            self.data.len(),
            self.cfg.batch_size,
            self.cfg.seed,
            self.epoch,
        );
        let (h, w) = (self.data.labels[0].height(), self.data.labels[0].width());
        let mut acc = MetricAccumulator::new(self.cfg.net.num_classes, default_boundary_tol(h, w))?;
        let mut loss_sum = 0.0f64;
        for idx in &plan {
            let (loss, logits) = self.step(idx, lr as f32)?;
            loss_sum += loss as f64;
            let labels: Vec<&LabelMap> = idx.iter().map(|&i| &self.data.labels[i]).collect();
            acc.add(&argmax_labels(&logits), &LabelMap::stack(&labels)?)?;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch: self.epoch,
            lr,
            loss: loss_sum / plan.len() as f64,
            report: acc.report(),
        })
    }

    /// Eval-mode metrics over `data` (normalized with this trainer's
    /// statistics by the caller).
    pub fn evaluate(&mut self, data: &PreparedData) -> Result<MetricReport> {
        evaluate(&self.net, &mut self.store, data, self.cfg.batch_size)
    }

    pub fn checkpoint_entries(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .store
            .entries()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        for (id, v) in self.opt.velocities() {
            out.push((format!("opt.{}", self.store.name(id)), v.clone()));
        }
        out.push(("meta.epoch".into(), Tensor::scalar(self.epoch as f32)));
        out.push(("meta.steps".into(), Tensor::scalar(self.steps as f32)));
        out.push(("norm.mean".into(), Tensor::row(&self.data.stats.mean)));
        out.push(("norm.std".into(), Tensor::row(&self.data.stats.std)));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let entries = self.checkpoint_entries();
        data::save_entries(path, entries.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Restores parameters, buffers, velocities and counters.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let entries = data::load_entries(path)?;
        load_network(&mut self.store, &entries)?;
        let lookup = |name: &str| {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::config(format!("checkpoint is missing entry {name}")))
        };
        let ids: Vec<_> = self.store.trainable_ids().collect();
        for id in ids {
            let v = lookup(&format!("opt.{}", self.store.name(id)))?;
            self.opt.set_velocity(id, v.clone())?;
        }
        self.epoch = lookup("meta.epoch")?.data()[0] as usize;
        self.steps = lookup("meta.steps")?.data()[0] as usize;
        Ok(())
    }
}

/// Prefixes of checkpoint entries that are not network parameters.
const STATE_PREFIXES: [&str; 3] = ["opt.", "meta.", "norm."];

/// Fills `store` from checkpoint entries, which must hold exactly its
/// parameters and buffers besides optimizer and bookkeeping state.
pub fn load_network(store: &mut ParamStore, entries: &[(String, Tensor)]) -> Result<()> {
    let network: Vec<&(String, Tensor)> = entries
        .iter()
        .filter(|(n, _)| !STATE_PREFIXES.iter().any(|p| n.starts_with(p)))
        .collect();
    if let Some((name, _)) = network.iter().find(|(n, _)| store.find(n).is_none()) {
        return Err(Error::config(format!(
            "checkpoint entry {name} has no counterpart in this network (were the switches changed?)"
        )));
    }
    store.load_entries(network.into_iter().map(|(n, t)| (n.as_str(), t)))
}

/// Loads the network weights of a checkpoint file.
pub fn load_model(store: &mut ParamStore, path: &Path) -> Result<()> {
    load_network(store, &data::load_entries(path)?)
}

/// Loads the normalization statistics stored in a checkpoint.
pub fn checkpoint_stats(path: &Path) -> Result<ChannelStats> {
    let entries = data::load_entries(path)?;
    let get = |name: &str| {
        entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.data().to_vec())
            .ok_or_else(|| Error::config(format!("checkpoint is missing entry {name}")))
    };
    Ok(ChannelStats {
        mean: get("norm.mean")?,
        std: get("norm.std")?,
    })
}

/// Eval-mode predictions for every image of `data`.
pub fn predict_all(
    net: &HaarNet,
    store: &mut ParamStore,
    data: &PreparedData,
    batch_size: usize,
) -> Result<Vec<LabelMap>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let (rgb, depth, _) = data.batch(chunk)?;
        let logits = net.predict(store, &rgb, &depth)?;
        let labels = argmax_labels(&logits);
        let s = logits.shape();
        for i in 0..s.n {
            out.push(LabelMap::new(s.h, s.w, labels.image(i).to_vec())?);
        }
    }
    Ok(out)
}

pub fn evaluate(
    net: &HaarNet,
    store: &mut ParamStore,
    data: &PreparedData,
    batch_size: usize,
) -> Result<MetricReport> {
    let preds = predict_all(net, store, data, batch_size)?;
    let (h, w) = (data.labels[0].height(), data.labels[0].width());
    let mut acc = MetricAccumulator::new(net.config().num_classes, default_boundary_tol(h, w))?;
    for (p, g) in preds.iter().zip(&data.labels) {
        acc.add(p, g)?;
    }
    Ok(acc.report())
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_{epoch:04}.mten"))
}

/// Runs the remaining epochs, appending to `out_dir/log.csv` and writing
/// checkpoints every `save_every` epochs plus a final `model.mten`.
pub fn train_loop(trainer: &mut Trainer, out_dir: &Path) -> Result<Vec<EpochLog>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join("log.csv");
    let fresh = !log_path.exists() || trainer.epoch == 0;
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if fresh {
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    }
    let mut logs = Vec::new();
    while trainer.epoch < trainer.cfg.epochs {
        let entry = trainer.train_epoch()?;
        log::info!("{}", entry.csv_row());
        writeln!(log, "{}", entry.csv_row()).map_err(|e| Error::io(&log_path, e))?;
        if trainer.cfg.save_every > 0 && entry.epoch % trainer.cfg.save_every == 0 {
            trainer.save_checkpoint(&checkpoint_path(out_dir, entry.epoch))?;
        }
        logs.push(entry);
    }
    trainer.save_checkpoint(&out_dir.join("model.mten"))?;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn singleton_tail_is_merged() {
        let plan = batch_plan(9, 4, 1, 0);
        assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        let mut all: Vec<usize> = plan.concat();
        all.sort_unstable();
        assert_eq!(all, (0..9).collect::<Vec<_>>());
        assert_eq!(
            batch_plan(10, 4, 1, 0)
                .iter()
                .map(Vec::len)
                .collect::<Vec<_>>(),
            vec![4, 4, 2]
        );
        assert_ne!(batch_plan(10, 10, 1, 0), batch_plan(10, 10, 1, 1));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        let t = Tensor::new(Shape::new(1, 3, 1, 2), vec![1.0, 0.0, 1.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).data(), &[0, 1]);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
