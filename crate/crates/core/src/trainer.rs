//! Joint training of the reconstruction and feature networks.
//!
//! Every HR image of a batch enters the reconstruction network together
//! with its three down-sampled variants; those items carry the
//! reconstruction losses. Original LR images are reconstructed too but only
//! feed the feature network. The feature network sees the reconstruction
//! pair of every base image (HR and original LR), the HR reconstruction in
//! its HR branch and the LR reconstruction in its LR branch.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autograd::{apply_bn_stats, Graph, Var};
use crate::checkpoint::{Checkpoint, OptimizerSnapshot, Progress};
use crate::config::{Ablation, TrainConfig};
use crate::data::{BatchSampler, MiniBatch, TrainSet};
use crate::dffn::Branch;
use crate::error::{Error, Result};
use crate::losses::LossRecord;
use crate::model::Mrjl;
use crate::optim::{Adam, AdamHyper};
use crate::params::{ParamGroup, ParamStore};
use crate::rrn::DecoderKind;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const LR_TRACE_FILE: &str = "lr_trace.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.mrjl";

/// A mini-batch laid out as network inputs.
#[derive(Debug, Clone)]
pub struct BatchTensors {
    /// `[N, 3, H, W]`: per HR image the image and its three variants, then
    /// every original LR image.
    pub input: Tensor,
    /// Leading rows of `input` that carry reconstruction losses.
    pub mse_rows: usize,
    pub hr_targets: Tensor,
    pub lr_targets: Tensor,
    /// Rows of `input` whose reconstructions feed the feature network.
    pub dffn_rows: Vec<usize>,
    pub labels: Vec<usize>,
}

impl BatchTensors {
    pub fn new(batch: &MiniBatch, lr_standard: u32) -> Result<Self> {
        let mut items = Vec::new();
        let mut hr_targets = Vec::new();
        let mut lr_targets = Vec::new();
        let mut dffn_rows = Vec::new();
        let mut labels = Vec::new();
        for p in &batch.persons {
            for s in &p.hr {
                dffn_rows.push(items.len());
                labels.push(p.label);
                items.push(s.hr.tensor());
                items.extend(s.lr_variants.iter().map(|v| v.tensor()));
                let std = s.variant(lr_standard).tensor();
                for _ in 0..4 {
                    hr_targets.push(s.hr.tensor());
                    lr_targets.push(std);
                }
            }
        }
        let mse_rows = items.len();
        for p in &batch.persons {
            for l in &p.lr {
                dffn_rows.push(items.len());
                labels.push(p.label);
                items.push(l.tensor());
            }
        }
        if mse_rows == 0 {
            return Err(Error::Dataset("batch holds no HR images".into()));
        }
        Ok(Self {
            input: Tensor::stack(&items)?,
            mse_rows,
            hr_targets: Tensor::stack(&hr_targets)?,
            lr_targets: Tensor::stack(&lr_targets)?,
            dffn_rows,
            labels,
        })
    }
}

/// Loss nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub mse_hr: Option<Var>,
    pub mse_lr: Option<Var>,
    /// `L_lr + λ·L_hr` over the active terms.
    pub mse: Var,
    pub ce_terms: Vec<Var>,
    pub trip_terms: Vec<Var>,
    /// `CE + γ·triplet` over the active branches.
    pub reid: Var,
    pub total: Var,
}

impl LossVars {
    pub fn record(&self, g: &Graph) -> LossRecord {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let sum = |vs: &[Var]| vs.iter().map(|&v| g.value(v).item()).sum();
        LossRecord {
            mse_hr: val(self.mse_hr),
            mse_lr: val(self.mse_lr),
            ce: sum(&self.ce_terms),
            trip: sum(&self.trip_terms),
            total: g.value(self.total).item(),
        }
    }
}

/// Feature branches trained under an ablation.
pub fn active_branches(ablation: Ablation) -> &'static [Branch] {
    match ablation {
        Ablation::HrOnly => &[Branch::Hr],
        Ablation::LrOnly => &[Branch::Lr],
        Ablation::Full | Ablation::SingleBranchEncoder => &Branch::BOTH,
    }
}

/// Cross-entropy terms (one per head) and triplet terms (one per
/// sub-feature) of one feature branch over the images `imgs`.
pub fn reid_terms_of(
    model: &Mrjl,
    g: &mut Graph,
    branch: Branch,
    imgs: Var,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let subs = model.dffn.branch(branch).forward_vars(g, imgs)?;
    let mut ce = Vec::new();
    for logits in model.heads.logits_vars(g, branch, &subs)? {
        ce.push(g.cross_entropy(logits, labels)?);
    }
    let mut trip = Vec::new();
    for f in subs.0 {
        trip.push(g.triplet(f, labels, cfg.margin, cfg.mining, cfg.triplet_reduction)?);
    }
    Ok((ce, trip))
}

/// Builds every loss of one batch on `g`.
pub fn build_losses(model: &Mrjl, g: &mut Graph, bt: &BatchTensors, cfg: &TrainConfig) -> Result<LossVars> {
    let branches = active_branches(cfg.ablation);
    let x = g.input(bt.input.clone());
    let enc = model.rrn.encode_vars(g, x)?;
    let mut mse_terms = Vec::new();
    let mut reid_terms = Vec::new();
    let (mut mse_hr, mut mse_lr) = (None, None);
    let mut ce_terms = Vec::new();
    let mut trip_terms = Vec::new();
    for &branch in branches {
        let (kind, targets, weight) = match branch {
            Branch::Hr => (DecoderKind::Hr, &bt.hr_targets, cfg.lambda),
            Branch::Lr => (DecoderKind::Lr, &bt.lr_targets, 1.0),
        };
        let recon = model.rrn.decode_vars(g, &enc, kind)?;
        let pred = g.narrow(recon, 0, bt.mse_rows)?;
        let target = g.input(targets.clone());
        let mse = g.mse(pred, target, cfg.mse_reduction)?;
        mse_terms.push((mse, weight));
        match branch {
            Branch::Hr => mse_hr = Some(mse),
            Branch::Lr => mse_lr = Some(mse),
        }
        let mut imgs = g.gather(recon, &bt.dffn_rows)?;
        if cfg.detach_recon {
            imgs = g.detach(imgs);
        }
        let (ce, trip) = reid_terms_of(model, g, branch, imgs, &bt.labels, cfg)?;
        reid_terms.extend(ce.iter().map(|&v| (v, 1.0)));
        reid_terms.extend(trip.iter().map(|&v| (v, cfg.gamma)));
        ce_terms.extend(ce);
        trip_terms.extend(trip);
    }
    let mse = g.combine(&mse_terms)?;
    let reid = g.combine(&reid_terms)?;
    let total = g.combine(&[(mse, 1.0), (reid, 1.0)])?;
    Ok(LossVars {
        mse_hr,
        mse_lr,
        mse,
        ce_terms,
        trip_terms,
        reid,
        total,
    })
}

/// Everything that evolves during training.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: Mrjl,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub sampler: BatchSampler,
    pub epochs_done: usize,
    pub step: u64,
}

fn hyper(cfg: &TrainConfig) -> AdamHyper {
    AdamHyper {
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
        weight_decay: cfg.weight_decay,
    }
}

fn group_lrs(cfg: &TrainConfig, epoch: usize) -> BTreeMap<ParamGroup, f64> {
    let (mse, reid) = cfg.learning_rates(epoch);
    BTreeMap::from([(ParamGroup::Mse, mse), (ParamGroup::Reid, reid)])
}

impl TrainState {
    pub fn new(cfg: TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let (model, store) = Mrjl::new(cfg.model_config(num_classes), cfg.seed)?;
        let optimizer = Adam::new(&store, hyper(&cfg), group_lrs(&cfg, 0))?;
        Ok(Self {
            sampler: cfg.sampler(),
            cfg,
            model,
            store,
            optimizer,
            epochs_done: 0,
            step: 0,
        })
    }

    /// Restores a run from a checkpoint written by [`TrainState::checkpoint`].
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let (Some(cfg), Some(opt), Some(progress)) = (&ck.train, &ck.optimizer, &ck.progress) else {
            return Err(Error::Config("checkpoint carries no training state".into()));
        };
        let (model, store) = ck.restore()?;
        let optimizer = Adam::from_state(&store, opt.hyper, &opt.state)?;
        Ok(Self {
            cfg: cfg.clone(),
            model,
            store,
            optimizer,
            sampler: progress.sampler.clone(),
            epochs_done: progress.epochs_done,
            step: progress.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model, &self.store);
        ck.train = Some(self.cfg.clone());
        ck.optimizer = Some(OptimizerSnapshot {
            hyper: self.optimizer.hyper(),
            state: self.optimizer.state(&self.store),
        });
        ck.progress = Some(Progress {
            epochs_done: self.epochs_done,
            step: self.step,
            sampler: self.sampler.clone(),
        });
        ck
    }

    /// One forward/backward pass and one optimizer update.
    pub fn train_step(&mut self, batch: &MiniBatch) -> Result<LossRecord> {
        let bt = BatchTensors::new(batch, self.cfg.lr_standard.rate())?;
        let (record, grads, stats) = {
            let mut g = Graph::new(&self.store, true);
            let losses = build_losses(&self.model, &mut g, &bt, &self.cfg)?;
            let record = losses.record(&g);
            if !record.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    breakdown: format!(
                        "L_mse_H={} L_mse_L={} L_ce={} L_trip={} total={}",
                        record.mse_hr, record.mse_lr, record.ce, record.trip, record.total
                    ),
                });
            }
            let grads = g.backward(losses.total)?;
            (record, grads, g.into_bn_stats())
        };
        self.optimizer.step(&mut self.store, &grads);
        apply_bn_stats(&mut self.store, &stats);
        self.step += 1;
        Ok(record)
    }

    /// Sets both group rates for a zero-based epoch; returns them.
    pub fn begin_epoch(&mut self, epoch: usize) -> (f64, f64) {
        let (mse, reid) = self.cfg.learning_rates(epoch);
        self.optimizer.set_lr(ParamGroup::Mse, mse);
        self.optimizer.set_lr(ParamGroup::Reid, reid);
        (mse, reid)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub steps: u64,
    pub epochs: usize,
    pub last: Option<LossRecord>,
}

fn append(path: &Path, header: &str) -> Result<BufWriter<File>> {
    let fresh = !path.exists();
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    if fresh {
        writeln!(w, "{header}")?;
    }
    Ok(w)
}

fn epoch_summary(epoch: usize, records: &[LossRecord]) -> String {
    let n = records.len().max(1) as f64;
    let mean = |f: fn(&LossRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    format!(
        "#epoch\t{}\t{}\t{}\t{}\t{}\t{}",
        epoch + 1,
        mean(|r| r.mse_hr),
        mean(|r| r.mse_lr),
        mean(|r| r.ce),
        mean(|r| r.trip),
        mean(|r| r.total)
    )
}

/// Runs (or continues) training up to `state.cfg.epochs`, writing metrics,
/// the learning-rate trace and checkpoints into `out_dir`.
pub fn run(state: &mut TrainState, set: &TrainSet, out_dir: &Path, mut log: impl FnMut(&str)) -> Result<TrainSummary> {
    if set.image_size() != (state.cfg.height, state.cfg.width) {
        return Err(Error::Config(format!(
            "train set images are {:?}, config expects {}x{}",
            set.image_size(),
            state.cfg.height,
            state.cfg.width
        )));
    }
    state.model.heads.check_classes(set.num_classes())?;
    std::fs::create_dir_all(out_dir)?;
    let mut metrics = append(&out_dir.join(METRICS_FILE), "step\tL_mse_H\tL_mse_L\tL_ce\tL_trip\ttotal")?;
    let mut trace = append(&out_dir.join(LR_TRACE_FILE), "epoch\tlr_mse\tlr_reid")?;
    let per_epoch = state.cfg.batches_per_epoch(set.trainable_identities().len());
    let mut last = None;
    for epoch in state.epochs_done..state.cfg.epochs {
        let (lr_mse, lr_reid) = state.begin_epoch(epoch);
        writeln!(trace, "{}\t{lr_mse:e}\t{lr_reid:e}", epoch + 1)?;
        let mut records = Vec::with_capacity(per_epoch);
        for _ in 0..per_epoch {
            let batch = state.sampler.sample(set)?;
            let step = state.step;
            let rec = state.train_step(&batch)?;
            writeln!(metrics, "{}", rec.tsv_line(step))?;
            records.push(rec);
        }
        let summary = epoch_summary(epoch, &records);
        writeln!(metrics, "{summary}")?;
        metrics.flush()?;
        trace.flush()?;
        log(&summary);
        last = records.last().copied();
        state.epochs_done = epoch + 1;
        let every = state.cfg.checkpoint_every;
        if every > 0 && state.epochs_done % every == 0 && state.epochs_done < state.cfg.epochs {
            state
                .checkpoint()
                .save(&out_dir.join(format!("checkpoint_epoch{}.mrjl", state.epochs_done)))?;
        }
    }
    let path = out_dir.join(FINAL_CHECKPOINT);
    state.checkpoint().save(&path)?;
    Ok(TrainSummary {
        checkpoint: path,
        steps: state.step,
        epochs: state.epochs_done,
        last,
    })
}

/// Reads an LR trace file into `(epoch, lr_mse, lr_reid)` rows.
pub fn read_lr_trace(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::ingest(path, e))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let bad = || Error::Dataset(format!("{}: malformed trace row {} `{line}`", path.display(), i + 2));
            let mut f = line.split('\t');
            let mut next = || f.next().ok_or_else(bad);
            let epoch = next()?.parse().map_err(|_| bad())?;
            let mse = next()?.parse().map_err(|_| bad())?;
            let reid = next()?.parse().map_err(|_| bad())?;
            Ok((epoch, mse, reid))
        })
        .collect()
}

#[cfg(test)]
mod tests;
