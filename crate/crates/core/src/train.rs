//! Two-phase training: slice-level pretraining of the encoder (Phase 1) and
//! scan-level gated-attention MIL training (Phase 2) with focal loss,
//! embedding mixup, gradient accumulation, a backbone freeze window,
//! differential learning rates, early stopping on the validation challenge
//! metric, and optional stochastic weight averaging.

use serde::{Deserialize, Serialize};

use crate::calibrate::{challenge_metric, ThresholdMap};
use crate::data::{uniform_subsample, Dataset, SourceId};
use crate::error::{Error, Result};
use crate::loss::{ce_label_smoothing_grad, LossSpec};
use crate::model::{dropout_mask, Dims, Encoder, MilModel, SliceModel};
use crate::numerics::{RngStream, Vector};
use crate::optim::{cosine_warmup_lr, AdamWState, GroupCfg};
use crate::scoring::mil_score;

// Stream ids, fixed so runs are replayable from (config, seed) alone.
const STREAM_INIT_P1: u64 = 0x11;
const STREAM_INIT_P2: u64 = 0x12;
const STREAM_DROPOUT: u64 = 0xD0_0000;
const STREAM_MIXUP: u64 = 0x313D_0000;

/// All hyperparameters of both training phases.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub version: u32,
    pub seed: u64,

    // Model shape. d_in comes from the data.
    pub enc_hidden: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,

    // Phase 2 (scan-level MIL).
    pub k_train: usize,
    pub k_eval: usize,
    pub epochs: usize,
    pub patience: usize,
    pub freeze_epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub physical_batch: usize,
    pub accum_steps: usize,
    pub focal_gamma: f64,
    /// Per-class focal weights indexed by class id: [non-COVID, COVID].
    /// The COVID class carries the larger weight.
    pub focal_alpha: [f64; 2],
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    pub mixup_enabled: bool,
    pub warmup_epochs: f64,
    pub swa_epochs: usize,
    pub swa_lr: Option<f64>,
    pub stratify_phase2: bool,

    // Phase 1 (slice-level pretraining).
    pub label_smoothing: f64,
    pub phase1_lr: f64,
    pub phase1_weight_decay: f64,
    pub phase1_epochs: usize,
    pub phase1_batch: usize,
    pub phase1_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            version: 1,
            seed: 0,
            enc_hidden: 32,
            embed_dim: 16,
            attn_dim: 8,
            head_hidden: 16,
            head_dropout: 0.5,
            k_train: 24,
            k_eval: 48,
            epochs: 30,
            patience: 8,
            freeze_epochs: 3,
            lr_backbone: 1e-6,
            lr_head: 1e-5,
            weight_decay: 0.05,
            physical_batch: 2,
            accum_steps: 16,
            focal_gamma: 2.0,
            focal_alpha: [0.45, 0.55],
            mixup_alpha: 0.2,
            mixup_beta: 0.2,
            mixup_enabled: true,
            warmup_epochs: 2.0,
            swa_epochs: 5,
            swa_lr: None,
            stratify_phase2: true,
            label_smoothing: 0.1,
            phase1_lr: 1e-4,
            phase1_weight_decay: 0.01,
            phase1_epochs: 20,
            phase1_batch: 64,
            phase1_dropout: 0.3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_hidden", self.enc_hidden),
            ("embed_dim", self.embed_dim),
            ("attn_dim", self.attn_dim),
            ("head_hidden", self.head_hidden),
            ("k_train", self.k_train),
            ("k_eval", self.k_eval),
            ("epochs", self.epochs),
            ("physical_batch", self.physical_batch),
            ("accum_steps", self.accum_steps),
            ("phase1_epochs", self.phase1_epochs),
            ("phase1_batch", self.phase1_batch),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        if (self.focal_alpha[0] + self.focal_alpha[1] - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParam("focal_alpha must sum to 1".into()));
        }
        if self.focal_gamma < 0.0 {
            return Err(Error::InvalidParam("focal_gamma must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidParam("label_smoothing must be in [0,1)".into()));
        }
        if !(0.0..1.0).contains(&self.head_dropout) || !(0.0..1.0).contains(&self.phase1_dropout) {
            return Err(Error::InvalidParam("dropout rates must be in [0,1)".into()));
        }
        if !(self.mixup_alpha > 0.0 && self.mixup_beta > 0.0) {
            return Err(Error::InvalidParam("mixup Beta params must be > 0".into()));
        }
        if self.warmup_epochs >= self.epochs as f64 {
            return Err(Error::InvalidParam("warmup_epochs >= epochs".into()));
        }
        Ok(())
    }

    pub fn dims_for(&self, d_in: usize) -> Dims {
        Dims {
            d_in,
            enc_hidden: self.enc_hidden,
            d: self.embed_dim,
            attn_dim: self.attn_dim,
            head_hidden: self.head_hidden,
        }
    }

    pub fn effective_batch(&self) -> usize {
        self.physical_batch * self.accum_steps
    }

    fn focal(&self) -> LossSpec {
        LossSpec::Focal {
            gamma: self.focal_gamma,
            alpha: self.focal_alpha,
        }
    }
}

/// One line of training history (serialized as a JSON event by the CLI).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochEvent {
    pub phase: u32,
    pub epoch: usize,
    pub train_loss: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub val_metric: Option<f64>,
    pub is_best: bool,
}

fn epoch_seed(seed: u64, phase: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (phase << 48) ^ epoch as u64
}

/// Loss and gradients for a single unmixed bag; the dropout mask, when
/// given, must match the head hidden width. With `freeze_encoder` the
/// encoder gradients stay exactly zero.
pub fn backward_single(
    model: &MilModel,
    slices: &[Vector],
    target: usize,
    loss: &LossSpec,
    mask: Option<&Vector>,
    freeze_encoder: bool,
) -> (f64, MilModel) {
    let mut grads = model.zeros_like();
    let cache = model.pool_forward(slices);
    let head = model.head_forward(&cache.z, mask);
    let (value, dlogits) = loss.grad(&head.logits, target);
    let dz = model.head_backward(&head, &dlogits, &mut grads);
    model.pool_backward(&cache, &dz, freeze_encoder, &mut grads);
    (value, grads)
}

/// Mixup draws for one effective batch: lambda and a pairing permutation.
#[derive(Clone, Debug)]
pub struct MixupDraw {
    pub lambda: f64,
    pub pairing: Vec<usize>,
}

/// Accumulate gradients over one effective batch. Pooling runs in chunks of
/// `physical_chunk` scans (the micro-batches); the mixed head pass and the
/// loss are computed over the whole effective batch, so the result is
/// independent of the chunking. Gradients are summed into `grads` unscaled;
/// the summed loss is returned.
#[allow(clippy::too_many_arguments)]
pub fn phase2_batch_grads(
    model: &MilModel,
    batch: &[(&[Vector], u8)],
    loss: &LossSpec,
    mixup: Option<&MixupDraw>,
    masks: &[Option<Vector>],
    freeze_encoder: bool,
    physical_chunk: usize,
    grads: &mut MilModel,
) -> f64 {
    let n = batch.len();
    assert_eq!(masks.len(), n, "one dropout mask slot per scan");
    if let Some(m) = mixup {
        assert_eq!(m.pairing.len(), n, "pairing must cover the batch");
    }

    // Pass 1: pooled embeddings, micro-batch by micro-batch.
    let mut caches = Vec::with_capacity(n);
    for chunk in batch.chunks(physical_chunk.max(1)) {
        for (slices, _) in chunk {
            caches.push(model.pool_forward(slices));
        }
    }

    // Pass 2: (mixed) head forward, loss, and head backward.
    let mut dz = vec![Vector::zeros(model.dims.d); n];
    let mut total_loss = 0.0;
    for i in 0..n {
        let (z_in, partner, lambda) = match mixup {
            Some(m) => {
                let j = m.pairing[i];
                let mut z = caches[i].z.clone();
                z.scale(m.lambda);
                z.add_scaled(&caches[j].z, 1.0 - m.lambda);
                (z, j, m.lambda)
            }
            None => (caches[i].z.clone(), i, 1.0),
        };
        let head = model.head_forward(&z_in, masks[i].as_ref());
        let y_a = batch[i].1 as usize;
        let y_b = batch[partner].1 as usize;
        let (loss_a, grad_a) = loss.grad(&head.logits, y_a);
        let (value, dlogits) = if lambda == 1.0 {
            (loss_a, grad_a)
        } else {
            let (loss_b, grad_b) = loss.grad(&head.logits, y_b);
            let mut g = grad_a;
            g.scale(lambda);
            g.add_scaled(&grad_b, 1.0 - lambda);
            (lambda * loss_a + (1.0 - lambda) * loss_b, g)
        };
        total_loss += value;
        let dz_mix = model.head_backward(&head, &dlogits, grads);
        dz[i].add_scaled(&dz_mix, lambda);
        if partner != i {
            dz[partner].add_scaled(&dz_mix, 1.0 - lambda);
        }
    }

    // Pass 3: pooling/encoder backward, again chunked.
    for (cache, d) in caches.iter().zip(&dz) {
        model.pool_backward(cache, d, freeze_encoder, grads);
    }
    total_loss
}

/// Validation challenge metric at the fixed 0.5 threshold (the early-stop
/// and model-selection signal).
pub fn mil_val_metric(model: &MilModel, val: &Dataset, k_eval: usize) -> Result<f64> {
    let mut scores = Vec::with_capacity(val.bags.len());
    let mut truths = Vec::with_capacity(val.bags.len());
    let mut sources = Vec::with_capacity(val.bags.len());
    for bag in &val.bags {
        let label = bag
            .label
            .ok_or_else(|| Error::InvalidData(format!("bag {} has no label", bag.scan_id)))?;
        scores.push(mil_score(model, bag, k_eval)?);
        truths.push(label);
        sources.push(bag.source);
    }
    let preds = crate::calibrate::apply_thresholds(
        &scores,
        &sources,
        &ThresholdMap::Global { threshold: 0.5 },
    );
    Ok(challenge_metric(&preds, &truths, &sources, val.source_count)?.p)
}

/// Elementwise arithmetic mean of parameter snapshots.
pub fn swa_average(checkpoints: &[MilModel]) -> Result<MilModel> {
    let first = checkpoints
        .first()
        .ok_or_else(|| Error::EmptyInput("swa over zero checkpoints".into()))?;
    if checkpoints.iter().any(|c| c.dims != first.dims) {
        return Err(Error::ShapeMismatch("swa checkpoints differ in shape".into()));
    }
    let mut avg = first.zeros_like();
    let w = 1.0 / checkpoints.len() as f64;
    for c in checkpoints {
        avg.axpy_from(c, w);
    }
    Ok(avg)
}

pub struct Phase2Result {
    pub model: MilModel,
    pub swa: Option<MilModel>,
    pub history: Vec<EpochEvent>,
    pub best_metric: Option<f64>,
}

struct Phase2Runtime<'a> {
    cfg: &'a TrainConfig,
    model: MilModel,
    opt: AdamWState,
    // Subsampled training bags (K_train slices each) with labels and sources.
    slices: Vec<Vec<Vector>>,
    labels: Vec<u8>,
    items: Vec<(usize, SourceId)>,
}

impl<'a> Phase2Runtime<'a> {
    fn run_epoch(&mut self, phase_tag: u64, epoch: usize, lr_head: f64, lr_backbone: f64, frozen: bool) -> Result<f64> {
        let cfg = self.cfg;
        let eff = cfg.effective_batch();
        let plan = if cfg.stratify_phase2 {
            let source_count = 1 + self.items.iter().map(|&(_, s)| s.0).max().unwrap_or(0);
            crate::sampler::build_epoch(
                &self.items,
                source_count,
                eff,
                epoch_seed(cfg.seed, phase_tag, epoch),
            )?
        } else {
            let mut rng = RngStream::new(epoch_seed(cfg.seed, phase_tag, epoch), 0x5401);
            let mut idx = self.items.clone();
            rng.shuffle(&mut idx);
            crate::sampler::EpochPlan {
                batches: idx.chunks(eff).map(|c| c.to_vec()).collect(),
                seed: cfg.seed,
            }
        };
        let mut dropout_rng = RngStream::new(cfg.seed, STREAM_DROPOUT ^ (phase_tag << 32) ^ epoch as u64);
        let mut mixup_rng = RngStream::new(cfg.seed, STREAM_MIXUP ^ (phase_tag << 32) ^ epoch as u64);

        let mut epoch_loss = 0.0;
        let mut total = 0usize;
        for batch_items in &plan.batches {
            let batch: Vec<(&[Vector], u8)> = batch_items
                .iter()
                .map(|&(i, _)| (self.slices[i].as_slice(), self.labels[i]))
                .collect();
            let n = batch.len();
            let masks: Vec<Option<Vector>> = (0..n)
                .map(|_| Some(dropout_mask(&mut dropout_rng, cfg.head_hidden, cfg.head_dropout)))
                .collect();
            let mixup = if cfg.mixup_enabled && n > 1 {
                let lambda = mixup_rng.sample_beta(cfg.mixup_alpha, cfg.mixup_beta)?;
                let mut pairing: Vec<usize> = (0..n).collect();
                mixup_rng.shuffle(&mut pairing);
                Some(MixupDraw { lambda, pairing })
            } else {
                None
            };
            let mut grads = self.model.zeros_like();
            let loss = phase2_batch_grads(
                &self.model,
                &batch,
                &cfg.focal(),
                mixup.as_ref(),
                &masks,
                frozen,
                cfg.physical_batch,
                &mut grads,
            );
            grads.scale_all(1.0 / n as f64);
            epoch_loss += loss;
            total += n;

            let group = |name: &str| -> Option<GroupCfg> {
                if name.starts_with("encoder.") {
                    if frozen {
                        None
                    } else {
                        Some(GroupCfg {
                            lr: lr_backbone,
                            weight_decay: cfg.weight_decay,
                        })
                    }
                } else {
                    Some(GroupCfg {
                        lr: lr_head,
                        weight_decay: cfg.weight_decay,
                    })
                }
            };
            let grad_tensors = grads.tensors();
            self.opt.step(self.model.tensors_mut(), &grad_tensors, &group)?;
        }
        Ok(epoch_loss / total.max(1) as f64)
    }
}

/// Phase 2: scan-level MIL training. `encoder` is usually the Phase 1
/// encoder; None initializes it randomly. The best checkpoint by validation
/// challenge metric is returned; SWA (when `swa_epochs > 0`) continues from
/// it for extra epochs at a flat rate and averages the per-epoch snapshots.
pub fn train_phase2(
    train: &Dataset,
    val: &Dataset,
    encoder: Option<Encoder>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochEvent),
) -> Result<Phase2Result> {
    cfg.validate()?;
    if train.bags.is_empty() {
        return Err(Error::EmptyInput("phase 2: empty training set".into()));
    }
    let d_in = train.bags[0].dim();
    let dims = cfg.dims_for(d_in);
    let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT_P2);
    let mut model = MilModel::init(dims, cfg.head_dropout, &mut init_rng);
    if let Some(enc) = encoder {
        if enc.w1.cols() != d_in || enc.w2.rows() != cfg.embed_dim {
            return Err(Error::ShapeMismatch("phase 1 encoder shape mismatch".into()));
        }
        model.encoder = enc;
    }

    let mut slices = Vec::with_capacity(train.bags.len());
    let mut labels = Vec::with_capacity(train.bags.len());
    let mut items = Vec::with_capacity(train.bags.len());
    for (i, bag) in train.bags.iter().enumerate() {
        let label = bag
            .label
            .ok_or_else(|| Error::InvalidData(format!("bag {} has no label", bag.scan_id)))?;
        slices.push(uniform_subsample(bag, cfg.k_train)?.slices);
        labels.push(label);
        items.push((i, bag.source));
    }

    let mut rt = Phase2Runtime {
        cfg,
        model,
        opt: AdamWState::new(),
        slices,
        labels,
        items,
    };

    let has_val = !val.bags.is_empty();
    let mut history = Vec::new();
    let mut best: Option<(f64, MilModel)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        let lr_head = cosine_warmup_lr(epoch as f64, cfg.epochs as f64, cfg.warmup_epochs, cfg.lr_head)?;
        let lr_backbone =
            cosine_warmup_lr(epoch as f64, cfg.epochs as f64, cfg.warmup_epochs, cfg.lr_backbone)?;
        let frozen = epoch < cfg.freeze_epochs;
        let train_loss = rt.run_epoch(2, epoch, lr_head, lr_backbone, frozen)?;

        let val_metric = if has_val {
            Some(mil_val_metric(&rt.model, val, cfg.k_eval)?)
        } else {
            None
        };
        let mut is_best = false;
        if let Some(m) = val_metric {
            match &best {
                Some((b, _)) if m <= *b => since_best += 1,
                _ => {
                    best = Some((m, rt.model.clone()));
                    since_best = 0;
                    is_best = true;
                }
            }
        }
        let event = EpochEvent {
            phase: 2,
            epoch,
            train_loss,
            lr_head,
            lr_backbone,
            val_metric,
            is_best,
        };
        on_epoch(&event);
        history.push(event);
        if has_val && since_best >= cfg.patience {
            break;
        }
    }

    let (best_metric, best_model) = match best {
        Some((m, model)) => (Some(m), model),
        None => (None, rt.model.clone()),
    };

    // SWA: continue from the selected checkpoint at a flat rate, snapshot
    // after each epoch, and average the snapshots.
    let swa = if cfg.swa_epochs > 0 {
        rt.model = best_model.clone();
        rt.opt = AdamWState::new();
        let lr = cfg.swa_lr.unwrap_or(cfg.lr_head);
        let mut snapshots = Vec::with_capacity(cfg.swa_epochs);
        for epoch in 0..cfg.swa_epochs {
            let train_loss = rt.run_epoch(3, epoch, lr, lr * (cfg.lr_backbone / cfg.lr_head), false)?;
            snapshots.push(rt.model.clone());
            let event = EpochEvent {
                phase: 3,
                epoch,
                train_loss,
                lr_head: lr,
                lr_backbone: lr * (cfg.lr_backbone / cfg.lr_head),
                val_metric: None,
                is_best: false,
            };
            on_epoch(&event);
            history.push(event);
        }
        Some(swa_average(&snapshots)?)
    } else {
        None
    };

    Ok(Phase2Result {
        model: best_model,
        swa,
        history,
        best_metric,
    })
}

/// One labeled slice for Phase 1, inheriting its bag's label and source.
pub fn slice_items(dataset: &Dataset) -> Result<Vec<(Vector, u8, SourceId)>> {
    let mut out = Vec::new();
    for bag in &dataset.bags {
        let label = bag
            .label
            .ok_or_else(|| Error::InvalidData(format!("bag {} has no label", bag.scan_id)))?;
        for s in &bag.slices {
            out.push((s.clone(), label, bag.source));
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("phase 1: no slices".into()));
    }
    Ok(out)
}

pub struct Phase1Result {
    pub model: SliceModel,
    pub history: Vec<EpochEvent>,
}

/// Phase 1: slice-level pretraining with label-smoothed cross-entropy,
/// class-and-center balanced sampling, AdamW, and cosine warmup.
pub fn train_phase1(
    train: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochEvent),
) -> Result<Phase1Result> {
    cfg.validate()?;
    let items = slice_items(train)?;
    let d_in = items[0].0.len();
    let mut init_rng = RngStream::new(cfg.seed, STREAM_INIT_P1);
    let mut model = SliceModel::init(cfg.dims_for(d_in), cfg.phase1_dropout, &mut init_rng);
    let mut opt = AdamWState::new();
    let sampler_items: Vec<(usize, SourceId, u8)> = items
        .iter()
        .enumerate()
        .map(|(i, &(_, label, source))| (i, source, label))
        .collect();
    let source_count = 1 + items.iter().map(|&(_, _, s)| s.0).max().unwrap_or(0);

    let mut history = Vec::new();
    for epoch in 0..cfg.phase1_epochs {
        let lr = cosine_warmup_lr(
            epoch as f64,
            cfg.phase1_epochs as f64,
            cfg.warmup_epochs.min(cfg.phase1_epochs as f64 - 1.0),
            cfg.phase1_lr,
        )?;
        let plan = crate::sampler::build_balanced_epoch(
            &sampler_items,
            source_count,
            cfg.phase1_batch,
            epoch_seed(cfg.seed, 1, epoch),
        )?;
        let mut dropout_rng = RngStream::new(cfg.seed, STREAM_DROPOUT ^ (1 << 32) ^ epoch as u64);

        let mut epoch_loss = 0.0;
        let mut total = 0usize;
        for batch in &plan.batches {
            let mut grads = model.zeros_like();
            for &(i, _) in batch {
                let (x, label, _) = &items[i];
                let mask = dropout_mask(&mut dropout_rng, cfg.embed_dim, cfg.phase1_dropout);
                let cache = model.forward(x, Some(&mask));
                let (value, dlogits) =
                    ce_label_smoothing_grad(&cache.logits, *label as usize, cfg.label_smoothing);
                model.backward(&cache, &dlogits, &mut grads);
                epoch_loss += value;
            }
            total += batch.len();
            let scale = 1.0 / batch.len() as f64;
            for (_, g) in grads.tensors_mut() {
                for x in g {
                    *x *= scale;
                }
            }
            let group = |_: &str| {
                Some(GroupCfg {
                    lr,
                    weight_decay: cfg.phase1_weight_decay,
                })
            };
            let grad_tensors = grads.tensors();
            opt.step(model.tensors_mut(), &grad_tensors, &group)?;
        }
        let event = EpochEvent {
            phase: 1,
            epoch,
            train_loss: epoch_loss / total.max(1) as f64,
            lr_head: lr,
            lr_backbone: lr,
            val_metric: None,
            is_best: false,
        };
        on_epoch(&event);
        history.push(event);
    }
    Ok(Phase1Result { model, history })
}

/// Slice-level accuracy of the Phase 1 classifier (eval mode).
pub fn slice_accuracy(model: &SliceModel, items: &[(Vector, u8, SourceId)]) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let correct = items
        .iter()
        .filter(|(x, label, _)| {
            let cache = model.forward(x, None);
            let pred = u8::from(cache.logits[1] > cache.logits[0]);
            pred == *label
        })
        .count();
    correct as f64 / items.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic, ShiftSpec, SourceSpec};
    use crate::loss::LossSpec;
    use crate::numerics::softmax_raw;

    pub fn quick_spec(separation: f64) -> ShiftSpec {
        ShiftSpec {
            version: 1,
            separation,
            noise: 1.0,
            sources: vec![
                SourceSpec {
                    scale: 1.0,
                    offset: vec![],
                    positive_fraction: 0.6,
                    score_bias: 0.0,
                    train_pos: 12,
                    train_neg: 12,
                    val_pos: 6,
                    val_neg: 6,
                    test_pos: 0,
                    test_neg: 0,
                },
                SourceSpec {
                    scale: 1.2,
                    offset: vec![0.5],
                    positive_fraction: 0.6,
                    score_bias: 0.0,
                    train_pos: 12,
                    train_neg: 12,
                    val_pos: 6,
                    val_neg: 6,
                    test_pos: 0,
                    test_neg: 0,
                },
            ],
        }
    }

    pub fn quick_config() -> TrainConfig {
        TrainConfig {
            seed: 5,
            enc_hidden: 16,
            embed_dim: 8,
            attn_dim: 4,
            head_hidden: 8,
            k_train: 8,
            k_eval: 12,
            epochs: 12,
            patience: 8,
            freeze_epochs: 2,
            lr_backbone: 1e-3,
            lr_head: 1e-2,
            weight_decay: 0.01,
            physical_batch: 2,
            accum_steps: 8,
            warmup_epochs: 1.0,
            swa_epochs: 2,
            phase1_epochs: 8,
            phase1_batch: 64,
            phase1_lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_model_bias_gradient_is_softmax_minus_onehot() {
        // With all-zero parameters only the classifier bias sees gradient:
        // logits are [0,0], p = [0.5,0.5], dlogits = p − onehot for plain CE
        // (γ=0, uniform α gives half that).
        let dims = Dims {
            d_in: 4,
            enc_hidden: 3,
            d: 4,
            attn_dim: 2,
            head_hidden: 3,
        };
        let model = MilModel::zeros(dims, 0.5);
        let mut rng = RngStream::new(1, 0);
        let slices: Vec<Vector> = (0..3)
            .map(|_| Vector((0..4).map(|_| rng.normal()).collect()))
            .collect();
        let loss = LossSpec::Focal {
            gamma: 0.0,
            alpha: [0.5, 0.5],
        };
        let (_, grads) = backward_single(&model, &slices, 1, &loss, None, false);
        let p = softmax_raw(&[0.0, 0.0]);
        let expected = [0.5 * (p[0] - 0.0), 0.5 * (p[1] - 1.0)];
        for j in 0..2 {
            assert!((grads.head.b2[j] - expected[j]).abs() < 1e-15);
        }
        // Everything upstream of the zero weights gets zero gradient.
        assert!(grads.head.w2.as_slice().iter().all(|&g| g == 0.0));
    }

    fn finite_difference_check(seed: u64, k: usize, loss: &LossSpec) -> f64 {
        let dims = Dims {
            d_in: 5,
            enc_hidden: 6,
            d: 4,
            attn_dim: 3,
            head_hidden: 4,
        };
        let mut rng = RngStream::new(seed, 0);
        let model = MilModel::init(dims, 0.5, &mut rng);
        let slices: Vec<Vector> = (0..k)
            .map(|_| Vector((0..5).map(|_| rng.normal()).collect()))
            .collect();
        let target = (seed % 2) as usize;
        let (_, grads) = backward_single(&model, &slices, target, loss, None, false);

        let mut max_rel = 0.0f64;
        let h = 1e-5;
        let mut perturbed = model.clone();
        let n_tensors = model.tensors().len();
        for t in 0..n_tensors {
            let len = model.tensors()[t].1.len();
            for i in 0..len {
                let orig = perturbed.tensors()[t].1[i];
                perturbed.tensors_mut()[t].1[i] = orig + h;
                let up = {
                    let cache = perturbed.pool_forward(&slices);
                    let head = perturbed.head_forward(&cache.z, None);
                    loss.value(&head.logits, target)
                };
                perturbed.tensors_mut()[t].1[i] = orig - h;
                let down = {
                    let cache = perturbed.pool_forward(&slices);
                    let head = perturbed.head_forward(&cache.z, None);
                    loss.value(&head.logits, target)
                };
                perturbed.tensors_mut()[t].1[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let g = grads.tensors()[t].1[i];
                let denom = g.abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((g - fd).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        let loss = LossSpec::Focal {
            gamma: 2.0,
            alpha: [0.45, 0.55],
        };
        let err = finite_difference_check(3, 3, &loss);
        assert!(err <= 1e-4, "max relative error {err}");
    }

    #[test]
    fn frozen_encoder_gradient_is_exactly_zero() {
        let dims = Dims {
            d_in: 4,
            enc_hidden: 3,
            d: 4,
            attn_dim: 2,
            head_hidden: 3,
        };
        let mut rng = RngStream::new(2, 0);
        let model = MilModel::init(dims, 0.5, &mut rng);
        let slices: Vec<Vector> = (0..3)
            .map(|_| Vector((0..4).map(|_| rng.normal()).collect()))
            .collect();
        let loss = LossSpec::Focal {
            gamma: 2.0,
            alpha: [0.45, 0.55],
        };
        let (_, grads) = backward_single(&model, &slices, 1, &loss, None, true);
        for name in ["encoder.w1", "encoder.b1", "encoder.w2", "encoder.b2"] {
            let (_, g) = grads.tensors().into_iter().find(|(n, _)| *n == name).unwrap();
            assert!(g.iter().all(|&x| x == 0.0), "{name} not frozen");
        }
        // Attention still learns.
        assert!(grads.attention.w.as_slice().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn accumulation_chunking_does_not_change_gradients() {
        // 16 micro-batches of 2 vs one batch of 32, with identical dropout
        // masks and mixup draws.
        let dims = Dims {
            d_in: 4,
            enc_hidden: 5,
            d: 4,
            attn_dim: 3,
            head_hidden: 4,
        };
        let mut rng = RngStream::new(11, 0);
        let model = MilModel::init(dims, 0.5, &mut rng);
        let bags: Vec<(Vec<Vector>, u8)> = (0..32)
            .map(|i| {
                let slices = (0..4)
                    .map(|_| Vector((0..4).map(|_| rng.normal()).collect()))
                    .collect();
                (slices, (i % 2) as u8)
            })
            .collect();
        let batch: Vec<(&[Vector], u8)> =
            bags.iter().map(|(s, l)| (s.as_slice(), *l)).collect();
        let masks: Vec<Option<Vector>> = (0..32)
            .map(|_| Some(dropout_mask(&mut rng, 4, 0.5)))
            .collect();
        let mut pairing: Vec<usize> = (0..32).collect();
        rng.shuffle(&mut pairing);
        let mixup = MixupDraw {
            lambda: 0.3,
            pairing,
        };
        let loss = LossSpec::Focal {
            gamma: 2.0,
            alpha: [0.45, 0.55],
        };

        let mut g_chunked = model.zeros_like();
        let l1 = phase2_batch_grads(&model, &batch, &loss, Some(&mixup), &masks, false, 2, &mut g_chunked);
        let mut g_whole = model.zeros_like();
        let l2 = phase2_batch_grads(&model, &batch, &loss, Some(&mixup), &masks, false, 32, &mut g_whole);

        assert!((l1 - l2).abs() < 1e-10);
        for ((_, a), (_, b)) in g_chunked.tensors().into_iter().zip(g_whole.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn phase1_learns_separable_slices() {
        // All slices of a positive bag carry signal here; with partial
        // positivity, slice accuracy is capped by construction.
        let mut spec = quick_spec(6.0);
        for s in &mut spec.sources {
            s.positive_fraction = 1.0;
        }
        let data = generate_synthetic(&spec, 3, 8, (6, 10)).unwrap();
        let cfg = quick_config();
        let result = train_phase1(&data.train, &cfg, |_| {}).unwrap();
        let val_items = slice_items(&data.train).unwrap();
        let acc = slice_accuracy(&result.model, &val_items);
        assert!(acc >= 0.95, "slice accuracy {acc}");
    }

    #[test]
    fn phase1_no_signal_stays_near_chance() {
        let mut spec = quick_spec(0.0);
        for s in &mut spec.sources {
            s.scale = 1.0;
            s.offset = vec![];
            s.positive_fraction = 1.0;
        }
        let data = generate_synthetic(&spec, 4, 8, (6, 10)).unwrap();
        let cfg = quick_config();
        let result = train_phase1(&data.train, &cfg, |_| {}).unwrap();
        let items = slice_items(&data.val).unwrap();
        let acc = slice_accuracy(&result.model, &items);
        assert!((acc - 0.5).abs() <= 0.12, "no-signal accuracy {acc}");
    }

    #[test]
    fn phase1_replay_is_bit_identical() {
        let data = generate_synthetic(&quick_spec(4.0), 6, 8, (5, 8)).unwrap();
        let cfg = TrainConfig {
            phase1_epochs: 3,
            ..quick_config()
        };
        let a = train_phase1(&data.train, &cfg, |_| {}).unwrap();
        let b = train_phase1(&data.train, &cfg, |_| {}).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(
            a.history.last().unwrap().train_loss,
            b.history.last().unwrap().train_loss
        );
    }

    #[test]
    fn phase2_trains_and_is_deterministic() {
        let data = generate_synthetic(&quick_spec(6.0), 9, 8, (6, 10)).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            swa_epochs: 2,
            ..quick_config()
        };
        let p1 = train_phase1(&data.train, &cfg, |_| {}).unwrap();
        let r1 = train_phase2(&data.train, &data.val, Some(p1.model.encoder.clone()), &cfg, |_| {}).unwrap();
        let r2 = train_phase2(&data.train, &data.val, Some(p1.model.encoder), &cfg, |_| {}).unwrap();
        assert_eq!(r1.model, r2.model);
        assert_eq!(r1.swa, r2.swa);
        assert!(r1.best_metric.unwrap() > 0.5, "metric {:?}", r1.best_metric);
    }

    #[test]
    fn early_stopping_returns_best_checkpoint() {
        // A config whose validation metric cannot improve (zero lr after
        // warmup ramp of 0 and no usable signal): strictly worsening or flat
        // runs halt after `patience` stale epochs.
        let data = generate_synthetic(&quick_spec(4.0), 12, 8, (5, 8)).unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            patience: 3,
            swa_epochs: 0,
            ..quick_config()
        };
        let result = train_phase2(&data.train, &data.val, None, &cfg, |_| {}).unwrap();
        let best_epoch = result
            .history
            .iter()
            .filter(|e| e.is_best)
            .map(|e| e.epoch)
            .max()
            .unwrap();
        let last_epoch = result.history.last().unwrap().epoch;
        // Halted exactly `patience` epochs after the last improvement, or ran out.
        assert!(last_epoch == best_epoch + cfg.patience || last_epoch == cfg.epochs - 1);
        // Returned model is the best checkpoint, not the last.
        let m = mil_val_metric(&result.model, &data.val, cfg.k_eval).unwrap();
        assert!((m - result.best_metric.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn swa_average_basics() {
        let dims = Dims {
            d_in: 3,
            enc_hidden: 3,
            d: 3,
            attn_dim: 2,
            head_hidden: 3,
        };
        let mut rng = RngStream::new(5, 0);
        let a = MilModel::init(dims, 0.5, &mut rng);
        // Identical checkpoints → same parameters.
        let avg = swa_average(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(avg, a);
        // θ and −θ → zeros.
        let mut neg = a.clone();
        neg.scale_all(-1.0);
        let zero = swa_average(&[a.clone(), neg]).unwrap();
        assert!(zero.tensors().iter().all(|(_, t)| t.iter().all(|&x| x.abs() < 1e-15)));
        // Three random checkpoints → elementwise mean oracle.
        let b = MilModel::init(dims, 0.5, &mut rng);
        let c = MilModel::init(dims, 0.5, &mut rng);
        let avg = swa_average(&[a.clone(), b.clone(), c.clone()]).unwrap();
        for (((_, m), (_, x)), ((_, y), (_, z))) in avg
            .tensors()
            .into_iter()
            .zip(a.tensors())
            .zip(b.tensors().into_iter().zip(c.tensors()))
        {
            for i in 0..m.len() {
                assert!((m[i] - (x[i] + y[i] + z[i]) / 3.0).abs() < 1e-15);
            }
        }
        assert!(swa_average(&[]).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.focal_alpha = [0.6, 0.6];
        assert!(cfg.validate().is_err());
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert!(cfg.validate().is_err());
    }
}
