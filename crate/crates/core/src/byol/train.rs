//! Self-supervised training of the encoder on a baseline dataset.
//!
//! Each step draws a batch of patches, makes two augmented views of every
//! patch, pushes both through the online branch (encoder -> projector ->
//! predictor) on the tape and through the target branch (encoder ->
//! projector, no gradient), and regresses the online predictions onto the
//! normalized target projections with the symmetrized cosine loss. The
//! target trails the online weights as an exponential moving average.

use super::augment::{augment, AugmentationConfig};
use super::model::EncoderModel;
use super::net::{ByolNets, Encoder, Mlp};
use crate::peak_extract::PatchDataset;
use crate::tensor::{ops, Tape, Tensor};
use crate::util;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// EMA decay for the target branch.
    pub tau: f64,
    /// Patch pairs sampled per epoch; `None` = dataset size capped at 5000.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    /// Stop once the confidence-summation curve plateaus.
    pub early_stop: bool,
    pub plateau_window: usize,
    /// Trailing-window spread threshold as a fraction of the curve's rise.
    pub plateau_frac: f64,
    pub n_probe: usize,
    pub n_candidates: usize,
    pub augment: AugmentationConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 3e-3,
            tau: 0.99,
            steps_per_epoch: None,
            seed: 0,
            early_stop: false,
            plateau_window: 20,
            plateau_frac: 0.05,
            n_probe: 100,
            n_candidates: 10,
            augment: AugmentationConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let invalid = |field: &str, reason: String| {
            Err(Error::ConfigInvalid {
                field: field.into(),
                reason,
            })
        };
        if self.batch_size == 0 {
            return invalid("batch_size", "must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return invalid("tau", format!("must be in (0, 1), got {}", self.tau));
        }
        if !(self.learning_rate > 0.0) {
            return invalid("learning_rate", "must be > 0".into());
        }
        if self.n_candidates < 2 {
            return invalid("n_candidates", "must be >= 2".into());
        }
        if self.plateau_window == 0 {
            return invalid("plateau_window", "must be >= 1".into());
        }
        Ok(())
    }

    pub fn effective_steps(&self, dataset_len: usize) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| dataset_len.min(5000))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss_mean: f64,
    pub confidence_sum: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub rows: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn confidence_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.confidence_sum).collect()
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let csv_err = |e: csv::Error| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "loss_mean", "confidence_sum", "wall_ms"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record(&[
                r.epoch.to_string(),
                r.loss_mean.to_string(),
                r.confidence_sum.to_string(),
                r.wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path.to_path_buf(), e))?;
        Ok(())
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<TrainingLog> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(Error::MissingFile {
                path: path.to_path_buf(),
            });
        }
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Malformed {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| Error::Malformed {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            let bad = || Error::Malformed {
                path: path.to_path_buf(),
                reason: format!("bad log row {record:?}"),
            };
            rows.push(EpochLog {
                epoch: record[0].parse().map_err(|_| bad())?,
                loss_mean: record[1].parse().map_err(|_| bad())?,
                confidence_sum: record[2].parse().map_err(|_| bad())?,
                wall_ms: record[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(TrainingLog { rows })
    }
}

/// The per-view-pair regression loss: `2 - 2 cos(l2n(a), l2n(b))`, in [0, 4]
/// once symmetrized over the two views (each pair contributes [0, 2]... the
/// single-pair value is in [0, 4] at antiparallel inputs counted over both
/// views; see the training step).
pub fn byol_pair_loss(online_pred: &[f32], target_proj: &[f32]) -> Result<f64> {
    if online_pred.len() != target_proj.len() {
        return Err(Error::ShapeMismatch {
            op: "byol_loss",
            details: format!("{} vs {}", online_pred.len(), target_proj.len()),
        });
    }
    let norm = |v: &[f32]| -> f64 { v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt() };
    let na = norm(online_pred);
    let nb = norm(target_proj);
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::ZeroVector {
            context: "byol_loss on a (near) zero vector".into(),
        });
    }
    let dot: f64 = online_pred
        .iter()
        .zip(target_proj)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum();
    Ok(2.0 - 2.0 * dot / (na * nb))
}

fn batch_tensor(patches: &[&crate::peak_extract::PeakPatch]) -> Tensor<f32> {
    let p = patches[0].size;
    let mut data = Vec::with_capacity(patches.len() * p * p);
    for patch in patches {
        data.extend_from_slice(&patch.pixels);
    }
    Tensor::new(&[patches.len(), 1, p, p], data).expect("square patches")
}

/// Target-branch forward (no gradient): normalized projections.
fn target_forward(nets: &ByolNets<f32>, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    let emb = nets.target_enc.forward(x)?;
    let proj = nets.target_proj.forward(&emb)?;
    ops::l2_normalize_forward(&proj)
}

/// One optimization step over a batch of patch pairs. Returns the mean
/// symmetrized loss per pair (in [0, 4]).
fn train_step(
    nets: &mut ByolNets<f32>,
    view1: Tensor<f32>,
    view2: Tensor<f32>,
    lr: f32,
    tau: f32,
) -> Result<f64> {
    let n = view1.shape()[0] as f64;
    let t1 = target_forward(nets, &view1)?;
    let t2 = target_forward(nets, &view2)?;

    let mut tape: Tape<f32> = Tape::new();
    let enc_vars = nets.online_enc.leaves(&mut tape);
    let proj_vars = nets.online_proj.leaves(&mut tape);
    let pred_vars = nets.predictor.leaves(&mut tape);

    let branch = |tape: &mut Tape<f32>, view: Tensor<f32>, target: Tensor<f32>| -> Result<_> {
        let x = tape.leaf(view);
        let emb = Encoder::forward_on(tape, &enc_vars, x)?;
        let proj = Mlp::forward_on(tape, &proj_vars, emb)?;
        let pred = Mlp::forward_on(tape, &pred_vars, proj)?;
        let pred_n = tape.l2_normalize(pred)?;
        let tgt = tape.leaf(target);
        let prod = tape.mul(pred_n, tgt)?;
        let dots = tape.sum_all(prod);
        // mean over the batch of (2 - 2 <p, t>)
        Ok(tape.affine(dots, -2.0 / n, 2.0))
    };
    let loss1 = branch(&mut tape, view1, t2)?;
    let loss2 = branch(&mut tape, view2, t1)?;
    let loss = tape.add(loss1, loss2)?;
    let loss_value = f64::from(tape.value(loss).item());

    let grads = tape.backward(loss)?;
    let var_ids = [
        enc_vars.w1,
        enc_vars.b1,
        enc_vars.w2,
        enc_vars.b2,
        enc_vars.w3,
        enc_vars.b3,
        proj_vars.w1,
        proj_vars.b1,
        proj_vars.w2,
        proj_vars.b2,
        pred_vars.w1,
        pred_vars.b1,
        pred_vars.w2,
        pred_vars.b2,
    ];
    for (param, id) in nets.online_params_mut().into_iter().zip(var_ids) {
        if let Some(g) = grads.get(id) {
            param.sgd_step(g, lr)?;
        }
    }
    nets.ema_update(tau)?;
    Ok(loss_value / 2.0)
}

/// Confidence summation (epoch-selection criterion). For each probe patch:
/// embed one transformed view among `n_candidates - 1` random distractors;
/// if the view is not the probe's nearest neighbor score -1, otherwise
/// score the margin `(D2 - D1) / D2` of the two smallest distances.
/// The result sums `n_probe` scores and lies in [-n_probe, n_probe].
pub fn confidence_sum(
    model: &EncoderModel,
    dataset: &PatchDataset,
    rng: &mut ChaCha8Rng,
    n_probe: usize,
    n_candidates: usize,
    aug: &AugmentationConfig,
) -> Result<f64> {
    if dataset.len() < n_candidates + 1 {
        return Err(Error::EmptyDataset {
            context: format!(
                "confidence probes need at least {} patches, dataset has {}",
                n_candidates + 1,
                dataset.len()
            ),
        });
    }
    let mut total = 0.0f64;
    for _ in 0..n_probe {
        let probe_idx = rng.gen_range(0..dataset.len());
        let probe = &dataset.patches[probe_idx];
        let view = augment(probe, aug, rng);

        let mut candidates = Vec::with_capacity(n_candidates);
        candidates.push(model.embed_one(&view));
        for _ in 0..n_candidates - 1 {
            let mut idx = rng.gen_range(0..dataset.len());
            while idx == probe_idx {
                idx = rng.gen_range(0..dataset.len());
            }
            candidates.push(model.embed_one(&dataset.patches[idx]));
        }
        let anchor = model.embed_one(probe);
        let dist = |v: &[f32]| -> f64 {
            anchor
                .iter()
                .zip(v)
                .map(|(&a, &b)| {
                    let d = f64::from(a) - f64::from(b);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut best = (f64::INFINITY, 0usize);
        let mut second = f64::INFINITY;
        for (i, cand) in candidates.iter().enumerate() {
            let d = dist(cand);
            if d < best.0 {
                second = best.0;
                best = (d, i);
            } else if d < second {
                second = d;
            }
        }
        total += if best.1 != 0 {
            -1.0
        } else if second > 0.0 {
            (second - best.0) / second
        } else {
            0.0
        };
    }
    Ok(total)
}

/// Train the representation model on a baseline dataset. Deterministic in
/// `cfg.seed`; the fully connected heads are discarded from the returned
/// model.
pub fn train_encoder(
    dataset: &PatchDataset,
    cfg: &TrainingConfig,
) -> Result<(EncoderModel, TrainingLog)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset {
            context: "training requires a non-empty baseline dataset".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut nets: ByolNets<f32> = ByolNets::init(&mut rng);
    let mut log = TrainingLog::default();

    let steps_per_epoch = cfg.effective_steps(dataset.len());
    let n_batches = steps_per_epoch.div_ceil(cfg.batch_size);
    let lr = cfg.learning_rate as f32;
    let tau = cfg.tau as f32;

    let mut epochs_trained = 0usize;
    for epoch in 0..cfg.epochs {
        let epoch_start = std::time::Instant::now();
        let mut loss_sum = 0.0f64;
        for step in 0..n_batches {
            let remaining = steps_per_epoch - step * cfg.batch_size;
            let batch = remaining.min(cfg.batch_size);
            let mut v1 = Vec::with_capacity(batch);
            let mut v2 = Vec::with_capacity(batch);
            for _ in 0..batch {
                let patch = &dataset.patches[rng.gen_range(0..dataset.len())];
                v1.push(augment(patch, &cfg.augment, &mut rng));
                v2.push(augment(patch, &cfg.augment, &mut rng));
            }
            let x1 = batch_tensor(&v1.iter().collect::<Vec<_>>());
            let x2 = batch_tensor(&v2.iter().collect::<Vec<_>>());
            let loss = train_step(&mut nets, x1, x2, lr, tau)?;
            if !loss.is_finite() {
                return Err(Error::DivergedLoss { epoch, step });
            }
            loss_sum += loss;
        }
        epochs_trained = epoch + 1;

        let snapshot = EncoderModel {
            encoder: nets.online_enc.clone(),
            patch_size: dataset.patch_size,
            seed: cfg.seed,
            epochs_trained,
            training_set_id: dataset.dataset_id.clone(),
        };
        let mut probe_rng =
            ChaCha8Rng::seed_from_u64(util::derive_seed(cfg.seed, &format!("probe-{epoch}")));
        let conf = confidence_sum(
            &snapshot,
            dataset,
            &mut probe_rng,
            cfg.n_probe,
            cfg.n_candidates,
            &cfg.augment,
        )?;
        log.rows.push(EpochLog {
            epoch,
            loss_mean: loss_sum / n_batches as f64,
            confidence_sum: conf,
            wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
        });

        if cfg.early_stop {
            let curve = log.confidence_curve();
            if crate::tune::confidence_plateau(&curve, cfg.plateau_window, cfg.plateau_frac)
                .is_some()
            {
                break;
            }
        }
    }

    let model = EncoderModel {
        encoder: nets.online_enc,
        patch_size: dataset.patch_size,
        seed: cfg.seed,
        epochs_trained,
        training_set_id: dataset.dataset_id.clone(),
    };
    if !model.all_weights_finite() {
        return Err(Error::DivergedLoss {
            epoch: epochs_trained,
            step: 0,
        });
    }
    Ok((model, log))
}
