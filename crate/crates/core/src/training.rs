//! Joint optimization of the denoiser and the intention head.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::dataset::{normalize_frames, DatasetManifest, Split, TrajectoryRecord, RAW_DIM};
use crate::diffusion::OUTPUT_CLAMP;
use crate::error::{OdmError, Result};
use crate::evaluation::{
    accuracy, ade, auc, evaluate_cell, f1, run_cell_outputs, AblationFlags, AdeChannels, EvalReport,
};
use crate::graph::{bce_value, Graph};
use crate::intention::classify;
use crate::model::OdmModel;
use crate::nn::Dropout;
use crate::occlusion::{add_observation_noise, apply_mask, FillMode, OcclusionMask, OcclusionSpec};
use crate::params::{Adam, ParamGrads};
use crate::rng::{derive_seed, seeded, standard_normal, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub occlusion: OcclusionSpec,
    /// Pixel-space observation noise added during training.
    pub noise_std: f64,
    /// Validate every this many epochs; the final epoch is always validated.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch: 64,
            lambda: 1.2,
            epochs: 50,
            grad_clip: 1.0,
            seed: 0,
            occlusion: OcclusionSpec::new(crate::occlusion::OcclusionPattern::Equidistributed, 3),
            noise_std: 0.0,
            val_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(OdmError::config("lr must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(OdmError::config("lambda must be non-negative"));
        }
        if self.batch == 0 {
            return Err(OdmError::config("batch must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(OdmError::config("grad_clip must be positive"));
        }
        if self.val_every == 0 {
            return Err(OdmError::config("val_every must be at least 1"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(OdmError::config("noise_std must be non-negative"));
        }
        Ok(())
    }
}

/// Mean squared difference.
pub fn loss_simple<S: Scalar>(eps: &Mat<S>, eps_hat: &Mat<S>) -> Result<f64> {
    if eps.shape() != eps_hat.shape() {
        return Err(OdmError::argument("loss_simple shapes differ"));
    }
    let sq: f64 = eps
        .as_slice()
        .iter()
        .zip(eps_hat.as_slice())
        .map(|(&a, &b)| (a - b).to_f64_lossy().powi(2))
        .sum();
    Ok(sq / eps.len() as f64)
}

/// Binary cross-entropy with `y_hat` clamped to `[1e-7, 1 - 1e-7]`.
pub fn loss_intent(y: u8, y_hat: f64) -> f64 {
    bce_value(f64::from(y), y_hat)
}

pub fn total_loss(l_simp: f64, l_int: f64, lambda: f64) -> f64 {
    l_simp + lambda * l_int
}

/// One training sample: clean normalized window, its mask and label.
#[derive(Clone, Debug)]
pub struct TrainExample<S> {
    pub id: String,
    pub x0: Mat<S>,
    /// Normalized observation before masking (noisy in robustness runs).
    pub observed: Mat<S>,
    pub mask: OcclusionMask,
    pub label: u8,
}

impl<S: Scalar> TrainExample<S> {
    pub fn new(id: impl Into<String>, x0: Mat<S>, mask: OcclusionMask, label: u8) -> Self {
        Self {
            id: id.into(),
            observed: x0.clone(),
            x0,
            mask,
            label,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub l_simp: f64,
    pub l_int: f64,
    pub total: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

/// Per-sample loss graph. Returns `(l_simp, l_int, total)` nodes.
pub struct SampleLoss {
    pub l_simp: crate::graph::Var,
    pub l_int: crate::graph::Var,
    pub total: crate::graph::Var,
}

/// Build the joint loss for one example at step `k` with noise `eps`.
///
/// The intention branch reads the one-step estimate of `x0` on occluded
/// frames (clamped to the output range) and the observation elsewhere.
pub fn sample_loss<S: Scalar>(
    g: &mut Graph<'_, S>,
    model: &OdmModel<S>,
    ex: &TrainExample<S>,
    k: usize,
    eps: &Mat<S>,
    lambda: f64,
    dropout: &mut Dropout<'_>,
) -> Result<SampleLoss> {
    let sched = &model.schedule;
    let x_k = sched.forward_sample(&ex.x0, k, eps)?;
    let x_obs = apply_mask(&ex.observed, &ex.mask, FillMode::Zero)?;
    let xk = g.constant(x_k);
    let xo = g.constant(x_obs.clone());
    let eps_hat = model.denoiser.forward(g, xk, xo, &ex.mask, k, dropout)?;
    let target = g.constant(eps.clone());
    let l_simp = g.mse(eps_hat, target);

    let ab = sched.alpha_bar(k);
    let scaled = g.scale(eps_hat, S::lit(-(1.0 - ab).sqrt()));
    let diff = g.add(xk, scaled);
    let x0_hat = g.scale(diff, S::lit(1.0 / ab.sqrt()));
    let c = S::lit(OUTPUT_CLAMP);
    let x0_hat = g.clamp(x0_hat, -c, c);
    let m = g.constant(ex.mask.to_matrix(RAW_DIM));
    let occluded = g.mul(x0_hat, m);
    let kept = g.constant(x_obs);
    let surrogate = g.add(occluded, kept);
    let p = model.intention.forward(g, surrogate, dropout);
    let l_int = g.bce(p, S::lit(f64::from(ex.label)));
    let weighted = g.scale(l_int, S::lit(lambda));
    let total = g.add(l_simp, weighted);
    Ok(SampleLoss {
        l_simp,
        l_int,
        total,
    })
}

/// Accumulate mean gradients over `batch`; no optimizer update.
pub fn batch_gradients<S: Scalar>(
    model: &OdmModel<S>,
    batch: &[TrainExample<S>],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<(ParamGrads<S>, StepMetrics)> {
    if batch.is_empty() {
        return Err(OdmError::argument("empty batch"));
    }
    let mut grads = ParamGrads::zeros_like(&model.params);
    let weight = S::lit(1.0 / batch.len() as f64);
    let mut metrics = StepMetrics::default();
    let rate = model.config.denoiser.dropout;
    for ex in batch {
        let k = rng.random_range(1..=model.schedule.steps());
        let eps = standard_normal(ex.x0.rows(), ex.x0.cols(), rng);
        let mut g = Graph::new(&model.params);
        let mut dropout = Dropout::train(rate, rng);
        let loss = sample_loss(&mut g, model, ex, k, &eps, cfg.lambda, &mut dropout)?;
        let total = g.value(loss.total).item().to_f64_lossy();
        if !total.is_finite() {
            let ids: Vec<&str> = batch.iter().map(|e| e.id.as_str()).collect();
            return Err(OdmError::numerical(
                k,
                format!("non-finite loss on {} (batch {:?})", ex.id, ids),
            ));
        }
        metrics.l_simp += g.value(loss.l_simp).item().to_f64_lossy();
        metrics.l_int += g.value(loss.l_int).item().to_f64_lossy();
        metrics.total += total;
        let back = g.backward(loss.total);
        g.accumulate_param_grads(&back, weight, &mut grads);
    }
    let n = batch.len() as f64;
    metrics.l_simp /= n;
    metrics.l_int /= n;
    metrics.total /= n;
    Ok((grads, metrics))
}

/// One optimizer step on `batch` with global-norm clipping.
pub fn train_step<S: Scalar>(
    model: &mut OdmModel<S>,
    adam: &mut Adam<S>,
    batch: &[TrainExample<S>],
    cfg: &TrainConfig,
    rng: &mut SeededRng,
) -> Result<StepMetrics> {
    let (mut grads, mut metrics) = batch_gradients(model, batch, cfg, rng)?;
    metrics.grad_norm = grads.clip_global_norm(S::lit(cfg.grad_clip)).to_f64_lossy();
    adam.step(&mut model.params, &grads);
    Ok(metrics)
}

/// Training example for `record` with a fresh mask drawn from `rng`.
pub fn make_example<S: Scalar>(
    record: &TrajectoryRecord,
    model: &OdmModel<S>,
    spec: OcclusionSpec,
    noise_std: f64,
    rng: &mut SeededRng,
) -> Result<TrainExample<S>> {
    let window = record.observation_window();
    let x0: Mat<S> = normalize_frames(window, &model.stats);
    let observed = if noise_std > 0.0 {
        let raw: Mat<f64> = Mat::from_fn(window.len(), RAW_DIM, |t, c| window[t].channels()[c]);
        let noisy = add_observation_noise(&raw, noise_std, rng)?;
        let st = &model.stats;
        Mat::from_fn(noisy.rows(), RAW_DIM, |t, c| {
            S::lit((noisy.get(t, c) - st.shift[c]) / st.scale[c])
        })
    } else {
        x0.clone()
    };
    Ok(TrainExample {
        id: record.id.clone(),
        mask: spec.sample(window.len(), rng)?,
        x0,
        observed,
        label: record.label,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_simp: f64,
    pub l_int: f64,
    pub val_acc: f64,
    pub val_auc: f64,
    pub val_f1: f64,
    pub val_ade_bbox: f64,
    pub val_ade_center: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,l_simp,l_int,val_acc,val_auc,val_f1,val_ade_bbox,val_ade_center";

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.8},{:.8},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.epoch,
            r.l_simp,
            r.l_int,
            r.val_acc,
            r.val_auc,
            r.val_f1,
            r.val_ade_bbox,
            r.val_ade_center
        );
    }
    s
}

/// Classification and reconstruction scores on a record set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScores {
    pub acc: f64,
    /// `NaN` for single-class sets.
    pub auc: f64,
    pub f1: f64,
    pub ade_bbox: f64,
    pub ade_center: f64,
}

/// Full reverse-chain evaluation of `records` under `spec`.
pub fn score_records<S: Scalar>(
    model: &OdmModel<S>,
    records: &[&TrajectoryRecord],
    spec: OcclusionSpec,
    seed: u64,
) -> Result<SplitScores> {
    let o = run_cell_outputs(model, records, spec, &AblationFlags::default(), seed)?;
    let preds = o
        .scores
        .iter()
        .map(|&p| classify(p, 0.5))
        .collect::<Result<Vec<_>>>()?;
    let pixel = |m: &Mat<S>| crate::dataset::denormalize(&m.cast::<f64>(), &model.stats);
    let truth: Vec<Mat<f64>> = o.samples.iter().map(|s| pixel(&s.truth)).collect();
    let recon: Vec<Mat<f64>> = o.reconstructions.iter().map(pixel).collect();
    Ok(SplitScores {
        acc: accuracy(&preds, &o.labels)?,
        auc: auc(&o.scores, &o.labels).unwrap_or(f64::NAN),
        f1: f1(&preds, &o.labels)?,
        ade_bbox: ade(&recon, &truth, AdeChannels::Bbox)?,
        ade_center: ade(&recon, &truth, AdeChannels::Center)?,
    })
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    /// Epoch of the kept checkpoint; 0 = initial parameters.
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Train from `model` for `cfg.epochs`, validating on the val split and
/// keeping the best-val-F1 parameters at `out_dir/checkpoint.json`. The
/// metrics log goes to `out_dir/metrics.csv`. On return `model` holds the
/// kept parameters.
pub fn fit<S: Scalar>(
    model: &mut OdmModel<S>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<FitOutcome> {
    fit_with(model, manifest, cfg, out_dir, |_| {})
}

/// [`fit`] with a per-epoch callback.
pub fn fit_with<S: Scalar>(
    model: &mut OdmModel<S>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<FitOutcome> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| OdmError::io(out_dir, e))?;
    let ckpt = out_dir.join("checkpoint.json");
    let log = out_dir.join("metrics.csv");
    let train = manifest.split_records(Split::Train)?;
    let val = manifest.split_records(Split::Val)?;
    if cfg.epochs > 0 && train.is_empty() {
        return Err(OdmError::argument("train split is empty"));
    }

    checkpoint::save(model, &ckpt)?;
    let write_log = |rows: &[EpochMetrics]| {
        fs::write(&log, metrics_csv(rows)).map_err(|e| OdmError::io(&log, e))
    };
    let mut history = Vec::new();
    write_log(&history)?;

    let mut adam = Adam::new(&model.params, cfg.lr);
    let mut rng = seeded(derive_seed(cfg.seed, &[0x7472_6169_6e]));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize)> = None;
    let mut best_params = model.params.clone();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut mask_rng = seeded(derive_seed(cfg.seed, &[0x6d61_736b, epoch as u64]));
        let examples = order
            .iter()
            .map(|&i| make_example(train[i], model, cfg.occlusion, cfg.noise_std, &mut mask_rng))
            .collect::<Result<Vec<_>>>()?;
        let (mut l_simp, mut l_int, mut steps) = (0.0, 0.0, 0usize);
        for batch in examples.chunks(cfg.batch) {
            let m = train_step(model, &mut adam, batch, cfg, &mut rng)?;
            l_simp += m.l_simp * batch.len() as f64;
            l_int += m.l_int * batch.len() as f64;
            steps += batch.len();
        }
        let mut row = EpochMetrics {
            epoch,
            l_simp: l_simp / steps as f64,
            l_int: l_int / steps as f64,
            val_acc: f64::NAN,
            val_auc: f64::NAN,
            val_f1: f64::NAN,
            val_ade_bbox: f64::NAN,
            val_ade_center: f64::NAN,
        };
        let validate = !val.is_empty() && (epoch % cfg.val_every == 0 || epoch == cfg.epochs);
        if validate {
            let s = score_records(model, &val, cfg.occlusion, cfg.seed)?;
            row.val_acc = s.acc;
            row.val_auc = s.auc;
            row.val_f1 = s.f1;
            row.val_ade_bbox = s.ade_bbox;
            row.val_ade_center = s.ade_center;
            if best.is_none_or(|(f, _)| s.f1 > f) {
                best = Some((s.f1, epoch));
                best_params = model.params.clone();
                checkpoint::save(model, &ckpt)?;
            }
        } else if val.is_empty() {
            // Without a validation split the latest epoch is kept.
            best = Some((f64::NAN, epoch));
            best_params = model.params.clone();
            checkpoint::save(model, &ckpt)?;
        }
        on_epoch(&row);
        history.push(row);
        write_log(&history)?;
    }
    model.params = best_params;
    Ok(FitOutcome {
        checkpoint: ckpt,
        metrics_log: log,
        best_epoch: best.map_or(0, |(_, e)| e),
        history,
    })
}

/// Evaluate every flag set in `suite` on `records` under `spec`. Flag
/// sets that change the layout or step count get their own model trained
/// on `manifest` with `cfg`, under `work_dir/<index>`; the rest reuse `base`.
pub fn run_ablations<S: Scalar>(
    base: &OdmModel<S>,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    suite: &[AblationFlags],
    records: &[&TrajectoryRecord],
    spec: OcclusionSpec,
    work_dir: &Path,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    for (i, flags) in suite.iter().enumerate() {
        let variant = flags.variant_config(&base.config);
        let cell = if variant == base.config {
            evaluate_cell(base, records, spec, flags, cfg.seed)?
        } else {
            let mut model = OdmModel::<S>::new(variant, base.stats.clone())?;
            fit(
                &mut model,
                manifest,
                cfg,
                &work_dir.join(format!("variant-{i:02}")),
            )?;
            evaluate_cell(&model, records, spec, flags, cfg.seed)?
        };
        report.cells.push(cell);
    }
    Ok(report)
}
