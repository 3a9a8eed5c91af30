//! Classification and reconstruction metrics, imputation baselines and the
//! occlusion experiment grid.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{normalize_frames, TrajectoryRecord, BBOX_CHANNELS, CENTER_CHANNELS};
use crate::denoiser::{AttentionKind, Conditioning, FusionKind, Modalities};
use crate::error::{OdmError, Result};
use crate::intention::classify;
use crate::model::{ModelConfig, OdmModel};
use crate::occlusion::{
    add_observation_noise, apply_mask, FillMode, OcclusionMask, OcclusionPattern, OcclusionSpec,
};
use crate::rng::{derive_seed, fnv1a, seeded};
use crate::scalar::Scalar;
use crate::tensor::Mat;

fn check_pair(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(OdmError::argument(format!("length mismatch: {a} vs {b}")));
    }
    if a == 0 {
        return Err(OdmError::argument("metric over an empty list"));
    }
    Ok(())
}

/// Counts `(tp, tn, fp, fn)`.
pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<(usize, usize, usize, usize)> {
    check_pair(preds.len(), labels.len())?;
    let mut c = (0, 0, 0, 0);
    for (&p, &y) in preds.iter().zip(labels) {
        match (p != 0, y != 0) {
            (true, true) => c.0 += 1,
            (false, false) => c.1 += 1,
            (true, false) => c.2 += 1,
            (false, true) => c.3 += 1,
        }
    }
    Ok(c)
}

pub fn accuracy(preds: &[u8], labels: &[u8]) -> Result<f64> {
    let (tp, tn, _, _) = confusion(preds, labels)?;
    Ok((tp + tn) as f64 / preds.len() as f64)
}

/// F1 of the positive class; 0 when there are no true positives.
pub fn f1(preds: &[u8], labels: &[u8]) -> Result<f64> {
    let (tp, _, fp, fn_) = confusion(preds, labels)?;
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_pair(scores.len(), labels.len())?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let positives = labels.iter().filter(|&&y| y != 0).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(OdmError::UndefinedMetric("AUC needs both classes".into()));
    }
    // Midranks over tie groups.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let (p, n) = (positives as f64, negatives as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdeChannels {
    Bbox,
    Center,
}

/// Mean per-frame Euclidean error in pixel space over all frames of all
/// sequences. Bbox error averages the two corner distances.
pub fn ade<S: Scalar>(pred: &[Mat<S>], truth: &[Mat<S>], channels: AdeChannels) -> Result<f64> {
    check_pair(pred.len(), truth.len())?;
    let mut total = 0.0;
    let mut frames = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        if p.shape() != t.shape() || p.cols() < CENTER_CHANNELS.end {
            return Err(OdmError::argument(format!(
                "shape {:?} does not match {:?}",
                p.shape(),
                t.shape()
            )));
        }
        for r in 0..p.rows() {
            let d = |c0: usize| {
                let dx = p.get(r, c0).to_f64_lossy() - t.get(r, c0).to_f64_lossy();
                let dy = p.get(r, c0 + 1).to_f64_lossy() - t.get(r, c0 + 1).to_f64_lossy();
                (dx * dx + dy * dy).sqrt()
            };
            total += match channels {
                AdeChannels::Bbox => 0.5 * (d(BBOX_CHANNELS.start) + d(BBOX_CHANNELS.start + 2)),
                AdeChannels::Center => d(CENTER_CHANNELS.start),
            };
            frames += 1;
        }
    }
    Ok(total / frames as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Mean,
    Linear,
    HoldLast,
}

impl FromStr for BaselineKind {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "linear" => Ok(Self::Linear),
            "hold_last" => Ok(Self::HoldLast),
            other => Err(OdmError::argument(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Fill occluded frames of `obs` by a non-learned rule.
pub fn baseline_impute<S: Scalar>(
    obs: &Mat<S>,
    mask: &OcclusionMask,
    kind: BaselineKind,
) -> Result<Mat<S>> {
    if obs.rows() != mask.len() {
        return Err(OdmError::argument("mask and sequence lengths differ"));
    }
    let seen: Vec<usize> = (0..obs.rows()).filter(|&t| !mask.is_occluded(t)).collect();
    if seen.is_empty() {
        return Err(OdmError::argument(
            "cannot impute a fully occluded sequence",
        ));
    }
    let mut out = obs.clone();
    match kind {
        BaselineKind::HoldLast => {
            out = apply_mask(obs, mask, FillMode::HoldLast)?;
            // Leading gaps take the first observed frame.
            let first = obs.row(seen[0]).to_vec();
            for t in 0..seen[0] {
                out.row_mut(t).copy_from_slice(&first);
            }
        }
        BaselineKind::Mean => {
            let n = S::lit(seen.len() as f64);
            let mean: Vec<S> = (0..obs.cols())
                .map(|c| seen.iter().map(|&t| obs.get(t, c)).sum::<S>() / n)
                .collect();
            for t in (0..obs.rows()).filter(|&t| mask.is_occluded(t)) {
                out.row_mut(t).copy_from_slice(&mean);
            }
        }
        BaselineKind::Linear => {
            for t in (0..obs.rows()).filter(|&t| mask.is_occluded(t)) {
                let before = seen.iter().rev().find(|&&s| s < t).copied();
                let after = seen.iter().find(|&&s| s > t).copied();
                let row: Vec<S> = match (before, after) {
                    (Some(a), Some(b)) => {
                        let w = S::lit((t - a) as f64 / (b - a) as f64);
                        (0..obs.cols())
                            .map(|c| obs.get(a, c) + w * (obs.get(b, c) - obs.get(a, c)))
                            .collect()
                    }
                    (Some(a), None) => obs.row(a).to_vec(),
                    (None, Some(b)) => obs.row(b).to_vec(),
                    (None, None) => unreachable!("at least one frame is observed"),
                };
                out.row_mut(t).copy_from_slice(&row);
            }
        }
    }
    Ok(out)
}

/// Experiment toggles applied on top of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Reverse steps use the mask composition; off = network branch only.
    pub diffusion_mask: bool,
    /// Intention reads the reconstruction; off = the zero-filled observation.
    pub diffusion: bool,
    pub noise_std: f64,
    /// Training-time overrides: diffusion step count and network layout.
    /// See [`AblationFlags::variant_config`].
    pub steps: Option<usize>,
    pub masking_block: Option<bool>,
    pub conditioning: Option<Conditioning>,
    pub attention: Option<AttentionKind>,
    pub modalities: Option<Modalities>,
    pub fusion: Option<FusionKind>,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            diffusion_mask: true,
            diffusion: true,
            noise_std: 0.0,
            steps: None,
            masking_block: None,
            conditioning: None,
            attention: None,
            modalities: None,
            fusion: None,
        }
    }
}

impl AblationFlags {
    /// Compact label, `default` when nothing is toggled.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if !self.diffusion_mask {
            parts.push("no_diffusion_mask".to_string());
        }
        if !self.diffusion {
            parts.push("no_diffusion".to_string());
        }
        if self.noise_std != 0.0 {
            parts.push(format!("noise={}", self.noise_std));
        }
        if let Some(k) = self.steps {
            parts.push(format!("K={k}"));
        }
        if self.masking_block == Some(false) {
            parts.push("no_transformer_mask".to_string());
        }
        if let Some(c) = self.conditioning {
            parts.push(format!("conditioning={c}"));
        }
        if let Some(a) = self.attention {
            parts.push(format!("attention={a}"));
        }
        if let Some(m) = self.modalities {
            parts.push(format!("inputs={m}"));
        }
        if let Some(f) = self.fusion {
            parts.push(format!("fusion={f}"));
        }
        if parts.is_empty() {
            "default".into()
        } else {
            parts.join(";")
        }
    }

    /// Whether the flags need their own trained model.
    pub fn needs_training(&self) -> bool {
        self.steps.is_some()
            || self.masking_block.is_some()
            || self.conditioning.is_some()
            || self.attention.is_some()
            || self.modalities.is_some()
            || self.fusion.is_some()
    }

    pub fn variant_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut out = base.clone();
        if let Some(k) = self.steps {
            out.steps = k;
        }
        let c = &mut out.denoiser;
        if let Some(v) = self.masking_block {
            c.masking_block = v;
        }
        if let Some(v) = self.conditioning {
            c.conditioning = v;
        }
        if let Some(v) = self.attention {
            c.attention = v;
        }
        if let Some(v) = self.modalities {
            c.modalities = v;
        }
        if let Some(v) = self.fusion {
            c.fusion = v;
        }
        out
    }
}

/// The toggles of the ablation study, default first.
pub fn standard_ablations() -> Vec<AblationFlags> {
    let base = AblationFlags::default();
    let mut out = vec![
        base.clone(),
        AblationFlags {
            diffusion_mask: false,
            ..base.clone()
        },
        AblationFlags {
            masking_block: Some(false),
            ..base.clone()
        },
        AblationFlags {
            conditioning: Some(Conditioning::Context),
            ..base.clone()
        },
        AblationFlags {
            attention: Some(AttentionKind::Basic),
            ..base.clone()
        },
        AblationFlags {
            diffusion: false,
            ..base.clone()
        },
    ];
    for k in [25, 50, 100, 200] {
        out.push(AblationFlags {
            steps: Some(k),
            ..base.clone()
        });
    }
    for m in ["B", "BC", "BV", "BCV"] {
        out.push(AblationFlags {
            modalities: Some(m.parse().expect("static modality set")),
            ..base.clone()
        });
    }
    for f in [FusionKind::Gate, FusionKind::Concat, FusionKind::Average] {
        out.push(AblationFlags {
            fusion: Some(f),
            ..base.clone()
        });
    }
    for n in [1.0, 2.5, 5.0, 10.0] {
        out.push(AblationFlags {
            noise_std: n,
            ..base.clone()
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub pattern: OcclusionPattern,
    pub length: usize,
    pub flags: String,
    pub acc: f64,
    /// `NaN` when the cell holds a single class.
    pub auc: f64,
    pub f1: f64,
    pub ade_bbox: f64,
    pub ade_center: f64,
    pub ade_center_mean: f64,
    pub ade_center_linear: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ReportCell>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "pattern,length,flags,acc,auc,f1,ade_bbox,ade_center,ade_center_mean,ade_center_linear,n";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                c.pattern,
                c.length,
                c.flags,
                fmt_metric(c.acc),
                fmt_metric(c.auc),
                fmt_metric(c.f1),
                fmt_metric(c.ade_bbox),
                fmt_metric(c.ade_center),
                fmt_metric(c.ade_center_mean),
                fmt_metric(c.ade_center_linear),
                c.n
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        // NaN is not representable in JSON; undefined metrics become null.
        let cells: Vec<serde_json::Value> = self
            .cells
            .iter()
            .map(|c| {
                let num = |v: f64| {
                    if v.is_finite() {
                        serde_json::json!(v)
                    } else {
                        serde_json::Value::Null
                    }
                };
                serde_json::json!({
                    "pattern": c.pattern.short(),
                    "length": c.length,
                    "flags": c.flags,
                    "acc": num(c.acc),
                    "auc": num(c.auc),
                    "f1": num(c.f1),
                    "ade_bbox": num(c.ade_bbox),
                    "ade_center": num(c.ade_center),
                    "ade_center_mean": num(c.ade_center_mean),
                    "ade_center_linear": num(c.ade_center_linear),
                    "n": c.n,
                })
            })
            .collect();
        serde_json::to_string_pretty(&serde_json::json!({ "cells": cells }))
            .expect("report serializes")
    }

    /// Plain-text table: pattern, length, flags, Acc, AUC, F1, ADE.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8} {:>3}  {:<28} {:>6} {:>6} {:>6} {:>10} {:>10}\n",
            "pattern", "len", "flags", "Acc", "AUC", "F1", "ADE bbox", "ADE ctr"
        );
        for c in &self.cells {
            let _ = writeln!(
                s,
                "{:<8} {:>3}  {:<28} {:>6.3} {:>6.3} {:>6.3} {:>10.3} {:>10.3}",
                c.pattern.short(),
                c.length,
                c.flags,
                c.acc,
                c.auc,
                c.f1,
                c.ade_bbox,
                c.ade_center
            );
        }
        s
    }

    pub fn write(&self, csv: &Path, json: &Path) -> Result<()> {
        fs::write(csv, self.to_csv()).map_err(|e| OdmError::io(csv, e))?;
        fs::write(json, self.to_json()).map_err(|e| OdmError::io(json, e))
    }
}

/// One sample prepared for evaluation: normalized truth, mask and observation.
pub struct EvalSample<S> {
    pub truth: Mat<S>,
    pub observed: Mat<S>,
    pub mask: OcclusionMask,
    pub label: u8,
}

/// Evaluation mask for `record`, fixed by its id and the cell.
pub fn eval_mask(
    record: &TrajectoryRecord,
    spec: OcclusionSpec,
    seed: u64,
    t: usize,
) -> Result<OcclusionMask> {
    let tag = match spec.pattern {
        OcclusionPattern::Equidistributed => 1,
        OcclusionPattern::Partial => 2,
    };
    let mut rng = seeded(derive_seed(
        seed,
        &[fnv1a(record.id.as_bytes()), tag, spec.frames as u64],
    ));
    spec.sample(t, &mut rng)
}

/// Clean normalized window, mask, and zero-filled (optionally noisy)
/// normalized observation.
pub fn prepare_sample<S: Scalar>(
    record: &TrajectoryRecord,
    stats: &crate::dataset::NormalizationStats,
    spec: OcclusionSpec,
    noise_std: f64,
    seed: u64,
) -> Result<EvalSample<S>> {
    let window = record.observation_window();
    let truth: Mat<S> = normalize_frames(window, stats);
    let mask = eval_mask(record, spec, seed, window.len())?;
    let observed = if noise_std > 0.0 {
        let raw: Mat<f64> = Mat::from_fn(window.len(), crate::dataset::RAW_DIM, |t, c| {
            window[t].channels()[c]
        });
        let mut rng = seeded(derive_seed(
            seed,
            &[fnv1a(record.id.as_bytes()), 0x6e6f_6973_65],
        ));
        let noisy = add_observation_noise(&raw, noise_std, &mut rng)?;
        Mat::from_fn(noisy.rows(), noisy.cols(), |t, c| {
            S::lit((noisy.get(t, c) - stats.shift[c]) / stats.scale[c])
        })
    } else {
        truth.clone()
    };
    let observed = apply_mask(&observed, &mask, FillMode::Zero)?;
    Ok(EvalSample {
        truth,
        observed,
        mask,
        label: record.label,
    })
}

/// Prediction outputs for a set of records under one occlusion setting.
pub struct CellOutputs<S> {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
    pub reconstructions: Vec<Mat<S>>,
    pub samples: Vec<EvalSample<S>>,
}

/// Reconstruct and classify every record.
pub fn run_cell_outputs<S: Scalar>(
    model: &OdmModel<S>,
    records: &[&TrajectoryRecord],
    spec: OcclusionSpec,
    flags: &AblationFlags,
    seed: u64,
) -> Result<CellOutputs<S>> {
    let mut out = CellOutputs {
        scores: Vec::with_capacity(records.len()),
        labels: Vec::with_capacity(records.len()),
        reconstructions: Vec::with_capacity(records.len()),
        samples: Vec::with_capacity(records.len()),
    };
    for record in records {
        let sample = prepare_sample::<S>(record, &model.stats, spec, flags.noise_std, seed)?;
        let recon = if flags.diffusion {
            let sampler_mask = if flags.diffusion_mask {
                sample.mask.clone()
            } else {
                OcclusionMask::all(sample.mask.len())
            };
            let mut rng = seeded(derive_seed(
                seed,
                &[fnv1a(record.id.as_bytes()), 0x7265_7665_7273_65],
            ));
            model.reconstruct_with(&sample.observed, &sample.mask, &sampler_mask, &mut rng)?
        } else {
            sample.observed.clone()
        };
        out.scores.push(model.predict_intention(&recon)?);
        out.labels.push(record.label);
        out.reconstructions.push(recon);
        out.samples.push(sample);
    }
    Ok(out)
}

fn pixel<S: Scalar>(x: &Mat<S>, stats: &crate::dataset::NormalizationStats) -> Mat<f64> {
    crate::dataset::denormalize(&x.cast::<f64>(), stats)
}

/// Score one `(pattern, length, flags)` cell.
pub fn evaluate_cell<S: Scalar>(
    model: &OdmModel<S>,
    records: &[&TrajectoryRecord],
    spec: OcclusionSpec,
    flags: &AblationFlags,
    seed: u64,
) -> Result<ReportCell> {
    if records.is_empty() {
        return Err(OdmError::argument("evaluation split is empty"));
    }
    let o = run_cell_outputs(model, records, spec, flags, seed)?;
    let preds = o
        .scores
        .iter()
        .map(|&p| classify(p, 0.5))
        .collect::<Result<Vec<_>>>()?;
    let auc_v = match auc(&o.scores, &o.labels) {
        Ok(v) => v,
        Err(OdmError::UndefinedMetric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    let truth: Vec<Mat<f64>> = o
        .samples
        .iter()
        .map(|s| pixel(&s.truth, &model.stats))
        .collect();
    let recon: Vec<Mat<f64>> = o
        .reconstructions
        .iter()
        .map(|r| pixel(r, &model.stats))
        .collect();
    let baseline = |kind| -> Result<f64> {
        let filled = o
            .samples
            .iter()
            .map(|s| {
                Ok(pixel(
                    &baseline_impute(&s.observed, &s.mask, kind)?,
                    &model.stats,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        ade(&filled, &truth, AdeChannels::Center)
    };
    Ok(ReportCell {
        pattern: spec.pattern,
        length: spec.frames,
        flags: flags.label(),
        acc: accuracy(&preds, &o.labels)?,
        auc: auc_v,
        f1: f1(&preds, &o.labels)?,
        ade_bbox: ade(&recon, &truth, AdeChannels::Bbox)?,
        ade_center: ade(&recon, &truth, AdeChannels::Center)?,
        ade_center_mean: baseline(BaselineKind::Mean)?,
        ade_center_linear: baseline(BaselineKind::Linear)?,
        n: records.len(),
    })
}

/// Reject flags that need a differently trained model.
pub fn check_flags<S: Scalar>(model: &OdmModel<S>, flags: &AblationFlags) -> Result<()> {
    if flags.variant_config(&model.config) != model.config {
        return Err(OdmError::config(format!(
            "flags {} need a model trained with that layout",
            flags.label()
        )));
    }
    Ok(())
}

/// Every `(pattern, length)` combination under one flag set, patterns
/// outermost. A zero length yields a single cell per flag set.
pub fn run_occlusion_grid<S: Scalar>(
    model: &OdmModel<S>,
    records: &[&TrajectoryRecord],
    patterns: &[OcclusionPattern],
    lengths: &[usize],
    flags: &AblationFlags,
    seed: u64,
) -> Result<EvalReport> {
    check_flags(model, flags)?;
    let mut report = EvalReport::default();
    let mut zero_done = false;
    for &pattern in patterns {
        for &length in lengths {
            if length == 0 {
                if zero_done {
                    continue;
                }
                zero_done = true;
            }
            let spec = OcclusionSpec::new(pattern, length);
            report
                .cells
                .push(evaluate_cell(model, records, spec, flags, seed)?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_examples() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 0, 0, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.6, 0.4], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(auc(&[0.3, 0.3, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(OdmError::UndefinedMetric(_))
        ));
        assert_eq!(f1(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert_eq!(f1(&[0, 0], &[1, 0]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn ade_offsets() {
        let truth = Mat::<f64>::zeros(3, 7);
        let center = Mat::from_fn(3, 7, |_, c| match c {
            4 => 3.0,
            5 => 4.0,
            _ => 0.0,
        });
        assert_eq!(
            ade(&[center], std::slice::from_ref(&truth), AdeChannels::Center).unwrap(),
            5.0
        );
        let bbox = Mat::from_fn(3, 7, |_, c| match c {
            0 | 2 => 3.0,
            1 | 3 => 4.0,
            _ => 0.0,
        });
        assert_eq!(ade(&[bbox], &[truth], AdeChannels::Bbox).unwrap(), 5.0);
    }

    #[test]
    fn baseline_examples() {
        let obs = Mat::from_fn(3, 1, |t, _| t as f64);
        let mask = OcclusionMask::from_frames(3, &[1], OcclusionPattern::Equidistributed);
        let lin = baseline_impute(&obs, &mask, BaselineKind::Linear).unwrap();
        assert_eq!(lin.get(1, 0), 1.0);
        let mean = baseline_impute(&obs, &mask, BaselineKind::Mean).unwrap();
        assert_eq!(mean.get(1, 0), 1.0);
        let edge = OcclusionMask::from_frames(3, &[0, 1], OcclusionPattern::Partial);
        let flat = baseline_impute(&obs, &edge, BaselineKind::Linear).unwrap();
        assert_eq!(flat.as_slice(), &[2.0, 2.0, 2.0]);
        assert_eq!(
            baseline_impute(&obs, &OcclusionMask::none(3), BaselineKind::HoldLast).unwrap(),
            obs
        );
        assert!(baseline_impute(&obs, &OcclusionMask::all(3), BaselineKind::Mean).is_err());
    }

    #[test]
    fn flag_labels_are_distinct() {
        let a = AblationFlags::default();
        let b = AblationFlags {
            noise_std: 2.5,
            ..AblationFlags::default()
        };
        let c = AblationFlags {
            fusion: Some(FusionKind::Average),
            ..AblationFlags::default()
        };
        assert_eq!(a.label(), "default");
        assert_ne!(b.label(), c.label());
        assert!(c.needs_training());
        assert!(!b.needs_training());
    }
}
