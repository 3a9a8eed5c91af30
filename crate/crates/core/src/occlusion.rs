//! Occlusion masks over observation windows.
//!
//! A mask is row-atomic: frame `t` is either fully occluded (1) or fully
//! observed (0) across all channels.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{BBOX_CHANNELS, CENTER_CHANNELS};
use crate::error::{OdmError, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OcclusionPattern {
    /// `m` frames scattered uniformly without replacement.
    Equidistributed,
    /// One contiguous run of `m` frames.
    Partial,
}

impl OcclusionPattern {
    pub fn short(self) -> &'static str {
        match self {
            Self::Equidistributed => "EO",
            Self::Partial => "PO",
        }
    }
}

impl fmt::Display for OcclusionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short())
    }
}

impl FromStr for OcclusionPattern {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "EO" | "EQUIDISTRIBUTED" => Ok(Self::Equidistributed),
            "PO" | "PARTIAL" => Ok(Self::Partial),
            _ => Err(OdmError::argument(format!(
                "unknown occlusion pattern {s:?}"
            ))),
        }
    }
}

/// Pattern plus occluded-frame count, e.g. `EO3`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OcclusionSpec {
    pub pattern: OcclusionPattern,
    pub frames: usize,
}

impl OcclusionSpec {
    pub fn new(pattern: OcclusionPattern, frames: usize) -> Self {
        Self { pattern, frames }
    }

    pub fn none() -> Self {
        Self::new(OcclusionPattern::Equidistributed, 0)
    }

    pub fn sample(&self, t: usize, rng: &mut SeededRng) -> Result<OcclusionMask> {
        match self.pattern {
            OcclusionPattern::Equidistributed => gen_eo_mask(t, self.frames, rng),
            OcclusionPattern::Partial => gen_po_mask(t, self.frames, rng),
        }
    }
}

impl fmt::Display for OcclusionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.pattern, self.frames)
    }
}

impl FromStr for OcclusionSpec {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
        let (p, n) = s.split_at(split);
        let frames = n
            .parse()
            .map_err(|_| OdmError::argument(format!("occlusion spec {s:?} needs a frame count")))?;
        Ok(Self::new(p.parse()?, frames))
    }
}

/// Per-frame occlusion bits, `true` = occluded. Broadcast over channels by
/// [`OcclusionMask::to_matrix`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionMask {
    occluded: Vec<bool>,
    pattern: OcclusionPattern,
}

impl OcclusionMask {
    pub fn none(t: usize) -> Self {
        Self {
            occluded: vec![false; t],
            pattern: OcclusionPattern::Equidistributed,
        }
    }

    /// Every frame hidden. Not producible by the generators; used by
    /// degenerate-case checks of the sampler.
    pub fn all(t: usize) -> Self {
        Self {
            occluded: vec![true; t],
            pattern: OcclusionPattern::Partial,
        }
    }

    pub fn from_occluded(occluded: Vec<bool>, pattern: OcclusionPattern) -> Self {
        Self { occluded, pattern }
    }

    pub fn from_frames(t: usize, frames: &[usize], pattern: OcclusionPattern) -> Self {
        let mut occluded = vec![false; t];
        for &f in frames {
            occluded[f] = true;
        }
        Self { occluded, pattern }
    }

    pub fn len(&self) -> usize {
        self.occluded.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occluded.is_empty()
    }

    pub fn pattern(&self) -> OcclusionPattern {
        self.pattern
    }

    pub fn is_occluded(&self, t: usize) -> bool {
        self.occluded[t]
    }

    pub fn occluded(&self) -> &[bool] {
        &self.occluded
    }

    /// Number of occluded frames `m`.
    pub fn count(&self) -> usize {
        self.occluded.iter().filter(|o| **o).count()
    }

    /// `T × cols` 0/1 matrix, 1 on occluded rows.
    pub fn to_matrix<S: Scalar>(&self, cols: usize) -> Mat<S> {
        Mat::from_fn(self.len(), cols, |t, _| {
            if self.occluded[t] {
                S::one()
            } else {
                S::zero()
            }
        })
    }
}

fn check_count(t: usize, m: usize) -> Result<()> {
    if m >= t {
        Err(OdmError::argument(format!(
            "cannot occlude {m} of {t} frames; at least one must stay observed"
        )))
    } else {
        Ok(())
    }
}

/// Equidistributed occlusion: `m` distinct frames chosen uniformly.
pub fn gen_eo_mask(t: usize, m: usize, rng: &mut SeededRng) -> Result<OcclusionMask> {
    check_count(t, m)?;
    let frames = index::sample(rng, t, m).into_vec();
    Ok(OcclusionMask::from_frames(
        t,
        &frames,
        OcclusionPattern::Equidistributed,
    ))
}

/// Partial occlusion: frames `s..s+m` with `s ~ U{0..=t-m}`.
pub fn gen_po_mask(t: usize, m: usize, rng: &mut SeededRng) -> Result<OcclusionMask> {
    check_count(t, m)?;
    let start = rng.random_range(0..=t - m);
    let frames: Vec<usize> = (start..start + m).collect();
    Ok(OcclusionMask::from_frames(
        t,
        &frames,
        OcclusionPattern::Partial,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FillMode {
    #[default]
    Zero,
    /// Repeat the most recent observed frame; leading gaps fall back to zero.
    HoldLast,
}

impl FromStr for FillMode {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "hold_last" => Ok(Self::HoldLast),
            other => Err(OdmError::argument(format!("unknown fill mode {other:?}"))),
        }
    }
}

/// Replace occluded rows of `x` according to `fill`.
pub fn apply_mask<S: Scalar>(x: &Mat<S>, mask: &OcclusionMask, fill: FillMode) -> Result<Mat<S>> {
    if x.rows() != mask.len() {
        return Err(OdmError::argument(format!(
            "mask covers {} frames, sequence has {}",
            mask.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    let mut last: Option<usize> = None;
    for t in 0..x.rows() {
        if !mask.is_occluded(t) {
            last = Some(t);
            continue;
        }
        match (fill, last) {
            (FillMode::HoldLast, Some(src)) => {
                let row = x.row(src).to_vec();
                out.row_mut(t).copy_from_slice(&row);
            }
            _ => out.row_mut(t).fill(S::zero()),
        }
    }
    Ok(out)
}

/// Add i.i.d. Gaussian noise of standard deviation `sigma` to the bbox and
/// center channels of a pixel-space `T × 7` window. Speed is untouched.
pub fn add_observation_noise<S: Scalar>(
    x: &Mat<S>,
    sigma: f64,
    rng: &mut SeededRng,
) -> Result<Mat<S>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(OdmError::argument(format!(
            "noise std must be non-negative, got {sigma}"
        )));
    }
    let mut out = x.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for t in 0..out.rows() {
        for c in BBOX_CHANNELS.chain(CENTER_CHANNELS) {
            let z: f64 = StandardNormal.sample(rng);
            let v = out.get(t, c) + S::lit(sigma * z);
            out.set(t, c, v);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn eo_and_po_counts() {
        let mut rng = seeded(0);
        assert_eq!(gen_eo_mask(15, 0, &mut rng).unwrap().count(), 0);
        let po = gen_po_mask(15, 14, &mut rng).unwrap();
        let free: Vec<usize> = (0..15).filter(|&t| !po.is_occluded(t)).collect();
        assert!(free == [0] || free == [14]);
        assert!(matches!(
            gen_eo_mask(15, 15, &mut rng),
            Err(OdmError::Argument(_))
        ));
        assert!(matches!(
            gen_po_mask(15, 20, &mut rng),
            Err(OdmError::Argument(_))
        ));
    }

    #[test]
    fn zero_fill_and_hold_last() {
        let x = Mat::from_fn(4, 2, |t, c| (t * 10 + c + 1) as f64);
        let mask = OcclusionMask::from_frames(4, &[0, 2, 3], OcclusionPattern::Equidistributed);
        let z = apply_mask(&x, &mask, FillMode::Zero).unwrap();
        assert_eq!(z.row(0), &[0.0, 0.0]);
        assert_eq!(z.row(1), x.row(1));
        let h = apply_mask(&x, &mask, FillMode::HoldLast).unwrap();
        assert_eq!(h.row(0), &[0.0, 0.0]);
        assert_eq!(h.row(2), x.row(1));
        assert_eq!(h.row(3), x.row(1));
        assert!(apply_mask(&x, &OcclusionMask::none(3), FillMode::Zero).is_err());
    }

    #[test]
    fn spec_round_trip() {
        let s: OcclusionSpec = "PO10".parse().unwrap();
        assert_eq!(s, OcclusionSpec::new(OcclusionPattern::Partial, 10));
        assert_eq!(s.to_string(), "PO10");
        assert!("XX3".parse::<OcclusionSpec>().is_err());
    }

    #[test]
    fn noise_skips_speed() {
        let x = Mat::<f64>::zeros(15, 7);
        let n = add_observation_noise(&x, 2.0, &mut seeded(1)).unwrap();
        assert!((0..15).all(|t| n.get(t, 6) == 0.0));
        assert!(n.max_abs() > 0.0);
        assert_eq!(add_observation_noise(&x, 0.0, &mut seeded(1)).unwrap(), x);
        assert!(add_observation_noise(&x, -1.0, &mut seeded(1)).is_err());
    }
}
