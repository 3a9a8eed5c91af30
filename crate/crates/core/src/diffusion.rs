//! Noise schedules, forward corruption and the occlusion-guided reverse
//! sampler.
//!
//! Schedule tables are held in `f64` regardless of the model scalar; values
//! are converted once per operation.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{OdmError, Result};
use crate::occlusion::OcclusionMask;
use crate::rng::{standard_normal, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Mat;

pub const BETA_MIN: f64 = 1e-6;
pub const BETA_MAX: f64 = 0.999;
/// Required upper bound on `alpha_bar[K]`.
pub const TERMINAL_ALPHA_BAR: f64 = 0.01;
/// Range the final reconstruction is clamped to.
pub const OUTPUT_CLAMP: f64 = 2.0;
pub const COSINE_OFFSET: f64 = 0.008;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
#[derive(Default)]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear {
        beta_start: f64,
        beta_end: f64,
    },
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Cosine => f.write_str("cosine"),
            Self::Linear {
                beta_start,
                beta_end,
            } => write!(f, "linear:{beta_start}:{beta_end}"),
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = OdmError;

    /// `cosine`, `linear` (1e-4 to 0.02) or `linear:<start>:<end>`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["cosine"] => Ok(Self::Cosine),
            ["linear"] => Ok(Self::Linear {
                beta_start: 1e-4,
                beta_end: 0.02,
            }),
            ["linear", a, b] => {
                let parse = |v: &str| {
                    v.parse::<f64>()
                        .map_err(|_| OdmError::config(format!("bad linear schedule bound {v:?}")))
                };
                Ok(Self::Linear {
                    beta_start: parse(a)?,
                    beta_end: parse(b)?,
                })
            }
            _ => Err(OdmError::config(format!("unknown schedule {s:?}"))),
        }
    }
}

/// `beta`, `alpha`, `alpha_bar` and posterior-variance tables. Index `k`
/// runs `1..=K`; slot 0 of `beta`, `alpha` and `posterior_var` is unused
/// and `alpha_bar[0] = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps < 2 {
            return Err(OdmError::argument(format!(
                "K must be at least 2, got {steps}"
            )));
        }
        let raw: Vec<f64> = match kind {
            ScheduleKind::Cosine => {
                let f = |k: usize| {
                    let t = k as f64 / steps as f64;
                    ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * FRAC_PI_2)
                        .cos()
                        .powi(2)
                };
                (1..=steps).map(|k| 1.0 - f(k) / f(k - 1)).collect()
            }
            ScheduleKind::Linear {
                beta_start,
                beta_end,
            } => {
                if !(beta_start > 0.0 && beta_end > 0.0 && beta_start < 1.0 && beta_end < 1.0) {
                    return Err(OdmError::config(format!(
                        "linear schedule bounds must lie in (0, 1), got {beta_start} and {beta_end}"
                    )));
                }
                (0..steps)
                    .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                    .collect()
            }
        };
        Self::from_betas(
            kind,
            raw.into_iter()
                .map(|b| b.clamp(BETA_MIN, BETA_MAX))
                .collect(),
        )
    }

    pub fn cosine(steps: usize) -> Result<Self> {
        Self::build(steps, ScheduleKind::Cosine)
    }

    /// Tables from an explicit `beta[1..=K]`.
    pub fn from_betas(kind: ScheduleKind, betas: Vec<f64>) -> Result<Self> {
        let steps = betas.len();
        if steps < 2 {
            return Err(OdmError::argument(format!(
                "K must be at least 2, got {steps}"
            )));
        }
        if betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(OdmError::config("betas must lie strictly inside (0, 1)"));
        }
        let mut beta = vec![0.0];
        beta.extend_from_slice(&betas);
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; steps + 1];
        for k in 1..=steps {
            alpha_bar[k] = alpha_bar[k - 1] * alpha[k];
        }
        if alpha_bar[steps] >= TERMINAL_ALPHA_BAR {
            return Err(OdmError::config(format!(
                "schedule leaves alpha_bar[{steps}] = {:.4}, which must be below {TERMINAL_ALPHA_BAR}",
                alpha_bar[steps]
            )));
        }
        let mut posterior_var = vec![0.0; steps + 1];
        for k in 1..=steps {
            posterior_var[k] = (1.0 - alpha_bar[k - 1]) / (1.0 - alpha_bar[k]) * beta[k];
        }
        Ok(Self {
            kind,
            steps,
            beta,
            alpha,
            alpha_bar,
            posterior_var,
        })
    }

    /// `K`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.beta[k]
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k]
    }

    pub fn alpha_bar(&self, k: usize) -> f64 {
        self.alpha_bar[k]
    }

    pub fn posterior_var(&self, k: usize) -> f64 {
        self.posterior_var[k]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta[1..]
    }

    fn check_step(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps {
            Err(OdmError::argument(format!(
                "step {k} outside 1..={}",
                self.steps
            )))
        } else {
            Ok(())
        }
    }

    /// `sqrt(alpha_bar[k]) x0 + sqrt(1 - alpha_bar[k]) eps`.
    pub fn forward_sample<S: Scalar>(&self, x0: &Mat<S>, k: usize, eps: &Mat<S>) -> Result<Mat<S>> {
        same_shape(x0, eps)?;
        if k > self.steps {
            return Err(OdmError::argument(format!(
                "step {k} outside 0..={}",
                self.steps
            )));
        }
        let a = S::lit(self.alpha_bar[k].sqrt());
        let b = S::lit((1.0 - self.alpha_bar[k]).sqrt());
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }

    /// Inverse of [`Self::forward_sample`] for a known noise.
    pub fn predict_x0<S: Scalar>(&self, x_k: &Mat<S>, eps: &Mat<S>, k: usize) -> Result<Mat<S>> {
        same_shape(x_k, eps)?;
        self.check_step(k)?;
        let ab = self.alpha_bar[k];
        let a = S::lit((1.0 - ab).sqrt());
        let inv = S::lit(1.0 / ab.sqrt());
        Ok(x_k.zip_map(eps, |x, e| (x - a * e) * inv))
    }

    /// Mean and variance of `q(x_{k-1} | x_k, x_0 = x_obs)`.
    pub fn posterior_observed<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        x_obs: &Mat<S>,
        k: usize,
    ) -> Result<(Mat<S>, f64)> {
        same_shape(x_k, x_obs)?;
        self.check_step(k)?;
        let (c0, ck) = self.posterior_coefficients(k);
        let (c0, ck) = (S::lit(c0), S::lit(ck));
        Ok((
            x_obs.zip_map(x_k, |o, x| c0 * o + ck * x),
            self.posterior_var[k],
        ))
    }

    /// Coefficients of `x_obs` and `x_k` in the posterior mean.
    pub fn posterior_coefficients(&self, k: usize) -> (f64, f64) {
        let ab = self.alpha_bar[k];
        let ab_prev = self.alpha_bar[k - 1];
        let c0 = ab_prev.sqrt() * self.beta[k] / (1.0 - ab);
        let ck = self.alpha[k].sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ck)
    }

    /// Network mean `(x_k - beta_k / sqrt(1 - alpha_bar_k) eps_hat) / sqrt(alpha_k)`.
    pub fn mu_from_eps<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        eps_hat: &Mat<S>,
        k: usize,
    ) -> Result<Mat<S>> {
        same_shape(x_k, eps_hat)?;
        self.check_step(k)?;
        let c = S::lit(self.beta[k] / (1.0 - self.alpha_bar[k]).sqrt());
        let inv = S::lit(1.0 / self.alpha[k].sqrt());
        Ok(x_k.zip_map(eps_hat, |x, e| (x - c * e) * inv))
    }

    /// One reverse step composed entrywise by `mask` (1 = occluded): occluded
    /// entries follow the network branch, observed entries the posterior
    /// branch, both perturbed by the same draw `z` scaled by the posterior
    /// standard deviation.
    pub fn masked_reverse_step_with_noise<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        x_obs: &Mat<S>,
        mask: &Mat<S>,
        eps_hat: &Mat<S>,
        k: usize,
        z: &Mat<S>,
    ) -> Result<Mat<S>> {
        same_shape(x_k, mask)?;
        same_shape(x_k, z)?;
        let mu_net = self.mu_from_eps(x_k, eps_hat, k)?;
        let (mu_obs, var) = self.posterior_observed(x_k, x_obs, k)?;
        let sd = S::lit(var.sqrt());
        let data = (0..x_k.len())
            .map(|i| {
                let m = mask.as_slice()[i];
                let noise = sd * z.as_slice()[i];
                let occ = mu_net.as_slice()[i] + noise;
                let obs = mu_obs.as_slice()[i] + noise;
                m * occ + (S::one() - m) * obs
            })
            .collect();
        Mat::from_vec(x_k.rows(), x_k.cols(), data)
    }

    /// [`Self::masked_reverse_step_with_noise`] drawing `z ~ N(0, I)` from `rng`.
    pub fn masked_reverse_step<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        x_obs: &Mat<S>,
        mask: &Mat<S>,
        eps_hat: &Mat<S>,
        k: usize,
        rng: &mut SeededRng,
    ) -> Result<Mat<S>> {
        let z = standard_normal(x_k.rows(), x_k.cols(), rng);
        self.masked_reverse_step_with_noise(x_k, x_obs, mask, eps_hat, k, &z)
    }

    /// Plain ancestral step `mu_theta + sqrt(posterior_var) z`.
    pub fn network_step<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        eps_hat: &Mat<S>,
        k: usize,
        rng: &mut SeededRng,
    ) -> Result<Mat<S>> {
        let z: Mat<S> = standard_normal(x_k.rows(), x_k.cols(), rng);
        let mu = self.mu_from_eps(x_k, eps_hat, k)?;
        let sd = S::lit(self.posterior_var[k].sqrt());
        Ok(mu.zip_map(&z, |m, z| m + sd * z))
    }

    /// Posterior sample `mu_tilde + sqrt(posterior_var) z`.
    pub fn posterior_step<S: Scalar>(
        &self,
        x_k: &Mat<S>,
        x_obs: &Mat<S>,
        k: usize,
        rng: &mut SeededRng,
    ) -> Result<Mat<S>> {
        let z: Mat<S> = standard_normal(x_k.rows(), x_k.cols(), rng);
        let (mu, var) = self.posterior_observed(x_k, x_obs, k)?;
        let sd = S::lit(var.sqrt());
        Ok(mu.zip_map(&z, |m, z| m + sd * z))
    }
}

fn same_shape<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Result<()> {
    if a.shape() != b.shape() {
        Err(OdmError::argument(format!(
            "shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )))
    } else {
        Ok(())
    }
}

/// `eps_theta(x_k, k)` with the conditioning already bound.
pub trait NoisePredictor<S: Scalar> {
    fn predict(&mut self, x_k: &Mat<S>, k: usize) -> Result<Mat<S>>;
}

impl<S: Scalar, F: FnMut(&Mat<S>, usize) -> Result<Mat<S>>> NoisePredictor<S> for F {
    fn predict(&mut self, x_k: &Mat<S>, k: usize) -> Result<Mat<S>> {
        self(x_k, k)
    }
}

/// Full reverse chain from `x_K ~ N(0, I)`; observed entries follow the
/// posterior branch, occluded ones the network. The `k = 0` output is
/// clamped to `[-OUTPUT_CLAMP, OUTPUT_CLAMP]`.
pub fn reconstruct<S: Scalar, P: NoisePredictor<S> + ?Sized>(
    x_obs: &Mat<S>,
    mask: &OcclusionMask,
    predictor: &mut P,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Mat<S>> {
    reconstruct_traced(x_obs, mask, predictor, schedule, rng, |_, _| {})
}

/// [`reconstruct`] reporting the state after every step: `(K, x_K)` first,
/// `(0, output)` last.
pub fn reconstruct_traced<S: Scalar, P: NoisePredictor<S> + ?Sized>(
    x_obs: &Mat<S>,
    mask: &OcclusionMask,
    predictor: &mut P,
    schedule: &NoiseSchedule,
    rng: &mut SeededRng,
    mut trace: impl FnMut(usize, &Mat<S>),
) -> Result<Mat<S>> {
    if mask.len() != x_obs.rows() {
        return Err(OdmError::argument(format!(
            "mask covers {} frames, sequence has {}",
            mask.len(),
            x_obs.rows()
        )));
    }
    let m = mask.to_matrix(x_obs.cols());
    let mut x: Mat<S> = standard_normal(x_obs.rows(), x_obs.cols(), rng);
    trace(schedule.steps(), &x);
    for k in (1..=schedule.steps()).rev() {
        let eps_hat = predictor.predict(&x, k)?;
        if !eps_hat.all_finite() {
            return Err(OdmError::numerical(k, "non-finite noise estimate"));
        }
        x = schedule.masked_reverse_step(&x, x_obs, &m, &eps_hat, k, rng)?;
        if !x.all_finite() {
            return Err(OdmError::numerical(k, "non-finite sample"));
        }
        if k > 1 {
            trace(k - 1, &x);
        }
    }
    let c = S::lit(OUTPUT_CLAMP);
    let out = x.map(|v| v.max(-c).min(c));
    trace(0, &out);
    Ok(out)
}
