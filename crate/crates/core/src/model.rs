//! The joint model: denoiser, intention head, schedule and normalization.

use serde::{Deserialize, Serialize};

use crate::dataset::NormalizationStats;
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::{reconstruct, reconstruct_traced, NoiseSchedule, ScheduleKind};
use crate::error::Result;
use crate::intention::{IntentionConfig, IntentionNet};
use crate::occlusion::OcclusionMask;
use crate::params::ParamStore;
use crate::rng::{seeded, SeededRng};
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub denoiser: DenoiserConfig,
    pub intention: IntentionConfig,
    /// Diffusion step count `K`.
    pub steps: usize,
    pub schedule: ScheduleKind,
    /// Seed of the parameter initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            intention: IntentionConfig::default(),
            steps: 100,
            schedule: ScheduleKind::Cosine,
            init_seed: 0,
        }
    }
}

/// Layer layouts plus one parameter store shared by both networks.
#[derive(Clone, Debug)]
pub struct OdmModel<S> {
    pub config: ModelConfig,
    pub denoiser: Denoiser,
    pub intention: IntentionNet,
    pub params: ParamStore<S>,
    pub schedule: NoiseSchedule,
    pub stats: NormalizationStats,
}

impl<S: Scalar> OdmModel<S> {
    pub fn new(config: ModelConfig, stats: NormalizationStats) -> Result<Self> {
        let schedule = NoiseSchedule::build(config.steps, config.schedule)?;
        let mut params = ParamStore::new();
        let mut rng = seeded(config.init_seed);
        let denoiser = Denoiser::new(config.denoiser.clone(), &mut params, &mut rng)?;
        let intention = IntentionNet::new(config.intention.clone(), &mut params, &mut rng)?;
        Ok(Self {
            config,
            denoiser,
            intention,
            params,
            schedule,
            stats,
        })
    }

    /// Same layout with a different schedule (e.g. a step-count sweep).
    pub fn with_schedule(&self, schedule: NoiseSchedule) -> Self {
        let mut out = self.clone();
        out.config.steps = schedule.steps();
        out.config.schedule = schedule.kind;
        out.schedule = schedule;
        out
    }

    /// Reverse-chain reconstruction of a normalized window. `x_obs` is the
    /// zero-filled observation; `sampler_mask` selects which entries follow
    /// the network branch, `mask` is what the network is told is occluded.
    pub fn reconstruct_with(
        &self,
        x_obs: &Mat<S>,
        mask: &OcclusionMask,
        sampler_mask: &OcclusionMask,
        rng: &mut SeededRng,
    ) -> Result<Mat<S>> {
        let mut predictor = self.denoiser.condition(&self.params, x_obs, mask)?;
        reconstruct(x_obs, sampler_mask, &mut predictor, &self.schedule, rng)
    }

    pub fn reconstruct(
        &self,
        x_obs: &Mat<S>,
        mask: &OcclusionMask,
        rng: &mut SeededRng,
    ) -> Result<Mat<S>> {
        self.reconstruct_with(x_obs, mask, mask, rng)
    }

    /// [`OdmModel::reconstruct`] with the chain state reported after every step.
    pub fn reconstruct_traced(
        &self,
        x_obs: &Mat<S>,
        mask: &OcclusionMask,
        rng: &mut SeededRng,
        trace: impl FnMut(usize, &Mat<S>),
    ) -> Result<Mat<S>> {
        let mut predictor = self.denoiser.condition(&self.params, x_obs, mask)?;
        reconstruct_traced(x_obs, mask, &mut predictor, &self.schedule, rng, trace)
    }

    pub fn predict_intention(&self, x: &Mat<S>) -> Result<f64> {
        self.intention.predict_intention(&self.params, x)
    }
}
