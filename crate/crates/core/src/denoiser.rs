//! The noise-estimation network.
//!
//! Observation path: masked bbox / center / speed channels each pass through
//! an MLP with positional encoding, a GRU and an additive attention context;
//! the three feature maps are fused into `H`, and `X_obs_k = H + MLP_K(k)`.
//!
//! Noise path: `x_k` is projected to the model width and runs through
//! AdaLN-conditioned encoder blocks, the occlusion masking block, decoder
//! blocks and a linear head back to the raw channels.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBOX_CHANNELS, CENTER_CHANNELS, OBS_LEN, RAW_DIM, SPEED_CHANNEL};
use crate::diffusion::NoisePredictor;
use crate::error::{OdmError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{
    positional_encoding, sinusoidal, Dropout, Linear, Mlp, MultiHeadAttention, TransformerLayer,
};
use crate::occlusion::OcclusionMask;
use crate::params::{ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    #[default]
    Gate,
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// Deformable temporal then spatial attention.
    #[default]
    Deformable,
    /// Plain temporal self-attention followed by a gated feed-forward layer.
    Basic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    /// `X_obs_k` regresses the AdaLN parameters.
    #[default]
    Adaln,
    /// `X_obs_k` is concatenated with the projected `x_k`; AdaLN sees only
    /// the step embedding.
    Context,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpatialResidual {
    /// Residual from the temporal stage's scaled-and-shifted input.
    #[default]
    Scaled,
    /// Residual from the temporal stage's output.
    Temporal,
}

macro_rules! impl_enum_str {
    ($ty:ty, $what:literal, $($name:literal => $variant:expr),+) => {
        impl FromStr for $ty {
            type Err = OdmError;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(OdmError::config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $variant {
                    return f.write_str($name);
                })+
                unreachable!()
            }
        }
    };
}

impl_enum_str!(FusionKind, "fusion", "gate" => FusionKind::Gate, "concat" => FusionKind::Concat, "average" => FusionKind::Average);
impl_enum_str!(AttentionKind, "attention", "deformable" => AttentionKind::Deformable, "basic" => AttentionKind::Basic);
impl_enum_str!(Conditioning, "conditioning", "adaln" => Conditioning::Adaln, "context" => Conditioning::Context);
impl_enum_str!(SpatialResidual, "spatial residual", "scaled" => SpatialResidual::Scaled, "temporal" => SpatialResidual::Temporal);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Bbox,
    Center,
    Speed,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Self::Bbox, Self::Center, Self::Speed];

    pub fn channels(self) -> std::ops::Range<usize> {
        match self {
            Self::Bbox => BBOX_CHANNELS,
            Self::Center => CENTER_CHANNELS,
            Self::Speed => SPEED_CHANNEL..SPEED_CHANNEL + 1,
        }
    }

    pub fn width(self) -> usize {
        self.channels().len()
    }

    fn tag(self) -> char {
        match self {
            Self::Bbox => 'B',
            Self::Center => 'C',
            Self::Speed => 'V',
        }
    }
}

/// Enabled observation modalities, written as a subset of `BCV`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modalities {
    pub bbox: bool,
    pub center: bool,
    pub speed: bool,
}

impl Default for Modalities {
    fn default() -> Self {
        Self {
            bbox: true,
            center: true,
            speed: true,
        }
    }
}

impl Modalities {
    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Bbox => self.bbox,
            Modality::Center => self.center,
            Modality::Speed => self.speed,
        }
    }

    pub fn count(&self) -> usize {
        Modality::ALL.iter().filter(|m| self.contains(**m)).count()
    }
}

impl FromStr for Modalities {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.to_ascii_uppercase();
        if s.is_empty() || s.chars().any(|c| !"BCV".contains(c)) {
            return Err(OdmError::config(format!(
                "modalities must be a non-empty subset of BCV, got {s:?}"
            )));
        }
        Ok(Self {
            bbox: s.contains('B'),
            center: s.contains('C'),
            speed: s.contains('V'),
        })
    }
}

impl fmt::Display for Modalities {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in Modality::ALL {
            if self.contains(m) {
                write!(f, "{}", m.tag())?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub masking_block_layers: usize,
    pub dropout: f64,
    pub raw_dim: usize,
    pub seq_len: usize,
    /// Offset bound as a fraction of the axis length.
    pub offset_clamp: f64,
    /// Attention width of the spatial stage, whose tokens have width `seq_len`.
    pub spatial_dim: usize,
    pub ffn_dim: usize,
    pub fusion: FusionKind,
    pub attention: AttentionKind,
    pub conditioning: Conditioning,
    pub spatial_residual: SpatialResidual,
    pub masking_block: bool,
    pub modalities: Modalities,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 2,
            masking_block_layers: 1,
            dropout: 0.1,
            raw_dim: RAW_DIM,
            seq_len: OBS_LEN,
            offset_clamp: 0.25,
            spatial_dim: 64,
            ffn_dim: 128,
            fusion: FusionKind::Gate,
            attention: AttentionKind::Deformable,
            conditioning: Conditioning::Adaln,
            spatial_residual: SpatialResidual::Scaled,
            masking_block: true,
            modalities: Modalities::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(OdmError::config(m));
        if self.model_dim == 0
            || !self.model_dim.is_multiple_of(self.heads.max(1))
            || self.heads == 0
        {
            return fail(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.spatial_dim == 0 || !self.spatial_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "spatial_dim {} must be a positive multiple of heads {}",
                self.spatial_dim, self.heads
            ));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.masking_block_layers == 0 {
            return fail("layer counts must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.raw_dim != RAW_DIM {
            return fail(format!("raw_dim must be {RAW_DIM}"));
        }
        if self.seq_len < 2 {
            return fail("seq_len must be at least 2".into());
        }
        if !(self.offset_clamp >= 0.0) {
            return fail("offset_clamp must be non-negative".into());
        }
        if self.modalities.count() == 0 {
            return fail("at least one modality must be enabled".into());
        }
        Ok(())
    }
}

/// Additive attention context over GRU states.
#[derive(Clone, Debug)]
pub struct ContextAttention {
    w_h: Linear,
    w_x: Linear,
    v: ParamId,
    w_c: Linear,
    fc: Linear,
}

impl ContextAttention {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            w_h: Linear::no_bias(store, &format!("{name}.w_h"), dim, dim, rng),
            w_x: Linear::no_bias(store, &format!("{name}.w_x"), dim, dim, rng),
            v: store.add(
                format!("{name}.v"),
                crate::params::uniform_fan_in(1, dim, dim, rng),
            ),
            w_c: Linear::new(store, &format!("{name}.w_c"), 2 * dim, dim, rng),
            fc: Linear::new(store, &format!("{name}.fc"), dim, dim, rng),
        }
    }

    /// Attention weights `T × T` (rows sum to one).
    pub fn weights<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Var {
        let a = self.w_h.forward(g, h);
        let b = self.w_x.forward(g, h);
        let v = g.param(self.v);
        let scores = g.additive_scores(a, b, v);
        g.softmax_rows(scores)
    }

    /// Returns `(g, c)`: the context features and the raw context vectors.
    pub fn forward_parts<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> (Var, Var) {
        let alpha = self.weights(g, h);
        let c = g.matmul(alpha, h);
        let ch = g.concat_cols(&[c, h]);
        let z = self.w_c.forward(g, ch);
        let z = g.tanh(z);
        (self.fc.forward(g, z), c)
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var) -> Var {
        self.forward_parts(g, h).0
    }

    pub fn score_vector(&self) -> ParamId {
        self.v
    }
}

#[derive(Clone, Debug)]
pub struct ModalityEncoder {
    pub which: Modality,
    pub mlp: Mlp,
    pub gru: crate::nn::Gru,
    pub context: ContextAttention,
}

impl ModalityEncoder {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        which: Modality,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            which,
            mlp: Mlp::new(store, &format!("{name}.mlp"), which.width(), dim, dim, rng),
            gru: crate::nn::Gru::new(store, &format!("{name}.gru"), dim, dim, rng),
            context: ContextAttention::new(store, &format!("{name}.context"), dim, rng),
        }
    }

    /// GRU states `T × D` for a `T × d_m` sequence.
    pub fn hidden<S: Scalar>(&self, g: &mut Graph<'_, S>, seq: Var) -> Result<Var> {
        let (t, width) = g.shape(seq);
        if width != self.which.width() {
            return Err(OdmError::argument(format!(
                "{:?} encoder expects {} channels, got {width}",
                self.which,
                self.which.width()
            )));
        }
        let x = self.mlp.forward(g, seq);
        let pe = g.constant(positional_encoding(t, self.mlp.second.out_dim));
        let x = g.add(x, pe);
        Ok(self.gru.forward(g, x))
    }

    /// Hidden states followed by the attention context.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, seq: Var) -> Result<Var> {
        let h = self.hidden(g, seq)?;
        Ok(self.context.forward(g, h))
    }
}

#[derive(Clone, Debug)]
pub enum Fusion {
    Gate { gate: Mlp, value: Mlp, proj: Linear },
    Concat { proj: Linear },
    Average,
}

impl Fusion {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        kind: FusionKind,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let wide = 3 * dim;
        match kind {
            FusionKind::Gate => Self::Gate {
                gate: Mlp::new(store, "denoiser.fusion.gate", wide, wide, wide, rng),
                value: Mlp::new(store, "denoiser.fusion.value", wide, wide, wide, rng),
                proj: Linear::new(store, "denoiser.fusion.proj", wide, dim, rng),
            },
            FusionKind::Concat => Self::Concat {
                proj: Linear::new(store, "denoiser.fusion.proj", wide, dim, rng),
            },
            FusionKind::Average => Self::Average,
        }
    }

    /// `parts`: one `T × D` map per modality; `enabled` counts the non-zero ones.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        parts: &[Var; 3],
        enabled: usize,
    ) -> Result<Var> {
        let shape = g.shape(parts[0]);
        if parts.iter().any(|p| g.shape(*p) != shape) {
            return Err(OdmError::argument("fusion inputs must share a shape"));
        }
        Ok(match self {
            Self::Gate { gate, value, proj } => {
                let cat = g.concat_cols(parts);
                let s = gate.forward(g, cat);
                let s = g.sigmoid(s);
                let v = value.forward(g, cat);
                let gv = g.mul(s, v);
                let r = g.add(gv, cat);
                proj.forward(g, r)
            }
            Self::Concat { proj } => {
                let cat = g.concat_cols(parts);
                proj.forward(g, cat)
            }
            Self::Average => {
                let s = g.add(parts[0], parts[1]);
                let s = g.add(s, parts[2]);
                g.scale(s, S::lit(1.0 / enabled.max(1) as f64))
            }
        })
    }
}

/// The eight AdaLN groups, each `T × D`.
pub struct AdaLnParams {
    pub sc1: Var,
    pub sh1: Var,
    pub sc2: Var,
    pub x_t: Var,
    pub sc3: Var,
    pub sh2: Var,
    pub sc4: Var,
    pub x_d: Var,
}

/// Regression head `D → D → 8D`, zero final weight. Bias is 1 on the
/// normalization scales `Sc1`, `Sc3` and 0 elsewhere, so the attention
/// gates `Sc2`, `Sc4` start closed.
#[derive(Clone, Debug)]
pub struct AdaLn {
    pub mlp: Mlp,
    dim: usize,
}

impl AdaLn {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let mut bias = vec![S::zero(); 8 * dim];
        for group in [0, 4] {
            for b in &mut bias[group * dim..(group + 1) * dim] {
                *b = S::one();
            }
        }
        Self {
            mlp: Mlp::zero_output(store, name, dim, dim, bias, rng),
            dim,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, cond: Var) -> AdaLnParams {
        let out = self.mlp.forward(g, cond);
        let d = self.dim;
        let mut part = |i: usize| g.slice_cols(out, i * d, d);
        AdaLnParams {
            sc1: part(0),
            sh1: part(1),
            sc2: part(2),
            x_t: part(3),
            sc3: part(4),
            sh2: part(5),
            sc4: part(6),
            x_d: part(7),
        }
    }
}

/// Learnable grid positions plus a bounded offset network along one axis.
#[derive(Clone, Debug)]
pub struct AxisSampler {
    pub positions: ParamId,
    pub offset: Mlp,
    len: usize,
    bound: f64,
}

impl AxisSampler {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        len: usize,
        clamp: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let grid = Mat::from_fn(1, len, |_, c| S::lit(c as f64));
        Self {
            positions: store.add(format!("{name}.positions"), grid),
            offset: Mlp::zero_output(
                store,
                &format!("{name}.offset"),
                len,
                len,
                vec![S::zero(); len],
                rng,
            ),
            len,
            bound: clamp * len as f64,
        }
    }

    /// Offsets `1 × len` from pooled conditioning features `1 × len`,
    /// squashed smoothly into `±bound`.
    pub fn offsets<S: Scalar>(&self, g: &mut Graph<'_, S>, pooled: Var) -> Var {
        let raw = self.offset.forward(g, pooled);
        if self.bound == 0.0 {
            return g.scale(raw, S::zero());
        }
        let inv = S::lit(1.0 / self.bound);
        let t = g.scale(raw, inv);
        let t = g.tanh(t);
        g.scale(t, S::lit(self.bound))
    }

    /// Sampling positions in `[0, len - 1]`.
    pub fn sample_positions<S: Scalar>(&self, g: &mut Graph<'_, S>, pooled: Var) -> Var {
        let offs = self.offsets(g, pooled);
        let p = g.param(self.positions);
        let p = g.add(p, offs);
        g.clamp(p, S::zero(), S::lit((self.len - 1) as f64))
    }
}

#[derive(Clone, Debug)]
pub struct DeformableBlock {
    pub adaln: AdaLn,
    pub temporal: AxisSampler,
    pub temporal_attn: MultiHeadAttention,
    pub spatial: AxisSampler,
    pub spatial_attn: MultiHeadAttention,
    residual: SpatialResidual,
}

#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub adaln: AdaLn,
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
}

#[derive(Clone, Debug)]
pub enum Block {
    Deformable(DeformableBlock),
    Basic(BasicBlock),
}

impl Block {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        cfg: &DenoiserConfig,
        rng: &mut SeededRng,
    ) -> Self {
        let d = cfg.model_dim;
        let adaln = AdaLn::new(store, &format!("{name}.adaln"), d, rng);
        match cfg.attention {
            AttentionKind::Deformable => Self::Deformable(DeformableBlock {
                adaln,
                temporal: AxisSampler::new(
                    store,
                    &format!("{name}.temporal"),
                    cfg.seq_len,
                    cfg.offset_clamp,
                    rng,
                ),
                temporal_attn: MultiHeadAttention::new(
                    store,
                    &format!("{name}.temporal.attn"),
                    d,
                    d,
                    cfg.heads,
                    rng,
                ),
                spatial: AxisSampler::new(
                    store,
                    &format!("{name}.spatial"),
                    d,
                    cfg.offset_clamp,
                    rng,
                ),
                spatial_attn: MultiHeadAttention::new(
                    store,
                    &format!("{name}.spatial.attn"),
                    cfg.seq_len,
                    cfg.spatial_dim,
                    cfg.heads,
                    rng,
                ),
                residual: cfg.spatial_residual,
            }),
            AttentionKind::Basic => Self::Basic(BasicBlock {
                adaln,
                attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, d, cfg.heads, rng),
                ffn: Mlp::new(store, &format!("{name}.ffn"), d, cfg.ffn_dim, d, rng),
            }),
        }
    }

    pub fn adaln(&self) -> &AdaLn {
        match self {
            Self::Deformable(b) => &b.adaln,
            Self::Basic(b) => &b.adaln,
        }
    }

    /// `h_in: T × D`, conditioning `cond: T × D`.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h_in: Var,
        cond: Var,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let p = self.adaln().forward(g, cond);
        match self {
            Self::Deformable(b) => b.forward(g, h_in, &p, dropout),
            Self::Basic(b) => b.forward(g, h_in, &p, dropout),
        }
    }
}

fn scale_shift<S: Scalar>(g: &mut Graph<'_, S>, x: Var, scale: Var, shift: Var) -> Var {
    let n = g.layer_norm_rows(x);
    let n = g.mul(n, scale);
    g.add(n, shift)
}

impl DeformableBlock {
    /// Returns `(H_T, out)`.
    pub fn stages<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h_in: Var,
        p: &AdaLnParams,
        dropout: &mut Dropout<'_>,
    ) -> (Var, Var) {
        // Temporal stage: rows are frames.
        let h_scn = scale_shift(g, h_in, p.sc1, p.sh1);
        let pooled_t = g.mean_cols(p.x_t);
        let pooled_t = g.transpose(pooled_t);
        let pos_t = self.temporal.sample_positions(g, pooled_t);
        let h_sem = g.sample_rows(h_scn, pos_t);
        let a = self.temporal_attn.forward(g, h_scn, h_sem);
        let a = dropout.apply(g, a);
        let a = g.mul(a, p.sc2);
        let h_t = g.add(a, h_in);

        // Spatial stage: rows are feature channels.
        let d_scn = scale_shift(g, h_t, p.sc3, p.sh2);
        let tokens = g.transpose(d_scn);
        let pooled_d = g.mean_rows(p.x_d);
        let pos_d = self.spatial.sample_positions(g, pooled_d);
        let d_sem = g.sample_rows(tokens, pos_d);
        let a = self.spatial_attn.forward(g, tokens, d_sem);
        let a = g.transpose(a);
        let a = dropout.apply(g, a);
        let a = g.mul(a, p.sc4);
        let residual = match self.residual {
            SpatialResidual::Scaled => h_scn,
            SpatialResidual::Temporal => h_t,
        };
        (h_t, g.add(a, residual))
    }

    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h_in: Var,
        p: &AdaLnParams,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        self.stages(g, h_in, p, dropout).1
    }
}

impl BasicBlock {
    fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        h_in: Var,
        p: &AdaLnParams,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let h_scn = scale_shift(g, h_in, p.sc1, p.sh1);
        let a = self.attn.forward(g, h_scn, h_scn);
        let a = dropout.apply(g, a);
        let a = g.mul(a, p.sc2);
        let h_t = g.add(a, h_in);
        let n = scale_shift(g, h_t, p.sc3, p.sh2);
        let f = self.ffn.forward(g, n);
        let f = dropout.apply(g, f);
        let f = g.mul(f, p.sc4);
        g.add(f, h_t)
    }
}

/// `Trans(Enc_out) ⊙ M + Enc_out ⊙ (1 - M)` with `M` broadcast per frame.
#[derive(Clone, Debug)]
pub struct MaskingBlock {
    pub layers: Vec<TransformerLayer>,
}

impl MaskingBlock {
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        enc_out: Var,
        mask: &OcclusionMask,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (t, d) = g.shape(enc_out);
        if mask.len() != t {
            return Err(OdmError::argument(format!(
                "mask covers {} frames, encoder output has {t}",
                mask.len()
            )));
        }
        let mut x = enc_out;
        for layer in &self.layers {
            x = layer.forward(g, x, dropout);
        }
        let m = g.constant(mask.to_matrix(d));
        let keep = g.constant(mask.to_matrix::<S>(d).map(|v| S::one() - v));
        let a = g.mul(x, m);
        let b = g.mul(enc_out, keep);
        Ok(g.add(a, b))
    }
}

/// Layer layout of the noise estimator. Parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub encoders: [ModalityEncoder; 3],
    pub fusion: Fusion,
    pub step_mlp: Mlp,
    pub input_proj: Linear,
    pub context_proj: Option<Linear>,
    pub encoder: Vec<Block>,
    pub masking: Option<MaskingBlock>,
    pub decoder: Vec<Block>,
    pub head: Linear,
}

impl Denoiser {
    pub fn new<S: Scalar>(
        config: DenoiserConfig,
        store: &mut ParamStore<S>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let encoders = Modality::ALL.map(|m| {
            let name = format!("denoiser.encode.{}", m.tag().to_ascii_lowercase());
            ModalityEncoder::new(store, &name, m, d, rng)
        });
        let fusion = Fusion::new(store, config.fusion, d, rng);
        let step_mlp = Mlp::new(store, "denoiser.step_mlp", d, d, d, rng);
        let input_proj = Linear::new(store, "denoiser.input_proj", config.raw_dim, d, rng);
        let context_proj = (config.conditioning == Conditioning::Context)
            .then(|| Linear::new(store, "denoiser.context_proj", 2 * d, d, rng));
        let encoder = (0..config.encoder_layers)
            .map(|i| Block::new(store, &format!("denoiser.encoder.{i}"), &config, rng))
            .collect();
        let masking = config.masking_block.then(|| MaskingBlock {
            layers: (0..config.masking_block_layers)
                .map(|i| {
                    TransformerLayer::new(
                        store,
                        &format!("denoiser.masking.{i}"),
                        d,
                        config.heads,
                        config.ffn_dim,
                        rng,
                    )
                })
                .collect(),
        });
        let decoder = (0..config.decoder_layers)
            .map(|i| Block::new(store, &format!("denoiser.decoder.{i}"), &config, rng))
            .collect();
        let head = Linear::new(store, "denoiser.head", d, config.raw_dim, rng);
        Ok(Self {
            config,
            encoders,
            fusion,
            step_mlp,
            input_proj,
            context_proj,
            encoder,
            masking,
            decoder,
            head,
        })
    }

    /// Per-modality feature maps from the zero-filled observation
    /// `x_obs: T × 7`. Disabled modalities contribute zeros.
    pub fn modality_features<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x_obs: Var,
    ) -> Result<[Var; 3]> {
        let (t, c) = g.shape(x_obs);
        if c != self.config.raw_dim {
            return Err(OdmError::argument(format!(
                "observation has {c} channels, expected {}",
                self.config.raw_dim
            )));
        }
        let mut out = Vec::with_capacity(3);
        for enc in &self.encoders {
            let v = if self.config.modalities.contains(enc.which) {
                let r = enc.which.channels();
                let seq = g.slice_cols(x_obs, r.start, r.len());
                enc.forward(g, seq)?
            } else {
                g.constant(Mat::zeros(t, self.config.model_dim))
            };
            out.push(v);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Fused observation encoding `H: T × D`. Independent of the step.
    pub fn encode_observation<S: Scalar>(&self, g: &mut Graph<'_, S>, x_obs: Var) -> Result<Var> {
        let parts = self.modality_features(g, x_obs)?;
        self.fusion
            .forward(g, &parts, self.config.modalities.count())
    }

    /// `MLP_K(PE(k))`, `1 × D`.
    pub fn step_embedding<S: Scalar>(&self, g: &mut Graph<'_, S>, k: usize) -> Var {
        let pe = g.constant(sinusoidal(&[k as f64], self.config.model_dim));
        self.step_mlp.forward(g, pe)
    }

    /// `X_obs_k = H + MLP_K(PE(k))` broadcast over frames.
    pub fn step_condition<S: Scalar>(&self, g: &mut Graph<'_, S>, h: Var, k: usize) -> Var {
        let e = self.step_embedding(g, k);
        g.add_bias(h, e)
    }

    /// Noise estimate `T × 7` given `x_k`, the cached observation encoding
    /// `h` and the frame mask.
    pub fn forward_with_encoding<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x_k: Var,
        h: Var,
        mask: &OcclusionMask,
        k: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (t, c) = g.shape(x_k);
        if c != self.config.raw_dim || g.shape(h) != (t, self.config.model_dim) {
            return Err(OdmError::argument(format!(
                "x_k {:?} and encoding {:?} disagree",
                (t, c),
                g.shape(h)
            )));
        }
        let x_obs_k = self.step_condition(g, h, k);
        let proj = self.input_proj.forward(g, x_k);
        let (mut x, cond) = match &self.context_proj {
            Some(ctx) => {
                let cat = g.concat_cols(&[proj, x_obs_k]);
                let e = self.step_embedding(g, k);
                (ctx.forward(g, cat), g.broadcast_rows(e, t))
            }
            None => (proj, x_obs_k),
        };
        for block in &self.encoder {
            x = block.forward(g, x, cond, dropout);
        }
        if let Some(m) = &self.masking {
            x = m.forward(g, x, mask, dropout)?;
        }
        for block in &self.decoder {
            x = block.forward(g, x, cond, dropout);
        }
        Ok(self.head.forward(g, x))
    }

    /// Full estimate from the zero-filled observation.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x_k: Var,
        x_obs: Var,
        mask: &OcclusionMask,
        k: usize,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let h = self.encode_observation(g, x_obs)?;
        self.forward_with_encoding(g, x_k, h, mask, k, dropout)
    }

    /// Inference-mode noise estimate for concrete matrices.
    pub fn estimate_noise<S: Scalar>(
        &self,
        params: &ParamStore<S>,
        x_k: &Mat<S>,
        x_obs: &Mat<S>,
        mask: &OcclusionMask,
        k: usize,
    ) -> Result<Mat<S>> {
        let mut g = Graph::inference(params);
        let xk = g.constant(x_k.clone());
        let xo = g.constant(x_obs.clone());
        let out = self.forward(&mut g, xk, xo, mask, k, &mut Dropout::off())?;
        let eps = g.value(out).clone();
        if !eps.all_finite() {
            return Err(OdmError::numerical(k, "non-finite noise estimate"));
        }
        Ok(eps)
    }

    /// Encode `x_obs` once and bind it for a reverse chain.
    pub fn condition<'a, S: Scalar>(
        &'a self,
        params: &'a ParamStore<S>,
        x_obs: &Mat<S>,
        mask: &OcclusionMask,
    ) -> Result<ConditionedDenoiser<'a, S>> {
        let mut g = Graph::inference(params);
        let xo = g.constant(x_obs.clone());
        let h = self.encode_observation(&mut g, xo)?;
        Ok(ConditionedDenoiser {
            model: self,
            params,
            encoding: g.value(h).clone(),
            mask: mask.clone(),
        })
    }
}

/// A [`Denoiser`] with a fixed observation encoding, reused across steps.
pub struct ConditionedDenoiser<'a, S> {
    model: &'a Denoiser,
    params: &'a ParamStore<S>,
    encoding: Mat<S>,
    mask: OcclusionMask,
}

impl<S: Scalar> ConditionedDenoiser<'_, S> {
    pub fn encoding(&self) -> &Mat<S> {
        &self.encoding
    }
}

impl<S: Scalar> NoisePredictor<S> for ConditionedDenoiser<'_, S> {
    fn predict(&mut self, x_k: &Mat<S>, k: usize) -> Result<Mat<S>> {
        let mut g = Graph::inference(self.params);
        let xk = g.constant(x_k.clone());
        let h = g.constant(self.encoding.clone());
        let out =
            self.model
                .forward_with_encoding(&mut g, xk, h, &self.mask, k, &mut Dropout::off())?;
        Ok(g.value(out).clone())
    }
}
