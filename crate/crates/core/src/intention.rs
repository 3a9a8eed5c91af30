//! Crossing-intention classifier over a reconstructed `T × 7` window.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::RAW_DIM;
use crate::error::{OdmError, Result};
use crate::graph::{Graph, Var};
use crate::nn::{positional_encoding, Dropout, Linear, TransformerLayer};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Last,
}

impl FromStr for Pooling {
    type Err = OdmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "last" => Ok(Self::Last),
            other => Err(OdmError::config(format!("unknown pooling {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Last => "last",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntentionConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub pooling: Pooling,
}

impl Default for IntentionConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            pooling: Pooling::Mean,
        }
    }
}

impl IntentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(OdmError::config(format!(
                "intention model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(OdmError::config("intention layers must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IntentionNet {
    pub config: IntentionConfig,
    pub embed: Linear,
    pub layers: Vec<TransformerLayer>,
    pub head: Linear,
}

impl IntentionNet {
    pub fn new<S: Scalar>(
        config: IntentionConfig,
        store: &mut ParamStore<S>,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.model_dim;
        let embed = Linear::new(store, "intention.embed", RAW_DIM, d, rng);
        let layers = (0..config.layers)
            .map(|i| {
                TransformerLayer::new(
                    store,
                    &format!("intention.layer.{i}"),
                    d,
                    config.heads,
                    config.ffn_dim,
                    rng,
                )
            })
            .collect();
        let head = Linear::new(store, "intention.head", d, 2, rng);
        Ok(Self {
            config,
            embed,
            layers,
            head,
        })
    }

    /// Two-class probabilities `1 × 2`, column 1 = crossing.
    pub fn probabilities<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let t = g.shape(x).0;
        let e = self.embed.forward(g, x);
        let pe = g.constant(positional_encoding(t, self.config.model_dim));
        let mut h = g.add(e, pe);
        for layer in &self.layers {
            h = layer.forward(g, h, dropout);
        }
        let pooled = match self.config.pooling {
            Pooling::Mean => g.mean_rows(h),
            Pooling::Last => g.slice_rows(h, t - 1, 1),
        };
        let logits = self.head.forward(g, pooled);
        g.softmax_rows(logits)
    }

    /// `P(cross)` as a `1 × 1` node.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let p = self.probabilities(g, x, dropout);
        g.slice_cols(p, 1, 1)
    }

    /// `P(cross)` for a reconstructed window.
    pub fn predict_intention<S: Scalar>(&self, params: &ParamStore<S>, x: &Mat<S>) -> Result<f64> {
        if !x.all_finite() {
            return Err(OdmError::argument(
                "intention input contains non-finite values",
            ));
        }
        if x.cols() != RAW_DIM || x.is_empty() {
            return Err(OdmError::argument(format!(
                "intention input must be T x {RAW_DIM}"
            )));
        }
        let mut g = Graph::inference(params);
        let v = g.constant(x.clone());
        let p = self.forward(&mut g, v, &mut Dropout::off());
        Ok(g.value(p).item().to_f64_lossy())
    }
}

/// `1` iff `p >= threshold`.
pub fn classify(p: f64, threshold: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(OdmError::argument(format!(
            "probability {p} outside [0, 1]"
        )));
    }
    Ok(u8::from(p >= threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, standard_normal};

    #[test]
    fn probabilities_form_a_simplex() {
        let mut store = ParamStore::<f64>::new();
        let net =
            IntentionNet::new(IntentionConfig::default(), &mut store, &mut seeded(0)).unwrap();
        let x = standard_normal(15, 7, &mut seeded(1));
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let p = net.probabilities(&mut g, xv, &mut Dropout::off());
        let pv = g.value(p);
        assert!((pv.get(0, 0) + pv.get(0, 1) - 1.0).abs() < 1e-12);
        let a = net.predict_intention(&store, &x).unwrap();
        assert_eq!(a, pv.get(0, 1));
        assert_eq!(net.predict_intention(&store, &x).unwrap(), a);
        let bad = Mat::filled(15, 7, f64::NAN);
        assert!(net.predict_intention(&store, &bad).is_err());
    }

    #[test]
    fn classify_boundaries() {
        assert_eq!(classify(0.5, 0.5).unwrap(), 1);
        assert_eq!(classify(0.49, 0.5).unwrap(), 0);
        assert_eq!(classify(1.0, 0.5).unwrap(), 1);
        assert!(classify(1.2, 0.5).is_err());
        assert!(classify(-0.1, 0.5).is_err());
    }
}
