//! Layer building blocks on top of [`Graph`].

use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::Mat;

/// Dropout state for one forward pass. Inactive unless it owns an RNG.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut SeededRng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Self {
            rate: 0.0,
            rng: None,
        }
    }

    pub fn train(rate: f64, rng: &'r mut SeededRng) -> Self {
        Self {
            rate,
            rng: Some(rng),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<S: Scalar>(&mut self, g: &mut Graph<'_, S>, x: Var) -> Var {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let (rows, cols) = g.shape(x);
                let keep = S::lit(1.0 / (1.0 - rate));
                let mask = Mat::from_fn(rows, cols, |_, _| {
                    if rng.random::<f64>() < rate {
                        S::zero()
                    } else {
                        keep
                    }
                });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(in_dim, out_dim, in_dim, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_fan_in(1, out_dim, in_dim, rng),
        );
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn no_bias<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(in_dim, out_dim, in_dim, rng),
        );
        Self {
            weight,
            bias: None,
            in_dim,
            out_dim,
        }
    }

    /// Zero weight with the given bias vector.
    pub fn zero_weight<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        bias: Vec<S>,
    ) -> Self {
        let out_dim = bias.len();
        let weight = store.add(format!("{name}.weight"), Mat::zeros(in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Mat::row_vector(bias));
        Self {
            weight,
            bias: Some(bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Var {
        let w = g.param(self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)
            }
            None => y,
        }
    }
}

/// Two linear layers with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
            second: Linear::new(store, &format!("{name}.1"), hidden, out_dim, rng),
        }
    }

    /// Same shape, but the output layer starts at zero weight and `bias`.
    pub fn zero_output<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        bias: Vec<S>,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.0"), in_dim, hidden, rng),
            second: Linear::zero_weight(store, &format!("{name}.1"), hidden, bias),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Var {
        let h = self.first.forward(g, x);
        let h = g.relu(h);
        self.second.forward(g, h)
    }
}

/// Single-layer GRU returning the hidden state at every step.
#[derive(Clone, Debug)]
pub struct Gru {
    input: Linear,
    recurrent: Linear,
    hidden: usize,
}

impl Gru {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        rng: &mut SeededRng,
    ) -> Self {
        // Gate layout along the output axis: reset, update, candidate.
        let input = Linear {
            weight: store.add(
                format!("{name}.w_ih"),
                uniform_fan_in(in_dim, 3 * hidden, hidden, rng),
            ),
            bias: Some(store.add(
                format!("{name}.b_ih"),
                uniform_fan_in(1, 3 * hidden, hidden, rng),
            )),
            in_dim,
            out_dim: 3 * hidden,
        };
        let recurrent = Linear {
            weight: store.add(
                format!("{name}.w_hh"),
                uniform_fan_in(hidden, 3 * hidden, hidden, rng),
            ),
            bias: Some(store.add(
                format!("{name}.b_hh"),
                uniform_fan_in(1, 3 * hidden, hidden, rng),
            )),
            in_dim: hidden,
            out_dim: 3 * hidden,
        };
        Self {
            input,
            recurrent,
            hidden,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Var {
        let steps = g.shape(x).0;
        let hd = self.hidden;
        let xp = self.input.forward(g, x);
        let mut h = g.constant(Mat::zeros(1, hd));
        let mut states = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = g.slice_rows(xp, t, 1);
            let hp = self.recurrent.forward(g, h);
            let (xr, xz, xn) = (
                g.slice_cols(xt, 0, hd),
                g.slice_cols(xt, hd, hd),
                g.slice_cols(xt, 2 * hd, hd),
            );
            let (hr, hz, hn) = (
                g.slice_cols(hp, 0, hd),
                g.slice_cols(hp, hd, hd),
                g.slice_cols(hp, 2 * hd, hd),
            );
            let r = g.add(xr, hr);
            let r = g.sigmoid(r);
            let z = g.add(xz, hz);
            let z = g.sigmoid(z);
            let gated = g.mul(r, hn);
            let n = g.add(xn, gated);
            let n = g.tanh(n);
            // h' = (1 - z) ⊙ n + z ⊙ h = n + z ⊙ (h - n)
            let diff = g.sub(h, n);
            let zd = g.mul(z, diff);
            h = g.add(n, zd);
            states.push(h);
        }
        g.concat_rows(&states)
    }
}

/// Query/key/value/output projections around [`Graph::attention`].
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Tokens of width `token_dim`, attention computed at width `inner_dim`.
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        token_dim: usize,
        inner_dim: usize,
        heads: usize,
        rng: &mut SeededRng,
    ) -> Self {
        assert!(
            inner_dim.is_multiple_of(heads),
            "heads must divide the attention width"
        );
        Self {
            query: Linear::new(store, &format!("{name}.q"), token_dim, inner_dim, rng),
            key: Linear::new(store, &format!("{name}.k"), token_dim, inner_dim, rng),
            value: Linear::new(store, &format!("{name}.v"), token_dim, inner_dim, rng),
            output: Linear::new(store, &format!("{name}.o"), inner_dim, token_dim, rng),
            heads,
        }
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, xq: Var, xkv: Var) -> Var {
        let q = self.query.forward(g, xq);
        let k = self.key.forward(g, xkv);
        let v = self.value.forward(g, xkv);
        let a = g.attention(q, k, v, self.heads);
        self.output.forward(g, a)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub attn: MultiHeadAttention,
    pub ffn: Mlp,
}

impl TransformerLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, dim, heads, rng),
            ffn: Mlp::new(store, &format!("{name}.ffn"), dim, ffn_dim, dim, rng),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        x: Var,
        dropout: &mut Dropout<'_>,
    ) -> Var {
        let n = g.layer_norm_rows(x);
        let a = self.attn.forward(g, n, n);
        let a = dropout.apply(g, a);
        let x = g.add(x, a);
        let n = g.layer_norm_rows(x);
        let f = self.ffn.forward(g, n);
        let f = dropout.apply(g, f);
        g.add(x, f)
    }
}

/// Sinusoidal encoding of `positions` into `dim` channels.
pub fn sinusoidal<S: Scalar>(positions: &[f64], dim: usize) -> Mat<S> {
    Mat::from_fn(positions.len(), dim, |r, c| {
        let pair = (c / 2) as f64;
        let freq = 1.0 / 10000f64.powf(2.0 * pair / dim as f64);
        let angle = positions[r] * freq;
        S::lit(if c % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Sequence positional encoding for `len` steps.
pub fn positional_encoding<S: Scalar>(len: usize, dim: usize) -> Mat<S> {
    let positions: Vec<f64> = (0..len).map(|t| t as f64).collect();
    sinusoidal(&positions, dim)
}
