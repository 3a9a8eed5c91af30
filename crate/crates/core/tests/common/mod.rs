#![allow(dead_code)]

use odm_core::dataset::{generate_synthetic, split_manifest, DatasetManifest, Profile};
use odm_core::denoiser::DenoiserConfig;
use odm_core::graph::{Graph, Var};
use odm_core::intention::IntentionConfig;
use odm_core::model::ModelConfig;
use odm_core::params::ParamStore;
use odm_core::rng::seeded;
use odm_core::Mat64;

/// Narrow layout that keeps every component but runs in milliseconds.
pub fn tiny_config(steps: usize) -> ModelConfig {
    ModelConfig {
        denoiser: DenoiserConfig {
            model_dim: 16,
            heads: 2,
            spatial_dim: 16,
            ffn_dim: 32,
            encoder_layers: 1,
            decoder_layers: 1,
            ..DenoiserConfig::default()
        },
        intention: IntentionConfig {
            layers: 1,
            heads: 2,
            model_dim: 16,
            ffn_dim: 32,
            ..IntentionConfig::default()
        },
        steps,
        ..ModelConfig::default()
    }
}

pub fn synthetic_split(n: usize, seed: u64) -> DatasetManifest {
    let mut rng = seeded(seed);
    let m = generate_synthetic(n, 20, &mut rng, Profile::Curver).unwrap();
    split_manifest(&m, (0.7, 0.1, 0.2), &mut rng).unwrap()
}

/// Central-difference derivative of `f` with respect to entry `(r, c)` of
/// `inputs[which]`.
pub fn numeric_input_grad(
    f: &dyn Fn(&[Mat64]) -> f64,
    inputs: &[Mat64],
    which: usize,
    r: usize,
    c: usize,
    h: f64,
) -> f64 {
    let mut plus = inputs.to_vec();
    let mut minus = inputs.to_vec();
    plus[which].set(r, c, inputs[which].get(r, c) + h);
    minus[which].set(r, c, inputs[which].get(r, c) - h);
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// Compare analytic and numeric input gradients of a scalar graph built by
/// `build`, over every entry of every input. Returns the worst relative
/// error, measured against `max(|a|, |n|, floor)`.
pub fn check_op(
    inputs: &[Mat64],
    build: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var,
    floor: f64,
) -> f64 {
    let store = ParamStore::<f64>::new();
    let eval = |xs: &[Mat64]| {
        let mut g = Graph::inference(&store);
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new(&store);
    let vars: Vec<Var> = inputs.iter().map(|x| g.tracked_input(x.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out);
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .cloned()
            .unwrap_or_else(|| Mat64::zeros(x.rows(), x.cols()));
        for r in 0..x.rows() {
            for c in 0..x.cols() {
                let n = numeric_input_grad(&eval, inputs, i, r, c, 1e-5);
                let a = analytic.get(r, c);
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
                worst = worst.max(rel);
            }
        }
    }
    worst
}

/// Relative error `|a - n| / max(|a|, |n|)`; `0` when both vanish.
pub fn rel_err(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d == 0.0 {
        0.0
    } else {
        (a - n).abs() / d
    }
}
