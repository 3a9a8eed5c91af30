//! Analytic gradients of every graph op against central differences.

mod common;

use common::check_op;
use odm_core::graph::{Graph, Var};
use odm_core::rng::{seeded, standard_normal};
use odm_core::Mat64;

const TOL: f64 = 1e-6;

fn rand(r: usize, c: usize, seed: u64) -> Mat64 {
    standard_normal(r, c, &mut seeded(seed))
}

/// `sum(x ⊙ W)` with a fixed random `W`, so every output entry matters.
fn probe(g: &mut Graph<'_, f64>, x: Var) -> Var {
    let (r, c) = g.shape(x);
    let w = g.constant(rand(r, c, 999));
    let m = g.mul(x, w);
    g.sum(m)
}

fn assert_op(name: &str, inputs: &[Mat64], build: &dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Var) {
    let worst = check_op(inputs, build, 1e-3);
    assert!(worst < TOL, "{name}: worst relative error {worst:e}");
}

#[test]
fn elementwise_ops() {
    let a = rand(3, 4, 1);
    let b = rand(3, 4, 2);
    assert_op("add", &[a.clone(), b.clone()], &|g, v| {
        let o = g.add(v[0], v[1]);
        probe(g, o)
    });
    assert_op("sub", &[a.clone(), b.clone()], &|g, v| {
        let o = g.sub(v[0], v[1]);
        probe(g, o)
    });
    assert_op("mul", &[a.clone(), b.clone()], &|g, v| {
        let o = g.mul(v[0], v[1]);
        probe(g, o)
    });
    assert_op("scale", std::slice::from_ref(&a), &|g, v| {
        let o = g.scale(v[0], -1.7);
        probe(g, o)
    });
    assert_op("tanh", std::slice::from_ref(&a), &|g, v| {
        let o = g.tanh(v[0]);
        probe(g, o)
    });
    assert_op("sigmoid", std::slice::from_ref(&a), &|g, v| {
        let o = g.sigmoid(v[0]);
        probe(g, o)
    });
    // Keep entries away from the kink.
    let away = a.map(|x| if x.abs() < 0.1 { x + 0.3 } else { x });
    assert_op("relu", std::slice::from_ref(&away), &|g, v| {
        let o = g.relu(v[0]);
        probe(g, o)
    });
    assert_op("clamp", &[away.map(|x| x * 0.7)], &|g, v| {
        let o = g.clamp(v[0], -0.5, 0.6);
        probe(g, o)
    });
}

#[test]
fn matrix_ops() {
    assert_op("matmul", &[rand(3, 5, 3), rand(5, 2, 4)], &|g, v| {
        let o = g.matmul(v[0], v[1]);
        probe(g, o)
    });
    assert_op("add_bias", &[rand(4, 3, 5), rand(1, 3, 6)], &|g, v| {
        let o = g.add_bias(v[0], v[1]);
        probe(g, o)
    });
    assert_op("mul_row", &[rand(4, 3, 7), rand(1, 3, 8)], &|g, v| {
        let o = g.mul_row(v[0], v[1]);
        probe(g, o)
    });
    assert_op("broadcast_rows", &[rand(1, 3, 9)], &|g, v| {
        let o = g.broadcast_rows(v[0], 5);
        probe(g, o)
    });
    assert_op("transpose", &[rand(2, 5, 10)], &|g, v| {
        let o = g.transpose(v[0]);
        probe(g, o)
    });
    assert_op(
        "concat/slice cols",
        &[rand(3, 2, 11), rand(3, 4, 12)],
        &|g, v| {
            let c = g.concat_cols(&[v[0], v[1]]);
            let s = g.slice_cols(c, 1, 4);
            probe(g, s)
        },
    );
    assert_op(
        "concat/slice rows",
        &[rand(2, 3, 13), rand(4, 3, 14)],
        &|g, v| {
            let c = g.concat_rows(&[v[0], v[1]]);
            let s = g.slice_rows(c, 1, 3);
            probe(g, s)
        },
    );
    assert_op("mean_rows", &[rand(5, 3, 15)], &|g, v| {
        let o = g.mean_rows(v[0]);
        probe(g, o)
    });
    assert_op("mean_cols", &[rand(5, 3, 16)], &|g, v| {
        let o = g.mean_cols(v[0]);
        probe(g, o)
    });
}

#[test]
fn normalization_ops() {
    assert_op("softmax_rows", &[rand(3, 5, 17)], &|g, v| {
        let o = g.softmax_rows(v[0]);
        probe(g, o)
    });
    assert_op("layer_norm_rows", &[rand(3, 6, 18)], &|g, v| {
        let o = g.layer_norm_rows(v[0]);
        probe(g, o)
    });
}

#[test]
fn attention_ops() {
    assert_op(
        "attention",
        &[rand(4, 6, 19), rand(5, 6, 20), rand(5, 6, 21)],
        &|g, v| {
            let o = g.attention(v[0], v[1], v[2], 2);
            probe(g, o)
        },
    );
    assert_op(
        "additive_scores",
        &[rand(4, 3, 22), rand(2, 3, 23), rand(1, 3, 24)],
        &|g, v| {
            let o = g.additive_scores(v[0], v[1], v[2]);
            probe(g, o)
        },
    );
}

#[test]
fn sampling_op() {
    // Positions off the integer grid so the interpolation is smooth.
    let pos = Mat64::from_vec(1, 4, vec![0.3, 1.55, 2.9, 3.2]).unwrap();
    assert_op("sample_rows", &[rand(5, 3, 25), pos], &|g, v| {
        let o = g.sample_rows(v[0], v[1]);
        probe(g, o)
    });
}

#[test]
fn loss_ops() {
    assert_op("mse", &[rand(3, 4, 26), rand(3, 4, 27)], &|g, v| {
        g.mse(v[0], v[1])
    });
    let p = Mat64::from_vec(1, 1, vec![0.37]).unwrap();
    assert_op("bce y=1", std::slice::from_ref(&p), &|g, v| {
        g.bce(v[0], 1.0)
    });
    assert_op("bce y=0", &[p], &|g, v| g.bce(v[0], 0.0));
}
