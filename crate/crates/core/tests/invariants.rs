//! Property-based invariants over randomly drawn inputs.

mod common;

use odm_core::dataset::{
    denormalize, generate_synthetic, normalize, split_manifest, NormalizationStats, Profile, Split,
};
use odm_core::diffusion::{NoiseSchedule, ScheduleKind};
use odm_core::evaluation::{baseline_impute, BaselineKind};
use odm_core::graph::Graph;
use odm_core::intention::classify;
use odm_core::occlusion::{apply_mask, gen_eo_mask, gen_po_mask, FillMode};
use odm_core::params::ParamStore;
use odm_core::rng::{seeded, standard_normal};
use odm_core::training::{loss_intent, loss_simple};
use odm_core::Mat64;
use proptest::prelude::*;
use std::collections::HashSet;

fn rand(r: usize, c: usize, seed: u64) -> Mat64 {
    standard_normal(r, c, &mut seeded(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_monotone(steps in 2usize..400, linear in any::<bool>()) {
        let kind: ScheduleKind = if linear { "linear".parse().unwrap() } else { ScheduleKind::Cosine };
        let s = match NoiseSchedule::build(steps, kind) {
            Ok(s) => s,
            // Short linear schedules cannot reach the terminal noise level.
            Err(e) => {
                prop_assert!(linear, "cosine K={} rejected: {}", steps, e);
                return Ok(());
            }
        };
        prop_assert_eq!(s.alpha_bar(0), 1.0);
        for k in 1..=steps {
            prop_assert!(s.alpha_bar(k) < s.alpha_bar(k - 1));
            prop_assert!(s.beta(k) > 0.0 && s.beta(k) < 1.0);
            prop_assert!(s.posterior_var(k) >= 0.0 && s.posterior_var(k) <= s.beta(k) + 1e-15);
        }
        prop_assert_eq!(s.posterior_var(1), 0.0);
        prop_assert!(NoiseSchedule::build(1, kind).is_err());
    }

    #[test]
    fn predict_x0_inverts_forward_sample(seed in any::<u64>(), k in 1usize..=100) {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = rand(15, 7, seed);
        let eps = rand(15, 7, seed ^ 0xabc);
        let xk = s.forward_sample(&x0, k, &eps).unwrap();
        let back = s.predict_x0(&xk, &eps, k).unwrap();
        // Division by sqrt(alpha_bar) amplifies rounding near k = K.
        let tol = 1e-12 / s.alpha_bar(k).sqrt();
        prop_assert!(back.max_abs_diff(&x0) < tol);
    }

    #[test]
    fn masked_step_is_entrywise_composition(seed in any::<u64>(), k in 1usize..=100, bits in prop::collection::vec(any::<bool>(), 15)) {
        let s = NoiseSchedule::cosine(100).unwrap();
        let xk = rand(15, 7, seed);
        let obs = rand(15, 7, seed ^ 1);
        let eps = rand(15, 7, seed ^ 2);
        let z = rand(15, 7, seed ^ 3);
        let mask = Mat64::from_fn(15, 7, |t, _| if bits[t] { 1.0 } else { 0.0 });
        let out = s.masked_reverse_step_with_noise(&xk, &obs, &mask, &eps, k, &z).unwrap();
        let net = s.mu_from_eps(&xk, &eps, k).unwrap();
        let (post, var) = s.posterior_observed(&xk, &obs, k).unwrap();
        let sd = var.sqrt();
        for t in 0..15 {
            for c in 0..7 {
                let branch = if bits[t] { net.get(t, c) } else { post.get(t, c) };
                prop_assert_eq!(out.get(t, c), branch + sd * z.get(t, c));
            }
        }
    }

    #[test]
    fn softmax_rows_lie_on_the_simplex(seed in any::<u64>(), rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::inference(&store);
        let x = g.constant(rand(rows, cols, seed).map(|v| v * scale));
        let p = g.softmax_rows(x);
        let p = g.value(p);
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_round_trips(seed in any::<u64>()) {
        let m = generate_synthetic(4, 20, &mut seeded(seed), Profile::Curver).unwrap();
        let stats = NormalizationStats::from_records(&m.records);
        for r in &m.records {
            let x: Mat64 = normalize(r, &stats);
            let back = denormalize(&x, &stats);
            for (t, f) in r.frames.iter().enumerate() {
                for (c, v) in f.channels().iter().enumerate() {
                    prop_assert!((back.get(t, c) - v).abs() <= 1e-9 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn splits_are_disjoint_and_cover(seed in any::<u64>(), n in 1usize..80, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let train = a;
        let val = (1.0 - a) * b;
        let test = 1.0 - train - val;
        let mut rng = seeded(seed);
        let m = generate_synthetic(n, 20, &mut rng, Profile::Walker).unwrap();
        let s = split_manifest(&m, (train, val, test), &mut rng).unwrap();
        let mut seen = HashSet::new();
        let mut total = 0;
        for split in [Split::Train, Split::Val, Split::Test] {
            for id in s.split_ids(split) {
                prop_assert!(seen.insert(id.clone()), "duplicate id {}", id);
                total += 1;
            }
        }
        prop_assert_eq!(total, n);
        let expected = (train * n as f64).round() as i64;
        prop_assert!((s.split_ids(Split::Train).len() as i64 - expected).abs() <= 1);
    }

    #[test]
    fn classify_is_monotone(p in 0.0f64..=1.0, q in 0.0f64..=1.0, th in 0.0f64..=1.0) {
        let (lo, hi) = if p <= q { (p, q) } else { (q, p) };
        prop_assert!(classify(lo, th).unwrap() <= classify(hi, th).unwrap());
        prop_assert_eq!(classify(p, th).unwrap() == 1, p >= th);
    }

    #[test]
    fn eo_masks_hide_exactly_m_frames(seed in any::<u64>(), t in 2usize..30, frac in 0.0f64..1.0) {
        let m = ((t - 1) as f64 * frac) as usize;
        let mask = gen_eo_mask(t, m, &mut seeded(seed)).unwrap();
        prop_assert_eq!(mask.len(), t);
        prop_assert_eq!(mask.count(), m);
        prop_assert!(gen_eo_mask(t, t, &mut seeded(seed)).is_err());
    }

    #[test]
    fn po_masks_are_one_contiguous_run(seed in any::<u64>(), t in 2usize..30, frac in 0.0f64..1.0) {
        let m = ((t - 1) as f64 * frac) as usize;
        let mask = gen_po_mask(t, m, &mut seeded(seed)).unwrap();
        prop_assert_eq!(mask.count(), m);
        let hidden: Vec<usize> = (0..t).filter(|&i| mask.is_occluded(i)).collect();
        if let (Some(&first), Some(&last)) = (hidden.first(), hidden.last()) {
            prop_assert_eq!(last - first + 1, m);
        }
    }

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), p in 0.0f64..=1.0, y in 0u8..2) {
        let a = rand(6, 7, seed);
        let b = rand(6, 7, seed ^ 9);
        prop_assert!(loss_simple(&a, &b).unwrap() >= 0.0);
        prop_assert_eq!(loss_simple(&a, &a).unwrap(), 0.0);
        let l = loss_intent(y, p);
        prop_assert!(l.is_finite() && l >= 0.0);
        // Confident and correct costs less than confident and wrong.
        prop_assert!(loss_intent(1, 0.9) < loss_intent(0, 0.9));
    }

    #[test]
    fn masking_and_baselines_keep_observed_rows(seed in any::<u64>(), m in 1usize..14, kind in 0usize..3, hold in any::<bool>()) {
        let x = rand(15, 7, seed);
        let mask = gen_eo_mask(15, m, &mut seeded(seed ^ 5)).unwrap();
        let fill = if hold { FillMode::HoldLast } else { FillMode::Zero };
        let obs = apply_mask(&x, &mask, fill).unwrap();
        let kind = [BaselineKind::Mean, BaselineKind::Linear, BaselineKind::HoldLast][kind];
        let imputed = baseline_impute(&obs, &mask, kind).unwrap();
        for t in 0..15 {
            if !mask.is_occluded(t) {
                prop_assert_eq!(obs.row(t), x.row(t));
                prop_assert_eq!(imputed.row(t), x.row(t));
            } else if !hold {
                prop_assert!(obs.row(t).iter().all(|&v| v == 0.0));
            }
        }
    }
}
