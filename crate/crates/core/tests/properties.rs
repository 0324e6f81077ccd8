use std::collections::HashMap;

use percept_core::analysis::{hopkins_statistic, Band};
use percept_core::answers::{AnswerStore, Choice, TrialKind, TripletAnswer};
use percept_core::gamut::{box_project, simplex_project};
use percept_core::losses::{
    batch_hard_triplet_loss, similarity_loss, softmax_cross_entropy, triplet_geometry, triplet_loss, TripletFeatures,
};
use percept_core::optim::step_decay;
use percept_core::sampling::information_gain;
use percept_core::tste::{kernel, log_likelihood, log_likelihood_gradient, tste_probability};
use proptest::prelude::*;

fn vec_of(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, dim)
}

fn triplet(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (vec_of(dim), vec_of(dim), vec_of(dim))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(1e-8)
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn split3(x: &[f64]) -> (&[f64], &[f64], &[f64]) {
    let d = x.len() / 3;
    (&x[..d], &x[d..2 * d], &x[2 * d..])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn similarity_probabilities_sum_to_one((r, a, b) in triplet(4)) {
        let g = triplet_geometry(&r, &a, &b).unwrap();
        prop_assert!((g.p_ra + g.p_rb - 1.0).abs() < 1e-12);
        prop_assert!(g.p_ra > 0.0 && g.p_ra < 1.0);
    }

    #[test]
    fn losses_are_translation_invariant((r, a, b) in triplet(3), shift in vec_of(3), mu in 0.0..1.0f64) {
        let moved = |v: &[f64]| v.iter().zip(&shift).map(|(x, s)| x + s).collect::<Vec<_>>();
        let (r2, a2, b2) = (moved(&r), moved(&a), moved(&b));
        let t1 = [TripletFeatures { r: &r, a: &a, b: &b }];
        let t2 = [TripletFeatures { r: &r2, a: &a2, b: &b2 }];
        let tl = (triplet_loss(&t1, mu).unwrap().value, triplet_loss(&t2, mu).unwrap().value);
        let lp = (similarity_loss(&t1).unwrap().value, similarity_loss(&t2).unwrap().value);
        prop_assert!((tl.0 - tl.1).abs() < 1e-9);
        prop_assert!((lp.0 - lp.1).abs() < 1e-9);
        prop_assert!(tl.0 >= 0.0 && lp.0 > 0.0);
    }

    #[test]
    fn similarity_loss_falls_as_the_chosen_side_gets_closer((r, a, b) in triplet(3), t in 0.05..0.95f64) {
        // Pulling the chosen candidate toward the reference never raises L_P.
        let closer: Vec<f64> = a.iter().zip(&r).map(|(x, y)| x + t * (y - x)).collect();
        let before = similarity_loss(&[TripletFeatures { r: &r, a: &a, b: &b }]).unwrap().value;
        let after = similarity_loss(&[TripletFeatures { r: &r, a: &closer, b: &b }]).unwrap().value;
        prop_assert!(after <= before + 1e-12);
    }

    #[test]
    fn triplet_loss_gradients_match_differences((r, a, b) in triplet(3), mu in 0.0..1.0f64) {
        let g = triplet_geometry(&r, &a, &b).unwrap();
        prop_assume!((g.d_ra - g.d_rb + mu).abs() > 1e-3);
        let x: Vec<f64> = [r.clone(), a.clone(), b.clone()].concat();
        let value = |x: &[f64]| {
            let (r, a, b) = split3(x);
            triplet_loss(&[TripletFeatures { r, a, b }], mu).unwrap().value
        };
        let out = triplet_loss(&[TripletFeatures { r: &r, a: &a, b: &b }], mu).unwrap();
        let grad = &out.gradients[0];
        let analytic = [grad.r.clone(), grad.a.clone(), grad.b.clone()].concat();
        prop_assert!(rel_err(&analytic, &numeric_grad(&x, value)) < 1e-5);
    }

    #[test]
    fn similarity_loss_gradients_match_differences((r, a, b) in triplet(3)) {
        let x: Vec<f64> = [r.clone(), a.clone(), b.clone()].concat();
        let value = |x: &[f64]| {
            let (r, a, b) = split3(x);
            similarity_loss(&[TripletFeatures { r, a, b }]).unwrap().value
        };
        let out = similarity_loss(&[TripletFeatures { r: &r, a: &a, b: &b }]).unwrap();
        let grad = &out.gradients[0];
        let analytic = [grad.r.clone(), grad.a.clone(), grad.b.clone()].concat();
        prop_assert!(rel_err(&analytic, &numeric_grad(&x, value)) < 1e-5);
    }

    #[test]
    fn softmax_cross_entropy_gradients_match_differences(
        logits in prop::collection::vec(vec_of(4), 1..4),
        label_seed in any::<u64>(),
        eps in 0.0..0.5f64,
    ) {
        let labels: Vec<usize> = (0..logits.len()).map(|i| ((label_seed >> (2 * i)) % 4) as usize).collect();
        let (_, grads) = softmax_cross_entropy(&logits, &labels, eps).unwrap();
        let flat: Vec<f64> = logits.concat();
        let value = |x: &[f64]| {
            let rows: Vec<Vec<f64>> = x.chunks(4).map(<[f64]>::to_vec).collect();
            softmax_cross_entropy(&rows, &labels, eps).unwrap().0
        };
        prop_assert!(rel_err(&grads.concat(), &numeric_grad(&flat, value)) < 1e-5);
    }

    #[test]
    fn batch_hard_loss_is_non_negative_and_shift_invariant(
        feats in prop::collection::vec(vec_of(2), 4..8),
        shift in vec_of(2),
        mu in 0.0..1.0f64,
    ) {
        let labels: Vec<usize> = (0..feats.len()).map(|i| i % 2).collect();
        let (v, _) = batch_hard_triplet_loss(&feats, &labels, mu).unwrap();
        let moved: Vec<Vec<f64>> = feats.iter().map(|f| f.iter().zip(&shift).map(|(x, s)| x + s).collect()).collect();
        let (w, _) = batch_hard_triplet_loss(&moved, &labels, mu).unwrap();
        prop_assert!(v >= 0.0);
        prop_assert!((v - w).abs() < 1e-9);
    }

    #[test]
    fn tste_probabilities_are_complementary((r, a, b) in triplet(2), alpha in 0.5..20.0f64) {
        let p = tste_probability(&r, &a, &b, alpha);
        let q = tste_probability(&r, &b, &a, alpha);
        prop_assert!(p + q == 1.0);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn kernel_is_decreasing_and_bounded(q1 in 0.0..50.0f64, dq in 1e-6..50.0f64, alpha in 0.5..20.0f64) {
        let (k1, k2) = (kernel(q1, alpha), kernel(q1 + dq, alpha));
        prop_assert!(k1 <= 1.0 && k2 < k1 && k2 > 0.0);
    }

    #[test]
    fn tste_gradient_matches_differences(points in prop::collection::vec(vec_of(2), 5), seed in any::<u64>()) {
        let votes: Vec<(usize, usize, usize, u32)> = (0..8u64)
            .map(|i| {
                let h = seed.rotate_left(8 * i as u32) ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let r = (h % 5) as usize;
                let c = (r + 1 + (h >> 8) as usize % 4) % 5;
                let mut o = (c + 1 + (h >> 16) as usize % 3) % 5;
                if o == r {
                    o = (o + 1) % 5;
                    if o == c {
                        o = (o + 1) % 5;
                    }
                }
                (r, c, o, 1 + (h >> 24) as u32 % 3)
            })
            .filter(|&(r, c, o, _)| r != c && r != o && c != o)
            .collect();
        let flat = points.concat();
        let value = |x: &[f64]| {
            let pts: Vec<Vec<f64>> = x.chunks(2).map(<[f64]>::to_vec).collect();
            log_likelihood(&pts, &votes, 5.0)
        };
        let analytic = log_likelihood_gradient(&points, &votes, 5.0).concat();
        prop_assert!(rel_err(&analytic, &numeric_grad(&flat, value)) < 1e-5);
    }

    #[test]
    fn information_gain_is_bounded(weights in prop::collection::vec(0.0..1.0f64, 1..30), probs in prop::collection::vec(0.0..=1.0f64, 30)) {
        let total: f64 = weights.iter().sum();
        prop_assume!(total > 1e-6);
        let tau: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let ig = information_gain(&tau, &probs[..tau.len()]).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&ig));
    }

    #[test]
    fn simplex_projection_is_feasible_idempotent_and_non_expansive(v in vec_of(6), u in vec_of(6)) {
        let p = simplex_project(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let again = simplex_project(&p);
        prop_assert!(p.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-9));
        let q = simplex_project(&u);
        let dist = |a: &[f64], b: &[f64]| norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        prop_assert!(dist(&p, &q) <= dist(&v, &u) + 1e-12);
    }

    #[test]
    fn box_projection_is_idempotent(v in vec_of(5)) {
        let p = box_project(&v);
        prop_assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(box_project(&p), p);
    }

    #[test]
    fn hopkins_statistic_swaps_to_its_complement(
        u in prop::collection::vec(0.01..5.0f64, 1..20),
        w in prop::collection::vec(0.01..5.0f64, 1..20),
    ) {
        let h = hopkins_statistic(&u, &w);
        prop_assert!(h > 0.0 && h < 1.0);
        prop_assert!((hopkins_statistic(&w, &u) - (1.0 - h)).abs() < 1e-12);
    }

    #[test]
    fn bands_partition_the_ranking(m in 1usize..60) {
        for i in 0..m {
            let hits = [Band::Near, Band::Mid, Band::Far].iter().filter(|b| b.contains(i, m)).count();
            prop_assert_eq!(hits, 1);
        }
    }

    #[test]
    fn learning_rate_never_increases(epoch in 0usize..200, step in 1usize..40, decay in 1.0..20.0f64) {
        prop_assert!(step_decay(epoch + 1, 1e-3, step, decay) <= step_decay(epoch, 1e-3, step, decay));
    }

    #[test]
    fn tallies_recount_the_answers(raw in prop::collection::vec((0usize..5, 0usize..5, 0usize..5, any::<bool>()), 1..60)) {
        let ids = ["m0", "m1", "m2", "m3", "m4"];
        let answers: Vec<TripletAnswer> = raw
            .iter()
            .filter(|(r, a, b, _)| r != a && r != b && a != b)
            .map(|&(r, a, b, pick_a)| TripletAnswer {
                reference: ids[r].into(),
                option_a: ids[a].into(),
                option_b: ids[b].into(),
                chosen: if pick_a { Choice::A } else { Choice::B },
                worker: "w".into(),
                kind: TrialKind::Trial,
                timestamp: "2020-01-01T00:00:00Z".into(),
            })
            .collect();
        let store = AnswerStore::from_answers(answers.clone()).unwrap();
        prop_assert!(store.tallies_consistent());
        let mut recount: HashMap<(String, String), u32> = HashMap::new();
        for a in &answers {
            let key = a.key();
            *recount.entry((format!("{key:?}"), a.chosen_material().to_string())).or_default() += 1;
        }
        for cmp in store.comparisons() {
            for m in [&cmp.key.first, &cmp.key.second] {
                let expected = recount.get(&(format!("{:?}", cmp.key), m.clone())).copied().unwrap_or(0);
                prop_assert_eq!(cmp.votes_for(m), expected);
            }
        }
        let total: u32 = store.comparisons().map(|c| c.tally.total()).sum();
        prop_assert_eq!(total as usize, answers.len());
    }
}
