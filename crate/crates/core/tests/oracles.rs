//! Library outputs against independent brute-force and finite-difference
//! oracles, plus a few frozen hand-derived values.

mod common;

use common::*;
use rand::Rng;
use softlabel::aggregate::{aggregate_avg, aggregate_max, aggregate_minmax, final_pseudo_labels};
use softlabel::alignment::{class_softmax, cosine, ScoreKind};
use softlabel::eval::{average_precision, mean_ap};
use softlabel::pseudo::{init_from_scores, sigmoid};
use softlabel::trainer::{grad_wrt_pseudo, kl_loss, psi, refine_pseudo_labels, RefineParams, DEFAULT_SIGMA_G};

fn random_instance(seed: u64, n: usize, c: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut r = rng(seed);
    let locals = (0..n).map(|_| random_simplex(&mut r, c)).collect();
    (locals, random_simplex(&mut r, c))
}

#[test]
fn aggregators_match_brute_force() {
    for seed in 0..300 {
        let (locals, global) = random_instance(seed, 9, 20);
        let lv: Vec<_> = locals
            .iter()
            .enumerate()
            .map(|(j, v)| vector(v.clone(), ScoreKind::Local, Some(j)))
            .collect();
        let gv = vector(global.clone(), ScoreKind::Global, None);
        // Low thresholds exercise both branches on simplex-valued scores.
        for zeta in [0.0, 0.05, 0.2, 0.5, 1.0] {
            assert_eq!(aggregate_minmax(&lv, zeta).unwrap().scores, minmax_oracle(&locals, zeta));
        }
        assert_eq!(aggregate_avg(&lv, &gv).unwrap().scores, avg_oracle(&locals, &global));
        assert_eq!(aggregate_max(&lv, &gv).unwrap().scores, max_oracle(&locals, &global));
    }
}

#[test]
fn minmax_hand_example() {
    // Two snippets, three classes, zeta 0.5: class 0 clears the threshold,
    // classes 1 and 2 fall back to their minima.
    let lv = vec![
        vector(vec![0.7, 0.2, 0.1], ScoreKind::Local, Some(0)),
        vector(vec![0.4, 0.35, 0.25], ScoreKind::Local, Some(1)),
    ];
    let agg = aggregate_minmax(&lv, 0.5).unwrap();
    assert_eq!(agg.scores, vec![0.7, 0.2, 0.1]);
    let g = vector(vec![0.5, 0.3, 0.2], ScoreKind::Global, None);
    let fin = final_pseudo_labels(&g, &agg).unwrap();
    assert_eq!(fin.scores, vec![0.6, 0.25, 0.15000000000000002]);
}

#[test]
fn average_precision_matches_rank_enumeration() {
    let mut r = rng(7);
    for _ in 0..400 {
        let n = r.random_range(1..40);
        // Coarse scores force frequent ties.
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64 / 5.0).collect();
        let labels: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        let got = average_precision(&scores, &labels).unwrap();
        let want = ap_oracle(&scores, &labels);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{a} vs {b}"),
            (None, None) => {}
            other => panic!("mismatch {other:?}"),
        }
    }
}

#[test]
fn average_precision_hand_values() {
    let ap = average_precision(&[0.9, 0.8, 0.1], &[true, false, true]).unwrap().unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    // Tie: the earlier-listed item ranks first.
    let tie = average_precision(&[0.5, 0.5], &[false, true]).unwrap().unwrap();
    assert_eq!(tie, 0.5);
    assert_eq!(mean_ap(&[Some(1.0), None, Some(0.5)]), Some(0.75));
}

#[test]
fn kl_matches_definition_and_gradient_matches_finite_differences() {
    let mut r = rng(11);
    for _ in 0..100 {
        let c = r.random_range(1..8);
        let y_p: Vec<f64> = (0..c).map(|_| r.random_range(0.05..0.95)).collect();
        let y_u: Vec<f64> = (0..c).map(|_| r.random_range(0.05..0.95)).collect();
        let loss = kl_loss(&y_p, &y_u).unwrap();
        assert!((loss - kl_oracle(&y_p, &y_u)).abs() < 1e-12);
        let g = grad_wrt_pseudo(&y_p, &y_u).unwrap();
        for i in 0..c {
            let fd = central_difference(|u| kl_oracle(&y_p, u), &y_u, i, 1e-6);
            assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "{} vs {fd}", g[i]);
        }
    }
}

#[test]
fn frozen_kl_value() {
    // KL(0.5 || 0.9) = 0.5 ln(5/9) + 0.5 ln 5.
    let want = 0.5 * (5.0f64 / 9.0).ln() + 0.5 * 5.0f64.ln();
    assert!((kl_loss(&[0.9], &[0.5]).unwrap() - want).abs() < 1e-15);
    assert!((want - 0.5108256237659907).abs() < 1e-15);
}

#[test]
fn cosine_matches_direct_sum() {
    let mut r = rng(3);
    for _ in 0..200 {
        let k = r.random_range(1..32);
        let a: Vec<f32> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| *x as f64 * *y as f64).sum();
        let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        assert!((cosine(&a, &b).unwrap() - dot / (na * nb)).abs() < 1e-12);
    }
}

#[test]
fn frozen_softmax_value() {
    // Two classes 0.1 apart at tau = 0.01: logistic of 10.
    let p = class_softmax(&[0.3, 0.2], 0.01).unwrap();
    assert!((p[0] - 0.9999546021312976).abs() < 1e-12);
    assert!((p[0] + p[1] - 1.0).abs() < 1e-15);
}

#[test]
fn refine_matches_hand_update() {
    // Two classes, eta 0.5: latent_i -= 0.5 * psi(y_u) * (logit y_u - logit y_p) / 2.
    let scores = vec![vector(vec![0.3, 0.8], ScoreKind::Final, None)];
    let mut set = init_from_scores(&scores, 1e-6).unwrap();
    let before = set.latents().to_vec();
    let y_p = vec![0.6, 0.4];
    let params = RefineParams {
        eta: 0.5,
        ..RefineParams::default()
    };
    refine_pseudo_labels(&mut set, &[y_p.clone()], &params).unwrap();
    for i in 0..2 {
        let y_u = sigmoid(before[i]);
        let g = (y_u / y_p[i]).ln() - ((1.0 - y_u) / (1.0 - y_p[i])).ln();
        let want = before[i] - 0.5 * psi(y_u, DEFAULT_SIGMA_G) * g / 2.0;
        assert!((set.latents()[i] - want).abs() < 1e-12);
    }
}
