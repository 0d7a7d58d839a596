mod common;

use common::*;
use sjm::cox::{fit_cox, log_partial_likelihood};
use sjm::sjm::{assemble_normal_equations, Assembly, RiskScoreIndex};
use sjm::{breslow, cox_score_and_info, fit_sjm, CoxOptions, DesignSpec, SjmOptions};

use rand::Rng;

#[test]
fn estimating_function_matches_triple_loop() {
    let mut checked = 0;
    for seed in 0..40u64 {
        let Some(data) = random_trial(seed, 12 + (seed as usize % 13), 1) else {
            continue;
        };
        let eta = [0.4, -0.3];
        let index = RiskScoreIndex::new(&data, &eta, breslow(&data, &eta).unwrap());
        let spec = DesignSpec::linear(2);
        let eq = assemble_normal_equations(&data, &index, &spec, &Assembly::default()).unwrap();
        let mut r = rng(seed + 1000);
        for _ in 0..3 {
            let beta: Vec<f64> = (0..3).map(|_| r.random_range(-5.0..5.0)).collect();
            let fast = eq.estimating_function(&beta);
            let slow = brute_force_u(&data, &eta, &linear_row, &beta);
            assert!(rel_diff(&fast, &slow) < 1e-10, "seed {seed}: {fast:?} vs {slow:?}");
        }
        checked += 1;
    }
    assert!(checked >= 30);
}

#[test]
fn closed_form_is_root_of_triple_loop() {
    let mut checked = 0;
    let mut seed = 0;
    while checked < 20 && seed < 200 {
        seed += 1;
        let Some(data) = random_trial(seed, 10 + (seed as usize % 16), 1) else {
            continue;
        };
        let Ok(fit) = fit_sjm(&data, &DesignSpec::linear(2), &SjmOptions::default()) else {
            continue;
        };
        let eta = fit.cox.eta_hat.clone();
        let u = |b: &[f64]| brute_force_u(&data, &eta, &linear_row, b);
        let root = affine_root(&u, 3);
        assert!(rel_diff(&root, &fit.beta_hat) < 1e-8, "seed {seed}");
        let at_hat = u(&fit.beta_hat);
        let scale = max_abs(&u(&[0.0; 3])).max(1.0);
        assert!(max_abs(&at_hat) / scale < 1e-8);
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn cox_score_matches_central_differences() {
    let mut checked = 0;
    for seed in 0..60u64 {
        let Some(data) = random_trial(seed, 20, 2) else {
            continue;
        };
        let mut r = rng(seed);
        let eta: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let (score, info) = cox_score_and_info(&data, &eta).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            let mut up = eta.clone();
            let mut dn = eta.clone();
            up[a] += h;
            dn[a] -= h;
            let fd = (partial_loglik(&data, &up) - partial_loglik(&data, &dn)) / (2.0 * h);
            assert!((fd - score[a]).abs() <= 1e-4 * score[a].abs().max(1.0), "seed {seed} score[{a}]");
            let (su, _) = cox_score_and_info(&data, &up).unwrap();
            let (sd, _) = cox_score_and_info(&data, &dn).unwrap();
            for b in 0..3 {
                let fd_info = -(su[b] - sd[b]) / (2.0 * h);
                let scale = info[(a, b)].abs().max(1.0);
                assert!((fd_info - info[(a, b)]).abs() <= 1e-4 * scale, "seed {seed} info[{a},{b}]");
            }
        }
        let lib = log_partial_likelihood(&data, &eta).unwrap();
        assert!((lib - partial_loglik(&data, &eta)).abs() < 1e-10 * lib.abs().max(1.0));
        checked += 1;
        if checked == 20 {
            break;
        }
    }
    assert_eq!(checked, 20);
}

#[test]
fn cox_estimate_matches_grid_search() {
    let mut checked = 0;
    for seed in 0..40u64 {
        let Some(data) = random_trial(seed, 25, 0) else {
            continue;
        };
        let Ok(fit) = fit_cox(&data, &CoxOptions::default()) else {
            continue;
        };
        let oracle = grid_argmax(&|e| partial_loglik(&data, &[e]), -8.0, 8.0);
        assert!((fit.eta_hat[0] - oracle).abs() < 1e-6, "seed {seed}: {} vs {oracle}", fit.eta_hat[0]);
        checked += 1;
    }
    assert!(checked >= 20);
}

#[test]
fn partial_likelihood_is_concave_along_lines() {
    for seed in 0..20u64 {
        let Some(data) = random_trial(seed, 20, 2) else {
            continue;
        };
        let mut r = rng(seed + 7);
        let x: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let at = |s: f64| -> f64 {
            let p: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
            log_partial_likelihood(&data, &p).unwrap()
        };
        for k in -5..5 {
            let s = k as f64 * 0.3;
            let second = at(s + 0.1) - 2.0 * at(s) + at(s - 0.1);
            assert!(second <= 1e-9, "seed {seed}: second difference {second}");
        }
    }
}

#[test]
fn breslow_matches_definition() {
    for seed in 0..10u64 {
        let Some(data) = random_trial(seed, 15, 1) else {
            continue;
        };
        let eta = [0.3, 0.8];
        let step = breslow(&data, &eta).unwrap();
        for s in data.subjects() {
            for t in [s.followup_time, s.followup_time - 0.25, s.followup_time + 0.1] {
                let want = breslow_at(&data, &eta, t);
                assert!((step.eval(t) - want).abs() < 1e-12 * want.max(1.0));
            }
        }
    }
}
