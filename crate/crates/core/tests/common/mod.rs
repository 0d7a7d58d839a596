//! Test-only oracles and fixtures. Everything here is written directly from
//! the model definitions and shares no code path with the library beyond
//! the data containers.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use sjm::{Subject, TrialData, Visit};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn subject(id: usize, covariates: Vec<f64>, t: f64, event: bool) -> Subject {
    Subject {
        id: format!("s{id}"),
        covariates,
        followup_time: t,
        event,
    }
}

/// Small random trial with ties in follow-up and visit times, a binary
/// treatment and `extra` continuous covariates. Returns `None` when the
/// draw has no events or a single arm.
pub fn random_trial(seed: u64, n: usize, extra: usize) -> Option<TrialData> {
    let mut r = rng(seed);
    let mut subjects = Vec::with_capacity(n);
    let mut visits = Vec::with_capacity(n);
    for k in 0..n {
        let a = if r.random_bool(0.5) { 1.0 } else { 0.0 };
        let mut cov = vec![a];
        for _ in 0..extra {
            let z: f64 = StandardNormal.sample(&mut r);
            cov.push((z * 4.0).round() / 4.0);
        }
        let t = (r.random_range(1.0..10.0f64) * 2.0).round() / 2.0;
        let event = r.random_bool(0.7);
        let m = r.random_range(0..6usize);
        let mut times: Vec<f64> = (0..m)
            .map(|_| (r.random_range(0.0..t) * 4.0).floor() / 4.0)
            .filter(|&s| s < t)
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let vs = times
            .into_iter()
            .map(|time| {
                let e: f64 = StandardNormal.sample(&mut r);
                Visit {
                    time,
                    value: 3.0 + 2.0 * a * time + e,
                }
            })
            .collect();
        subjects.push(subject(k, cov, t, event));
        visits.push(vs);
    }
    let arms = subjects.iter().map(|s| s.covariates[0]).sum::<f64>();
    if arms == 0.0 || arms == n as f64 {
        return None;
    }
    TrialData::new(subjects, visits, None).ok()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Breslow cumulative hazard at `t`, straight from its definition.
pub fn breslow_at(data: &TrialData, eta: &[f64], t: f64) -> f64 {
    let subjects = data.subjects();
    let mut event_times: Vec<f64> = subjects
        .iter()
        .filter(|s| s.event && s.followup_time <= t)
        .map(|s| s.followup_time)
        .collect();
    event_times.sort_by(f64::total_cmp);
    event_times.dedup();
    event_times
        .iter()
        .map(|&u| {
            let d = subjects
                .iter()
                .filter(|s| s.event && s.followup_time == u)
                .count() as f64;
            let at_risk: f64 = subjects
                .iter()
                .filter(|s| s.followup_time >= u)
                .map(|s| dot(&s.covariates, eta).exp())
                .sum();
            d / at_risk
        })
        .sum()
}

/// Log partial likelihood with Breslow ties, without any stabilisation.
pub fn partial_loglik(data: &TrialData, eta: &[f64]) -> f64 {
    let subjects = data.subjects();
    subjects
        .iter()
        .filter(|s| s.event)
        .map(|s| {
            let at_risk: f64 = subjects
                .iter()
                .filter(|k| k.followup_time >= s.followup_time)
                .map(|k| dot(&k.covariates, eta).exp())
                .sum();
            dot(&s.covariates, eta) - at_risk.ln()
        })
        .sum()
}

/// Time design row for the linear layout `(A, A t, Z_-1)`.
pub fn linear_row(s: &Subject, t: f64) -> Vec<f64> {
    let a = s.covariates[0];
    let mut row = vec![a, a * t];
    row.extend_from_slice(&s.covariates[1..]);
    row
}

/// Estimating function evaluated by direct triple summation over subjects
/// `i`, pooled visit times `t` and band members `j`.
pub fn brute_force_u(
    data: &TrialData,
    eta: &[f64],
    design: &dyn Fn(&Subject, f64) -> Vec<f64>,
    beta: &[f64],
) -> Vec<f64> {
    let subjects = data.subjects();
    let n = subjects.len();
    let p = beta.len();
    let lam_t = |t: f64| breslow_at(data, eta, t);
    let score: Vec<f64> = subjects
        .iter()
        .map(|s| lam_t(s.followup_time) * dot(&s.covariates, eta).exp())
        .collect();
    let rr: Vec<f64> = subjects.iter().map(|s| dot(&s.covariates, eta).exp()).collect();
    let visit_value = |j: usize, t: f64| data.visits()[j].iter().find(|v| v.time == t).map(|v| v.value);
    let mut times: Vec<f64> = data.visits().iter().flatten().map(|v| v.time).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut u = vec![0.0; p];
    for i in 0..n {
        for &t in times.iter().filter(|&&t| t <= data.tau()) {
            if !(subjects[i].followup_time > t) {
                continue;
            }
            let lam = lam_t(t);
            let band: Vec<usize> = (0..n)
                .filter(|&j| score[j] > lam * rr[i] && lam * rr[i] >= lam * rr[j])
                .collect();
            if band.is_empty() {
                continue;
            }
            let m = band.len() as f64;
            let mut z_bar = vec![0.0; p];
            let mut dy_bar = 0.0;
            let mut dg_bar = vec![0.0; p];
            for &j in &band {
                let zj = design(&subjects[j], t);
                for k in 0..p {
                    z_bar[k] += zj[k] / m;
                }
                if let Some(y) = visit_value(j, t) {
                    dy_bar += y / m;
                    for k in 0..p {
                        dg_bar[k] += zj[k] / m;
                    }
                }
            }
            let zi = design(&subjects[i], t);
            let (yi, dni) = match visit_value(i, t) {
                Some(y) => (y, 1.0),
                None => (0.0, 0.0),
            };
            let resid = yi * dni - dy_bar - (dot(beta, &zi) * dni - dot(beta, &dg_bar));
            for k in 0..p {
                u[k] += (zi[k] - z_bar[k]) * resid;
            }
        }
    }
    u
}

/// Root of an affine map by Newton iteration with a finite-difference
/// Jacobian (exact up to rounding for affine maps).
pub fn affine_root(f: &dyn Fn(&[f64]) -> Vec<f64>, p: usize) -> Vec<f64> {
    let mut x = vec![0.0; p];
    for _ in 0..3 {
        let f0 = f(&x);
        let mut jac = nalgebra::DMatrix::<f64>::zeros(p, p);
        for c in 0..p {
            let mut xp = x.clone();
            xp[c] += 1.0;
            let fc = f(&xp);
            for r in 0..p {
                jac[(r, c)] = fc[r] - f0[r];
            }
        }
        let step = jac
            .lu()
            .solve(&nalgebra::DVector::from_vec(f0.clone()))
            .expect("oracle Jacobian singular");
        for k in 0..p {
            x[k] -= step[k];
        }
    }
    x
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = max_abs(a).max(max_abs(b)).max(1.0);
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

/// Rebuilds `data` with outcomes replaced by `f(subject, t)`.
pub fn with_outcomes(data: &TrialData, f: &dyn Fn(&Subject, f64) -> f64) -> TrialData {
    let visits = data
        .subjects()
        .iter()
        .zip(data.visits())
        .map(|(s, vs)| {
            vs.iter()
                .map(|v| Visit {
                    time: v.time,
                    value: f(s, v.time),
                })
                .collect()
        })
        .collect();
    TrialData::new(data.subjects().to_vec(), visits, Some(data.tau())).unwrap()
}

/// Maximiser of a unimodal function on `[lo, hi]`: a coarse grid followed by
/// golden-section refinement.
pub fn grid_argmax(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
    let steps = 2000;
    let h = (hi - lo) / steps as f64;
    let best = (0..=steps)
        .map(|k| lo + h * k as f64)
        .max_by(|a, b| f(*a).total_cmp(&f(*b)))
        .unwrap();
    let (mut a, mut b) = (best - h, best + h);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-10 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c) > f(d) {
            b = d;
        } else {
            a = c;
        }
    }
    0.5 * (a + b)
}
