//! Independent reference solvers used as test oracles.
#![allow(dead_code)]

use rand::Rng;

/// Water level by bisection on `Σ min(cap, τ) = 1`.
pub fn bisection_level(caps: &[f64]) -> f64 {
    let (mut lo, mut hi) = (0.0, caps.iter().copied().fold(0.0, f64::max));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let s: f64 = caps.iter().map(|c| c.min(mid)).sum();
        if s < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Euclidean projection of the uniform vector onto
/// `{x : 0 ≤ x ≤ caps, Σ x = 1}` by Dykstra's alternating projections.
pub fn dykstra_projection(caps: &[f64]) -> Vec<f64> {
    let l = caps.len();
    let mut x = vec![1.0 / l as f64; l];
    let mut p = vec![0.0; l];
    let mut q = vec![0.0; l];
    for _ in 0..200_000 {
        let prev = x.clone();
        // box
        let y: Vec<f64> = (0..l).map(|i| (x[i] + p[i]).clamp(0.0, caps[i])).collect();
        for i in 0..l {
            p[i] = x[i] + p[i] - y[i];
        }
        // hyperplane Σ = 1
        let z: Vec<f64> = (0..l).map(|i| y[i] + q[i]).collect();
        let shift = (1.0 - z.iter().sum::<f64>()) / l as f64;
        let nx: Vec<f64> = z.iter().map(|v| v + shift).collect();
        for i in 0..l {
            q[i] = y[i] + q[i] - nx[i];
        }
        x = nx;
        let change: f64 = x.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if change < 1e-15 {
            break;
        }
    }
    x
}

/// A random point of `{x : 0 ≤ x ≤ caps, Σ x = 1}` (requires `Σ caps ≥ 1`).
pub fn random_feasible<R: Rng>(caps: &[f64], rng: &mut R) -> Vec<f64> {
    let mut x: Vec<f64> = caps.iter().map(|c| c * rng.random::<f64>()).collect();
    let s: f64 = x.iter().sum();
    if s > 1.0 {
        x.iter_mut().for_each(|v| *v /= s);
    } else {
        let room: f64 = caps.iter().sum::<f64>() - s;
        let lambda = if room > 0.0 { (1.0 - s) / room } else { 0.0 };
        x.iter_mut().zip(caps).for_each(|(v, c)| *v += lambda * (c - *v));
    }
    x
}

/// Minimum-variance inclusion probabilities by enumerating every saturated
/// set. For a saturated set `S` the rest get `p_k = c · v_k` with
/// `v_k = n_k ‖U_k‖ / √r_k` and `c` fixed by the budget; a pattern is a KKT
/// point when every unsaturated `p_k ≤ 1` and every saturated client has
/// `c · v_k ≥ 1`.
pub fn kkt_enumeration(n: &[f64], norms: &[f64], r: &[f64], kappa: f64) -> Vec<f64> {
    let k = n.len();
    let v: Vec<f64> = (0..k).map(|i| n[i] * norms[i] / r[i].sqrt()).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;
    for bits in 0u32..(1 << k) {
        let sat = |i: usize| bits & (1 << i) != 0;
        let sat_mass: f64 = (0..k).filter(|&i| sat(i)).map(|i| r[i]).sum();
        let rest: f64 = (0..k).filter(|&i| !sat(i)).map(|i| r[i] * v[i]).sum();
        let p: Vec<f64> = if rest == 0.0 {
            if (sat_mass - kappa).abs() > 1e-12 {
                continue;
            }
            vec![1.0; k]
        } else {
            let c = (kappa - sat_mass) / rest;
            if c <= 0.0 {
                continue;
            }
            let p: Vec<f64> = (0..k).map(|i| if sat(i) { 1.0 } else { c * v[i] }).collect();
            let kkt = (0..k).all(|i| if sat(i) { c * v[i] >= 1.0 - 1e-12 } else { p[i] <= 1.0 + 1e-12 });
            if !kkt {
                continue;
            }
            p
        };
        let var: f64 = (0..k).map(|i| n[i] * n[i] * norms[i] * norms[i] * (1.0 / p[i] - 1.0)).sum();
        if best.as_ref().is_none_or(|(b, _)| var < *b) {
            best = Some((var, p));
        }
    }
    best.expect("some saturation pattern is a KKT point").1
}

/// A random probability vector in `(0, 1]` with `Σ r_k p_k = κ`.
pub fn random_budget_point<R: Rng>(r: &[f64], kappa: f64, rng: &mut R) -> Vec<f64> {
    let mut p: Vec<f64> = r.iter().map(|_| rng.random_range(1e-3..=1.0)).collect();
    let mass: f64 = p.iter().zip(r).map(|(p, r)| p * r).sum();
    if mass > kappa {
        p.iter_mut().for_each(|v| *v *= kappa / mass);
    } else {
        let room: f64 = p.iter().zip(r).map(|(p, r)| (1.0 - p) * r).sum();
        let lambda = if room > 0.0 { (kappa - mass) / room } else { 0.0 };
        p.iter_mut().for_each(|v| *v += lambda * (1.0 - *v));
    }
    p
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(&x);
            x[i] = orig - h;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
