//! Independent reference implementations shared by integration tests.
#![allow(dead_code)]

use deepfidelity::fidelity::Label;
use deepfidelity::svr::SvrModel;

/// Dense projected-gradient (FISTA with adaptive restart) solver for the
/// ε-SVR dual over `(α, α*)`. Returns the maximized dual objective and β.
pub fn qp_oracle(gram: &[f64], y: &[f64], c: f64, eps: f64, iters: usize) -> (f64, Vec<f64>) {
    let n = y.len();
    let m = 2 * n;
    let sgn = |t: usize| if t < n { 1.0 } else { -1.0 };
    let idx = |t: usize| t % n;
    let lip = 2.0
        * (0..n)
            .map(|i| (0..n).map(|j| gram[i * n + j].abs()).sum::<f64>())
            .fold(0.0, f64::max);
    let p: Vec<f64> = (0..m).map(|t| eps - sgn(t) * y[idx(t)]).collect();
    let obj = |a: &[f64]| -> f64 {
        let beta: Vec<f64> = (0..n).map(|i| a[i] - a[i + n]).collect();
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += beta[i] * gram[i * n + j] * beta[j];
            }
        }
        0.5 * quad + p.iter().zip(a).map(|(p, a)| p * a).sum::<f64>()
    };
    let grad = |a: &[f64]| -> Vec<f64> {
        let beta: Vec<f64> = (0..n).map(|i| a[i] - a[i + n]).collect();
        (0..m)
            .map(|t| sgn(t) * (0..n).map(|j| gram[idx(t) * n + j] * beta[j]).sum::<f64>() + p[t])
            .collect()
    };
    let project = |v: &[f64]| -> Vec<f64> {
        let at = |lam: f64| -> Vec<f64> { (0..m).map(|t| (v[t] - lam * sgn(t)).clamp(0.0, c)).collect() };
        let bound = v.iter().fold(0.0f64, |b, x| b.max(x.abs())) + c + 1.0;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let s: f64 = at(mid).iter().enumerate().map(|(t, a)| sgn(t) * a).sum();
            if s > 0.0 { lo = mid } else { hi = mid }
        }
        at(0.5 * (lo + hi))
    };
    let mut x = vec![0.0; m];
    let mut z = x.clone();
    let mut t = 1.0f64;
    let mut fx = obj(&x);
    for _ in 0..iters {
        let g = grad(&z);
        let step: Vec<f64> = (0..m).map(|k| z[k] - g[k] / lip).collect();
        let xn = project(&step);
        let fn_ = obj(&xn);
        if fn_ > fx {
            z = x.clone();
            t = 1.0;
            continue;
        }
        let tn = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        z = (0..m).map(|k| xn[k] + (t - 1.0) / tn * (xn[k] - x[k])).collect();
        x = xn;
        fx = fn_;
        t = tn;
    }
    let beta = (0..n).map(|i| x[i] - x[i + n]).collect();
    (-fx, beta)
}

/// Optimality-condition check written in the (α, α*) complementarity form.
pub fn kkt_oracle(model: &SvrModel, xs: &[Vec<f64>], ys: &[f64], c: f64, eps: f64) -> f64 {
    let z: Vec<Vec<f64>> = xs
        .iter()
        .map(|x| {
            x.iter()
                .enumerate()
                .map(|(k, v)| (v - model.feature_mean[k]) / model.feature_std[k])
                .collect()
        })
        .collect();
    let kernel = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum();
        (-d / (2.0 * model.sigma * model.sigma)).exp()
    };
    let mut taken = vec![false; model.support_vectors.len()];
    let mut worst = model.dual_coefs.iter().sum::<f64>().abs();
    for (i, zi) in z.iter().enumerate() {
        let mut beta = 0.0;
        for (k, sv) in model.support_vectors.iter().enumerate() {
            if !taken[k] && sv.iter().zip(zi).all(|(a, b)| (a - b).abs() < 1e-12) {
                taken[k] = true;
                beta = model.dual_coefs[k];
                break;
            }
        }
        let f: f64 = model
            .support_vectors
            .iter()
            .zip(&model.dual_coefs)
            .map(|(sv, b)| b * kernel(sv, zi))
            .sum::<f64>()
            + model.bias;
        let r = ys[i] - f;
        let (a, a_star) = (beta.max(0.0), (-beta).max(0.0));
        let mut v = (beta.abs() - c).max(0.0);
        if a < c {
            v = v.max(r - eps);
        }
        if a > 0.0 {
            v = v.max(eps - r);
        }
        if a_star < c {
            v = v.max(-r - eps);
        }
        if a_star > 0.0 {
            v = v.max(r + eps);
        }
        worst = worst.max(v);
    }
    worst
}

/// O(n²) pairwise AUC with half credit for ties.
pub fn auc_oracle(scores: &[f64], labels: &[Label]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != Label::Real {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != Label::Fake {
                continue;
            }
            den += 1.0;
            num += if si > sj { 1.0 } else if si == sj { 0.5 } else { 0.0 };
        }
    }
    num / den
}
