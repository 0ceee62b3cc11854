//! ε-insensitive support-vector regression with an RBF kernel.
//!
//! The dual is solved over the `2n` variables `(α, α*)` by pairwise updates
//! on the maximal violating pair. Features are z-scored with training
//! statistics that travel with the model.

use std::path::Path;

use crate::error::{dim_err, domain_err, Error, Result};
use crate::rng::SplitMix64;

pub const SVR_MAGIC: &[u8; 4] = b"SVRM";
pub const SVR_VERSION: u32 = 1;
/// Coefficients at or below this magnitude are dropped after fitting.
pub const COEF_CUTOFF: f64 = 1e-8;
/// Consecutive non-improving updates before switching to random partners.
const STALL_LIMIT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Sigma {
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvrConfig {
    pub c: f64,
    pub epsilon: f64,
    pub tolerance: f64,
    /// One pass is `2n` pair updates.
    pub max_passes: usize,
    pub sigma: Sigma,
    pub seed: u64,
}

impl Default for SvrConfig {
    fn default() -> Self {
        Self { c: 1.0, epsilon: 0.05, tolerance: 1e-3, max_passes: 50, sigma: Sigma::Median, seed: 0 }
    }
}

impl SvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(domain_err!("C must be positive, got {}", self.c));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(domain_err!("epsilon must be non-negative, got {}", self.epsilon));
        }
        if !(self.tolerance > 0.0) {
            return Err(domain_err!("tolerance must be positive, got {}", self.tolerance));
        }
        if self.max_passes == 0 {
            return Err(domain_err!("max_passes must be at least 1"));
        }
        if let Sigma::Fixed(s) = self.sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(domain_err!("sigma must be positive, got {s}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub support_vectors: Vec<Vec<f64>>,
    pub dual_coefs: Vec<f64>,
    pub bias: f64,
    pub sigma: f64,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
}

impl SvrModel {
    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn standardize(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(dim_err!("feature has dimension {}, model expects {}", x.len(), self.dim()));
        }
        Ok(x.iter()
            .zip(self.feature_mean.iter().zip(&self.feature_std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    /// Coefficient attached to each training sample, matched bitwise against the stored vectors.
    pub fn training_coefs(&self, features: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut used = vec![false; self.support_vectors.len()];
        features
            .iter()
            .map(|x| {
                let z = self.standardize(x)?;
                let hit = self
                    .support_vectors
                    .iter()
                    .enumerate()
                    .position(|(k, sv)| !used[k] && bitwise_eq(sv, &z));
                Ok(match hit {
                    Some(k) => {
                        used[k] = true;
                        self.dual_coefs[k]
                    }
                    None => 0.0,
                })
            })
            .collect()
    }
}

fn bitwise_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

pub fn rbf_kernel(x: &[f64], x_prime: &[f64], sigma: f64) -> Result<f64> {
    if x.len() != x_prime.len() {
        return Err(dim_err!("kernel arguments have dimensions {} and {}", x.len(), x_prime.len()));
    }
    if !(sigma > 0.0) {
        return Err(domain_err!("sigma must be positive, got {sigma}"));
    }
    Ok(rbf_unchecked(x, x_prime, sigma))
}

fn rbf_unchecked(x: &[f64], y: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

/// Dense symmetric Gram matrix, row-major `n × n`.
pub fn gram_matrix(xs: &[Vec<f64>], sigma: f64) -> Result<Vec<f64>> {
    let Some(first) = xs.first() else {
        return Err(domain_err!("gram matrix of an empty set"));
    };
    let n = xs.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        if xs[i].len() != first.len() {
            return Err(dim_err!("vector {i} has dimension {}, expected {}", xs[i].len(), first.len()));
        }
        k[i * n + i] = rbf_kernel(&xs[i], &xs[i], sigma)?;
        for j in 0..i {
            let v = rbf_unchecked(&xs[i], &xs[j], sigma);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    Ok(k)
}

/// Median pairwise Euclidean distance; 1.0 when it is zero or undefined.
pub fn median_heuristic(xs: &[Vec<f64>]) -> f64 {
    let mut d = Vec::with_capacity(xs.len() * xs.len().saturating_sub(1) / 2);
    for i in 0..xs.len() {
        for j in 0..i {
            d.push(xs[i].iter().zip(&xs[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 { med } else { 1.0 }
}

/// Dual objective to maximize: `yᵀβ − ε‖β‖₁ − ½ βᵀKβ`.
pub fn dual_objective(gram: &[f64], beta: &[f64], targets: &[f64], epsilon: f64) -> f64 {
    let n = beta.len();
    let mut quad = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| gram[i * n + j] * beta[j]).sum();
        quad += beta[i] * row;
    }
    let lin: f64 = beta.iter().zip(targets).map(|(b, y)| b * y - epsilon * b.abs()).sum();
    lin - 0.5 * quad
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub beta: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solve the ε-SVR dual for a precomputed Gram matrix.
pub fn smo_solve(gram: &[f64], targets: &[f64], config: &SvrConfig) -> Result<DualSolution> {
    config.validate()?;
    let n = targets.len();
    if gram.len() != n * n {
        return Err(dim_err!("gram has {} entries, expected {}", gram.len(), n * n));
    }
    let c = config.c;
    let eps = config.epsilon;
    let m = 2 * n;
    let sign = |t: usize| if t < n { 1.0 } else { -1.0 };
    let sample = |t: usize| if t < n { t } else { t - n };
    let q = |s: usize, t: usize| sign(s) * sign(t) * gram[sample(s) * n + sample(t)];

    let mut alpha = vec![0.0; m];
    let mut grad: Vec<f64> = (0..m)
        .map(|t| if t < n { eps - targets[t] } else { eps + targets[t - n] })
        .collect();
    let in_up = |a: f64, y: f64| (y > 0.0 && a < c) || (y < 0.0 && a > 0.0);
    let in_low = |a: f64, y: f64| (y > 0.0 && a > 0.0) || (y < 0.0 && a < c);

    let mut rng = SplitMix64::new(config.seed);
    let max_iter = config.max_passes * m;
    let mut stalls = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    while iterations < max_iter {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..m {
            let v = -sign(t) * grad[t];
            if in_up(alpha[t], sign(t)) && v > gmax {
                gmax = v;
                i = t;
            }
            if in_low(alpha[t], sign(t)) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gmax - gmin < config.tolerance {
            converged = true;
            break;
        }
        if stalls >= STALL_LIMIT {
            let cands: Vec<usize> = (0..m)
                .filter(|&t| t != i && in_low(alpha[t], sign(t)) && -sign(t) * grad[t] < gmax - config.tolerance)
                .collect();
            if !cands.is_empty() {
                j = cands[rng.below(cands.len())];
            }
            stalls = 0;
        }
        iterations += 1;
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (si, sj) = (sample(i), sample(j));
        let quad = gram[si * n + si] + gram[sj * n + sj] - 2.0 * gram[si * n + sj];
        update_pair(&mut alpha, &grad, (i, sign(i)), (j, sign(j)), quad, c);
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        if di == 0.0 && dj == 0.0 {
            stalls += 1;
            continue;
        }
        stalls = 0;
        for t in 0..m {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    let beta: Vec<f64> = (0..n).map(|k| alpha[k] - alpha[k + n]).collect();
    Ok(DualSolution { beta, bias: -rho(&alpha, &grad, n, c), iterations, converged })
}

/// Analytic two-variable update with box clipping, following the classic
/// LIBSVM formulation. `quad_raw` is `K_ii + K_jj − 2 K_ij`.
fn update_pair(alpha: &mut [f64], grad: &[f64], (i, yi): (usize, f64), (j, yj): (usize, f64), quad_raw: f64, c: f64) {
    let quad = if quad_raw > 0.0 { quad_raw } else { 1e-12 };
    let (ai, aj) = (alpha[i], alpha[j]);
    if yi != yj {
        let delta = (-grad[i] - grad[j]) / quad;
        let diff = ai - aj;
        let (mut ni, mut nj) = (ai + delta, aj + delta);
        if diff > 0.0 {
            if nj < 0.0 {
                nj = 0.0;
                ni = diff;
            }
        } else if ni < 0.0 {
            ni = 0.0;
            nj = -diff;
        }
        if diff > 0.0 {
            if ni > c {
                ni = c;
                nj = c - diff;
            }
        } else if nj > c {
            nj = c;
            ni = c + diff;
        }
        alpha[i] = ni;
        alpha[j] = nj;
    } else {
        let delta = (grad[i] - grad[j]) / quad;
        let sum = ai + aj;
        let (mut ni, mut nj) = (ai - delta, aj + delta);
        if sum > c {
            if ni > c {
                ni = c;
                nj = sum - c;
            }
        } else if nj < 0.0 {
            nj = 0.0;
            ni = sum;
        }
        if sum > c {
            if nj > c {
                nj = c;
                ni = sum - c;
            }
        } else if ni < 0.0 {
            ni = 0.0;
            nj = sum;
        }
        alpha[i] = ni;
        alpha[j] = nj;
    }
}

fn rho(alpha: &[f64], grad: &[f64], n: usize, c: f64) -> f64 {
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut sum_free, mut n_free) = (0.0, 0usize);
    for t in 0..2 * n {
        let y = if t < n { 1.0 } else { -1.0 };
        let yg = y * grad[t];
        if alpha[t] >= c {
            if y < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else if alpha[t] <= 0.0 {
            if y > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
        } else {
            n_free += 1;
            sum_free += yg;
        }
    }
    if n_free > 0 { sum_free / n_free as f64 } else { 0.5 * (ub + lb) }
}

fn check_inputs(features: &[Vec<f64>], targets: &[f64]) -> Result<usize> {
    if features.len() < 2 {
        return Err(domain_err!("need at least 2 samples, got {}", features.len()));
    }
    if features.len() != targets.len() {
        return Err(dim_err!("{} feature rows but {} targets", features.len(), targets.len()));
    }
    let d = features[0].len();
    if d == 0 {
        return Err(dim_err!("features have dimension 0"));
    }
    for (i, row) in features.iter().enumerate() {
        if row.len() != d {
            return Err(dim_err!("row {i} has dimension {}, expected {d}", row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(domain_err!("row {i} contains a non-finite feature"));
        }
    }
    if let Some(i) = targets.iter().position(|t| !t.is_finite()) {
        return Err(domain_err!("target {i} is not finite"));
    }
    Ok(d)
}

pub fn svr_fit(features: &[Vec<f64>], targets: &[f64], config: &SvrConfig) -> Result<SvrModel> {
    config.validate()?;
    let d = check_inputs(features, targets)?;
    let n = features.len() as f64;
    let mean: Vec<f64> = (0..d).map(|k| features.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let std: Vec<f64> = (0..d)
        .map(|k| {
            let var = features.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 }
        })
        .collect();
    let mut model = SvrModel {
        support_vectors: Vec::new(),
        dual_coefs: Vec::new(),
        bias: 0.0,
        sigma: 1.0,
        feature_mean: mean,
        feature_std: std,
    };
    let z: Vec<Vec<f64>> = features.iter().map(|x| model.standardize(x)).collect::<Result<_>>()?;
    model.sigma = match config.sigma {
        Sigma::Median => median_heuristic(&z),
        Sigma::Fixed(s) => s,
    };
    let gram = gram_matrix(&z, model.sigma)?;
    let sol = smo_solve(&gram, targets, config)?;
    model.bias = sol.bias;
    for (zi, b) in z.into_iter().zip(sol.beta) {
        if b.abs() > COEF_CUTOFF {
            model.support_vectors.push(zi);
            model.dual_coefs.push(b);
        }
    }
    Ok(model)
}

pub fn svr_predict(model: &SvrModel, x: &[f64]) -> Result<f64> {
    let z = model.standardize(x)?;
    Ok(model
        .support_vectors
        .iter()
        .zip(&model.dual_coefs)
        .map(|(sv, b)| b * rbf_unchecked(sv, &z, model.sigma))
        .sum::<f64>()
        + model.bias)
}

/// Largest violation of the optimality conditions on the training data:
/// box constraints, ε-tube complementarity and the equality residual.
pub fn kkt_report(model: &SvrModel, features: &[Vec<f64>], targets: &[f64], config: &SvrConfig) -> Result<f64> {
    check_inputs(features, targets)?;
    let c = config.c;
    let eps = config.epsilon;
    let bound_tol = 1e-9 * c.max(1.0);
    let beta = model.training_coefs(features)?;
    let mut worst = model.dual_coefs.iter().sum::<f64>().abs();
    for (i, x) in features.iter().enumerate() {
        let r = targets[i] - svr_predict(model, x)?;
        let b = beta[i];
        let v = if b.abs() > c + bound_tol {
            b.abs() - c
        } else if b == 0.0 {
            (r.abs() - eps).max(0.0)
        } else if b >= c - bound_tol {
            (eps - r).max(0.0)
        } else if b <= -c + bound_tol {
            (r + eps).max(0.0)
        } else if b > 0.0 {
            (r - eps).abs()
        } else {
            (r + eps).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

pub fn svr_to_bytes(model: &SvrModel) -> Vec<u8> {
    let d = model.dim();
    let mut out = Vec::new();
    out.extend_from_slice(SVR_MAGIC);
    out.extend_from_slice(&SVR_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(model.support_vectors.len() as u32).to_le_bytes());
    let vals = [model.sigma, model.bias]
        .into_iter()
        .chain(model.feature_mean.iter().copied())
        .chain(model.feature_std.iter().copied())
        .chain(model.support_vectors.iter().flatten().copied())
        .chain(model.dual_coefs.iter().copied());
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn svr_from_bytes(bytes: &[u8]) -> Result<SvrModel> {
    let fmt = |m: String| Error::Format(m);
    if bytes.len() < 16 + 4 {
        return Err(fmt("SVR file truncated inside header".into()));
    }
    if &bytes[..4] != SVR_MAGIC {
        return Err(fmt("bad magic: not an SVR model file".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u32_at(4) as u32;
    if version != SVR_VERSION {
        return Err(fmt(format!("unsupported SVR version {version}")));
    }
    let (d, n_sv) = (u32_at(8), u32_at(12));
    let n_vals = 2 + 2 * d + n_sv * d + n_sv;
    let expected = 16 + 8 * n_vals + 4;
    if bytes.len() != expected {
        return Err(fmt(format!("SVR file has {} bytes, expected {expected}", bytes.len())));
    }
    let body = &bytes[..expected - 4];
    let crc = u32::from_le_bytes(bytes[expected - 4..].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(fmt("SVR file checksum mismatch".into()));
    }
    let vals: Vec<f64> = body[16..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let (sigma, bias) = (vals[0], vals[1]);
    if !(sigma > 0.0) {
        return Err(fmt(format!("invalid sigma {sigma}")));
    }
    let mut rest = &vals[2..];
    let mut take = |k: usize| {
        let (a, b) = rest.split_at(k);
        rest = b;
        a.to_vec()
    };
    let feature_mean = take(d);
    let feature_std = take(d);
    let support_vectors = (0..n_sv).map(|_| take(d)).collect();
    let dual_coefs = take(n_sv);
    Ok(SvrModel { support_vectors, dual_coefs, bias, sigma, feature_mean, feature_std })
}

pub fn save_svr(model: &SvrModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, svr_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_svr(path: impl AsRef<Path>) -> Result<SvrModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    svr_from_bytes(&bytes)
}
