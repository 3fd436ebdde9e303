//! Deterministic RBF-kernel support vector machines.
//!
//! Training uses sequential minimal optimization with deterministic working
//! pair selection (largest error gap, ties to the lower index), so repeated
//! runs on identical data produce identical models. A one-vs-rest wrapper
//! stacks one binary machine per class.

use crate::error::{Result, UcanError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    /// Box constraint on the dual variables.
    pub c: f64,
    /// RBF width; `None` selects 1 / (d * variance of all feature values).
    pub gamma: Option<f64>,
    /// KKT violation tolerance.
    pub tol: f64,
    /// Hard cap on full passes over the data.
    pub max_passes: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { c: 1.0, gamma: None, tol: 1e-3, max_passes: 100_000 }
    }
}

impl SvmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.c <= 0.0 || self.tol <= 0.0 || self.max_passes == 0 {
            return Err(UcanError::Config("c, tol, max_passes must be positive".into()));
        }
        if let Some(g) = self.gamma {
            if g <= 0.0 {
                return Err(UcanError::Config("gamma must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A trained binary machine. `coef[i]` stores alpha_i * y_i for support
/// vector i, so the decision value is sum_i coef[i] K(sv_i, x) + b.
#[derive(Debug, Clone)]
pub struct RbfSvm {
    pub support: Vec<Vec<f64>>,
    pub coef: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

/// The 'scale' heuristic: 1 / (d * Var[all feature values]).
pub fn default_gamma(data: &[Vec<f64>]) -> f64 {
    let d = data.first().map_or(1, Vec::len).max(1);
    let n = (data.len() * d).max(1) as f64;
    let mean: f64 = data.iter().flatten().sum::<f64>() / n;
    let var: f64 = data.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 1e-12 {
        1.0 / d as f64
    } else {
        1.0 / (d as f64 * var)
    }
}

impl RbfSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support
            .iter()
            .zip(&self.coef)
            .map(|(sv, &c)| c * rbf(sv, x, self.gamma))
            .sum::<f64>()
            + self.bias
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.decision(x) >= 0.0 {
            1.0
        } else {
            -1.0
        }
    }
}

/// Trains a binary RBF-SVM on labels in {-1, +1} with deterministic SMO.
/// Fails with a convergence error (carrying the worst KKT residual) if the
/// pass cap is reached while violations above `tol` remain.
pub fn train_binary(data: &[Vec<f64>], labels: &[f64], cfg: &SvmConfig) -> Result<RbfSvm> {
    cfg.validate()?;
    let n = data.len();
    if n == 0 || n != labels.len() {
        return Err(UcanError::Data("svm needs matching non-empty data and labels".into()));
    }
    let dim = data[0].len();
    if dim == 0 || data.iter().any(|x| x.len() != dim) {
        return Err(UcanError::Data("svm rows must share a positive dimension".into()));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(UcanError::Data("binary svm labels must be -1 or +1".into()));
    }
    let gamma = cfg.gamma.unwrap_or_else(|| default_gamma(data));
    if !labels.iter().any(|&y| y == 1.0) || !labels.iter().any(|&y| y == -1.0) {
        // single-class input: the zero machine biased toward that class
        return Ok(RbfSvm { support: vec![], coef: vec![], bias: labels[0], gamma });
    }

    // kernel matrix; calibration-scale problems keep n modest
    let k: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| rbf(&data[i], &data[j], gamma)).collect())
        .collect();

    let mut alpha = vec![0.0f64; n];
    let mut b = 0.0f64;
    let error = |alpha: &[f64], b: f64, i: usize| -> f64 {
        let f: f64 = (0..n).map(|j| alpha[j] * labels[j] * k[j][i]).sum::<f64>() + b;
        f - labels[i]
    };

    let mut quiet_passes = 0usize;
    let mut passes = 0usize;
    while quiet_passes < 3 {
        if passes >= cfg.max_passes {
            let residual = kkt_residual_inner(&alpha, b, labels, &k, cfg.c);
            if residual > cfg.tol {
                return Err(UcanError::Convergence("svm smo pass cap reached".into(), residual));
            }
            break;
        }
        passes += 1;
        let mut changed = 0usize;
        for i in 0..n {
            let e_i = error(&alpha, b, i);
            let r_i = e_i * labels[i];
            let violates = (r_i < -cfg.tol && alpha[i] < cfg.c) || (r_i > cfg.tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            // deterministic second choice: partners ordered by largest
            // |E_i - E_j| (ties to the lower index), first workable one wins
            let mut candidates: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, (e_i - error(&alpha, b, j)).abs()))
                .collect();
            candidates.sort_by(|a, b| {
                b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0))
            });
            for (j, _) in candidates {
                let e_j = error(&alpha, b, j);
                let (ai_old, aj_old) = (alpha[i], alpha[j]);
                let (lo, hi) = if labels[i] != labels[j] {
                    ((aj_old - ai_old).max(0.0), (cfg.c + aj_old - ai_old).min(cfg.c))
                } else {
                    ((ai_old + aj_old - cfg.c).max(0.0), (ai_old + aj_old).min(cfg.c))
                };
                if hi - lo < 1e-12 {
                    continue;
                }
                let eta = 2.0 * k[i][j] - k[i][i] - k[j][j];
                if eta >= 0.0 {
                    continue;
                }
                let mut aj = aj_old - labels[j] * (e_i - e_j) / eta;
                aj = aj.clamp(lo, hi);
                if (aj - aj_old).abs() < 1e-7 {
                    continue;
                }
                let ai = ai_old + labels[i] * labels[j] * (aj_old - aj);
                alpha[i] = ai;
                alpha[j] = aj;
                let b1 =
                    b - e_i - labels[i] * (ai - ai_old) * k[i][i] - labels[j] * (aj - aj_old) * k[i][j];
                let b2 =
                    b - e_j - labels[i] * (ai - ai_old) * k[i][j] - labels[j] * (aj - aj_old) * k[j][j];
                b = if ai > 0.0 && ai < cfg.c {
                    b1
                } else if aj > 0.0 && aj < cfg.c {
                    b2
                } else {
                    (b1 + b2) / 2.0
                };
                changed += 1;
                break;
            }
        }
        if changed == 0 {
            quiet_passes += 1;
        } else {
            quiet_passes = 0;
        }
    }

    // final bias from the free support vectors (mean of y_i - sum_j a_j y_j K_ji)
    let free: Vec<usize> = (0..n).filter(|&i| alpha[i] > 1e-9 && alpha[i] < cfg.c - 1e-9).collect();
    if !free.is_empty() {
        b = free
            .iter()
            .map(|&i| labels[i] - (0..n).map(|j| alpha[j] * labels[j] * k[j][i]).sum::<f64>())
            .sum::<f64>()
            / free.len() as f64;
    }

    let mut support = Vec::new();
    let mut coef = Vec::new();
    for i in 0..n {
        if alpha[i] > 1e-12 {
            support.push(data[i].clone());
            coef.push(alpha[i] * labels[i]);
        }
    }
    Ok(RbfSvm { support, coef, bias: b, gamma })
}

fn kkt_residual_inner(alpha: &[f64], b: f64, labels: &[f64], k: &[Vec<f64>], c: f64) -> f64 {
    let n = alpha.len();
    let mut worst = 0.0f64;
    for i in 0..n {
        let f: f64 = (0..n).map(|j| alpha[j] * labels[j] * k[j][i]).sum::<f64>() + b;
        let margin = labels[i] * f;
        let r = if alpha[i] <= 1e-12 {
            (1.0 - margin).max(0.0)
        } else if alpha[i] >= c - 1e-12 {
            (margin - 1.0).max(0.0)
        } else {
            (margin - 1.0).abs()
        };
        worst = worst.max(r);
    }
    worst
}

/// Worst KKT violation of a trained machine on its training data.
pub fn kkt_residual(svm: &RbfSvm, data: &[Vec<f64>], labels: &[f64], c: f64) -> f64 {
    // reconstruct alphas by matching support vectors back to training rows
    let mut alpha = vec![0.0f64; data.len()];
    let mut used = vec![false; svm.support.len()];
    for (i, row) in data.iter().enumerate() {
        for (s, sv) in svm.support.iter().enumerate() {
            if !used[s] && sv == row {
                alpha[i] = svm.coef[s] * labels[i]; // coef = alpha * y
                used[s] = true;
                break;
            }
        }
    }
    let k: Vec<Vec<f64>> = (0..data.len())
        .map(|i| (0..data.len()).map(|j| rbf(&data[i], &data[j], svm.gamma)).collect())
        .collect();
    kkt_residual_inner(&alpha, svm.bias, labels, &k, c)
}

/// One binary machine per class (that class = +1, rest = -1).
#[derive(Debug, Clone)]
pub struct OneVsRestSvm {
    pub machines: Vec<RbfSvm>,
}

impl OneVsRestSvm {
    pub fn train(data: &[Vec<f64>], labels: &[usize], class_count: usize, cfg: &SvmConfig) -> Result<Self> {
        if class_count < 2 {
            return Err(UcanError::Config("one-vs-rest needs >= 2 classes".into()));
        }
        if labels.iter().any(|&l| l >= class_count) {
            return Err(UcanError::Data("label out of class range".into()));
        }
        let machines = (0..class_count)
            .map(|c| {
                let ys: Vec<f64> =
                    labels.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect();
                train_binary(data, &ys, cfg)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { machines })
    }

    /// Per-class decision values.
    pub fn decisions(&self, x: &[f64]) -> Vec<f64> {
        self.machines.iter().map(|m| m.decision(x)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        crate::backbone::argmax(&self.decisions(x))
    }
}
