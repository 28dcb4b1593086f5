//! Gaussian-process regression with an RBF kernel, hyper-parameters
//! chosen by log-marginal-likelihood grid search on standardized targets.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub length_scales: Vec<f64>,
    pub noises: Vec<f64>,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig { length_scales: vec![0.5, 1.0, 2.0, 4.0], noises: vec![1e-6, 1e-4, 1e-2] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub x_train: Vec<Vec<f64>>,
    /// (K + noise I)^-1 z in standardized units; empty for the constant
    /// (zero-variance) case.
    pub alpha: Vec<f64>,
    pub length_scale: f64,
    pub noise: f64,
    pub y_mean: f64,
    pub y_std: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn rbf(a: &[f64], b: &[f64], ls: f64) -> f64 {
    (-sq_dist(a, b) / (2.0 * ls * ls)).exp()
}

/// Lower Cholesky factor of a dense symmetric PD matrix; None if not PD.
fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L L^T x = b given the lower factor.
fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

impl GpModel {
    pub fn fit(x: &[Vec<f64>], y: &[f64], cfg: &GpConfig) -> GpModel {
        assert_eq!(x.len(), y.len());
        let n = x.len();
        let y_mean = y.iter().sum::<f64>() / n as f64;
        let var = y.iter().map(|v| (v - y_mean) * (v - y_mean)).sum::<f64>() / n as f64;
        let y_std = var.sqrt();
        if y_std == 0.0 {
            return GpModel {
                x_train: Vec::new(),
                alpha: Vec::new(),
                length_scale: 1.0,
                noise: 0.0,
                y_mean,
                y_std: 0.0,
            };
        }
        let z: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_std).collect();

        let mut best: Option<(f64, f64, f64, Vec<f64>)> = None; // (lml, ls, noise, alpha)
        for &ls in &cfg.length_scales {
            let mut k = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    k[i * n + j] = rbf(&x[i], &x[j], ls);
                }
            }
            for &noise in &cfg.noises {
                let mut kn = k.clone();
                for i in 0..n {
                    kn[i * n + i] += noise;
                }
                let Some(l) = cholesky(&kn, n) else { continue };
                let alpha = chol_solve(&l, n, &z);
                let data_fit: f64 = z.iter().zip(&alpha).map(|(a, b)| a * b).sum();
                let log_det: f64 = (0..n).map(|i| l[i * n + i].ln()).sum();
                let lml = -0.5 * data_fit
                    - log_det
                    - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
                if best.as_ref().is_none_or(|(b, _, _, _)| lml > *b) {
                    best = Some((lml, ls, noise, alpha));
                }
            }
        }
        let (_, length_scale, noise, alpha) =
            best.expect("no positive-definite kernel in the grid");
        GpModel { x_train: x.to_vec(), alpha, length_scale, noise, y_mean, y_std }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        if self.y_std == 0.0 {
            return self.y_mean;
        }
        let mean_z: f64 = self
            .x_train
            .iter()
            .zip(&self.alpha)
            .map(|(xi, &a)| rbf(x, xi, self.length_scale) * a)
            .sum();
        self.y_mean + self.y_std * mean_z
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_round_trips_identity() {
        let n = 4;
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            a[i * n + i] = 2.0;
        }
        let l = cholesky(&a, n).unwrap();
        let b = vec![1.0, 2.0, 3.0, 4.0];
        let x = chol_solve(&l, n, &b);
        for i in 0..n {
            assert!((x[i] - b[i] / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = vec![1.0, 2.0, 2.0, 1.0]; // eigenvalues 3 and -1
        assert!(cholesky(&a, 2).is_none());
    }

    #[test]
    fn gp_recovers_smooth_function_between_points() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 3.0]).collect();
        let y: Vec<f64> = x.iter().map(|v| (v[0]).sin()).collect();
        let gp = GpModel::fit(&x, &y, &GpConfig::default());
        for i in 0..9 {
            let mid = (x[i][0] + x[i + 1][0]) / 2.0;
            assert!((gp.predict(&[mid]) - mid.sin()).abs() < 0.05);
        }
    }
}
