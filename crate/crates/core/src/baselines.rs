//! Comparison predictors: truncated SVD and multiplicative-update NMF, both
//! on the zero-filled rating matrix.

use serde::{Deserialize, Serialize};

use crate::data::RatingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, RngStream};

/// A rank-`k` factorization `basis × coefficients`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    /// `(rows, k)`: `U·Σ` for SVD, `W` for NMF.
    pub basis: Matrix,
    /// `(k, cols)`: `Vᵀ` for SVD, `H` for NMF.
    pub coefficients: Matrix,
    pub rank: usize,
}

impl FactorPair {
    pub fn reconstruct(&self) -> Matrix {
        self.basis
            .matmul(&self.coefficients)
            .expect("factor shapes are consistent by construction")
    }
}

/// Thin singular value decomposition `A = U diag(σ) Vᵀ`, σ descending.
#[derive(Clone, Debug)]
pub struct Svd {
    /// `(m, r)` with `r = min(m, n)`.
    pub u: Matrix,
    pub sigma: Vec<f64>,
    /// `(n, r)`.
    pub v: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 80;

impl Svd {
    /// One-sided (Hestenes) Jacobi. Orthogonalizes the columns of the taller
    /// orientation of `a` with plane rotations until every pair is orthogonal
    /// to working precision.
    pub fn compute(a: &Matrix) -> Self {
        if a.rows() < a.cols() {
            let t = Svd::compute(&a.transpose());
            return Svd {
                u: t.v,
                sigma: t.sigma,
                v: t.u,
            };
        }
        let (m, n) = a.shape();
        // column-major working copies
        let mut cols: Vec<Vec<f64>> = (0..n)
            .map(|j| (0..m).map(|i| a[(i, j)]).collect())
            .collect();
        let mut vcols: Vec<Vec<f64>> = (0..n)
            .map(|j| {
                let mut e = vec![0.0; n];
                e[j] = 1.0;
                e
            })
            .collect();
        let mut norms: Vec<f64> = cols.iter().map(|c| dot(c, c)).collect();
        let tol = 1e-15;

        for _ in 0..JACOBI_MAX_SWEEPS {
            let mut rotated = false;
            for i in 0..n {
                for j in (i + 1)..n {
                    let (alpha, beta) = (norms[i], norms[j]);
                    if alpha == 0.0 || beta == 0.0 {
                        continue;
                    }
                    let gamma = dot(&cols[i], &cols[j]);
                    if gamma.abs() <= tol * (alpha * beta).sqrt() {
                        continue;
                    }
                    rotated = true;
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    let (left, right) = cols.split_at_mut(j);
                    rotate(&mut left[i], &mut right[0], c, s);
                    let (left, right) = vcols.split_at_mut(j);
                    rotate(&mut left[i], &mut right[0], c, s);
                    norms[i] = dot(&cols[i], &cols[i]);
                    norms[j] = dot(&cols[j], &cols[j]);
                }
            }
            if !rotated {
                break;
            }
        }

        let mut order: Vec<usize> = (0..n).collect();
        let sig: Vec<f64> = norms.iter().map(|v| v.sqrt()).collect();
        order.sort_by(|&a, &b| sig[b].total_cmp(&sig[a]));
        let mut u = Matrix::zeros(m, n);
        let mut v = Matrix::zeros(n, n);
        let mut sigma = Vec::with_capacity(n);
        for (r, &j) in order.iter().enumerate() {
            let s = sig[j];
            sigma.push(s);
            if s > 0.0 {
                for i in 0..m {
                    u[(i, r)] = cols[j][i] / s;
                }
            }
            for i in 0..n {
                v[(i, r)] = vcols[j][i];
            }
        }
        Svd { u, sigma, v }
    }

    pub fn max_rank(&self) -> usize {
        self.sigma.len()
    }

    /// Leading `k` triplets as `(U_k Σ_k, V_kᵀ)`.
    pub fn truncate(&self, k: usize) -> Result<FactorPair> {
        if k == 0 || k > self.max_rank() {
            return Err(Error::Config(format!(
                "rank {k} outside 1..={}",
                self.max_rank()
            )));
        }
        let m = self.u.rows();
        let n = self.v.rows();
        let mut basis = Matrix::zeros(m, k);
        let mut coefficients = Matrix::zeros(k, n);
        for r in 0..k {
            for i in 0..m {
                basis[(i, r)] = self.u[(i, r)] * self.sigma[r];
            }
            for j in 0..n {
                coefficients[(r, j)] = self.v[(j, r)];
            }
        }
        Ok(FactorPair {
            basis,
            coefficients,
            rank: k,
        })
    }
}

fn rotate(a: &mut [f64], b: &mut [f64], c: f64, s: f64) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xi, yi) = (*x, *y);
        *x = c * xi - s * yi;
        *y = s * xi + c * yi;
    }
}

/// Rank-`k` SVD reconstruction of a dense matrix.
pub fn truncated_svd(a: &Matrix, k: usize) -> Result<Matrix> {
    let max = a.rows().min(a.cols());
    if k == 0 || k > max {
        return Err(Error::Config(format!("rank {k} outside 1..={max}")));
    }
    Ok(Svd::compute(a).truncate(k)?.reconstruct())
}

/// Zero-fills unobserved entries and returns the rank-`k` SVD reconstruction.
/// Negative predictions are left in place.
pub fn svd_predict(x: &RatingMatrix, k: usize) -> Result<Matrix> {
    truncated_svd(&x.dense(), k)
}

#[derive(Clone, Debug)]
pub struct NmfResult {
    pub factors: FactorPair,
    /// `‖V − WH‖²_F` at initialization and after every iteration.
    pub objective: Vec<f64>,
}

const NMF_EPS: f64 = 1e-12;

/// Lee–Seung multiplicative updates for the Frobenius objective.
pub fn nmf(v: &Matrix, k: usize, iters: usize, seed: u64) -> Result<NmfResult> {
    if k == 0 {
        return Err(Error::Config("NMF rank must be ≥ 1".into()));
    }
    if let Some(bad) = v.as_slice().iter().find(|x| !(**x >= 0.0)) {
        return Err(Error::Data(format!(
            "NMF needs non-negative input, found {bad}"
        )));
    }
    let (m, n) = v.shape();
    let mean = if v.as_slice().is_empty() {
        0.0
    } else {
        v.sum() / v.as_slice().len() as f64
    };
    let scale = if mean > 0.0 {
        (mean / k as f64).sqrt()
    } else {
        1.0
    };
    let mut rng = RngStream::with_stream(seed, 0x4e4d);
    let mut w = Matrix::random_uniform(m, k, 0.0, scale, &mut rng);
    let mut h = Matrix::random_uniform(k, n, 0.0, scale, &mut rng);

    let objective_of = |w: &Matrix, h: &Matrix| -> f64 {
        let r = v.sub(&w.matmul(h).expect("shapes")).expect("shapes");
        r.as_slice().iter().map(|x| x * x).sum()
    };
    let mut objective = Vec::with_capacity(iters + 1);
    objective.push(objective_of(&w, &h));

    for _ in 0..iters {
        // H ← H ⊙ (WᵀV) ⊘ (WᵀW H)
        let num = w.transposed_matmul(v)?;
        let den = w.transposed_matmul(&w)?.matmul(&h)?;
        h = multiplicative(&h, &num, &den)?;
        // W ← W ⊙ (V Hᵀ) ⊘ (W H Hᵀ)
        let num = v.matmul_transposed(&h)?;
        let den = w.matmul(&h.matmul_transposed(&h)?)?;
        w = multiplicative(&w, &num, &den)?;
        objective.push(objective_of(&w, &h));
    }
    Ok(NmfResult {
        factors: FactorPair {
            basis: w,
            coefficients: h,
            rank: k,
        },
        objective,
    })
}

fn multiplicative(current: &Matrix, num: &Matrix, den: &Matrix) -> Result<Matrix> {
    let ratio = num.zip_with(den, |a, b| a / (b + NMF_EPS))?;
    current.hadamard(&ratio)
}

/// Zero-fills unobserved entries, factorizes with NMF and returns `W × H`.
pub fn nmf_predict(x: &RatingMatrix, k: usize, iters: usize, seed: u64) -> Result<Matrix> {
    Ok(nmf(&x.dense(), k, iters, seed)?.factors.reconstruct())
}
