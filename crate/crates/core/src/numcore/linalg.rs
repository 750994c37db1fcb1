//! Thin SVD by one-sided Jacobi rotations, and the trace (nuclear) norm
//! built on it.

use crate::error::{MtlError, Result};

use super::tensor::Tensor;

const MAX_SWEEPS: usize = 100;
const ORTHO_TOL: f64 = 1e-15;

/// Thin singular value decomposition `w = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × r` with orthonormal columns where `sigma > 0`.
    pub u: Tensor,
    pub sigma: Vec<f64>,
    /// `n × r` with orthonormal columns.
    pub v: Tensor,
}

/// One-sided Jacobi SVD. `r = min(m, n)`; singular values are not sorted.
pub fn svd(w: &Tensor) -> Result<Svd> {
    let (m, n) = w.dims2();
    if m < n {
        let t = svd_tall(&w.transpose())?;
        return Ok(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        });
    }
    svd_tall(w)
}

fn svd_tall(w: &Tensor) -> Result<Svd> {
    let (m, n) = w.dims2();
    // Column-major working copies make the rotations contiguous.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| w.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = column_products(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= ORTHO_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }

    let sigma: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    if !converged {
        let max = sigma.iter().copied().fold(0.0, f64::max);
        let min = sigma.iter().copied().fold(f64::INFINITY, f64::min);
        return Err(MtlError::Numerical(format!(
            "Jacobi SVD of {m}x{n} matrix did not converge in {MAX_SWEEPS} sweeps \
             (sigma_max={max:e}, sigma_min={min:e}, condition={:e})",
            max / min
        )));
    }

    let mut u = Tensor::zeros(&[m, n]);
    let mut v = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let inv = if sigma[j] > 0.0 { 1.0 / sigma[j] } else { 0.0 };
        for (i, &x) in cols[j].iter().enumerate() {
            u.data_mut()[i * n + j] = x * inv;
        }
        for (i, &x) in vcols[j].iter().enumerate() {
            v.data_mut()[i * n + j] = x;
        }
    }
    Ok(Svd { u, sigma, v })
}

fn column_products(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut alpha = 0.0;
    let mut beta = 0.0;
    let mut gamma = 0.0;
    for (x, y) in a.iter().zip(b) {
        alpha += x * x;
        beta += y * y;
        gamma += x * y;
    }
    (alpha, beta, gamma)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Sum of singular values together with the subgradient `U·Vᵀ`.
///
/// Directions with numerically zero singular value are left out of the
/// subgradient.
pub fn trace_norm(w: &Tensor) -> Result<(f64, Tensor)> {
    let (m, n) = w.dims2();
    let dec = svd(w)?;
    let value: f64 = dec.sigma.iter().sum();
    let smax = dec.sigma.iter().copied().fold(0.0, f64::max);
    let cutoff = smax * (m.max(n) as f64) * f64::EPSILON;
    let r = dec.sigma.len();
    let mut grad = Tensor::zeros(&[m, n]);
    for k in 0..r {
        if dec.sigma[k] <= cutoff {
            continue;
        }
        for i in 0..m {
            let uik = dec.u.at(i, k);
            if uik == 0.0 {
                continue;
            }
            for j in 0..n {
                grad.data_mut()[i * n + j] += uik * dec.v.at(j, k);
            }
        }
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::tensor::matmul;

    #[test]
    fn diagonal_and_identity() {
        let d = Tensor::from_rows(&[vec![3.0, 0.0], vec![0.0, -2.0]]).unwrap();
        let (v, _) = trace_norm(&d).unwrap();
        assert!((v - 5.0).abs() < 1e-14);
        for k in 1..5 {
            let (v, g) = trace_norm(&Tensor::eye(k)).unwrap();
            assert!((v - k as f64).abs() < 1e-14);
            assert!(g.max_abs_diff(&Tensor::eye(k)) < 1e-14);
        }
    }

    #[test]
    fn reconstructs_wide_and_tall() {
        let w = Tensor::from_rows(&[vec![1.0, 2.0, -1.0], vec![0.5, -0.3, 4.0]]).unwrap();
        for m in [w.clone(), w.transpose()] {
            let dec = svd(&m).unwrap();
            let r = dec.sigma.len();
            let mut us = dec.u.clone();
            let (rows, _) = us.dims2();
            for i in 0..rows {
                for k in 0..r {
                    us.data_mut()[i * r + k] *= dec.sigma[k];
                }
            }
            let back = matmul(&us, &dec.v.transpose()).unwrap();
            assert!(back.max_abs_diff(&m) < 1e-12);
        }
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let (v, g) = trace_norm(&Tensor::zeros(&[3, 2])).unwrap();
        assert_eq!(v, 0.0);
        assert_eq!(g.sum_sq(), 0.0);
    }
}
