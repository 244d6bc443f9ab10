//! Small dense linear algebra: one-sided Jacobi singular values and
//! Cholesky solves.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

fn dims(a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("expected a matrix, got {s:?}")),
    }
}

/// Singular values in descending order, by one-sided Jacobi rotations on
/// the columns of `a` (or of `aᵀ`, whichever has fewer columns).
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = dims(a)?;
    let a = if c > r { a.t()? } else { a.clone() };
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    // Column-major copy so rotations touch contiguous memory.
    let mut col: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.at(&[i, j])).collect()).collect();
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&col[p], &col[q]);
                    let alpha: f64 = cp.iter().map(|v| v * v).sum();
                    let beta: f64 = cq.iter().map(|v| v * v).sum();
                    let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                for i in 0..rows {
                    let (x, y) = (col[p][i], col[q][i]);
                    col[p][i] = cs * x - sn * y;
                    col[q][i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = col.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

/// Sum of singular values.
pub fn nuclear_norm(w: &Tensor) -> Result<f64> {
    Ok(singular_values(w)?.iter().sum())
}

/// Largest singular value.
pub fn spectral_norm(w: &Tensor) -> Result<f64> {
    Ok(singular_values(w)?.first().copied().unwrap_or(0.0))
}

/// Number of singular values above `rel · σ_max`.
pub fn numerical_rank(w: &Tensor, rel: f64) -> Result<usize> {
    let s = singular_values(w)?;
    let top = s.first().copied().unwrap_or(0.0);
    Ok(if top == 0.0 { 0 } else { s.iter().filter(|&&v| v > rel * top).count() })
}

/// Solve `A X = B` for symmetric positive definite `A` by Cholesky. Pivots
/// below `tol · max diag` are reported as rank deficiency.
pub fn cholesky_solve(a: &Tensor, b: &Tensor, tol: f64) -> Result<Tensor> {
    let (n, n2) = dims(a)?;
    let (bn, k) = dims(b)?;
    if n != n2 || bn != n {
        return shape_err(format!("cannot solve {:?} against {:?}", a.shape(), b.shape()));
    }
    let scale = (0..n).map(|i| a.at(&[i, i]).abs()).fold(0.0, f64::max);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.at(&[j, j]);
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if !(d > tol * scale) {
            return Err(Error::RankDeficient(format!("pivot {j} of {n} is {d:e}")));
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut v = a.at(&[i, j]);
            for p in 0..j {
                v -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = v / d;
        }
    }
    let mut x = b.clone();
    for c in 0..k {
        for i in 0..n {
            let mut v = x.at(&[i, c]);
            for p in 0..i {
                v -= l[i * n + p] * x.at(&[p, c]);
            }
            x.set(&[i, c], v / l[i * n + i]);
        }
        for i in (0..n).rev() {
            let mut v = x.at(&[i, c]);
            for p in i + 1..n {
                v -= l[p * n + i] * x.at(&[p, c]);
            }
            x.set(&[i, c], v / l[i * n + i]);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn singular_value_examples() {
        let d = Tensor::new(vec![2, 2], vec![3.0, 0.0, 0.0, 4.0]).unwrap();
        assert!((nuclear_norm(&d).unwrap() - 7.0).abs() < 1e-14);
        let u = Tensor::new(vec![3, 1], vec![1.0, 2.0, 2.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let w = u.matmul(&v).unwrap();
        assert!((nuclear_norm(&w).unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(numerical_rank(&w, 1e-8).unwrap(), 1);
        assert_eq!(numerical_rank(&Tensor::zeros(&[2, 3]), 1e-8).unwrap(), 0);
    }

    #[test]
    fn matches_nalgebra_svd() {
        let mut rng = seeded(4);
        for &(r, c) in &[(4, 3), (3, 4), (5, 5), (1, 6)] {
            let a = Tensor::randn(&[r, c], 1.0, &mut rng);
            let m = nalgebra::DMatrix::from_row_slice(r, c, a.data());
            let mut want: Vec<f64> = m.singular_values().iter().copied().collect();
            want.sort_by(|x, y| y.total_cmp(x));
            let got = singular_values(&a).unwrap();
            for (x, y) in got.iter().zip(&want) {
                assert!((x - y).abs() < 1e-10);
            }
            assert!((nuclear_norm(&a).unwrap() - want.iter().sum::<f64>()).abs() < 1e-8);
        }
    }

    #[test]
    fn cholesky_solves_and_detects_deficiency() {
        let mut rng = seeded(5);
        let b = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let a = b.matmul(&b.t().unwrap()).unwrap().add(&Tensor::eye(4)).unwrap();
        let rhs = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let x = cholesky_solve(&a, &rhs, 1e-12).unwrap();
        assert!(a.matmul(&x).unwrap().max_abs_diff(&rhs) < 1e-12);
        let sing = Tensor::new(vec![2, 2], vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(cholesky_solve(&sing, &Tensor::ones(&[2, 1]), 1e-12), Err(Error::RankDeficient(_))));
    }
}
