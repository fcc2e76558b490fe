//! Small dense factorizations: pivoted LU, Jacobi eigendecomposition,
//! Cholesky. Written for D ≤ 100 square matrices; no blocking, no BLAS.

use super::tensor::Tensor;
use super::DiffError;

/// Natural log of the clamp floor for `|det|` (the floor itself is 1e-12).
pub(crate) const LOG_DET_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// `log|det M|` and the determinant sign via partial-pivot LU.
///
/// `|det|` below 1e-12 is clamped to 1e-12 before the logarithm, so the
/// result stays finite for degenerate inputs; the returned flag reports
/// whether the clamp fired. Sign is `+1.0`, `-1.0`, or `0.0` for an exactly
/// singular factorization.
pub fn lu_logabsdet(m: &Tensor) -> Result<(f64, f64, bool), DiffError> {
    let d = square_dim(m)?;
    let mut a = m.data().to_vec();
    let mut sign = 1.0f64;
    let mut log_abs = 0.0f64;
    for col in 0..d {
        // Pivot on the largest magnitude in the column.
        let mut piv = col;
        let mut best = a[col * d + col].abs();
        for r in col + 1..d {
            let v = a[r * d + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if piv != col {
            for c in 0..d {
                a.swap(col * d + c, piv * d + c);
            }
            sign = -sign;
        }
        let pivot = a[col * d + col];
        if pivot == 0.0 {
            return Ok((LOG_DET_FLOOR, 0.0, true));
        }
        sign *= pivot.signum();
        log_abs += pivot.abs().ln();
        for r in col + 1..d {
            let factor = a[r * d + col] / pivot;
            a[r * d + col] = factor;
            for c in col + 1..d {
                a[r * d + c] -= factor * a[col * d + c];
            }
        }
    }
    if log_abs < LOG_DET_FLOOR {
        Ok((LOG_DET_FLOOR, sign, true))
    } else {
        Ok((log_abs, sign, false))
    }
}

/// Dense inverse via LU with partial pivoting.
pub fn lu_inverse(m: &Tensor) -> Result<Tensor, DiffError> {
    let d = square_dim(m)?;
    let mut a = m.data().to_vec();
    let mut perm: Vec<usize> = (0..d).collect();
    for col in 0..d {
        let mut piv = col;
        let mut best = a[col * d + col].abs();
        for r in col + 1..d {
            let v = a[r * d + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if piv != col {
            for c in 0..d {
                a.swap(col * d + c, piv * d + c);
            }
            perm.swap(col, piv);
        }
        let pivot = a[col * d + col];
        if pivot == 0.0 {
            return Err(DiffError::Singular("zero pivot in LU inverse".into()));
        }
        for r in col + 1..d {
            let factor = a[r * d + col] / pivot;
            a[r * d + col] = factor;
            for c in col + 1..d {
                a[r * d + c] -= factor * a[col * d + c];
            }
        }
    }
    let mut inv = Tensor::zeros(vec![d, d]);
    let mut x = vec![0.0f64; d];
    for rhs in 0..d {
        // Solve L·U·x = P·e_rhs.
        for i in 0..d {
            x[i] = if perm[i] == rhs { 1.0 } else { 0.0 };
        }
        for i in 0..d {
            for j in 0..i {
                x[i] -= a[i * d + j] * x[j];
            }
        }
        for i in (0..d).rev() {
            for j in i + 1..d {
                x[i] -= a[i * d + j] * x[j];
            }
            x[i] /= a[i * d + i];
        }
        for i in 0..d {
            inv.data_mut()[i * d + rhs] = x[i];
        }
    }
    Ok(inv)
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues (ascending) and the matrix whose columns are the
/// matching orthonormal eigenvectors, so `A = V diag(λ) Vᵀ`.
pub fn sym_eig(m: &Tensor) -> Result<(Vec<f64>, Tensor), DiffError> {
    let d = square_dim(m)?;
    let mut a = m.data().to_vec();
    let mut v = vec![0.0f64; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off.sqrt() <= 1e-14 * norm {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&i, &j| a[i * d + i].partial_cmp(&a[j * d + j]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| a[i * d + i]).collect();
    let mut vecs = Tensor::zeros(vec![d, d]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..d {
            vecs.data_mut()[r * d + new_col] = v[r * d + old_col];
        }
    }
    Ok((eigvals, vecs))
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &Tensor) -> Result<Tensor, DiffError> {
    let d = square_dim(m)?;
    let a = m.data();
    let mut l = vec![0.0f64; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(DiffError::Singular("matrix not positive definite".into()));
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(Tensor::matrix(d, d, l))
}

fn square_dim(m: &Tensor) -> Result<usize, DiffError> {
    match m.shape() {
        [d, d2] if d == d2 => Ok(*d),
        s => Err(DiffError::Shape(format!("expected square matrix, got {:?}", s))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Determinant by cofactor expansion, the independent route for LU checks.
    pub(crate) fn cofactor_det(m: &[f64], d: usize) -> f64 {
        if d == 1 {
            return m[0];
        }
        let mut det = 0.0;
        for j in 0..d {
            let mut minor = Vec::with_capacity((d - 1) * (d - 1));
            for r in 1..d {
                for c in 0..d {
                    if c != j {
                        minor.push(m[r * d + c]);
                    }
                }
            }
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            det += sign * m[j] * cofactor_det(&minor, d - 1);
        }
        det
    }

    fn seeded_matrix(d: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(d, d, (0..d * d).map(|_| rng.gen_range(-2.0..2.0)).collect())
    }

    #[test]
    fn logabsdet_identity_and_diag() {
        let (ld, sign, clamped) = lu_logabsdet(&Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!((ld, sign, clamped), (0.0, 1.0, false));
        let (ld, sign, _) = lu_logabsdet(&Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 3.0])).unwrap();
        assert!((ld - 6.0f64.ln()).abs() < 1e-12);
        assert_eq!(sign, 1.0);
    }

    #[test]
    fn logabsdet_matches_cofactor_expansion() {
        for seed in 0..20 {
            let m = seeded_matrix(4, seed);
            let (ld, sign, clamped) = lu_logabsdet(&m).unwrap();
            let det = cofactor_det(m.data(), 4);
            assert!(!clamped);
            assert_eq!(sign, det.signum());
            let rel = (ld - det.abs().ln()).abs() / det.abs().ln().abs().max(1.0);
            assert!(rel < 1e-10, "seed {seed}: ld {ld} vs cofactor {}", det.abs().ln());
        }
    }

    #[test]
    fn logabsdet_clamps_singular() {
        let (ld, sign, clamped) = lu_logabsdet(&Tensor::matrix(2, 2, vec![1.0, 2.0, 2.0, 4.0])).unwrap();
        assert!(clamped);
        assert_eq!(sign, 0.0);
        assert!((ld - 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn inverse_roundtrip() {
        for seed in 0..10 {
            let m = seeded_matrix(5, 100 + seed);
            let inv = lu_inverse(&m).unwrap();
            let prod = m.matmul(&inv);
            for i in 0..5 {
                for j in 0..5 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((prod.data()[i * 5 + j] - expect).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn jacobi_eig_reconstructs() {
        for seed in 0..10 {
            let r = seeded_matrix(6, 200 + seed);
            // Symmetrize.
            let mut m = Tensor::zeros(vec![6, 6]);
            for i in 0..6 {
                for j in 0..6 {
                    m.data_mut()[i * 6 + j] = 0.5 * (r.data()[i * 6 + j] + r.data()[j * 6 + i]);
                }
            }
            let (vals, vecs) = sym_eig(&m).unwrap();
            // A·v_k = λ_k v_k for every column.
            for k in 0..6 {
                for i in 0..6 {
                    let mut av = 0.0;
                    for j in 0..6 {
                        av += m.data()[i * 6 + j] * vecs.data()[j * 6 + k];
                    }
                    assert!((av - vals[k] * vecs.data()[i * 6 + k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn cholesky_reconstructs() {
        let m = Tensor::matrix(2, 2, vec![4.0, 2.0, 2.0, 3.0]);
        let l = cholesky_lower(&m).unwrap();
        let back = l.matmul_nt(&l);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
