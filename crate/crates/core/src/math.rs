//! Small vector/matrix helpers shared across modules.

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Returns `v / ||v||`. A zero vector maps to the unit vector along axis 0
/// so callers always get something well-formed and deterministic.
pub(crate) fn normalized(v: &[f64]) -> Vec<f64> {
    let n = l2_norm(v);
    if n > 0.0 && n.is_finite() {
        v.iter().map(|x| x / n).collect()
    } else {
        let mut e = vec![0.0; v.len()];
        e[0] = 1.0;
        e
    }
}

/// FNV-1a 64-bit hash. Used for request-cache keys and config fingerprints,
/// where a stable non-cryptographic digest is all that is needed.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Solves `A X = B` for symmetric positive-definite `A` (n x n) via
/// Cholesky. `b` is n x m column-stacked as `m` right-hand sides.
/// Returns `None` if `A` is not positive definite.
pub(crate) fn solve_spd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let m = b.len();
    let mut out = vec![vec![0.0; n]; m];
    for (col, rhs) in b.iter().enumerate() {
        // forward: L y = rhs
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = rhs[i];
            for k in 0..i {
                s -= l[i][k] * y[k];
            }
            y[i] = s / l[i][i];
        }
        // backward: L^T x = y
        let x = &mut out[col];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k][i] * x[k];
            }
            x[i] = s / l[i][i];
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_unit_norm() {
        let v = normalized(&[3.0, 4.0]);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-12);
        assert!((v[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn normalized_zero_vector_falls_back() {
        let v = normalized(&[0.0, 0.0, 0.0]);
        assert_eq!(v, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn fnv_known_values() {
        // Reference vectors for FNV-1a 64.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn solve_spd_inverts_simple_system() {
        // A = [[4,1],[1,3]], b = [1, 2] -> x = [1/11, 7/11]
        let a = vec![vec![4.0, 1.0], vec![1.0, 3.0]];
        let b = vec![vec![1.0, 2.0]];
        let x = solve_spd(&a, &b).unwrap();
        assert!((x[0][0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((x[0][1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn solve_spd_rejects_indefinite() {
        let a = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        let b = vec![vec![1.0, 1.0]];
        assert!(solve_spd(&a, &b).is_none());
    }
}
