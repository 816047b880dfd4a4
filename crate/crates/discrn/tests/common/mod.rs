//! Shared test oracles, independent of the library's implementation paths.
#![allow(dead_code)] // not every test binary uses every oracle

use nalgebra::{DMatrix, DVector};

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, sorted
/// ascending. Independent of the eigensolver the library uses for its
/// spectral bounds.
pub fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols());
    let mut a = m.clone();
    let scale = a.iter().fold(0.0_f64, |acc, &v| acc.max(v.abs())).max(1.0);

    for _sweep in 0..200 {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a[(p, q)].abs());
            }
        }
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).unwrap());
    eig
}

/// Central-difference gradient of a scalar function of a stacked vector.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        let orig = xp[k];
        xp[k] = orig + h;
        let fp = f(&xp);
        xp[k] = orig - h;
        let fm = f(&xp);
        xp[k] = orig;
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Component-wise relative closeness with an O(1) scale floor.
pub fn assert_vec_close(actual: &DVector<f64>, expected: &DVector<f64>, rel: f64, what: &str) {
    assert_eq!(actual.len(), expected.len(), "{what}: length mismatch");
    for k in 0..actual.len() {
        let (a, e) = (actual[k], expected[k]);
        let scale = 1.0_f64.max(a.abs()).max(e.abs());
        assert!(
            (a - e).abs() <= rel * scale,
            "{what}[{k}]: {a} vs {e} (rel tol {rel})"
        );
    }
}

/// Deterministic 64-bit mixer for ad-hoc test randomness.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform f64 in [0, 1) from a mixed counter.
pub fn unit_f64(seed: u64, idx: u64) -> f64 {
    (mix64(seed.wrapping_mul(0x2545_f491_4f6c_dd1d).wrapping_add(idx)) >> 11) as f64
        / (1u64 << 53) as f64
}
