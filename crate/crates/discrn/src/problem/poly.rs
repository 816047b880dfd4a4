//! Small dense polynomials in one variable (ascending coefficient order).

use nalgebra::DMatrix;

/// Evaluate `sum_k c[k] x^k` by Horner's rule.
pub fn eval(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Coefficients of the derivative polynomial.
pub fn derivative(coeffs: &[f64]) -> Vec<f64> {
    coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| k as f64 * c)
        .collect()
}

/// Monic polynomial with the given roots: `prod (x - r)`.
pub fn from_roots(roots: &[f64]) -> Vec<f64> {
    let mut coeffs = vec![1.0];
    for &r in roots {
        let mut next = vec![0.0; coeffs.len() + 1];
        for (k, &c) in coeffs.iter().enumerate() {
            next[k + 1] += c;
            next[k] -= r * c;
        }
        coeffs = next;
    }
    coeffs
}

/// Real roots via eigenvalues of the companion matrix.
///
/// Leading zero coefficients are trimmed first; roots with relative
/// imaginary part above `1e-8` are discarded.
pub fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    while c.len() > 1 && c.last().is_some_and(|&v| v.abs() < 1e-300) {
        c.pop();
    }
    let deg = c.len() - 1;
    if deg == 0 {
        return Vec::new();
    }
    if deg == 1 {
        return vec![-c[0] / c[1]];
    }
    let lead = c[deg];
    let mut companion = DMatrix::zeros(deg, deg);
    for k in 0..deg {
        companion[(k, deg - 1)] = -c[k] / lead;
        if k + 1 < deg {
            companion[(k + 1, k)] = 1.0;
        }
    }
    let eigs = companion.complex_eigenvalues();
    let mut roots: Vec<f64> = eigs
        .iter()
        .filter(|z| z.im.abs() <= 1e-8 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect();
    roots.sort_by(|a, b| a.partial_cmp(b).unwrap());
    roots
}
