//! Small dense eigen-utilities used on Hessenberg projections and reduced models.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Orders eigenvalues by descending modulus; conjugate pairs come out with the
/// positive imaginary part first.
pub fn sort_by_modulus(vals: &mut [Complex64]) {
    vals.sort_by(|a, b| b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im)));
}

/// All eigenvalues of a real square matrix, sorted by descending modulus.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    if m.nrows() == 0 {
        return Vec::new();
    }
    let mut vals: Vec<Complex64> = m.complex_eigenvalues().iter().copied().collect();
    // Snap imaginary round-off so real spectra compare exactly.
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for v in &mut vals {
        if v.im.abs() <= 1e-14 * scale {
            v.im = 0.0;
        }
    }
    sort_by_modulus(&mut vals);
    vals
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    eigenvalues(m).first().map_or(0.0, |v| v.norm())
}

pub fn to_complex(m: &DMatrix<f64>) -> DMatrix<Complex64> {
    m.map(|x| Complex64::new(x, 0.0))
}

/// Unit eigenvector for the eigenvalue `mu` by shifted inverse iteration.
pub fn eigenvector(m: &DMatrix<f64>, mu: Complex64) -> Result<DVector<Complex64>> {
    let n = m.nrows();
    let scale = 1.0 + m.amax();
    let shift = mu + Complex64::new(1e-10 * scale, 1e-10 * scale);
    let mut shifted = to_complex(m);
    for i in 0..n {
        shifted[(i, i)] -= shift;
    }
    let lu = shifted.lu();
    let mut x = DVector::from_fn(n, |i, _| Complex64::new(1.0 + 0.1 * (i as f64 * 0.7).sin(), 0.05 * i as f64));
    for _ in 0..3 {
        let Some(y) = lu.solve(&x) else {
            return Err(Error::Singular("inverse iteration"));
        };
        let norm = y.norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::Singular("inverse iteration"));
        }
        x = y / Complex64::new(norm, 0.0);
    }
    Ok(normalize_phase(x))
}

/// Rotates a complex vector so its largest entry is real and positive.
pub fn normalize_phase(v: DVector<Complex64>) -> DVector<Complex64> {
    let idx = v.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).map_or(0, |(i, _)| i);
    let pivot = v[idx];
    if pivot.norm() == 0.0 {
        return v;
    }
    let phase = pivot.conj() / pivot.norm();
    v.map(|c| c * phase)
}

/// Real eigenbasis: real eigenvectors as-is, each conjugate pair contributes its
/// real and imaginary parts. Column order follows `vals` (descending modulus).
pub fn real_eigenbasis(m: &DMatrix<f64>, vals: &[Complex64]) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut cols: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut i = 0;
    while i < vals.len() && cols.len() < n {
        let mu = vals[i];
        let v = eigenvector(m, mu)?;
        if mu.im == 0.0 {
            cols.push(v.map(|c| c.re));
            i += 1;
        } else {
            cols.push(v.map(|c| c.re));
            if cols.len() < n {
                cols.push(v.map(|c| c.im));
            }
            i += 2;
        }
    }
    Ok(DMatrix::from_columns(&cols))
}

/// Largest distance in the best one-to-one matching of two equally sized point sets.
pub fn multiset_distance(a: &[Complex64], b: &[Complex64]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    let n = a.len();
    if n == 0 {
        return 0.0;
    }
    if n <= 8 {
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let worst = p.iter().enumerate().map(|(i, &j)| (a[i] - b[j]).norm()).fold(0.0, f64::max);
            best = best.min(worst);
        });
        best
    } else {
        let mut used = vec![false; n];
        let mut worst: f64 = 0.0;
        for x in a {
            let (j, d) = b
                .iter()
                .enumerate()
                .filter(|(j, _)| !used[*j])
                .map(|(j, y)| (j, (x - y).norm()))
                .min_by(|p, q| p.1.total_cmp(&q.1))
                .expect("equal lengths");
            used[j] = true;
            worst = worst.max(d);
        }
        worst
    }
}

fn permute(p: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        visit(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, visit);
        p.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_has_conjugate_pair() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -2.0, 2.0, 0.0]);
        let vals = eigenvalues(&m);
        assert!((vals[0] - Complex64::new(0.0, 2.0)).norm() < 1e-14);
        assert!((vals[1] - Complex64::new(0.0, -2.0)).norm() < 1e-14);
    }

    #[test]
    fn eigenvectors_satisfy_definition() {
        let m = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.3, 0.2, 0.0, 0.9]);
        let mc = to_complex(&m);
        for mu in eigenvalues(&m) {
            let v = eigenvector(&m, mu).unwrap();
            let r = &mc * &v - &v * mu;
            assert!(r.norm() < 1e-9, "residual {} for {mu}", r.norm());
        }
    }

    #[test]
    fn real_basis_spans_invariant_planes() {
        let m = DMatrix::from_row_slice(3, 3, &[0.9, -0.4, 0.0, 0.4, 0.9, 0.0, 0.0, 0.0, 0.2]);
        let vals = eigenvalues(&m);
        let vf = real_eigenbasis(&m, &vals).unwrap();
        assert_eq!(vf.ncols(), 3);
        assert!(vf.determinant().abs() > 1e-6);
        let plane = vf.columns(0, 2).into_owned();
        let image = &m * &plane;
        let proj = &plane * plane.clone().pseudo_inverse(1e-12).unwrap() * &image;
        assert!((image - proj).norm() < 1e-9);
    }

    #[test]
    fn matching_distance_ignores_order() {
        let a = [Complex64::new(1.0, 0.0), Complex64::new(2.0, 0.0), Complex64::new(3.0, 0.5)];
        let b = [Complex64::new(3.0, 0.5), Complex64::new(1.0, 1e-9), Complex64::new(2.0, 0.0)];
        assert!(multiset_distance(&a, &b) < 2e-9);
        assert!(multiset_distance(&a, &b[..2]).is_infinite());
    }
}
