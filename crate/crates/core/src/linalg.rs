//! Symmetric eigendecomposition, spectral matrix functions and thin QR.
//!
//! Matrices here are small (at most a few dozen rows), so everything works on
//! a plain row-major [`Matrix`] with straightforward loops.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix buffer length");
        Self { rows, cols, data }
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "elementwise shapes"
        );
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data)
    }

    /// (M + Mᵀ) / 2.
    pub fn sym(&self) -> Matrix {
        assert_eq!(self.rows, self.cols, "sym() of non-square matrix");
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = 0.5 * (self.get(i, j) + self.get(j, i));
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// ‖MᵀM − I‖_F, the orthonormality residual of the columns.
    pub fn orthonormality_residual(&self) -> f64 {
        self.transpose()
            .matmul(self)
            .sub(&Matrix::identity(self.cols))
            .frobenius_norm()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) = {}",
                i / self.cols,
                i % self.cols,
                self.data[i]
            ))),
            None => Ok(()),
        }
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenPair {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenPair {
    /// U diag(g(λ)) Uᵀ.
    pub fn reconstruct_with(&self, g: impl Fn(f64) -> f64) -> Matrix {
        let n = self.eigenvalues.len();
        let u = &self.eigenvectors;
        let mapped: Vec<f64> = self.eigenvalues.iter().map(|&l| g(l)).collect();
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = 0.0;
                for (k, &m) in mapped.iter().enumerate() {
                    s += u.get(i, k) * m * u.get(j, k);
                }
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Matrix {
        self.reconstruct_with(|l| l)
    }
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// The input is symmetrized first. Eigenvalues come back sorted descending and
/// each eigenvector's first entry that is not negligible is made non-negative.
pub fn sym_eig(x: &Matrix) -> Result<EigenPair> {
    if x.rows != x.cols {
        return Err(Error::Shape(format!(
            "sym_eig of {}x{} matrix",
            x.rows, x.cols
        )));
    }
    x.check_finite()?;
    let n = x.rows;
    let mut a = x.sym();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius_norm();

    if n > 1 && scale > 0.0 {
        let tol = f64::EPSILON * scale;
        let mut sweeps = 0;
        loop {
            let off = off_diagonal_norm(&a);
            if off <= tol {
                break;
            }
            if sweeps == JACOBI_MAX_SWEEPS {
                return Err(Error::NoConvergence {
                    sweeps,
                    residual: off,
                });
            }
            sweeps += 1;
            for p in 0..n - 1 {
                for q in p + 1..n {
                    jacobi_rotate(&mut a, &mut v, p, q);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps equal eigenvalues in their Jacobi order.
    order.sort_by(|&i, &j| a.get(j, j).total_cmp(&a.get(i, i)));
    let eigenvalues: Vec<f64> = order.iter().map(|&k| a.get(k, k)).collect();
    let mut u = Matrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        let mut c = v.column(k);
        let sign_tol = 1e-12;
        if let Some(first) = c.iter().find(|e| e.abs() > sign_tol) {
            if *first < 0.0 {
                c.iter_mut().for_each(|e| *e = -*e);
            }
        }
        for (i, e) in c.into_iter().enumerate() {
            u.set(i, col, e);
        }
    }
    Ok(EigenPair {
        eigenvalues,
        eigenvectors: u,
    })
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows;
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// One rotation zeroing a[p][q]; accumulates the rotation into `v`.
fn jacobi_rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize) {
    let apq = a.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = a.get(p, p);
    let aqq = a.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
    let t = if theta == 0.0 { 1.0 } else { t };
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = a.rows;
    for k in 0..n {
        let akp = a.get(k, p);
        let akq = a.get(k, q);
        a.set(k, p, c * akp - s * akq);
        a.set(k, q, s * akp + c * akq);
    }
    for k in 0..n {
        let apk = a.get(p, k);
        let aqk = a.get(q, k);
        a.set(p, k, c * apk - s * aqk);
        a.set(q, k, s * apk + c * aqk);
    }
    a.set(p, q, 0.0);
    a.set(q, p, 0.0);
    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}

/// A scalar function applied to the spectrum of a symmetric matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpectralFn {
    Identity,
    /// max(ε, λ); derivative 0 at λ = ε exactly.
    Rectify(f64),
    Log,
    Exp,
}

impl SpectralFn {
    pub fn value(self, x: f64) -> f64 {
        match self {
            SpectralFn::Identity => x,
            SpectralFn::Rectify(eps) => x.max(eps),
            SpectralFn::Log => x.ln(),
            SpectralFn::Exp => x.exp(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            SpectralFn::Identity => 1.0,
            SpectralFn::Rectify(eps) => {
                if x > eps {
                    1.0
                } else {
                    0.0
                }
            }
            SpectralFn::Log => 1.0 / x,
            SpectralFn::Exp => x.exp(),
        }
    }

    fn check_domain(self, eigenvalues: &[f64]) -> Result<()> {
        if let SpectralFn::Log = self {
            if let Some(l) = eigenvalues.iter().find(|&&l| l <= 0.0) {
                return Err(Error::Domain(format!("log of eigenvalue {l:e}")));
            }
        }
        Ok(())
    }
}

/// Forward of a spectral matrix function: returns f(X) and the decomposition
/// needed for the backward pass.
pub fn sym_matrix_function(x: &Matrix, f: SpectralFn) -> Result<(Matrix, EigenPair)> {
    let eig = sym_eig(x)?;
    f.check_domain(&eig.eigenvalues)?;
    let out = eig.reconstruct_with(|l| f.value(l));
    Ok((out, eig))
}

/// Daleckii–Krein backward: maps dL/df(X) to dL/dX.
///
/// Computes U (K ∘ (Uᵀ sym(G) U)) Uᵀ, with K the matrix of divided
/// differences of `f` over eigenvalue pairs. Pairs closer than
/// τ = 1e-10·max(1, |λ₁|) use f' at their midpoint.
pub fn sym_matrix_function_backward(eig: &EigenPair, f: SpectralFn, grad_out: &Matrix) -> Matrix {
    let lam = &eig.eigenvalues;
    let n = lam.len();
    let u = &eig.eigenvectors;
    let tau = 1e-10 * lam.first().map_or(1.0, |l| l.abs().max(1.0));
    let inner = u.transpose().matmul(&grad_out.sym()).matmul(u);
    let mut kg = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let (li, lj) = (lam[i], lam[j]);
            let k = if (li - lj).abs() > tau {
                (f.value(li) - f.value(lj)) / (li - lj)
            } else {
                f.derivative(0.5 * (li + lj))
            };
            kg.set(i, j, k * inner.get(i, j));
        }
    }
    u.matmul(&kg).matmul(&u.transpose())
}

/// Thin QR orthonormalization with R's diagonal forced positive.
///
/// Householder reflections; returns the n×p factor Q.
pub fn qr_orthonormalize(a: &Matrix) -> Result<Matrix> {
    let (n, p) = (a.rows, a.cols);
    if n < p {
        return Err(Error::Shape(format!(
            "qr_orthonormalize needs rows >= cols, got {n}x{p}"
        )));
    }
    a.check_finite()?;
    let mut r = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(p);
    for k in 0..p {
        let norm: f64 = (k..n).map(|i| r.get(i, k).powi(2)).sum::<f64>().sqrt();
        let mut v: Vec<f64> = (k..n).map(|i| r.get(i, k)).collect();
        let alpha = if v[0] >= 0.0 { -norm } else { norm };
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 > 0.0 {
            for j in k..p {
                let dot: f64 = (k..n).map(|i| v[i - k] * r.get(i, j)).sum();
                let f = 2.0 * dot / vnorm2;
                for i in k..n {
                    r.set(i, j, r.get(i, j) - f * v[i - k]);
                }
            }
        }
        reflectors.push(v);
    }
    for k in 0..p {
        let d = r.get(k, k);
        if d.abs() < 1e-12 {
            return Err(Error::RankDeficient {
                index: k,
                value: d.abs(),
            });
        }
    }
    // Q = H_0 H_1 ... H_{p-1} applied to the first p columns of I.
    let mut q = Matrix::zeros(n, p);
    for j in 0..p {
        q.set(j, j, 1.0);
    }
    for k in (0..p).rev() {
        let v = &reflectors[k];
        let vnorm2: f64 = v.iter().map(|x| x * x).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        for j in 0..p {
            let dot: f64 = (k..n).map(|i| v[i - k] * q.get(i, j)).sum();
            let f = 2.0 * dot / vnorm2;
            for i in k..n {
                q.set(i, j, q.get(i, j) - f * v[i - k]);
            }
        }
    }
    for k in 0..p {
        if r.get(k, k) < 0.0 {
            for i in 0..n {
                q.set(i, k, -q.get(i, k));
            }
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_symmetric(n: usize, rng: &mut impl Rng) -> Matrix {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = rng.gen_range(-1.0..1.0);
                m.set(i, j, v);
                m.set(j, i, v);
            }
        }
        m
    }

    fn random_spd(n: usize, rng: &mut impl Rng) -> Matrix {
        let b = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        b.matmul(&b.transpose())
            .add(&Matrix::identity(n).scale(0.5))
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        let d = a.sub(b).frobenius_norm();
        assert!(d <= tol, "difference {d:e} > {tol:e}");
    }

    #[test]
    fn eig_of_identity() {
        let e = sym_eig(&Matrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(3));
    }

    #[test]
    fn eig_of_diagonal() {
        let e = sym_eig(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_eq!(e.eigenvectors, Matrix::identity(2));
        let e = sym_eig(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![3.0, 1.0]);
        assert_close(
            &e.eigenvectors,
            &Matrix::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]),
            0.0,
        );
    }

    #[test]
    fn eig_residuals_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in [2, 5, 8, 16] {
            let x = random_symmetric(n, &mut rng);
            let e = sym_eig(&x).unwrap();
            assert!(e.eigenvectors.orthonormality_residual() <= 1e-10 * n as f64);
            assert!(e.reconstruct().sub(&x).frobenius_norm() <= 1e-9 * x.frobenius_norm());
            assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
            for k in 0..n {
                let first = e
                    .eigenvectors
                    .column(k)
                    .into_iter()
                    .find(|v| v.abs() > 1e-12)
                    .unwrap();
                assert!(first >= 0.0);
            }
        }
    }

    #[test]
    fn eig_rejects_nan() {
        let mut x = Matrix::identity(2);
        x.set(0, 1, f64::NAN);
        assert!(matches!(sym_eig(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn decompose_reconstruct_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_symmetric(7, &mut rng);
        let once = sym_eig(&x).unwrap().reconstruct();
        let twice = sym_eig(&once).unwrap().reconstruct();
        assert_close(&once, &twice, 1e-9);
    }

    #[test]
    fn identity_function_and_log_of_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_symmetric(5, &mut rng);
        let (y, eig) = sym_matrix_function(&x, SpectralFn::Identity).unwrap();
        assert_close(&y, &x, 1e-12);
        let g = Matrix::from_vec(5, 5, (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect());
        assert_close(
            &sym_matrix_function_backward(&eig, SpectralFn::Identity, &g),
            &g.sym(),
            1e-12,
        );

        let (l, _) = sym_matrix_function(&Matrix::identity(4), SpectralFn::Log).unwrap();
        assert_eq!(l, Matrix::zeros(4, 4));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let x = Matrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(
            sym_matrix_function(&x, SpectralFn::Log),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn exp_log_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let x = random_spd(6, &mut rng);
            let (l, _) = sym_matrix_function(&x, SpectralFn::Log).unwrap();
            let (back, _) = sym_matrix_function(&l, SpectralFn::Exp).unwrap();
            assert!(back.sub(&x).frobenius_norm() <= 1e-8 * x.frobenius_norm());
        }
    }

    fn fd_check(x: &Matrix, f: SpectralFn, seed: u64) {
        let n = x.rows;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (_, eig) = sym_matrix_function(x, f).unwrap();
        let analytic = sym_matrix_function_backward(&eig, f, &g);
        let h = 1e-5;
        let scalar = |m: &Matrix| sym_matrix_function(m, f).unwrap().0.frobenius_dot(&g);
        // Perturb symmetric pairs together: the input lives in symmetric space.
        for i in 0..n {
            for j in i..n {
                let mut e = Matrix::zeros(n, n);
                e.set(i, j, 1.0);
                e.set(j, i, 1.0);
                let numeric =
                    (scalar(&x.add(&e.scale(h))) - scalar(&x.sub(&e.scale(h)))) / (2.0 * h);
                let expected = if i == j {
                    analytic.get(i, i)
                } else {
                    analytic.get(i, j) + analytic.get(j, i)
                };
                let rel = (numeric - expected).abs() / numeric.abs().max(expected.abs()).max(1e-8);
                assert!(
                    rel <= 1e-4,
                    "({i},{j}) numeric {numeric} analytic {expected} rel {rel:e}"
                );
            }
        }
    }

    #[test]
    fn rectify_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        // Spectrum straddling ε but away from it by more than the FD step.
        let q = qr_orthonormalize(&Matrix::from_vec(
            6,
            6,
            (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
        .unwrap();
        let d = Matrix::from_diag(&[2.0, 1.1, 0.4, 0.05, -0.3, -1.0]);
        let x = q.matmul(&d).matmul(&q.transpose());
        fd_check(&x, SpectralFn::Rectify(1e-4), 1);
        fd_check(&random_spd(6, &mut rng), SpectralFn::Rectify(1e-4), 2);
    }

    #[test]
    fn log_backward_near_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let q = qr_orthonormalize(&Matrix::from_vec(
            5,
            5,
            (0..25).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
        .unwrap();
        for gap in [1e-8, 1e-12, 0.0] {
            let d = Matrix::from_diag(&[3.0, 1.0 + gap, 1.0, 0.5, 0.2]);
            let x = q.matmul(&d).matmul(&q.transpose());
            fd_check(&x, SpectralFn::Log, 4);
            fd_check(&x, SpectralFn::Exp, 5);
        }
    }

    #[test]
    fn qr_of_orthonormal_is_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::from_vec(8, 3, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let q = qr_orthonormalize(&a).unwrap();
        assert!(q.orthonormality_residual() <= 1e-12);
        let q2 = qr_orthonormalize(&q).unwrap();
        assert_close(&q, &q2, 1e-12);
        // Columns of A lie in span of Q with positive R diagonal.
        let r = q.transpose().matmul(&a);
        for k in 0..3 {
            assert!(r.get(k, k) > 0.0);
        }
        assert_close(&q.matmul(&r), &a, 1e-12);
    }

    #[test]
    fn qr_of_scaled_identity_embedding() {
        let mut a = Matrix::zeros(4, 2);
        a.set(0, 0, 3.0);
        a.set(1, 1, 0.5);
        let q = qr_orthonormalize(&a).unwrap();
        let mut expected = Matrix::zeros(4, 2);
        expected.set(0, 0, 1.0);
        expected.set(1, 1, 1.0);
        assert_close(&q, &expected, 1e-15);
    }

    #[test]
    fn qr_rank_deficiency() {
        let a = Matrix::from_vec(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(
            qr_orthonormalize(&a),
            Err(Error::RankDeficient { index: 1, .. })
        ));
    }
}
