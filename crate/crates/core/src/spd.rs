//! Riemannian layers on symmetric positive definite matrices.
//!
//! All graph-level layers work on batches `[B, d, d]` and treat each batch
//! element independently, in batch order.
//!
//! - [`spd_pool`]: `[B, C, spatial...]` → `[B, C, C]`, (1/N) R Rᵀ + γI
//! - [`bimap`]: X ↦ AᵀXA with A column-orthonormal (`d_in × d_out`)
//! - [`reeig`]: U max(εI, Σ) Uᵀ
//! - [`logeig`]: U log(Σ) Uᵀ
//! - [`upper_triangle_vec`]: row-major i ≤ j scan, √2 on off-diagonals
//! - [`bire_block`]: BiMap to d/2 followed by ReEig

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::{qr_orthonormalize, sym_eig, Matrix, SpectralFn};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

/// Rectification threshold used by ReEig layers unless configured otherwise.
pub const DEFAULT_REEIG_EPSILON: f64 = 1e-4;

const SYMMETRY_TOLERANCE: f64 = 1e-9;

/// A validated symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix {
    values: Matrix,
}

impl SpdMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if values.rows != values.cols {
            return Err(Error::Shape(format!(
                "SPD matrix must be square, got {}x{}",
                values.rows, values.cols
            )));
        }
        let n = values.rows;
        for i in 0..n {
            for j in i + 1..n {
                let d = (values.get(i, j) - values.get(j, i)).abs();
                if d > SYMMETRY_TOLERANCE {
                    return Err(Error::Domain(format!("asymmetry {d:e} at ({i}, {j})")));
                }
            }
        }
        let lmin = min_eigenvalue(&values)?;
        if lmin <= 0.0 {
            return Err(Error::Domain(format!(
                "smallest eigenvalue {lmin:e} is not positive"
            )));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.rows
    }

    pub fn matrix(&self) -> &Matrix {
        &self.values
    }

    /// Splits a `[B, d, d]` tensor into validated matrices.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<SpdMatrix>> {
        batch_matrices(t)?.into_iter().map(SpdMatrix::new).collect()
    }
}

pub fn min_eigenvalue(m: &Matrix) -> Result<f64> {
    Ok(*sym_eig(m)?.eigenvalues.last().unwrap_or(&f64::INFINITY))
}

/// Splits `[B, d, d]` into `B` matrices.
pub fn batch_matrices(t: &Tensor) -> Result<Vec<Matrix>> {
    match t.shape() {
        [_, d, e] if d == e => Ok(t
            .data()
            .chunks(d * d)
            .map(|c| Matrix::from_vec(*d, *d, c.to_vec()))
            .collect()),
        s => Err(Error::Shape(format!("expected [B, d, d], got {s:?}"))),
    }
}

/// BiMap layer whose transposed weight lives on the Stiefel manifold.
#[derive(Debug, Clone)]
pub struct BiMapLayer {
    pub weight: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl BiMapLayer {
    /// Initializes the weight as the Q factor of a seeded Gaussian matrix.
    pub fn new(
        store: &mut ParamStore,
        name: impl Into<String>,
        input_dim: usize,
        output_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if output_dim == 0 || output_dim > input_dim {
            return Err(Error::Config(format!(
                "BiMap {input_dim} -> {output_dim} must reduce dimension"
            )));
        }
        let g = Matrix::from_vec(
            input_dim,
            output_dim,
            (0..input_dim * output_dim)
                .map(|_| rng.sample(StandardNormal))
                .collect(),
        );
        let q = qr_orthonormalize(&g)?;
        let weight = store.add(
            name,
            ParamKind::Stiefel,
            Tensor::from_parts(vec![input_dim, output_dim], q.data),
        );
        Ok(Self {
            weight,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let a = g.param(store, self.weight);
        bimap(g, x, a)
    }

    pub fn orthonormality_residual(&self, store: &ParamStore) -> f64 {
        let t = store.tensor(self.weight);
        Matrix::from_vec(self.input_dim, self.output_dim, t.data().to_vec())
            .orthonormality_residual()
    }
}

pub fn spd_pool(g: &mut Graph, features: Var) -> Result<Var> {
    g.spd_pool(features, true)
}

/// AᵀXA for `x: [B, n, n]` and `a: [n, p]`.
pub fn bimap(g: &mut Graph, x: Var, a: Var) -> Result<Var> {
    let (xs, as_) = (g.shape(x).to_vec(), g.shape(a).to_vec());
    match (xs.as_slice(), as_.as_slice()) {
        ([_, n, n2], [rows, _]) if n == n2 && n == rows => {}
        _ => return Err(Error::Shape(format!("bimap: input {xs:?}, weight {as_:?}"))),
    }
    let at = g.transpose(a)?;
    let left = g.matmul(at, x)?;
    g.matmul(left, a)
}

pub fn reeig(g: &mut Graph, x: Var, epsilon: f64) -> Result<Var> {
    g.spectral(x, SpectralFn::Rectify(epsilon))
}

pub fn logeig(g: &mut Graph, x: Var) -> Result<Var> {
    g.spectral(x, SpectralFn::Log)
}

pub fn expeig(g: &mut Graph, x: Var) -> Result<Var> {
    g.spectral(x, SpectralFn::Exp)
}

/// Off-diagonal multiplier making the vectorization a Frobenius isometry.
pub fn offdiag_scale(isometric: bool) -> f64 {
    if isometric {
        std::f64::consts::SQRT_2
    } else {
        1.0
    }
}

pub fn upper_triangle_vec(g: &mut Graph, x: Var, isometric: bool) -> Result<Var> {
    g.upper_triangle(x, offdiag_scale(isometric))
}

/// BiMap halving the dimension, then ReEig.
pub fn bire_block(g: &mut Graph, x: Var, a: Var, epsilon: f64) -> Result<Var> {
    let d = g.shape(x).get(1).copied().unwrap_or(0);
    if d % 2 != 0 {
        return Err(Error::Shape(format!(
            "BiRe block needs an even dimension, got {d}"
        )));
    }
    if g.shape(a) != [d, d / 2] {
        return Err(Error::Shape(format!(
            "BiRe weight must be [{d}, {}], got {:?}",
            d / 2,
            g.shape(a)
        )));
    }
    let y = bimap(g, x, a)?;
    reeig(g, y, epsilon)
}
