//! RMSprop for Euclidean parameters and Riemannian descent on the Stiefel
//! manifold for BiMap weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{qr_orthonormalize, Matrix};
use crate::params::{ParamKind, ParamStore};

/// Stiefel residual bound that every step must preserve.
pub const STIEFEL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmspropConfig {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmspropConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            alpha: 0.99,
            eps: 1e-8,
        }
    }
}

/// Running mean of squared gradients for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub square_avg: Vec<f64>,
}

impl RmspropState {
    pub fn new(len: usize) -> Self {
        Self {
            square_avg: vec![0.0; len],
        }
    }
}

fn check_grad(grad: &[f64], what: &str) -> Result<()> {
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what} gradient entry {i} is {}",
            grad[i]
        )));
    }
    Ok(())
}

pub fn rmsprop_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut RmspropState,
    cfg: &RmspropConfig,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.square_avg.len() {
        return Err(Error::Shape(format!(
            "rmsprop: param {}, grad {}, state {}",
            param.len(),
            grad.len(),
            state.square_avg.len()
        )));
    }
    check_grad(grad, "rmsprop")?;
    for ((p, &g), s) in param.iter_mut().zip(grad).zip(&mut state.square_avg) {
        *s = cfg.alpha * *s + (1.0 - cfg.alpha) * g * g;
        *p -= cfg.lr * g / (s.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Column-orthonormal `n×p` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelParam {
    matrix: Matrix,
}

impl StiefelParam {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if matrix.rows < matrix.cols {
            return Err(Error::Shape(format!(
                "Stiefel matrix must be tall, got {}x{}",
                matrix.rows, matrix.cols
            )));
        }
        let r = matrix.orthonormality_residual();
        if r > STIEFEL_TOLERANCE {
            return Err(Error::Domain(format!(
                "matrix is not column-orthonormal (residual {r:.3e})"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }
}

/// G − A·sym(AᵀG).
pub fn tangent_projection(a: &Matrix, g: &Matrix) -> Matrix {
    g.sub(&a.matmul(&a.transpose().matmul(g).sym()))
}

/// Projected gradient step followed by QR retraction.
pub fn stiefel_step(param: &mut StiefelParam, grad: &Matrix, lr: f64) -> Result<()> {
    let a = &param.matrix;
    if grad.rows != a.rows || grad.cols != a.cols {
        return Err(Error::Shape(format!(
            "stiefel_step: param {}x{}, grad {}x{}",
            a.rows, a.cols, grad.rows, grad.cols
        )));
    }
    check_grad(&grad.data, "stiefel")?;
    let step = tangent_projection(a, grad).scale(lr);
    if step.data.iter().all(|&v| v == 0.0) {
        return Ok(());
    }
    let candidate = a.sub(&step);
    param.matrix = qr_orthonormalize(&candidate)?;
    Ok(())
}

/// Applies one update to every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub rmsprop: RmspropConfig,
    pub stiefel_lr: f64,
    states: Vec<Option<RmspropState>>,
}

impl Optimizer {
    pub fn new(store: &ParamStore, rmsprop: RmspropConfig, stiefel_lr: f64) -> Self {
        let states = store
            .iter()
            .map(|(_, p)| {
                (p.kind == ParamKind::Euclidean).then(|| RmspropState::new(p.tensor.len()))
            })
            .collect();
        Self {
            rmsprop,
            stiefel_lr,
            states,
        }
    }

    /// Consumes accumulated gradients; parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.states.len() != store.len() {
            return Err(Error::Config(
                "optimizer was built for a different parameter store".into(),
            ));
        }
        for (p, state) in store.iter_mut().zip(&mut self.states) {
            let Some(grad) = p.tensor.grad.take() else {
                continue;
            };
            match p.kind {
                ParamKind::Euclidean => {
                    let state = state.as_mut().expect("euclidean parameters carry state");
                    rmsprop_step(p.tensor.data_mut(), &grad, state, &self.rmsprop)
                        .map_err(|e| annotate(e, &p.name))?;
                }
                ParamKind::Stiefel => {
                    let s = p.tensor.shape();
                    let (n, k) = (s[0], s[1]);
                    let mut sp = StiefelParam {
                        matrix: Matrix::from_vec(n, k, p.tensor.data().to_vec()),
                    };
                    stiefel_step(&mut sp, &Matrix::from_vec(n, k, grad), self.stiefel_lr)
                        .map_err(|e| annotate(e, &p.name))?;
                    p.tensor.data_mut().copy_from_slice(&sp.matrix.data);
                }
                ParamKind::Buffer => {}
            }
        }
        Ok(())
    }
}

fn annotate(e: Error, name: &str) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{name}: {m}")),
        Error::RankDeficient { index, value } => Error::Domain(format!(
            "{name}: retraction lost rank at column {index} (|r| = {value:.3e}); step too large"
        )),
        other => other,
    }
}
