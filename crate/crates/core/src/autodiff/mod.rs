//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every executed operation together with whatever the
//! backward pass needs. Nodes are appended in execution order, so reverse
//! insertion order is a valid topological order for [`Graph::backward`].
//! A graph is used for exactly one backward pass; build a fresh one (or call
//! [`Graph::reset`]) for the next step.

pub(crate) mod kernels;

use kernels::Dims5;

use crate::error::{Error, Result};
use crate::linalg::{self, EigenPair, Matrix, SpectralFn};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel_from, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Relative jitter added to second-order pooling outputs.
pub const SPD_POOL_JITTER: f64 = 1e-5;
const SPD_POOL_TRACE_FLOOR: f64 = 1e-12;
/// Probability clamp used inside the cross-entropy logarithms.
pub const PROB_CLAMP: f64 = 1e-7;
const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BatchNormMode<'a> {
    /// Normalize by batch statistics.
    Train { eps: f64 },
    /// Normalize by supplied running statistics.
    Eval {
        mean: &'a [f64],
        var: &'a [f64],
        eps: f64,
    },
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<ParamId>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Matmul(Var, Var),
    Sum(Var),
    Mean(Var),
    MeanLastAxis(Var),
    ChannelScale(Var, Var),
    Linear(Var, Var, Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    SpdPool {
        x: Var,
        jitter_slope: Vec<f64>,
    },
    Spectral {
        x: Var,
        f: SpectralFn,
        eig: Vec<EigenPair>,
    },
    UpperTriangle {
        x: Var,
        offdiag_scale: f64,
    },
    DiceBce {
        pred: Var,
        target: Vec<f64>,
        smooth: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation; see the module docs.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn add_into(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drops every recorded node so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that takes part in differentiation if `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad;
        let mut value = t;
        value.grad = None;
        self.push(value, Op::Leaf { param: None }, needs)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.requires_grad = false;
        value.grad = None;
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a parameter. Its gradient is written back by
    /// [`accumulate_param_grads`](Self::accumulate_param_grads).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id);
        let needs = t.requires_grad;
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Leaf { param: Some(id) }, needs)
    }

    /// Records a parameter that should not receive gradients in this graph.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.tensor(id);
        self.constant(Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(av.shape().to_vec(), data);
        let needs = self.any_grad(&[a, b]);
        self.push(t, op, needs)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        );
        let needs = self.any_grad(&[a]);
        self.push(t, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_map(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_map(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_map(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a).reshaped(shape)?;
        let needs = self.any_grad(&[a]);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return shape_err(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner = numel_from(&base, axis + 1);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Swaps the last two axes of a 2-D or 3-D tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (batch, m, n) = match s.as_slice() {
            [m, n] => (1, *m, *n),
            [b, m, n] => (*b, *m, *n),
            _ => return shape_err(format!("transpose expects 2-D or 3-D, got {s:?}")),
        };
        let src = self.value(a).data();
        let mut data = vec![0.0; src.len()];
        for b in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    data[b * m * n + j * m + i] = src[b * m * n + i * n + j];
                }
            }
        }
        let mut shape = s;
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        let needs = self.any_grad(&[a]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Transpose(a), needs))
    }

    /// Batched matrix product. 2-D operands broadcast over the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geom = MatmulGeom::new(&sa, &sb)?;
        let out = geom.forward(self.value(a).data(), self.value(b).data());
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(geom.out_shape(), out),
            Op::Matmul(a, b),
            needs,
        ))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let needs = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Mean over the last axis, dropping it.
    pub fn mean_last_axis(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let Some((&n, rest)) = shape.split_last() else {
            return shape_err("mean_last_axis of a scalar".into());
        };
        if n == 0 {
            return shape_err("mean over empty axis".into());
        }
        let data = t
            .data()
            .chunks(n)
            .map(|c| c.iter().sum::<f64>() / n as f64)
            .collect();
        let needs = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::from_parts(rest.to_vec(), data),
            Op::MeanLastAxis(a),
            needs,
        ))
    }

    // ---- layers ------------------------------------------------------

    /// Multiplies channel `c` of sample `b` by `coeffs[b, c]`.
    pub fn channel_scale(&mut self, features: Var, coeffs: Var) -> Result<Var> {
        let fs = self.shape(features).to_vec();
        let cs = self.shape(coeffs).to_vec();
        if fs.len() < 2 || cs != fs[..2] {
            return shape_err(format!("channel_scale: features {fs:?}, coeffs {cs:?}"));
        }
        let inner = numel_from(&fs, 2);
        let f = self.value(features).data();
        let c = self.value(coeffs).data();
        let mut data = Vec::with_capacity(f.len());
        for (bc, &alpha) in c.iter().enumerate() {
            data.extend(f[bc * inner..(bc + 1) * inner].iter().map(|&v| v * alpha));
        }
        let needs = self.any_grad(&[features, coeffs]);
        Ok(self.push(
            Tensor::from_parts(fs, data),
            Op::ChannelScale(features, coeffs),
            needs,
        ))
    }

    /// `x · Wᵀ + b` for `x: [B, n]`, `W: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        let (batch, n, m) = match (sx.as_slice(), sw.as_slice(), sb.as_slice()) {
            ([bt, n], [m, n2], [m2]) if n == n2 && m == m2 => (*bt, *n, *m),
            _ => return shape_err(format!("linear: x {sx:?}, weight {sw:?}, bias {sb:?}")),
        };
        let (xv, wv, bv) = (
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let mut out = vec![0.0; batch * m];
        for i in 0..batch {
            let row = &xv[i * n..(i + 1) * n];
            for j in 0..m {
                let wr = &wv[j * n..(j + 1) * n];
                out[i * m + j] = bv[j] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m], out),
            Op::Linear(x, w, b),
            needs,
        ))
    }

    /// Same-size 3-D convolution, kernel `[Cout, Cin, k, k, k]` with odd `k`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (
            self.shape(x).to_vec(),
            self.shape(w).to_vec(),
            self.shape(b).to_vec(),
        );
        if sx.len() != 5 || sw.len() != 5 || sb.len() != 1 {
            return shape_err(format!("conv3d: input {sx:?}, kernel {sw:?}, bias {sb:?}"));
        }
        let k = sw[2];
        if sw[1] != sx[1] || sw[3] != k || sw[4] != k || k % 2 == 0 || sb[0] != sw[0] {
            return shape_err(format!("conv3d: input {sx:?}, kernel {sw:?}, bias {sb:?}"));
        }
        if sx[2..].contains(&0) {
            return shape_err(format!("conv3d: empty spatial dims {sx:?}"));
        }
        let xd = Dims5::of(&sx);
        let cout = sw[0];
        let out = kernels::conv3d_forward(
            self.value(x).data(),
            xd,
            self.value(w).data(),
            cout,
            k,
            self.value(b).data(),
        );
        let shape = vec![xd.b, cout, xd.h, xd.w, xd.d];
        let needs = self.any_grad(&[x, w, b]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv3d { x, w, b },
            needs,
        ))
    }

    pub fn maxpool3d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || s[2..].iter().any(|&d| d % 2 != 0 || d == 0) {
            return shape_err(format!("maxpool3d needs even spatial dims, got {s:?}"));
        }
        let xd = Dims5::of(&s);
        let (out, argmax) = kernels::maxpool3d_forward(self.value(x).data(), xd);
        let shape = vec![xd.b, xd.c, xd.h / 2, xd.w / 2, xd.d / 2];
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaxPool3d { x, argmax },
            needs,
        ))
    }

    pub fn upsample_nearest3d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return shape_err(format!("upsample expects [B,C,H,W,D], got {s:?}"));
        }
        let xd = Dims5::of(&s);
        let out = kernels::upsample2_forward(self.value(x).data(), xd);
        let shape = vec![xd.b, xd.c, xd.h * 2, xd.w * 2, xd.d * 2];
        let needs = self.any_grad(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Upsample2(x), needs))
    }

    /// Per-channel batch normalization. In training mode also returns the
    /// batch mean and biased variance so callers can update running stats.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>)> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return shape_err(format!("batch_norm: input {s:?}"));
        }
        let xd = Dims5::of(&s);
        let n = xd.spatial();
        let xv = self.value(x).data();
        let (mean, var, eps, stats) = match mode {
            BatchNormMode::Train { eps } => {
                let st = kernels::channel_stats(xv, xd);
                (
                    st.mean.clone(),
                    st.var.clone(),
                    eps,
                    Some((st.mean, st.var)),
                )
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != xd.c || var.len() != xd.c {
                    return shape_err("batch_norm running stats length".into());
                }
                (mean.to_vec(), var.to_vec(), eps, None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for b in 0..xd.b {
            for c in 0..xd.c {
                let r = (b * xd.c + c) * n..(b * xd.c + c + 1) * n;
                for i in r {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = g[c] * h + bt[c];
                }
            }
        }
        let needs = self.any_grad(&[x, gamma, beta]);
        let batch_stats = stats.is_some();
        let v = self.push(
            Tensor::from_parts(s, out),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        );
        Ok((v, stats))
    }

    /// Second-order pooling `[B, C, ...] -> [B, C, C]`: (1/N) R Rᵀ plus an
    /// optional trace-scaled jitter γI with γ = 1e-5·max(tr/C, 1e-12).
    pub fn spd_pool(&mut self, x: Var, jitter: bool) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return shape_err(format!("spd_pool expects [B, C, spatial...], got {s:?}"));
        }
        let (nb, c) = (s[0], s[1]);
        let n = numel_from(&s, 2);
        if n == 0 {
            return shape_err("spd_pool over zero voxels".into());
        }
        let xv = self.value(x);
        xv.validate()?;
        let xv = xv.data();
        let mut out = vec![0.0; nb * c * c];
        let mut slopes = vec![0.0; nb];
        for b in 0..nb {
            let base = b * c * n;
            let o = &mut out[b * c * c..(b + 1) * c * c];
            for i in 0..c {
                let ri = &xv[base + i * n..base + (i + 1) * n];
                for j in i..c {
                    let rj = &xv[base + j * n..base + (j + 1) * n];
                    let v = ri.iter().zip(rj).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    o[i * c + j] = v;
                    o[j * c + i] = v;
                }
            }
            if jitter {
                let mean_diag = (0..c).map(|i| o[i * c + i]).sum::<f64>() / c as f64;
                let gamma = SPD_POOL_JITTER * mean_diag.max(SPD_POOL_TRACE_FLOOR);
                if mean_diag > SPD_POOL_TRACE_FLOOR {
                    slopes[b] = SPD_POOL_JITTER / c as f64;
                }
                for i in 0..c {
                    o[i * c + i] += gamma;
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![nb, c, c], out),
            Op::SpdPool {
                x,
                jitter_slope: slopes,
            },
            needs,
        ))
    }

    /// Applies a spectral function to each `[d, d]` matrix of a `[B, d, d]` batch.
    pub fn spectral(&mut self, x: Var, f: SpectralFn) -> Result<Var> {
        let (nb, d) = self.square_batch(x, "spectral")?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len());
        let mut eigs = Vec::with_capacity(nb);
        for b in 0..nb {
            let m = Matrix::from_vec(d, d, xv[b * d * d..(b + 1) * d * d].to_vec());
            let (y, eig) = linalg::sym_matrix_function(&m, f)?;
            out.extend(y.data);
            eigs.push(eig);
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![nb, d, d], out),
            Op::Spectral { x, f, eig: eigs },
            needs,
        ))
    }

    /// Row-major upper triangle (i ≤ j) of each matrix, off-diagonal entries
    /// multiplied by `offdiag_scale`.
    pub fn upper_triangle(&mut self, x: Var, offdiag_scale: f64) -> Result<Var> {
        let (nb, d) = self.square_batch(x, "upper_triangle")?;
        let xv = self.value(x).data();
        let m = d * (d + 1) / 2;
        let mut out = Vec::with_capacity(nb * m);
        for b in 0..nb {
            for i in 0..d {
                for j in i..d {
                    let v = xv[b * d * d + i * d + j];
                    out.push(if i == j { v } else { v * offdiag_scale });
                }
            }
        }
        let needs = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![nb, m], out),
            Op::UpperTriangle { x, offdiag_scale },
            needs,
        ))
    }

    fn square_batch(&self, x: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape(x) {
            [b, d, e] if d == e => Ok((*b, *d)),
            s => shape_err(format!("{what} expects [B, d, d], got {s:?}")),
        }
    }

    /// Soft Dice loss (smoothing `smooth`) plus mean binary cross-entropy.
    pub fn dice_bce(&mut self, pred: Var, target: &Tensor, smooth: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return shape_err(format!(
                "dice_bce: pred {:?}, target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let p = self.value(pred).data();
        let t = target.data();
        if let Some(i) = p
            .iter()
            .position(|&v| !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&v))
        {
            return Err(Error::Domain(format!(
                "prediction {} at index {i} outside (0, 1)",
                p[i]
            )));
        }
        let loss = dice_bce_value(p, t, smooth);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("dice_bce loss {loss}")));
        }
        let needs = self.any_grad(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::DiceBce {
                pred,
                target: t.to_vec(),
                smooth,
            },
            needs,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every recorded node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice without reset".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Graph(format!(
                "backward on non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.node_backward(i, &g) {
                if self.nodes[parent.0].needs_grad {
                    add_into(&mut grads[parent.0], pg);
                }
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds leaf gradients into the owning parameters' `grad` buffers.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(Some(g)) = self.grads.get(i) {
                    let t = &mut store.get_mut(id).tensor;
                    match &mut t.grad {
                        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                        None => t.grad = Some(g.clone()),
                    }
                }
            }
        }
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf { .. } => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(av).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::Relu(a) => {
                let av = self.val(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(av)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect(),
            )],
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner = numel_from(shape, axis + 1);
                let mut res: Vec<(Var, Vec<f64>)> = parts
                    .iter()
                    .map(|p| (*p, Vec::with_capacity(self.nodes[p.0].value.len())))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (p, buf) in res.iter_mut() {
                        let chunk = self.nodes[p.0].value.shape()[*axis] * inner;
                        buf.extend_from_slice(&g[off..off + chunk]);
                        off += chunk;
                    }
                }
                res
            }
            Op::Transpose(a) => {
                let s = self.nodes[a.0].value.shape();
                let (batch, m, n) = match s {
                    [m, n] => (1, *m, *n),
                    [b, m, n] => (*b, *m, *n),
                    _ => unreachable!(),
                };
                let mut ga = vec![0.0; g.len()];
                for b in 0..batch {
                    for r in 0..m {
                        for c in 0..n {
                            ga[b * m * n + r * n + c] = g[b * m * n + c * m + r];
                        }
                    }
                }
                vec![(*a, ga)]
            }
            Op::Matmul(a, b) => {
                let geom =
                    MatmulGeom::new(self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape())
                        .expect("validated in forward");
                let (ga, gb) = geom.backward(self.val(*a), self.val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.nodes[a.0].value.len()])],
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::MeanLastAxis(a) => {
                let s = self.nodes[a.0].value.shape();
                let n = *s.last().unwrap();
                let ga = g
                    .iter()
                    .flat_map(|&v| std::iter::repeat_n(v / n as f64, n))
                    .collect();
                vec![(*a, ga)]
            }
            Op::ChannelScale(f, c) => {
                let fv = self.val(*f);
                let cv = self.val(*c);
                let inner = numel_from(self.nodes[f.0].value.shape(), 2);
                let mut gf = vec![0.0; fv.len()];
                let mut gc = vec![0.0; cv.len()];
                for (bc, &alpha) in cv.iter().enumerate() {
                    let r = bc * inner..(bc + 1) * inner;
                    let mut acc = 0.0;
                    for k in r {
                        gf[k] = g[k] * alpha;
                        acc += g[k] * fv[k];
                    }
                    gc[bc] = acc;
                }
                vec![(*f, gf), (*c, gc)]
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.val(*x), self.val(*w));
                let sx = self.nodes[x.0].value.shape();
                let (batch, n) = (sx[0], sx[1]);
                let m = self.nodes[b.0].value.len();
                let mut gx = vec![0.0; xv.len()];
                let mut gw = vec![0.0; wv.len()];
                let mut gb = vec![0.0; m];
                for r in 0..batch {
                    for j in 0..m {
                        let go = g[r * m + j];
                        gb[j] += go;
                        for k in 0..n {
                            gx[r * n + k] += go * wv[j * n + k];
                            gw[j * n + k] += go * xv[r * n + k];
                        }
                    }
                }
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::Conv3d { x, w, b } => {
                let xd = Dims5::of(self.nodes[x.0].value.shape());
                let sw = self.nodes[w.0].value.shape();
                let (gx, gw, gb) =
                    kernels::conv3d_backward(self.val(*x), xd, self.val(*w), sw[0], sw[2], g);
                vec![(*x, gx), (*w, gw), (*b, gb)]
            }
            Op::MaxPool3d { x, argmax } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (o, &src) in argmax.iter().enumerate() {
                    gx[src] += g[o];
                }
                vec![(*x, gx)]
            }
            Op::Upsample2(x) => {
                let xd = Dims5::of(self.nodes[x.0].value.shape());
                vec![(*x, kernels::upsample2_backward(g, xd))]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let xd = Dims5::of(self.nodes[x.0].value.shape());
                let n = xd.spatial();
                let count = (xd.b * n) as f64;
                let gv = self.val(*gamma);
                let mut gx = vec![0.0; xhat.len()];
                let mut gg = vec![0.0; xd.c];
                let mut gbeta = vec![0.0; xd.c];
                for c in 0..xd.c {
                    let (mut sum_g, mut sum_gh) = (0.0, 0.0);
                    for b in 0..xd.b {
                        for k in (b * xd.c + c) * n..(b * xd.c + c + 1) * n {
                            sum_g += g[k];
                            sum_gh += g[k] * xhat[k];
                        }
                    }
                    gg[c] = sum_gh;
                    gbeta[c] = sum_g;
                    let scale = gv[c] * inv_std[c];
                    for b in 0..xd.b {
                        for k in (b * xd.c + c) * n..(b * xd.c + c + 1) * n {
                            gx[k] = if *batch_stats {
                                scale * (g[k] - sum_g / count - xhat[k] * sum_gh / count)
                            } else {
                                scale * g[k]
                            };
                        }
                    }
                }
                vec![(*x, gx), (*gamma, gg), (*beta, gbeta)]
            }
            Op::SpdPool { x, jitter_slope } => {
                let s = self.nodes[x.0].value.shape();
                let (nb, c) = (s[0], s[1]);
                let n = numel_from(s, 2);
                let xv = self.val(*x);
                let mut gx = vec![0.0; xv.len()];
                for b in 0..nb {
                    let gm = &g[b * c * c..(b + 1) * c * c];
                    let tr_g: f64 = (0..c).map(|i| gm[i * c + i]).sum();
                    // d/dR of <G, RRᵀ/N + γ(R) I> = (G + Gᵀ)R/N + γ'·tr(G)·2R/N.
                    for i in 0..c {
                        let dst = &mut gx[(b * c + i) * n..(b * c + i + 1) * n];
                        for j in 0..c {
                            let mut coef = (gm[i * c + j] + gm[j * c + i]) / n as f64;
                            if i == j {
                                coef += jitter_slope[b] * tr_g * 2.0 / n as f64;
                            }
                            if coef == 0.0 {
                                continue;
                            }
                            let src = &xv[(b * c + j) * n..(b * c + j + 1) * n];
                            for (d, &r) in dst.iter_mut().zip(src) {
                                *d += coef * r;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Spectral { x, f, eig } => {
                let d = eig.first().map_or(0, |e| e.eigenvalues.len());
                let mut gx = Vec::with_capacity(g.len());
                for (b, e) in eig.iter().enumerate() {
                    let gm = Matrix::from_vec(d, d, g[b * d * d..(b + 1) * d * d].to_vec());
                    gx.extend(linalg::sym_matrix_function_backward(e, *f, &gm).data);
                }
                vec![(*x, gx)]
            }
            Op::UpperTriangle { x, offdiag_scale } => {
                let s = self.nodes[x.0].value.shape();
                let (nb, d) = (s[0], s[1]);
                let mut gx = vec![0.0; nb * d * d];
                let mut k = 0;
                for b in 0..nb {
                    for i in 0..d {
                        for j in i..d {
                            gx[b * d * d + i * d + j] =
                                if i == j { g[k] } else { g[k] * offdiag_scale };
                            k += 1;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::DiceBce {
                pred,
                target,
                smooth,
            } => {
                let p = self.val(*pred);
                let gp = dice_bce_grad(p, target, *smooth);
                vec![(*pred, gp.into_iter().map(|v| v * g[0]).collect())]
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn dice_bce_value(p: &[f64], t: &[f64], smooth: f64) -> f64 {
    let (mut spt, mut sp, mut st, mut bce) = (0.0, 0.0, 0.0, 0.0);
    for (&pv, &tv) in p.iter().zip(t) {
        spt += pv * tv;
        sp += pv;
        st += tv;
        let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        bce -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
    }
    let dice = 1.0 - (2.0 * spt + smooth) / (sp + st + smooth);
    dice + bce / p.len() as f64
}

/// Gradient of [`dice_bce_value`] in `p`. The clamp inside the logarithms is
/// passed straight through so saturated predictions still receive signal.
fn dice_bce_grad(p: &[f64], t: &[f64], smooth: f64) -> Vec<f64> {
    let (mut spt, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pv, &tv) in p.iter().zip(t) {
        spt += pv * tv;
        sp += pv;
        st += tv;
    }
    let num = 2.0 * spt + smooth;
    let den = sp + st + smooth;
    let n = p.len() as f64;
    p.iter()
        .zip(t)
        .map(|(&pv, &tv)| {
            let ddice = -(2.0 * tv * den - num) / (den * den);
            let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            let dbce = (-tv / pc + (1.0 - tv) / (1.0 - pc)) / n;
            ddice + dbce
        })
        .collect()
}

/// Broadcasting geometry for [`Graph::matmul`].
struct MatmulGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    out_batched: bool,
}

impl MatmulGeom {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        let split = |s: &[usize]| -> Result<(Option<usize>, usize, usize)> {
            match s {
                [m, n] => Ok((None, *m, *n)),
                [b, m, n] => Ok((Some(*b), *m, *n)),
                _ => shape_err(format!("matmul operand must be 2-D or 3-D, got {s:?}")),
            }
        };
        let (ba, m, k) = split(sa)?;
        let (bb, k2, n) = split(sb)?;
        if k != k2 {
            return shape_err(format!("matmul inner dims: {sa:?} x {sb:?}"));
        }
        let batch = match (ba, bb) {
            (Some(x), Some(y)) if x != y => {
                return shape_err(format!("matmul batch: {sa:?} x {sb:?}"))
            }
            (Some(x), _) | (_, Some(x)) => x,
            (None, None) => 1,
        };
        Ok(Self {
            batch,
            m,
            k,
            n,
            a_batched: ba.is_some(),
            b_batched: bb.is_some(),
            out_batched: ba.is_some() || bb.is_some(),
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.out_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }

    fn a_off(&self, b: usize) -> usize {
        if self.a_batched {
            b * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, b: usize) -> usize {
        if self.b_batched {
            b * self.k * self.n
        } else {
            0
        }
    }

    fn forward(&self, a: &[f64], bm: &[f64]) -> Vec<f64> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut out = vec![0.0; self.batch * m * n];
        for b in 0..self.batch {
            let (ao, bo, oo) = (self.a_off(b), self.b_off(b), b * m * n);
            for i in 0..m {
                for p in 0..k {
                    let av = a[ao + i * k + p];
                    for j in 0..n {
                        out[oo + i * n + j] += av * bm[bo + p * n + j];
                    }
                }
            }
        }
        out
    }

    fn backward(&self, a: &[f64], bm: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = vec![0.0; a.len()];
        let mut gb = vec![0.0; bm.len()];
        for b in 0..self.batch {
            let (ao, bo, oo) = (self.a_off(b), self.b_off(b), b * m * n);
            for i in 0..m {
                for p in 0..k {
                    let mut acc = 0.0;
                    let av = a[ao + i * k + p];
                    for j in 0..n {
                        let go = g[oo + i * n + j];
                        acc += go * bm[bo + p * n + j];
                        gb[bo + p * n + j] += av * go;
                    }
                    ga[ao + i * k + p] += acc;
                }
            }
        }
        (ga, gb)
    }
}
