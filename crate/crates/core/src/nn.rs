//! Parameterized building blocks: fully connected, convolution, batch norm.

use rand::Rng;

use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const BATCH_NORM_EPS: f64 = 1e-5;

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (1.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Weights uniform in ±√(1/fan_in); zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Euclidean,
            uniform_init(&[out_features, in_features], in_features, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Euclidean,
            Tensor::zeros(&[out_features]),
        );
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    out_channels: usize,
}

impl Conv3d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Euclidean,
            uniform_init(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            ParamKind::Euclidean,
            Tensor::zeros(&[cout]),
        );
        Self {
            weight,
            bias: Some(bias),
            out_channels: cout,
        }
    }

    /// Convolution without a bias, for use directly before batch norm
    /// (which would cancel the bias and leave it without gradient).
    pub fn without_bias(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = cin * kernel * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            ParamKind::Euclidean,
            uniform_init(&[cout, cin, kernel, kernel, kernel], fan_in, rng),
        );
        Self {
            weight,
            bias: None,
            out_channels: cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = match self.bias {
            Some(id) => g.param(store, id),
            None => g.constant(Tensor::zeros(&[self.out_channels])),
        };
        g.conv3d(x, w, b)
    }
}

/// Batch norm with running statistics stored as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm3d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                ParamKind::Euclidean,
                Tensor::ones(&[channels]),
            ),
            beta: store.add(
                format!("{name}.beta"),
                ParamKind::Euclidean,
                Tensor::zeros(&[channels]),
            ),
            running_mean: store.add(
                format!("{name}.running_mean"),
                ParamKind::Buffer,
                Tensor::zeros(&[channels]),
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                ParamKind::Buffer,
                Tensor::ones(&[channels]),
            ),
        }
    }

    /// In training mode, returns the pending running-stat update; apply it
    /// with [`BatchNormUpdate::apply`] once the step is committed.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        training: bool,
    ) -> Result<(Var, Option<BatchNormUpdate>)> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        if training {
            let (y, stats) = g.batch_norm(
                x,
                gamma,
                beta,
                BatchNormMode::Train {
                    eps: BATCH_NORM_EPS,
                },
            )?;
            let (mean, var) = stats.expect("training mode returns stats");
            let s = g.shape(x);
            let count = s[0] * s[2..].iter().product::<usize>();
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            Ok((
                y,
                Some(BatchNormUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    mean,
                    var: var.into_iter().map(|v| v * unbias).collect(),
                }),
            ))
        } else {
            let mean = store.tensor(self.running_mean).data();
            let var = store.tensor(self.running_var).data();
            let (y, _) = g.batch_norm(
                x,
                gamma,
                beta,
                BatchNormMode::Eval {
                    mean,
                    var,
                    eps: BATCH_NORM_EPS,
                },
            )?;
            Ok((y, None))
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormUpdate {
    running_mean: ParamId,
    running_var: ParamId,
    mean: Vec<f64>,
    var: Vec<f64>,
}

impl BatchNormUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = BATCH_NORM_MOMENTUM;
        for (r, v) in store
            .get_mut(self.running_mean)
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&self.mean)
        {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in store
            .get_mut(self.running_var)
            .tensor
            .data_mut()
            .iter_mut()
            .zip(&self.var)
        {
            *r = (1.0 - m) * *r + m * v;
        }
    }
}
