//! Central finite-difference verification of backward passes.
//!
//! [`check_gradients`] compares every analytic gradient entry of a scalar
//! function against (f(x + h) − f(x − h)) / 2h. [`default_suite`] runs it over
//! every differentiable operation and the three attention heads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionHead, AttentionVariant, HeadOptions};
use crate::autodiff::{BatchNormMode, Graph, Var};
use crate::error::Result;
use crate::linalg::{qr_orthonormalize, Matrix};
use crate::params::ParamStore;
use crate::spd;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries checked per tensor; larger tensors are sampled at even strides.
    pub max_entries: usize,
    /// Negates analytic gradients. Negative control for the harness itself.
    pub flip_sign: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: 64,
            flip_sign: false,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries_checked: usize,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn sample_indices(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        (0..max).map(|k| k * len / max).collect()
    }
}

/// Checks `build` against finite differences.
///
/// `build` receives one graph variable per entry of `inputs` (leaves keep the
/// tensors' `requires_grad`) and may read trainable parameters from `store`.
/// Gradients are checked for every input with `requires_grad` and every
/// non-buffer parameter.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Tensor],
    store: &ParamStore,
    build: F,
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor], store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, store, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, store, &vars)?;
    g.backward(out)?;
    let mut grads_store = store.clone();
    grads_store.zero_grads();
    g.accumulate_param_grads(&mut grads_store);
    let sign = if opts.flip_sign { -1.0 } else { 1.0 };

    let mut worst = 0.0f64;
    let mut checked = 0;
    let h = opts.step;
    let mut work_inputs = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        if !t.requires_grad {
            continue;
        }
        let zeros = vec![0.0; t.len()];
        let analytic = g.grad(vars[k]).unwrap_or(&zeros).to_vec();
        for i in sample_indices(t.len(), opts.max_entries) {
            let orig = t.data()[i];
            work_inputs[k].data_mut()[i] = orig + h;
            let fp = eval(&work_inputs, store)?;
            work_inputs[k].data_mut()[i] = orig - h;
            let fm = eval(&work_inputs, store)?;
            work_inputs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(sign * analytic[i], numeric));
            checked += 1;
        }
    }

    let mut work_store = store.clone();
    for (id, p) in store.trainable() {
        let zeros = vec![0.0; p.tensor.len()];
        let analytic = grads_store.tensor(id).grad.clone().unwrap_or(zeros);
        for i in sample_indices(p.tensor.len(), opts.max_entries) {
            let orig = p.tensor.data()[i];
            work_store.get_mut(id).tensor.data_mut()[i] = orig + h;
            let fp = eval(inputs, &work_store)?;
            work_store.get_mut(id).tensor.data_mut()[i] = orig - h;
            let fm = eval(inputs, &work_store)?;
            work_store.get_mut(id).tensor.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(sign * analytic[i], numeric));
            checked += 1;
        }
    }

    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        entries_checked: checked,
        passed: worst <= opts.tolerance && worst.is_finite(),
    })
}

/// Collapses an arbitrary output to a scalar via a fixed random projection.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let w = random_tensor(&shape, seed ^ 0x9e37_79b9_7f4a_7c15);
    let wv = g.constant(w);
    let m = g.mul(out, wv)?;
    Ok(g.sum(m))
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    random_tensor(shape, seed).with_grad()
}

/// Random SPD batch with eigenvalues spread in [0.2, 2].
fn spd_batch(b: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(b * d * d);
    for _ in 0..b {
        let q = qr_orthonormalize(&Matrix::from_vec(
            d,
            d,
            (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
        .expect("random square matrix has full rank");
        let diag: Vec<f64> = (0..d).map(|_| rng.gen_range(0.2..2.0)).collect();
        data.extend(
            q.matmul(&Matrix::from_diag(&diag))
                .matmul(&q.transpose())
                .data,
        );
    }
    Tensor::from_parts(vec![b, d, d], data).with_grad()
}

/// Symmetric batch whose spectrum straddles ε = 1e-4 away from it.
fn mixed_spectrum_batch(b: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(b * d * d);
    for _ in 0..b {
        let q = qr_orthonormalize(&Matrix::from_vec(
            d,
            d,
            (0..d * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        ))
        .expect("random square matrix has full rank");
        let diag: Vec<f64> = (0..d)
            .map(|i| {
                if i % 2 == 0 {
                    rng.gen_range(0.1..2.0)
                } else {
                    rng.gen_range(-1.0..-0.01)
                }
            })
            .collect();
        data.extend(
            q.matmul(&Matrix::from_diag(&diag))
                .matmul(&q.transpose())
                .data,
        );
    }
    Tensor::from_parts(vec![b, d, d], data).with_grad()
}

type Case = (
    String,
    Vec<Tensor>,
    ParamStore,
    Box<dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var>>,
);

fn case(
    name: &str,
    inputs: Vec<Tensor>,
    store: ParamStore,
    f: impl Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'static,
) -> Case {
    (name.to_string(), inputs, store, Box::new(f))
}

fn head_case(variant: AttentionVariant, seed: u64) -> Result<Case> {
    let c = 8;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let head = AttentionHead::new(
        &mut store,
        "head",
        c,
        &AttentionConfig::with_variant(variant),
        &mut rng,
    )?;
    // Larger fc biases keep the inner ReLU away from its kink.
    for p in store.iter_mut() {
        if p.name.ends_with("fc1.bias") {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.5);
        }
    }
    let shape = [1, c, 4, 4, 4];
    let name = format!("{variant}_head");
    Ok(case(
        &name,
        vec![input(&shape, seed + 1), input(&shape, seed + 2)],
        store,
        move |g, s, v| {
            let out = head.forward(g, s, v[0], v[1], HeadOptions::default())?;
            Ok(g.sum(out.recalibrated))
        },
    ))
}

fn cases(seed: u64) -> Result<Vec<Case>> {
    let s = seed.wrapping_mul(1000);
    let mut out = vec![
        case(
            "add",
            vec![input(&[3, 4], s + 1), input(&[3, 4], s + 2)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "sub",
            vec![input(&[3, 4], s + 1), input(&[3, 4], s + 2)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "mul",
            vec![input(&[3, 4], s + 3), input(&[3, 4], s + 4)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "relu",
            vec![input(&[5, 6], s + 5)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.relu(v[0]);
                project(g, y, s)
            },
        ),
        case(
            "sigmoid",
            vec![input(&[5, 6], s + 6)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.sigmoid(v[0]);
                project(g, y, s)
            },
        ),
        case(
            "concat",
            vec![input(&[2, 3, 2], s + 7), input(&[2, 1, 2], s + 8)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                project(g, y, s)
            },
        ),
        case(
            "reshape_transpose",
            vec![input(&[2, 3, 4], s + 9)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.reshape(v[0], vec![2, 4, 3])?;
                let y = g.transpose(y)?;
                project(g, y, s)
            },
        ),
        case(
            "batch_matmul",
            vec![input(&[2, 3, 4], s + 10), input(&[2, 4, 2], s + 11)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "broadcast_matmul",
            vec![input(&[3, 4], s + 12), input(&[2, 4, 2], s + 13)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "reduce_mean_sum",
            vec![input(&[2, 3, 5], s + 14)],
            ParamStore::new(),
            move |g, _, v| {
                let m = g.mean_last_axis(v[0])?;
                let p = project(g, m, s)?;
                let q = g.mean(v[0]);
                let q = g.scale(q, 3.0);
                g.add(p, q)
            },
        ),
        case(
            "channel_scale",
            vec![input(&[2, 3, 2, 2, 2], s + 15), input(&[2, 3], s + 16)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.channel_scale(v[0], v[1])?;
                project(g, y, s)
            },
        ),
        case(
            "linear",
            vec![
                input(&[3, 5], s + 17),
                input(&[2, 5], s + 18),
                input(&[2], s + 19),
            ],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                project(g, y, s)
            },
        ),
        case(
            "conv3d",
            vec![
                input(&[1, 2, 3, 4, 3], s + 20),
                input(&[3, 2, 3, 3, 3], s + 21),
                input(&[3], s + 22),
            ],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.conv3d(v[0], v[1], v[2])?;
                project(g, y, s)
            },
        ),
        case(
            "conv3d_1x1x1",
            vec![
                input(&[2, 3, 2, 2, 2], s + 23),
                input(&[2, 3, 1, 1, 1], s + 24),
                input(&[2], s + 25),
            ],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.conv3d(v[0], v[1], v[2])?;
                project(g, y, s)
            },
        ),
        case(
            "maxpool3d",
            vec![input(&[1, 2, 4, 4, 2], s + 26)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.maxpool3d(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "upsample_nearest3d",
            vec![input(&[1, 2, 2, 2, 2], s + 27)],
            ParamStore::new(),
            move |g, _, v| {
                let y = g.upsample_nearest3d(v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "batch_norm_train",
            vec![
                input(&[2, 3, 2, 2, 2], s + 28),
                input(&[3], s + 29),
                input(&[3], s + 30),
            ],
            ParamStore::new(),
            move |g, _, v| {
                let (y, _) = g.batch_norm(v[0], v[1], v[2], BatchNormMode::Train { eps: 1e-5 })?;
                project(g, y, s)
            },
        ),
        case(
            "batch_norm_eval",
            vec![
                input(&[2, 3, 2, 2, 2], s + 31),
                input(&[3], s + 32),
                input(&[3], s + 33),
            ],
            ParamStore::new(),
            move |g, _, v| {
                let mean = [0.1, -0.2, 0.3];
                let var = [0.5, 1.5, 2.0];
                let (y, _) = g.batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    BatchNormMode::Eval {
                        mean: &mean,
                        var: &var,
                        eps: 1e-5,
                    },
                )?;
                project(g, y, s)
            },
        ),
        case(
            "spd_pool",
            vec![input(&[2, 4, 3, 3, 3], s + 34)],
            ParamStore::new(),
            move |g, _, v| {
                let y = spd::spd_pool(g, v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "reeig",
            vec![mixed_spectrum_batch(2, 6, s + 35)],
            ParamStore::new(),
            move |g, _, v| {
                let y = spd::reeig(g, v[0], 1e-4)?;
                project(g, y, s)
            },
        ),
        case(
            "logeig",
            vec![spd_batch(2, 6, s + 36)],
            ParamStore::new(),
            move |g, _, v| {
                let y = spd::logeig(g, v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "expeig",
            vec![spd_batch(1, 5, s + 37)],
            ParamStore::new(),
            move |g, _, v| {
                let y = spd::expeig(g, v[0])?;
                project(g, y, s)
            },
        ),
        case(
            "upper_triangle_vec",
            vec![input(&[2, 4, 4], s + 38)],
            ParamStore::new(),
            move |g, _, v| {
                let y = spd::upper_triangle_vec(g, v[0], true)?;
                project(g, y, s)
            },
        ),
        case(
            "dice_bce_loss",
            vec![probabilities(&[2, 1, 2, 2, 2], s + 39)],
            ParamStore::new(),
            move |g, _, v| {
                let target = binary(&[2, 1, 2, 2, 2], s + 40);
                g.dice_bce(v[0], &target, 1.0)
            },
        ),
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(s + 41);
    let mut store = ParamStore::new();
    let layer = spd::BiMapLayer::new(&mut store, "bimap", 6, 3, &mut rng)?;
    out.push(case(
        "bimap",
        vec![spd_batch(2, 6, s + 42)],
        store,
        move |g, st, v| {
            let y = layer.forward(g, st, v[0])?;
            project(g, y, s)
        },
    ));

    let mut rng = ChaCha8Rng::seed_from_u64(s + 43);
    let mut store = ParamStore::new();
    let layer = spd::BiMapLayer::new(&mut store, "bire", 8, 4, &mut rng)?;
    out.push(case(
        "bire_block",
        vec![spd_batch(2, 8, s + 44)],
        store,
        move |g, st, v| {
            let a = g.param(st, layer.weight);
            let y = spd::bire_block(g, v[0], a, 1e-4)?;
            project(g, y, s)
        },
    ));

    for variant in [
        AttentionVariant::Foa,
        AttentionVariant::Soa,
        AttentionVariant::Soga,
    ] {
        out.push(head_case(variant, s + 50)?);
    }
    Ok(out)
}

fn probabilities(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(0.05..0.95)).collect(),
    )
    .with_grad()
}

fn binary(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_parts(
        shape.to_vec(),
        (0..n)
            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
            .collect(),
    )
}

/// Finite-difference checks over every differentiable operation and head.
pub fn default_suite(seed: u64, opts: &CheckOptions) -> Result<Vec<GradCheckReport>> {
    cases(seed)?
        .into_iter()
        .map(|(name, inputs, store, f)| check_gradients(&name, &inputs, &store, f, opts))
        .collect()
}
