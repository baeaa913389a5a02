//! Skip-connection channel attention: first-order (FOA), raw second-order
//! (SOA) and second-order geometric (SOGA) heads.
//!
//! Every head maps an encoder/decoder feature pair `[B, C, H, W, D]` to an
//! embedding, squeezes it through two fully connected layers and a logistic
//! to get α ∈ (0, 1)^{B×C}, then returns F̂ = F_e ⊙ α.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::spd::{self, BiMapLayer, DEFAULT_REEIG_EPSILON};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    None,
    Foa,
    Soa,
    Soga,
}

impl AttentionVariant {
    pub const ALL: [AttentionVariant; 4] = [Self::None, Self::Foa, Self::Soa, Self::Soga];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Foa => "foa",
            Self::Soa => "soa",
            Self::Soga => "soga",
        }
    }

    pub fn needs_even_channels(self) -> bool {
        matches!(self, Self::Soa | Self::Soga)
    }
}

impl std::str::FromStr for AttentionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Self::None),
            "foa" => Ok(Self::Foa),
            "soa" => Ok(Self::Soa),
            "soga" => Ok(Self::Soga),
            _ => Err(Error::Config(format!("unknown attention variant {s:?}"))),
        }
    }
}

impl std::fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial fc1 bias when the inner ReLU is enabled.
pub const FC1_RELU_BIAS_INIT: f64 = 1.0;

/// Head settings shared by every level; channel counts come from the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub variant: AttentionVariant,
    pub reduction_ratio: usize,
    pub epsilon: f64,
    /// ReLU between the two fully connected layers.
    pub inner_relu: bool,
    /// √2 scaling of off-diagonal entries when vectorizing symmetric matrices.
    pub isometric_vec: bool,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            variant: AttentionVariant::Soga,
            reduction_ratio: 4,
            epsilon: DEFAULT_REEIG_EPSILON,
            inner_relu: true,
            isometric_vec: true,
        }
    }
}

impl AttentionConfig {
    pub fn with_variant(variant: AttentionVariant) -> Self {
        Self {
            variant,
            ..Self::default()
        }
    }

    /// Turns off the choices the original formulation does not state.
    pub fn strict_paper(mut self) -> Self {
        self.inner_relu = false;
        self.isometric_vec = false;
        self
    }

    pub fn validate_for(&self, channels: usize) -> Result<()> {
        if self.variant == AttentionVariant::None {
            return Ok(());
        }
        if self.variant.needs_even_channels() && !channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "{} needs an even channel count, got {channels}",
                self.variant
            )));
        }
        if self.reduction_ratio == 0 || !channels.is_multiple_of(self.reduction_ratio) {
            return Err(Error::Config(format!(
                "reduction ratio {} must divide channel count {channels}",
                self.reduction_ratio
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "ReEig epsilon must be non-negative, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    /// Width of the fused embedding for `channels` input channels.
    pub fn embedding_dim(&self, channels: usize) -> usize {
        match self.variant {
            AttentionVariant::None => 0,
            AttentionVariant::Foa => 2 * channels,
            AttentionVariant::Soa => channels * (channels + 1),
            AttentionVariant::Soga => {
                let h = channels / 2;
                h * (h + 1)
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Branches {
    Foa,
    Soa,
    Soga {
        encoder: BiMapLayer,
        decoder: BiMapLayer,
    },
}

/// One attention head attached to a skip connection.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub channels: usize,
    config: AttentionConfig,
    branches: Branches,
    pub fc1: Linear,
    pub fc2: Linear,
}

pub struct AttentionOutput {
    pub recalibrated: Var,
    pub alpha: Var,
    pub embedding: Var,
}

/// Per-call switches used by tests and diagnostics.
#[derive(Debug, Default)]
pub struct HeadOptions<'a> {
    /// Replace α by ones (the head is still evaluated).
    pub force_unit_alpha: bool,
    /// Collects post-ReEig descriptors `[B, C/2, C/2]` of both branches.
    pub descriptor_trace: Option<&'a mut Vec<Tensor>>,
}

impl AttentionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        config: &AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate_for(channels)?;
        let branches = match config.variant {
            AttentionVariant::None => {
                return Err(Error::Config(
                    "no head is built for attention variant none".into(),
                ));
            }
            AttentionVariant::Foa => Branches::Foa,
            AttentionVariant::Soa => Branches::Soa,
            AttentionVariant::Soga => Branches::Soga {
                encoder: BiMapLayer::new(
                    store,
                    format!("{name}.phi_e.bimap"),
                    channels,
                    channels / 2,
                    rng,
                )?,
                decoder: BiMapLayer::new(
                    store,
                    format!("{name}.phi_d.bimap"),
                    channels,
                    channels / 2,
                    rng,
                )?,
            },
        };
        let hidden = channels / config.reduction_ratio;
        let fc1 = Linear::new(
            store,
            &format!("{name}.fc1"),
            config.embedding_dim(channels),
            hidden,
            rng,
        );
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, rng);
        if config.inner_relu {
            // The bottleneck is only C/r wide; start every unit active so none is dead at init.
            store
                .get_mut(fc1.bias)
                .tensor
                .data_mut()
                .fill(FC1_RELU_BIAS_INIT);
        }
        Ok(Self {
            channels,
            config: config.clone(),
            branches,
            fc1,
            fc2,
        })
    }

    pub fn config(&self) -> &AttentionConfig {
        &self.config
    }

    pub fn bimap_layers(&self) -> Vec<&BiMapLayer> {
        match &self.branches {
            Branches::Soga { encoder, decoder } => vec![encoder, decoder],
            _ => vec![],
        }
    }

    fn check_inputs(&self, g: &Graph, fe: Var, fd: Var) -> Result<()> {
        let (se, sd) = (g.shape(fe), g.shape(fd));
        if se != sd {
            return Err(Error::Shape(format!(
                "encoder features {se:?} vs decoder features {sd:?}"
            )));
        }
        if se.len() != 5 || se[1] != self.channels {
            return Err(Error::Shape(format!(
                "head for {} channels got features {se:?}",
                self.channels
            )));
        }
        Ok(())
    }

    /// The fused embedding eℓ, `[B, embedding_dim]`.
    pub fn embedding(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fe: Var,
        fd: Var,
        trace: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        self.check_inputs(g, fe, fd)?;
        let iso = self.config.isometric_vec;
        let (e, d) = match &self.branches {
            Branches::Foa => (global_average_pool(g, fe)?, global_average_pool(g, fd)?),
            Branches::Soa => {
                let xe = spd::spd_pool(g, fe)?;
                let xd = spd::spd_pool(g, fd)?;
                (
                    spd::upper_triangle_vec(g, xe, iso)?,
                    spd::upper_triangle_vec(g, xd, iso)?,
                )
            }
            Branches::Soga { encoder, decoder } => (
                self.riemannian_branch(g, store, encoder, fe, trace)?,
                self.riemannian_branch(g, store, decoder, fd, trace)?,
            ),
        };
        g.concat(&[e, d], 1)
    }

    /// SPDPool → BiRe → LogEig → upper-triangle vector.
    fn riemannian_branch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        bimap: &BiMapLayer,
        f: Var,
        trace: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let x0 = spd::spd_pool(g, f)?;
        let a = g.param(store, bimap.weight);
        let x1 = spd::bire_block(g, x0, a, self.config.epsilon)?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(g.value(x1).clone());
        }
        let x2 = spd::logeig(g, x1)?;
        spd::upper_triangle_vec(g, x2, self.config.isometric_vec)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        fe: Var,
        fd: Var,
        mut opts: HeadOptions<'_>,
    ) -> Result<AttentionOutput> {
        let embedding = self.embedding(g, store, fe, fd, &mut opts.descriptor_trace)?;
        let mut h = self.fc1.forward(g, store, embedding)?;
        if self.config.inner_relu {
            h = g.relu(h);
        }
        let logits = self.fc2.forward(g, store, h)?;
        let mut alpha = g.sigmoid(logits);
        if opts.force_unit_alpha {
            let shape = g.shape(alpha).to_vec();
            alpha = g.constant(Tensor::ones(&shape));
        }
        let recalibrated = g.channel_scale(fe, alpha)?;
        Ok(AttentionOutput {
            recalibrated,
            alpha,
            embedding,
        })
    }
}

/// Mean over all voxels of each channel: `[B, C, ...]` → `[B, C]`.
pub fn global_average_pool(g: &mut Graph, f: Var) -> Result<Var> {
    let s = g.shape(f).to_vec();
    if s.len() < 3 {
        return Err(Error::Shape(format!(
            "global_average_pool expects [B, C, spatial...], got {s:?}"
        )));
    }
    let n = s[2..].iter().product();
    let r = g.reshape(f, vec![s[0], s[1], n])?;
    g.mean_last_axis(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: &[usize], rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn head(variant: AttentionVariant, c: usize, seed: u64) -> (ParamStore, AttentionHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = AttentionHead::new(
            &mut store,
            "head",
            c,
            &AttentionConfig::with_variant(variant),
            &mut rng,
        )
        .unwrap();
        (store, h)
    }

    fn zero_fc2(store: &mut ParamStore, h: &AttentionHead) {
        store.get_mut(h.fc2.weight).tensor.data_mut().fill(0.0);
        store.get_mut(h.fc2.bias).tensor.data_mut().fill(0.0);
    }

    fn eval(
        store: &ParamStore,
        h: &AttentionHead,
        fe: &Tensor,
        fd: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let mut g = Graph::new();
        let e = g.constant(fe.clone());
        let d = g.constant(fd.clone());
        let out = h
            .forward(&mut g, store, e, d, HeadOptions::default())
            .unwrap();
        (
            g.value(out.recalibrated).clone(),
            g.value(out.alpha).clone(),
            g.value(out.embedding).clone(),
        )
    }

    #[test]
    fn embedding_widths() {
        let cfg = AttentionConfig::default();
        assert_eq!(cfg.embedding_dim(8), 4 * 5);
        assert_eq!(
            AttentionConfig::with_variant(AttentionVariant::Soa).embedding_dim(8),
            72
        );
        assert_eq!(
            AttentionConfig::with_variant(AttentionVariant::Foa).embedding_dim(8),
            16
        );
    }

    #[test]
    fn config_validation() {
        let cfg = AttentionConfig::default();
        assert!(cfg.validate_for(8).is_ok());
        assert!(cfg.validate_for(6).is_err()); // r = 4 does not divide 6
        let odd = AttentionConfig {
            reduction_ratio: 1,
            ..AttentionConfig::default()
        };
        assert!(odd.validate_for(5).is_err());
        let foa = AttentionConfig {
            reduction_ratio: 1,
            ..AttentionConfig::with_variant(AttentionVariant::Foa)
        };
        assert!(foa.validate_for(5).is_ok());
    }

    #[test]
    fn zero_fc2_gives_half_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fe = uniform(&[2, 8, 2, 2, 2], &mut rng);
        let fd = uniform(&[2, 8, 2, 2, 2], &mut rng);
        for v in [
            AttentionVariant::Foa,
            AttentionVariant::Soa,
            AttentionVariant::Soga,
        ] {
            let (mut store, h) = head(v, 8, 3);
            zero_fc2(&mut store, &h);
            let (fhat, alpha, _) = eval(&store, &h, &fe, &fd);
            assert!(alpha.data().iter().all(|&a| a == 0.5), "{v}");
            for (a, b) in fhat.data().iter().zip(fe.data()) {
                assert_eq!(*a, b / 2.0);
            }
        }
    }

    #[test]
    fn soga_symmetric_branches_give_equal_halves() {
        let (mut store, h) = head(AttentionVariant::Soga, 8, 5);
        let layers = h.bimap_layers();
        let w = store.tensor(layers[0].weight).clone();
        store.get_mut(layers[1].weight).tensor = w;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = uniform(&[1, 8, 3, 3, 2], &mut rng);
        let (_, _, emb) = eval(&store, &h, &f, &f);
        let half = emb.len() / 2;
        assert_eq!(&emb.data()[..half], &emb.data()[half..]);
    }

    #[test]
    fn foa_constant_inputs_and_gap_oracle() {
        let (store, h) = head(AttentionVariant::Foa, 4, 7);
        let fe = Tensor::full(&[1, 4, 2, 2, 2], 1.5);
        let fd = Tensor::full(&[1, 4, 2, 2, 2], -2.0);
        let (_, _, emb) = eval(&store, &h, &fe, &fd);
        assert_eq!(emb.data(), &[1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fe = uniform(&[2, 4, 3, 2, 2], &mut rng);
        let fd = uniform(&[2, 4, 3, 2, 2], &mut rng);
        let (_, _, emb) = eval(&store, &h, &fe, &fd);
        let n = 12;
        for b in 0..2 {
            for (k, src) in [&fe, &fd].into_iter().enumerate() {
                for c in 0..4 {
                    let mean: f64 = src.data()[(b * 4 + c) * n..(b * 4 + c + 1) * n]
                        .iter()
                        .sum::<f64>()
                        / n as f64;
                    assert!((emb.data()[b * 8 + k * 4 + c] - mean).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn soa_zero_features_give_jitter_diagonal() {
        let (store, h) = head(AttentionVariant::Soa, 4, 9);
        let z = Tensor::zeros(&[1, 4, 2, 2, 2]);
        let (_, _, emb) = eval(&store, &h, &z, &z);
        let gamma = 1e-5 * 1e-12;
        let diag = [0usize, 4, 7, 9];
        for (k, &v) in emb.data()[..10].iter().enumerate() {
            assert_eq!(v, if diag.contains(&k) { gamma } else { 0.0 });
        }
        assert_eq!(&emb.data()[..10], &emb.data()[10..]);
    }

    #[test]
    fn soa_embedding_matches_composed_oracle() {
        let (store, h) = head(AttentionVariant::Soa, 4, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fe = uniform(&[1, 4, 2, 3, 2], &mut rng);
        let fd = uniform(&[1, 4, 2, 3, 2], &mut rng);
        let (_, _, emb) = eval(&store, &h, &fe, &fd);
        let n = 12;
        let mut expected = Vec::new();
        for f in [&fe, &fd] {
            let mut gram = Matrix::zeros(4, 4);
            for i in 0..4 {
                for j in 0..4 {
                    let s: f64 = (0..n)
                        .map(|k| f.data()[i * n + k] * f.data()[j * n + k])
                        .sum();
                    gram.set(i, j, s / n as f64);
                }
            }
            let gamma = 1e-5 * gram.trace() / 4.0;
            for i in 0..4 {
                for j in i..4 {
                    let v = gram.get(i, j) + if i == j { gamma } else { 0.0 };
                    expected.push(if i == j {
                        v
                    } else {
                        v * std::f64::consts::SQRT_2
                    });
                }
            }
        }
        for (a, b) in emb.data().iter().zip(&expected) {
            assert!((a - b).abs() <= 1e-14);
        }
    }

    #[test]
    fn alpha_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (store, h) = head(AttentionVariant::Soga, 8, 13);
        for scale in [1e-3, 1.0, 30.0] {
            let mut fe = uniform(&[2, 8, 2, 2, 2], &mut rng);
            fe.data_mut().iter_mut().for_each(|v| *v *= scale);
            let fd = uniform(&[2, 8, 2, 2, 2], &mut rng);
            let (_, alpha, _) = eval(&store, &h, &fe, &fd);
            assert!(alpha.data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn soga_channel_permutation_equivariance() {
        let c = 8;
        let perm = [3usize, 0, 7, 5, 1, 6, 2, 4];
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fe = uniform(&[1, c, 2, 2, 2], &mut rng);
        let fd = uniform(&[1, c, 2, 2, 2], &mut rng);
        let (store, h) = head(AttentionVariant::Soga, c, 15);
        let (_, alpha, _) = eval(&store, &h, &fe, &fd);

        let permute_channels = |t: &Tensor| {
            let n = 8;
            let mut out = t.clone();
            for (new, &old) in perm.iter().enumerate() {
                out.data_mut()[new * n..(new + 1) * n]
                    .copy_from_slice(&t.data()[old * n..(old + 1) * n]);
            }
            out
        };
        let mut pstore = store.clone();
        // BiMap weights: rows follow the input channels.
        for layer in h.bimap_layers() {
            let w = store.tensor(layer.weight);
            let p = layer.output_dim;
            let dst = pstore.get_mut(layer.weight).tensor.data_mut();
            for (new, &old) in perm.iter().enumerate() {
                dst[new * p..(new + 1) * p].copy_from_slice(&w.data()[old * p..(old + 1) * p]);
            }
        }
        // fc2 rows and bias follow the output channels.
        let hidden = h.fc2.in_features;
        let w2 = store.tensor(h.fc2.weight).clone();
        let b2 = store.tensor(h.fc2.bias).clone();
        for (new, &old) in perm.iter().enumerate() {
            pstore.get_mut(h.fc2.weight).tensor.data_mut()[new * hidden..(new + 1) * hidden]
                .copy_from_slice(&w2.data()[old * hidden..(old + 1) * hidden]);
            pstore.get_mut(h.fc2.bias).tensor.data_mut()[new] = b2.data()[old];
        }
        let (_, palpha, _) = eval(&pstore, &h, &permute_channels(&fe), &permute_channels(&fd));
        for (new, &old) in perm.iter().enumerate() {
            assert!((palpha.data()[new] - alpha.data()[old]).abs() <= 1e-12);
        }
    }

    #[test]
    fn forced_unit_alpha_is_identity() {
        let (store, h) = head(AttentionVariant::Soga, 8, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let fe = uniform(&[1, 8, 2, 2, 2], &mut rng);
        let mut g = Graph::new();
        let e = g.constant(fe.clone());
        let d = g.constant(fe.clone());
        let opts = HeadOptions {
            force_unit_alpha: true,
            ..Default::default()
        };
        let out = h.forward(&mut g, &store, e, d, opts).unwrap();
        assert_eq!(g.value(out.recalibrated).data(), fe.data());
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (store, h) = head(AttentionVariant::Soga, 8, 18);
        let mut g = Graph::new();
        let e = g.constant(Tensor::zeros(&[1, 8, 2, 2, 2]));
        let d = g.constant(Tensor::zeros(&[1, 4, 2, 2, 2]));
        assert!(h
            .forward(&mut g, &store, e, d, HeadOptions::default())
            .is_err());
    }
}
