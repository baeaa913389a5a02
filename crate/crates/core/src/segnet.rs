//! Volumetric encoder-decoder segmentation network with optional skip
//! attention, its loss, the training loop, and checkpoint IO.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionHead, AttentionVariant, HeadOptions};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm3d, BatchNormUpdate, Conv3d};
use crate::optim::Optimizer;
use crate::params::{ParamKind, ParamStore};
use crate::seeds;
use crate::spd::BiMapLayer;
use crate::tensor::Tensor;

/// Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpsampleMode {
    #[default]
    Nearest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub attention: AttentionConfig,
    #[serde(default)]
    pub upsample: UpsampleMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            channels: vec![8, 16, 32],
            in_channels: 3,
            out_channels: 1,
            attention: AttentionConfig::default(),
            upsample: UpsampleMode::Nearest,
        }
    }
}

impl UNetConfig {
    /// Five levels, 32 to 512 channels.
    pub fn full_scale() -> Self {
        Self {
            levels: 5,
            channels: vec![32, 64, 128, 256, 512],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channels.len() != self.levels {
            return Err(Error::Config(format!(
                "{} levels need {} channel entries, got {:?}",
                self.levels, self.levels, self.channels
            )));
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            return Err(Error::Config(format!(
                "channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "in/out channel counts must be positive".into(),
            ));
        }
        for &c in &self.channels[..self.levels - 1] {
            self.attention.validate_for(c)?;
        }
        Ok(())
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    convs: [Conv3d; 2],
    norms: [BatchNorm3d; 2],
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        Self {
            convs: [
                Conv3d::without_bias(store, &format!("{name}.conv1"), cin, cout, 3, rng),
                Conv3d::without_bias(store, &format!("{name}.conv2"), cout, cout, 3, rng),
            ],
            norms: [
                BatchNorm3d::new(store, &format!("{name}.bn1"), cout),
                BatchNorm3d::new(store, &format!("{name}.bn2"), cout),
            ],
        }
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
        training: bool,
        updates: &mut Vec<BatchNormUpdate>,
    ) -> Result<Var> {
        for (conv, bn) in self.convs.iter().zip(&self.norms) {
            let y = conv.forward(g, store, x)?;
            let (y, upd) = bn.forward(g, store, y, training)?;
            updates.extend(upd);
            x = g.relu(y);
        }
        Ok(x)
    }
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up_conv: Conv3d,
    head: Option<AttentionHead>,
    block: ConvBlock,
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: UNetConfig,
    pub params: ParamStore,
    encoder: Vec<ConvBlock>,
    /// Deepest level first.
    decoder: Vec<DecoderLevel>,
    head_out: Conv3d,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    /// Use batch statistics and return running-stat updates.
    pub training: bool,
    /// Evaluate attention heads but recalibrate with α = 1.
    pub force_unit_alpha: bool,
    /// Collects every post-ReEig descriptor of every SOGA head.
    pub descriptor_trace: Option<&'a mut Vec<Tensor>>,
}

pub struct ForwardOutput {
    pub prob: Var,
    pub bn_updates: Vec<BatchNormUpdate>,
    /// Per decoder level, shallowest first; empty without attention.
    pub alphas: Vec<Var>,
}

impl SegModel {
    /// Backbone and attention weights come from separate seeded streams, so
    /// the backbone of a model is the same for every attention variant.
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut brng = seeds::rng(seed, seeds::STREAM_BACKBONE, 0);
        let mut arng = seeds::rng(seed, seeds::STREAM_ATTENTION, 0);
        let mut store = ParamStore::new();
        let ch = &config.channels;
        let mut encoder = Vec::new();
        for (l, &c) in ch.iter().enumerate() {
            let cin = if l == 0 {
                config.in_channels
            } else {
                ch[l - 1]
            };
            encoder.push(ConvBlock::new(
                &mut store,
                &format!("enc{l}"),
                cin,
                c,
                &mut brng,
            ));
        }
        let mut decoder = Vec::new();
        for l in (0..config.levels - 1).rev() {
            let up_conv = Conv3d::new(
                &mut store,
                &format!("dec{l}.up"),
                ch[l + 1],
                ch[l],
                3,
                &mut brng,
            );
            let head = match config.attention.variant {
                AttentionVariant::None => None,
                _ => Some(AttentionHead::new(
                    &mut store,
                    &format!("dec{l}.att"),
                    ch[l],
                    &config.attention,
                    &mut arng,
                )?),
            };
            let block = ConvBlock::new(
                &mut store,
                &format!("dec{l}.block"),
                2 * ch[l],
                ch[l],
                &mut brng,
            );
            decoder.push(DecoderLevel {
                up_conv,
                head,
                block,
            });
        }
        let head_out = Conv3d::new(&mut store, "out", ch[0], config.out_channels, 1, &mut brng);
        Ok(Self {
            config,
            params: store,
            encoder,
            decoder,
            head_out,
        })
    }

    pub fn bimap_layers(&self) -> Vec<&BiMapLayer> {
        self.decoder
            .iter()
            .filter_map(|d| d.head.as_ref())
            .flat_map(|h| h.bimap_layers())
            .collect()
    }

    pub fn max_stiefel_residual(&self) -> f64 {
        self.bimap_layers()
            .iter()
            .map(|b| b.orthonormality_residual(&self.params))
            .fold(0.0, f64::max)
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let div = self.config.spatial_divisor();
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::Shape(format!(
                "expected [B, {}, H, W, D] input, got {shape:?}",
                self.config.in_channels
            )));
        }
        if shape[2..].iter().any(|&s| s == 0 || s % div != 0) {
            return Err(Error::Shape(format!(
                "spatial dims {:?} must be divisible by {div}",
                &shape[2..]
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        input: Var,
        mut opts: ForwardOptions<'_>,
    ) -> Result<ForwardOutput> {
        self.check_input(g.shape(input))?;
        let store = &self.params;
        let mut updates = Vec::new();
        let mut skips = Vec::new();
        let mut x = input;
        for (l, block) in self.encoder.iter().enumerate() {
            if l > 0 {
                x = g.maxpool3d(x)?;
            }
            x = block.forward(g, store, x, opts.training, &mut updates)?;
            skips.push(x);
        }
        let mut alphas = Vec::new();
        for (dl, l) in self.decoder.iter().zip((0..self.config.levels - 1).rev()) {
            let up = g.upsample_nearest3d(x)?;
            let fd = dl.up_conv.forward(g, store, up)?;
            let fe = skips[l];
            let skip = match &dl.head {
                None => fe,
                Some(head) => {
                    let out = head.forward(
                        g,
                        store,
                        fe,
                        fd,
                        HeadOptions {
                            force_unit_alpha: opts.force_unit_alpha,
                            descriptor_trace: opts.descriptor_trace.as_deref_mut(),
                        },
                    )?;
                    alphas.push(out.alpha);
                    out.recalibrated
                }
            };
            let cat = g.concat(&[skip, fd], 1)?;
            x = dl
                .block
                .forward(g, store, cat, opts.training, &mut updates)?;
        }
        alphas.reverse();
        let logits = self.head_out.forward(g, store, x)?;
        Ok(ForwardOutput {
            prob: g.sigmoid(logits),
            bn_updates: updates,
            alphas,
        })
    }

    /// Inference with running statistics; returns `[B, out, H, W, D]`.
    pub fn predict(&self, volume: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(volume.clone());
        let out = self.forward(&mut g, x, ForwardOptions::default())?;
        Ok(g.value(out.prob).clone())
    }
}

/// Dice + mean binary cross-entropy, recorded on the graph.
pub fn dice_bce_loss(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Domain("dice_bce_loss: target must be binary".into()));
    }
    g.dice_bce(pred, target, DICE_SMOOTH)
}

/// One training image: volume `[C, H, W, D]` and binary mask `[H, W, D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub volume: Tensor,
    pub mask: Tensor,
}

impl Sample {
    pub fn new(volume: Tensor, mask: Tensor) -> Result<Self> {
        if volume.ndim() != 4 || mask.ndim() != 3 || volume.shape()[1..] != *mask.shape() {
            return Err(Error::Shape(format!(
                "sample volume {:?} and mask {:?} disagree",
                volume.shape(),
                mask.shape()
            )));
        }
        Ok(Self { volume, mask })
    }
}

/// Stacks samples into `[B, C, H, W, D]` and `[B, 1, H, W, D]`.
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Shape("empty batch".into()))?;
    let vs = first.volume.shape().to_vec();
    let mut v = Vec::with_capacity(samples.len() * first.volume.len());
    let mut m = Vec::with_capacity(samples.len() * first.mask.len());
    for s in samples {
        if s.volume.shape() != vs.as_slice() {
            return Err(Error::Shape(format!(
                "batch mixes shapes {:?} and {vs:?}",
                s.volume.shape()
            )));
        }
        v.extend_from_slice(s.volume.data());
        m.extend_from_slice(s.mask.data());
    }
    let b = samples.len();
    let mut vshape = vec![b];
    vshape.extend_from_slice(&vs);
    let mut mshape = vec![b, 1];
    mshape.extend_from_slice(&vs[1..]);
    Ok((Tensor::new(vshape, v)?, Tensor::new(mshape, m)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub steps: usize,
    /// Mean over steps of the global gradient L2 norm.
    pub mean_grad_norm: f64,
    pub max_grad_norm: f64,
    pub max_stiefel_residual: f64,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
}

pub fn train_step(
    model: &mut SegModel,
    opt: &mut Optimizer,
    batch: &[&Sample],
) -> Result<StepStats> {
    let (volume, target) = collate(batch)?;
    let mut g = Graph::new();
    let x = g.constant(volume);
    let out = model.forward(
        &mut g,
        x,
        ForwardOptions {
            training: true,
            ..ForwardOptions::default()
        },
    )?;
    let loss = dice_bce_loss(&mut g, out.prob, &target)?;
    let lv = g.value(loss).item();
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!("loss is {lv}")));
    }
    g.backward(loss)?;
    model.params.zero_grads();
    g.accumulate_param_grads(&mut model.params);
    let grad_norm = model
        .params
        .iter()
        .filter_map(|(_, p)| p.tensor.grad.as_ref())
        .flat_map(|gr| gr.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    opt.step(&mut model.params)?;
    for u in &out.bn_updates {
        u.apply(&mut model.params);
    }
    Ok(StepStats {
        loss: lv,
        grad_norm,
    })
}

/// One seeded pass over a shuffled dataset.
pub fn train_epoch(
    model: &mut SegModel,
    opt: &mut Optimizer,
    dataset: &[Sample],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<EpochStats> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut seeds::rng(seed, seeds::STREAM_SHUFFLE, epoch as u64));
    let (mut loss_sum, mut gn_sum, mut gn_max, mut steps) = (0.0, 0.0, 0.0f64, 0);
    for chunk in order.chunks(batch_size) {
        let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
        let s = train_step(model, opt, &batch).map_err(|e| match e {
            Error::NonFinite(m) => {
                Error::NonFinite(format!("epoch {epoch}, batch of samples {chunk:?}: {m}"))
            }
            other => other,
        })?;
        loss_sum += s.loss;
        gn_sum += s.grad_norm;
        gn_max = gn_max.max(s.grad_norm);
        steps += 1;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / steps as f64,
        steps,
        mean_grad_norm: gn_sum / steps as f64,
        max_grad_norm: gn_max,
        max_stiefel_residual: model.max_stiefel_residual(),
    })
}

// ---- checkpoints ---------------------------------------------------------

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPDK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub tool_version: String,
    pub model: UNetConfig,
    /// Caller's full configuration, echoed for provenance.
    pub run_config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<ParamRecord>,
}

pub fn checkpoint_bytes(
    model: &SegModel,
    run_config: serde_json::Value,
    seed: u64,
    epoch: usize,
) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        model: model.config.clone(),
        run_config,
        seed,
        epoch,
        params: model
            .params
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                kind: p.kind,
                shape: p.tensor.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in model.params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &SegModel,
    run_config: serde_json::Value,
    seed: u64,
    epoch: usize,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, run_config, seed, epoch)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parsed checkpoint; parameters in declaration order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f64>>,
}

pub(crate) fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::Corrupt(format!("truncated while reading {what}")));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 14 {
        return Err(Error::Corrupt("checkpoint too short".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let mut buf = body;
    if take(&mut buf, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint file".into()));
    }
    let version = u16::from_le_bytes(take(&mut buf, 2, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().unwrap()) {
        return Err(Error::Corrupt("checkpoint checksum mismatch".into()));
    }
    let hlen = u32::from_le_bytes(take(&mut buf, 4, "header length")?.try_into().unwrap()) as usize;
    let header: CheckpointHeader = serde_json::from_slice(take(&mut buf, hlen, "header")?)?;
    let mut data = Vec::with_capacity(header.params.len());
    for p in &header.params {
        let n: usize = p.shape.iter().product();
        let raw = take(&mut buf, n * 8, &p.name)?;
        data.push(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    if !buf.is_empty() {
        return Err(Error::Corrupt(format!(
            "{} trailing bytes after parameters",
            buf.len()
        )));
    }
    Ok(Checkpoint { header, data })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

impl Checkpoint {
    /// Rebuilds the model described by the header and loads its weights.
    pub fn into_model(self) -> Result<SegModel> {
        let mut model = SegModel::new(self.header.model.clone(), self.header.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies weights into a compatible model; names, kinds and shapes must match.
    pub fn load_into(&self, model: &mut SegModel) -> Result<()> {
        if model.params.len() != self.header.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.header.params.len(),
                model.params.len()
            )));
        }
        for ((rec, data), p) in self
            .header
            .params
            .iter()
            .zip(&self.data)
            .zip(model.params.iter_mut())
        {
            if rec.name != p.name || rec.kind != p.kind || rec.shape != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "checkpoint parameter {} {:?} does not match model parameter {} {:?}",
                    rec.name,
                    rec.shape,
                    p.name,
                    p.tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_tensor;
    use crate::optim::RmspropConfig;

    fn small(variant: AttentionVariant) -> UNetConfig {
        UNetConfig {
            attention: AttentionConfig::with_variant(variant),
            ..UNetConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        assert!(UNetConfig::full_scale().validate().is_ok());
        let mut c = UNetConfig::default();
        c.channels = vec![8, 8, 32];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.channels = vec![8, 16];
        assert!(c.validate().is_err());
        let mut c = small(AttentionVariant::Soga);
        c.channels = vec![6, 12, 32];
        c.attention.reduction_ratio = 2;
        assert!(c.validate().is_ok());
        c.channels = vec![5, 12, 32];
        c.attention.reduction_ratio = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn output_shape_and_range() {
        for v in AttentionVariant::ALL {
            let m = SegModel::new(small(v), 3).unwrap();
            let p = m.predict(&random_tensor(&[1, 3, 8, 8, 4], 1)).unwrap();
            assert_eq!(p.shape(), &[1, 1, 8, 8, 4]);
            assert!(p.data().iter().all(|&x| x > 0.0 && x < 1.0));
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = SegModel::new(small(AttentionVariant::None), 0).unwrap();
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 3, 6, 8, 8])),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            m.predict(&Tensor::zeros(&[1, 2, 8, 8, 8])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_input_gives_constant_output() {
        let m = SegModel::new(small(AttentionVariant::Soga), 5).unwrap();
        let p = m.predict(&Tensor::zeros(&[1, 3, 8, 8, 8])).unwrap();
        let first = p.data()[0];
        assert!(p.data().iter().all(|&v| v == first));
    }

    #[test]
    fn unit_alpha_reduces_to_plain_unet() {
        let x = random_tensor(&[2, 3, 8, 8, 8], 7);
        let base = SegModel::new(small(AttentionVariant::None), 11).unwrap();
        for v in [
            AttentionVariant::Foa,
            AttentionVariant::Soa,
            AttentionVariant::Soga,
        ] {
            let m = SegModel::new(small(v), 11).unwrap();
            for training in [false, true] {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let out = m
                    .forward(
                        &mut g,
                        xv,
                        ForwardOptions {
                            training,
                            force_unit_alpha: true,
                            descriptor_trace: None,
                        },
                    )
                    .unwrap();
                let mut gb = Graph::new();
                let xb = gb.constant(x.clone());
                let ob = base
                    .forward(
                        &mut gb,
                        xb,
                        ForwardOptions {
                            training,
                            ..ForwardOptions::default()
                        },
                    )
                    .unwrap();
                assert_eq!(g.value(out.prob).data(), gb.value(ob.prob).data(), "{v}");
            }
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        for v in AttentionVariant::ALL {
            let m = SegModel::new(small(v), 13).unwrap();
            let mut g = Graph::new();
            let x = g.constant(random_tensor(&[2, 3, 8, 8, 8], 17));
            let out = m
                .forward(
                    &mut g,
                    x,
                    ForwardOptions {
                        training: true,
                        ..ForwardOptions::default()
                    },
                )
                .unwrap();
            let target = Tensor::new(
                vec![2, 1, 8, 8, 8],
                random_tensor(&[1024], 19)
                    .data()
                    .iter()
                    .map(|&t| (t > 0.3) as u8 as f64)
                    .collect(),
            )
            .unwrap();
            let loss = dice_bce_loss(&mut g, out.prob, &target).unwrap();
            g.backward(loss).unwrap();
            let mut store = m.params.clone();
            g.accumulate_param_grads(&mut store);
            for (_, p) in store.trainable() {
                let gmax = p
                    .tensor
                    .grad
                    .as_ref()
                    .map_or(0.0, |gr| gr.iter().fold(0.0f64, |a, b| a.max(b.abs())));
                assert!(gmax > 1e-12, "{v}: {} has no gradient", p.name);
            }
        }
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<Sample> {
        (0..n as u64)
            .map(|i| {
                let v = random_tensor(&[3, 8, 8, 8], seed + i);
                let mask = Tensor::new(
                    vec![8, 8, 8],
                    v.data()[..512]
                        .iter()
                        .map(|&x| (x > 0.2) as u8 as f64)
                        .collect(),
                )
                .unwrap();
                Sample::new(v, mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_rates_leave_parameters() {
        let mut m = SegModel::new(small(AttentionVariant::Soga), 1).unwrap();
        let cfg = RmspropConfig {
            lr: 0.0,
            ..RmspropConfig::default()
        };
        let mut opt = Optimizer::new(&m.params, cfg, 0.0);
        let before: Vec<Vec<f64>> = m
            .params
            .trainable()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect();
        train_epoch(&mut m, &mut opt, &toy_samples(2, 0), 2, 0, 0).unwrap();
        let after: Vec<Vec<f64>> = m
            .params
            .trainable()
            .map(|(_, p)| p.tensor.data().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn single_sample_loss_decreases() {
        let mut m = SegModel::new(small(AttentionVariant::Soga), 2).unwrap();
        let cfg = RmspropConfig {
            lr: 1e-3,
            ..RmspropConfig::default()
        };
        let mut opt = Optimizer::new(&m.params, cfg, 0.1);
        let data = toy_samples(1, 40);
        let first = train_epoch(&mut m, &mut opt, &data, 1, 0, 0)
            .unwrap()
            .mean_loss;
        let mut last = first;
        for e in 1..50 {
            let s = train_epoch(&mut m, &mut opt, &data, 1, 0, e).unwrap();
            assert!(s.max_stiefel_residual <= 1e-6);
            last = s.mean_loss;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = SegModel::new(small(AttentionVariant::Soga), 3).unwrap();
            let mut opt = Optimizer::new(&m.params, RmspropConfig::default(), 0.1);
            let data = toy_samples(3, 50);
            let stats: Vec<EpochStats> = (0..2)
                .map(|e| train_epoch(&mut m, &mut opt, &data, 2, 9, e).unwrap())
                .collect();
            (
                stats,
                checkpoint_bytes(&m, serde_json::Value::Null, 3, 2).unwrap(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let mut m = SegModel::new(small(AttentionVariant::None), 3).unwrap();
        let mut opt = Optimizer::new(&m.params, RmspropConfig::default(), 0.1);
        assert!(train_epoch(&mut m, &mut opt, &[], 2, 0, 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let m = SegModel::new(small(AttentionVariant::Soga), 21).unwrap();
        let bytes = checkpoint_bytes(&m, serde_json::json!({"k": 1}), 21, 4).unwrap();
        let ck = parse_checkpoint(&bytes).unwrap();
        assert_eq!(ck.header.epoch, 4);
        assert_eq!(ck.header.run_config["k"], 1);
        let restored = ck.into_model().unwrap();
        assert_eq!(
            checkpoint_bytes(&restored, serde_json::json!({"k": 1}), 21, 4).unwrap(),
            bytes
        );

        assert!(matches!(
            parse_checkpoint(&bytes[..bytes.len() - 9]),
            Err(Error::Corrupt(_))
        ));
        let mut flipped = bytes.clone();
        let n = flipped.len();
        flipped[n - 20] ^= 1;
        assert!(matches!(parse_checkpoint(&flipped), Err(Error::Corrupt(_))));
        let mut wrong_version = bytes.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            parse_checkpoint(&wrong_version),
            Err(Error::Version { .. })
        ));

        let ck = parse_checkpoint(&bytes).unwrap();
        let mut other = SegModel::new(small(AttentionVariant::Foa), 21).unwrap();
        assert!(matches!(ck.load_into(&mut other), Err(Error::Config(_))));
    }
}
