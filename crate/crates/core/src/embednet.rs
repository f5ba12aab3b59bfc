//! The speaker embedding network: TDNN and residual-conv frame encoders,
//! statistics (SP) and learnable-dictionary (LDE) pooling, and softmax /
//! angular-softmax classifier heads. All forward graphs are built on the
//! substrate tape so the same code serves training, inference, and the
//! finite-difference gradient checks.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::substrate::rng::RngStream;
use crate::substrate::tape::{NodeId, Tape};
use crate::substrate::tensor::{Scalar, Tensor};
use crate::synthdata::gen::FeatureSequence;

// -------------------------------------------------------------- parameters

/// Named model parameters. BTreeMap so iteration (and therefore every
/// optimizer update and checkpoint) has a stable order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    pub entries: BTreeMap<String, Tensor<f32>>,
}

impl ParamSet {
    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.entries.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::contract(format!("param set: missing tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("param set: missing tensor `{name}`")))
    }

    /// Running batch-norm statistics ride along in the set but are updated
    /// by exponential averaging, not by gradients.
    pub fn is_trainable(name: &str) -> bool {
        !name.ends_with(".rmean") && !name.ends_with(".rvar")
    }
}

/// Tape node ids for a registered parameter set.
pub struct NodeMap {
    map: BTreeMap<String, NodeId>,
}

impl NodeMap {
    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| Error::contract(format!("node map: missing tensor `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.map.iter()
    }
}

pub fn register_params<E: Scalar>(tape: &mut Tape<E>, params: &ParamSet) -> NodeMap {
    let mut map = BTreeMap::new();
    for (name, t) in &params.entries {
        map.insert(name.clone(), tape.input(t.cast::<E>()));
    }
    NodeMap { map }
}

// ------------------------------------------------------------------ config

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TdnnLayer {
    pub context: usize,
    pub dilation: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EncoderConfig {
    Tdnn { input_dim: usize, layers: Vec<TdnnLayer> },
    Resconv { input_dim: usize, channels: Vec<usize>, out_width: usize },
}

impl EncoderConfig {
    /// Desk-scale x-vector frame encoder proportioned after the usual
    /// recipe: contexts {5,3,3,1,1}, dilations {1,2,3,1,1}.
    pub fn tdnn_default(input_dim: usize) -> Self {
        let spec = [(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)];
        EncoderConfig::Tdnn {
            input_dim,
            layers: spec
                .iter()
                .map(|&(context, dilation)| TdnnLayer { context, dilation, width: 512 })
                .collect(),
        }
    }

    pub fn resconv_default(input_dim: usize) -> Self {
        EncoderConfig::Resconv { input_dim, channels: vec![16, 32, 64, 128], out_width: 512 }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderConfig::Tdnn { input_dim, .. } | EncoderConfig::Resconv { input_dim, .. } => {
                *input_dim
            }
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            EncoderConfig::Tdnn { layers, .. } => layers.last().map_or(0, |l| l.width),
            EncoderConfig::Resconv { out_width, .. } => *out_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EncoderConfig::Tdnn { layers, .. } => {
                if layers.is_empty() {
                    return Err(Error::argument("encoder: tdnn needs >= 1 layer"));
                }
                for l in layers {
                    if l.context % 2 == 0 || l.width == 0 || l.dilation == 0 {
                        return Err(Error::argument(format!("encoder: bad tdnn layer {l:?}")));
                    }
                }
            }
            EncoderConfig::Resconv { channels, out_width, .. } => {
                if channels.is_empty() || *out_width == 0 {
                    return Err(Error::argument("encoder: bad resconv plan"));
                }
            }
        }
        if self.output_dim() == 0 || self.input_dim() == 0 {
            return Err(Error::argument("encoder: zero width"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Sp,
    Lde,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LdeComponents {
    MeanOnly,
    MeanAndStd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolingConfig {
    pub kind: PoolKind,
    pub lde_components: LdeComponents,
    pub c: usize,
}

impl PoolingConfig {
    pub fn sp() -> Self {
        PoolingConfig { kind: PoolKind::Sp, lde_components: LdeComponents::MeanAndStd, c: 0 }
    }

    pub fn lde(c: usize, lde_components: LdeComponents) -> Self {
        PoolingConfig { kind: PoolKind::Lde, lde_components, c }
    }

    pub fn pooled_dim(&self, frame_dim: usize) -> usize {
        match self.kind {
            PoolKind::Sp => 2 * frame_dim,
            PoolKind::Lde => match self.lde_components {
                LdeComponents::MeanOnly => self.c * frame_dim,
                LdeComponents::MeanAndStd => 2 * self.c * frame_dim,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == PoolKind::Lde && self.c == 0 {
            return Err(Error::argument("pooling: lde needs C >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Softmax,
    ASoftmax,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MarginConfig {
    pub objective: Objective,
    pub margin: u32,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_decay: f64,
    /// Label smoothing weight. Caps the payoff of ever-larger logit gaps,
    /// which otherwise collapses same-speaker embeddings onto the class
    /// prototypes and ruins transfer to unseen speakers.
    pub smoothing: f64,
}

impl MarginConfig {
    pub fn softmax() -> Self {
        MarginConfig {
            objective: Objective::Softmax,
            margin: 1,
            lambda_start: 1000.0,
            lambda_end: 5.0,
            lambda_decay: 0.1,
            smoothing: 0.1,
        }
    }

    pub fn a_softmax(margin: u32) -> Self {
        MarginConfig { objective: Objective::ASoftmax, margin, ..Self::softmax() }
    }

    pub fn lambda(&self, step: usize) -> f64 {
        (self.lambda_start / (1.0 + self.lambda_decay * step as f64)).max(self.lambda_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective == Objective::ASoftmax && self.margin < 1 {
            return Err(Error::argument("margin: a_softmax needs m >= 1"));
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::argument("margin: smoothing must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedConfig {
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub margin: MarginConfig,
    pub embed_dim: usize,
    pub n_classes: usize,
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pooling.validate()?;
        self.margin.validate()?;
        if self.embed_dim == 0 || self.n_classes < 2 {
            return Err(Error::argument("embed config: need embed_dim > 0 and >= 2 classes"));
        }
        Ok(())
    }

    pub fn pooled_dim(&self) -> usize {
        self.pooling.pooled_dim(self.encoder.output_dim())
    }

    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::default();
        let dense = |name: &str, rows: usize, cols: usize, std: f64| -> Tensor<f32> {
            let mut rng = RngStream::derive(seed, name, 0);
            Tensor {
                shape: vec![rows, cols],
                data: (0..rows * cols).map(|_| (rng.normal() * std) as f32).collect(),
            }
        };
        let bn = |p: &mut ParamSet, prefix: &str, c: usize| {
            p.insert(&format!("{prefix}.gamma"), Tensor { shape: vec![c], data: vec![1.0; c] });
            p.insert(&format!("{prefix}.beta"), Tensor::zeros(vec![c]));
            p.insert(&format!("{prefix}.rmean"), Tensor::zeros(vec![c]));
            p.insert(&format!("{prefix}.rvar"), Tensor { shape: vec![c], data: vec![1.0; c] });
        };
        match &self.encoder {
            EncoderConfig::Tdnn { input_dim, layers } => {
                let mut f_in = *input_dim;
                for (i, l) in layers.iter().enumerate() {
                    let fan_in = l.context * f_in;
                    p.insert(
                        &format!("enc{i}.w"),
                        dense(&format!("enc{i}.w"), fan_in, l.width, (2.0 / fan_in as f64).sqrt()),
                    );
                    p.insert(&format!("enc{i}.b"), Tensor::zeros(vec![l.width]));
                    bn(&mut p, &format!("enc{i}"), l.width);
                    f_in = l.width;
                }
            }
            EncoderConfig::Resconv { input_dim, channels, out_width } => {
                let mut c_in = 1usize;
                for (i, &c_out) in channels.iter().enumerate() {
                    for half in 1..=2 {
                        let cin = if half == 1 { c_in } else { c_out };
                        let fan_in = 9 * cin;
                        p.insert(
                            &format!("blk{i}.w{half}"),
                            dense(&format!("blk{i}.w{half}"), fan_in, c_out, (2.0 / fan_in as f64).sqrt()),
                        );
                        p.insert(&format!("blk{i}.b{half}"), Tensor::zeros(vec![c_out]));
                        bn(&mut p, &format!("blk{i}.n{half}"), c_out);
                    }
                    p.insert(
                        &format!("blk{i}.ws"),
                        dense(&format!("blk{i}.ws"), c_in, c_out, (1.0 / c_in as f64).sqrt()),
                    );
                    p.insert(&format!("blk{i}.bs"), Tensor::zeros(vec![c_out]));
                    c_in = c_out;
                }
                let flat = input_dim * c_in;
                p.insert(
                    "resout.w",
                    dense("resout.w", flat, *out_width, (1.0 / flat as f64).sqrt()),
                );
                p.insert("resout.b", Tensor::zeros(vec![1, *out_width]));
            }
        }
        if self.pooling.kind == PoolKind::Lde {
            p.insert(
                "dict.centers",
                dense("dict.centers", self.pooling.c, self.encoder.output_dim(), 0.1),
            );
        }
        let pooled = self.pooled_dim();
        p.insert(
            "embed.w",
            dense("embed.w", pooled, self.embed_dim, (1.0 / pooled as f64).sqrt()),
        );
        p.insert("embed.b", Tensor::zeros(vec![1, self.embed_dim]));
        p.insert(
            "cls.w",
            dense("cls.w", self.embed_dim, self.n_classes, (1.0 / self.embed_dim as f64).sqrt()),
        );
        Ok(p)
    }
}

// ----------------------------------------------------------------- encode

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct EncodeOut {
    pub frames: NodeId,
    /// Pre-normalization activations per batch-norm site, for running-stat
    /// updates during training. Empty in eval mode.
    pub bn_inputs: Vec<(String, NodeId)>,
}

const BN_EPS: f64 = 1e-5;

/// Channels-last normalization against the stored running statistics. The
/// running averages enter the graph as constants in both modes: normalizing
/// each sequence by its own frame statistics would subtract the per-channel
/// temporal mean, and under the corpus generation law the speaker signature
/// is exactly such a constant offset. Training instead records the
/// pre-normalization activations so the caller can refresh the running
/// statistics after the step, and folds gamma/beta in as trainable nodes.
fn norm_site<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    prefix: &str,
    nodes: &NodeMap,
    params: &ParamSet,
    mode: Mode,
    bn_inputs: &mut Vec<(String, NodeId)>,
) -> Result<NodeId> {
    match mode {
        Mode::Train => {
            bn_inputs.push((prefix.to_string(), x));
            let gamma = nodes.id(&format!("{prefix}.gamma"))?;
            let beta = nodes.id(&format!("{prefix}.beta"))?;
            let rmean = params.get(&format!("{prefix}.rmean"))?;
            let rvar = params.get(&format!("{prefix}.rvar"))?;
            let c = rmean.len();
            let mut mean_row = Tensor::zeros(vec![1, c]);
            let mut invstd = Tensor::zeros(vec![1, c]);
            for j in 0..c {
                mean_row.data[j] = E::from_f64(rmean.data[j] as f64);
                invstd.data[j] = E::from_f64(1.0 / (rvar.data[j] as f64 + BN_EPS).sqrt());
            }
            let mean_row = tape.input(mean_row);
            let invstd = tape.input(invstd);
            let shape = tape.value(x).shape.clone();
            let (flat, back) = if shape.len() > 2 {
                let rows: usize = shape[..shape.len() - 1].iter().product();
                (tape.reshape(x, vec![rows, shape[shape.len() - 1]])?, Some(shape))
            } else {
                (x, None)
            };
            let centered = tape.sub_row(flat, mean_row)?;
            let xn = tape.mul_row(centered, invstd)?;
            let y = tape.mul_row(xn, gamma)?;
            let y = tape.add_row(y, beta)?;
            match back {
                Some(shape) => tape.reshape(y, shape),
                None => Ok(y),
            }
        }
        Mode::Eval => {
            let gamma = params.get(&format!("{prefix}.gamma"))?;
            let beta = params.get(&format!("{prefix}.beta"))?;
            let rmean = params.get(&format!("{prefix}.rmean"))?;
            let rvar = params.get(&format!("{prefix}.rvar"))?;
            let c = gamma.len();
            let mut scale = Tensor::zeros(vec![c]);
            let mut shift = Tensor::zeros(vec![c]);
            for j in 0..c {
                let s = gamma.data[j] as f64 / (rvar.data[j] as f64 + BN_EPS).sqrt();
                scale.data[j] = E::from_f64(s);
                shift.data[j] = E::from_f64(beta.data[j] as f64 - rmean.data[j] as f64 * s);
            }
            let scale = tape.input(scale);
            let shift = tape.input(shift);
            let shape = tape.value(x).shape.clone();
            let (flat, back) = if shape.len() > 2 {
                let rows: usize = shape[..shape.len() - 1].iter().product();
                (tape.reshape(x, vec![rows, shape[shape.len() - 1]])?, Some(shape))
            } else {
                (x, None)
            };
            let y = tape.mul_row(flat, scale)?;
            let y = tape.add_row(y, shift)?;
            match back {
                Some(shape) => tape.reshape(y, shape),
                None => Ok(y),
            }
        }
    }
}

/// Frame encoder: [T, F] features to [T', F'] representations.
pub fn encode<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    cfg: &EncoderConfig,
    nodes: &NodeMap,
    params: &ParamSet,
    mode: Mode,
) -> Result<EncodeOut> {
    let in_width = tape.value(x).shape.get(1).copied().unwrap_or(0);
    if in_width != cfg.input_dim() {
        return Err(Error::shape(format!(
            "encode: input width {in_width} != configured {}",
            cfg.input_dim()
        )));
    }
    let mut bn_inputs = Vec::new();
    match cfg {
        EncoderConfig::Tdnn { layers, .. } => {
            let mut h = x;
            for (i, l) in layers.iter().enumerate() {
                let w = nodes.id(&format!("enc{i}.w"))?;
                let b = nodes.id(&format!("enc{i}.b"))?;
                let conv = tape.conv1d(h, w, b, l.context, l.dilation)?;
                let normed =
                    norm_site(tape, conv, &format!("enc{i}"), nodes, params, mode, &mut bn_inputs)?;
                h = tape.relu(normed);
            }
            Ok(EncodeOut { frames: h, bn_inputs })
        }
        EncoderConfig::Resconv { input_dim, channels, .. } => {
            let t = tape.value(x).shape[0];
            let mut h = tape.reshape(x, vec![t, *input_dim, 1])?;
            for (i, _) in channels.iter().enumerate() {
                let w1 = nodes.id(&format!("blk{i}.w1"))?;
                let b1 = nodes.id(&format!("blk{i}.b1"))?;
                let c1 = tape.conv2d(h, w1, b1, 3, 3, 2, 1)?;
                let n1 = norm_site(tape, c1, &format!("blk{i}.n1"), nodes, params, mode, &mut bn_inputs)?;
                let a1 = tape.relu(n1);
                let w2 = nodes.id(&format!("blk{i}.w2"))?;
                let b2 = nodes.id(&format!("blk{i}.b2"))?;
                let c2 = tape.conv2d(a1, w2, b2, 3, 3, 1, 1)?;
                let n2 = norm_site(tape, c2, &format!("blk{i}.n2"), nodes, params, mode, &mut bn_inputs)?;
                let ws = nodes.id(&format!("blk{i}.ws"))?;
                let bs = nodes.id(&format!("blk{i}.bs"))?;
                let skip = tape.conv2d(h, ws, bs, 1, 1, 2, 1)?;
                let sum = tape.add(n2, skip)?;
                h = tape.relu(sum);
            }
            let shape = tape.value(h).shape.clone();
            let flat = tape.reshape(h, vec![shape[0], shape[1] * shape[2]])?;
            let w = nodes.id("resout.w")?;
            let b = nodes.id("resout.b")?;
            let proj = tape.matmul(flat, w)?;
            let brow = tape.reshape(b, vec![tape.value(b).len()])?;
            let out = tape.add_row(proj, brow)?;
            Ok(EncodeOut { frames: out, bn_inputs })
        }
    }
}

// ---------------------------------------------------------------- pooling

const STAT_EPS: f64 = 1e-8;

/// Statistics pooling: [T, F] -> [1, 2F] as [mean || std], population
/// convention with epsilon inside the square root.
pub fn sp_pool<E: Scalar>(tape: &mut Tape<E>, frames: NodeId) -> Result<NodeId> {
    let mean = tape.mean_rows(frames)?;
    let std = tape.std_rows(frames, STAT_EPS)?;
    tape.concat(&[mean, std], 1)
}

pub struct LdePooled {
    pub pooled: NodeId,
    /// [T, C] soft assignment weights; rows sum to one.
    pub weights: NodeId,
}

/// Learnable dictionary encoding: soft-assign frames to C centers with
/// w_tc = softmax_c(-||x_t - e_c||^2), then aggregate residual means (and
/// spreads) per center, each normalized by Z_c = sum_t w_tc.
pub fn lde_pool<E: Scalar>(
    tape: &mut Tape<E>,
    frames: NodeId,
    centers: NodeId,
    components: LdeComponents,
) -> Result<LdePooled> {
    let fv = tape.value(frames);
    if fv.rank() != 2 {
        return Err(Error::shape("lde_pool: frames must be [T, F]".to_string()));
    }
    let (_, f) = (fv.shape[0], fv.shape[1]);
    let cv = tape.value(centers);
    if cv.rank() != 2 || cv.shape[1] != f {
        return Err(Error::shape(format!(
            "lde_pool: centers {:?} vs frame dim {f}",
            cv.shape
        )));
    }
    let c = cv.shape[0];
    let ones = tape.input(Tensor { shape: vec![f, 1], data: vec![E::ONE; f] });

    let mut diffs = Vec::with_capacity(c);
    let mut dists = Vec::with_capacity(c);
    for ci in 0..c {
        let center = tape.slice(centers, 0, ci, 1)?;
        let center_row = tape.reshape(center, vec![f])?;
        let diff = tape.sub_row(frames, center_row)?;
        let sq = tape.mul(diff, diff)?;
        let r = tape.matmul(sq, ones)?;
        diffs.push(diff);
        dists.push(r);
    }
    let r_mat = tape.concat(&dists, 1)?;
    let neg_r = tape.scale(r_mat, -1.0);
    let weights = tape.softmax_rows(neg_r)?;
    let z = tape.sum_rows(weights)?;

    let mut parts = Vec::new();
    let mut spread_parts = Vec::new();
    for (ci, diff) in diffs.iter().enumerate() {
        let w_col = tape.slice(weights, 1, ci, 1)?;
        let w_t = tape.transpose(w_col)?;
        let z_c = tape.slice(z, 1, ci, 1)?;
        let z_scalar = tape.reshape(z_c, vec![1])?;
        let inv_z = tape.recip(z_scalar);
        let num = tape.matmul(w_t, *diff)?;
        let m_c = tape.scale_by(num, inv_z)?;
        parts.push(m_c);
        if components == LdeComponents::MeanAndStd {
            // spread about the aggregated mean, so C=1 with a zero center
            // reduces exactly to statistics pooling
            let m_row = tape.reshape(m_c, vec![f])?;
            let dev = tape.sub_row(*diff, m_row)?;
            let sq = tape.mul(dev, dev)?;
            let wsq = tape.matmul(w_t, sq)?;
            let meaned = tape.scale_by(wsq, inv_z)?;
            let inner = tape.add_scalar(meaned, STAT_EPS);
            let root = tape.sqrt(inner);
            spread_parts.push(root);
        }
    }
    parts.extend(spread_parts);
    let pooled = tape.concat(&parts, 1)?;
    Ok(LdePooled { pooled, weights })
}

// ------------------------------------------------------------- projection

/// Affine map from the pooled vector to the embedding: [1, P] -> [1, D].
pub fn project_embedding<E: Scalar>(
    tape: &mut Tape<E>,
    pooled: NodeId,
    nodes: &NodeMap,
) -> Result<NodeId> {
    let w = nodes.id("embed.w")?;
    let b = nodes.id("embed.b")?;
    let y = tape.matmul(pooled, w)?;
    let brow = tape.reshape(b, vec![tape.value(b).len()])?;
    tape.add_row(y, brow)
}

/// Full forward pass from features to the embedding node.
pub fn forward_embedding<E: Scalar>(
    tape: &mut Tape<E>,
    x: NodeId,
    cfg: &EmbedConfig,
    nodes: &NodeMap,
    params: &ParamSet,
    mode: Mode,
) -> Result<(NodeId, Vec<(String, NodeId)>)> {
    let enc = encode(tape, x, &cfg.encoder, nodes, params, mode)?;
    let pooled = match cfg.pooling.kind {
        PoolKind::Sp => sp_pool(tape, enc.frames)?,
        PoolKind::Lde => {
            let centers = nodes.id("dict.centers")?;
            lde_pool(tape, enc.frames, centers, cfg.pooling.lde_components)?.pooled
        }
    };
    let emb = project_embedding(tape, pooled, nodes)?;
    Ok((emb, enc.bn_inputs))
}

// --------------------------------------------------------------- psi / CE

/// psi(theta) = (-1)^k cos(m theta) - 2k on [k pi/m, (k+1) pi/m].
pub fn psi_value(theta: f64, m: u32) -> Result<f64> {
    let pi = std::f64::consts::PI;
    if m < 1 {
        return Err(Error::argument("psi: margin m must be >= 1"));
    }
    if !(0.0..=pi).contains(&theta) {
        return Err(Error::argument(format!("psi: theta {theta} outside [0, pi]")));
    }
    let k = ((theta * m as f64 / pi).floor() as i64).clamp(0, m as i64 - 1);
    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
    Ok(sign * (m as f64 * theta).cos() - 2.0 * k as f64)
}

const COS_CLAMP: f64 = 1.0 - 1e-7;

/// Cross-entropy classifier head. For a_softmax the weight columns are
/// L2-normalized in-graph and the target logit becomes
/// ||x|| (lambda cos(theta_y) + psi(theta_y)) / (1 + lambda).
pub fn classify_loss<E: Scalar>(
    tape: &mut Tape<E>,
    emb: NodeId,
    cls_w: NodeId,
    label: usize,
    cfg: &MarginConfig,
    lambda: f64,
) -> Result<NodeId> {
    let k = tape.value(cls_w).shape[1];
    if label >= k {
        return Err(Error::argument(format!("classify_loss: label {label} out of {k} classes")));
    }
    let logits = match cfg.objective {
        Objective::Softmax => tape.matmul(emb, cls_w)?,
        Objective::ASoftmax => {
            let xnorm_val = tape
                .value(emb)
                .data
                .iter()
                .map(|&v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            if xnorm_val < 1e-12 {
                return Err(Error::numeric("classify_loss: zero-norm embedding under a_softmax"));
            }
            let wsq = tape.mul(cls_w, cls_w)?;
            let colsq = tape.sum_rows(wsq)?;
            let safe = tape.add_scalar(colsq, 1e-24);
            let norms = tape.sqrt(safe);
            let inv_norms = tape.recip(norms);
            let inv_row = tape.reshape(inv_norms, vec![k])?;
            let wn = tape.mul_row(cls_w, inv_row)?;
            let xnorm = tape.l2_norm(emb);
            let dots = tape.matmul(emb, wn)?;
            let inv_x = tape.recip(xnorm);
            let cosines = tape.scale_by(dots, inv_x)?;
            let cos_clamped = tape.clamp(cosines, -COS_CLAMP, COS_CLAMP);
            let plain = tape.scale_by(cos_clamped, xnorm)?;
            let cos_y = tape.slice(cos_clamped, 1, label, 1)?;
            let theta_y = tape.acos(cos_y);
            let psi_y = tape.psi(theta_y, cfg.margin)?;
            let lam_cos = tape.scale(cos_y, lambda);
            let blend = tape.add(lam_cos, psi_y)?;
            let scaled = tape.scale(blend, 1.0 / (1.0 + lambda));
            let target = tape.scale_by(scaled, xnorm)?;
            let mut parts = Vec::new();
            if label > 0 {
                parts.push(tape.slice(plain, 1, 0, label)?);
            }
            parts.push(target);
            if label + 1 < k {
                parts.push(tape.slice(plain, 1, label + 1, k - label - 1)?);
            }
            tape.concat(&parts, 1)?
        }
    };
    let lsm = tape.log_softmax_rows(logits)?;
    let target = tape.slice(lsm, 1, label, 1)?;
    let s = tape.sum_all(target);
    if cfg.smoothing == 0.0 {
        return Ok(tape.scale(s, -1.0));
    }
    let spread = tape.mean_all(lsm);
    let a = tape.scale(s, -(1.0 - cfg.smoothing));
    let b = tape.scale(spread, -cfg.smoothing);
    tape.add(a, b)
}

// ------------------------------------------------------------------ model

#[derive(Clone, Debug)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_id: String,
}

#[derive(Clone, Debug)]
pub struct EmbedModel {
    pub config: EmbedConfig,
    pub params: ParamSet,
}

impl EmbedModel {
    pub fn init(config: EmbedConfig, seed: u64) -> Result<EmbedModel> {
        let params = config.init_params(seed)?;
        Ok(EmbedModel { config, params })
    }

    /// Deterministic inference-mode embedding extraction. Preprocessing is
    /// the caller's job.
    pub fn extract(&self, seq: &FeatureSequence) -> Result<Embedding> {
        let mut tape: Tape<f32> = Tape::new();
        let nodes = register_params(&mut tape, &self.params);
        let x = tape.input(seq.frames.clone());
        let (emb, _) =
            forward_embedding(&mut tape, x, &self.config, &nodes, &self.params, Mode::Eval)?;
        let v = tape.value(emb);
        if !v.all_finite() {
            return Err(Error::numeric(format!(
                "extract: non-finite embedding for {}",
                seq.utterance_id
            )));
        }
        Ok(Embedding {
            vector: v.data.iter().map(|&x| x as f64).collect(),
            source_id: seq.utterance_id.clone(),
        })
    }
}
