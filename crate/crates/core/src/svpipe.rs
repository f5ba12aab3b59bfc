//! End-to-end speaker verification: experiment configuration, embedding
//! network training, extraction tables, backend fitting, trial scoring, and
//! the results grid.
//!
//! Everything downstream of the corpus is keyed by a single experiment seed,
//! so a config file plus seed reproduces checkpoints and scores bit for bit.

use std::collections::{BTreeMap, BTreeSet};

use crate::backend::{
    center_apply, center_fit, cosine_score, lda_fit, plda_fit, snorm, CenteringStats,
    LdaTransform, PldaModel, PldaScorer, ScoreRecord,
};
use crate::ckpt::Checkpoint;
use crate::config::ConfigDoc;
use crate::embednet::{
    classify_loss, forward_embedding, register_params, EmbedConfig, EmbedModel, EncoderConfig,
    LdeComponents, MarginConfig, Mode, NodeMap, Objective, ParamSet, PoolKind, PoolingConfig,
    TdnnLayer,
};
use crate::error::{Error, Result};
use crate::metrics::{eer, min_dcf, DcfParams, ScoreSet};
use crate::substrate::rng::RngStream;
use crate::substrate::tape::{NodeId, Tape};
use crate::substrate::tensor::Tensor;
use crate::synthdata::corpus::{Corpus, CorpusSpec, Split, Utterance};
use crate::synthdata::gen::FeatureSequence;
use crate::synthdata::preprocess::{chunk_sample, energy_vad, sliding_mean_norm};
use crate::synthdata::trials::{TrialEntry, TrialLabel, TrialList};

// ------------------------------------------------------------ configuration

/// Feature preprocessing applied identically at training and extraction.
/// The default disables sliding mean normalization: under the synthetic
/// generation law the speaker signature is a constant offset, which window
/// centering would remove.
#[derive(Clone, Debug)]
pub struct Preproc {
    pub cmn_window: Option<usize>,
    pub vad_threshold: f64,
}

impl Default for Preproc {
    fn default() -> Self {
        Preproc { cmn_window: None, vad_threshold: 0.25 }
    }
}

impl Preproc {
    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        let normed = match self.cmn_window {
            Some(w) => sliding_mean_norm(seq, w)?,
            None => seq.clone(),
        };
        energy_vad(&normed, self.vad_threshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scoring {
    Cosine,
    Plda,
}

#[derive(Clone, Debug)]
pub struct BackendConfig {
    /// Apply centering and LDA before scoring.
    pub post: bool,
    pub lda_dim: usize,
    pub plda_iters: usize,
    pub scoring: Scoring,
    /// Symmetric score normalization against the training-speaker cohort.
    pub snorm: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig { post: true, lda_dim: 16, plda_iters: 10, scoring: Scoring::Plda, snorm: true }
    }
}

/// A compact frame encoder sized for single-core runs: one context-5 TDNN
/// layer, the front of the usual recipe. The synthetic corpus is close to
/// linear in the speaker latent, and stacked relu layers trained on the
/// closed speaker set memorize prototype neighborhoods that transfer badly
/// to unseen speakers, so shallow wins here across every backend.
pub fn desk_tdnn(input_dim: usize, width: usize) -> EncoderConfig {
    EncoderConfig::Tdnn {
        input_dim,
        layers: vec![TdnnLayer { context: 5, dilation: 1, width }],
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub system: String,
    pub corpus: CorpusSpec,
    pub encoder: EncoderConfig,
    pub pooling: PoolingConfig,
    pub margin: MarginConfig,
    pub embed_dim: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Std of a random constant offset added to every frame of a training
    /// chunk, a cheap channel-style augmentation. Off by default: on the
    /// clean synthetic corpus it blurs the speaker offsets themselves.
    pub noise_std: f64,
    pub preproc: Preproc,
    pub backend: BackendConfig,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        ExperimentConfig {
            system: "x-vec".into(),
            encoder: desk_tdnn(corpus.feature_dim, 32),
            corpus,
            pooling: PoolingConfig::sp(),
            margin: MarginConfig::softmax(),
            embed_dim: 64,
            steps: 2000,
            batch_size: 128,
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-3,
            noise_std: 0.0,
            preproc: Preproc::default(),
            backend: BackendConfig::default(),
            seed: 7,
        }
    }
}

fn join_usize(v: impl Iterator<Item = usize>) -> String {
    v.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn split_usize(s: &str, what: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::argument(format!("config: bad {what} list entry `{p}`")))
        })
        .collect()
}

impl ExperimentConfig {
    pub fn embed_config(&self) -> Result<EmbedConfig> {
        let cfg = EmbedConfig {
            encoder: self.encoder.clone(),
            pooling: self.pooling.clone(),
            margin: self.margin.clone(),
            embed_dim: self.embed_dim,
            n_classes: self.corpus.n_train,
        };
        cfg.validate()?;
        if self.encoder.input_dim() != self.corpus.feature_dim {
            return Err(Error::shape(format!(
                "config: encoder input dim {} != corpus feature dim {}",
                self.encoder.input_dim(),
                self.corpus.feature_dim
            )));
        }
        if self.steps == 0 && self.batch_size == 0 {
            return Err(Error::argument("config: steps and batch_size both zero"));
        }
        Ok(cfg)
    }

    pub fn to_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::default();
        let c = &self.corpus;
        doc.set("corpus", "n_train", c.n_train);
        doc.set("corpus", "n_dev", c.n_dev);
        doc.set("corpus", "n_test", c.n_test);
        doc.set("corpus", "utts_per_speaker", c.utts_per_speaker);
        doc.set("corpus", "adaptation_utts", c.adaptation_utts);
        doc.set("corpus", "duration_s", c.duration_s);
        doc.set("corpus", "feature_dim", c.feature_dim);
        doc.set("corpus", "d_content", c.d_content);
        doc.set("corpus", "d_speaker", c.d_speaker);
        doc.set("corpus", "augment", c.augment);
        doc.set("corpus", "seed", c.seed);
        doc.set("model", "system", &self.system);
        match &self.encoder {
            EncoderConfig::Tdnn { layers, .. } => {
                doc.set("model", "encoder", "tdnn");
                doc.set("model", "contexts", join_usize(layers.iter().map(|l| l.context)));
                doc.set("model", "dilations", join_usize(layers.iter().map(|l| l.dilation)));
                doc.set("model", "widths", join_usize(layers.iter().map(|l| l.width)));
            }
            EncoderConfig::Resconv { channels, out_width, .. } => {
                doc.set("model", "encoder", "resconv");
                doc.set("model", "channels", join_usize(channels.iter().copied()));
                doc.set("model", "out_width", out_width);
            }
        }
        match self.pooling.kind {
            PoolKind::Sp => doc.set("model", "pool", "sp"),
            PoolKind::Lde => {
                doc.set("model", "pool", "lde");
                doc.set("model", "lde_c", self.pooling.c);
                let comps = match self.pooling.lde_components {
                    LdeComponents::MeanOnly => "mean",
                    LdeComponents::MeanAndStd => "mean+std",
                };
                doc.set("model", "lde_components", comps);
            }
        }
        match self.margin.objective {
            Objective::Softmax => doc.set("model", "objective", "softmax"),
            Objective::ASoftmax => {
                doc.set("model", "objective", "asoftmax");
                doc.set("model", "margin", self.margin.margin);
            }
        }
        doc.set("model", "smoothing", self.margin.smoothing);
        doc.set("model", "embed_dim", self.embed_dim);
        doc.set("preprocess", "cmn_window", self.preproc.cmn_window.unwrap_or(0));
        doc.set("preprocess", "vad_threshold", self.preproc.vad_threshold);
        doc.set("train", "steps", self.steps);
        doc.set("train", "batch_size", self.batch_size);
        doc.set("train", "lr", self.lr);
        doc.set("train", "momentum", self.momentum);
        doc.set("train", "weight_decay", self.weight_decay);
        doc.set("train", "noise_std", self.noise_std);
        doc.set("train", "seed", self.seed);
        let b = &self.backend;
        doc.set("backend", "post", b.post);
        doc.set("backend", "lda_dim", b.lda_dim);
        doc.set("backend", "plda_iters", b.plda_iters);
        doc.set("backend", "scoring", match b.scoring {
            Scoring::Cosine => "cosine",
            Scoring::Plda => "plda",
        });
        doc.set("backend", "snorm", b.snorm);
        doc
    }

    /// Strict parse: unknown keys in any section are rejected.
    pub fn from_doc(doc: &ConfigDoc) -> Result<ExperimentConfig> {
        let d = ExperimentConfig::default();
        let mut corpus = CorpusSpec::default();
        if doc.section("corpus").is_some() {
            let mut r = doc.reader("corpus")?;
            corpus.n_train = r.parse_or("n_train", corpus.n_train)?;
            corpus.n_dev = r.parse_or("n_dev", corpus.n_dev)?;
            corpus.n_test = r.parse_or("n_test", corpus.n_test)?;
            corpus.utts_per_speaker = r.parse_or("utts_per_speaker", corpus.utts_per_speaker)?;
            corpus.adaptation_utts = r.parse_or("adaptation_utts", corpus.adaptation_utts)?;
            corpus.duration_s = r.parse_or("duration_s", corpus.duration_s)?;
            corpus.feature_dim = r.parse_or("feature_dim", corpus.feature_dim)?;
            corpus.d_content = r.parse_or("d_content", corpus.d_content)?;
            corpus.d_speaker = r.parse_or("d_speaker", corpus.d_speaker)?;
            corpus.augment = r.parse_or("augment", corpus.augment)?;
            corpus.seed = r.parse_or("seed", corpus.seed)?;
            r.finish()?;
        }
        let mut system = d.system.clone();
        let mut encoder = desk_tdnn(corpus.feature_dim, 32);
        let mut pooling = PoolingConfig::sp();
        let mut margin = MarginConfig::softmax();
        let mut embed_dim = d.embed_dim;
        if doc.section("model").is_some() {
            let mut r = doc.reader("model")?;
            system = r.str_or("system", "x-vec").to_string();
            match r.str_or("encoder", "tdnn") {
                "tdnn" => {
                    let contexts = split_usize(r.str_or("contexts", "5"), "contexts")?;
                    let dilations = split_usize(r.str_or("dilations", "1"), "dilations")?;
                    let widths = split_usize(r.str_or("widths", "32"), "widths")?;
                    if contexts.len() != dilations.len() || contexts.len() != widths.len() {
                        return Err(Error::argument(
                            "config: contexts, dilations, widths lists must have equal length",
                        ));
                    }
                    encoder = EncoderConfig::Tdnn {
                        input_dim: corpus.feature_dim,
                        layers: contexts
                            .iter()
                            .zip(&dilations)
                            .zip(&widths)
                            .map(|((&context, &dilation), &width)| TdnnLayer {
                                context,
                                dilation,
                                width,
                            })
                            .collect(),
                    };
                }
                "resconv" => {
                    let channels = split_usize(r.str_or("channels", "16,32,64,128"), "channels")?;
                    let out_width = r.parse_or("out_width", 512usize)?;
                    encoder = EncoderConfig::Resconv {
                        input_dim: corpus.feature_dim,
                        channels,
                        out_width,
                    };
                }
                other => {
                    return Err(Error::argument(format!("config: unknown encoder `{other}`")))
                }
            }
            match r.str_or("pool", "sp") {
                "sp" => pooling = PoolingConfig::sp(),
                "lde" => {
                    let c = r.parse_or("lde_c", 16usize)?;
                    let comps = match r.str_or("lde_components", "mean") {
                        "mean" => LdeComponents::MeanOnly,
                        "mean+std" => LdeComponents::MeanAndStd,
                        other => {
                            return Err(Error::argument(format!(
                                "config: unknown lde_components `{other}`"
                            )))
                        }
                    };
                    pooling = PoolingConfig::lde(c, comps);
                }
                other => return Err(Error::argument(format!("config: unknown pool `{other}`"))),
            }
            match r.str_or("objective", "softmax") {
                "softmax" => margin = MarginConfig::softmax(),
                "asoftmax" => margin = MarginConfig::a_softmax(r.parse_or("margin", 2u32)?),
                other => {
                    return Err(Error::argument(format!("config: unknown objective `{other}`")))
                }
            }
            margin.smoothing = r.parse_or("smoothing", margin.smoothing)?;
            embed_dim = r.parse_or("embed_dim", embed_dim)?;
            r.finish()?;
        }
        let mut preproc = Preproc::default();
        if doc.section("preprocess").is_some() {
            let mut r = doc.reader("preprocess")?;
            let w: usize = r.parse_or("cmn_window", 0)?;
            preproc.cmn_window = if w == 0 { None } else { Some(w) };
            preproc.vad_threshold = r.parse_or("vad_threshold", preproc.vad_threshold)?;
            r.finish()?;
        }
        let (mut steps, mut batch_size, mut lr, mut momentum, mut weight_decay, mut seed) =
            (d.steps, d.batch_size, d.lr, d.momentum, d.weight_decay, d.seed);
        let mut noise_std = d.noise_std;
        if doc.section("train").is_some() {
            let mut r = doc.reader("train")?;
            steps = r.parse_or("steps", steps)?;
            batch_size = r.parse_or("batch_size", batch_size)?;
            lr = r.parse_or("lr", lr)?;
            momentum = r.parse_or("momentum", momentum)?;
            weight_decay = r.parse_or("weight_decay", weight_decay)?;
            noise_std = r.parse_or("noise_std", noise_std)?;
            seed = r.parse_or("seed", seed)?;
            r.finish()?;
        }
        let mut backend = BackendConfig::default();
        if doc.section("backend").is_some() {
            let mut r = doc.reader("backend")?;
            backend.post = r.parse_or("post", backend.post)?;
            backend.lda_dim = r.parse_or("lda_dim", backend.lda_dim)?;
            backend.plda_iters = r.parse_or("plda_iters", backend.plda_iters)?;
            backend.scoring = match r.str_or("scoring", "plda") {
                "plda" => Scoring::Plda,
                "cosine" => Scoring::Cosine,
                other => {
                    return Err(Error::argument(format!("config: unknown scoring `{other}`")))
                }
            };
            backend.snorm = r.parse_or("snorm", backend.snorm)?;
            r.finish()?;
        }
        let cfg = ExperimentConfig {
            system,
            corpus,
            encoder,
            pooling,
            margin,
            embed_dim,
            steps,
            batch_size,
            lr,
            momentum,
            weight_decay,
            noise_std,
            preproc,
            backend,
            seed,
        };
        cfg.embed_config()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<ExperimentConfig> {
        ExperimentConfig::from_doc(&ConfigDoc::parse(text)?)
    }
}

// ----------------------------------------------------------------- training

/// Clean training utterances (plus augmented copies when enabled) rendered
/// and preprocessed once, with class labels. Only `Split::Train` speakers
/// ever appear here.
fn training_cache(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<(FeatureSequence, usize)>> {
    let mut cache = Vec::new();
    for utt in corpus.utterances_in(Split::Train) {
        if utt.speaker_index >= corpus.spec.n_train {
            return Err(Error::contract(format!(
                "training_cache: unseen speaker {} leaked into training split",
                corpus.speaker_id(utt)
            )));
        }
        let seq = cfg.preproc.apply(&corpus.render(utt)?)?;
        cache.push((seq, utt.speaker_index));
    }
    if cache.is_empty() {
        return Err(Error::argument("training_cache: corpus has no training utterances"));
    }
    Ok(cache)
}

/// Utterance ids that training batches draw from; everything else is
/// guaranteed unseen by the embedding network.
pub fn training_utterance_ids(corpus: &Corpus) -> Vec<String> {
    corpus.utterances_in(Split::Train).map(|u| u.utterance_id.clone()).collect()
}

struct BatchGraph {
    tape: Tape<f32>,
    nodes: NodeMap,
    loss: NodeId,
    loss_val: f64,
    bn_groups: BTreeMap<String, Vec<NodeId>>,
}

fn build_batch_graph(
    cfg: &ExperimentConfig,
    ecfg: &EmbedConfig,
    cache: &[(FeatureSequence, usize)],
    params: &ParamSet,
    step: usize,
    rng_batch: &mut RngStream,
    rng_chunk: &mut RngStream,
    rng_noise: &mut RngStream,
) -> Result<BatchGraph> {
    let mut tape: Tape<f32> = Tape::new();
    let nodes = register_params(&mut tape, params);
    let lambda = cfg.margin.lambda(step);
    let cls = nodes.id("cls.w")?;
    let mut losses = Vec::with_capacity(cfg.batch_size);
    let mut bn_groups: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
    for _ in 0..cfg.batch_size {
        let i = rng_batch.below(cache.len() as u64) as usize;
        let mut chunk = chunk_sample(&cache[i].0, rng_chunk);
        if cfg.noise_std > 0.0 {
            let f = chunk.frames.shape[1];
            let shift: Vec<f32> =
                (0..f).map(|_| (cfg.noise_std * rng_noise.normal()) as f32).collect();
            for (j, v) in chunk.frames.data.iter_mut().enumerate() {
                *v += shift[j % f];
            }
        }
        let x = tape.input(chunk.frames);
        let (emb, bns) = forward_embedding(&mut tape, x, ecfg, &nodes, params, Mode::Train)?;
        losses.push(classify_loss(&mut tape, emb, cls, cache[i].1, &cfg.margin, lambda)?);
        for (name, id) in bns {
            bn_groups.entry(name).or_default().push(id);
        }
    }
    let cat = tape.concat(&losses, 0)?;
    let loss = tape.mean_all(cat);
    let loss_val = tape.value(loss).item() as f64;
    Ok(BatchGraph { tape, nodes, loss, loss_val, bn_groups })
}

/// The mean training-mode loss the current parameters produce on the first
/// batch the training loop would sample. Used to verify warm starts.
pub fn eval_training_loss(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    params: &ParamSet,
) -> Result<f64> {
    let ecfg = cfg.embed_config()?;
    let cache = training_cache(cfg, corpus)?;
    let mut rng_batch = RngStream::derive(cfg.seed, "batches", 0);
    let mut rng_chunk = RngStream::derive(cfg.seed, "chunks", 0);
    let mut rng_noise = RngStream::derive(cfg.seed, "trainnoise", 0);
    let g = build_batch_graph(cfg, &ecfg, &cache, params, 0, &mut rng_batch, &mut rng_chunk, &mut rng_noise)?;
    Ok(g.loss_val)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: EmbedModel,
    pub loss_log: Vec<f64>,
}

const BN_MOMENTUM: f32 = 0.9;
/// Global gradient-norm clip; a-softmax margins can spike early gradients.
const GRAD_CLIP: f64 = 5.0;
const LR_PLATEAU_WINDOW: usize = 250;
const LR_FLOOR: f64 = 1e-4;

/// Momentum-SGD training of the embedding network on the corpus's training
/// split. `warm` resumes from existing parameters; otherwise the config seed
/// initializes them. Fully deterministic for a fixed config and corpus.
pub fn train_sv(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    warm: Option<&ParamSet>,
) -> Result<TrainOutcome> {
    let ecfg = cfg.embed_config()?;
    let cache = training_cache(cfg, corpus)?;
    let reference = ecfg.init_params(cfg.seed)?;
    let mut params = match warm {
        Some(p) => {
            for (name, t) in &reference.entries {
                let have = p.get(name)?;
                if have.shape != t.shape {
                    return Err(Error::shape(format!(
                        "train_sv: warm-start tensor `{name}` has shape {:?}, expected {:?}",
                        have.shape, t.shape
                    )));
                }
            }
            p.clone()
        }
        None => reference,
    };
    let mut velocity: BTreeMap<String, Vec<f32>> = params
        .entries
        .iter()
        .filter(|(name, _)| ParamSet::is_trainable(name))
        .map(|(name, t)| (name.clone(), vec![0.0; t.data.len()]))
        .collect();
    let mut rng_batch = RngStream::derive(cfg.seed, "batches", 0);
    let mut rng_chunk = RngStream::derive(cfg.seed, "chunks", 0);
    let mut rng_noise = RngStream::derive(cfg.seed, "trainnoise", 0);
    let mut lr = cfg.lr;
    let mut window_sum = 0.0;
    let mut prev_window_mean: Option<f64> = None;
    let mut loss_log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let g = build_batch_graph(cfg, &ecfg, &cache, &params, step, &mut rng_batch, &mut rng_chunk, &mut rng_noise)?;
        if !g.loss_val.is_finite() {
            return Err(Error::numeric(format!(
                "train_sv: non-finite loss {} at step {step}",
                g.loss_val
            )));
        }
        let grads = g.tape.forward_backward(g.loss)?;
        let mut gnorm_sq = 0.0f64;
        for (name, &nid) in g.nodes.iter() {
            if !ParamSet::is_trainable(name) {
                continue;
            }
            if let Some(grad) = grads.get(&nid) {
                gnorm_sq += grad.data.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
            }
        }
        let clip = if gnorm_sq.sqrt() > GRAD_CLIP { (GRAD_CLIP / gnorm_sq.sqrt()) as f32 } else { 1.0 };
        for (name, &nid) in g.nodes.iter() {
            if !ParamSet::is_trainable(name) {
                continue;
            }
            let Some(grad) = grads.get(&nid) else { continue };
            let vel = velocity.get_mut(name).expect("velocity buffer");
            let p = params.get_mut(name)?;
            // L2 decay on weights only; normalization affines stay free
            let wd = if name.ends_with(".gamma") || name.ends_with(".beta") {
                0.0
            } else {
                cfg.weight_decay as f32
            };
            for ((pv, vv), &gv) in p.data.iter_mut().zip(vel.iter_mut()).zip(&grad.data) {
                *vv = cfg.momentum as f32 * *vv - lr as f32 * (clip * gv + wd * *pv);
                *pv += *vv;
            }
        }
        for (site, ids) in &g.bn_groups {
            let c = params.get(&format!("{site}.rmean"))?.data.len();
            let mut mean_acc = vec![0.0f64; c];
            let mut var_acc = vec![0.0f64; c];
            for &id in ids {
                let (m, v) = g.tape.channel_stats(id);
                for j in 0..c {
                    mean_acc[j] += m[j];
                    var_acc[j] += v[j];
                }
            }
            let n = ids.len() as f64;
            let rmean = params.get_mut(&format!("{site}.rmean"))?;
            for (r, m) in rmean.data.iter_mut().zip(&mean_acc) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (*m / n) as f32;
            }
            let rvar = params.get_mut(&format!("{site}.rvar"))?;
            for (r, v) in rvar.data.iter_mut().zip(&var_acc) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * (*v / n) as f32;
            }
        }
        loss_log.push(g.loss_val);
        window_sum += g.loss_val;
        if (step + 1) % LR_PLATEAU_WINDOW == 0 {
            let mean = window_sum / LR_PLATEAU_WINDOW as f64;
            // only back off when the loss actually got worse; a flat
            // stretch is often a plateau the optimizer still escapes
            if let Some(prev) = prev_window_mean {
                if mean > prev {
                    lr = (lr * 0.5).max(LR_FLOOR);
                }
            }
            prev_window_mean = Some(mean);
            window_sum = 0.0;
        }
    }
    Ok(TrainOutcome { model: EmbedModel { config: ecfg, params }, loss_log })
}

/// Snapshot the model with its resolved config embedded in the checkpoint.
pub fn model_checkpoint(cfg: &ExperimentConfig, model: &EmbedModel) -> Checkpoint {
    Checkpoint { tensors: model.params.clone(), config_text: cfg.to_doc().render() }
}

/// Rebuild config and model from a checkpoint, validating every tensor's
/// name and shape against a fresh initialization of the embedded config.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(ExperimentConfig, EmbedModel)> {
    let cfg = ExperimentConfig::from_text(&ckpt.config_text)?;
    let ecfg = cfg.embed_config()?;
    let reference = ecfg.init_params(0)?;
    for (name, t) in &reference.entries {
        let have = ckpt.tensors.get(name)?;
        if have.shape != t.shape {
            return Err(Error::shape(format!(
                "checkpoint tensor `{name}` has shape {:?}, expected {:?}",
                have.shape, t.shape
            )));
        }
    }
    for name in ckpt.tensors.entries.keys() {
        if !reference.entries.contains_key(name) {
            return Err(Error::format(0, format!("checkpoint has unexpected tensor `{name}`")));
        }
    }
    Ok((cfg, EmbedModel { config: ecfg, params: ckpt.tensors.clone() }))
}

// --------------------------------------------------------------- extraction

#[derive(Clone, Debug, Default)]
pub struct SpeakerEmbeddingTable {
    pub utterance: BTreeMap<String, Vec<f64>>,
    pub utterance_speaker: BTreeMap<String, String>,
    pub speaker_mean: BTreeMap<String, Vec<f64>>,
}

impl SpeakerEmbeddingTable {
    /// Look up an utterance embedding, falling back to a speaker mean.
    pub fn get(&self, id: &str) -> Result<&Vec<f64>> {
        self.utterance
            .get(id)
            .or_else(|| self.speaker_mean.get(id))
            .ok_or_else(|| Error::argument(format!("embedding table: unknown id `{id}`")))
    }

    /// Disjoint union of two tables, as produced by extracting subsets
    /// independently. Overlapping ids are rejected.
    pub fn merge(mut self, other: SpeakerEmbeddingTable) -> Result<SpeakerEmbeddingTable> {
        for (id, v) in other.utterance {
            if self.utterance.insert(id.clone(), v).is_some() {
                return Err(Error::argument(format!("merge: duplicate utterance id `{id}`")));
            }
        }
        self.utterance_speaker.extend(other.utterance_speaker);
        for (id, v) in other.speaker_mean {
            if self.speaker_mean.insert(id.clone(), v).is_some() {
                return Err(Error::argument(format!("merge: duplicate speaker id `{id}`")));
            }
        }
        Ok(self)
    }
}

fn mean_vec(vecs: &[&Vec<f64>]) -> Vec<f64> {
    let d = vecs[0].len();
    let mut out = vec![0.0; d];
    for v in vecs {
        for j in 0..d {
            out[j] += v[j];
        }
    }
    for o in out.iter_mut() {
        *o /= vecs.len() as f64;
    }
    out
}

fn extract_one(
    model: &EmbedModel,
    corpus: &Corpus,
    pre: &Preproc,
    utt: &Utterance,
) -> Result<Vec<f64>> {
    let seq = pre.apply(&corpus.render(utt)?)?;
    Ok(model.extract(&seq)?.vector)
}

/// Utterance-level embeddings for an explicit id list. Unknown ids are
/// rejected by name. Subsets extracted separately merge into the same table
/// the full extraction produces.
pub fn extract_subset(
    model: &EmbedModel,
    corpus: &Corpus,
    pre: &Preproc,
    ids: &[String],
) -> Result<SpeakerEmbeddingTable> {
    let mut table = SpeakerEmbeddingTable::default();
    for id in ids {
        let utt = corpus
            .find(id)
            .ok_or_else(|| Error::argument(format!("extract: unknown utterance id `{id}`")))?;
        table.utterance.insert(id.clone(), extract_one(model, corpus, pre, utt)?);
        table.utterance_speaker.insert(id.clone(), corpus.speaker_id(utt).to_string());
    }
    Ok(table)
}

/// Embed every clean utterance and form per-speaker means. Training
/// speakers average all their utterances; unseen (dev/test) speakers
/// average only their adaptation subset, mirroring enrollment.
pub fn extract_all(model: &EmbedModel, corpus: &Corpus, pre: &Preproc) -> Result<SpeakerEmbeddingTable> {
    let mut table = SpeakerEmbeddingTable::default();
    for utt in &corpus.utterances {
        if utt.augmented {
            continue;
        }
        let id = utt.utterance_id.clone();
        table.utterance.insert(id.clone(), extract_one(model, corpus, pre, utt)?);
        table.utterance_speaker.insert(id, corpus.speaker_id(utt).to_string());
    }
    for (si, speaker) in corpus.speakers.iter().enumerate() {
        let members: Vec<&Vec<f64>> = corpus
            .utterances
            .iter()
            .filter(|u| {
                u.speaker_index == si
                    && !u.augmented
                    && (u.split == Split::Train || u.adaptation)
            })
            .map(|u| &table.utterance[&u.utterance_id])
            .collect();
        if members.is_empty() {
            return Err(Error::contract(format!(
                "extract_all: speaker {} has no utterances to average",
                speaker.speaker_id
            )));
        }
        table.speaker_mean.insert(speaker.speaker_id.clone(), mean_vec(&members));
    }
    Ok(table)
}

// ------------------------------------------------------------------- trials

/// Verification protocol over the held-out (non-adaptation) utterances of
/// unseen speakers: every same-speaker pair is a target, matched by an
/// equal number of seeded cross-speaker nontargets.
pub fn build_trials(corpus: &Corpus, seed: u64) -> Result<TrialList> {
    let eval: Vec<&Utterance> = corpus
        .utterances
        .iter()
        .filter(|u| u.split != Split::Train && !u.adaptation && !u.augmented)
        .collect();
    let speakers: BTreeSet<usize> = eval.iter().map(|u| u.speaker_index).collect();
    if speakers.len() < 2 {
        return Err(Error::argument("build_trials: need at least 2 unseen speakers"));
    }
    let mut entries = Vec::new();
    for i in 0..eval.len() {
        for j in (i + 1)..eval.len() {
            if eval[i].speaker_index == eval[j].speaker_index {
                entries.push(TrialEntry {
                    enroll_id: eval[i].utterance_id.clone(),
                    test_id: eval[j].utterance_id.clone(),
                    label: TrialLabel::Target,
                });
            }
        }
    }
    let n_targets = entries.len();
    if n_targets == 0 {
        return Err(Error::argument("build_trials: no same-speaker pairs available"));
    }
    let mut rng = RngStream::derive(seed, "trials", 0);
    let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
    while used.len() < n_targets {
        let a = rng.below(eval.len() as u64) as usize;
        let b = rng.below(eval.len() as u64) as usize;
        if eval[a].speaker_index == eval[b].speaker_index {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if used.insert(key) {
            entries.push(TrialEntry {
                enroll_id: eval[key.0].utterance_id.clone(),
                test_id: eval[key.1].utterance_id.clone(),
                label: TrialLabel::Nontarget,
            });
        }
    }
    Ok(TrialList { entries })
}

// ------------------------------------------------------------------ backend

pub struct FittedBackend {
    pub config: BackendConfig,
    centering: Option<CenteringStats>,
    lda: Option<LdaTransform>,
    plda_model: Option<PldaModel>,
    plda: Option<PldaScorer>,
    /// Transformed training-speaker mean embeddings, the s-norm cohort.
    cohort: Vec<Vec<f64>>,
}

impl FittedBackend {
    pub fn transform(&self, v: &[f64]) -> Result<Vec<f64>> {
        let mut out = match &self.centering {
            Some(c) => center_apply(c, v)?,
            None => v.to_vec(),
        };
        if let Some(lda) = &self.lda {
            out = lda.apply(&out)?;
        }
        Ok(out)
    }

    /// Raw pair score on already-transformed embeddings.
    fn score_transformed(&self, e: &[f64], t: &[f64]) -> Result<f64> {
        match &self.plda {
            Some(scorer) => scorer.score(e, t),
            None => cosine_score(e, t),
        }
    }

    /// Full scoring path for one pair of raw embeddings, including s-norm.
    pub fn score_pair(&self, enroll: &[f64], test: &[f64]) -> Result<f64> {
        let e = self.transform(enroll)?;
        let t = self.transform(test)?;
        let raw = self.score_transformed(&e, &t)?;
        if !self.config.snorm {
            return Ok(raw);
        }
        let ec = self.cohort_scores(&e)?;
        let tc = self.cohort_scores(&t)?;
        snorm(raw, &ec, &tc)
    }

    fn cohort_scores(&self, transformed: &[f64]) -> Result<Vec<f64>> {
        self.cohort.iter().map(|c| self.score_transformed(transformed, c)).collect()
    }
}

/// Fit the scoring backend on training-speaker utterance embeddings:
/// optional centering and LDA, then PLDA (or plain cosine), with the
/// training-speaker means as the s-norm cohort.
pub fn fit_backend(
    table: &SpeakerEmbeddingTable,
    corpus: &Corpus,
    bcfg: &BackendConfig,
) -> Result<FittedBackend> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for utt in corpus.utterances_in(Split::Train) {
        if utt.augmented {
            continue;
        }
        let emb = table.get(&utt.utterance_id)?;
        rows.push(emb.clone());
        labels.push(utt.speaker_index);
    }
    if rows.is_empty() {
        return Err(Error::argument("fit_backend: no training embeddings in table"));
    }
    let stacked = Tensor::from_rows(&rows);
    let n_classes = corpus.spec.n_train;
    let centering = if bcfg.post { Some(center_fit(&stacked)?) } else { None };
    let lda = if bcfg.post {
        let out_dim = bcfg.lda_dim.min(stacked.ncols()).min(n_classes.saturating_sub(1));
        if out_dim == 0 {
            return Err(Error::argument("fit_backend: lda_dim resolves to zero"));
        }
        let centered: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| center_apply(centering.as_ref().unwrap(), r))
            .collect::<Result<_>>()?;
        Some(lda_fit(&Tensor::from_rows(&centered), &labels, out_dim)?)
    } else {
        None
    };
    let partial = FittedBackend {
        config: bcfg.clone(),
        centering,
        lda,
        plda_model: None,
        plda: None,
        cohort: Vec::new(),
    };
    let transformed: Vec<Vec<f64>> =
        rows.iter().map(|r| partial.transform(r)).collect::<Result<_>>()?;
    let (plda_model, plda) = match bcfg.scoring {
        Scoring::Plda => {
            let (model, _) = plda_fit(&Tensor::from_rows(&transformed), &labels, bcfg.plda_iters)?;
            let scorer = PldaScorer::new(&model)?;
            (Some(model), Some(scorer))
        }
        Scoring::Cosine => (None, None),
    };
    let mut cohort = Vec::new();
    if bcfg.snorm {
        let mut by_speaker: BTreeMap<usize, Vec<&Vec<f64>>> = BTreeMap::new();
        for (t, &lab) in transformed.iter().zip(&labels) {
            by_speaker.entry(lab).or_default().push(t);
        }
        for members in by_speaker.values() {
            cohort.push(mean_vec(members));
        }
        if cohort.len() < 2 {
            return Err(Error::argument("fit_backend: s-norm needs a cohort of at least 2"));
        }
    }
    Ok(FittedBackend { plda_model, plda, cohort, ..partial })
}

fn f64_tensor_1d(v: &[f64]) -> Tensor<f32> {
    Tensor { shape: vec![v.len()], data: v.iter().map(|&x| x as f32).collect() }
}

fn f64_rows_tensor(rows: &[Vec<f64>]) -> Tensor<f32> {
    let cols = rows.first().map_or(0, |r| r.len());
    Tensor {
        shape: vec![rows.len(), cols],
        data: rows.iter().flatten().map(|&x| x as f32).collect(),
    }
}

fn tensor_to_f64(t: &Tensor<f32>) -> Tensor<f64> {
    Tensor { shape: t.shape.clone(), data: t.data.iter().map(|&x| x as f64).collect() }
}

fn backend_config_doc(bcfg: &BackendConfig) -> ConfigDoc {
    let mut doc = ConfigDoc::default();
    doc.set("backend", "post", bcfg.post);
    doc.set("backend", "lda_dim", bcfg.lda_dim);
    doc.set("backend", "plda_iters", bcfg.plda_iters);
    doc.set("backend", "scoring", match bcfg.scoring {
        Scoring::Cosine => "cosine",
        Scoring::Plda => "plda",
    });
    doc.set("backend", "snorm", bcfg.snorm);
    doc
}

fn backend_config_from_doc(doc: &ConfigDoc) -> Result<BackendConfig> {
    let mut backend = BackendConfig::default();
    let mut r = doc.reader("backend")?;
    backend.post = r.parse_or("post", backend.post)?;
    backend.lda_dim = r.parse_or("lda_dim", backend.lda_dim)?;
    backend.plda_iters = r.parse_or("plda_iters", backend.plda_iters)?;
    backend.scoring = match r.str_or("scoring", "plda") {
        "plda" => Scoring::Plda,
        "cosine" => Scoring::Cosine,
        other => return Err(Error::argument(format!("config: unknown scoring `{other}`"))),
    };
    backend.snorm = r.parse_or("snorm", backend.snorm)?;
    r.finish()?;
    Ok(backend)
}

/// Serialize a fitted backend as an SCKP tensor table with the backend
/// config embedded. Tensors are stored in f32, so reload costs a rounding
/// step but stays deterministic.
pub fn backend_to_checkpoint(backend: &FittedBackend) -> Checkpoint {
    let mut tensors = ParamSet::default();
    if let Some(c) = &backend.centering {
        tensors.insert("center.mean", f64_tensor_1d(&c.mean));
    }
    if let Some(l) = &backend.lda {
        tensors.insert(
            "lda.matrix",
            Tensor {
                shape: l.matrix.shape.clone(),
                data: l.matrix.data.iter().map(|&x| x as f32).collect(),
            },
        );
    }
    if let Some(m) = &backend.plda_model {
        tensors.insert("plda.mu", f64_tensor_1d(&m.mu));
        tensors.insert(
            "plda.b",
            Tensor {
                shape: m.between_cov.shape.clone(),
                data: m.between_cov.data.iter().map(|&x| x as f32).collect(),
            },
        );
        tensors.insert(
            "plda.w",
            Tensor {
                shape: m.within_cov.shape.clone(),
                data: m.within_cov.data.iter().map(|&x| x as f32).collect(),
            },
        );
    }
    if !backend.cohort.is_empty() {
        tensors.insert("cohort", f64_rows_tensor(&backend.cohort));
    }
    Checkpoint { tensors, config_text: backend_config_doc(&backend.config).render() }
}

pub fn backend_from_checkpoint(ckpt: &Checkpoint) -> Result<FittedBackend> {
    let config = backend_config_from_doc(&ConfigDoc::parse(&ckpt.config_text)?)?;
    let centering = if config.post {
        Some(CenteringStats { mean: tensor_to_f64(ckpt.tensors.get("center.mean")?).data })
    } else {
        None
    };
    let lda = if config.post {
        Some(LdaTransform { matrix: tensor_to_f64(ckpt.tensors.get("lda.matrix")?) })
    } else {
        None
    };
    let (plda_model, plda) = match config.scoring {
        Scoring::Plda => {
            let model = PldaModel {
                mu: tensor_to_f64(ckpt.tensors.get("plda.mu")?).data,
                between_cov: tensor_to_f64(ckpt.tensors.get("plda.b")?),
                within_cov: tensor_to_f64(ckpt.tensors.get("plda.w")?),
            };
            let scorer = PldaScorer::new(&model)?;
            (Some(model), Some(scorer))
        }
        Scoring::Cosine => (None, None),
    };
    let cohort = if config.snorm {
        let t = tensor_to_f64(ckpt.tensors.get("cohort")?);
        (0..t.nrows()).map(|i| t.row(i).to_vec()).collect()
    } else {
        Vec::new()
    };
    Ok(FittedBackend { config, centering, lda, plda_model, plda, cohort })
}

// ---------------------------------------------------- embedding table text

/// Plain-text embedding table: one row per entry,
/// `utt <id> <speaker> <values...>` or `spk <id> <values...>`, values in
/// f64 shortest round-trip notation.
pub fn table_to_text(table: &SpeakerEmbeddingTable) -> String {
    let mut out = String::new();
    for (id, v) in &table.utterance {
        let spk = table.utterance_speaker.get(id).map(String::as_str).unwrap_or("?");
        out.push_str(&format!("utt {id} {spk}"));
        for x in v {
            out.push_str(&format!(" {x}"));
        }
        out.push('\n');
    }
    for (id, v) in &table.speaker_mean {
        out.push_str(&format!("spk {id}"));
        for x in v {
            out.push_str(&format!(" {x}"));
        }
        out.push('\n');
    }
    out
}

pub fn table_from_text(text: &str) -> Result<SpeakerEmbeddingTable> {
    let mut table = SpeakerEmbeddingTable::default();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let parse_vals = |parts: std::str::SplitWhitespace<'_>| -> Result<Vec<f64>> {
            parts
                .map(|p| {
                    p.parse::<f64>().map_err(|_| {
                        Error::format(ln as u64 + 1, format!("bad embedding value `{p}`"))
                    })
                })
                .collect()
        };
        match kind {
            "utt" => {
                let id = parts
                    .next()
                    .ok_or_else(|| Error::format(ln as u64 + 1, "missing utterance id"))?
                    .to_string();
                let spk = parts
                    .next()
                    .ok_or_else(|| Error::format(ln as u64 + 1, "missing speaker id"))?
                    .to_string();
                let vals = parse_vals(parts)?;
                if vals.is_empty() {
                    return Err(Error::format(ln as u64 + 1, "empty embedding"));
                }
                table.utterance.insert(id.clone(), vals);
                table.utterance_speaker.insert(id, spk);
            }
            "spk" => {
                let id = parts
                    .next()
                    .ok_or_else(|| Error::format(ln as u64 + 1, "missing speaker id"))?
                    .to_string();
                let vals = parse_vals(parts)?;
                if vals.is_empty() {
                    return Err(Error::format(ln as u64 + 1, "empty embedding"));
                }
                table.speaker_mean.insert(id, vals);
            }
            other => {
                return Err(Error::format(
                    ln as u64 + 1,
                    format!("unknown embedding row kind `{other}`"),
                ))
            }
        }
    }
    Ok(table)
}

/// Score every trial in list order and partition the results by label.
pub fn run_trials(
    table: &SpeakerEmbeddingTable,
    trials: &TrialList,
    backend: &FittedBackend,
) -> Result<(Vec<ScoreRecord>, ScoreSet)> {
    // transform and cohort-score each distinct id once
    let mut transformed: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut cohort_scores: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for e in &trials.entries {
        for id in [e.enroll_id.as_str(), e.test_id.as_str()] {
            if !transformed.contains_key(id) {
                let t = backend.transform(table.get(id)?)?;
                if backend.config.snorm {
                    cohort_scores.insert(id, backend.cohort_scores(&t)?);
                }
                transformed.insert(id, t);
            }
        }
    }
    let mut records = Vec::with_capacity(trials.len());
    let mut set = ScoreSet { target_scores: Vec::new(), nontarget_scores: Vec::new() };
    for e in &trials.entries {
        let ev = &transformed[e.enroll_id.as_str()];
        let tv = &transformed[e.test_id.as_str()];
        let raw = backend.score_transformed(ev, tv)?;
        let score = if backend.config.snorm {
            snorm(
                raw,
                &cohort_scores[e.enroll_id.as_str()],
                &cohort_scores[e.test_id.as_str()],
            )?
        } else {
            raw
        };
        records.push(ScoreRecord {
            enroll_id: e.enroll_id.clone(),
            test_id: e.test_id.clone(),
            score,
        });
        match e.label {
            TrialLabel::Target => set.target_scores.push(score),
            TrialLabel::Nontarget => set.nontarget_scores.push(score),
        }
    }
    Ok((records, set))
}

// --------------------------------------------------------------------- grid

#[derive(Clone, Debug)]
pub struct GridRow {
    pub system: String,
    pub dim: usize,
    pub pool: String,
    pub objective: String,
    pub norm: String,
    pub eer: f64,
    pub min_dcf: f64,
}

pub fn grid_tsv(rows: &[GridRow]) -> String {
    let mut out = String::from("system\tdim\tpool\tobjective\tnorm\teer\tmin_dcf\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.system, r.dim, r.pool, r.objective, r.norm, r.eer, r.min_dcf
        ));
    }
    out
}

fn pool_label(p: &PoolingConfig) -> String {
    match p.kind {
        PoolKind::Sp => "sp".into(),
        PoolKind::Lde => match p.lde_components {
            LdeComponents::MeanOnly => format!("lde{}-m", p.c),
            LdeComponents::MeanAndStd => format!("lde{}-ms", p.c),
        },
    }
}

fn objective_label(m: &MarginConfig) -> String {
    match m.objective {
        Objective::Softmax => "softmax".into(),
        Objective::ASoftmax => format!("as{}", m.margin),
    }
}

/// Train and evaluate each configuration, reporting one row with raw
/// embeddings and one with the post-processed (centering + LDA) path. A
/// failing run aborts the whole grid, naming the config.
pub fn run_grid(configs: &[ExperimentConfig]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for cfg in configs {
        let run = || -> Result<[GridRow; 2]> {
            let corpus = Corpus::generate(&cfg.corpus)?;
            let trained = train_sv(cfg, &corpus, None)?;
            let table = extract_all(&trained.model, &corpus, &cfg.preproc)?;
            let trials = build_trials(&corpus, cfg.corpus.seed)?;
            let mut out = Vec::new();
            for post in [false, true] {
                let bcfg = BackendConfig { post, ..cfg.backend.clone() };
                let backend = fit_backend(&table, &corpus, &bcfg)?;
                let (_, set) = run_trials(&table, &trials, &backend)?;
                let (eer_v, _) = eer(&set)?;
                let (dcf_v, _) = min_dcf(&set, &DcfParams::default())?;
                out.push(GridRow {
                    system: cfg.system.clone(),
                    dim: cfg.embed_dim,
                    pool: pool_label(&cfg.pooling),
                    objective: objective_label(&cfg.margin),
                    norm: if post { "post".into() } else { "raw".into() },
                    eer: eer_v,
                    min_dcf: dcf_v,
                });
            }
            Ok([out.remove(0), out.remove(0)])
        };
        let pair =
            run().map_err(|e| Error::contract(format!("grid: system `{}`: {e}", cfg.system)))?;
        rows.extend(pair);
    }
    Ok(rows)
}

/// The eight comparison systems, derived from a base config: an sp/softmax
/// baseline, then LDE variants over objective margin, embedding dimension,
/// and pooled components.
pub fn table1_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let c = match base.pooling.kind {
        PoolKind::Lde => base.pooling.c,
        PoolKind::Sp => 16,
    };
    let dim = base.embed_dim;
    let half = (dim / 2).max(1);
    let narrow = (dim * 200 / 512).max(1);
    let mk = |system: &str, pooling: PoolingConfig, margin: MarginConfig, embed_dim: usize| {
        ExperimentConfig {
            system: system.into(),
            pooling,
            margin,
            embed_dim,
            ..base.clone()
        }
    };
    vec![
        mk("x-vec", PoolingConfig::sp(), MarginConfig::softmax(), dim),
        mk("lde-1", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::softmax(), dim),
        mk("lde-2", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::a_softmax(2), dim),
        mk("lde-3", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::a_softmax(3), dim),
        mk("lde-4", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::a_softmax(4), dim),
        mk("lde-5", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::a_softmax(2), half),
        mk("lde-6", PoolingConfig::lde(c, LdeComponents::MeanOnly), MarginConfig::a_softmax(2), narrow),
        mk("lde-7", PoolingConfig::lde(c, LdeComponents::MeanAndStd), MarginConfig::a_softmax(2), dim),
    ]
}
