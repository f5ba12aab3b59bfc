//! Miniature conditional synthesizer for the injection-site ablation:
//! speaker embeddings enter at the prenet, the encoder output, the postnet,
//! or combinations, and speaker similarity is judged by re-embedding the
//! generated frames with the verification model.
//!
//! The synthesizer is deliberately tiny: token embedding plus a conv
//! encoder, 4x upsampling in place of attention, a two-layer recurrent
//! frame decoder, and a three-layer conv postnet. All conditioning slots
//! are always allocated; disabled sites receive a zero vector, so the site
//! combinations differ only in where the conditioning value is nonzero.

use std::collections::BTreeMap;

use crate::backend::cosine_score;
use crate::ckpt::Checkpoint;
use crate::config::ConfigDoc;
use crate::embednet::{register_params, EmbedModel, NodeMap, ParamSet};
use crate::error::{Error, Result};
use crate::substrate::rng::RngStream;
use crate::substrate::tape::{NodeId, Tape};
use crate::substrate::tensor::{Scalar, Tensor};
use crate::svpipe::SpeakerEmbeddingTable;
use crate::synthdata::corpus::Corpus;
use crate::synthdata::gen::{FeatureSequence, FRAME_RATE};

/// Frames generated per content token; replaces attention-based stopping.
pub const FRAMES_PER_TOKEN: usize = 4;

// ------------------------------------------------------------------- types

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InjectionSites {
    pub pre: bool,
    pub attn: bool,
    pub post: bool,
}

impl InjectionSites {
    pub fn validate(&self) -> Result<()> {
        if !(self.pre || self.attn || self.post) {
            return Err(Error::argument("injection sites: at least one site required"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.pre {
            parts.push("pre");
        }
        if self.attn {
            parts.push("attn");
        }
        if self.post {
            parts.push("post");
        }
        parts.join("+")
    }

    pub fn parse(s: &str) -> Result<InjectionSites> {
        let mut sites = InjectionSites { pre: false, attn: false, post: false };
        for part in s.split('+') {
            match part.trim() {
                "pre" => sites.pre = true,
                "attn" => sites.attn = true,
                "post" => sites.post = true,
                other => {
                    return Err(Error::argument(format!("injection sites: unknown site `{other}`")))
                }
            }
        }
        sites.validate()?;
        Ok(sites)
    }

    /// The four combinations the ablation evaluates.
    pub fn evaluated() -> [InjectionSites; 4] {
        [
            InjectionSites { pre: true, attn: false, post: false },
            InjectionSites { pre: false, attn: true, post: false },
            InjectionSites { pre: true, attn: true, post: false },
            InjectionSites { pre: true, attn: true, post: true },
        ]
    }
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub injection: InjectionSites,
    pub vocab: usize,
    pub encoder_width: usize,
    pub decoder_width: usize,
    /// Speaker embeddings are projected down to this many dimensions.
    pub cond_dim: usize,
    pub out_dim: usize,
    /// Input dimension of the speaker projection.
    pub embed_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            injection: InjectionSites { pre: true, attn: true, post: false },
            vocab: 32,
            encoder_width: 32,
            decoder_width: 32,
            cond_dim: 64,
            out_dim: 30,
            embed_dim: 64,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.injection.validate()?;
        if self.vocab < 2 {
            return Err(Error::argument("synth config: vocab must be >= 2"));
        }
        for (what, v) in [
            ("encoder_width", self.encoder_width),
            ("decoder_width", self.decoder_width),
            ("cond_dim", self.cond_dim),
            ("out_dim", self.out_dim),
            ("embed_dim", self.embed_dim),
        ] {
            if v == 0 {
                return Err(Error::argument(format!("synth config: {what} must be > 0")));
            }
        }
        Ok(())
    }

    fn enc_ctx(&self) -> usize {
        self.encoder_width + self.cond_dim
    }

    fn dec_in(&self) -> usize {
        self.out_dim + self.enc_ctx() + self.cond_dim
    }

    /// All conditioning slots are allocated regardless of enabled sites, so
    /// every combination shares one parameter shape set.
    pub fn init_params(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut p = ParamSet::default();
        let mut dense = |name: &str, rows: usize, cols: usize| {
            let std = 1.0 / (rows as f64).sqrt();
            let mut rng = RngStream::derive(seed, name, 0);
            p.insert(
                name,
                Tensor {
                    shape: vec![rows, cols],
                    data: (0..rows * cols).map(|_| (rng.normal() * std) as f32).collect(),
                },
            );
        };
        let (e, d, k, f) = (self.encoder_width, self.decoder_width, self.cond_dim, self.out_dim);
        dense("tok.e", self.vocab, e);
        dense("enc0.w", 3 * e, e);
        dense("enc1.w", 3 * e, e);
        dense("proj.w", self.embed_dim, k);
        dense("dec1.w", self.dec_in() + d, d);
        dense("dec2.w", 2 * d, d);
        dense("out.w", d, f);
        let pin = f + k;
        dense("post0.w", 3 * pin, d);
        dense("post1.w", 3 * d, d);
        dense("post2.w", 3 * d, f);
        let mut bias = |name: &str, shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            p.insert(name, Tensor { shape, data: vec![0.0; n] });
        };
        bias("enc0.b", vec![e]);
        bias("enc1.b", vec![e]);
        bias("proj.b", vec![1, k]);
        bias("dec1.b", vec![1, d]);
        bias("dec2.b", vec![1, d]);
        bias("out.b", vec![1, f]);
        bias("post0.b", vec![d]);
        bias("post1.b", vec![d]);
        bias("post2.b", vec![f]);
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContentSequence {
    pub tokens: Vec<usize>,
}

impl ContentSequence {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::argument("content sequence: empty token list"));
        }
        for &t in &self.tokens {
            if t >= vocab {
                return Err(Error::argument(format!(
                    "content sequence: token {t} out of vocab {vocab}"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sample(vocab: usize, len: usize, rng: &mut RngStream) -> ContentSequence {
        ContentSequence { tokens: (0..len).map(|_| rng.below(vocab as u64) as usize).collect() }
    }
}

// ------------------------------------------------------- synthetic targets

/// Deterministic content vector for a token, shared across speakers.
pub fn token_content(content_seed: u64, token: usize, d_content: usize) -> Vec<f64> {
    RngStream::derive(content_seed, "token", token as u64).normals(d_content)
}

/// Noiseless reference features for a content sequence spoken by a corpus
/// speaker: each token holds its content vector for FRAMES_PER_TOKEN frames
/// through the corpus mixing, on top of the speaker's constant signature.
/// Reusing the mixing keeps the corpus-trained oracles applicable.
pub fn render_target(
    corpus: &Corpus,
    speaker_index: usize,
    content: &ContentSequence,
    content_seed: u64,
) -> Result<FeatureSequence> {
    if speaker_index >= corpus.speakers.len() {
        return Err(Error::argument(format!("render_target: speaker index {speaker_index} out of range")));
    }
    let speaker = &corpus.speakers[speaker_index];
    let mixing = &corpus.mixing;
    let f = mixing.feature_dim();
    let d_c = mixing.a.shape[1];
    let d_s = mixing.b.shape[1];
    let mut spk = vec![0.0f64; f];
    for (i, s) in spk.iter_mut().enumerate() {
        for k in 0..d_s {
            *s += mixing.b.at2(i, k) * speaker.latent[k];
        }
    }
    let t_out = FRAMES_PER_TOKEN * content.len();
    let mut data = Vec::with_capacity(t_out * f);
    for &tok in &content.tokens {
        let c = token_content(content_seed, tok, d_c);
        let mut frame = vec![0.0f32; f];
        for (fi, v) in frame.iter_mut().enumerate() {
            let mut acc = spk[fi];
            for k in 0..d_c {
                acc += mixing.a.at2(fi, k) * c[k];
            }
            *v = acc as f32;
        }
        for _ in 0..FRAMES_PER_TOKEN {
            data.extend_from_slice(&frame);
        }
    }
    Ok(FeatureSequence {
        utterance_id: format!("synth_{}", speaker.speaker_id),
        frames: Tensor { shape: vec![t_out, f], data },
        frame_rate: FRAME_RATE,
    })
}

// ----------------------------------------------------------------- forward

/// In-graph speaker projection to the conditioning space.
fn project_cond<E: Scalar>(tape: &mut Tape<E>, emb: NodeId, nodes: &NodeMap) -> Result<NodeId> {
    let w = nodes.id("proj.w")?;
    let b = nodes.id("proj.b")?;
    let y = tape.matmul(emb, w)?;
    tape.add_row(y, b)
}

/// Evaluate the trained projection outside a graph.
pub fn project64(embedding: &[f64], params: &ParamSet) -> Result<Vec<f64>> {
    let w = params.get("proj.w")?;
    let b = params.get("proj.b")?;
    if embedding.len() != w.nrows() {
        return Err(Error::shape(format!(
            "project64: embedding dim {} != projection input {}",
            embedding.len(),
            w.nrows()
        )));
    }
    let k = w.ncols();
    let mut out = vec![0.0f64; k];
    for (j, o) in out.iter_mut().enumerate() {
        let mut acc = b.data[j] as f64;
        for (i, &x) in embedding.iter().enumerate() {
            acc += x * w.at2(i, j) as f64;
        }
        *o = acc;
    }
    Ok(out)
}

fn one_hot<E: Scalar>(tokens: &[usize], vocab: usize) -> Tensor<E> {
    let mut t = Tensor::zeros(vec![tokens.len(), vocab]);
    for (i, &tok) in tokens.iter().enumerate() {
        t.data[i * vocab + tok] = E::from_f64(1.0);
    }
    t
}

fn upsample_matrix<E: Scalar>(l: usize) -> Tensor<E> {
    let t_out = FRAMES_PER_TOKEN * l;
    let mut u = Tensor::zeros(vec![t_out, l]);
    for r in 0..t_out {
        u.data[r * l + r / FRAMES_PER_TOKEN] = E::from_f64(1.0);
    }
    u
}

/// Build the synthesizer graph. `emb` is a [1, embed_dim] node; the
/// projected conditioning vector feeds every enabled site, zeros feed the
/// rest. With `teacher` frames the decoder is teacher-forced; otherwise it
/// runs free on its own predictions.
fn synth_graph<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &SynthConfig,
    nodes: &NodeMap,
    content: &ContentSequence,
    emb: NodeId,
    teacher: Option<&Tensor<E>>,
) -> Result<NodeId> {
    cfg.validate()?;
    content.validate(cfg.vocab)?;
    let l = content.len();
    let t_out = FRAMES_PER_TOKEN * l;
    let (k, f, d) = (cfg.cond_dim, cfg.out_dim, cfg.decoder_width);
    if let Some(t) = teacher {
        if t.shape != vec![t_out, f] {
            return Err(Error::shape(format!(
                "synth_graph: teacher frames {:?}, expected [{t_out}, {f}]",
                t.shape
            )));
        }
    }
    let cond = project_cond(tape, emb, nodes)?;
    let zero_cond = tape.input(Tensor::zeros(vec![1, k]));
    let site = |enabled: bool| if enabled { cond } else { zero_cond };

    // encoder: token embedding then two k=3 conv layers
    let oh = tape.input(one_hot(&content.tokens, cfg.vocab));
    let tok = nodes.id("tok.e")?;
    let mut h = tape.matmul(oh, tok)?;
    for layer in ["enc0", "enc1"] {
        let w = nodes.id(&format!("{layer}.w"))?;
        let b = nodes.id(&format!("{layer}.b"))?;
        let c = tape.conv1d(h, w, b, 3, 1)?;
        h = tape.relu(c);
    }
    // attach the attn-site conditioning to every encoder position
    let ones_l = tape.input(Tensor { shape: vec![l, 1], data: vec![E::from_f64(1.0); l] });
    let attn_rep = tape.matmul(ones_l, site(cfg.injection.attn))?;
    let enc_cat = tape.concat(&[h, attn_rep], 1)?;
    let up = tape.input(upsample_matrix::<E>(t_out / FRAMES_PER_TOKEN));
    let enc_up = tape.matmul(up, enc_cat)?;

    // teacher-forced decoder inputs are the shifted real frames
    let prev_all = teacher.map(|t| {
        let mut shifted = Tensor::zeros(vec![t_out, f]);
        shifted.data[f..].copy_from_slice(&t.data[..(t_out - 1) * f]);
        tape.input(shifted)
    });

    let (w1, b1) = (nodes.id("dec1.w")?, nodes.id("dec1.b")?);
    let (w2, b2) = (nodes.id("dec2.w")?, nodes.id("dec2.b")?);
    let (wo, bo) = (nodes.id("out.w")?, nodes.id("out.b")?);
    let zero_frame = tape.input(Tensor::zeros(vec![1, f]));
    let zero_state = tape.input(Tensor::zeros(vec![1, d]));
    let pre_cond = site(cfg.injection.pre);
    let mut h1 = zero_state;
    let mut h2 = zero_state;
    let mut prev = zero_frame;
    let mut frames = Vec::with_capacity(t_out);
    for t in 0..t_out {
        if t > 0 {
            prev = match prev_all {
                Some(pa) => tape.slice(pa, 0, t, 1)?,
                None => frames[t - 1],
            };
        }
        let enc_t = tape.slice(enc_up, 0, t, 1)?;
        let x = tape.concat(&[prev, enc_t, pre_cond], 1)?;
        let x1 = tape.concat(&[x, h1], 1)?;
        let a1 = tape.matmul(x1, w1)?;
        let a1b = tape.add_row(a1, b1)?;
        h1 = tape.tanh(a1b);
        let x2 = tape.concat(&[h1, h2], 1)?;
        let a2 = tape.matmul(x2, w2)?;
        let a2b = tape.add_row(a2, b2)?;
        h2 = tape.tanh(a2b);
        let y = tape.matmul(h2, wo)?;
        let yb = tape.add_row(y, bo)?;
        frames.push(yb);
    }
    let y_dec = tape.concat(&frames, 0)?;

    // postnet refinement with the post-site conditioning attached per frame
    let ones_t = tape.input(Tensor { shape: vec![t_out, 1], data: vec![E::from_f64(1.0); t_out] });
    let post_rep = tape.matmul(ones_t, site(cfg.injection.post))?;
    let mut p = tape.concat(&[y_dec, post_rep], 1)?;
    for (layer, act) in [("post0", true), ("post1", true), ("post2", false)] {
        let w = nodes.id(&format!("{layer}.w"))?;
        let b = nodes.id(&format!("{layer}.b"))?;
        let c = tape.conv1d(p, w, b, 3, 1)?;
        p = if act { tape.relu(c) } else { c };
    }
    tape.add(y_dec, p)
}

fn mse_loss<E: Scalar>(tape: &mut Tape<E>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq))
}

/// Teacher-forced MSE loss node for one (content, embedding, target) triple;
/// the gradient-check entry point into the full synthesizer graph.
pub fn teacher_loss<E: Scalar>(
    tape: &mut Tape<E>,
    cfg: &SynthConfig,
    nodes: &NodeMap,
    content: &ContentSequence,
    emb: NodeId,
    target: &Tensor<E>,
) -> Result<NodeId> {
    let pred = synth_graph(tape, cfg, nodes, content, emb, Some(target))?;
    let tgt = tape.input(target.clone());
    mse_loss(tape, pred, tgt)
}

// ------------------------------------------------------------------- model

#[derive(Clone, Debug)]
pub struct SynthModel {
    pub config: SynthConfig,
    pub params: ParamSet,
}

impl SynthModel {
    pub fn init(config: SynthConfig, seed: u64) -> Result<SynthModel> {
        let params = config.init_params(seed)?;
        Ok(SynthModel { config, params })
    }

    /// Free-running deterministic generation of FRAMES_PER_TOKEN frames per
    /// token, conditioned on a raw speaker embedding.
    pub fn generate(&self, content: &ContentSequence, embedding: &[f64]) -> Result<FeatureSequence> {
        if embedding.len() != self.config.embed_dim {
            return Err(Error::shape(format!(
                "generate: embedding dim {} != configured {}",
                embedding.len(),
                self.config.embed_dim
            )));
        }
        let mut tape: Tape<f32> = Tape::new();
        let nodes = register_params(&mut tape, &self.params);
        let emb = tape.input(Tensor {
            shape: vec![1, embedding.len()],
            data: embedding.iter().map(|&v| v as f32).collect(),
        });
        let out = synth_graph(&mut tape, &self.config, &nodes, content, emb, None)?;
        Ok(FeatureSequence {
            utterance_id: "generated".into(),
            frames: tape.value(out).clone(),
            frame_rate: FRAME_RATE,
        })
    }
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug)]
pub struct SynthTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sentence_min: usize,
    pub sentence_max: usize,
    /// Token content vectors derive from this seed; shared between training
    /// targets and evaluation sentences.
    pub content_seed: u64,
    pub seed: u64,
}

impl Default for SynthTrainConfig {
    fn default() -> Self {
        SynthTrainConfig {
            steps: 300,
            batch_size: 8,
            lr: 0.02,
            momentum: 0.9,
            sentence_min: 6,
            sentence_max: 10,
            content_seed: 29,
            seed: 11,
        }
    }
}

impl SynthTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::argument("synth train: batch_size must be > 0"));
        }
        if self.sentence_min == 0 || self.sentence_min > self.sentence_max {
            return Err(Error::argument("synth train: need 0 < sentence_min <= sentence_max"));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::argument("synth train: lr must be >= 0 and momentum in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthTrainOutcome {
    pub model: SynthModel,
    pub loss_log: Vec<f64>,
}

/// Teacher-forced MSE training against rendered reference features, with
/// conditioning embeddings taken from the verification model's speaker
/// means. Seeded and deterministic.
pub fn train_synth(
    corpus: &Corpus,
    table: &SpeakerEmbeddingTable,
    scfg: &SynthConfig,
    tcfg: &SynthTrainConfig,
    warm: Option<&ParamSet>,
) -> Result<SynthTrainOutcome> {
    tcfg.validate()?;
    if scfg.out_dim != corpus.spec.feature_dim {
        return Err(Error::shape(format!(
            "train_synth: out_dim {} != corpus feature dim {}",
            scfg.out_dim, corpus.spec.feature_dim
        )));
    }
    let reference = scfg.init_params(tcfg.seed)?;
    let mut conds: Vec<Tensor<f32>> = Vec::with_capacity(corpus.spec.n_train);
    for speaker in &corpus.speakers[..corpus.spec.n_train] {
        let emb = table.speaker_mean.get(&speaker.speaker_id).ok_or_else(|| {
            Error::argument(format!(
                "train_synth: no embedding for training speaker {}",
                speaker.speaker_id
            ))
        })?;
        if emb.len() != scfg.embed_dim {
            return Err(Error::shape(format!(
                "train_synth: speaker embedding dim {} != configured {}",
                emb.len(),
                scfg.embed_dim
            )));
        }
        conds.push(Tensor {
            shape: vec![1, emb.len()],
            data: emb.iter().map(|&v| v as f32).collect(),
        });
    }
    let mut params = match warm {
        Some(p) => {
            for (name, t) in &reference.entries {
                if p.get(name)?.shape != t.shape {
                    return Err(Error::shape(format!(
                        "train_synth: warm-start tensor `{name}` has wrong shape"
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
        .map(|(name, t)| (name.clone(), vec![0.0; t.data.len()]))
        .collect();
    let mut rng = RngStream::derive(tcfg.seed, "synth-batches", 0);
    let mut loss_log = Vec::with_capacity(tcfg.steps);
    for step in 0..tcfg.steps {
        let mut tape: Tape<f32> = Tape::new();
        let nodes = register_params(&mut tape, &params);
        let mut losses = Vec::with_capacity(tcfg.batch_size);
        for _ in 0..tcfg.batch_size {
            let si = rng.below(conds.len() as u64) as usize;
            let len = tcfg.sentence_min
                + rng.below((tcfg.sentence_max - tcfg.sentence_min + 1) as u64) as usize;
            let content = ContentSequence::sample(scfg.vocab, len, &mut rng);
            let target = render_target(corpus, si, &content, tcfg.content_seed)?;
            let emb = tape.input(conds[si].clone());
            let pred = synth_graph(&mut tape, scfg, &nodes, &content, emb, Some(&target.frames))?;
            let tgt = tape.input(target.frames);
            losses.push(mse_loss(&mut tape, pred, tgt)?);
        }
        let cat = tape.concat(&losses, 0)?;
        let loss = tape.mean_all(cat);
        let loss_val = tape.value(loss).item() as f64;
        if !loss_val.is_finite() {
            return Err(Error::numeric(format!(
                "train_synth: non-finite loss {loss_val} at step {step}"
            )));
        }
        let grads = tape.forward_backward(loss)?;
        for (name, &nid) in nodes.iter() {
            let Some(grad) = grads.get(&nid) else { continue };
            let vel = velocity.get_mut(name).expect("velocity buffer");
            let p = params.get_mut(name)?;
            for ((pv, vv), &gv) in p.data.iter_mut().zip(vel.iter_mut()).zip(&grad.data) {
                *vv = tcfg.momentum as f32 * *vv - tcfg.lr as f32 * gv;
                *pv += *vv;
            }
        }
        loss_log.push(loss_val);
    }
    Ok(SynthTrainOutcome { model: SynthModel { config: scfg.clone(), params }, loss_log })
}

// ------------------------------------------------------------- persistence

pub fn synth_config_doc(scfg: &SynthConfig, tcfg: &SynthTrainConfig) -> ConfigDoc {
    let mut doc = ConfigDoc::default();
    doc.set("synth", "sites", scfg.injection.label());
    doc.set("synth", "vocab", scfg.vocab);
    doc.set("synth", "encoder_width", scfg.encoder_width);
    doc.set("synth", "decoder_width", scfg.decoder_width);
    doc.set("synth", "cond_dim", scfg.cond_dim);
    doc.set("synth", "out_dim", scfg.out_dim);
    doc.set("synth", "embed_dim", scfg.embed_dim);
    doc.set("synth_train", "steps", tcfg.steps);
    doc.set("synth_train", "batch_size", tcfg.batch_size);
    doc.set("synth_train", "lr", tcfg.lr);
    doc.set("synth_train", "momentum", tcfg.momentum);
    doc.set("synth_train", "sentence_min", tcfg.sentence_min);
    doc.set("synth_train", "sentence_max", tcfg.sentence_max);
    doc.set("synth_train", "content_seed", tcfg.content_seed);
    doc.set("synth_train", "seed", tcfg.seed);
    doc
}

pub fn synth_config_from_doc(doc: &ConfigDoc) -> Result<(SynthConfig, SynthTrainConfig)> {
    let mut scfg = SynthConfig::default();
    if doc.section("synth").is_some() {
        let mut r = doc.reader("synth")?;
        if let Some(s) = r.opt_str("sites") {
            scfg.injection = InjectionSites::parse(s)?;
        }
        scfg.vocab = r.parse_or("vocab", scfg.vocab)?;
        scfg.encoder_width = r.parse_or("encoder_width", scfg.encoder_width)?;
        scfg.decoder_width = r.parse_or("decoder_width", scfg.decoder_width)?;
        scfg.cond_dim = r.parse_or("cond_dim", scfg.cond_dim)?;
        scfg.out_dim = r.parse_or("out_dim", scfg.out_dim)?;
        scfg.embed_dim = r.parse_or("embed_dim", scfg.embed_dim)?;
        r.finish()?;
    }
    let mut tcfg = SynthTrainConfig::default();
    if doc.section("synth_train").is_some() {
        let mut r = doc.reader("synth_train")?;
        tcfg.steps = r.parse_or("steps", tcfg.steps)?;
        tcfg.batch_size = r.parse_or("batch_size", tcfg.batch_size)?;
        tcfg.lr = r.parse_or("lr", tcfg.lr)?;
        tcfg.momentum = r.parse_or("momentum", tcfg.momentum)?;
        tcfg.sentence_min = r.parse_or("sentence_min", tcfg.sentence_min)?;
        tcfg.sentence_max = r.parse_or("sentence_max", tcfg.sentence_max)?;
        tcfg.content_seed = r.parse_or("content_seed", tcfg.content_seed)?;
        tcfg.seed = r.parse_or("seed", tcfg.seed)?;
        r.finish()?;
    }
    scfg.validate()?;
    tcfg.validate()?;
    Ok((scfg, tcfg))
}

pub fn synth_checkpoint(
    scfg: &SynthConfig,
    tcfg: &SynthTrainConfig,
    model: &SynthModel,
) -> Checkpoint {
    Checkpoint {
        tensors: model.params.clone(),
        config_text: synth_config_doc(scfg, tcfg).render(),
    }
}

pub fn synth_from_checkpoint(
    ckpt: &Checkpoint,
) -> Result<(SynthConfig, SynthTrainConfig, SynthModel)> {
    let (scfg, tcfg) = synth_config_from_doc(&ConfigDoc::parse(&ckpt.config_text)?)?;
    let reference = scfg.init_params(0)?;
    for (name, t) in &reference.entries {
        if ckpt.tensors.get(name)?.shape != t.shape {
            return Err(Error::shape(format!("synth checkpoint: tensor `{name}` has wrong shape")));
        }
    }
    for name in ckpt.tensors.entries.keys() {
        if !reference.entries.contains_key(name) {
            return Err(Error::format(0, format!("synth checkpoint: unexpected tensor `{name}`")));
        }
    }
    Ok((scfg.clone(), tcfg, SynthModel { config: scfg, params: ckpt.tensors.clone() }))
}

// --------------------------------------------------------------- ablation

#[derive(Clone, Debug)]
pub struct SimilarityRow {
    pub speaker_id: String,
    pub seen: bool,
    pub similarity: f64,
}

#[derive(Clone, Debug)]
pub struct SimilarityTable {
    pub rows: Vec<SimilarityRow>,
    pub seen_avg: f64,
    pub unseen_avg: f64,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub n_sentences: usize,
    pub sentence_len: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_sentences: 3, sentence_len: 8, seed: 41 }
    }
}

/// Table 2 protocol at desk scale: generate sentences per speaker, re-embed
/// them with the verification model, and compare the averaged synthetic
/// embedding against the speaker's real-speech average. Unseen speakers are
/// zero-shot: their conditioning is the adaptation-utterance mean and no
/// parameter is updated.
pub fn eval_similarity(
    synth: &SynthModel,
    sv: &EmbedModel,
    corpus: &Corpus,
    table: &SpeakerEmbeddingTable,
    ecfg: &EvalConfig,
) -> Result<SimilarityTable> {
    if ecfg.n_sentences == 0 || ecfg.sentence_len == 0 {
        return Err(Error::argument("eval_similarity: need n_sentences and sentence_len > 0"));
    }
    let mut rows = Vec::new();
    let (mut seen_sum, mut seen_n, mut unseen_sum, mut unseen_n) = (0.0, 0usize, 0.0, 0usize);
    for (si, speaker) in corpus.speakers.iter().enumerate() {
        let spk = &speaker.speaker_id;
        let real_mean = table
            .speaker_mean
            .get(spk)
            .ok_or_else(|| Error::argument(format!("eval_similarity: no embedding for {spk}")))?;
        let mut synth_embs: Vec<Vec<f64>> = Vec::with_capacity(ecfg.n_sentences);
        for s in 0..ecfg.n_sentences {
            let mut rng = RngStream::derive(ecfg.seed, spk, s as u64);
            let content = ContentSequence::sample(synth.config.vocab, ecfg.sentence_len, &mut rng);
            let generated = synth.generate(&content, real_mean)?;
            if !generated.frames.all_finite() {
                return Err(Error::numeric(format!(
                    "eval_similarity: non-finite generation for speaker {spk}"
                )));
            }
            synth_embs.push(sv.extract(&generated)?.vector);
        }
        let d = synth_embs[0].len();
        let mut avg = vec![0.0; d];
        for e in &synth_embs {
            for j in 0..d {
                avg[j] += e[j] / synth_embs.len() as f64;
            }
        }
        let similarity = cosine_score(&avg, real_mean)?;
        let seen = si < corpus.spec.n_train;
        if seen {
            seen_sum += similarity;
            seen_n += 1;
        } else {
            unseen_sum += similarity;
            unseen_n += 1;
        }
        rows.push(SimilarityRow { speaker_id: spk.clone(), seen, similarity });
    }
    if seen_n == 0 || unseen_n == 0 {
        return Err(Error::argument("eval_similarity: need both seen and unseen speakers"));
    }
    Ok(SimilarityTable {
        rows,
        seen_avg: seen_sum / seen_n as f64,
        unseen_avg: unseen_sum / unseen_n as f64,
    })
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub sites: String,
    pub seen_avg: f64,
    pub unseen_avg: f64,
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut out = String::from("sites\tseen_avg\tunseen_avg\n");
    for r in rows {
        out.push_str(&format!("{}\t{:.6}\t{:.6}\n", r.sites, r.seen_avg, r.unseen_avg));
    }
    out
}

/// Train one synthesizer per injection-site combination under identical
/// seeds and report seen/unseen similarity averages for each.
pub fn ablate(
    corpus: &Corpus,
    table: &SpeakerEmbeddingTable,
    sv: &EmbedModel,
    base: &SynthConfig,
    tcfg: &SynthTrainConfig,
    ecfg: &EvalConfig,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for sites in InjectionSites::evaluated() {
        let scfg = SynthConfig { injection: sites, ..base.clone() };
        let trained = train_synth(corpus, table, &scfg, tcfg, None).map_err(|e| {
            Error::contract(format!("ablate: sites `{}`: {e}", sites.label()))
        })?;
        let sim = eval_similarity(&trained.model, sv, corpus, table, ecfg).map_err(|e| {
            Error::contract(format!("ablate: sites `{}`: {e}", sites.label()))
        })?;
        rows.push(AblationRow {
            sites: sites.label(),
            seen_avg: sim.seen_avg,
            unseen_avg: sim.unseen_avg,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::gradcheck::grad_check;
    use crate::svpipe::{extract_all, ExperimentConfig};
    use crate::synthdata::corpus::CorpusSpec;

    fn tiny_synth() -> SynthConfig {
        SynthConfig {
            vocab: 6,
            encoder_width: 6,
            decoder_width: 6,
            cond_dim: 5,
            out_dim: 4,
            embed_dim: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn site_combinations_and_labels() {
        let combos = InjectionSites::evaluated();
        let labels: Vec<String> = combos.iter().map(|c| c.label()).collect();
        assert_eq!(labels, ["pre", "attn", "pre+attn", "pre+attn+post"]);
        for c in combos {
            c.validate().unwrap();
            assert_eq!(InjectionSites::parse(&c.label()).unwrap(), c);
        }
        assert!(InjectionSites { pre: false, attn: false, post: false }.validate().is_err());
        assert!(InjectionSites::parse("prenet").is_err());
    }

    #[test]
    fn projection_outputs_cond_dim() {
        let cfg = SynthConfig::default();
        let params = cfg.init_params(1).unwrap();
        let out = project64(&vec![0.3; cfg.embed_dim], &params).unwrap();
        assert_eq!(out.len(), 64);
        // zero embedding with the zero-initialized bias gives a zero vector
        let zero = project64(&vec![0.0; cfg.embed_dim], &params).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(project64(&[1.0, 2.0], &params).is_err());
    }

    #[test]
    fn generation_shape_and_token_validation() {
        let cfg = tiny_synth();
        let model = SynthModel::init(cfg.clone(), 2).unwrap();
        let content = ContentSequence { tokens: vec![0, 3, 5, 1, 2] };
        let out = model.generate(&content, &[0.1, -0.2, 0.4]).unwrap();
        assert_eq!(out.frames.shape, vec![FRAMES_PER_TOKEN * 5, cfg.out_dim]);
        let bad = ContentSequence { tokens: vec![0, 6] };
        assert!(model.generate(&bad, &[0.1, -0.2, 0.4]).is_err());
    }

    #[test]
    fn conditioning_changes_output() {
        let model = SynthModel::init(tiny_synth(), 2).unwrap();
        let content = ContentSequence { tokens: vec![1, 2, 3] };
        let a = model.generate(&content, &[0.5, -0.3, 0.2]).unwrap();
        let b = model.generate(&content, &[-0.7, 0.9, -0.1]).unwrap();
        let dist: f32 = a
            .frames
            .data
            .iter()
            .zip(&b.frames.data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(dist > 0.0, "conditioning had no effect");
    }

    #[test]
    fn zero_cond_makes_all_site_combos_identical() {
        let content = ContentSequence { tokens: vec![2, 0, 4] };
        let zero_emb = vec![0.0; 3];
        let outputs: Vec<Vec<f32>> = InjectionSites::evaluated()
            .iter()
            .map(|&injection| {
                let cfg = SynthConfig { injection, ..tiny_synth() };
                let model = SynthModel::init(cfg, 9).unwrap();
                model.generate(&content, &zero_emb).unwrap().frames.data
            })
            .collect();
        for o in &outputs[1..] {
            assert_eq!(*o, outputs[0]);
        }
    }

    #[test]
    fn grad_check_through_projection_and_loss() {
        let cfg = SynthConfig { injection: InjectionSites::parse("pre+attn+post").unwrap(), ..tiny_synth() };
        let params = cfg.init_params(4).unwrap();
        let content = ContentSequence { tokens: vec![1, 4] };
        let mut rng = RngStream::new(8);
        let point = Tensor { shape: vec![1, 3], data: rng.normals(3) };
        let target = Tensor {
            shape: vec![FRAMES_PER_TOKEN * 2, cfg.out_dim],
            data: rng.normals(FRAMES_PER_TOKEN * 2 * cfg.out_dim),
        };
        let err = grad_check(
            move |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                let nodes = register_params(tape, &params);
                let pred = synth_graph(tape, &cfg, &nodes, &content, inputs[0], Some(&target))?;
                let tgt = tape.input(target.clone());
                mse_loss(tape, pred, tgt)
            },
            &[point],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "synth grad err {err}");
    }

    #[test]
    fn render_target_is_deterministic_and_tokenwise_constant() {
        let spec = CorpusSpec {
            n_train: 2,
            n_dev: 1,
            n_test: 0,
            utts_per_speaker: 2,
            adaptation_utts: 1,
            duration_s: 0.3,
            ..CorpusSpec::default()
        };
        let corpus = Corpus::generate(&spec).unwrap();
        let content = ContentSequence { tokens: vec![3, 3, 1] };
        let a = render_target(&corpus, 0, &content, 7).unwrap();
        let b = render_target(&corpus, 0, &content, 7).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frames.shape, vec![12, spec.feature_dim]);
        // repeated token renders identical frame blocks
        assert_eq!(a.frames.data[..30], a.frames.data[4 * 30..5 * 30]);
        // different speakers differ
        let c = render_target(&corpus, 1, &content, 7).unwrap();
        assert_ne!(a.frames.data, c.frames.data);
    }

    fn pipeline_fixture() -> (Corpus, EmbedModel, SpeakerEmbeddingTable, SynthConfig) {
        let spec = CorpusSpec {
            n_train: 3,
            n_dev: 2,
            n_test: 0,
            utts_per_speaker: 4,
            adaptation_utts: 2,
            duration_s: 0.5,
            feature_dim: 12,
            d_content: 4,
            d_speaker: 4,
            augment: false,
            seed: 13,
        };
        let exp = ExperimentConfig {
            encoder: crate::svpipe::desk_tdnn(12, 10),
            corpus: spec.clone(),
            embed_dim: 6,
            ..ExperimentConfig::default()
        };
        let corpus = Corpus::generate(&spec).unwrap();
        let sv = EmbedModel::init(exp.embed_config().unwrap(), 5).unwrap();
        let table = extract_all(&sv, &corpus, &exp.preproc).unwrap();
        let scfg = SynthConfig {
            vocab: 8,
            encoder_width: 8,
            decoder_width: 8,
            cond_dim: 6,
            out_dim: 12,
            embed_dim: 6,
            ..SynthConfig::default()
        };
        (corpus, sv, table, scfg)
    }

    fn quick_train() -> SynthTrainConfig {
        SynthTrainConfig { steps: 6, batch_size: 2, sentence_min: 3, sentence_max: 5, ..SynthTrainConfig::default() }
    }

    #[test]
    fn training_is_deterministic_and_decreases_loss() {
        let (corpus, _, table, scfg) = pipeline_fixture();
        let mut tcfg = quick_train();
        tcfg.steps = 40;
        let a = train_synth(&corpus, &table, &scfg, &tcfg, None).unwrap();
        let b = train_synth(&corpus, &table, &scfg, &tcfg, None).unwrap();
        assert_eq!(a.loss_log, b.loss_log);
        let ca = crate::ckpt::to_bytes(&synth_checkpoint(&scfg, &tcfg, &a.model)).unwrap();
        let cb = crate::ckpt::to_bytes(&synth_checkpoint(&scfg, &tcfg, &b.model)).unwrap();
        assert_eq!(ca, cb);
        let first = a.loss_log[0];
        let last = *a.loss_log.last().unwrap();
        assert!(last < first, "synth loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        let (corpus, _, table, scfg) = pipeline_fixture();
        let mut tcfg = quick_train();
        tcfg.lr = 0.0;
        let init = scfg.init_params(tcfg.seed).unwrap();
        let out = train_synth(&corpus, &table, &scfg, &tcfg, None).unwrap();
        assert_eq!(out.model.params, init);
    }

    #[test]
    fn missing_speaker_embedding_is_named() {
        let (corpus, _, mut table, scfg) = pipeline_fixture();
        table.speaker_mean.remove("spk0001");
        let err = train_synth(&corpus, &table, &scfg, &quick_train(), None).unwrap_err();
        assert!(err.to_string().contains("spk0001"), "{err}");
    }

    #[test]
    fn synth_checkpoint_roundtrip() {
        let (corpus, _, table, scfg) = pipeline_fixture();
        let tcfg = quick_train();
        let out = train_synth(&corpus, &table, &scfg, &tcfg, None).unwrap();
        let ck = synth_checkpoint(&scfg, &tcfg, &out.model);
        let bytes = crate::ckpt::to_bytes(&ck).unwrap();
        let (scfg2, tcfg2, model2) =
            synth_from_checkpoint(&crate::ckpt::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(scfg2.injection, scfg.injection);
        assert_eq!(tcfg2.steps, tcfg.steps);
        assert_eq!(model2.params, out.model.params);
    }

    #[test]
    fn similarity_table_structure_and_bounds() {
        let (corpus, sv, table, scfg) = pipeline_fixture();
        let out = train_synth(&corpus, &table, &scfg, &quick_train(), None).unwrap();
        let ecfg = EvalConfig { n_sentences: 2, sentence_len: 4, seed: 3 };
        let before = crate::ckpt::to_bytes(&synth_checkpoint(&scfg, &quick_train(), &out.model)).unwrap();
        let sim = eval_similarity(&out.model, &sv, &corpus, &table, &ecfg).unwrap();
        // zero-shot: evaluation leaves the synthesizer untouched
        let after = crate::ckpt::to_bytes(&synth_checkpoint(&scfg, &quick_train(), &out.model)).unwrap();
        assert_eq!(before, after);
        assert_eq!(sim.rows.len(), 5);
        assert_eq!(sim.rows.iter().filter(|r| r.seen).count(), 3);
        for r in &sim.rows {
            assert!((-1.0..=1.0).contains(&r.similarity), "similarity {} out of range", r.similarity);
        }
        let again = eval_similarity(&out.model, &sv, &corpus, &table, &ecfg).unwrap();
        assert_eq!(sim.seen_avg, again.seen_avg);
        assert_eq!(sim.unseen_avg, again.unseen_avg);
    }

    #[test]
    fn ablation_grid_shape_and_determinism() {
        let (corpus, sv, table, scfg) = pipeline_fixture();
        let tcfg = quick_train();
        let ecfg = EvalConfig { n_sentences: 1, sentence_len: 3, seed: 17 };
        let rows = ablate(&corpus, &table, &sv, &scfg, &tcfg, &ecfg).unwrap();
        assert_eq!(rows.len(), 4);
        let tsv = ablation_tsv(&rows);
        let mut lines = tsv.lines();
        assert_eq!(lines.next().unwrap(), "sites\tseen_avg\tunseen_avg");
        for (line, expect) in lines.zip(["pre", "attn", "pre+attn", "pre+attn+post"]) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 3);
            assert_eq!(cols[0], expect);
            cols[1].parse::<f64>().unwrap();
            cols[2].parse::<f64>().unwrap();
        }
        let rows2 = ablate(&corpus, &table, &sv, &scfg, &tcfg, &ecfg).unwrap();
        assert_eq!(ablation_tsv(&rows2), tsv);
    }

    #[test]
    fn synth_config_doc_roundtrip() {
        let scfg = SynthConfig { injection: InjectionSites::parse("attn").unwrap(), vocab: 11, ..SynthConfig::default() };
        let tcfg = SynthTrainConfig { steps: 77, ..SynthTrainConfig::default() };
        let text = synth_config_doc(&scfg, &tcfg).render();
        let (s2, t2) = synth_config_from_doc(&ConfigDoc::parse(&text).unwrap()).unwrap();
        assert_eq!(synth_config_doc(&s2, &t2).render(), text);
        let mut doc = synth_config_doc(&scfg, &tcfg);
        doc.set("synth", "bogus", 1);
        assert!(synth_config_from_doc(&doc).is_err());
    }
}
