//! `svlab`: command-line surface over the speaker embedding laboratory.
//! Every subcommand is seeded and writes its artifacts atomically with the
//! resolved configuration alongside.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use svlab_core::backend::write_scores;
use svlab_core::ckpt::{read_checkpoint, write_checkpoint};
use svlab_core::config::{write_atomic, ConfigDoc};
use svlab_core::embednet::{
    classify_loss, encode, lde_pool, register_params, EmbedConfig, EncoderConfig, LdeComponents,
    MarginConfig, Mode, PoolingConfig, TdnnLayer,
};
use svlab_core::error::{Error, Result};
use svlab_core::metrics::{report, DcfParams, ScoreSet};
use svlab_core::substrate::gradcheck::grad_check;
use svlab_core::substrate::rng::RngStream;
use svlab_core::substrate::tape::{NodeId, Tape};
use svlab_core::substrate::tensor::Tensor;
use svlab_core::svpipe::{
    backend_from_checkpoint, backend_to_checkpoint, build_trials, extract_all, extract_subset,
    fit_backend, grid_tsv, model_checkpoint, model_from_checkpoint, run_grid, run_trials,
    table1_configs, table_from_text, table_to_text, train_sv, ExperimentConfig,
};
use svlab_core::synthdata::corpus::{Corpus, CorpusSpec};
use svlab_core::synthdata::sfea::write_features;
use svlab_core::synthdata::trials::{TrialLabel, TrialList};
use svlab_core::ttsablation::{
    ablate, ablation_tsv, eval_similarity, synth_checkpoint, synth_config_doc,
    synth_config_from_doc, teacher_loss, train_synth, ContentSequence, EvalConfig, SynthConfig,
    SynthTrainConfig,
};

#[derive(Parser)]
#[command(name = "svlab", version, about = "Speaker embedding laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus: features, trial list, resolved config
    GenData(GenDataArgs),
    /// Train the speaker embedding network
    TrainSv(TrainSvArgs),
    /// Extract embeddings with a trained model
    Extract(ExtractArgs),
    /// Fit the scoring backend (centering, LDA, PLDA, s-norm cohort)
    BackendFit(BackendFitArgs),
    /// Score a trial list
    Score(ScoreArgs),
    /// Compute EER and minDCF from scores and trial labels
    EvalMetrics(EvalMetricsArgs),
    /// Train the miniature conditional synthesizer
    TrainSynth(TrainSynthArgs),
    /// Run the injection-site ablation grid
    Ablate(AblateArgs),
    /// Train and evaluate the comparison systems, emitting a results table
    Grid(GridArgs),
    /// Verify analytic gradients against central differences
    GradCheck(GradCheckArgs),
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::TrainSv(a) => train_sv_cmd(a),
        Cmd::Extract(a) => extract_cmd(a),
        Cmd::BackendFit(a) => backend_fit_cmd(a),
        Cmd::Score(a) => score_cmd(a),
        Cmd::EvalMetrics(a) => eval_metrics_cmd(a),
        Cmd::TrainSynth(a) => train_synth_cmd(a),
        Cmd::Ablate(a) => ablate_cmd(a),
        Cmd::Grid(a) => grid_cmd(a),
        Cmd::GradCheck(a) => grad_check_cmd(a),
    }
}

fn load_experiment(config: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::from_text(&std::fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn sibling_config_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".cfg");
    PathBuf::from(s)
}

// ----------------------------------------------------------------- gen-data

#[derive(Args)]
struct GenDataArgs {
    /// Number of training speakers
    #[arg(long, default_value_t = 20)]
    speakers: usize,
    #[arg(long, default_value_t = 4)]
    dev: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    /// Utterances per speaker
    #[arg(long, default_value_t = 20)]
    utts: usize,
    /// Leading utterances of unseen speakers reserved for adaptation
    #[arg(long, default_value_t = 5)]
    adaptation: usize,
    /// Utterance duration in seconds
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    /// Add one channel-augmented copy per training utterance
    #[arg(long)]
    augment: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_train: a.speakers,
        n_dev: a.dev,
        n_test: a.test,
        utts_per_speaker: a.utts,
        adaptation_utts: a.adaptation,
        duration_s: a.duration,
        augment: a.augment,
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let corpus = Corpus::generate(&spec)?;
    let feat_dir = a.out.join("features");
    for utt in &corpus.utterances {
        let seq = corpus.render(utt)?;
        write_features(&feat_dir.join(format!("{}.sfea", utt.utterance_id)), &seq)?;
    }
    if spec.n_dev + spec.n_test >= 2 {
        let trials = build_trials(&corpus, a.seed)?;
        trials.write(&a.out.join("trials.txt"))?;
    }
    let mut doc = ExperimentConfig { corpus: spec, ..ExperimentConfig::default() }.to_doc();
    doc.sections.retain(|(name, _)| name == "corpus");
    write_text(&a.out.join("corpus.cfg"), &doc.render())
}

// ----------------------------------------------------------------- train-sv

#[derive(Args)]
struct TrainSvArgs {
    /// Experiment config file; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the experiment seed
    #[arg(long)]
    seed: Option<u64>,
    /// Warm-start checkpoint
    #[arg(long)]
    warm: Option<PathBuf>,
    /// Output model checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Optional per-step training loss log
    #[arg(long)]
    loss_log: Option<PathBuf>,
}

fn train_sv_cmd(a: TrainSvArgs) -> Result<()> {
    let cfg = load_experiment(a.config.as_deref(), a.seed)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let warm = match &a.warm {
        Some(p) => Some(model_from_checkpoint(&read_checkpoint(p)?)?.1.params),
        None => None,
    };
    let outcome = train_sv(&cfg, &corpus, warm.as_ref())?;
    write_checkpoint(&a.out, &model_checkpoint(&cfg, &outcome.model))?;
    if let Some(p) = &a.loss_log {
        let mut text = String::new();
        for l in &outcome.loss_log {
            text.push_str(&format!("{l}\n"));
        }
        write_text(p, &text)?;
    }
    Ok(())
}

// ------------------------------------------------------------------ extract

#[derive(Args)]
struct ExtractArgs {
    /// Trained model checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Comma-separated utterance ids; all clean utterances when omitted
    #[arg(long)]
    ids: Option<String>,
    /// Output embedding table
    #[arg(long)]
    out: PathBuf,
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.model)?;
    let (cfg, model) = model_from_checkpoint(&ckpt)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let table = match &a.ids {
        Some(list) => {
            let ids: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
            extract_subset(&model, &corpus, &cfg.preproc, &ids)?
        }
        None => extract_all(&model, &corpus, &cfg.preproc)?,
    };
    write_text(&a.out, &table_to_text(&table))?;
    write_text(&sibling_config_path(&a.out), &ckpt.config_text)
}

// -------------------------------------------------------------- backend-fit

#[derive(Args)]
struct BackendFitArgs {
    /// Trained model checkpoint; its embedded backend settings are used
    #[arg(long)]
    model: PathBuf,
    /// Precomputed embedding table; extracted fresh when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output backend checkpoint
    #[arg(long)]
    out: PathBuf,
}

fn backend_fit_cmd(a: BackendFitArgs) -> Result<()> {
    let (cfg, model) = model_from_checkpoint(&read_checkpoint(&a.model)?)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let table = match &a.embeddings {
        Some(p) => table_from_text(&std::fs::read_to_string(p)?)?,
        None => extract_all(&model, &corpus, &cfg.preproc)?,
    };
    let fitted = fit_backend(&table, &corpus, &cfg.backend)?;
    write_checkpoint(&a.out, &backend_to_checkpoint(&fitted))
}

// -------------------------------------------------------------------- score

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Fitted backend checkpoint; fitted fresh from the model when omitted
    #[arg(long)]
    backend: Option<PathBuf>,
    /// Trial list; built from the model's corpus when omitted
    #[arg(long)]
    trials: Option<PathBuf>,
    /// Precomputed embedding table; extracted fresh when omitted
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn score_cmd(a: ScoreArgs) -> Result<()> {
    let ckpt = read_checkpoint(&a.model)?;
    let (cfg, model) = model_from_checkpoint(&ckpt)?;
    let corpus = Corpus::generate(&cfg.corpus)?;
    let table = match &a.embeddings {
        Some(p) => table_from_text(&std::fs::read_to_string(p)?)?,
        None => extract_all(&model, &corpus, &cfg.preproc)?,
    };
    let backend = match &a.backend {
        Some(p) => backend_from_checkpoint(&read_checkpoint(p)?)?,
        None => fit_backend(&table, &corpus, &cfg.backend)?,
    };
    let trials = match &a.trials {
        Some(p) => TrialList::read(p)?,
        None => build_trials(&corpus, cfg.corpus.seed)?,
    };
    let (records, _) = run_trials(&table, &trials, &backend)?;
    write_scores(&a.out, &records)?;
    write_text(&sibling_config_path(&a.out), &ckpt.config_text)
}

// ------------------------------------------------------------- eval-metrics

#[derive(Args)]
struct EvalMetricsArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    trials: PathBuf,
}

fn eval_metrics_cmd(a: EvalMetricsArgs) -> Result<()> {
    let records = svlab_core::backend::read_scores(&a.scores)?;
    let trials = TrialList::read(&a.trials)?;
    let mut lookup = std::collections::BTreeMap::new();
    for r in &records {
        lookup.insert((r.enroll_id.as_str(), r.test_id.as_str()), r.score);
    }
    let mut set = ScoreSet { target_scores: Vec::new(), nontarget_scores: Vec::new() };
    for e in &trials.entries {
        let score = lookup
            .get(&(e.enroll_id.as_str(), e.test_id.as_str()))
            .copied()
            .ok_or_else(|| {
                Error::argument(format!("no score for trial {} {}", e.enroll_id, e.test_id))
            })?;
        match e.label {
            TrialLabel::Target => set.target_scores.push(score),
            TrialLabel::Nontarget => set.nontarget_scores.push(score),
        }
    }
    print!("{}", report(&set, &DcfParams::default())?);
    Ok(())
}

// -------------------------------------------------------------- train-synth

#[derive(Args)]
struct TrainSynthArgs {
    /// Synthesizer config file ([synth] / [synth_train] sections)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained verification model supplying corpus and embeddings
    #[arg(long)]
    sv_model: PathBuf,
    /// Override the synthesizer training seed
    #[arg(long)]
    seed: Option<u64>,
    /// Warm-start synthesizer checkpoint
    #[arg(long)]
    warm: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn load_synth_config(
    config: Option<&Path>,
    seed: Option<u64>,
    exp: &ExperimentConfig,
) -> Result<(SynthConfig, SynthTrainConfig)> {
    let (mut scfg, mut tcfg) = match config {
        Some(p) => synth_config_from_doc(&ConfigDoc::parse(&std::fs::read_to_string(p)?)?)?,
        None => (SynthConfig::default(), SynthTrainConfig::default()),
    };
    // the synthesizer consumes the verification model's embeddings and
    // imitates its corpus's features; resolve those dims from the model
    scfg.embed_dim = exp.embed_dim;
    scfg.out_dim = exp.corpus.feature_dim;
    if let Some(s) = seed {
        tcfg.seed = s;
    }
    Ok((scfg, tcfg))
}

fn train_synth_cmd(a: TrainSynthArgs) -> Result<()> {
    let (exp, sv) = model_from_checkpoint(&read_checkpoint(&a.sv_model)?)?;
    let (scfg, tcfg) = load_synth_config(a.config.as_deref(), a.seed, &exp)?;
    let corpus = Corpus::generate(&exp.corpus)?;
    let table = extract_all(&sv, &corpus, &exp.preproc)?;
    let warm = match &a.warm {
        Some(p) => Some(
            svlab_core::ttsablation::synth_from_checkpoint(&read_checkpoint(p)?)?.2.params,
        ),
        None => None,
    };
    let outcome = train_synth(&corpus, &table, &scfg, &tcfg, warm.as_ref())?;
    write_checkpoint(&a.out, &synth_checkpoint(&scfg, &tcfg, &outcome.model))
}

// ------------------------------------------------------------------- ablate

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    sv_model: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Generated sentences per speaker during evaluation
    #[arg(long, default_value_t = 3)]
    sentences: usize,
    /// Tokens per generated sentence
    #[arg(long, default_value_t = 8)]
    sentence_len: usize,
    /// Output similarity grid (TSV)
    #[arg(long)]
    out: PathBuf,
}

fn ablate_cmd(a: AblateArgs) -> Result<()> {
    let (exp, sv) = model_from_checkpoint(&read_checkpoint(&a.sv_model)?)?;
    let (scfg, tcfg) = load_synth_config(a.config.as_deref(), a.seed, &exp)?;
    let corpus = Corpus::generate(&exp.corpus)?;
    let table = extract_all(&sv, &corpus, &exp.preproc)?;
    let ecfg = EvalConfig {
        n_sentences: a.sentences,
        sentence_len: a.sentence_len,
        seed: tcfg.seed,
    };
    let rows = ablate(&corpus, &table, &sv, &scfg, &tcfg, &ecfg)?;
    write_text(&a.out, &ablation_tsv(&rows))?;
    let mut doc = synth_config_doc(&scfg, &tcfg);
    doc.set("eval", "n_sentences", ecfg.n_sentences);
    doc.set("eval", "sentence_len", ecfg.sentence_len);
    doc.set("eval", "seed", ecfg.seed);
    write_text(&sibling_config_path(&a.out), &doc.render())
}

// --------------------------------------------------------------------- grid

#[derive(Args)]
struct GridArgs {
    /// Base experiment config the comparison systems derive from
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output results table (TSV)
    #[arg(long)]
    out: PathBuf,
}

fn grid_cmd(a: GridArgs) -> Result<()> {
    let base = load_experiment(a.config.as_deref(), a.seed)?;
    let rows = run_grid(&table1_configs(&base))?;
    write_text(&a.out, &grid_tsv(&rows))?;
    write_text(&sibling_config_path(&a.out), &base.to_doc().render())
}

// --------------------------------------------------------------- grad-check

#[derive(Args)]
struct GradCheckArgs {
    /// Tolerance on the maximum relative error
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
}

fn rand_tensor(shape: Vec<usize>, seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = RngStream::new(seed);
    let n: usize = shape.iter().product();
    Tensor { shape, data: (0..n).map(|_| rng.normal() * scale).collect() }
}

fn grad_check_cmd(a: GradCheckArgs) -> Result<()> {
    let mut checks: Vec<(String, Box<dyn Fn() -> Result<f64>>)> = Vec::new();

    checks.push((
        "tdnn-encoder".into(),
        Box::new(|| {
            let cfg = EmbedConfig {
                encoder: EncoderConfig::Tdnn {
                    input_dim: 6,
                    layers: vec![
                        TdnnLayer { context: 3, dilation: 2, width: 8 },
                        TdnnLayer { context: 1, dilation: 1, width: 8 },
                    ],
                },
                pooling: PoolingConfig::sp(),
                margin: MarginConfig::softmax(),
                embed_dim: 5,
                n_classes: 4,
            };
            let params = cfg.init_params(3)?;
            let point = rand_tensor(vec![9, 6], 5, 0.7);
            grad_check(
                move |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                    let nodes = register_params(tape, &params);
                    let enc = encode(tape, inputs[0], &cfg.encoder, &nodes, &params, Mode::Eval)?;
                    let t = tape.tanh(enc.frames);
                    Ok(tape.sum_all(t))
                },
                &[point],
                1e-5,
            )
        }),
    ));

    checks.push((
        "resconv-encoder".into(),
        Box::new(|| {
            let cfg = EmbedConfig {
                encoder: EncoderConfig::Resconv { input_dim: 6, channels: vec![2, 3], out_width: 7 },
                pooling: PoolingConfig::sp(),
                margin: MarginConfig::softmax(),
                embed_dim: 5,
                n_classes: 4,
            };
            let params = cfg.init_params(4)?;
            let point = rand_tensor(vec![8, 6], 6, 0.7);
            grad_check(
                move |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                    let nodes = register_params(tape, &params);
                    let enc = encode(tape, inputs[0], &cfg.encoder, &nodes, &params, Mode::Eval)?;
                    let t = tape.tanh(enc.frames);
                    Ok(tape.sum_all(t))
                },
                &[point],
                1e-5,
            )
        }),
    ));

    checks.push((
        "lde-pool-frames-and-centers".into(),
        Box::new(|| {
            let frames = rand_tensor(vec![7, 4], 11, 0.8);
            let centers = rand_tensor(vec![3, 4], 12, 0.8);
            grad_check(
                |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                    let out = lde_pool(tape, inputs[0], inputs[1], LdeComponents::MeanAndStd)?;
                    let t = tape.tanh(out.pooled);
                    Ok(tape.sum_all(t))
                },
                &[frames, centers],
                1e-5,
            )
        }),
    ));

    for m in 1..=4u32 {
        checks.push((
            format!("a-softmax-m{m}"),
            Box::new(move || {
                let emb = rand_tensor(vec![1, 5], 20 + m as u64, 0.6);
                let w = rand_tensor(vec![5, 4], 30 + m as u64, 0.6);
                let margin = MarginConfig::a_softmax(m);
                grad_check(
                    move |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                        classify_loss(tape, inputs[0], inputs[1], 1, &margin, 4.0)
                    },
                    &[emb, w],
                    1e-5,
                )
            }),
        ));
    }

    checks.push((
        "synth-loss".into(),
        Box::new(|| {
            let cfg = SynthConfig {
                vocab: 6,
                encoder_width: 6,
                decoder_width: 6,
                cond_dim: 5,
                out_dim: 4,
                embed_dim: 3,
                ..SynthConfig::default()
            };
            let params = cfg.init_params(7)?;
            let content = ContentSequence { tokens: vec![1, 4] };
            let point = rand_tensor(vec![1, 3], 40, 0.8);
            let target = rand_tensor(vec![8, 4], 41, 0.8);
            grad_check(
                move |tape: &mut Tape<f64>, inputs: &[NodeId]| {
                    let nodes = register_params(tape, &params);
                    teacher_loss(tape, &cfg, &nodes, &content, inputs[0], &target)
                },
                &[point],
                1e-5,
            )
        }),
    ));

    let mut worst = 0.0f64;
    for (name, check) in checks {
        let err = check()?;
        println!("ok {name} max_rel_err {err:.3e}");
        worst = worst.max(err);
    }
    if worst >= a.tolerance {
        return Err(Error::numeric(format!(
            "gradient checks exceeded tolerance {}: worst {worst:.3e}",
            a.tolerance
        )));
    }
    println!("all gradient checks below {:.1e}", a.tolerance);
    Ok(())
}

// unused import guard: eval_similarity is exercised by `ablate`
#[allow(dead_code)]
fn _touch() {
    let _ = eval_similarity;
}
