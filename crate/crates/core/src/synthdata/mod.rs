//! Deterministic synthetic speaker corpus plus the feature preprocessing
//! chain (sliding mean normalization, energy VAD, chunk sampling) and the
//! bit-exact feature / trial file formats.

pub mod corpus;
pub mod gen;
pub mod oracle;
pub mod preprocess;
pub mod sfea;
pub mod trials;

pub use corpus::{Corpus, CorpusSpec, Split, Utterance};
pub use gen::{gen_population, gen_utterance, ChannelConfig, FeatureSequence, Mixing, SpeakerProfile, FRAME_RATE};
pub use preprocess::{chunk_sample, energy_vad, sliding_mean_norm};
pub use trials::{TrialEntry, TrialLabel, TrialList};
