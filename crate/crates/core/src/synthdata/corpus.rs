//! Corpus assembly: speaker splits, per-utterance seeds, optional channel
//! augmentation, and adaptation subsets for the unseen (dev/test) speakers.
//!
//! Every utterance's RNG seed is derived as hash(population seed,
//! speaker_id, utterance index), so rendering order never changes results.

use crate::error::{Error, Result};
use crate::substrate::rng::RngStream;
use crate::synthdata::gen::{
    gen_population, gen_utterance, ChannelConfig, FeatureSequence, Mixing, SpeakerProfile,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub utts_per_speaker: usize,
    /// Leading utterances of each unseen (dev/test) speaker reserved for
    /// enrollment-side adaptation.
    pub adaptation_utts: usize,
    pub duration_s: f64,
    pub feature_dim: usize,
    pub d_content: usize,
    pub d_speaker: usize,
    pub augment: bool,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_train: 20,
            n_dev: 4,
            n_test: 4,
            utts_per_speaker: 20,
            adaptation_utts: 5,
            duration_s: 3.0,
            feature_dim: 30,
            d_content: 10,
            d_speaker: 16,
            augment: false,
            seed: 1,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 2 {
            return Err(Error::argument("corpus: need at least 2 training speakers"));
        }
        if self.utts_per_speaker < 1 {
            return Err(Error::argument("corpus: utts_per_speaker must be >= 1"));
        }
        if (self.n_dev + self.n_test > 0) && self.adaptation_utts >= self.utts_per_speaker {
            return Err(Error::argument(
                "corpus: adaptation_utts must leave unseen speakers at least one eval utterance",
            ));
        }
        if self.duration_s <= 0.0 {
            return Err(Error::argument("corpus: duration_s must be > 0"));
        }
        Ok(())
    }

    pub fn n_speakers(&self) -> usize {
        self.n_train + self.n_dev + self.n_test
    }
}

#[derive(Clone, Debug)]
pub struct Utterance {
    pub utterance_id: String,
    pub speaker_index: usize,
    pub split: Split,
    /// True for the held-out enrollment utterances of unseen speakers.
    pub adaptation: bool,
    pub augmented: bool,
    pub channel: ChannelConfig,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub speakers: Vec<SpeakerProfile>,
    pub mixing: Mixing,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn generate(spec: &CorpusSpec) -> Result<Corpus> {
        spec.validate()?;
        let speakers = gen_population(spec.n_speakers(), spec.d_speaker, spec.seed)?;
        let mixing = Mixing::from_seed(spec.seed, spec.feature_dim, spec.d_content, spec.d_speaker);
        let mut utterances = Vec::new();
        for (si, speaker) in speakers.iter().enumerate() {
            let split = if si < spec.n_train {
                Split::Train
            } else if si < spec.n_train + spec.n_dev {
                Split::Dev
            } else {
                Split::Test
            };
            for ui in 0..spec.utts_per_speaker {
                let mut stream = RngStream::derive(spec.seed, &speaker.speaker_id, ui as u64);
                let seed = stream.next_u64();
                let adaptation = split != Split::Train && ui < spec.adaptation_utts;
                let base_id = format!("{}_u{ui:03}", speaker.speaker_id);
                utterances.push(Utterance {
                    utterance_id: base_id.clone(),
                    speaker_index: si,
                    split,
                    adaptation,
                    augmented: false,
                    channel: ChannelConfig::clean(),
                    seed,
                });
                // one augmented copy per clean training utterance; unseen
                // speakers stay clean so trials match the clean protocol
                if spec.augment && split == Split::Train {
                    let mut ch_rng = RngStream::derive(seed, "channel", ui as u64);
                    let channel = ChannelConfig {
                        noise_std: 0.05 + 0.15 * ch_rng.uniform(),
                        smear_coeff: 0.1 + 0.4 * ch_rng.uniform(),
                        gain: (2.0f64).powf(ch_rng.uniform() - 0.5),
                    };
                    utterances.push(Utterance {
                        utterance_id: format!("{base_id}_aug"),
                        speaker_index: si,
                        split,
                        adaptation: false,
                        augmented: true,
                        channel,
                        seed,
                    });
                }
            }
        }
        Ok(Corpus { spec: spec.clone(), speakers, mixing, utterances })
    }

    /// Render one utterance's features from its seeds; pure and repeatable.
    pub fn render(&self, utt: &Utterance) -> Result<FeatureSequence> {
        gen_utterance(
            &self.speakers[utt.speaker_index],
            &self.mixing,
            self.spec.duration_s,
            &utt.channel,
            utt.seed,
            utt.utterance_id.clone(),
        )
    }

    pub fn utterances_in(&self, split: Split) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.split == split)
    }

    pub fn speaker_id(&self, utt: &Utterance) -> &str {
        &self.speakers[utt.speaker_index].speaker_id
    }

    pub fn find(&self, utterance_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utterance_id == utterance_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            n_train: 3,
            n_dev: 1,
            n_test: 1,
            utts_per_speaker: 4,
            adaptation_utts: 2,
            duration_s: 0.5,
            seed: 11,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn counts_and_splits() {
        let c = Corpus::generate(&small_spec()).unwrap();
        assert_eq!(c.utterances.len(), 5 * 4);
        assert_eq!(c.utterances_in(Split::Train).count(), 12);
        assert_eq!(c.utterances_in(Split::Dev).count(), 4);
        assert_eq!(c.utterances_in(Split::Test).count(), 4);
        let adapt: Vec<_> = c.utterances.iter().filter(|u| u.adaptation).collect();
        assert_eq!(adapt.len(), 4);
        assert!(adapt.iter().all(|u| u.split != Split::Train));
    }

    #[test]
    fn augmentation_doubles_training_only() {
        let mut spec = small_spec();
        spec.augment = true;
        let c = Corpus::generate(&spec).unwrap();
        assert_eq!(c.utterances_in(Split::Train).count(), 24);
        assert_eq!(c.utterances_in(Split::Dev).count(), 4);
        let aug = c.find("spk0000_u000_aug").unwrap();
        assert!(aug.augmented && aug.channel.noise_std > 0.0);
        aug.channel.validate().unwrap();
    }

    #[test]
    fn rendering_is_deterministic() {
        let c1 = Corpus::generate(&small_spec()).unwrap();
        let c2 = Corpus::generate(&small_spec()).unwrap();
        let u1 = c1.find("spk0002_u003").unwrap();
        let u2 = c2.find("spk0002_u003").unwrap();
        assert_eq!(u1.seed, u2.seed);
        assert_eq!(c1.render(u1).unwrap().frames, c2.render(u2).unwrap().frames);
    }

    #[test]
    fn utterance_seeds_distinct() {
        let c = Corpus::generate(&small_spec()).unwrap();
        let mut seeds: Vec<u64> = c.utterances.iter().filter(|u| !u.augmented).map(|u| u.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 20);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = small_spec();
        s.adaptation_utts = 4;
        assert!(Corpus::generate(&s).is_err());
        let mut s = small_spec();
        s.n_train = 1;
        assert!(Corpus::generate(&s).is_err());
    }
}
