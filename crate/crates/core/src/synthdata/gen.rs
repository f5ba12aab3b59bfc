//! Speaker population and utterance generation.
//!
//! Generation law per utterance: x_t = A c_t + B l + e_t, where l is the
//! speaker's latent identity vector, c_t is a slowly varying AR(1) content
//! process (coefficient 0.95), and e_t is white frame noise. A channel stage
//! (one-pole smearing, gain, additive noise) optionally follows. Everything
//! is a pure function of the seeds involved.

use crate::error::{Error, Result};
use crate::substrate::rng::RngStream;
use crate::substrate::tensor::Tensor;

/// Frames per second; "3-8 seconds" maps to 300-800 frames.
pub const FRAME_RATE: usize = 100;

/// AR(1) coefficient of the content process.
pub const CONTENT_AR: f64 = 0.95;

/// Scale of the content mixing columns relative to the speaker mixing.
const CONTENT_SCALE: f64 = 0.4;
/// White per-frame noise std.
const FRAME_NOISE_STD: f64 = 0.3;

#[derive(Clone, Debug)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub latent: Vec<f64>,
    pub population_seed: u64,
}

/// Channel surrogate: one-pole temporal smearing, gain, additive noise.
#[derive(Clone, Copy, Debug)]
pub struct ChannelConfig {
    pub noise_std: f64,
    pub smear_coeff: f64,
    pub gain: f64,
}

impl ChannelConfig {
    pub fn clean() -> Self {
        ChannelConfig { noise_std: 0.0, smear_coeff: 0.0, gain: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_std < 0.0 {
            return Err(Error::argument("channel: noise_std must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.smear_coeff) {
            return Err(Error::argument("channel: smear_coeff must be in [0, 1)"));
        }
        if self.gain <= 0.0 {
            return Err(Error::argument("channel: gain must be > 0"));
        }
        Ok(())
    }
}

/// A T x F matrix of frame-level features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    /// [T, F], single precision like the on-disk format.
    pub frames: Tensor<f32>,
    pub frame_rate: usize,
}

impl FeatureSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.shape[0]
    }

    pub fn dim(&self) -> usize {
        self.frames.shape[1]
    }
}

/// Mixing matrices shared by a whole population, drawn once from the
/// population seed: A is [F, D_c] (content), B is [F, D_s] (speaker).
#[derive(Clone, Debug)]
pub struct Mixing {
    pub a: Tensor<f64>,
    pub b: Tensor<f64>,
}

impl Mixing {
    pub fn from_seed(population_seed: u64, f: usize, d_c: usize, d_s: usize) -> Self {
        let mut rng = RngStream::derive(population_seed, "mixing", 0);
        let a_scale = CONTENT_SCALE / (d_c as f64).sqrt();
        let b_scale = 1.0 / (d_s as f64).sqrt();
        let a = Tensor {
            shape: vec![f, d_c],
            data: (0..f * d_c).map(|_| rng.normal() * a_scale).collect(),
        };
        let b = Tensor {
            shape: vec![f, d_s],
            data: (0..f * d_s).map(|_| rng.normal() * b_scale).collect(),
        };
        Mixing { a, b }
    }

    pub fn feature_dim(&self) -> usize {
        self.a.shape[0]
    }
}

/// Draw `n_speakers` latents i.i.d. standard normal from one sequential
/// stream, so a smaller population is a prefix of a larger one.
pub fn gen_population(n_speakers: usize, d_latent: usize, seed: u64) -> Result<Vec<SpeakerProfile>> {
    if n_speakers < 2 {
        return Err(Error::argument(format!(
            "gen_population: need at least 2 speakers, got {n_speakers}"
        )));
    }
    let mut rng = RngStream::derive(seed, "population", 0);
    Ok((0..n_speakers)
        .map(|i| SpeakerProfile {
            speaker_id: format!("spk{i:04}"),
            latent: rng.normals(d_latent),
            population_seed: seed,
        })
        .collect())
}

/// Generate one utterance of `duration_s` seconds for a speaker.
pub fn gen_utterance(
    speaker: &SpeakerProfile,
    mixing: &Mixing,
    duration_s: f64,
    channel: &ChannelConfig,
    utt_seed: u64,
    utterance_id: impl Into<String>,
) -> Result<FeatureSequence> {
    if duration_s <= 0.0 {
        return Err(Error::argument(format!("gen_utterance: duration {duration_s} <= 0")));
    }
    channel.validate()?;
    let t = (FRAME_RATE as f64 * duration_s).round() as usize;
    let f = mixing.feature_dim();
    let d_c = mixing.a.shape[1];
    let d_s = mixing.b.shape[1];
    assert_eq!(speaker.latent.len(), d_s, "latent dim mismatch");

    let mut rng = RngStream::new(utt_seed);
    // speaker component, constant over the utterance
    let mut spk = vec![0.0f64; f];
    for (i, s) in spk.iter_mut().enumerate() {
        for k in 0..d_s {
            *s += mixing.b.at2(i, k) * speaker.latent[k];
        }
    }

    let mut content = vec![0.0f64; d_c];
    let mut frames = vec![0.0f64; t * f];
    for ti in 0..t {
        for c in content.iter_mut() {
            *c = CONTENT_AR * *c + rng.normal();
        }
        for fi in 0..f {
            let mut v = spk[fi];
            for k in 0..d_c {
                v += mixing.a.at2(fi, k) * content[k];
            }
            v += FRAME_NOISE_STD * rng.normal();
            frames[ti * f + fi] = v;
        }
    }

    // channel: smear, then gain, then additive noise
    if channel.smear_coeff > 0.0 {
        let s = channel.smear_coeff;
        for ti in 1..t {
            for fi in 0..f {
                frames[ti * f + fi] =
                    (1.0 - s) * frames[ti * f + fi] + s * frames[(ti - 1) * f + fi];
            }
        }
    }
    for v in frames.iter_mut() {
        *v *= channel.gain;
    }
    if channel.noise_std > 0.0 {
        for v in frames.iter_mut() {
            *v += channel.noise_std * rng.normal();
        }
    }

    Ok(FeatureSequence {
        utterance_id: utterance_id.into(),
        frames: Tensor {
            shape: vec![t, f],
            data: frames.iter().map(|&v| v as f32).collect(),
        },
        frame_rate: FRAME_RATE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_deterministic_with_prefix_property() {
        let a = gen_population(10, 8, 7).unwrap();
        let b = gen_population(10, 8, 7).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.latent, y.latent);
        }
        let two = gen_population(2, 8, 7).unwrap();
        assert_eq!(two[0].latent, a[0].latent);
        assert_eq!(two[1].latent, a[1].latent);
    }

    #[test]
    fn too_few_speakers_rejected() {
        assert!(gen_population(1, 8, 7).is_err());
    }

    #[test]
    fn latents_roughly_orthogonal() {
        let pop = gen_population(100, 16, 1).unwrap();
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..pop.len() {
            for j in (i + 1)..pop.len() {
                let (a, b) = (&pop[i].latent, &pop[j].latent);
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                sum += dot / (na * nb);
                count += 1;
            }
        }
        assert!((sum / count as f64).abs() < 0.05);
    }

    #[test]
    fn utterance_bit_identical_and_framecount() {
        let pop = gen_population(2, 16, 3).unwrap();
        let mixing = Mixing::from_seed(3, 30, 10, 16);
        let ch = ChannelConfig::clean();
        let a = gen_utterance(&pop[0], &mixing, 3.0, &ch, 99, "u0").unwrap();
        let b = gen_utterance(&pop[0], &mixing, 3.0, &ch, 99, "u0").unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.num_frames(), 300);
        assert_eq!(a.dim(), 30);
        assert!(a.frames.all_finite());
    }

    #[test]
    fn bad_duration_rejected() {
        let pop = gen_population(2, 4, 3).unwrap();
        let mixing = Mixing::from_seed(3, 6, 3, 4);
        assert!(gen_utterance(&pop[0], &mixing, 0.0, &ChannelConfig::clean(), 1, "u").is_err());
    }

    #[test]
    fn same_speaker_shares_identity_component() {
        let pop = gen_population(2, 16, 5).unwrap();
        let mixing = Mixing::from_seed(5, 30, 10, 16);
        let ch = ChannelConfig::clean();
        let mean = |s: &FeatureSequence| -> Vec<f64> {
            let (t, f) = (s.num_frames(), s.dim());
            let mut m = vec![0.0; f];
            for ti in 0..t {
                for fi in 0..f {
                    m[fi] += s.frames.data[ti * f + fi] as f64 / t as f64;
                }
            }
            m
        };
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let a1 = mean(&gen_utterance(&pop[0], &mixing, 5.0, &ch, 1, "a1").unwrap());
        let a2 = mean(&gen_utterance(&pop[0], &mixing, 5.0, &ch, 2, "a2").unwrap());
        let b1 = mean(&gen_utterance(&pop[1], &mixing, 5.0, &ch, 3, "b1").unwrap());
        assert!(cos(&a1, &a2) > cos(&a1, &b1));
    }
}
