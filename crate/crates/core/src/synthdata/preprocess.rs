//! Feature preprocessing: sliding mean normalization, energy VAD, and
//! training-chunk sampling. The pipeline order is normalize, then VAD.

use crate::error::{Error, Result};
use crate::substrate::rng::RngStream;
use crate::substrate::tensor::Tensor;
use crate::synthdata::gen::FeatureSequence;

pub const DEFAULT_CMN_WINDOW: usize = 300;
pub const DEFAULT_VAD_THRESHOLD: f64 = 0.25;
pub const CHUNK_MIN_FRAMES: usize = 300;
pub const CHUNK_MAX_FRAMES: usize = 800;

/// Subtract, per dimension, the mean of a centered window clipped at the
/// utterance edges. The window spans (w-1)/2 frames to the left and w/2 to
/// the right, inclusive.
pub fn sliding_mean_norm(seq: &FeatureSequence, window_frames: usize) -> Result<FeatureSequence> {
    if window_frames < 1 {
        return Err(Error::argument("sliding_mean_norm: window must be >= 1"));
    }
    let (t, f) = (seq.num_frames(), seq.dim());
    let left = (window_frames - 1) / 2;
    let right = window_frames / 2;
    // prefix sums per dimension, in f64 for stable window means
    let mut prefix = vec![0.0f64; (t + 1) * f];
    for ti in 0..t {
        for fi in 0..f {
            prefix[(ti + 1) * f + fi] = prefix[ti * f + fi] + seq.frames.data[ti * f + fi] as f64;
        }
    }
    let mut out = Tensor::zeros(vec![t, f]);
    for ti in 0..t {
        let lo = ti.saturating_sub(left);
        let hi = (ti + right + 1).min(t);
        let n = (hi - lo) as f64;
        for fi in 0..f {
            let mean = (prefix[hi * f + fi] - prefix[lo * f + fi]) / n;
            out.data[ti * f + fi] = (seq.frames.data[ti * f + fi] as f64 - mean) as f32;
        }
    }
    Ok(FeatureSequence { utterance_id: seq.utterance_id.clone(), frames: out, frame_rate: seq.frame_rate })
}

/// Drop frames whose squared-L2 energy falls below `rel_threshold` times the
/// mean frame energy. If every frame would be dropped, the single
/// highest-energy frame is kept.
pub fn energy_vad(seq: &FeatureSequence, rel_threshold: f64) -> Result<FeatureSequence> {
    if !(0.0..1.0).contains(&rel_threshold) {
        return Err(Error::argument(format!(
            "energy_vad: rel_threshold {rel_threshold} outside [0, 1)"
        )));
    }
    let (t, f) = (seq.num_frames(), seq.dim());
    let energies: Vec<f64> = (0..t)
        .map(|ti| {
            seq.frames.data[ti * f..(ti + 1) * f]
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum()
        })
        .collect();
    let mean_energy = energies.iter().sum::<f64>() / t as f64;
    let cutoff = rel_threshold * mean_energy;
    let mut keep: Vec<usize> = (0..t).filter(|&ti| energies[ti] >= cutoff).collect();
    if keep.is_empty() {
        let best = energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        keep.push(best);
    }
    let mut data = Vec::with_capacity(keep.len() * f);
    for &ti in &keep {
        data.extend_from_slice(&seq.frames.data[ti * f..(ti + 1) * f]);
    }
    Ok(FeatureSequence {
        utterance_id: seq.utterance_id.clone(),
        frames: Tensor { shape: vec![keep.len(), f], data },
        frame_rate: seq.frame_rate,
    })
}

/// Sample a contiguous training chunk of uniformly random length in
/// [300, 800] frames at a uniformly random valid offset. Sequences of at
/// most 300 frames are returned whole.
pub fn chunk_sample(seq: &FeatureSequence, rng: &mut RngStream) -> FeatureSequence {
    let (t, f) = (seq.num_frames(), seq.dim());
    if t <= CHUNK_MIN_FRAMES {
        return seq.clone();
    }
    let max_len = CHUNK_MAX_FRAMES.min(t);
    let len = CHUNK_MIN_FRAMES + rng.below((max_len - CHUNK_MIN_FRAMES + 1) as u64) as usize;
    let offset = rng.below((t - len + 1) as u64) as usize;
    FeatureSequence {
        utterance_id: seq.utterance_id.clone(),
        frames: Tensor {
            shape: vec![len, f],
            data: seq.frames.data[offset * f..(offset + len) * f].to_vec(),
        },
        frame_rate: seq.frame_rate,
    }
}
