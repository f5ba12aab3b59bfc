//! "SFEA" feature file format.
//!
//! Layout: ASCII magic "SFEA"; u32 LE version = 1; u32 LE T; u32 LE F;
//! then T*F f32 LE values, row-major.

use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::substrate::tensor::Tensor;
use crate::synthdata::gen::{FeatureSequence, FRAME_RATE};

pub const MAGIC: &[u8; 4] = b"SFEA";
pub const VERSION: u32 = 1;

pub fn write_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    if !seq.frames.all_finite() {
        return Err(Error::numeric(format!(
            "write_features: non-finite value in {}",
            seq.utterance_id
        )));
    }
    let mut buf = Vec::with_capacity(16 + seq.frames.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in &seq.frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    crate::config::write_atomic(path, &buf)
}

pub fn read_features(path: &Path) -> Result<FeatureSequence> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_features(&bytes, utterance_id_from_path(path))
}

fn utterance_id_from_path(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn parse_features(bytes: &[u8], utterance_id: String) -> Result<FeatureSequence> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "truncated before magic"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}", &bytes[0..4])));
    }
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let t = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let f = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let want = 16 + t * f * 4;
    if bytes.len() != want {
        return Err(Error::format(
            bytes.len().min(want) as u64,
            format!("payload length {} != expected {}", bytes.len() - 16, t * f * 4),
        ));
    }
    let mut data = Vec::with_capacity(t * f);
    for i in 0..t * f {
        let off = 16 + i * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(FeatureSequence {
        utterance_id,
        frames: Tensor { shape: vec![t, f], data },
        frame_rate: FRAME_RATE,
    })
}

/// Serialize without touching disk; used by tests and checksumming.
pub fn to_bytes(seq: &FeatureSequence) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.num_frames() as u32).to_le_bytes());
    buf.extend_from_slice(&(seq.dim() as u32).to_le_bytes());
    for &v in &seq.frames.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}
