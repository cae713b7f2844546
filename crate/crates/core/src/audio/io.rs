//! Audio and feature-matrix file I/O.
//!
//! WAV input accepts mono or multichannel 16-bit PCM and 32-bit float;
//! multichannel content is averaged to mono. Features persist as a small
//! binary matrix file (magic, version, dimensions, little-endian f32) with a
//! JSON sidecar carrying the sample rate and the producing config hash.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AudioClip, FilterbankConfig, FilterbankFeatures};
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"FBNK";
const FEATURE_VERSION: u32 = 1;

/// Read a WAV file into a mono [`AudioClip`].
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "zero channels".into(),
        });
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format {
                path: path.display().to_string(),
                msg: format!("unsupported WAV format {fmt:?}/{bits}-bit; need 16-bit PCM or 32-bit float"),
            })
        }
    };
    let n_frames = interleaved.len() / channels;
    let mut samples = Vec::with_capacity(n_frames);
    for frame in interleaved.chunks_exact(channels) {
        samples.push(frame.iter().sum::<f64>() / channels as f64);
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Write a clip as a 32-bit float WAV file.
pub fn write_wav_f32(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Sidecar metadata stored next to a feature matrix file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub sample_rate: u32,
    pub config_hash: String,
    /// Window length in seconds, for reconstructing frame centers.
    pub window_s: f64,
    /// Hop length in seconds.
    pub hop_s: f64,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    path.with_file_name(name)
}

/// Persist features: binary matrix plus `<path>.meta.json` sidecar.
pub fn write_features(
    path: &Path,
    features: &FilterbankFeatures,
    sample_rate: u32,
    cfg: &FilterbankConfig,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&(features.n_frames() as u32).to_le_bytes())?;
    w.write_all(&(features.n_filters() as u32).to_le_bytes())?;
    for &v in features.values.iter() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;

    let sidecar = FeatureSidecar {
        sample_rate,
        config_hash: cfg.config_hash(sample_rate),
        window_s: cfg.window_len(sample_rate) as f64 / sample_rate as f64,
        hop_s: cfg.hop_len(sample_rate) as f64 / sample_rate as f64,
    };
    let json = serde_json::to_string_pretty(&sidecar)?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Load a feature matrix file and its sidecar.
pub fn read_features(path: &Path) -> Result<(FilterbankFeatures, FeatureSidecar)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: "bad magic, not a feature file".into(),
        });
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf)?;
    let version = u32::from_le_bytes(u32buf);
    if version != FEATURE_VERSION {
        return Err(Error::Format {
            path: path.display().to_string(),
            msg: format!("unsupported feature file version {version}"),
        });
    }
    r.read_exact(&mut u32buf)?;
    let t = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u32buf)?;
    let n = u32::from_le_bytes(u32buf) as usize;

    let mut values = Array2::zeros((t, n));
    let mut f32buf = [0u8; 4];
    for v in values.iter_mut() {
        r.read_exact(&mut f32buf)?;
        *v = f32::from_le_bytes(f32buf) as f64;
    }

    let sidecar: FeatureSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    let frame_times = (0..t)
        .map(|i| i as f64 * sidecar.hop_s + sidecar.window_s / 2.0)
        .collect();
    Ok((
        FilterbankFeatures {
            values,
            frame_times,
        },
        sidecar,
    ))
}
