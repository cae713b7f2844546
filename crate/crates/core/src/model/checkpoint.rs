//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, little-endian meta length, meta JSON (config + its
//! hash, seed, normalization statistics, trainer counters), then raw f64
//! parameter blobs in the canonical parameter order, then optimizer moment
//! blobs when trainer state is present. Loading re-derives the config hash
//! and re-checks every tensor name and shape against the config's layout, so
//! a corrupted or mismatched file fails instead of producing garbage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamSet};
use crate::audio::NormStats;
use crate::data::LabelNormStats;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GZCKPT01";
const VERSION: u32 = 1;

/// Optimizer state carried across a resume: step count and per-parameter
/// first/second moments, aligned with the parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub t: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

/// Training progress counters stored with a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainerCounters {
    pub epoch: u64,
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    version: u32,
    config: ModelConfig,
    config_hash: String,
    seed: u64,
    label_stats: Option<LabelNormStats>,
    audio_stats: Option<NormStats>,
    trainer: Option<TrainerCounters>,
    has_optimizer: bool,
}

/// Everything needed to evaluate or resume a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
    pub label_stats: Option<LabelNormStats>,
    pub audio_stats: Option<NormStats>,
    pub trainer: Option<TrainerCounters>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = Meta {
            version: VERSION,
            config: self.config.clone(),
            config_hash: self.config.hash(),
            seed: self.seed,
            label_stats: self.label_stats.clone(),
            audio_stats: self.audio_stats.clone(),
            trainer: self.trainer,
            has_optimizer: self.optimizer.is_some(),
        };
        let meta_json = serde_json::to_vec(&meta)?;

        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&(meta_json.len() as u32).to_le_bytes())?;
        w.write_all(&meta_json)?;

        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, value) in self.params.iter() {
            let name_bytes = name.as_bytes();
            w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
            w.write_all(name_bytes)?;
            w.write_all(&[value.ndim() as u8])?;
            for &d in value.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in value.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        if let Some(opt) = &self.optimizer {
            w.write_all(&opt.t.to_le_bytes())?;
            for series in [&opt.m, &opt.v] {
                for tensor in series {
                    for &v in tensor.iter() {
                        w.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let fail = |msg: String| Error::Format {
            path: path.display().to_string(),
            msg,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fail("bad magic, not a checkpoint".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let meta_len = u32::from_le_bytes(u32b) as usize;
        let mut meta_bytes = vec![0u8; meta_len];
        r.read_exact(&mut meta_bytes)?;
        let meta: Meta = serde_json::from_slice(&meta_bytes)?;
        if meta.version != VERSION {
            return Err(fail(format!("unsupported checkpoint version {}", meta.version)));
        }
        if meta.config_hash != meta.config.hash() {
            return Err(fail("config hash mismatch".into()));
        }
        meta.config.validate()?;

        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let template = ParamSet::template(&meta.config);
        if count != template.len() {
            return Err(fail(format!(
                "{count} parameter tensors, config expects {}",
                template.len()
            )));
        }
        let mut entries = Vec::with_capacity(count);
        for (expect_name, expect_shape) in &template {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let name_len = u16::from_le_bytes(u16b) as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| fail(format!("bad parameter name: {e}")))?;
            if &name != expect_name {
                return Err(fail(format!(
                    "parameter order mismatch: found '{name}', expected '{expect_name}'"
                )));
            }
            let mut ndim = [0u8; 1];
            r.read_exact(&mut ndim)?;
            let mut shape = Vec::with_capacity(ndim[0] as usize);
            for _ in 0..ndim[0] {
                r.read_exact(&mut u32b)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            if &shape != expect_shape {
                return Err(fail(format!(
                    "parameter '{name}' has shape {shape:?}, config expects {expect_shape:?}"
                )));
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            let mut f64b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut f64b)?;
                data.push(f64::from_le_bytes(f64b));
            }
            let value = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
                .map_err(|e| fail(format!("parameter '{name}': {e}")))?;
            entries.push((name, value));
        }
        let params = ParamSet::from_entries(entries);

        let optimizer = if meta.has_optimizer {
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b)?;
            let t = u64::from_le_bytes(u64b);
            let read_series = |r: &mut BufReader<File>| -> Result<Vec<ArrayD<f64>>> {
                let mut out = Vec::with_capacity(params.len());
                for (_, value) in params.iter() {
                    let mut data = Vec::with_capacity(value.len());
                    let mut f64b = [0u8; 8];
                    for _ in 0..value.len() {
                        r.read_exact(&mut f64b)?;
                        data.push(f64::from_le_bytes(f64b));
                    }
                    out.push(
                        ArrayD::from_shape_vec(value.raw_dim(), data)
                            .map_err(|e| fail(format!("optimizer blob: {e}")))?,
                    );
                }
                Ok(out)
            };
            let m = read_series(&mut r)?;
            let v = read_series(&mut r)?;
            Some(OptimizerState { t, m, v })
        } else {
            None
        };

        Ok(Checkpoint {
            config: meta.config,
            seed: meta.seed,
            params,
            label_stats: meta.label_stats,
            audio_stats: meta.audio_stats,
            trainer: meta.trainer,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModalityMask, ModelConfig};
    use crate::seeding::derive_rng;
    use ndarray::Array2;
    use rand::Rng;

    fn checkpoint_fixture() -> Checkpoint {
        let model = Model::new(ModelConfig::tiny(), 42).unwrap();
        Checkpoint {
            config: model.config.clone(),
            seed: 42,
            params: model.params,
            label_stats: Some(LabelNormStats {
                mean: [0.1; 6],
                std: [1.0; 6],
            }),
            audio_stats: Some(NormStats {
                mean: vec![0.0; 8],
                std: vec![1.0; 8],
            }),
            trainer: Some(TrainerCounters { epoch: 2, step: 10 }),
            optimizer: None,
        }
    }

    #[test]
    fn save_load_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = checkpoint_fixture();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
        assert_eq!(ckpt.params.full_hash(), back.params.full_hash());
        assert_eq!(ckpt.params.len(), back.params.len());

        // Saving the loaded checkpoint reproduces the same bytes.
        let path2 = dir.path().join("ckpt2.bin");
        back.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn reloaded_model_forward_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = checkpoint_fixture();
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        let model_a = ckpt.model();
        let model_b = back.model();
        let mut rng = derive_rng(1, "ckpt-audio", 0);
        let audio = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
        let a = model_a
            .forward(None, Some(&audio), ModalityMask::AUDIO_ONLY)
            .unwrap();
        let b = model_b
            .forward(None, Some(&audio), ModalityMask::AUDIO_ONLY)
            .unwrap();
        for (x, y) in a.headpose.iter().zip(b.headpose.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.gaze.iter().zip(b.gaze.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupted_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = checkpoint_fixture();
        ckpt.save(&path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        // Flip a byte inside the meta JSON (the config hash check catches it
        // or JSON parsing fails).
        bytes[20] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(Checkpoint::load(&path).is_err());

        std::fs::write(&path, b"short").unwrap();
        assert!(Checkpoint::load(&path).is_err());
    }

    #[test]
    fn optimizer_state_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut ckpt = checkpoint_fixture();
        let m: Vec<ArrayD<f64>> = ckpt
            .params
            .iter()
            .map(|(_, v)| v.mapv(|x| x * 0.5))
            .collect();
        let v: Vec<ArrayD<f64>> = ckpt.params.iter().map(|(_, v)| v.mapv(|x| x * x)).collect();
        ckpt.optimizer = Some(OptimizerState { t: 17, m, v });
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }
}
