//! Checkpoint container.
//!
//! Layout: one JSON header line (format tag, version, config echo, counters
//! and the tensor directory), then the tensors as little-endian `f64` in
//! directory order.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::model::{ClassifierConfig, ModelState, SynthesizerConfig};
use crate::trainer::{Adam, OptimizerState, TrainConfig};

pub const FORMAT_TAG: &str = "binauralize-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    synth_cfg: SynthesizerConfig,
    cls_cfg: ClassifierConfig,
    stft: StftConfig,
    #[serde(default)]
    train: Option<TrainConfig>,
    step: u64,
    seed: u64,
    epoch: u64,
    #[serde(default)]
    best_val: Option<f64>,
    #[serde(default)]
    adam_t: u64,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelState,
    pub stft: StftConfig,
    pub train: Option<TrainConfig>,
    /// Completed epochs.
    pub epoch: u64,
    pub best_val: Option<f64>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: Vec<(&str, &[f64])> = vec![("synth", &self.model.synth), ("cls", &self.model.cls)];
        if let Some(opt) = &self.optimizer {
            tensors.extend([
                ("synth_m", opt.synth.m.as_slice()),
                ("synth_v", opt.synth.v.as_slice()),
                ("cls_m", opt.cls.m.as_slice()),
                ("cls_v", opt.cls.v.as_slice()),
            ]);
        }
        let header = Header {
            format: FORMAT_TAG.into(),
            version: VERSION,
            synth_cfg: self.model.synth_cfg.clone(),
            cls_cfg: self.model.cls_cfg.clone(),
            stft: self.stft,
            train: self.train.clone(),
            step: self.model.step,
            seed: self.model.seed,
            epoch: self.epoch,
            best_val: self.best_val,
            adam_t: self.optimizer.as_ref().map_or(0, |o| o.synth.t),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    len: t.len(),
                })
                .collect(),
        };
        let mut buf = serde_json::to_vec(&header).expect("header serializes");
        buf.push(b'\n');
        for (_, t) in &tensors {
            for v in t.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        // Write then rename so an interrupted save never leaves a torn file.
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let mut line = String::new();
        r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::format(path, format!("bad checkpoint header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(Error::format(path, format!("not a checkpoint (format {:?})", header.format)));
        }
        if header.version > VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint version {} is newer than supported {VERSION}", header.version),
            ));
        }
        let mut payload = Vec::new();
        r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
        let expected: usize = header.tensors.iter().map(|t| t.len * 8).sum();
        if payload.len() != expected {
            return Err(Error::format(
                path,
                format!("payload size mismatch: {} bytes, header implies {expected}", payload.len()),
            ));
        }
        let take = |name: &str| -> Option<Vec<f64>> {
            let mut start = 0;
            for t in &header.tensors {
                if t.name == name {
                    let v = payload[start..start + t.len * 8]
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                        .collect();
                    return Some(v);
                }
                start += t.len * 8;
            }
            None
        };
        let missing = |n: &str| Error::format(path, format!("checkpoint lacks tensor {n:?}"));
        let synth = take("synth").ok_or_else(|| missing("synth"))?;
        let cls = take("cls").ok_or_else(|| missing("cls"))?;
        let moments = [take("synth_m"), take("synth_v"), take("cls_m"), take("cls_v")];
        let optimizer = match moments {
            [Some(sm), Some(sv), Some(cm), Some(cv)] => Some(OptimizerState {
                synth: Adam {
                    m: sm,
                    v: sv,
                    t: header.adam_t,
                },
                cls: Adam {
                    m: cm,
                    v: cv,
                    t: header.adam_t,
                },
            }),
            [None, None, None, None] => None,
            _ => return Err(Error::format(path, "checkpoint has a partial optimizer state")),
        };
        let model = ModelState {
            synth_cfg: header.synth_cfg,
            cls_cfg: header.cls_cfg,
            synth,
            cls,
            step: header.step,
            seed: header.seed,
        };
        model
            .networks()
            .map_err(|e| Error::format(path, e.to_string()))?;
        if !model.all_finite() {
            return Err(Error::format(path, "checkpoint holds non-finite parameters"));
        }
        Ok(Self {
            model,
            stft: header.stft,
            train: header.train,
            epoch: header.epoch,
            best_val: header.best_val,
            optimizer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let synth_cfg = SynthesizerConfig {
            depth: 2,
            base_channels: 2,
            feature_dim: 3,
            feature_channels: 2,
            leaky_slope: 0.2,
        };
        let model = ModelState::init(synth_cfg, ClassifierConfig::new(3, 9), 3).unwrap();
        let mut opt = OptimizerState::new(&model);
        opt.synth.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 1e-3);
        opt.cls.v[0] = std::f64::consts::PI;
        opt.synth.t = 7;
        opt.cls.t = 7;
        Checkpoint {
            model,
            stft: StftConfig::default(),
            train: Some(TrainConfig::default()),
            epoch: 2,
            best_val: Some(0.125),
            optimizer: Some(opt),
        }
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let mut inference = ck.clone();
        inference.optimizer = None;
        inference.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), inference);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        sample().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        let err = Checkpoint::load(&path).unwrap_err();
        assert!(err.to_string().contains("payload size mismatch"), "{err}");
        std::fs::write(&path, b"{\"format\":\"other\"}\n").unwrap();
        assert!(Checkpoint::load(&path).unwrap_err().is_validation());
        let missing = dir.path().join("nope.ckpt");
        assert!(Checkpoint::load(&missing).unwrap_err().to_string().contains("nope.ckpt"));
    }
}
