//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"AFCR" | version: u32 | header_len: u64 | header: JSON | payload: f64 LE
//! ```
//!
//! The header names every tensor with its shape and its offset (in values)
//! into the payload. Parameters are stored under `param/`, Adam moments under
//! `adam.m/` and `adam.v/`, and the preprocessing state as `norm.mean`,
//! `norm.std` and `prior`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fcn::{FcnConfig, ParamMap, PositionPrior};
use crate::model::{Model, Variant};
use crate::synth::NormStats;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"AFCR";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    variant: Variant,
    step: u64,
    epoch: usize,
    architectures: Vec<FcnConfig>,
    config: RunConfig,
    dataset_checksum: String,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub variant: Variant,
    pub architectures: Vec<FcnConfig>,
    pub config: RunConfig,
    pub dataset_checksum: String,
    pub state: TrainState,
    pub norm: NormStats,
    pub prior: PositionPrior,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint was trained with.
    pub fn model(&self) -> Result<Model> {
        let model = Model::with_configs(self.variant, self.architectures.clone(), self.prior.clone(), self.config.crf)?;
        model.check_params(&self.state.params)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<f64> = Vec::new();
        let mut push = |name: String, t: &Tensor| {
            tensors.push(TensorEntry { name, shape: t.shape().to_vec(), offset: payload.len() });
            payload.extend_from_slice(t.data());
        };
        for (group, map) in [("param", &self.state.params), ("adam.m", &self.state.m), ("adam.v", &self.state.v)] {
            for (k, t) in map {
                push(format!("{group}/{k}"), t);
            }
        }
        push("norm.mean".into(), &self.norm.mean);
        push("norm.std".into(), &self.norm.std);
        push("prior".into(), self.prior.tensor());

        let header = Header {
            variant: self.variant,
            step: self.state.step,
            epoch: self.state.epoch,
            architectures: self.architectures.clone(),
            config: self.config.clone(),
            dataset_checksum: self.dataset_checksum.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Data(format!("invalid checkpoint: {m}"));
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("missing AFCR magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if header_len > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(&format!("header: {e}")))?;
        let raw = &body[header_len..];
        if raw.len() % 8 != 0 {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();

        let mut state = TrainState { params: ParamMap::new(), m: ParamMap::new(), v: ParamMap::new(), step: header.step, epoch: header.epoch };
        let (mut mean, mut std, mut prior) = (None, None, None);
        let mut expected_offset = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            if e.offset != expected_offset || e.offset + n > values.len() {
                return Err(bad(&format!("tensor {} has an inconsistent offset", e.name)));
            }
            expected_offset += n;
            let t = Tensor::new(&e.shape, values[e.offset..e.offset + n].to_vec())?;
            let slot = match e.name.split_once('/') {
                Some(("param", k)) => state.params.insert(k.to_string(), t),
                Some(("adam.m", k)) => state.m.insert(k.to_string(), t),
                Some(("adam.v", k)) => state.v.insert(k.to_string(), t),
                None if e.name == "norm.mean" => mean.replace(t),
                None if e.name == "norm.std" => std.replace(t),
                None if e.name == "prior" => prior.replace(t),
                _ => return Err(bad(&format!("unknown tensor {}", e.name))),
            };
            if slot.is_some() {
                return Err(bad(&format!("duplicate tensor {}", e.name)));
            }
        }
        if expected_offset != values.len() {
            return Err(bad("payload has trailing values"));
        }
        let moments_match = |m: &ParamMap| {
            m.len() == state.params.len()
                && m.iter().all(|(k, t)| state.params.get(k).is_some_and(|p| p.shape() == t.shape()))
        };
        if !moments_match(&state.m) || !moments_match(&state.v) {
            return Err(bad("optimizer moments do not mirror the parameters"));
        }
        let (Some(mean), Some(std), Some(prior)) = (mean, std, prior) else {
            return Err(bad("missing preprocessing tensors"));
        };
        Ok(Self {
            variant: header.variant,
            architectures: header.architectures,
            config: header.config,
            dataset_checksum: header.dataset_checksum,
            state,
            norm: NormStats { mean, std },
            prior: PositionPrior::new(prior)?,
        })
    }

    /// Writes via a temporary file and rename so a crash never leaves a
    /// half-written checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()?)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::ConvSpec;

    fn sample() -> Checkpoint {
        let c = |k, s| ConvSpec { kernels: k, size: s };
        let arch = vec![FcnConfig::new("fcn1", [c(2, 3), c(2, 3), c(2, 3)]).with_image_size(8)];
        let prior = PositionPrior::uniform(8, 0.3).unwrap();
        let model = Model::with_configs(Variant::FcnCrf, arch.clone(), prior.clone(), Default::default()).unwrap();
        let mut state = TrainState::new(model.init_params(4).unwrap());
        state.step = 17;
        state.epoch = 3;
        for t in state.m.values_mut() {
            t.data_mut()[0] = 0.1 + 0.2; // not exactly representable
        }
        Checkpoint {
            variant: Variant::FcnCrf,
            architectures: arch,
            config: RunConfig::default(),
            dataset_checksum: "abc".into(),
            state,
            norm: NormStats { mean: Tensor::full(&[1, 8, 8], 1.0 / 3.0), std: Tensor::full(&[1, 8, 8], 0.7) },
            prior,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"AFCR");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        back.model().unwrap();
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"XXXX0000").is_err());
        let mut v = bytes.clone();
        v[4] = 9;
        assert!(Checkpoint::from_bytes(&v).is_err());
    }
}
