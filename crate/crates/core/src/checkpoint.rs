//! Binary checkpoints: model config, parameter values and optional
//! optimizer moments. Layout is described in `docs/checkpoint.md`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"GRIDEDIT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: DenoiserConfig,
    model_seed: u64,
    step: usize,
    params: Vec<ParamHeader>,
    has_optimizer: bool,
}

/// First and second moments of the optimizer, one tensor per trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub model_seed: u64,
    pub step: usize,
    pub optimizer: Option<OptimizerState>,
}

fn push_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("shape overflows".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let store = self.model.store();
        let header = Header {
            model: self.model.config().clone(),
            model_seed: self.model_seed,
            step: self.step,
            params: store
                .iter()
                .map(|(_, p)| ParamHeader {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            has_optimizer: self.optimizer.is_some(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in store.iter() {
            push_f64s(&mut out, p.value.data());
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                push_f64s(&mut out, t.data());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a gridedit checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")) as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Denoiser::new(header.model.clone(), header.model_seed)?;
        let expected: Vec<ParamHeader> = model
            .store()
            .iter()
            .map(|(_, p)| ParamHeader {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect();
        if expected != header.params {
            return Err(Error::Checkpoint(
                "parameter table does not match the model built from the stored config".into(),
            ));
        }
        let values = header
            .params
            .iter()
            .map(|p| Ok((p.name.clone(), r.tensor(&p.shape)?)))
            .collect::<Result<Vec<_>>>()?;
        model.store_mut().load_values(&values)?;
        let optimizer = if header.has_optimizer {
            let trainable: Vec<&ParamHeader> = header.params.iter().filter(|p| p.trainable).collect();
            let m = trainable.iter().map(|p| r.tensor(&p.shape)).collect::<Result<Vec<_>>>()?;
            let v = trainable.iter().map(|p| r.tensor(&p.shape)).collect::<Result<Vec<_>>>()?;
            Some(OptimizerState { m, v })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after parameter data",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model,
            model_seed: header.model_seed,
            step: header.step,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Validation(format!("checkpoint {} does not exist", path.display())));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            widths: vec![4, 4],
            time_dim: 4,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut model = Denoiser::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            let shape = model.store().get(id).shape().to_vec();
            *model.store_mut().get_mut(id) = Tensor::randn(&shape, &mut rng);
        }
        let trainable: Vec<Tensor> = model
            .store()
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(_, p)| Tensor::randn(p.value.shape(), &mut rng))
            .collect();
        let ck = Checkpoint {
            model,
            model_seed: 3,
            step: 17,
            optimizer: Some(OptimizerState {
                m: trainable.clone(),
                v: trainable,
            }),
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.model.store(), ck.model.store());
        assert_eq!(back.optimizer, ck.optimizer);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let ck = Checkpoint {
            model: Denoiser::new(tiny(), 1).unwrap(),
            model_seed: 1,
            step: 0,
            optimizer: None,
        };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Checkpoint(_))));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
    }
}
