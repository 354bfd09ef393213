//! Self-describing binary checkpoint: magic, a length-prefixed JSON header,
//! then every parameter as raw little-endian `f64` in header order.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::model::Model;
use crate::autograd::ParamStore;
use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"UADCKPT1";

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// `u128` word position, kept as a string for JSON.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Format("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Generator config of the manifest the model was trained on.
    pub data: SynthConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    data: SynthConfig,
    epoch: usize,
    rng: RngState,
    params: Vec<ParamEntry>,
}

impl Checkpoint {
    /// Rebuilds the model structure and checks that every parameter matches.
    pub fn model(&self) -> Result<Model> {
        let (model, fresh) = Model::new(&self.config, self.data.image_size as usize)?;
        if fresh.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                fresh.len()
            )));
        }
        for ((_, a, ma), (_, b, mb)) in fresh.iter().zip(self.params.iter()) {
            if a != b || ma.shape() != mb.shape() {
                return Err(Error::Format(format!("parameter `{b}` {:?} does not match `{a}` {:?}", mb.shape(), ma.shape())));
            }
        }
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let header = Header {
            config: self.config.clone(),
            data: self.data.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            params: self
                .params
                .iter()
                .map(|(_, name, m)| ParamEntry { name: name.to_string(), rows: m.rows(), cols: m.cols() })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, _, m) in self.params.iter() {
            let mut buf = Vec::with_capacity(m.len() * 8);
            for v in m.as_slice() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        let mut params = ParamStore::new();
        for entry in header.params {
            let mut bytes = vec![0u8; entry.rows * entry.cols * 8];
            r.read_exact(&mut bytes).map_err(|e| Error::Format(format!("truncated parameter `{}`: {e}", entry.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            params.insert(entry.name, Matrix::from_vec(entry.rows, entry.cols, data)?);
        }
        Ok(Self { config: header.config, data: header.data, epoch: header.epoch, rng: header.rng, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}
