//! Checkpoint files: `AENH`, a little-endian u32 format version, a u64 header
//! length, a JSON header and a little-endian float32 payload.

use std::fmt;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerMeta};
use crate::error::{Error, Result};
use crate::netblocks::Network;

pub const MAGIC: &[u8; 4] = b"AENH";
pub const FORMAT_VERSION: u32 = 1;
const OPTIMIZER_PREFIX: &str = "optimizer.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkKind {
    Classifier,
    ReconstructionGenerator,
    ReconstructionDiscriminator,
    SrGenerator,
    SrDiscriminator,
}

impl NetworkKind {
    pub fn name(self) -> &'static str {
        match self {
            NetworkKind::Classifier => "classifier",
            NetworkKind::ReconstructionGenerator => "reconstruction-generator",
            NetworkKind::ReconstructionDiscriminator => "reconstruction-discriminator",
            NetworkKind::SrGenerator => "sr-generator",
            NetworkKind::SrDiscriminator => "sr-discriminator",
        }
    }

    /// Conventional file name inside a models directory.
    pub fn file_name(self) -> String {
        format!("{}.aenh", self.name())
    }
}

impl fmt::Display for NetworkKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// What is needed to rebuild the network before loading its tensors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// Full-resolution image size the network was trained for.
    pub height: usize,
    pub width: usize,
    /// Classifier backbone widths; empty for enhancers.
    #[serde(default)]
    pub channels: Vec<usize>,
    /// Classifier attribute names; empty for enhancers.
    #[serde(default)]
    pub attributes: Vec<String>,
    /// Enhancer width divisor; 0 for the classifier.
    #[serde(default)]
    pub width_divisor: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = |what: &str| Error::Checkpoint(format!("malformed rng {what}"));
        let seed: [u8; 32] = hex::decode(&self.seed)
            .map_err(|_| bad("seed"))?
            .try_into()
            .map_err(|_| bad("seed"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad("word position"))?);
        Ok(rng)
    }
}

/// One tensor's place in the payload. Offsets and lengths are in bytes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config_hash: String,
    pub kind: NetworkKind,
    pub epoch: usize,
    pub model: ModelMeta,
    pub optimizer: Option<OptimizerMeta>,
    pub rng: Option<RngState>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_hash: String,
    pub kind: NetworkKind,
    pub epoch: usize,
    pub model: ModelMeta,
    pub optimizer: Option<OptimizerMeta>,
    pub rng: Option<RngState>,
    /// Model parameters and buffers, then optimizer slots.
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    /// Snapshot of every parameter and buffer of `net`.
    pub fn capture<N: Network<f32> + ?Sized>(net: &N, kind: NetworkKind, model: ModelMeta, config_hash: &str, epoch: usize) -> Self {
        let mut tensors = Vec::new();
        net.for_each_param_ref(&mut |name, p| {
            tensors.push(NamedTensor { name: name.to_string(), shape: p.value.shape().to_vec(), data: p.value.data().to_vec() });
        });
        Checkpoint { config_hash: config_hash.to_string(), kind, epoch, model, optimizer: None, rng: None, tensors }
    }

    pub fn with_optimizer(mut self, opt: &impl Optimizer) -> Self {
        let (meta, slots) = opt.export();
        self.optimizer = Some(meta);
        for (name, data) in slots {
            let shape = vec![data.len()];
            self.tensors.push(NamedTensor { name: format!("{OPTIMIZER_PREFIX}{name}"), shape, data });
        }
        self
    }

    pub fn with_rng(mut self, rng: &ChaCha8Rng) -> Self {
        self.rng = Some(RngState::capture(rng));
        self
    }

    pub fn expect_kind(&self, kind: NetworkKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("checkpoint holds a {} network, expected a {}", self.kind, kind)));
        }
        Ok(())
    }

    pub fn expect_config(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint was written under config {}, current config is {}",
                self.config_hash, hash
            )));
        }
        Ok(())
    }

    /// Copies the stored model tensors into `net`. Names and shapes must
    /// match exactly in both directions.
    pub fn restore_into<N: Network<f32> + ?Sized>(&self, net: &mut N) -> Result<()> {
        let stored: Vec<&NamedTensor> = self.tensors.iter().filter(|t| !t.name.starts_with(OPTIMIZER_PREFIX)).collect();
        let mut seen = 0usize;
        let mut problem: Option<String> = None;
        net.for_each_param(&mut |name, p| {
            if problem.is_some() {
                return;
            }
            match stored.iter().find(|t| t.name == name) {
                None => problem = Some(format!("checkpoint has no tensor `{name}`")),
                Some(t) if t.shape != p.value.shape() => {
                    problem = Some(format!("tensor `{name}` has shape {:?}, network expects {:?}", t.shape, p.value.shape()))
                }
                Some(t) => {
                    p.value.data_mut().copy_from_slice(&t.data);
                    seen += 1;
                }
            }
        });
        if let Some(msg) = problem {
            return Err(Error::Checkpoint(msg));
        }
        if seen != stored.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} model tensors, network has {seen}",
                stored.len()
            )));
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, opt: &mut impl Optimizer) -> Result<()> {
        let meta = self.optimizer.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let slots = self
            .tensors
            .iter()
            .filter_map(|t| t.name.strip_prefix(OPTIMIZER_PREFIX).map(|n| (n.to_string(), t.data.clone())))
            .collect();
        opt.import(meta, slots)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let len = t.data.len() * 4;
                let e = TensorEntry { name: t.name.clone(), shape: t.shape.clone(), offset, len };
                offset += len;
                e
            })
            .collect();
        CheckpointHeader {
            config_hash: self.config_hash.clone(),
            kind: self.kind,
            epoch: self.epoch,
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            rng: self.rng.clone(),
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let payload: usize = self.tensors.iter().map(|t| t.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint file (missing AENH magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = 16usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[16..payload_start])?;
        let payload = &bytes[payload_start..];
        let mut expected = 0;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            if e.offset != expected || e.len != e.shape.iter().product::<usize>() * 4 {
                return Err(Error::Checkpoint(format!("tensor table entry `{}` is inconsistent", e.name)));
            }
            let chunk = payload.get(e.offset..e.offset + e.len).ok_or_else(|| bad("payload shorter than tensor table"))?;
            let data = chunk.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            tensors.push(NamedTensor { name: e.name.clone(), shape: e.shape.clone(), data });
            expected += e.len;
        }
        if expected != payload.len() {
            return Err(bad("payload longer than tensor table"));
        }
        Ok(Checkpoint {
            config_hash: header.config_hash,
            kind: header.kind,
            epoch: header.epoch,
            model: header.model,
            optimizer: header.optimizer,
            rng: header.rng,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
