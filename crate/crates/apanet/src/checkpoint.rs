//! Versioned binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic  b"APANCKPT"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length L, u32 little-endian
//! 16      L     UTF-8 JSON header (see `Header`)
//! 16+L    8·P   model parameters, f64 little-endian, in `Params::flatten` order
//! ...     8·P   momentum buffers, same layout
//! ```
//!
//! `P` is `header.param_count`. Trailing bytes are rejected.

use std::io::Write;
use std::path::Path;

use apanet_core::head::{Model, TrainState};
use apanet_core::{ChaCha8Rng, Params};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiments::Session;

pub const MAGIC: &[u8; 8] = b"APANCKPT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha stream: key, stream id, and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal string; the offset is a 128-bit integer.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format("malformed rng state".into());
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub fingerprint: String,
    pub step: u64,
    pub skipped: u64,
    pub param_count: usize,
    pub train_rng: RngState,
    pub data_rng: RngState,
    /// Configuration the checkpoint was produced under.
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub session: Session,
}

impl Checkpoint {
    pub fn capture(session: &Session, config: &RunConfig) -> Self {
        let header = Header {
            fingerprint: config.fingerprint(),
            step: session.state.step,
            skipped: session.state.skipped,
            param_count: session.state.model.param_count(),
            train_rng: RngState::capture(&session.state.rng),
            data_rng: RngState::capture(&session.data_rng),
            config: config.clone(),
        };
        Self { header, session: session.clone() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serialises");
        let n = self.header.param_count;
        let mut out = Vec::with_capacity(16 + header.len() + 16 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for model in [&self.session.state.model, &self.session.state.velocity] {
            for t in model.tensors() {
                t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(fmt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| fmt("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Format(e.to_string()))?;
        let cfg = &header.config;
        let mut model = Model::init(cfg.backbone(), cfg.model.head_width, 0)?;
        if model.param_count() != header.param_count {
            return Err(fmt("parameter count does not match the stored architecture"));
        }
        let payload = &bytes[16 + len..];
        if payload.len() != 16 * header.param_count {
            return Err(fmt("parameter payload has the wrong length"));
        }
        let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut velocity = model.zeros_like();
        for target in [&mut model, &mut velocity] {
            for t in target.tensors_mut() {
                t.iter_mut().for_each(|v| *v = values.next().unwrap());
            }
        }
        let state = TrainState {
            model,
            velocity,
            step: header.step,
            skipped: header.skipped,
            rng: header.train_rng.restore()?,
        };
        let session = Session { state, data_rng: header.data_rng.restore()? };
        Ok(Self { header, session })
    }

    /// Writes atomically: a temporary sibling is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Refuses a checkpoint produced under a different training setup
    /// unless `force` is set.
    pub fn check_compatible(&self, config: &RunConfig, force: bool) -> Result<()> {
        let expected = config.fingerprint();
        if !force && self.header.fingerprint != expected {
            return Err(Error::Fingerprint { expected, found: self.header.fingerprint.clone() });
        }
        let want = Model::init(config.backbone(), config.model.head_width, 0)?.param_count();
        if want != self.header.param_count {
            return Err(Error::Format("checkpoint architecture differs from the config".into()));
        }
        Ok(())
    }
}
