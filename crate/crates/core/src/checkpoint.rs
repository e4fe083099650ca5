//! Binary parameter checkpoints.
//!
//! Layout: magic `DRCK`, format version (u32), kind (u8), a kind-specific
//! header of u64 values, then the parameters as little-endian f64. Values
//! round-trip bit for bit.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::policy::{FeatureLayout, PolicyParams, NUM_CANDIDATES};
use crate::reward_model::RewardModelParams;
use crate::rl_update::ValueParams;

const MAGIC: &[u8; 4] = b"DRCK";
const FORMAT_VERSION: u32 = 1;
const KIND_AGENT: u8 = 1;
const KIND_REWARD_MODEL: u8 = 2;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("expected checkpoint kind {expected}, found {found}")]
    WrongKind { expected: u8, found: u8 },
    #[error("truncated or oversized checkpoint")]
    BadLength,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new(kind: u8) -> Self {
        let mut buf = MAGIC.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.push(kind);
        Self(buf)
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], kind: u8) -> Result<Self, CheckpointError> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        if bytes[8] != kind {
            return Err(CheckpointError::WrongKind { expected: kind, found: bytes[8] });
        }
        Ok(Self(&bytes[9..]))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.0.len() < n {
            return Err(CheckpointError::BadLength);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize, CheckpointError> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::BadLength)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let bytes = self.take(n.checked_mul(8).ok_or(CheckpointError::BadLength)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn finish(self) -> Result<(), CheckpointError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(CheckpointError::BadLength)
        }
    }
}

pub fn encode_agent(policy: &PolicyParams, critic: &ValueParams) -> Vec<u8> {
    let mut w = Writer::new(KIND_AGENT);
    w.u64(policy.agent_id as u64);
    w.u64(policy.layout.num_strategies as u64);
    w.u64(policy.version);
    w.u64(critic.version);
    w.f64s(&policy.to_flat());
    w.f64s(&critic.to_flat());
    w.0
}

pub fn decode_agent(bytes: &[u8]) -> Result<(PolicyParams, ValueParams), CheckpointError> {
    let mut r = Reader::open(bytes, KIND_AGENT)?;
    let agent_id = r.usize()?;
    let num_strategies = r.usize()?;
    if num_strategies > 1 << 16 {
        return Err(CheckpointError::BadLength);
    }
    let layout = FeatureLayout::new(num_strategies);
    let mut policy = PolicyParams::zeros(agent_id, &layout);
    policy.version = r.u64()?;
    let mut critic = ValueParams::zeros(agent_id, layout.dim());
    critic.version = r.u64()?;
    policy.set_flat(&r.f64s(layout.dim() * NUM_CANDIDATES + NUM_CANDIDATES)?);
    critic.set_flat(&r.f64s(layout.dim() + 1)?);
    r.finish()?;
    Ok((policy, critic))
}

pub fn encode_reward_model(params: &RewardModelParams) -> Vec<u8> {
    let mut w = Writer::new(KIND_REWARD_MODEL);
    w.u64(params.input_dim as u64);
    w.u64(params.hidden as u64);
    w.u64(params.version);
    w.f64s(&params.to_flat());
    w.0
}

pub fn decode_reward_model(bytes: &[u8]) -> Result<RewardModelParams, CheckpointError> {
    let mut r = Reader::open(bytes, KIND_REWARD_MODEL)?;
    let input_dim = r.usize()?;
    let hidden = r.usize()?;
    if input_dim > 1 << 16 || hidden > 1 << 16 {
        return Err(CheckpointError::BadLength);
    }
    let mut params = RewardModelParams::zeros(input_dim, hidden);
    params.version = r.u64()?;
    params.set_flat(&r.f64s(params.num_params())?);
    r.finish()?;
    Ok(params)
}

pub fn save_agent(path: &Path, policy: &PolicyParams, critic: &ValueParams) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_agent(policy, critic))?)
}

pub fn load_agent(path: &Path) -> Result<(PolicyParams, ValueParams), CheckpointError> {
    decode_agent(&fs::read(path)?)
}

pub fn save_reward_model(path: &Path, params: &RewardModelParams) -> Result<(), CheckpointError> {
    Ok(fs::write(path, encode_reward_model(params))?)
}

pub fn load_reward_model(path: &Path) -> Result<RewardModelParams, CheckpointError> {
    decode_reward_model(&fs::read(path)?)
}
