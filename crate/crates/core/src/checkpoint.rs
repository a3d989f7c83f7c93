//! Binary checkpoints.
//!
//! ```text
//! magic    8 bytes  "RDTCKPT\0"
//! version  u32 LE
//! hlen     u32 LE
//! header   hlen bytes of JSON (configs, epoch, history, rng, group sizes)
//! params   encoder, detector, tracker values as f64 LE
//! adam     per phase A, B, C: first moments then second moments, same layout
//!          (present only when the header says so)
//! digest   32-byte SHA-256 of everything above
//! ```
//!
//! Values are stored as f64 so f32 and f64 models round-trip exactly.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::network::{Group, ModelParams, NetworkConfig};
use crate::scalar::{lit, Scalar};
use crate::trainer::{Adam, Counters, EpochRecord, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"RDTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry a u128.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self { seed: rng.get_seed().to_vec(), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] =
            self.seed.as_slice().try_into().map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self.word_pos.parse().map_err(|_| Error::Checkpoint("bad rng word position".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub network_hash: String,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    #[serde(default)]
    pub train_config_hash: Option<String>,
    pub epoch: usize,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
    #[serde(default)]
    pub counters: Counters,
    #[serde(default)]
    pub rng: Option<RngState>,
    /// Name of the scalar type the model was trained in.
    pub scalar: String,
    /// Value counts of encoder, detector, tracker.
    pub group_lens: [usize; 3],
    /// Optimizer step counts per phase when optimizer state is stored.
    #[serde(default)]
    pub adam_steps: Option<[u64; 3]>,
}

fn scalar_name<T: 'static>() -> &'static str {
    if std::any::TypeId::of::<T>() == std::any::TypeId::of::<f32>() {
        "f32"
    } else {
        "f64"
    }
}

fn write_model<T: Scalar>(buf: &mut Vec<u8>, p: &ModelParams<T>) {
    for g in Group::ALL {
        for s in p.group(g) {
            for v in s {
                buf.write_f64::<LittleEndian>(v.to_f64_exact()).expect("vec write");
            }
        }
    }
}

fn read_model<T: Scalar>(cur: &mut Cursor<&[u8]>, p: &mut ModelParams<T>) -> Result<()> {
    for g in Group::ALL {
        for s in p.group_mut(g) {
            for v in s.iter_mut() {
                let x = cur.read_f64::<LittleEndian>().map_err(|_| Error::Checkpoint("truncated parameter block".into()))?;
                *v = lit(x);
            }
        }
    }
    Ok(())
}

fn encode<T: Scalar>(
    params: &ModelParams<T>,
    state: Option<&TrainState<T>>,
    cfg: Option<&TrainConfig>,
) -> Vec<u8> {
    let header = CheckpointHeader {
        network: params.config.clone(),
        network_hash: params.config.hash(),
        train_config: cfg.cloned(),
        train_config_hash: cfg.map(TrainConfig::hash),
        epoch: state.map_or(0, |s| s.epoch),
        history: state.map(|s| s.history.clone()).unwrap_or_default(),
        counters: state.map(|s| s.counters).unwrap_or_default(),
        rng: state.map(|s| RngState::capture(&s.rng)),
        scalar: scalar_name::<T>().into(),
        group_lens: Group::ALL.map(|g| params.group_len(g)),
        adam_steps: state.map(|s| [0, 1, 2].map(|i| s.adam[i].steps)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut buf = Vec::with_capacity(16 + json.len() + params.num_params() * 8 * 7 + 32);
    buf.extend_from_slice(MAGIC);
    buf.write_u32::<LittleEndian>(VERSION).expect("vec write");
    buf.write_u32::<LittleEndian>(json.len() as u32).expect("vec write");
    buf.extend_from_slice(&json);
    write_model(&mut buf, params);
    if let Some(s) = state {
        for a in &s.adam {
            write_model(&mut buf, &a.m);
            write_model(&mut buf, &a.v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

/// Writes the full training state (parameters, optimizer, rng, history).
pub fn save<T: Scalar>(path: &Path, state: &TrainState<T>, cfg: &TrainConfig) -> Result<()> {
    write_atomic(path, &encode(&state.params, Some(state), Some(cfg)))
}

/// Writes parameters only.
pub fn save_params<T: Scalar>(path: &Path, params: &ModelParams<T>) -> Result<()> {
    write_atomic(path, &encode(params, None, None))
}

/// SHA-256 of the serialized state, hex encoded. Equal states give equal
/// digests.
pub fn state_digest<T: Scalar>(state: &TrainState<T>, cfg: &TrainConfig) -> String {
    Sha256::digest(encode(&state.params, Some(state), Some(cfg))).iter().map(|b| format!("{b:02x}")).collect()
}

struct Decoded<'a> {
    header: CheckpointHeader,
    body: Cursor<&'a [u8]>,
}

fn decode(bytes: &[u8]) -> Result<Decoded<'_>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (payload, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(payload).as_slice() != digest {
        return Err(bad("checksum mismatch"));
    }
    let mut cur = Cursor::new(payload);
    cur.set_position(8);
    let version = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let hlen = cur.read_u32::<LittleEndian>().map_err(|_| bad("truncated header"))? as usize;
    let mut json = vec![0u8; hlen];
    cur.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.network.hash() != header.network_hash {
        return Err(bad("network config hash mismatch"));
    }
    Ok(Decoded { header, body: cur })
}

fn build_params<T: Scalar>(d: &mut Decoded<'_>) -> Result<ModelParams<T>> {
    let mut params = ModelParams::new(d.header.network.clone(), 0)?;
    let lens = Group::ALL.map(|g| params.group_len(g));
    if lens != d.header.group_lens {
        return Err(Error::Checkpoint(format!("group sizes {:?} do not match the network {:?}", d.header.group_lens, lens)));
    }
    read_model(&mut d.body, &mut params)?;
    Ok(params)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(decode(&read_file(path)?)?.header)
}

/// Loads parameters from any checkpoint.
pub fn load_params<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let bytes = read_file(path)?;
    let mut d = decode(&bytes)?;
    build_params(&mut d)
}

/// Loads a full training state written by [`save`].
pub fn load_state<T: Scalar>(path: &Path) -> Result<(TrainState<T>, CheckpointHeader)> {
    let bytes = read_file(path)?;
    let mut d = decode(&bytes)?;
    let params = build_params::<T>(&mut d)?;
    let steps = d.header.adam_steps.ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
    let rng = d.header.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no rng state".into()))?.restore()?;
    let mut adam = [Adam::new(&params), Adam::new(&params), Adam::new(&params)];
    for (a, s) in adam.iter_mut().zip(steps) {
        read_model(&mut d.body, &mut a.m)?;
        read_model(&mut d.body, &mut a.v)?;
        a.steps = s;
    }
    if (d.body.position() as usize) != d.body.get_ref().len() {
        return Err(Error::Checkpoint("trailing bytes after optimizer state".into()));
    }
    let state = TrainState {
        params,
        epoch: d.header.epoch,
        batch: 0,
        history: d.header.history.clone(),
        adam,
        rng,
        counters: d.header.counters,
    };
    Ok((state, d.header))
}
