//! Full learner checkpoints.
//!
//! Layout of a checkpoint directory:
//!
//! ```text
//! manifest.json, params.bin   online parameters
//! target/                     target parameters (same format)
//! optim/                      RMSprop mean squares (same format)
//! trainer_state.json          counters and random stream positions
//! replay.bin                  replay buffer
//! ```
//!
//! Restoring all of these resumes a run bit-for-bit.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::{Episode, Learner, ReplayBuffer, TrainConfig};
use crate::env::{EnvConfig, N_ACTIONS};
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::numgrad::checkpoint::{load_params_into, read_tensors, save_params, write_tensors};

pub const TRAINER_STATE_FILE: &str = "trainer_state.json";
const REPLAY_FILE: &str = "replay.bin";
const REPLAY_MAGIC: &[u8; 4] = b"DCGR";
const FORMAT_VERSION: u32 = 1;

/// Position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub stream: u64,
    /// `u128` word position, as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().to_vec(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position `{}`", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainerState {
    version: u32,
    seed: u64,
    env_steps: u64,
    episodes: u64,
    updates: u64,
    target_updates: u64,
    last_loss: Option<f64>,
    env_rng: RngState,
    explore_rng: RngState,
    train: TrainConfig,
}

/// Writes a checkpoint into `dir`, plus any `extra` files the caller wants
/// stored alongside. The directory is assembled next to its final location
/// and swapped in at the end, so an interrupted save leaves the previous
/// checkpoint intact.
pub fn save_learner(learner: &Learner, dir: &Path, extra: &[(&str, &[u8])]) -> Result<()> {
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    save_params(&tmp, learner.model.params())?;
    save_params(&tmp.join("target"), learner.target.params())?;
    let names: Vec<&str> = learner.model.params().iter().map(|(n, _)| n).collect();
    write_tensors(&tmp.join("optim"), names.into_iter().zip(learner.optim.mean_sq()))?;
    let state = TrainerState {
        version: FORMAT_VERSION,
        seed: learner.seed,
        env_steps: learner.env_steps,
        episodes: learner.episodes,
        updates: learner.updates,
        target_updates: learner.target_updates,
        last_loss: learner.last_loss,
        env_rng: RngState::capture(&learner.env_rng),
        explore_rng: RngState::capture(&learner.explore_rng),
        train: learner.cfg.clone(),
    };
    fs::write(tmp.join(TRAINER_STATE_FILE), serde_json::to_vec_pretty(&state)?)?;
    write_replay(&tmp.join(REPLAY_FILE), &learner.buffer)?;
    for (name, bytes) in extra {
        fs::write(tmp.join(name), bytes)?;
    }

    let old = sibling(dir, "old");
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    if dir.exists() {
        fs::rename(dir, &old)?;
    }
    fs::rename(&tmp, dir)?;
    if old.exists() {
        fs::remove_dir_all(&old)?;
    }
    Ok(())
}

/// Rebuilds a learner from a checkpoint. The model and environment
/// configurations must be those the checkpoint was written with.
pub fn load_learner(dir: &Path, model_cfg: ModelConfig, env_cfg: EnvConfig) -> Result<Learner> {
    let state: TrainerState = serde_json::from_slice(&fs::read(dir.join(TRAINER_STATE_FILE))?)?;
    if state.version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", state.version)));
    }
    let mut l = Learner::new(model_cfg, env_cfg, state.train, state.seed)?;
    load_params_into(dir, l.model.params_mut())?;
    load_params_into(&dir.join("target"), l.target.params_mut())?;
    let optim: Vec<_> = read_tensors(&dir.join("optim"))?.into_iter().map(|(_, t)| t).collect();
    l.optim.set_mean_sq(optim)?;
    l.env_steps = state.env_steps;
    l.episodes = state.episodes;
    l.updates = state.updates;
    l.target_updates = state.target_updates;
    l.last_loss = state.last_loss;
    l.env_rng = state.env_rng.restore()?;
    l.explore_rng = state.explore_rng.restore()?;
    l.buffer = read_replay(&dir.join(REPLAY_FILE), l.cfg.buffer_size)?;
    for ep in l.buffer.iter() {
        if ep.n_agents != l.env_cfg.n_agents || ep.obs_dim != l.env_cfg.obs_dim() {
            return Err(Error::Checkpoint("replay episodes do not match the environment".into()));
        }
    }
    Ok(l)
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("value does not fit u32".into()))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn write_replay(path: &Path, buffer: &ReplayBuffer) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(REPLAY_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, buffer.len())?;
    for ep in buffer.iter() {
        put_u32(&mut out, ep.n_agents)?;
        put_u32(&mut out, ep.obs_dim)?;
        put_u32(&mut out, ep.state_dim)?;
        put_u32(&mut out, ep.len)?;
        out.push(u8::from(ep.terminal) | (u8::from(ep.truncated) << 1) | (u8::from(ep.has_states()) << 2));
        for v in &ep.obs {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend(ep.avail.iter().map(|&b| u8::from(b)));
        for v in &ep.states {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ep.actions);
        for r in &ep.rewards {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader {
    buf: Vec<u8>,
    pos: usize,
}

impl Reader {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("replay file is truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn read_replay(path: &Path, capacity: usize) -> Result<ReplayBuffer> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != REPLAY_MAGIC {
        return Err(Error::Checkpoint("not a replay file".into()));
    }
    if r.u32()? != FORMAT_VERSION as usize {
        return Err(Error::Checkpoint("unsupported replay version".into()));
    }
    let count = r.u32()?;
    if count > capacity {
        return Err(Error::Checkpoint(format!("{count} episodes exceed capacity {capacity}")));
    }
    let mut out = ReplayBuffer::new(capacity);
    for _ in 0..count {
        let (n, d, sd, len) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
        let flags = r.take(1)?[0];
        let steps = len + 1;
        let mut ep = Episode::new(n, d, sd);
        ep.len = len;
        ep.terminal = flags & 1 != 0;
        ep.truncated = flags & 2 != 0;
        ep.obs = r.f32s(steps * n * d)?;
        ep.avail = r.take(steps * n * N_ACTIONS)?.iter().map(|&b| b != 0).collect();
        if flags & 4 != 0 {
            ep.states = r.f32s(steps * sd)?;
        }
        ep.actions = r.take(len * n)?.to_vec();
        ep.rewards = r
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        ep.validate().map_err(|_| Error::Checkpoint("malformed episode in replay file".into()))?;
        out.push(ep);
    }
    if r.pos != r.buf.len() {
        return Err(Error::Checkpoint("trailing bytes in replay file".into()));
    }
    Ok(out)
}
