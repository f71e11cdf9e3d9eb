//! Deep coordination graphs for cooperative multi-agent Q-learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`numgrad`] – dense tensors, a reverse-mode tape, RMSprop.
//! * [`graph`] – coordination-graph topologies.
//! * [`maxplus`] – exact Q evaluation, max-plus greedy selection, brute
//!   force and coordinate ascent.
//! * [`models`] – history encoder and the DCG / DCG-S / VDN / IQL / LRQ heads.
//! * [`env`] – predator–prey grid worlds.
//! * [`trainer`] – episodic double-DQN training with a replay buffer.
//! * [`cli`] – experiment configuration, runs, metrics and plot export.

pub mod cli;
pub mod env;
pub mod error;
pub mod graph;
pub mod maxplus;
pub mod models;
pub mod numgrad;
pub mod trainer;

pub use error::{Error, Result};
