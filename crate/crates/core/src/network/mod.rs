//! The point-cloud Q-network.
//!
//! Points enter as agent-frame coordinates with a class one-hot
//! ([`build_input`]). A two-layer stem lifts them to features; up to two
//! embedding blocks sample centers by FPS and pool their kNN neighborhoods;
//! multi-head offset attention mixes the remaining points; and a dueling
//! head with spectrally normalized hidden layers emits one categorical
//! return distribution per action.
//!
//! Every block is a free function over a [`Tape`](crate::autodiff::Tape) so
//! it can be differentiated and checked on its own.

mod config;
mod input;
mod model;
mod spectral;

pub use config::{support, AttentionNorm, Mode, NetworkConfig, Tail};
pub use input::{build_input, build_observation_input, to_agent_frame, InputTensor};
pub use model::{
    combine_dueling, dense, dueling_logits, embed_block, global_maxpool_concat, linear, multi_head_attention,
    offset_attention_head, spectral_linear, stem, AttentionHead, Dense, DuelingHead, EmbedBlock, ForwardPlan,
    Linear, MultiHead, PointNet, SpectralLinear, ValueDistribution,
};
pub use spectral::{power_iteration, sigma, spectral_normalize};

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Writes `params` with the config that shaped them.
pub fn save_network(path: impl AsRef<Path>, net: &PointNet, params: &ParamStore) -> Result<()> {
    let mut c = Checkpoint::new(serde_json::json!({ "network": net.config() }));
    c.push_store("", params);
    c.save(path)
}

/// Rebuilds the network from a file written by [`save_network`] and checks
/// every tensor shape against the config.
pub fn load_network(path: impl AsRef<Path>) -> Result<(PointNet, ParamStore)> {
    network_from_checkpoint(&Checkpoint::load(path)?)
}

/// The network and its (online) parameters from any checkpoint that
/// records a network config, including trainer checkpoints.
pub fn network_from_checkpoint(c: &Checkpoint) -> Result<(PointNet, ParamStore)> {
    let config: NetworkConfig = serde_json::from_value(c.metadata["network"].clone())
        .map_err(|e| Error::format("checkpoint", format!("network config: {e}")))?;
    let net = PointNet::new(config)?;
    let mut params = net.init_params(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0));
    c.fill_store("", &mut params)?;
    net.check_params(&params)?;
    Ok((net, params))
}
