//! Network topology, parameters, forward execution and checkpoints.

mod checkpoint;
mod forward;
mod params;
mod topology;

use thiserror::Error;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CheckpointError, MAGIC as CHECKPOINT_MAGIC, VERSION as CHECKPOINT_VERSION,
};
pub use forward::{forward, forward_on_tape, ForwardTrace, TapedTrace};
pub use params::{init_parameters, LayerParams, ParamVars, ParameterSet};
pub use topology::{LayerGeometry, LayerKind, LayerSpec, NetworkTopology, PoolSpec};

use crate::tape::TapeError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("layer {layer}: {detail}")]
    Layer { layer: usize, detail: String },
    #[error("parameters do not fit topology: {0}")]
    TopologyMismatch(String),
    #[error("input: {0}")]
    Input(String),
    #[error("layer {layer}: {source}")]
    Tape {
        layer: usize,
        #[source]
        source: TapeError,
    },
}

impl NetworkError {
    fn tape(layer: usize, source: TapeError) -> Self {
        NetworkError::Tape { layer, source }
    }
}
