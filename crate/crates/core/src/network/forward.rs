use super::{LayerKind, NetworkError, NetworkTopology, ParamVars, ParameterSet};
use crate::tape::{GradientTape, TapeError, Var};
use crate::tensor::Tensor;

/// Pre-activation response maps of every layer for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `N×R_l×H_l×W_l` per layer; fully-connected layers have `H_l = W_l = 1`.
    pub layers: Vec<Tensor>,
    /// `N×C`.
    pub logits: Tensor,
}

/// Tape handles for the values of a [`ForwardTrace`].
#[derive(Debug, Clone)]
pub struct TapedTrace {
    pub layers: Vec<Var>,
    pub logits: Var,
}

impl TapedTrace {
    pub fn materialize(&self, tape: &GradientTape) -> Result<ForwardTrace, TapeError> {
        Ok(ForwardTrace {
            layers: self
                .layers
                .iter()
                .map(|&v| tape.value(v).cloned())
                .collect::<Result<_, _>>()?,
            logits: tape.value(self.logits)?.clone(),
        })
    }
}

fn check_batch(topology: &NetworkTopology, shape: &[usize]) -> Result<usize, NetworkError> {
    let (c, h, w) = topology.input_shape;
    match shape {
        [n, bc, bh, bw] if *n > 0 && (*bc, *bh, *bw) == (c, h, w) => Ok(*n),
        _ => Err(NetworkError::Input(format!(
            "batch shape {shape:?} does not match input shape N×{c}×{h}×{w}"
        ))),
    }
}

/// Runs the network on `batch` while recording on `tape`.
///
/// Layer 0 reads the raw batch; every later layer reads ReLU (then the
/// previous layer's optional max-pool) of its predecessor's response maps.
pub fn forward_on_tape(
    tape: &mut GradientTape,
    topology: &NetworkTopology,
    params: &ParamVars,
    batch: Var,
) -> Result<TapedTrace, NetworkError> {
    let geometry = topology.geometry()?;
    let n = check_batch(topology, tape.value(batch).map_err(|e| NetworkError::tape(0, e))?.shape())?;
    if params.layers.len() != topology.layers.len() {
        return Err(NetworkError::TopologyMismatch(format!(
            "{} parameter layers for {} topology layers",
            params.layers.len(),
            topology.layers.len()
        )));
    }

    let mut layers = Vec::with_capacity(topology.layers.len());
    let mut logits = None;
    let mut input = batch;
    for (idx, (spec, g)) in topology.layers.iter().zip(&geometry).enumerate() {
        let err = |e| NetworkError::tape(idx, e);
        if idx > 0 {
            let prev = &topology.layers[idx - 1];
            input = tape.relu(input).map_err(err)?;
            if let Some(pool) = prev.pool_after {
                input = tape.max_pool2d(input, pool.window, pool.stride).map_err(err)?;
            }
        }
        let (filters, bias) = params.layers[idx];
        let response = match spec.kind {
            LayerKind::Conv { stride, padding, .. } => {
                tape.conv2d(input, filters, bias, stride, padding).map_err(err)?
            }
            LayerKind::FullyConnected => {
                let (c, h, w) = g.input;
                let flat = tape.reshape(input, &[n, c * h * w]).map_err(err)?;
                let out = tape.affine(flat, filters, bias).map_err(err)?;
                if idx + 1 == topology.layers.len() {
                    logits = Some(out);
                }
                tape.reshape(out, &[n, spec.num_maps, 1, 1]).map_err(err)?
            }
        };
        layers.push(response);
        input = response;
    }
    let logits = match logits {
        Some(l) => l,
        None => {
            let last = *layers.last().expect("topology has layers");
            tape.reshape(last, &[n, topology.num_classes])
                .map_err(|e| NetworkError::tape(layers.len() - 1, e))?
        }
    };
    Ok(TapedTrace { layers, logits })
}

/// Gradient-free forward pass.
pub fn forward(
    topology: &NetworkTopology,
    params: &ParameterSet,
    batch: &Tensor,
) -> Result<ForwardTrace, NetworkError> {
    params.check_against(topology)?;
    let mut tape = GradientTape::new();
    let vars = ParamVars {
        layers: params
            .layers
            .iter()
            .map(|l| {
                (
                    tape.constant(l.filters.clone()),
                    l.bias.as_ref().map(|b| tape.constant(b.clone())),
                )
            })
            .collect(),
    };
    let input = tape.constant(batch.clone());
    let taped = forward_on_tape(&mut tape, topology, &vars, input)?;
    taped
        .materialize(&tape)
        .map_err(|e| NetworkError::tape(0, e))
}
