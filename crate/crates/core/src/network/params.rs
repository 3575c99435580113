use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NetworkError, NetworkTopology};
use crate::tape::{GradientTape, Var};
use crate::tensor::Tensor;

/// Filters (or fully-connected weights) and optional bias of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub filters: Tensor,
    pub bias: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub layers: Vec<LayerParams>,
}

impl ParameterSet {
    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.filters.len() + l.bias.as_ref().map_or(0, Tensor::len))
            .sum()
    }

    /// Verifies that every tensor has the shape the topology asks for.
    pub fn check_against(&self, topology: &NetworkTopology) -> Result<(), NetworkError> {
        let shapes = topology.parameter_shapes()?;
        if shapes.len() != self.layers.len() {
            return Err(NetworkError::TopologyMismatch(format!(
                "topology has {} layers, parameters have {}",
                shapes.len(),
                self.layers.len()
            )));
        }
        for (layer, ((filter_shape, bias_len), p)) in shapes.iter().zip(&self.layers).enumerate() {
            if p.filters.shape() != filter_shape.as_slice() {
                return Err(NetworkError::TopologyMismatch(format!(
                    "layer {layer}: filters have shape {:?}, topology expects {filter_shape:?}",
                    p.filters.shape()
                )));
            }
            match (&p.bias, topology.use_bias) {
                (Some(b), true) if b.shape() == [*bias_len] => {}
                (None, false) => {}
                (b, _) => {
                    return Err(NetworkError::TopologyMismatch(format!(
                        "layer {layer}: bias {:?} does not match topology (bias enabled: {}, length {bias_len})",
                        b.as_ref().map(Tensor::shape),
                        topology.use_bias
                    )))
                }
            }
        }
        Ok(())
    }

    /// Flat iteration over every parameter tensor in a fixed order.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(&l.filters).chain(l.bias.as_ref()))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| std::iter::once(&mut l.filters).chain(l.bias.as_mut()))
    }

    /// Records every tensor as a parameter leaf on `tape`.
    pub fn register(&self, tape: &mut GradientTape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let f = tape.param(l.filters.clone());
                    let b = l.bias.as_ref().map(|b| tape.param(b.clone()));
                    (f, b)
                })
                .collect(),
        }
    }
}

/// Tape handles of a registered [`ParameterSet`], in the same layout.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<(Var, Option<Var>)>,
}

impl ParamVars {
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers
            .iter()
            .flat_map(|(f, b)| std::iter::once(*f).chain(*b))
    }
}

/// He-normal filters (`std = sqrt(2 / fan_in)`) and zero biases, drawn from
/// a ChaCha8 stream seeded with `seed`, layer by layer in row-major order.
pub fn init_parameters(topology: &NetworkTopology, seed: u64) -> Result<ParameterSet, NetworkError> {
    let shapes = topology.parameter_shapes()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = shapes
        .into_iter()
        .map(|(shape, bias_len)| {
            let fan_in = if shape.len() == 4 {
                shape[1] * shape[2] * shape[3]
            } else {
                shape[0]
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * std
                })
                .collect();
            LayerParams {
                filters: Tensor::new(shape, data).expect("shape product matches"),
                bias: topology.use_bias.then(|| Tensor::zeros(&[bias_len])),
            }
        })
        .collect();
    Ok(ParameterSet { layers })
}
