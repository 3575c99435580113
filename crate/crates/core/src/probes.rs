//! Read-only measurements of a network: per-layer class entropy, purity
//! snapshots of class-activation matrices, and accuracy.
//!
//! Entropy is the Shannon entropy (nats) of each node's column-normalised
//! class distribution, averaged over nodes whose column mass exceeds
//! [`DEAD_NODE_MASS`]. Nodes at or below that mass are counted as dead.

use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::losses::{build_class_activation_matrix, node_activations, ClassActivationMatrix};
use crate::network::{forward, NetworkError, NetworkTopology, ParameterSet};
use crate::ops;
use crate::table::Table;
use crate::tensor::{Tensor, TensorError};

pub const DEAD_NODE_MASS: f64 = 1e-12;

/// Samples per forward pass when sweeping a dataset.
const CHUNK: usize = 256;

#[derive(Debug, Error, PartialEq)]
pub enum ProbeError {
    #[error("entropy needs at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("probe slice has no sample of class {0}")]
    MissingClass(usize),
    #[error("probe slice is empty")]
    EmptySlice,
    #[error("dataset has {found} classes, network has {expected}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("dataset samples are {found:?}, network expects {expected:?}")]
    InputShapeMismatch {
        expected: (usize, usize, usize),
        found: (usize, usize, usize),
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerEntropy {
    /// Mean node entropy in nats; `None` when every node is dead.
    pub average: Option<f64>,
    pub dead_nodes: usize,
    pub num_nodes: usize,
}

pub fn layer_entropy(m: &ClassActivationMatrix) -> Result<LayerEntropy, ProbeError> {
    if m.num_classes() < 2 {
        return Err(ProbeError::TooFewClasses(m.num_classes()));
    }
    let mut total = 0.0;
    let mut live = 0;
    for j in 0..m.num_nodes() {
        let col = m.column(j);
        let mass: f64 = col.iter().sum();
        if mass <= DEAD_NODE_MASS {
            continue;
        }
        live += 1;
        total -= col
            .iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let p = v / mass;
                p * p.ln()
            })
            .sum::<f64>();
    }
    Ok(LayerEntropy {
        average: (live > 0).then(|| total / live as f64),
        dead_nodes: m.num_nodes() - live,
        num_nodes: m.num_nodes(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerEntropyProfile {
    /// `(layer, entropy)` for every layer with at least as many maps as classes.
    pub layers: Vec<(usize, LayerEntropy)>,
}

impl LayerEntropyProfile {
    pub fn get(&self, layer: usize) -> Option<&LayerEntropy> {
        self.layers.iter().find(|(l, _)| *l == layer).map(|(_, e)| e)
    }

    pub fn to_table(&self) -> Table {
        let header = ["layer", "average_entropy", "dead_nodes", "nodes"].map(String::from).to_vec();
        let rows = self
            .layers
            .iter()
            .map(|(l, e)| {
                vec![
                    l.to_string(),
                    e.average.map_or_else(|| "none".to_string(), |v| v.to_string()),
                    e.dead_nodes.to_string(),
                    e.num_nodes.to_string(),
                ]
            })
            .collect();
        Table::new(header, rows)
    }
}

/// Layers whose width allows a class-purity reading: `R_l ≥ C`.
pub fn routing_capable_layers(topology: &NetworkTopology) -> Vec<usize> {
    topology
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.num_maps >= topology.num_classes)
        .map(|(i, _)| i)
        .collect()
}

fn check_slice(topology: &NetworkTopology, data: &Dataset) -> Result<(), ProbeError> {
    if data.is_empty() {
        return Err(ProbeError::EmptySlice);
    }
    if data.num_classes() != topology.num_classes {
        return Err(ProbeError::ClassCountMismatch {
            expected: topology.num_classes,
            found: data.num_classes(),
        });
    }
    if data.sample_shape() != topology.input_shape {
        return Err(ProbeError::InputShapeMismatch {
            expected: topology.input_shape,
            found: data.sample_shape(),
        });
    }
    Ok(())
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(CHUNK).map(move |s| (s..(s + CHUNK).min(n)).collect())
}

/// Class-activation matrices of the given layers over a whole dataset, with
/// class labels taken from `labels` (one per sample) over `num_classes`.
pub fn class_matrices_for(
    topology: &NetworkTopology,
    params: &ParameterSet,
    data: &Dataset,
    layers: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<Vec<ClassActivationMatrix>, ProbeError> {
    check_slice(topology, data)?;
    let mut acc: Vec<Option<ClassActivationMatrix>> = vec![None; layers.len()];
    for idx in chunks(data.len()) {
        let trace = forward(topology, params, &data.stack(&idx))?;
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        for (slot, &layer) in acc.iter_mut().zip(layers) {
            let a = node_activations(&trace.layers[layer])?;
            let m = build_class_activation_matrix(&a, &y, num_classes)?;
            *slot = Some(match slot.take() {
                None => m,
                Some(prev) => {
                    let sum = prev.as_tensor().zip_map(m.as_tensor(), |a, b| a + b)?;
                    ClassActivationMatrix::from_tensor(sum)?
                }
            });
        }
    }
    Ok(acc
        .into_iter()
        .zip(layers)
        .map(|(m, &layer)| {
            let mut m = m.expect("non-empty slice");
            m.layer = Some(layer);
            m.batch_size = data.len();
            m
        })
        .collect())
}

pub fn class_matrices(
    topology: &NetworkTopology,
    params: &ParameterSet,
    data: &Dataset,
    layers: &[usize],
) -> Result<Vec<ClassActivationMatrix>, ProbeError> {
    class_matrices_for(topology, params, data, layers, &data.labels(), data.num_classes())
}

/// Entropy of every routing-capable layer over one pass of `slice`, which
/// must contain every class.
pub fn entropy_profile(
    topology: &NetworkTopology,
    params: &ParameterSet,
    slice: &Dataset,
) -> Result<LayerEntropyProfile, ProbeError> {
    check_slice(topology, slice)?;
    if let Some(c) = slice.class_counts().iter().position(|&n| n == 0) {
        return Err(ProbeError::MissingClass(c));
    }
    let layers = routing_capable_layers(topology);
    let mats = class_matrices(topology, params, slice, &layers)?;
    Ok(LayerEntropyProfile {
        layers: layers
            .into_iter()
            .zip(&mats)
            .map(|(l, m)| Ok((l, layer_entropy(m)?)))
            .collect::<Result<_, ProbeError>>()?,
    })
}

/// Default probe slice: at most 10 samples per class, in dataset order.
pub fn default_probe_slice(test: &Dataset) -> Dataset {
    test.balanced_subset(10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PuritySnapshot {
    pub layer: Option<usize>,
    /// Column-normalised matrix, class-major; dead columns are all zero.
    pub normalized: Vec<Vec<f64>>,
    pub class_masses: Vec<f64>,
    /// Largest class share per node; `None` for dead nodes.
    pub peakedness: Vec<Option<f64>>,
    pub dead: Vec<bool>,
}

impl PuritySnapshot {
    pub fn mean_peakedness(&self) -> Option<f64> {
        let live: Vec<f64> = self.peakedness.iter().flatten().copied().collect();
        (!live.is_empty()).then(|| live.iter().sum::<f64>() / live.len() as f64)
    }

    /// Header `class, node0, …`, one row per class, then a `dead` row of 0/1 flags.
    pub fn to_table(&self) -> Table {
        let nodes = self.dead.len();
        let mut header = vec!["class".to_string()];
        header.extend((0..nodes).map(|j| format!("node{j}")));
        let mut rows: Vec<Vec<String>> = self
            .normalized
            .iter()
            .enumerate()
            .map(|(h, row)| std::iter::once(h.to_string()).chain(row.iter().map(f64::to_string)).collect())
            .collect();
        rows.push(
            std::iter::once("dead".to_string())
                .chain(self.dead.iter().map(|&d| u8::from(d).to_string()))
                .collect(),
        );
        let mut t = Table::new(header, rows);
        if let Some(l) = self.layer {
            t = t.with_meta("layer", l);
        }
        t.with_meta(
            "class_masses",
            self.class_masses.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        )
    }
}

pub fn purity_snapshot(m: &ClassActivationMatrix) -> PuritySnapshot {
    let (c, r) = (m.num_classes(), m.num_nodes());
    let mut normalized = vec![vec![0.0; r]; c];
    let mut peakedness = vec![None; r];
    let mut dead = vec![false; r];
    for j in 0..r {
        let col = m.column(j);
        let mass: f64 = col.iter().sum();
        if mass <= DEAD_NODE_MASS {
            dead[j] = true;
            continue;
        }
        let mut peak = 0.0f64;
        for (h, v) in col.iter().enumerate() {
            normalized[h][j] = v / mass;
            peak = peak.max(v / mass);
        }
        peakedness[j] = Some(peak);
    }
    PuritySnapshot {
        layer: m.layer,
        normalized,
        class_masses: m.class_masses(),
        peakedness,
        dead,
    }
}

/// Softmax probabilities `N×C` over a whole dataset.
pub fn predict_probabilities(
    topology: &NetworkTopology,
    params: &ParameterSet,
    data: &Dataset,
) -> Result<Tensor, ProbeError> {
    check_slice(topology, data)?;
    let mut out = Vec::with_capacity(data.len() * topology.num_classes);
    for idx in chunks(data.len()) {
        let trace = forward(topology, params, &data.stack(&idx))?;
        out.extend_from_slice(ops::softmax(&trace.logits)?.data());
    }
    Ok(Tensor::new(vec![data.len(), topology.num_classes], out)?)
}

pub fn predict(topology: &NetworkTopology, params: &ParameterSet, data: &Dataset) -> Result<Vec<usize>, ProbeError> {
    check_slice(topology, data)?;
    let mut out = Vec::with_capacity(data.len());
    for idx in chunks(data.len()) {
        let trace = forward(topology, params, &data.stack(&idx))?;
        out.extend(ops::argmax_rows(&trace.logits));
    }
    Ok(out)
}

/// Fraction of predictions equal to the labels.
pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Argmax-logit accuracy; ties go to the lowest class index.
pub fn evaluate_accuracy(topology: &NetworkTopology, params: &ParameterSet, slice: &Dataset) -> Result<f64, ProbeError> {
    Ok(accuracy_of(&predict(topology, params, slice)?, &slice.labels()))
}
