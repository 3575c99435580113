//! Class-purity objective: class-activation matrices, the routing loss, the
//! label balancing cost, and the combined training objective.
//!
//! For one layer with `R` response maps, every sample `i` contributes a node
//! activation `a[i, j]` (ReLU then spatial mean of map `j`). Summing those per
//! class gives the class-activation matrix
//!
//! ```text
//! C[h, j] = Σ_i a[i, j] · [y_i = h]
//! ```
//!
//! The routing loss is the negated mean squared deviation of each column from
//! its mean over classes,
//!
//! ```text
//! C_R = -1/(R·C) · Σ_j Σ_h (C[h, j] - μ_j)²,    μ_j = 1/C · Σ_h C[h, j]
//! ```
//!
//! which rewards nodes whose activation mass concentrates on few classes. On
//! its own it is happy to silence whole classes, so the balancing cost
//! penalises the spread of per-class totals `s_h = Σ_j C[h, j]`:
//!
//! ```text
//! C_C = 1/C · Σ_h (s_h - s̄)²
//! ```

use thiserror::Error;

use crate::network::{ForwardTrace, NetworkTopology, TapedTrace};
use crate::ops;
use crate::tape::{GradientTape, TapeError, Var};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("class-purity losses need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("routing enabled on layer {layer} with {maps} maps, fewer than the {classes} routing classes")]
    RoutingLayerTooNarrow { layer: usize, maps: usize, classes: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Tape(#[from] TapeError),
}

pub(crate) mod kernels {
    use crate::ops::check_class_labels;
    use crate::tensor::{Tensor, TensorError};

    pub fn matrix_dims(op: &'static str, m: &Tensor) -> Result<(usize, usize), TensorError> {
        match m.shape() {
            &[c, r] if c >= 2 => Ok((c, r)),
            &[c, _] => Err(TensorError::Invalid(format!(
                "{op}: needs at least 2 classes, got {c}"
            ))),
            s => Err(TensorError::shape(op, format!("expected a class×node matrix, got {s:?}"))),
        }
    }

    pub fn class_matrix(
        activations: &Tensor,
        labels: &[usize],
        num_classes: usize,
        scale: f64,
    ) -> Result<Tensor, TensorError> {
        const OP: &str = "class_matrix";
        let (n, r) = match activations.shape() {
            &[n, r] => (n, r),
            s => return Err(TensorError::shape(OP, format!("activations must be N×R, got {s:?}"))),
        };
        check_class_labels(OP, labels, n, num_classes)?;
        let mut out = vec![0.0; num_classes * r];
        for (row, &y) in activations.data().chunks_exact(r).zip(labels) {
            for (o, &a) in out[y * r..][..r].iter_mut().zip(row) {
                *o += a;
            }
        }
        if scale != 1.0 {
            out.iter_mut().for_each(|v| *v *= scale);
        }
        Tensor::new(vec![num_classes, r], out)
    }

    /// `∂C[h, j]/∂a[i, j] = scale · [y_i = h]`.
    pub fn class_matrix_backward(shape: &[usize], labels: &[usize], scale: f64, grad: &Tensor) -> Tensor {
        let r = shape[1];
        let g = grad.data();
        let data = labels
            .iter()
            .flat_map(|&y| g[y * r..][..r].iter().map(move |v| v * scale))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Sum of `values` in ascending order, so the result does not depend on
    /// the order of classes or nodes.
    fn ordered_sum(mut values: Vec<f64>) -> f64 {
        values.sort_by(f64::total_cmp);
        values.into_iter().sum()
    }

    fn column_means(m: &[f64], c: usize, r: usize) -> Vec<f64> {
        (0..r)
            .map(|j| ordered_sum((0..c).map(|h| m[h * r + j]).collect()) / c as f64)
            .collect()
    }

    fn row_sums(m: &[f64], r: usize) -> Vec<f64> {
        m.chunks_exact(r).map(|row| ordered_sum(row.to_vec())).collect()
    }

    pub fn routing_value(m: &[f64], c: usize, r: usize) -> f64 {
        let mu = column_means(m, c, r);
        let per_node = (0..r)
            .map(|j| ordered_sum((0..c).map(|h| (m[h * r + j] - mu[j]).powi(2)).collect()))
            .collect();
        -ordered_sum(per_node) / (r * c) as f64
    }

    /// `-2 (C[h, j] - μ_j) / (R·C)`; the μ_j terms cancel because each
    /// column's deviations sum to zero.
    pub fn routing_gradient(m: &[f64], c: usize, r: usize) -> Vec<f64> {
        let mu = column_means(m, c, r);
        let k = -2.0 / (r * c) as f64;
        m.chunks_exact(r)
            .flat_map(|row| row.iter().zip(&mu).map(move |(v, u)| k * (v - u)))
            .collect()
    }

    pub fn balancing_value(m: &[f64], c: usize, r: usize) -> f64 {
        let s = row_sums(m, r);
        let mean = ordered_sum(s.clone()) / c as f64;
        ordered_sum(s.iter().map(|v| (v - mean).powi(2)).collect()) / c as f64
    }

    /// `2/C · (s_h - s̄)`, constant along each row.
    pub fn balancing_gradient(m: &[f64], c: usize, r: usize) -> Vec<f64> {
        let s = row_sums(m, r);
        let mean = ordered_sum(s.clone()) / c as f64;
        let k = 2.0 / c as f64;
        s.iter()
            .flat_map(|&sh| std::iter::repeat_n(k * (sh - mean), r))
            .collect()
    }
}

/// Per-sample, per-node scalar activations `a[i, j] ≥ 0` (`N×R`).
#[derive(Debug, Clone, PartialEq)]
pub struct NodeActivations(Tensor);

impl NodeActivations {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn num_samples(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.0.shape()[1]
    }

    /// Wraps an `N×R` tensor of non-negative values.
    pub fn from_tensor(t: Tensor) -> Result<Self, TensorError> {
        if t.rank() != 2 {
            return Err(TensorError::shape("node_activations", format!("expected N×R, got {:?}", t.shape())));
        }
        if t.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(TensorError::Invalid("node activations must be finite and non-negative".into()));
        }
        Ok(NodeActivations(t))
    }
}

/// ReLU followed by global average pooling of one layer's `N×R×H×W` response maps.
pub fn node_activations(layer: &Tensor) -> Result<NodeActivations, TensorError> {
    Ok(NodeActivations(ops::global_avg_pool(&ops::relu(layer))?))
}

/// `C[h, j]` stored class-major (`num_classes` rows × `num_nodes` columns).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassActivationMatrix {
    values: Tensor,
    /// Layer the matrix was built from, when known.
    pub layer: Option<usize>,
    /// Number of samples accumulated.
    pub batch_size: usize,
}

impl ClassActivationMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let values = Tensor::matrix(rows)?;
        Ok(ClassActivationMatrix {
            values,
            layer: None,
            batch_size: 0,
        })
    }

    pub fn from_tensor(values: Tensor) -> Result<Self, TensorError> {
        if values.rank() != 2 {
            return Err(TensorError::shape("class_activation_matrix", format!("{:?}", values.shape())));
        }
        Ok(ClassActivationMatrix {
            values,
            layer: None,
            batch_size: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, class: usize, node: usize) -> f64 {
        self.values.data()[class * self.num_nodes() + node]
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.values.data()[class * self.num_nodes()..][..self.num_nodes()]
    }

    pub fn column(&self, node: usize) -> Vec<f64> {
        (0..self.num_classes()).map(|h| self.get(h, node)).collect()
    }

    /// `s_h = Σ_j C[h, j]`.
    pub fn class_masses(&self) -> Vec<f64> {
        (0..self.num_classes()).map(|h| self.row(h).iter().sum()).collect()
    }

    pub fn node_masses(&self) -> Vec<f64> {
        (0..self.num_nodes()).map(|j| self.column(j).iter().sum()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        ClassActivationMatrix {
            values: self.values.map(|v| v * factor),
            ..self.clone()
        }
    }

    /// Tab-separated export: a `class` header followed by node indices, then one row per class.
    pub fn to_table(&self) -> crate::table::Table {
        let mut header = vec!["class".to_string()];
        header.extend((0..self.num_nodes()).map(|j| format!("node{j}")));
        let rows = (0..self.num_classes())
            .map(|h| {
                std::iter::once(h.to_string())
                    .chain(self.row(h).iter().map(|v| v.to_string()))
                    .collect()
            })
            .collect();
        crate::table::Table::new(header, rows)
    }

    fn dims(&self) -> Result<(usize, usize), LossError> {
        if self.num_classes() < 2 {
            return Err(LossError::TooFewClasses(self.num_classes()));
        }
        Ok((self.num_classes(), self.num_nodes()))
    }
}

/// Per-class sums of node activations; labels are 0-based.
pub fn build_class_activation_matrix(
    activations: &NodeActivations,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassActivationMatrix, TensorError> {
    let values = kernels::class_matrix(activations.tensor(), labels, num_classes, 1.0)?;
    Ok(ClassActivationMatrix {
        values,
        layer: None,
        batch_size: activations.num_samples(),
    })
}

pub fn routing_loss(m: &ClassActivationMatrix) -> Result<f64, LossError> {
    let (c, r) = m.dims()?;
    Ok(kernels::routing_value(m.values.data(), c, r))
}

/// `∂C_R/∂C[h, j]`, same layout as the matrix.
pub fn routing_loss_gradient(m: &ClassActivationMatrix) -> Result<Tensor, LossError> {
    let (c, r) = m.dims()?;
    Ok(Tensor::from_parts(vec![c, r], kernels::routing_gradient(m.values.data(), c, r)))
}

pub fn balancing_cost(m: &ClassActivationMatrix) -> Result<f64, LossError> {
    let (c, r) = m.dims()?;
    Ok(kernels::balancing_value(m.values.data(), c, r))
}

/// `∂C_C/∂C[h, j]`, same layout as the matrix.
pub fn balancing_cost_gradient(m: &ClassActivationMatrix) -> Result<Tensor, LossError> {
    let (c, r) = m.dims()?;
    Ok(Tensor::from_parts(vec![c, r], kernels::balancing_gradient(m.values.data(), c, r)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Divide each class-activation matrix by the batch size before the
    /// routing and balancing terms, so the λ weights do not depend on it.
    pub normalize_by_batch: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 0.1,
            normalize_by_batch: true,
        }
    }
}

/// Labels the routing and balancing terms are measured against.
#[derive(Debug, Clone, Copy)]
pub struct RoutingTargets<'a> {
    pub labels: &'a [usize],
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Mean softmax cross-entropy.
    pub training_cost: f64,
    /// `(layer, C_R)` for every routing-enabled layer.
    pub routing_costs: Vec<(usize, f64)>,
    /// `(layer, C_C)` for every routing-enabled layer.
    pub balancing_costs: Vec<(usize, f64)>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn routing_sum(&self) -> f64 {
        self.routing_costs.iter().map(|(_, v)| v).sum()
    }

    pub fn balancing_sum(&self) -> f64 {
        self.balancing_costs.iter().map(|(_, v)| v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.training_cost.is_finite()
            && self.routing_costs.iter().all(|(_, v)| v.is_finite())
            && self.balancing_costs.iter().all(|(_, v)| v.is_finite())
    }
}

/// Builds `C_S + λ1·Σ C_R + λ2·Σ C_C` on the tape and returns its handle.
///
/// Routing and balancing terms are computed once per batch on every
/// routing-enabled layer; `routing` defaults to the class labels.
pub fn total_cost_on_tape(
    tape: &mut GradientTape,
    topology: &NetworkTopology,
    trace: &TapedTrace,
    labels: &[usize],
    routing: Option<RoutingTargets<'_>>,
    weights: LossWeights,
) -> Result<(Var, LossBreakdown), LossError> {
    let routing = routing.unwrap_or(RoutingTargets {
        labels,
        num_classes: topology.num_classes,
    });
    let enabled = topology.routing_layers();
    if !enabled.is_empty() && routing.num_classes < 2 {
        return Err(LossError::TooFewClasses(routing.num_classes));
    }
    for &layer in &enabled {
        let maps = topology.layers[layer].num_maps;
        if maps < routing.num_classes {
            return Err(LossError::RoutingLayerTooNarrow {
                layer,
                maps,
                classes: routing.num_classes,
            });
        }
    }

    let softmax = tape.softmax_cross_entropy(trace.logits, labels)?;
    let n = labels.len();
    let scale = if weights.normalize_by_batch { 1.0 / n as f64 } else { 1.0 };

    let mut routing_costs = Vec::with_capacity(enabled.len());
    let mut balancing_costs = Vec::with_capacity(enabled.len());
    let mut routing_sum: Option<Var> = None;
    let mut balancing_sum: Option<Var> = None;
    for &layer in &enabled {
        let maps = trace.layers[layer];
        let act = tape.relu(maps)?;
        let act = tape.global_avg_pool(act)?;
        let cm = tape.class_matrix(act, routing.labels, routing.num_classes, scale)?;
        let r = tape.routing_loss(cm)?;
        let b = tape.balancing_cost(cm)?;
        routing_costs.push((layer, tape.value(r)?.data()[0]));
        balancing_costs.push((layer, tape.value(b)?.data()[0]));
        routing_sum = Some(match routing_sum {
            Some(acc) => tape.add(acc, r)?,
            None => r,
        });
        balancing_sum = Some(match balancing_sum {
            Some(acc) => tape.add(acc, b)?,
            None => b,
        });
    }

    let mut total = softmax;
    if let (Some(rs), Some(bs)) = (routing_sum, balancing_sum) {
        let rs = tape.scale(rs, weights.lambda1)?;
        let bs = tape.scale(bs, weights.lambda2)?;
        total = tape.add(total, rs)?;
        total = tape.add(total, bs)?;
    }
    let breakdown = LossBreakdown {
        training_cost: tape.value(softmax)?.data()[0],
        routing_costs,
        balancing_costs,
        lambda1: weights.lambda1,
        lambda2: weights.lambda2,
        total: tape.value(total)?.data()[0],
    };
    Ok((total, breakdown))
}

/// Evaluates the objective on a materialised trace without gradients.
pub fn total_cost(
    trace: &ForwardTrace,
    topology: &NetworkTopology,
    labels: &[usize],
    routing: Option<RoutingTargets<'_>>,
    weights: LossWeights,
) -> Result<LossBreakdown, LossError> {
    let mut tape = GradientTape::new();
    let taped = TapedTrace {
        layers: trace.layers.iter().map(|t| tape.constant(t.clone())).collect(),
        logits: tape.constant(trace.logits.clone()),
    };
    total_cost_on_tape(&mut tape, topology, &taped, labels, routing, weights).map(|(_, b)| b)
}

/// Class-activation matrix of one trace layer, optionally divided by the sample count.
pub fn layer_class_matrix(
    trace: &ForwardTrace,
    layer: usize,
    labels: &[usize],
    num_classes: usize,
) -> Result<ClassActivationMatrix, TensorError> {
    let act = node_activations(&trace.layers[layer])?;
    let mut m = build_class_activation_matrix(&act, labels, num_classes)?;
    m.layer = Some(layer);
    Ok(m)
}
