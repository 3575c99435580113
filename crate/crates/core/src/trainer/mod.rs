//! Mini-batch SGD with momentum over the combined objective
//! `C_S + λ1·Σ C_R + λ2·Σ C_C`, with the class-activation matrices rebuilt
//! from every batch.

mod ensemble;
mod report;
mod sampler;
mod schedule;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::losses::{total_cost_on_tape, LossBreakdown, LossError, LossWeights, RoutingTargets};
use crate::network::{forward_on_tape, NetworkError, NetworkTopology, ParameterSet};
use crate::probes::{self, ProbeError};
use crate::tape::{GradientTape, TapeError};
use crate::tensor::Tensor;

pub use ensemble::{ensemble_probabilities, predict_ensemble, train_ensemble};
pub use report::{EpochRecord, TrainingReport};
pub use sampler::{sample_balanced_batch, sample_balanced_from_groups};
pub use schedule::LearningRateSchedule;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("class {class} has no training samples")]
    EmptyClass { class: usize },
    #[error("non-finite loss at step {step} (epoch {epoch})")]
    NonFinite {
        step: usize,
        epoch: usize,
        /// Breakdown of the last step whose loss was finite.
        last_finite: Option<Box<LossBreakdown>>,
    },
    #[error("ensemble member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
}

/// Which labels feed the routing and balancing terms. The softmax term always
/// uses the class labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RoutingLabelSource {
    #[default]
    Class,
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// `None` means 10 × the number of routing classes.
    pub batch_size: Option<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub schedule: LearningRateSchedule,
    pub momentum: f64,
    pub seed: u64,
    pub routing_labels: RoutingLabelSource,
    pub normalize_c_by_batch: bool,
    /// Samples per class in the end-of-epoch entropy probe.
    pub probe_per_class: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: None,
            lambda1: 0.1,
            lambda2: 0.1,
            schedule: LearningRateSchedule::new(vec![(0, 0.05), (20, 0.005)]).expect("valid default"),
            momentum: 0.9,
            seed: 0,
            routing_labels: RoutingLabelSource::Class,
            normalize_c_by_batch: true,
            probe_per_class: 10,
        }
    }
}

impl TrainingConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            normalize_by_batch: self.normalize_c_by_batch,
        }
    }

    pub fn routing_classes(&self, data: &Dataset) -> Result<usize, TrainError> {
        match self.routing_labels {
            RoutingLabelSource::Class => Ok(data.num_classes()),
            RoutingLabelSource::Auxiliary => data
                .num_aux_classes()
                .filter(|_| data.aux_labels().is_some())
                .ok_or_else(|| TrainError::Config("auxiliary routing needs auxiliary labels on every sample".into())),
        }
    }

    pub fn effective_batch_size(&self, routing_classes: usize) -> usize {
        self.batch_size.unwrap_or(10 * routing_classes)
    }

    /// Checks the configuration against a topology and training set.
    pub fn validate(&self, topology: &NetworkTopology, train: &Dataset) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda1.is_finite() && self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return bad(format!("lambda1 and lambda2 must be finite and non-negative, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == Some(0) {
            return bad("batch size must be positive".into());
        }
        topology.geometry()?;
        if train.num_classes() != topology.num_classes {
            return bad(format!(
                "dataset has {} classes, network has {}",
                train.num_classes(),
                topology.num_classes
            ));
        }
        if train.sample_shape() != topology.input_shape {
            return bad(format!(
                "samples are {:?}, network expects {:?}",
                train.sample_shape(),
                topology.input_shape
            ));
        }
        train.require_all_classes()?;
        let rc = self.routing_classes(train)?;
        for l in topology.routing_layers() {
            let maps = topology.layers[l].num_maps;
            if maps < rc {
                return Err(LossError::RoutingLayerTooNarrow { layer: l, maps, classes: rc }.into());
            }
        }
        if !topology.routing_layers().is_empty() && self.effective_batch_size(rc) < rc {
            return bad(format!(
                "batch size {} is smaller than the {rc} routing classes",
                self.effective_batch_size(rc)
            ));
        }
        Ok(())
    }
}

struct Velocity(Vec<Tensor>);

impl Velocity {
    fn new(params: &ParameterSet) -> Self {
        Velocity(params.tensors().map(|t| Tensor::zeros(t.shape())).collect())
    }
}

/// Trains `params` on `train`, evaluating on `test` after every epoch.
///
/// Every epoch runs `ceil(|train| / batch_size)` steps on balanced batches
/// drawn from a ChaCha8 stream seeded with `config.seed`.
pub fn train(
    topology: &NetworkTopology,
    params: ParameterSet,
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
) -> Result<(ParameterSet, TrainingReport), TrainError> {
    train_with_callback(topology, params, train, test, config, |_, _| {})
}

/// As [`train`], calling `on_epoch` after each epoch with the record and the
/// current parameters.
pub fn train_with_callback(
    topology: &NetworkTopology,
    mut params: ParameterSet,
    train: &Dataset,
    test: &Dataset,
    config: &TrainingConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &ParameterSet),
) -> Result<(ParameterSet, TrainingReport), TrainError> {
    config.validate(topology, train)?;
    params.check_against(topology)?;
    let routing_classes = config.routing_classes(train)?;
    let batch_size = config.effective_batch_size(routing_classes);
    let (groups, routing_all) = match config.routing_labels {
        RoutingLabelSource::Class => (train.indices_by_class(), None),
        RoutingLabelSource::Auxiliary => (
            train.indices_by_aux().expect("validated auxiliary labels"),
            train.aux_labels(),
        ),
    };
    let labels_all = train.labels();
    let steps_per_epoch = train.len().div_ceil(batch_size);
    let probe_slice = test.balanced_subset(config.probe_per_class);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut velocity = Velocity::new(&params);
    let mut tape = GradientTape::new();
    let mut report = TrainingReport::new(topology, config, batch_size);
    let mut last_finite: Option<LossBreakdown> = None;
    let mut step = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let lr = config.schedule.rate_at(epoch);
        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for _ in 0..steps_per_epoch {
            let idx = sample_balanced_from_groups(&groups, batch_size, &mut rng)?;
            let labels: Vec<usize> = idx.iter().map(|&i| labels_all[i]).collect();
            let routing_labels: Option<Vec<usize>> = routing_all
                .as_ref()
                .map(|z| idx.iter().map(|&i| z[i]).collect());

            tape.reset();
            let vars = params.register(&mut tape);
            let x = tape.constant(train.stack(&idx));
            let trace = forward_on_tape(&mut tape, topology, &vars, x)?;
            let targets = routing_labels.as_deref().map(|z| RoutingTargets {
                labels: z,
                num_classes: routing_classes,
            });
            let (loss, breakdown) =
                total_cost_on_tape(&mut tape, topology, &trace, &labels, targets, config.weights())?;
            if !breakdown.is_finite() {
                return Err(TrainError::NonFinite {
                    step,
                    epoch,
                    last_finite: last_finite.map(Box::new),
                });
            }
            let grads = tape.backward(loss)?;
            for ((p, v), var) in params.tensors_mut().zip(&mut velocity.0).zip(vars.iter()) {
                let g = grads.get(var).expect("every parameter has a gradient");
                for ((w, m), &d) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                    *m = config.momentum * *m - lr * d;
                    *w += *m;
                }
            }
            epoch_losses.push(breakdown.clone());
            last_finite = Some(breakdown);
            step += 1;
        }

        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            loss: mean_breakdown(&epoch_losses),
            train_accuracy: probes::evaluate_accuracy(topology, &params, train)?,
            test_accuracy: probes::evaluate_accuracy(topology, &params, test)?,
            entropy: probes::entropy_profile(topology, &params, &probe_slice)?,
            wall_clock: started.elapsed(),
        };
        on_epoch(&record, &params);
        report.epochs.push(record);
    }
    Ok((params, report))
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len() as f64;
    let first = &items[0];
    let mean = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    let per_layer = |get: fn(&LossBreakdown) -> &Vec<(usize, f64)>| {
        get(first)
            .iter()
            .enumerate()
            .map(|(k, &(layer, _))| (layer, mean(&|b| get(b)[k].1)))
            .collect()
    };
    LossBreakdown {
        training_cost: mean(&|b| b.training_cost),
        routing_costs: per_layer(|b| &b.routing_costs),
        balancing_costs: per_layer(|b| &b.balancing_costs),
        lambda1: first.lambda1,
        lambda2: first.lambda2,
        total: mean(&|b| b.total),
    }
}
