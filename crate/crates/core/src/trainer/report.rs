use std::time::Duration;

use super::TrainingConfig;
use crate::losses::LossBreakdown;
use crate::network::NetworkTopology;
use crate::probes::{self, LayerEntropyProfile};
use crate::table::Table;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    /// Mean over the epoch's steps.
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub entropy: LayerEntropyProfile,
    pub wall_clock: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub routing_layers: Vec<usize>,
    pub probe_layers: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingReport {
    pub(super) fn new(topology: &NetworkTopology, config: &TrainingConfig, batch_size: usize) -> Self {
        TrainingReport {
            routing_layers: topology.routing_layers(),
            probe_layers: probes::routing_capable_layers(topology),
            batch_size,
            seed: config.seed,
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.last().map(|e| e.test_accuracy)
    }

    /// One row per epoch. Wall-clock time is left out so that reruns produce
    /// identical tables.
    pub fn to_table(&self) -> Table {
        let mut header: Vec<String> = ["epoch", "learning_rate", "total", "training_cost"].map(String::from).to_vec();
        header.extend(self.routing_layers.iter().map(|l| format!("routing_l{l}")));
        header.extend(self.routing_layers.iter().map(|l| format!("balancing_l{l}")));
        header.extend(["lambda1", "lambda2", "train_accuracy", "test_accuracy"].map(String::from));
        header.extend(self.probe_layers.iter().map(|l| format!("entropy_l{l}")));
        let rows = self
            .epochs
            .iter()
            .map(|e| {
                let mut row = vec![
                    e.epoch.to_string(),
                    e.learning_rate.to_string(),
                    e.loss.total.to_string(),
                    e.loss.training_cost.to_string(),
                ];
                row.extend(e.loss.routing_costs.iter().map(|(_, v)| v.to_string()));
                row.extend(e.loss.balancing_costs.iter().map(|(_, v)| v.to_string()));
                row.extend([e.loss.lambda1, e.loss.lambda2, e.train_accuracy, e.test_accuracy].map(|v| v.to_string()));
                row.extend(self.probe_layers.iter().map(|&l| {
                    e.entropy
                        .get(l)
                        .and_then(|h| h.average)
                        .map_or_else(|| "none".to_string(), |v| v.to_string())
                }));
                row
            })
            .collect();
        Table::new(header, rows)
            .with_meta("seed", self.seed)
            .with_meta("batch_size", self.batch_size)
    }
}
