use std::collections::BTreeSet;

use super::{train, TrainError, TrainingConfig, TrainingReport};
use crate::data::Dataset;
use crate::network::{forward, init_parameters, NetworkError, NetworkTopology, ParameterSet};
use crate::ops;
use crate::tensor::Tensor;

/// Trains one member per seed; member `i` is initialised and sampled with
/// `seeds[i]` and otherwise uses `config` unchanged. Results are in seed
/// order. With `parallel`, members run on scoped threads.
pub fn train_ensemble(
    topology: &NetworkTopology,
    train_set: &Dataset,
    test_set: &Dataset,
    config: &TrainingConfig,
    seeds: &[u64],
    parallel: bool,
) -> Result<Vec<(ParameterSet, TrainingReport)>, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Config("an ensemble needs at least one seed".into()));
    }
    if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
        return Err(TrainError::Config(format!("ensemble seeds must be distinct, got {seeds:?}")));
    }
    let member = |seed: u64| -> Result<(ParameterSet, TrainingReport), TrainError> {
        let cfg = TrainingConfig { seed, ..config.clone() };
        train(topology, init_parameters(topology, seed)?, train_set, test_set, &cfg)
    };
    let results: Vec<_> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || member(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ensemble member panicked"))
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| member(seed)).collect()
    };
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| r.map_err(|e| TrainError::Member { index, source: Box::new(e) }))
        .collect()
}

/// Mean of the members' softmax outputs, `N×C`.
pub fn ensemble_probabilities(
    members: &[ParameterSet],
    topology: &NetworkTopology,
    batch: &Tensor,
) -> Result<Tensor, NetworkError> {
    if members.is_empty() {
        return Err(NetworkError::Input("an ensemble needs at least one member".into()));
    }
    let mut sum: Option<Tensor> = None;
    for m in members {
        let p = ops::softmax(&forward(topology, m, batch)?.logits).map_err(|e| NetworkError::Input(e.to_string()))?;
        sum = Some(match sum {
            None => p,
            Some(s) => s.zip_map(&p, |a, b| a + b).expect("equal shapes"),
        });
    }
    let k = members.len() as f64;
    Ok(sum.expect("non-empty").map(|v| v / k))
}

/// Argmax of the averaged softmax; ties go to the lowest class index.
pub fn predict_ensemble(
    members: &[ParameterSet],
    topology: &NetworkTopology,
    batch: &Tensor,
) -> Result<Vec<usize>, NetworkError> {
    Ok(ops::argmax_rows(&ensemble_probabilities(members, topology, batch)?))
}
