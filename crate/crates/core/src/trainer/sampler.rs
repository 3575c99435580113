use rand::seq::index;
use rand::Rng;

use super::TrainError;
use crate::data::Dataset;

/// Draws a batch whose group counts differ by at most one.
///
/// Every group gets `batch_size / G` samples; the `batch_size % G` groups
/// that get one extra are chosen by `rng`. Samples are drawn uniformly with
/// replacement within a group. Indices come back grouped, in group order.
pub fn sample_balanced_from_groups<R: Rng>(
    groups: &[Vec<usize>],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>, TrainError> {
    let g = groups.len();
    if g == 0 || batch_size < g {
        return Err(TrainError::Config(format!(
            "batch size {batch_size} cannot hold one sample of each of {g} classes"
        )));
    }
    if let Some(class) = groups.iter().position(Vec::is_empty) {
        return Err(TrainError::EmptyClass { class });
    }
    let mut counts = vec![batch_size / g; g];
    for k in index::sample(rng, g, batch_size % g) {
        counts[k] += 1;
    }
    let mut batch = Vec::with_capacity(batch_size);
    for (members, n) in groups.iter().zip(counts) {
        batch.extend((0..n).map(|_| members[rng.random_range(0..members.len())]));
    }
    Ok(batch)
}

/// Class-balanced batch of dataset indices.
pub fn sample_balanced_batch<R: Rng>(dataset: &Dataset, batch_size: usize, rng: &mut R) -> Result<Vec<usize>, TrainError> {
    sample_balanced_from_groups(&dataset.indices_by_class(), batch_size, rng)
}
