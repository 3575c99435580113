//! Shared oracles and fixtures for the integration tests and the acceptance
//! harness. Nothing here calls into the loss or gradient code it is used to
//! check; the evaluators are written directly from the definitions.
#![allow(dead_code)]

pub mod properties;

use cdj::data::{generate_blobs, split, BlobParams, Dataset};
use cdj::losses::{total_cost, LossWeights};
use cdj::network::{forward, LayerKind, NetworkTopology, ParameterSet};
use cdj::trainer::{LearningRateSchedule, RoutingLabelSource, TrainingConfig};
use cdj::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Finite differences

/// Central differences of `f` at `x` with step `h`, one coordinate at a time.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Largest elementwise discrepancy that fails both the relative and the
/// absolute tolerance, or `None` if every element passes one of them.
pub fn worst_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> Option<(usize, f64, f64)> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(_, (a, n))| {
            let d = (*a - *n).abs();
            d > abs && d > rel * a.abs().max(n.abs())
        })
        .map(|(i, (a, n))| (i, *a, *n))
        .max_by(|x, y| (x.1 - x.2).abs().total_cmp(&(y.1 - y.2).abs()))
}

// ---------------------------------------------------------------------------
// Brute-force loss evaluators, straight from the definitions.

/// `-1/(R·C) Σ_j Σ_h (C_hj − μ_j)²`.
pub fn brute_routing(m: &[Vec<f64>]) -> f64 {
    let c = m.len();
    let r = m[0].len();
    let mut total = 0.0;
    for j in 0..r {
        let mut mu = 0.0;
        for row in m {
            mu += row[j];
        }
        mu /= c as f64;
        for row in m {
            total += (row[j] - mu) * (row[j] - mu);
        }
    }
    -total / (r * c) as f64
}

/// Derivative of [`brute_routing`] by the chain rule, keeping the `∂μ/∂C`
/// term explicitly rather than using the fact that it vanishes.
pub fn brute_routing_gradient(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = m.len();
    let r = m[0].len();
    let k = -1.0 / (r * c) as f64;
    let mut g = vec![vec![0.0; r]; c];
    for j in 0..r {
        let mu: f64 = m.iter().map(|row| row[j]).sum::<f64>() / c as f64;
        let dev_sum: f64 = m.iter().map(|row| row[j] - mu).sum();
        for h in 0..c {
            g[h][j] = k * (2.0 * (m[h][j] - mu) - 2.0 * dev_sum / c as f64);
        }
    }
    g
}

/// `1/C Σ_h (s_h − s̄)²` with `s_h = Σ_j C_hj`.
pub fn brute_balancing(m: &[Vec<f64>]) -> f64 {
    let c = m.len();
    let s: Vec<f64> = m.iter().map(|row| row.iter().sum()).collect();
    let mean: f64 = s.iter().sum::<f64>() / c as f64;
    s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64
}

pub fn brute_balancing_gradient(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = m.len();
    let r = m[0].len();
    let s: Vec<f64> = m.iter().map(|row| row.iter().sum()).collect();
    let mean: f64 = s.iter().sum::<f64>() / c as f64;
    let dev_sum: f64 = s.iter().map(|v| v - mean).sum();
    (0..c)
        .map(|h| vec![(2.0 / c as f64) * ((s[h] - mean) - dev_sum / c as f64); r])
        .collect()
}

/// Random non-negative `classes × nodes` matrix with a mix of magnitudes and
/// exact zeros.
pub fn random_matrix(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let c = rng.random_range(2..=6);
    let r = rng.random_range(1..=10);
    let scale = 10f64.powf(rng.random_range(-3.0..3.0));
    (0..c)
        .map(|_| {
            (0..r)
                .map(|_| if rng.random_bool(0.15) { 0.0 } else { scale * rng.random::<f64>() })
                .collect()
        })
        .collect()
}

/// `max |a − b| ≤ rel · max |a|` over all elements.
pub fn normwise_close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

// ---------------------------------------------------------------------------
// Degenerate vs balanced class-activation matrices.

/// One candidate: `C = 3`, `R = 6`, unit mass per column. Columns are
/// assigned round-robin to the classes in `active`; a column's own class
/// gets `1 − ε·(|active| − 1)` and every other active class gets `ε`.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub name: String,
    pub active: Vec<usize>,
    pub eps: f64,
    pub matrix: Vec<Vec<f64>>,
}

pub fn degeneracy_grid() -> Vec<Candidate> {
    let (c, r) = (3, 6);
    let subsets: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![2], vec![0, 1], vec![0, 2], vec![1, 2], vec![0, 1, 2]];
    let mut out = Vec::new();
    for eps in [0.05, 0.1, 0.2] {
        for active in &subsets {
            let mut m = vec![vec![0.0; r]; c];
            for j in 0..r {
                let own = active[j % active.len()];
                for &h in active {
                    m[h][j] = if h == own { 1.0 - eps * (active.len() - 1) as f64 } else { eps };
                }
            }
            out.push(Candidate {
                name: format!("classes{active:?} eps={eps}"),
                active: active.clone(),
                eps,
                matrix: m,
            });
        }
    }
    out.push(Candidate {
        name: "uniform".into(),
        active: vec![0, 1, 2],
        eps: 1.0 / 3.0,
        matrix: vec![vec![1.0 / 3.0; r]; c],
    });
    out
}

// ---------------------------------------------------------------------------
// Kink distance for gradient checks.

/// Smallest distance of the network's state on `batch` from a point where
/// ReLU or max-pool is not differentiable: the smallest |pre-activation|
/// entering a ReLU, and the smallest gap between the two largest positive
/// entries of any pooling window.
pub fn kink_margin(topology: &NetworkTopology, params: &ParameterSet, batch: &Tensor) -> f64 {
    let trace = forward(topology, params, batch).unwrap();
    let mut margin = f64::INFINITY;
    for (l, (spec, map)) in topology.layers.iter().zip(&trace.layers).enumerate() {
        let feeds_relu = l + 1 < topology.layers.len() || spec.routing;
        if feeds_relu {
            margin = margin.min(map.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        }
        let Some(pool) = spec.pool_after else { continue };
        if !matches!(spec.kind, LayerKind::Conv { .. }) {
            continue;
        }
        let s = map.shape();
        let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let d = map.data();
        let oh = (h - pool.window) / pool.stride + 1;
        let ow = (w - pool.window) / pool.stride + 1;
        for b in 0..n * ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut vals: Vec<f64> = (0..pool.window)
                        .flat_map(|dy| (0..pool.window).map(move |dx| (dy, dx)))
                        .map(|(dy, dx)| d[b * h * w + (oy * pool.stride + dy) * w + ox * pool.stride + dx].max(0.0))
                        .collect();
                    vals.sort_by(|a, b| b.total_cmp(a));
                    if vals[0] > 0.0 {
                        margin = margin.min(vals[0] - vals[1]);
                    }
                }
            }
        }
    }
    margin
}

/// Total cost of `params` (flattened in `ParameterSet::tensors` order) on a batch.
pub fn total_cost_at(
    topology: &NetworkTopology,
    template: &ParameterSet,
    flat: &[f64],
    batch: &Tensor,
    labels: &[usize],
    weights: LossWeights,
) -> f64 {
    let params = unflatten(template, flat);
    let trace = forward(topology, &params, batch).unwrap();
    total_cost(&trace, topology, labels, None, weights).unwrap().total
}

pub fn flatten(params: &ParameterSet) -> Vec<f64> {
    params.tensors().flat_map(|t| t.data().iter().copied()).collect()
}

pub fn unflatten(template: &ParameterSet, flat: &[f64]) -> ParameterSet {
    let mut p = template.clone();
    let mut offset = 0;
    for t in p.tensors_mut() {
        let n = t.len();
        *t = Tensor::new(t.shape().to_vec(), flat[offset..offset + n].to_vec()).unwrap();
        offset += n;
    }
    p
}

// ---------------------------------------------------------------------------
// The blob fixture used by the training criteria.

pub const FIXTURE_SEEDS: [u64; 3] = [1, 2, 3];
pub const FIXTURE_EPOCHS: usize = 20;

/// Four classes, 100 samples each, 12×12 images, neighbouring class centres
/// 4.5 latent units apart; 40% of each class is held out. Close enough
/// that a few test samples sit near a class boundary.
pub fn fixture_splits() -> (Dataset, Dataset) {
    let data = generate_blobs(&BlobParams::new(4, 100, 12, 4.5, 7)).unwrap();
    split(&data, 0.4, 7).unwrap()
}

/// Conv 5×5 + pool, a 4×4 conv that collapses the map to 1×1, and the
/// logits. Routing is on the middle layer.
pub fn fixture_topology() -> NetworkTopology {
    NetworkTopology::new(
        (1, 12, 12),
        vec![
            "conv:8 k=5x5 s=1 p=0 pool=2/2".parse().unwrap(),
            "conv:8 k=4x4 s=1 p=0".parse().unwrap(),
            "fc:4".parse().unwrap(),
        ],
        4,
    )
    .with_routing_layers(&[1])
}

pub fn fixture_config(lambda: f64, seed: u64) -> TrainingConfig {
    TrainingConfig {
        epochs: FIXTURE_EPOCHS,
        lambda1: lambda,
        lambda2: lambda,
        schedule: LearningRateSchedule::new(vec![(0, 0.02), (FIXTURE_EPOCHS, 0.002)]).unwrap(),
        seed,
        routing_labels: RoutingLabelSource::Class,
        ..TrainingConfig::default()
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Padded 3×3 convs with pooling, a valid 3×3 conv down to 1×1, and the
/// logits. Routing on the two middle layers, so the probe can compare a
/// shallow and a deep routed layer.
pub fn probe_topology() -> NetworkTopology {
    NetworkTopology::new(
        (1, 12, 12),
        vec![
            "conv:8 k=3x3 s=1 p=1 pool=2/2".parse().unwrap(),
            "conv:8 k=3x3 s=1 p=1 pool=2/2".parse().unwrap(),
            "conv:8 k=3x3 s=1 p=0".parse().unwrap(),
            "fc:4".parse().unwrap(),
        ],
        4,
    )
    .with_routing_layers(&[1, 2])
}
