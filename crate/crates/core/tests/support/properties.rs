//! Property checks shared by the proptest integration tests and the
//! acceptance harness. Every check builds its own deterministic runner, so a
//! failure reproduces exactly.

use std::collections::BTreeMap;

use cdj::data::{generate_blobs, parse_idx, split, BlobParams};
use cdj::losses::{
    balancing_cost, balancing_cost_gradient, build_class_activation_matrix, routing_loss, routing_loss_gradient,
    total_cost, ClassActivationMatrix, LossWeights, NodeActivations,
};
use cdj::network::{decode_checkpoint, encode_checkpoint, forward, init_parameters, LayerSpec, NetworkTopology};
use cdj::ops;
use cdj::probes::{layer_entropy, purity_snapshot};
use cdj::trainer::sample_balanced_from_groups;
use cdj::{ForwardTrace, GradientTape, Tensor, Var};
use proptest::collection::vec;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{central_difference, normwise_close, worst_mismatch};

pub type Check = fn() -> Result<(), String>;

/// Every property, by name.
pub const ALL: &[(&str, Check)] = &[
    ("routing and balancing sign bounds", loss_sign_bounds),
    ("class permutation invariance", class_permutation_invariance),
    ("node permutation invariance", node_permutation_invariance),
    ("scale law", scale_law),
    ("gradient structure", gradient_structure),
    ("class-matrix mass conservation", mass_conservation),
    ("loss breakdown composition", breakdown_composition),
    ("op gradients match finite differences", op_gradients),
    ("convolution linearity", conv_linearity),
    ("shape algebra", shape_algebra),
    ("forward determinism", forward_determinism),
    ("channel superposition", channel_superposition),
    ("trace completeness", trace_completeness),
    ("checkpoint round trip", checkpoint_round_trip),
    ("entropy bounds", entropy_bounds),
    ("entropy invariances", entropy_invariances),
    ("snapshot normalisation", snapshot_normalisation),
    ("truncated idx rejected", truncated_idx_rejected),
    ("generator determinism", generator_determinism),
    ("split partitions", split_partitions),
    ("balanced sampler", balanced_sampler),
];

pub fn runner(cases: u32) -> TestRunner {
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn run<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    runner(cases).run(&strategy, test).map_err(|e| e.to_string())
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

// ---------------------------------------------------------------------------
// Strategies

/// Non-negative `C×R` matrix, `C ∈ 2..=6`, `R ∈ 1..=10`, magnitudes over six decades.
fn matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=6, 1usize..=10, -3.0f64..3.0).prop_flat_map(|(c, r, e)| {
        let scale = 10f64.powf(e);
        vec(vec(prop_oneof![1 => Just(0.0), 6 => 0.0..scale], r), c)
    })
}

fn cam(rows: &[Vec<f64>]) -> ClassActivationMatrix {
    ClassActivationMatrix::from_rows(rows).unwrap()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Values bounded away from zero by at least `gap`.
fn away_from_zero(shape: Vec<usize>, gap: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    vec((gap..1.0, any::<bool>()), n).prop_map(move |d| {
        let data = d.into_iter().map(|(v, neg)| if neg { -v } else { v }).collect();
        Tensor::new(shape.clone(), data).unwrap()
    })
}

// ---------------------------------------------------------------------------
// Losses

pub fn loss_sign_bounds() -> Result<(), String> {
    run(10_000, matrix(), |m| {
        let m = cam(&m);
        let r = routing_loss(&m).unwrap();
        let b = balancing_cost(&m).unwrap();
        prop_assert!(r <= 0.0, "routing loss {r} > 0");
        prop_assert!(b >= 0.0, "balancing cost {b} < 0");
        Ok(())
    })
}

pub fn class_permutation_invariance() -> Result<(), String> {
    let s = matrix().prop_flat_map(|m| {
        let c = m.len();
        (Just(m), permutation(c))
    });
    run(2_000, s, |(m, perm)| {
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&h| m[h].clone()).collect();
        let (a, b) = (cam(&m), cam(&permuted));
        prop_assert_eq!(routing_loss(&a).unwrap().to_bits(), routing_loss(&b).unwrap().to_bits());
        prop_assert_eq!(balancing_cost(&a).unwrap().to_bits(), balancing_cost(&b).unwrap().to_bits());
        Ok(())
    })
}

pub fn node_permutation_invariance() -> Result<(), String> {
    let s = matrix().prop_flat_map(|m| {
        let r = m[0].len();
        (Just(m), permutation(r))
    });
    run(2_000, s, |(m, perm)| {
        let permuted: Vec<Vec<f64>> = m.iter().map(|row| perm.iter().map(|&j| row[j]).collect()).collect();
        let (a, b) = (cam(&m), cam(&permuted));
        prop_assert_eq!(routing_loss(&a).unwrap().to_bits(), routing_loss(&b).unwrap().to_bits());
        prop_assert_eq!(balancing_cost(&a).unwrap().to_bits(), balancing_cost(&b).unwrap().to_bits());
        Ok(())
    })
}

/// Both terms are quadratic in the matrix: exact for powers of two, within
/// rounding for any other factor.
pub fn scale_law() -> Result<(), String> {
    let s = (matrix(), -4i32..=4, 0.01f64..100.0);
    run(2_000, s, |(m, k, alpha)| {
        let base = cam(&m);
        let (r0, b0) = (routing_loss(&base).unwrap(), balancing_cost(&base).unwrap());
        let pow2 = 2f64.powi(k);
        let scaled = base.scaled(pow2);
        prop_assert_eq!(routing_loss(&scaled).unwrap(), r0 * pow2 * pow2);
        prop_assert_eq!(balancing_cost(&scaled).unwrap(), b0 * pow2 * pow2);
        let scaled = base.scaled(alpha);
        let a2 = alpha * alpha;
        // Normwise: relative to the squared scale of the entries, since
        // nearly uniform columns cancel.
        let peak = m.iter().flatten().fold(0.0f64, |a, v| a.max(*v));
        let r_tol = 1e-12 * a2 * peak * peak;
        let b_tol = r_tol * (m[0].len() * m[0].len()) as f64;
        let (r1, b1) = (routing_loss(&scaled).unwrap(), balancing_cost(&scaled).unwrap());
        prop_assert!((r1 - a2 * r0).abs() <= r_tol, "{r1} vs {}", a2 * r0);
        prop_assert!((b1 - a2 * b0).abs() <= b_tol, "{b1} vs {}", a2 * b0);
        Ok(())
    })
}

/// Routing gradient columns sum to zero; the balancing gradient is constant
/// along each row and its entries sum to zero.
pub fn gradient_structure() -> Result<(), String> {
    run(2_000, matrix(), |m| {
        let (c, r) = (m.len(), m[0].len());
        let scale = m.iter().flatten().fold(0.0f64, |a, v| a.max(*v)).max(f64::MIN_POSITIVE);
        let g = routing_loss_gradient(&cam(&m)).unwrap();
        let tol = 1e-13 * scale;
        for j in 0..r {
            let s: f64 = (0..c).map(|h| g.data()[h * r + j]).sum();
            prop_assert!(s.abs() <= tol, "routing column {j} sums to {s}");
        }
        let g = balancing_cost_gradient(&cam(&m)).unwrap();
        for h in 0..c {
            let row = &g.data()[h * r..(h + 1) * r];
            prop_assert!(row.iter().all(|v| v.to_bits() == row[0].to_bits()), "row {h} not constant: {row:?}");
        }
        let total: f64 = (0..c).map(|h| g.data()[h * r]).sum();
        prop_assert!(total.abs() <= 1e-13 * scale * r as f64, "balancing rows sum to {total}");
        Ok(())
    })
}

/// Column sums equal the total node activation; row h equals the sum over
/// the samples labelled h.
pub fn mass_conservation() -> Result<(), String> {
    let s = (1usize..=20, 1usize..=8, 2usize..=5).prop_flat_map(|(n, r, c)| {
        (tensor(vec![n, r], 0.0, 10.0), vec(0..c, n), Just(c))
    });
    run(2_000, s, |(a, labels, c)| {
        let (n, r) = (a.shape()[0], a.shape()[1]);
        let m = build_class_activation_matrix(&NodeActivations::from_tensor(a.clone()).unwrap(), &labels, c).unwrap();
        for j in 0..r {
            let direct: f64 = (0..n).map(|i| a.data()[i * r + j]).sum();
            let col: f64 = m.column(j).iter().sum();
            prop_assert!((direct - col).abs() <= 1e-12 * direct.max(1.0), "column {j}: {col} vs {direct}");
        }
        for h in 0..c {
            for j in 0..r {
                let direct: f64 = (0..n).filter(|&i| labels[i] == h).map(|i| a.data()[i * r + j]).sum();
                prop_assert!((m.get(h, j) - direct).abs() <= 1e-12 * direct.max(1.0));
            }
        }
        Ok(())
    })
}

/// `total = C_S + λ1 Σ C_R + λ2 Σ C_C` with each term recomputed from the
/// trace by hand.
pub fn breakdown_composition() -> Result<(), String> {
    let topo = NetworkTopology::new(
        (1, 4, 4),
        vec![
            LayerSpec::conv(3, 3, 1, 0),
            LayerSpec::conv(4, 2, 1, 0),
            LayerSpec::fc(3),
        ],
        3,
    )
    .with_routing_layers(&[0, 1]);
    let s = (
        tensor(vec![6, 3, 2, 2], -1.0, 1.0),
        tensor(vec![6, 4, 1, 1], -1.0, 1.0),
        tensor(vec![6, 3], -3.0, 3.0),
        vec(0usize..3, 6),
        0.0f64..2.0,
        0.0f64..2.0,
        any::<bool>(),
    );
    run(500, s, |(l0, l1, logits, labels, lambda1, lambda2, normalize)| {
        let fc = Tensor::new(vec![6, 3, 1, 1], logits.data().to_vec()).unwrap();
        let trace = ForwardTrace {
            layers: vec![l0, l1, fc],
            logits: logits.clone(),
        };
        let w = LossWeights {
            lambda1,
            lambda2,
            normalize_by_batch: normalize,
        };
        let b = total_cost(&trace, &topo, &labels, None, w).map_err(|e| fail(e.to_string()))?;
        let ce = ops::softmax_cross_entropy(&logits, &labels).unwrap();
        let scale = if normalize { 1.0 / 6.0 } else { 1.0 };
        let (mut rs, mut bs) = (0.0, 0.0);
        for layer in [0, 1] {
            let a = cdj::losses::node_activations(&trace.layers[layer]).unwrap();
            let m = build_class_activation_matrix(&a, &labels, 3).unwrap().scaled(scale);
            rs += routing_loss(&m).unwrap();
            bs += balancing_cost(&m).unwrap();
        }
        let expected = ce + lambda1 * rs + lambda2 * bs;
        prop_assert!((b.training_cost - ce).abs() <= 1e-12 * ce.abs().max(1.0));
        prop_assert!((b.total - expected).abs() <= 1e-12 * expected.abs().max(1.0), "{} vs {expected}", b.total);
        let recomposed = b.training_cost + b.lambda1 * b.routing_sum() + b.lambda2 * b.balancing_sum();
        prop_assert!((b.total - recomposed).abs() <= 1e-12 * recomposed.abs().max(1.0));
        prop_assert!(b.routing_costs.iter().all(|(_, v)| *v <= 0.0));
        prop_assert!(b.balancing_costs.iter().all(|(_, v)| *v >= 0.0));
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Ops

/// Compares the tape gradient of `Σ w ⊙ op(inputs)` against central
/// differences of the plain forward function, for every input.
fn check_gradient(
    inputs: &[Tensor],
    weights_seed: u64,
    taped: impl Fn(&mut GradientTape, &[Var]) -> Var,
    plain: impl Fn(&[Tensor]) -> Tensor,
) -> Result<(), TestCaseError> {
    use rand::Rng;
    let out_shape = plain(inputs).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let n: usize = out_shape.iter().product();
    let w = Tensor::new(out_shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    let mut tape = GradientTape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = taped(&mut tape, &vars);
    let wv = tape.constant(w.clone());
    let prod = tape.mul(out, wv).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();

    for (k, (input, var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get(*var).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; input.len()]);
        let numeric = central_difference(
            |x| {
                let mut args = inputs.to_vec();
                args[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).unwrap();
                plain(&args).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
            },
            input.data(),
            1e-5,
        );
        if let Some((i, a, n)) = worst_mismatch(&analytic, &numeric, 1e-5, 1e-8) {
            return Err(fail(format!("input {k}, element {i}: analytic {a}, numeric {n}")));
        }
    }
    Ok(())
}

/// Per-op gradient checks on random shapes, with inputs kept away from the
/// non-differentiable points of ReLU and max-pool.
pub fn op_gradients() -> Result<(), String> {
    let conv = (1usize..=2, 1usize..=2, 3usize..=5, 1usize..=3, 1usize..=2, 0usize..=1)
        .prop_filter("kernel fits", |&(_, _, hw, k, _, p)| k <= hw + 2 * p)
        .prop_flat_map(|(cin, cout, hw, k, s, p)| {
            (
                tensor(vec![2, cin, hw, hw], -1.0, 1.0),
                tensor(vec![cout, cin, k, k], -1.0, 1.0),
                tensor(vec![cout], -1.0, 1.0),
                Just((s, p)),
                any::<u64>(),
            )
        });
    run(60, conv, |(x, f, b, (s, p), seed)| {
        check_gradient(
            &[x, f, b],
            seed,
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), s, p).unwrap(),
            |a| ops::conv2d(&a[0], &a[1], Some(&a[2]), s, p).unwrap(),
        )
    })?;

    let affine = (1usize..=4, 1usize..=6, 1usize..=5).prop_flat_map(|(n, d, m)| {
        (tensor(vec![n, d], -1.0, 1.0), tensor(vec![d, m], -1.0, 1.0), tensor(vec![m], -1.0, 1.0), any::<u64>())
    });
    run(60, affine, |(x, w, b, seed)| {
        check_gradient(
            &[x, w, b],
            seed,
            |t, v| t.affine(v[0], v[1], Some(v[2])).unwrap(),
            |a| ops::affine(&a[0], &a[1], Some(&a[2])).unwrap(),
        )
    })?;

    let relu = (vec(1usize..=3, 4).prop_flat_map(|s| away_from_zero(s, 1e-3)), any::<u64>());
    run(60, relu, |(x, seed)| check_gradient(&[x], seed, |t, v| t.relu(v[0]).unwrap(), |a| ops::relu(&a[0])))?;

    // Distinct values on a 0.01 grid plus jitter keep every window's maximum unique.
    let pool = (1usize..=2, 2usize..=5, 1usize..=3, 1usize..=2)
        .prop_filter("window fits", |&(_, hw, k, _)| k <= hw)
        .prop_flat_map(|(c, hw, k, s)| {
            let n = 2 * c * hw * hw;
            (Just(vec![2, c, hw, hw]), permutation(n), vec(0.0f64..1e-3, n), Just((k, s)), any::<u64>())
        })
        .prop_map(|(shape, perm, jitter, ks, seed)| {
            let data = perm.iter().zip(&jitter).map(|(&p, j)| p as f64 * 0.01 + j).collect();
            (Tensor::new(shape, data).unwrap(), ks, seed)
        });
    run(60, pool, |(x, (k, s), seed)| {
        check_gradient(
            &[x],
            seed,
            |t, v| t.max_pool2d(v[0], k, s).unwrap(),
            |a| ops::max_pool2d(&a[0], k, s).unwrap(),
        )
    })?;

    let gap = (vec(1usize..=3, 4).prop_flat_map(|s| tensor(s, -1.0, 1.0)), any::<u64>());
    run(60, gap, |(x, seed)| {
        check_gradient(&[x], seed, |t, v| t.global_avg_pool(v[0]).unwrap(), |a| ops::global_avg_pool(&a[0]).unwrap())
    })?;

    let ce = (1usize..=5, 2usize..=5).prop_flat_map(|(n, c)| (tensor(vec![n, c], -4.0, 4.0), vec(0..c, n)));
    run(60, ce, |(x, labels)| {
        check_gradient(
            &[x],
            0,
            |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap(),
            |a| Tensor::scalar(ops::softmax_cross_entropy(&a[0], &labels).unwrap()),
        )
    })?;

    let cm = (1usize..=8, 1usize..=5, 2usize..=4, 0.05f64..1.0)
        .prop_flat_map(|(n, r, c, scale)| (tensor(vec![n, r], 0.0, 2.0), vec(0..c, n), Just((c, scale))));
    run(60, cm, |(a, labels, (c, scale))| {
        let plain_matrix = |t: &Tensor| {
            build_class_activation_matrix(&NodeActivations::from_tensor(t.clone()).unwrap(), &labels, c)
                .unwrap()
                .scaled(scale)
        };
        check_gradient(
            std::slice::from_ref(&a),
            1,
            |t, v| {
                let m = t.class_matrix(v[0], &labels, c, scale).unwrap();
                let r = t.routing_loss(m).unwrap();
                let b = t.balancing_cost(m).unwrap();
                t.add(r, b).unwrap()
            },
            |x| {
                let m = plain_matrix(&x[0]);
                Tensor::scalar(routing_loss(&m).unwrap() + balancing_cost(&m).unwrap())
            },
        )
    })
}

pub fn conv_linearity() -> Result<(), String> {
    let s = (1usize..=3, 1usize..=3, 3usize..=6, 1usize..=3, 1usize..=2, 0usize..=2)
        .prop_filter("kernel fits", |&(_, _, hw, k, _, p)| k <= hw + 2 * p)
        .prop_flat_map(|(cin, cout, hw, k, s, p)| {
            (
                tensor(vec![2, cin, hw, hw], -1.0, 1.0),
                tensor(vec![cout, cin, k, k], -1.0, 1.0),
                tensor(vec![cout, cin, k, k], -1.0, 1.0),
                -2.0f64..2.0,
                -2.0f64..2.0,
                Just((s, p)),
            )
        });
    run(500, s, |(x, f1, f2, a, b, (s, p))| {
        let mixed = f1.zip_map(&f2, |u, v| a * u + b * v).unwrap();
        let lhs = ops::conv2d(&x, &mixed, None, s, p).unwrap();
        let y1 = ops::conv2d(&x, &f1, None, s, p).unwrap();
        let y2 = ops::conv2d(&x, &f2, None, s, p).unwrap();
        let rhs = y1.zip_map(&y2, |u, v| a * u + b * v).unwrap();
        prop_assert!(normwise_close(lhs.data(), rhs.data(), 1e-12));
        Ok(())
    })
}

/// Output extents follow `⌊(H + 2p − k)/s⌋ + 1`, and kernels that do not
/// fit the padded input are rejected. Exhaustive over a small grid.
pub fn shape_algebra() -> Result<(), String> {
    let mut combos = 0;
    for h in 1..=6 {
        for w in [1, 3, 5] {
            for k in 1..=4 {
                for s in 1..=3 {
                    for p in 0..=2 {
                        combos += 1;
                        let x = Tensor::zeros(&[1, 2, h, w]);
                        let f = Tensor::zeros(&[3, 2, k, k]);
                        let got = ops::conv2d(&x, &f, None, s, p);
                        let fits = k <= h + 2 * p && k <= w + 2 * p;
                        match (fits, got) {
                            (true, Ok(y)) => {
                                let expect = [1, 3, (h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1];
                                if y.shape() != expect {
                                    return Err(format!("h={h} w={w} k={k} s={s} p={p}: {:?} != {expect:?}", y.shape()));
                                }
                            }
                            (false, Err(_)) => {}
                            (fits, got) => {
                                return Err(format!("h={h} w={w} k={k} s={s} p={p}: fits={fits} but got {got:?}"))
                            }
                        }
                    }
                }
            }
        }
    }
    if combos < 100 {
        return Err(format!("only {combos} combinations checked"));
    }
    Ok(())
}

fn small_topology() -> NetworkTopology {
    NetworkTopology::new(
        (1, 8, 8),
        vec![
            "conv:4 k=3x3 s=1 p=1 pool=2/2".parse().unwrap(),
            "conv:4 k=3x3 s=1 p=0".parse().unwrap(),
            "fc:3".parse().unwrap(),
        ],
        3,
    )
}

pub fn forward_determinism() -> Result<(), String> {
    let topo = small_topology();
    let s = (any::<u64>(), tensor(vec![3, 1, 8, 8], 0.0, 1.0));
    run(50, s, |(seed, x)| {
        let p = init_parameters(&topo, seed).unwrap();
        let a = forward(&topo, &p, &x).unwrap();
        let b = forward(&topo, &init_parameters(&topo, seed).unwrap(), &x).unwrap();
        for (u, v) in a.layers.iter().zip(&b.layers).chain([(&a.logits, &b.logits)]) {
            prop_assert!(u.data().iter().zip(v.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        Ok(())
    })
}

/// A bias-free convolution response is the sum of the responses to each
/// input channel alone.
pub fn channel_superposition() -> Result<(), String> {
    let s = (2usize..=4, 1usize..=3, 3usize..=6, 1usize..=3).prop_flat_map(|(cin, cout, hw, k)| {
        (tensor(vec![2, cin, hw, hw], -1.0, 1.0), tensor(vec![cout, cin, k, k], -1.0, 1.0))
    });
    run(300, s, |(x, f)| {
        let full = ops::conv2d(&x, &f, None, 1, 1).unwrap();
        let cin = x.shape()[1];
        let plane = x.shape()[2] * x.shape()[3];
        let mut sum = Tensor::zeros(full.shape());
        for ch in 0..cin {
            let only: Vec<f64> = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| if (i / plane) % cin == ch { *v } else { 0.0 })
                .collect();
            let y = ops::conv2d(&Tensor::new(x.shape().to_vec(), only).unwrap(), &f, None, 1, 1).unwrap();
            sum = sum.zip_map(&y, |a, b| a + b).unwrap();
        }
        prop_assert!(normwise_close(full.data(), sum.data(), 1e-12));
        Ok(())
    })
}

/// Random conv/fc stacks: the trace holds one map per layer with the shape
/// the geometry promises, and the logits are the last layer flattened.
pub fn trace_completeness() -> Result<(), String> {
    let s = (vec((1usize..=4, 1usize..=3, any::<bool>()), 0..=3), 1usize..=3, 2usize..=4, 1usize..=3);
    run(200, s, |(convs, fcs, classes, n)| {
        let mut layers: Vec<LayerSpec> = convs
            .iter()
            .map(|&(m, k, pool)| {
                let l = LayerSpec::conv(m, k, 1, k / 2);
                if pool {
                    l.pooled(2, 2)
                } else {
                    l
                }
            })
            .collect();
        for _ in 1..fcs {
            layers.push(LayerSpec::fc(3));
        }
        layers.push(LayerSpec::fc(classes));
        let topo = NetworkTopology::new((1, 9, 9), layers, classes);
        let Ok(geometry) = topo.geometry() else {
            return Ok(());
        };
        let p = init_parameters(&topo, 0).unwrap();
        let trace = forward(&topo, &p, &Tensor::full(&[n, 1, 9, 9], 0.5)).unwrap();
        prop_assert_eq!(trace.layers.len(), topo.layers.len());
        for (t, g) in trace.layers.iter().zip(&geometry) {
            prop_assert_eq!(t.shape(), &[n, g.output.0, g.output.1, g.output.2][..]);
        }
        prop_assert_eq!(trace.logits.shape(), &[n, classes][..]);
        prop_assert_eq!(trace.logits.data(), trace.layers.last().unwrap().data());
        Ok(())
    })
}

pub fn checkpoint_round_trip() -> Result<(), String> {
    let special = prop_oneof![
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE / 4.0),
        Just(f64::MAX),
        Just(-1e-300),
        -1e3f64..1e3
    ];
    let s = (1usize..=4, 1usize..=3, any::<bool>(), any::<u64>(), vec(special, 8));
    run(100, s, |(maps, classes, bias, seed, extremes)| {
        let mut topo = NetworkTopology::new(
            (1, 5, 5),
            vec![LayerSpec::conv(maps, 3, 1, 0).pooled(3, 1), LayerSpec::fc(classes)],
            classes,
        );
        if !bias {
            topo = topo.without_bias();
        }
        let mut p = init_parameters(&topo, seed).unwrap();
        for (t, v) in p.tensors_mut().zip(extremes.iter().cycle()) {
            let mut d = t.data().to_vec();
            d[0] = *v;
            *t = Tensor::new(t.shape().to_vec(), d).unwrap();
        }
        let mut meta = BTreeMap::new();
        meta.insert("seed".to_string(), seed.to_string());
        let back = decode_checkpoint(&encode_checkpoint(&p, &topo, &meta)).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(&back.topology, &topo);
        prop_assert_eq!(&back.metadata, &meta);
        for (a, b) in p.tensors().zip(back.params.tensors()) {
            prop_assert_eq!(a.shape(), b.shape());
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Probes

pub fn entropy_bounds() -> Result<(), String> {
    run(10_000, matrix(), |m| {
        let c = m.len();
        let e = layer_entropy(&cam(&m)).unwrap();
        if let Some(h) = e.average {
            prop_assert!(h >= -1e-15 && h <= (c as f64).ln() + 1e-12, "entropy {h} outside [0, ln {c}]");
        } else {
            prop_assert_eq!(e.dead_nodes, e.num_nodes);
        }
        Ok(())
    })
}

/// Invariant to scaling any column and to permuting classes or nodes.
pub fn entropy_invariances() -> Result<(), String> {
    let s = matrix().prop_flat_map(|m| {
        let (c, r) = (m.len(), m[0].len());
        (Just(m), permutation(c), permutation(r), vec(-6.0f64..6.0, r))
    });
    run(2_000, s, |(m, pc, pr, exps)| {
        let base = layer_entropy(&cam(&m)).unwrap();
        // Column scales are powers of two so dead-node classification cannot flip.
        let scaled: Vec<Vec<f64>> = m
            .iter()
            .map(|row| row.iter().zip(&exps).map(|(v, e)| v * 2f64.powi(*e as i32)).collect())
            .collect();
        let permuted: Vec<Vec<f64>> = pc.iter().map(|&h| pr.iter().map(|&j| m[h][j]).collect()).collect();
        for other in [scaled, permuted] {
            let e = layer_entropy(&cam(&other)).unwrap();
            match (base.average, e.average) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12, "{a} vs {b}"),
                (a, b) => prop_assert_eq!(a.is_some(), b.is_some()),
            }
        }
        Ok(())
    })
}

pub fn snapshot_normalisation() -> Result<(), String> {
    run(2_000, matrix(), |m| {
        let snap = purity_snapshot(&cam(&m));
        for j in 0..m[0].len() {
            let col: f64 = snap.normalized.iter().map(|row| row[j]).sum();
            if snap.dead[j] {
                prop_assert_eq!(col, 0.0);
                prop_assert!(snap.peakedness[j].is_none());
            } else {
                prop_assert!((col - 1.0).abs() <= 1e-12, "column {j} sums to {col}");
                let p = snap.peakedness[j].unwrap();
                prop_assert!(p >= 1.0 / m.len() as f64 - 1e-12 && p <= 1.0 + 1e-12);
            }
        }
        Ok(())
    })
}

// ---------------------------------------------------------------------------
// Data and sampling

fn idx_pair(n: usize, side: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut images = vec![0, 0, 8, 3];
    for d in [n, side, side] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend((0..n * side * side).map(|i| (i * 37 % 256) as u8));
    let mut lab = vec![0, 0, 8, 1];
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (images, lab)
}

/// Any strict prefix of a valid image or label file is an error, never a panic.
pub fn truncated_idx_rejected() -> Result<(), String> {
    let s = (1usize..=4, 1usize..=4).prop_flat_map(|(n, side)| {
        (Just((n, side)), vec(0u8..3, n), any::<bool>(), any::<prop::sample::Index>())
    });
    run(1_000, s, |((n, side), labels, cut_images, cut)| {
        let (images, lab) = idx_pair(n, side, &labels);
        prop_assert!(parse_idx(&images, &lab, Some(3)).is_ok());
        let result = if cut_images {
            parse_idx(&images[..cut.index(images.len())], &lab, Some(3))
        } else {
            parse_idx(&images, &lab[..cut.index(lab.len())], Some(3))
        };
        prop_assert!(result.is_err());
        Ok(())
    })
}

pub fn generator_determinism() -> Result<(), String> {
    let s = (2usize..=5, 1usize..=5, 4usize..=10, 1.0f64..8.0, any::<u64>());
    run(100, s, |(c, spc, side, sep, seed)| {
        let p = BlobParams::new(c, spc, side, sep, seed);
        let a = generate_blobs(&p).unwrap();
        let b = generate_blobs(&p).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.class_counts(), vec![spc; c]);
        let other = generate_blobs(&BlobParams::new(c, spc, side, sep, seed.wrapping_add(1))).unwrap();
        prop_assert_ne!(&a, &other);
        Ok(())
    })
}

/// A split is a stratified partition of the source dataset.
pub fn split_partitions() -> Result<(), String> {
    let s = (2usize..=4, 4usize..=10, 0.1f64..0.5, any::<u64>());
    run(200, s, |(c, spc, f, seed)| {
        let per_class = (spc as f64 * f).round() as usize;
        prop_assume!(per_class > 0 && per_class < spc);
        let data = generate_blobs(&BlobParams::new(c, spc, 4, 3.0, seed)).unwrap();
        let (train, test) = split(&data, f, seed).map_err(|e| fail(e.to_string()))?;
        prop_assert_eq!(train.len() + test.len(), data.len());
        prop_assert_eq!(test.class_counts(), vec![per_class; c]);
        let mut all: Vec<_> = train.samples().iter().chain(test.samples()).map(|s| s.input.data().to_vec()).collect();
        let mut orig: Vec<_> = data.samples().iter().map(|s| s.input.data().to_vec()).collect();
        let key = |v: &Vec<f64>| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        all.sort_by_key(key);
        orig.sort_by_key(key);
        prop_assert_eq!(all, orig);
        Ok(())
    })
}

pub fn balanced_sampler() -> Result<(), String> {
    let s = (vec(1usize..=6, 1..=6), 0usize..=40, any::<u64>());
    run(2_000, s, |(sizes, extra, seed)| {
        let mut next = 0;
        let groups: Vec<Vec<usize>> = sizes
            .iter()
            .map(|&n| {
                next += n;
                (next - n..next).collect()
            })
            .collect();
        let batch = sizes.len() + extra;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = sample_balanced_from_groups(&groups, batch, &mut rng).unwrap();
        prop_assert_eq!(b.len(), batch);
        let counts: Vec<usize> = groups.iter().map(|g| b.iter().filter(|i| g.contains(i)).count()).collect();
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "counts {counts:?}");
        let again = sample_balanced_from_groups(&groups, batch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(b, again);
        Ok(())
    })
}
