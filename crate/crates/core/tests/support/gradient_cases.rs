//! Gradient-check cases shared by the gradient test target and the
//! acceptance suite. Each function returns the worst relative error of every
//! case over seeds `0..SEEDS`.

use phn_core::data::EncodedBatch;
use phn_core::gradcheck::{check_model, mode_grid, reference_difference_check};
use phn_core::graph::{Graph, NodeId};
use phn_core::scalar::{Scalar, TwoFloat};
use phn_core::ssg::{AttentionParams, EmbeddingTable, SoftGate};
use phn_core::tensor::{ParameterStore, Tensor};
use phn_core::towers::{ResidualMode, Tower};
use phn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 10;

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, vals).unwrap()
}

/// Weighted sum of an output so every element gets a distinct upstream gradient.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    let w = g.input(Tensor::new(shape, vals)?)?;
    let prod = g.hadamard(out, w)?;
    g.sum(prod)
}

/// Max relative error of `$body` over the parameters in `$store`, with the
/// numeric side refined in double-double precision.
macro_rules! check {
    ($store:expr, |$s:ident, $g:ident| $body:expr) => {{
        let store: &mut ParameterStore<f64> = $store;
        let mut wide = store.cast::<TwoFloat>();
        reference_difference_check(
            store,
            &mut wide,
            H,
            TOL,
            |$s: &ParameterStore<f64>, $g: &mut Graph<f64>| $body,
            |$s: &ParameterStore<TwoFloat>, $g: &mut Graph<TwoFloat>| $body,
        )
        .unwrap()
        .max_relative_error
    }};
}

/// Named worst-case relative errors over seeds `0..SEEDS`.
pub type Cases = Vec<(String, f64)>;

fn over_seeds(out: &mut Cases, name: &str, mut run: impl FnMut(u64) -> f64) {
    let worst = (0..SEEDS).map(&mut run).fold(0.0, f64::max);
    out.push((name.to_string(), worst));
}

fn binary<T: Scalar>(name: &str, g: &mut Graph<T>, a: NodeId, b: NodeId) -> Result<NodeId> {
    match name {
        "matmul" => g.matmul(a, b),
        "bmm" => g.bmm(a, b),
        "bmm_nt" => g.bmm_nt(a, b),
        "add" => g.add(a, b),
        "sub" => g.sub(a, b),
        "hadamard" => g.hadamard(a, b),
        "add_broadcast" => g.add_broadcast(a, b),
        "mul_broadcast" => g.mul_broadcast(a, b),
        "field_mix" => g.field_mix(a, b),
        _ => unreachable!("{name}"),
    }
}

fn unary<T: Scalar>(name: &str, g: &mut Graph<T>, a: NodeId) -> Result<NodeId> {
    match name {
        "sigmoid" => g.sigmoid(a),
        "leaky_relu" => g.leaky_relu(a, T::of(0.01)),
        "softmax_rows" => g.softmax_rows(a),
        "reshape" => g.reshape(a, &[2, 6]),
        "slice_last" => g.slice_last(a, 1, 3),
        "sum" => g.sum(a),
        "mean" => g.mean(a),
        _ => unreachable!("{name}"),
    }
}

pub fn binary_primitives() -> Cases {
    let mut out = Cases::new();
    let cases = [
        ("matmul", vec![3, 4], vec![4, 2]),
        ("bmm", vec![2, 3, 4], vec![2, 4, 2]),
        ("bmm_nt", vec![2, 3, 4], vec![2, 5, 4]),
        ("add", vec![3, 2], vec![3, 2]),
        ("sub", vec![3, 2], vec![3, 2]),
        ("hadamard", vec![3, 2], vec![3, 2]),
        ("add_broadcast", vec![3, 2, 4], vec![2, 4]),
        ("mul_broadcast", vec![3, 4], vec![4]),
        ("field_mix", vec![3, 3], vec![2, 3, 4]),
    ];
    for (name, sa, sb) in cases {
        over_seeds(&mut out, name, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let a = store.add("a", random_tensor(&mut rng, sa.clone(), 1.0));
            let b = store.add("b", random_tensor(&mut rng, sb.clone(), 1.0));
            check!(&mut store, |s, g| {
                let (an, bn) = (g.param(s, a)?, g.param(s, b)?);
                let out = binary(name, g, an, bn)?;
                weighted_sum(g, out, seed)
            })
        });
    }
    out
}

pub fn scaling_primitives() -> Cases {
    let mut out = Cases::new();
    over_seeds(&mut out, "scale_rows", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![3, 4], 1.0));
        let s = store.add("s", random_tensor(&mut rng, vec![3, 1], 1.0));
        check!(&mut store, |st, g| {
            let (xn, sn) = (g.param(st, x)?, g.param(st, s)?);
            let out = g.scale_rows(xn, sn)?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "scale_fields", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![2, 3, 4], 1.0));
        let u = store.add("u", random_tensor(&mut rng, vec![3], 1.0));
        check!(&mut store, |st, g| {
            let (xn, un) = (g.param(st, x)?, g.param(st, u)?);
            let out = g.scale_fields(xn, un)?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "scale", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![3, 4], 1.0));
        check!(&mut store, |st, g| {
            let xn = g.param(st, x)?;
            let out = g.scale(xn, Scalar::of(-1.7))?;
            weighted_sum(g, out, seed)
        })
    });
    out
}

pub fn unary_primitives() -> Cases {
    let mut out = Cases::new();
    let cases = [
        ("sigmoid", vec![3, 4]),
        ("leaky_relu", vec![3, 4]),
        ("softmax_rows", vec![2, 3, 4]),
        ("reshape", vec![3, 4]),
        ("slice_last", vec![3, 5]),
        ("sum", vec![3, 4]),
        ("mean", vec![3, 4]),
    ];
    for (name, shape) in cases {
        over_seeds(&mut out, name, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let a = store.add("a", random_tensor(&mut rng, shape.clone(), 2.0));
            check!(&mut store, |s, g| {
                let an = g.param(s, a)?;
                let out = unary(name, g, an)?;
                weighted_sum(g, out, seed)
            })
        });
    }
    out
}

pub fn structural_primitives() -> Cases {
    let mut out = Cases::new();
    over_seeds(&mut out, "concat_last", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let a = store.add("a", random_tensor(&mut rng, vec![3, 2], 1.0));
        let b = store.add("b", random_tensor(&mut rng, vec![3, 4], 1.0));
        check!(&mut store, |s, g| {
            let (an, bn) = (g.param(s, a)?, g.param(s, b)?);
            let out = g.concat_last(&[an, bn, an])?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "gather_rows", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let t = store.add("t", random_tensor(&mut rng, vec![5, 3], 1.0));
        check!(&mut store, |s, g| {
            let tn = g.param(s, t)?;
            let out = g.gather_rows(tn, &[4, 0, 4, 2, 4])?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "soft_select", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let se = store.add("se", random_tensor(&mut rng, vec![2, 3, 2], 1.0));
        let sa = store.add("sa", random_tensor(&mut rng, vec![2, 3, 2], 1.0));
        let th = store.add("theta", random_tensor(&mut rng, vec![3, 2], 2.0));
        check!(&mut store, |s, g| {
            let (a, b, c) = (g.param(s, se)?, g.param(s, sa)?, g.param(s, th)?);
            let out = g.soft_select(a, b, c)?;
            weighted_sum(g, out, seed)
        })
    });
    out
}

pub fn batch_norm_and_loss() -> Cases {
    let mut out = Cases::new();
    over_seeds(&mut out, "batch_norm_train", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![4, 3], 1.0));
        let gamma = store.add("gamma", random_tensor(&mut rng, vec![3], 1.0));
        let beta = store.add("beta", random_tensor(&mut rng, vec![3], 1.0));
        check!(&mut store, |s, g| {
            let (xn, gn, bn) = (g.param(s, x)?, g.param(s, gamma)?, g.param(s, beta)?);
            let (out, _) = g.batch_norm_train(xn, gn, bn, Scalar::of(1e-5))?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "batch_norm_eval", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let x = store.add("x", random_tensor(&mut rng, vec![4, 3], 1.0));
        let gamma = store.add("gamma", random_tensor(&mut rng, vec![3], 1.0));
        let beta = store.add("beta", random_tensor(&mut rng, vec![3], 1.0));
        check!(&mut store, |s, g| {
            let (xn, gn, bn) = (g.param(s, x)?, g.param(s, gamma)?, g.param(s, beta)?);
            let out = g.batch_norm_eval(
                xn,
                gn,
                bn,
                &[0.1, -0.2, 0.3].map(Scalar::of),
                &[0.5, 1.5, 2.0].map(Scalar::of),
                Scalar::of(1e-5),
            )?;
            weighted_sum(g, out, seed)
        })
    });
    over_seeds(&mut out, "logloss", |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let z = store.add("z", random_tensor(&mut rng, vec![6], 3.0));
        let batch = EncodedBatch::new(1, vec![0; 6], vec![0, 1, 0, 1, 0, 1]).unwrap();
        check!(&mut store, |s, g| {
            let zn = g.param(s, z)?;
            let p = g.sigmoid(zn)?;
            g.logloss(p, &batch.labels_as(), Scalar::of(1e-7))
        })
    });
    out
}

/// Parameters jittered off their initial values and a random input, redrawn
/// until no LeakyReLU input lies within 1e-2 of its kink.
fn tower_check(
    build: impl Fn(&mut ParameterStore<f64>, &mut ChaCha8Rng) -> Tower,
    f: usize,
    d: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut store, tower, e) = loop {
        let mut store = ParameterStore::new();
        let tower = build(&mut store, &mut rng);
        for id in store.ids().collect::<Vec<_>>() {
            for v in store.get_mut(id).values_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let e = store.add("e", random_tensor(&mut rng, vec![3, f, d], 1.0));
        let mut g = Graph::new();
        let en = g.param(&store, e).unwrap();
        tower.forward(&mut g, &store, en).unwrap();
        if g.kink_margin().is_none_or(|m| m >= 1e-2) {
            break (store, tower, e);
        }
    };
    check!(&mut store, |s, g| {
        let en = g.param(s, e)?;
        let out = tower.forward(g, s, en)?;
        weighted_sum(g, out, seed)
    })
}

pub fn towers_at_depths_and_shapes() -> Cases {
    let mut out = Cases::new();
    for depth in 1..=3 {
        for (f, d) in [(2, 2), (2, 4), (4, 2), (4, 4)] {
            for residual in [ResidualMode::Base, ResidualMode::Rl, ResidualMode::Prl] {
                let tag = format!("depth {depth}, F {f}, d {d}, {residual}");
                over_seeds(&mut out, &format!("cross {tag}"), |seed| {
                    tower_check(|s, r| Tower::cross(s, r, f * d, depth, residual), f, d, seed)
                });
                over_seeds(&mut out, &format!("field {tag}"), |seed| {
                    tower_check(|s, r| Tower::field(s, r, f, d, depth, residual), f, d, seed)
                });
                let widths = phn_core::towers::ffn_widths(f * d, d, depth, 4 * d);
                over_seeds(&mut out, &format!("ffn {tag}"), |seed| {
                    tower_check(|s, r| Tower::ffn(s, r, &widths, residual, 0.01).unwrap(), f, d, seed)
                });
            }
        }
    }
    out
}

pub fn embedding_attention_gate_composite() -> Cases {
    let mut out = Cases::new();
    for heads in [1, 2] {
        over_seeds(&mut out, &format!("ssg heads {heads}"), |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut store = ParameterStore::new();
            let table = EmbeddingTable::new(&mut store, &mut rng, &[3, 4, 2], 4);
            let att = AttentionParams::new(&mut store, &mut rng, "att", 4, heads).unwrap();
            let gate = SoftGate::new(&mut store, "gate", 3, 4);
            for v in store.get_mut(gate.theta).values_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            let batch = EncodedBatch::new(3, vec![0, 3, 1, 2, 3, 1, 2, 0, 0], vec![1, 0, 1]).unwrap();
            check!(&mut store, |s, g| {
                let e = table.lookup(g, s, &batch)?;
                let sa = att.forward(g, s, e)?;
                let out = gate.forward(g, s, e, sa)?;
                weighted_sum(g, out, seed)
            })
        });
    }
    out
}

pub fn full_model_all_modes() -> Cases {
    let mut out = Cases::new();
    for cfg in mode_grid() {
        let label = format!("{} / {}", cfg.label(), cfg.selection);
        over_seeds(&mut out, &label, |seed| {
            check_model(&cfg, seed, 4).unwrap().max_relative_error
        });
    }
    out
}
