//! Shared oracles for the integration tests.
#![allow(dead_code)]

use std::sync::Arc;

use modadd::model::{forward, Model, ModelConfig, PackedBatch, ParamSet, PositionalMode};
use modadd::numerics::{Array, Graph, NodeId, SeqLayout};
use modadd::rendering::{render, TemplateRegistry};
use modadd::rng::Stream;
use modadd::task_data::Pair;
use modadd::tokenizer::Vocabulary;
use modadd::training::joint_loss;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance per tensor.
pub const FD_TOL: f64 = 2e-3;

pub fn random_array(shape: &[usize], scale: f64, rng: &mut Stream) -> Array<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.normal(scale)).collect();
    Array::from_vec(shape, data).unwrap()
}

/// `||a - n|| / max(||a||, ||n||)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares reverse-mode gradients of a scalar function of `inputs` with
/// central differences. `build` records the function on a fresh graph
/// whose leaves hold `inputs` in order. Returns the worst per-input error.
pub fn gradient_error(inputs: &[Array<f64>], build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let eval = |values: &[Array<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.leaf(v.clone())).collect();
        let out = build(&mut g, &ids);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
    let out = build(&mut g, &ids);
    let grads = g.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    let mut values = inputs.to_vec();
    for (i, &id) in ids.iter().enumerate() {
        let analytic = grads.wrt(&g, id);
        let mut numeric = vec![0.0; values[i].len()];
        for j in 0..numeric.len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + FD_STEP;
            let up = eval(&values);
            values[i].data_mut()[j] = orig - FD_STEP;
            let down = eval(&values);
            values[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(analytic.data(), &numeric));
    }
    worst
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_config(positional: PositionalMode) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 2,
        ff_width: 16,
        positional,
        init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Scalar probe of a non-scalar output: MSE against a fixed random target.
fn probe(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = g.value(out).shape().to_vec();
    let target = random_array(&shape, 1.0, &mut Stream::derived(seed, "probe"));
    let t = g.constant(target);
    g.mse(out, t).unwrap()
}

/// Every differentiable primitive, by name.
pub const PRIMITIVES: [&str; 11] = [
    "matmul",
    "add/mul/scale",
    "add_row",
    "gelu",
    "layer_norm",
    "gather",
    "softmax",
    "attention",
    "attention+distance-bias",
    "cross_entropy",
    "mse",
];

/// Worst relative gradient error of `op` on randomized shapes from `seed`.
pub fn primitive_error(op: &str, seed: u64) -> f64 {
    let mut rng = Stream::derived(seed, op);
    let (m, k, n) = (rng.inclusive(1, 5), rng.inclusive(1, 6), rng.inclusive(1, 4));
    let mut arr = |shape: &[usize], scale: f64| random_array(shape, scale, &mut rng);
    match op {
        "matmul" => gradient_error(&[arr(&[m, k], 1.0), arr(&[k, n], 1.0)], |g, x| {
            let y = g.matmul(x[0], x[1]).unwrap();
            probe(g, y, seed)
        }),
        "add/mul/scale" => gradient_error(&[arr(&[m, k], 1.0), arr(&[m, k], 1.0)], |g, x| {
            let s = g.add(x[0], x[1]).unwrap();
            let p = g.mul(s, x[1]).unwrap();
            let y = g.scale(p, -1.7);
            probe(g, y, seed)
        }),
        "add_row" => gradient_error(&[arr(&[m, k], 1.0), arr(&[k], 1.0)], |g, x| {
            let y = g.add_row(x[0], x[1]).unwrap();
            probe(g, y, seed)
        }),
        "gelu" => gradient_error(&[arr(&[m, k], 2.0)], |g, x| {
            let y = g.gelu(x[0]);
            probe(g, y, seed)
        }),
        "layer_norm" => {
            let d = k + 1;
            gradient_error(&[arr(&[m, d], 1.0), arr(&[d], 1.0), arr(&[d], 1.0)], |g, x| {
                let y = g.layer_norm(x[0], x[1], x[2]).unwrap();
                probe(g, y, seed)
            })
        }
        "gather" => {
            let inputs = [arr(&[m, k], 1.0), arr(&[n, k], 1.0)];
            // Repeated rows exercise gradient accumulation.
            let index: Vec<(usize, usize)> = (0..m + n + 2)
                .map(|_| {
                    let src = rng.below(2) as usize;
                    (src, rng.below([m, n][src] as u64) as usize)
                })
                .collect();
            gradient_error(&inputs, |g, x| {
                let y = g.gather(&[x[0], x[1]], index.clone()).unwrap();
                probe(g, y, seed)
            })
        }
        "softmax" => gradient_error(&[arr(&[m, k + 1], 2.0)], |g, x| {
            let y = g.softmax(x[0]);
            probe(g, y, seed)
        }),
        "attention" | "attention+distance-bias" => {
            let heads = rng.inclusive(1, 3);
            let d = heads * rng.inclusive(1, 3);
            let lengths: Vec<usize> = (0..rng.inclusive(1, 3)).map(|_| rng.inclusive(1, 4)).collect();
            let positions: Vec<usize> = lengths.iter().flat_map(|&l| 0..l).collect();
            let rows = positions.len();
            let layout = Arc::new(SeqLayout::new(&lengths, positions).unwrap());
            let slopes = (op != "attention").then(|| (0..heads).map(|h| 0.5f64.powi(h as i32 + 1)).collect::<Vec<_>>());
            let inputs = [
                random_array(&[rows, d], 1.0, &mut rng),
                random_array(&[rows, d], 1.0, &mut rng),
                random_array(&[rows, d], 1.0, &mut rng),
            ];
            gradient_error(&inputs, |g, x| {
                let y = g.attention(x[0], x[1], x[2], layout.clone(), heads, slopes.clone()).unwrap();
                probe(g, y, seed)
            })
        }
        "cross_entropy" => {
            let labels: Vec<usize> = (0..m).map(|_| rng.below(97) as usize).collect();
            let inputs = [random_array(&[m, 97], 2.0, &mut rng)];
            gradient_error(&inputs, |g, x| g.cross_entropy(x[0], &labels).unwrap())
        }
        "mse" => gradient_error(&[arr(&[m, k], 1.0), arr(&[m, k], 1.0)], |g, x| g.mse(x[0], x[1]).unwrap()),
        other => panic!("unknown primitive `{other}`"),
    }
}

/// Joint loss of the whole classifier (K = 2, lambda = 1) on a small
/// rendered batch, with every parameter as a leaf.
pub fn model_error(positional: PositionalMode, seed: u64) -> f64 {
    let config = tiny_config(positional);
    let model = Model::init(config.clone(), seed).unwrap();
    let params: ParamSet<f64> = model.params.cast();
    let names = params.names().to_vec();
    let vocab = Vocabulary::builtin();
    let registry = TemplateRegistry::builtin();
    let mut rng = Stream::derived(seed, "fd-batch");
    let mut seqs = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..2 {
        let pair = Pair::new(rng.below(97) as u32, rng.below(97) as u32, 97).unwrap();
        for (id, pos) in [("nat-what", 17), ("pad-dash", 12)] {
            let ex = render(&pair, registry.get(id).unwrap(), pos, seed % 2 == 0, &mut rng).unwrap();
            seqs.push(vocab.encode(&ex.text).unwrap());
            labels.push(pair.label as usize);
        }
    }
    let packed = PackedBatch::new(&seqs, &config).unwrap();
    let inputs: Vec<Array<f64>> = params.arrays().to_vec();
    gradient_error(&inputs, |g, ids| {
        let current = ParamSet::new(names.iter().cloned().zip(ids.iter().map(|&id| g.value(id).clone())).collect());
        let out = forward(g, &current, ids, &packed, &config).unwrap();
        joint_loss(g, out.logits, &labels, 2, 1.0).unwrap().2
    })
}

/// Character index of the first ASCII digit, by plain scan.
pub fn scan_first_digit(text: &str) -> Option<usize> {
    text.chars().position(|c| c.is_ascii_digit())
}

/// The consistency term by definition: mean over groups of the mean over
/// row pairs of the per-pair MSE.
pub fn brute_consistency(rows: &[Vec<f64>], k: usize) -> f64 {
    let mut groups = 0.0;
    let mut total = 0.0;
    for g in rows.chunks(k) {
        let mut pair_sum = 0.0;
        let mut pairs = 0.0;
        for i in 0..k {
            for j in i + 1..k {
                let mse: f64 = g[i].iter().zip(&g[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / g[i].len() as f64;
                pair_sum += mse;
                pairs += 1.0;
            }
        }
        total += pair_sum / pairs;
        groups += 1.0;
    }
    total / groups
}
