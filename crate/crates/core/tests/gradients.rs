//! Central finite-difference checks for every differentiable op and both
//! adapter regularizers: 20 random instances each, relative error below 1e-4.

use std::collections::BTreeMap;

use fairlora::autodiff::{Graph, PenaltyTarget, Var};
use fairlora::lora::{r_norm, r_orth, StackVars};
use fairlora::rng::Stream;
use fairlora::tensor::Tensor;
use fairlora::Result;

const INSTANCES: usize = 20;
const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

/// `u · out · w` for fixed random `u`, `w`: a generic scalar readout.
fn readout(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let [r, c] = g.value(out).shape();
    let mut rng = Stream::new(seed, "readout");
    let u = g.constant(Tensor::randn(1, r, 1.0, &mut rng));
    let w = g.constant(Tensor::randn(c, 1, 1.0, &mut rng));
    let left = g.matmul(u, out)?;
    g.matmul(left, w)
}

fn eval(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let y = readout(&mut g, out, seed).unwrap();
    g.value(y).item()
}

fn analytic(build: &Build, inputs: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let y = readout(&mut g, out, seed).unwrap();
    g.backward(y).unwrap();
    vars.iter().map(|&v| g.grad(v)).collect()
}

fn numeric(build: &Build, inputs: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut grads = Vec::new();
    for (k, t) in inputs.iter().enumerate() {
        let mut grad = Tensor::zeros(t.rows(), t.cols());
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            grad.data_mut()[i] = (eval(build, &plus, seed) - eval(build, &minus, seed)) / (2.0 * H);
        }
        grads.push(grad);
    }
    grads
}

fn rel_err(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.sub(n).unwrap().frobenius_sq().sqrt();
    let scale = a.frobenius_sq().sqrt().max(n.frobenius_sq().sqrt()).max(1e-6);
    diff / scale
}

/// Checks `build` on `INSTANCES` input sets from `make`. `expected` maps the
/// numeric gradient of each input to the one the op must report.
fn check_with(
    name: &str,
    make: &dyn Fn(&mut Stream) -> Vec<Tensor>,
    build: &Build,
    expected: &dyn Fn(usize, Tensor) -> Tensor,
) {
    let mut rng = Stream::new(7, name);
    for inst in 0..INSTANCES {
        let inputs = make(&mut rng);
        let seed = inst as u64;
        let a = analytic(build, &inputs, seed);
        let n = numeric(build, &inputs, seed);
        for (k, (ak, nk)) in a.iter().zip(n).enumerate() {
            let want = expected(k, nk);
            let err = rel_err(ak, &want);
            assert!(err < TOL, "{name} instance {inst} input {k}: relative error {err:e}");
        }
    }
}

fn check(name: &str, make: &dyn Fn(&mut Stream) -> Vec<Tensor>, build: &Build) {
    check_with(name, make, build, &|_, n| n);
}

fn dim(rng: &mut Stream) -> usize {
    1 + rng.below(5)
}

fn randn(r: usize, c: usize, rng: &mut Stream) -> Tensor {
    Tensor::randn(r, c, 1.0, rng)
}

#[test]
fn matmul() {
    check(
        "matmul",
        &|rng| {
            let (m, k, n) = (dim(rng), dim(rng), dim(rng));
            vec![randn(m, k, rng), randn(k, n, rng)]
        },
        &|g, v| g.matmul(v[0], v[1]),
    );
}

#[test]
fn add_and_sub() {
    let make = |rng: &mut Stream| {
        let (m, n) = (dim(rng), dim(rng));
        vec![randn(m, n, rng), randn(m, n, rng)]
    };
    check("add", &make, &|g, v| g.add(v[0], v[1]));
    check("sub", &make, &|g, v| g.sub(v[0], v[1]));
}

#[test]
fn scale() {
    check("scale", &|rng| vec![randn(dim(rng), dim(rng), rng)], &|g, v| {
        Ok(g.scale(v[0], -1.7))
    });
}

#[test]
fn add_row() {
    check(
        "add_row",
        &|rng| {
            let (m, n) = (dim(rng), dim(rng));
            vec![randn(m, n, rng), randn(1, n, rng)]
        },
        &|g, v| g.add_row(v[0], v[1]),
    );
}

#[test]
fn relu() {
    // Keep entries away from the kink.
    check(
        "relu",
        &|rng| {
            let t = randn(dim(rng), dim(rng), rng);
            vec![t.map(|x| if x.abs() < 1e-3 { x + 0.01 } else { x })]
        },
        &|g, v| Ok(g.relu(v[0])),
    );
}

#[test]
fn softmax_rows() {
    check(
        "softmax_rows",
        &|rng| vec![randn(dim(rng), 1 + dim(rng), rng)],
        &|g, v| Ok(g.softmax_rows(v[0])),
    );
}

#[test]
fn sum_and_mean() {
    let make = |rng: &mut Stream| vec![randn(dim(rng), dim(rng), rng)];
    check("sum", &make, &|g, v| Ok(g.sum(v[0])));
    check("mean", &make, &|g, v| Ok(g.mean(v[0])));
}

#[test]
fn transpose_and_reshape() {
    check("transpose", &|rng| vec![randn(dim(rng), dim(rng), rng)], &|g, v| {
        Ok(g.transpose(v[0]))
    });
    check("reshape", &|rng| vec![randn(2 * dim(rng), 3, rng)], &|g, v| {
        let [r, c] = g.value(v[0]).shape();
        g.reshape(v[0], r / 2, 2 * c)
    });
}

#[test]
fn cross_entropy() {
    let mut labels_rng = Stream::new(3, "labels");
    let labels: Vec<Vec<usize>> = (0..INSTANCES)
        .map(|_| (0..6).map(|_| labels_rng.below(2)).collect())
        .collect();
    let counter = std::cell::Cell::new(0usize);
    // The second input carries the instance index so `build` can find its labels.
    check(
        "cross_entropy",
        &|rng| {
            let idx = counter.get();
            counter.set(idx + 1);
            vec![randn(6, 2, rng), Tensor::scalar(idx as f64)]
        },
        &|g, v| {
            let idx = g.value(v[1]).item().round() as usize;
            g.cross_entropy_logits(v[0], &labels[idx])
        },
    );
}

#[test]
fn gradient_reversal_flips_and_scales() {
    let scale = 0.7;
    check_with(
        "grl",
        &|rng| vec![randn(dim(rng), dim(rng), rng)],
        &|g, v| {
            let h = g.relu(v[0]);
            let s = g.softmax_rows(v[0]);
            let mixed = g.add(h, s)?;
            Ok(g.gradient_reversal(mixed, scale))
        },
        &|_, n| n.scale(-scale),
    );
}

#[test]
fn detach_has_zero_gradient() {
    check_with(
        "detach",
        &|rng| vec![randn(dim(rng), dim(rng), rng)],
        &|g, v| Ok(g.detach(v[0])),
        &|_, n| Tensor::zeros(n.rows(), n.cols()),
    );
}

#[test]
fn frobenius_penalty() {
    check(
        "frobenius_identity",
        &|rng| {
            let n = dim(rng);
            vec![randn(n, n, rng)]
        },
        &|g, v| g.frobenius_penalty(v[0], PenaltyTarget::Identity),
    );
    check(
        "frobenius_zero",
        &|rng| vec![randn(dim(rng), dim(rng), rng)],
        &|g, v| g.frobenius_penalty(v[0], PenaltyTarget::Zero),
    );
}

#[test]
fn layer_norm() {
    check(
        "layer_norm",
        &|rng| {
            let (m, n) = (dim(rng), 2 + dim(rng));
            vec![randn(m, n, rng), randn(1, n, rng), randn(1, n, rng)]
        },
        &|g, v| g.layer_norm(v[0], v[1], v[2]),
    );
}

#[test]
fn attention() {
    check(
        "attention",
        &|rng| {
            let tokens = 1 + rng.below(4);
            let samples = 1 + rng.below(3);
            let (h, dv) = (dim(rng), dim(rng));
            let rows = tokens * samples;
            vec![
                randn(rows, h, rng),
                randn(rows, h, rng),
                randn(rows, dv, rng),
                Tensor::scalar(tokens as f64),
            ]
        },
        &|g, v| {
            let tokens = g.value(v[3]).item().round() as usize;
            g.attention(v[0], v[1], v[2], tokens)
        },
    );
}

#[test]
fn token_mean_pool() {
    check(
        "token_mean_pool",
        &|rng| {
            let tokens = 1 + rng.below(4);
            vec![randn(tokens * dim(rng), dim(rng), rng), Tensor::scalar(tokens as f64)]
        },
        &|g, v| {
            let tokens = g.value(v[1]).item().round() as usize;
            g.token_mean_pool(v[0], tokens)
        },
    );
}

#[test]
fn dropout_with_fixed_mask() {
    check("dropout", &|rng| vec![randn(dim(rng), dim(rng), rng)], &|g, v| {
        // Same stream every evaluation, so the mask is fixed.
        let mut rng = Stream::new(11, "mask");
        Ok(g.dropout(v[0], 0.3, true, &mut rng))
    });
}

fn stack_inputs(rng: &mut Stream, layers: usize, rank: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for _ in 0..layers {
        let (d, k) = (rank + rng.below(3), rank + rng.below(3));
        out.push(randn(d, rank, rng).scale(0.5));
        out.push(randn(rank, k, rng).scale(0.5));
    }
    out
}

fn stack_vars(vars: &[Var], rank: usize) -> StackVars {
    let layers: BTreeMap<String, (Var, Var)> = vars
        .chunks(2)
        .enumerate()
        .map(|(i, p)| (format!("l{i}"), (p[0], p[1])))
        .collect();
    StackVars {
        rank,
        scale: 2.0,
        layers,
    }
}

#[test]
fn r_norm_gradient() {
    check(
        "r_norm",
        &|rng| {
            let rank = 1 + rng.below(3);
            let mut v = stack_inputs(rng, 2, rank);
            v.push(Tensor::scalar(rank as f64));
            v
        },
        &|g, v| {
            let rank = g.value(*v.last().unwrap()).item().round() as usize;
            r_norm(g, &stack_vars(&v[..v.len() - 1], rank))
        },
    );
}

#[test]
fn r_orth_gradient() {
    for target in [PenaltyTarget::Identity, PenaltyTarget::Zero] {
        check_with(
            &format!("r_orth_{target:?}"),
            &|rng| {
                let rank = 1 + rng.below(3);
                let task = stack_inputs(rng, 2, rank);
                // Sensitive factors with the same shapes as the task ones.
                let sen: Vec<Tensor> = task.iter().map(|t| randn(t.rows(), t.cols(), rng)).collect();
                let mut v = task;
                v.extend(sen);
                v.push(Tensor::scalar(rank as f64));
                v
            },
            &|g, v| {
                let rank = g.value(*v.last().unwrap()).item().round() as usize;
                let half = (v.len() - 1) / 2;
                let task = stack_vars(&v[..half], rank);
                let sen = stack_vars(&v[half..2 * half], rank);
                r_orth(g, &task, &sen, target)
            },
            // Task factors get the true gradient; sensitive factors are detached.
            &|k, n| if k < 4 { n } else { Tensor::zeros(n.rows(), n.cols()) },
        );
    }
}

/// Every check in this file, callable from the acceptance run.
#[allow(dead_code)]
pub fn checks() -> Vec<(&'static str, fn())> {
    vec![
        ("matmul", matmul),
        ("add_and_sub", add_and_sub),
        ("scale", scale),
        ("add_row", add_row),
        ("relu", relu),
        ("softmax_rows", softmax_rows),
        ("sum_and_mean", sum_and_mean),
        ("transpose_and_reshape", transpose_and_reshape),
        ("cross_entropy", cross_entropy),
        ("gradient_reversal_flips_and_scales", gradient_reversal_flips_and_scales),
        ("detach_has_zero_gradient", detach_has_zero_gradient),
        ("frobenius_penalty", frobenius_penalty),
        ("layer_norm", layer_norm),
        ("attention", attention),
        ("token_mean_pool", token_mean_pool),
        ("dropout_with_fixed_mask", dropout_with_fixed_mask),
        ("r_norm_gradient", r_norm_gradient),
        ("r_orth_gradient", r_orth_gradient),
    ]
}
