//! Finite-difference gradient suite over every tape op, the grasp objective,
//! and a small end-to-end model.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::encoder::{attention_pool, encode_object, init_backbone, init_pool, EncoderConfig};
use crate::grasphead::{head_forward, init_head, wta_loss, HeadConfig, NUM_JOINTS, POSE_DIM};
use crate::pointops::TokenizerConfig;
use crate::rng;
use crate::tensorcore::{
    grad_check, store_grad_check, GradCheckReport, GradMismatch, Graph, ParamStore, Tensor, TensorError, Var,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>;

fn gauss(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).expect("shape")
}

/// Gaussian values pushed at least `gap` away from zero, for kinked ops.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = gauss(r, shape);
    for v in t.data_mut() {
        *v += gap.copysign(*v);
    }
    t
}

/// Reduces any tensor output to a scalar through a fixed random quadratic.
fn reduce(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var, TensorError> {
    let mut r = rng::stream(seed, &[rng::tag("reduce")]);
    let shape = g.value(x).shape().to_vec();
    let target = g.input(gauss(&mut r, &shape));
    g.mse(x, target)
}

fn case(leaves: Vec<Tensor<f64>>, build: Build) -> (Vec<Tensor<f64>>, Build) {
    (leaves, build)
}

fn op_cases(r: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Build)> {
    let mut out: Vec<(&'static str, Vec<Tensor<f64>>, Build)> = Vec::new();
    let mut push = |name, (l, b): (Vec<Tensor<f64>>, Build)| out.push((name, l, b));
    push(
        "matmul",
        case(
            vec![gauss(r, &[3, 4]), gauss(r, &[4, 5])],
            Box::new(|g, v| {
                let y = g.matmul(v[0], v[1])?;
                reduce(g, y, 1)
            }),
        ),
    );
    push(
        "add",
        case(
            vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.add(v[0], v[1])?;
                reduce(g, y, 2)
            }),
        ),
    );
    push(
        "sub",
        case(
            vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.sub(v[0], v[1])?;
                reduce(g, y, 3)
            }),
        ),
    );
    push(
        "add_bias",
        case(
            vec![gauss(r, &[3, 4]), gauss(r, &[4])],
            Box::new(|g, v| {
                let y = g.add_bias(v[0], v[1])?;
                reduce(g, y, 4)
            }),
        ),
    );
    push(
        "scale",
        case(
            vec![gauss(r, &[2, 3])],
            Box::new(|g, v| {
                let y = g.scale(v[0], -1.7)?;
                reduce(g, y, 5)
            }),
        ),
    );
    push(
        "affine",
        case(
            vec![gauss(r, &[2, 3])],
            Box::new(|g, v| {
                let y = g.affine(v[0], 0.6, 0.3)?;
                reduce(g, y, 6)
            }),
        ),
    );
    push(
        "relu",
        case(
            vec![away_from_zero(r, &[3, 4], 0.05)],
            Box::new(|g, v| {
                let y = g.relu(v[0])?;
                reduce(g, y, 7)
            }),
        ),
    );
    push(
        "gelu",
        case(
            vec![gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.gelu(v[0])?;
                reduce(g, y, 8)
            }),
        ),
    );
    push(
        "tanh",
        case(
            vec![gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.tanh(v[0])?;
                reduce(g, y, 9)
            }),
        ),
    );
    push(
        "layernorm",
        case(
            vec![gauss(r, &[3, 5]), gauss(r, &[5]), gauss(r, &[5])],
            Box::new(|g, v| {
                let y = g.layernorm(v[0], v[1], v[2])?;
                reduce(g, y, 10)
            }),
        ),
    );
    push(
        "softmax",
        case(
            vec![gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.softmax(v[0])?;
                reduce(g, y, 11)
            }),
        ),
    );
    push(
        "mean_axis0",
        case(
            vec![gauss(r, &[4, 3])],
            Box::new(|g, v| {
                let y = g.mean_axis(v[0], 0)?;
                reduce(g, y, 12)
            }),
        ),
    );
    push(
        "mean_axis1",
        case(
            vec![gauss(r, &[4, 3])],
            Box::new(|g, v| {
                let y = g.mean_axis(v[0], 1)?;
                reduce(g, y, 13)
            }),
        ),
    );
    push(
        "concat_rows",
        case(
            vec![gauss(r, &[2, 3]), gauss(r, &[1, 3])],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 0)?;
                reduce(g, y, 14)
            }),
        ),
    );
    push(
        "concat_cols",
        case(
            vec![gauss(r, &[2, 3]), gauss(r, &[2, 2])],
            Box::new(|g, v| {
                let y = g.concat(&[v[0], v[1]], 1)?;
                reduce(g, y, 15)
            }),
        ),
    );
    push(
        "gather_rows",
        case(
            vec![gauss(r, &[4, 3])],
            Box::new(|g, v| {
                let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
                reduce(g, y, 16)
            }),
        ),
    );
    push(
        "slice_cols",
        case(
            vec![gauss(r, &[3, 6])],
            Box::new(|g, v| {
                let y = g.slice_cols(v[0], 2, 3)?;
                reduce(g, y, 17)
            }),
        ),
    );
    push(
        "select_blocks",
        case(
            vec![gauss(r, &[3, 6])],
            Box::new(|g, v| {
                let y = g.select_blocks(v[0], &[2, 0, 1], 2)?;
                reduce(g, y, 18)
            }),
        ),
    );
    push(
        "max_pool_rows",
        case(
            vec![spread_rows(r, 6, 3)],
            Box::new(|g, v| {
                let y = g.max_pool_rows(v[0], 3)?;
                reduce(g, y, 19)
            }),
        ),
    );
    push(
        "attention_1head",
        case(
            vec![gauss(r, &[2, 4]), gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.attention(v[0], v[1], v[2], 1)?;
                reduce(g, y, 20)
            }),
        ),
    );
    push(
        "attention_2head",
        case(
            vec![gauss(r, &[3, 4]), gauss(r, &[3, 4]), gauss(r, &[3, 4])],
            Box::new(|g, v| {
                let y = g.attention(v[0], v[1], v[2], 2)?;
                reduce(g, y, 21)
            }),
        ),
    );
    push("mse", case(vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], Box::new(|g, v| g.mse(v[0], v[1]))));
    push("sum_sq_rows", case(vec![gauss(r, &[3, 4]), gauss(r, &[3, 4])], Box::new(|g, v| g.sum_sq_rows(v[0], v[1]))));
    push(
        "smooth_l1",
        case(vec![smooth_l1_input(r), Tensor::zeros(&[3, 4])], Box::new(|g, v| g.smooth_l1(v[0], v[1], 0.5))),
    );
    push("cross_entropy", case(vec![gauss(r, &[4, 3])], Box::new(|g, v| g.cross_entropy(v[0], &[0, 2, 1, 2]))));
    push("wta_objective", wta_case(r));
    out
}

/// Rows whose column maxima win by a clear margin within each group.
fn spread_rows(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let mut t = gauss(r, &[rows, cols]);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v += 0.2 * ((i * 7) % rows) as f64;
    }
    t
}

/// Differences kept clear of both kinks at `+-0.5`.
fn smooth_l1_input(r: &mut ChaCha8Rng) -> Tensor<f64> {
    let mut t = gauss(r, &[3, 4]);
    for v in t.data_mut() {
        if (v.abs() - 0.5).abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    t
}

/// Squashed joints plus logits through the winner-takes-all objective with a
/// clear winner per row, so the argmin is locally constant.
fn wta_case(r: &mut ChaCha8Rng) -> (Vec<Tensor<f64>>, Build) {
    const K: usize = 3;
    const N: usize = 4;
    let mut raw = gauss(r, &[N, K * NUM_JOINTS]);
    for v in raw.data_mut() {
        *v *= 0.5;
    }
    let logits = gauss(r, &[N, K]);
    // ground truth near a chosen hypothesis of each row
    let squash = |x: f64| -1.5 + 3.0 * (x.tanh() + 1.0) / 2.0;
    let mut truth = vec![0.0; N * NUM_JOINTS];
    for row in 0..N {
        let h = row % K;
        for d in 0..NUM_JOINTS {
            truth[row * NUM_JOINTS + d] = squash(raw.data()[row * K * NUM_JOINTS + h * NUM_JOINTS + d]) + 0.01;
        }
    }
    let truth = Tensor::new(&[N, NUM_JOINTS], truth).expect("truth");
    (
        vec![raw, logits],
        Box::new(move |g, v| {
            let t = g.tanh(v[0])?;
            let joints = g.affine(t, 1.5, 0.0)?;
            Ok(wta_loss(g, joints, v[1], &truth, 0.3)?.0)
        }),
    )
}

/// `detach(x) + tanh(x)`: the tape gradient must equal the finite-difference
/// gradient of the same expression with the detached branch frozen at `x0`.
fn detach_check(r: &mut ChaCha8Rng, h: f64, eps: f64) -> Result<GradCheckReport, TensorError> {
    let x0 = gauss(r, &[2, 3]);
    let expr = |g: &mut Graph<f64>, x: Var, frozen: Var| -> Result<Var, TensorError> {
        let t = g.tanh(x)?;
        let y = g.add(frozen, t)?;
        reduce(g, y, 22)
    };
    let mut g = Graph::new();
    let x = g.leaf(x0.clone());
    let d = g.detach(x)?;
    let loss = expr(&mut g, x, d)?;
    let grads = g.backward(loss)?;
    let tape = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));

    let eval = |xs: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let x = g.input(xs.clone());
        let frozen = g.input(x0.clone());
        let out = expr(&mut g, x, frozen)?;
        Ok(g.value(out).item())
    };
    let mut report = GradCheckReport::default();
    let mut probe = x0.clone();
    for e in 0..x0.numel() {
        probe.data_mut()[e] = x0.data()[e] + h;
        let plus = eval(&probe)?;
        probe.data_mut()[e] = x0.data()[e] - h;
        let minus = eval(&probe)?;
        probe.data_mut()[e] = x0.data()[e];
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = tape.data()[e];
        let rel = (analytic - numeric).abs() / numeric.abs().max(1.0);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > eps {
            report.offenders.push(GradMismatch { leaf: 0, element: e, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}

/// Runs every op case; returns one report per case.
pub fn op_suite(seed: u64, h: f64, eps: f64) -> Result<Vec<(&'static str, GradCheckReport)>, TensorError> {
    let mut r = rng::stream(seed, &[rng::tag("op-suite")]);
    let mut out = op_cases(&mut r)
        .into_iter()
        .map(|(name, leaves, build)| Ok((name, grad_check(&leaves, build, h, eps)?)))
        .collect::<Result<Vec<_>, TensorError>>()?;
    out.push(("detach", detach_check(&mut r, h, eps)?));
    Ok(out)
}

/// Tiny tokenizer, encoder, attention pool and head, trained objective end to end.
pub fn model_check(seed: u64, h: f64, eps: f64) -> Result<GradCheckReport, TensorError> {
    let mut r = rng::stream(seed, &[rng::tag("model-check")]);
    let tok = TokenizerConfig { cloud_size: 16, num_groups: 4, group_size: 3, radius: 10.0, hidden: 5 };
    let enc = EncoderConfig { depth: 1, embed_dim: 4, heads: 2, mlp_ratio: 1.5, pos_freqs: 1, predictor_depth: 0 };
    let head = HeadConfig { k: 2, hidden: 5, alpha: 0.2, ..Default::default() };
    let mut store = ParamStore::<f64>::new();
    init_backbone(&mut store, &tok, &enc, &mut r);
    init_pool(&mut store, enc.embed_dim, &mut r);
    init_head(&mut store, enc.embed_dim, &head, &mut r);
    // random biases and norm parameters so no gradient path is trivially zero
    for id in 0..store.len() {
        for v in store.tensor_mut(id).data_mut() {
            *v += 0.1 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let rel = gauss(&mut r, &[tok.num_groups * tok.group_size, 3]);
    let positions: Vec<[f64; 3]> = (0..tok.num_groups).map(|_| [r.gen(), r.gen(), r.gen()]).collect();
    let rows = 3;
    let poses = gauss(&mut r, &[rows, POSE_DIM]);
    let truth = Tensor::new(&[rows, NUM_JOINTS], (0..rows * NUM_JOINTS).map(|_| r.gen_range(-0.5..0.5)).collect())
        .expect("truth");
    store_grad_check(
        &mut store,
        |g, s| {
            let lat = encode_object(g, s, &enc, &rel, &positions, tok.group_size)?;
            let pooled = attention_pool(g, s, lat)?;
            let emb = g.gather_rows(pooled, &vec![0; rows])?;
            let p = g.input(poses.clone());
            let (j, l) = head_forward(g, s, &head, emb, p)?;
            Ok(wta_loss(g, j, l, &truth, head.alpha)?.0)
        },
        h,
        eps,
        4,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_matches_finite_differences() {
        for (name, rep) in op_suite(0, STEP, TOLERANCE).unwrap() {
            assert!(rep.passed(), "{name}: {:?}", rep.offenders.first());
            assert!(rep.checked > 0);
        }
    }

    #[test]
    fn small_model_matches_finite_differences() {
        let rep = model_check(0, STEP, TOLERANCE).unwrap();
        assert!(rep.passed(), "{:?}", rep.offenders.first());
    }
}
