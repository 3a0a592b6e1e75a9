//! Central finite-difference checks of the autodiff gradients.
//!
//! Every check reduces the op output to `f = Σ wᵢ·yᵢ` with fixed random
//! weights, evaluated in `f64` from the `f32` forward values. Single ops are
//! probed element by element with `(f(x+h) − f(x−h)) / (x₊ − x₋)`, where
//! `x₊, x₋` are the rounded `f32` perturbed values, and the gradient of each
//! input is compared as a whole: `‖a − b‖ / max(‖a‖, ‖b‖, 1e-4)`. The worst
//! single-element error is reported alongside; it is dominated by `f32`
//! rounding of the forward (about 1e-5 absolute at this step) wherever a
//! gradient entry is small.
//!
//! Composed networks are checked along a random unit direction over all
//! inputs and parameters, scaled to length `h`.
//!
//! Inputs and weights are drawn on a grid of multiples of 1/64 and the step
//! is 2⁻¹⁰, so perturbed values and short linear combinations are exact in
//! `f32` and the oracle is not swamped by forward rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Conv2dOpts, Tape, Unary, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mode};
use crate::tensor::Tensor;

/// 2⁻¹⁰ ≈ 1e-3
pub const PERTURBATION: f32 = 1.0 / 1024.0;
pub const OP_TOLERANCE: f64 = 1e-3;
pub const NETWORK_TOLERANCE: f64 = 1e-2;
const DENOM_FLOOR: f64 = 1e-4;

/// Checks grouped under `gradcheck all`.
pub const CHECKS: &[&str] = &[
    "matmul",
    "conv2d",
    "conv2d_strided",
    "conv2d_depthwise",
    "add",
    "add_broadcast",
    "mul",
    "mul_broadcast",
    "scale",
    "relu",
    "gelu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "layer_norm",
    "batch_norm",
    "batch_norm_eval",
    "bilinear_resize",
    "reshape",
    "transpose",
    "concat",
    "slice",
    "sum",
    "mean",
    "silog",
    "attention",
    "mix_ffn",
    "transformer_block",
    "sff",
    "encoder_2stage",
    "network",
];

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    /// Worst per-element error, single ops only.
    pub max_elem_err: Option<f64>,
    pub tolerance: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(DENOM_FLOOR)
}

/// Norm-wise relative error of two gradient tensors.
pub fn rel_err_norm(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(DENOM_FLOOR)
}

/// Worst errors of one trial.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrialError {
    pub tensor: f64,
    pub element: f64,
}

type Build<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn objective(tape: &Tape, y: Var, weights: &[f64]) -> f64 {
    tape.value(y)
        .data()
        .iter()
        .zip(weights)
        .map(|(&v, w)| v as f64 * w)
        .sum()
}

fn eval_objective(inputs: &[Tensor], build: &Build, weights: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    Ok(objective(&tape, y, weights))
}

/// Autodiff gradients of `Σ w·y` for every input.
fn autodiff(inputs: &[Tensor], build: &Build, weights: &[f64]) -> Result<Vec<Vec<f32>>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let y = build(&mut tape, &vars)?;
    let w = Tensor::new(tape.shape(y), weights.iter().map(|&w| w as f32).collect())?;
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv)?;
    let loss = tape.sum(prod);
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

fn output_len(inputs: &[Tensor], build: &Build) -> Result<usize> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    Ok(tape.value(y).numel())
}

/// Element-wise finite-difference check of every entry of every input.
pub fn check_elementwise<R: Rng>(inputs: &[Tensor], build: &Build, rng: &mut R) -> Result<TrialError> {
    let n_out = output_len(inputs, build)?;
    let weights: Vec<f64> = (0..n_out).map(|_| weight(rng)).collect();
    let grads = autodiff(inputs, build, &weights)?;
    let mut worst = TrialError::default();
    for (i, input) in inputs.iter().enumerate() {
        let mut fds = Vec::with_capacity(input.numel());
        for j in 0..input.numel() {
            let mut probe = inputs.to_vec();
            let x = input.data()[j];
            let (xp, xm) = (x + PERTURBATION, x - PERTURBATION);
            probe[i].data_mut()[j] = xp;
            let fp = eval_objective(&probe, build, &weights)?;
            probe[i].data_mut()[j] = xm;
            let fm = eval_objective(&probe, build, &weights)?;
            let fd = (fp - fm) / (xp as f64 - xm as f64);
            worst.element = worst.element.max(rel_err(grads[i][j] as f64, fd));
            fds.push(fd);
        }
        let ad: Vec<f64> = grads[i].iter().map(|&g| g as f64).collect();
        worst.tensor = worst.tensor.max(rel_err_norm(&ad, &fds));
    }
    Ok(worst)
}

/// Directional finite-difference check: compares `∇f·Δ` against
/// `f(θ₊) − f(θ₋)` for `Δ = θ₊ − θ₋` of length `2h` along `ĝ + r̂`, the sum of
/// the normalized autodiff gradient and a random unit vector. The gradient
/// part keeps the projected derivative well away from zero; the random part
/// exposes errors orthogonal to it.
fn check_directional<R: Rng>(
    eval: &dyn Fn(&[Tensor]) -> Result<f64>,
    grads: &[Vec<f32>],
    point: &[Tensor],
    step: f32,
    rng: &mut R,
) -> Result<f64> {
    let unit = |v: Vec<Vec<f64>>| {
        let n = v
            .iter()
            .flatten()
            .map(|d| d * d)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        v.into_iter()
            .map(|t| t.into_iter().map(|d| d / n).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let g_hat = unit(grads.iter().map(|g| g.iter().map(|&v| v as f64).collect()).collect());
    let r_hat = unit(
        point
            .iter()
            .map(|t| (0..t.numel()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect(),
    );
    let dir = unit(
        g_hat
            .iter()
            .zip(&r_hat)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
            .collect(),
    );
    let mut plus = point.to_vec();
    let mut minus = point.to_vec();
    let mut predicted = 0.0f64;
    for (k, t) in point.iter().enumerate() {
        for j in 0..t.numel() {
            let d = (dir[k][j] * step as f64) as f32;
            let x = t.data()[j];
            let (xp, xm) = (x + d, x - d);
            plus[k].data_mut()[j] = xp;
            minus[k].data_mut()[j] = xm;
            predicted += grads[k][j] as f64 * (xp as f64 - xm as f64);
        }
    }
    let actual = eval(&plus)? - eval(&minus)?;
    let scale = 2.0 * step as f64;
    Ok(rel_err(predicted / scale, actual / scale))
}

fn rand_dims<R: Rng>(rng: &mut R, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=6)).collect()
}

/// Uniform multiple of 1/64 in `[lo, hi]`.
fn grid<R: Rng>(rng: &mut R, lo: f32, hi: f32) -> f32 {
    rng.gen_range((lo * 64.0) as i32..=(hi * 64.0) as i32) as f32 / 64.0
}

/// Output weight with magnitude in `[0.5, 1]` so no output is ignored.
fn weight<R: Rng>(rng: &mut R) -> f64 {
    let m = grid(rng, 0.5, 1.0) as f64;
    if rng.gen() {
        m
    } else {
        -m
    }
}

fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| grid(rng, -1.0, 1.0))
}

/// Values with magnitude in `[0.05, 1]`, away from the ReLU kink.
fn rand_away_from_zero<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = grid(rng, 0.0625, 1.0);
        if rng.gen() {
            m
        } else {
            -m
        }
    })
}

fn single_op_trial<R: Rng>(name: &str, rng: &mut R) -> Result<TrialError> {
    match name {
        "matmul" => {
            let (b, m, k, n) = (
                rng.gen_range(1..=3),
                rng.gen_range(1..=6),
                rng.gen_range(1..=6),
                rng.gen_range(1..=6),
            );
            let inputs = [randn(&[b, m, k], rng), randn(&[b, k, n], rng)];
            check_elementwise(&inputs, &|t, v| t.matmul(v[0], v[1]), rng)
        }
        "conv2d" | "conv2d_strided" | "conv2d_depthwise" => {
            let groups = if name == "conv2d_depthwise" {
                rng.gen_range(1..=4)
            } else {
                rng.gen_range(1..=2)
            };
            let cin = if name == "conv2d_depthwise" {
                groups
            } else {
                groups * rng.gen_range(1..=3)
            };
            let cout = if name == "conv2d_depthwise" {
                groups
            } else {
                groups * rng.gen_range(1..=3)
            };
            let k = rng.gen_range(1..=3);
            let stride = if name == "conv2d_strided" { 2 } else { 1 };
            let pad = rng.gen_range(0..=k / 2 + usize::from(name == "conv2d_strided"));
            let h = rng.gen_range(k.max(2)..=6);
            let w = rng.gen_range(k.max(2)..=6);
            let inputs = [
                randn(&[rng.gen_range(1..=2), cin, h, w], rng),
                randn(&[cout, cin / groups, k, k], rng),
                randn(&[cout], rng),
            ];
            let opts = Conv2dOpts::new(stride, pad, groups);
            check_elementwise(&inputs, &move |t, v| t.conv2d(v[0], v[1], Some(v[2]), opts), rng)
        }
        "add" | "mul" => {
            let shape = rand_dims(rng, 3);
            let inputs = [randn(&shape, rng), randn(&shape, rng)];
            if name == "add" {
                check_elementwise(&inputs, &|t, v| t.add(v[0], v[1]), rng)
            } else {
                check_elementwise(&inputs, &|t, v| t.mul(v[0], v[1]), rng)
            }
        }
        "add_broadcast" | "mul_broadcast" => {
            let shape = rand_dims(rng, 4);
            // per-channel, per-sample-map and last-dim layouts
            let b_shape = match rng.gen_range(0..3) {
                0 => vec![shape[1], 1, 1],
                1 => vec![shape[0], 1, shape[2], shape[3]],
                _ => vec![shape[3]],
            };
            let inputs = [randn(&shape, rng), randn(&b_shape, rng)];
            if name == "add_broadcast" {
                check_elementwise(&inputs, &|t, v| t.add(v[0], v[1]), rng)
            } else {
                check_elementwise(&inputs, &|t, v| t.mul(v[0], v[1]), rng)
            }
        }
        "scale" => {
            let s: f32 = grid(rng, -3.0, 3.0);
            let inputs = [randn(&rand_dims(rng, 2), rng)];
            check_elementwise(&inputs, &move |t, v| Ok(t.scale(v[0], s)), rng)
        }
        "relu" | "gelu" | "sigmoid" | "exp" | "log" => {
            let shape = rand_dims(rng, 2);
            let kind = match name {
                "relu" => Unary::Relu,
                "gelu" => Unary::Gelu,
                "sigmoid" => Unary::Sigmoid,
                "exp" => Unary::Exp,
                _ => Unary::Log,
            };
            let x = match kind {
                Unary::Relu => rand_away_from_zero(&shape, rng),
                Unary::Log => Tensor::from_fn(&shape, |_| grid(rng, 0.5, 2.0)),
                _ => Tensor::from_fn(&shape, |_| grid(rng, -2.0, 2.0)),
            };
            check_elementwise(&[x], &move |t, v| t.unary(v[0], kind), rng)
        }
        "softmax" => {
            let shape = rand_dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let inputs = [Tensor::from_fn(&shape, |_| grid(rng, -2.0, 2.0))];
            check_elementwise(&inputs, &move |t, v| t.softmax(v[0], axis), rng)
        }
        "layer_norm" => {
            // two channels normalize to ±1 whatever the input, leaving an
            // input gradient that is zero up to eps
            let mut shape = rand_dims(rng, 2);
            shape[1] = rng.gen_range(3..=6);
            let c = shape[1];
            let inputs = [
                randn(&shape, rng),
                Tensor::from_fn(&[c], |_| grid(rng, 0.5, 1.5)),
                randn(&[c], rng),
            ];
            check_elementwise(&inputs, &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), rng)
        }
        "batch_norm" | "batch_norm_eval" => {
            let shape = [
                rng.gen_range(2..=4),
                rng.gen_range(1..=4),
                rng.gen_range(1..=4),
                rng.gen_range(2..=4),
            ];
            let c = shape[1];
            let inputs = [
                randn(&shape, rng),
                Tensor::from_fn(&[c], |_| grid(rng, 0.5, 1.5)),
                randn(&[c], rng),
            ];
            if name == "batch_norm" {
                check_elementwise(
                    &inputs,
                    &|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).map(|r| r.0),
                    rng,
                )
            } else {
                let mean: Vec<f32> = (0..c).map(|_| grid(rng, -0.5, 0.5)).collect();
                // powers of four with eps 0 keep the frozen affine map exact
                let var: Vec<f32> = (0..c).map(|_| [0.25, 1.0, 4.0][rng.gen_range(0..3)]).collect();
                check_elementwise(
                    &inputs,
                    &move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 0.0),
                    rng,
                )
            }
        }
        "bilinear_resize" => {
            let shape = [
                rng.gen_range(1..=2),
                rng.gen_range(1..=3),
                rng.gen_range(1..=6),
                rng.gen_range(1..=6),
            ];
            let (oh, ow) = (rng.gen_range(1..=6), rng.gen_range(1..=6));
            let inputs = [randn(&shape, rng)];
            check_elementwise(&inputs, &move |t, v| t.resize_bilinear(v[0], oh, ow), rng)
        }
        "reshape" => {
            let shape = rand_dims(rng, 3);
            let target = [shape[0] * shape[1], shape[2]];
            let inputs = [randn(&shape, rng)];
            check_elementwise(
                &inputs,
                &move |t, v| {
                    let r = t.reshape(v[0], &target)?;
                    // square so the gradient depends on position
                    t.mul(r, r)
                },
                rng,
            )
        }
        "transpose" => {
            let shape = rand_dims(rng, 4);
            let d0 = rng.gen_range(0..4);
            let d1 = (d0 + rng.gen_range(1..4)) % 4;
            let inputs = [randn(&shape, rng)];
            check_elementwise(
                &inputs,
                &move |t, v| {
                    let r = t.transpose(v[0], d0, d1)?;
                    t.mul(r, r)
                },
                rng,
            )
        }
        "concat" => {
            let mut a = rand_dims(rng, 4);
            let axis = rng.gen_range(0..4);
            let mut b = a.clone();
            b[axis] = rng.gen_range(1..=6);
            a[axis] = rng.gen_range(1..=6);
            let inputs = [randn(&a, rng), randn(&b, rng)];
            check_elementwise(&inputs, &move |t, v| t.concat(&[v[0], v[1]], axis), rng)
        }
        "slice" => {
            let shape = rand_dims(rng, 3);
            let axis = rng.gen_range(0..3);
            let start = rng.gen_range(0..shape[axis]);
            let len = rng.gen_range(1..=shape[axis] - start);
            let inputs = [randn(&shape, rng)];
            check_elementwise(
                &inputs,
                &move |t, v| {
                    let s = t.slice(v[0], axis, start, len)?;
                    t.mul(s, s)
                },
                rng,
            )
        }
        "sum" | "mean" => {
            let inputs = [randn(&rand_dims(rng, 3), rng)];
            if name == "sum" {
                check_elementwise(&inputs, &|t, v| Ok(t.sum(v[0])), rng)
            } else {
                check_elementwise(&inputs, &|t, v| Ok(t.mean(v[0])), rng)
            }
        }
        "silog" => {
            let shape = rand_dims(rng, 2);
            let n: usize = shape.iter().product();
            let gt: Vec<f32> = (0..n).map(|_| grid(rng, 0.5, 9.5)).collect();
            let mut valid: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            valid[0] = true;
            let inputs = [Tensor::from_fn(&shape, |_| grid(rng, 0.5, 9.5))];
            check_elementwise(&inputs, &move |t, v| t.silog(v[0], &gt, &valid, 0.5), rng)
        }
        other => Err(Error::Contract(format!("unknown gradcheck op '{other}'"))),
    }
}

/// A deliberately tiny model config for composed checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        stage_channels: [4, 8, 8, 8],
        reduction_ratios: [2, 2, 1, 1],
        stage_depths: [1, 1, 1, 1],
        stage_heads: [1, 2, 2, 2],
        decoder_width: 4,
        mlp_expansion: 2,
        ..ModelConfig::default()
    }
}

fn model_trial<R: Rng>(name: &str, rng: &mut R) -> Result<f64> {
    use crate::model::GlpDepth;

    let config = tiny_config();
    let model = GlpDepth::new(config.clone(), rng.gen())?;
    let (batch, h, w) = (2usize, 32usize, 32usize);
    let image = Tensor::from_fn(&[batch, 3, h, w], |_| grid(rng, 0.0, 1.0));

    // Perturb all parameters away from their init so zero-initialized
    // biases and unit norm scales still get exercised.
    let mut params: Vec<Tensor> = model
        .params()
        .trainable()
        .map(|(_, t)| t.map(|v| v + grid(rng, -0.05, 0.05)))
        .collect();
    let mut point = vec![image];
    point.append(&mut params);

    let forward = |g: &mut Graph, inputs: &[Var]| -> Result<Var> {
        let x = inputs[0];
        match name {
            "attention" => {
                let tokens = model.encoder.stages[0].embed.forward(g, x)?;
                model.encoder.stages[0].blocks[0]
                    .attn
                    .forward(g, tokens.0, tokens.1, tokens.2)
            }
            "mix_ffn" => {
                let tokens = model.encoder.stages[0].embed.forward(g, x)?;
                model.encoder.stages[0].blocks[0]
                    .ffn
                    .forward(g, tokens.0, tokens.1, tokens.2)
            }
            "transformer_block" => {
                let tokens = model.encoder.stages[0].embed.forward(g, x)?;
                model.encoder.stages[0].blocks[0].forward(g, tokens.0, tokens.1, tokens.2)
            }
            "sff" => {
                let pyr = model.encoder.forward(g, x)?;
                let dec = g.tape.resize_bilinear(pyr[1], h / 4, w / 4)?;
                let dec = g.tape.slice(dec, 1, 0, config.decoder_width)?;
                model.decoder.fusions[2].forward(g, dec, pyr[0])
            }
            "encoder_2stage" => {
                let pyr = model.encoder.forward_stages(g, x, 2)?;
                Ok(pyr[1])
            }
            _ => model.forward(g, x),
        }
    };

    let n_out = {
        let mut g = Graph::new(model.params(), Mode::Train, false);
        let inputs = g.bind_inputs(&point);
        let y = forward(&mut g, &inputs)?;
        g.tape.value(y).numel()
    };
    let weights: Vec<f64> = (0..n_out).map(|_| weight(rng)).collect();

    let (grads, masks) = {
        let mut g = Graph::new(model.params(), Mode::Train, true);
        g.tape.record_relu_masks();
        let inputs = g.bind_inputs(&point);
        let y = forward(&mut g, &inputs)?;
        let masks = g.tape.take_relu_masks();
        let wt = Tensor::new(g.tape.shape(y), weights.iter().map(|&w| w as f32).collect())?;
        let wv = g.tape.constant(wt);
        let prod = g.tape.mul(y, wv)?;
        let loss = g.tape.sum(prod);
        g.tape.backward(loss)?;
        let grads = inputs
            .iter()
            .zip(&point)
            .map(|(&v, t)| {
                g.tape
                    .grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect::<Vec<_>>();
        (grads, masks)
    };
    // The perturbed evaluations keep the base point's ReLU pattern, so the
    // difference quotient is not polluted by units crossing zero.
    let eval = |p: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(model.params(), Mode::Train, false);
        g.tape.replay_relu_masks(masks.clone());
        let inputs = g.bind_inputs(p);
        let y = forward(&mut g, &inputs)?;
        Ok(objective(&g.tape, y, &weights))
    };
    check_directional(&eval, &grads, &point, PERTURBATION, rng)
}

fn is_composed(name: &str) -> bool {
    matches!(
        name,
        "attention" | "mix_ffn" | "transformer_block" | "sff" | "encoder_2stage" | "network"
    )
}

pub fn run_check(name: &str, trials: usize, seed: u64) -> Result<CheckReport> {
    if !CHECKS.contains(&name) {
        return Err(Error::Contract(format!("unknown gradcheck op '{name}'")));
    }
    let composed = is_composed(name);
    let mut worst = 0.0f64;
    let mut worst_elem = 0.0f64;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if composed {
            worst = worst.max(model_trial(name, &mut rng)?);
        } else {
            let e = single_op_trial(name, &mut rng)?;
            worst = worst.max(e.tensor);
            worst_elem = worst_elem.max(e.element);
        }
    }
    Ok(CheckReport {
        name: name.to_string(),
        trials,
        max_rel_err: worst,
        max_elem_err: (!composed).then_some(worst_elem),
        tolerance: if composed { NETWORK_TOLERANCE } else { OP_TOLERANCE },
    })
}

pub fn run_all(trials: usize, seed: u64) -> Result<Vec<CheckReport>> {
    CHECKS.iter().map(|n| run_check(n, trials, seed)).collect()
}
