//! Randomised comparison of tape gradients against central finite
//! differences, per primitive and for the full joint objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{finite_diff_grad, max_relative_error, Tape};
use crate::error::{Error, Result};
use crate::model::{ConvBlock, ModelConfig, ProtoPNet};
use crate::tensor::Tensor;
use crate::training::{joint_objective, joint_objective_gradient, TrainConfig};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub check: &'static str,
    pub trial: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl GradCheckResult {
    pub fn log_line(&self) -> String {
        format!(
            "check={} trial={} coords={} max_rel_error={:.3e}",
            self.check, self.trial, self.coordinates, self.max_rel_error
        )
    }
}

pub const CHECKS: [&str; 6] = [
    "conv2d",
    "linear",
    "l2_distance_map",
    "prototype_activation",
    "crsent",
    "joint",
];

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("shape matches")
}

/// Builds `loss(inputs)` on a fresh tape, then compares the tape gradient of
/// every input with finite differences of the same function.
fn compare<F>(inputs: &[Tensor], step: f64, floor: f64, build: F) -> Result<(usize, f64)>
where
    F: Fn(&mut Tape, &[crate::autograd::Var]) -> Result<crate::autograd::Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let eval = |probe: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<_> = inputs
                .iter()
                .enumerate()
                .map(|(k, x)| t.leaf(if k == i { probe.clone() } else { x.clone() }, false))
                .collect();
            let l = build(&mut t, &vs).expect("same shapes as the analytic pass");
            t.value(l).item()
        };
        let numeric = finite_diff_grad(eval, &inputs[i], step)?;
        worst = worst.max(max_relative_error(&analytic, &numeric, floor));
        coords += inputs[i].numel();
    }
    Ok((coords, worst))
}

/// A random full-extent filter, so that `conv2d(x, r)` is a random linear
/// functional of `x`.
fn projector(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    uniform(rng, &[shape[0], shape[1], shape[2], 1], -1.0, 1.0)
}

fn check_conv(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let (h, w) = (rng.gen_range(3..=6), rng.gen_range(3..=6));
    let cin = rng.gen_range(1..=3);
    let cout = rng.gen_range(1..=4);
    let k = if rng.gen_bool(0.5) { 3 } else { 1 };
    let stride = rng.gen_range(1..=2);
    let padding = rng.gen_range(0..=1);
    let x = uniform(rng, &[h, w, cin], -1.0, 1.0);
    let f = uniform(rng, &[k, k, cin, cout], -1.0, 1.0);
    let out_shape = crate::kernels::conv2d(&x, &f, stride, padding)?
        .shape()
        .to_vec();
    let r = projector(rng, &out_shape);
    compare(&[x, f], step, floor, |t, v| {
        let c = t.conv2d(v[0], v[1], stride, padding)?;
        let s = t.sigmoid(c);
        let rv = t.leaf(r.clone(), false);
        let p = t.conv2d(s, rv, 1, 0)?;
        Ok(t.sum(p))
    })
}

fn check_linear(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let m = rng.gen_range(2..=6);
    let k = rng.gen_range(2..=4);
    let label = rng.gen_range(0..k);
    let x = uniform(rng, &[m], -1.0, 1.0);
    let w = uniform(rng, &[k, m], -1.0, 1.0);
    compare(&[x, w], step, floor, |t, v| {
        let logits = t.linear(v[0], v[1])?;
        t.softmax_cross_entropy(logits, label)
    })
}

fn check_distance(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let (h, w, d) = (
        rng.gen_range(2..=6),
        rng.gen_range(2..=6),
        rng.gen_range(1..=4),
    );
    let (ph, pw) = (rng.gen_range(1..=h.min(2)), rng.gen_range(1..=w.min(2)));
    let z = uniform(rng, &[h, w, d], 0.0, 1.0);
    let p = uniform(rng, &[ph, pw, d], 0.0, 1.0);
    let r = uniform(rng, &[1, (h - ph + 1) * (w - pw + 1)], -1.0, 1.0);
    compare(&[z, p], step, floor, |t, v| {
        let map = t.l2_distance_map(v[0], v[1])?;
        let rv = t.leaf(r.clone(), false);
        let s = t.linear(map, rv)?;
        Ok(t.sum(s))
    })
}

fn check_activation(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let m = rng.gen_range(2..=6);
    let eps = 1e-4;
    let d = uniform(rng, &[m], 0.05, 2.0);
    let w = uniform(rng, &[1, m], -1.0, 1.0);
    compare(&[d], step, floor, |t, v| {
        let a = t.prototype_activation(v[0], eps);
        let wv = t.leaf(w.clone(), false);
        let o = t.linear(a, wv)?;
        Ok(t.sum(o))
    })
}

fn check_crsent(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let k = rng.gen_range(2..=6);
    let label = rng.gen_range(0..k);
    let logits = uniform(rng, &[k], -3.0, 3.0);
    compare(&[logits], step, floor, |t, v| {
        t.softmax_cross_entropy(v[0], label)
    })
}

/// A small model whose latent map is at most 6×6×4 with at most 6 prototypes.
pub fn toy_model_config(rng: &mut impl Rng) -> ModelConfig {
    let side = rng.gen_range(4..=6);
    let num_classes = rng.gen_range(2..=3);
    let per_class = 6 / num_classes;
    let proto = rng.gen_range(1..=2);
    ModelConfig {
        input_height: side,
        input_width: side,
        input_channels: 3,
        blocks: vec![ConvBlock::new(4, 3, None)],
        latent_depth: 4,
        proto_height: proto,
        proto_width: proto,
        num_classes,
        prototypes_per_class: vec![per_class; num_classes],
        epsilon: crate::model::DEFAULT_EPSILON,
    }
}

fn check_joint(rng: &mut ChaCha8Rng, step: f64, floor: f64) -> Result<(usize, f64)> {
    let config = toy_model_config(rng);
    let mut model = ProtoPNet::build(config.clone(), rng.gen())?;
    // Zero biases put ReLU inputs exactly on the kink wherever the previous
    // layer is all zero; move them off it.
    for layer in &mut model.backbone.layers {
        layer.bias = uniform(rng, layer.bias.shape(), -0.1, 0.1);
    }
    let n = 3;
    let images: Vec<Tensor> = (0..n)
        .map(|_| uniform(rng, &[config.input_height, config.input_width, 3], 0.0, 1.0))
        .collect();
    let labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    let cfg = TrainConfig::default();
    let (_, grads) = joint_objective_gradient(&images, &labels, &model, &cfg)?;

    let mut worst = 0.0f64;
    let mut coords = 0;
    let num_backbone = model.backbone.params().len();
    let analytic: Vec<&Tensor> = grads.backbone.iter().chain(&grads.prototypes).collect();
    for (i, g) in analytic.iter().enumerate() {
        let at = if i < num_backbone {
            model.backbone.params()[i].clone()
        } else {
            model.prototypes[i - num_backbone].clone()
        };
        let eval = |probe: &Tensor| {
            let mut m = model.clone();
            if i < num_backbone {
                *m.backbone.params_mut()[i] = probe.clone();
            } else {
                m.prototypes[i - num_backbone] = probe.clone();
            }
            joint_objective(&images, &labels, &m, &cfg)
                .expect("valid model")
                .total
        };
        let numeric = finite_diff_grad(eval, &at, step)?;
        worst = worst.max(max_relative_error(g, &numeric, floor));
        coords += at.numel();
    }
    Ok((coords, worst))
}

/// Runs every check `trials` times on instances drawn from `seed`.
pub fn run_gradcheck(
    trials: usize,
    seed: u64,
    step: f64,
    floor: f64,
) -> Result<Vec<GradCheckResult>> {
    if trials == 0 {
        return Err(Error::InvalidArgument(
            "gradcheck needs at least one trial".into(),
        ));
    }
    let mut out = Vec::with_capacity(trials * CHECKS.len());
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(trial as u64));
        for check in CHECKS {
            let (coordinates, max_rel_error) = match check {
                "conv2d" => check_conv(&mut rng, step, floor)?,
                "linear" => check_linear(&mut rng, step, floor)?,
                "l2_distance_map" => check_distance(&mut rng, step, floor)?,
                "prototype_activation" => check_activation(&mut rng, step, floor)?,
                "crsent" => check_crsent(&mut rng, step, floor)?,
                _ => check_joint(&mut rng, step, floor)?,
            };
            out.push(GradCheckResult {
                check,
                trial,
                coordinates,
                max_rel_error,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_few_trials_agree() {
        let results = run_gradcheck(2, 11, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
        assert_eq!(results.len(), 2 * CHECKS.len());
        for r in &results {
            assert!(r.max_rel_error < 1e-4, "{}", r.log_line());
        }
    }

    #[test]
    fn zero_trials_rejected() {
        assert!(run_gradcheck(0, 0, DEFAULT_STEP, DEFAULT_FLOOR).is_err());
    }
}
