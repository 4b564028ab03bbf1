//! Executable check of the projection stability bound.
//!
//! With last-layer weights 1 (own class) / 0 (other classes), uniform `m'`
//! prototypes per class, and prototype moves that are small relative to the
//! distance to the input's nearest latent patch, projection can lower the
//! correct-class logit and raise any other logit by at most
//! `Δ_max = m'·ln((1+δ)(2−δ))`. The verifier measures every hypothesis and the
//! resulting logit changes for one input.

use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{prototype_activation, ProtoPNet};
use crate::tensor::Tensor;

/// Slack for floating-point comparisons of the bound itself.
const BOUND_SLACK: f64 = 1e-9;

/// `(θ, Δ_max)` for a given `δ ∈ (0, 1)` and `m'` prototypes per class.
pub fn theorem_constants(delta: f64, per_class: usize) -> Result<(f64, f64)> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "delta must lie in (0, 1), got {delta}"
        )));
    }
    if per_class == 0 {
        return Err(Error::InvalidArgument("m' must be positive".into()));
    }
    let theta = ((1.0 + delta).sqrt() - 1.0).min(1.0 - 1.0 / (2.0 - delta).sqrt());
    let delta_max = per_class as f64 * ((1.0 + delta) * (2.0 - delta)).ln();
    Ok((theta, delta_max))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    BoundHolds,
    BoundViolated,
    AssumptionsUnmet,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::BoundHolds => "bound_holds",
            Verdict::BoundViolated => "bound_violated",
            Verdict::AssumptionsUnmet => "assumptions_unmet",
        }
    }
}

/// Per-prototype facts gathered by the verifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeCheck {
    pub prototype: usize,
    pub class: usize,
    /// Flat patch index of the nearest latent patch to the prototype before
    /// and after projection.
    pub nearest_before: usize,
    pub nearest_after: usize,
    /// `‖a − b‖₂`.
    pub move_distance: f64,
    /// `‖z − b‖₂` where `z` is the nearest patch before projection.
    pub patch_distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub image_id: Option<usize>,
    pub correct_class: usize,
    pub delta: f64,
    pub theta: f64,
    /// Prototypes per class; the largest `m_k` when counts are not uniform.
    pub per_class: usize,
    pub delta_max: f64,
    pub prototypes: Vec<PrototypeCheck>,
    pub correctly_classified: bool,
    /// Each prototype's nearest patch before the move is still a nearest
    /// patch after it.
    pub a1: bool,
    /// Off-class prototypes moved by at most `θ·‖z − p‖ − √ε`.
    pub a2a: bool,
    /// Own-class prototypes moved by at most `(√(1+δ) − 1)·‖z − p‖` and sit
    /// within `√(1−δ)` of their nearest patch.
    pub a2b: bool,
    /// Every class has the same number of prototypes.
    pub a3: bool,
    /// Always true: the check substitutes the 1/0 weight pattern.
    pub a4: bool,
    /// Whether the model's own last layer already has the 1/0 pattern.
    pub a4_native: bool,
    /// `after − before` for each class logit under the 1/0 weights.
    pub logit_change: Vec<f64>,
    /// `after − before` under the model's own last layer (informational).
    pub native_logit_change: Vec<f64>,
    /// Top-2 logit margin before projection under the 1/0 weights.
    pub margin_before: f64,
    pub prediction_before: usize,
    pub prediction_after: usize,
    /// Correct-class drop and every incorrect-class rise are `≤ Δ_max`.
    pub bound_satisfied: bool,
    /// Margin before projection is at least `2·Δ_max`.
    pub margin_condition: bool,
    pub verdict: Verdict,
}

impl TheoremReport {
    pub fn assumptions_hold(&self) -> bool {
        self.correctly_classified && self.a1 && self.a2a && self.a2b && self.a3 && self.a4
    }

    /// Prediction changed although every hypothesis and the margin condition held.
    pub fn prediction_violation(&self) -> bool {
        self.assumptions_hold()
            && self.margin_condition
            && self.prediction_before != self.prediction_after
    }

    /// `key=value` lines, one fact per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.12e}"))
                .collect::<Vec<_>>()
                .join(",")
        };
        if let Some(id) = self.image_id {
            writeln!(s, "image={id}").unwrap();
        }
        writeln!(s, "class={}", self.correct_class).unwrap();
        writeln!(s, "delta={}", self.delta).unwrap();
        writeln!(s, "theta={:.12e}", self.theta).unwrap();
        writeln!(s, "m_prime={}", self.per_class).unwrap();
        writeln!(s, "delta_max={:.12e}", self.delta_max).unwrap();
        writeln!(s, "correctly_classified={}", self.correctly_classified).unwrap();
        writeln!(s, "A1={}", self.a1).unwrap();
        writeln!(s, "A2a={}", self.a2a).unwrap();
        writeln!(s, "A2b={}", self.a2b).unwrap();
        writeln!(s, "A3={}", self.a3).unwrap();
        writeln!(s, "A4={}", self.a4).unwrap();
        writeln!(s, "A4_native={}", self.a4_native).unwrap();
        for p in &self.prototypes {
            writeln!(
                s,
                "prototype={} class={} nearest_before={} nearest_after={} move={:.12e} patch_distance={:.12e}",
                p.prototype, p.class, p.nearest_before, p.nearest_after, p.move_distance, p.patch_distance
            )
            .unwrap();
        }
        writeln!(s, "logit_change={}", join(&self.logit_change)).unwrap();
        writeln!(s, "native_logit_change={}", join(&self.native_logit_change)).unwrap();
        writeln!(s, "margin_before={:.12e}", self.margin_before).unwrap();
        writeln!(s, "prediction_before={}", self.prediction_before).unwrap();
        writeln!(s, "prediction_after={}", self.prediction_after).unwrap();
        writeln!(s, "bound_satisfied={}", self.bound_satisfied).unwrap();
        writeln!(s, "margin_condition={}", self.margin_condition).unwrap();
        writeln!(s, "verdict={}", self.verdict.as_str()).unwrap();
        s
    }
}

/// Everything the bound talks about, at the latent level.
#[derive(Debug, Clone)]
pub struct LatentInstance {
    pub latent: Tensor,
    pub before: Vec<Tensor>,
    pub after: Vec<Tensor>,
    pub allocation: Vec<usize>,
    pub num_classes: usize,
    pub epsilon: f64,
    pub label: usize,
    /// Last layer actually used by the model, if any.
    pub native_last_layer: Option<Tensor>,
}

fn one_zero_logits(scores: &[f64], allocation: &[usize], k: usize) -> Vec<f64> {
    let mut logits = vec![0.0; k];
    for (s, &c) in scores.iter().zip(allocation) {
        logits[c] += s;
    }
    logits
}

fn top2_margin(logits: &[f64]) -> f64 {
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    if sorted.len() < 2 {
        f64::INFINITY
    } else {
        sorted[0] - sorted[1]
    }
}

pub fn verify_latent(inst: &LatentInstance, delta: f64) -> Result<TheoremReport> {
    let m = inst.before.len();
    if inst.after.len() != m || inst.allocation.len() != m {
        return Err(Error::InvalidArgument(
            "before/after prototype sets and allocation must have equal length".into(),
        ));
    }
    if inst.label >= inst.num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {} out of range for {} classes",
            inst.label, inst.num_classes
        )));
    }
    let mut counts = vec![0usize; inst.num_classes];
    for &c in &inst.allocation {
        counts[c] += 1;
    }
    let a3 = counts.iter().all(|&n| n == counts[0]) && counts[0] > 0;
    let per_class = counts.iter().copied().max().unwrap_or(0);
    let (theta, delta_max) = theorem_constants(delta, per_class.max(1))?;
    let sqrt_eps = inst.epsilon.sqrt();
    let c = inst.label;

    let mut checks = Vec::with_capacity(m);
    let (mut a1, mut a2a, mut a2b) = (true, true, true);
    let mut scores_before = Vec::with_capacity(m);
    let mut scores_after = Vec::with_capacity(m);
    for j in 0..m {
        let (b, a) = (&inst.before[j], &inst.after[j]);
        let map_b = kernels::l2_distance_map(&inst.latent, b)?;
        let map_a = kernels::l2_distance_map(&inst.latent, a)?;
        let zb = kernels::argmin(map_b.data());
        let za = kernels::argmin(map_a.data());
        let min_a = map_a.data()[za];
        // z must remain *a* nearest patch to the moved prototype
        a1 &= map_a.data()[zb] <= min_a;
        let move_distance = a.squared_distance(b).sqrt();
        let patch_distance = map_b.data()[zb].sqrt();
        if inst.allocation[j] == c {
            a2b &= move_distance <= ((1.0 + delta).sqrt() - 1.0) * patch_distance
                && patch_distance <= (1.0 - delta).sqrt();
        } else {
            a2a &= move_distance <= theta * patch_distance - sqrt_eps;
        }
        scores_before.push(prototype_activation(map_b.data()[zb], inst.epsilon));
        scores_after.push(prototype_activation(min_a, inst.epsilon));
        checks.push(PrototypeCheck {
            prototype: j,
            class: inst.allocation[j],
            nearest_before: zb,
            nearest_after: za,
            move_distance,
            patch_distance,
        });
    }

    let before = one_zero_logits(&scores_before, &inst.allocation, inst.num_classes);
    let after = one_zero_logits(&scores_after, &inst.allocation, inst.num_classes);
    let logit_change: Vec<f64> = after.iter().zip(&before).map(|(a, b)| a - b).collect();
    let native_logit_change = match &inst.native_last_layer {
        Some(w) => {
            let nb = kernels::linear(&Tensor::from_vec(scores_before.clone()), w)?;
            let na = kernels::linear(&Tensor::from_vec(scores_after.clone()), w)?;
            na.data()
                .iter()
                .zip(nb.data())
                .map(|(a, b)| a - b)
                .collect()
        }
        None => logit_change.clone(),
    };
    let a4_native = inst.native_last_layer.as_ref().is_none_or(|w| {
        let k = inst.num_classes;
        (0..k).all(|row| {
            (0..m).all(|j| {
                let want = if inst.allocation[j] == row { 1.0 } else { 0.0 };
                w.data()[row * m + j] == want
            })
        })
    });

    let prediction_before = kernels::argmax(&before);
    let prediction_after = kernels::argmax(&after);
    let correctly_classified = prediction_before == c;
    let bound_satisfied = logit_change.iter().enumerate().all(|(k, &d)| {
        if k == c {
            -d <= delta_max + BOUND_SLACK
        } else {
            d <= delta_max + BOUND_SLACK
        }
    });
    let margin_before = top2_margin(&before);
    let margin_condition = margin_before >= 2.0 * delta_max;

    let mut report = TheoremReport {
        image_id: None,
        correct_class: c,
        delta,
        theta,
        per_class,
        delta_max,
        prototypes: checks,
        correctly_classified,
        a1,
        a2a,
        a2b,
        a3,
        a4: true,
        a4_native,
        logit_change,
        native_logit_change,
        margin_before,
        prediction_before,
        prediction_after,
        bound_satisfied,
        margin_condition,
        verdict: Verdict::AssumptionsUnmet,
    };
    if report.assumptions_hold() {
        let prediction_ok = !margin_condition || prediction_before == prediction_after;
        report.verdict = if bound_satisfied && prediction_ok {
            Verdict::BoundHolds
        } else {
            Verdict::BoundViolated
        };
    }
    Ok(report)
}

/// Runs the check for image `x` with true label `label`, comparing a model
/// before projection with the same model after projection.
pub fn verify_projection_theorem(
    before: &ProtoPNet,
    after: &ProtoPNet,
    x: &Tensor,
    label: usize,
    delta: f64,
) -> Result<TheoremReport> {
    if before.config != after.config || before.allocation != after.allocation {
        return Err(Error::InvalidArgument(
            "models before and after projection must share a config".into(),
        ));
    }
    if !before.backbone.bit_eq(&after.backbone) {
        return Err(Error::InvalidArgument(
            "models before and after projection must share a backbone".into(),
        ));
    }
    let latent = before.latent(x)?;
    verify_latent(
        &LatentInstance {
            latent,
            before: before.prototypes.clone(),
            after: after.prototypes.clone(),
            allocation: before.allocation.clone(),
            num_classes: before.num_classes(),
            epsilon: before.config.epsilon,
            label,
            native_last_layer: Some(before.last_layer.clone()),
        },
        delta,
    )
}

fn random_unit(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn offset(base: &Tensor, dir: &[f64], len: f64) -> Tensor {
    let data = base
        .data()
        .iter()
        .zip(dir)
        .map(|(b, d)| b + d * len)
        .collect();
    Tensor::new(base.shape().to_vec(), data).expect("same shape")
}

/// Draws a latent and before/after prototypes that satisfy every hypothesis
/// of the bound for `delta` (1×1 prototypes, `m'` per class, correct class
/// `label`). Retries internally until A1 holds and the input is correctly
/// classified.
pub fn synthetic_instance(
    rng: &mut impl Rng,
    delta: f64,
    num_classes: usize,
    per_class: usize,
    latent_hw: (usize, usize),
    depth: usize,
    epsilon: f64,
) -> Result<LatentInstance> {
    let (theta, _) = theorem_constants(delta, per_class)?;
    let allocation: Vec<usize> = (0..num_classes)
        .flat_map(|k| std::iter::repeat_n(k, per_class))
        .collect();
    let grow = (1.0 + delta).sqrt() - 1.0;
    for _ in 0..10_000 {
        let (h, w) = latent_hw;
        let latent = Tensor::new(
            vec![h, w, depth],
            (0..h * w * depth).map(|_| rng.gen::<f64>()).collect(),
        )?;
        let label = rng.gen_range(0..num_classes);
        let mut before = Vec::new();
        let mut after = Vec::new();
        for &k in &allocation {
            let (b, a) = if k == label {
                // close to a patch: ‖z − b‖ ≤ √(1 − δ)
                let r = rng.gen_range(0.02..0.4) * (1.0 - delta).sqrt();
                let (pr, pc) = (rng.gen_range(0..h), rng.gen_range(0..w));
                let z = latent.window3(pr, pc, 1, 1)?;
                let b = offset(&z, &random_unit(rng, depth), r);
                let (d2, _, _) = crate::projection::nearest_patch(&latent, &b)?;
                let s = rng.gen::<f64>() * grow * d2.sqrt();
                let a = offset(&b, &random_unit(rng, depth), s);
                (b, a)
            } else {
                let b = Tensor::new(
                    vec![1, 1, depth],
                    (0..depth).map(|_| rng.gen_range(-0.5..1.5)).collect(),
                )?;
                let (d2, _, _) = crate::projection::nearest_patch(&latent, &b)?;
                let room = (theta * d2.sqrt() - epsilon.sqrt()).max(0.0);
                let s = rng.gen::<f64>() * room;
                let a = offset(&b, &random_unit(rng, depth), s);
                (b, a)
            };
            before.push(b);
            after.push(a);
        }
        let inst = LatentInstance {
            latent,
            before,
            after,
            allocation: allocation.clone(),
            num_classes,
            epsilon,
            label,
            native_last_layer: None,
        };
        let report = verify_latent(&inst, delta)?;
        if report.assumptions_hold() {
            return Ok(inst);
        }
    }
    Err(Error::InvalidArgument(format!(
        "could not construct an instance satisfying the hypotheses for delta={delta}"
    )))
}
