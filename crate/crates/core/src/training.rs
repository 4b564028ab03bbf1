//! Three-stage training: joint SGD of the backbone and prototypes with the
//! last layer frozen, projection of the prototypes, and a convex L1-penalised
//! fit of the last layer alone. The stages may be cycled.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{init_last_layer, ProtoPNet, Trainable};
use crate::projection::{compute_latents, project_prototypes};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Weight of the cluster cost.
    pub lambda_cluster: f64,
    /// Weight of the separation cost.
    pub lambda_separation: f64,
    /// L1 penalty on off-class last-layer weights.
    pub lambda_l1: f64,
    pub lr_backbone: f64,
    pub lr_prototypes: f64,
    /// Initial step of the last-layer proximal gradient line search.
    pub lr_last_layer: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage3_epochs: usize,
    pub cycles: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_cluster: 0.8,
            lambda_separation: 0.08,
            lambda_l1: 1e-4,
            lr_backbone: 1e-2,
            lr_prototypes: 3e-3,
            lr_last_layer: 1.0,
            momentum: 0.9,
            batch_size: 32,
            stage1_epochs: 10,
            stage3_epochs: 20,
            cycles: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("lambda_cluster", self.lambda_cluster),
            ("lambda_separation", self.lambda_separation),
            ("lambda_l1", self.lambda_l1),
            ("lr_backbone", self.lr_backbone),
            ("lr_prototypes", self.lr_prototypes),
            ("momentum", self.momentum),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be a finite value >= 0, got {v}"
                )));
            }
        }
        if !(self.lr_last_layer > 0.0) {
            return Err(Error::InvalidConfig(
                "lr_last_layer must be positive".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Joint,
    Projection,
    LastLayer,
    Baseline,
}

impl StageKind {
    pub fn name(self) -> &'static str {
        match self {
            StageKind::Joint => "joint",
            StageKind::Projection => "push",
            StageKind::LastLayer => "last-layer",
            StageKind::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub crsent: f64,
    pub clst: f64,
    pub sep: f64,
    pub total: f64,
    pub accuracy: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} crsent={:.9} clst={:.9} sep={:.9} total={:.9} acc={:.6}",
            self.epoch, self.crsent, self.clst, self.sep, self.total, self.accuracy
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub kind: StageKind,
    pub cycle: usize,
    pub epochs: Vec<EpochMetrics>,
    pub seconds: f64,
}

impl StageReport {
    fn new(kind: StageKind, cycle: usize) -> Self {
        StageReport {
            kind,
            cycle,
            epochs: Vec::new(),
            seconds: 0.0,
        }
    }

    /// One `epoch=… crsent=… clst=… sep=… total=… acc=…` line per epoch.
    pub fn to_log(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(s, "{}", e.log_line()).unwrap();
        }
        s
    }
}

/// Objective terms averaged over a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ObjectiveParts {
    pub crsent: f64,
    pub clst: f64,
    pub sep: f64,
    pub total: f64,
    pub correct: usize,
}

/// Gradient of the joint objective with respect to the stage-1 parameters.
#[derive(Debug, Clone)]
pub struct FeatureGradients {
    /// Filters then bias for every backbone layer.
    pub backbone: Vec<Tensor>,
    pub prototypes: Vec<Tensor>,
}

impl FeatureGradients {
    fn zeros_like(model: &ProtoPNet) -> Self {
        FeatureGradients {
            backbone: model
                .backbone
                .params()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            prototypes: model
                .prototypes
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    fn accumulate(&mut self, other: &FeatureGradients) {
        for (a, b) in self
            .backbone
            .iter_mut()
            .chain(self.prototypes.iter_mut())
            .zip(other.backbone.iter().chain(&other.prototypes))
        {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
}

/// Nearest own-class and nearest off-class squared distances for one image.
/// The off-class value is `None` when every prototype belongs to `label`.
pub fn nearest_class_distances(
    min_distances: &[f64],
    allocation: &[usize],
    label: usize,
) -> (f64, Option<f64>) {
    let mut own = f64::INFINITY;
    let mut off: Option<f64> = None;
    for (&d, &k) in min_distances.iter().zip(allocation) {
        if k == label {
            own = own.min(d);
        } else {
            off = Some(off.map_or(d, |o: f64| o.min(d)));
        }
    }
    (own, off)
}

/// Mean over images of the smallest squared distance between any latent patch
/// and any prototype of the image's own class.
pub fn cluster_cost(latents: &[Tensor], labels: &[usize], model: &ProtoPNet) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::InvalidArgument(
            "cluster cost of an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for (z, &y) in latents.iter().zip(labels) {
        let pf = model.prototype_forward(z)?;
        let (own, _) = nearest_class_distances(&pf.min_distances, &model.allocation, y);
        if !own.is_finite() {
            return Err(Error::InvalidConfig(format!("class {y} has no prototypes")));
        }
        total += own;
    }
    Ok(total / latents.len() as f64)
}

/// Negative mean over images of the smallest squared distance between any
/// latent patch and any prototype of another class.
pub fn separation_cost(latents: &[Tensor], labels: &[usize], model: &ProtoPNet) -> Result<f64> {
    if model.num_classes() < 2 {
        return Err(Error::InvalidConfig(
            "separation cost needs at least two classes".into(),
        ));
    }
    if latents.is_empty() {
        return Err(Error::InvalidArgument(
            "separation cost of an empty batch".into(),
        ));
    }
    let mut total = 0.0;
    for (z, &y) in latents.iter().zip(labels) {
        let pf = model.prototype_forward(z)?;
        let (_, off) = nearest_class_distances(&pf.min_distances, &model.allocation, y);
        total += off.expect("at least two classes");
    }
    Ok(-total / latents.len() as f64)
}

fn check_separation(model: &ProtoPNet, cfg: &TrainConfig) -> Result<()> {
    if model.num_classes() < 2 && cfg.lambda_separation != 0.0 {
        return Err(Error::InvalidConfig(
            "separation cost needs at least two classes".into(),
        ));
    }
    Ok(())
}

/// `mean CrsEnt + λ1·Clst + λ2·Sep` over a batch, evaluated without a tape.
pub fn joint_objective(
    images: &[Tensor],
    labels: &[usize],
    model: &ProtoPNet,
    cfg: &TrainConfig,
) -> Result<ObjectiveParts> {
    check_separation(model, cfg)?;
    let per: Vec<ObjectiveParts> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| {
            let out = model.forward(x)?;
            let (own, off) = nearest_class_distances(&out.min_distances, &model.allocation, y);
            let ce = kernels::cross_entropy(&out.logits, y)?;
            let sep = -off.unwrap_or(0.0);
            Ok(ObjectiveParts {
                crsent: ce,
                clst: own,
                sep,
                total: 0.0,
                correct: usize::from(out.predicted() == y),
            })
        })
        .collect::<Result<_>>()?;
    Ok(average(&per, cfg))
}

fn average(per: &[ObjectiveParts], cfg: &TrainConfig) -> ObjectiveParts {
    let n = per.len() as f64;
    let mut out = ObjectiveParts::default();
    for p in per {
        out.crsent += p.crsent;
        out.clst += p.clst;
        out.sep += p.sep;
        out.correct += p.correct;
    }
    out.crsent /= n;
    out.clst /= n;
    out.sep /= n;
    out.total = out.crsent + cfg.lambda_cluster * out.clst + cfg.lambda_separation * out.sep;
    out
}

/// Per-image objective terms and the gradient of `weight · (CrsEnt +
/// λ1·clst + λ2·sep)` with respect to the backbone and prototypes.
fn sample_gradient(
    model: &ProtoPNet,
    x: &Tensor,
    label: usize,
    cfg: &TrainConfig,
    weight: f64,
) -> Result<(ObjectiveParts, FeatureGradients)> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape, Trainable::FEATURES);
    let xv = tape.leaf(x.clone(), false);
    let out = model.forward_on_tape(&mut tape, &params, xv)?;
    let ce = tape.softmax_cross_entropy(out.logits, label)?;

    let own: Vec<usize> = model.prototypes_of(label);
    let off: Vec<usize> = (0..model.num_prototypes())
        .filter(|&j| model.allocation[j] != label)
        .collect();
    let clst = tape.min_over(out.min_distances, &own)?;
    let mut terms = vec![ce, clst];
    let mut coeffs = vec![weight, weight * cfg.lambda_cluster];
    let sep_min = if off.is_empty() {
        None
    } else {
        let v = tape.min_over(out.min_distances, &off)?;
        terms.push(v);
        coeffs.push(-weight * cfg.lambda_separation);
        Some(v)
    };
    let loss = tape.weighted_sum(&terms, &coeffs)?;
    tape.backward(loss)?;

    let logits = tape.value(out.logits).data();
    let parts = ObjectiveParts {
        crsent: tape.value(ce).item(),
        clst: tape.value(clst).item(),
        sep: sep_min.map_or(0.0, |v| -tape.value(v).item()),
        total: 0.0,
        correct: usize::from(kernels::argmax(logits) == label),
    };
    let grad_or_zero =
        |v, like: &Tensor| tape.grad(v).unwrap_or_else(|| Tensor::zeros(like.shape()));
    let backbone = params
        .backbone
        .iter()
        .zip(model.backbone.layers.iter())
        .flat_map(|(&(f, b), layer)| {
            [
                grad_or_zero(f, &layer.filters),
                grad_or_zero(b, &layer.bias),
            ]
        })
        .collect();
    let prototypes = params
        .prototypes
        .iter()
        .zip(&model.prototypes)
        .map(|(&p, t)| grad_or_zero(p, t))
        .collect();
    Ok((
        parts,
        FeatureGradients {
            backbone,
            prototypes,
        },
    ))
}

/// Joint objective over a batch together with its gradient with respect to
/// the backbone and prototypes. Per-image gradients are reduced in image
/// order, so the result does not depend on the number of worker threads.
pub fn joint_objective_gradient(
    images: &[Tensor],
    labels: &[usize],
    model: &ProtoPNet,
    cfg: &TrainConfig,
) -> Result<(ObjectiveParts, FeatureGradients)> {
    check_separation(model, cfg)?;
    if images.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let weight = 1.0 / images.len() as f64;
    let per: Vec<(ObjectiveParts, FeatureGradients)> = images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &y)| sample_gradient(model, x, y, cfg, weight))
        .collect::<Result<_>>()?;
    let mut grads = FeatureGradients::zeros_like(model);
    for (_, g) in &per {
        grads.accumulate(g);
    }
    let parts: Vec<ObjectiveParts> = per.iter().map(|(p, _)| *p).collect();
    Ok((average(&parts, cfg), grads))
}

/// Heavy-ball SGD state for one parameter list.
#[derive(Debug, Clone)]
pub(crate) struct Momentum {
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(params: &[&Tensor]) -> Self {
        Momentum {
            velocity: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64, momentum: f64) {
        for ((p, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Seed for the minibatch order of a given cycle.
fn stage_seed(cfg: &TrainConfig, cycle: usize) -> u64 {
    cfg.seed ^ (cycle as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Stage 1: minibatch SGD with momentum on the joint objective, updating the
/// backbone and prototypes while the last layer stays fixed.
pub fn stage1_sgd(model: &mut ProtoPNet, data: &Dataset, cfg: &TrainConfig) -> Result<StageReport> {
    stage1_cycle(model, data, cfg, 0)
}

fn stage1_cycle(
    model: &mut ProtoPNet,
    data: &Dataset,
    cfg: &TrainConfig,
    cycle: usize,
) -> Result<StageReport> {
    cfg.validate()?;
    check_separation(model, cfg)?;
    let start = Instant::now();
    let mut report = StageReport::new(StageKind::Joint, cycle);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg, cycle));
    let mut backbone_opt = Momentum::new(&model.backbone.params());
    let mut proto_opt = Momentum::new(&model.prototypes.iter().collect::<Vec<_>>());
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.stage1_epochs {
        order.shuffle(&mut rng);
        let mut per_batch = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<Tensor> = batch.iter().map(|&i| data.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (parts, grads) = joint_objective_gradient(&images, &labels, model, cfg)?;
            if !parts.total.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            backbone_opt.step(
                model.backbone.params_mut(),
                &grads.backbone,
                cfg.lr_backbone,
                cfg.momentum,
            );
            proto_opt.step(
                model.prototypes.iter_mut().collect(),
                &grads.prototypes,
                cfg.lr_prototypes,
                cfg.momentum,
            );
            per_batch.push((parts, batch.len()));
        }
        let n = data.len() as f64;
        let mut m = EpochMetrics {
            epoch: epoch + 1,
            crsent: 0.0,
            clst: 0.0,
            sep: 0.0,
            total: 0.0,
            accuracy: 0.0,
        };
        let mut correct = 0;
        for (p, len) in &per_batch {
            let w = *len as f64 / n;
            m.crsent += p.crsent * w;
            m.clst += p.clst * w;
            m.sep += p.sep * w;
            correct += p.correct;
        }
        m.total = m.crsent + cfg.lambda_cluster * m.clst + cfg.lambda_separation * m.sep;
        m.accuracy = correct as f64 / n;
        if !m.total.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        report.epochs.push(m);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Precomputed inputs of the last-layer problem.
struct LastLayerProblem<'a> {
    scores: Vec<Vec<f64>>,
    labels: &'a [usize],
    /// `true` where the weight connects a prototype to another class's logit.
    off_class: Vec<bool>,
    k: usize,
    m: usize,
    lambda: f64,
}

impl LastLayerProblem<'_> {
    fn smooth(&self, w: &[f64]) -> f64 {
        let n = self.scores.len() as f64;
        self.scores
            .iter()
            .zip(self.labels)
            .map(|(s, &y)| {
                let logits: Vec<f64> = w.chunks_exact(self.m).map(|row| dot(row, s)).collect();
                kernels::cross_entropy(&logits, y).expect("label checked")
            })
            .sum::<f64>()
            / n
    }

    fn smooth_grad(&self, w: &[f64]) -> Vec<f64> {
        let n = self.scores.len() as f64;
        let mut g = vec![0.0; self.k * self.m];
        for (s, &y) in self.scores.iter().zip(self.labels) {
            let logits: Vec<f64> = w.chunks_exact(self.m).map(|row| dot(row, s)).collect();
            let p = kernels::softmax(&logits);
            for k in 0..self.k {
                let coef = (p[k] - if k == y { 1.0 } else { 0.0 }) / n;
                for j in 0..self.m {
                    g[k * self.m + j] += coef * s[j];
                }
            }
        }
        g
    }

    fn penalty(&self, w: &[f64]) -> f64 {
        self.lambda
            * w.iter()
                .zip(&self.off_class)
                .filter(|(_, &off)| off)
                .map(|(v, _)| v.abs())
                .sum::<f64>()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        self.smooth(w) + self.penalty(w)
    }

    fn accuracy(&self, w: &[f64]) -> f64 {
        let correct = self
            .scores
            .iter()
            .zip(self.labels)
            .filter(|(s, &y)| {
                let logits: Vec<f64> = w.chunks_exact(self.m).map(|row| dot(row, s)).collect();
                kernels::argmax(&logits) == y
            })
            .count();
        correct as f64 / self.scores.len() as f64
    }

    /// Soft-thresholding of the penalised entries.
    fn prox(&self, v: &mut [f64], step: f64) {
        let t = step * self.lambda;
        for (x, &off) in v.iter_mut().zip(&self.off_class) {
            if off {
                *x = x.signum() * (x.abs() - t).max(0.0);
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stage 3: proximal gradient descent on `mean CrsEnt + λ·Σ|off-class w_h|`
/// with the backbone and prototypes frozen. Similarity scores are computed
/// once; each epoch is one full-batch step whose size is found by
/// backtracking, so the objective never increases.
pub fn stage3_convex_last_layer(
    model: &mut ProtoPNet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    stage3_cycle(model, data, cfg, 0)
}

fn stage3_cycle(
    model: &mut ProtoPNet,
    data: &Dataset,
    cfg: &TrainConfig,
    cycle: usize,
) -> Result<StageReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut report = StageReport::new(StageKind::LastLayer, cycle);
    if cfg.stage3_epochs == 0 {
        return Ok(report);
    }
    let outputs: Vec<(Vec<f64>, Vec<f64>)> = data
        .images
        .par_iter()
        .map(|x| {
            let z = model.latent(x)?;
            let pf = model.prototype_forward(&z)?;
            Ok((pf.scores, pf.min_distances))
        })
        .collect::<Result<_>>()?;
    let (k, m) = (model.num_classes(), model.num_prototypes());
    let mut clst = 0.0;
    let mut sep = 0.0;
    for ((_, mins), &y) in outputs.iter().zip(&data.labels) {
        let (own, off) = nearest_class_distances(mins, &model.allocation, y);
        clst += own;
        sep -= off.unwrap_or(0.0);
    }
    let n = data.len() as f64;
    clst /= n;
    sep /= n;

    let off_class = (0..k)
        .flat_map(|row| (0..m).map(move |j| (row, j)))
        .map(|(row, j)| model.allocation[j] != row)
        .collect();
    let problem = LastLayerProblem {
        scores: outputs.into_iter().map(|(s, _)| s).collect(),
        labels: &data.labels,
        off_class,
        k,
        m,
        lambda: cfg.lambda_l1,
    };

    let mut w = model.last_layer.data().to_vec();
    let mut step = cfg.lr_last_layer;
    for epoch in 0..cfg.stage3_epochs {
        let f0 = problem.smooth(&w);
        let g = problem.smooth_grad(&w);
        let mut candidate;
        loop {
            candidate = w
                .iter()
                .zip(&g)
                .map(|(wi, gi)| wi - step * gi)
                .collect::<Vec<_>>();
            problem.prox(&mut candidate, step);
            let diff: Vec<f64> = candidate.iter().zip(&w).map(|(a, b)| a - b).collect();
            let model_bound = f0 + dot(&g, &diff) + dot(&diff, &diff) / (2.0 * step);
            if problem.smooth(&candidate) <= model_bound || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        // sufficient decrease guarantees F(candidate) ≤ F(w); keep w if rounding disagrees
        if problem.objective(&candidate) <= problem.objective(&w) {
            w = candidate;
        }
        let total = problem.objective(&w);
        if !total.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        report.epochs.push(EpochMetrics {
            epoch: epoch + 1,
            crsent: problem.smooth(&w),
            clst,
            sep,
            total,
            accuracy: problem.accuracy(&w),
        });
        step *= 2.0;
    }
    model.last_layer = Tensor::new(vec![k, m], w)?;
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean absolute value of the off-class last-layer weights.
pub fn mean_abs_off_class(model: &ProtoPNet) -> f64 {
    let m = model.num_prototypes();
    let mut total = 0.0;
    let mut count = 0usize;
    for (idx, v) in model.last_layer.data().iter().enumerate() {
        if model.allocation[idx % m] != idx / m {
            total += v.abs();
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

/// Runs `cfg.cycles` rounds of stage 1 → projection → stage 3. The last layer
/// is reset to the 1 / −0.5 pattern before the first cycle only.
pub fn train_full(
    model: &mut ProtoPNet,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<Vec<StageReport>> {
    train_full_observed(model, data, cfg, |_, _| {})
}

/// [`train_full`] calling `observe` after every stage with that stage's report
/// and the model as the stage left it.
pub fn train_full_observed<F>(
    model: &mut ProtoPNet,
    data: &Dataset,
    cfg: &TrainConfig,
    mut observe: F,
) -> Result<Vec<StageReport>>
where
    F: FnMut(&StageReport, &ProtoPNet),
{
    cfg.validate()?;
    let counts = data.class_counts();
    if counts.len() < model.num_classes()
        || counts.iter().take(model.num_classes()).any(|&c| c == 0)
    {
        return Err(Error::InvalidDataset(
            "every class must be present in the training set".into(),
        ));
    }
    model.last_layer = init_last_layer(&model.allocation, model.num_classes());
    let mut reports = Vec::new();
    for cycle in 0..cfg.cycles {
        let joint = stage1_cycle(model, data, cfg, cycle)?;
        observe(&joint, model);
        reports.push(joint);
        let start = Instant::now();
        project_prototypes(model, data)?;
        let mut push = StageReport::new(StageKind::Projection, cycle);
        push.seconds = start.elapsed().as_secs_f64();
        observe(&push, model);
        reports.push(push);
        let last = stage3_cycle(model, data, cfg, cycle)?;
        observe(&last, model);
        reports.push(last);
    }
    Ok(reports)
}

/// Fraction of `data` that `model` classifies correctly.
pub fn accuracy(model: &ProtoPNet, data: &Dataset) -> Result<f64> {
    let correct: Vec<bool> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| Ok(model.predict(x)? == y))
        .collect::<Result<_>>()?;
    Ok(correct.iter().filter(|&&c| c).count() as f64 / data.len() as f64)
}

/// Latents of a whole dataset, for cost evaluation.
pub fn dataset_latents(model: &ProtoPNet, data: &Dataset) -> Result<Vec<Tensor>> {
    compute_latents(model, &data.images)
}
