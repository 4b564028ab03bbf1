//! Acceptance run. Every criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any of them fails. Criteria run one after the
//! other so that their time budgets are not shared with other tests.

use std::path::Path;
use std::time::{Duration, Instant};

use protopart::baseline::BaselineCnn;
use protopart::cli::run_cli_with;
use protopart::config::RunConfig;
use protopart::data::{Dataset, Split};
use protopart::explain::{ensemble_accuracy, ensemble_logits, explain_image};
use protopart::model::{ConvBlock, ModelConfig, DEFAULT_EPSILON};
use protopart::synth::shapes_dataset;
use protopart::theorem::synthetic_instance;
use protopart::training::{
    accuracy, joint_objective, joint_objective_gradient, mean_abs_off_class, train_full,
    train_full_observed, StageKind, TrainConfig,
};
use protopart::{
    init_last_layer, load_checkpoint, project_prototypes, save_checkpoint, ProtoPNet, Tape, Tensor,
    Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed <= Duration::from_secs(secs)
}

// ---------------------------------------------------------------------------
// 1. gradients

const FD_STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

/// Central differences of `f` at every coordinate of `at`.
fn central_differences(f: &dyn Fn(&Tensor) -> f64, at: &Tensor) -> Vec<f64> {
    let mut probe = at.clone();
    (0..at.numel())
        .map(|i| {
            let x = at.data()[i];
            probe.data_mut()[i] = x + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = x - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = x;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn worst_relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Gradient of a scalar graph over `inputs`, by tape and by differences.
fn op_error(inputs: &[Tensor], build: &Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(*v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let f = |probe: &Tensor| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(k, x)| t.leaf(if k == i { probe.clone() } else { x.clone() }, false))
                .collect();
            let l = build(&mut t, &vs);
            t.value(l).item()
        };
        worst = worst.max(worst_relative(
            analytic.data(),
            &central_differences(&f, &inputs[i]),
        ));
    }
    worst
}

fn op_errors(r: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let (h, w, cin, cout) = (
        r.gen_range(3..=6),
        r.gen_range(3..=6),
        r.gen_range(1..=3),
        r.gen_range(1..=4),
    );
    let x = uniform(r, &[h, w, cin], -1.0, 1.0);
    let f = uniform(r, &[3, 3, cin, cout], -1.0, 1.0);
    let probe = uniform(r, &[h, w, cout, 1], -1.0, 1.0);
    out.push((
        "conv2d",
        op_error(&[x, f], &move |t, v| {
            let c = t.conv2d(v[0], v[1], 1, 1).unwrap();
            let s = t.sigmoid(c);
            let p = t.leaf(probe.clone(), false);
            let y = t.conv2d(s, p, 1, 0).unwrap();
            t.sum(y)
        }),
    ));

    let (m, k) = (r.gen_range(2..=6), r.gen_range(2..=4));
    let label = r.gen_range(0..k);
    let x = uniform(r, &[m], -1.0, 1.0);
    let wts = uniform(r, &[k, m], -1.0, 1.0);
    out.push((
        "linear+crsent",
        op_error(&[x, wts], &move |t, v| {
            let l = t.linear(v[0], v[1]).unwrap();
            t.softmax_cross_entropy(l, label).unwrap()
        }),
    ));

    let (h, w, d) = (r.gen_range(2..=6), r.gen_range(2..=6), r.gen_range(1..=4));
    let z = uniform(r, &[h, w, d], 0.0, 1.0);
    let p = uniform(r, &[1, 1, d], 0.0, 1.0);
    let mix = uniform(r, &[1, h * w], -1.0, 1.0);
    out.push((
        "l2_distance_map",
        op_error(&[z, p], &move |t, v| {
            let map = t.l2_distance_map(v[0], v[1]).unwrap();
            let c = t.leaf(mix.clone(), false);
            let y = t.linear(map, c).unwrap();
            t.sum(y)
        }),
    ));

    let m = r.gen_range(2..=6);
    let dist = uniform(r, &[m], 0.05, 2.0);
    let mix = uniform(r, &[1, m], -1.0, 1.0);
    out.push((
        "prototype_activation",
        op_error(&[dist], &move |t, v| {
            let a = t.prototype_activation(v[0], DEFAULT_EPSILON);
            let c = t.leaf(mix.clone(), false);
            let y = t.linear(a, c).unwrap();
            t.sum(y)
        }),
    ));
    out
}

/// A model whose latent is at most 6×6×4 with at most 6 prototypes, with
/// biases moved off the ReLU kink.
fn toy_model(r: &mut ChaCha8Rng) -> ProtoPNet {
    let side = r.gen_range(4..=6);
    let k = r.gen_range(2..=3);
    let size = r.gen_range(1..=2);
    let config = ModelConfig {
        input_height: side,
        input_width: side,
        input_channels: 3,
        blocks: vec![ConvBlock::new(4, 3, None)],
        latent_depth: 4,
        proto_height: size,
        proto_width: size,
        num_classes: k,
        prototypes_per_class: vec![6 / k; k],
        epsilon: DEFAULT_EPSILON,
    };
    let mut model = ProtoPNet::build(config, r.gen()).unwrap();
    for layer in &mut model.backbone.layers {
        layer.bias = uniform(r, layer.bias.shape(), -0.1, 0.1);
    }
    model
}

/// The full stage-1 objective and its two cost terms in isolation.
fn joint_errors(r: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let model = toy_model(r);
    let side = model.config.input_height;
    let images: Vec<Tensor> = (0..3)
        .map(|_| uniform(r, &[side, side, 3], 0.0, 1.0))
        .collect();
    let labels: Vec<usize> = (0..3).map(|i| i % model.num_classes()).collect();
    let variants = [
        ("joint", TrainConfig::default()),
        (
            "joint+clst",
            TrainConfig {
                lambda_cluster: 1.0,
                lambda_separation: 0.0,
                ..TrainConfig::default()
            },
        ),
        (
            "joint+sep",
            TrainConfig {
                lambda_cluster: 0.0,
                lambda_separation: 1.0,
                ..TrainConfig::default()
            },
        ),
    ];
    let n_backbone = model.backbone.params().len();
    variants
        .into_iter()
        .map(|(name, cfg)| {
            let (_, grads) = joint_objective_gradient(&images, &labels, &model, &cfg).unwrap();
            let mut worst = 0.0f64;
            for (i, g) in grads.backbone.iter().chain(&grads.prototypes).enumerate() {
                let at = if i < n_backbone {
                    model.backbone.params()[i].clone()
                } else {
                    model.prototypes[i - n_backbone].clone()
                };
                let f = |probe: &Tensor| {
                    let mut m = model.clone();
                    if i < n_backbone {
                        *m.backbone.params_mut()[i] = probe.clone();
                    } else {
                        m.prototypes[i - n_backbone] = probe.clone();
                    }
                    joint_objective(&images, &labels, &m, &cfg).unwrap().total
                };
                worst = worst.max(worst_relative(g.data(), &central_differences(&f, &at)));
            }
            (name, worst)
        })
        .collect()
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let instances = 20;
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for i in 0..instances {
        let mut r = rng(1000 + i);
        for (name, e) in op_errors(&mut r).into_iter().chain(joint_errors(&mut r)) {
            match worst.iter_mut().find(|(n, _)| *n == name) {
                Some(slot) => slot.1 = slot.1.max(e),
                None => worst.push((name, e)),
            }
        }
    }
    let elapsed = start.elapsed();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(n, e)| format!("{n}={e:.2e}")).collect();
    Outcome {
        pass: max < 1e-4 && within(elapsed, 60),
        detail: format!(
            "instances={instances} max_rel_error={max:.2e} ({}) time={:.1}s",
            parts.join(" "),
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------------------
// 2. projection

fn window_distance(z: &Tensor, p: &Tensor, r: usize, c: usize) -> f64 {
    let (ph, pw, d) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let mut s = 0.0;
    for i in 0..ph {
        for j in 0..pw {
            for k in 0..d {
                let diff = z.at3(r + i, c + j, k) - p.at3(i, j, k);
                s += diff * diff;
            }
        }
    }
    s
}

fn projection_trial(seed: u64) -> bool {
    let mut r = rng(seed);
    let k = r.gen_range(2..=3);
    let size = r.gen_range(1..=2);
    let config = ModelConfig {
        input_height: 8,
        input_width: 8,
        input_channels: 3,
        blocks: vec![ConvBlock::new(4, 3, Some((2, 2)))],
        latent_depth: 4,
        proto_height: size,
        proto_width: size,
        num_classes: k,
        prototypes_per_class: (0..k).map(|_| r.gen_range(1..=3)).collect(),
        epsilon: DEFAULT_EPSILON,
    };
    let mut model = ProtoPNet::build(config, r.gen()).unwrap();
    let n = r.gen_range(k..=20);
    let images: Vec<Tensor> = (0..n)
        .map(|_| uniform(&mut r, &[8, 8, 3], 0.0, 1.0))
        .collect();
    let mut labels: Vec<usize> = (0..n).map(|_| r.gen_range(0..k)).collect();
    labels[..k].iter_mut().enumerate().for_each(|(i, l)| *l = i);
    let data = Dataset::new(
        images,
        labels,
        (0..k).map(|c| c.to_string()).collect(),
        Split::Train,
    )
    .unwrap();

    let latents: Vec<Tensor> = data
        .images
        .iter()
        .map(|x| model.latent(x).unwrap())
        .collect();
    let before = model.prototypes.clone();
    let records = project_prototypes(&mut model, &data).unwrap();
    let (lh, lw) = (latents[0].shape()[0], latents[0].shape()[1]);
    for (j, p) in before.iter().enumerate() {
        let class = model.allocation[j];
        let mut best: Option<(f64, usize, usize, usize)> = None;
        for (i, z) in latents
            .iter()
            .enumerate()
            .filter(|(i, _)| data.labels[*i] == class)
        {
            for row in 0..=lh - size {
                for col in 0..=lw - size {
                    let d = window_distance(z, p, row, col);
                    if best.is_none_or(|b| d < b.0) {
                        best = Some((d, i, row, col));
                    }
                }
            }
        }
        let (d, i, row, col) = best.unwrap();
        let rec = &records[j];
        let same_patch = (rec.image, rec.row, rec.col) == (i, row, col);
        let moved_right =
            model.prototypes[j].bit_eq(&latents[i].window3(row, col, size, size).unwrap());
        if !(same_patch && moved_right && (rec.move_distance.powi(2) - d).abs() <= 1e-10) {
            return false;
        }
    }
    true
}

fn projection_oracle() -> Outcome {
    let start = Instant::now();
    let passed = (0..100).filter(|&s| projection_trial(5000 + s)).count();
    let elapsed = start.elapsed();
    Outcome {
        pass: passed == 100 && within(elapsed, 60),
        detail: format!(
            "trials=100 matched={passed} time={:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------------------
// 3. projection bound

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Pixel vectors of an `h×w×d` latent.
fn pixels(z: &Tensor) -> Vec<Vec<f64>> {
    z.data().chunks(z.shape()[2]).map(|c| c.to_vec()).collect()
}

fn theorem_instances() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut bound_bad, mut pred_bad, mut margin_cases, mut unmet) = (0, 0, 0, 0, 0);
    let mut seed = 9000;
    for delta in [0.1, 0.3, 0.5, 0.7, 0.9] {
        for _ in 0..12 {
            seed += 1;
            let mut r = rng(seed);
            let k = r.gen_range(2..=4);
            let per = r.gen_range(1..=3);
            let inst =
                synthetic_instance(&mut r, delta, k, per, (3, 3), 4, DEFAULT_EPSILON).unwrap();
            let eps = inst.epsilon;
            let patches = pixels(&inst.latent);
            let theta = ((1.0 + delta).sqrt() - 1.0).min(1.0 - 1.0 / (2.0 - delta).sqrt());
            let delta_max = per as f64 * ((1.0 + delta) * (2.0 - delta)).ln();
            let sq = |a: &[f64], b: &[f64]| diff(a, b).iter().map(|v| v * v).sum::<f64>();

            let mut ok = inst.allocation.iter().filter(|&&c| c == 0).count() == per
                && (0..k).all(|c| inst.allocation.iter().filter(|&&a| a == c).count() == per);
            let mut before = vec![0.0; k];
            let mut after = vec![0.0; k];
            for (j, (b, a)) in inst.before.iter().zip(&inst.after).enumerate() {
                let (b, a) = (b.data(), a.data());
                let nearest = (0..patches.len())
                    .min_by(|&x, &y| sq(&patches[x], b).total_cmp(&sq(&patches[y], b)))
                    .unwrap();
                let z = &patches[nearest];
                ok &= patches.iter().all(|q| sq(z, a) <= sq(q, a));
                let moved = norm(&diff(a, b));
                let gap = norm(&diff(z, b));
                ok &= if inst.allocation[j] == inst.label {
                    moved <= ((1.0 + delta).sqrt() - 1.0) * gap && gap <= (1.0 - delta).sqrt()
                } else {
                    moved <= theta * gap - eps.sqrt()
                };
                let sim = |p: &[f64]| {
                    patches
                        .iter()
                        .map(|q| ((sq(q, p) + 1.0) / (sq(q, p) + eps)).ln())
                        .fold(f64::NEG_INFINITY, f64::max)
                };
                before[inst.allocation[j]] += sim(b);
                after[inst.allocation[j]] += sim(a);
            }
            if !ok {
                unmet += 1;
                continue;
            }
            checked += 1;
            for c in 0..k {
                let change = after[c] - before[c];
                let violated = if c == inst.label {
                    -change > delta_max + 1e-9
                } else {
                    change > delta_max + 1e-9
                };
                bound_bad += usize::from(violated);
            }
            let top = |l: &[f64]| {
                (0..k)
                    .max_by(|&x, &y| l[x].total_cmp(&l[y]).then(y.cmp(&x)))
                    .unwrap()
            };
            let mut sorted = before.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            if sorted[0] - sorted[1] >= 2.0 * delta_max {
                margin_cases += 1;
                pred_bad += usize::from(top(&before) != top(&after));
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: checked >= 50 && unmet == 0 && bound_bad == 0 && pred_bad == 0 && within(elapsed, 120),
        detail: format!(
            "instances={checked} assumptions_unmet={unmet} bound_violations={bound_bad} margin_cases={margin_cases} prediction_violations={pred_bad} time={:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------------------
// shared desk-scale runs (4, 5, 7, 8)

struct DeskRuns {
    train: Dataset,
    test: Dataset,
    models: Vec<ProtoPNet>,
    proto_accuracy: Vec<f64>,
    baseline_accuracy: f64,
    seconds: f64,
    stage_ok: bool,
    stage_notes: Vec<String>,
}

const SEEDS: [u64; 3] = [1, 2, 3];

fn desk_runs() -> DeskRuns {
    let start = Instant::now();
    let train = shapes_dataset(32, 200, 1, Split::Train);
    let test = shapes_dataset(32, 100, 2, Split::Test);
    let config = ModelConfig::desk(5, 3);
    let mut models = Vec::new();
    let mut stage_ok = true;
    let mut stage_notes = Vec::new();
    let mut seconds = 0.0;
    for (i, &seed) in SEEDS.iter().enumerate() {
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut model = ProtoPNet::build(config.clone(), seed).unwrap();
        let mut previous = model.clone();
        previous.last_layer = init_last_layer(&model.allocation, model.num_classes());
        let t0 = Instant::now();
        train_full_observed(&mut model, &train, &cfg, |report, now| {
            let ok = match report.kind {
                StageKind::Joint => now.last_layer.bit_eq(&previous.last_layer),
                StageKind::Projection => {
                    now.backbone.bit_eq(&previous.backbone)
                        && now.last_layer.bit_eq(&previous.last_layer)
                }
                StageKind::LastLayer => {
                    now.backbone.bit_eq(&previous.backbone) && now.prototypes_bit_eq(&previous)
                }
                StageKind::Baseline => true,
            };
            if !ok {
                stage_notes.push(format!(
                    "seed {seed} cycle {} {} changed a frozen tensor",
                    report.cycle + 1,
                    report.kind.name()
                ));
            }
            stage_ok &= ok;
            previous = now.clone();
        })
        .unwrap();
        if i == 0 {
            seconds = t0.elapsed().as_secs_f64();
        }
        models.push(model);
    }
    let proto_accuracy = models.iter().map(|m| accuracy(m, &test).unwrap()).collect();
    let cfg = TrainConfig {
        seed: SEEDS[0],
        ..TrainConfig::default()
    };
    let mut baseline = BaselineCnn::build(config, cfg.seed).unwrap();
    let t0 = Instant::now();
    baseline
        .train(&train, &cfg, cfg.stage1_epochs * cfg.cycles)
        .unwrap();
    seconds += t0.elapsed().as_secs_f64();
    let baseline_accuracy = baseline.accuracy(&test).unwrap();
    eprintln!(
        "# desk-scale training: {:.1}s total",
        start.elapsed().as_secs_f64()
    );
    DeskRuns {
        train,
        test,
        models,
        proto_accuracy,
        baseline_accuracy,
        seconds,
        stage_ok,
        stage_notes,
    }
}

fn desk_accuracy(runs: &DeskRuns) -> Outcome {
    let (p, b) = (runs.proto_accuracy[0], runs.baseline_accuracy);
    Outcome {
        pass: p >= 0.90 && (p - b).abs() <= 0.05 && runs.seconds <= 15.0 * 60.0,
        detail: format!(
            "protopnet={p:.4} baseline={b:.4} gap={:.4} n_train={} n_test={} time={:.1}s",
            (p - b).abs(),
            runs.train.len(),
            runs.test.len(),
            runs.seconds
        ),
    }
}

fn stage_separation(runs: &DeskRuns) -> Outcome {
    let off = mean_abs_off_class(&runs.models[0]);
    let mut detail = format!(
        "frozen_tensors_unchanged={} mean_abs_off_class={off:.4}",
        runs.stage_ok
    );
    if !runs.stage_notes.is_empty() {
        detail.push_str(&format!(" ({})", runs.stage_notes.join("; ")));
    }
    Outcome {
        pass: runs.stage_ok && off < 0.5,
        detail,
    }
}

fn ensemble(runs: &DeskRuns) -> Outcome {
    let refs: Vec<&ProtoPNet> = runs.models.iter().collect();
    let mut exact = true;
    for x in &runs.test.images {
        let mut sum = vec![0.0; 5];
        for m in &refs {
            for (s, l) in sum.iter_mut().zip(m.forward(x).unwrap().logits) {
                *s += l;
            }
        }
        let got = ensemble_logits(&refs, x).unwrap();
        exact &= got
            .iter()
            .zip(&sum)
            .all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let combined = ensemble_accuracy(&refs, &runs.test).unwrap();
    let mean = runs.proto_accuracy.iter().sum::<f64>() / runs.proto_accuracy.len() as f64;
    let singles: Vec<String> = runs
        .proto_accuracy
        .iter()
        .map(|a| format!("{a:.4}"))
        .collect();
    Outcome {
        pass: exact && combined >= mean,
        detail: format!(
            "sums_exact={exact} singles=[{}] mean={mean:.4} ensemble={combined:.4}",
            singles.join(",")
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. explanations

fn explanation_pairs() -> Outcome {
    let start = Instant::now();
    let (mut totals_ok, mut boxes_ok, mut worst) = (0, 0, 0.0f64);
    for s in 0..100u64 {
        let mut r = rng(7000 + s);
        let k = r.gen_range(2..=4);
        let side = [8, 12, 16][r.gen_range(0..3)];
        let config = ModelConfig {
            input_height: side,
            input_width: side,
            input_channels: 3,
            blocks: vec![ConvBlock::new(6, 3, Some((2, 2)))],
            latent_depth: 6,
            proto_height: r.gen_range(1..=2),
            proto_width: r.gen_range(1..=2),
            num_classes: k,
            prototypes_per_class: vec![r.gen_range(1..=3); k],
            epsilon: DEFAULT_EPSILON,
        };
        let mut model = ProtoPNet::build(config, r.gen()).unwrap();
        let m = model.num_prototypes();
        model.last_layer = uniform(&mut r, &[k, m], -1.5, 1.5);
        let x = uniform(&mut r, &[side, side, 3], 0.0, 1.0);
        let ex = explain_image(&model, &x).unwrap();
        let logits = model.forward(&x).unwrap().logits;
        let err = ex
            .class_totals
            .iter()
            .zip(&logits)
            .map(|(t, l)| (t - l).abs())
            .fold(0.0, f64::max);
        worst = worst.max(err);
        totals_ok += usize::from(err <= 1e-9 && ex.class_totals.len() == k);
        let all_boxes = ex.entries.iter().all(|e| {
            let a = e.activation.data();
            let best = (0..a.len()).fold(0, |b, i| if a[i] > a[b] { i } else { b });
            e.patch.contains(best / side, best % side)
        });
        boxes_ok += usize::from(all_boxes);
    }
    let elapsed = start.elapsed();
    Outcome {
        pass: totals_ok == 100 && boxes_ok == 100,
        detail: format!(
            "pairs=100 totals_match={totals_ok} max_abs_diff={worst:.1e} boxes_contain_argmax={boxes_ok} time={:.1}s",
            elapsed.as_secs_f64()
        ),
    }
}

// ---------------------------------------------------------------------------
// 8. round trip and determinism

fn cli_train(data: &Path, cfg: &Path, out: &Path, workers: &str) -> bool {
    let argv = [
        "protopart",
        "--workers",
        workers,
        "train",
        "--data",
        data.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ];
    let (mut o, mut e) = (Vec::new(), Vec::new());
    run_cli_with(argv.iter().map(|s| s.to_string()).collect(), &mut o, &mut e) == 0
}

fn round_trip(runs: &DeskRuns) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("desk.ppnx");
    save_checkpoint(&runs.models[0], &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let mut r = rng(8);
    let probes: Vec<Tensor> = (0..20)
        .map(|_| uniform(&mut r, &[32, 32, 3], 0.0, 1.0))
        .chain(runs.test.images.iter().take(20).cloned())
        .collect();
    let logits_exact = probes.iter().all(|x| {
        let a = runs.models[0].forward(x).unwrap().logits;
        let b = back.forward(x).unwrap().logits;
        a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits())
    });

    let small = shapes_dataset(32, 12, 4, Split::Train);
    let data = dir.path().join("small.ppds");
    protopart::data::write_ppds(&small, &data).unwrap();
    let mut cfg = RunConfig::defaults(5);
    cfg.model = ModelConfig::desk(5, 3);
    cfg.train = TrainConfig {
        stage1_epochs: 2,
        stage3_epochs: 4,
        cycles: 2,
        seed: 11,
        ..TrainConfig::default()
    };
    let cfg_path = dir.path().join("run.cfg");
    std::fs::write(&cfg_path, cfg.to_text()).unwrap();
    let (a, b) = (dir.path().join("a.ppnx"), dir.path().join("b.ppnx"));
    let ran = cli_train(&data, &cfg_path, &a, "1") && cli_train(&data, &cfg_path, &b, "2");
    let identical = ran && std::fs::read(&a).unwrap() == std::fs::read(&b).unwrap();

    // the same holds for the library entry point
    let mut m1 = ProtoPNet::build(cfg.model.clone(), 11).unwrap();
    let mut m2 = ProtoPNet::build(cfg.model.clone(), 11).unwrap();
    train_full(&mut m1, &small, &cfg.train).unwrap();
    train_full(&mut m2, &small, &cfg.train).unwrap();
    let library_identical = protopart::checkpoint::encode_checkpoint(&m1)
        == protopart::checkpoint::encode_checkpoint(&m2);
    Outcome {
        pass: logits_exact && identical && library_identical,
        detail: format!(
            "probe_logits_bit_exact={logits_exact} cli_train_runs_identical={identical} library_runs_identical={library_identical}"
        ),
    }
}

fn report(n: usize, name: &str, o: &Outcome) -> bool {
    println!(
        "{} criterion {n} {name}: {}",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    o.pass
}

fn main() {
    // `cargo test` passes harness flags such as `--nocapture`; a name filter
    // that does not mention acceptance skips the run.
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let mut all = true;
    all &= report(1, "gradient fidelity", &gradient_fidelity());
    all &= report(2, "projection oracle", &projection_oracle());
    all &= report(3, "projection bound", &theorem_instances());
    let runs = desk_runs();
    all &= report(4, "desk-scale accuracy", &desk_accuracy(&runs));
    all &= report(5, "stage separation", &stage_separation(&runs));
    all &= report(6, "explanation faithfulness", &explanation_pairs());
    all &= report(7, "ensemble semantics", &ensemble(&runs));
    all &= report(8, "round trip and determinism", &round_trip(&runs));
    if !all {
        std::process::exit(1);
    }
}
