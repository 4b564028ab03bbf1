//! Case-based explanations: activation heat maps, the image patch each
//! prototype responds to, the points table behind every logit, latent
//! nearest-neighbour queries, pruning and ensembling.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{resize_bilinear, Dataset};
use crate::error::{Error, Result};
use crate::kernels;
use crate::model::{prototype_activation, ModelConfig, ProtoPNet};
use crate::projection::compute_latents;
use crate::tensor::Tensor;

pub const DEFAULT_PERCENTILE: f64 = 95.0;

/// Pixel rectangle, `[top, bottom) × [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
    pub image: Option<usize>,
    pub percentile: f64,
}

impl PatchBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    pub fn contains_box(&self, other: &PatchBox) -> bool {
        self.top <= other.top
            && self.left <= other.left
            && other.bottom <= self.bottom
            && other.right <= self.right
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }
}

/// Bilinear upsampling of a 2-d map with corners aligned.
pub fn upsample_map(map: &Tensor, target_h: usize, target_w: usize) -> Result<Tensor> {
    if map.rank() != 2 {
        return Err(Error::InvalidShape(format!(
            "activation map must be 2-d, got {:?}",
            map.shape()
        )));
    }
    let (h, w) = (map.shape()[0], map.shape()[1]);
    if target_h < h || target_w < w {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {h}x{w} to the smaller {target_h}x{target_w}"
        )));
    }
    let as_image = map.clone().reshape(&[h, w, 1])?;
    resize_bilinear(&as_image, target_h, target_w).reshape(&[target_h, target_w])
}

/// Smallest rectangle enclosing every pixel whose value is at least the
/// value ranked `ceil(p/100 · N)` in ascending order.
pub fn extract_patch_box(map: &Tensor, percentile: f64) -> Result<PatchBox> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return Err(Error::InvalidArgument(format!(
            "percentile must lie in (0, 100), got {percentile}"
        )));
    }
    if map.rank() != 2 || map.numel() == 0 {
        return Err(Error::InvalidShape(
            "patch box needs a non-empty 2-d map".into(),
        ));
    }
    let w = map.shape()[1];
    let mut sorted = map.data().to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((percentile / 100.0 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for (i, &v) in map.data().iter().enumerate() {
        if v >= threshold {
            let (r, c) = (i / w, i % w);
            top = top.min(r);
            left = left.min(c);
            bottom = bottom.max(r + 1);
            right = right.max(c + 1);
        }
    }
    Ok(PatchBox {
        top,
        left,
        bottom,
        right,
        image: None,
        percentile,
    })
}

/// Similarity map of one prototype: the activation applied to every entry of
/// its distance map.
pub fn activation_map(distance_map: &Tensor, epsilon: f64) -> Tensor {
    Tensor::new(
        distance_map.shape().to_vec(),
        distance_map
            .data()
            .iter()
            .map(|&d| prototype_activation(d, epsilon))
            .collect(),
    )
    .expect("same shape")
}

fn upsampled_box(
    config: &ModelConfig,
    distance_map: &Tensor,
    percentile: f64,
) -> Result<(Tensor, PatchBox)> {
    let act = activation_map(distance_map, config.epsilon);
    let up = upsample_map(&act, config.input_height, config.input_width)?;
    let pbox = extract_patch_box(&up, percentile)?;
    Ok((up, pbox))
}

#[derive(Debug, Clone)]
pub struct ExplanationEntry {
    pub prototype: usize,
    pub class: usize,
    pub score: f64,
    /// Weight between this prototype and its own class logit.
    pub weight: f64,
    /// `score × weight`.
    pub points: f64,
    /// Activation map upsampled to the input size.
    pub activation: Tensor,
    pub patch: PatchBox,
}

#[derive(Debug, Clone)]
pub struct Explanation {
    pub image_id: Option<usize>,
    pub predicted: usize,
    pub logits: Vec<f64>,
    /// `points[k][j] = score_j × w_h[k, j]`.
    pub points: Vec<Vec<f64>>,
    /// `Σ_j points[k][j]` for every class.
    pub class_totals: Vec<f64>,
    pub entries: Vec<ExplanationEntry>,
}

impl Explanation {
    /// Text table: one row per prototype, then one total per class.
    pub fn to_report(&self) -> String {
        let mut s = String::new();
        match self.image_id {
            Some(id) => writeln!(s, "image={id}").unwrap(),
            None => writeln!(s, "image=-").unwrap(),
        }
        writeln!(s, "predicted={}", self.predicted).unwrap();
        writeln!(s, "proto_id class score weight points box=(t,l,b,r)").unwrap();
        for e in &self.entries {
            writeln!(
                s,
                "{} {} {:.12e} {:.12e} {:.12e} box=({},{},{},{})",
                e.prototype,
                e.class,
                e.score,
                e.weight,
                e.points,
                e.patch.top,
                e.patch.left,
                e.patch.bottom,
                e.patch.right
            )
            .unwrap();
        }
        for (k, t) in self.class_totals.iter().enumerate() {
            writeln!(s, "total class={k} points={t:.12e}").unwrap();
        }
        s
    }
}

pub fn explain_image(model: &ProtoPNet, x: &Tensor) -> Result<Explanation> {
    explain_with_percentile(model, x, DEFAULT_PERCENTILE)
}

pub fn explain_with_percentile(
    model: &ProtoPNet,
    x: &Tensor,
    percentile: f64,
) -> Result<Explanation> {
    let out = model.forward(x)?;
    let (k, m) = (model.num_classes(), model.num_prototypes());
    let w = model.last_layer.data();
    let points: Vec<Vec<f64>> = (0..k)
        .map(|row| (0..m).map(|j| out.scores[j] * w[row * m + j]).collect())
        .collect();
    // same summation order as the linear kernel, so totals equal the logits
    let class_totals = points.iter().map(|row| row.iter().sum()).collect();
    let entries = (0..m)
        .map(|j| {
            let class = model.allocation[j];
            let (activation, patch) =
                upsampled_box(&model.config, &out.distance_maps[j], percentile)?;
            let weight = w[class * m + j];
            Ok(ExplanationEntry {
                prototype: j,
                class,
                score: out.scores[j],
                weight,
                points: out.scores[j] * weight,
                activation,
                patch,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Explanation {
        image_id: None,
        predicted: out.predicted(),
        logits: out.logits,
        points,
        class_totals,
        entries,
    })
}

#[derive(Debug, Clone)]
pub struct PrototypeMatch {
    pub prototype: usize,
    pub class: usize,
    pub score: f64,
    pub patch: PatchBox,
}

/// Prototypes ranked by descending similarity to `x` (ties by index).
pub fn nearest_prototypes_to_image(
    model: &ProtoPNet,
    x: &Tensor,
    top_n: usize,
) -> Result<Vec<PrototypeMatch>> {
    let m = model.num_prototypes();
    if top_n > m {
        return Err(Error::InvalidArgument(format!(
            "asked for {top_n} prototypes but the model has {m}"
        )));
    }
    let out = model.forward(x)?;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| out.scores[b].total_cmp(&out.scores[a]));
    order
        .into_iter()
        .take(top_n)
        .map(|j| {
            let (_, patch) =
                upsampled_box(&model.config, &out.distance_maps[j], DEFAULT_PERCENTILE)?;
            Ok(PrototypeMatch {
                prototype: j,
                class: model.allocation[j],
                score: out.scores[j],
                patch,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMatch {
    pub image: usize,
    pub row: usize,
    pub col: usize,
    pub class: usize,
    pub distance: f64,
}

fn check_prototype(model: &ProtoPNet, j: usize) -> Result<()> {
    if j >= model.num_prototypes() {
        return Err(Error::InvalidArgument(format!(
            "prototype {j} out of range for {} prototypes",
            model.num_prototypes()
        )));
    }
    Ok(())
}

fn rank_patches(mut all: Vec<PatchMatch>, top_n: usize) -> Vec<PatchMatch> {
    all.sort_by(|a, b| {
        a.distance
            .total_cmp(&b.distance)
            .then((a.image, a.row, a.col).cmp(&(b.image, b.row, b.col)))
    });
    all.truncate(top_n);
    all
}

/// Latent patches of every image in `data`, ranked by ascending squared
/// distance to prototype `j`.
pub fn nearest_patches_to_prototype(
    model: &ProtoPNet,
    data: &Dataset,
    j: usize,
    top_n: usize,
) -> Result<Vec<PatchMatch>> {
    check_prototype(model, j)?;
    let latents = compute_latents(model, &data.images)?;
    nearest_patches_in_latents(model, &latents, &data.labels, j, top_n)
}

pub fn nearest_patches_in_latents(
    model: &ProtoPNet,
    latents: &[Tensor],
    labels: &[usize],
    j: usize,
    top_n: usize,
) -> Result<Vec<PatchMatch>> {
    check_prototype(model, j)?;
    let mut all = Vec::new();
    for (i, (z, &y)) in latents.iter().zip(labels).enumerate() {
        let map = kernels::l2_distance_map(z, &model.prototypes[j])?;
        let cols = map.shape()[1];
        for (idx, &d) in map.data().iter().enumerate() {
            all.push(PatchMatch {
                image: i,
                row: idx / cols,
                col: idx % cols,
                class: y,
                distance: d,
            });
        }
    }
    Ok(rank_patches(all, top_n))
}

#[derive(Debug, Clone)]
pub struct PruneEntry {
    pub prototype: usize,
    pub class: usize,
    /// The `Z` nearest training patches, at most one per image.
    pub neighbours: Vec<PatchMatch>,
    pub own_class: usize,
    /// Fewer than `τ` of the neighbours share the prototype's class.
    pub pruned: bool,
}

#[derive(Debug, Clone)]
pub struct PruneReport {
    pub entries: Vec<PruneEntry>,
    pub count_before: usize,
    pub count_after: usize,
    /// Classes whose prototypes were all marked for pruning; they are kept so
    /// that no class is left without prototypes.
    pub refused_classes: Vec<usize>,
}

impl PruneReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let nb: Vec<String> = e
                .neighbours
                .iter()
                .map(|n| format!("{}:{}:{}:{}", n.image, n.row, n.col, n.class))
                .collect();
            writeln!(
                s,
                "prototype={} class={} own_class={} pruned={} neighbours={}",
                e.prototype,
                e.class,
                e.own_class,
                e.pruned,
                nb.join(",")
            )
            .unwrap();
        }
        let refused: Vec<String> = self.refused_classes.iter().map(|k| k.to_string()).collect();
        writeln!(
            s,
            "before={} after={} refused_classes={}",
            self.count_before,
            self.count_after,
            refused.join(",")
        )
        .unwrap();
        s
    }
}

/// Drops prototypes whose `z` nearest training patches (nearest patch of each
/// image, at most one per image) contain fewer than `tau` patches of the
/// prototype's own class. Returns a new model; the input is not modified.
pub fn prune_prototypes(
    model: &ProtoPNet,
    data: &Dataset,
    z: usize,
    tau: usize,
) -> Result<(ProtoPNet, PruneReport)> {
    if tau == 0 || z < tau {
        return Err(Error::InvalidArgument(format!(
            "pruning needs z >= tau >= 1, got z={z} tau={tau}"
        )));
    }
    let latents = compute_latents(model, &data.images)?;
    let m = model.num_prototypes();
    let entries: Vec<PruneEntry> = (0..m)
        .into_par_iter()
        .map(|j| {
            let per_image = latents
                .iter()
                .zip(&data.labels)
                .enumerate()
                .map(|(i, (lat, &y))| {
                    let (d, row, col) =
                        crate::projection::nearest_patch(lat, &model.prototypes[j])?;
                    Ok(PatchMatch {
                        image: i,
                        row,
                        col,
                        class: y,
                        distance: d,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let neighbours = rank_patches(per_image, z);
            let class = model.allocation[j];
            let own_class = neighbours.iter().filter(|n| n.class == class).count();
            Ok(PruneEntry {
                prototype: j,
                class,
                neighbours,
                own_class,
                pruned: own_class < tau,
            })
        })
        .collect::<Result<_>>()?;

    let mut refused_classes = Vec::new();
    for k in 0..model.num_classes() {
        let of_class: Vec<&PruneEntry> = entries.iter().filter(|e| e.class == k).collect();
        if !of_class.is_empty() && of_class.iter().all(|e| e.pruned) {
            refused_classes.push(k);
        }
    }
    let keep: Vec<usize> = entries
        .iter()
        .filter(|e| !e.pruned || refused_classes.contains(&e.class))
        .map(|e| e.prototype)
        .collect();
    let pruned = retain_prototypes(model, &keep)?;
    let report = PruneReport {
        count_before: m,
        count_after: keep.len(),
        entries,
        refused_classes,
    };
    Ok((pruned, report))
}

/// A copy of `model` holding only the listed prototypes (and their last-layer
/// columns), in the given order.
pub fn retain_prototypes(model: &ProtoPNet, keep: &[usize]) -> Result<ProtoPNet> {
    let (k, m) = (model.num_classes(), model.num_prototypes());
    if keep.iter().any(|&j| j >= m) {
        return Err(Error::InvalidArgument(
            "prototype index out of range".into(),
        ));
    }
    let mut out = model.clone();
    out.prototypes = keep.iter().map(|&j| model.prototypes[j].clone()).collect();
    out.allocation = keep.iter().map(|&j| model.allocation[j]).collect();
    let w = model.last_layer.data();
    let cols: Vec<f64> = (0..k)
        .flat_map(|row| keep.iter().map(move |&j| w[row * m + j]))
        .collect();
    out.last_layer = Tensor::new(vec![k, keep.len()], cols)?;
    out.config.prototypes_per_class = (0..k)
        .map(|c| out.allocation.iter().filter(|&&a| a == c).count())
        .collect();
    out.projection = model
        .projection
        .iter()
        .filter_map(|r| {
            keep.iter().position(|&j| j == r.prototype).map(|new| {
                let mut r = r.clone();
                r.prototype = new;
                r
            })
        })
        .collect();
    Ok(out)
}

/// Element-wise sum of the logits of several models.
pub fn ensemble_logits(models: &[&ProtoPNet], x: &Tensor) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one model".into()))?;
    for m in models {
        if m.num_classes() != first.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "class count mismatch in ensemble: {} vs {}",
                m.num_classes(),
                first.num_classes()
            )));
        }
        if (m.config.input_height, m.config.input_width)
            != (first.config.input_height, first.config.input_width)
        {
            return Err(Error::InvalidArgument(
                "input size mismatch in ensemble".into(),
            ));
        }
    }
    let mut total = vec![0.0; first.num_classes()];
    for m in models {
        for (t, l) in total.iter_mut().zip(m.forward(x)?.logits) {
            *t += l;
        }
    }
    Ok(total)
}

pub fn ensemble_accuracy(models: &[&ProtoPNet], data: &Dataset) -> Result<f64> {
    let hits: Vec<bool> = data
        .images
        .par_iter()
        .zip(data.labels.par_iter())
        .map(|(x, &y)| Ok(kernels::argmax(&ensemble_logits(models, x)?) == y))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}

/// 256-entry colour table running blue → cyan → green → yellow → red.
pub fn color_table() -> Vec<[f64; 3]> {
    (0..256)
        .map(|i| {
            let t = i as f64 / 255.0;
            let r = (1.5 - (4.0 * t - 3.0).abs()).clamp(0.0, 1.0);
            let g = (1.5 - (4.0 * t - 2.0).abs()).clamp(0.0, 1.0);
            let b = (1.5 - (4.0 * t - 1.0).abs()).clamp(0.0, 1.0);
            [r, g, b]
        })
        .collect()
}

/// Overlay of a (min-max normalised) activation map on the input image,
/// blended half and half.
pub fn render_heatmap(image: &Tensor, activation: &Tensor) -> Result<Tensor> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if activation.shape() != [h, w] {
        return Err(Error::InvalidShape(format!(
            "activation {:?} does not match image {h}x{w}",
            activation.shape()
        )));
    }
    let lo = activation
        .data()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = activation
        .data()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let table = color_table();
    let mut out = Vec::with_capacity(h * w * 3);
    for (i, &a) in activation.data().iter().enumerate() {
        let t = if span > 0.0 { (a - lo) / span } else { 0.0 };
        let color = table[(t * 255.0).round() as usize];
        for ch in 0..3 {
            out.push(0.5 * image.data()[i * 3 + ch] + 0.5 * color[ch]);
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

pub fn crop_patch(image: &Tensor, pbox: &PatchBox) -> Result<Tensor> {
    image.window3(pbox.top, pbox.left, pbox.height(), pbox.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_must_be_open_interval() {
        let map = Tensor::zeros(&[2, 2]);
        assert!(extract_patch_box(&map, 0.0).is_err());
        assert!(extract_patch_box(&map, 100.0).is_err());
    }

    #[test]
    fn single_hot_pixel_gives_unit_box() {
        // ceil(0.95 · 16) = 16, so the threshold is the single largest value
        let mut map = Tensor::zeros(&[4, 4]);
        map.data_mut()[2 * 4 + 1] = 1.0;
        let b = extract_patch_box(&map, 95.0).unwrap();
        assert_eq!((b.top, b.left, b.bottom, b.right), (2, 1, 3, 2));
    }

    #[test]
    fn uniform_map_covers_everything() {
        let b = extract_patch_box(&Tensor::full(&[6, 9], 2.5), 95.0).unwrap();
        assert_eq!((b.top, b.left, b.bottom, b.right), (0, 0, 6, 9));
    }

    #[test]
    fn upsample_rejects_shrinking() {
        assert!(upsample_map(&Tensor::zeros(&[4, 4]), 3, 8).is_err());
    }

    #[test]
    fn color_table_runs_blue_to_red() {
        let t = color_table();
        assert_eq!(t.len(), 256);
        assert!(t[0][2] > 0.4 && t[0][0] == 0.0);
        assert!(t[255][0] > 0.4 && t[255][2] == 0.0);
    }

    #[test]
    fn heatmap_is_half_blend() {
        let img = Tensor::full(&[2, 2, 3], 1.0);
        let act = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        let out = render_heatmap(&img, &act).unwrap();
        let t = color_table();
        assert_eq!(
            out.data()[9..12],
            [
                0.5 + 0.5 * t[255][0],
                0.5 + 0.5 * t[255][1],
                0.5 + 0.5 * t[255][2]
            ]
        );
    }
}
