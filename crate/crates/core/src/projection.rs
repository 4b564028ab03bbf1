//! Prototype projection ("push"): every prototype is replaced by the nearest
//! latent patch taken from a training image of its own class.

use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ProtoPNet;
use crate::tensor::Tensor;

/// Where a prototype moved during projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionRecord {
    pub prototype: usize,
    pub class: usize,
    /// Value before projection.
    pub before: Tensor,
    /// Value after projection; equals the latent patch at `(row, col)` of
    /// training image `image`.
    pub after: Tensor,
    pub image: usize,
    pub row: usize,
    pub col: usize,
    /// `‖after − before‖₂`.
    pub move_distance: f64,
}

/// Latents `f(x)` of every image, in dataset order.
pub fn compute_latents(model: &ProtoPNet, images: &[Tensor]) -> Result<Vec<Tensor>> {
    images.par_iter().map(|x| model.latent(x)).collect()
}

/// Nearest patch of one latent to one prototype: `(squared distance, row, col)`,
/// first in row-major order among ties.
pub fn nearest_patch(z: &Tensor, p: &Tensor) -> Result<(f64, usize, usize)> {
    let map = crate::kernels::l2_distance_map(z, p)?;
    let cols = map.shape()[1];
    let i = crate::kernels::argmin(map.data());
    Ok((map.data()[i], i / cols, i % cols))
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    dist: f64,
    image: usize,
    row: usize,
    col: usize,
}

/// Projects every prototype onto its nearest same-class latent training patch.
/// Ties resolve to the smallest `(image index, row, column)`.
pub fn project_prototypes(model: &mut ProtoPNet, train: &Dataset) -> Result<Vec<ProjectionRecord>> {
    let latents = compute_latents(model, &train.images)?;
    project_with_latents(model, &latents, &train.labels)
}

/// Projection against precomputed latents.
pub fn project_with_latents(
    model: &mut ProtoPNet,
    latents: &[Tensor],
    labels: &[usize],
) -> Result<Vec<ProjectionRecord>> {
    let m = model.num_prototypes();
    for k in 0..model.num_classes() {
        if model.allocation.contains(&k) && !labels.contains(&k) {
            return Err(Error::InvalidDataset(format!(
                "class {k} has prototypes but no training images"
            )));
        }
    }
    let (h1, w1) = (model.config.proto_height, model.config.proto_width);

    // per-image best patch for every prototype of that image's class
    let per_image: Vec<Vec<Option<Candidate>>> = latents
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (z, &y))| {
            (0..m)
                .map(|j| {
                    if model.allocation[j] != y {
                        return Ok(None);
                    }
                    let (dist, row, col) = nearest_patch(z, &model.prototypes[j])?;
                    Ok(Some(Candidate {
                        dist,
                        image: i,
                        row,
                        col,
                    }))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(m);
    for j in 0..m {
        let mut best: Option<Candidate> = None;
        for cands in &per_image {
            if let Some(c) = cands[j] {
                if best.is_none_or(|b| c.dist < b.dist) {
                    best = Some(c);
                }
            }
        }
        let best = best.expect("class has at least one image");
        let before = model.prototypes[j].clone();
        let after = latents[best.image].window3(best.row, best.col, h1, w1)?;
        let move_distance = before.squared_distance(&after).sqrt();
        model.prototypes[j] = after.clone();
        records.push(ProjectionRecord {
            prototype: j,
            class: model.allocation[j],
            before,
            after,
            image: best.image,
            row: best.row,
            col: best.col,
            move_distance,
        });
    }
    model.projection = records.clone();
    Ok(records)
}
