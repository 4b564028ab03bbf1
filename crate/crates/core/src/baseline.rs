//! Reference classifier for accuracy comparisons: the same backbone followed
//! by global max pooling and a bias-free linear head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::Tape;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{self, PoolMode};
use crate::model::{Backbone, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{EpochMetrics, Momentum, StageKind, StageReport, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineCnn {
    pub config: ModelConfig,
    pub backbone: Backbone,
    /// `K × D`.
    pub head: Tensor,
}

impl BaselineCnn {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let backbone = Backbone::init(&config.layer_specs(), &mut rng);
        let (k, d) = (config.num_classes, config.latent_depth);
        let bound = (6.0 / d as f64).sqrt();
        let head = Tensor::new(
            vec![k, d],
            (0..k * d).map(|_| rng.gen_range(-bound..bound)).collect(),
        )?;
        Ok(BaselineCnn {
            config,
            backbone,
            head,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let z = self.backbone.forward(x)?;
        let (pooled, _) = kernels::max_pool(&z, PoolMode::Global)?;
        Ok(kernels::linear(&pooled, &self.head)?.into_data())
    }

    pub fn predict(&self, x: &Tensor) -> Result<usize> {
        Ok(kernels::argmax(&self.logits(x)?))
    }

    pub fn accuracy(&self, data: &Dataset) -> Result<f64> {
        let hits: Vec<bool> = data
            .images
            .par_iter()
            .zip(data.labels.par_iter())
            .map(|(x, &y)| Ok(self.predict(x)? == y))
            .collect::<Result<_>>()?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
    }

    fn sample_gradient(
        &self,
        x: &Tensor,
        y: usize,
        weight: f64,
    ) -> Result<(f64, bool, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let params = self.backbone.register(&mut tape, true);
        let head = tape.leaf(self.head.clone(), true);
        let xv = tape.leaf(x.clone(), false);
        let z = self.backbone.forward_on_tape(&mut tape, &params, xv)?;
        let pooled = tape.max_pool(z, PoolMode::Global)?;
        let logits = tape.linear(pooled, head)?;
        let ce = tape.softmax_cross_entropy(logits, y)?;
        let loss = tape.weighted_sum(&[ce], &[weight])?;
        tape.backward(loss)?;
        let correct = kernels::argmax(tape.value(logits).data()) == y;
        let mut grads: Vec<Tensor> = params
            .iter()
            .zip(&self.backbone.layers)
            .flat_map(|(&(f, b), l)| {
                [
                    tape.grad(f)
                        .unwrap_or_else(|| Tensor::zeros(l.filters.shape())),
                    tape.grad(b)
                        .unwrap_or_else(|| Tensor::zeros(l.bias.shape())),
                ]
            })
            .collect();
        grads.push(
            tape.grad(head)
                .unwrap_or_else(|| Tensor::zeros(self.head.shape())),
        );
        Ok((tape.value(ce).item(), correct, grads))
    }

    /// Minibatch SGD with momentum on cross-entropy, using the backbone
    /// learning rate for every parameter.
    pub fn train(
        &mut self,
        data: &Dataset,
        cfg: &TrainConfig,
        epochs: usize,
    ) -> Result<StageReport> {
        cfg.validate()?;
        let start = std::time::Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xBA5E_11AE);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut params: Vec<&Tensor> = self.backbone.params();
        params.push(&self.head);
        let mut opt = Momentum::new(&params);
        let mut report = StageReport {
            kind: StageKind::Baseline,
            cycle: 0,
            epochs: Vec::new(),
            seconds: 0.0,
        };
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let (mut ce_sum, mut correct) = (0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let weight = 1.0 / batch.len() as f64;
                let per: Vec<(f64, bool, Vec<Tensor>)> = batch
                    .par_iter()
                    .map(|&i| self.sample_gradient(&data.images[i], data.labels[i], weight))
                    .collect::<Result<_>>()?;
                let mut total: Vec<Tensor> =
                    per[0].2.iter().map(|t| Tensor::zeros(t.shape())).collect();
                for (ce, ok, g) in &per {
                    ce_sum += ce;
                    correct += usize::from(*ok);
                    for (acc, gi) in total.iter_mut().zip(g) {
                        for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                            *a += b;
                        }
                    }
                }
                let mut targets = self.backbone.params_mut();
                targets.push(&mut self.head);
                opt.step(targets, &total, cfg.lr_backbone, cfg.momentum);
            }
            let n = data.len() as f64;
            let crsent = ce_sum / n;
            if !crsent.is_finite() {
                return Err(Error::TrainingDiverged { epoch: epoch + 1 });
            }
            report.epochs.push(EpochMetrics {
                epoch: epoch + 1,
                crsent,
                clst: 0.0,
                sep: 0.0,
                total: crsent,
                accuracy: correct as f64 / n,
            });
        }
        report.seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}
