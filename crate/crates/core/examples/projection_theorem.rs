//! The projection stability bound, two ways: on constructed latent instances
//! that meet every hypothesis, and on a real model before and after its
//! prototypes are pushed onto training patches.
//!
//! ```bash
//! cargo run --release -p protopart --example projection_theorem
//! ```

use protopart::data::Split;
use protopart::model::{ConvBlock, ModelConfig, DEFAULT_EPSILON};
use protopart::synth::blobs_dataset;
use protopart::theorem::{synthetic_instance, verify_latent, Verdict};
use protopart::training::{stage1_sgd, TrainConfig};
use protopart::{project_prototypes, theorem_constants, verify_projection_theorem, ProtoPNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> protopart::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for delta in [0.1, 0.3, 0.5, 0.7, 0.9] {
        let (theta, delta_max) = theorem_constants(delta, 2)?;
        let mut worst = 0.0f64;
        for _ in 0..20 {
            let inst = synthetic_instance(&mut rng, delta, 3, 2, (4, 4), 8, DEFAULT_EPSILON)?;
            let r = verify_latent(&inst, delta)?;
            assert_eq!(r.verdict, Verdict::BoundHolds);
            worst = worst.max(r.logit_change.iter().map(|c| c.abs()).fold(0.0, f64::max));
        }
        println!("delta={delta} theta={theta:.4} delta_max={delta_max:.4} largest observed change={worst:.4}");
    }

    // A trained model rarely meets the hypotheses (its last layer has negative
    // off-class weights and prototypes move far), so most verdicts read
    // "assumptions unmet". The logit changes are still reported.
    let train = blobs_dataset(16, 30, 5, Split::Train);
    let config = ModelConfig {
        input_height: 16,
        input_width: 16,
        input_channels: 3,
        blocks: vec![
            ConvBlock::new(8, 3, Some((2, 2))),
            ConvBlock::new(16, 3, Some((2, 2))),
        ],
        latent_depth: 16,
        proto_height: 1,
        proto_width: 1,
        num_classes: 2,
        prototypes_per_class: vec![2, 2],
        epsilon: DEFAULT_EPSILON,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        lr_backbone: 0.05,
        lr_prototypes: 0.01,
        stage1_epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut before = ProtoPNet::build(config, cfg.seed)?;
    stage1_sgd(&mut before, &train, &cfg)?;
    let mut after = before.clone();
    project_prototypes(&mut after, &train)?;
    for (i, x) in train.images.iter().take(5).enumerate() {
        let r = verify_projection_theorem(&before, &after, x, train.labels[i], 0.5)?;
        println!(
            "image={i} verdict={} logit_change={:?}",
            r.verdict.as_str(),
            r.native_logit_change
                .iter()
                .map(|c| format!("{c:+.4}"))
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
