//! After training, lists the training patches nearest to each prototype and
//! the prototypes nearest to a test image, then prunes prototypes whose
//! neighbourhood is mostly other-class patches.
//!
//! ```bash
//! cargo run --release -p protopart --example nearest_and_prune
//! ```

use protopart::data::Split;
use protopart::explain::{
    nearest_patches_to_prototype, nearest_prototypes_to_image, prune_prototypes,
};
use protopart::model::{ConvBlock, ModelConfig, DEFAULT_EPSILON};
use protopart::synth::blobs_dataset;
use protopart::training::{accuracy, train_full, TrainConfig};
use protopart::ProtoPNet;

fn main() -> protopart::Result<()> {
    let train = blobs_dataset(16, 40, 1, Split::Train);
    let test = blobs_dataset(16, 20, 2, Split::Test);
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
        prototypes_per_class: vec![4, 4],
        epsilon: DEFAULT_EPSILON,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        lr_backbone: 0.05,
        lr_prototypes: 0.01,
        stage1_epochs: 6,
        stage3_epochs: 10,
        cycles: 1,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut model = ProtoPNet::build(config, cfg.seed)?;
    train_full(&mut model, &train, &cfg)?;

    for j in 0..model.num_prototypes() {
        let near = nearest_patches_to_prototype(&model, &train, j, 3)?;
        let list: Vec<String> = near
            .iter()
            .map(|m| {
                format!(
                    "img{}@({},{}) class {} d={:.3}",
                    m.image, m.row, m.col, m.class, m.distance
                )
            })
            .collect();
        println!(
            "prototype {j} (class {}): {}",
            model.allocation[j],
            list.join(", ")
        );
    }

    for m in nearest_prototypes_to_image(&model, &test.images[0], 3)? {
        println!(
            "test image 0 is close to prototype {} (class {}), score {:.3}",
            m.prototype, m.class, m.score
        );
    }

    let (pruned, report) = prune_prototypes(&model, &train, 6, 3)?;
    print!("{}", report.to_text());
    println!(
        "prototypes {} -> {}, accuracy {:.3} -> {:.3}",
        report.count_before,
        report.count_after,
        accuracy(&model, &test)?,
        accuracy(&pruned, &test)?
    );
    Ok(())
}
