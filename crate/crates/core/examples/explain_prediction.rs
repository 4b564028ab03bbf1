//! Trains a small model on the two-class blob images, then explains one test
//! prediction: per-prototype similarity scores, the points each contributes to
//! every class, and heat maps written as PPM files.
//!
//! ```bash
//! cargo run --release -p protopart --example explain_prediction [out_dir]
//! ```

use protopart::data::{write_ppm, Split};
use protopart::explain::{crop_patch, explain_image, render_heatmap};
use protopart::model::{ConvBlock, ModelConfig, DEFAULT_EPSILON};
use protopart::synth::blobs_dataset;
use protopart::training::{accuracy, train_full, TrainConfig};
use protopart::ProtoPNet;

fn main() -> protopart::Result<()> {
    let out_dir = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("protopart_explain"));
    let train = blobs_dataset(16, 40, 1, Split::Train);
    let test = blobs_dataset(16, 10, 2, Split::Test);
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
        prototypes_per_class: vec![3, 3],
        epsilon: DEFAULT_EPSILON,
    };
    let cfg = TrainConfig {
        batch_size: 8,
        lr_backbone: 0.05,
        lr_prototypes: 0.01,
        stage1_epochs: 6,
        stage3_epochs: 10,
        cycles: 1,
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = ProtoPNet::build(config, cfg.seed)?;
    train_full(&mut model, &train, &cfg)?;
    println!("test accuracy = {:.3}", accuracy(&model, &test)?);

    let image = &test.images[0];
    let mut ex = explain_image(&model, image)?;
    ex.image_id = Some(0);
    print!("{}", ex.to_report());
    println!("logits = {:?}", ex.logits);

    std::fs::create_dir_all(&out_dir).map_err(|e| protopart::Error::io(&out_dir, e))?;
    write_ppm(image, out_dir.join("input.ppm"))?;
    for e in &ex.entries {
        write_ppm(
            &render_heatmap(image, &e.activation)?,
            out_dir.join(format!("prototype_{:03}_heatmap.ppm", e.prototype)),
        )?;
        write_ppm(
            &crop_patch(image, &e.patch)?,
            out_dir.join(format!("prototype_{:03}_patch.ppm", e.prototype)),
        )?;
    }
    println!("images written to {}", out_dir.display());
    Ok(())
}
