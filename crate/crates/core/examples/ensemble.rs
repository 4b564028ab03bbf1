//! Three models trained from different seeds, combined by summing logits.
//!
//! ```bash
//! cargo run --release -p protopart --example ensemble
//! ```

use protopart::data::Split;
use protopart::explain::{ensemble_accuracy, ensemble_logits};
use protopart::model::ModelConfig;
use protopart::synth::shapes_dataset;
use protopart::training::{accuracy, train_full, TrainConfig};
use protopart::ProtoPNet;

fn main() -> protopart::Result<()> {
    let train = shapes_dataset(32, 100, 1, Split::Train);
    let test = shapes_dataset(32, 40, 2, Split::Test);
    let mut models = Vec::new();
    for seed in [1, 2, 3] {
        let cfg = TrainConfig {
            stage1_epochs: 8,
            stage3_epochs: 10,
            cycles: 1,
            seed,
            ..TrainConfig::default()
        };
        let mut model = ProtoPNet::build(ModelConfig::desk(5, 3), seed)?;
        train_full(&mut model, &train, &cfg)?;
        println!("seed {seed}: test accuracy {:.3}", accuracy(&model, &test)?);
        models.push(model);
    }
    let refs: Vec<&ProtoPNet> = models.iter().collect();
    println!(
        "ensemble test accuracy {:.3}",
        ensemble_accuracy(&refs, &test)?
    );
    println!(
        "ensemble logits of test image 0: {:?}",
        ensemble_logits(&refs, &test.images[0])?
    );
    Ok(())
}
