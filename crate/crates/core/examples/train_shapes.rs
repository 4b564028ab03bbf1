//! Trains a prototypical part network on the synthetic five-shape dataset
//! with the full three-stage schedule, then trains the plain CNN baseline with
//! the same backbone and compares test accuracy.
//!
//! ```bash
//! cargo run --release -p protopart --example train_shapes
//! ```

use protopart::baseline::BaselineCnn;
use protopart::data::Split;
use protopart::model::{ModelConfig, ProtoPNet};
use protopart::synth::shapes_dataset;
use protopart::training::{accuracy, mean_abs_off_class, train_full, StageKind, TrainConfig};

fn main() -> protopart::Result<()> {
    let per_class_train: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let train = shapes_dataset(32, per_class_train, 1, Split::Train);
    let test = shapes_dataset(32, 100, 2, Split::Test);
    let config = ModelConfig::desk(5, 3);
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };

    let mut model = ProtoPNet::build(config.clone(), cfg.seed)?;
    let reports = train_full(&mut model, &train, &cfg)?;
    for r in &reports {
        println!(
            "# cycle={} stage={} seconds={:.1}",
            r.cycle + 1,
            r.kind.name(),
            r.seconds
        );
        if r.kind == StageKind::Joint || r.epochs.len() <= 3 {
            print!("{}", r.to_log());
        } else if let Some(last) = r.epochs.last() {
            println!("{}", last.log_line());
        }
    }
    let proto_acc = accuracy(&model, &test)?;
    println!("protopnet test accuracy = {proto_acc:.4}");
    println!("mean |off-class w_h| = {:.4}", mean_abs_off_class(&model));

    let mut baseline = BaselineCnn::build(config, cfg.seed)?;
    let report = baseline.train(&train, &cfg, cfg.stage1_epochs * cfg.cycles)?;
    println!("# baseline seconds={:.1}", report.seconds);
    print!("{}", report.to_log());
    println!("baseline test accuracy = {:.4}", baseline.accuracy(&test)?);
    Ok(())
}
