//! Dataset plumbing: generate images, store them as a packed `.ppds` file and
//! as a directory of PPM files, load both back, augment offline, and round-trip
//! a model checkpoint.
//!
//! ```bash
//! cargo run --release -p protopart --example dataset_io
//! ```

use protopart::data::{augment_offline, write_ppds, write_ppm, AugmentOp, Split};
use protopart::model::ModelConfig;
use protopart::synth::shapes_dataset;
use protopart::{load_checkpoint, load_dataset, save_checkpoint, DatasetFormat, ProtoPNet};

fn main() -> protopart::Result<()> {
    let dir = std::env::temp_dir().join("protopart_dataset_io");
    std::fs::create_dir_all(&dir).map_err(|e| protopart::Error::io(&dir, e))?;

    let data = shapes_dataset(32, 4, 0, Split::Train);
    let packed = dir.join("shapes.ppds");
    write_ppds(&data, &packed)?;
    let again = load_dataset(&packed, DatasetFormat::Ppds)?;
    println!(
        "{}: {} images, classes {:?}",
        packed.display(),
        again.len(),
        again.class_names
    );

    let tree = dir.join("tree");
    for (i, (img, &y)) in data.images.iter().zip(&data.labels).enumerate() {
        let class_dir = tree.join(&data.class_names[y]);
        std::fs::create_dir_all(&class_dir).map_err(|e| protopart::Error::io(&class_dir, e))?;
        write_ppm(img, class_dir.join(format!("{i:04}.ppm")))?;
    }
    let from_tree = load_dataset(&tree, DatasetFormat::PpmTree)?;
    println!(
        "{}: {} images, class counts {:?}",
        tree.display(),
        from_tree.len(),
        from_tree.class_counts()
    );

    let ops = [AugmentOp::Flip, AugmentOp::Rotate, AugmentOp::Crop];
    let augmented = augment_offline(&data, &ops, 3, 9)?;
    println!("augmented {} -> {} images", data.len(), augmented.len());

    let model = ProtoPNet::build(ModelConfig::desk(5, 3), 0)?;
    let ckpt = dir.join("untrained.ppnx");
    save_checkpoint(&model, &ckpt)?;
    let back = load_checkpoint(&ckpt)?;
    let x = &data.images[0];
    let same = model.forward(x)?.logits == back.forward(x)?.logits;
    println!(
        "checkpoint {} reloads with identical logits: {same}",
        ckpt.display()
    );
    Ok(())
}
