//! Bit-exact little-endian model checkpoints.
//!
//! ```text
//! "PPNX" | u32 version = 1
//! config: u32 input_height, input_width, input_channels, block_count,
//!         block_count × (out_channels, kernel, stride, padding, pool_window, pool_stride),
//!         latent_depth, proto_height, proto_width, num_classes,
//!         num_classes × prototypes_per_class,
//!         f64 epsilon
//! arrays (u32 rank | rank × u32 extent | row-major payload), in order:
//!         per backbone layer: filters (f64), bias (f64)
//!         per prototype: prototype (f64)
//!         allocation (u32)
//!         last layer (f64)
//! u64 seed
//! u32 record_count, record_count × (u32 prototype, class, image, row, col,
//!         f64 move_distance, before array, after array)
//! u32 CRC-32 of every preceding byte
//! ```
//!
//! A pool window of 0 means the block has no pooling.

use std::fs;
use std::path::Path;

use crate::data::ByteReader;
use crate::error::{Error, Result};
use crate::model::{Backbone, ConvBlock, ConvLayer, ModelConfig, ProtoPNet};
use crate::projection::ProjectionRecord;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PPNX";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn array(&mut self, t: &Tensor) {
        self.u32(t.rank());
        for &e in t.shape() {
            self.u32(e);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

pub fn encode_checkpoint(model: &ProtoPNet) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION as usize);
    let c = &model.config;
    w.u32(c.input_height);
    w.u32(c.input_width);
    w.u32(c.input_channels);
    w.u32(c.blocks.len());
    for b in &c.blocks {
        w.u32(b.out_channels);
        w.u32(b.kernel);
        w.u32(b.stride);
        w.u32(b.padding);
        let (win, st) = b.pool.unwrap_or((0, 0));
        w.u32(win);
        w.u32(st);
    }
    w.u32(c.latent_depth);
    w.u32(c.proto_height);
    w.u32(c.proto_width);
    w.u32(c.num_classes);
    for &n in &c.prototypes_per_class {
        w.u32(n);
    }
    w.f64(c.epsilon);

    for layer in &model.backbone.layers {
        w.array(&layer.filters);
        w.array(&layer.bias);
    }
    for p in &model.prototypes {
        w.array(p);
    }
    w.u32(1);
    w.u32(model.allocation.len());
    for &a in &model.allocation {
        w.u32(a);
    }
    w.array(&model.last_layer);

    w.0.extend_from_slice(&model.seed.to_le_bytes());
    w.u32(model.projection.len());
    for r in &model.projection {
        w.u32(r.prototype);
        w.u32(r.class);
        w.u32(r.image);
        w.u32(r.row);
        w.u32(r.col);
        w.f64(r.move_distance);
        w.array(&r.before);
        w.array(&r.after);
    }
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

fn corrupt(e: Error) -> Error {
    match e {
        Error::Parse { offset, message } => {
            Error::CorruptCheckpoint(format!("at byte {offset}: {message}"))
        }
        other => Error::CorruptCheckpoint(other.to_string()),
    }
}

fn read_array(r: &mut ByteReader, expect: &[usize], what: &str) -> Result<Tensor> {
    let rank = r.u32(what)? as usize;
    if rank != expect.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{what}: rank {rank}, expected {}",
            expect.len()
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32(what)? as usize);
    }
    if shape != expect {
        return Err(Error::CorruptCheckpoint(format!(
            "{what}: shape {shape:?}, expected {expect:?}"
        )));
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f64(what)?);
    }
    Tensor::new(shape, data)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ProtoPNet> {
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic, expected PPNX".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint("checksum mismatch".into()));
    }
    decode_body(body).map_err(|e| match e {
        Error::CorruptCheckpoint(_) => e,
        other => corrupt(other),
    })
}

fn decode_body(body: &[u8]) -> Result<ProtoPNet> {
    let mut r = ByteReader::new(body);
    r.take(8, "header")?;
    let mut u = |what: &str| -> Result<usize> { Ok(r.u32(what)? as usize) };
    let input_height = u("input_height")?;
    let input_width = u("input_width")?;
    let input_channels = u("input_channels")?;
    let block_count = u("block_count")?;
    if block_count > 1024 {
        return Err(Error::CorruptCheckpoint(format!(
            "implausible block count {block_count}"
        )));
    }
    let mut blocks = Vec::with_capacity(block_count);
    for _ in 0..block_count {
        let out_channels = u("block")?;
        let kernel = u("block")?;
        let stride = u("block")?;
        let padding = u("block")?;
        let win = u("block")?;
        let st = u("block")?;
        blocks.push(ConvBlock {
            out_channels,
            kernel,
            stride,
            padding,
            pool: (win > 0).then_some((win, st)),
        });
    }
    let latent_depth = u("latent_depth")?;
    let proto_height = u("proto_height")?;
    let proto_width = u("proto_width")?;
    let num_classes = u("num_classes")?;
    if num_classes > 1 << 20 {
        return Err(Error::CorruptCheckpoint(format!(
            "implausible class count {num_classes}"
        )));
    }
    let mut prototypes_per_class = Vec::with_capacity(num_classes);
    for _ in 0..num_classes {
        prototypes_per_class.push(u("prototypes_per_class")?);
    }
    let epsilon = r.f64("epsilon")?;
    let config = ModelConfig {
        input_height,
        input_width,
        input_channels,
        blocks,
        latent_depth,
        proto_height,
        proto_width,
        num_classes,
        prototypes_per_class,
        epsilon,
    };
    config
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("stored config is invalid: {e}")))?;

    let mut layers = Vec::new();
    for spec in config.layer_specs() {
        let filters = read_array(
            &mut r,
            &[
                spec.kernel,
                spec.kernel,
                spec.in_channels,
                spec.out_channels,
            ],
            "filters",
        )?;
        let bias = read_array(&mut r, &[spec.out_channels], "bias")?;
        layers.push(ConvLayer {
            spec,
            filters,
            bias,
        });
    }
    let m = config.num_prototypes();
    let proto_shape = [config.proto_height, config.proto_width, config.latent_depth];
    let mut prototypes = Vec::with_capacity(m);
    for _ in 0..m {
        prototypes.push(read_array(&mut r, &proto_shape, "prototype")?);
    }
    if r.u32("allocation")? != 1 || r.u32("allocation")? as usize != m {
        return Err(Error::CorruptCheckpoint(
            "allocation has the wrong shape".into(),
        ));
    }
    let mut allocation = Vec::with_capacity(m);
    for _ in 0..m {
        let a = r.u32("allocation")? as usize;
        if a >= num_classes {
            return Err(Error::CorruptCheckpoint(format!(
                "allocation entry {a} out of range"
            )));
        }
        allocation.push(a);
    }
    let last_layer = read_array(&mut r, &[num_classes, m], "last layer")?;
    let seed = r.u64("seed")?;
    let n_records = r.u32("record count")? as usize;
    if n_records > m {
        return Err(Error::CorruptCheckpoint(format!(
            "{n_records} projection records for {m} prototypes"
        )));
    }
    let mut projection = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        let prototype = r.u32("record")? as usize;
        let class = r.u32("record")? as usize;
        let image = r.u32("record")? as usize;
        let row = r.u32("record")? as usize;
        let col = r.u32("record")? as usize;
        let move_distance = r.f64("record")?;
        let before = read_array(&mut r, &proto_shape, "record before")?;
        let after = read_array(&mut r, &proto_shape, "record after")?;
        projection.push(ProjectionRecord {
            prototype,
            class,
            before,
            after,
            image,
            row,
            col,
            move_distance,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::CorruptCheckpoint(format!(
            "{} unexpected trailing bytes",
            r.remaining()
        )));
    }
    Ok(ProtoPNet {
        config,
        backbone: Backbone { layers },
        prototypes,
        allocation,
        last_layer,
        seed,
        projection,
    })
}

pub fn save_checkpoint(model: &ProtoPNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ProtoPNet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> ProtoPNet {
        let mut cfg = ModelConfig::desk(2, 2);
        cfg.input_height = 12;
        cfg.input_width = 12;
        cfg.blocks.truncate(1);
        cfg.blocks[0].out_channels = 4;
        cfg.latent_depth = 3;
        ProtoPNet::build(cfg, 11).unwrap()
    }

    #[test]
    fn flipped_payload_byte_is_detected() {
        let mut bytes = encode_checkpoint(&model());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::CorruptCheckpoint(_))
        ));
    }

    #[test]
    fn unknown_version_is_reported() {
        let mut bytes = encode_checkpoint(&model());
        bytes[4] = 9;
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::UnsupportedVersion(9))
        ));
    }

    #[test]
    fn round_trip_preserves_every_array() {
        let m = model();
        assert_eq!(decode_checkpoint(&encode_checkpoint(&m)).unwrap(), m);
    }
}
