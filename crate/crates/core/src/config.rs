//! Line-oriented `key=value` run configuration covering the model and the
//! training schedule. Blank lines and `#` comments are ignored; unknown or
//! repeated keys are errors.
//!
//! `blocks` lists backbone blocks as `out:kernel:stride:padding:pool:pool_stride`
//! separated by commas (`pool` 0 for none). `prototypes_per_class` is a single
//! count or one count per class.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ConvBlock, ModelConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Desk-scale defaults: 3 prototypes per class.
    pub fn defaults(num_classes: usize) -> Self {
        RunConfig {
            model: ModelConfig::desk(num_classes, 3),
            train: TrainConfig::default(),
        }
    }

    pub fn load(path: impl AsRef<Path>, num_classes: usize) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, num_classes)
    }

    /// Parses `text` over the defaults for `num_classes` classes.
    pub fn parse(text: &str, num_classes: usize) -> Result<Self> {
        let mut cfg = RunConfig::defaults(num_classes);
        let mut seen = HashSet::new();
        let mut per_class: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |msg: String| Error::InvalidConfig(format!("line {}: {msg}", lineno + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key:?}")));
            }
            let m = &mut cfg.model;
            let t = &mut cfg.train;
            let res = match key {
                "input_height" => num(value).map(|v| m.input_height = v),
                "input_width" => num(value).map(|v| m.input_width = v),
                "blocks" => parse_blocks(value).map(|v| m.blocks = v),
                "latent_depth" => num(value).map(|v| m.latent_depth = v),
                "proto_height" => num(value).map(|v| m.proto_height = v),
                "proto_width" => num(value).map(|v| m.proto_width = v),
                "num_classes" => num(value).map(|v| m.num_classes = v),
                "prototypes_per_class" => {
                    per_class = Some(value.to_string());
                    Ok(())
                }
                "epsilon" => num(value).map(|v| m.epsilon = v),
                "lambda_cluster" => num(value).map(|v| t.lambda_cluster = v),
                "lambda_separation" => num(value).map(|v| t.lambda_separation = v),
                "lambda_l1" => num(value).map(|v| t.lambda_l1 = v),
                "lr_backbone" => num(value).map(|v| t.lr_backbone = v),
                "lr_prototypes" => num(value).map(|v| t.lr_prototypes = v),
                "lr_last_layer" => num(value).map(|v| t.lr_last_layer = v),
                "momentum" => num(value).map(|v| t.momentum = v),
                "batch_size" => num(value).map(|v| t.batch_size = v),
                "stage1_epochs" => num(value).map(|v| t.stage1_epochs = v),
                "stage3_epochs" => num(value).map(|v| t.stage3_epochs = v),
                "cycles" => num(value).map(|v| t.cycles = v),
                "seed" => num(value).map(|v| t.seed = v),
                other => Err(format!("unknown key {other:?}")),
            };
            res.map_err(|msg| err(format!("{key}: {msg}")))?;
        }
        let k = cfg.model.num_classes;
        cfg.model.prototypes_per_class = match per_class {
            None => vec![3; k],
            Some(v) => {
                let counts = v
                    .split(',')
                    .map(|s| num::<usize>(s.trim()))
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::InvalidConfig(format!("prototypes_per_class: {e}")))?;
                if counts.len() == 1 {
                    vec![counts[0]; k]
                } else {
                    counts
                }
            }
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let blocks: Vec<String> = m
            .blocks
            .iter()
            .map(|b| {
                let (w, s) = b.pool.unwrap_or((0, 0));
                format!(
                    "{}:{}:{}:{}:{}:{}",
                    b.out_channels, b.kernel, b.stride, b.padding, w, s
                )
            })
            .collect();
        let counts: Vec<String> = m
            .prototypes_per_class
            .iter()
            .map(|c| c.to_string())
            .collect();
        let mut s = String::new();
        for (k, v) in [
            ("input_height", m.input_height.to_string()),
            ("input_width", m.input_width.to_string()),
            ("blocks", blocks.join(",")),
            ("latent_depth", m.latent_depth.to_string()),
            ("proto_height", m.proto_height.to_string()),
            ("proto_width", m.proto_width.to_string()),
            ("num_classes", m.num_classes.to_string()),
            ("prototypes_per_class", counts.join(",")),
            ("epsilon", m.epsilon.to_string()),
            ("lambda_cluster", t.lambda_cluster.to_string()),
            ("lambda_separation", t.lambda_separation.to_string()),
            ("lambda_l1", t.lambda_l1.to_string()),
            ("lr_backbone", t.lr_backbone.to_string()),
            ("lr_prototypes", t.lr_prototypes.to_string()),
            ("lr_last_layer", t.lr_last_layer.to_string()),
            ("momentum", t.momentum.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("stage1_epochs", t.stage1_epochs.to_string()),
            ("stage3_epochs", t.stage3_epochs.to_string()),
            ("cycles", t.cycles.to_string()),
            ("seed", t.seed.to_string()),
        ] {
            writeln!(s, "{k}={v}").unwrap();
        }
        s
    }
}

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse {s:?}"))
}

fn parse_blocks(value: &str) -> std::result::Result<Vec<ConvBlock>, String> {
    value
        .split(',')
        .map(|spec| {
            let parts: Vec<usize> = spec
                .trim()
                .split(':')
                .map(num)
                .collect::<std::result::Result<_, _>>()?;
            let [out_channels, kernel, stride, padding, win, st] = parts[..] else {
                return Err(format!("block {spec:?} needs six fields"));
            };
            Ok(ConvBlock {
                out_channels,
                kernel,
                stride,
                padding,
                pool: (win > 0).then_some((win, st)),
            })
        })
        .collect()
}
