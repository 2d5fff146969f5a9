//! Line-oriented `key = value` configuration covering every training,
//! backbone, crop, diffusion, and embedding knob. `#` starts a comment.
//! Printing then parsing is lossless for every documented key (f64 values
//! print in shortest round-trip form).

use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::crop::CropConfig;
use crate::error::{Error, Result};
use crate::postproc::DiffusionConfig;
use crate::retrieval::ConcatNormalize;
use crate::train::{CropSelect, KlDirection, TrainingConfig, TransferCadence, WtDirection};

#[derive(Clone, Debug)]
pub struct FullConfig {
    pub train: TrainingConfig,
    pub diffusion: DiffusionConfig,
    pub concat_normalize: ConcatNormalize,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            train: TrainingConfig::desk_default(),
            diffusion: DiffusionConfig::default(),
            concat_normalize: ConcatNormalize::Whole,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::Validation(format!("bad value {value:?} for key {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Validation(format!("bad value {value:?} for key {key} (true|false)"))),
    }
}

fn parse_crop_select(key: &str, value: &str) -> Result<CropSelect> {
    match value {
        "G+L" => Ok(CropSelect::GlobalLocal),
        "G" => Ok(CropSelect::Global),
        "L" => Ok(CropSelect::Local),
        _ => Err(Error::Validation(format!("bad value {value:?} for key {key} (G+L|G|L)"))),
    }
}

impl FullConfig {
    /// Apply a single `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let b: &mut BackboneConfig = &mut t.backbone;
        let c: &mut CropConfig = &mut t.crop;
        let d = &mut self.diffusion;
        match key {
            "lambda" => t.lambda = parse_value(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "epochs" => t.epochs = parse_value(key, value)?,
            "lr" => t.lr = parse_value(key, value)?,
            "warmup_epochs" => t.warmup_epochs = parse_value(key, value)?,
            "weight_decay" => t.weight_decay = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "adam_eps" => t.adam_eps = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "kl_temperature" => t.kl_temperature = parse_value(key, value)?,
            "kl_direction" => {
                t.kl_direction = match value {
                    "down" => KlDirection::Down,
                    "up" => KlDirection::Up,
                    "off" => KlDirection::Off,
                    _ => {
                        return Err(Error::Validation(format!(
                            "bad value {value:?} for kl_direction (down|up|off)"
                        )))
                    }
                }
            }
            "wt_direction" => {
                t.wt_direction = match value {
                    "up" => WtDirection::Up,
                    "down" => WtDirection::Down,
                    "off" => WtDirection::Off,
                    _ => {
                        return Err(Error::Validation(format!(
                            "bad value {value:?} for wt_direction (up|down|off)"
                        )))
                    }
                }
            }
            "master_crops" => t.master_crops = parse_crop_select(key, value)?,
            "assistant_crops" => t.assistant_crops = parse_crop_select(key, value)?,
            "cadence" => {
                t.cadence = match value {
                    "per_epoch" => TransferCadence::PerEpoch,
                    "per_step" => TransferCadence::PerStep,
                    _ => {
                        return Err(Error::Validation(format!(
                            "bad value {value:?} for cadence (per_epoch|per_step)"
                        )))
                    }
                }
            }
            "image_side" => b.image_side = parse_value(key, value)?,
            "patch_side" => b.patch_side = parse_value(key, value)?,
            "channels" => b.channels = parse_value(key, value)?,
            "embed_dim" => b.embed_dim = parse_value(key, value)?,
            "num_layers" => b.num_layers = parse_value(key, value)?,
            "num_heads" => b.num_heads = parse_value(key, value)?,
            "mlp_ratio" => b.mlp_ratio = parse_value(key, value)?,
            "out_dim" => b.out_dim = parse_value(key, value)?,
            "n_global" => c.n_global = parse_value(key, value)?,
            "n_local" => c.n_local = parse_value(key, value)?,
            "global_side" => c.global_side = parse_value(key, value)?,
            "local_side" => c.local_side = parse_value(key, value)?,
            "global_scale_min" => c.global_scale.0 = parse_value(key, value)?,
            "global_scale_max" => c.global_scale.1 = parse_value(key, value)?,
            "local_scale_min" => c.local_scale.0 = parse_value(key, value)?,
            "local_scale_max" => c.local_scale.1 = parse_value(key, value)?,
            "aspect_min" => c.aspect.0 = parse_value(key, value)?,
            "aspect_max" => c.aspect.1 = parse_value(key, value)?,
            "alpha" => d.alpha = parse_value(key, value)?,
            "graph_k" => d.graph_k = parse_value(key, value)?,
            "truncation" => {
                d.truncation = if value == "auto" {
                    None
                } else {
                    Some(parse_value(key, value)?)
                }
            }
            "heat_t" => d.heat_t = parse_value(key, value)?,
            "aqe_top_k" => d.aqe_top_k = parse_value(key, value)?,
            "rerank_depth" => d.rerank_depth = parse_value(key, value)?,
            "unnormalized_laplacian" => d.unnormalized_laplacian = parse_bool(key, value)?,
            "per_segment_normalize" => {
                self.concat_normalize = if parse_bool(key, value)? {
                    ConcatNormalize::PerSegment
                } else {
                    ConcatNormalize::Whole
                }
            }
            _ => return Err(Error::Validation(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FullConfig::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Validation(format!(
                    "config line {}: expected key = value, got {raw:?}",
                    lineno + 1
                )));
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Every documented key. Parsing this text reproduces the config.
    pub fn print(&self) -> String {
        let t = &self.train;
        let b = &t.backbone;
        let c = &t.crop;
        let d = &self.diffusion;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        kv("lambda", t.lambda.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("lr", t.lr.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("adam_eps", t.adam_eps.to_string());
        kv("seed", t.seed.to_string());
        kv("kl_temperature", t.kl_temperature.to_string());
        kv("kl_direction", t.kl_direction.to_string());
        kv("wt_direction", t.wt_direction.to_string());
        kv("master_crops", t.master_crops.to_string());
        kv("assistant_crops", t.assistant_crops.to_string());
        kv(
            "cadence",
            match t.cadence {
                TransferCadence::PerEpoch => "per_epoch".to_string(),
                TransferCadence::PerStep => "per_step".to_string(),
            },
        );
        kv("image_side", b.image_side.to_string());
        kv("patch_side", b.patch_side.to_string());
        kv("channels", b.channels.to_string());
        kv("embed_dim", b.embed_dim.to_string());
        kv("num_layers", b.num_layers.to_string());
        kv("num_heads", b.num_heads.to_string());
        kv("mlp_ratio", b.mlp_ratio.to_string());
        kv("out_dim", b.out_dim.to_string());
        kv("n_global", c.n_global.to_string());
        kv("n_local", c.n_local.to_string());
        kv("global_side", c.global_side.to_string());
        kv("local_side", c.local_side.to_string());
        kv("global_scale_min", c.global_scale.0.to_string());
        kv("global_scale_max", c.global_scale.1.to_string());
        kv("local_scale_min", c.local_scale.0.to_string());
        kv("local_scale_max", c.local_scale.1.to_string());
        kv("aspect_min", c.aspect.0.to_string());
        kv("aspect_max", c.aspect.1.to_string());
        kv("alpha", d.alpha.to_string());
        kv("graph_k", d.graph_k.to_string());
        kv(
            "truncation",
            d.truncation.map(|v| v.to_string()).unwrap_or_else(|| "auto".into()),
        );
        kv("heat_t", d.heat_t.to_string());
        kv("aqe_top_k", d.aqe_top_k.to_string());
        kv("rerank_depth", d.rerank_depth.to_string());
        kv("unnormalized_laplacian", d.unnormalized_laplacian.to_string());
        kv(
            "per_segment_normalize",
            (self.concat_normalize == ConcatNormalize::PerSegment).to_string(),
        );
        out
    }
}
