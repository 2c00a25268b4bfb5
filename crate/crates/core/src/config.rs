//! Flat run configuration shared by every command.
//!
//! Keys map one to one onto the model, optimizer, training and evaluation
//! settings. Unknown keys are rejected; missing keys take the defaults
//! below, which follow the published hyperparameters.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion_model::{Ablation, ModelConfig, Variant};
use crate::metrics::DbaConfig;
use crate::preprocess::LidarChannels;
use crate::training::{OptimizerConfig, TrainConfig};

/// File name of the effective configuration written next to every output.
pub const EFFECTIVE_CONFIG: &str = "config.toml";

mod text {
    use super::*;
    use serde::{de::Error as _, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(
        v: &T,
        s: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> std::result::Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `bev_fusion` or `gps_only`.
    #[serde(with = "text")]
    pub model: Variant,
    /// BEV cells per side.
    pub grid: usize,
    /// BEV half-width, meters.
    pub bev_extent: f64,
    pub c_bev: usize,
    /// Camera backbone output channels.
    pub c_back: usize,
    /// Side of the square camera input after resizing.
    pub camera_size: usize,
    pub xattn_layers: usize,
    pub xattn_heads: usize,
    pub temporal_layers: usize,
    pub temporal_heads: usize,
    pub gps_hidden: usize,
    pub head_hidden: usize,
    pub head_dropout: f64,
    /// Codebook size M.
    pub beams: usize,
    /// `height` or `height_intensity_density`.
    #[serde(with = "text")]
    pub lidar_channels: LidarChannels,

    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub focal_gamma: f64,
    pub grad_clip: f64,
    pub flip_prob: f64,
    pub photometric: bool,
    /// Pathway switches used for training and evaluation.
    #[serde(with = "text")]
    pub ablation: Ablation,
    pub log_wall_time: bool,

    pub dba_k: usize,
    pub dba_delta: f64,

    /// Parameter initialization, shuffling, augmentation and dropout.
    pub seed: u64,
    pub split_seed: u64,
    pub split_train: f64,
    pub split_val: f64,
    pub split_test: f64,

    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            model: m.variant,
            grid: m.grid,
            bev_extent: m.bev_extent,
            c_bev: m.c_bev,
            c_back: m.c_back,
            camera_size: m.camera_size,
            xattn_layers: m.xattn_layers,
            xattn_heads: m.xattn_heads,
            temporal_layers: m.temporal_layers,
            temporal_heads: m.temporal_heads,
            gps_hidden: m.gps_hidden,
            head_hidden: m.head_hidden,
            head_dropout: m.head_dropout,
            beams: m.beams,
            lidar_channels: m.lidar_channels,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            adam_eps: t.optimizer.eps,
            epochs: t.epochs,
            batch_size: t.batch_size,
            focal_gamma: t.focal_gamma,
            grad_clip: t.grad_clip,
            flip_prob: t.flip_prob,
            photometric: t.photometric,
            ablation: t.ablation,
            log_wall_time: t.log_wall_time,
            dba_k: t.dba.k,
            dba_delta: t.dba.delta,
            seed: t.seed,
            split_seed: 0,
            split_train: 0.8,
            split_val: 0.1,
            split_test: 0.1,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// The reduced configuration used for CPU-scale experiments.
    pub fn desk() -> Self {
        Self {
            grid: 32,
            c_bev: 64,
            c_back: 128,
            camera_size: 64,
            beams: 16,
            gps_hidden: 64,
            head_hidden: 128,
            epochs: 40,
            batch_size: 16,
            lr: 1e-3,
            ..Self::default()
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(key, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    /// Write the effective configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            variant: self.model,
            grid: self.grid,
            bev_extent: self.bev_extent,
            c_bev: self.c_bev,
            c_back: self.c_back,
            camera_size: self.camera_size,
            xattn_layers: self.xattn_layers,
            xattn_heads: self.xattn_heads,
            temporal_layers: self.temporal_layers,
            temporal_heads: self.temporal_heads,
            gps_hidden: self.gps_hidden,
            head_hidden: self.head_hidden,
            head_dropout: self.head_dropout,
            beams: self.beams,
            lidar_channels: self.lidar_channels,
        }
    }

    pub fn dba_config(&self) -> DbaConfig {
        DbaConfig {
            k: self.dba_k,
            delta: self.dba_delta,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.adam_eps,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            focal_gamma: self.focal_gamma,
            grad_clip: self.grad_clip,
            flip_prob: self.flip_prob,
            photometric: self.photometric,
            seed: self.seed,
            ablation: self.ablation,
            dba: self.dba_config(),
            log_wall_time: self.log_wall_time,
        }
    }

    pub fn split_ratios(&self) -> [f64; 3] {
        [self.split_train, self.split_val, self.split_test]
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        let r = self.split_ratios();
        if r.iter().any(|x| !(x.is_finite() && *x >= 0.0))
            || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::config(
                "split_train",
                "split ratios must be non-negative and sum to 1",
            ));
        }
        Ok(())
    }

    /// Apply `key=value` overrides using the same parsing as the file.
    pub fn with_overrides<'a>(
        &self,
        pairs: impl IntoIterator<Item = (&'a str, String)>,
    ) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("own output parses");
        for (key, raw) in pairs {
            let Some(old) = table.get(key) else {
                return Err(Error::config(key, "unknown key"));
            };
            let value = match old {
                toml::Value::String(_) => toml::Value::String(raw),
                _ => {
                    let doc: toml::Table = toml::from_str(&format!("v = {raw}"))
                        .map_err(|_| Error::config(key, format!("cannot parse `{raw}`")))?;
                    doc["v"].clone()
                }
            };
            table.insert(key.to_string(), value);
        }
        Self::parse(&toml::to_string(&table).expect("table serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_hyperparameters() {
        let c = RunConfig::default();
        assert_eq!((c.grid, c.bev_extent, c.c_bev), (128, 50.0, 256));
        assert_eq!(
            (
                c.xattn_layers,
                c.xattn_heads,
                c.temporal_layers,
                c.temporal_heads
            ),
            (3, 4, 4, 4)
        );
        assert_eq!((c.lr, c.weight_decay, c.focal_gamma), (1e-4, 1e-2, 2.0));
        assert_eq!((c.beams, c.dba_k, c.dba_delta), (64, 3, 5.0));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_is_exact() {
        for c in [RunConfig::default(), RunConfig::desk()] {
            assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
        }
    }

    #[test]
    fn unknown_and_missing_keys() {
        let e = RunConfig::parse("grid = 32\nwarp_factor = 9\n").unwrap_err();
        assert!(
            matches!(e, Error::Config { ref key, .. } if key == "warp_factor"),
            "{e:?}"
        );
        let c = RunConfig::parse("grid = 32\nablation = \"mean_pool\"\n").unwrap();
        assert_eq!(c.grid, 32);
        assert_eq!(c.ablation, Ablation::MeanPool);
        assert_eq!(c.c_bev, 256);
        assert!(matches!(
            RunConfig::parse("ablation = \"nope\""),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("beams = 1"),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::parse("split_val = 0.5"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn overrides_use_file_syntax() {
        let c = RunConfig::default()
            .with_overrides([
                ("lr", "0".to_string()),
                ("model", "gps_only".to_string()),
                ("out_dir", "x/y".to_string()),
            ])
            .unwrap();
        assert_eq!(c.lr, 0.0);
        assert_eq!(c.model, Variant::GpsOnly);
        assert_eq!(c.out_dir, PathBuf::from("x/y"));
        assert!(matches!(
            RunConfig::default().with_overrides([("bogus", "1".into())]),
            Err(Error::Config { .. })
        ));
        assert!(matches!(
            RunConfig::default().with_overrides([("epochs", "many".into())]),
            Err(Error::Config { .. })
        ));
    }
}
