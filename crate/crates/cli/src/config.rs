//! Run configuration: a flat `key=value` file, `--set` overrides and
//! dedicated flags, merged and validated before any work starts.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use surgphase::model::{parse_kv_text, ModelConfig, MODEL_KEYS};
use surgphase::trainer::{OptimConfig, SyntheticDatasetSpec};
use surgphase::{Error, Result};

pub const OPTIM_KEYS: &[&str] =
    &["lr", "beta1", "beta2", "eps", "weight_decay", "layer_decay", "epochs", "batch_size", "seed", "threads"];

pub const DATA_KEYS: &[&str] =
    &["num_videos", "frames_per_video", "noise_std", "data_seed", "windows_per_video", "fps"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub data: SyntheticDatasetSpec,
    pub fps: f64,
}

fn known(key: &str) -> bool {
    MODEL_KEYS.contains(&key) || OPTIM_KEYS.contains(&key) || DATA_KEYS.contains(&key)
}

fn get<T: FromStr>(pairs: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match pairs.get(key) {
        Some(v) => v.parse().map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`"))),
        None => Ok(default),
    }
}

impl RunConfig {
    /// Merges, in increasing priority: defaults, `file`, `sets` (`key=value`), `flags`.
    pub fn load(file: Option<&Path>, sets: &[String], flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
        let mut pairs = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                parse_kv_text(&text)?
            }
            None => BTreeMap::new(),
        };
        for s in sets {
            let (k, v) =
                s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects key=value, got `{s}`")))?;
            pairs.insert(k.trim().to_string(), v.trim().to_string());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                pairs.insert(k.to_string(), v.clone());
            }
        }
        RunConfig::from_pairs(&pairs)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<RunConfig> {
        if let Some(k) = pairs.keys().find(|k| !known(k)) {
            return Err(Error::Config(format!("unknown configuration key `{k}`")));
        }
        let model = ModelConfig::from_pairs(pairs)?;
        let d = OptimConfig::default();
        let optim = OptimConfig {
            lr: get(pairs, "lr", d.lr)?,
            beta1: get(pairs, "beta1", d.beta1)?,
            beta2: get(pairs, "beta2", d.beta2)?,
            eps: get(pairs, "eps", d.eps)?,
            weight_decay: get(pairs, "weight_decay", d.weight_decay)?,
            layer_decay: get(pairs, "layer_decay", d.layer_decay)?,
            epochs: get(pairs, "epochs", d.epochs)?,
            batch_size: get(pairs, "batch_size", d.batch_size)?,
            seed: get(pairs, "seed", d.seed)?,
            threads: get(pairs, "threads", d.threads)?,
        };
        optim.validate()?;
        let data = SyntheticDatasetSpec {
            num_videos: get(pairs, "num_videos", 4)?,
            frames_per_video: get(pairs, "frames_per_video", 120)?,
            num_phases: model.num_phases,
            noise_std: get(pairs, "noise_std", 0.1)?,
            seed: get(pairs, "data_seed", 0)?,
            channels: model.patch.channels,
            height: model.patch.height,
            width: model.patch.width,
            windows_per_video: get(pairs, "windows_per_video", 50)?,
        };
        data.validate()?;
        let fps: f64 = get(pairs, "fps", 1.0)?;
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        Ok(RunConfig { model, optim, data, fps })
    }

    /// Dataset description written next to generated data.
    pub fn data_text(&self) -> String {
        let d = &self.data;
        format!(
            "num_videos={}\nframes_per_video={}\nnum_phases={}\nnoise_std={}\ndata_seed={}\nchannels={}\nheight={}\nwidth={}\nfps={}\n",
            d.num_videos, d.frames_per_video, d.num_phases, d.noise_std, d.seed, d.channels, d.height, d.width, self.fps
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> BTreeMap<String, String> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults() {
        let c = RunConfig::from_pairs(&BTreeMap::new()).unwrap();
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c.optim, OptimConfig::default());
        assert_eq!(c.fps, 1.0);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_pairs(&pairs(&[("lrr", "1")])), Err(Error::Config(_))));
    }

    #[test]
    fn segment_longer_than_clip_rejected() {
        let p = pairs(&[("frames", "8"), ("segment_lengths", "4,16")]);
        assert!(matches!(RunConfig::from_pairs(&p), Err(Error::Config(_))));
    }

    #[test]
    fn flags_override_sets() {
        let c = RunConfig::load(None, &["lr=0.1".into(), "epochs=3".into()], &[("lr", Some("0.2".into()))]).unwrap();
        assert_eq!((c.optim.lr, c.optim.epochs), (0.2, 3));
        assert!(RunConfig::load(None, &["lr".into()], &[]).is_err());
    }
}
