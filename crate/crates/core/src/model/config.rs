use std::collections::BTreeMap;
use std::str::FromStr;

use crate::asa::{ASAConfig, Aggregation};
use crate::error::{Error, Result};
use crate::hta::{default_segment_lengths, HTAConfig};
use crate::tokenizer::PatchConfig;

/// Full architecture description. `patch.embed_dim`, `hta.dim` and `asa.dim`
/// must agree, as must `hta.heads` and `asa.heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub mlp_ratio: usize,
    pub num_phases: usize,
    pub patch: PatchConfig,
    pub hta: HTAConfig,
    pub asa: ASAConfig,
}

pub const MODEL_KEYS: &[&str] = &[
    "layers",
    "dim",
    "heads",
    "mlp_ratio",
    "num_phases",
    "frames",
    "frame_rate",
    "height",
    "width",
    "channels",
    "patch",
    "segment_lengths",
    "alpha",
    "beta",
    "aggregation",
];

impl Default for ModelConfig {
    /// Desk-scale defaults: 4 blocks of width 64 with 4 heads, 7 phases,
    /// 16-frame clips sampled every 4 frames, 32×32 RGB frames in 8-pixel patches.
    fn default() -> Self {
        let patch =
            PatchConfig { frames: 16, frame_rate: 4, height: 32, width: 32, channels: 3, patch: 8, embed_dim: 64 };
        ModelConfig::new(patch, 4, 4, 4, 7, Aggregation::Ma)
    }
}

impl ModelConfig {
    pub fn new(
        patch: PatchConfig,
        layers: usize,
        heads: usize,
        mlp_ratio: usize,
        num_phases: usize,
        aggregation: Aggregation,
    ) -> Self {
        let dim = patch.embed_dim;
        let hta = HTAConfig::new(patch.frames, heads, dim);
        ModelConfig { layers, mlp_ratio, num_phases, patch, hta, asa: ASAConfig { heads, dim, aggregation } }
    }

    pub fn dim(&self) -> usize {
        self.patch.embed_dim
    }

    pub fn heads(&self) -> usize {
        self.hta.heads
    }

    pub fn frames(&self) -> usize {
        self.patch.frames
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        let d = self.dim();
        if self.hta.dim != d || self.asa.dim != d {
            return Err(Error::Config(format!(
                "embedding width {d} disagrees with attention widths {}/{}",
                self.hta.dim, self.asa.dim
            )));
        }
        if self.hta.heads != self.asa.heads {
            return Err(Error::Config("temporal and spatial head counts differ".into()));
        }
        self.hta.validate(self.frames())?;
        self.asa.validate()?;
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("layers and mlp_ratio must be positive".into()));
        }
        if self.num_phases < 2 {
            return Err(Error::Config("need at least two phases".into()));
        }
        Ok(())
    }

    /// Same architecture at a different clip length; segment lengths rescale.
    pub fn for_frames(&self, frames: usize) -> ModelConfig {
        let mut cfg = self.clone();
        cfg.hta = self.hta.for_frames(self.frames(), frames);
        cfg.patch.frames = frames;
        cfg
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let lens: Vec<String> = self.hta.segment_lengths.iter().map(usize::to_string).collect();
        vec![
            ("layers", self.layers.to_string()),
            ("dim", self.dim().to_string()),
            ("heads", self.heads().to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("num_phases", self.num_phases.to_string()),
            ("frames", self.patch.frames.to_string()),
            ("frame_rate", self.patch.frame_rate.to_string()),
            ("height", self.patch.height.to_string()),
            ("width", self.patch.width.to_string()),
            ("channels", self.patch.channels.to_string()),
            ("patch", self.patch.patch.to_string()),
            ("segment_lengths", lens.join(",")),
            ("alpha", self.hta.alpha.to_string()),
            ("beta", self.hta.beta.to_string()),
            ("aggregation", self.asa.aggregation.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Builds a config from defaults overridden by the model keys in `pairs`.
    /// Keys outside [`MODEL_KEYS`] are ignored here. When `segment_lengths`
    /// is absent it follows `frames`.
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<ModelConfig> {
        let base = ModelConfig::default();
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let patch = PatchConfig {
            frames: parse_or(get("frames"), "frames", base.patch.frames)?,
            frame_rate: parse_or(get("frame_rate"), "frame_rate", base.patch.frame_rate)?,
            height: parse_or(get("height"), "height", base.patch.height)?,
            width: parse_or(get("width"), "width", base.patch.width)?,
            channels: parse_or(get("channels"), "channels", base.patch.channels)?,
            patch: parse_or(get("patch"), "patch", base.patch.patch)?,
            embed_dim: parse_or(get("dim"), "dim", base.dim())?,
        };
        let mut cfg = ModelConfig::new(
            patch,
            parse_or(get("layers"), "layers", base.layers)?,
            parse_or(get("heads"), "heads", base.heads())?,
            parse_or(get("mlp_ratio"), "mlp_ratio", base.mlp_ratio)?,
            parse_or(get("num_phases"), "num_phases", base.num_phases)?,
            parse_or(get("aggregation"), "aggregation", base.asa.aggregation)?,
        );
        cfg.hta.segment_lengths = match get("segment_lengths") {
            Some(s) => s.split(',').map(|x| parse::<usize>(x.trim(), "segment_lengths")).collect::<Result<_>>()?,
            None => default_segment_lengths(cfg.frames()),
        };
        cfg.hta.alpha = parse_or(get("alpha"), "alpha", base.hta.alpha)?;
        cfg.hta.beta = parse_or(get("beta"), "beta", base.hta.beta)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let pairs = parse_kv_text(text)?;
        if let Some(k) = pairs.keys().find(|k| !MODEL_KEYS.contains(&k.as_str())) {
            return Err(Error::Config(format!("unknown model key `{k}`")));
        }
        ModelConfig::from_pairs(&pairs)
    }
}

fn parse<T: FromStr>(s: &str, key: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Config(format!("bad value `{s}` for `{key}`")))
}

fn parse_or<T: FromStr>(s: Option<&str>, key: &str, default: T) -> Result<T> {
    s.map_or(Ok(default), |s| parse(s, key))
}

/// Parses flat `key=value` text; `#` starts a comment, blank lines are skipped,
/// duplicate keys are rejected.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", n + 1)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!((c.layers, c.dim(), c.heads(), c.mlp_ratio, c.num_phases), (4, 64, 4, 4, 7));
        assert_eq!(c.hta.segment_lengths, vec![4, 8, 16]);
        assert_eq!((c.hta.alpha, c.hta.beta), (0.5, 0.5));
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::default();
        c.hta.alpha = 0.3;
        c.hta.beta = 0.7;
        c.asa.aggregation = Aggregation::Tfa;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn segment_lengths_follow_frames() {
        let mut pairs = BTreeMap::new();
        pairs.insert("frames".to_string(), "8".to_string());
        let c = ModelConfig::from_pairs(&pairs).unwrap();
        assert_eq!(c.hta.segment_lengths, vec![2, 4, 8]);
        pairs.insert("segment_lengths".to_string(), "2,4,20".to_string());
        assert!(matches!(ModelConfig::from_pairs(&pairs), Err(Error::Config(_))));
    }

    #[test]
    fn kv_parsing_errors() {
        assert!(parse_kv_text("a=1\na=2").is_err());
        assert!(parse_kv_text("novalue").is_err());
        assert_eq!(parse_kv_text("# c\n\n x = 3 # trailing\n").unwrap()["x"], "3");
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!(ModelConfig::from_text("dim=abc").is_err());
    }

    #[test]
    fn resize_for_test_frames() {
        let c = ModelConfig::default().for_frames(24);
        assert_eq!(c.frames(), 24);
        assert_eq!(c.hta.segment_lengths, vec![6, 12, 24]);
        c.validate().unwrap();
    }
}
