//! Plain-text `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key must be
//! known; later assignments override earlier ones.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, SpnError};
use crate::guidance::GuidanceArch;
use crate::propagation::{ConnectionKind, SpnConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub classes: usize,
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub coarse_factor: usize,
    pub coarse_blur: usize,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of the square training crops; 0 trains on whole images.
    pub patch_size: usize,
    pub seed: u64,
    pub units: usize,
    pub connection: ConnectionKind,
    pub hidden_channels: usize,
    pub propagation_scale: usize,
    /// Encoder channel list, e.g. `8,16,32`.
    pub arch: String,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            classes: 2,
            image_size: 64,
            train_size: 500,
            val_size: 50,
            coarse_factor: 8,
            coarse_blur: 0,
            lr: 0.05,
            momentum: 0.9,
            epochs: 20,
            batch_size: 4,
            patch_size: 0,
            seed: 42,
            units: 2,
            connection: ConnectionKind::ThreeWay,
            hidden_channels: 8,
            propagation_scale: 2,
            arch: "8,16,32".to_string(),
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
        }
    }
}

const KEYS: &[&str] = &[
    "classes",
    "image_size",
    "train_size",
    "val_size",
    "coarse_factor",
    "coarse_blur",
    "lr",
    "momentum",
    "epochs",
    "batch_size",
    "patch_size",
    "seed",
    "units",
    "connection",
    "hidden_channels",
    "propagation_scale",
    "arch",
    "data_dir",
    "out_dir",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| SpnError::Config(format!("invalid value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub fn keys() -> &'static [&'static str] {
        KEYS
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "classes" => self.classes = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "train_size" => self.train_size = parse(key, v)?,
            "val_size" => self.val_size = parse(key, v)?,
            "coarse_factor" => self.coarse_factor = parse(key, v)?,
            "coarse_blur" => self.coarse_blur = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "patch_size" => self.patch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "units" => self.units = parse(key, v)?,
            "connection" => self.connection = parse(key, v)?,
            "hidden_channels" => self.hidden_channels = parse(key, v)?,
            "propagation_scale" => self.propagation_scale = parse(key, v)?,
            "arch" => {
                GuidanceArch::parse_encoder(v)?;
                self.arch = v.to_string()
            }
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            other => return Err(SpnError::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Applies a `key=value` assignment.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| SpnError::Config(format!("expected key=value, got '{assignment}'")))?;
        self.set(k, v)
    }

    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            self.set_assignment(line)
                .map_err(|e| SpnError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_str_with_defaults(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_str_with_defaults(&std::fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    fn get(&self, key: &str) -> String {
        match key {
            "classes" => self.classes.to_string(),
            "image_size" => self.image_size.to_string(),
            "train_size" => self.train_size.to_string(),
            "val_size" => self.val_size.to_string(),
            "coarse_factor" => self.coarse_factor.to_string(),
            "coarse_blur" => self.coarse_blur.to_string(),
            "lr" => self.lr.to_string(),
            "momentum" => self.momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "patch_size" => self.patch_size.to_string(),
            "seed" => self.seed.to_string(),
            "units" => self.units.to_string(),
            "connection" => self.connection.to_string(),
            "hidden_channels" => self.hidden_channels.to_string(),
            "propagation_scale" => self.propagation_scale.to_string(),
            "arch" => self.arch.clone(),
            "data_dir" => self.data_dir.display().to_string(),
            "out_dir" => self.out_dir.display().to_string(),
            _ => unreachable!("key list and getter out of sync"),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn spn(&self) -> SpnConfig {
        SpnConfig {
            units: self.units,
            connection: self.connection,
            hidden_channels: self.hidden_channels,
            propagation_scale: self.propagation_scale,
        }
    }

    pub fn guidance_arch(&self) -> Result<GuidanceArch> {
        Ok(GuidanceArch {
            in_channels: 3,
            encoder: GuidanceArch::parse_encoder(&self.arch)?,
            hidden_channels: self.hidden_channels,
            connection: self.connection,
            propagation_scale: self.propagation_scale,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("classes", self.classes),
            ("image_size", self.image_size),
            ("train_size", self.train_size),
            ("val_size", self.val_size),
            ("coarse_factor", self.coarse_factor),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(SpnError::Config(format!("'{k}' must be positive")));
            }
        }
        if self.classes > 255 {
            return Err(SpnError::Config("at most 255 classes".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(SpnError::Config(format!("lr {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SpnError::Config(format!(
                "momentum {} not in [0,1)",
                self.momentum
            )));
        }
        if !self.image_size.is_multiple_of(self.coarse_factor) {
            return Err(SpnError::Config(format!(
                "coarse_factor {} must divide image_size {}",
                self.coarse_factor, self.image_size
            )));
        }
        self.spn().validate()?;
        let arch = self.guidance_arch()?;
        arch.validate()?;
        let m = arch.input_multiple();
        let crop = self.crop_size();
        if !crop.is_multiple_of(m) || crop > self.image_size {
            return Err(SpnError::Config(format!(
                "training crop {crop} must be a multiple of {m} no larger than the image"
            )));
        }
        if !self.image_size.is_multiple_of(m) {
            return Err(SpnError::Config(format!(
                "image_size must be a multiple of {m}"
            )));
        }
        Ok(())
    }

    /// Side length of the training crops.
    pub fn crop_size(&self) -> usize {
        if self.patch_size == 0 {
            self.image_size
        } else {
            self.patch_size
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_through_text() {
        let mut cfg = TrainConfig::default();
        cfg.set("lr", "0.05").unwrap();
        cfg.set("connection", "one-way").unwrap();
        cfg.set("out_dir", "/tmp/x y").unwrap();
        let back = TrainConfig::from_str_with_defaults(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_overrides_and_unknown_keys() {
        let cfg = TrainConfig::from_str_with_defaults("# c\n\nepochs = 3\nepochs=5\n").unwrap();
        assert_eq!(cfg.epochs, 5);
        let err = TrainConfig::from_str_with_defaults("epochz = 3").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        assert!(TrainConfig::from_str_with_defaults("epochs").is_err());
        assert!(TrainConfig::from_str_with_defaults("epochs = many").is_err());
        assert!(TrainConfig::from_str_with_defaults("arch = 8,,16").is_err());
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let bad = TrainConfig {
            coarse_factor: 7,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patch_size: 20,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
