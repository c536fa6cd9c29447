//! Shipped method presets. Every numeric default of a method lives in one of
//! these JSON files.

use super::fbp::FbpConfig;
use super::huber::HuberConfig;
use super::train::TrainConfig;
use super::ReconConfig;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ILPDH1: &str = include_str!("../../presets/ilpdh1.json");
pub const ILPDH3: &str = include_str!("../../presets/ilpdh3.json");
pub const FBP: &str = include_str!("../../presets/fbp.json");
pub const HUBER: &str = include_str!("../../presets/huber.json");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum MethodPreset {
    Ilpdh { recon: ReconConfig, train: TrainConfig, init_seed: u64 },
    Fbp { fbp: FbpConfig },
    Huber { huber: HuberConfig },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preset {
    pub name: String,
    #[serde(flatten)]
    pub method: MethodPreset,
}

impl Preset {
    pub fn builtin(name: &str) -> Result<Preset> {
        let text = match name {
            "ilpdh1" => ILPDH1,
            "ilpdh3" => ILPDH3,
            "fbp" => FBP,
            "huber" => HUBER,
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Self::parse(text)
    }

    pub fn parse(text: &str) -> Result<Preset> {
        let p: Preset = serde_json::from_str(text)?;
        match &p.method {
            MethodPreset::Ilpdh { recon, train, .. } => {
                recon.validate()?;
                train.validate()?;
            }
            MethodPreset::Fbp { fbp } => fbp.validate()?,
            MethodPreset::Huber { huber } => huber.validate()?,
        }
        Ok(p)
    }

    pub fn ilpdh(&self) -> Result<(&ReconConfig, &TrainConfig, u64)> {
        match &self.method {
            MethodPreset::Ilpdh { recon, train, init_seed } => Ok((recon, train, *init_seed)),
            _ => Err(Error::Config(format!("preset {} is not a learned method", self.name))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse_with_paper_defaults() {
        let (recon, train, _) = Preset::builtin("ilpdh3").unwrap().ilpdh().map(|(a, b, c)| (a.clone(), b.clone(), c)).unwrap();
        assert_eq!(train.window, 3);
        assert_eq!(train.iterations, 5000);
        assert_eq!(train.batch_size, 1);
        assert_eq!(train.lr, 5e-4);
        assert_eq!(recon.init_mode, super::super::InitMode::Fbp);
        assert_eq!(Preset::builtin("ilpdh1").unwrap().ilpdh().unwrap().1.window, 1);
        match Preset::builtin("huber").unwrap().method {
            MethodPreset::Huber { huber } => assert_eq!((huber.lambda, huber.theta, huber.iterations), (0.15, 0.0012, 20)),
            _ => panic!("huber preset has the wrong method"),
        }
        match Preset::builtin("fbp").unwrap().method {
            MethodPreset::Fbp { fbp } => assert_eq!(fbp.bandwidth_fraction, 0.45),
            _ => panic!("fbp preset has the wrong method"),
        }
        assert!(Preset::builtin("unet").is_err());
    }
}
