//! Reconstruction: learned turn-split primal-dual, its unsplit reference,
//! gluing of partial reconstructions, the training loop, and the filtered
//! backprojection and Huber baselines.

pub mod desk;
pub mod fbp;
pub mod glue;
pub mod huber;
pub mod ilpdh;
pub mod presets;
pub mod train;

pub use fbp::{fbp_reconstruct, FbpConfig};
pub use glue::{glue, sliding_window_reconstruct, GluingWeights, Partial};
pub use huber::{huber_reconstruct, HuberConfig, HuberReport};
pub use ilpdh::{default_gains, ilpd_reconstruct, ilpdh_reconstruct, Problem, SplitNetwork};
pub use presets::{MethodPreset, Preset};
pub use train::{train, Scan, TrainConfig, TrainReport};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Zeros,
    Fbp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconConfig {
    /// Unrolled iterations M.
    pub iterations: usize,
    pub init_mode: InitMode,
    pub precision: Precision,
    /// Used when `init_mode` is `fbp`.
    #[serde(default)]
    pub fbp: FbpConfig,
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("at least one unrolled iteration is required".into()));
        }
        self.fbp.validate()
    }
}

impl Default for ReconConfig {
    fn default() -> Self {
        ReconConfig { iterations: 2, init_mode: InitMode::Zeros, precision: Precision::Single, fbp: FbpConfig::default() }
    }
}
