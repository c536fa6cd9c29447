//! On-disk layout of phantom datasets and simulated scans.

use helix_core::geometry::TrajectoryParams;
use helix_core::{HelicalGeometry, TurnPartition, VolumeSpec};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DATASET_MANIFEST: &str = "manifest.json";
pub const SCAN_GEOMETRY: &str = "geometry.json";

pub fn phantom_file(k: usize) -> String {
    format!("phantom_{k:03}.vol")
}

pub fn sinogram_file(k: usize) -> String {
    format!("sino_{k:03}.sin")
}

/// Input of `phantom`: the grid every generated phantom is rasterized on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSetSpec {
    pub volume: VolumeSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomEntry {
    pub file: String,
    pub seed: u64,
    pub spec_sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub photons: f64,
    pub seed: u64,
    pub geometry_id: String,
    pub noise_seeds: Vec<u64>,
    pub sinograms: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volume: VolumeSpec,
    pub seed: u64,
    pub phantoms: Vec<PhantomEntry>,
    #[serde(default)]
    pub simulation: Option<SimulationRecord>,
}

/// Everything needed to interpret a sinogram: the truncated trajectory, the
/// volume it reconstructs onto and, when one exists, its turn partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanGeometry {
    pub trajectory: TrajectoryParams,
    pub geometry: HelicalGeometry,
    pub volume: VolumeSpec,
    pub partition: Option<TurnPartition>,
}

pub fn is_hu(path: &Path) -> bool {
    helix_core::volume::read_json::<helix_core::volume::VolumeSidecar>(&helix_core::volume::sidecar_path(path))
        .map(|s| s.units.as_deref() == Some(HU))
        .unwrap_or(false)
}

pub const HU: &str = "HU";
pub const MU: &str = "mm^-1";
