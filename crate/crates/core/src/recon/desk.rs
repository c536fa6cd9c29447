//! A small helical setup that trains in about an hour on one core: 64×64
//! in-plane voxels of 2 mm, 4 mm slices, a 64×8 flat detector, 64 views per
//! turn and 16 mm table feed per turn.

use super::train::Scan;
use crate::error::{Error, Result};
use crate::geometry::{
    build_geometry, minimal_thickness, partition_turns, DetectorSpec, HelicalGeometry, TrajectoryParams,
    TurnPartition, VolumeSpec,
};
use crate::simulation::{hu_to_mu, make_phantom, random_phantom, simulate_data, truncate_trajectory, DoseModel};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

pub const DESK_PHOTONS: f64 = 1e4;

/// Noise seeds are offset from phantom seeds so the two streams never share
/// a seed.
const NOISE_SEED_OFFSET: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskScenario {
    pub volume: VolumeSpec,
    pub trajectory: TrajectoryParams,
    pub geometry: HelicalGeometry,
    pub partition: TurnPartition,
    pub photons: f64,
}

pub fn desk_detector() -> DetectorSpec {
    DetectorSpec { num_cols: 64, num_rows: 8, col_spacing: 4.0, row_spacing: 4.0 }
}

fn desk_volume(num_slices: usize) -> VolumeSpec {
    VolumeSpec { width: 64, height: 64, num_slices, voxel_size: [2.0, 2.0, 4.0], z_origin: 0.0 }
}

fn desk_trajectory(vol: &VolumeSpec) -> TrajectoryParams {
    let (z0, z1) = vol.z_center_extent();
    let pitch = 16.0;
    TrajectoryParams {
        angular_increment: TAU / 64.0,
        pitch_per_turn: vec![pitch],
        num_turns: ((z1 - z0) / pitch).ceil() + 4.0,
        source_radius: 300.0,
        source_detector_distance: 600.0,
        detector: desk_detector(),
        z_start: z0 - 2.0 * pitch,
        angle_start: 0.0,
    }
}

impl DeskScenario {
    /// The shortest desk volume whose truncated trajectory has exactly
    /// `turns` complete turns.
    pub fn with_turns(turns: usize) -> Result<Self> {
        for nz in 4..400 {
            let volume = desk_volume(nz);
            let trajectory = desk_trajectory(&volume);
            let full = build_geometry(&trajectory)?;
            let Ok(geometry) = truncate_trajectory(&full, &volume) else { continue };
            let Ok(thickness) = minimal_thickness(&geometry, &volume) else { continue };
            let Ok(partition) = partition_turns(&geometry, &volume, thickness) else { continue };
            if partition.num_turns() == turns {
                return Ok(DeskScenario { volume, trajectory, geometry, partition, photons: DESK_PHOTONS });
            }
            if partition.num_turns() > turns {
                break;
            }
        }
        Err(Error::Config(format!("no desk volume yields exactly {turns} complete turns")))
    }

    /// Random phantom `seed` with its simulated low-dose data.
    pub fn scan(&self, seed: u64) -> Result<Scan> {
        let hu = make_phantom(&random_phantom(seed, self.volume))?;
        let truth = hu_to_mu(&hu);
        let dose = DoseModel { photons_per_pixel: self.photons, rng_seed: seed.wrapping_add(NOISE_SEED_OFFSET) };
        let data = simulate_data(&truth, &self.geometry, &dose)?;
        Ok(Scan { truth, data, geometry: self.geometry.clone(), partition: self.partition.clone() })
    }
}
