#![allow(dead_code)]

use helix_core::geometry::{build_geometry, minimal_thickness, partition_turns, TrajectoryParams};
use helix_core::{DetectorSpec, HelicalGeometry, TurnPartition, VolumeSpec};
use std::f64::consts::TAU;

pub struct Tiny {
    pub geometry: HelicalGeometry,
    pub volume: VolumeSpec,
    pub partition: TurnPartition,
}

/// An 8×8×12 volume scanned by `turns` complete turns of 16 views.
pub fn tiny(turns: usize) -> Tiny {
    let pitch = 3.0;
    let geometry = build_geometry(&TrajectoryParams {
        angular_increment: TAU / 16.0,
        pitch_per_turn: vec![pitch],
        num_turns: turns as f64,
        source_radius: 40.0,
        source_detector_distance: 80.0,
        detector: DetectorSpec { num_cols: 6, num_rows: 4, col_spacing: 4.0, row_spacing: 2.0 },
        z_start: -pitch * turns as f64 / 2.0,
        angle_start: 0.0,
    })
    .unwrap();
    let volume = VolumeSpec { width: 8, height: 8, num_slices: 12, voxel_size: [1.5, 1.5, 1.0], z_origin: -5.5 };
    let thickness = minimal_thickness(&geometry, &volume).unwrap();
    let partition = partition_turns(&geometry, &volume, thickness).unwrap();
    Tiny { geometry, volume, partition }
}

/// Deterministic values in [-1, 1).
pub fn pseudo(n: usize, seed: u64) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}
