//! Built-in numerical checks on tiny instances.

use helix_core::geometry::{build_geometry, minimal_thickness, partition_turns, TrajectoryParams};
use helix_core::nn::invertible::{self, invertible_backward, stored_backward, stored_forward, CouplingState};
use helix_core::nn::{MemoryMeter, NetworkParams};
use helix_core::projector::{backproject_views, project_views};
use helix_core::recon::{default_gains, Problem, SplitNetwork};
use helix_core::{DetectorSpec, HelicalGeometry, TurnPartition, VolumeSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::f64::consts::TAU;
use std::ops::Range;
use std::time::Instant;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub value: f64,
    pub tolerance: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Faults {
    /// Scales every back projection by `1 + adjoint`.
    pub adjoint: f64,
}

struct Instance {
    geometry: HelicalGeometry,
    volume: VolumeSpec,
    partition: TurnPartition,
}

fn instance(turns: usize) -> helix_core::Result<Instance> {
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
    })?;
    let volume = VolumeSpec { width: 8, height: 8, num_slices: 12, voxel_size: [1.5, 1.5, 1.0], z_origin: -5.5 };
    let partition = partition_turns(&geometry, &volume, minimal_thickness(&geometry, &volume)?)?;
    Ok(Instance { geometry, volume, partition })
}

fn pseudo(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn rel_diff(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    d / norm(b).max(f64::MIN_POSITIVE)
}

fn back(spec: &VolumeSpec, data: &[f64], g: &HelicalGeometry, views: Range<usize>, faults: Faults) -> Vec<f64> {
    let mut out = backproject_views(spec, data, g, views);
    if faults.adjoint != 0.0 {
        out.iter_mut().for_each(|v| *v *= 1.0 + faults.adjoint);
    }
    out
}

fn check(name: &str, value: f64, tolerance: f64) -> Check {
    Check { name: name.into(), pass: value.is_finite() && value <= tolerance, value, tolerance }
}

fn adjoint(t: &Instance, rng: &mut ChaCha8Rng, faults: Faults) -> Check {
    let g = &t.geometry;
    let mut worst = 0.0f64;
    let mut ops = vec![(t.volume, 0..g.num_angles())];
    for (views, slices) in t.partition.turn_ranges.iter().zip(&t.partition.subvolume_ranges) {
        ops.push((t.volume.sub_slices(slices.clone()), views.clone()));
    }
    for (spec, views) in ops {
        let f = pseudo(spec.len(), rng);
        let u = pseudo(views.len() * g.detector.num_cells(), rng);
        let af = project_views(&spec, &f, g, views.clone());
        let atu = back(&spec, &u, g, views, faults);
        worst = worst.max((dot(&af, &u) - dot(&f, &atu)).abs() / (norm(&af) * norm(&u)));
    }
    check("adjoint identity", worst, 1e-12)
}

/// Assembles A column by column and compares both matrix-free operators
/// against the dense matrix.
fn dense_oracle(t: &Instance, rng: &mut ChaCha8Rng, faults: Faults) -> Check {
    let (spec, g) = (&t.volume, &t.geometry);
    let n = spec.len();
    let views = 0..g.num_angles();
    let mut unit = vec![0.0; n];
    let columns: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            unit[i] = 1.0;
            let c = project_views(spec, &unit, g, views.clone());
            unit[i] = 0.0;
            c
        })
        .collect();
    let f = pseudo(n, rng);
    let u = pseudo(g.data_len(), rng);
    let mut af = vec![0.0; g.data_len()];
    for (c, &fi) in columns.iter().zip(&f) {
        af.iter_mut().zip(c).for_each(|(a, v)| *a += fi * v);
    }
    let atu: Vec<f64> = columns.iter().map(|c| dot(c, &u)).collect();
    let fwd = rel_diff(&project_views(spec, &f, g, views.clone()), &af);
    let adj = rel_diff(&back(spec, &u, g, views, faults), &atu);
    check("dense matrix", fwd.max(adj), 1e-12)
}

fn network(t: &Instance, m: usize, seed: u64) -> (Problem<'_>, NetworkParams<f64>, Vec<f64>, CouplingState<f64>) {
    let problem = Problem::new(&t.geometry, &t.volume, &t.partition).expect("instance partition is valid");
    let params = NetworkParams::<f64>::random(m, seed, default_gains(problem));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..t.geometry.data_len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let init = CouplingState { primal: pseudo(problem.primal_len(), &mut rng), dual: pseudo(problem.dual_len(), &mut rng) };
    (problem, params, data, init)
}

fn round_trip(t: &Instance) -> helix_core::Result<Check> {
    let (problem, params, data, init) = network(t, 2, 5);
    let p32: NetworkParams<f32> = params.cast();
    let d32: Vec<f32> = data.iter().map(|&v| v as f32).collect();
    let net = SplitNetwork::new(problem, &d32, 2)?;
    let layers = net.layers();
    let start = CouplingState::<f32> {
        primal: init.primal.iter().map(|&v| v as f32).collect(),
        dual: init.dual.iter().map(|&v| v as f32).collect(),
    };
    let mut s = start.clone();
    invertible::forward(&layers, &p32, &mut s)?;
    invertible::inverse(&layers, &p32, &mut s)?;
    let widen = |s: &CouplingState<f32>| s.primal.iter().chain(&s.dual).map(|&v| v as f64).collect::<Vec<_>>();
    Ok(check("inverse round trip", rel_diff(&widen(&s), &widen(&start)), 1e-4))
}

fn gradient(t: &Instance, rng: &mut ChaCha8Rng) -> helix_core::Result<Vec<Check>> {
    let (problem, params, data, init) = network(t, 2, 9);
    let net = SplitNetwork::new(problem, &data, 2)?;
    let layers = net.layers();
    let w = CouplingState { primal: pseudo(problem.primal_len(), rng), dual: pseudo(problem.dual_len(), rng) };
    let loss = |s: &CouplingState<f64>| dot(&s.primal, &w.primal) + dot(&s.dual, &w.dual);

    let meter = MemoryMeter::new();
    let stored = stored_forward(&layers, &params, init.clone(), &meter)?;
    let fin = stored.final_state.clone();
    let mut g_stored = NetworkParams::zeros_like(&params);
    stored_backward(&layers, &params, stored, w.clone(), &mut g_stored)?;
    let mut g_inv = NetworkParams::zeros_like(&params);
    invertible_backward(&layers, &params, fin, w.clone(), &mut g_inv, &meter, None)?;
    let flat = |p: &NetworkParams<f64>| p.tensors().into_iter().flatten().copied().collect::<Vec<f64>>();
    let (gi, gs) = (flat(&g_inv), flat(&g_stored));

    let gmax = gi.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    let mut worst = 0.0f64;
    let mut sampled = 0;
    while sampled < 6 {
        let idx = rng.gen_range(0..gi.len());
        if gi[idx].abs() < 1e-3 * gmax {
            continue;
        }
        let eval = |delta: f64| -> helix_core::Result<f64> {
            let mut p = params.clone();
            let mut off = idx;
            for tensor in p.tensors_mut() {
                if off < tensor.len() {
                    tensor[off] += delta;
                    break;
                }
                off -= tensor.len();
            }
            let mut s = init.clone();
            invertible::forward(&layers, &p, &mut s)?;
            Ok(loss(&s))
        };
        let h = 1e-6;
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - gi[idx]).abs() / gi[idx].abs());
        sampled += 1;
    }
    Ok(vec![
        check("invertible vs stored gradient", rel_diff(&gi, &gs), 1e-10),
        check("finite differences", worst, 1e-5),
    ])
}

/// Runs every check; never stops at the first failure.
pub fn run(faults: Faults) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5e1f);
    let mut out = Vec::new();
    let started = Instant::now();
    let instances: Vec<Instance> = match [1usize, 3].iter().map(|&n| instance(n)).collect() {
        Ok(v) => v,
        Err(e) => {
            out.push(Check { name: format!("instance setup: {e}"), pass: false, value: f64::NAN, tolerance: 0.0 });
            return out;
        }
    };
    for t in &instances {
        out.push(adjoint(t, &mut rng, faults));
    }
    out.push(dense_oracle(&instances[0], &mut rng, faults));
    for t in &instances {
        match round_trip(t) {
            Ok(c) => out.push(c),
            Err(e) => out.push(Check { name: format!("inverse round trip: {e}"), pass: false, value: f64::NAN, tolerance: 1e-4 }),
        }
    }
    match gradient(&instances[1], &mut rng) {
        Ok(cs) => out.extend(cs),
        Err(e) => out.push(Check { name: format!("gradient: {e}"), pass: false, value: f64::NAN, tolerance: 0.0 }),
    }
    out.push(Check { name: "runtime seconds".into(), pass: started.elapsed().as_secs_f64() <= 60.0, value: started.elapsed().as_secs_f64(), tolerance: 60.0 });
    out
}
