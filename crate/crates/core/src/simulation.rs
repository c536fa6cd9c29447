//! Procedural phantoms and low-dose data simulation.

use crate::error::{Error, Result};
use crate::geometry::{view_fits_volume, HelicalGeometry, VolumeSpec};
use crate::projector::project_views;
use crate::real::Real;
use crate::volume::{Sinogram, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Linear attenuation of water at the mean beam energy, mm⁻¹.
pub const MU_WATER: f64 = 0.0192;

/// Photons per detector pixel of the low-dose protocol.
pub const LOW_DOSE_PHOTONS: f64 = 1e4;

/// Hounsfield units to linear attenuation: `(hu / 1000 + 1) · μ_water`.
pub fn hu_to_mu<T: Real>(f_hu: &Volume<T>) -> Volume<T> {
    Volume {
        spec: f_hu.spec,
        data: f_hu.data.iter().map(|&h| T::of((h.f64() / 1000.0 + 1.0) * MU_WATER)).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    /// World coordinates of the center, mm.
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Rotation about the z axis, radians.
    pub rotation: f64,
    pub value_hu: f64,
}

impl Ellipsoid {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let dz = p[2] - self.center[2];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [a, b, h] = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) + (dz / h).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub rng_seed: u64,
    pub volume: VolumeSpec,
    pub ellipsoids: Vec<Ellipsoid>,
    pub background_hu: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        self.volume.validate()?;
        if !self.background_hu.is_finite() {
            return Err(Error::Config("background HU must be finite".into()));
        }
        for (k, e) in self.ellipsoids.iter().enumerate() {
            if e.semi_axes.iter().any(|&a| !(a > 0.0)) {
                return Err(Error::Config(format!("ellipsoid {k} has a nonpositive semi-axis")));
            }
            if !e.value_hu.is_finite() || e.center.iter().any(|c| !c.is_finite()) || !e.rotation.is_finite() {
                return Err(Error::Config(format!("ellipsoid {k} has non-finite parameters")));
            }
        }
        Ok(())
    }
}

/// Rasterizes the ellipsoids over the background; later ellipsoids overwrite
/// earlier ones wherever they overlap. Values are in HU.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume<f32>> {
    spec.validate()?;
    let v = spec.volume;
    let mut out = Volume::<f32>::zeros(v);
    out.data.par_chunks_mut(v.slice_len()).enumerate().for_each(|(z, slice)| {
        let wz = v.z_of(z as f64);
        for y in 0..v.height {
            let wy = v.y_of(y as f64);
            for x in 0..v.width {
                let p = [v.x_of(x as f64), wy, wz];
                let mut val = spec.background_hu;
                for e in &spec.ellipsoids {
                    if e.contains(p) {
                        val = e.value_hu;
                    }
                }
                slice[y * v.width + x] = val as f32;
            }
        }
    });
    Ok(out)
}

/// Draws a body-like scene from fixed uniform ranges:
///
/// * background air, −1000 HU;
/// * a body cylinder along z with in-plane semi-axes in `[0.70, 0.90]` and
///   `[0.55, 0.80]` of the half field of view, value in `[−20, 60]` HU;
/// * 4 to 10 inner ellipsoids centered inside the body, in-plane semi-axes in
///   `[0.06, 0.25]` of the half field of view, z semi-axis in `[0.15, 0.6]` of
///   the volume height, rotation in `[0, π)`; values in `[−120, 200]` HU, or
///   bone-like `[400, 1000]` HU with probability 0.2.
pub fn random_phantom(seed: u64, volume: VolumeSpec) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_w = volume.width as f64 * volume.voxel_size[0] / 2.0;
    let half_h = volume.height as f64 * volume.voxel_size[1] / 2.0;
    let (z0, z1) = volume.z_center_extent();
    let height = (z1 - z0).max(volume.voxel_size[2]);
    let zc = 0.5 * (z0 + z1);
    let body_a = rng.gen_range(0.70..0.90) * half_w;
    let body_b = rng.gen_range(0.55..0.80) * half_h;
    let mut ellipsoids = vec![Ellipsoid {
        center: [0.0, 0.0, zc],
        semi_axes: [body_a, body_b, 10.0 * height],
        rotation: 0.0,
        value_hu: rng.gen_range(-20.0..60.0),
    }];
    let count = rng.gen_range(4..=10);
    for _ in 0..count {
        let r = rng.gen_range(0.0..0.6f64).sqrt();
        let t = rng.gen_range(0.0..2.0 * PI);
        let center = [r * t.cos() * body_a, r * t.sin() * body_b, rng.gen_range(z0..=z1)];
        let semi_axes = [
            rng.gen_range(0.06..0.25) * half_w,
            rng.gen_range(0.06..0.25) * half_h,
            rng.gen_range(0.15..0.6) * height,
        ];
        let rotation = rng.gen_range(0.0..PI);
        let value_hu = if rng.gen_bool(0.2) {
            rng.gen_range(400.0..1000.0)
        } else {
            rng.gen_range(-120.0..200.0)
        };
        ellipsoids.push(Ellipsoid { center, semi_axes, rotation, value_hu });
    }
    PhantomSpec { rng_seed: seed, volume, ellipsoids, background_hu: -1000.0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoseModel {
    pub photons_per_pixel: f64,
    pub rng_seed: u64,
}

impl DoseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.photons_per_pixel >= 1.0) || !self.photons_per_pixel.is_finite() {
            return Err(Error::Config(format!(
                "photon count must be at least 1, got {}",
                self.photons_per_pixel
            )));
        }
        Ok(())
    }
}

/// Independent random stream for one sinogram cell.
pub fn cell_rng(seed: u64, cell: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell);
    rng
}

/// `ln Γ(x)` for `x > 0` via the Stirling series after shifting `x ≥ 8`.
pub fn ln_gamma(mut x: f64) -> f64 {
    let mut acc = 0.0;
    while x < 8.0 {
        acc -= x.ln();
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 * (1.0 / 1680.0 - inv2 / 1188.0))));
    acc + (x - 0.5) * x.ln() - x + 0.5 * (2.0 * PI).ln() + series
}

/// Poisson variate with mean `lambda`.
///
/// Means below 10 use sequential inversion of the CDF. Larger means use the
/// transformed rejection method with squeeze (PTRS) of Hörmann (1993), which
/// needs two uniforms per trial and accepts with probability above 0.9.
pub fn sample_poisson<R: Rng>(rng: &mut R, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    if lambda < 10.0 {
        let u: f64 = rng.gen();
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cdf = p;
        while u > cdf && k < 1000 {
            k += 1;
            p *= lambda / k as f64;
            cdf += p;
        }
        return k;
    }
    let slam = lambda.sqrt();
    let loglam = lambda.ln();
    let b = 0.931 + 2.53 * slam;
    let a = -0.059 + 0.02483 * b;
    let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
    let vr = 0.9277 - 3.6224 / (b - 2.0);
    loop {
        let u = rng.gen::<f64>() - 0.5;
        let v: f64 = rng.gen();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
        if us >= 0.07 && v <= vr {
            return k as u64;
        }
        if k < 0.0 || (us < 0.013 && v > us) {
            continue;
        }
        if v.ln() + inv_alpha.ln() - (a / (us * us) + b).ln() <= -lambda + k * loglam - ln_gamma(k + 1.0) {
            return k as u64;
        }
    }
}

/// Noisy linearized data: `g = −ln(max(N, 1) / H_0)` with
/// `N ~ Poisson(H_0 · exp(−A f))` drawn independently per cell.
pub fn simulate_data<T: Real>(
    f: &Volume<T>,
    geom: &HelicalGeometry,
    dose: &DoseModel,
) -> Result<Sinogram<T>> {
    dose.validate()?;
    geom.validate()?;
    let f64_data: Vec<f64> = f.data.iter().map(|v| v.f64()).collect();
    let line = project_views(&f.spec, &f64_data, geom, 0..geom.num_angles());
    let h0 = dose.photons_per_pixel;
    if let Some(k) = line.iter().position(|&l| !l.is_finite() || h0 * (-l).exp() == 0.0) {
        return Err(Error::Simulation(format!(
            "expected photon count underflows at cell {k} (line integral {})",
            line[k]
        )));
    }
    let seed = dose.rng_seed;
    let data = line
        .par_iter()
        .enumerate()
        .map(|(k, &l)| {
            let mut rng = cell_rng(seed, k as u64);
            let n = sample_poisson(&mut rng, h0 * (-l).exp()).max(1);
            T::of(-(n as f64 / h0).ln())
        })
        .collect();
    Ok(Sinogram {
        geometry_id: geom.id(),
        num_angles: geom.num_angles(),
        num_rows: geom.detector.num_rows,
        num_cols: geom.detector.num_cols,
        data,
    })
}

/// Keeps the longest contiguous run of source positions whose rays stay
/// within the slice-center z range of `vol` while over its footprint.
pub fn truncate_trajectory(geom: &HelicalGeometry, vol: &VolumeSpec) -> Result<HelicalGeometry> {
    geom.validate()?;
    vol.validate()?;
    let fits: Vec<bool> = (0..geom.num_angles()).into_par_iter().map(|i| view_fits_volume(geom, i, vol)).collect();
    let mut best = 0..0;
    let mut start = None;
    for (i, &ok) in fits.iter().chain(std::iter::once(&false)).enumerate() {
        match (ok, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                if i - s > best.len() {
                    best = s..i;
                }
                start = None;
            }
            _ => {}
        }
    }
    if best.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    Ok(geom.slice_angles(best))
}
