//! Gluing overlapping partial reconstructions by inverse-distance weights,
//! and the sliding-window reconstructors built on it.

use super::ilpdh::{ilpdh_reconstruct, Problem};
use super::ReconConfig;
use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, TurnPartition, VolumeSpec};
use crate::nn::params::NetworkParams;
use crate::real::Real;
use crate::volume::{Sinogram, Volume};
use std::ops::Range;

/// A partial reconstruction covering `slices` of the target volume.
#[derive(Clone, Debug)]
pub struct Partial {
    pub volume: Volume<f64>,
    pub slices: Range<usize>,
    /// Center slice in target coordinates; may be fractional.
    pub center: f64,
    pub thickness: usize,
}

impl Partial {
    /// Partial centered on the middle of its slice range.
    pub fn centered(volume: Volume<f64>, slices: Range<usize>) -> Self {
        let center = (slices.start + slices.end - 1) as f64 / 2.0;
        let thickness = slices.len();
        Partial { volume, slices, center, thickness }
    }
}

/// Gluing weights `w_{z,j} = 1/|z − z_c^j|` within half a thickness of
/// each center.
#[derive(Clone, Debug, PartialEq)]
pub struct GluingWeights {
    pub centers: Vec<f64>,
    pub thicknesses: Vec<usize>,
    pub ranges: Vec<Range<usize>>,
}

impl GluingWeights {
    pub fn of(partials: &[Partial]) -> Self {
        GluingWeights {
            centers: partials.iter().map(|p| p.center).collect(),
            thicknesses: partials.iter().map(|p| p.thickness).collect(),
            ranges: partials.iter().map(|p| p.slices.clone()).collect(),
        }
    }

    /// Unnormalized weights at slice `z`. A partial centered exactly on `z`
    /// takes the limit of the formula: it alone carries the slice.
    pub fn raw(&self, z: usize) -> Vec<f64> {
        let zf = z as f64;
        let inside: Vec<bool> = (0..self.centers.len())
            .map(|j| self.ranges[j].contains(&z) && (zf - self.centers[j]).abs() <= self.thicknesses[j] as f64 / 2.0)
            .collect();
        let centered: Vec<bool> = (0..self.centers.len()).map(|j| inside[j] && zf == self.centers[j]).collect();
        if centered.iter().any(|&c| c) {
            return centered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
        }
        (0..self.centers.len())
            .map(|j| if inside[j] { 1.0 / (zf - self.centers[j]).abs() } else { 0.0 })
            .collect()
    }

    /// Weights at `z` normalized to sum to one.
    pub fn normalized(&self, z: usize) -> Result<Vec<f64>> {
        let w = self.raw(z);
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            return Err(Error::UncoveredSlice(z));
        }
        Ok(w.into_iter().map(|v| v / total).collect())
    }
}

/// Glues `partials` into a volume over `target` (slices of `full`).
pub fn glue(partials: &[Partial], full: &VolumeSpec, target: Range<usize>) -> Result<Volume<f64>> {
    let spec = full.sub_slices(target.clone());
    let n = full.slice_len();
    for p in partials {
        if p.volume.spec.width != full.width
            || p.volume.spec.height != full.height
            || p.volume.spec.num_slices != p.slices.len()
        {
            return Err(Error::ShapeMismatch(format!("partial over {:?} has the wrong shape", p.slices)));
        }
    }
    let weights = GluingWeights::of(partials);
    let mut out = Volume::zeros(spec);
    for (k, z) in target.clone().enumerate() {
        let w = weights.raw(z);
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            return Err(Error::UncoveredSlice(z));
        }
        let dst = &mut out.data[k * n..(k + 1) * n];
        let mut active = (0..w.len()).filter(|&j| w[j] != 0.0);
        if let (Some(j), None) = (active.next(), active.next()) {
            let p = &partials[j];
            dst.copy_from_slice(p.volume.slice(z - p.slices.start));
            continue;
        }
        for (j, p) in partials.iter().enumerate() {
            if w[j] == 0.0 {
                continue;
            }
            let src = p.volume.slice(z - p.slices.start);
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += w[j] * s);
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    Ok(out)
}

/// Reconstructs every run of `window` consecutive turns independently and
/// glues the results. Window 1 gives g-iLPDh₁, window 3 gives g-iLPDh₃.
/// Returns the glued volume over the covered slices and that slice range.
pub fn sliding_window_reconstruct<T: Real>(
    g: &Sinogram<T>,
    geometry: &HelicalGeometry,
    volume: &VolumeSpec,
    partition: &TurnPartition,
    params: &NetworkParams<T>,
    cfg: &ReconConfig,
    window: usize,
) -> Result<(Volume<f64>, Range<usize>)> {
    g.check(geometry)?;
    let ns = partition.num_turns();
    if window == 0 || window > ns {
        return Err(Error::Config(format!("window of {window} turns on a scan with {ns} complete turns")));
    }
    let mut partials = Vec::with_capacity(ns + 1 - window);
    for q in 0..=ns - window {
        let w = partition.window(geometry, volume, q, window)?;
        let data = g.crop_angles(w.angle_range.clone());
        let problem = Problem::new(&w.geometry, &w.volume, &w.partition)?;
        let rec = ilpdh_reconstruct(&data, problem, params, cfg)?;
        let covered = problem.covered();
        let slices = w.slice_range.start + covered.start..w.slice_range.start + covered.end;
        partials.push(Partial::centered(rec.cast(), slices));
    }
    let target = partition.slice_union(0..ns);
    Ok((glue(&partials, volume, target.clone())?, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(spec: &VolumeSpec, slices: Range<usize>, c: f64) -> Partial {
        let s = spec.sub_slices(slices.clone());
        Partial::centered(Volume::from_data(s, vec![c; s.len()]).unwrap(), slices)
    }

    fn spec() -> VolumeSpec {
        VolumeSpec { width: 2, height: 2, num_slices: 20, voxel_size: [1.0; 3], z_origin: 0.0 }
    }

    #[test]
    fn single_partial_is_identity() {
        let s = spec();
        let sub = s.sub_slices(3..10);
        let data: Vec<f64> = (0..sub.len()).map(|i| i as f64).collect();
        let p = Partial::centered(Volume::from_data(sub, data.clone()).unwrap(), 3..10);
        let out = glue(&[p], &s, 3..10).unwrap();
        assert_eq!(out.data, data);
        assert!(glue(&[constant(&s, 3..10, 1.0)], &s, 2..10).is_err());
    }

    #[test]
    fn hand_computed_weights() {
        let s = spec();
        // Centers 5, 9, 13 with thickness 11: slice 6 is 1 from the first
        // center, 3 from the second and 7 from the third (beyond 5.5).
        let parts = [constant(&s, 0..11, 2.0), constant(&s, 4..15, 3.0), constant(&s, 8..19, 7.0)];
        let out = glue(&parts, &s, 0..19).unwrap();
        let want = (1.0 / 1.0 * 2.0 + 1.0 / 3.0 * 3.0) / (1.0 / 1.0 + 1.0 / 3.0);
        assert_eq!(out.slice(6)[0], want);
        assert_eq!(out.slice(5)[0], 2.0);
        let w = GluingWeights::of(&parts);
        for z in 0..19 {
            let n = w.normalized(z).unwrap();
            assert!((n.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
