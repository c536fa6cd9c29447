//! Interpolating (Joseph) ray transform with its matched adjoint, the
//! turn-restricted operators and the split/pad operators.
//!
//! Each ray runs from the source to the center of a detector cell. It is
//! sampled on every voxel-center plane orthogonal to its dominant axis; on
//! each plane the image is bilinearly interpolated with zero extension and the
//! sample is weighted by the physical step length between planes. Forward and
//! back projection visit the same (voxel, weight) pairs in the same order, so
//! the back projector is the exact transpose of the forward projector.

use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, Point3, TurnPartition, VolumeSpec};
use crate::real::Real;
use crate::volume::{Sinogram, Volume};
use rayon::prelude::*;
use std::ops::Range;

/// Fixed number of view groups used by the back projector. Each group
/// scatters into a private buffer and the buffers are summed in group order,
/// which keeps the result independent of the worker count.
const BACKPROJECT_GROUPS: usize = 8;

/// Visits every (voxel index, weight) pair of the ray `src → dst`.
#[inline]
pub fn trace_ray(vol: &VolumeSpec, src: Point3, dst: Point3, mut visit: impl FnMut(usize, f64)) {
    let dims = [vol.width, vol.height, vol.num_slices];
    let d = vol.voxel_size;
    let origin = [vol.x_of(0.0), vol.y_of(0.0), vol.z_origin];
    let r = [dst[0] - src[0], dst[1] - src[1], dst[2] - src[2]];
    let scaled = [r[0].abs() / d[0], r[1].abs() / d[1], r[2].abs() / d[2]];
    let main = if scaled[0] >= scaled[1] && scaled[0] >= scaled[2] {
        0
    } else if scaled[1] >= scaled[2] {
        1
    } else {
        2
    };
    if r[main] == 0.0 {
        return;
    }
    let (b, c) = match main {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let len = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let step = d[main] * len / r[main].abs();
    let strides = [1usize, vol.width, vol.width * vol.height];
    let (nb, nc) = (dims[b] as isize, dims[c] as isize);
    // Every plane coordinate is affine in k. Keep only the k where the
    // sample can land in (-1, n) on both transverse axes, with a margin.
    let t0 = (origin[main] - src[main]) / r[main];
    let dt = d[main] / r[main];
    let mut k_lo = 0.0f64;
    let mut k_hi = dims[main] as f64 - 1.0;
    let mut affine = [(0.0, 0.0); 2];
    for (slot, (a, n)) in [(b, nb), (c, nc)].into_iter().enumerate() {
        let slope = dt * r[a] / d[a];
        let at0 = (src[a] + t0 * r[a] - origin[a]) / d[a];
        affine[slot] = (at0, slope);
        if slope == 0.0 {
            if !(at0 > -2.0 && at0 < n as f64 + 1.0) {
                return;
            }
            continue;
        }
        let (e0, e1) = ((-1.0 - at0) / slope, (n as f64 - at0) / slope);
        k_lo = k_lo.max(e0.min(e1).floor() - 1.0);
        k_hi = k_hi.min(e0.max(e1).ceil() + 1.0);
    }
    if !(k_lo <= k_hi) {
        return;
    }
    let [(b0, sb), (c0, sc)] = affine;
    let (sb_stride, sc_stride) = (strides[b], strides[c]);
    for k in k_lo as usize..=k_hi as usize {
        let kf = k as f64;
        let t = t0 + kf * dt;
        if !(0.0..=1.0).contains(&t) {
            continue;
        }
        let cb = b0 + kf * sb;
        let cc = c0 + kf * sc;
        let ib = cb.floor() as isize;
        let ic = cc.floor() as isize;
        if ib < -1 || ib >= nb || ic < -1 || ic >= nc {
            continue;
        }
        let fb = cb - ib as f64;
        let fc = cc - ic as f64;
        let base = k * strides[main];
        if ib >= 0 && ib + 1 < nb && ic >= 0 && ic + 1 < nc {
            let idx = base + ib as usize * sb_stride + ic as usize * sc_stride;
            let (w0, w1) = (step * (1.0 - fc), step * fc);
            visit(idx, w0 * (1.0 - fb));
            visit(idx + sb_stride, w0 * fb);
            visit(idx + sc_stride, w1 * (1.0 - fb));
            visit(idx + sb_stride + sc_stride, w1 * fb);
            continue;
        }
        for (oc, wc) in [(0isize, 1.0 - fc), (1, fc)] {
            let jc = ic + oc;
            if jc < 0 || jc >= nc || wc == 0.0 {
                continue;
            }
            for (ob, wb) in [(0isize, 1.0 - fb), (1, fb)] {
                let jb = ib + ob;
                if jb < 0 || jb >= nb || wb == 0.0 {
                    continue;
                }
                let idx = base + jb as usize * sb_stride + jc as usize * sc_stride;
                visit(idx, step * wc * wb);
            }
        }
    }
}

/// Ray sums for the views `views` of `geom`, layout (view, row, col).
pub fn project_views<T: Real>(
    spec: &VolumeSpec,
    image: &[T],
    geom: &HelicalGeometry,
    views: Range<usize>,
) -> Vec<T> {
    assert_eq!(image.len(), spec.len(), "image does not match its spec");
    assert!(views.end <= geom.num_angles(), "view range outside trajectory");
    let det = geom.detector;
    let per_view = det.num_cells();
    let mut out = vec![T::zero(); views.len() * per_view];
    out.par_chunks_mut(per_view.max(1)).zip(views).for_each(|(chunk, i)| {
        let frame = geom.frame(i);
        for row in 0..det.num_rows {
            for col in 0..det.num_cols {
                let mut acc = 0.0f64;
                trace_ray(spec, frame.source, frame.cell(&det, col, row), |idx, w| {
                    acc += w * image[idx].f64();
                });
                chunk[row * det.num_cols + col] = T::of(acc);
            }
        }
    });
    out
}

/// Transpose of [`project_views`].
pub fn backproject_views<T: Real>(
    spec: &VolumeSpec,
    data: &[T],
    geom: &HelicalGeometry,
    views: Range<usize>,
) -> Vec<T> {
    let det = geom.detector;
    let per_view = det.num_cells();
    assert_eq!(data.len(), views.len() * per_view, "data does not match view range");
    assert!(views.end <= geom.num_angles(), "view range outside trajectory");
    let n = views.len();
    let groups = BACKPROJECT_GROUPS.min(n.max(1));
    let partials: Vec<Vec<f64>> = (0..groups)
        .into_par_iter()
        .map(|g| {
            let mut buf = vec![0.0f64; spec.len()];
            let lo = g * n / groups;
            let hi = (g + 1) * n / groups;
            for v in lo..hi {
                let frame = geom.frame(views.start + v);
                let view = &data[v * per_view..(v + 1) * per_view];
                for row in 0..det.num_rows {
                    for col in 0..det.num_cols {
                        let val = view[row * det.num_cols + col].f64();
                        if val == 0.0 {
                            continue;
                        }
                        trace_ray(spec, frame.source, frame.cell(&det, col, row), |idx, w| {
                            buf[idx] += w * val;
                        });
                    }
                }
            }
            buf
        })
        .collect();
    let mut out = vec![0.0f64; spec.len()];
    for p in &partials {
        out.par_iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    out.into_iter().map(T::of).collect()
}

/// The ray transform `A`.
pub fn forward_project<T: Real>(f: &Volume<T>, geom: &HelicalGeometry) -> Sinogram<T> {
    let data = project_views(&f.spec, &f.data, geom, 0..geom.num_angles());
    Sinogram {
        geometry_id: geom.id(),
        num_angles: geom.num_angles(),
        num_rows: geom.detector.num_rows,
        num_cols: geom.detector.num_cols,
        data,
    }
}

/// The adjoint `A*`.
pub fn back_project<T: Real>(
    u: &Sinogram<T>,
    geom: &HelicalGeometry,
    spec: &VolumeSpec,
) -> Result<Volume<T>> {
    u.check(geom)?;
    let data = backproject_views(spec, &u.data, geom, 0..geom.num_angles());
    Volume::from_data(*spec, data)
}

/// Restriction of the ray transform to one turn and its sub-volume.
#[derive(Clone, Copy, Debug)]
pub struct TurnRestriction<'a> {
    pub partition: &'a TurnPartition,
    pub turn: usize,
}

impl<'a> TurnRestriction<'a> {
    pub fn new(partition: &'a TurnPartition, turn: usize) -> Result<Self> {
        if turn >= partition.num_turns() {
            return Err(Error::IndexOutOfRange { index: turn, len: partition.num_turns() });
        }
        Ok(TurnRestriction { partition, turn })
    }

    pub fn views(&self) -> Range<usize> {
        self.partition.turn_ranges[self.turn].clone()
    }

    pub fn slices(&self) -> Range<usize> {
        self.partition.subvolume_ranges[self.turn].clone()
    }

    pub fn subvolume_spec(&self, full: &VolumeSpec) -> VolumeSpec {
        full.sub_slices(self.slices())
    }

    /// `A^j` on raw buffers: sub-volume in, data chunk out.
    pub fn apply<T: Real>(&self, geom: &HelicalGeometry, sub_spec: &VolumeSpec, sub: &[T]) -> Vec<T> {
        project_views(sub_spec, sub, geom, self.views())
    }

    /// `(A^j)*` on raw buffers.
    pub fn adjoint<T: Real>(&self, geom: &HelicalGeometry, sub_spec: &VolumeSpec, chunk: &[T]) -> Vec<T> {
        backproject_views(sub_spec, chunk, geom, self.views())
    }
}

fn chunk_sinogram<T>(geom: &HelicalGeometry, views: usize, data: Vec<T>) -> Sinogram<T> {
    Sinogram {
        geometry_id: geom.id(),
        num_angles: views,
        num_rows: geom.detector.num_rows,
        num_cols: geom.detector.num_cols,
        data,
    }
}

pub fn forward_project_turn<T: Real>(
    f_sub: &Volume<T>,
    restriction: TurnRestriction<'_>,
    geom: &HelicalGeometry,
    full: &VolumeSpec,
) -> Result<Sinogram<T>> {
    let sub_spec = restriction.subvolume_spec(full);
    if f_sub.spec != sub_spec {
        return Err(Error::ShapeMismatch(format!(
            "sub-volume spec does not match turn {} of the partition",
            restriction.turn
        )));
    }
    let data = restriction.apply(geom, &sub_spec, &f_sub.data);
    Ok(chunk_sinogram(geom, restriction.views().len(), data))
}

pub fn back_project_turn<T: Real>(
    u_chunk: &Sinogram<T>,
    restriction: TurnRestriction<'_>,
    geom: &HelicalGeometry,
    full: &VolumeSpec,
) -> Result<Volume<T>> {
    let views = restriction.views();
    if u_chunk.num_angles != views.len()
        || u_chunk.num_rows != geom.detector.num_rows
        || u_chunk.num_cols != geom.detector.num_cols
    {
        return Err(Error::ShapeMismatch(format!(
            "data chunk does not match turn {} of the partition",
            restriction.turn
        )));
    }
    let sub_spec = restriction.subvolume_spec(full);
    let data = restriction.adjoint(geom, &sub_spec, &u_chunk.data);
    Volume::from_data(sub_spec, data)
}

/// `P_{X^j}`: the sub-volume of turn `j`.
pub fn project_image<T: Real>(f: &Volume<T>, partition: &TurnPartition, j: usize) -> Result<Volume<T>> {
    let r = TurnRestriction::new(partition, j)?.slices();
    if r.end > f.spec.num_slices {
        return Err(Error::ShapeMismatch(format!(
            "sub-volume {r:?} outside volume of {} slices",
            f.spec.num_slices
        )));
    }
    Ok(f.crop_slices(r))
}

/// `P̃_{X^j}`: zero padding of a sub-volume back into the full volume.
pub fn pad_image<T: Real>(
    f_sub: &Volume<T>,
    partition: &TurnPartition,
    j: usize,
    full: &VolumeSpec,
) -> Result<Volume<T>> {
    let r = TurnRestriction::new(partition, j)?.slices();
    if f_sub.spec != full.sub_slices(r.clone()) {
        return Err(Error::ShapeMismatch(format!("sub-volume does not match range {r:?}")));
    }
    let mut out = Volume::zeros(*full);
    let n = full.slice_len();
    out.data[r.start * n..r.end * n].copy_from_slice(&f_sub.data);
    Ok(out)
}

/// `P_{Y^j}`: the data chunk of turn `j`.
pub fn project_data<T: Real>(g: &Sinogram<T>, partition: &TurnPartition, j: usize) -> Result<Sinogram<T>> {
    let r = TurnRestriction::new(partition, j)?.views();
    if r.end > g.num_angles {
        return Err(Error::ShapeMismatch(format!("turn {r:?} outside sinogram of {} views", g.num_angles)));
    }
    Ok(g.crop_angles(r))
}

/// `P̃_{Y^j}`: zero padding of a data chunk back into the full data space.
pub fn pad_data<T: Real>(
    chunk: &Sinogram<T>,
    partition: &TurnPartition,
    j: usize,
    geom: &HelicalGeometry,
) -> Result<Sinogram<T>> {
    let r = TurnRestriction::new(partition, j)?.views();
    if chunk.num_angles != r.len()
        || chunk.num_rows != geom.detector.num_rows
        || chunk.num_cols != geom.detector.num_cols
    {
        return Err(Error::ShapeMismatch(format!("chunk does not match turn range {r:?}")));
    }
    let mut out = Sinogram::zeros(
        chunk.geometry_id.clone(),
        geom.num_angles(),
        geom.detector.num_rows,
        geom.detector.num_cols,
    );
    let v = out.view_len();
    out.data[r.start * v..r.end * v].copy_from_slice(&chunk.data);
    Ok(out)
}

/// Largest singular value of `A` restricted to `views`, by power iteration
/// on `A*A` from the all-ones image.
pub fn operator_norm(spec: &VolumeSpec, geom: &HelicalGeometry, views: Range<usize>, iterations: usize) -> f64 {
    let mut x = vec![1.0f64; spec.len()];
    let mut est = 0.0;
    for _ in 0..iterations.max(1) {
        let nx = crate::real::norm(&x);
        if nx == 0.0 {
            return 0.0;
        }
        x.iter_mut().for_each(|v| *v /= nx);
        let y = project_views(spec, &x, geom, views.clone());
        x = backproject_views(spec, &y, geom, views.clone());
        est = crate::real::norm(&x);
    }
    est.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, partition_turns, minimal_thickness, DetectorSpec, TrajectoryParams};
    use std::f64::consts::TAU;

    fn tiny() -> (HelicalGeometry, VolumeSpec) {
        let geom = build_geometry(&TrajectoryParams {
            angular_increment: TAU / 16.0,
            pitch_per_turn: vec![6.0],
            num_turns: 1.0,
            source_radius: 40.0,
            source_detector_distance: 80.0,
            detector: DetectorSpec { num_cols: 6, num_rows: 4, col_spacing: 4.0, row_spacing: 2.0 },
            z_start: -3.0,
            angle_start: 0.0,
        })
        .unwrap();
        let vol = VolumeSpec { width: 8, height: 8, num_slices: 12, voxel_size: [1.5, 1.5, 1.0], z_origin: -5.5 };
        (geom, vol)
    }

    #[test]
    fn zero_in_zero_out() {
        let (g, v) = tiny();
        let s = forward_project(&Volume::<f64>::zeros(v), &g);
        assert!(s.data.iter().all(|&x| x == 0.0));
        let b = back_project(&s, &g, &v).unwrap();
        assert!(b.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn central_ray_through_unit_cube() {
        let det = DetectorSpec { num_cols: 1, num_rows: 1, col_spacing: 1.0, row_spacing: 1.0 };
        let g = HelicalGeometry {
            angles: vec![0.0],
            z_offsets: vec![0.0],
            source_radius: 100.0,
            source_detector_distance: 200.0,
            detector: det,
        };
        let v = VolumeSpec { width: 20, height: 20, num_slices: 20, voxel_size: [1.0; 3], z_origin: -9.5 };
        let mut f = Volume::<f64>::zeros(v);
        let side = 8usize;
        let lo = (20 - side) / 2;
        for z in lo..lo + side {
            for y in lo..lo + side {
                for x in lo..lo + side {
                    let i = f.index(z, y, x);
                    f.data[i] = 1.0;
                }
            }
        }
        let s = forward_project(&f, &g);
        assert!((s.data[0] - side as f64).abs() <= 1e-3 * side as f64, "{}", s.data[0]);
    }

    #[test]
    fn single_ray_support() {
        let (g, v) = tiny();
        let mut u = Sinogram::<f64>::zeros_for(&g);
        let k = u.index(5, 2, 3);
        u.data[k] = 1.0;
        let b = back_project(&u, &g, &v).unwrap();
        let frame = g.frame(5);
        let mut expected = vec![false; v.len()];
        trace_ray(&v, frame.source, frame.cell(&g.detector, 3, 2), |i, w| expected[i] |= w > 0.0);
        for (i, val) in b.data.iter().enumerate() {
            assert_eq!(*val > 0.0, expected[i], "voxel {i}");
        }
        assert!(expected.iter().any(|&e| e));
    }

    #[test]
    fn adjoint_identity_double() {
        let (g, v) = tiny();
        let f: Vec<f64> = (0..v.len()).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.3).collect();
        let u: Vec<f64> = (0..g.data_len()).map(|i| ((i * 104729) % 97) as f64 / 97.0 - 0.5).collect();
        let af = project_views(&v, &f, &g, 0..g.num_angles());
        let atu = backproject_views(&v, &u, &g, 0..g.num_angles());
        let lhs: f64 = af.iter().zip(&u).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.iter().zip(&atu).map(|(a, b)| a * b).sum();
        let scale = crate::real::norm(&af) * crate::real::norm(&u);
        assert!((lhs - rhs).abs() / scale < 1e-12);
    }

    #[test]
    fn pad_project_pairs() {
        let (g, mut v) = tiny();
        let g = build_geometry(&TrajectoryParams {
            angular_increment: TAU / 16.0,
            pitch_per_turn: vec![6.0],
            num_turns: 2.0,
            source_radius: g.source_radius,
            source_detector_distance: g.source_detector_distance,
            detector: g.detector,
            z_start: -3.0,
            angle_start: 0.0,
        })
        .unwrap();
        v.num_slices = 30;
        v.z_origin = -14.5;
        let t = minimal_thickness(&g, &v).unwrap();
        let p = partition_turns(&g, &v, t).unwrap();
        let ones = Volume::<f64>::from_data(v, vec![1.0; v.len()]).unwrap();
        let back = pad_image(&project_image(&ones, &p, 1).unwrap(), &p, 1, &v).unwrap();
        let r = p.subvolume_ranges[1].clone();
        for z in 0..v.num_slices {
            let want = if r.contains(&z) { 1.0 } else { 0.0 };
            assert!(back.slice(z).iter().all(|&x| x == want));
        }
        let sub = project_image(&ones, &p, 0).unwrap();
        assert_eq!(project_image(&pad_image(&sub, &p, 0, &v).unwrap(), &p, 0).unwrap(), sub);

        let mut gsum = Sinogram::<f64>::zeros_for(&g);
        let gdata: Vec<f64> = (0..g.data_len()).map(|i| (i as f64).cos()).collect();
        let full = Sinogram { data: gdata.clone(), ..gsum.clone() };
        for j in 0..p.num_turns() {
            let padded = pad_data(&project_data(&full, &p, j).unwrap(), &p, j, &g).unwrap();
            gsum.data.iter_mut().zip(&padded.data).for_each(|(a, b)| *a += b);
        }
        assert_eq!(gsum.data, gdata);
        let zero = Sinogram::<f64>::zeros("x".into(), p.turn_len(0), 4, 6);
        assert!(pad_data(&zero, &p, 0, &g).unwrap().data.iter().all(|&x| x == 0.0));
        assert!(pad_data(&zero, &p, 5, &g).is_err());
    }
}
