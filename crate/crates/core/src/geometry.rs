//! Helical acquisition geometry, turn partitioning and sub-volume mapping.
//!
//! Orientation convention: the source at angle index `i` sits at
//! `(R sin φ_i, R cos φ_i, z_i)`. The flat detector faces the source through
//! the rotation axis; detector columns run along `(cos φ, -sin φ, 0)` (so at
//! `φ = 0` increasing column moves toward `+x`) and rows run along `+z`.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;
use std::ops::Range;

const ANGLE_EPS: f64 = 1e-9;

pub type Point3 = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub num_cols: usize,
    pub num_rows: usize,
    pub col_spacing: f64,
    pub row_spacing: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_cols == 0 || self.num_rows == 0 {
            return Err(Error::InvalidGeometry("detector needs at least one row and column".into()));
        }
        if !(self.col_spacing > 0.0 && self.row_spacing > 0.0) {
            return Err(Error::InvalidGeometry("detector spacings must be positive".into()));
        }
        Ok(())
    }

    pub fn num_cells(&self) -> usize {
        self.num_cols * self.num_rows
    }

    /// Offset of column `col` from the detector center along the column axis.
    #[inline]
    pub fn col_offset(&self, col: usize) -> f64 {
        (col as f64 - (self.num_cols as f64 - 1.0) / 2.0) * self.col_spacing
    }

    #[inline]
    pub fn row_offset(&self, row: usize) -> f64 {
        (row as f64 - (self.num_rows as f64 - 1.0) / 2.0) * self.row_spacing
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelicalGeometry {
    /// Unwrapped, strictly increasing source angles in radians.
    pub angles: Vec<f64>,
    /// Source z positions in mm, nondecreasing.
    pub z_offsets: Vec<f64>,
    pub source_radius: f64,
    pub source_detector_distance: f64,
    pub detector: DetectorSpec,
}

/// Per-angle source and detector frame, precomputed for ray tracing.
#[derive(Clone, Copy, Debug)]
pub struct ViewFrame {
    pub source: Point3,
    /// Detector center.
    pub center: Point3,
    /// Unit vector along detector columns.
    pub col_axis: Point3,
}

impl ViewFrame {
    #[inline]
    pub fn cell(&self, det: &DetectorSpec, col: usize, row: usize) -> Point3 {
        let cu = det.col_offset(col);
        let rv = det.row_offset(row);
        [
            self.center[0] + cu * self.col_axis[0],
            self.center[1] + cu * self.col_axis[1],
            self.center[2] + rv,
        ]
    }
}

impl HelicalGeometry {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        if self.angles.is_empty() {
            return Err(Error::InvalidGeometry("trajectory has no source positions".into()));
        }
        if self.angles.len() != self.z_offsets.len() {
            return Err(Error::InvalidGeometry(format!(
                "{} angles but {} z offsets",
                self.angles.len(),
                self.z_offsets.len()
            )));
        }
        if self.angles.iter().chain(&self.z_offsets).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite trajectory sample".into()));
        }
        if self.angles.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGeometry("angles must be unwrapped and strictly increasing".into()));
        }
        if self.z_offsets.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidGeometry("z offsets must be nondecreasing".into()));
        }
        if !(self.source_radius > 0.0) {
            return Err(Error::InvalidGeometry("source radius must be positive".into()));
        }
        if !(self.source_detector_distance > self.source_radius) {
            return Err(Error::InvalidGeometry(
                "source-detector distance must exceed the source radius".into(),
            ));
        }
        Ok(())
    }

    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    /// Number of sinogram cells, `N_φ · D_h · D_w`.
    pub fn data_len(&self) -> usize {
        self.num_angles() * self.detector.num_cells()
    }

    pub fn source_position(&self, i: usize) -> Result<Point3> {
        self.check_angle(i)?;
        Ok(self.frame(i).source)
    }

    pub fn detector_cell_position(&self, i: usize, col: usize, row: usize) -> Result<Point3> {
        self.check_angle(i)?;
        if col >= self.detector.num_cols {
            return Err(Error::IndexOutOfRange { index: col, len: self.detector.num_cols });
        }
        if row >= self.detector.num_rows {
            return Err(Error::IndexOutOfRange { index: row, len: self.detector.num_rows });
        }
        Ok(self.frame(i).cell(&self.detector, col, row))
    }

    fn check_angle(&self, i: usize) -> Result<()> {
        if i >= self.num_angles() {
            return Err(Error::IndexOutOfRange { index: i, len: self.num_angles() });
        }
        Ok(())
    }

    /// Frame for angle index `i`; panics if out of range.
    #[inline]
    pub fn frame(&self, i: usize) -> ViewFrame {
        let (s, c) = self.angles[i].sin_cos();
        let z = self.z_offsets[i];
        let r = self.source_radius;
        let d = self.source_detector_distance;
        ViewFrame {
            source: [r * s, r * c, z],
            center: [(r - d) * s, (r - d) * c, z],
            col_axis: [c, -s, 0.0],
        }
    }

    /// Sub-trajectory over a contiguous range of angle indices.
    pub fn slice_angles(&self, range: Range<usize>) -> HelicalGeometry {
        HelicalGeometry {
            angles: self.angles[range.clone()].to_vec(),
            z_offsets: self.z_offsets[range].to_vec(),
            source_radius: self.source_radius,
            source_detector_distance: self.source_detector_distance,
            detector: self.detector,
        }
    }

    /// Angular increment after the last sample, extrapolated from the final step.
    fn last_increment(&self) -> f64 {
        let n = self.angles.len();
        if n >= 2 {
            self.angles[n - 1] - self.angles[n - 2]
        } else {
            0.0
        }
    }

    /// Short stable identifier derived from the serialized geometry.
    pub fn id(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("geometry serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Parameters for [`build_geometry`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryParams {
    pub angular_increment: f64,
    /// Table feed per full turn in mm; one entry per turn, the last entry
    /// repeats for any further turns.
    pub pitch_per_turn: Vec<f64>,
    pub num_turns: f64,
    pub source_radius: f64,
    pub source_detector_distance: f64,
    pub detector: DetectorSpec,
    #[serde(default)]
    pub z_start: f64,
    #[serde(default)]
    pub angle_start: f64,
}

pub fn build_geometry(p: &TrajectoryParams) -> Result<HelicalGeometry> {
    if !(p.angular_increment > 0.0) || !p.angular_increment.is_finite() {
        return Err(Error::InvalidGeometry("angular increment must be positive".into()));
    }
    if p.pitch_per_turn.is_empty() || p.pitch_per_turn.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InvalidGeometry("pitch values must be positive".into()));
    }
    if !(p.num_turns > 0.0) {
        return Err(Error::InvalidGeometry("number of turns must be positive".into()));
    }
    let n = ((p.num_turns * TAU / p.angular_increment) - ANGLE_EPS).ceil() as usize;
    let mut angles = Vec::with_capacity(n);
    let mut z_offsets = Vec::with_capacity(n);
    let mut z = p.z_start;
    for k in 0..n {
        let traversed = k as f64 * p.angular_increment;
        angles.push(p.angle_start + traversed);
        z_offsets.push(z);
        let turn = ((traversed + ANGLE_EPS) / TAU).floor() as usize;
        let pitch = p.pitch_per_turn[turn.min(p.pitch_per_turn.len() - 1)];
        z += pitch * p.angular_increment / TAU;
    }
    let geom = HelicalGeometry {
        angles,
        z_offsets,
        source_radius: p.source_radius,
        source_detector_distance: p.source_detector_distance,
        detector: p.detector,
    };
    geom.validate()?;
    Ok(geom)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeSpec {
    pub width: usize,
    pub height: usize,
    pub num_slices: usize,
    /// (dx, dy, dz) in mm.
    pub voxel_size: [f64; 3],
    /// World z of the center of slice 0.
    pub z_origin: f64,
}

impl VolumeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.num_slices == 0 {
            return Err(Error::InvalidVolume("all dimensions must be at least 1".into()));
        }
        if self.voxel_size.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidVolume("voxel sizes must be positive".into()));
        }
        if !self.z_origin.is_finite() {
            return Err(Error::InvalidVolume("z origin must be finite".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.width * self.height * self.num_slices
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.width * self.height
    }

    /// World x of the center of column `ix`.
    #[inline]
    pub fn x_of(&self, ix: f64) -> f64 {
        (ix - (self.width as f64 - 1.0) / 2.0) * self.voxel_size[0]
    }

    #[inline]
    pub fn y_of(&self, iy: f64) -> f64 {
        (iy - (self.height as f64 - 1.0) / 2.0) * self.voxel_size[1]
    }

    #[inline]
    pub fn z_of(&self, iz: f64) -> f64 {
        self.z_origin + iz * self.voxel_size[2]
    }

    /// Continuous slice coordinate of world height `z`.
    #[inline]
    pub fn slice_coord(&self, z: f64) -> f64 {
        (z - self.z_origin) / self.voxel_size[2]
    }

    /// Spec of the slab of slices `range`.
    pub fn sub_slices(&self, range: Range<usize>) -> VolumeSpec {
        VolumeSpec {
            num_slices: range.len(),
            z_origin: self.z_of(range.start as f64),
            ..*self
        }
    }

    /// World z interval spanned by the slice centers.
    pub fn z_center_extent(&self) -> (f64, f64) {
        (self.z_of(0.0), self.z_of(self.num_slices as f64 - 1.0))
    }
}

/// World z range (min, max) of the part of the segment `a → b` that passes
/// over the in-plane interpolation footprint of `vol`, i.e. the voxel-center
/// box grown by one voxel on every side. `None` if the segment misses it.
pub fn segment_z_extent(a: Point3, b: Point3, vol: &VolumeSpec) -> Option<(f64, f64)> {
    let [dx, dy, _] = vol.voxel_size;
    let lo = [vol.x_of(0.0) - dx, vol.y_of(0.0) - dy];
    let hi = [vol.x_of(vol.width as f64 - 1.0) + dx, vol.y_of(vol.height as f64 - 1.0) + dy];
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for ax in 0..2 {
        let d = b[ax] - a[ax];
        if d.abs() < 1e-300 {
            if a[ax] < lo[ax] || a[ax] > hi[ax] {
                return None;
            }
            continue;
        }
        let mut ta = (lo[ax] - a[ax]) / d;
        let mut tb = (hi[ax] - a[ax]) / d;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    if t0 > t1 {
        return None;
    }
    let za = a[2] + t0 * (b[2] - a[2]);
    let zb = a[2] + t1 * (b[2] - a[2]);
    Some((za.min(zb), za.max(zb)))
}

/// World z range touched by all rays of view `i`. Only the first and last
/// detector rows need checking since z is monotone in the row index.
pub fn view_z_extent(geom: &HelicalGeometry, i: usize, vol: &VolumeSpec) -> Option<(f64, f64)> {
    let frame = geom.frame(i);
    let det = &geom.detector;
    let mut out: Option<(f64, f64)> = None;
    for col in 0..det.num_cols {
        for row in [0, det.num_rows - 1] {
            if let Some((a, b)) = segment_z_extent(frame.source, frame.cell(det, col, row), vol) {
                out = Some(match out {
                    None => (a, b),
                    Some((lo, hi)) => (lo.min(a), hi.max(b)),
                });
            }
        }
    }
    out
}

/// Slice indices (inclusive bounds, possibly outside `[0, N_z)`) that the
/// interpolating ray model may read for the views in `angles`.
fn touched_slices(
    geom: &HelicalGeometry,
    angles: Range<usize>,
    vol: &VolumeSpec,
) -> Option<(isize, isize)> {
    let mut out: Option<(f64, f64)> = None;
    for i in angles {
        if let Some((a, b)) = view_z_extent(geom, i, vol) {
            out = Some(match out {
                None => (a, b),
                Some((lo, hi)) => (lo.min(a), hi.max(b)),
            });
        }
    }
    out.map(|(lo, hi)| {
        (vol.slice_coord(lo).floor() as isize, vol.slice_coord(hi).ceil() as isize)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnPartition {
    /// Half-open angle-index ranges, one per complete turn.
    pub turn_ranges: Vec<Range<usize>>,
    pub head_discard: Range<usize>,
    pub tail_discard: Range<usize>,
    /// Half-open slice ranges of the sub-volume assigned to each turn.
    pub subvolume_ranges: Vec<Range<usize>>,
    pub subvolume_centers: Vec<usize>,
    pub subvolume_thickness: usize,
}

impl TurnPartition {
    pub fn num_turns(&self) -> usize {
        self.turn_ranges.len()
    }

    pub fn turn_len(&self, j: usize) -> usize {
        self.turn_ranges[j].len()
    }

    /// Union of the sub-volume slice ranges of turns `turns`.
    pub fn slice_union(&self, turns: Range<usize>) -> Range<usize> {
        let lo = turns.clone().map(|j| self.subvolume_ranges[j].start).min().unwrap_or(0);
        let hi = turns.map(|j| self.subvolume_ranges[j].end).max().unwrap_or(0);
        lo..hi
    }

    /// Angle-index range covered by the complete turns `turns`.
    pub fn angle_union(&self, turns: Range<usize>) -> Range<usize> {
        self.turn_ranges[turns.start].start..self.turn_ranges[turns.end - 1].end
    }

    /// Sub-problem made of `len` consecutive turns starting at turn `q`
    /// (0-based): the trajectory is cut to those turns and the volume to the
    /// union of their sub-volumes.
    pub fn window(
        &self,
        geom: &HelicalGeometry,
        vol: &VolumeSpec,
        q: usize,
        len: usize,
    ) -> Result<TurnWindow> {
        if len == 0 || q + len > self.num_turns() {
            return Err(Error::Config(format!(
                "window of {len} turns at {q} exceeds {} complete turns",
                self.num_turns()
            )));
        }
        let turns = q..q + len;
        let angles = self.angle_union(turns.clone());
        let slices = self.slice_union(turns.clone());
        let a0 = angles.start;
        let s0 = slices.start;
        let partition = TurnPartition {
            turn_ranges: turns.clone().map(|j| {
                let r = &self.turn_ranges[j];
                r.start - a0..r.end - a0
            }).collect(),
            head_discard: 0..0,
            tail_discard: angles.len()..angles.len(),
            subvolume_ranges: turns.clone().map(|j| {
                let r = &self.subvolume_ranges[j];
                r.start - s0..r.end - s0
            }).collect(),
            subvolume_centers: turns.map(|j| self.subvolume_centers[j] - s0).collect(),
            subvolume_thickness: self.subvolume_thickness,
        };
        Ok(TurnWindow {
            geometry: geom.slice_angles(angles.clone()),
            volume: vol.sub_slices(slices.clone()),
            partition,
            angle_range: angles,
            slice_range: slices,
        })
    }
}

/// A contiguous run of turns cut out as a self-contained problem.
#[derive(Clone, Debug)]
pub struct TurnWindow {
    pub geometry: HelicalGeometry,
    pub volume: VolumeSpec,
    pub partition: TurnPartition,
    /// Angle indices of the window in the parent trajectory.
    pub angle_range: Range<usize>,
    /// Slice indices of the window in the parent volume.
    pub slice_range: Range<usize>,
}

/// Splits the trajectory into complete 2π turns.
///
/// The first turn starts at the first source angle at or past a multiple of
/// 2π; every later turn starts where the previous one ended. A turn ends at
/// the first sample whose angle is at least 2π beyond the turn's first sample.
pub fn turn_ranges(geom: &HelicalGeometry) -> (Range<usize>, Vec<Range<usize>>, Range<usize>) {
    let a = &geom.angles;
    let n = a.len();
    let first_boundary = ((a[0] - ANGLE_EPS) / TAU).ceil() * TAU;
    let mut start = a.iter().position(|&v| v >= first_boundary - ANGLE_EPS).unwrap_or(n);
    let head = 0..start;
    let mut turns = Vec::new();
    let end_angle = a[n - 1] + geom.last_increment();
    while start < n {
        let target = a[start] + TAU - ANGLE_EPS;
        match a[start..].iter().position(|&v| v >= target) {
            Some(off) => {
                turns.push(start..start + off);
                start += off;
            }
            None => {
                if end_angle >= target && n >= 2 {
                    turns.push(start..n);
                    start = n;
                }
                break;
            }
        }
    }
    (head, turns, start..n)
}

pub fn partition_turns(
    geom: &HelicalGeometry,
    vol: &VolumeSpec,
    thickness: usize,
) -> Result<TurnPartition> {
    geom.validate()?;
    vol.validate()?;
    if thickness == 0 {
        return Err(Error::Config("sub-volume thickness must be at least 1".into()));
    }
    let (head, turns, tail) = turn_ranges(geom);
    if turns.is_empty() {
        let span = geom.angles[geom.angles.len() - 1] - geom.angles[0] + geom.last_increment();
        return Err(Error::NoCompleteTurn { span });
    }
    let half_lo = (thickness - 1) / 2;
    let half_hi = thickness - 1 - half_lo;
    let nz = vol.num_slices as isize;
    let mut centers = Vec::with_capacity(turns.len());
    let mut ranges = Vec::with_capacity(turns.len());
    for (j, r) in turns.iter().enumerate() {
        let zmean = geom.z_offsets[r.clone()].iter().sum::<f64>() / r.len() as f64;
        let c = (vol.slice_coord(zmean).round() as isize).clamp(0, nz - 1);
        let lo = (c - half_lo as isize).max(0) as usize;
        let hi = (c + half_hi as isize + 1).min(nz) as usize;
        if let Some((tlo, thi)) = touched_slices(geom, r.clone(), vol) {
            let need_lo = tlo.max(0);
            let need_hi = thi.min(nz - 1);
            if need_lo <= need_hi && (need_lo < lo as isize || need_hi >= hi as isize) {
                return Err(Error::CoverageViolated {
                    turn: j,
                    thickness,
                    lo: need_lo,
                    hi: need_hi + 1,
                    alo: lo,
                    ahi: hi,
                });
            }
        }
        centers.push(c as usize);
        ranges.push(lo..hi);
    }
    Ok(TurnPartition {
        turn_ranges: turns,
        head_discard: head,
        tail_discard: tail,
        subvolume_ranges: ranges,
        subvolume_centers: centers,
        subvolume_thickness: thickness,
    })
}

/// Smallest odd sub-volume thickness that satisfies the coverage invariant
/// for every complete turn of `geom`.
pub fn minimal_thickness(geom: &HelicalGeometry, vol: &VolumeSpec) -> Result<usize> {
    geom.validate()?;
    vol.validate()?;
    let (_, turns, _) = turn_ranges(geom);
    if turns.is_empty() {
        return Err(Error::NoCompleteTurn { span: geom.angles[geom.angles.len() - 1] - geom.angles[0] });
    }
    let nz = vol.num_slices as isize;
    let mut half = 0isize;
    for r in &turns {
        let zmean = geom.z_offsets[r.clone()].iter().sum::<f64>() / r.len() as f64;
        let c = (vol.slice_coord(zmean).round() as isize).clamp(0, nz - 1);
        if let Some((tlo, thi)) = touched_slices(geom, r.clone(), vol) {
            let need_lo = tlo.max(0);
            let need_hi = thi.min(nz - 1);
            if need_lo <= need_hi {
                half = half.max(c - need_lo).max(need_hi - c);
            }
        }
    }
    Ok((2 * half + 1) as usize)
}

/// World z interval `[lo, hi]` that rays of view `i` must stay inside to be
/// kept by trajectory truncation.
pub fn view_fits_volume(geom: &HelicalGeometry, i: usize, vol: &VolumeSpec) -> bool {
    let (zlo, zhi) = vol.z_center_extent();
    match view_z_extent(geom, i, vol) {
        Some((a, b)) => a >= zlo - 1e-9 && b <= zhi + 1e-9,
        None => true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn det() -> DetectorSpec {
        DetectorSpec { num_cols: 5, num_rows: 3, col_spacing: 1.0, row_spacing: 2.0 }
    }

    fn params(inc: f64, pitch: Vec<f64>, turns: f64) -> TrajectoryParams {
        TrajectoryParams {
            angular_increment: inc,
            pitch_per_turn: pitch,
            num_turns: turns,
            source_radius: 500.0,
            source_detector_distance: 1000.0,
            detector: det(),
            z_start: 0.0,
            angle_start: 0.0,
        }
    }

    #[test]
    fn one_turn_linear_accumulation() {
        let g = build_geometry(&params(TAU / 8.0, vec![8.0], 1.0)).unwrap();
        assert_eq!(g.num_angles(), 8);
        for k in 0..8 {
            assert!((g.angles[k] - k as f64 * PI / 4.0).abs() < 1e-12);
            assert!((g.z_offsets[k] - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pitch_list_accumulates_proportionally() {
        let g = build_geometry(&params(TAU / 8.0, vec![8.0, 16.0], 2.0)).unwrap();
        assert_eq!(g.num_angles(), 16);
        for k in 9..16 {
            assert!((g.z_offsets[k] - g.z_offsets[k - 1] - 2.0).abs() < 1e-12);
        }
        assert!((g.z_offsets[8] - 8.0).abs() < 1e-12);
    }

    #[test]
    fn fine_sampling_count() {
        let g = build_geometry(&params(TAU / 1152.0, vec![20.0], 3.0)).unwrap();
        assert_eq!(g.num_angles(), 3456);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(build_geometry(&params(0.0, vec![8.0], 1.0)).is_err());
        assert!(build_geometry(&params(0.1, vec![-1.0], 1.0)).is_err());
        let mut p = params(0.1, vec![8.0], 1.0);
        p.source_detector_distance = 100.0;
        assert!(build_geometry(&p).is_err());
    }

    fn single(angle: f64, z: f64, r: f64) -> HelicalGeometry {
        HelicalGeometry {
            angles: vec![angle],
            z_offsets: vec![z],
            source_radius: r,
            source_detector_distance: r + 500.0,
            detector: det(),
        }
    }

    fn close(a: Point3, b: Point3) -> bool {
        a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn source_positions() {
        assert!(close(single(0.0, 0.0, 500.0).source_position(0).unwrap(), [0.0, 500.0, 0.0]));
        assert!(close(single(PI / 2.0, 3.0, 500.0).source_position(0).unwrap(), [500.0, 0.0, 3.0]));
        let s = 2f64.sqrt();
        assert!(close(single(PI / 4.0, 1.0, 2.0).source_position(0).unwrap(), [s, s, 1.0]));
        assert!(single(0.0, 0.0, 1.0).source_position(1).is_err());
    }

    #[test]
    fn detector_cells() {
        let g = single(0.0, 4.0, 500.0);
        let sdd = g.source_detector_distance;
        assert!(close(g.detector_cell_position(0, 2, 1).unwrap(), [0.0, 500.0 - sdd, 4.0]));
        let up = g.detector_cell_position(0, 2, 2).unwrap();
        assert!((up[2] - 4.0 - 2.0).abs() < 1e-12);
        let right = g.detector_cell_position(0, 3, 1).unwrap();
        assert!((right[0] - 1.0).abs() < 1e-12);
        let g2 = single(1.1, 0.0, 500.0);
        let a = g2.detector_cell_position(0, 1, 0).unwrap();
        let b = g2.detector_cell_position(0, 1, 1).unwrap();
        assert!((b[2] - a[2] - 2.0).abs() < 1e-12 && (b[0] - a[0]).abs() < 1e-12);
        assert!(g.detector_cell_position(0, 5, 0).is_err());
    }

    fn tall_volume() -> VolumeSpec {
        VolumeSpec { width: 4, height: 4, num_slices: 400, voxel_size: [1.0; 3], z_origin: -200.0 }
    }

    #[test]
    fn exact_turns_have_no_discards() {
        let g = build_geometry(&params(TAU / 8.0, vec![1.0], 2.0)).unwrap();
        let (head, turns, tail) = turn_ranges(&g);
        assert!(head.is_empty() && tail.is_empty());
        assert_eq!(turns, vec![0..8, 8..16]);
    }

    #[test]
    fn fractional_turns_floor() {
        let g = build_geometry(&params(TAU / 10.0, vec![1.0], 3.4)).unwrap();
        let (head, turns, tail) = turn_ranges(&g);
        assert_eq!(turns.len(), 3);
        assert!(head.is_empty());
        assert_eq!(tail, 30..34);
    }

    #[test]
    fn late_start_discards_head() {
        let mut p = params(TAU / 10.0, vec![1.0], 2.5);
        p.angle_start = 0.35 * TAU;
        let g = build_geometry(&p).unwrap();
        let (head, turns, tail) = turn_ranges(&g);
        assert_eq!(head, 0..7);
        assert_eq!(turns, vec![7..17]);
        assert_eq!(tail, 17..25);
    }

    #[test]
    fn paper_thickness_gives_twenty_slices() {
        let g = build_geometry(&params(TAU / 16.0, vec![2.0], 3.0)).unwrap();
        let vol = VolumeSpec { width: 4, height: 4, num_slices: 60, voxel_size: [1.0; 3], z_origin: -25.0 };
        let p = partition_turns(&g, &vol, 20).unwrap();
        assert!(p.subvolume_ranges.iter().all(|r| r.len() == 20));
    }

    #[test]
    fn thin_subvolume_fails_coverage() {
        let g = build_geometry(&params(TAU / 16.0, vec![4.0], 2.0)).unwrap();
        let vol = tall_volume();
        let need = minimal_thickness(&g, &vol).unwrap();
        assert!(need > 1);
        assert!(partition_turns(&g, &vol, need).is_ok());
        assert!(matches!(
            partition_turns(&g, &vol, need - 2),
            Err(Error::CoverageViolated { .. })
        ));
    }

    #[test]
    fn no_complete_turn() {
        let g = build_geometry(&params(TAU / 16.0, vec![4.0], 0.5)).unwrap();
        assert!(matches!(partition_turns(&g, &tall_volume(), 99), Err(Error::NoCompleteTurn { .. })));
    }

    #[test]
    fn window_reindexes() {
        let g = build_geometry(&params(TAU / 8.0, vec![4.0], 4.0)).unwrap();
        let vol = tall_volume();
        let t = minimal_thickness(&g, &vol).unwrap();
        let p = partition_turns(&g, &vol, t).unwrap();
        let w = p.window(&g, &vol, 1, 2).unwrap();
        assert_eq!(w.angle_range, 8..24);
        assert_eq!(w.partition.turn_ranges, vec![0..8, 8..16]);
        assert_eq!(w.geometry.num_angles(), 16);
        assert_eq!(w.volume.num_slices, w.slice_range.len());
        assert_eq!(w.partition.subvolume_ranges[0].start, 0);
        assert!(p.window(&g, &vol, 3, 2).is_err());
    }
}
