//! PSNR, SSIM and slice-wise RMSE over the slices left after discarding both
//! ends of a reconstruction.
//!
//! SSIM is the 2D index of Wang et al. evaluated per slice: an 11×11 Gaussian
//! window with σ = 1.5, filtered in "valid" mode (only full windows), biased
//! local (co)variances, K₁ = 0.01 and K₂ = 0.03. The dynamic range for both
//! PSNR and SSIM is max − min of the ground truth over the retained slices.

use crate::error::{Error, Result};
use crate::geometry::{TurnPartition, VolumeSpec};
use crate::real::Real;
use crate::volume::Volume;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::io::Write;
use std::ops::Range;

pub const DEFAULT_DISCARD: usize = 10;
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub const SSIM_METHOD: &str =
    "2d per slice, gaussian 11x11 sigma 1.5, valid filtering, biased covariance, K1 0.01, K2 0.03, range from truth";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    pub discard: usize,
    pub ssim_method: String,
    pub range_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// dB; `+∞` when the retained slices are identical, written as `"inf"`.
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    pub range: f64,
    pub slice_rmse: Vec<f64>,
    /// Slice indices of the evaluated volume that enter the metrics.
    pub retained_range: Range<usize>,
    /// Spec of the evaluated volume, which locates its slices in space.
    pub volume: VolumeSpec,
    /// First slice of each turn's sub-volume, in evaluated-volume indices,
    /// when a partition was supplied.
    #[serde(default)]
    pub turn_boundaries: Vec<isize>,
    pub metadata: EvalMetadata,
}

fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Repr::Text(t) => Err(serde::de::Error::custom(format!("bad PSNR value {t:?}"))),
    }
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SIGMA * SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h × w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two `h × w` images for dynamic range `range`.
pub fn ssim_2d(a: &[f64], b: &[f64], h: usize, w: usize, range: f64) -> Result<f64> {
    if h < WINDOW || w < WINDOW {
        return Err(Error::ShapeMismatch(format!("SSIM needs slices of at least {WINDOW}x{WINDOW}")));
    }
    let k = gaussian_window();
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let s_aa = filter_valid(&aa, h, w, &k);
    let s_bb = filter_valid(&bb, h, w, &k);
    let s_ab = filter_valid(&ab, h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

pub fn evaluate<T: Real, U: Real>(recon: &Volume<T>, truth: &Volume<U>, discard: usize) -> Result<EvalReport> {
    let (r, t) = (&recon.spec, &truth.spec);
    if (r.width, r.height, r.num_slices) != (t.width, t.height, t.num_slices) {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {}x{}x{} vs truth {}x{}x{}",
            r.width, r.height, r.num_slices, t.width, t.height, t.num_slices
        )));
    }
    if t.num_slices <= 2 * discard {
        return Err(Error::Config(format!(
            "{} slices leave nothing after discarding {discard} at each end",
            t.num_slices
        )));
    }
    let retained = discard..t.num_slices - discard;
    let plane = t.slice_len();
    let a: Vec<f64> = recon.slices(retained.clone()).iter().map(|v| v.f64()).collect();
    let b: Vec<f64> = truth.slices(retained.clone()).iter().map(|v| v.f64()).collect();
    let lo = b.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = b.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let mut slice_rmse = Vec::with_capacity(retained.len());
    let mut ssim = 0.0;
    for k in 0..retained.len() {
        let sa = &a[k * plane..(k + 1) * plane];
        let sb = &b[k * plane..(k + 1) * plane];
        let se: f64 = sa.iter().zip(sb).map(|(x, y)| (x - y) * (x - y)).sum();
        slice_rmse.push((se / plane as f64).sqrt());
        ssim += ssim_2d(sa, sb, t.height, t.width, range)?;
    }
    ssim /= retained.len() as f64;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (range * range / mse).log10() };
    Ok(EvalReport {
        psnr,
        ssim,
        mse,
        range,
        slice_rmse,
        retained_range: retained,
        volume: recon.spec,
        turn_boundaries: Vec::new(),
        metadata: EvalMetadata {
            discard,
            ssim_method: SSIM_METHOD.into(),
            range_source: "max - min of truth over retained slices".into(),
        },
    })
}

/// Index in `full` of slice `k` of the evaluated volume.
fn absolute_slice(report: &EvalReport, full: &VolumeSpec, k: usize) -> isize {
    full.slice_coord(report.volume.z_of(k as f64)).round() as isize
}

/// Fills `turn_boundaries` from the partition of the volume `full` that the
/// evaluated volume was cut from.
pub fn mark_turns(report: &mut EvalReport, partition: &TurnPartition, full: &VolumeSpec) {
    let offset = absolute_slice(report, full, 0);
    report.turn_boundaries = partition.subvolume_ranges.iter().map(|r| r.start as isize - offset).collect();
}

/// Mean slice RMSE over retained slices whose nearest sub-volume center
/// belongs to a turn after the first `train_turns`, divided by the mean over
/// the others.
pub fn slice_rmse_stability(
    report: &EvalReport,
    partition: &TurnPartition,
    full: &VolumeSpec,
    train_turns: usize,
) -> Result<f64> {
    let ns = partition.num_turns();
    if ns <= train_turns {
        return Err(Error::Config(format!("{ns} turns do not extend past the first {train_turns}")));
    }
    let (mut early, mut late) = (Vec::new(), Vec::new());
    for (k, &e) in report.retained_range.clone().zip(&report.slice_rmse) {
        let z = absolute_slice(report, full, k);
        let turn = (0..ns)
            .min_by_key(|&j| (partition.subvolume_centers[j] as isize - z).abs())
            .expect("at least one turn");
        if turn < train_turns {
            early.push(e);
        } else {
            late.push(e);
        }
    }
    if early.is_empty() || late.is_empty() {
        return Err(Error::Config("retained slices do not reach both groups of turns".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&late) / mean(&early))
}

/// Writes `slice_index,rmse` rows.
pub fn write_slice_csv(report: &EvalReport, out: &mut impl Write) -> std::io::Result<()> {
    writeln!(out, "slice_index,rmse")?;
    for (k, e) in report.retained_range.clone().zip(&report.slice_rmse) {
        writeln!(out, "{k},{e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: usize) -> VolumeSpec {
        VolumeSpec { width: 16, height: 16, num_slices: n, voxel_size: [1.0; 3], z_origin: 0.0 }
    }

    fn ramp(n: usize) -> Volume<f64> {
        let s = spec(n);
        Volume::from_data(s, (0..s.len()).map(|i| ((i * 37) % 101) as f64 / 100.0).collect()).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let v = ramp(24);
        let r = evaluate(&v, &v, 10).unwrap();
        assert!(r.psnr.is_infinite());
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!(r.slice_rmse.iter().all(|&e| e == 0.0));
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"psnr\":\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert!(back.psnr.is_infinite());
    }

    #[test]
    fn ssim_matches_reference_implementation() {
        // scikit-image structural_similarity, gaussian_weights=True,
        // sigma=1.5, use_sample_covariance=False, data_range=1.
        let (h, w) = (20, 24);
        let a: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let mut b: Vec<f64> = (0..h * w).map(|i| a[i] + ((i * 13) % 17) as f64 / 50.0 - 0.16).collect();
        for y in 3..9 {
            for x in 5..15 {
                b[y * w + x] += 0.3;
            }
        }
        let got = ssim_2d(&a, &b, h, w, 1.0).unwrap();
        assert!((got - 0.8903312613496196).abs() < 1e-12, "{got}");
    }

    #[test]
    fn constant_offset_gives_twenty_db() {
        let t = ramp(24);
        let mut r = t.clone();
        let lo = t.slices(10..14).iter().copied().fold(f64::INFINITY, f64::min);
        let hi = t.slices(10..14).iter().copied().fold(f64::NEG_INFINITY, f64::max);
        r.data.iter_mut().for_each(|v| *v += 0.1 * (hi - lo));
        let rep = evaluate(&r, &t, 10).unwrap();
        assert!((rep.psnr - 20.0).abs() < 1e-9);
        assert!(evaluate(&r, &t, 12).is_err());
    }

    #[test]
    fn stability_ratio_of_constructed_profiles() {
        let full = spec(40);
        let p = TurnPartition {
            turn_ranges: (0..5).map(|j| j * 10..(j + 1) * 10).collect(),
            head_discard: 0..0,
            tail_discard: 50..50,
            subvolume_ranges: (0..5).map(|j| 2 + 8 * j..13 + 8 * j).collect(),
            subvolume_centers: (0..5).map(|j| 7 + 8 * j).collect(),
            subvolume_thickness: 11,
        };
        let t = ramp(40);
        let mut rep = evaluate(&t, &t, 2).unwrap();
        rep.slice_rmse.iter_mut().for_each(|e| *e = 0.5);
        assert!((slice_rmse_stability(&rep, &p, &full, 3).unwrap() - 1.0).abs() < 1e-15);
        for (k, e) in rep.retained_range.clone().zip(rep.slice_rmse.iter_mut()) {
            // Centers 7, 15, 23, 31, 39: slices from 28 on are nearest turn 4+.
            *e = if k >= 28 { 1.0 } else { 0.5 };
        }
        assert!((slice_rmse_stability(&rep, &p, &full, 3).unwrap() - 2.0).abs() < 1e-15);
        assert!(slice_rmse_stability(&rep, &p, &full, 5).is_err());
    }
}
