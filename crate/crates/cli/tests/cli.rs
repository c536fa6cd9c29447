use helix_core::nn::{load_checkpoint, save_checkpoint, NetworkParams};
use helix_core::projector::forward_project;
use helix_core::recon::fbp::{fbp_reconstruct, FbpConfig};
use helix_core::recon::{default_gains, glue, ilpdh_reconstruct, train, InitMode, Partial, Preset, Problem, ReconConfig, Scan};
use helix_core::simulation::hu_to_mu;
use helix_core::volume::{read_json, read_sinogram, read_volume, write_json, write_sinogram};
use helix_core::{Sinogram, TurnPartition};
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

const SPEC: &str = r#"{"volume":{"width":12,"height":12,"num_slices":24,"voxel_size":[2.0,2.0,1.0],"z_origin":-11.5}}"#;
const TRAJECTORY: &str = r#"{"angular_increment":0.39269908169872414,"pitch_per_turn":[3.0],"num_turns":14.0,
"source_radius":40.0,"source_detector_distance":80.0,
"detector":{"num_cols":8,"num_rows":4,"col_spacing":5.0,"row_spacing":2.0},"z_start":-21.0}"#;

fn helix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_helix")).args(args).env_remove("HELICAL_THREADS").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = helix(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn digest(p: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(p).unwrap()))
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    /// Two phantoms on a 12×12×24 grid scanned by six complete turns.
    fn new(count: usize, photons: &str) -> Self {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("spec.json"), SPEC).unwrap();
        std::fs::write(dir.path().join("traj.json"), TRAJECTORY).unwrap();
        let f = Fixture { dir };
        ok(&["phantom", s(&f.path("spec.json")), "--out", s(&f.path("ds")), "--count", &count.to_string(), "--seed", "3"]);
        ok(&["simulate", s(&f.path("ds")), "--geometry", s(&f.path("traj.json")), "--photons", photons, "--seed", "8"]);
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn scan_geometry(&self) -> Value {
        read_json(&self.path("ds/geometry.json")).unwrap()
    }

    fn geometry(&self) -> helix_core::HelicalGeometry {
        serde_json::from_value(self.scan_geometry()["geometry"].clone()).unwrap()
    }

    fn partition(&self) -> TurnPartition {
        serde_json::from_value(self.scan_geometry()["partition"].clone()).unwrap()
    }

    fn volume(&self) -> helix_core::VolumeSpec {
        serde_json::from_value(self.scan_geometry()["volume"].clone()).unwrap()
    }

    fn scans(&self, n: usize) -> Vec<Scan> {
        (0..n)
            .map(|k| Scan {
                truth: hu_to_mu(&read_volume(&self.path(&format!("ds/phantom_{k:03}.vol"))).unwrap()),
                data: read_sinogram(&self.path(&format!("ds/sino_{k:03}.sin"))).unwrap(),
                geometry: self.geometry(),
                partition: self.partition(),
            })
            .collect()
    }

    fn checkpoint(&self, name: &str, params: &NetworkParams<f32>, recon: &ReconConfig) -> PathBuf {
        let dir = self.path(name);
        save_checkpoint(&dir, params, 0, None, 0).unwrap();
        write_json(&dir.join("recon.json"), recon).unwrap();
        dir
    }
}

#[test]
fn phantom_generation_is_deterministic_per_seed() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, SPEC).unwrap();
    for out in ["a", "b"] {
        ok(&["phantom", s(&spec), "--out", s(&dir.path().join(out)), "--count", "1", "--seed", "42"]);
    }
    let (a, b) = (dir.path().join("a/phantom_000.vol"), dir.path().join("b/phantom_000.vol"));
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(digest(&a.with_extension("vol.json")), digest(&b.with_extension("vol.json")));
}

#[test]
fn empty_dataset_has_a_valid_manifest() {
    let dir = TempDir::new().unwrap();
    ok(&["phantom", "--out", s(dir.path()), "--count", "0"]);
    let m: Value = read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(m["phantoms"].as_array().unwrap().len(), 0);
    assert!(dir.path().join("run.json").exists());
}

#[test]
fn default_spec_volumes_load_and_validate() {
    let dir = TempDir::new().unwrap();
    ok(&["phantom", "--out", s(dir.path()), "--count", "1", "--seed", "4"]);
    let v = read_volume(&dir.path().join("phantom_000.vol")).unwrap();
    v.spec.validate().unwrap();
    assert!(v.data.iter().all(|&x| (-1000.0..=3000.0).contains(&x)));
}

#[test]
fn zero_photons_are_rejected() {
    let f = Fixture::new(1, "1e4");
    let out = helix(&["simulate", s(&f.path("ds")), "--geometry", s(&f.path("traj.json")), "--photons", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("photon count"));
}

#[test]
fn simulation_is_reproducible_and_unbiased_at_high_dose() {
    let f = Fixture::new(1, "1e8");
    let first = digest(&f.path("ds/sino_000.sin"));
    ok(&["simulate", s(&f.path("ds")), "--geometry", s(&f.path("traj.json")), "--photons", "1e8", "--seed", "8"]);
    assert_eq!(first, digest(&f.path("ds/sino_000.sin")));

    let g = read_sinogram(&f.path("ds/sino_000.sin")).unwrap();
    let mu = hu_to_mu(&read_volume(&f.path("ds/phantom_000.vol")).unwrap());
    let af = forward_project(&mu, &f.geometry());
    let n = g.data.len() as f64;
    let bias: f64 = g.data.iter().zip(&af.data).map(|(a, b)| (*a - *b) as f64).sum::<f64>() / n;
    let scale: f64 = af.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    // Per-cell noise at 1e8 photons is about 1e-4; the mean over all cells
    // is far smaller.
    assert!(bias.abs() < 1e-4 * scale.max(1.0), "bias {bias:e}");
}

#[test]
fn loss_csv_has_one_row_per_step() {
    let f = Fixture::new(1, "1e4");
    ok(&["train", s(&f.path("ds")), "--preset", "ilpdh1", "--steps", "3", "--out", s(&f.path("ck"))]);
    let csv = std::fs::read_to_string(f.path("ck/loss.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "step,loss");
    assert_eq!(rows.len() - 1, 3);
    assert!(f.path("ck/run.json").exists());
}

#[test]
fn one_step_checkpoint_is_one_adam_step_from_init() {
    let f = Fixture::new(2, "1e4");
    ok(&["train", s(&f.path("ds")), "--preset", "ilpdh3", "--steps", "1", "--out", s(&f.path("ck"))]);
    let (saved, manifest) = load_checkpoint::<f32>(&f.path("ck")).unwrap();
    assert_eq!(manifest.step_count, 1);

    let preset = Preset::builtin("ilpdh3").unwrap();
    let (recon, tcfg, seed) = preset.ilpdh().unwrap();
    let mut tcfg = tcfg.clone();
    tcfg.iterations = 1;
    let (geometry, volume, partition) = (f.geometry(), f.volume(), f.partition());
    let problem = Problem::new(&geometry, &volume, &partition).unwrap();
    let init = NetworkParams::<f32>::init(recon.iterations, seed, default_gains(problem));
    let mut expected = init.clone();
    train(&f.scans(2), &mut expected, &tcfg, recon, |_, _| {}).unwrap();
    assert_eq!(saved, expected);
    assert_ne!(saved, init);
}

#[test]
fn smoke_training_halves_the_smoothed_loss() {
    let f = Fixture::new(2, "1e4");
    ok(&["train", s(&f.path("ds")), "--preset", "ilpdh1", "--steps", "200", "--out", s(&f.path("ck"))]);
    let csv = std::fs::read_to_string(f.path("ck/loss.csv")).unwrap();
    let losses: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (head, tail) = (mean(&losses[..20]), mean(&losses[180..]));
    assert!(tail <= 0.5 * head, "smoothed loss {head:e} -> {tail:e}");
}

#[test]
fn fbp_of_zero_data_is_zero() {
    let f = Fixture::new(1, "1e4");
    let zero = Sinogram::<f32>::zeros_for(&f.geometry());
    write_sinogram(&f.path("zero.sin"), &zero).unwrap();
    ok(&["reconstruct", s(&f.path("zero.sin")), "--geometry", s(&f.path("ds/geometry.json")), "--method", "fbp", "--out", s(&f.path("z.vol"))]);
    let v = read_volume(&f.path("z.vol")).unwrap();
    assert!(v.data.iter().all(|&x| x == 0.0));
}

#[test]
fn learned_methods_require_a_checkpoint() {
    let f = Fixture::new(1, "1e4");
    let out = helix(&["reconstruct", s(&f.path("ds/sino_000.sin")), "--geometry", s(&f.path("ds/geometry.json")), "--method", "g-ilpdh3", "--out", s(&f.path("x.vol"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn zero_network_returns_its_initialization() {
    let f = Fixture::new(1, "1e4");
    let (geometry, volume, partition) = (f.geometry(), f.volume(), f.partition());
    let problem = Problem::new(&geometry, &volume, &partition).unwrap();
    let recon = ReconConfig { init_mode: InitMode::Fbp, ..ReconConfig::default() };
    let ck = f.checkpoint("ck", &NetworkParams::init(2, 0, default_gains(problem)), &recon);
    ok(&["reconstruct", s(&f.path("ds/sino_000.sin")), "--geometry", s(&f.path("ds/geometry.json")), "--method", "ilpdh", "--ckpt", s(&ck), "--out", s(&f.path("l.vol"))]);
    let got = read_volume(&f.path("l.vol")).unwrap();

    let g = read_sinogram(&f.path("ds/sino_000.sin")).unwrap();
    let fbp = fbp_reconstruct(&g, &geometry, &volume, &FbpConfig::default()).unwrap();
    let covered = problem.covered();
    let expected = fbp.crop_slices(covered.clone());
    assert_eq!(got.spec, expected.spec);
    for (a, b) in got.data.iter().zip(&expected.data) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn glued_reconstruction_matches_manual_composition() {
    let f = Fixture::new(1, "1e4");
    let (geometry, volume, partition) = (f.geometry(), f.volume(), f.partition());
    assert_eq!(partition.num_turns(), 6);
    let problem = Problem::new(&geometry, &volume, &partition).unwrap();
    let ck = f.checkpoint("ck", &NetworkParams::random(2, 11, default_gains(problem)), &ReconConfig::default());
    ok(&["reconstruct", s(&f.path("ds/sino_000.sin")), "--geometry", s(&f.path("ds/geometry.json")), "--method", "g-ilpdh3", "--ckpt", s(&ck), "--out", s(&f.path("g.vol"))]);
    let got = read_volume(&f.path("g.vol")).unwrap();

    let (params, _) = load_checkpoint::<f32>(&ck).unwrap();
    let g = read_sinogram(&f.path("ds/sino_000.sin")).unwrap();
    let mut partials = Vec::new();
    for q in 0..=partition.num_turns() - 3 {
        let w = partition.window(&geometry, &volume, q, 3).unwrap();
        let p = Problem::new(&w.geometry, &w.volume, &w.partition).unwrap();
        let rec = ilpdh_reconstruct(&g.crop_angles(w.angle_range.clone()), p, &params, &ReconConfig::default()).unwrap();
        let c = p.covered();
        partials.push(Partial::centered(rec.cast(), w.slice_range.start + c.start..w.slice_range.start + c.end));
    }
    let target = partition.slice_union(0..partition.num_turns());
    let expected = glue(&partials, &volume, target).unwrap();
    assert_eq!(got.spec, expected.spec);
    for (a, b) in got.data.iter().zip(&expected.data) {
        assert_eq!(*a, *b as f32);
    }
}

#[test]
fn evaluation_reports_infinite_psnr_for_the_truth_itself() {
    let f = Fixture::new(1, "1e4");
    let mu = hu_to_mu(&read_volume(&f.path("ds/phantom_000.vol")).unwrap());
    helix_core::volume::write_volume(&f.path("mu.vol"), &mu, Some("mm^-1")).unwrap();
    ok(&["evaluate", s(&f.path("mu.vol")), s(&f.path("ds/phantom_000.vol")), "--geometry", s(&f.path("ds/geometry.json")), "--discard", "2", "--out", s(&f.path("e/report.json"))]);
    let r: Value = read_json(&f.path("e/report.json")).unwrap();
    assert_eq!(r["psnr"], "inf");
    assert_eq!(r["ssim"], 1.0);
    let csv = std::fs::read_to_string(f.path("e/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 24 - 4);
}

#[test]
fn evaluation_rejects_mismatched_grids() {
    let f = Fixture::new(1, "1e4");
    let dir = TempDir::new().unwrap();
    ok(&["phantom", "--out", s(dir.path()), "--count", "1"]);
    let out = helix(&["evaluate", s(&dir.path().join("phantom_000.vol")), s(&f.path("ds/phantom_000.vol")), "--out", s(&f.path("r.json"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selftest_passes_and_catches_a_broken_adjoint() {
    let clean = helix(&["selftest"]);
    assert_eq!(clean.status.code(), Some(0), "{}", String::from_utf8_lossy(&clean.stdout));
    let broken = helix(&["selftest", "--inject-adjoint-fault", "1e-4"]);
    assert_eq!(broken.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&broken.stdout).contains("FAIL adjoint identity"));
}

#[test]
fn replaying_a_manifest_reproduces_outputs() {
    let f = Fixture::new(1, "1e4");
    ok(&["--threads", "1", "reconstruct", s(&f.path("ds/sino_000.sin")), "--geometry", s(&f.path("ds/geometry.json")), "--method", "huber", "--out", s(&f.path("h.vol"))]);
    let m: Value = read_json(&f.path("h.vol.run.json")).unwrap();
    assert_eq!(m["threads"], 1);
    assert_eq!(m["command"], "reconstruct");
    ok(&["replay", s(&f.path("h.vol.run.json"))]);
    ok(&["replay", s(&f.path("ds/run.json"))]);
}

#[test]
fn zero_threads_is_a_usage_error() {
    assert_eq!(helix(&["--threads", "0", "selftest"]).status.code(), Some(1));
}
