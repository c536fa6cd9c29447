use crate::dataset::*;
use crate::manifest::{manifest_path, Recorder};
use crate::UsageError;
use anyhow::{bail, Context, Result};
use helix_core::geometry::{build_geometry, minimal_thickness, partition_turns, TrajectoryParams};
use helix_core::metrics::{evaluate, mark_turns, write_slice_csv, EvalReport};
use helix_core::nn::{load_checkpoint, save_checkpoint, NetworkParams};
use helix_core::recon::desk::DeskScenario;
use helix_core::recon::{
    default_gains, fbp_reconstruct, huber_reconstruct, ilpdh_reconstruct, sliding_window_reconstruct, train,
    MethodPreset, Precision, Preset, Problem, ReconConfig, Scan,
};
use helix_core::simulation::{cell_rng, hu_to_mu, make_phantom, random_phantom, simulate_data, truncate_trajectory, DoseModel};
use helix_core::volume::{read_json, read_sinogram, read_volume, sidecar_path, write_atomic, write_json, write_sinogram, write_volume};
use helix_core::{Real, Sinogram, Volume};
use rand::RngCore;
use std::fs;
use std::path::{Path, PathBuf};

const RECON_CONFIG: &str = "recon.json";
const LOSS_CSV: &str = "loss.csv";

/// A built-in preset name or a path to a preset file.
fn load_preset(name: &str) -> Result<Preset> {
    let path = Path::new(name);
    if path.extension().is_some_and(|e| e == "json") || path.is_file() {
        let text = fs::read_to_string(path).with_context(|| format!("reading preset {name}"))?;
        return Ok(Preset::parse(&text)?);
    }
    Ok(Preset::builtin(name)?)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn copy_with_sidecar(from: &Path, to: &Path) -> Result<()> {
    fs::copy(from, to).with_context(|| format!("copying {}", from.display()))?;
    fs::copy(sidecar_path(from), sidecar_path(to))?;
    Ok(())
}

pub fn desk(turns: usize, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("desk");
    rec.config(&turns)?;
    let desk = DeskScenario::with_turns(turns)?;
    create_dir(out)?;
    let spec = out.join("spec.json");
    let traj = out.join("trajectory.json");
    write_json(&spec, &PhantomSetSpec { volume: desk.volume })?;
    write_json(&traj, &desk.trajectory)?;
    rec.output(&spec)?;
    rec.output(&traj)?;
    rec.finish(&manifest_path(out))?;
    Ok(())
}

pub fn phantom(spec: Option<&Path>, out: &Path, count: usize, seed: u64) -> Result<()> {
    let mut rec = Recorder::new("phantom");
    let set = match spec {
        Some(p) => {
            rec.input(p)?;
            read_json::<PhantomSetSpec>(p).with_context(|| format!("reading phantom spec {}", p.display()))?
        }
        None => PhantomSetSpec { volume: DeskScenario::with_turns(5)?.volume },
    };
    set.volume.validate()?;
    rec.config(&set)?;
    rec.seed("phantom", seed);
    create_dir(out)?;
    let mut phantoms = Vec::with_capacity(count);
    for k in 0..count {
        let s = seed.wrapping_add(k as u64);
        let ps = random_phantom(s, set.volume);
        let vol = make_phantom(&ps)?;
        let file = phantom_file(k);
        let path = out.join(&file);
        write_volume(&path, &vol, Some(HU))?;
        rec.output(&path)?;
        let spec_sha256 = crate::manifest::sha256_hex(&serde_json::to_vec(&ps)?);
        phantoms.push(PhantomEntry { file, seed: s, spec_sha256 });
    }
    rec.phase("generate");
    let manifest = out.join(DATASET_MANIFEST);
    write_json(&manifest, &DatasetManifest { volume: set.volume, seed, phantoms, simulation: None })?;
    rec.output(&manifest)?;
    rec.finish(&manifest_path(out))?;
    eprintln!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

fn scan_geometry(trajectory: TrajectoryParams, volume: helix_core::VolumeSpec) -> Result<ScanGeometry> {
    let full = build_geometry(&trajectory)?;
    let geometry = truncate_trajectory(&full, &volume)?;
    let partition = minimal_thickness(&geometry, &volume).and_then(|t| partition_turns(&geometry, &volume, t));
    let partition = match partition {
        Ok(p) => Some(p),
        Err(e) => {
            eprintln!("warning: no turn partition ({e}); only fbp and huber can reconstruct this scan");
            None
        }
    };
    Ok(ScanGeometry { trajectory, geometry, volume, partition })
}

pub fn simulate(dataset: &Path, trajectory: &Path, photons: f64, seed: u64, out: Option<&Path>) -> Result<()> {
    let mut rec = Recorder::new("simulate");
    DoseModel { photons_per_pixel: photons, rng_seed: seed }.validate()?;
    let out = out.unwrap_or(dataset);
    let manifest_in = dataset.join(DATASET_MANIFEST);
    rec.input(&manifest_in)?;
    rec.input(trajectory)?;
    let mut manifest: DatasetManifest = read_json(&manifest_in).context("reading dataset manifest")?;
    let traj: TrajectoryParams = read_json(trajectory).context("reading trajectory")?;
    let scan = scan_geometry(traj, manifest.volume)?;
    rec.config(&(&scan.trajectory, photons))?;
    rec.seed("noise", seed);
    rec.phase("geometry");
    create_dir(out)?;
    let geom_path = out.join(SCAN_GEOMETRY);
    write_json(&geom_path, &scan)?;
    rec.output(&geom_path)?;
    let mut noise_seeds = Vec::new();
    let mut sinograms = Vec::new();
    for (k, entry) in manifest.phantoms.iter().enumerate() {
        let src = dataset.join(&entry.file);
        rec.input(&src)?;
        let hu = read_volume(&src)?;
        if hu.spec != manifest.volume {
            bail!(helix_core::Error::ShapeMismatch(format!("{} does not match the dataset volume", entry.file)));
        }
        let noise_seed = cell_rng(seed, k as u64).next_u64();
        let dose = DoseModel { photons_per_pixel: photons, rng_seed: noise_seed };
        let g = simulate_data(&hu_to_mu(&hu), &scan.geometry, &dose)?;
        let file = sinogram_file(k);
        let path = out.join(&file);
        write_sinogram(&path, &g)?;
        rec.output(&path)?;
        if out != dataset {
            copy_with_sidecar(&src, &out.join(&entry.file))?;
        }
        noise_seeds.push(noise_seed);
        sinograms.push(file);
    }
    rec.phase("simulate");
    manifest.simulation =
        Some(SimulationRecord { photons, seed, geometry_id: scan.geometry.id(), noise_seeds, sinograms });
    let manifest_out = out.join(DATASET_MANIFEST);
    write_json(&manifest_out, &manifest)?;
    rec.output(&manifest_out)?;
    rec.finish(&manifest_path(out))?;
    eprintln!("simulated {} scans into {}", manifest.phantoms.len(), out.display());
    Ok(())
}

fn load_scans(dataset: &Path, rec: &mut Recorder) -> Result<(Vec<Scan>, ScanGeometry)> {
    let manifest_in = dataset.join(DATASET_MANIFEST);
    rec.input(&manifest_in)?;
    let manifest: DatasetManifest = read_json(&manifest_in).context("reading dataset manifest")?;
    let Some(sim) = &manifest.simulation else {
        bail!(helix_core::Error::Config(format!("{} has no simulated data", dataset.display())));
    };
    let geom_path = dataset.join(SCAN_GEOMETRY);
    rec.input(&geom_path)?;
    let scan: ScanGeometry = read_json(&geom_path).context("reading scan geometry")?;
    let Some(partition) = scan.partition.clone() else {
        bail!(helix_core::Error::Config("the scan has no turn partition".into()));
    };
    let mut scans = Vec::new();
    for (entry, sino) in manifest.phantoms.iter().zip(&sim.sinograms) {
        let (tp, sp) = (dataset.join(&entry.file), dataset.join(sino));
        rec.input(&tp)?;
        rec.input(&sp)?;
        let data = read_sinogram(&sp)?;
        data.check(&scan.geometry)?;
        scans.push(Scan {
            truth: hu_to_mu(&read_volume(&tp)?),
            data,
            geometry: scan.geometry.clone(),
            partition: partition.clone(),
        });
    }
    Ok((scans, scan))
}

pub fn train_cmd(dataset: &Path, preset: &str, steps: Option<usize>, out: &Path) -> Result<()> {
    let mut rec = Recorder::new("train");
    let preset = load_preset(preset)?;
    let (recon, tcfg, init_seed) = preset.ilpdh()?;
    let (recon, mut tcfg) = (recon.clone(), tcfg.clone());
    if let Some(s) = steps {
        tcfg.iterations = s;
    }
    rec.config(&(&preset.name, &recon, &tcfg, init_seed))?;
    rec.seed("init", init_seed);
    rec.seed("train", tcfg.rng_seed);
    let (scans, scan) = load_scans(dataset, &mut rec)?;
    let partition = scan.partition.as_ref().expect("checked by load_scans");
    let problem = Problem::new(&scan.geometry, &scan.volume, partition)?;
    let mut params = NetworkParams::<f32>::init(recon.iterations, init_seed, default_gains(problem));
    rec.phase("load");
    let every = (tcfg.iterations / 20).max(1);
    let report = train(&scans, &mut params, &tcfg, &recon, |step, loss| {
        if step % every == 0 || step + 1 == tcfg.iterations {
            eprintln!("step {step} loss {loss:.4e}");
        }
    })?;
    rec.phase("train");
    create_dir(out)?;
    save_checkpoint(out, &params, init_seed, Some(tcfg.rng_seed), tcfg.iterations)?;
    let mut csv = String::from("step,loss\n");
    for (k, l) in report.losses.iter().enumerate() {
        csv.push_str(&format!("{k},{l}\n"));
    }
    write_atomic(&out.join(LOSS_CSV), csv.as_bytes())?;
    write_json(&out.join(RECON_CONFIG), &recon)?;
    for f in ["manifest.json", "params.bin", LOSS_CSV, RECON_CONFIG] {
        rec.output(&out.join(f))?;
    }
    rec.finish(&manifest_path(out))?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
pub enum Method {
    Fbp,
    Huber,
    Ilpdh,
    #[value(name = "g-ilpdh1")]
    GIlpdh1,
    #[value(name = "g-ilpdh3")]
    GIlpdh3,
}

fn learned<T: Real>(
    g: &Sinogram<f32>,
    scan: &ScanGeometry,
    params: &NetworkParams<f32>,
    cfg: &ReconConfig,
    method: Method,
) -> Result<Volume<f64>> {
    let partition = scan.partition.as_ref().ok_or_else(|| helix_core::Error::Config("the scan has no turn partition".into()))?;
    let g: Sinogram<T> = g.cast();
    let params: NetworkParams<T> = params.cast();
    let vol = match method {
        Method::Ilpdh => {
            let problem = Problem::new(&scan.geometry, &scan.volume, partition)?;
            ilpdh_reconstruct(&g, problem, &params, cfg)?.cast()
        }
        Method::GIlpdh1 | Method::GIlpdh3 => {
            let window = if method == Method::GIlpdh1 { 1 } else { 3 };
            sliding_window_reconstruct(&g, &scan.geometry, &scan.volume, partition, &params, cfg, window)?.0
        }
        Method::Fbp | Method::Huber => unreachable!("analytic methods take no network"),
    };
    Ok(vol)
}

pub fn reconstruct(
    sino: &Path,
    geometry: &Path,
    method: Method,
    ckpt: Option<&Path>,
    preset: Option<&str>,
    out: &Path,
) -> Result<()> {
    let mut rec = Recorder::new("reconstruct");
    rec.input(sino)?;
    rec.input(geometry)?;
    let scan: ScanGeometry = read_json(geometry).context("reading scan geometry")?;
    let g = read_sinogram(sino)?;
    g.check(&scan.geometry)?;
    let vol = match method {
        Method::Fbp | Method::Huber => {
            let name = preset.unwrap_or(if method == Method::Fbp { "fbp" } else { "huber" });
            let p = load_preset(name)?;
            rec.config(&(method, &p))?;
            match (&p.method, method) {
                (MethodPreset::Fbp { fbp }, Method::Fbp) => fbp_reconstruct(&g, &scan.geometry, &scan.volume, fbp)?,
                (MethodPreset::Huber { huber }, Method::Huber) => {
                    let (v, report) = huber_reconstruct(&g, &scan.geometry, &scan.volume, huber)?;
                    eprintln!("huber objective {:.6e} after {} restarts", report.objective.last().unwrap_or(&0.0), report.restarts);
                    v
                }
                _ => bail!(UsageError(format!("preset {} does not configure {method:?}", p.name))),
            }
        }
        _ => {
            let Some(ckpt) = ckpt else {
                bail!(UsageError("learned methods need --ckpt".into()));
            };
            let (params, _) = load_checkpoint::<f32>(ckpt)?;
            rec.input(&ckpt.join("params.bin"))?;
            let cfg_path = ckpt.join(RECON_CONFIG);
            let cfg = if cfg_path.exists() {
                read_json::<ReconConfig>(&cfg_path)?
            } else {
                match preset {
                    Some(p) => load_preset(p)?.ilpdh()?.0.clone(),
                    None => Preset::builtin("ilpdh3")?.ilpdh()?.0.clone(),
                }
            };
            cfg.validate()?;
            rec.config(&(method, &cfg))?;
            match cfg.precision {
                Precision::Single => learned::<f32>(&g, &scan, &params, &cfg, method)?,
                Precision::Double => learned::<f64>(&g, &scan, &params, &cfg, method)?,
            }
        }
    };
    rec.phase("reconstruct");
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_volume(out, &vol, Some(MU))?;
    rec.output(out)?;
    rec.finish(&manifest_path(out))?;
    Ok(())
}

/// `truth` cut to the slices of `recon`.
fn align_truth(recon: &Volume<f32>, truth: &Volume<f32>) -> Result<Volume<f32>> {
    let (r, t) = (&recon.spec, &truth.spec);
    let offset = t.slice_coord(r.z_origin);
    let start = offset.round();
    let fits = r.width == t.width
        && r.height == t.height
        && r.voxel_size == t.voxel_size
        && (offset - start).abs() < 1e-6
        && start >= 0.0
        && start as usize + r.num_slices <= t.num_slices;
    if !fits {
        bail!(helix_core::Error::ShapeMismatch(format!(
            "reconstruction grid {r:?} is not a slab of the truth grid {t:?}"
        )));
    }
    let s = start as usize;
    Ok(truth.crop_slices(s..s + r.num_slices))
}

pub fn evaluate_cmd(recon_path: &Path, truth_path: &Path, geometry: Option<&Path>, discard: usize, out: &Path) -> Result<EvalReport> {
    let mut rec = Recorder::new("evaluate");
    rec.input(recon_path)?;
    rec.input(truth_path)?;
    rec.config(&discard)?;
    let recon = read_volume(recon_path)?;
    let mut truth = read_volume(truth_path)?;
    if is_hu(truth_path) {
        truth = hu_to_mu(&truth);
    }
    let full = truth.spec;
    let truth = align_truth(&recon, &truth)?;
    let mut report = evaluate(&recon, &truth, discard)?;
    if let Some(gp) = geometry {
        rec.input(gp)?;
        let scan: ScanGeometry = read_json(gp)?;
        if let Some(p) = &scan.partition {
            mark_turns(&mut report, p, &full);
        }
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(out, &report)?;
    let csv_path: PathBuf = out.with_extension("csv");
    let mut csv = Vec::new();
    write_slice_csv(&report, &mut csv)?;
    write_atomic(&csv_path, &csv)?;
    rec.output(out)?;
    rec.output(&csv_path)?;
    rec.finish(&manifest_path(out))?;
    println!("psnr {:.3} dB  ssim {:.4}  mse {:.4e}", report.psnr, report.ssim, report.mse);
    Ok(report)
}
