//! Supervised training on windows of consecutive turns.

use super::ilpdh::{initial_state, Problem, SplitNetwork};
use super::ReconConfig;
use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, TurnPartition, TurnWindow};
use crate::nn::adam::{Adam, AdamConfig};
use crate::nn::invertible::{invertible_backward, CouplingState};
use crate::nn::meter::MemoryMeter;
use crate::nn::params::{GradientTape, NetworkParams};
use crate::volume::{Sinogram, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Consecutive turns per training sample.
    pub window: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 5000, batch_size: 1, lr: 5e-4, window: 3, rng_seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.window == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("training needs positive iterations, batch size, window and rate".into()));
        }
        Ok(())
    }
}

/// One training scan: ground truth in mm⁻¹ and its data.
#[derive(Clone, Debug)]
pub struct Scan {
    pub truth: Volume<f32>,
    pub data: Sinogram<f32>,
    pub geometry: HelicalGeometry,
    pub partition: TurnPartition,
}

impl Scan {
    pub fn window(&self, q: usize, len: usize) -> Result<TurnWindow> {
        self.partition.window(&self.geometry, &self.truth.spec, q, len)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss of each step's batch.
    pub losses: Vec<f64>,
    /// (scan, first turn) of every sample drawn, in order.
    pub samples: Vec<(usize, usize)>,
    /// Largest live activation footprint seen during backpropagation, bytes.
    pub peak_activation_bytes: usize,
}

/// Loss and parameter gradient for one window.
pub struct WindowGradient {
    pub loss: f64,
    pub tape: GradientTape<f32>,
    pub peak_activation_bytes: usize,
}

fn window_problem(scan: &Scan, q: usize, len: usize) -> Result<(TurnWindow, Sinogram<f32>, Volume<f32>)> {
    let w = scan.window(q, len)?;
    let data = scan.data.crop_angles(w.angle_range.clone());
    let target = scan.truth.crop_slices(w.slice_range.clone());
    Ok((w, data, target))
}

/// Mean-squared error of the reconstruction of window `q` and its gradient.
pub fn window_gradient(
    scan: &Scan,
    q: usize,
    len: usize,
    params: &NetworkParams<f32>,
    cfg: &ReconConfig,
    init: Option<&[f32]>,
) -> Result<WindowGradient> {
    let (w, data, target) = window_problem(scan, q, len)?;
    let problem = Problem::new(&w.geometry, &w.volume, &w.partition)?;
    let net = SplitNetwork::new(problem, &data.data, cfg.iterations)?;
    let mut state = match init {
        Some(f0) => CouplingState { primal: f0.to_vec(), dual: vec![0.0; problem.dual_len()] },
        None => initial_state(cfg, problem, &data.data)?,
    };
    net.forward(params, &mut state)?;
    let n = target.data.len() as f64;
    let mut loss = 0.0f64;
    let mut grad_f = Vec::with_capacity(target.data.len());
    for (f, t) in state.primal.iter().zip(&target.data) {
        let d = (*f - *t) as f64;
        loss += d * d;
        grad_f.push((2.0 * d / n) as f32);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("training loss on turns {q}..{}", q + len)));
    }
    let loss_grad = CouplingState { primal: grad_f, dual: vec![0.0; state.dual.len()] };
    let mut tape = GradientTape::for_params(params);
    let meter = MemoryMeter::new();
    invertible_backward(&net.layers(), params, state, loss_grad, &mut tape.grads, &meter, None)?;
    Ok(WindowGradient { loss, tape, peak_activation_bytes: meter.peak() })
}

/// Primal initialization of a whole scan.
pub fn scan_init(scan: &Scan, recon: &ReconConfig) -> Result<Volume<f32>> {
    let problem = Problem::new(&scan.geometry, &scan.truth.spec, &scan.partition)?;
    let state = initial_state(recon, problem, &scan.data.data)?;
    Volume::from_data(scan.truth.spec, state.primal)
}

/// Trains `params` in place. `progress` sees every step's loss.
pub fn train(
    scans: &[Scan],
    params: &mut NetworkParams<f32>,
    cfg: &TrainConfig,
    recon: &ReconConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    recon.validate()?;
    if scans.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    for (k, s) in scans.iter().enumerate() {
        s.data.check(&s.geometry)?;
        if s.partition.num_turns() < cfg.window {
            return Err(Error::Config(format!(
                "scan {k} has {} complete turns, the window needs {}",
                s.partition.num_turns(),
                cfg.window
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut adam = Adam::new(AdamConfig::new(cfg.lr, cfg.iterations), params);
    let mut report = TrainReport::default();
    // Windows start from the whole-scan initialization cropped to their
    // slab, which is what they see inside a full reconstruction.
    let mut init_cache: HashMap<usize, Volume<f32>> = HashMap::new();
    for step in 0..cfg.iterations {
        let mut tape = GradientTape::for_params(params);
        let mut loss = 0.0;
        for _ in 0..cfg.batch_size {
            let k = rng.gen_range(0..scans.len());
            let q = rng.gen_range(0..=scans[k].partition.num_turns() - cfg.window);
            report.samples.push((k, q));
            let init = if recon.init_mode == super::InitMode::Fbp {
                if !init_cache.contains_key(&k) {
                    init_cache.insert(k, scan_init(&scans[k], recon)?);
                }
                let slab = scans[k].window(q, cfg.window)?.slice_range;
                Some(init_cache[&k].crop_slices(slab))
            } else {
                None
            };
            let wg = window_gradient(&scans[k], q, cfg.window, params, recon, init.as_ref().map(|v| v.data.as_slice()))
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("step {step}, scan {k}: {m}")),
                    other => other,
                })?;
            loss += wg.loss;
            tape.add(&wg.tape);
            report.peak_activation_bytes = report.peak_activation_bytes.max(wg.peak_activation_bytes);
        }
        let b = cfg.batch_size as f64;
        loss /= b;
        tape.scale(1.0 / b as f32);
        adam.step(params, &tape, step)?;
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {step}")));
        }
        report.losses.push(loss);
        progress(step, loss);
    }
    Ok(report)
}
