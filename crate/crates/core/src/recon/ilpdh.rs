//! Learned primal-dual couplings on the turn-split operators, and the
//! split (iLPDh) and unsplit (iLPD) reconstructors built from them.

use super::{InitMode, ReconConfig};
use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, TurnPartition, VolumeSpec};
use crate::nn::block::ConvBlockParams;
use crate::nn::invertible::{self, CouplingLayer, CouplingState, Half, LayerActivations};
use crate::nn::meter::MemoryMeter;
use crate::nn::params::{Gains, NetworkParams};
use crate::nn::Shape3;
use crate::projector::{backproject_views, operator_norm, project_views};
use crate::simulation::MU_WATER;
use crate::real::Real;
use crate::volume::{Sinogram, Volume};
use std::ops::Range;

/// A reconstruction problem: trajectory, volume and their turn split.
#[derive(Clone, Copy, Debug)]
pub struct Problem<'a> {
    pub geometry: &'a HelicalGeometry,
    pub volume: &'a VolumeSpec,
    pub partition: &'a TurnPartition,
}

impl<'a> Problem<'a> {
    pub fn new(geometry: &'a HelicalGeometry, volume: &'a VolumeSpec, partition: &'a TurnPartition) -> Result<Self> {
        let n = geometry.num_angles();
        for (j, r) in partition.turn_ranges.iter().enumerate() {
            if r.end > n || partition.subvolume_ranges[j].end > volume.num_slices {
                return Err(Error::ShapeMismatch(format!("turn {j} of the partition lies outside the problem")));
            }
        }
        if partition.num_turns() == 0 {
            return Err(Error::NoCompleteTurn { span: 0.0 });
        }
        Ok(Problem { geometry, volume, partition })
    }

    pub fn view_len(&self) -> usize {
        self.geometry.detector.num_cells()
    }

    pub fn primal_len(&self) -> usize {
        self.volume.len()
    }

    pub fn dual_len(&self) -> usize {
        self.geometry.data_len()
    }

    /// Slices reached by some turn.
    pub fn covered(&self) -> Range<usize> {
        self.partition.slice_union(0..self.partition.num_turns())
    }
}

/// `u[views] += Γ^i(A^j f^j, g^j)`.
pub struct DualUpdate<'a, T> {
    pub iteration: usize,
    pub views: Range<usize>,
    pub slices: Range<usize>,
    geometry: &'a HelicalGeometry,
    sub_spec: VolumeSpec,
    slice_len: usize,
    view_len: usize,
    data: &'a [T],
}

/// `f[slices] += s · Λ^i(κ (A^j)* u^j)`.
pub struct PrimalUpdate<'a> {
    pub iteration: usize,
    pub views: Range<usize>,
    pub slices: Range<usize>,
    geometry: &'a HelicalGeometry,
    sub_spec: VolumeSpec,
    slice_len: usize,
    view_len: usize,
}

impl<'a, T: Real> DualUpdate<'a, T> {
    fn shape(&self) -> Shape3 {
        let d = self.geometry.detector;
        Shape3::new(self.views.len(), d.num_rows, d.num_cols)
    }

    fn net<'p>(&self, params: &'p NetworkParams<T>) -> &'p ConvBlockParams<T> {
        &params.iterations[self.iteration].dual
    }
}

impl<'a> PrimalUpdate<'a> {
    fn shape(&self) -> Shape3 {
        Shape3::new(self.slices.len(), self.sub_spec.height, self.sub_spec.width)
    }
}

impl<'a, T: Real> CouplingLayer<T> for DualUpdate<'a, T> {
    fn target(&self) -> Half {
        Half::Dual
    }

    fn target_range(&self) -> Range<usize> {
        self.views.start * self.view_len..self.views.end * self.view_len
    }

    fn residual(
        &self,
        params: &NetworkParams<T>,
        source: &[T],
        meter: &MemoryMeter,
    ) -> Result<(Vec<T>, LayerActivations<T>)> {
        let sub = &source[self.slices.start * self.slice_len..self.slices.end * self.slice_len];
        let af = project_views(&self.sub_spec, sub, self.geometry, self.views.clone());
        let g = &self.data[self.target_range()];
        let vl = self.view_len;
        let mut input = Vec::with_capacity(2 * af.len());
        for (a, b) in af.chunks_exact(vl).zip(g.chunks_exact(vl)) {
            input.extend_from_slice(a);
            input.extend_from_slice(b);
        }
        let input = meter.track(input);
        let (out, block) = self.net(params).forward(&input, self.shape(), meter)?;
        Ok((out, LayerActivations { input, block }))
    }

    fn backward(
        &self,
        params: &NetworkParams<T>,
        acts: LayerActivations<T>,
        upstream: &[T],
        source_grad: &mut [T],
        grads: &mut NetworkParams<T>,
    ) -> Result<()> {
        let shape = self.shape();
        let LayerActivations { input, block } = acts;
        let dx = self
            .net(params)
            .backward(&input, block, upstream, shape, &mut grads.iterations[self.iteration].dual, true)
            .expect("input gradient requested");
        drop(input);
        let vl = self.view_len;
        let d_af: Vec<T> = dx.chunks_exact(2 * vl).flat_map(|c| c[..vl].iter().copied()).collect();
        let df = backproject_views(&self.sub_spec, &d_af, self.geometry, self.views.clone());
        let dst = &mut source_grad[self.slices.start * self.slice_len..self.slices.end * self.slice_len];
        dst.iter_mut().zip(&df).for_each(|(a, b)| *a += *b);
        Ok(())
    }

    fn describe(&self) -> String {
        format!("dual update, iteration {}, views {:?}", self.iteration, self.views)
    }
}

impl<'a, T: Real> CouplingLayer<T> for PrimalUpdate<'a> {
    fn target(&self) -> Half {
        Half::Primal
    }

    fn target_range(&self) -> Range<usize> {
        self.slices.start * self.slice_len..self.slices.end * self.slice_len
    }

    fn residual(
        &self,
        params: &NetworkParams<T>,
        source: &[T],
        meter: &MemoryMeter,
    ) -> Result<(Vec<T>, LayerActivations<T>)> {
        let chunk = &source[self.views.start * self.view_len..self.views.end * self.view_len];
        let kappa = T::of(params.gains.primal_input);
        let s = T::of(params.gains.primal_output);
        let mut bp = backproject_views(&self.sub_spec, chunk, self.geometry, self.views.clone());
        bp.iter_mut().for_each(|v| *v *= kappa);
        let input = meter.track(bp);
        let (mut out, block) = params.iterations[self.iteration].primal.forward(&input, self.shape(), meter)?;
        out.iter_mut().for_each(|v| *v *= s);
        Ok((out, LayerActivations { input, block }))
    }

    fn backward(
        &self,
        params: &NetworkParams<T>,
        acts: LayerActivations<T>,
        upstream: &[T],
        source_grad: &mut [T],
        grads: &mut NetworkParams<T>,
    ) -> Result<()> {
        let kappa = T::of(params.gains.primal_input);
        let s = T::of(params.gains.primal_output);
        let scaled: Vec<T> = upstream.iter().map(|&v| v * s).collect();
        let LayerActivations { input, block } = acts;
        let mut dx = params.iterations[self.iteration]
            .primal
            .backward(&input, block, &scaled, self.shape(), &mut grads.iterations[self.iteration].primal, true)
            .expect("input gradient requested");
        drop(input);
        dx.iter_mut().for_each(|v| *v *= kappa);
        let du = project_views(&self.sub_spec, &dx, self.geometry, self.views.clone());
        let dst = &mut source_grad[self.views.start * self.view_len..self.views.end * self.view_len];
        dst.iter_mut().zip(&du).for_each(|(a, b)| *a += *b);
        Ok(())
    }

    fn describe(&self) -> String {
        format!("primal update, iteration {}, slices {:?}", self.iteration, self.slices)
    }
}

/// The coupling sequence of the split method: for every iteration, a dual
/// then a primal update for each turn in order.
pub struct SplitNetwork<'a, T> {
    duals: Vec<DualUpdate<'a, T>>,
    primals: Vec<PrimalUpdate<'a>>,
}

impl<'a, T: Real> SplitNetwork<'a, T> {
    pub fn new(problem: Problem<'a>, data: &'a [T], iterations: usize) -> Result<Self> {
        if data.len() != problem.dual_len() {
            return Err(Error::ShapeMismatch(format!(
                "data has {} values, trajectory needs {}",
                data.len(),
                problem.dual_len()
            )));
        }
        let p = problem.partition;
        let mut duals = Vec::new();
        let mut primals = Vec::new();
        for i in 0..iterations {
            for j in 0..p.num_turns() {
                duals.push(DualUpdate {
                    iteration: i,
                    views: p.turn_ranges[j].clone(),
                    slices: p.subvolume_ranges[j].clone(),
                    geometry: problem.geometry,
                    sub_spec: problem.volume.sub_slices(p.subvolume_ranges[j].clone()),
                    slice_len: problem.volume.slice_len(),
                    view_len: problem.view_len(),
                    data,
                });
                primals.push(PrimalUpdate {
                    iteration: i,
                    views: p.turn_ranges[j].clone(),
                    slices: p.subvolume_ranges[j].clone(),
                    geometry: problem.geometry,
                    sub_spec: problem.volume.sub_slices(p.subvolume_ranges[j].clone()),
                    slice_len: problem.volume.slice_len(),
                    view_len: problem.view_len(),
                });
            }
        }
        Ok(SplitNetwork { duals, primals })
    }

    /// The unsplit network: one dual and one primal update per iteration on
    /// the whole trajectory and volume.
    pub fn unsplit(geometry: &'a HelicalGeometry, volume: &VolumeSpec, data: &'a [T], iterations: usize) -> Result<Self> {
        if data.len() != geometry.data_len() {
            return Err(Error::ShapeMismatch("data does not match trajectory".into()));
        }
        let all_views = 0..geometry.num_angles();
        let all_slices = 0..volume.num_slices;
        let view_len = geometry.detector.num_cells();
        let duals = (0..iterations)
            .map(|i| DualUpdate {
                iteration: i,
                views: all_views.clone(),
                slices: all_slices.clone(),
                geometry,
                sub_spec: *volume,
                slice_len: volume.slice_len(),
                view_len,
                data,
            })
            .collect();
        let primals = (0..iterations)
            .map(|i| PrimalUpdate {
                iteration: i,
                views: all_views.clone(),
                slices: all_slices.clone(),
                geometry,
                sub_spec: *volume,
                slice_len: volume.slice_len(),
                view_len,
            })
            .collect();
        Ok(SplitNetwork { duals, primals })
    }

    pub fn layers(&self) -> Vec<&dyn CouplingLayer<T>> {
        self.duals
            .iter()
            .zip(&self.primals)
            .flat_map(|(d, p)| [d as &dyn CouplingLayer<T>, p as &dyn CouplingLayer<T>])
            .collect()
    }

    fn check_params(&self, params: &NetworkParams<T>) -> Result<()> {
        let needed = self.duals.iter().map(|d| d.iteration + 1).max().unwrap_or(0);
        if params.num_iterations() < needed {
            return Err(Error::Config(format!(
                "network has {} iterations, reconstruction needs {needed}",
                params.num_iterations()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, params: &NetworkParams<T>, state: &mut CouplingState<T>) -> Result<()> {
        self.check_params(params)?;
        invertible::forward(&self.layers(), params, state)
    }
}

/// Gains that put the primal block input near unit scale and its output
/// near the attenuation of water: `κ = 1/‖A^0‖` for the first turn and
/// `s = μ_water`.
pub fn default_gains(problem: Problem<'_>) -> Gains {
    let p = problem.partition;
    let sub = problem.volume.sub_slices(p.subvolume_ranges[0].clone());
    let norm = operator_norm(&sub, problem.geometry, p.turn_ranges[0].clone(), 20);
    Gains { primal_input: if norm > 0.0 { 1.0 / norm } else { 1.0 }, primal_output: MU_WATER }
}

/// Initial `(f₀, u₀)`.
pub fn initial_state<T: Real>(cfg: &ReconConfig, problem: Problem<'_>, data: &[T]) -> Result<CouplingState<T>> {
    let mut state = CouplingState::zeros(problem.primal_len(), problem.dual_len());
    if cfg.init_mode == InitMode::Fbp {
        let g = Sinogram {
            geometry_id: problem.geometry.id(),
            num_angles: problem.geometry.num_angles(),
            num_rows: problem.geometry.detector.num_rows,
            num_cols: problem.geometry.detector.num_cols,
            data: data.iter().map(|v| v.f64()).collect(),
        };
        let f = super::fbp::fbp_reconstruct(&g, problem.geometry, problem.volume, &cfg.fbp)?;
        state.primal = f.data.into_iter().map(T::of).collect();
    }
    Ok(state)
}

fn finish<T: Real>(state: &CouplingState<T>, problem: Problem<'_>) -> Result<Volume<T>> {
    if !state.is_finite() {
        return Err(Error::NonFinite("reconstruction state".into()));
    }
    let v = Volume::from_data(*problem.volume, state.primal.clone())?;
    Ok(v.crop_slices(problem.covered()))
}

/// Turn-split learned primal-dual reconstruction. Returns the primal volume
/// on the slices covered by some turn.
pub fn ilpdh_reconstruct<T: Real>(
    g: &Sinogram<T>,
    problem: Problem<'_>,
    params: &NetworkParams<T>,
    cfg: &ReconConfig,
) -> Result<Volume<T>> {
    g.check(problem.geometry)?;
    let net = SplitNetwork::new(problem, &g.data, cfg.iterations)?;
    let mut state = initial_state(cfg, problem, &g.data)?;
    net.forward(params, &mut state)?;
    finish(&state, problem)
}

/// Unsplit learned primal-dual reconstruction on the full operators.
pub fn ilpd_reconstruct<T: Real>(
    g: &Sinogram<T>,
    geometry: &HelicalGeometry,
    volume: &VolumeSpec,
    params: &NetworkParams<T>,
    cfg: &ReconConfig,
) -> Result<Volume<T>> {
    g.check(geometry)?;
    let net = SplitNetwork::unsplit(geometry, volume, &g.data, cfg.iterations)?;
    let whole = TurnPartition {
        turn_ranges: vec![0..geometry.num_angles()],
        head_discard: 0..0,
        tail_discard: geometry.num_angles()..geometry.num_angles(),
        subvolume_ranges: vec![0..volume.num_slices],
        subvolume_centers: vec![volume.num_slices / 2],
        subvolume_thickness: volume.num_slices,
    };
    let problem = Problem { geometry, volume, partition: &whole };
    let mut state = initial_state(cfg, problem, &g.data)?;
    net.forward(params, &mut state)?;
    Volume::from_data(*volume, state.primal)
}
