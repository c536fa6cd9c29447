//! Additive coupling layers and backpropagation by recomputation.
//!
//! Every layer updates one half of the state `(primal, dual)` by adding a
//! residual computed from the other half only, so its input is recovered
//! from its output by subtracting the same residual. The backward pass walks
//! the layers in reverse, rebuilding each layer's input and activations on
//! the fly, so only one block's activations are alive at any time.

use super::block::BlockActivations;
use super::meter::{MemoryMeter, Tracked};
use super::params::NetworkParams;
use crate::error::{Error, Result};
use crate::real::Real;
use std::ops::Range;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Half {
    Primal,
    Dual,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingState<T> {
    pub primal: Vec<T>,
    pub dual: Vec<T>,
}

impl<T: Real> CouplingState<T> {
    pub fn zeros(primal_len: usize, dual_len: usize) -> Self {
        CouplingState { primal: vec![T::zero(); primal_len], dual: vec![T::zero(); dual_len] }
    }

    pub fn half(&self, h: Half) -> &[T] {
        match h {
            Half::Primal => &self.primal,
            Half::Dual => &self.dual,
        }
    }

    pub fn half_mut(&mut self, h: Half) -> &mut Vec<T> {
        match h {
            Half::Primal => &mut self.primal,
            Half::Dual => &mut self.dual,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.primal.iter().chain(&self.dual).all(|v| v.is_finite())
    }
}

impl Half {
    pub fn other(self) -> Half {
        match self {
            Half::Primal => Half::Dual,
            Half::Dual => Half::Primal,
        }
    }
}

/// What a layer keeps between its residual evaluation and its backward pass.
#[derive(Debug)]
pub struct LayerActivations<T> {
    pub input: Tracked<T>,
    pub block: BlockActivations<T>,
}

/// One additive coupling `target[range] += residual(other half)`.
pub trait CouplingLayer<T: Real> {
    fn target(&self) -> Half;

    fn target_range(&self) -> Range<usize>;

    /// Residual for `target_range`, computed from the full other half.
    fn residual(
        &self,
        params: &NetworkParams<T>,
        source: &[T],
        meter: &MemoryMeter,
    ) -> Result<(Vec<T>, LayerActivations<T>)>;

    /// Given the gradient of the loss with respect to the residual, adds
    /// the gradient with respect to the other half into `source_grad` and
    /// the parameter gradients into `grads`.
    fn backward(
        &self,
        params: &NetworkParams<T>,
        acts: LayerActivations<T>,
        upstream: &[T],
        source_grad: &mut [T],
        grads: &mut NetworkParams<T>,
    ) -> Result<()>;

    fn describe(&self) -> String;
}

fn add_residual<T: Real>(dst: &mut [T], r: &[T]) {
    dst.iter_mut().zip(r).for_each(|(d, v)| *d += *v);
}

fn sub_residual<T: Real>(dst: &mut [T], r: &[T]) {
    dst.iter_mut().zip(r).for_each(|(d, v)| *d -= *v);
}

fn check_finite<T: Real>(values: &[T], layer: usize, what: &str, l: &dyn CouplingLayer<T>) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} at block {layer} ({})", l.describe())))
    }
}

/// Applies the layers in order.
pub fn forward<T: Real>(
    layers: &[&dyn CouplingLayer<T>],
    params: &NetworkParams<T>,
    state: &mut CouplingState<T>,
) -> Result<()> {
    let meter = MemoryMeter::new();
    for (k, l) in layers.iter().enumerate() {
        let (r, acts) = l.residual(params, state.half(l.target().other()), &meter)?;
        drop(acts);
        check_finite(&r, k, "residual", *l)?;
        let range = l.target_range();
        add_residual(&mut state.half_mut(l.target())[range], &r);
    }
    Ok(())
}

/// Undoes [`forward`].
pub fn inverse<T: Real>(
    layers: &[&dyn CouplingLayer<T>],
    params: &NetworkParams<T>,
    state: &mut CouplingState<T>,
) -> Result<()> {
    let meter = MemoryMeter::new();
    for (k, l) in layers.iter().enumerate().rev() {
        let (r, _) = l.residual(params, state.half(l.target().other()), &meter)?;
        let range = l.target_range();
        let target = &mut state.half_mut(l.target())[range];
        sub_residual(target, &r);
        check_finite(target, k, "reconstructed input", *l)?;
    }
    Ok(())
}

/// Gradients of a loss with respect to the parameters and the initial state,
/// given the final state of [`forward`] and the loss gradient there.
///
/// `probe` is called with each layer index and that layer's reconstructed
/// input state, before its gradients are accumulated. Returns the gradient
/// with respect to the initial state.
pub fn invertible_backward<T: Real>(
    layers: &[&dyn CouplingLayer<T>],
    params: &NetworkParams<T>,
    final_state: CouplingState<T>,
    loss_grad: CouplingState<T>,
    grads: &mut NetworkParams<T>,
    meter: &MemoryMeter,
    mut probe: Option<&mut dyn FnMut(usize, &CouplingState<T>)>,
) -> Result<CouplingState<T>> {
    let mut state = final_state;
    let mut grad = loss_grad;
    for (k, l) in layers.iter().enumerate().rev() {
        let target = l.target();
        let range = l.target_range();
        let (r, acts) = l.residual(params, state.half(target.other()), meter)?;
        let x = &mut state.half_mut(target)[range.clone()];
        sub_residual(x, &r);
        check_finite(x, k, "reconstructed input", *l)?;
        drop(r);
        if let Some(p) = probe.as_mut() {
            p(k, &state);
        }
        let upstream = grad.half(target)[range].to_vec();
        let sg = grad.half_mut(target.other());
        l.backward(params, acts, &upstream, sg, grads)?;
        check_finite(sg, k, "state gradient", *l)?;
    }
    Ok(grad)
}

/// Forward pass that keeps every layer's activations, for reference
/// backpropagation.
pub struct StoredForward<T> {
    pub final_state: CouplingState<T>,
    activations: Vec<LayerActivations<T>>,
}

pub fn stored_forward<T: Real>(
    layers: &[&dyn CouplingLayer<T>],
    params: &NetworkParams<T>,
    mut state: CouplingState<T>,
    meter: &MemoryMeter,
) -> Result<StoredForward<T>> {
    let mut activations = Vec::with_capacity(layers.len());
    for (k, l) in layers.iter().enumerate() {
        let (r, acts) = l.residual(params, state.half(l.target().other()), meter)?;
        check_finite(&r, k, "residual", *l)?;
        add_residual(&mut state.half_mut(l.target())[l.target_range()], &r);
        activations.push(acts);
    }
    Ok(StoredForward { final_state: state, activations })
}

/// Plain reverse-mode pass over stored activations.
pub fn stored_backward<T: Real>(
    layers: &[&dyn CouplingLayer<T>],
    params: &NetworkParams<T>,
    stored: StoredForward<T>,
    loss_grad: CouplingState<T>,
    grads: &mut NetworkParams<T>,
) -> Result<CouplingState<T>> {
    let mut grad = loss_grad;
    let mut acts = stored.activations;
    for l in layers.iter().rev() {
        let a = acts.pop().expect("one activation record per layer");
        let upstream = grad.half(l.target())[l.target_range()].to_vec();
        let sg = grad.half_mut(l.target().other());
        l.backward(params, a, &upstream, sg, grads)?;
    }
    Ok(grad)
}
