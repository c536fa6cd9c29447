//! Learned parameters of the unrolled network and their checkpoint format.
//!
//! A checkpoint is a directory holding `manifest.json` (architecture, gains,
//! seeds, step count and the tensor table) and `params.bin`, the
//! little-endian `f32` concatenation of all tensors in manifest order.

use super::block::{ConvBlockParams, HIDDEN};
use super::conv::KERNEL;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::volume::{read_json, write_atomic, write_json};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Γ sees the stacked channels (A f, g).
pub const DUAL_IN_CHANNELS: usize = 2;
/// Λ sees A* u.
pub const PRIMAL_IN_CHANNELS: usize = 1;

/// Fixed (untrained) scalings around the primal network: the primal update
/// is `f += output_gain · Λ(input_gain · A* u)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub primal_input: f64,
    pub primal_output: f64,
}

impl Default for Gains {
    fn default() -> Self {
        Gains { primal_input: 1.0, primal_output: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationParams<T> {
    pub dual: ConvBlockParams<T>,
    pub primal: ConvBlockParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    pub iterations: Vec<IterationParams<T>>,
    pub gains: Gains,
}

impl<T: Real> NetworkParams<T> {
    /// Training initialization. Primal blocks start as the zero map, so a
    /// fresh network returns its initial `f` unchanged; dual blocks are fully
    /// random, otherwise no gradient would reach any hidden layer.
    pub fn init(m: usize, seed: u64, gains: Gains) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iterations = (0..m)
            .map(|_| IterationParams {
                dual: ConvBlockParams::kaiming(DUAL_IN_CHANNELS, &mut rng),
                primal: ConvBlockParams::init(PRIMAL_IN_CHANNELS, &mut rng),
            })
            .collect();
        NetworkParams { iterations, gains }
    }

    /// Random weights in every layer; used for gradient tests where the
    /// zero output layer would hide most of the network.
    pub fn random(m: usize, seed: u64, gains: Gains) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let iterations = (0..m)
            .map(|_| IterationParams {
                dual: ConvBlockParams::random(DUAL_IN_CHANNELS, &mut rng),
                primal: ConvBlockParams::random(PRIMAL_IN_CHANNELS, &mut rng),
            })
            .collect();
        NetworkParams { iterations, gains }
    }

    pub fn zeros_like(other: &NetworkParams<T>) -> Self {
        NetworkParams {
            iterations: other
                .iterations
                .iter()
                .map(|it| IterationParams {
                    dual: ConvBlockParams::zeros(it.dual.in_ch()),
                    primal: ConvBlockParams::zeros(it.primal.in_ch()),
                })
                .collect(),
            gains: other.gains,
        }
    }

    pub fn num_iterations(&self) -> usize {
        self.iterations.len()
    }

    /// Tensors in manifest order: per iteration, dual then primal, each
    /// layer's weight then bias.
    pub fn tensors(&self) -> Vec<&Vec<T>> {
        self.iterations.iter().flat_map(|it| it.dual.tensors().chain(it.primal.tensors())).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<T>> {
        self.iterations
            .iter_mut()
            .flat_map(|it| it.dual.tensors_mut().chain(it.primal.tensors_mut()))
            .collect()
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.iterations.len() {
            for net in ["dual", "primal"] {
                for l in 0..3 {
                    names.push(format!("iter{i}.{net}.conv{l}.weight"));
                    names.push(format!("iter{i}.{net}.conv{l}.bias"));
                }
            }
        }
        names
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        let mut out = NetworkParams::<U>::zeros_like_shape(self);
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    fn zeros_like_shape<U: Real>(other: &NetworkParams<U>) -> Self {
        NetworkParams {
            iterations: other
                .iterations
                .iter()
                .map(|it| IterationParams {
                    dual: ConvBlockParams::zeros(it.dual.in_ch()),
                    primal: ConvBlockParams::zeros(it.primal.in_ch()),
                })
                .collect(),
            gains: other.gains,
        }
    }
}

/// Parameter-gradient accumulators shaped like [`NetworkParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientTape<T> {
    pub grads: NetworkParams<T>,
}

impl<T: Real> GradientTape<T> {
    pub fn for_params(params: &NetworkParams<T>) -> Self {
        GradientTape { grads: NetworkParams::zeros_like(params) }
    }

    pub fn reset(&mut self) {
        for t in self.grads.tensors_mut() {
            t.fill(T::zero());
        }
    }

    /// Flattened gradient in manifest order.
    pub fn flatten(&self) -> Vec<T> {
        self.grads.tensors().into_iter().flatten().copied().collect()
    }

    pub fn scale(&mut self, s: T) {
        for t in self.grads.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add(&mut self, other: &GradientTape<T>) {
        for (a, b) in self.grads.tensors_mut().into_iter().zip(other.grads.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += *y);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub kernel_size: usize,
    pub hidden_channels: Vec<usize>,
    pub dual_in_channels: usize,
    pub primal_in_channels: usize,
    pub iterations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub architecture: Architecture,
    pub gains: Gains,
    pub init_seed: u64,
    pub train_seed: Option<u64>,
    pub step_count: usize,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "helix-ilpdh-checkpoint";

fn tensor_shape(name: &str, len: usize) -> Vec<usize> {
    // Weights are (out, in, k, k, k); biases are (out).
    let _ = name;
    vec![len]
}

pub fn save_checkpoint<T: Real>(
    dir: &Path,
    params: &NetworkParams<T>,
    init_seed: u64,
    train_seed: Option<u64>,
    step_count: usize,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(4 * params.num_values());
    let mut offset = 0;
    let names = params.tensor_names();
    let mut layer_shapes = Vec::new();
    for it in &params.iterations {
        for net in [&it.dual, &it.primal] {
            for l in &net.layers {
                layer_shapes.push(vec![l.out_ch, l.in_ch, KERNEL, KERNEL, KERNEL]);
                layer_shapes.push(vec![l.out_ch]);
            }
        }
    }
    for ((t, name), shape) in params.tensors().into_iter().zip(names).zip(layer_shapes) {
        debug_assert_eq!(shape.iter().product::<usize>(), tensor_shape(&name, t.len())[0]);
        tensors.push(TensorEntry { name, shape, offset });
        offset += t.len();
        for v in t {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        architecture: Architecture {
            kernel_size: KERNEL,
            hidden_channels: HIDDEN.to_vec(),
            dual_in_channels: DUAL_IN_CHANNELS,
            primal_in_channels: PRIMAL_IN_CHANNELS,
            iterations: params.num_iterations(),
        },
        gains: params.gains,
        init_seed,
        train_seed,
        step_count,
        tensors,
    };
    write_atomic(&dir.join("params.bin"), &blob)?;
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(NetworkParams<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.format != CHECKPOINT_FORMAT || manifest.version != 1 {
        return Err(Error::Format(format!("unsupported checkpoint {} v{}", manifest.format, manifest.version)));
    }
    let arch = &manifest.architecture;
    if arch.kernel_size != KERNEL
        || arch.hidden_channels != HIDDEN
        || arch.dual_in_channels != DUAL_IN_CHANNELS
        || arch.primal_in_channels != PRIMAL_IN_CHANNELS
    {
        return Err(Error::Format("checkpoint architecture differs from this build".into()));
    }
    let blob = fs::read(dir.join("params.bin"))?;
    let mut params = NetworkParams::<T>::init(arch.iterations, 0, manifest.gains);
    if blob.len() != 4 * params.num_values() {
        return Err(Error::Format(format!(
            "parameter blob has {} bytes, architecture needs {}",
            blob.len(),
            4 * params.num_values()
        )));
    }
    let names = params.tensor_names();
    for ((t, name), entry) in params.tensors_mut().into_iter().zip(&names).zip(&manifest.tensors) {
        if &entry.name != name || entry.shape.iter().product::<usize>() != t.len() {
            return Err(Error::Format(format!("tensor table mismatch at {name}")));
        }
        let bytes = &blob[4 * entry.offset..4 * (entry.offset + t.len())];
        for (v, c) in t.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64);
        }
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("checkpoint parameters".into()));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_network_has_zero_primal_output_layers() {
        let p = NetworkParams::<f32>::init(2, 5, Gains::default());
        for it in &p.iterations {
            assert!(it.dual.layers[2].weight.iter().any(|&w| w != 0.0));
            assert!(it.primal.layers[2].weight.iter().all(|&w| w == 0.0));
            assert!(it.dual.layers[0].weight.iter().any(|&w| w != 0.0));
        }
        assert_eq!(p.tensors().len(), p.tensor_names().len());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("helix-ckpt-{}", std::process::id()));
        let p = NetworkParams::<f32>::random(2, 9, Gains { primal_input: 0.5, primal_output: 0.0192 });
        let m = save_checkpoint(&dir, &p, 9, Some(3), 17).unwrap();
        let (q, m2) = load_checkpoint::<f32>(&dir).unwrap();
        assert_eq!(p, q);
        assert_eq!(m, m2);
        assert_eq!(m.tensors[0].shape, vec![32, 2, 3, 3, 3]);
        fs::write(dir.join("params.bin"), [0u8; 8]).unwrap();
        assert!(load_checkpoint::<f32>(&dir).is_err());
        fs::remove_dir_all(&dir).unwrap();
    }
}
