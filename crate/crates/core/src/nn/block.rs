//! The three-layer CNN used for both the dual (Γ) and primal (Λ) updates:
//! conv → ReLU → conv → ReLU → conv with 32 and 16 hidden channels.

use super::conv::{Conv3d, Shape3};
use super::meter::{MemoryMeter, Tracked};
use crate::error::{Error, Result};
use crate::real::Real;
use rand::Rng;

pub const HIDDEN: [usize; 2] = [32, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlockParams<T> {
    pub layers: [Conv3d<T>; 3],
}

/// Hidden activations of one block evaluation, kept for its backward pass.
#[derive(Debug)]
pub struct BlockActivations<T> {
    hidden1: Tracked<T>,
    hidden2: Tracked<T>,
}

fn kaiming_uniform<T: Real, R: Rng>(layer: &mut Conv3d<T>, rng: &mut R) {
    let bound = (6.0 / layer.fan_in() as f64).sqrt();
    for w in &mut layer.weight {
        *w = T::of(rng.gen_range(-bound..bound));
    }
}

fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

fn relu_mask<T: Real>(grad: &mut [T], act: &[T]) {
    for (g, a) in grad.iter_mut().zip(act) {
        if *a <= T::zero() {
            *g = T::zero();
        }
    }
}

impl<T: Real> ConvBlockParams<T> {
    pub fn zeros(in_ch: usize) -> Self {
        ConvBlockParams {
            layers: [
                Conv3d::zeros(in_ch, HIDDEN[0]),
                Conv3d::zeros(HIDDEN[0], HIDDEN[1]),
                Conv3d::zeros(HIDDEN[1], 1),
            ],
        }
    }

    /// Kaiming-uniform hidden layers, zero biases and a zero output layer, so
    /// a fresh block maps every input to zero.
    pub fn init<R: Rng>(in_ch: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_ch);
        kaiming_uniform(&mut p.layers[0], rng);
        kaiming_uniform(&mut p.layers[1], rng);
        p
    }

    /// Kaiming-uniform weights in every layer and zero biases.
    pub fn kaiming<R: Rng>(in_ch: usize, rng: &mut R) -> Self {
        let mut p = Self::init(in_ch, rng);
        kaiming_uniform(&mut p.layers[2], rng);
        p
    }

    /// Kaiming-uniform weights in every layer and small random biases.
    pub fn random<R: Rng>(in_ch: usize, rng: &mut R) -> Self {
        let mut p = Self::kaiming(in_ch, rng);
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = T::of(rng.gen_range(-0.05..0.05));
            }
        }
        p
    }

    pub fn in_ch(&self) -> usize {
        self.layers[0].in_ch
    }

    pub fn forward(
        &self,
        input: &[T],
        shape: Shape3,
        meter: &MemoryMeter,
    ) -> Result<(Vec<T>, BlockActivations<T>)> {
        if input.len() != self.in_ch() * shape.len() {
            return Err(Error::ShapeMismatch(format!(
                "block expects {} channels of {} values, got {} values",
                self.in_ch(),
                shape.len(),
                input.len()
            )));
        }
        let mut h1 = self.layers[0].forward(input, shape);
        relu_inplace(&mut h1);
        let hidden1 = meter.track(h1);
        let mut h2 = self.layers[1].forward(&hidden1, shape);
        relu_inplace(&mut h2);
        let hidden2 = meter.track(h2);
        let out = self.layers[2].forward(&hidden2, shape);
        Ok((out, BlockActivations { hidden1, hidden2 }))
    }

    /// Backpropagates `grad_out` through the block evaluated at `input`.
    /// Parameter gradients are added into `grads`; the input gradient is
    /// returned when `want_input_grad` is set.
    pub fn backward(
        &self,
        input: &[T],
        acts: BlockActivations<T>,
        grad_out: &[T],
        shape: Shape3,
        grads: &mut ConvBlockParams<T>,
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        let [g1, g2, g3] = &mut grads.layers;
        self.layers[2].backward_params(&acts.hidden2, grad_out, shape, &mut g3.weight, &mut g3.bias);
        let mut d2 = self.layers[2].backward_input(grad_out, shape);
        relu_mask(&mut d2, &acts.hidden2);
        drop(acts.hidden2);
        self.layers[1].backward_params(&acts.hidden1, &d2, shape, &mut g2.weight, &mut g2.bias);
        let mut d1 = self.layers[1].backward_input(&d2, shape);
        drop(d2);
        relu_mask(&mut d1, &acts.hidden1);
        drop(acts.hidden1);
        self.layers[0].backward_params(input, &d1, shape, &mut g1.weight, &mut g1.bias);
        want_input_grad.then(|| self.layers[0].backward_input(&d1, shape))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Vec<T>> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<T>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}

/// One forward evaluation without bookkeeping.
pub fn conv_block_forward<T: Real>(params: &ConvBlockParams<T>, input: &[T], shape: Shape3) -> Result<Vec<T>> {
    Ok(params.forward(input, shape, &MemoryMeter::new())?.0)
}

/// Input gradient and parameter gradients of the block at `input`.
pub fn conv_block_backward<T: Real>(
    params: &ConvBlockParams<T>,
    input: &[T],
    upstream: &[T],
    shape: Shape3,
) -> Result<(Vec<T>, ConvBlockParams<T>)> {
    if upstream.len() != shape.len() {
        return Err(Error::ShapeMismatch(format!(
            "upstream gradient has {} values, output has {}",
            upstream.len(),
            shape.len()
        )));
    }
    let (_, acts) = params.forward(input, shape, &MemoryMeter::new())?;
    let mut grads = ConvBlockParams::zeros(params.in_ch());
    let dx = params.backward(input, acts, upstream, shape, &mut grads, true).expect("input gradient requested");
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 29) as f64 / 29.0 - 0.4) * 2.0).collect()
    }

    #[test]
    fn zero_block_gives_zero() {
        let s = Shape3::new(3, 4, 4);
        let p = ConvBlockParams::<f64>::zeros(2);
        assert!(conv_block_forward(&p, &input(2 * s.len()), s).unwrap().iter().all(|&v| v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ConvBlockParams::<f64>::init(1, &mut rng);
        assert!(conv_block_forward(&p, &input(s.len()), s).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let s = Shape3::new(2, 3, 3);
        let p = ConvBlockParams::<f64>::random(1, &mut ChaCha8Rng::seed_from_u64(2));
        let (dx, g) = conv_block_backward(&p, &input(s.len()), &vec![0.0; s.len()], s).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(g.tensors().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let s = Shape3::new(2, 3, 3);
        let p = ConvBlockParams::<f64>::zeros(2);
        assert!(conv_block_forward(&p, &input(s.len()), s).is_err());
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let s = Shape3::new(3, 4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = ConvBlockParams::<f64>::random(2, &mut rng);
        let x = input(2 * s.len());
        let w: Vec<f64> = (0..s.len()).map(|i| ((i * 13) % 7) as f64 / 7.0 - 0.5).collect();
        let loss = |q: &ConvBlockParams<f64>| -> f64 {
            conv_block_forward(q, &x, s).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let (dx, grads) = conv_block_backward(&p, &x, &w, s).unwrap();
        let pattern = |q: &ConvBlockParams<f64>| -> Vec<bool> {
            let (_, a) = q.forward(&x, s, &MemoryMeter::new()).unwrap();
            a.hidden1.iter().chain(a.hidden2.iter()).map(|&v| v > 0.0).collect()
        };
        let base = pattern(&p);
        let h = 1e-3;
        let mut checked = 0;
        for t in 0..60 {
            let layer = t % 3;
            let k = rng.gen_range(0..p.layers[layer].weight.len());
            let mut plus = p.clone();
            plus.layers[layer].weight[k] += h;
            let mut minus = p.clone();
            minus.layers[layer].weight[k] -= h;
            // A perturbation that flips a ReLU makes the difference quotient
            // straddle a kink; such taps say nothing about the gradient.
            if pattern(&plus) != base || pattern(&minus) != base {
                continue;
            }
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.layers[layer].weight[k];
            let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-12);
            assert!(rel <= 1e-4, "layer {layer} tap {t}: fd {fd} vs {an}");
            checked += 1;
        }
        assert!(checked >= 20, "only {checked} taps away from kinks");
        let k = 17;
        let mut xp = x.clone();
        xp[k] += h;
        let mut xm = x.clone();
        xm[k] -= h;
        let f = |v: &[f64]| -> f64 { conv_block_forward(&p, v, s).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let fd = (f(&xp) - f(&xm)) / (2.0 * h);
        assert!((fd - dx[k]).abs() <= 1e-4 * fd.abs().max(1e-3));
    }

    #[test]
    fn all_ones_kernel_input_gradient_is_constant_inside() {
        // Single 1→1 layer with an all-ones kernel: d(sum y)/dx counts the
        // output taps that read x, which is 27 away from the borders.
        let s = Shape3::new(5, 5, 5);
        let mut layer = Conv3d::<f64>::zeros(1, 1);
        layer.weight.iter_mut().for_each(|w| *w = 1.0);
        let g = layer.backward_input(&vec![1.0; s.len()], s);
        for z in 1..4 {
            for y in 1..4 {
                for x in 1..4 {
                    assert_eq!(g[(z * 5 + y) * 5 + x], 27.0);
                }
            }
        }
        assert_eq!(g[0], 8.0);
    }
}
