//! Variational reconstruction with a Huber penalty on the image gradient,
//! minimized by Nesterov's accelerated gradient with restart.
//!
//! Objective: `½‖Af − g‖² + λ Σ H_θ(|∇f|)` where `∇` is the forward
//! difference divided by the voxel size (zero across the far boundary) and
//! `|·|` is the Euclidean norm of the three components at each voxel.

use super::fbp::{fbp_reconstruct, FbpConfig};
use super::InitMode;
use crate::error::{Error, Result};
use crate::geometry::{HelicalGeometry, VolumeSpec};
use crate::projector::{backproject_views, operator_norm, project_views};
use crate::real::Real;
use crate::volume::{Sinogram, Volume};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HuberConfig {
    pub lambda: f64,
    pub theta: f64,
    pub iterations: usize,
    pub power_iterations: usize,
    /// Safety factor on the power-iteration estimate of ‖A‖².
    pub lipschitz_safety: f64,
    pub init_mode: InitMode,
    #[serde(default)]
    pub fbp: FbpConfig,
}

impl Default for HuberConfig {
    fn default() -> Self {
        HuberConfig {
            lambda: 0.15,
            theta: 0.0012,
            iterations: 20,
            power_iterations: 20,
            lipschitz_safety: 1.05,
            init_mode: InitMode::Zeros,
            fbp: FbpConfig::default(),
        }
    }
}

impl HuberConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.theta > 0.0) || !(self.lipschitz_safety >= 1.0) {
            return Err(Error::Config("Huber needs λ ≥ 0, θ > 0 and a safety factor ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HuberReport {
    /// Objective at the initial point and after every iteration.
    pub objective: Vec<f64>,
    pub restarts: usize,
    pub lipschitz: f64,
}

/// `H_θ(t)`.
pub fn huber(t: f64, theta: f64) -> f64 {
    if t <= theta {
        0.5 * (t / theta) * t
    } else {
        t - theta / 2.0
    }
}

/// Forward differences, layout (component, voxel).
pub fn gradient(f: &[f64], spec: &VolumeSpec) -> [Vec<f64>; 3] {
    let (w, h, n) = (spec.width, spec.height, spec.num_slices);
    let d = spec.voxel_size;
    let mut gx = vec![0.0; f.len()];
    let mut gy = vec![0.0; f.len()];
    let mut gz = vec![0.0; f.len()];
    for z in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if x + 1 < w {
                    gx[i] = (f[i + 1] - f[i]) / d[0];
                }
                if y + 1 < h {
                    gy[i] = (f[i + w] - f[i]) / d[1];
                }
                if z + 1 < n {
                    gz[i] = (f[i + w * h] - f[i]) / d[2];
                }
            }
        }
    }
    [gx, gy, gz]
}

/// Exact adjoint of [`gradient`].
pub fn gradient_adjoint(p: &[Vec<f64>; 3], spec: &VolumeSpec) -> Vec<f64> {
    let (w, h, n) = (spec.width, spec.height, spec.num_slices);
    let d = spec.voxel_size;
    let mut out = vec![0.0; spec.len()];
    for z in 0..n {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if x + 1 < w {
                    out[i] -= p[0][i] / d[0];
                    out[i + 1] += p[0][i] / d[0];
                }
                if y + 1 < h {
                    out[i] -= p[1][i] / d[1];
                    out[i + w] += p[1][i] / d[1];
                }
                if z + 1 < n {
                    out[i] -= p[2][i] / d[2];
                    out[i + w * h] += p[2][i] / d[2];
                }
            }
        }
    }
    out
}

fn magnitude(g: &[Vec<f64>; 3], i: usize) -> f64 {
    (g[0][i] * g[0][i] + g[1][i] * g[1][i] + g[2][i] * g[2][i]).sqrt()
}

/// `Σ H_θ(|∇f|)`.
pub fn regularizer(f: &[f64], spec: &VolumeSpec, theta: f64) -> f64 {
    let g = gradient(f, spec);
    (0..f.len()).map(|i| huber(magnitude(&g, i), theta)).sum()
}

/// Gradient of [`regularizer`]: `∇*(∇f / max(θ, |∇f|))`.
pub fn regularizer_gradient(f: &[f64], spec: &VolumeSpec, theta: f64) -> Vec<f64> {
    let mut g = gradient(f, spec);
    for i in 0..f.len() {
        let w = 1.0 / magnitude(&g, i).max(theta);
        for c in &mut g {
            c[i] *= w;
        }
    }
    gradient_adjoint(&g, spec)
}

struct Objective<'a> {
    geom: &'a HelicalGeometry,
    spec: &'a VolumeSpec,
    data: &'a [f64],
    lambda: f64,
    theta: f64,
}

impl Objective<'_> {
    fn residual(&self, f: &[f64]) -> Vec<f64> {
        let mut r = project_views(self.spec, f, self.geom, 0..self.geom.num_angles());
        r.iter_mut().zip(self.data).for_each(|(a, b)| *a -= *b);
        r
    }

    fn value(&self, f: &[f64]) -> f64 {
        let r = self.residual(f);
        let fid = 0.5 * r.iter().map(|v| v * v).sum::<f64>();
        if self.lambda == 0.0 {
            fid
        } else {
            fid + self.lambda * regularizer(f, self.spec, self.theta)
        }
    }

    fn gradient(&self, f: &[f64]) -> Vec<f64> {
        let r = self.residual(f);
        let mut g = backproject_views(self.spec, &r, self.geom, 0..self.geom.num_angles());
        if self.lambda != 0.0 {
            let reg = regularizer_gradient(f, self.spec, self.theta);
            g.iter_mut().zip(&reg).for_each(|(a, b)| *a += self.lambda * b);
        }
        g
    }
}

fn step(x: &[f64], grad: &[f64], lipschitz: f64) -> Vec<f64> {
    x.iter().zip(grad).map(|(a, b)| a - b / lipschitz).collect()
}

pub fn huber_reconstruct<T: Real>(
    g: &Sinogram<T>,
    geom: &HelicalGeometry,
    spec: &VolumeSpec,
    cfg: &HuberConfig,
) -> Result<(Volume<f64>, HuberReport)> {
    cfg.validate()?;
    g.check(geom)?;
    if !g.is_finite() {
        return Err(Error::NonFinite("input data".into()));
    }
    let data: Vec<f64> = g.data.iter().map(|v| v.f64()).collect();
    let obj = Objective { geom, spec, data: &data, lambda: cfg.lambda, theta: cfg.theta };
    let dmin = spec.voxel_size.iter().copied().fold(f64::INFINITY, f64::min);
    let norm = operator_norm(spec, geom, 0..geom.num_angles(), cfg.power_iterations);
    let mut lipschitz =
        cfg.lipschitz_safety * norm * norm + cfg.lambda * 12.0 / (cfg.theta * dmin * dmin);
    if lipschitz == 0.0 {
        return Err(Error::Config("operator has zero norm; the trajectory misses the volume".into()));
    }
    let mut x = match cfg.init_mode {
        InitMode::Zeros => vec![0.0; spec.len()],
        InitMode::Fbp => fbp_reconstruct(g, geom, spec, &cfg.fbp)?.data,
    };
    let mut fx = obj.value(&x);
    let mut objective = vec![fx];
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut restarts = 0;
    let mut increases = 0;
    for k in 0..cfg.iterations {
        let mut cand = step(&y, &obj.gradient(&y), lipschitz);
        let mut fc = obj.value(&cand);
        if fc > fx {
            restarts += 1;
            t = 1.0;
            cand = step(&x, &obj.gradient(&x), lipschitz);
            fc = obj.value(&cand);
            if fc > fx {
                increases += 1;
                if increases >= 3 {
                    return Err(Error::Diverged(format!(
                        "Huber objective increased 3 times in a row at iteration {k}"
                    )));
                }
                lipschitz *= 2.0;
                y = x.clone();
                objective.push(fx);
                continue;
            }
        }
        increases = 0;
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let beta = (t - 1.0) / t_next;
        y = cand.iter().zip(&x).map(|(c, p)| c + beta * (c - p)).collect();
        t = t_next;
        x = cand;
        fx = fc;
        if !fx.is_finite() {
            return Err(Error::NonFinite(format!("Huber objective at iteration {k}")));
        }
        objective.push(fx);
    }
    Ok((Volume::from_data(*spec, x)?, HuberReport { objective, restarts, lipschitz }))
}
