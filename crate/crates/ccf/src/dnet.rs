//! Noise injection and the learned trajectory diversifier.
//!
//! The diversifier is a small MLP (two hidden layers, relu) mapping a
//! flattened observed trajectory to a same-shaped output. One subnet trains
//! on its output instead of the original trajectory, which keeps the two
//! subnets' views of the data distinct.

use crate::error::{Error, Result};
use crate::nn::{Linear, Mounted, ParamSet};
use crate::rng::Rng;
use crate::tensor::{self, Tensor};

/// Parameters of the diversifier MLP: `t_ob*2 -> hidden -> hidden -> t_ob*2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DNetParams {
    pub params: ParamSet,
    pub t_ob: usize,
    pub hidden: usize,
}

impl DNetParams {
    pub fn init(t_ob: usize, hidden: usize, rng: &mut Rng) -> DNetParams {
        let io = t_ob * 2;
        let mut params = ParamSet::new();
        Linear::layout(&mut params, "dnet.fc1", io, hidden, rng);
        Linear::layout(&mut params, "dnet.fc2", hidden, hidden, rng);
        Linear::layout(&mut params, "dnet.out", hidden, io, rng);
        DNetParams {
            params,
            t_ob,
            hidden,
        }
    }
}

/// Graph-side diversifier, mounted for one forward/backward pass.
pub struct MountedDNet {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    t_ob: usize,
}

impl MountedDNet {
    pub fn new(p: &DNetParams, m: &mut Mounted) -> MountedDNet {
        MountedDNet {
            fc1: Linear::from_mount(m),
            fc2: Linear::from_mount(m),
            out: Linear::from_mount(m),
            t_ob: p.t_ob,
        }
    }

    /// Transforms a (possibly noise-perturbed) observed trajectory into a
    /// diverse version of the same shape. Differentiable w.r.t. the mounted
    /// parameters and the input.
    pub fn diversify(&self, x_tilde: &Tensor) -> Result<Tensor> {
        if x_tilde.shape() != [self.t_ob, 2] {
            return Err(Error::Dimension {
                op: "diversify",
                lhs: x_tilde.shape().to_vec(),
                rhs: vec![self.t_ob, 2],
            });
        }
        let flat = x_tilde.reshape(&[1, self.t_ob * 2])?;
        let h1 = self.fc1.apply(&flat)?.relu();
        let h2 = self.fc2.apply(&h1)?.relu();
        self.out.apply(&h2)?.reshape(&[self.t_ob, 2])
    }
}

/// Adds elementwise Gaussian noise scaled by `alpha` to an observed
/// trajectory: `x + alpha * eta`, `eta ~ N(0, 1)`.
pub fn perturb(x: &[[f64; 2]], alpha: f64, rng: &mut Rng) -> Vec<[f64; 2]> {
    if alpha == 0.0 {
        return x.to_vec();
    }
    x.iter()
        .map(|p| [p[0] + alpha * rng.normal(), p[1] + alpha * rng.normal()])
        .collect()
}

/// Diversifier training loss: Huber (delta from config) between the original
/// observed trajectory and the diversified output.
pub fn dnet_loss(x: &[[f64; 2]], x_prime: &Tensor, delta: f64) -> Result<Tensor> {
    let flat: Vec<f64> = x.iter().flat_map(|p| [p[0], p[1]]).collect();
    let target = Tensor::from_vec(flat, &[x.len(), 2])?;
    tensor::huber(x_prime, &target, delta)
}

/// Dataset-level agreement between original and diversified trajectories.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiversityMetrics {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

/// Mean squared / absolute / root-mean-squared error between paired
/// trajectory sets, over all coordinates of all pairs.
pub fn diversity_metrics(
    x_set: &[Vec<[f64; 2]>],
    x_prime_set: &[Vec<[f64; 2]>],
) -> Result<DiversityMetrics> {
    if x_set.is_empty() || x_set.len() != x_prime_set.len() {
        return Err(Error::Validation(format!(
            "diversity_metrics needs equal-length nonempty sets, got {} and {}",
            x_set.len(),
            x_prime_set.len()
        )));
    }
    let mut sq = 0.0;
    let mut ab = 0.0;
    let mut n = 0usize;
    for (xs, xps) in x_set.iter().zip(x_prime_set) {
        if xs.len() != xps.len() {
            return Err(Error::Validation(
                "paired trajectories must have equal lengths".into(),
            ));
        }
        for (a, b) in xs.iter().zip(xps) {
            for c in 0..2 {
                let e = a[c] - b[c];
                sq += e * e;
                ab += e.abs();
                n += 1;
            }
        }
    }
    let mse = sq / n as f64;
    Ok(DiversityMetrics {
        mse,
        mae: ab / n as f64,
        rmse: mse.sqrt(),
    })
}
