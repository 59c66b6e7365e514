//! Co-training orchestration: both subnets, the diversifier, every loss
//! term, the optimizer, and the epoch loop.
//!
//! Per window, subnet A sees the original observed trajectory and subnet B a
//! diversified version; each is supervised on its nearest-class candidate
//! (regression) and its class probabilities (classification), and each is
//! additionally pulled toward the other's detached candidates by the
//! cross-correction terms. The total is
//!
//! `L = L_div + (L_traj_A + L_cls_A) + (L_traj_B + L_cls_B)
//!      + lambda * (L_cor_A + L_cor_B)`
//!
//! with ablation flags zeroing individual terms.

use crate::clustering::{ground_truth_class_probs, TrajectoryClassSet};
use crate::config::{CcfConfig, DiversityMode, PrimaryLoss};
use crate::data::TrajectoryWindow;
use crate::dnet::{dnet_loss, perturb, DNetParams, MountedDNet};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::subnet::{past_tensor, MountedSubnet, SubnetOutput, SubnetParams};
use crate::tensor::{self, backward, Tensor};

/// Named scalar components of one training step, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_div: f64,
    pub l_traj_a: f64,
    pub l_cls_a: f64,
    pub l_traj_b: f64,
    pub l_cls_b: f64,
    pub l_cor_a: f64,
    pub l_cor_b: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str =
        "l_div,l_traj_a,l_cls_a,l_traj_b,l_cls_b,l_cor_a,l_cor_b,l_total";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.l_div,
            self.l_traj_a,
            self.l_cls_a,
            self.l_traj_b,
            self.l_cls_b,
            self.l_cor_a,
            self.l_cor_b,
            self.l_total
        )
    }

    /// Recombines the components with the given weight; equals `l_total`
    /// within 1e-9 by construction.
    pub fn recompose(&self, lambda: f64) -> f64 {
        self.l_div
            + (self.l_traj_a + self.l_cls_a)
            + (self.l_traj_b + self.l_cls_b)
            + lambda * (self.l_cor_a + self.l_cor_b)
    }
}

/// Adam moment estimates, one pair of buffers per parameter entry across
/// (subnet A, subnet B, diversifier) in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over aligned (param, grad) buffer pairs.
    pub fn update(&mut self, lr: f64, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (gi, grad) in grads.iter().enumerate() {
            let m = &mut self.m[gi];
            let v = &mut self.v[gi];
            let p = &mut *params[gi];
            for j in 0..grad.len() {
                let g = grad[j];
                m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g;
                v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g * g;
                p[j] -= lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-subnet supervised losses for one window.
///
/// Regression supervises only the candidate whose class is nearest the
/// ground truth (the argmax of `gcp`, ties breaking low); classification is
/// cross-entropy of the predicted class probabilities against `gcp`.
pub fn subnet_loss(
    output: &SubnetOutput,
    y: &[[f64; 2]],
    gcp: &[f64],
    primary: PrimaryLoss,
    huber_delta: f64,
) -> Result<(Tensor, Tensor)> {
    let t_pred = y.len();
    let mut target_class = 0;
    for (i, &p) in gcp.iter().enumerate() {
        if p > gcp[target_class] {
            target_class = i;
        }
    }
    let pred = output.candidates.narrow(0, target_class, 1)?;
    let flat: Vec<f64> = y.iter().flat_map(|p| [p[0], p[1]]).collect();
    let target = Tensor::from_vec(flat, &[1, t_pred, 2])?;
    let l_traj = match primary {
        PrimaryLoss::Huber => tensor::huber(&pred, &target, huber_delta)?,
        PrimaryLoss::Mse => tensor::mse(&pred, &target)?,
    };
    let gcp_t = Tensor::from_vec(gcp.to_vec(), &[gcp.len()])?;
    let l_cls = tensor::cross_entropy(&output.class_probs, &gcp_t)?;
    Ok((l_traj, l_cls))
}

/// Mutual correction losses over the full candidate tensors.
///
/// Each subnet's target is the *detached* output of the other, so `l_cor_a`
/// moves only subnet A and `l_cor_b` only subnet B.
pub fn cross_correction_losses(
    out_a: &SubnetOutput,
    out_b: &SubnetOutput,
    huber_delta: f64,
) -> Result<(Tensor, Tensor)> {
    let l_cor_a = tensor::huber(&out_a.candidates, &out_b.candidates.detach(), huber_delta)?;
    let l_cor_b = tensor::huber(&out_b.candidates, &out_a.candidates.detach(), huber_delta)?;
    Ok((l_cor_a, l_cor_b))
}

/// Builds subnet B's input for one window per the diversity mode, together
/// with the diversifier loss when the learned diversifier is in play.
fn diversified_past(
    cfg: &CcfConfig,
    rng: &mut Rng,
    window: &TrajectoryWindow,
    dnet: &MountedDNet,
) -> Result<(Tensor, Option<Tensor>)> {
    match cfg.diversity_mode {
        DiversityMode::DNet => {
            let x_tilde = perturb(&window.past, cfg.alpha, rng);
            let x_prime = dnet.diversify(&past_tensor(&x_tilde)?)?;
            let l_div = dnet_loss(&window.past, &x_prime, cfg.huber_delta)?;
            let fed = if cfg.dnet_feedback {
                x_prime
            } else {
                x_prime.detach()
            };
            Ok((fed, Some(l_div)))
        }
        DiversityMode::Noise => {
            let x_tilde = perturb(&window.past, cfg.alpha, rng);
            Ok((past_tensor(&x_tilde)?, None))
        }
        DiversityMode::Drop => {
            let t_ob = cfg.t_ob;
            let first = rng.below(t_ob);
            let mut second = rng.below(t_ob - 1);
            if second >= first {
                second += 1;
            }
            let mut past = window.past.clone();
            past[first] = [0.0, 0.0];
            past[second] = [0.0, 0.0];
            Ok((past_tensor(&past)?, None))
        }
        DiversityMode::Mask => {
            let start = rng.below(cfg.t_ob - 1);
            let mut past = window.past.clone();
            past[start] = [0.0, 0.0];
            past[start + 1] = [0.0, 0.0];
            Ok((past_tensor(&past)?, None))
        }
    }
}

fn accumulate_term(slot: &mut Option<Tensor>, term: Tensor) -> Result<()> {
    *slot = Some(match slot.take() {
        Some(sum) => sum.add(&term)?,
        None => term,
    });
    Ok(())
}

fn mean_or_zero(slot: Option<Tensor>, count: usize) -> Tensor {
    match slot {
        Some(sum) => sum.mul_scalar(1.0 / count as f64),
        None => Tensor::scalar(0.0),
    }
}

/// Live training state: parameters, optimizer, and the named rng streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: CcfConfig,
    pub classes: TrajectoryClassSet,
    pub subnet_a: SubnetParams,
    pub subnet_b: SubnetParams,
    pub dnet: DNetParams,
    pub opt: AdamState,
    pub epoch: u64,
    /// Sources the Gaussian perturbation and the drop/mask ablations.
    pub rng_noise: Rng,
    /// Orders the training windows each epoch.
    pub rng_shuffle: Rng,
}

impl Trainer {
    /// Fresh trainer. Parameter initialization, noise, and shuffling each use
    /// an independent stream derived from `config.seed`, so e.g. disabling
    /// one loss term does not shift the data order or the init of the rest.
    pub fn new(config: CcfConfig, classes: TrajectoryClassSet) -> Result<Trainer> {
        config.validate()?;
        if classes.k != config.k || classes.t_pred() != config.t_pred {
            return Err(Error::Validation(format!(
                "class set (k={}, t_pred={}) does not match config (k={}, t_pred={})",
                classes.k,
                classes.t_pred(),
                config.k,
                config.t_pred
            )));
        }
        let master = Rng::seed_from(config.seed);
        let subnet_a = SubnetParams::init(&config, &mut master.derive("init_subnet_a"));
        let subnet_b = SubnetParams::init(&config, &mut master.derive("init_subnet_b"));
        let dnet = DNetParams::init(
            config.t_ob,
            config.dnet_hidden,
            &mut master.derive("init_dnet"),
        );
        let sizes: Vec<usize> = subnet_a
            .params
            .entries
            .iter()
            .chain(&subnet_b.params.entries)
            .chain(&dnet.params.entries)
            .map(|e| e.data.len())
            .collect();
        Ok(Trainer {
            opt: AdamState::new(&sizes),
            rng_noise: master.derive("noise"),
            rng_shuffle: master.derive("shuffle"),
            config,
            classes,
            subnet_a,
            subnet_b,
            dnet,
            epoch: 0,
        })
    }

    /// One optimizer step over a batch: forward both subnets on every window,
    /// assemble the total loss, backpropagate, and apply Adam. Returns the
    /// batch-mean loss components.
    pub fn train_step(&mut self, batch: &[TrajectoryWindow]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Validation("train_step on an empty batch".into()));
        }
        let cfg = self.config.clone();
        let mut ma = self.subnet_a.params.mount(true);
        let net_a = MountedSubnet::new(&self.subnet_a, &mut ma);
        let mut mb = self.subnet_b.params.mount(true);
        let net_b = MountedSubnet::new(&self.subnet_b, &mut mb);
        let mut md = self.dnet.params.mount(true);
        let net_d = MountedDNet::new(&self.dnet, &mut md);

        let mut sum_div: Option<Tensor> = None;
        let mut sum_traj_a: Option<Tensor> = None;
        let mut sum_cls_a: Option<Tensor> = None;
        let mut sum_traj_b: Option<Tensor> = None;
        let mut sum_cls_b: Option<Tensor> = None;
        let mut sum_cor_a: Option<Tensor> = None;
        let mut sum_cor_b: Option<Tensor> = None;

        for window in batch {
            let gcp = ground_truth_class_probs(&window.future, &self.classes);
            let (past_b, l_div) =
                diversified_past(&cfg, &mut self.rng_noise, window, &net_d)?;
            let out_a = net_a.forward(window, &self.classes)?;
            let out_b = net_b.forward_with_past(&past_b, window, &self.classes)?;
            if let Some(l_div) = l_div {
                accumulate_term(&mut sum_div, l_div)?;
            }
            let (l_traj_a, l_cls_a) = subnet_loss(
                &out_a,
                &window.future,
                &gcp,
                cfg.primary_loss,
                cfg.huber_delta,
            )?;
            let (l_traj_b, l_cls_b) = subnet_loss(
                &out_b,
                &window.future,
                &gcp,
                cfg.primary_loss,
                cfg.huber_delta,
            )?;
            accumulate_term(&mut sum_traj_a, l_traj_a)?;
            accumulate_term(&mut sum_traj_b, l_traj_b)?;
            if !cfg.no_secondary_task {
                accumulate_term(&mut sum_cls_a, l_cls_a)?;
                accumulate_term(&mut sum_cls_b, l_cls_b)?;
            }
            if !cfg.no_cross_correction {
                let (l_cor_a, l_cor_b) =
                    cross_correction_losses(&out_a, &out_b, cfg.huber_delta)?;
                accumulate_term(&mut sum_cor_a, l_cor_a)?;
                accumulate_term(&mut sum_cor_b, l_cor_b)?;
            }
        }

        let n = batch.len();
        let l_div = mean_or_zero(sum_div, n);
        let l_traj_a = mean_or_zero(sum_traj_a, n);
        let l_cls_a = mean_or_zero(sum_cls_a, n);
        let l_traj_b = mean_or_zero(sum_traj_b, n);
        let l_cls_b = mean_or_zero(sum_cls_b, n);
        let l_cor_a = mean_or_zero(sum_cor_a, n);
        let l_cor_b = mean_or_zero(sum_cor_b, n);
        let cor_weighted = l_cor_a.add(&l_cor_b)?.mul_scalar(cfg.lambda);
        let l_total = l_div
            .add(&l_traj_a)?
            .add(&l_cls_a)?
            .add(&l_traj_b)?
            .add(&l_cls_b)?
            .add(&cor_weighted)?;

        let breakdown = LossBreakdown {
            l_div: l_div.item()?,
            l_traj_a: l_traj_a.item()?,
            l_cls_a: l_cls_a.item()?,
            l_traj_b: l_traj_b.item()?,
            l_cls_b: l_cls_b.item()?,
            l_cor_a: l_cor_a.item()?,
            l_cor_b: l_cor_b.item()?,
            l_total: l_total.item()?,
        };
        for (name, v) in [
            ("l_div", breakdown.l_div),
            ("l_traj_a", breakdown.l_traj_a),
            ("l_cls_a", breakdown.l_cls_a),
            ("l_traj_b", breakdown.l_traj_b),
            ("l_cls_b", breakdown.l_cls_b),
            ("l_cor_a", breakdown.l_cor_a),
            ("l_cor_b", breakdown.l_cor_b),
            ("l_total", breakdown.l_total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!(
                    "{name} is non-finite ({v}) at optimizer step {}",
                    self.opt.step + 1
                )));
            }
        }

        backward(&l_total)?;

        let mut grads = self.subnet_a.params.read_grads(&ma);
        grads.extend(self.subnet_b.params.read_grads(&mb));
        grads.extend(self.dnet.params.read_grads(&md));
        let mut param_refs: Vec<&mut Vec<f64>> = Vec::new();
        for e in self.subnet_a.params.entries.iter_mut() {
            param_refs.push(&mut e.data);
        }
        for e in self.subnet_b.params.entries.iter_mut() {
            param_refs.push(&mut e.data);
        }
        for e in self.dnet.params.entries.iter_mut() {
            param_refs.push(&mut e.data);
        }
        self.opt
            .update(cfg.learning_rate, &mut param_refs, &grads);
        Ok(breakdown)
    }

    /// One epoch over the training windows: shuffle, batch, step. Returns the
    /// mean breakdown over the epoch's steps.
    pub fn train_epoch(&mut self, windows: &[TrajectoryWindow]) -> Result<LossBreakdown> {
        if windows.is_empty() {
            return Err(Error::Validation("train_epoch with no windows".into()));
        }
        let mut order: Vec<usize> = (0..windows.len()).collect();
        self.rng_shuffle.shuffle(&mut order);
        let mut sums = [0.0f64; 8];
        let mut steps = 0usize;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<TrajectoryWindow> =
                chunk.iter().map(|&i| windows[i].clone()).collect();
            let b = self.train_step(&batch)?;
            for (s, v) in sums.iter_mut().zip([
                b.l_div, b.l_traj_a, b.l_cls_a, b.l_traj_b, b.l_cls_b, b.l_cor_a, b.l_cor_b,
                b.l_total,
            ]) {
                *s += v;
            }
            steps += 1;
        }
        self.epoch += 1;
        let n = steps as f64;
        Ok(LossBreakdown {
            l_div: sums[0] / n,
            l_traj_a: sums[1] / n,
            l_cls_a: sums[2] / n,
            l_traj_b: sums[3] / n,
            l_cls_b: sums[4] / n,
            l_cor_a: sums[5] / n,
            l_cor_b: sums[6] / n,
            l_total: sums[7] / n,
        })
    }

    /// Diversifier outputs for a set of windows with the current parameters,
    /// noise-free (the measured quantity is the learned transform itself).
    pub fn diversified_set(&self, windows: &[TrajectoryWindow]) -> Result<Vec<Vec<[f64; 2]>>> {
        let mut md = self.dnet.params.mount(false);
        let net_d = MountedDNet::new(&self.dnet, &mut md);
        windows
            .iter()
            .map(|w| {
                let out = net_d.diversify(&past_tensor(&w.past)?)?;
                Ok(out
                    .data()
                    .chunks_exact(2)
                    .map(|p| [p[0], p[1]])
                    .collect())
            })
            .collect()
    }
}
