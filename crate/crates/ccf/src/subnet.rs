//! The trajectory prediction subnet: a transformer encoder-decoder that maps
//! an observed trajectory plus the trajectory classes to one candidate future
//! per class and a class-probability vector.
//!
//! Each class token is the shared affine image of (flattened past ++
//! flattened class anchor) plus a sinusoidal position row. The encoder
//! self-attends over class tokens and feeds a one-logit-per-token
//! classification head; the decoder cross-attends from class tokens to
//! neighbor embeddings (invalid neighbors masked out) and a regression head
//! emits each class's candidate future.

use crate::clustering::TrajectoryClassSet;
use crate::config::CcfConfig;
use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::nn::{
    multi_head_attention, positional_encoding, LayerNorm, Linear, MhaParams, Mounted, ParamSet,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Feed-forward width multiplier inside every transformer layer.
const FF_MULT: usize = 4;

/// Persistent subnet parameters plus the fixed positional-encoding table.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetParams {
    pub params: ParamSet,
    /// Sinusoidal table over class-token index, `k x d` row-major. Derived
    /// from the dimensions, not trained, not serialized.
    pub pe: Vec<f64>,
    pub t_ob: usize,
    pub t_pred: usize,
    pub k: usize,
    pub d: usize,
    pub heads: usize,
    pub l_e: usize,
    pub l_d: usize,
}

impl SubnetParams {
    pub fn init(cfg: &CcfConfig, rng: &mut Rng) -> SubnetParams {
        let (k, d) = (cfg.k, cfg.d);
        let in_dim = (cfg.t_ob + cfg.t_pred) * 2;
        let mut params = ParamSet::new();
        Linear::layout(&mut params, "input", in_dim, d, rng);
        for l in 0..cfg.l_e {
            layer_layout(&mut params, &format!("enc{l}"), d, rng);
        }
        Linear::layout(&mut params, "cls", d, 1, rng);
        Linear::layout(&mut params, "neighbor", cfg.t_ob * 2, d, rng);
        for l in 0..cfg.l_d {
            layer_layout(&mut params, &format!("dec{l}"), d, rng);
        }
        Linear::layout(&mut params, "reg", d, cfg.t_pred * 2, rng);
        SubnetParams {
            params,
            pe: positional_encoding(k, d),
            t_ob: cfg.t_ob,
            t_pred: cfg.t_pred,
            k,
            d,
            heads: cfg.heads,
            l_e: cfg.l_e,
            l_d: cfg.l_d,
        }
    }
}

fn layer_layout(params: &mut ParamSet, name: &str, d: usize, rng: &mut Rng) {
    MhaParams::layout(params, &format!("{name}.attn"), d, rng);
    LayerNorm::layout(params, &format!("{name}.ln1"), d);
    Linear::layout(params, &format!("{name}.ff1"), d, FF_MULT * d, rng);
    Linear::layout(params, &format!("{name}.ff2"), FF_MULT * d, d, rng);
    LayerNorm::layout(params, &format!("{name}.ln2"), d);
}

struct TransformerLayer {
    attn: MhaParams,
    ln1: LayerNorm,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNorm,
}

impl TransformerLayer {
    fn from_mount(m: &mut Mounted, heads: usize) -> TransformerLayer {
        TransformerLayer {
            attn: MhaParams::from_mount(m, heads),
            ln1: LayerNorm::from_mount(m),
            ff1: Linear::from_mount(m),
            ff2: Linear::from_mount(m),
            ln2: LayerNorm::from_mount(m),
        }
    }

    /// Post-norm residual layer: attention then feed-forward.
    fn apply(&self, x: &Tensor, kv: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let attended = multi_head_attention(x, kv, &self.attn, mask)?;
        let x = self.ln1.apply(&x.add(&attended)?)?;
        let ff = self.ff2.apply(&self.ff1.apply(&x)?.relu())?;
        self.ln2.apply(&x.add(&ff)?)
    }
}

/// Everything the subnet produced for one window.
#[derive(Debug, Clone)]
pub struct SubnetOutput {
    /// `(k, t_pred, 2)` candidate futures, one per class token.
    pub candidates: Tensor,
    /// `(k,)` predicted class probabilities.
    pub class_probs: Tensor,
    /// Index of the most probable class (ties break low).
    pub selected_idx: usize,
    /// The candidate at `selected_idx`, the single-trajectory prediction.
    pub selected: Vec<[f64; 2]>,
}

/// Graph-side subnet for one forward/backward pass.
pub struct MountedSubnet {
    input: Linear,
    enc: Vec<TransformerLayer>,
    cls: Linear,
    neighbor: Linear,
    dec: Vec<TransformerLayer>,
    reg: Linear,
    pe: Tensor,
    t_ob: usize,
    t_pred: usize,
    k: usize,
}

impl MountedSubnet {
    pub fn new(p: &SubnetParams, m: &mut Mounted) -> MountedSubnet {
        MountedSubnet {
            input: Linear::from_mount(m),
            enc: (0..p.l_e)
                .map(|_| TransformerLayer::from_mount(m, p.heads))
                .collect(),
            cls: Linear::from_mount(m),
            neighbor: Linear::from_mount(m),
            dec: (0..p.l_d)
                .map(|_| TransformerLayer::from_mount(m, p.heads))
                .collect(),
            reg: Linear::from_mount(m),
            pe: Tensor::from_vec(p.pe.clone(), &[p.k, p.d]).expect("pe table shape"),
            t_ob: p.t_ob,
            t_pred: p.t_pred,
            k: p.k,
        }
    }

    /// Builds the `(k, d)` class tokens: for each class, the shared affine
    /// image of (flattened past ++ flattened anchor), plus its position row.
    ///
    /// `past` is `(t_ob, 2)` and may be graph-connected (the diversified
    /// trajectory fed to the second subnet).
    pub fn embed_inputs(&self, past: &Tensor, classes: &TrajectoryClassSet) -> Result<Tensor> {
        if classes.k != self.k || classes.t_pred() != self.t_pred {
            return Err(Error::Validation(format!(
                "class set (k={}, t_pred={}) does not match subnet (k={}, t_pred={})",
                classes.k,
                classes.t_pred(),
                self.k,
                self.t_pred
            )));
        }
        if past.shape() != [self.t_ob, 2] {
            return Err(Error::Dimension {
                op: "embed_inputs",
                lhs: past.shape().to_vec(),
                rhs: vec![self.t_ob, 2],
            });
        }
        let past_rows = past.reshape(&[self.t_ob * 2])?.tile_rows(self.k)?;
        let class_rows = Tensor::from_vec(classes.flat(), &[self.k, self.t_pred * 2])?;
        let stacked = Tensor::concat(&[past_rows, class_rows], 1)?;
        self.input.apply(&stacked)?.add(&self.pe)
    }

    /// Runs the encoder stack and the classification head.
    pub fn encode(&self, tokens: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = tokens.clone();
        for layer in &self.enc {
            x = layer.apply(&x, &x, None)?;
        }
        let logits = self.cls.apply(&x)?.reshape(&[self.k])?;
        let class_probs = logits.softmax(0)?;
        Ok((x, class_probs))
    }

    /// Shared affine embedding of each neighbor's flattened track.
    pub fn embed_neighbors(&self, neighbors: &[Vec<[f64; 2]>]) -> Result<Tensor> {
        let n = neighbors.len();
        let mut flat = Vec::with_capacity(n * self.t_ob * 2);
        for track in neighbors {
            if track.len() != self.t_ob {
                return Err(Error::Validation(format!(
                    "neighbor track length {} does not match t_ob {}",
                    track.len(),
                    self.t_ob
                )));
            }
            flat.extend(track.iter().flat_map(|p| [p[0], p[1]]));
        }
        let x = Tensor::from_vec(flat, &[n, self.t_ob * 2])?;
        self.neighbor.apply(&x)
    }

    /// Runs the decoder stack (class tokens cross-attending to neighbors)
    /// and the regression head, yielding `(k, t_pred, 2)` candidates.
    pub fn decode(
        &self,
        enc_out: &Tensor,
        neighbor_emb: &Tensor,
        neighbor_valid: &[bool],
    ) -> Result<Tensor> {
        if neighbor_emb.shape()[0] != neighbor_valid.len() {
            return Err(Error::Validation(format!(
                "{} neighbor embeddings vs {} validity flags",
                neighbor_emb.shape()[0],
                neighbor_valid.len()
            )));
        }
        let mut x = enc_out.clone();
        for layer in &self.dec {
            x = layer.apply(&x, neighbor_emb, Some(neighbor_valid))?;
        }
        self.reg
            .apply(&x)?
            .reshape(&[self.k, self.t_pred, 2])
    }

    /// Full forward pass over a normalized window with the given past input
    /// (the window's own past for the first subnet, a diversified version for
    /// the second).
    pub fn forward_with_past(
        &self,
        past: &Tensor,
        window: &TrajectoryWindow,
        classes: &TrajectoryClassSet,
    ) -> Result<SubnetOutput> {
        let tokens = self.embed_inputs(past, classes)?;
        let (enc_out, class_probs) = self.encode(&tokens)?;
        let neighbor_emb = self.embed_neighbors(&window.neighbors)?;
        let candidates = self.decode(&enc_out, &neighbor_emb, &window.neighbor_valid)?;
        let probs = class_probs.data();
        let mut selected_idx = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[selected_idx] {
                selected_idx = i;
            }
        }
        let step = self.t_pred * 2;
        let selected: Vec<[f64; 2]> = candidates.data()
            [selected_idx * step..(selected_idx + 1) * step]
            .chunks_exact(2)
            .map(|p| [p[0], p[1]])
            .collect();
        Ok(SubnetOutput {
            candidates,
            class_probs,
            selected_idx,
            selected,
        })
    }

    /// Forward pass on the window's own observed trajectory.
    pub fn forward(
        &self,
        window: &TrajectoryWindow,
        classes: &TrajectoryClassSet,
    ) -> Result<SubnetOutput> {
        let past = past_tensor(&window.past)?;
        self.forward_with_past(&past, window, classes)
    }
}

/// Constant `(t_ob, 2)` tensor from a trajectory.
pub fn past_tensor(past: &[[f64; 2]]) -> Result<Tensor> {
    let flat: Vec<f64> = past.iter().flat_map(|p| [p[0], p[1]]).collect();
    Tensor::from_vec(flat, &[past.len(), 2])
}
