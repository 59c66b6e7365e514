//! Network building blocks on top of the tensor engine.
//!
//! Persistent parameters live in a [`ParamSet`] as plain f64 buffers; each
//! forward pass *mounts* them as trainable graph leaves, runs, and reads the
//! accumulated gradients back out. This keeps optimizer state, checkpointing,
//! and finite-difference checks independent of graph lifetimes.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One named parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered collection of parameters. Entry order is fixed at construction and
/// doubles as the serialization and optimizer-state order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    pub entries: Vec<ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
    }

    /// Adds a weight matrix with scaled-uniform init in
    /// `±sqrt(6 / (fan_in + fan_out))`.
    pub fn push_weight(&mut self, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        self.push(name, &[fan_in, fan_out], data);
    }

    pub fn push_zeros(&mut self, name: &str, shape: &[usize]) {
        self.push(name, shape, vec![0.0; shape.iter().product()]);
    }

    pub fn push_ones(&mut self, name: &str, shape: &[usize]) {
        self.push(name, shape, vec![1.0; shape.iter().product()]);
    }

    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Mounts every entry as a graph leaf, trainable when `trainable`.
    pub fn mount(&self, trainable: bool) -> Mounted {
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                if trainable {
                    Tensor::param(e.data.clone(), &e.shape)
                } else {
                    Tensor::from_vec(e.data.clone(), &e.shape)
                }
                .expect("entry shape consistent with data")
            })
            .collect();
        Mounted { tensors, next: 0 }
    }

    /// Collects gradients accumulated on a mount, zeros for untouched
    /// entries, in entry order.
    pub fn read_grads(&self, mounted: &Mounted) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .zip(&mounted.tensors)
            .map(|(e, t)| t.grad().unwrap_or_else(|| vec![0.0; e.data.len()]))
            .collect()
    }
}

/// Graph-side view of a [`ParamSet`]; consumed in the same order the entries
/// were pushed.
pub struct Mounted {
    tensors: Vec<Tensor>,
    next: usize,
}

impl Mounted {
    /// Takes the next mounted tensor. Panics if the consumption order drifts
    /// from the layout order, which is a programming error.
    pub fn take(&mut self) -> Tensor {
        let t = self.tensors[self.next].clone();
        self.next += 1;
        t
    }

    pub fn finish(self) {
        assert_eq!(
            self.next,
            self.tensors.len(),
            "mounted parameters not fully consumed"
        );
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Affine map `x W + b` with `W: (in, out)`, `b: (out,)`.
#[derive(Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn from_mount(m: &mut Mounted) -> Linear {
        Linear {
            w: m.take(),
            b: m.take(),
        }
    }

    pub fn layout(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
        params.push_weight(&format!("{name}.w"), fan_in, fan_out, rng);
        params.push_zeros(&format!("{name}.b"), &[fan_out]);
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add(&self.b)
    }
}

/// Learned scale/shift for layer normalization over the last axis.
#[derive(Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn from_mount(m: &mut Mounted) -> LayerNorm {
        LayerNorm {
            gamma: m.take(),
            beta: m.take(),
            eps: 1e-5,
        }
    }

    pub fn layout(params: &mut ParamSet, name: &str, dim: usize) {
        params.push_ones(&format!("{name}.gamma"), &[dim]);
        params.push_zeros(&format!("{name}.beta"), &[dim]);
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Projection weights for one multi-head attention block.
#[derive(Clone)]
pub struct MhaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub n_heads: usize,
}

impl MhaParams {
    pub fn layout(params: &mut ParamSet, name: &str, dim: usize, rng: &mut Rng) {
        Linear::layout(params, &format!("{name}.q"), dim, dim, rng);
        Linear::layout(params, &format!("{name}.k"), dim, dim, rng);
        Linear::layout(params, &format!("{name}.v"), dim, dim, rng);
        Linear::layout(params, &format!("{name}.o"), dim, dim, rng);
    }

    pub fn from_mount(m: &mut Mounted, n_heads: usize) -> MhaParams {
        MhaParams {
            wq: Linear::from_mount(m),
            wk: Linear::from_mount(m),
            wv: Linear::from_mount(m),
            wo: Linear::from_mount(m),
            n_heads,
        }
    }
}

/// Scaled-dot-product multi-head attention.
///
/// `queries: (Lq, D)` attend to `keys_values: (Lk, D)`. When `key_mask` is
/// given, `false` positions receive negative-infinity logits before softmax,
/// so their values cannot influence the output; if no key is valid the whole
/// block outputs zeros.
pub fn multi_head_attention(
    queries: &Tensor,
    keys_values: &Tensor,
    p: &MhaParams,
    key_mask: Option<&[bool]>,
) -> Result<Tensor> {
    let (lq, d) = (queries.shape()[0], queries.shape()[1]);
    let lk = keys_values.shape()[0];
    if keys_values.shape().len() != 2 || keys_values.shape()[1] != d {
        return Err(Error::Dimension {
            op: "multi_head_attention",
            lhs: queries.shape().to_vec(),
            rhs: keys_values.shape().to_vec(),
        });
    }
    if let Some(mask) = key_mask {
        if mask.len() != lk {
            return Err(Error::Dimension {
                op: "multi_head_attention mask",
                lhs: vec![lk],
                rhs: vec![mask.len()],
            });
        }
        if mask.iter().all(|&v| !v) {
            return Ok(Tensor::zeros(&[lq, d]));
        }
    }
    let h = p.n_heads;
    if d % h != 0 {
        return Err(Error::Validation(format!(
            "head count {h} must divide embedding size {d}"
        )));
    }
    let dh = d / h;
    let split = |x: &Tensor, l: usize| -> Result<Tensor> {
        // (L, D) -> (h, L, dh)
        x.reshape(&[l, h, dh])?.permute(&[1, 0, 2])
    };
    let q = split(&p.wq.apply(queries)?, lq)?;
    let k = split(&p.wk.apply(keys_values)?, lk)?;
    let v = split(&p.wv.apply(keys_values)?, lk)?;
    let scores = q
        .matmul(&k.permute(&[0, 2, 1])?)?
        .mul_scalar(1.0 / (dh as f64).sqrt());
    let weights = match key_mask {
        Some(mask) => scores.masked_softmax_last(mask)?,
        None => scores.softmax(2)?,
    };
    let ctx = weights.matmul(&v)?; // (h, Lq, dh)
    let merged = ctx.permute(&[1, 0, 2])?.reshape(&[lq, d])?;
    p.wo.apply(&merged)
}

/// Sinusoidal positional-encoding table with `rows` positions of width `dim`.
pub fn positional_encoding(rows: usize, dim: usize) -> Vec<f64> {
    let mut table = vec![0.0; rows * dim];
    for pos in 0..rows {
        for i in 0..dim {
            let exponent = 2.0 * (i / 2) as f64 / dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            table[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    fn mha_fixture(seed: u64, d: usize, heads: usize) -> (ParamSet, usize) {
        let mut rng = Rng::seed_from(seed);
        let mut params = ParamSet::new();
        MhaParams::layout(&mut params, "attn", d, &mut rng);
        (params, heads)
    }

    #[test]
    fn attention_output_shape_and_determinism() {
        let (params, heads) = mha_fixture(3, 8, 2);
        let q = Tensor::from_vec((0..40).map(|i| (i as f64 * 0.17).sin()).collect(), &[5, 8]).unwrap();
        let kv =
            Tensor::from_vec((0..24).map(|i| (i as f64 * 0.31).cos()).collect(), &[3, 8]).unwrap();
        let mut m1 = params.mount(false);
        let p1 = MhaParams::from_mount(&mut m1, heads);
        let out1 = multi_head_attention(&q, &kv, &p1, None).unwrap();
        let mut m2 = params.mount(false);
        let p2 = MhaParams::from_mount(&mut m2, heads);
        let out2 = multi_head_attention(&q, &kv, &p2, None).unwrap();
        assert_eq!(out1.shape(), &[5, 8]);
        assert_eq!(out1.data(), out2.data());
    }

    #[test]
    fn attention_mask_blocks_key_positions_bitwise() {
        let (params, heads) = mha_fixture(4, 8, 2);
        let q = Tensor::from_vec((0..16).map(|i| (i as f64 * 0.4).sin()).collect(), &[2, 8]).unwrap();
        let kv_a: Vec<f64> = (0..32).map(|i| (i as f64 * 0.2).cos()).collect();
        let mut kv_b = kv_a.clone();
        for v in kv_b[8..16].iter_mut() {
            *v = 1e9; // second key row, masked below
        }
        let mask = [true, false, true, true];
        let mut m = params.mount(false);
        let p = MhaParams::from_mount(&mut m, heads);
        let out_a =
            multi_head_attention(&q, &Tensor::from_vec(kv_a, &[4, 8]).unwrap(), &p, Some(&mask))
                .unwrap();
        let mut m = params.mount(false);
        let p = MhaParams::from_mount(&mut m, heads);
        let out_b =
            multi_head_attention(&q, &Tensor::from_vec(kv_b, &[4, 8]).unwrap(), &p, Some(&mask))
                .unwrap();
        for (a, b) in out_a.data().iter().zip(out_b.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn attention_all_masked_is_zero() {
        let (params, heads) = mha_fixture(5, 4, 2);
        let q = Tensor::from_vec(vec![0.5; 12], &[3, 4]).unwrap();
        let kv = Tensor::from_vec(vec![2.0; 8], &[2, 4]).unwrap();
        let mut m = params.mount(false);
        let p = MhaParams::from_mount(&mut m, heads);
        let out = multi_head_attention(&q, &kv, &p, Some(&[false, false])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn attention_gradcheck_against_finite_differences() {
        let (params, heads) = mha_fixture(6, 4, 2);
        let qdata: Vec<f64> = (0..12).map(|i| (i as f64 * 0.7).sin()).collect();
        let kvdata: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let run = |pset: &ParamSet, trainable: bool| -> (f64, Option<Vec<Vec<f64>>>) {
            let mut m = pset.mount(trainable);
            let p = MhaParams::from_mount(&mut m, heads);
            let q = Tensor::from_vec(qdata.clone(), &[3, 4]).unwrap();
            let kv = Tensor::from_vec(kvdata.clone(), &[2, 4]).unwrap();
            let out = multi_head_attention(&q, &kv, &p, Some(&[true, true])).unwrap();
            let w: Vec<f64> = (0..12).map(|i| 0.2 + 0.05 * i as f64).collect();
            let loss = out
                .mul(&Tensor::from_vec(w, &[3, 4]).unwrap())
                .unwrap()
                .sum();
            if trainable {
                backward(&loss).unwrap();
                let grads = pset.read_grads(&m);
                (loss.item().unwrap(), Some(grads))
            } else {
                (loss.item().unwrap(), None)
            }
        };
        let (_, grads) = run(&params, true);
        let grads = grads.unwrap();
        let h = 1e-5;
        for (ei, entry) in params.entries.iter().enumerate() {
            for j in 0..entry.data.len() {
                let mut plus = params.clone();
                plus.entries[ei].data[j] += h;
                let mut minus = params.clone();
                minus.entries[ei].data[j] -= h;
                let fd = (run(&plus, false).0 - run(&minus, false).0) / (2.0 * h);
                let a = grads[ei][j];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom < 1e-4,
                    "param {} [{}]: analytic {} vs fd {}",
                    entry.name,
                    j,
                    a,
                    fd
                );
            }
        }
    }

    #[test]
    fn positional_encoding_matches_direct_formula() {
        let pe = positional_encoding(4, 6);
        for pos in 0..4 {
            for i in 0..6 {
                let expo = 2.0 * (i / 2) as f64 / 6.0;
                let angle = pos as f64 / 10000f64.powf(expo);
                let expect = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                assert_eq!(pe[pos * 6 + i], expect);
            }
        }
        // Distinct rows.
        assert_ne!(pe[0..6], pe[6..12]);
    }

    #[test]
    fn linear_zero_map_gives_bias() {
        let mut params = ParamSet::new();
        params.push_zeros("lin.w", &[3, 2]);
        params.push("lin.b", &[2], vec![0.5, -0.5]);
        let mut m = params.mount(false);
        let lin = Linear::from_mount(&mut m);
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let y = lin.apply(&x).unwrap();
        assert_eq!(y.data(), &[0.5, -0.5, 0.5, -0.5]);
    }
}
