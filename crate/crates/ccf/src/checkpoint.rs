//! Checkpoint serialization: one little-endian binary file capturing the full
//! training state, restorable bit-exactly.
//!
//! Layout: header `{magic "CCF1", version u32}`, then length-prefixed (u64)
//! sections in fixed order: config, classes, subnet A, subnet B, diversifier,
//! optimizer, rng/progress state.

use std::path::Path;

use crate::clustering::TrajectoryClassSet;
use crate::config::CcfConfig;
use crate::dnet::DNetParams;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::{Rng, RngState};
use crate::subnet::SubnetParams;
use crate::training::{AdamState, Trainer};

const MAGIC: &[u8; 4] = b"CCF1";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Writer {
        Writer { buf: Vec::new() }
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }

    fn f64_vec(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn write_section(out: &mut Vec<u8>, body: Writer) {
    out.extend_from_slice(&(body.buf.len() as u64).to_le_bytes());
    out.extend_from_slice(&body.buf);
}

fn param_section(params: &ParamSet) -> Writer {
    let mut w = Writer::new();
    w.u32(params.entries.len() as u32);
    for e in &params.entries {
        w.u32(e.name.len() as u32);
        w.bytes(e.name.as_bytes());
        w.u32(e.shape.len() as u32);
        for &d in &e.shape {
            w.u32(d as u32);
        }
        w.f64_slice(&e.data);
    }
    w
}

fn read_params_into(r: &mut Reader, params: &mut ParamSet, which: &str) -> Result<()> {
    let n = r.u32()? as usize;
    if n != params.entries.len() {
        return Err(Error::Format(format!(
            "{which}: {n} parameter entries in file, expected {}",
            params.entries.len()
        )));
    }
    for e in params.entries.iter_mut() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format(format!("{which}: non-UTF8 parameter name")))?;
        if name != e.name {
            return Err(Error::Format(format!(
                "{which}: parameter {:?} in file, expected {:?}",
                name, e.name
            )));
        }
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        if shape != e.shape {
            return Err(Error::Format(format!(
                "{which}: parameter {name} has shape {shape:?} in file, expected {:?}",
                e.shape
            )));
        }
        e.data = r.f64_vec(e.data.len())?;
    }
    Ok(())
}

/// Serializes the full trainer state.
pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());

    // config
    let mut w = Writer::new();
    w.bytes(t.config.to_text().as_bytes());
    write_section(&mut out, w);

    // classes
    let mut w = Writer::new();
    w.u32(t.classes.k as u32);
    w.u32(t.classes.t_pred() as u32);
    w.u64(t.classes.seed);
    w.f64_slice(&t.classes.flat());
    write_section(&mut out, w);

    // subnet A, subnet B, diversifier
    write_section(&mut out, param_section(&t.subnet_a.params));
    write_section(&mut out, param_section(&t.subnet_b.params));
    write_section(&mut out, param_section(&t.dnet.params));

    // optimizer
    let mut w = Writer::new();
    w.u64(t.opt.step);
    w.u32(t.opt.m.len() as u32);
    for (m, v) in t.opt.m.iter().zip(&t.opt.v) {
        w.u64(m.len() as u64);
        w.f64_slice(m);
        w.f64_slice(v);
    }
    write_section(&mut out, w);

    // rng + progress
    let mut w = Writer::new();
    w.u64(t.epoch);
    let noise = t.rng_noise.state();
    w.u64(noise.seed);
    w.u128(noise.word_pos);
    let shuffle = t.rng_shuffle.state();
    w.u64(shuffle.seed);
    w.u128(shuffle.word_pos);
    write_section(&mut out, w);

    out
}

/// Restores a trainer from checkpoint bytes.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }

    let section = |r: &mut Reader| -> Result<usize> {
        let len = r.u64()? as usize;
        if r.pos + len > r.buf.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated inside a section of {len} bytes"
            )));
        }
        Ok(len)
    };

    // config
    let len = section(&mut r)?;
    let cfg_text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Format("config section is not UTF-8".into()))?;
    let config = CcfConfig::parse(cfg_text, "checkpoint")?;

    // classes
    let _len = section(&mut r)?;
    let k = r.u32()? as usize;
    let t_pred = r.u32()? as usize;
    let class_seed = r.u64()?;
    let flat = r.f64_vec(k * t_pred * 2)?;
    if k != config.k || t_pred != config.t_pred {
        return Err(Error::Format(format!(
            "class section (k={k}, t_pred={t_pred}) does not match config (k={}, t_pred={})",
            config.k, config.t_pred
        )));
    }
    let means: Vec<Vec<[f64; 2]>> = flat
        .chunks_exact(t_pred * 2)
        .map(|c| c.chunks_exact(2).map(|p| [p[0], p[1]]).collect())
        .collect();
    let classes = TrajectoryClassSet {
        means,
        k,
        seed: class_seed,
    };

    // Rebuild structural layouts from the config, then fill data from file.
    let master = Rng::seed_from(config.seed);
    let mut subnet_a = SubnetParams::init(&config, &mut master.derive("init_subnet_a"));
    let mut subnet_b = SubnetParams::init(&config, &mut master.derive("init_subnet_b"));
    let mut dnet = DNetParams::init(
        config.t_ob,
        config.dnet_hidden,
        &mut master.derive("init_dnet"),
    );
    section(&mut r)?;
    read_params_into(&mut r, &mut subnet_a.params, "subnet A")?;
    section(&mut r)?;
    read_params_into(&mut r, &mut subnet_b.params, "subnet B")?;
    section(&mut r)?;
    read_params_into(&mut r, &mut dnet.params, "diversifier")?;

    // optimizer
    section(&mut r)?;
    let step = r.u64()?;
    let n_groups = r.u32()? as usize;
    let expected: Vec<usize> = subnet_a
        .params
        .entries
        .iter()
        .chain(&subnet_b.params.entries)
        .chain(&dnet.params.entries)
        .map(|e| e.data.len())
        .collect();
    if n_groups != expected.len() {
        return Err(Error::Format(format!(
            "optimizer has {n_groups} groups, expected {}",
            expected.len()
        )));
    }
    let mut m = Vec::with_capacity(n_groups);
    let mut v = Vec::with_capacity(n_groups);
    for &want in &expected {
        let len = r.u64()? as usize;
        if len != want {
            return Err(Error::Format(format!(
                "optimizer group of {len} values, expected {want}"
            )));
        }
        m.push(r.f64_vec(len)?);
        v.push(r.f64_vec(len)?);
    }
    let opt = AdamState { step, m, v };

    // rng + progress
    section(&mut r)?;
    let epoch = r.u64()?;
    let rng_noise = Rng::restore(RngState {
        seed: r.u64()?,
        word_pos: r.u128()?,
    });
    let rng_shuffle = Rng::restore(RngState {
        seed: r.u64()?,
        word_pos: r.u128()?,
    });
    if !r.done() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the final checkpoint section",
            r.buf.len() - r.pos
        )));
    }

    Ok(Trainer {
        config,
        classes,
        subnet_a,
        subnet_b,
        dnet,
        opt,
        epoch,
        rng_noise,
        rng_shuffle,
    })
}

/// Writes a checkpoint atomically (temp file + rename).
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    crate::manifest::write_atomic(path, &to_bytes(t))
}

/// Loads a checkpoint file.
pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::fit_classes;
    use crate::data::{make_windows, synth_scene, MotionMix};

    fn small_trainer(seed: u64) -> (Trainer, Vec<crate::data::TrajectoryWindow>) {
        let cfg = CcfConfig {
            t_ob: 8,
            t_pred: 12,
            k: 3,
            d: 8,
            heads: 2,
            l_e: 1,
            l_d: 1,
            dnet_hidden: 8,
            neighbor_cap: 2,
            batch_size: 4,
            seed,
            ..CcfConfig::default()
        };
        let mut rng = Rng::seed_from(seed + 100);
        let scene = synth_scene(4, 32, MotionMix::default(), 0.05, &mut rng).unwrap();
        let mut ws = make_windows(&scene, cfg.t_ob, cfg.t_pred, cfg.neighbor_cap).unwrap();
        ws.truncate(8);
        let futures: Vec<Vec<[f64; 2]>> = ws.iter().map(|w| w.future.clone()).collect();
        let classes =
            fit_classes(&futures, cfg.k, &mut Rng::seed_from(seed).derive("classes")).unwrap();
        (Trainer::new(cfg, classes).unwrap(), ws)
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let (mut t, ws) = small_trainer(1);
        t.train_epoch(&ws).unwrap();
        let bytes = to_bytes(&t);
        let restored = from_bytes(&bytes).unwrap();
        let again = to_bytes(&restored);
        assert_eq!(bytes, again);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let (t, _) = small_trainer(2);
        let bytes = to_bytes(&t);
        for cut in [3usize, 9, 40, bytes.len() / 2, bytes.len() - 1] {
            let err = from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Format(_)), "cut at {cut}: {err}");
        }
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let (t, _) = small_trainer(3);
        let mut bytes = to_bytes(&t);
        bytes[0] = b'X';
        assert!(from_bytes(&bytes).is_err());
        let mut bytes = to_bytes(&t);
        bytes[4] = 99;
        assert!(from_bytes(&bytes).is_err());
    }

    #[test]
    fn resume_reproduces_uninterrupted_training() {
        // Oracle: train 3 epochs straight; versus train 1 epoch, snapshot,
        // restore, train 2 more. Parameter bytes and losses must agree.
        let (mut straight, ws) = small_trainer(4);
        let (mut staged, _) = small_trainer(4);

        let mut straight_losses = Vec::new();
        for _ in 0..3 {
            straight_losses.push(straight.train_epoch(&ws).unwrap());
        }

        let mut staged_losses = Vec::new();
        staged_losses.push(staged.train_epoch(&ws).unwrap());
        let snap = to_bytes(&staged);
        let mut resumed = from_bytes(&snap).unwrap();
        for _ in 0..2 {
            staged_losses.push(resumed.train_epoch(&ws).unwrap());
        }

        assert_eq!(straight_losses, staged_losses);
        assert_eq!(to_bytes(&straight), to_bytes(&resumed));
    }
}
