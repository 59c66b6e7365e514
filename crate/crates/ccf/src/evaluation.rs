//! Displacement metrics, best-of-N selection, and evaluation reports.
//!
//! Evaluation runs subnet A on each window's original observed trajectory
//! (the diversifier plays no role at test time) and aggregates four dataset
//! means: ADE and FDE of the probability-selected candidate, and the minimum
//! ADE/FDE over the candidate set.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::TrajectoryWindow;
use crate::error::{Error, Result};
use crate::manifest::digest_bytes;
use crate::nn::Mounted;
use crate::subnet::MountedSubnet;
use crate::training::Trainer;

/// Mean Euclidean distance between prediction and ground truth over all
/// predicted timesteps.
pub fn ade(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    debug_assert_eq!(pred.len(), gt.len());
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt())
        .sum();
    sum / pred.len() as f64
}

/// Euclidean distance at the final predicted timestep only.
pub fn fde(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> f64 {
    let (p, g) = (pred[pred.len() - 1], gt[gt.len() - 1]);
    ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt()
}

/// Minimum ADE and FDE over a candidate set, each minimized independently
/// (the winning indices may differ). Ties break to the lowest index.
pub fn best_of_n(
    candidates: &[Vec<[f64; 2]>],
    gt: &[[f64; 2]],
) -> (f64, f64, usize, usize) {
    assert!(!candidates.is_empty(), "best_of_n needs at least 1 candidate");
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut ade_idx = 0;
    let mut fde_idx = 0;
    for (i, cand) in candidates.iter().enumerate() {
        let a = ade(cand, gt);
        if a < min_ade {
            min_ade = a;
            ade_idx = i;
        }
        let f = fde(cand, gt);
        if f < min_fde {
            min_fde = f;
            fde_idx = i;
        }
    }
    (min_ade, min_fde, ade_idx, fde_idx)
}

/// Number of candidates scored by the best-of-N metrics.
pub const BEST_OF: usize = 20;

/// Everything recorded for one evaluated window; sufficient to recompute the
/// aggregates and to replot the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowRecord {
    pub index: usize,
    pub pedestrian_id: i64,
    pub start_frame: i64,
    /// Metrics of the probability-selected candidate.
    pub ade: f64,
    pub fde: f64,
    /// Best-of-N metrics over the scored candidates.
    pub min_ade: f64,
    pub min_fde: f64,
    pub best_ade_idx: usize,
    pub selected_idx: usize,
    pub past: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    /// The scored candidates (all of them when `k <= BEST_OF`, else the
    /// `BEST_OF` most probable), in scoring order.
    pub candidates: Vec<Vec<[f64; 2]>>,
}

/// Dataset-level evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub ade: f64,
    pub fde: f64,
    pub min_ade_20: f64,
    pub min_fde_20: f64,
    pub n_windows: usize,
    /// SHA-256 of the canonical config text the model was trained with.
    pub config_digest: String,
    pub records: Vec<WindowRecord>,
}

impl EvalReport {
    /// Recomputes the four aggregates from the per-window records; equals the
    /// stored aggregates by construction.
    pub fn recompute_from_records(&self) -> (f64, f64, f64, f64) {
        let n = self.records.len() as f64;
        (
            self.records.iter().map(|r| r.ade).sum::<f64>() / n,
            self.records.iter().map(|r| r.fde).sum::<f64>() / n,
            self.records.iter().map(|r| r.min_ade).sum::<f64>() / n,
            self.records.iter().map(|r| r.min_fde).sum::<f64>() / n,
        )
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "windows        {:>10}", self.n_windows).unwrap();
        writeln!(s, "ade            {:>10.4}", self.ade).unwrap();
        writeln!(s, "fde            {:>10.4}", self.fde).unwrap();
        writeln!(s, "min_ade_20     {:>10.4}", self.min_ade_20).unwrap();
        writeln!(s, "min_fde_20     {:>10.4}", self.min_fde_20).unwrap();
        writeln!(s, "config_digest  {}", &self.config_digest[..16]).unwrap();
        s
    }

    /// Machine-readable summary: CSV with a header row.
    pub fn summary_csv(&self) -> String {
        format!(
            "ade,fde,min_ade_20,min_fde_20,n_windows,config_digest\n{},{},{},{},{},{}\n",
            self.ade, self.fde, self.min_ade_20, self.min_fde_20, self.n_windows,
            self.config_digest
        )
    }
}

/// Evaluates a trained model on test windows.
pub fn evaluate(test_windows: &[TrajectoryWindow], trainer: &Trainer) -> Result<EvalReport> {
    if test_windows.is_empty() {
        return Err(Error::Validation("evaluate with no windows".into()));
    }
    let cfg = &trainer.config;
    let mut mount: Mounted = trainer.subnet_a.params.mount(false);
    let net = MountedSubnet::new(&trainer.subnet_a, &mut mount);
    let mut records = Vec::with_capacity(test_windows.len());
    for (index, w) in test_windows.iter().enumerate() {
        if w.t_ob() != cfg.t_ob || w.t_pred() != cfg.t_pred {
            return Err(Error::Validation(format!(
                "window {index} has (t_ob={}, t_pred={}), model expects ({}, {})",
                w.t_ob(),
                w.t_pred(),
                cfg.t_ob,
                cfg.t_pred
            )));
        }
        let out = net.forward(w, &trainer.classes)?;
        let step = cfg.t_pred * 2;
        let all: Vec<Vec<[f64; 2]>> = (0..cfg.k)
            .map(|j| {
                out.candidates.data()[j * step..(j + 1) * step]
                    .chunks_exact(2)
                    .map(|p| [p[0], p[1]])
                    .collect()
            })
            .collect();
        // Score min(k, BEST_OF) candidates, ranked by predicted probability
        // when there are more than BEST_OF.
        let (scored, sel_in_scored): (Vec<Vec<[f64; 2]>>, usize) = if cfg.k <= BEST_OF {
            (all, out.selected_idx)
        } else {
            let mut order: Vec<usize> = (0..cfg.k).collect();
            let probs = out.class_probs.data();
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
            order.truncate(BEST_OF);
            let sel = order
                .iter()
                .position(|&j| j == out.selected_idx)
                .unwrap_or(0);
            (order.into_iter().map(|j| all[j].clone()).collect(), sel)
        };
        let (min_ade, min_fde, best_ade_idx, _) = best_of_n(&scored, &w.future);
        records.push(WindowRecord {
            index,
            pedestrian_id: w.pedestrian_id,
            start_frame: w.start_frame,
            ade: ade(&out.selected, &w.future),
            fde: fde(&out.selected, &w.future),
            min_ade,
            min_fde,
            best_ade_idx,
            selected_idx: sel_in_scored,
            past: w.past.clone(),
            future: w.future.clone(),
            candidates: scored,
        });
    }
    let n = records.len() as f64;
    Ok(EvalReport {
        ade: records.iter().map(|r| r.ade).sum::<f64>() / n,
        fde: records.iter().map(|r| r.fde).sum::<f64>() / n,
        min_ade_20: records.iter().map(|r| r.min_ade).sum::<f64>() / n,
        min_fde_20: records.iter().map(|r| r.min_fde).sum::<f64>() / n,
        n_windows: records.len(),
        config_digest: digest_bytes(trainer.config.to_text().as_bytes()),
        records,
    })
}

/// Serializes per-window records as CSV: metrics first, then the flattened
/// past, future, and candidate geometry.
pub fn records_to_csv(records: &[WindowRecord]) -> String {
    let mut s = String::new();
    if records.is_empty() {
        return s;
    }
    let t_ob = records[0].past.len();
    let t_pred = records[0].future.len();
    let n_cand = records[0].candidates.len();
    s.push_str("index,pedestrian_id,start_frame,ade,fde,min_ade,min_fde,best_ade_idx,selected_idx");
    for t in 0..t_ob {
        write!(s, ",past_{t}_x,past_{t}_y").unwrap();
    }
    for t in 0..t_pred {
        write!(s, ",future_{t}_x,future_{t}_y").unwrap();
    }
    for c in 0..n_cand {
        for t in 0..t_pred {
            write!(s, ",cand_{c}_{t}_x,cand_{c}_{t}_y").unwrap();
        }
    }
    s.push('\n');
    for r in records {
        write!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.index,
            r.pedestrian_id,
            r.start_frame,
            r.ade,
            r.fde,
            r.min_ade,
            r.min_fde,
            r.best_ade_idx,
            r.selected_idx
        )
        .unwrap();
        for p in r.past.iter().chain(&r.future) {
            write!(s, ",{},{}", p[0], p[1]).unwrap();
        }
        for cand in &r.candidates {
            for p in cand {
                write!(s, ",{},{}", p[0], p[1]).unwrap();
            }
        }
        s.push('\n');
    }
    s
}

/// Parses records CSV written by [`records_to_csv`].
pub fn records_from_csv(text: &str, path_label: &str) -> Result<Vec<WindowRecord>> {
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::Format(format!("{path_label}: empty records file")));
    };
    let cols: Vec<&str> = header.split(',').collect();
    let t_ob = cols.iter().filter(|c| c.starts_with("past_") && c.ends_with("_x")).count();
    let t_pred = cols
        .iter()
        .filter(|c| c.starts_with("future_") && c.ends_with("_x"))
        .count();
    let cand_cols = cols
        .iter()
        .filter(|c| c.starts_with("cand_") && c.ends_with("_x"))
        .count();
    if t_ob == 0 || t_pred == 0 || cand_cols % t_pred != 0 {
        return Err(Error::Format(format!(
            "{path_label}: unrecognized records header"
        )));
    }
    let n_cand = cand_cols / t_pred;
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let expect = 9 + 2 * (t_ob + t_pred + n_cand * t_pred);
        if fields.len() != expect {
            return Err(Error::Parse {
                path: path_label.to_string(),
                line: idx + 1,
                msg: format!("expected {expect} fields, got {}", fields.len()),
            });
        }
        let mut cursor = fields.iter();
        let mut next_f64 = || -> Result<f64> {
            cursor
                .next()
                .unwrap()
                .parse()
                .map_err(|_| Error::Parse {
                    path: path_label.to_string(),
                    line: idx + 1,
                    msg: "non-numeric field".into(),
                })
        };
        let index = next_f64()? as usize;
        let pedestrian_id = next_f64()? as i64;
        let start_frame = next_f64()? as i64;
        let ade = next_f64()?;
        let fde = next_f64()?;
        let min_ade = next_f64()?;
        let min_fde = next_f64()?;
        let best_ade_idx = next_f64()? as usize;
        let selected_idx = next_f64()? as usize;
        let mut read_traj = |len: usize| -> Result<Vec<[f64; 2]>> {
            (0..len)
                .map(|_| {
                    let x = next_f64()?;
                    let y = next_f64()?;
                    Ok([x, y])
                })
                .collect()
        };
        let past = read_traj(t_ob)?;
        let future = read_traj(t_pred)?;
        let candidates: Result<Vec<Vec<[f64; 2]>>> =
            (0..n_cand).map(|_| read_traj(t_pred)).collect();
        records.push(WindowRecord {
            index,
            pedestrian_id,
            start_frame,
            ade,
            fde,
            min_ade,
            min_fde,
            best_ade_idx,
            selected_idx,
            past,
            future,
            candidates: candidates?,
        });
    }
    Ok(records)
}

/// Writes the summary CSV, the records CSV, and the human table to files in
/// `out_dir`; returns the written paths.
pub fn write_report_files(report: &EvalReport, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let summary = out_dir.join("report.csv");
    crate::manifest::write_atomic(&summary, report.summary_csv().as_bytes())?;
    let records = out_dir.join("records.csv");
    crate::manifest::write_atomic(&records, records_to_csv(&report.records).as_bytes())?;
    let table = out_dir.join("report.txt");
    crate::manifest::write_atomic(&table, report.table().as_bytes())?;
    Ok(vec![summary, records, table])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::fit_classes;
    use crate::config::CcfConfig;
    use crate::data::{make_windows, synth_scene, MotionMix};
    use crate::rng::Rng;

    fn line(t: usize, dx: f64, dy: f64) -> Vec<[f64; 2]> {
        (1..=t).map(|i| [dx * i as f64, dy * i as f64]).collect()
    }

    #[test]
    fn ade_fde_examples() {
        let gt = line(12, 0.3, 0.0);
        assert_eq!(ade(&gt, &gt), 0.0);
        assert_eq!(fde(&gt, &gt), 0.0);
        // Constant offset (0.3, 0.4) is a 3-4-5 triangle: distance 0.5.
        let off: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + 0.3, p[1] + 0.4]).collect();
        assert!((ade(&off, &gt) - 0.5).abs() < 1e-12);
        assert!((fde(&off, &gt) - 0.5).abs() < 1e-12);
        // Offset at the final step only.
        let mut last_off = gt.clone();
        last_off[11] = [gt[11][0] + 0.3, gt[11][1] + 0.4];
        assert!((fde(&last_off, &gt) - 0.5).abs() < 1e-12);
        assert!((ade(&last_off, &gt) - 0.5 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn ade_fde_match_scalar_loop_oracle() {
        let mut rng = Rng::seed_from(3);
        let pred: Vec<[f64; 2]> = (0..12).map(|_| [rng.normal(), rng.normal()]).collect();
        let gt: Vec<[f64; 2]> = (0..12).map(|_| [rng.normal(), rng.normal()]).collect();
        let mut total = 0.0;
        for t in 0..12 {
            total +=
                ((pred[t][0] - gt[t][0]).powi(2) + (pred[t][1] - gt[t][1]).powi(2)).sqrt();
        }
        assert!((ade(&pred, &gt) - total / 12.0).abs() < 1e-12);
        let last = ((pred[11][0] - gt[11][0]).powi(2) + (pred[11][1] - gt[11][1]).powi(2)).sqrt();
        assert!((fde(&pred, &gt) - last).abs() < 1e-12);
    }

    #[test]
    fn ade_fde_translation_invariant() {
        let mut rng = Rng::seed_from(4);
        let pred: Vec<[f64; 2]> = (0..12).map(|_| [rng.normal(), rng.normal()]).collect();
        let gt: Vec<[f64; 2]> = (0..12).map(|_| [rng.normal(), rng.normal()]).collect();
        let shift = [31.5, -17.25];
        let ps: Vec<[f64; 2]> = pred.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
        let gs: Vec<[f64; 2]> = gt.iter().map(|p| [p[0] + shift[0], p[1] + shift[1]]).collect();
        assert!((ade(&pred, &gt) - ade(&ps, &gs)).abs() < 1e-9);
        assert!((fde(&pred, &gt) - fde(&ps, &gs)).abs() < 1e-9);
    }

    #[test]
    fn best_of_n_examples_and_oracle() {
        let gt = line(12, 0.4, 0.1);
        // One exact candidate among far ones.
        let mut cands = vec![line(12, 5.0, 5.0); 19];
        cands.push(gt.clone());
        let (ma, mf, ia, _) = best_of_n(&cands, &gt);
        assert_eq!((ma, mf), (0.0, 0.0));
        assert_eq!(ia, 19);
        // All candidates identical.
        let same = vec![line(12, 1.0, 0.0); 5];
        let (ma, mf, ia, ifd) = best_of_n(&same, &gt);
        assert!((ma - ade(&same[0], &gt)).abs() < 1e-12);
        assert!((mf - fde(&same[0], &gt)).abs() < 1e-12);
        assert_eq!((ia, ifd), (0, 0));
        // Random set against brute force.
        let mut rng = Rng::seed_from(5);
        let cands: Vec<Vec<[f64; 2]>> = (0..5)
            .map(|_| (0..12).map(|_| [rng.normal(), rng.normal()]).collect())
            .collect();
        let (ma, mf, _, _) = best_of_n(&cands, &gt);
        let brute_a = cands.iter().map(|c| ade(c, &gt)).fold(f64::INFINITY, f64::min);
        let brute_f = cands.iter().map(|c| fde(c, &gt)).fold(f64::INFINITY, f64::min);
        assert_eq!(ma, brute_a);
        assert_eq!(mf, brute_f);
    }

    #[test]
    fn best_of_n_adding_candidate_never_hurts() {
        let mut rng = Rng::seed_from(6);
        let gt: Vec<[f64; 2]> = (0..12).map(|_| [rng.normal(), rng.normal()]).collect();
        let mut cands: Vec<Vec<[f64; 2]>> = vec![(0..12)
            .map(|_| [rng.normal(), rng.normal()])
            .collect()];
        let (mut prev_a, mut prev_f, _, _) = best_of_n(&cands, &gt);
        for _ in 0..30 {
            cands.push((0..12).map(|_| [rng.normal(), rng.normal()]).collect());
            let (a, f, _, _) = best_of_n(&cands, &gt);
            assert!(a <= prev_a + 1e-15);
            assert!(f <= prev_f + 1e-15);
            prev_a = a;
            prev_f = f;
        }
    }

    fn trained_fixture() -> (Trainer, Vec<TrajectoryWindow>) {
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
            batch_size: 8,
            seed: 9,
            ..CcfConfig::default()
        };
        let mut rng = Rng::seed_from(10);
        let scene = synth_scene(4, 36, MotionMix::default(), 0.05, &mut rng).unwrap();
        let mut ws = make_windows(&scene, cfg.t_ob, cfg.t_pred, cfg.neighbor_cap).unwrap();
        ws.truncate(12);
        let futures: Vec<Vec<[f64; 2]>> = ws.iter().map(|w| w.future.clone()).collect();
        let classes =
            fit_classes(&futures, cfg.k, &mut Rng::seed_from(11).derive("classes")).unwrap();
        let trainer = Trainer::new(cfg, classes).unwrap();
        (trainer, ws)
    }

    #[test]
    fn evaluate_is_deterministic_and_consistent() {
        let (trainer, ws) = trained_fixture();
        let a = evaluate(&ws, &trainer).unwrap();
        let b = evaluate(&ws, &trainer).unwrap();
        assert_eq!(a, b);
        // Aggregates equal recomputation from records.
        let (ra, rf, rma, rmf) = a.recompute_from_records();
        assert_eq!(a.ade, ra);
        assert_eq!(a.fde, rf);
        assert_eq!(a.min_ade_20, rma);
        assert_eq!(a.min_fde_20, rmf);
        // Best-of is at most the selected candidate's error per window.
        for r in &a.records {
            assert!(r.min_ade <= r.ade + 1e-15);
            assert!(r.min_fde <= r.fde + 1e-15);
            assert!(r.min_ade >= 0.0 && r.min_fde >= 0.0);
        }
        assert!(a.min_ade_20 <= a.ade && a.min_fde_20 <= a.fde);
    }

    #[test]
    fn evaluate_does_not_mutate_the_model() {
        let (trainer, ws) = trained_fixture();
        let before = crate::checkpoint::to_bytes(&trainer);
        evaluate(&ws, &trainer).unwrap();
        assert_eq!(before, crate::checkpoint::to_bytes(&trainer));
    }

    #[test]
    fn evaluate_empty_set_is_error() {
        let (trainer, _) = trained_fixture();
        assert!(evaluate(&[], &trainer).is_err());
    }

    #[test]
    fn records_csv_roundtrip() {
        let (trainer, ws) = trained_fixture();
        let report = evaluate(&ws, &trainer).unwrap();
        let csv = records_to_csv(&report.records);
        let parsed = records_from_csv(&csv, "mem").unwrap();
        assert_eq!(parsed.len(), report.records.len());
        for (a, b) in parsed.iter().zip(&report.records) {
            assert_eq!(a.index, b.index);
            assert_eq!(a.candidates.len(), b.candidates.len());
            assert!((a.min_ade - b.min_ade).abs() < 1e-12);
            for (pa, pb) in a.past.iter().zip(&b.past) {
                assert!((pa[0] - pb[0]).abs() < 1e-12);
            }
        }
    }
}
