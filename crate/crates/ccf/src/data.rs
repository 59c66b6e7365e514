//! Scene ingestion, sliding-window extraction, and synthetic scenes.
//!
//! Scenes use the plain text format common to public pedestrian datasets:
//! one record per line, `frame_id pedestrian_id x y`, whitespace separated,
//! coordinates in meters.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// One observation: a pedestrian's position at a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneRecord {
    pub frame_id: i64,
    pub pedestrian_id: i64,
    pub x: f64,
    pub y: f64,
}

/// A full scene: observations plus the inferred frame stride.
#[derive(Debug, Clone)]
pub struct Scene {
    pub records: Vec<SceneRecord>,
    /// Frames between consecutive timestamps (gcd of positive per-pedestrian
    /// frame deltas; 1 when no deltas exist).
    pub frame_step: i64,
}

/// One prediction instance in normalized coordinates: the target's last
/// observed point is the origin and the same translation is applied to the
/// future and to every neighbor track.
#[derive(Debug, Clone)]
pub struct TrajectoryWindow {
    pub past: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    /// Fixed-capacity neighbor tracks over the observed span; slot `j` is all
    /// zeros when `neighbor_valid[j]` is false.
    pub neighbors: Vec<Vec<[f64; 2]>>,
    pub neighbor_valid: Vec<bool>,
    /// Translation removed during normalization (the raw last observed point).
    pub origin: [f64; 2],
    pub pedestrian_id: i64,
    pub start_frame: i64,
}

impl TrajectoryWindow {
    pub fn t_ob(&self) -> usize {
        self.past.len()
    }

    pub fn t_pred(&self) -> usize {
        self.future.len()
    }

    /// Raw (denormalized) coordinates of a normalized point.
    pub fn denormalize(&self, p: [f64; 2]) -> [f64; 2] {
        [p[0] + self.origin[0], p[1] + self.origin[1]]
    }
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Parses a scene from text. Lines must hold `frame_id pedestrian_id x y`;
/// blank lines are permitted. Duplicate `(frame, pedestrian)` pairs are
/// rejected.
pub fn parse_scene(text: &str, path_label: &str) -> Result<Scene> {
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                path: path_label.to_string(),
                line: line_no,
                msg: format!("expected 4 fields `frame ped x y`, got {}", fields.len()),
            });
        }
        let parse_int = |s: &str, what: &str| -> Result<i64> {
            // Accept integral floats such as "840.0", which appear in the wild.
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                path: path_label.to_string(),
                line: line_no,
                msg: format!("non-numeric {what}: {s:?}"),
            })?;
            if v.fract() != 0.0 {
                return Err(Error::Parse {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: format!("{what} must be integral, got {s:?}"),
                });
            }
            Ok(v as i64)
        };
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                path: path_label.to_string(),
                line: line_no,
                msg: format!("non-numeric {what}: {s:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path_label.to_string(),
                    line: line_no,
                    msg: format!("{what} must be finite, got {s:?}"),
                });
            }
            Ok(v)
        };
        records.push(SceneRecord {
            frame_id: parse_int(fields[0], "frame_id")?,
            pedestrian_id: parse_int(fields[1], "pedestrian_id")?,
            x: parse_f(fields[2], "x")?,
            y: parse_f(fields[3], "y")?,
        });
    }
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{path_label}: scene file holds no records"
        )));
    }
    scene_from_records(records)
}

/// Builds a scene from records, validating uniqueness and monotone frames.
pub fn scene_from_records(mut records: Vec<SceneRecord>) -> Result<Scene> {
    records.sort_by_key(|r| (r.pedestrian_id, r.frame_id));
    let mut step = 0i64;
    for pair in records.windows(2) {
        if pair[0].pedestrian_id == pair[1].pedestrian_id {
            let delta = pair[1].frame_id - pair[0].frame_id;
            if delta == 0 {
                return Err(Error::Validation(format!(
                    "duplicate record for pedestrian {} at frame {}",
                    pair[0].pedestrian_id, pair[0].frame_id
                )));
            }
            step = gcd(step, delta);
        }
    }
    Ok(Scene {
        records,
        frame_step: if step == 0 { 1 } else { step },
    })
}

/// Loads a scene from a text file.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path)?;
    parse_scene(&text, &path.display().to_string())
}

/// Serializes a scene in the same text format it is parsed from.
pub fn scene_to_text(scene: &Scene) -> String {
    let mut sorted = scene.records.clone();
    sorted.sort_by_key(|r| (r.frame_id, r.pedestrian_id));
    let mut out = String::new();
    for r in &sorted {
        writeln!(out, "{} {} {:.6} {:.6}", r.frame_id, r.pedestrian_id, r.x, r.y).unwrap();
    }
    out
}

/// Extracts every fully observed window of `t_ob + t_pred` consecutive
/// timestamps per pedestrian, stride 1.
///
/// Neighbors are the other pedestrians present at *all* `t_ob` observed
/// timestamps; up to `neighbor_cap` are kept, nearest (at the last observed
/// timestamp) first, and remaining slots are zero-padded with their validity
/// flag cleared. Each window is normalized by translating the target's last
/// observed point to the origin.
pub fn make_windows(
    scene: &Scene,
    t_ob: usize,
    t_pred: usize,
    neighbor_cap: usize,
) -> Result<Vec<TrajectoryWindow>> {
    if scene.records.is_empty() {
        return Err(Error::Validation("make_windows on an empty scene".into()));
    }
    if t_ob < 2 || t_pred < 1 {
        return Err(Error::Validation(format!(
            "window lengths too short: t_ob={t_ob}, t_pred={t_pred}"
        )));
    }
    let step = scene.frame_step;
    // Per-pedestrian frame -> position maps.
    let mut tracks: BTreeMap<i64, BTreeMap<i64, [f64; 2]>> = BTreeMap::new();
    for r in &scene.records {
        tracks
            .entry(r.pedestrian_id)
            .or_default()
            .insert(r.frame_id, [r.x, r.y]);
    }
    let span = t_ob + t_pred;
    let mut windows = Vec::new();
    for (&ped, frames) in &tracks {
        for (&start, _) in frames.iter() {
            // The span must be fully present on the frame grid.
            let positions: Option<Vec<[f64; 2]>> = (0..span)
                .map(|i| frames.get(&(start + i as i64 * step)).copied())
                .collect();
            let Some(positions) = positions else {
                continue;
            };
            let origin = positions[t_ob - 1];
            let past: Vec<[f64; 2]> = positions[..t_ob]
                .iter()
                .map(|p| [p[0] - origin[0], p[1] - origin[1]])
                .collect();
            let future: Vec<[f64; 2]> = positions[t_ob..]
                .iter()
                .map(|p| [p[0] - origin[0], p[1] - origin[1]])
                .collect();

            // Neighbors co-present over the whole observed span.
            let mut candidates: Vec<(f64, i64, Vec<[f64; 2]>)> = Vec::new();
            for (&other, other_frames) in &tracks {
                if other == ped {
                    continue;
                }
                let track: Option<Vec<[f64; 2]>> = (0..t_ob)
                    .map(|i| other_frames.get(&(start + i as i64 * step)).copied())
                    .collect();
                if let Some(track) = track {
                    let last = track[t_ob - 1];
                    let dist =
                        ((last[0] - origin[0]).powi(2) + (last[1] - origin[1]).powi(2)).sqrt();
                    let normalized: Vec<[f64; 2]> = track
                        .iter()
                        .map(|p| [p[0] - origin[0], p[1] - origin[1]])
                        .collect();
                    candidates.push((dist, other, normalized));
                }
            }
            candidates.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            candidates.truncate(neighbor_cap);
            let mut neighbors = Vec::with_capacity(neighbor_cap);
            let mut neighbor_valid = Vec::with_capacity(neighbor_cap);
            for (_, _, track) in &candidates {
                neighbors.push(track.clone());
                neighbor_valid.push(true);
            }
            while neighbors.len() < neighbor_cap {
                neighbors.push(vec![[0.0, 0.0]; t_ob]);
                neighbor_valid.push(false);
            }
            windows.push(TrajectoryWindow {
                past,
                future,
                neighbors,
                neighbor_valid,
                origin,
                pedestrian_id: ped,
                start_frame: start,
            });
        }
    }
    windows.sort_by_key(|w| (w.start_frame, w.pedestrian_id));
    Ok(windows)
}

/// Motion model mixture for [`synth_scene`]. Weights need not be normalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionMix {
    pub constant_velocity: f64,
    pub turning: f64,
    pub stop_and_go: f64,
}

impl Default for MotionMix {
    fn default() -> Self {
        MotionMix {
            constant_velocity: 0.5,
            turning: 0.3,
            stop_and_go: 0.2,
        }
    }
}

/// Coordinate grid (in meters) that synthetic starts and velocities are
/// snapped to, so that noise-free constant-velocity tracks are exactly linear
/// in f64 arithmetic.
const SYNTH_GRID: f64 = 1.0 / 1024.0;

fn snap(v: f64) -> f64 {
    (v / SYNTH_GRID).round() * SYNTH_GRID
}

/// Generates a deterministic synthetic scene: `n_pedestrians` tracks over
/// `n_frames` frames (stride 1), each following a motion model drawn from
/// `mix`, plus i.i.d. Gaussian positional noise of standard deviation
/// `noise_sd` meters.
pub fn synth_scene(
    n_pedestrians: usize,
    n_frames: usize,
    mix: MotionMix,
    noise_sd: f64,
    rng: &mut Rng,
) -> Result<Scene> {
    if n_frames < 20 {
        return Err(Error::Validation(format!(
            "synthetic scenes need at least 20 frames (one full window), got {n_frames}"
        )));
    }
    if n_pedestrians == 0 {
        return Err(Error::Validation("n_pedestrians must be positive".into()));
    }
    let total = mix.constant_velocity + mix.turning + mix.stop_and_go;
    if !(total > 0.0) || mix.constant_velocity < 0.0 || mix.turning < 0.0 || mix.stop_and_go < 0.0 {
        return Err(Error::Validation(format!("invalid motion mix {mix:?}")));
    }
    let mut records = Vec::with_capacity(n_pedestrians * n_frames);
    for ped in 0..n_pedestrians {
        let mut pos = [snap(rng.uniform(-12.0, 12.0)), snap(rng.uniform(-12.0, 12.0))];
        let heading = rng.uniform(0.0, std::f64::consts::TAU);
        let speed = rng.uniform(0.25, 0.6); // meters per frame
        let draw = rng.uniform(0.0, total);
        enum Model {
            Cv { v: [f64; 2] },
            Turn { speed: f64, heading: f64, omega: f64 },
            StopGo { v: [f64; 2], move_len: usize, stop_len: usize },
        }
        let mut model = if draw < mix.constant_velocity {
            Model::Cv {
                v: [snap(speed * heading.cos()), snap(speed * heading.sin())],
            }
        } else if draw < mix.constant_velocity + mix.turning {
            let omega = rng.uniform(0.02, 0.09) * if rng.next_f64() < 0.5 { 1.0 } else { -1.0 };
            Model::Turn {
                speed,
                heading,
                omega,
            }
        } else {
            Model::StopGo {
                v: [snap(speed * heading.cos()), snap(speed * heading.sin())],
                move_len: 4 + rng.below(5),
                stop_len: 2 + rng.below(4),
            }
        };
        for frame in 0..n_frames {
            let (nx, ny) = if noise_sd > 0.0 {
                (noise_sd * rng.normal(), noise_sd * rng.normal())
            } else {
                (0.0, 0.0)
            };
            records.push(SceneRecord {
                frame_id: frame as i64,
                pedestrian_id: ped as i64,
                x: pos[0] + nx,
                y: pos[1] + ny,
            });
            match &mut model {
                Model::Cv { v } => {
                    pos[0] += v[0];
                    pos[1] += v[1];
                }
                Model::Turn {
                    speed,
                    heading,
                    omega,
                } => {
                    *heading += *omega;
                    pos[0] += *speed * heading.cos();
                    pos[1] += *speed * heading.sin();
                }
                Model::StopGo {
                    v,
                    move_len,
                    stop_len,
                } => {
                    let phase = frame % (*move_len + *stop_len);
                    if phase < *move_len {
                        pos[0] += v[0];
                        pos[1] += v[1];
                    }
                }
            }
        }
    }
    scene_from_records(records)
}

/// Splits windows chronologically: the earliest `train_frac` fraction (by
/// start frame, pedestrian id breaking ties) trains, the remainder tests.
pub fn chronological_split(
    windows: Vec<TrajectoryWindow>,
    train_frac: f64,
) -> (Vec<TrajectoryWindow>, Vec<TrajectoryWindow>) {
    let mut sorted = windows;
    sorted.sort_by_key(|w| (w.start_frame, w.pedestrian_id));
    let n_train = ((sorted.len() as f64) * train_frac).round() as usize;
    let n_train = n_train.min(sorted.len());
    let test = sorted.split_off(n_train);
    (sorted, test)
}
