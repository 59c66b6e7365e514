//! Command-line front end: `synth`, `cluster`, `train`, `eval`, `plot`.
//!
//! Every command writes a JSON manifest capturing the resolved configuration,
//! seed, and input/output digests, and exits 0 on success, 1 on usage errors,
//! 2 on data/format errors, 3 on numerical failure. Output files are written
//! atomically.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::clustering::fit_classes;
use crate::config::{CcfConfig, DiversityMode};
use crate::data::{
    chronological_split, load_scene, make_windows, scene_to_text, synth_scene, MotionMix,
    TrajectoryWindow,
};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, records_from_csv, write_report_files};
use crate::manifest::{write_atomic, RunManifest};
use crate::plot::render_indexed;
use crate::checkpoint;
use crate::rng::Rng;
use crate::training::{LossBreakdown, Trainer};

#[derive(Parser)]
#[command(
    name = "ccf",
    about = "Co-trained trajectory forecasting: data prep, anchors, training, evaluation, plots",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene file in the text format `frame ped x y`.
    Synth(SynthArgs),
    /// Fit trajectory-class anchors on a scene's training futures.
    Cluster(ClusterArgs),
    /// Train the co-trained model on a scene file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a scene file.
    Eval(EvalArgs),
    /// Render one evaluated window to SVG.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Number of pedestrians.
    #[arg(long)]
    peds: usize,
    /// Number of frames (at least 20).
    #[arg(long)]
    frames: usize,
    /// Positional noise standard deviation in meters.
    #[arg(long, default_value_t = 0.05)]
    noise_sd: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output scene file.
    #[arg(long)]
    out: PathBuf,
    /// Motion model weights `cv,turn,stopgo`.
    #[arg(long, default_value = "0.5,0.3,0.2")]
    motion_mix: String,
}

#[derive(Args)]
struct ClusterArgs {
    /// Scene file to draw training futures from.
    #[arg(long)]
    data: PathBuf,
    /// Config file (windowing dims, k, train fraction); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of classes.
    #[arg(long)]
    k: Option<usize>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV of anchor trajectories.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (`key = value`); defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training scene file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint, log, and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Ablations: `no-secondary`, `no-crosscorr`, `diversity=<mode>`.
    #[arg(long)]
    ablate: Vec<String>,
    /// Resume from an existing checkpoint (its config wins).
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Scene file to evaluate on.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Which chronological part of the scene to use.
    #[arg(long, default_value = "all", value_parser = ["all", "train", "test"])]
    split: String,
}

#[derive(Args)]
struct PlotArgs {
    /// Per-window records CSV from `eval`.
    #[arg(long)]
    records: PathBuf,
    /// Window index to draw.
    #[arg(long)]
    index: usize,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

/// Parses and runs a full command line (excluding the program name is fine;
/// clap tolerates both). Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Cluster(a) => cmd_cluster(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Plot(a) => cmd_plot(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn parse_motion_mix(s: &str) -> Result<MotionMix> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::Usage(format!(
            "--motion-mix expects `cv,turn,stopgo`, got {s:?}"
        )));
    }
    let mut vals = [0.0; 3];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("--motion-mix: bad weight {p:?}")))?;
    }
    Ok(MotionMix {
        constant_velocity: vals[0],
        turning: vals[1],
        stop_and_go: vals[2],
    })
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.frames < 20 {
        return Err(Error::Usage(format!(
            "--frames must be at least 20 (one full window), got {}",
            a.frames
        )));
    }
    if a.peds == 0 {
        return Err(Error::Usage("--peds must be positive".into()));
    }
    if a.noise_sd < 0.0 {
        return Err(Error::Usage("--noise-sd must be nonnegative".into()));
    }
    let mix = parse_motion_mix(&a.motion_mix)?;
    let mut manifest = RunManifest::new("synth", a.seed);
    manifest.resolved_config = format!(
        "peds = {}\nframes = {}\nnoise_sd = {}\nseed = {}\nmotion_mix = {}\n",
        a.peds, a.frames, a.noise_sd, a.seed, a.motion_mix
    );
    let mut rng = Rng::seed_from(a.seed);
    let scene = synth_scene(a.peds, a.frames, mix, a.noise_sd, &mut rng)?;
    write_atomic(&a.out, scene_to_text(&scene).as_bytes())?;
    manifest.add_output(&a.out)?;
    manifest.save(&manifest_sibling(&a.out))?;
    println!(
        "wrote {} ({} records, {} pedestrians)",
        a.out.display(),
        scene.records.len(),
        a.peds
    );
    Ok(())
}

/// Windows + chronological split for a scene under a config.
fn windows_and_split(
    data: &Path,
    cfg: &CcfConfig,
) -> Result<(Vec<TrajectoryWindow>, Vec<TrajectoryWindow>)> {
    let scene = load_scene(data)?;
    let windows = make_windows(&scene, cfg.t_ob, cfg.t_pred, cfg.neighbor_cap)?;
    if windows.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no full windows of {} + {} timestamps",
            data.display(),
            cfg.t_ob,
            cfg.t_pred
        )));
    }
    Ok(chronological_split(windows, cfg.train_frac))
}

fn cmd_cluster(a: ClusterArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CcfConfig::load(p)?,
        None => CcfConfig::default(),
    };
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let (train, _) = windows_and_split(&a.data, &cfg)?;
    let futures: Vec<Vec<[f64; 2]>> = train.iter().map(|w| w.future.clone()).collect();
    let classes = fit_classes(&futures, cfg.k, &mut Rng::seed_from(cfg.seed).derive("classes"))?;

    let mut csv = String::new();
    csv.push_str("class");
    for t in 0..cfg.t_pred {
        write!(csv, ",t{t}_x,t{t}_y").unwrap();
    }
    csv.push('\n');
    for (j, mean) in classes.means.iter().enumerate() {
        write!(csv, "{j}").unwrap();
        for p in mean {
            write!(csv, ",{},{}", p[0], p[1]).unwrap();
        }
        csv.push('\n');
    }
    write_atomic(&a.out, csv.as_bytes())?;

    let mut manifest = RunManifest::new("cluster", cfg.seed);
    manifest.config_path = a.config.as_ref().map(|p| p.display().to_string());
    manifest.resolved_config = cfg.to_text();
    manifest.add_input(&a.data)?;
    manifest.add_output(&a.out)?;
    manifest.save(&manifest_sibling(&a.out))?;
    println!(
        "fitted {} anchors from {} training futures -> {}",
        cfg.k,
        futures.len(),
        a.out.display()
    );
    Ok(())
}

fn apply_ablations(cfg: &mut CcfConfig, ablate: &[String]) -> Result<()> {
    for item in ablate {
        match item.as_str() {
            "no-secondary" => cfg.no_secondary_task = true,
            "no-crosscorr" => cfg.no_cross_correction = true,
            other => {
                if let Some(mode) = other.strip_prefix("diversity=") {
                    cfg.diversity_mode = DiversityMode::parse(mode)
                        .map_err(|e| Error::Usage(format!("--ablate: {e}")))?;
                } else {
                    return Err(Error::Usage(format!(
                        "--ablate: unknown variant {other:?} \
                         (expected no-secondary, no-crosscorr, diversity=<mode>)"
                    )));
                }
            }
        }
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => CcfConfig::load(p)?,
        None => CcfConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    apply_ablations(&mut cfg, &a.ablate)?;
    cfg.validate()?;

    let mut trainer = match &a.resume {
        Some(ckpt_path) => {
            let t = checkpoint::load(ckpt_path)?;
            // The checkpoint's config defines the model; only the epoch
            // budget from the fresh config applies.
            cfg = CcfConfig {
                epochs: cfg.epochs,
                ..t.config.clone()
            };
            Trainer {
                config: cfg.clone(),
                ..t
            }
        }
        None => {
            let (train, _) = windows_and_split(&a.data, &cfg)?;
            let futures: Vec<Vec<[f64; 2]>> = train.iter().map(|w| w.future.clone()).collect();
            let classes =
                fit_classes(&futures, cfg.k, &mut Rng::seed_from(cfg.seed).derive("classes"))?;
            Trainer::new(cfg.clone(), classes)?
        }
    };

    let (train_windows, _) = windows_and_split(&a.data, &cfg)?;
    let mut log = String::new();
    writeln!(log, "epoch,{}", LossBreakdown::CSV_HEADER).unwrap();
    let start_epoch = trainer.epoch;
    for _ in start_epoch..cfg.epochs as u64 {
        let breakdown = trainer.train_epoch(&train_windows)?;
        writeln!(log, "{},{}", trainer.epoch, breakdown.to_csv()).unwrap();
        eprintln!(
            "epoch {:>3}  l_total {:.6}  l_traj_a {:.6}",
            trainer.epoch, breakdown.l_total, breakdown.l_traj_a
        );
    }

    std::fs::create_dir_all(&a.out_dir)?;
    let ckpt_path = a.out_dir.join("checkpoint.ccf");
    checkpoint::save(&trainer, &ckpt_path)?;
    let log_path = a.out_dir.join("train_log.csv");
    write_atomic(&log_path, log.as_bytes())?;

    let mut manifest = RunManifest::new("train", cfg.seed);
    manifest.config_path = a.config.as_ref().map(|p| p.display().to_string());
    manifest.resolved_config = cfg.to_text();
    manifest.add_input(&a.data)?;
    if let Some(r) = &a.resume {
        manifest.add_input(r)?;
    }
    manifest.add_output(&ckpt_path)?;
    manifest.add_output(&log_path)?;
    manifest.save(&a.out_dir.join("manifest.json"))?;
    println!(
        "trained to epoch {} -> {}",
        trainer.epoch,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let trainer = checkpoint::load(&a.checkpoint)?;
    let (train, test) = windows_and_split(&a.data, &trainer.config)?;
    let windows: Vec<TrajectoryWindow> = match a.split.as_str() {
        "train" => train,
        "test" => test,
        _ => {
            let mut all = train;
            all.extend(test);
            all
        }
    };
    let report = evaluate(&windows, &trainer)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let written = write_report_files(&report, &a.out_dir)?;

    let mut manifest = RunManifest::new("eval", trainer.config.seed);
    manifest.resolved_config = trainer.config.to_text();
    manifest.add_input(&a.checkpoint)?;
    manifest.add_input(&a.data)?;
    for p in &written {
        manifest.add_output(p)?;
    }
    manifest.save(&a.out_dir.join("manifest.json"))?;
    print!("{}", report.table());
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.records)?;
    let records = records_from_csv(&text, &a.records.display().to_string())?;
    let svg = render_indexed(&records, a.index)?;
    write_atomic(&a.out, svg.as_bytes())?;

    let mut m = RunManifest::new("plot", 0);
    m.resolved_config = format!("records = {}\nindex = {}\n", a.records.display(), a.index);
    m.add_input(&a.records)?;
    m.add_output(&a.out)?;
    m.save(&manifest_sibling(&a.out))?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// `foo.ext` -> `foo.ext.manifest.json` next to the artifact.
fn manifest_sibling(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}
