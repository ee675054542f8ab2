use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use ptychograd::config::RunConfig;
use ptychograd::error::{PtychoError, Result};
use ptychograd::io;
use ptychograd::metrics::{
    centre_crop, line_profile_fwhm, object_quality, position_error_stats, registered_position_error_stats,
    remove_ambiguities, ConvergenceHistory, EpochRecord, WidthKind,
};
use ptychograd::reconstruct::{comparison_roi, Problem, ReconstructionState};
use ptychograd::simulator::simulate_recipe;

const DATASET_FILE: &str = "dataset.ptyd";
const TRUTH_FILE: &str = "truth.ptyt";
const SNAPSHOT_FILE: &str = "state.ptys";
const HISTORY_FILE: &str = "history.csv";
const RESOLVED_CONFIG_FILE: &str = "run.toml";

#[derive(Parser)]
#[command(name = "ptychograd", version, about = "Ptychographic reconstruction with geometry refinement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset and its ground truth from a run config's
    /// `[simulation]` table.
    Simulate {
        #[arg(long)]
        recipe: PathBuf,
        /// Defaults to the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct object, probe, distance and positions from a dataset.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        /// Run config; its `[reconstruction]` table is used. Defaults apply
        /// when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a snapshot written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Ground truth for per-epoch error columns in the history.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Compare a reconstruction directory against ground truth.
    Evaluate {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Line profile and feature width of an image (`.npy` or PNG).
    Profile {
        #[arg(long)]
        image: PathBuf,
        /// Start point `x,y` in pixels.
        #[arg(long, value_parser = parse_point)]
        from: (f64, f64),
        #[arg(long, value_parser = parse_point)]
        to: (f64, f64),
        /// Sample count; four per pixel of length by default.
        #[arg(long)]
        samples: Option<usize>,
        /// CSV destination; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_point(s: &str) -> std::result::Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or_else(|| format!("expected x,y, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(x)?, num(y)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    let outcome = match cli.command {
        Command::Simulate { recipe, out } => simulate(&recipe, out),
        Command::Reconstruct {
            data,
            config,
            out,
            resume,
            truth,
        } => reconstruct(&data, config.as_deref(), out, resume.as_deref(), truth.as_deref()),
        Command::Evaluate { recon, truth, out } => evaluate(&recon, &truth, &out),
        Command::Profile {
            image,
            from,
            to,
            samples,
            out,
        } => profile(&image, from, to, samples, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e));
            ExitCode::FAILURE
        }
    }
}

fn one_line(e: &PtychoError) -> String {
    e.to_string().split_whitespace().collect::<Vec<_>>().join(" ")
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| PtychoError::io(path, e))?;
    RunConfig::from_toml(&text)
}

fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| cfg.output.clone())
        .ok_or_else(|| PtychoError::Config("no output directory: pass --out or set `output`".into()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    io::write_atomic(path, text.as_bytes())
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| PtychoError::Numeric(format!("csv: {e}")))?;
    }
    w.into_inner().map_err(|e| PtychoError::Numeric(format!("csv: {e}")))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    io::write_atomic(path, &csv_bytes(rows)?)
}

fn simulate(recipe_path: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = read_config(recipe_path)?;
    let out = output_dir(out, &cfg)?;
    let recipe = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| PtychoError::Config("run config has no [simulation] table".into()))?;
    let (dataset, truth) = simulate_recipe(recipe, recipe_path.parent())?;
    io::save_dataset(&dataset, &out.join(DATASET_FILE))?;
    io::save_truth(&truth, &out.join(TRUTH_FILE))?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;
    io::export_complex(&truth.object, &out, "truth_object")?;
    for (k, p) in truth.probes.modes().iter().enumerate() {
        io::export_complex(p, &out, &format!("truth_probe{k}"))?;
    }
    log::info!(
        "wrote {} patterns of {:?} to {}",
        dataset.len(),
        dataset.pattern_shape(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct PositionRow {
    index: usize,
    nominal_x_px: f64,
    nominal_y_px: f64,
    correction_x_px: f64,
    correction_y_px: f64,
    estimate_x_px: f64,
    estimate_y_px: f64,
}

fn position_rows(state: &ReconstructionState) -> Vec<PositionRow> {
    state
        .positions
        .iter()
        .zip(&state.corrections)
        .zip(state.estimated_positions())
        .enumerate()
        .map(|(index, ((&(x, y), c), (ex, ey)))| PositionRow {
            index,
            nominal_x_px: x / state.pixel_pitch,
            nominal_y_px: y / state.pixel_pitch,
            correction_x_px: c.re,
            correction_y_px: c.im,
            estimate_x_px: ex,
            estimate_y_px: ey,
        })
        .collect()
}

/// Object and probe images for `state` under `checkpoints/epoch_NNNNN`.
fn write_checkpoint(out: &Path, state: &ReconstructionState) -> Result<()> {
    let dir = out.join("checkpoints").join(format!("epoch_{:05}", state.epoch));
    io::export_complex(&state.object, &dir, "object")?;
    for (k, p) in state.probes.modes().iter().enumerate() {
        io::export_complex(p, &dir, &format!("probe{k}"))?;
    }
    Ok(())
}

fn write_history(out: &Path, history: &ConvergenceHistory) -> Result<()> {
    let mut bytes = Vec::new();
    history.write_csv(&mut bytes)?;
    io::write_atomic(&out.join(HISTORY_FILE), &bytes)
}

fn reconstruct(
    data: &Path,
    config: Option<&Path>,
    out: Option<PathBuf>,
    resume: Option<&Path>,
    truth: Option<&Path>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => RunConfig::default(),
    };
    let out = output_dir(out, &cfg)?;
    let dataset = io::load_dataset(data)?;
    let truth = truth.map(io::load_truth).transpose()?;
    let rc = &cfg.reconstruction;
    let problem = Problem::new(&dataset, rc)?;

    let (state, mut history) = match resume {
        Some(snapshot) => {
            let state = io::load_snapshot(snapshot)?;
            let mut history = ConvergenceHistory::new();
            let previous = snapshot.with_file_name(HISTORY_FILE);
            if previous.exists() {
                let file = fs::File::open(&previous).map_err(|e| PtychoError::io(&previous, e))?;
                for r in ConvergenceHistory::read_csv(file)?.records() {
                    if r.epoch <= state.epoch {
                        history.push(r.clone())?;
                    }
                }
            }
            log::info!("resuming at epoch {}", state.epoch);
            (state, history)
        }
        None => (ReconstructionState::initial(&dataset, rc)?, ConvergenceHistory::new()),
    };

    let mut resolved = cfg.clone();
    resolved.output = Some(out.clone());
    write_text(&out.join(RESOLVED_CONFIG_FILE), &resolved.to_toml()?)?;
    write_checkpoint(&out, &state)?;

    let interval = rc.checkpoint_interval;
    let mut mirror = history.clone();
    let result = problem.run(state, &mut history, truth.as_ref(), |s, r: &EpochRecord| {
        mirror.push(r.clone())?;
        if s.epoch % interval == 0 {
            write_checkpoint(&out, s)?;
            io::save_snapshot(s, &out.join(SNAPSHOT_FILE))?;
            write_history(&out, &mirror)?;
            log::info!("epoch {} loss {:.6e} z {:.6e}", r.epoch, r.loss_total, r.z);
        }
        Ok(())
    });
    let state = match result {
        Ok(s) => s,
        Err(PtychoError::Diverged { epoch, last_state }) => {
            io::save_snapshot(&last_state, &out.join(SNAPSHOT_FILE))?;
            write_history(&out, &history)?;
            return Err(PtychoError::Diverged { epoch, last_state });
        }
        Err(e) => return Err(e),
    };

    write_checkpoint(&out, &state)?;
    io::save_snapshot(&state, &out.join(SNAPSHOT_FILE))?;
    write_history(&out, &history)?;
    write_csv(&out.join("positions.csv"), &position_rows(&state))?;
    log::info!("finished at epoch {}, z = {:.6e} m", state.epoch, state.distance());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    epoch: u64,
    z_estimate: f64,
    z_true: f64,
    z_rel_error: f64,
    ssim_magnitude: f64,
    ssim_phase: f64,
    pos_err_median: f64,
    pos_err_mean: f64,
    pos_err_max: f64,
    pos_err_median_registered: f64,
}

#[derive(Serialize)]
struct PositionErrorRow {
    index: usize,
    estimate_x_px: f64,
    estimate_y_px: f64,
    true_x_px: f64,
    true_y_px: f64,
    error_px: f64,
}

#[derive(Serialize)]
struct HistogramRow {
    lower_px: f64,
    upper_px: f64,
    count: usize,
}

#[derive(Serialize)]
struct ZRow {
    epoch: u64,
    z: f64,
    z_rel_error: f64,
}

fn evaluate(recon: &Path, truth_path: &Path, out: &Path) -> Result<()> {
    let state = io::load_snapshot(&recon.join(SNAPSHOT_FILE))?;
    let truth = io::load_truth(truth_path)?;
    if truth.positions.len() != state.positions.len() {
        return Err(PtychoError::InvalidArgument(format!(
            "truth has {} positions, reconstruction {}",
            truth.positions.len(),
            state.positions.len()
        )));
    }
    let roi = comparison_roi(&state, &truth);
    let quality = object_quality(&state.object, &truth.object, roi)?;
    let est = state.estimated_positions();
    let true_px = truth.positions_pixels();
    let errors = position_error_stats(&est, &true_px)?;
    let registered = registered_position_error_stats(&est, &true_px)?;

    let summary = Summary {
        epoch: state.epoch,
        z_estimate: state.distance(),
        z_true: truth.distance,
        z_rel_error: (state.distance() - truth.distance) / truth.distance,
        ssim_magnitude: quality.ssim_magnitude,
        ssim_phase: quality.ssim_phase,
        pos_err_median: errors.median,
        pos_err_mean: errors.mean,
        pos_err_max: errors.max,
        pos_err_median_registered: registered.median,
    };
    write_csv(&out.join("summary.csv"), &[&summary])?;

    let rows: Vec<PositionErrorRow> = est
        .iter()
        .zip(&true_px)
        .zip(&errors.errors)
        .enumerate()
        .map(|(index, ((e, t), err))| PositionErrorRow {
            index,
            estimate_x_px: e.0,
            estimate_y_px: e.1,
            true_x_px: t.0,
            true_y_px: t.1,
            error_px: *err,
        })
        .collect();
    write_csv(&out.join("position_errors.csv"), &rows)?;
    let hist: Vec<HistogramRow> = errors
        .histogram(10)
        .into_iter()
        .map(|(lower_px, upper_px, count)| HistogramRow {
            lower_px,
            upper_px,
            count,
        })
        .collect();
    write_csv(&out.join("position_histogram.csv"), &hist)?;

    let history_path = recon.join(HISTORY_FILE);
    let history = match fs::File::open(&history_path) {
        Ok(f) => ConvergenceHistory::read_csv(f)?,
        Err(e) => return Err(PtychoError::io(history_path, e)),
    };
    let z_rows: Vec<ZRow> = history
        .records()
        .iter()
        .map(|r| ZRow {
            epoch: r.epoch,
            z: r.z,
            z_rel_error: (r.z - truth.distance) / truth.distance,
        })
        .collect();
    write_csv(&out.join("z_trajectory.csv"), &z_rows)?;

    let aligned = remove_ambiguities(&centre_crop(&state.object, roi)?, &centre_crop(&truth.object, roi)?)?;
    io::export_complex(&aligned, out, "aligned_object")?;
    log::info!(
        "SSIM magnitude {:.4}, phase {:.4}; z error {:+.3}%; median position error {:.3} px",
        summary.ssim_magnitude,
        summary.ssim_phase,
        100.0 * summary.z_rel_error,
        summary.pos_err_median
    );
    Ok(())
}

#[derive(Serialize)]
struct ProfileRow {
    distance_px: f64,
    value: f64,
    /// Filled on the first row only.
    width_kind: Option<WidthKind>,
    width_px: Option<f64>,
}

fn profile(image: &Path, from: (f64, f64), to: (f64, f64), samples: Option<usize>, out: Option<&Path>) -> Result<()> {
    let img = io::load_real_image(image)?;
    let length = (to.0 - from.0).hypot(to.1 - from.1);
    let samples = samples.unwrap_or((4.0 * length).ceil() as usize + 1);
    let p = line_profile_fwhm(&img, from, to, samples)?;
    let rows: Vec<ProfileRow> = p
        .distance
        .iter()
        .zip(&p.value)
        .enumerate()
        .map(|(i, (&distance_px, &value))| ProfileRow {
            distance_px,
            value,
            width_kind: (i == 0).then_some(p.kind),
            width_px: if i == 0 { p.width } else { None },
        })
        .collect();
    match out {
        Some(path) => write_csv(path, &rows),
        None => std::io::stdout()
            .write_all(&csv_bytes(&rows)?)
            .map_err(|e| PtychoError::io("<stdout>", e)),
    }
}
