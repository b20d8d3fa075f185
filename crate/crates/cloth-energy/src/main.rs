//! Command-line pipeline: dataset synthesis, training, evaluation,
//! animation, potential-map sweeps, and OBJ export.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical failure,
//! 4 I/O failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use cloth_energy::config::{material_attrs, SimConfig};
use cloth_energy::datagen::{
    generate_dataset, load_split, read_trajectory, write_trajectory, DatasetManifest, Trajectory,
};
use cloth_energy::dynamics::{rollout, EnergySource, StepConfig};
use cloth_energy::error::Error;
use cloth_energy::metrics::{aggregate, metric_collision_rate, metric_rollout_error};
use cloth_energy::model::{EnergyUnitModel, FeatureExtractor};
use cloth_energy::train::{eval_energy_mse, target_variance, train, Dataset};

#[derive(Parser)]
#[command(
    name = "cloth-energy",
    about = "Learned per-edge cloth energy units: data synthesis, training, evaluation, animation",
    version
)]
struct Cli {
    /// TOML configuration file; built-in defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed for any stochastic stage.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the train/test trajectory dataset.
    Datagen {
        /// Output directory for trajectory files and the manifest.
        #[arg(long, default_value = "dataset")]
        out: PathBuf,
    },
    /// Train the energy-unit model on a generated dataset.
    Train {
        /// Dataset directory containing manifest.json.
        #[arg(long, default_value = "dataset")]
        data: PathBuf,
        /// Output model file.
        #[arg(long, default_value = "model.eumf")]
        out: PathBuf,
        /// Training-history CSV path.
        #[arg(long, default_value = "history.csv")]
        history: PathBuf,
    },
    /// Evaluate energy-budget prediction MSE on the held-out split.
    EvalEnergy {
        #[arg(long, default_value = "dataset")]
        data: PathBuf,
        #[arg(long, default_value = "model.eumf")]
        model: PathBuf,
        /// Output CSV.
        #[arg(long, default_value = "energy_eval.csv")]
        out: PathBuf,
    },
    /// Roll out a learned model from a trajectory's first two frames.
    Animate {
        /// Source trajectory providing mesh, initial frames, and material.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "model.eumf")]
        model: PathBuf,
        /// Output trajectory file.
        #[arg(long, default_value = "rollout.eutr")]
        out: PathBuf,
        /// Number of frames (including the two initial frames).
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Rollout fidelity metrics against held-out ground truth.
    EvalRollout {
        #[arg(long, default_value = "dataset")]
        data: PathBuf,
        #[arg(long, default_value = "model.eumf")]
        model: PathBuf,
        #[arg(long, default_value = "rollout_eval.csv")]
        out: PathBuf,
        /// Evaluate at most this many held-out sequences.
        #[arg(long)]
        max_sequences: Option<usize>,
    },
    /// Export the learned potential over a (length, angle) grid as CSV.
    Sweep {
        #[arg(long, default_value = "model.eumf")]
        model: PathBuf,
        /// Material preset name to condition on.
        #[arg(long, default_value = "cotton")]
        material: String,
        #[arg(long, default_value = "sweep.csv")]
        out: PathBuf,
    },
    /// Write one OBJ file per trajectory frame.
    ExportObj {
        #[arg(long)]
        input: PathBuf,
        /// Output path prefix; frame index and .obj are appended.
        #[arg(long, default_value = "frame")]
        out: PathBuf,
    },
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => 2,
                Error::NonConverged(_) | Error::Numerical { .. } => 3,
                _ => 4,
            }
        }
    };
    std::process::exit(code);
}

fn load_config(cli: &Cli) -> Result<SimConfig, Error> {
    match &cli.config {
        Some(path) => SimConfig::load(path),
        None => {
            let cfg = SimConfig::default();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Datagen { out } => cmd_datagen(&cfg, cli.seed, out),
        Command::Train { data, out, history } => cmd_train(&cfg, cli.seed, data, out, history),
        Command::EvalEnergy { data, model, out } => cmd_eval_energy(&cfg, data, model, out),
        Command::Animate {
            input,
            model,
            out,
            frames,
        } => cmd_animate(&cfg, input, model, out, *frames),
        Command::EvalRollout {
            data,
            model,
            out,
            max_sequences,
        } => cmd_eval_rollout(&cfg, cli.seed, data, model, out, *max_sequences),
        Command::Sweep {
            model,
            material,
            out,
        } => cmd_sweep(&cfg, model, material, out),
        Command::ExportObj { input, out } => cmd_export_obj(input, out),
    }
}

fn csv_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>, Error> {
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(std::io::BufWriter::new(file))
}

fn write_line(w: &mut impl std::io::Write, path: &Path, line: &str) -> Result<(), Error> {
    writeln!(w, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

fn cmd_datagen(cfg: &SimConfig, seed: u64, out: &Path) -> Result<(), Error> {
    let started = Instant::now();
    let manifest = generate_dataset(cfg, seed, out)?;
    println!(
        "wrote {} sequences to {} in {:.1} s (config {}, seed {seed})",
        manifest.entries.len(),
        out.display(),
        started.elapsed().as_secs_f64(),
        manifest.config_digest,
    );
    Ok(())
}

fn load_datasets(cfg: &SimConfig, dir: &Path) -> Result<(Dataset, Dataset), Error> {
    let manifest = DatasetManifest::load(&dir.join("manifest.json"))?;
    if manifest.config_digest != cfg.digest() {
        eprintln!(
            "note: dataset was generated with config {}, current config is {}",
            manifest.config_digest,
            cfg.digest()
        );
    }
    let train_set = Dataset::new(load_split(&manifest, dir, "train")?)?;
    let test_set = Dataset::new(load_split(&manifest, dir, "test")?)?;
    Ok((train_set, test_set))
}

fn cmd_train(
    cfg: &SimConfig,
    seed: u64,
    data: &Path,
    out: &Path,
    history_path: &Path,
) -> Result<(), Error> {
    let (train_set, test_set) = load_datasets(cfg, data)?;
    let gravity = cfg.solver.step_config().gravity;
    let started = Instant::now();
    let outcome = train(&train_set, &test_set, &cfg.train, &gravity, seed)?;
    outcome.model.save(out)?;

    let mut w = csv_writer(history_path)?;
    write_line(
        &mut w,
        history_path,
        &format!("# config {} seed {seed}", cfg.digest()),
    )?;
    write_line(&mut w, history_path, "epoch,l_sup,lambda_l_con,val_mse,lr")?;
    for row in &outcome.history {
        write_line(
            &mut w,
            history_path,
            &format!(
                "{},{:.9e},{:.9e},{:.9e},{:.9e}",
                row.epoch, row.mean_l_sup, row.mean_l_con_weighted, row.val_mse, row.lr
            ),
        )?;
    }
    println!(
        "trained on {} samples in {:.1} s -> {} (history {}){}",
        train_set.samples.len(),
        started.elapsed().as_secs_f64(),
        out.display(),
        history_path.display(),
        if outcome.aborted {
            "; training aborted early, last checkpoint kept"
        } else {
            ""
        },
    );
    Ok(())
}

fn cmd_eval_energy(cfg: &SimConfig, data: &Path, model: &Path, out: &Path) -> Result<(), Error> {
    let (_, test_set) = load_datasets(cfg, data)?;
    let model = EnergyUnitModel::load(model)?;
    let gravity = cfg.solver.step_config().gravity;
    let eval = eval_energy_mse(&model, &test_set, &gravity)?;
    let variance = target_variance(&test_set, &gravity);
    let r2 = if variance > 0.0 {
        1.0 - eval.overall.0 / variance
    } else {
        f64::NAN
    };
    let mut w = csv_writer(out)?;
    write_line(&mut w, out, &format!("# config {}", cfg.digest()))?;
    write_line(&mut w, out, "material,mse_mean,mse_std,samples")?;
    for (name, (mean, std)) in &eval.per_material {
        write_line(&mut w, out, &format!("{name},{mean:.9e},{std:.9e},"))?;
    }
    write_line(
        &mut w,
        out,
        &format!(
            "all,{:.9e},{:.9e},{}",
            eval.overall.0, eval.overall.1, eval.count
        ),
    )?;
    println!(
        "held-out energy MSE {:.4e} over {} samples (target variance {:.4e}, R^2 {:.4}) -> {}",
        eval.overall.0,
        eval.count,
        variance,
        r2,
        out.display()
    );
    Ok(())
}

/// Re-simulate a trajectory's motion with a learned model from its first
/// two frames, keeping its pinned vertices on their recorded paths.
fn learned_rollout(
    cfg: &SimConfig,
    truth: &Trajectory,
    model: &EnergyUnitModel,
    num_frames: usize,
) -> Result<(Trajectory, Vec<bool>), Error> {
    let attrs_table = material_attrs(&cfg.materials);
    let attrs = attrs_table
        .get(&truth.material_name)
        .copied()
        .unwrap_or(truth.attrs);
    let extractor = FeatureExtractor::new(&truth.mesh)?;
    let source = EnergySource::Learned {
        model,
        extractor: &extractor,
        attrs,
    };
    let step_cfg: StepConfig = cfg.solver.step_config();
    let initial = truth.state_at(1)?;
    let pins = truth.mesh.pinned.clone();
    let roll = rollout(
        &truth.mesh,
        &initial,
        &source,
        &[],
        num_frames.saturating_sub(2),
        |frame| {
            let t = frame + 1; // rollout step k produces frame k+1
            truth
                .frames
                .get(t.min(truth.frames.len() - 1))
                .map(|f| pins.iter().map(|&v| f[v]).collect())
        },
        None,
        &step_cfg,
    )?;
    let mut frames = vec![truth.frames[0].clone(), truth.frames[1].clone()];
    frames.extend(roll.frames);
    let converged = roll.reports.iter().map(|r| r.converged).collect();
    Ok((
        Trajectory {
            mesh: truth.mesh.clone(),
            frames,
            h: truth.h,
            material_name: truth.material_name.clone(),
            attrs,
            v_p: None,
            v_d: None,
        },
        converged,
    ))
}

fn cmd_animate(
    cfg: &SimConfig,
    input: &Path,
    model_path: &Path,
    out: &Path,
    frames: Option<usize>,
) -> Result<(), Error> {
    let truth = read_trajectory(input)?;
    let model = EnergyUnitModel::load(model_path)?;
    let n = frames.unwrap_or(truth.frames.len()).max(2);
    let started = Instant::now();
    let (pred, converged) = learned_rollout(cfg, &truth, &model, n)?;
    write_trajectory(out, &pred)?;
    let bad = converged.iter().filter(|c| !**c).count();
    println!(
        "rolled out {} frames in {:.1} s -> {}{}",
        pred.frames.len(),
        started.elapsed().as_secs_f64(),
        out.display(),
        if bad > 0 {
            format!(" ({bad} steps hit the iteration budget)")
        } else {
            String::new()
        },
    );
    Ok(())
}

fn cmd_eval_rollout(
    cfg: &SimConfig,
    seed: u64,
    data: &Path,
    model_path: &Path,
    out: &Path,
    max_sequences: Option<usize>,
) -> Result<(), Error> {
    let manifest = DatasetManifest::load(&data.join("manifest.json"))?;
    let model = EnergyUnitModel::load(model_path)?;
    let entries = manifest.split("test");
    let limit = max_sequences.unwrap_or(entries.len());
    let started = Instant::now();

    let mut w = csv_writer(out)?;
    write_line(
        &mut w,
        out,
        &format!("# config {} seed {seed} frames_per_sequence per row", cfg.digest()),
    )?;
    write_line(
        &mut w,
        out,
        "sequence,material,frames,error_mean_mm,error_std_frames_mm,collision_rate_pct",
    )?;
    let mut means = Vec::new();
    for entry in entries.iter().take(limit) {
        let truth = read_trajectory(&data.join(&entry.file))?;
        let (pred, _) = learned_rollout(cfg, &truth, &model, truth.frames.len())?;
        let (mean, std) = metric_rollout_error(&pred, &truth)?;
        // No obstacle in the synthetic scenes; rate is reported for the
        // schema and stays 0 unless obstacles are added to the config.
        let rates = metric_collision_rate(&pred, &[], cfg.solver.step_config().proximity_radius);
        let (rate_mean, _) = aggregate(&rates);
        write_line(
            &mut w,
            out,
            &format!(
                "{},{},{},{:.6},{:.6},{:.4}",
                entry.file,
                entry.material,
                pred.frames.len(),
                mean,
                std,
                rate_mean
            ),
        )?;
        means.push(mean);
    }
    let (overall_mean, overall_std) = aggregate(&means);
    write_line(
        &mut w,
        out,
        &format!(
            "all,,,{overall_mean:.6},{overall_std:.6},0.0000"
        ),
    )?;
    println!(
        "rollout error {:.3} mm (std over sequences {:.3}) on {} sequences in {:.1} s -> {}",
        overall_mean,
        overall_std,
        means.len(),
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn cmd_sweep(cfg: &SimConfig, model_path: &Path, material: &str, out: &Path) -> Result<(), Error> {
    let model = EnergyUnitModel::load(model_path)?;
    let attrs_table = material_attrs(&cfg.materials);
    let attrs = attrs_table
        .get(material)
        .ok_or_else(|| Error::Config(format!("unknown material preset '{material}'")))?;
    let s = &cfg.sweep;
    let grid = model.potential_sweep(
        attrs,
        (s.dl_min, s.dl_max),
        (s.angle_min, s.angle_max),
        s.resolution,
    )?;
    let mut w = csv_writer(out)?;
    write_line(
        &mut w,
        out,
        &format!("# config {} material {material}", cfg.digest()),
    )?;
    let header = std::iter::once("angle_rad_vs_dl_m".to_string())
        .chain(grid.dls.iter().map(|d| format!("{d:.6e}")))
        .collect::<Vec<_>>()
        .join(",");
    write_line(&mut w, out, &header)?;
    for (ai, angle) in grid.angles.iter().enumerate() {
        let row = std::iter::once(format!("{angle:.6e}"))
            .chain(grid.values[ai].iter().map(|v| format!("{v:.9e}")))
            .collect::<Vec<_>>()
            .join(",");
        write_line(&mut w, out, &row)?;
    }
    println!(
        "swept {}x{} potential grid for {material} -> {}",
        grid.angles.len(),
        grid.dls.len(),
        out.display()
    );
    Ok(())
}

fn cmd_export_obj(input: &Path, out: &Path) -> Result<(), Error> {
    let traj = read_trajectory(input)?;
    let files = cloth_energy::datagen::export_obj(out, &traj)?;
    println!("wrote {} OBJ files with prefix {}", files.len(), out.display());
    Ok(())
}
