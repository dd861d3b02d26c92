//! `emlo`: simulate data, train, run odometry, evaluate, check gradients.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Matrix6;
use emlo_core::checkpoint::Checkpoint;
use emlo_core::config::{simulate_sequence, RunConfig};
use emlo_core::eval::{evaluate, relative_from_trajectory, OdometryResult};
use emlo_core::features::{sphericity, FrameFeatures, FrameGeometry, ModelParams};
use emlo_core::io::{
    read_covariances_csv, read_kitti_poses, write_covariances_csv, write_diagnostics_csv, write_kitti_poses,
    write_text, write_times, write_velodyne_bin, SequenceDir,
};
use emlo_core::learning::{em_train, TrainSequence};
use emlo_core::liegroup::Pose;
use emlo_core::odometry::run_odometry;
use emlo_core::window::estimate_window_cold;
use emlo_core::{gradcheck, Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "emlo", version, about = "Unsupervised EM learning of lidar features inside a sliding-window estimator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON); defaults apply to missing fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write scans, times and ground-truth poses of every configured sequence.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output root; one directory per sequence. Defaults to paths.data_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn the network parameters by EM on unlabelled sequences.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Sequence directories; defaults to the configured training sequences under paths.data_dir.
        #[arg(long = "seq")]
        sequences: Vec<PathBuf>,
        /// Output directory for the checkpoint and loss logs. Defaults to paths.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliding-window odometry over one sequence directory.
    Odometry {
        #[command(flatten)]
        config: ConfigArg,
        /// Sequence directory holding velodyne/*.bin and optionally times.txt.
        #[arg(long = "seq")]
        sequence: PathBuf,
        /// Trained checkpoint; without it the seeded random initialization is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory for poses.txt, covariances.csv and diagnostics.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write per-point detector scores and sphericities.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Compare an estimated trajectory with ground truth.
    Eval {
        /// Estimated poses (pose text format).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth poses (pose text format).
        #[arg(long)]
        gt: PathBuf,
        /// Covariances of the relative poses; enables the consistency metric.
        #[arg(long)]
        cov: Option<PathBuf>,
        /// Directory for segments.csv and summary.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck,
    /// Dump the default configuration, or the keypoints and matches of one window.
    Inspect {
        #[command(flatten)]
        config: ConfigArg,
        /// Print the full configuration with defaults filled in.
        #[arg(long)]
        defaults: bool,
        /// Sequence directory to take the window from.
        #[arg(long = "seq")]
        sequence: Option<PathBuf>,
        /// First frame of the window.
        #[arg(long, default_value_t = 0)]
        start: usize,
        /// Trained checkpoint; without it the seeded random initialization is used.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numerical => 4,
    }
}

fn load_geometries(dir: &Path, cfg: &RunConfig) -> Result<(Vec<FrameGeometry>, Vec<f64>)> {
    let scans = SequenceDir::new(dir).load_scans()?;
    if scans.is_empty() {
        return Err(Error::MalformedFile {
            path: dir.to_path_buf(),
            reason: "no scans found".into(),
        });
    }
    let stamps = scans.iter().map(|s| s.stamp).collect();
    let geoms = scans
        .iter()
        .map(|s| FrameGeometry::new(s, &cfg.estimator.features))
        .collect::<Result<_>>()?;
    Ok((geoms, stamps))
}

fn load_params(checkpoint: Option<&Path>, cfg: &RunConfig) -> Result<ModelParams> {
    match checkpoint {
        Some(p) => {
            let c = Checkpoint::load(p)?;
            if c.config_hash != cfg.hash() {
                eprintln!("note: checkpoint was trained under a different configuration");
            }
            Ok(c.params)
        }
        None => Ok(ModelParams::random(cfg.seed)),
    }
}

fn simulate(cfg: &RunConfig, out: &Path) -> Result<()> {
    let sim = &cfg.simulation;
    for spec in sim.train.iter().chain(&sim.test) {
        let dir = SequenceDir::new(out.join(&spec.name));
        let (gt, scans) = simulate_sequence(&cfg.world, &cfg.sensor, spec, sim.rate_hz)?;
        for (k, scan) in scans.iter().enumerate() {
            write_velodyne_bin(&dir.scan_path(k), scan)?;
        }
        write_times(&dir.times_path(), &gt.iter().map(|k| k.stamp).collect::<Vec<_>>())?;
        let poses: Vec<Pose> = gt.iter().map(|k| k.pose.inverse()).collect();
        write_kitti_poses(&dir.poses_path(), &poses)?;
        println!("{}: {} frames -> {}", spec.name, scans.len(), dir.root.display());
    }
    Ok(())
}

fn train(cfg: &RunConfig, sequences: &[PathBuf], out: &Path) -> Result<()> {
    let dirs: Vec<PathBuf> = if sequences.is_empty() {
        cfg.simulation.train.iter().map(|s| cfg.paths.data_dir.join(&s.name)).collect()
    } else {
        sequences.to_vec()
    };
    let mut seqs = Vec::new();
    for d in &dirs {
        let (geoms, stamps) = load_geometries(d, cfg)?;
        seqs.push(TrainSequence { geoms, stamps });
    }
    let init = ModelParams::random(cfg.seed);
    let (params, adam, report) = em_train(&seqs, init, &cfg.estimator, &cfg.train, |e, _| {
        eprintln!(
            "epoch {:3}  loss {:12.4}  kept {:.3}  windows {}  rejected {}  {:.1}s",
            e.epoch, e.mean_loss, e.alpha_kept_fraction, e.windows, e.rejected, e.wall_time_s
        );
    })?;
    let ckpt = Checkpoint {
        config_hash: cfg.hash(),
        params,
        adam,
    };
    ckpt.save(&out.join("model.ckpt"))?;
    write_text(&out.join("train_loss.csv"), &report.to_csv())?;
    let mut epochs = String::from("epoch,mean_loss,alpha_kept_fraction,windows,rejected\n");
    for e in &report.epochs {
        epochs.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.mean_loss, e.alpha_kept_fraction, e.windows, e.rejected
        ));
    }
    write_text(&out.join("epochs.csv"), &epochs)?;
    println!(
        "trained {} epochs ({}), checkpoint {}",
        report.epochs.len(),
        if report.converged { "converged" } else { "epoch cap" },
        out.join("model.ckpt").display()
    );
    Ok(())
}

fn odometry(cfg: &RunConfig, seq: &Path, checkpoint: Option<&Path>, out: &Path, diagnostics: bool) -> Result<()> {
    let params = load_params(checkpoint, cfg)?;
    let (geoms, stamps) = load_geometries(seq, cfg)?;
    let mut diag = Vec::new();
    let run = run_odometry(&geoms, &stamps, &params, &cfg.estimator, diagnostics.then_some(&mut diag))?;
    let poses: Vec<Pose> = run.result.trajectory().iter().map(Pose::inverse).collect();
    write_kitti_poses(&out.join("poses.txt"), &poses)?;
    write_covariances_csv(&out.join("covariances.csv"), &run.result.stamps, &run.result.covariances)?;
    if diagnostics {
        write_diagnostics_csv(&out.join("diagnostics.csv"), &diag)?;
    }
    println!(
        "{} frames, {} windows, {} extrapolated -> {}",
        geoms.len(),
        run.windows,
        run.failed_windows,
        out.display()
    );
    Ok(())
}

fn eval(est: &Path, gt: &Path, cov: Option<&Path>, out: Option<&Path>) -> Result<()> {
    // both files hold sensor-to-world poses
    let est: Vec<Pose> = read_kitti_poses(est)?.iter().map(Pose::inverse).collect();
    let gt: Vec<Pose> = read_kitti_poses(gt)?.iter().map(Pose::inverse).collect();
    if est.is_empty() {
        return Err(Error::Config("estimated trajectory is empty".into()));
    }
    let e0 = est[0].inverse();
    let est: Vec<Pose> = est.iter().map(|p| *p * e0).collect();
    let relative = relative_from_trajectory(&est);
    let (stamps, covariances) = match cov {
        Some(p) => read_covariances_csv(p)?,
        None => ((1..est.len()).map(|k| k as f64).collect(), Vec::new()),
    };
    let has_cov = !covariances.is_empty();
    if has_cov && covariances.len() != relative.len() {
        return Err(Error::Config(format!(
            "{} covariances for {} relative poses",
            covariances.len(),
            relative.len()
        )));
    }
    let result = OdometryResult {
        stamps,
        covariances: if has_cov {
            covariances
        } else {
            vec![Matrix6::identity(); relative.len()]
        },
        relative,
    };
    let mut summary = evaluate(&result, &gt)?;
    if !has_cov {
        summary.avg_mahalanobis = None;
    }
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    if let Some(dir) = out {
        write_text(&dir.join("summary.json"), &json)?;
        if let Some(s) = &summary.segments {
            write_text(&dir.join("segments.csv"), &s.to_csv())?;
        }
    }
    println!("{json}");
    Ok(())
}

fn run_gradcheck() -> Result<bool> {
    let mut ok = true;
    for s in gradcheck::run_all()? {
        let pass = s.passed();
        ok &= pass;
        println!(
            "{} {:<24} instances {:3}  worst relative error {:.3e}",
            if pass { "PASS" } else { "FAIL" },
            s.name,
            s.instances,
            s.worst_relative_error
        );
    }
    Ok(ok)
}

fn inspect(cfg: &RunConfig, seq: &Path, start: usize, checkpoint: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let params = load_params(checkpoint, cfg)?;
    let (geoms, stamps) = load_geometries(seq, cfg)?;
    let w = cfg.estimator.window;
    if start + w > geoms.len() {
        return Err(Error::Config(format!(
            "window {start}..{} exceeds the {} frames of the sequence",
            start + w,
            geoms.len()
        )));
    }
    let frames: Vec<FrameFeatures> = geoms[start..start + w]
        .iter()
        .map(|g| FrameFeatures::from_geometry(g, &params, &cfg.estimator.features))
        .collect();
    let reference = geoms[start].reference(cfg.estimator.grid_cell());
    let est = estimate_window_cold(&frames, &reference, &stamps[start..start + w], &cfg.estimator)?;
    let post = &est.outcome.posterior;
    let t_tau = post.knots[0].pose;
    let mut csv = String::from("frame,keypoint,zx,zy,zz,rx,ry,rz,candidates,sphericity,beta_kept,mahalanobis_sq\n");
    for ((f, m), &kept) in est.factors.measurements.iter().zip(&est.matches).zip(&est.factors.beta_kept) {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            start + f.frame,
            f.keypoint,
            f.z.x,
            f.z.y,
            f.z.z,
            f.r.x,
            f.r.y,
            f.r.z,
            m.candidates.len(),
            sphericity(&f.winv),
            kept as u8,
            f.mahalanobis_sq(&post.knots[f.frame].pose, &t_tau)
        ));
    }
    match out {
        Some(p) => write_text(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate { config, out } => config.load().and_then(|cfg| {
            let out = out.unwrap_or_else(|| cfg.paths.data_dir.clone());
            simulate(&cfg, &out)
        }),
        Command::Train { config, sequences, out } => config.load().and_then(|cfg| {
            let out = out.unwrap_or_else(|| cfg.paths.output_dir.clone());
            train(&cfg, &sequences, &out)
        }),
        Command::Odometry {
            config,
            sequence,
            checkpoint,
            out,
            diagnostics,
        } => config
            .load()
            .and_then(|cfg| odometry(&cfg, &sequence, checkpoint.as_deref(), &out, diagnostics)),
        Command::Eval { est, gt, cov, out } => eval(&est, &gt, cov.as_deref(), out.as_deref()),
        Command::Gradcheck => match run_gradcheck() {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("error: gradient check failed");
                return ExitCode::from(4);
            }
            Err(e) => Err(e),
        },
        Command::Inspect {
            config,
            defaults,
            sequence,
            start,
            checkpoint,
            out,
        } => config.load().and_then(|cfg| {
            if defaults {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let seq = sequence.ok_or_else(|| Error::Config("inspect needs --defaults or --seq".into()))?;
            inspect(&cfg, &seq, start, checkpoint.as_deref(), out.as_deref())
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
