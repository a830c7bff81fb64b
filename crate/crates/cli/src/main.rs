//! `roipose`: synthetic scenes, normalization round trips, pose refinement,
//! ADD/ADD-S evaluation and the oracle check suites.
//!
//! Exit codes: 0 success, 1 runtime or check failure, 2 usage error.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use roipose_core::check::Suite;
use roipose_core::loss::LossMode;
use roipose_core::metrics::DEFAULT_MAX_THRESHOLD;
use roipose_core::synth::MAX_JITTER;

#[derive(Parser)]
#[command(name = "roipose", version, about = "RoI-normalized 6D pose toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a seeded synthetic scene and write it as JSON.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        count: usize,
        /// Built-in model (cube, box, icosahedron) or a .ply / .json model file.
        #[arg(long, default_value = "cube")]
        model: String,
        /// RoI jitter as a fraction of the amodal box size, in [0, 0.3].
        #[arg(long, default_value_t = 0.1, value_parser = parse_jitter)]
        jitter: f64,
        #[arg(long, default_value_t = 2.0)]
        depth_min: f64,
        #[arg(long, default_value_t = 8.0)]
        depth_max: f64,
        /// Camera intrinsics fx fy px py.
        #[arg(long, num_args = 4, value_names = ["FX", "FY", "PX", "PY"], default_values_t = [500.0, 500.0, 320.0, 240.0])]
        camera: Vec<f64>,
        /// Image width and height in pixels.
        #[arg(long, num_args = 2, value_names = ["W", "H"], default_values_t = [640.0, 480.0])]
        image: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Normalize and recover every instance of a scene; fail above --tol.
    Roundtrip {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1e-9)]
        tol: f64,
        /// Optional per-instance JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturb each ground-truth pose and refine it back with the coordinate loss.
    Refine {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        rot_deg: f64,
        #[arg(long, default_value_t = 5.0)]
        depth_pct: f64,
        /// coords3d or coords2d.
        #[arg(long, default_value = "coords3d")]
        mode: LossMode,
        #[arg(long, default_value_t = 500)]
        iters: usize,
        /// Seed of the perturbation stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ADD / ADD-S per instance plus AUC summary rows, as CSV.
    Eval {
        /// Estimated poses (a scene or refine report).
        #[arg(long)]
        est: PathBuf,
        /// Ground-truth poses (a scene).
        #[arg(long)]
        gt: PathBuf,
        /// Model override; defaults to the model stored in the ground-truth file.
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_THRESHOLD)]
        max_threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle suites and print the max error of every check.
    Check {
        /// attention, gradients, homography or all.
        #[arg(long, default_value = "all")]
        suite: Suite,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Optional JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Adds this value to every observed error (harness self-test).
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_fault: f64,
    },
}

fn parse_jitter(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=MAX_JITTER).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must lie in [0, {MAX_JITTER}]"))
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Synth { seed, count, model, jitter, depth_min, depth_max, camera, image, out } => {
            commands::synth(&commands::SynthArgs {
                seed,
                count,
                model,
                jitter,
                depth_min,
                depth_max,
                camera: [camera[0], camera[1], camera[2], camera[3]],
                image: [image[0], image[1]],
                out,
            })?;
            Ok(true)
        }
        Command::Roundtrip { scene, tol, out } => commands::roundtrip(&scene, tol, out.as_ref()),
        Command::Refine { scene, rot_deg, depth_pct, mode, iters, seed, out } => {
            commands::refine(&commands::RefineArgs { scene, rot_deg, depth_pct, mode, iters, seed, out })?;
            Ok(true)
        }
        Command::Eval { est, gt, model, max_threshold, out } => {
            commands::eval(&commands::EvalArgs { est, gt, model, max_threshold, out })?;
            Ok(true)
        }
        Command::Check { suite, seed, out, inject_fault } => {
            commands::check(suite, seed, inject_fault, out.as_ref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
