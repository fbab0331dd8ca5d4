//! `tpdr`: scene generation, training, rendering and diagnostics.
//!
//! Failures print `{"error": <code>, "message": <text>}` on stderr and exit
//! with the code's number from [`exit_code`].

mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "tpdr", version, about = "Deformable tri-plane radiance fields on synthetic heads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by commands that build or run a model.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON configuration; missing fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Square output resolution, overriding the configuration.
    #[arg(long)]
    pub resolution: Option<usize>,
    /// Samples per ray, overriding the configuration.
    #[arg(long)]
    pub samples_per_ray: Option<usize>,
    /// Print the resolved configuration as JSON and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum Kind {
    BlobField,
    TexturedHead,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic scene: target images, cameras and a manifest.
    GenScene {
        #[arg(long, value_enum, default_value = "blob-field")]
        kind: Kind,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the toy morphable face model as JSON.
    GenModel {
        #[arg(long)]
        out: PathBuf,
        /// Generator seed of the face bases.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit a model to a scene directory.
    Train {
        scene: PathBuf,
        /// Checkpoint path; the sidecar and log go next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render a checkpoint from one camera.
    Render {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Camera JSON; defaults to the frontal camera of the model's scene.
        #[arg(long)]
        camera: Option<PathBuf>,
        /// Face coefficients JSON whose expression drives the deformation.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        /// Also write the accumulated opacity as PGM.
        #[arg(long)]
        alpha: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Render a yaw sweep about the head centre.
    Orbit {
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = -30.0, allow_negative_numbers = true)]
        yaw_min: f64,
        #[arg(long, default_value_t = 30.0, allow_negative_numbers = true)]
        yaw_max: f64,
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Pitch in degrees, fixed over the sweep.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        pitch: f64,
        #[arg(long)]
        coeffs: Option<PathBuf>,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Rasterize the NCC code of a face under given coefficients.
    Secc {
        #[arg(long)]
        coeffs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Face model JSON; defaults to the built-in toy head.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = tpdr_core::raster::SECC_SIZE)]
        resolution: usize,
    },
    /// Finite-difference check of the rendering loss gradients.
    Gradcheck {
        #[arg(default_value = "all")]
        component: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Masked PSNR and SSIM between two images.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Mask PGM; pixels above one half count. Defaults to every pixel.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

pub fn exit_code(code: &str) -> u8 {
    match code {
        "usage" => 2,
        "io" => 3,
        "parse" => 4,
        "format" => 5,
        "invalid_argument" => 6,
        "shape_mismatch" => 7,
        "geometry" => 8,
        "non_finite" => 9,
        "diverged" => 10,
        "missing_param" => 11,
        "gradcheck_failed" => 12,
        _ => 1,
    }
}

fn fail(code: &str, message: String) -> ExitCode {
    let body = serde_json::json!({ "error": code, "message": message });
    eprintln!("{body}");
    ExitCode::from(exit_code(code))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(std::io::stdout().lock(), "{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or_default();
            return fail("usage", first.trim_start_matches("error: ").to_string());
        }
    };
    let result = match cli.command {
        Command::GenScene { kind, out, common } => commands::gen_scene(kind, &out, &common),
        Command::GenModel { out, seed } => commands::gen_model(&out, seed),
        Command::Train { scene, out, common } => commands::train(&scene, &out, &common),
        Command::Render {
            checkpoint,
            out,
            camera,
            coeffs,
            alpha,
            resolution,
        } => commands::render(&checkpoint, &out, camera.as_deref(), coeffs.as_deref(), alpha.as_deref(), resolution),
        Command::Orbit {
            checkpoint,
            out,
            yaw_min,
            yaw_max,
            steps,
            pitch,
            coeffs,
            resolution,
        } => commands::orbit(&checkpoint, &out, (yaw_min, yaw_max, steps), pitch, coeffs.as_deref(), resolution),
        Command::Secc {
            coeffs,
            out,
            model,
            resolution,
        } => commands::secc(&coeffs, &out, model.as_deref(), resolution),
        Command::Gradcheck { component, seed } => commands::gradcheck(&component, seed),
        Command::Metrics { a, b, mask } => commands::metrics(&a, &b, mask.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::Failure::Core(e)) => fail(e.code(), e.to_string()),
        Err(commands::Failure::Other { code, message }) => fail(code, message),
    }
}
