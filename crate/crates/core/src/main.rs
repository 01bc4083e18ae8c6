use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use particle_slm::error::{Error, Result};
use particle_slm::experiment::{self, ExperimentConfig};
use particle_slm::grid::Grid;
use particle_slm::tv::{self, ReconSidecar};
use particle_slm::{measurement, pgm, resolution, rng, slm};

#[derive(Parser)]
#[command(
    name = "particle-slm",
    version,
    about = "Single-pixel imaging with a random particle modulator"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (flat TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out` in the config)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render particle frames and write thresholded masks
    MaskGen {
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Simulate a measurement set for the configured scene
    Acquire,
    /// Reconstruct an image from a stored measurement set
    Reconstruct {
        #[arg(long)]
        set: PathBuf,
    },
    /// Radial spectrum, cutoff and (optionally) quality of an image
    Analyze {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    SweepThreshold,
    SweepSamples,
    SweepSize,
    /// Repeated runs with derived seeds
    Repeat {
        /// Defaults to `n_runs` from the config
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Acquire, reconstruct and analyse in one go
    Full,
}

struct Ctx {
    common: Common,
}

impl Ctx {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.common.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// Config with CLI overrides applied; a seed must come from one of them.
    fn config(&self, required: bool) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.common.config, self.common.seed) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(seed)) => ExperimentConfig::with_seed(seed),
            (None, None) if !required => ExperimentConfig::with_seed(0),
            (None, None) => {
                return Err(Error::Config(
                    "this command needs --config or --seed".into(),
                ))
            }
        };
        if let Some(seed) = self.common.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.common.out {
            cfg.out = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ctx = Ctx { common: cli.common };
    match run(&ctx, cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Loads a graymap; a reconstruction sidecar, if present, restores the
/// original value scale.
fn read_image(path: &Path) -> Result<Grid> {
    let map = pgm::read(path)?;
    let side = path.with_extension("toml");
    let (offset, scale) = if side.is_file() {
        let text = fs::read_to_string(&side)?;
        let s: ReconSidecar = toml::from_str(&text).map_err(|e| Error::Format {
            path: side.clone(),
            msg: e.to_string(),
        })?;
        (s.offset, s.scale)
    } else {
        (0.0, 1.0)
    };
    let values = map
        .pixels
        .iter()
        .map(|&p| offset + scale * p as f64)
        .collect();
    Grid::from_vec(map.width, map.height, values)
}

/// Records the effective config next to a command's outputs.
fn write_run_manifest(dir: &Path, name: &str, command: &str, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), format!("# {command}\n{}", cfg.to_toml()))?;
    Ok(())
}

fn not_converged(r: &tv::ReconResult, rel_tol: f64) -> Error {
    Error::NotConverged {
        iters: r.outer_iters_used,
        rel_tol,
        last: r.final_rel_change,
    }
}

fn run(ctx: &Ctx, command: Command) -> Result<u8> {
    match command {
        Command::MaskGen { count } => {
            let cfg = ctx.config(true)?;
            let spec = cfg.particle_spec();
            write_run_manifest(
                &cfg.out,
                "manifest.toml",
                &format!("mask-gen --count {count}"),
                &cfg,
            )?;
            for i in 0..count {
                let seed = measurement::record_seed(cfg.seed, i);
                let placement = slm::place_particles(
                    &spec,
                    cfg.canvas_px,
                    cfg.canvas_px,
                    rng::derive(seed, rng::stream::PLACEMENT),
                )?;
                let frame = slm::render_frame(&placement, &spec);
                let mask = slm::threshold_frame(&frame, cfg.threshold)?;
                pgm::write(
                    &cfg.out.join(format!("frame_{i:06}.pgm")),
                    &frame.to_graymap(),
                )?;
                slm::save_mask(
                    &cfg.out.join(measurement::mask_file_name(i)),
                    &mask,
                    &slm::MaskSidecar::new(&spec, seed, cfg.threshold),
                )?;
                ctx.say(format!(
                    "mask {i}: opaque fraction {:.3}",
                    slm::opaque_fraction(&mask)
                ));
            }
            Ok(0)
        }
        Command::Acquire => {
            let cfg = ctx.config(true)?;
            let scene = cfg.build_scene()?;
            let set = measurement::acquire_set(
                &scene,
                &cfg.particle_spec(),
                cfg.fixed_samples,
                cfg.threshold,
                cfg.noise(),
                cfg.seed,
            )?;
            measurement::save_set(&set, &cfg.out)?;
            write_run_manifest(&cfg.out, "config.toml", "acquire", &cfg)?;
            ctx.say(format!(
                "{} records written to {}",
                set.len(),
                cfg.out.display()
            ));
            Ok(0)
        }
        Command::Reconstruct { set } => {
            let cfg = ctx.config(false)?;
            let data = measurement::load_set(&set)?;
            let solver = cfg.solver();
            let result = tv::solve_tv(&data, &solver)?;
            write_run_manifest(
                &cfg.out,
                "manifest.toml",
                &format!("reconstruct --set {}", set.display()),
                &cfg,
            )?;
            tv::save_recon(&result, &cfg.out.join("recon.pgm"))?;
            ctx.say(format!(
                "{} iterations, rel change {:.3e}, residual {:.3e}",
                result.outer_iters_used, result.final_rel_change, result.data_residual
            ));
            if !result.converged {
                let e = not_converged(&result, solver.rel_tol);
                eprintln!("warning: {e}");
                return Ok(e.exit_code() as u8);
            }
            Ok(0)
        }
        Command::Analyze { image, reference } => {
            let cfg = ctx.config(false)?;
            let img = read_image(&image)?;
            let spectrum = resolution::radial_spectrum(&img)?;
            let cutoff = resolution::cutoff_slope_with_margin(&spectrum, cfg.floor_margin).ok();
            write_run_manifest(
                &cfg.out,
                "manifest.toml",
                &format!("analyze --image {}", image.display()),
                &cfg,
            )?;
            resolution::write_spectrum_csv(
                &cfg.out.join("spectrum.csv"),
                &spectrum,
                None,
                cutoff.as_ref(),
            )?;
            match &cutoff {
                Some(c) => ctx.say(format!(
                    "slope {:.4e}, cutoff radius {:.3}",
                    c.slope, c.cutoff_radius
                )),
                None => ctx.say("no cutoff: spectrum has no steep initial segment"),
            }
            if let Some(reference) = reference {
                let q = resolution::quality(&read_image(&reference)?, &img)?;
                fs::write(
                    cfg.out.join("quality.toml"),
                    format!(
                        "rel_l2_error = {:?}\npsnr_db = {:?}\ngain = {:?}\noffset = {:?}\n",
                        q.rel_l2_error, q.psnr_db, q.gain, q.offset
                    ),
                )?;
                ctx.say(format!(
                    "rel_l2_error {:.4}, psnr {:.2} dB",
                    q.rel_l2_error, q.psnr_db
                ));
            }
            Ok(0)
        }
        Command::SweepThreshold => {
            let cfg = ctx.config(true)?;
            let cells = experiment::run_threshold_sweep(&cfg, Some(&cfg.out))?;
            for c in &cells {
                match &c.outcome {
                    Ok(o) => ctx.say(format!(
                        "{} t={}: err {:.4}",
                        c.key.shape.name(),
                        c.key.threshold,
                        o.quality.rel_l2_error
                    )),
                    Err(e) => ctx.say(format!(
                        "{} t={}: failed: {e}",
                        c.key.shape.name(),
                        c.key.threshold
                    )),
                }
            }
            Ok(0)
        }
        Command::SweepSamples => {
            let cfg = ctx.config(true)?;
            for c in experiment::run_sample_sweep(&cfg, Some(&cfg.out))? {
                match &c.outcome {
                    Ok(o) => ctx.say(format!("M={}: err {:.4}", c.key, o.quality.rel_l2_error)),
                    Err(e) => ctx.say(format!("M={}: failed: {e}", c.key)),
                }
            }
            Ok(0)
        }
        Command::SweepSize => {
            let cfg = ctx.config(true)?;
            for c in experiment::run_particle_size_sweep(&cfg, Some(&cfg.out))? {
                match &c.outcome {
                    Ok(o) => ctx.say(format!(
                        "d={}: cutoff {}",
                        c.key,
                        o.cutoff
                            .as_ref()
                            .map_or("n/a".to_string(), |c| format!("{:.3}", c.cutoff_radius))
                    )),
                    Err(e) => ctx.say(format!("d={}: failed: {e}", c.key)),
                }
            }
            Ok(0)
        }
        Command::Repeat { runs } => {
            let cfg = ctx.config(true)?;
            let rep =
                experiment::run_repeatability(&cfg, runs.unwrap_or(cfg.n_runs), Some(&cfg.out))?;
            ctx.say(format!(
                "{:.1}% of bins within 2 std",
                100.0 * rep.fraction_within_2std
            ));
            Ok(0)
        }
        Command::Full => {
            let cfg = ctx.config(true)?;
            let run = experiment::run_full(&cfg, Some(&cfg.out))?;
            let o = &run.outcome;
            ctx.say(format!(
                "err {:.4}, psnr {:.2} dB, {} iterations",
                o.quality.rel_l2_error, o.quality.psnr_db, o.recon.outer_iters_used
            ));
            if !o.recon.converged {
                let e = not_converged(&o.recon, cfg.rel_tol);
                eprintln!("warning: {e}");
                return Ok(e.exit_code() as u8);
            }
            Ok(0)
        }
    }
}
