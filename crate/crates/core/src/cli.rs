//! Command-line front end. Exit status: 0 success, 1 usage error, 2 runtime failure.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::checkpoint;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, Component};
use crate::metrics::eval_sequence;
use crate::sampling::Dataset;
use crate::synth::{generate_scene, write_dataset, InitNoise, Preset, RigConfig};
use crate::trainer::Trainer;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "dynsplat", about = "Dynamic Gaussian splatting with control nodes and a multi-frame deformation network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (static | oscillator | two-body | articulated).
    Synth {
        preset: String,
        outdir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Square image size in pixels.
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Train on a dataset; writes config.effective.txt, train.log and ckpt into OUTDIR.
    Train {
        config: PathBuf,
        dataset: PathBuf,
        outdir: PathBuf,
        /// Continue from a checkpoint written with the same effective configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many further iterations (the checkpoint stays resumable).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Render a checkpoint from one of its cameras over `start:end:count` normalized times.
    Render { checkpoint: PathBuf, camera: String, t_range: String, outdir: PathBuf },
    /// Evaluate a checkpoint on every frame of one dataset view.
    Eval { checkpoint: PathBuf, dataset: PathBuf, view: String },
    /// Finite-difference gradient check of one component, or `all`.
    GradCheck {
        component: String,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let help = matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion);
            let _ = write!(out, "{}", e.render());
            return if help { EXIT_OK } else { EXIT_USAGE };
        }
    };
    match dispatch(cli.command, out) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            let _ = writeln!(out, "error: {msg}\n\n{}", usage());
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(out, "error: {e}");
            EXIT_RUNTIME
        }
    }
}

pub fn usage() -> String {
    use clap::CommandFactory;
    Cli::command().render_usage().to_string()
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    match cmd {
        Command::Synth { preset, outdir, seed, frames, resolution } => {
            let preset: Preset = preset.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
            if frames < 2 || resolution < 8 {
                return Err(Failure::Usage("need at least 2 frames and 8 px resolution".into()));
            }
            let base = RigConfig::default();
            // keep the field of view of the default rig at any resolution
            let focal = base.focal * resolution as f64 / base.resolution[0] as f64;
            let rig = RigConfig { resolution: [resolution, resolution], focal, frame_count: frames, ..base };
            let script = generate_scene(preset, seed, &rig)?;
            let m = write_dataset(&script, &outdir, seed, &InitNoise::default())?;
            let _ = writeln!(out, "wrote {} views x {} frames to {}", m.views.len(), m.frame_count, outdir.display());
            Ok(EXIT_OK)
        }
        Command::Train { config, dataset, outdir, resume, stop_after } => train(&config, &dataset, &outdir, resume.as_deref(), stop_after, out),
        Command::Render { checkpoint: ckpt, camera, t_range, outdir } => {
            let times = parse_t_range(&t_range).map_err(Failure::Usage)?;
            let mut t = checkpoint::load(&ckpt)?;
            let cam = t.cameras.iter().find(|c| c.id == camera).cloned().ok_or_else(|| {
                let ids: Vec<&str> = t.cameras.iter().map(|c| c.id.as_str()).collect();
                Failure::Usage(format!("unknown camera {camera:?}; checkpoint has {}", ids.join(", ")))
            })?;
            ensure_skin(&mut t)?;
            std::fs::create_dir_all(&outdir).map_err(|e| Error::io(&outdir, e))?;
            let frames = t.model.render_sequence(&cam, &times, t.config.window())?;
            for (i, img) in frames.iter().enumerate() {
                img.write_png(&outdir.join(format!("{i:04}.png")))?;
                img.save_float_dump(&outdir.join(format!("{i:04}.dsfd")))?;
            }
            let _ = writeln!(out, "rendered {} frames from {} into {}", frames.len(), camera, outdir.display());
            Ok(EXIT_OK)
        }
        Command::Eval { checkpoint: ckpt, dataset, view } => {
            let mut t = checkpoint::load(&ckpt)?;
            let data = Dataset::load(&dataset)?;
            let v = data.manifest.view_index(&view).ok_or_else(|| Failure::Usage(format!("dataset has no view {view:?}")))?;
            ensure_skin(&mut t)?;
            let rec = &data.manifest.views[v];
            let times: Vec<f64> = rec.frames.iter().map(|f| f.time).collect();
            let report = eval_sequence(&t.model, &rec.camera, &times, &data.images[v], t.config.window())?;
            let _ = write!(out, "{report}");
            Ok(EXIT_OK)
        }
        Command::GradCheck { component, seeds, first_seed } => {
            let comps: Vec<Component> = if component == "all" {
                Component::ALL.to_vec()
            } else {
                vec![component.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?]
            };
            if seeds == 0 {
                return Err(Failure::Usage("--seeds must be positive".into()));
            }
            let mut ok = true;
            for c in comps {
                let r = grad_check(c, first_seed, seeds)?;
                let _ = write!(out, "{r}");
                ok &= r.passed();
            }
            Ok(if ok { EXIT_OK } else { EXIT_RUNTIME })
        }
    }
}

fn ensure_skin(t: &mut Trainer) -> Result<()> {
    if !t.nodes_initialized() {
        return Err(Error::Contract("checkpoint was taken before control nodes were placed".into()));
    }
    if t.model.skin.is_none() {
        t.model.rebuild_skinning(t.main_done as u64)?;
    }
    Ok(())
}

/// `start:end:count` with both ends included.
pub fn parse_t_range(s: &str) -> std::result::Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || format!("bad time range {s:?}; expected start:end:count");
    if parts.len() != 3 {
        return Err(bad());
    }
    let a: f64 = parts[0].parse().map_err(|_| bad())?;
    let b: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n == 0 || !a.is_finite() || !b.is_finite() {
        return Err(bad());
    }
    Ok(if n == 1 { vec![a] } else { (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect() })
}

fn train(config: &Path, dataset: &Path, outdir: &Path, resume: Option<&Path>, stop_after: Option<usize>, out: &mut dyn Write) -> std::result::Result<i32, Failure> {
    if !config.is_file() {
        return Err(Failure::Usage(format!("config file {} not found", config.display())));
    }
    let cfg = TrainConfig::load(config)?;
    let data = Dataset::load(dataset)?;
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let snapshot = outdir.join("config.effective.txt");
    std::fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;
    let mut trainer = match resume {
        Some(p) => {
            let t = checkpoint::load(p)?;
            if t.config.hash() != cfg.hash() {
                return Err(Failure::Runtime(Error::Config("checkpoint was written with a different effective configuration".into())));
            }
            t
        }
        None => Trainer::new(cfg, &data)?,
    };
    let log_path = outdir.join("train.log");
    let mut log = OpenOptions::new().create(true).append(resume.is_some()).write(true).truncate(resume.is_none()).open(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = outdir.join("ckpt");
    let result = trainer.run(&data, stop_after, |t, rec| {
        let c = &t.config;
        let last = t.finished();
        let due = rec.iteration % c.log_every == 0 || rec.iteration == 1 || last || rec.skipped;
        if due {
            writeln!(log, "{rec}").map_err(|e| Error::io(&log_path, e))?;
            log::info!("{rec}");
        }
        if c.checkpoint_every > 0 && rec.stage == crate::trainer::Stage::Main && rec.iteration % c.checkpoint_every == 0 {
            checkpoint::save(t, &ckpt)?;
        }
        Ok(())
    });
    match result {
        Ok(()) => {
            checkpoint::save(&trainer, &ckpt)?;
            let _ = writeln!(
                out,
                "trained warmup={} main={} nodes={} -> {}",
                trainer.warmup_done,
                trainer.main_done,
                trainer.model.nodes.len(),
                ckpt.display()
            );
            Ok(EXIT_OK)
        }
        Err(e @ Error::Diverged(_)) => {
            // skipped steps never touch parameters, so the current state is the last finite one
            let saved = outdir.join("ckpt.last_finite");
            checkpoint::save(&trainer, &saved)?;
            let _ = writeln!(out, "last finite state saved to {}", saved.display());
            Err(Failure::Runtime(e))
        }
        Err(e) => Err(Failure::Runtime(e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> (i32, String) {
        let mut buf = Vec::new();
        let code = run(std::iter::once("dynsplat").chain(args.iter().copied()), &mut buf);
        (code, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn missing_config_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path().to_str().unwrap();
        let (code, text) = run_args(&["train", &format!("{d}/nope.cfg"), d, &format!("{d}/run")]);
        assert_eq!(code, EXIT_USAGE);
        assert!(text.contains("Usage"), "{text}");
    }

    #[test]
    fn bad_arguments_are_usage_errors() {
        assert_eq!(run_args(&[]).0, EXIT_USAGE);
        assert_eq!(run_args(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["grad-check", "bogus"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["synth", "nonsense", "/tmp/x"]).0, EXIT_USAGE);
        assert_eq!(run_args(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn grad_check_renderer_exits_zero() {
        let (code, text) = run_args(&["grad-check", "renderer", "--seeds", "2"]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert!(text.contains("PASS"));
    }

    #[test]
    fn t_range_parsing() {
        assert_eq!(parse_t_range("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(parse_t_range("0.2:0.9:1").unwrap(), vec![0.2]);
        assert!(parse_t_range("0:1").is_err());
        assert!(parse_t_range("0:1:0").is_err());
    }

    #[test]
    fn synth_train_eval_render_pipeline() {
        let dir = tempfile::tempdir().unwrap();
        let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
        assert_eq!(run_args(&["synth", "static", &p("data"), "--frames", "6", "--resolution", "16"]).0, EXIT_OK);
        std::fs::write(
            p("cfg.txt"),
            "warmup_iters = 2\nmain_iters = 3\nnodes = 6\nwindow = 3\nnet_layers = 2\nnet_width = 8\nattn_layers = 1\nattn_heads = 2\nlog_every = 1\ncheckpoint_every = 2\n",
        )
        .unwrap();
        let (code, text) = run_args(&["train", &p("cfg.txt"), &p("data"), &p("run")]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert!(dir.path().join("run/config.effective.txt").is_file());
        let log = std::fs::read_to_string(p("run/train.log")).unwrap();
        assert_eq!(log.lines().count(), 5);
        let (code, text) = run_args(&["eval", &p("run/ckpt"), &p("data"), "view4"]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert!(text.contains("network_forwards=2"), "{text}");
        let (code, text) = run_args(&["render", &p("run/ckpt"), "view0", "0:1:4", &p("frames")]);
        assert_eq!(code, EXIT_OK, "{text}");
        assert!(dir.path().join("frames/0003.png").is_file());
        assert_eq!(run_args(&["render", &p("run/ckpt"), "nope", "0:1:4", &p("frames")]).0, EXIT_USAGE);
    }
}
