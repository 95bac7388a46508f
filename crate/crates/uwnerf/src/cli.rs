//! Command-line front end: scene generation, training, finetuning,
//! rendering, evaluation, and fly-through sequences.
//!
//! Every subcommand is a thin orchestration layer over the library — the
//! CLI owns paths, file formats and progress output, nothing numerical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use ndarray::Array3;

use crate::dataset::{load_scene, make_toy_scene, save_scene, SceneDataset, ToySceneConfig};
use crate::error::UwError;
use crate::eval::{
    evaluate_scene, render_at, render_view, save_png16, save_png8, sequence_cameras,
};
use crate::trainer::{checkpoint_config, TrainConfig, Trainer};
use crate::Result;

#[derive(Debug, Parser)]
#[command(
    name = "uwnerf",
    version,
    about = "Self-supervised underwater novel-view synthesis and restoration"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a small synthetic underwater scene with known degradation.
    MakeToy {
        /// Scene directory to create.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        views: usize,
        /// Image edge length; must be a multiple of 16.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train a model from scratch (or resume a saved run).
    Train {
        /// Scene directory.
        #[arg(long)]
        scene: PathBuf,
        /// JSON training config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints and logs.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rays_per_batch: Option<usize>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        #[arg(long)]
        lr_model: Option<f64>,
        /// Continue from OUT/checkpoint.ckpt exactly where it stopped;
        /// config flags are ignored in favor of the saved run.
        #[arg(long)]
        resume: bool,
        /// Accepted for interface compatibility: this build always reduces
        /// in a fixed order at f64 precision, so runs are deterministic
        /// with or without the flag.
        #[arg(long)]
        deterministic: bool,
        /// Print a progress line every N steps.
        #[arg(long, default_value_t = 25)]
        log_every: usize,
        /// Save the checkpoint every N steps (and always at the end).
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Adapt a pretrained checkpoint to one scene: same loop, shorter
    /// schedule, fresh optimizer state.
    Finetune {
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// JSON training config; defaults to the checkpoint's config with
        /// the standard finetuning schedule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rays_per_batch: Option<usize>,
        #[arg(long)]
        lr_backbone: Option<f64>,
        #[arg(long)]
        lr_model: Option<f64>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long, default_value_t = 25)]
        log_every: usize,
        #[arg(long, default_value_t = 1000)]
        checkpoint_every: usize,
    },
    /// Render one dataset view: restored image, self-reconstruction, and
    /// the component maps explaining it.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// View to render: an index or a view id.
        #[arg(long)]
        view: String,
        /// Output directory for the image set.
        #[arg(long)]
        out: PathBuf,
        /// Write the component maps as 16-bit PNGs instead of 8-bit.
        #[arg(long)]
        deep: bool,
    },
    /// Score held-out views and write a line-delimited report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Report file to write (one JSON line per view plus a summary).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated view indices; defaults to every 8th view.
        #[arg(long)]
        held_out: Option<String>,
        /// Directory of clean reference images named {view_id}.png;
        /// defaults to SCENE/clean when present.
        #[arg(long)]
        clean_dir: Option<PathBuf>,
    },
    /// Render a fly-through along the camera path.
    Sequence {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 30)]
        frames: usize,
        /// Output directory for the frame images.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Executes one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::MakeToy {
            out,
            views,
            size,
            seed,
        } => make_toy(&out, views, size, seed),
        Command::Train {
            scene,
            config,
            out,
            steps,
            seed,
            rays_per_batch,
            lr_backbone,
            lr_model,
            resume,
            deterministic: _,
            log_every,
            checkpoint_every,
        } => {
            let dataset = load_scene(&scene)?;
            let checkpoint = out.join("checkpoint.ckpt");
            let trainer = if resume && checkpoint.exists() {
                let t = Trainer::load(&checkpoint)?;
                eprintln!("resuming from step {}", t.step());
                t
            } else {
                let mut cfg = load_config(config.as_deref())?;
                apply_overrides(
                    &mut cfg,
                    steps,
                    seed,
                    rays_per_batch,
                    lr_backbone,
                    lr_model,
                );
                Trainer::new(cfg)?
            };
            run_training(trainer, &dataset, &out, log_every, checkpoint_every)
        }
        Command::Finetune {
            ckpt,
            scene,
            config,
            out,
            steps,
            seed,
            rays_per_batch,
            lr_backbone,
            lr_model,
            deterministic: _,
            log_every,
            checkpoint_every,
        } => {
            let dataset = load_scene(&scene)?;
            let mut cfg = match config {
                Some(path) => read_config_file(&path)?,
                None => TrainConfig::finetune_of(&checkpoint_config(&ckpt)?),
            };
            apply_overrides(
                &mut cfg,
                steps,
                seed,
                rays_per_batch,
                lr_backbone,
                lr_model,
            );
            let trainer = Trainer::with_params_from(&ckpt, cfg)?;
            run_training(trainer, &dataset, &out, log_every, checkpoint_every)
        }
        Command::Render {
            ckpt,
            scene,
            view,
            out,
            deep,
        } => {
            let dataset = load_scene(&scene)?;
            let trainer = Trainer::load(&ckpt)?;
            let index = resolve_view(&dataset, &view)?;
            let rendered = render_view(trainer.store(), trainer.config(), &dataset, index)?;
            create_dir(&out)?;
            save_png8(&out.join("restored.png"), &rendered.restored)?;
            save_png8(&out.join("composed.png"), &rendered.composed)?;
            let save_map = if deep { save_png16 } else { save_png8 };
            save_map(&out.join("direct.png"), &rendered.direct)?;
            save_map(&out.join("backscatter.png"), &rendered.backscatter)?;
            save_map(&out.join("light.png"), &rendered.light)?;
            eprintln!("wrote 5 maps to {}", out.display());
            Ok(())
        }
        Command::Eval {
            ckpt,
            scene,
            out,
            held_out,
            clean_dir,
        } => {
            let dataset = load_scene(&scene)?;
            let trainer = Trainer::load(&ckpt)?;
            let indices = match held_out {
                Some(spec) => parse_indices(&spec, dataset.images.len())?,
                None => (0..dataset.images.len()).step_by(8).collect(),
            };
            let clean_root = clean_dir.or_else(|| {
                let default = scene.join("clean");
                default.is_dir().then_some(default)
            });
            let mut clean = BTreeMap::new();
            if let Some(root) = clean_root {
                for &idx in &indices {
                    let path = root.join(crate::dataset::png_name(&dataset.view_ids[idx]));
                    if path.is_file() {
                        clean.insert(idx, load_image(&path)?);
                    }
                }
            }
            let scene_id = scene
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| "scene".into());
            let report = evaluate_scene(
                trainer.store(),
                trainer.config(),
                &dataset,
                &indices,
                &clean,
                &scene_id,
            )?;
            write_file(&out, report.to_jsonl()?.as_bytes())?;
            print!("{}", report.summary_table());
            Ok(())
        }
        Command::Sequence {
            ckpt,
            scene,
            frames,
            out,
        } => {
            let dataset = load_scene(&scene)?;
            let trainer = Trainer::load(&ckpt)?;
            let cameras = sequence_cameras(&dataset.cameras, frames)?;
            create_dir(&out)?;
            for (i, camera) in cameras.iter().enumerate() {
                let rendered =
                    render_at(trainer.store(), trainer.config(), &dataset, camera, None)?;
                save_png8(&out.join(format!("frame_{i:04}.png")), &rendered.restored)?;
            }
            eprintln!("wrote {} frames to {}", cameras.len(), out.display());
            Ok(())
        }
    }
}

fn make_toy(out: &Path, views: usize, size: usize, seed: u64) -> Result<()> {
    let config = ToySceneConfig {
        views,
        size,
        seed,
        ..Default::default()
    };
    let (dataset, truth) = make_toy_scene(&config)?;
    save_scene(out, &dataset)?;
    // Clean ground truth beside the degraded scene, for reference metrics.
    let clean_dir = out.join("clean");
    create_dir(&clean_dir)?;
    for (id, clean) in dataset.view_ids.iter().zip(&truth.clean) {
        save_png8(&clean_dir.join(crate::dataset::png_name(id)), clean)?;
    }
    eprintln!(
        "wrote {} views of {size}x{size} to {}",
        dataset.images.len(),
        out.display()
    );
    Ok(())
}

/// The shared train/finetune loop: JSONL loss log, periodic progress
/// lines and checkpoints, one final checkpoint at the step budget.
fn run_training(
    mut trainer: Trainer,
    dataset: &SceneDataset,
    out: &Path,
    log_every: usize,
    checkpoint_every: usize,
) -> Result<()> {
    create_dir(out)?;
    let config_path = out.join("config.json");
    let snapshot = serde_json::to_string_pretty(trainer.config())
        .map_err(|e| UwError::InvalidConfig(format!("config serialization: {e}")))?;
    write_file(&config_path, snapshot.as_bytes())?;

    let log_path = out.join("train.log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| UwError::io(log_path.display().to_string(), e))?;
    let checkpoint = out.join("checkpoint.ckpt");
    let total_steps = trainer.config().steps;
    if trainer.step() >= total_steps {
        eprintln!("run already complete at step {}", trainer.step());
        return Ok(());
    }
    while trainer.step() < total_steps {
        let step = trainer.step();
        let batch = trainer.next_batch(dataset)?;
        let report = trainer.train_step(dataset, &batch)?;
        let record = trainer.log_record(step, report);
        let line = serde_json::to_string(&record)
            .map_err(|e| UwError::InvalidConfig(format!("log serialization: {e}")))?;
        writeln!(log, "{line}").map_err(|e| UwError::io(log_path.display().to_string(), e))?;
        if log_every > 0 && (step + 1) % log_every == 0 {
            eprintln!(
                "step {:>6}/{total_steps}  total {:.6}  rec {:.6}",
                step + 1,
                report.total,
                report.rec
            );
        }
        if checkpoint_every > 0 && (step + 1) % checkpoint_every == 0 {
            trainer.save(&checkpoint)?;
        }
    }
    trainer.save(&checkpoint)?;
    eprintln!(
        "finished {total_steps} steps; checkpoint at {}",
        checkpoint.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => read_config_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn read_config_file(path: &Path) -> Result<TrainConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| UwError::io(path.display().to_string(), e))?;
    serde_json::from_str(&text)
        .map_err(|e| UwError::InvalidConfig(format!("{}: {e}", path.display())))
}

fn apply_overrides(
    config: &mut TrainConfig,
    steps: Option<usize>,
    seed: Option<u64>,
    rays_per_batch: Option<usize>,
    lr_backbone: Option<f64>,
    lr_model: Option<f64>,
) {
    if let Some(v) = steps {
        config.steps = v;
    }
    if let Some(v) = seed {
        config.seed = v;
    }
    if let Some(v) = rays_per_batch {
        config.rays_per_batch = v;
    }
    if let Some(v) = lr_backbone {
        config.lr_backbone = v;
    }
    if let Some(v) = lr_model {
        config.lr_model = v;
    }
}

/// Accepts either a numeric index or a view id.
fn resolve_view(dataset: &SceneDataset, spec: &str) -> Result<usize> {
    if let Ok(index) = spec.parse::<usize>() {
        if index < dataset.images.len() {
            return Ok(index);
        }
        return Err(UwError::InvalidConfig(format!(
            "view index {index} out of range ({} views)",
            dataset.images.len()
        )));
    }
    dataset
        .view_ids
        .iter()
        .position(|id| id == spec)
        .ok_or_else(|| UwError::InvalidConfig(format!("no view named '{spec}'")))
}

fn parse_indices(spec: &str, count: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in spec.split(',') {
        let token = part.trim();
        if token.is_empty() {
            continue;
        }
        let index: usize = token
            .parse()
            .map_err(|_| UwError::InvalidConfig(format!("'{token}' is not a view index")))?;
        if index >= count {
            return Err(UwError::InvalidConfig(format!(
                "view index {index} out of range ({count} views)"
            )));
        }
        out.push(index);
    }
    if out.is_empty() {
        return Err(UwError::InvalidConfig(
            "no view indices in --held-out".into(),
        ));
    }
    Ok(out)
}

fn load_image(path: &Path) -> Result<Array3<f64>> {
    let rgb = image::open(path)
        .map_err(|e| UwError::image(path.display().to_string(), e))?
        .to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(i, j, c)| rgb.get_pixel(j as u32, i as u32)[c] as f64 / 255.0,
    ))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| UwError::io(path.display().to_string(), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| UwError::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, EncoderDepth};
    use crate::lightnet::VaeConfig;
    use crate::renderer::TransformerConfig;
    use tempfile::tempdir;

    fn tiny_config_json() -> String {
        let config = TrainConfig {
            steps: 3,
            rays_per_batch: 8,
            k_range: [1, 2],
            n_range: [2, 3],
            seed: 5,
            transformer: TransformerConfig {
                dim: 8,
                view_heads: 1,
                ray_heads: 2,
                ff_hidden: 16,
                depth: 1,
                samples_per_ray: 4,
                patch_size: 2,
                position_encoding: true,
            },
            backbone: BackboneConfig {
                encoder_depth: EncoderDepth::Tiny,
                feature_width: 5,
            },
            vae: VaeConfig {
                encoder_widths: [2, 3, 4, 5],
                latent_dim: 6,
                decoder_widths: [5, 4, 3],
            },
            ..Default::default()
        };
        serde_json::to_string(&config).unwrap()
    }

    fn run_args(args: &[&str]) -> Result<()> {
        run(Cli::try_parse_from(args).expect("argument parse"))
    }

    #[test]
    fn index_parsing() {
        assert_eq!(parse_indices("0, 2,3", 5).unwrap(), vec![0, 2, 3]);
        assert!(parse_indices("9", 5).is_err());
        assert!(parse_indices("x", 5).is_err());
        assert!(parse_indices("", 5).is_err());
    }

    #[test]
    fn full_pipeline_smoke() {
        let dir = tempdir().unwrap();
        let scene = dir.path().join("scene");
        let out = dir.path().join("run");
        let scene_s = scene.to_str().unwrap();
        let out_s = out.to_str().unwrap();

        run_args(&[
            "uwnerf", "make-toy", "--out", scene_s, "--views", "5", "--size", "32", "--seed", "3",
        ])
        .unwrap();
        assert!(scene.join("scene.cfg").is_file());
        assert!(scene.join("clean").join("view_000.png").is_file());

        let config_path = dir.path().join("tiny.json");
        std::fs::write(&config_path, tiny_config_json()).unwrap();
        run_args(&[
            "uwnerf",
            "train",
            "--scene",
            scene_s,
            "--config",
            config_path.to_str().unwrap(),
            "--out",
            out_s,
            "--log-every",
            "1",
        ])
        .unwrap();
        let ckpt = out.join("checkpoint.ckpt");
        assert!(ckpt.is_file());
        let log = std::fs::read_to_string(out.join("train.log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 3, "one log line per step");

        // Resume on a finished run is a no-op, not an error.
        run_args(&[
            "uwnerf", "train", "--scene", scene_s, "--out", out_s, "--resume",
        ])
        .unwrap();

        let ckpt_s = ckpt.to_str().unwrap();
        let render_dir = dir.path().join("render");
        run_args(&[
            "uwnerf",
            "render",
            "--ckpt",
            ckpt_s,
            "--scene",
            scene_s,
            "--view",
            "view_001.png",
            "--out",
            render_dir.to_str().unwrap(),
            "--deep",
        ])
        .unwrap();
        for name in ["restored", "composed", "direct", "backscatter", "light"] {
            assert!(render_dir.join(format!("{name}.png")).is_file(), "{name}");
        }

        let report_path = dir.path().join("report.jsonl");
        run_args(&[
            "uwnerf",
            "eval",
            "--ckpt",
            ckpt_s,
            "--scene",
            scene_s,
            "--out",
            report_path.to_str().unwrap(),
            "--held-out",
            "0,1",
        ])
        .unwrap();
        let report = std::fs::read_to_string(&report_path).unwrap();
        assert_eq!(report.lines().count(), 3);
        assert!(report.contains("\"psnr\""), "clean refs found and scored");

        let seq_dir = dir.path().join("seq");
        run_args(&[
            "uwnerf",
            "sequence",
            "--ckpt",
            ckpt_s,
            "--scene",
            scene_s,
            "--frames",
            "2",
            "--out",
            seq_dir.to_str().unwrap(),
        ])
        .unwrap();
        assert!(seq_dir.join("frame_0000.png").is_file());
        assert!(seq_dir.join("frame_0001.png").is_file());

        // Finetune from the pretrained checkpoint with the default
        // derived schedule, cut down to one step.
        let ft_out = dir.path().join("ft");
        run_args(&[
            "uwnerf",
            "finetune",
            "--ckpt",
            ckpt_s,
            "--scene",
            scene_s,
            "--out",
            ft_out.to_str().unwrap(),
            "--steps",
            "1",
            "--rays-per-batch",
            "8",
        ])
        .unwrap();
        assert!(ft_out.join("checkpoint.ckpt").is_file());
    }
}
