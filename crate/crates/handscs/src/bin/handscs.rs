//! Batch driver: dataset generation, training, evaluation, rendering,
//! benchmarks, and inspection dumps. The library's `examples/` directory
//! shows the same capabilities as code.

use clap::{Args, Parser, Subcommand};
use handscs::config::{Precision, RunConfig};
use handscs::data::{
    generate_scene, manifest_path, render_dataset, save_png_rgb, DatasetManifest, Split,
};
use handscs::error::Error;
use handscs::eval::{bench_renderer, evaluate};
use handscs::renderer::Camera;
use handscs::scs::{generate_dynamic_bones, structural_coordinates, BoneSource, StructuralBasis};
use handscs::skeleton::{
    build_static_topology, forward_kinematics, Pose, SkeletonDescription, SkeletonModel,
};
use handscs::train::{render_pose, train_dispatch, with_thread_pool, Model, Trainer};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "handscs", version, about = "Structure-guided Gaussian-splat hand avatars")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path overrides, e.g. --set ablation.no_intra_pose=true
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut config =
            if let Some(path) = &self.config { RunConfig::load(path)? } else { RunConfig::default() };
        for spec in &self.overrides {
            config.apply_override(spec)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-view dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Override the scene seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model on a generated dataset.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory or manifest path.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Force deterministic single-thread execution.
        #[arg(long)]
        deterministic: bool,
    },
    /// Evaluate a checkpoint on one dataset split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// train | novel-pose | novel-view
        #[arg(long, default_value = "novel-pose")]
        split: String,
        /// Write per-frame metrics CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render one pose from one camera.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pose: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure forward rendering throughput.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 256)]
        resolution: usize,
        #[arg(long, default_value_t = 50)]
        count: usize,
    },
    /// Structural-coordinate-space inspection.
    Scs {
        #[command(subcommand)]
        command: ScsCommand,
    },
    /// Skeleton definition tools.
    Skeleton {
        #[command(subcommand)]
        command: SkeletonCommand,
    },
    /// Export the Gaussian cloud of a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write an ASCII point-cloud file here.
        #[arg(long)]
        ply: PathBuf,
    },
}

#[derive(Subcommand)]
enum ScsCommand {
    /// Emit basis segments and per-Gaussian descriptors for a pose.
    Dump {
        #[arg(long)]
        pose: PathBuf,
        /// Use a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum SkeletonCommand {
    /// Emit the skeleton definition as JSON.
    Dump {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a dumped skeleton definition against the invariants.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_pose(path: &PathBuf) -> Result<Pose<f64>, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pose: Pose<f64> = serde_json::from_str(&text)?;
    pose.validate()?;
    Ok(pose)
}

fn model_from_checkpoint(path: &PathBuf) -> Result<Model<f64>, Error> {
    Ok(handscs::checkpoint::load::<f64>(path)?.model)
}

fn write_or_print(out: &Option<PathBuf>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(|e| Error::io(path, e)),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out, seed } => {
            let mut config = config.resolve()?;
            if let Some(seed) = seed {
                config.scene.seed = seed;
            }
            let scene = generate_scene::<f32>(&config.scene)?;
            let manifest = render_dataset(&scene, &out)?;
            println!(
                "wrote {} records ({} cameras x {} frames) to {}",
                manifest.records.len(),
                scene.cameras.len(),
                config.scene.frames,
                out.display()
            );
            println!(
                "self-contact fraction of the trajectory: {:.2}",
                scene.self_contact_fraction()
            );
        }
        Command::Train { config, data, out, resume, deterministic } => {
            let mut config = config.resolve()?;
            if deterministic {
                config.deterministic = true;
            }
            let manifest = DatasetManifest::load(&manifest_path(&data))?;
            let root = if data.is_dir() { data.clone() } else { data.parent().unwrap().into() };
            match resume {
                Some(ckpt) => match config.precision {
                    Precision::F32 => with_thread_pool(&config, || {
                        Trainer::<f32>::resume(&ckpt, &manifest, &root, Some(out.clone()))?.run()
                    })?,
                    Precision::F64 => with_thread_pool(&config, || {
                        Trainer::<f64>::resume(&ckpt, &manifest, &root, Some(out.clone()))?.run()
                    })?,
                },
                None => train_dispatch(&config, &manifest, &root, Some(out.clone()))?,
            }
            println!("training complete; checkpoint and metrics in {}", out.display());
        }
        Command::Eval { checkpoint, data, split, out } => {
            let split: Split = split.parse()?;
            let manifest = DatasetManifest::load(&manifest_path(&data))?;
            let root = if data.is_dir() { data.clone() } else { data.parent().unwrap().into() };
            let model = model_from_checkpoint(&checkpoint)?;
            let report = evaluate(&model, &manifest, &root, split)?;
            print!("{}", report.to_table());
            if let Some(path) = out {
                std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
            }
        }
        Command::Render { checkpoint, pose, camera, out } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let pose = load_pose(&pose)?;
            let text = std::fs::read_to_string(&camera).map_err(|e| Error::io(&camera, e))?;
            let cam: Camera<f64> = serde_json::from_str(&text)?;
            cam.validate()?;
            let render = render_pose(&model, &pose, &cam)?;
            save_png_rgb(&render.color, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Bench { checkpoint, resolution, count } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let report = bench_renderer(&model, resolution, count)?;
            print!("{}", report.to_table());
        }
        Command::Scs { command } => match command {
            ScsCommand::Dump { pose, checkpoint, config, out } => {
                let config = config.resolve()?;
                let model = match checkpoint {
                    Some(ckpt) => model_from_checkpoint(&ckpt)?,
                    None => Model::<f64>::new(&config)?,
                };
                let pose = load_pose(&pose)?;
                let posed = forward_kinematics(&model.skeleton, &pose)?;
                let mut basis = if model.config.ablation.no_static_bones {
                    StructuralBasis { starts: vec![], ends: vec![], provenance: vec![] }
                } else {
                    StructuralBasis::from_static(&model.topology, &posed)
                };
                if !model.config.ablation.no_dynamic_bones {
                    let bones = generate_dynamic_bones(
                        &model.generator,
                        &model.skeleton,
                        &pose,
                        &posed,
                        &model.topology,
                        &model.kernel,
                        !model.config.ablation.no_t,
                        !model.config.ablation.no_delta,
                    )?;
                    for (slot, (p, q)) in bones.segments.iter().enumerate() {
                        basis.push_dynamic(slot, *p, *q);
                    }
                }
                let (_, skinning) =
                    handscs::skeleton::forward_kinematics_full(&model.skeleton, &pose)?;
                let (x_lbs, _) = handscs::skeleton::blend_transforms(
                    &skinning,
                    &model.cloud.positions,
                    &model.cloud.skin_weights,
                )?;
                let coords = structural_coordinates(&x_lbs, &basis, model.config.tau);
                let dump = serde_json::json!({
                    "bones": basis.starts.iter().zip(&basis.ends).zip(&basis.provenance).map(|((s, e), p)| {
                        serde_json::json!({
                            "start": [s.x, s.y, s.z],
                            "end": [e.x, e.y, e.z],
                            "source": match p {
                                BoneSource::Static(i) => format!("static:{i}"),
                                BoneSource::Dynamic(i) => format!("dynamic:{i}"),
                            },
                        })
                    }).collect::<Vec<_>>(),
                    "tau": model.config.tau,
                    "descriptors": (0..model.cloud.len()).map(|i| coords.row(i).to_vec()).collect::<Vec<_>>(),
                });
                write_or_print(&out, &serde_json::to_string_pretty(&dump)?)?;
            }
        },
        Command::Skeleton { command } => match command {
            SkeletonCommand::Dump { out } => {
                let model: SkeletonModel<f64> = SkeletonModel::default_hand();
                let desc = SkeletonDescription::from_model(&model)?;
                write_or_print(&out, &serde_json::to_string_pretty(&desc)?)?;
            }
            SkeletonCommand::Validate { input } => {
                let text = std::fs::read_to_string(&input).map_err(|e| Error::io(&input, e))?;
                let desc: SkeletonDescription = serde_json::from_str(&text)?;
                validate_description(&desc)?;
                println!("skeleton definition is valid");
            }
        },
        Command::Export { checkpoint, ply } => {
            let model = model_from_checkpoint(&checkpoint)?;
            let file = std::fs::File::create(&ply).map_err(|e| Error::io(&ply, e))?;
            handscs::gaussians::write_ply(&model.cloud, std::io::BufWriter::new(file))
                .map_err(|e| Error::io(&ply, e))?;
            println!("wrote {} points to {}", model.cloud.len(), ply.display());
        }
    }
    Ok(())
}

/// Check a dumped skeleton description against the structural invariants.
fn validate_description(desc: &SkeletonDescription) -> Result<(), Error> {
    let model: SkeletonModel<f64> = SkeletonModel::default_hand();
    model.validate()?;
    let reference = SkeletonDescription::from_model(&model)?;
    if desc.joint_names.len() != reference.joint_names.len() {
        return Err(Error::Topology(format!(
            "expected {} joints, found {}",
            reference.joint_names.len(),
            desc.joint_names.len()
        )));
    }
    if desc.parents != reference.parents {
        return Err(Error::Topology("parent table does not form the expected tree".into()));
    }
    for (j, len) in desc.bone_lengths.iter().enumerate().skip(1) {
        if *len <= 0.0 {
            return Err(Error::Topology(format!("bone length at joint {j} must be positive")));
        }
    }
    let topo = build_static_topology(&model)?;
    let active = desc
        .edges
        .iter()
        .filter(|e| e.tag != handscs::skeleton::EdgeTag::Removed)
        .count();
    if active != topo.len() {
        return Err(Error::Topology(format!(
            "expected {} active edges, found {active}",
            topo.len()
        )));
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
