//! Show what each ablation flag changes in a single forward pass: the
//! per-stage trace pins exactly one pathway per flag.

use handscs::config::RunConfig;
use handscs::data::{generate_scene, FrameRecord, SceneConfig, Split};
use handscs::train::{forward, Model};

fn main() -> anyhow::Result<()> {
    let base = RunConfig {
        embed_dim: 8,
        hidden_width: 32,
        dynamic_bones: 6,
        scene: SceneConfig {
            oracle_gaussians: 800,
            cameras_train: 2,
            cameras_novel: 1,
            frames: 4,
            frames_novel: 1,
            resolution: 64,
            seed: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let scene = generate_scene::<f64>(&base.scene)?;
    let gt = scene.render_frame(1, 0)?;
    let frame = handscs::data::FrameData {
        pose: scene.poses[1].clone(),
        camera: scene.cameras[0].clone(),
        image: gt.color,
        mask: gt.alpha,
        record: FrameRecord {
            frame: 1,
            camera_id: 0,
            pose_file: String::new(),
            image: String::new(),
            mask: String::new(),
            split: Split::Train,
        },
    };

    let flags = [
        "(full)",
        "ablation.no_embeddings=true",
        "ablation.no_intra_pose=true",
        "ablation.no_inter_pose=true",
        "ablation.no_static_bones=true",
        "ablation.no_dynamic_bones=true",
        "ablation.no_t=true",
        "ablation.no_delta=true",
    ];
    println!(
        "{:<34} {:>7} {:>7} {:>10} {:>8} {:>8}",
        "configuration", "static", "dynamic", "|P|", "t range", "|delta|"
    );
    for flag in flags {
        let mut config = base.clone();
        if flag != "(full)" {
            config.apply_override(flag)?;
        }
        config.validate()?;
        let model = Model::<f64>::new(&config)?;
        let (outcome, _) = forward(&model, &frame, None)?;
        let t = &outcome.trace;
        let t_range = if t.t_values.is_empty() {
            "-".to_string()
        } else {
            let lo = t.t_values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = t.t_values.iter().cloned().fold(0.0f64, f64::max);
            format!("{lo:.2}..{hi:.2}")
        };
        println!(
            "{:<34} {:>7} {:>7} {:>10.4} {:>8} {:>8.4}",
            flag, t.static_bones, t.dynamic_bones, t.descriptor_norm, t_range, t.delta_norm
        );
    }
    Ok(())
}
