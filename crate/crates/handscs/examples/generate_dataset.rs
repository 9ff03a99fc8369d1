//! Generate a small multi-view dataset: ground-truth renders, masks, poses,
//! and the manifest with train / novel-pose / novel-view splits.

use handscs::data::{generate_scene, render_dataset, SceneConfig, Split};

fn main() -> anyhow::Result<()> {
    let config = SceneConfig {
        oracle_gaussians: 3000,
        cameras_train: 5,
        cameras_novel: 2,
        frames: 20,
        frames_novel: 4,
        resolution: 128,
        seed: 11,
        ..Default::default()
    };
    let scene = generate_scene::<f32>(&config)?;
    println!(
        "trajectory self-contact fraction: {:.2}",
        scene.self_contact_fraction()
    );

    let out = std::env::temp_dir().join("handscs_dataset");
    let manifest = render_dataset(&scene, &out)?;
    for split in [Split::Train, Split::NovelPose, Split::NovelView] {
        let n = manifest.records_in(split).count();
        println!("{split:?}: {n} records");
    }
    println!("dataset written to {}", out.display());
    Ok(())
}
