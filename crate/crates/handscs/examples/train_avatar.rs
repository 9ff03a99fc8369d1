//! Train a small avatar on a freshly generated dataset and watch the
//! metrics move. Uses a reduced configuration so it finishes in about a
//! minute; see the README for full-scale runs through the CLI.

use handscs::config::RunConfig;
use handscs::data::{generate_scene, render_dataset, SceneConfig};
use handscs::train::{with_thread_pool, Trainer};

fn main() -> anyhow::Result<()> {
    let mut config = RunConfig {
        iterations: 300,
        embed_dim: 8,
        hidden_width: 32,
        dynamic_bones: 10,
        seed: 3,
        scene: SceneConfig {
            oracle_gaussians: 2500,
            cameras_train: 4,
            cameras_novel: 2,
            frames: 16,
            frames_novel: 3,
            resolution: 96,
            seed: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    config.densify_from = 150;
    config.densify_every = 100;
    config.validate()?;

    let out = std::env::temp_dir().join("handscs_train_example");
    let data_dir = out.join("data");
    let scene = generate_scene::<f32>(&config.scene)?;
    let manifest = render_dataset(&scene, &data_dir)?;

    with_thread_pool(&config, || -> anyhow::Result<()> {
        let mut trainer =
            Trainer::<f32>::new(&config, &manifest, &data_dir, Some(out.join("run")))?;
        trainer.run()?;
        let m = &trainer.metrics;
        let first: f64 = m[..20].iter().map(|r| r.psnr).sum::<f64>() / 20.0;
        let last: f64 = m[m.len() - 20..].iter().map(|r| r.psnr).sum::<f64>() / 20.0;
        println!("gaussians after densification: {}", trainer.model.cloud.len());
        println!("train PSNR, first 20 iterations:  {first:.2} dB");
        println!("train PSNR, last 20 iterations:   {last:.2} dB");
        println!("decoder gates: geo {:+.4}  app {:+.4}  fusion {:+.4}",
            trainer.model.decoders.geo.gate,
            trainer.model.decoders.app.gate,
            trainer.model.decoders.fusion.gate);
        println!("checkpoint + metrics.csv in {}", out.join("run").display());
        Ok(())
    })?;
    Ok(())
}
