//! Renderer throughput at a few cloud sizes, including the scaling factor
//! between them.

use handscs::config::RunConfig;
use handscs::data::{generate_scene, SceneConfig};
use handscs::eval::bench_renderer;
use handscs::train::Model;

fn main() -> anyhow::Result<()> {
    for (gaussians, resolution) in [(2_000usize, 256usize), (10_000, 256)] {
        let config = RunConfig {
            scene: SceneConfig { oracle_gaussians: gaussians, ..Default::default() },
            ..Default::default()
        };
        let mut model = Model::<f32>::new(&config)?;
        // Swap in an oracle-sized cloud so the bench covers the full pipeline.
        let scene = generate_scene::<f32>(&config.scene)?;
        model.cloud = scene.cloud;
        let report = bench_renderer(&model, resolution, 10)?;
        print!("{}", report.to_table());
    }
    Ok(())
}
