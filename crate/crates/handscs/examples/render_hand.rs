//! Render the synthetic oracle hand from a few viewpoints and export the
//! cloud as a PLY point file.

use handscs::data::{generate_scene, save_png_rgb, SceneConfig};
use handscs::gaussians::write_ply;

fn main() -> anyhow::Result<()> {
    let config = SceneConfig {
        oracle_gaussians: 4000,
        cameras_train: 4,
        cameras_novel: 0,
        frames: 12,
        frames_novel: 2,
        resolution: 256,
        seed: 7,
        ..Default::default()
    };
    let scene = generate_scene::<f32>(&config)?;
    let out_dir = std::env::temp_dir().join("handscs_render");
    std::fs::create_dir_all(&out_dir)?;

    for (frame, cam) in [(0usize, 0usize), (6, 1), (11, 2)] {
        let render = scene.render_frame(frame, cam)?;
        let covered = render.alpha.data.iter().filter(|&&a| a > 0.5).count();
        let path = out_dir.join(format!("hand_f{frame}_c{cam}.png"));
        save_png_rgb(&render.color, &path)?;
        println!(
            "frame {frame} cam {cam}: {} px silhouette -> {}",
            covered,
            path.display()
        );
    }

    let ply = out_dir.join("oracle_cloud.ply");
    write_ply(&scene.cloud, std::io::BufWriter::new(std::fs::File::create(&ply)?))?;
    println!("cloud with {} gaussians -> {}", scene.cloud.len(), ply.display());
    Ok(())
}
