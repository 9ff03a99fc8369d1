//! Evaluate a checkpoint against every dataset split. Expects the state
//! written by the `train_avatar` example; run that first.

use handscs::checkpoint;
use handscs::data::{manifest_path, DatasetManifest, Split};
use handscs::eval::evaluate;

fn main() -> anyhow::Result<()> {
    let root = std::env::temp_dir().join("handscs_train_example");
    let data_dir = root.join("data");
    let ckpt = root.join("run/checkpoint.bin");
    if !ckpt.exists() {
        println!("no checkpoint at {}; run the train_avatar example first", ckpt.display());
        return Ok(());
    }
    let manifest = DatasetManifest::load(&manifest_path(&data_dir))?;
    let restored = checkpoint::load::<f32>(&ckpt)?;
    println!("checkpoint from iteration {}", restored.iteration);
    for split in [Split::Train, Split::NovelPose, Split::NovelView] {
        let report = evaluate(&restored.model, &manifest, &data_dir, split)?;
        print!("{}", report.to_table());
    }
    Ok(())
}
