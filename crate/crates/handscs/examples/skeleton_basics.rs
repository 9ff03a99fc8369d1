//! Build the default hand skeleton, inspect its static bone topology, and
//! pose it with forward kinematics.

use handscs::skeleton::{
    build_static_topology, forward_kinematics, joint_names, EdgeTag, Pose, SkeletonDescription,
    SkeletonModel,
};

fn main() -> anyhow::Result<()> {
    let model: SkeletonModel<f64> = SkeletonModel::default_hand();
    model.validate()?;
    let names = joint_names();

    let topo = build_static_topology(&model)?;
    println!("static basis: {} bones", topo.len());
    for (&(u, v), tag) in topo.edges.iter().zip(&topo.tags) {
        let kind = match tag {
            EdgeTag::Cross => "cross ",
            _ => "chain ",
        };
        println!("  {kind} {:<12} -> {}", names[u], names[v]);
    }
    println!("removed wrist edges: {:?}", topo.removed);

    // Curl the index finger and watch the chain move.
    let mut pose = Pose::identity();
    pose.axis_angle[3 * 3] = 1.2; // index base flexion
    pose.axis_angle[3 * 4] = 1.5; // index mid1
    let posed = forward_kinematics(&model, &pose)?;
    println!("\nindex chain under a curl:");
    for j in [5usize, 6, 7, 8] {
        let c = model.canonical_joints[j];
        let p = posed[j];
        println!(
            "  {:<12} canonical ({:+.3} {:+.3} {:+.3})  posed ({:+.3} {:+.3} {:+.3})",
            names[j], c.x, c.y, c.z, p.x, p.y, p.z
        );
    }

    let desc = SkeletonDescription::from_model(&model)?;
    let out = std::env::temp_dir().join("handscs_skeleton.json");
    std::fs::write(&out, serde_json::to_string_pretty(&desc)?)?;
    println!("\nwrote skeleton definition to {}", out.display());
    Ok(())
}
