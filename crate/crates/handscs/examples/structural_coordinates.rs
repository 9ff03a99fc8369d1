//! Compute structural coordinates: build the hybrid static/dynamic bone
//! basis for a pose and read off the angular-radial descriptors of a few
//! probe points.

use handscs::scs::{
    generate_dynamic_bones, structural_coordinates, BoneSource, DynamicBoneGenerator,
    SmoothingKernel, StructuralBasis,
};
use handscs::skeleton::{build_static_topology, forward_kinematics, Pose, SkeletonModel};
use nalgebra::Vector3;

fn main() -> anyhow::Result<()> {
    let model: SkeletonModel<f64> = SkeletonModel::default_hand();
    let topology = build_static_topology(&model)?;
    let kernel = SmoothingKernel::from_topology(&topology);

    let mut pose = Pose::identity();
    pose.axis_angle[3 * 6] = 1.0; // middle-finger base flexion
    let posed = forward_kinematics(&model, &pose)?;

    let mut basis = StructuralBasis::from_static(&topology, &posed);
    let generator = DynamicBoneGenerator::<f64>::new(8, topology.len(), 64);
    let bones = generate_dynamic_bones(
        &generator, &model, &pose, &posed, &topology, &kernel, true, true,
    )?;
    for (slot, (p, q)) in bones.segments.iter().enumerate() {
        basis.push_dynamic(slot, *p, *q);
    }
    println!("basis: {} bones ({} static + {} dynamic)", basis.len(), topology.len(), 8);

    // Probe points: one near the middle-finger base, one at the palm center,
    // one far from the hand.
    let probes = vec![
        posed[9] + Vector3::new(0.0, 0.01, 0.005),
        Vector3::new(0.0, 0.05, 0.0),
        Vector3::new(0.3, 0.3, 0.3),
    ];
    let coords = structural_coordinates(&probes, &basis, 0.08);
    for (i, label) in ["near middle base", "palm center", "far away"].iter().enumerate() {
        let row = coords.row(i);
        let top: Vec<(usize, f64)> = {
            let mut idx: Vec<usize> = (0..row.len()).collect();
            idx.sort_by(|&a, &b| row[b].abs().partial_cmp(&row[a].abs()).unwrap());
            idx.into_iter().take(3).map(|k| (k, row[k])).collect()
        };
        println!("\nprobe '{label}':");
        for (k, v) in top {
            let src = match basis.provenance[k] {
                BoneSource::Static(e) => format!("static bone {e}"),
                BoneSource::Dynamic(s) => format!("dynamic bone {s}"),
            };
            println!("  strongest entry {v:+.4} from {src}");
        }
        let inf = row.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        println!("  max |entry| = {inf:.4} (all entries stay within [-1, 1])");
    }
    Ok(())
}
