//! Simplified parametric hand skeleton: forward kinematics, linear blend
//! skinning, and the static bone topology algebra.
//!
//! The skeleton is a fixed 21-joint kinematic chain (wrist + 4 joints per
//! finger), configurable through per-edge bone lengths. The canonical frame
//! is right-handed, in meters, wrist at the origin, fingers along +y and the
//! palm facing +z.

use crate::error::Error;
use crate::math::{real, Real};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Joint count: wrist + 5 fingers x 4 joints.
pub const JOINT_COUNT: usize = 21;
/// Joints carrying an axis-angle rotation (all non-leaf joints except the wrist).
pub const ARTICULATED_COUNT: usize = 15;
/// Pose vector width (3 per articulated joint).
pub const POSE_DOF: usize = ARTICULATED_COUNT * 3;

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

/// Indices of the five finger base joints, in [`FINGER_NAMES`] order.
pub const FINGER_BASE: [usize; 5] = [1, 5, 9, 13, 17];

/// Joint names, index-aligned with `canonical_joints`.
pub fn joint_names() -> Vec<String> {
    let mut names = vec!["wrist".to_string()];
    for f in FINGER_NAMES {
        for part in ["base", "mid1", "mid2", "tip"] {
            names.push(format!("{f}_{part}"));
        }
    }
    names
}

/// Per-joint parent index; `None` for the wrist.
pub fn parent_table() -> [Option<usize>; JOINT_COUNT] {
    let mut parent = [None; JOINT_COUNT];
    for f in 0..5 {
        let b = FINGER_BASE[f];
        parent[b] = Some(0);
        parent[b + 1] = Some(b);
        parent[b + 2] = Some(b + 1);
        parent[b + 3] = Some(b + 2);
    }
    parent
}

/// Provenance of a topology edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTag {
    /// Anatomical parent-child edge kept from the kinematic tree.
    Mano,
    /// Added cross-finger pseudo-bone joining adjacent finger bases.
    Cross,
    /// Anatomical edge removed from the static basis (kept for inspection).
    Removed,
}

/// Static bone topology: the active edge set plus the removed edges.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoneTopology {
    /// Active edges `(u, v)`, each tagged `Mano` or `Cross`.
    pub edges: Vec<(usize, usize)>,
    pub tags: Vec<EdgeTag>,
    /// Wrist-to-finger edges dropped from the active set.
    pub removed: Vec<(usize, usize)>,
}

impl BoneTopology {
    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn contains(&self, u: usize, v: usize) -> bool {
        self.edges.iter().any(|&(a, b)| (a, b) == (u, v))
    }
}

/// Hand pose: per-articulated-joint axis-angle plus a global rigid motion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Real> {
    /// Flattened axis-angle rotations, 3 per articulated joint.
    pub axis_angle: Vec<T>,
    pub global_rotation: Vector3<T>,
    pub global_translation: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn identity() -> Self {
        Self {
            axis_angle: vec![T::zero(); POSE_DOF],
            global_rotation: Vector3::zeros(),
            global_translation: Vector3::zeros(),
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.axis_angle.len() != POSE_DOF {
            return Err(Error::Contract(format!(
                "pose has {} articulation values, expected {POSE_DOF}",
                self.axis_angle.len()
            )));
        }
        for j in 0..ARTICULATED_COUNT {
            let v = Vector3::new(
                self.axis_angle[3 * j],
                self.axis_angle[3 * j + 1],
                self.axis_angle[3 * j + 2],
            );
            if v.norm() > T::pi() + real(1e-9) {
                return Err(Error::Contract(format!(
                    "axis-angle magnitude exceeds pi at articulated joint {j}"
                )));
            }
        }
        Ok(())
    }

    /// Axis-angle of articulated joint `a` as a vector.
    pub fn joint_rotation(&self, a: usize) -> Vector3<T> {
        Vector3::new(
            self.axis_angle[3 * a],
            self.axis_angle[3 * a + 1],
            self.axis_angle[3 * a + 2],
        )
    }
}

/// Rodrigues' formula.
pub fn axis_angle_to_matrix<T: Real>(v: &Vector3<T>) -> Matrix3<T> {
    let theta = v.norm();
    if theta < real(1e-12) {
        return Matrix3::identity();
    }
    let axis = v / theta;
    let (s, c) = (theta.sin(), theta.cos());
    let k = Matrix3::new(
        T::zero(),
        -axis.z,
        axis.y,
        axis.z,
        T::zero(),
        -axis.x,
        -axis.y,
        axis.x,
        T::zero(),
    );
    Matrix3::identity() + k * s + k * k * (T::one() - c)
}

/// A rigid transform as rotation + translation.
#[derive(Debug, Clone, Copy)]
pub struct RigidTransform<T: Real> {
    pub rot: Matrix3<T>,
    pub tr: Vector3<T>,
}

impl<T: Real> RigidTransform<T> {
    pub fn identity() -> Self {
        Self { rot: Matrix3::identity(), tr: Vector3::zeros() }
    }

    pub fn apply(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rot * p + self.tr
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self { rot: self.rot * other.rot, tr: self.rot * other.tr + self.tr }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self { rot: rt, tr: -(rt * self.tr) }
    }
}

/// The parametric hand model: canonical joints, tree, skinning data.
#[derive(Debug, Clone)]
pub struct SkeletonModel<T: Real> {
    pub canonical_joints: Vec<Vector3<T>>,
    pub parent: [Option<usize>; JOINT_COUNT],
    /// Length of the edge from `parent[j]` to `j`, indexed by child joint.
    pub bone_lengths: Vec<T>,
    /// Capsule radius of the edge ending at child joint `j` (palm edges included).
    pub bone_radii: Vec<T>,
    pub template_vertices: Vec<Vector3<T>>,
    /// Row-stochastic N x 21 matrix, flattened row-major.
    pub skinning_weights: Vec<T>,
}

/// Per-finger canonical layout: metacarpal direction and segment lengths.
struct FingerSpec {
    dir: [f64; 3],
    meta_len: f64,
    segments: [f64; 3],
    radii: [f64; 4],
}

fn finger_specs() -> [FingerSpec; 5] {
    [
        // Thumb leaves the wrist sideways and slightly out of plane.
        FingerSpec {
            dir: [0.80, 0.55, 0.15],
            meta_len: 0.038,
            segments: [0.044, 0.032, 0.026],
            radii: [0.011, 0.010, 0.008, 0.0065],
        },
        FingerSpec {
            dir: [0.24, 0.97, 0.0],
            meta_len: 0.095,
            segments: [0.040, 0.024, 0.020],
            radii: [0.009, 0.008, 0.007, 0.0055],
        },
        FingerSpec {
            dir: [0.06, 1.0, 0.0],
            meta_len: 0.098,
            segments: [0.044, 0.027, 0.022],
            radii: [0.009, 0.008, 0.007, 0.0055],
        },
        FingerSpec {
            dir: [-0.12, 0.99, 0.0],
            meta_len: 0.092,
            segments: [0.041, 0.025, 0.020],
            radii: [0.0085, 0.0075, 0.0065, 0.0055],
        },
        FingerSpec {
            dir: [-0.30, 0.95, 0.0],
            meta_len: 0.085,
            segments: [0.032, 0.019, 0.017],
            radii: [0.008, 0.007, 0.006, 0.005],
        },
    ]
}

impl<T: Real> SkeletonModel<T> {
    /// Default hand with the stock geometry and a 778-vertex template.
    pub fn default_hand() -> Self {
        Self::with_template_count(778)
    }

    pub fn with_template_count(template_count: usize) -> Self {
        let parent = parent_table();
        let mut joints = vec![Vector3::zeros(); JOINT_COUNT];
        let mut lengths = vec![T::zero(); JOINT_COUNT];
        let mut radii = vec![T::zero(); JOINT_COUNT];
        for (f, spec) in finger_specs().iter().enumerate() {
            let dir = Vector3::new(real(spec.dir[0]), real(spec.dir[1]), real(spec.dir[2]))
                .normalize();
            let base = FINGER_BASE[f];
            joints[base] = dir.scale(real(spec.meta_len));
            lengths[base] = real(spec.meta_len);
            radii[base] = real(spec.radii[0]);
            let mut cursor = joints[base];
            for (s, &seg) in spec.segments.iter().enumerate() {
                let j = base + 1 + s;
                cursor += dir.scale(real(seg));
                joints[j] = cursor;
                lengths[j] = real(seg);
                radii[j] = real(spec.radii[s + 1]);
            }
        }
        let mut model = Self {
            canonical_joints: joints,
            parent,
            bone_lengths: lengths,
            bone_radii: radii,
            template_vertices: Vec::new(),
            skinning_weights: Vec::new(),
        };
        let (verts, weights) = model.sample_template(template_count);
        model.template_vertices = verts;
        model.skinning_weights = weights;
        model
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.canonical_joints.len() != JOINT_COUNT {
            return Err(Error::Topology(format!(
                "expected {JOINT_COUNT} joints, got {}",
                self.canonical_joints.len()
            )));
        }
        let mut roots = 0usize;
        for (j, p) in self.parent.iter().enumerate() {
            match *p {
                None => roots += 1,
                Some(pi) => {
                    if pi >= JOINT_COUNT {
                        return Err(Error::Topology(format!("parent index {pi} out of range")));
                    }
                    // Acyclicity: parents must come earlier in index order.
                    if pi >= j {
                        return Err(Error::Topology(format!(
                            "joint {j} has non-topologically-sorted parent {pi}"
                        )));
                    }
                    let d = (self.canonical_joints[j] - self.canonical_joints[pi]).norm();
                    let want = self.bone_lengths[j];
                    if (d - want).abs() > real(1e-6) {
                        return Err(Error::Topology(format!(
                            "joint {j}: canonical distance {} != bone length {}",
                            d.to_f64().unwrap_or(f64::NAN),
                            want.to_f64().unwrap_or(f64::NAN)
                        )));
                    }
                }
            }
        }
        if roots != 1 {
            return Err(Error::Topology(format!("expected exactly one root, got {roots}")));
        }
        let n = self.template_vertices.len();
        if self.skinning_weights.len() != n * JOINT_COUNT {
            return Err(Error::Topology("skinning matrix shape mismatch".into()));
        }
        for r in 0..n {
            let row = &self.skinning_weights[r * JOINT_COUNT..(r + 1) * JOINT_COUNT];
            let mut sum = T::zero();
            for &w in row {
                if w < T::zero() {
                    return Err(Error::Topology(format!("negative skin weight at row {r}")));
                }
                sum += w;
            }
            if (sum - T::one()).abs() > real(1e-6) {
                return Err(Error::Topology(format!(
                    "skin weight row {r} sums to {}",
                    sum.to_f64().unwrap_or(f64::NAN)
                )));
            }
        }
        Ok(())
    }

    /// Articulated-joint index for each joint that carries a pose rotation.
    /// Finger-major: thumb base, mid1, mid2, then index, ...
    pub fn articulated_joint(&self, a: usize) -> usize {
        let finger = a / 3;
        FINGER_BASE[finger] + a % 3
    }

    /// Inverse of [`Self::articulated_joint`]; `None` for the wrist and tips.
    pub fn articulation_index(&self, joint: usize) -> Option<usize> {
        if joint == 0 {
            return None;
        }
        let finger = (joint - 1) / 4;
        let part = (joint - 1) % 4;
        if part == 3 {
            None
        } else {
            Some(finger * 3 + part)
        }
    }

    /// Tree edges `(parent, child)` of the kinematic chain (the anatomical set).
    pub fn tree_edges(&self) -> Vec<(usize, usize)> {
        (1..JOINT_COUNT).map(|j| (self.parent[j].unwrap(), j)).collect()
    }

    /// Capsule radius for an arbitrary joint pair. Tree edges use the stored
    /// per-child radius; cross-finger pseudo-bones use the palm-bar radius.
    pub fn edge_radius(&self, u: usize, v: usize) -> T {
        if self.parent[v] == Some(u) {
            self.bone_radii[v]
        } else if self.parent[u] == Some(v) {
            self.bone_radii[u]
        } else {
            real(0.012)
        }
    }

    fn sample_template(&self, count: usize) -> (Vec<Vector3<T>>, Vec<T>) {
        let topo = build_static_topology(self).expect("stock skeleton is well-formed");
        let joints = &self.canonical_joints;

        // Area-proportional allocation over the static bones, largest remainder.
        let mut areas = Vec::with_capacity(topo.len());
        for &(u, v) in &topo.edges {
            let len = (joints[v] - joints[u]).norm().to_f64().unwrap();
            let r = self.edge_radius(u, v).to_f64().unwrap();
            areas.push(2.0 * std::f64::consts::PI * r * len + 4.0 * std::f64::consts::PI * r * r);
        }
        let total: f64 = areas.iter().sum();
        let mut counts: Vec<usize> =
            areas.iter().map(|a| (a / total * count as f64).floor() as usize).collect();
        let mut rem: Vec<(f64, usize)> = areas
            .iter()
            .enumerate()
            .map(|(i, a)| (a / total * count as f64 - counts[i] as f64, i))
            .collect();
        rem.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let mut assigned: usize = counts.iter().sum();
        let mut k = 0;
        while assigned < count {
            counts[rem[k % rem.len()].1] += 1;
            assigned += 1;
            k += 1;
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0x68_61_6e_64);
        let mut verts = Vec::with_capacity(count);
        for (e, &(u, v)) in topo.edges.iter().enumerate() {
            let p = joints[u];
            let q = joints[v];
            let r = self.edge_radius(u, v);
            for _ in 0..counts[e] {
                verts.push(sample_capsule(&mut rng, &p, &q, r));
            }
        }
        let weights = self.skinning_for_points(&verts);
        (verts, weights)
    }

    /// Procedural skinning: Gaussian falloff of distance to the two nearest
    /// anatomical bone segments, mass assigned to each segment's parent joint.
    pub fn skinning_for_points(&self, points: &[Vector3<T>]) -> Vec<T> {
        let edges = self.tree_edges();
        let joints = &self.canonical_joints;
        let mut weights = vec![T::zero(); points.len() * JOINT_COUNT];
        for (i, x) in points.iter().enumerate() {
            let mut best: [(T, usize); 2] =
                [(T::max_value().unwrap(), usize::MAX), (T::max_value().unwrap(), usize::MAX)];
            for (e, &(u, v)) in edges.iter().enumerate() {
                let d = point_segment_distance(x, &joints[u], &joints[v]);
                if d < best[0].0 {
                    best[1] = best[0];
                    best[0] = (d, e);
                } else if d < best[1].0 {
                    best[1] = (d, e);
                }
            }
            let row = &mut weights[i * JOINT_COUNT..(i + 1) * JOINT_COUNT];
            let mut sum = T::zero();
            let mut contrib = [(0usize, T::zero()); 2];
            for (slot, &(d, e)) in best.iter().enumerate() {
                let (u, v) = edges[e];
                let sigma = real::<T>(1.5) * self.bone_radii[v];
                let w = (-(d * d) / (real::<T>(2.0) * sigma * sigma)).exp();
                contrib[slot] = (u, w);
                sum += w;
            }
            if sum <= T::zero() {
                // Both falloffs underflowed; snap to the nearest segment's joint.
                row[contrib[0].0] = T::one();
            } else {
                for &(u, w) in &contrib {
                    row[u] += w / sum;
                }
            }
        }
        weights
    }
}

fn point_segment_distance<T: Real>(x: &Vector3<T>, p: &Vector3<T>, q: &Vector3<T>) -> T {
    let d = q - p;
    let len2 = d.norm_squared();
    if len2 <= T::zero() {
        return (x - p).norm();
    }
    let t = ((x - p).dot(&d) / len2).clamp(T::zero(), T::one());
    (x - (p + d.scale(t))).norm()
}

fn sample_capsule<T: Real>(
    rng: &mut ChaCha8Rng,
    p: &Vector3<T>,
    q: &Vector3<T>,
    r: T,
) -> Vector3<T> {
    let axis = q - p;
    let len = axis.norm();
    let az = axis / len;
    let reference =
        if az.x.abs() < real(0.9) { Vector3::x_axis() } else { Vector3::y_axis() };
    let ax = az.cross(&reference).normalize();
    let ay = az.cross(&ax);

    let len_f = len.to_f64().unwrap();
    let r_f = r.to_f64().unwrap();
    let side_area = 2.0 * std::f64::consts::PI * r_f * len_f;
    let cap_area = 4.0 * std::f64::consts::PI * r_f * r_f;
    let pick: f64 = rng.random::<f64>() * (side_area + cap_area);
    let theta: f64 = rng.random::<f64>() * std::f64::consts::TAU;
    let (ct, st) = (theta.cos(), theta.sin());
    let radial = ax.scale(real(ct)) + ay.scale(real(st));
    if pick < side_area {
        let t: f64 = rng.random::<f64>();
        p + az.scale(real(t * len_f)) + radial.scale(r)
    } else {
        // Hemispherical cap at either end.
        let end = rng.random::<bool>();
        let u: f64 = rng.random::<f64>();
        let cos_phi = u; // uniform in [0, 1] over the hemisphere axis coordinate
        let sin_phi = (1.0 - cos_phi * cos_phi).sqrt();
        let out = radial.scale(real::<T>(sin_phi) * r);
        if end {
            q + out + az.scale(real::<T>(cos_phi) * r)
        } else {
            p + out - az.scale(real::<T>(cos_phi) * r)
        }
    }
}

/// Static bone topology per the hybrid-basis rule: keep all within-finger
/// chain edges and the wrist-thumb edge, drop the remaining wrist-to-finger
/// edges, and add cross-finger bones between adjacent finger bases.
pub fn build_static_topology<T: Real>(model: &SkeletonModel<T>) -> Result<BoneTopology, Error> {
    if model.canonical_joints.len() != JOINT_COUNT {
        return Err(Error::Topology("skeleton must have 21 joints".into()));
    }
    let mut roots = 0;
    for (j, p) in model.parent.iter().enumerate() {
        match *p {
            None => roots += 1,
            Some(pi) if pi >= j => {
                return Err(Error::Topology("malformed kinematic tree".into()))
            }
            _ => {}
        }
    }
    if roots != 1 {
        return Err(Error::Topology("kinematic tree must have exactly one root".into()));
    }

    let mut edges = Vec::new();
    let mut tags = Vec::new();
    let mut removed = Vec::new();
    for (u, v) in model.tree_edges() {
        // Wrist-to-finger edges are redundant for all fingers except the thumb.
        if u == 0 && v != FINGER_BASE[0] {
            removed.push((u, v));
        } else {
            edges.push((u, v));
            tags.push(EdgeTag::Mano);
        }
    }
    for w in FINGER_BASE.windows(2) {
        edges.push((w[0], w[1]));
        tags.push(EdgeTag::Cross);
    }

    let mut seen = std::collections::HashSet::new();
    for &(u, v) in &edges {
        if u == v || !seen.insert((u.min(v), u.max(v))) {
            return Err(Error::Topology(format!("duplicate or degenerate edge ({u}, {v})")));
        }
    }
    Ok(BoneTopology { edges, tags, removed })
}

/// Forward kinematics: posed joint positions plus the per-joint skinning
/// transforms mapping canonical space to posed space.
pub fn forward_kinematics_full<T: Real>(
    model: &SkeletonModel<T>,
    pose: &Pose<T>,
) -> Result<(Vec<Vector3<T>>, Vec<RigidTransform<T>>), Error> {
    pose.validate()?;
    let mut global = vec![RigidTransform::identity(); JOINT_COUNT];
    let root_rot = axis_angle_to_matrix(&pose.global_rotation);
    global[0] = RigidTransform { rot: root_rot, tr: pose.global_translation };

    for j in 1..JOINT_COUNT {
        let p = model.parent[j].unwrap();
        let offset = model.canonical_joints[j] - model.canonical_joints[p];
        let local_rot = match model.articulation_index(j) {
            Some(a) => axis_angle_to_matrix(&pose.joint_rotation(a)),
            None => Matrix3::identity(),
        };
        let local = RigidTransform { rot: local_rot, tr: offset };
        global[j] = global[p].compose(&local);
    }

    let posed: Vec<Vector3<T>> = global.iter().map(|g| g.tr).collect();
    // Skinning transform: posed-global composed with the inverse rest-global.
    let mut skinning = Vec::with_capacity(JOINT_COUNT);
    let mut rest = vec![RigidTransform::identity(); JOINT_COUNT];
    rest[0] = RigidTransform { rot: Matrix3::identity(), tr: model.canonical_joints[0] };
    for j in 1..JOINT_COUNT {
        let p = model.parent[j].unwrap();
        rest[j] = RigidTransform {
            rot: Matrix3::identity(),
            tr: rest[p].tr + (model.canonical_joints[j] - model.canonical_joints[p]),
        };
    }
    for j in 0..JOINT_COUNT {
        skinning.push(global[j].compose(&rest[j].inverse()));
    }
    Ok((posed, skinning))
}

/// Posed joint positions only.
pub fn forward_kinematics<T: Real>(
    model: &SkeletonModel<T>,
    pose: &Pose<T>,
) -> Result<Vec<Vector3<T>>, Error> {
    forward_kinematics_full(model, pose).map(|(j, _)| j)
}

/// Linear blend skinning of `points` with per-point weight rows.
///
/// Returns posed points and the per-point blended 3x4 transform (the motion
/// embedding consumed by the deformation decoders).
pub fn lbs_transform<T: Real>(
    model: &SkeletonModel<T>,
    pose: &Pose<T>,
    points: &[Vector3<T>],
    weights: &[T],
) -> Result<(Vec<Vector3<T>>, Vec<RigidTransform<T>>), Error> {
    if weights.len() != points.len() * JOINT_COUNT {
        return Err(Error::Contract("weight rows do not align with points".into()));
    }
    let (_, skinning) = forward_kinematics_full(model, pose)?;
    blend_transforms(&skinning, points, weights)
}

/// Blend precomputed per-joint transforms; split out so the training loop can
/// reuse one FK evaluation for many point sets.
pub fn blend_transforms<T: Real>(
    skinning: &[RigidTransform<T>],
    points: &[Vector3<T>],
    weights: &[T],
) -> Result<(Vec<Vector3<T>>, Vec<RigidTransform<T>>), Error> {
    let mut posed = Vec::with_capacity(points.len());
    let mut blended = Vec::with_capacity(points.len());
    for (i, x) in points.iter().enumerate() {
        let row = &weights[i * JOINT_COUNT..(i + 1) * JOINT_COUNT];
        let mut sum = T::zero();
        let mut rot = Matrix3::zeros();
        let mut tr = Vector3::zeros();
        for (j, &w) in row.iter().enumerate() {
            if w != T::zero() {
                rot += skinning[j].rot.scale(w);
                tr += skinning[j].tr.scale(w);
                sum += w;
            }
        }
        if (sum - T::one()).abs() > real(1e-6) {
            return Err(Error::Contract(format!(
                "skin weight row {i} sums to {}, expected 1",
                sum.to_f64().unwrap_or(f64::NAN)
            )));
        }
        let m = RigidTransform { rot, tr };
        posed.push(m.apply(x));
        blended.push(m);
    }
    Ok((posed, blended))
}

/// Flatten a blended transform into the 12-scalar motion embedding (row-major
/// rotation followed by translation).
pub fn motion_embedding<T: Real>(m: &RigidTransform<T>) -> [T; 12] {
    let mut out = [T::zero(); 12];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = m.rot[(r, c)];
        }
    }
    out[9] = m.tr.x;
    out[10] = m.tr.y;
    out[11] = m.tr.z;
    out
}

/// Serializable skeleton description (the `skeleton dump` format).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonDescription {
    pub joint_names: Vec<String>,
    pub parents: Vec<Option<usize>>,
    pub bone_lengths: Vec<f64>,
    pub edges: Vec<SkeletonEdge>,
    pub template_vertex_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkeletonEdge {
    pub u: usize,
    pub v: usize,
    pub tag: EdgeTag,
}

impl SkeletonDescription {
    pub fn from_model<T: Real>(model: &SkeletonModel<T>) -> Result<Self, Error> {
        let topo = build_static_topology(model)?;
        let mut edges: Vec<SkeletonEdge> = topo
            .edges
            .iter()
            .zip(&topo.tags)
            .map(|(&(u, v), &tag)| SkeletonEdge { u, v, tag })
            .collect();
        edges.extend(
            topo.removed.iter().map(|&(u, v)| SkeletonEdge { u, v, tag: EdgeTag::Removed }),
        );
        Ok(Self {
            joint_names: joint_names(),
            parents: parent_table().to_vec(),
            bone_lengths: model.bone_lengths.iter().map(|l| l.to_f64().unwrap()).collect(),
            edges,
            template_vertex_count: model.template_vertices.len(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn model() -> SkeletonModel<f64> {
        SkeletonModel::default_hand()
    }

    #[test]
    fn default_model_is_well_formed() {
        let m = model();
        m.validate().unwrap();
        assert_eq!(m.template_vertices.len(), 778);
    }

    #[test]
    fn static_topology_has_twenty_edges() {
        // 20 tree edges - 4 removed wrist edges + 4 cross-finger bones.
        let topo = build_static_topology(&model()).unwrap();
        assert_eq!(topo.len(), 20);
        assert_eq!(topo.removed.len(), 4);
        assert_eq!(topo.tags.iter().filter(|t| **t == EdgeTag::Cross).count(), 4);
    }

    #[test]
    fn wrist_to_index_edge_is_removed() {
        let topo = build_static_topology(&model()).unwrap();
        assert!(!topo.contains(0, FINGER_BASE[1]));
        assert!(topo.removed.contains(&(0, FINGER_BASE[1])));
        // Thumb keeps its wrist edge.
        assert!(topo.contains(0, FINGER_BASE[0]));
    }

    #[test]
    fn cross_finger_edges_join_adjacent_bases() {
        let topo = build_static_topology(&model()).unwrap();
        for w in FINGER_BASE.windows(2) {
            let idx = topo.edges.iter().position(|&e| e == (w[0], w[1])).unwrap();
            assert_eq!(topo.tags[idx], EdgeTag::Cross);
        }
    }

    #[test]
    fn topology_is_deterministic() {
        let a = build_static_topology(&model()).unwrap();
        let b = build_static_topology(&model()).unwrap();
        assert_eq!(a.edges, b.edges);
        assert_eq!(a.removed, b.removed);
    }

    #[test]
    fn identity_pose_reproduces_canonical_joints() {
        let m = model();
        let posed = forward_kinematics(&m, &Pose::identity()).unwrap();
        for (a, b) in posed.iter().zip(&m.canonical_joints) {
            assert_relative_eq!((a - b).norm(), 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn global_rigid_motion_is_exact() {
        let m = model();
        let mut pose = Pose::identity();
        pose.global_rotation = Vector3::new(0.3, -0.5, 0.8);
        pose.global_translation = Vector3::new(0.1, 0.2, -0.05);
        let posed = forward_kinematics(&m, &pose).unwrap();
        let r = axis_angle_to_matrix(&pose.global_rotation);
        for (p, c) in posed.iter().zip(&m.canonical_joints) {
            let want = r * c + pose.global_translation;
            assert_relative_eq!((p - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_joint_flexion_matches_hand_composed_chain() {
        let m = model();
        let mut pose = Pose::identity();
        // 90 degree flexion at the index mid1 joint (articulated index 4).
        let art = 4;
        let joint = m.articulated_joint(art);
        assert_eq!(joint, FINGER_BASE[1] + 1);
        pose.axis_angle[3 * art] = std::f64::consts::FRAC_PI_2;
        let posed = forward_kinematics(&m, &pose).unwrap();

        // Independent evaluation: everything up to the pivot is unmoved, and
        // downstream joints rotate rigidly about the pivot.
        let pivot = m.canonical_joints[joint];
        let rot = axis_angle_to_matrix(&Vector3::new(std::f64::consts::FRAC_PI_2, 0.0, 0.0));
        for j in 0..JOINT_COUNT {
            let mut ancestor = false;
            let mut cursor = j;
            while let Some(p) = m.parent[cursor] {
                if cursor == joint {
                    ancestor = true;
                    break;
                }
                cursor = p;
            }
            let want = if ancestor && j != joint {
                rot * (m.canonical_joints[j] - pivot) + pivot
            } else {
                m.canonical_joints[j]
            };
            assert_relative_eq!((posed[j] - want).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn fk_equivariance_under_rigid_motion() {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut pose = Pose::identity();
            for v in pose.axis_angle.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
            let base = forward_kinematics(&m, &pose).unwrap();

            let axis = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let t = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            );
            let mut moved = pose.clone();
            moved.global_rotation = axis;
            moved.global_translation = t;
            let posed = forward_kinematics(&m, &moved).unwrap();
            let r = axis_angle_to_matrix(&axis);
            for (p, b) in posed.iter().zip(&base) {
                assert_relative_eq!((p - (r * b + t)).norm(), 0.0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn lbs_identity_pose_is_identity() {
        let m = model();
        let pts = vec![Vector3::new(0.03, 0.05, 0.01), Vector3::new(-0.01, 0.12, 0.0)];
        let w = m.skinning_for_points(&pts);
        let (posed, blended) = lbs_transform(&m, &Pose::identity(), &pts, &w).unwrap();
        for (a, b) in posed.iter().zip(&pts) {
            assert_relative_eq!((a - b).norm(), 0.0, epsilon = 1e-12);
        }
        for m in &blended {
            assert_relative_eq!((m.rot - Matrix3::identity()).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!(m.tr.norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_follow_the_joint_rigidly() {
        let m = model();
        let mut pose = Pose::identity();
        pose.axis_angle[0] = 0.7; // thumb base flexion
        pose.global_translation = Vector3::new(0.02, 0.0, 0.01);
        let (posed_joints, skinning) = forward_kinematics_full(&m, &pose).unwrap();

        let joint = FINGER_BASE[0] + 1;
        let pts = vec![m.canonical_joints[joint]];
        let mut w = vec![0.0; JOINT_COUNT];
        w[joint] = 1.0;
        let (posed, _) = lbs_transform(&m, &pose, &pts, &w).unwrap();
        // The canonical joint position skinned to its own joint lands on the
        // posed joint.
        assert_relative_eq!((posed[0] - posed_joints[joint]).norm(), 0.0, epsilon = 1e-12);
        let _ = skinning;
    }

    #[test]
    fn fifty_fifty_blend_of_translations_is_the_midpoint() {
        // Two pure-translation transforms blended 50/50 translate by the mean.
        let a = RigidTransform { rot: Matrix3::identity(), tr: Vector3::new(0.1, 0.0, 0.0) };
        let b = RigidTransform { rot: Matrix3::identity(), tr: Vector3::new(0.0, 0.2, 0.0) };
        let skinning = vec![a, b];
        let pts = vec![Vector3::new(0.0, 0.0, 0.3)];
        let w = vec![0.5, 0.5];
        // Pad transforms/weights to the full joint count for the API.
        let mut full = vec![RigidTransform::identity(); JOINT_COUNT];
        full[0] = skinning[0];
        full[1] = skinning[1];
        let mut wfull = vec![0.0; JOINT_COUNT];
        wfull[0] = w[0];
        wfull[1] = w[1];
        let (posed, _) = blend_transforms(&full, &pts, &wfull).unwrap();
        assert_relative_eq!(
            (posed[0] - Vector3::new(0.05, 0.1, 0.3)).norm(),
            0.0,
            epsilon = 1e-15
        );
    }

    #[test]
    fn bad_weight_row_is_rejected() {
        let m = model();
        let pts = vec![Vector3::new(0.0, 0.05, 0.0)];
        let w = vec![0.3; JOINT_COUNT]; // sums to 6.3
        assert!(lbs_transform(&m, &Pose::identity(), &pts, &w).is_err());
    }

    #[test]
    fn skeleton_description_round_trips_as_json() {
        let desc = SkeletonDescription::from_model(&model()).unwrap();
        let text = serde_json::to_string_pretty(&desc).unwrap();
        let back: SkeletonDescription = serde_json::from_str(&text).unwrap();
        assert_eq!(back.joint_names.len(), JOINT_COUNT);
        assert_eq!(back.edges.len(), 24); // 20 active + 4 removed
    }

    #[test]
    fn pose_magnitude_limit_enforced() {
        let mut pose = Pose::<f64>::identity();
        pose.axis_angle[0] = 4.0;
        assert!(pose.validate().is_err());
    }
}
