//! Structural Coordinate Space: the hybrid static/dynamic bone basis and the
//! per-Gaussian angular-radial coordinate transformation.
//!
//! Every posed Gaussian center receives one scalar per basis bone: the cosine
//! between the Gaussian-to-bone-start vector and the bone vector, damped by a
//! Gaussian radial falloff. Static bones are the posed static topology edges;
//! dynamic bones are generated per pose by attention-weighted interpolation
//! along the static bones plus bounded learned offsets.

use crate::error::Error;
use crate::math::{real, sigmoid, sigmoid_grad_from_output, Real};
use crate::nn::{GradientTape, Mlp, MlpGrads};
use crate::skeleton::{BoneTopology, Pose, SkeletonModel, JOINT_COUNT, POSE_DOF};
use nalgebra::Vector3;

/// Default radial decay (meters).
pub const DEFAULT_TAU: f64 = 0.08;
/// Default dynamic bone count.
pub const DEFAULT_DYNAMIC_BONES: usize = 20;
/// Bound on the learned endpoint offsets (meters): `delta = 0.02 * tanh(raw)`.
pub const DELTA_BOUND: f64 = 0.02;
/// Minimum admissible bone length; shorter dynamic bones get regularized.
pub const MIN_BONE_LENGTH: f64 = 1e-8;
/// Length added along the dominant static bone when regularizing.
pub const REGULARIZE_LENGTH: f64 = 1e-6;

/// Provenance of one basis bone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoneSource {
    /// Index into the static topology edge list.
    Static(usize),
    /// Dynamic generator slot index.
    Dynamic(usize),
}

/// The per-pose bone basis: posed segments plus provenance.
#[derive(Debug, Clone)]
pub struct StructuralBasis<T: Real> {
    pub starts: Vec<Vector3<T>>,
    pub ends: Vec<Vector3<T>>,
    pub provenance: Vec<BoneSource>,
}

impl<T: Real> StructuralBasis<T> {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Static-only basis from posed joints.
    pub fn from_static(topology: &BoneTopology, posed_joints: &[Vector3<T>]) -> Self {
        let mut basis = Self { starts: Vec::new(), ends: Vec::new(), provenance: Vec::new() };
        for (e, &(u, v)) in topology.edges.iter().enumerate() {
            basis.starts.push(posed_joints[u]);
            basis.ends.push(posed_joints[v]);
            basis.provenance.push(BoneSource::Static(e));
        }
        basis
    }

    pub fn push_dynamic(&mut self, slot: usize, p: Vector3<T>, q: Vector3<T>) {
        self.starts.push(p);
        self.ends.push(q);
        self.provenance.push(BoneSource::Dynamic(slot));
    }

    pub fn validate(&self) -> Result<(), Error> {
        for m in 0..self.len() {
            if (self.ends[m] - self.starts[m]).norm() <= real(MIN_BONE_LENGTH) {
                return Err(Error::Contract(format!("degenerate basis bone {m}")));
            }
        }
        Ok(())
    }
}

/// Fixed bone-adjacency smoothing kernel over the static topology:
/// 0.5 on the diagonal, 0.25 between bones sharing a joint, 0 elsewhere.
#[derive(Debug, Clone)]
pub struct SmoothingKernel<T: Real> {
    pub n: usize,
    /// Row-major n x n matrix.
    pub k: Vec<T>,
}

impl<T: Real> SmoothingKernel<T> {
    pub fn from_topology(topology: &BoneTopology) -> Self {
        let n = topology.len();
        let mut k = vec![T::zero(); n * n];
        for a in 0..n {
            k[a * n + a] = real(0.5);
            let (au, av) = topology.edges[a];
            for b in a + 1..n {
                let (bu, bv) = topology.edges[b];
                let shares = au == bu || au == bv || av == bu || av == bv;
                if shares {
                    k[a * n + b] = real(0.25);
                    k[b * n + a] = real(0.25);
                }
            }
        }
        Self { n, k }
    }

    /// Kernel for an explicit edge list (tests use small synthetic chains).
    pub fn from_edges(edges: &[(usize, usize)]) -> Self {
        let topo = BoneTopology { edges: edges.to_vec(), tags: vec![], removed: vec![] };
        Self::from_topology(&topo)
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.n];
        for r in 0..self.n {
            let row = &self.k[r * self.n..(r + 1) * self.n];
            let mut acc = T::zero();
            for (kv, xv) in row.iter().zip(x) {
                acc += *kv * *xv;
            }
            out[r] = acc;
        }
        out
    }
}

fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut max = logits[0];
    for &v in logits.iter().skip(1) {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = exps.iter().fold(T::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / sum).collect()
}

/// Smoothed attention over static bones: softmax, kernel mix, L1 normalize.
pub fn smooth_attention<T: Real>(logits: &[T], kernel: &SmoothingKernel<T>) -> Vec<T> {
    assert_eq!(logits.len(), kernel.n, "logit width must match kernel");
    let sm = softmax(logits);
    let mixed = kernel.apply(&sm);
    let l1: T = mixed.iter().fold(T::zero(), |a, &b| a + b);
    // Softmax output is strictly positive and every kernel row carries at
    // least the 0.5 self weight, so the norm cannot vanish.
    assert!(l1 > T::zero(), "smoothing kernel produced a zero-mass vector");
    mixed.into_iter().map(|v| v / l1).collect()
}

/// Backward of [`smooth_attention`]: cotangent on the weights to cotangent on
/// the logits.
pub fn smooth_attention_backward<T: Real>(
    logits: &[T],
    kernel: &SmoothingKernel<T>,
    d_weights: &[T],
) -> Vec<T> {
    let sm = softmax(logits);
    let mixed = kernel.apply(&sm);
    let l1: T = mixed.iter().fold(T::zero(), |a, &b| a + b);
    let w: Vec<T> = mixed.iter().map(|&v| v / l1).collect();
    // y = K s, w = y / sum(y):  dL/dy_i = (g_i - <g, w>) / sum(y)
    let gdotw: T = d_weights.iter().zip(&w).map(|(&g, &wv)| g * wv).fold(T::zero(), |a, b| a + b);
    let dy: Vec<T> = d_weights.iter().map(|&g| (g - gdotw) / l1).collect();
    // K symmetric: ds = K dy.
    let ds = kernel.apply(&dy);
    // Softmax backward: dlogits = s .* (ds - <ds, s>)
    let dot: T = ds.iter().zip(&sm).map(|(&a, &b)| a * b).fold(T::zero(), |a, b| a + b);
    sm.iter().zip(&ds).map(|(&s, &d)| s * (d - dot)).collect()
}

/// Raw generator outputs for one dynamic slot, pre-squashing.
#[derive(Debug, Clone)]
pub struct DynamicSlotRaw<T: Real> {
    pub w_start_logits: Vec<T>,
    pub w_end_logits: Vec<T>,
    pub t_start_raw: T,
    pub t_end_raw: T,
    pub delta_p_raw: Vector3<T>,
    pub delta_q_raw: Vector3<T>,
}

/// Squashed per-slot parameters (what the bone endpoints consume).
#[derive(Debug, Clone)]
pub struct DynamicBoneParams<T: Real> {
    pub w_start: Vec<T>,
    pub w_end: Vec<T>,
    pub t_start: T,
    pub t_end: T,
    pub delta_p: Vector3<T>,
    pub delta_q: Vector3<T>,
}

/// Scalars per slot in the generator head: two attention logit blocks, two
/// interpolation factors, two offset vectors.
pub fn generator_slot_width(static_bones: usize) -> usize {
    static_bones * 2 + 2 + 6
}

pub fn split_generator_output<T: Real>(
    output: &[T],
    static_bones: usize,
    slots: usize,
) -> Vec<DynamicSlotRaw<T>> {
    let w = generator_slot_width(static_bones);
    assert_eq!(output.len(), w * slots, "generator head width mismatch");
    (0..slots)
        .map(|s| {
            let o = &output[s * w..(s + 1) * w];
            DynamicSlotRaw {
                w_start_logits: o[0..static_bones].to_vec(),
                w_end_logits: o[static_bones..2 * static_bones].to_vec(),
                t_start_raw: o[2 * static_bones],
                t_end_raw: o[2 * static_bones + 1],
                delta_p_raw: Vector3::new(
                    o[2 * static_bones + 2],
                    o[2 * static_bones + 3],
                    o[2 * static_bones + 4],
                ),
                delta_q_raw: Vector3::new(
                    o[2 * static_bones + 5],
                    o[2 * static_bones + 6],
                    o[2 * static_bones + 7],
                ),
            }
        })
        .collect()
}

impl<T: Real> DynamicSlotRaw<T> {
    /// Squash: attention smoothing, sigmoid interpolation factors, bounded
    /// tanh offsets. `use_t = false` pins t at 0.5; `use_delta = false` zeroes
    /// the offsets (the dynamic-component ablations).
    pub fn squash(
        &self,
        kernel: &SmoothingKernel<T>,
        use_t: bool,
        use_delta: bool,
    ) -> DynamicBoneParams<T> {
        let half = real::<T>(0.5);
        let bound = real::<T>(DELTA_BOUND);
        DynamicBoneParams {
            w_start: smooth_attention(&self.w_start_logits, kernel),
            w_end: smooth_attention(&self.w_end_logits, kernel),
            t_start: if use_t { sigmoid(self.t_start_raw) } else { half },
            t_end: if use_t { sigmoid(self.t_end_raw) } else { half },
            delta_p: if use_delta { self.delta_p_raw.map(|v| bound * v.tanh()) } else { Vector3::zeros() },
            delta_q: if use_delta { self.delta_q_raw.map(|v| bound * v.tanh()) } else { Vector3::zeros() },
        }
    }
}

/// One endpoint of a dynamic bone: attention-weighted interpolation along the
/// posed static bones plus the offset.
pub fn dynamic_endpoint<T: Real>(
    weights: &[T],
    t: T,
    delta: &Vector3<T>,
    topology: &BoneTopology,
    posed_joints: &[Vector3<T>],
) -> Vector3<T> {
    let mut p = Vector3::zeros();
    for (b, &(u, v)) in topology.edges.iter().enumerate() {
        let interp = posed_joints[u].scale(T::one() - t) + posed_joints[v].scale(t);
        p += interp.scale(weights[b]);
    }
    p + delta
}

/// Gradients of [`dynamic_endpoint`] with respect to the squashed parameters.
pub struct EndpointGrads<T: Real> {
    pub d_weights: Vec<T>,
    pub d_t: T,
    pub d_delta: Vector3<T>,
}

pub fn dynamic_endpoint_backward<T: Real>(
    weights: &[T],
    t: T,
    topology: &BoneTopology,
    posed_joints: &[Vector3<T>],
    d_point: &Vector3<T>,
) -> EndpointGrads<T> {
    let mut d_weights = vec![T::zero(); weights.len()];
    let mut d_t = T::zero();
    for (b, &(u, v)) in topology.edges.iter().enumerate() {
        let interp = posed_joints[u].scale(T::one() - t) + posed_joints[v].scale(t);
        d_weights[b] = d_point.dot(&interp);
        d_t += weights[b] * d_point.dot(&(posed_joints[v] - posed_joints[u]));
    }
    EndpointGrads { d_weights, d_t, d_delta: *d_point }
}

/// Build both endpoints of a dynamic bone, regularizing a degenerate segment
/// by lengthening it along the dominant static bone's direction.
pub fn dynamic_bone_segment<T: Real>(
    params: &DynamicBoneParams<T>,
    topology: &BoneTopology,
    posed_joints: &[Vector3<T>],
) -> (Vector3<T>, Vector3<T>) {
    let p = dynamic_endpoint(&params.w_start, params.t_start, &params.delta_p, topology, posed_joints);
    let mut q =
        dynamic_endpoint(&params.w_end, params.t_end, &params.delta_q, topology, posed_joints);
    if (q - p).norm() < real(MIN_BONE_LENGTH) {
        let mut dominant = 0usize;
        let mut best = T::min_value().unwrap();
        for b in 0..topology.len() {
            let mass = params.w_start[b] + params.w_end[b];
            if mass > best {
                best = mass;
                dominant = b;
            }
        }
        let (u, v) = topology.edges[dominant];
        let dir = (posed_joints[v] - posed_joints[u]).normalize();
        q += dir.scale(real(REGULARIZE_LENGTH));
    }
    (p, q)
}

/// The dynamic-bone generator: a gated MLP from pose + canonical joints to
/// per-slot raw parameters.
#[derive(Debug, Clone)]
pub struct DynamicBoneGenerator<T: Real> {
    pub net: Mlp<T>,
    pub slots: usize,
    pub static_bones: usize,
}

impl<T: Real> DynamicBoneGenerator<T> {
    pub fn generator_input_width() -> usize {
        POSE_DOF + JOINT_COUNT * 3
    }

    /// A generator with the stated hidden width. The gate opens at 1 so the
    /// slots differ from the start; weights are small so bones begin near the
    /// attention-mixed midpoints.
    pub fn new(slots: usize, static_bones: usize, hidden: usize) -> Self {
        let dims = vec![
            Self::generator_input_width(),
            hidden,
            hidden,
            generator_slot_width(static_bones) * slots,
        ];
        Self { net: Mlp::new(&dims, "dynamic_bone_generator").with_gate(T::one()), slots, static_bones }
    }

    pub fn input_vector(model: &SkeletonModel<T>, pose: &Pose<T>) -> Vec<T> {
        let mut input = Vec::with_capacity(Self::generator_input_width());
        input.extend_from_slice(&pose.axis_angle);
        for j in &model.canonical_joints {
            input.push(j.x);
            input.push(j.y);
            input.push(j.z);
        }
        input
    }
}

/// Full dynamic-bone generation: net forward, squash, endpoint build.
/// Returns segments, squashed parameters, raw slots, and the tape needed for
/// the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn generate_dynamic_bones<T: Real>(
    generator: &DynamicBoneGenerator<T>,
    model: &SkeletonModel<T>,
    pose: &Pose<T>,
    posed_joints: &[Vector3<T>],
    topology: &BoneTopology,
    kernel: &SmoothingKernel<T>,
    use_t: bool,
    use_delta: bool,
) -> Result<DynamicBones<T>, Error> {
    let input = DynamicBoneGenerator::input_vector(model, pose);
    let mut tape = GradientTape::default();
    let output = generator.net.forward_tape(&input, &mut tape)?;
    let raw = split_generator_output(&output, generator.static_bones, generator.slots);
    let mut params = Vec::with_capacity(generator.slots);
    let mut segments = Vec::with_capacity(generator.slots);
    for slot in &raw {
        let p = slot.squash(kernel, use_t, use_delta);
        let seg = dynamic_bone_segment(&p, topology, posed_joints);
        segments.push(seg);
        params.push(p);
    }
    Ok(DynamicBones { segments, params, raw, tape })
}

pub struct DynamicBones<T: Real> {
    pub segments: Vec<(Vector3<T>, Vector3<T>)>,
    pub params: Vec<DynamicBoneParams<T>>,
    pub raw: Vec<DynamicSlotRaw<T>>,
    pub tape: GradientTape<T>,
}

/// Backward from per-slot endpoint cotangents into the generator parameters.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_bones_backward<T: Real>(
    generator: &DynamicBoneGenerator<T>,
    bones: &DynamicBones<T>,
    topology: &BoneTopology,
    posed_joints: &[Vector3<T>],
    kernel: &SmoothingKernel<T>,
    use_t: bool,
    use_delta: bool,
    d_segments: &[(Vector3<T>, Vector3<T>)],
    grads: &mut MlpGrads<T>,
) -> Result<(), Error> {
    let nb = generator.static_bones;
    let slot_width = generator_slot_width(nb);
    let mut d_output = vec![T::zero(); slot_width * generator.slots];
    let bound = real::<T>(DELTA_BOUND);
    for (s, (dp, dq)) in d_segments.iter().enumerate() {
        let raw = &bones.raw[s];
        let params = &bones.params[s];
        let out = &mut d_output[s * slot_width..(s + 1) * slot_width];

        let gp = dynamic_endpoint_backward(&params.w_start, params.t_start, topology, posed_joints, dp);
        let gq = dynamic_endpoint_backward(&params.w_end, params.t_end, topology, posed_joints, dq);

        let dws = smooth_attention_backward(&raw.w_start_logits, kernel, &gp.d_weights);
        let dwe = smooth_attention_backward(&raw.w_end_logits, kernel, &gq.d_weights);
        out[..nb].copy_from_slice(&dws);
        out[nb..2 * nb].copy_from_slice(&dwe);
        if use_t {
            out[2 * nb] = gp.d_t * sigmoid_grad_from_output(params.t_start);
            out[2 * nb + 1] = gq.d_t * sigmoid_grad_from_output(params.t_end);
        }
        if use_delta {
            for c in 0..3 {
                let tp = raw.delta_p_raw[c].tanh();
                let tq = raw.delta_q_raw[c].tanh();
                out[2 * nb + 2 + c] = gp.d_delta[c] * bound * (T::one() - tp * tp);
                out[2 * nb + 5 + c] = gq.d_delta[c] * bound * (T::one() - tq * tq);
            }
        }
    }
    generator.net.backward(&bones.tape, &d_output, grads)?;
    Ok(())
}

/// Per-Gaussian descriptors: `P[m] = d_m * rho_m` for every basis bone.
#[derive(Debug, Clone)]
pub struct StructuralCoordinates<T: Real> {
    /// Flattened N x M, row-major per Gaussian.
    pub values: Vec<T>,
    pub bones: usize,
    pub tau: T,
}

impl<T: Real> StructuralCoordinates<T> {
    pub fn row(&self, i: usize) -> &[T] {
        &self.values[i * self.bones..(i + 1) * self.bones]
    }
}

/// Descriptor of one Gaussian against one bone.
#[inline]
pub fn descriptor_entry<T: Real>(
    x: &Vector3<T>,
    start: &Vector3<T>,
    end: &Vector3<T>,
    tau: T,
) -> T {
    let r = start - x;
    let b = end - start;
    let rn = r.norm();
    if rn == T::zero() {
        // Direction-dependent limit; zero is the symmetric convention.
        return T::zero();
    }
    let bn = b.norm();
    let rho = r.dot(&b) / (rn * bn);
    let d = (-(rn * rn) / (tau * tau)).exp();
    d * rho
}

/// Compute descriptors for all Gaussians against the full basis.
pub fn structural_coordinates<T: Real>(
    x_lbs: &[Vector3<T>],
    basis: &StructuralBasis<T>,
    tau: T,
) -> StructuralCoordinates<T> {
    let m = basis.len();
    let mut values = vec![T::zero(); x_lbs.len() * m];
    for (i, x) in x_lbs.iter().enumerate() {
        let row = &mut values[i * m..(i + 1) * m];
        for (mi, entry) in row.iter_mut().enumerate() {
            *entry = descriptor_entry(x, &basis.starts[mi], &basis.ends[mi], tau);
        }
    }
    StructuralCoordinates { values, bones: m, tau }
}

/// Analytic gradient of one descriptor entry with respect to the Gaussian
/// position, the bone start, and the bone end.
pub struct DescriptorGrads<T: Real> {
    pub d_x: Vector3<T>,
    pub d_start: Vector3<T>,
    pub d_end: Vector3<T>,
}

pub fn descriptor_entry_backward<T: Real>(
    x: &Vector3<T>,
    start: &Vector3<T>,
    end: &Vector3<T>,
    tau: T,
    cotangent: T,
) -> DescriptorGrads<T> {
    let r = start - x;
    let b = end - start;
    let rn = r.norm();
    if rn == T::zero() {
        // Subgradient at the singular point.
        return DescriptorGrads {
            d_x: Vector3::zeros(),
            d_start: Vector3::zeros(),
            d_end: Vector3::zeros(),
        };
    }
    let bn = b.norm();
    let rhat = r / rn;
    let bhat = b / bn;
    let rho = rhat.dot(&bhat);
    let d = (-(rn * rn) / (tau * tau)).exp();

    // d(entry)/dr = rho * dd/dr + d * drho/dr
    let two = real::<T>(2.0);
    let dd_dr = r.scale(-two * d / (tau * tau));
    let drho_dr = (bhat - rhat.scale(rho)).scale(T::one() / rn);
    let de_dr = dd_dr.scale(rho) + drho_dr.scale(d);
    // d(entry)/db = d * drho/db
    let drho_db = (rhat - bhat.scale(rho)).scale(T::one() / bn);
    let de_db = drho_db.scale(d);

    // r = start - x, b = end - start.
    DescriptorGrads {
        d_x: -de_dr.scale(cotangent),
        d_start: (de_dr - de_db).scale(cotangent),
        d_end: de_db.scale(cotangent),
    }
}

/// Full M x 3 Jacobian of one Gaussian's descriptor row with respect to its
/// posed position.
pub fn scs_jacobian<T: Real>(
    x: &Vector3<T>,
    basis: &StructuralBasis<T>,
    tau: T,
) -> Vec<Vector3<T>> {
    (0..basis.len())
        .map(|m| {
            descriptor_entry_backward(x, &basis.starts[m], &basis.ends[m], tau, T::one()).d_x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::build_static_topology;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn chain3() -> SmoothingKernel<f64> {
        // b0=(0,1), b1=(1,2), b2=(2,3): a three-bone chain.
        SmoothingKernel::from_edges(&[(0, 1), (1, 2), (2, 3)])
    }

    #[test]
    fn kernel_entries_follow_the_adjacency_rule() {
        let k = chain3();
        assert_eq!(k.n, 3);
        let want = [0.5, 0.25, 0.0, 0.25, 0.5, 0.25, 0.0, 0.25, 0.5];
        for (a, b) in k.k.iter().zip(want.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn equal_logits_on_chain_give_point3_point4_point3() {
        let w = smooth_attention(&[1.0, 1.0, 1.0], &chain3());
        assert_relative_eq!(w[0], 0.3, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.4, epsilon = 1e-12);
        assert_relative_eq!(w[2], 0.3, epsilon = 1e-12);
    }

    #[test]
    fn single_isolated_bone_gets_all_mass() {
        let k = SmoothingKernel::from_edges(&[(0, 1)]);
        let w = smooth_attention(&[-3.7], &k);
        assert_relative_eq!(w[0], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn one_hot_logits_concentrate_per_kernel_row() {
        // Softmax of (+50, 0, 0) is essentially one-hot; the kernel row of b0
        // is (0.5, 0.25, 0), so the normalized weights are (2/3, 1/3, 0).
        let w = smooth_attention(&[50.0, 0.0, 0.0], &chain3());
        assert_relative_eq!(w[0], 2.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(w[1], 1.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(w[2], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn smooth_attention_is_a_probability_vector() {
        let model = crate::skeleton::SkeletonModel::<f64>::with_template_count(16);
        let topo = build_static_topology(&model).unwrap();
        let kernel = SmoothingKernel::from_topology(&topo);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let logits: Vec<f64> = (0..topo.len()).map(|_| rng.random_range(-30.0..30.0)).collect();
            let w = smooth_attention(&logits, &kernel);
            let sum: f64 = w.iter().sum();
            assert!(w.iter().all(|&v| v >= 0.0));
            assert_relative_eq!(sum, 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn smooth_attention_backward_matches_fd() {
        let kernel = chain3();
        let logits = [0.3, -0.9, 1.4];
        let cot = [0.7, -0.2, 0.5];
        let grad = smooth_attention_backward(&logits, &kernel, &cot);
        let loss = |ls: &[f64]| -> f64 {
            smooth_attention(ls, &kernel).iter().zip(&cot).map(|(w, c)| w * c).sum()
        };
        for i in 0..3 {
            let mut p = logits.to_vec();
            let mut m = logits.to_vec();
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert_relative_eq!(grad[i], fd, max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    fn posed_default() -> (crate::skeleton::SkeletonModel<f64>, BoneTopology, Vec<Vector3<f64>>) {
        let model: crate::skeleton::SkeletonModel<f64> =
            crate::skeleton::SkeletonModel::with_template_count(16);
        let topo = build_static_topology(&model).unwrap();
        let mut pose = Pose::identity();
        pose.axis_angle[3] = 0.4;
        pose.axis_angle[12] = 0.8;
        let posed = crate::skeleton::forward_kinematics(&model, &pose).unwrap();
        (model, topo, posed)
    }

    #[test]
    fn one_hot_endpoint_cases_reproduce_posed_joints() {
        let (_, topo, posed) = posed_default();
        for (b, &(u, v)) in topo.edges.iter().enumerate().take(5) {
            let mut w = vec![0.0; topo.len()];
            w[b] = 1.0;
            let zero = Vector3::zeros();
            let p0 = dynamic_endpoint(&w, 0.0, &zero, &topo, &posed);
            let p1 = dynamic_endpoint(&w, 1.0, &zero, &topo, &posed);
            assert_relative_eq!((p0 - posed[u]).norm(), 0.0, epsilon = 1e-12);
            assert_relative_eq!((p1 - posed[v]).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn uniform_attention_midpoints_mix_with_kernel_weights() {
        // Three-bone chain with joints on a line; uniform logits and t = 0.5
        // give p = 0.3 m0 + 0.4 m1 + 0.3 m2 with m_b the bone midpoints.
        let joints = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(2.0, 1.0, 0.0),
            Vector3::new(3.0, 1.0, -1.0),
        ];
        let edges = [(0usize, 1usize), (1, 2), (2, 3)];
        let topo = BoneTopology { edges: edges.to_vec(), tags: vec![], removed: vec![] };
        let kernel = SmoothingKernel::from_topology(&topo);
        let w = smooth_attention(&[0.0, 0.0, 0.0], &kernel);
        let p = dynamic_endpoint(&w, 0.5, &Vector3::zeros(), &topo, &joints);
        let mids: Vec<Vector3<f64>> =
            edges.iter().map(|&(u, v)| (joints[u] + joints[v]) * 0.5).collect();
        let want = mids[0] * 0.3 + mids[1] * 0.4 + mids[2] * 0.3;
        assert_relative_eq!((p - want).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn endpoints_with_zero_delta_stay_in_the_convex_hull() {
        let (_, topo, posed) = posed_default();
        let kernel = SmoothingKernel::from_topology(&topo);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut lo = posed[0];
        let mut hi = posed[0];
        for p in &posed {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        for _ in 0..50 {
            let logits: Vec<f64> = (0..topo.len()).map(|_| rng.random_range(-4.0..4.0)).collect();
            let w = smooth_attention(&logits, &kernel);
            let t: f64 = rng.random_range(0.0..1.0);
            let p = dynamic_endpoint(&w, t, &Vector3::zeros(), &topo, &posed);
            // Convex combinations of segment points stay inside the joint AABB.
            for c in 0..3 {
                assert!(p[c] >= lo[c] - 1e-12 && p[c] <= hi[c] + 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_dynamic_bone_is_regularized() {
        let (_, topo, posed) = posed_default();
        let n = topo.len();
        let params = DynamicBoneParams {
            w_start: vec![1.0 / n as f64; n],
            w_end: vec![1.0 / n as f64; n],
            t_start: 0.5,
            t_end: 0.5,
            delta_p: Vector3::zeros(),
            delta_q: Vector3::zeros(),
        };
        let (p, q) = dynamic_bone_segment(&params, &topo, &posed);
        assert!((q - p).norm() >= MIN_BONE_LENGTH);
    }

    #[test]
    fn descriptor_at_bone_start_is_zero() {
        let x = Vector3::new(0.1, 0.2, 0.3);
        let e = descriptor_entry(&x, &x, &Vector3::new(0.5, 0.2, 0.3), 0.08);
        assert_eq!(e, 0.0);
    }

    #[test]
    fn descriptor_at_tau_parallel_is_inverse_e() {
        // |r| = tau and r parallel to b: entry = exp(-1).
        let tau = 0.08;
        let x = Vector3::new(0.0, 0.0, 0.0);
        let start = Vector3::new(tau, 0.0, 0.0);
        let end = Vector3::new(2.0 * tau, 0.0, 0.0);
        let e = descriptor_entry(&x, &start, &end, tau);
        assert_relative_eq!(e, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn descriptor_matches_independent_evaluation() {
        // r = (0.04, 0, 0), b = (1, 1, 0):
        // rho = 1/sqrt(2), d = exp(-0.25), entry = exp(-0.25)/sqrt(2).
        let tau = 0.08;
        let x = Vector3::new(0.0, 0.0, 0.0);
        let start = Vector3::new(0.04, 0.0, 0.0);
        let end = start + Vector3::new(1.0, 1.0, 0.0);
        let e = descriptor_entry(&x, &start, &end, tau);
        let want = (-0.25f64).exp() / 2.0f64.sqrt();
        assert_relative_eq!(e, want, epsilon = 1e-12);
        assert_relative_eq!(e, 0.550695, epsilon = 1e-5);
    }

    #[test]
    fn descriptor_entries_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let x = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let s = Vector3::new(
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
                rng.random_range(-0.3..0.3),
            );
            let b = Vector3::new(
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
                rng.random_range(-0.2..0.2),
            );
            if b.norm() < 1e-6 {
                continue;
            }
            let e = descriptor_entry(&x, &s, &(s + b), 0.08);
            assert!((-1.0..=1.0).contains(&e));
        }
    }

    #[test]
    fn locality_bound_at_five_tau() {
        let tau = 0.08f64;
        let x = Vector3::new(0.0, 0.0, 0.0);
        let start = Vector3::new(5.0 * tau, 0.0, 0.0);
        let end = Vector3::new(6.0 * tau, 0.0, 0.0);
        let e = descriptor_entry(&x, &start, &end, tau);
        assert!(e.abs() <= (-25.0f64).exp() + 1e-300);
    }

    #[test]
    fn jacobian_zero_at_singularity() {
        let x = Vector3::new(0.1, 0.2, 0.3);
        let g = descriptor_entry_backward(&x, &x, &Vector3::new(0.4, 0.2, 0.3), 0.08, 1.0);
        assert_eq!(g.d_x, Vector3::zeros());
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let tau = 0.08;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let x = Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let s = Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            );
            let e = s + Vector3::new(
                rng.random_range(0.02..0.1),
                rng.random_range(-0.05..0.05),
                rng.random_range(-0.05..0.05),
            );
            if (s - x).norm() < 1e-3 {
                continue;
            }
            let g = descriptor_entry_backward(&x, &s, &e, tau, 1.0);
            let h = 1e-6;
            for c in 0..3 {
                let mut xp = x;
                let mut xm = x;
                xp[c] += h;
                xm[c] -= h;
                let fd = (descriptor_entry(&xp, &s, &e, tau)
                    - descriptor_entry(&xm, &s, &e, tau))
                    / (2.0 * h);
                assert_relative_eq!(g.d_x[c], fd, max_relative = 1e-5, epsilon = 1e-9);

                let mut sp = s;
                let mut sm = s;
                sp[c] += h;
                sm[c] -= h;
                let fd = (descriptor_entry(&x, &sp, &e, tau)
                    - descriptor_entry(&x, &sm, &e, tau))
                    / (2.0 * h);
                assert_relative_eq!(g.d_start[c], fd, max_relative = 1e-5, epsilon = 1e-9);

                let mut ep = e;
                let mut em = e;
                ep[c] += h;
                em[c] -= h;
                let fd = (descriptor_entry(&x, &s, &ep, tau)
                    - descriptor_entry(&x, &s, &em, tau))
                    / (2.0 * h);
                assert_relative_eq!(g.d_end[c], fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn radial_derivative_matches_symbolic_form() {
        // Pure radial direction with rho fixed at 1:
        // d entry / d |r| = -2 |r| / tau^2 * exp(-|r|^2 / tau^2).
        let tau = 0.08f64;
        let rn = 0.05f64;
        let x = Vector3::new(0.0, 0.0, 0.0);
        let start = Vector3::new(rn, 0.0, 0.0);
        let end = Vector3::new(rn + 1.0, 0.0, 0.0);
        let g = descriptor_entry_backward(&x, &start, &end, tau, 1.0);
        // Moving x toward the bone start shrinks |r| at unit rate, so the
        // position gradient is minus the radial derivative.
        let want = -2.0 * rn / (tau * tau) * (-(rn * rn) / (tau * tau)).exp();
        assert_relative_eq!(g.d_x[0], -want, epsilon = 1e-10);
    }

    #[test]
    fn descriptors_are_rigid_invariant() {
        let (_model, topo, posed) = posed_default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let basis = StructuralBasis::from_static(&topo, &posed);
        let xs: Vec<Vector3<f64>> = (0..10)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-0.1..0.1),
                    rng.random_range(0.0..0.15),
                    rng.random_range(-0.05..0.05),
                )
            })
            .collect();
        let p0 = structural_coordinates(&xs, &basis, 0.08);

        let rot = crate::skeleton::axis_angle_to_matrix(&Vector3::new(0.7, -0.4, 1.1));
        let t = Vector3::new(0.3, -0.2, 0.5);
        let moved_basis = StructuralBasis {
            starts: basis.starts.iter().map(|p| rot * p + t).collect(),
            ends: basis.ends.iter().map(|p| rot * p + t).collect(),
            provenance: basis.provenance.clone(),
        };
        let moved_xs: Vec<Vector3<f64>> = xs.iter().map(|p| rot * p + t).collect();
        let p1 = structural_coordinates(&moved_xs, &moved_basis, 0.08);
        for (a, b) in p0.values.iter().zip(&p1.values) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn generator_round_trip_and_backward_fd() {
        let model = crate::skeleton::SkeletonModel::<f64>::with_template_count(16);
        let topo = build_static_topology(&model).unwrap();
        let kernel = SmoothingKernel::from_topology(&topo);
        let mut pose = Pose::identity();
        pose.axis_angle[4] = 0.6;
        let posed = crate::skeleton::forward_kinematics(&model, &pose).unwrap();
        let generator = DynamicBoneGenerator::<f64>::new(2, topo.len(), 16);

        let bones = generate_dynamic_bones(
            &generator, &model, &pose, &posed, &topo, &kernel, true, true,
        )
        .unwrap();
        assert_eq!(bones.segments.len(), 2);

        // FD check of the full generator chain on a linear functional of the
        // segment endpoints.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let cots: Vec<(Vector3<f64>, Vector3<f64>)> = (0..2)
            .map(|_| {
                (
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                    Vector3::new(rng.random(), rng.random(), rng.random()),
                )
            })
            .collect();
        let mut grads = MlpGrads::zeros_like(&generator.net);
        dynamic_bones_backward(
            &generator, &bones, &topo, &posed, &kernel, true, true, &cots, &mut grads,
        )
        .unwrap();

        let loss = |g: &DynamicBoneGenerator<f64>| -> f64 {
            let b = generate_dynamic_bones(g, &model, &pose, &posed, &topo, &kernel, true, true)
                .unwrap();
            b.segments
                .iter()
                .zip(&cots)
                .map(|((p, q), (cp, cq))| p.dot(cp) + q.dot(cq))
                .sum()
        };
        let h = 1e-6;
        for l in 0..generator.net.weights.len() {
            for i in (0..generator.net.weights[l].len()).step_by(971) {
                let mut gp = generator.clone();
                gp.net.weights[l][i] += h;
                let mut gm = generator.clone();
                gm.net.weights[l][i] -= h;
                let fd = (loss(&gp) - loss(&gm)) / (2.0 * h);
                assert_relative_eq!(grads.weights[l][i], fd, max_relative = 1e-4, epsilon = 1e-8);
            }
        }
    }
}
