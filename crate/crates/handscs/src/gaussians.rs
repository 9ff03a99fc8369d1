//! The Gaussian cloud: attributes, embedding-based deformation, composition
//! into posed render inputs, and densification control.
//!
//! Covariances are stored factored as unit quaternion + log-scales, so every
//! realized covariance is symmetric PSD by construction. Deformation offsets
//! are predicted by three gated decoders and applied in canonical space
//! before skinning.

use crate::error::Error;
use crate::knn::UniformGrid;
use crate::math::{
    quat_from_vec, quat_from_vec_backward, quat_identity, quat_mul, quat_mul_backward,
    quat_normalize, quat_normalize_backward, quat_to_matrix, quat_to_matrix_backward, real,
    sigmoid, Quat, Real,
};
use crate::nn::{GradientTape, Mlp, MlpGrads};
use crate::skeleton::{RigidTransform, SkeletonModel, JOINT_COUNT};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};

/// Default per-Gaussian embedding width.
pub const DEFAULT_EMBED_DIM: usize = 16;
/// Width of the flattened LBS motion embedding.
pub const MOTION_EMBED_DIM: usize = 12;

#[derive(Debug, Clone)]
pub struct GaussianCloud<T: Real> {
    pub positions: Vec<Vector3<T>>,
    /// Stored quaternions; normalized on use.
    pub rotations: Vec<Quat<T>>,
    pub log_scales: Vec<Vector3<T>>,
    pub colors: Vec<Vector3<T>>,
    pub opacity_logits: Vec<T>,
    /// Geometry embeddings, flattened N x d.
    pub e_g: Vec<T>,
    /// Appearance embeddings, flattened N x d.
    pub e_a: Vec<T>,
    pub embed_dim: usize,
    /// Row-stochastic skinning rows, flattened N x 21.
    pub skin_weights: Vec<T>,
}

impl<T: Real> GaussianCloud<T> {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn embedding_g(&self, i: usize) -> &[T] {
        &self.e_g[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn embedding_a(&self, i: usize) -> &[T] {
        &self.e_a[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn skin_row(&self, i: usize) -> &[T] {
        &self.skin_weights[i * JOINT_COUNT..(i + 1) * JOINT_COUNT]
    }

    /// Realized canonical covariance `R diag(exp(2s)) R^T`.
    pub fn covariance(&self, i: usize) -> Matrix3<T> {
        let f = covariance_factor(&self.rotations[i], &self.log_scales[i]);
        f * f.transpose()
    }

    /// Initialize on the skeleton template: positions at the template
    /// vertices, random colors and opacities, scales from the mean distance
    /// to the 3 nearest template neighbors, identity rotations.
    pub fn init_from_template(model: &SkeletonModel<T>, embed_dim: usize, seed: u64) -> Self {
        Self::init_at_points(
            model,
            model.template_vertices.clone(),
            model.skinning_weights.clone(),
            embed_dim,
            seed,
        )
    }

    pub fn init_at_points(
        _model: &SkeletonModel<T>,
        positions: Vec<Vector3<T>>,
        skin_weights: Vec<T>,
        embed_dim: usize,
        seed: u64,
    ) -> Self {
        let n = positions.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = UniformGrid::build(&positions);
        let mut log_scales = Vec::with_capacity(n);
        for (i, p) in positions.iter().enumerate() {
            let nn = grid.k_nearest_excluding(p, 3, Some(i));
            let mut mean = T::zero();
            for &j in &nn {
                mean += (positions[j] - p).norm();
            }
            mean /= real(nn.len().max(1) as f64);
            let s = mean.max(real(1e-4)).ln();
            log_scales.push(Vector3::new(s, s, s));
        }
        let colors = (0..n)
            .map(|_| {
                Vector3::new(
                    real(rng.random_range(0.3..0.7)),
                    real(rng.random_range(0.3..0.7)),
                    real(rng.random_range(0.3..0.7)),
                )
            })
            .collect();
        let opacity_logits = (0..n).map(|_| real(normal(&mut rng) * 0.25)).collect();
        let embed = |rng: &mut ChaCha8Rng| -> Vec<T> {
            (0..n * embed_dim).map(|_| real(normal(rng) * 0.1)).collect()
        };
        let e_g = embed(&mut rng);
        let e_a = embed(&mut rng);
        Self {
            rotations: vec![quat_identity(); n],
            log_scales,
            colors,
            opacity_logits,
            e_g,
            e_a,
            embed_dim,
            skin_weights,
            positions,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `R(q_hat) * diag(exp(s))`, the canonical covariance factor.
pub fn covariance_factor<T: Real>(q: &Quat<T>, log_scale: &Vector3<T>) -> Matrix3<T> {
    let qh = quat_normalize(q);
    let r = quat_to_matrix(&qh);
    let mut f = r;
    for c in 0..3 {
        let s = log_scale[c].exp();
        for rr in 0..3 {
            f[(rr, c)] *= s;
        }
    }
    f
}

/// The three deformation decoders.
#[derive(Debug, Clone)]
pub struct DeformationNets<T: Real> {
    pub geo: Mlp<T>,
    pub app: Mlp<T>,
    pub fusion: Mlp<T>,
    pub embed_dim: usize,
    pub descriptor_dim: usize,
}

/// Decoder head widths: geo -> dx(3) + dq(3) + ds(3); app -> dc(3);
/// fusion -> dx(3) + dq(3) + ds(3) + dc(3).
pub const GEO_OUT: usize = 9;
pub const APP_OUT: usize = 3;
pub const FUSION_OUT: usize = 12;

impl<T: Real> DeformationNets<T> {
    pub fn new(embed_dim: usize, descriptor_dim: usize, hidden: usize) -> Self {
        let base_in = embed_dim + descriptor_dim + MOTION_EMBED_DIM;
        let fusion_in = 2 * embed_dim + descriptor_dim + MOTION_EMBED_DIM;
        Self {
            geo: Mlp::new(&[base_in, hidden, hidden, GEO_OUT], "psi_geo"),
            app: Mlp::new(&[base_in, hidden, hidden, APP_OUT], "psi_app"),
            fusion: Mlp::new(&[fusion_in, hidden, hidden, FUSION_OUT], "psi_fusion"),
            embed_dim,
            descriptor_dim,
        }
    }
}

/// Predicted attribute offsets for one Gaussian.
#[derive(Debug, Clone)]
pub struct DeformationOutput<T: Real> {
    pub dx: Vector3<T>,
    pub dq_vec: Vector3<T>,
    pub ds: Vector3<T>,
    pub dc: Vector3<T>,
    pub dx_f: Vector3<T>,
    pub dq_vec_f: Vector3<T>,
    pub ds_f: Vector3<T>,
    pub dc_f: Vector3<T>,
    /// True when a non-finite network output forced the offsets to zero.
    pub zeroed: bool,
}

pub struct DeformTapes<T: Real> {
    pub geo: GradientTape<T>,
    pub app: GradientTape<T>,
    pub fusion: GradientTape<T>,
}

fn vec3<T: Real>(s: &[T]) -> Vector3<T> {
    Vector3::new(s[0], s[1], s[2])
}

/// Run the decoders for one Gaussian. `embeddings_enabled = false` zeroes the
/// embedding block of the inputs (the no-embeddings ablation).
pub fn deform_gaussian<T: Real>(
    nets: &DeformationNets<T>,
    e_g: &[T],
    e_a: &[T],
    descriptor: &[T],
    motion: &[T; 12],
    embeddings_enabled: bool,
) -> Result<(DeformationOutput<T>, DeformTapes<T>), Error> {
    let d = nets.embed_dim;
    let zero_embed = vec![T::zero(); d];
    let (eg, ea) = if embeddings_enabled { (e_g, e_a) } else { (&zero_embed[..], &zero_embed[..]) };

    let mut input = Vec::with_capacity(nets.geo.input_width());
    input.extend_from_slice(eg);
    input.extend_from_slice(descriptor);
    input.extend_from_slice(motion);
    let mut geo_tape = GradientTape::default();
    let geo_out = nets.geo.forward_tape(&input, &mut geo_tape)?;

    input.clear();
    input.extend_from_slice(ea);
    input.extend_from_slice(descriptor);
    input.extend_from_slice(motion);
    let mut app_tape = GradientTape::default();
    let app_out = nets.app.forward_tape(&input, &mut app_tape)?;

    input.clear();
    input.extend_from_slice(eg);
    input.extend_from_slice(ea);
    input.extend_from_slice(descriptor);
    input.extend_from_slice(motion);
    let mut fusion_tape = GradientTape::default();
    let fusion_out = nets.fusion.forward_tape(&input, &mut fusion_tape)?;

    let finite = geo_out.iter().chain(&app_out).chain(&fusion_out).all(|v| v.is_finite());
    let out = if finite {
        DeformationOutput {
            dx: vec3(&geo_out[0..3]),
            dq_vec: vec3(&geo_out[3..6]),
            ds: vec3(&geo_out[6..9]),
            dc: vec3(&app_out[0..3]),
            dx_f: vec3(&fusion_out[0..3]),
            dq_vec_f: vec3(&fusion_out[3..6]),
            ds_f: vec3(&fusion_out[6..9]),
            dc_f: vec3(&fusion_out[9..12]),
            zeroed: false,
        }
    } else {
        DeformationOutput { zeroed: true, ..Default::default() }
    };
    Ok((out, DeformTapes { geo: geo_tape, app: app_tape, fusion: fusion_tape }))
}

/// Deformed canonical attributes of one Gaussian plus cached intermediates
/// for the backward pass.
#[derive(Debug, Clone)]
pub struct ComposedGaussian<T: Real> {
    pub x_deformed: Vector3<T>,
    pub q_total: Quat<T>,
    pub sigma_total: Vector3<T>,
    pub color: Vector3<T>,
    pub opacity: T,
    // Cached intermediates.
    q_hat: Quat<T>,
    dq: Quat<T>,
    dq_f: Quat<T>,
    dq_q: Quat<T>,
    clamp_mask: [bool; 3],
}

/// Apply the offsets to the stored attributes (Eq.-10-style composition in
/// the factored parameterization).
pub fn compose_gaussian<T: Real>(
    cloud: &GaussianCloud<T>,
    i: usize,
    offsets: &DeformationOutput<T>,
) -> ComposedGaussian<T> {
    let x_deformed = cloud.positions[i] + offsets.dx + offsets.dx_f;
    let sigma_total = cloud.log_scales[i] + offsets.ds + offsets.ds_f;
    let q_hat = quat_normalize(&cloud.rotations[i]);
    let dq = quat_from_vec(&offsets.dq_vec);
    let dq_f = quat_from_vec(&offsets.dq_vec_f);
    let dq_q = quat_mul(&dq, &q_hat);
    let q_total = quat_mul(&dq_f, &dq_q);

    let raw_color = cloud.colors[i] + offsets.dc + offsets.dc_f;
    let mut clamp_mask = [false; 3];
    let mut color = raw_color;
    for c in 0..3 {
        if raw_color[c] < T::zero() {
            color[c] = T::zero();
            clamp_mask[c] = true;
        } else if raw_color[c] > T::one() {
            color[c] = T::one();
            clamp_mask[c] = true;
        }
    }
    let opacity = sigmoid(cloud.opacity_logits[i]);
    ComposedGaussian {
        x_deformed,
        q_total,
        sigma_total,
        color,
        opacity,
        q_hat,
        dq,
        dq_f,
        dq_q,
        clamp_mask,
    }
}

/// Posed render inputs for one Gaussian: world position and covariance factor.
pub fn pose_composed<T: Real>(
    composed: &ComposedGaussian<T>,
    blend: &RigidTransform<T>,
) -> (Vector3<T>, Matrix3<T>) {
    let x_posed = blend.apply(&composed.x_deformed);
    let f_world = blend.rot * covariance_factor(&composed.q_total, &composed.sigma_total);
    (x_posed, f_world)
}

/// Cotangents flowing back into one Gaussian's parameters and offsets.
#[derive(Debug, Clone, Default)]
pub struct ComposeGrads<T: Real> {
    pub d_position: Vector3<T>,
    pub d_rotation: Quat<T>,
    pub d_log_scale: Vector3<T>,
    pub d_color: Vector3<T>,
    pub d_opacity_logit: T,
    pub d_offsets: DeformationOutput<T>,
}

impl<T: Real> Default for DeformationOutput<T> {
    fn default() -> Self {
        Self {
            dx: Vector3::zeros(),
            dq_vec: Vector3::zeros(),
            ds: Vector3::zeros(),
            dc: Vector3::zeros(),
            dx_f: Vector3::zeros(),
            dq_vec_f: Vector3::zeros(),
            ds_f: Vector3::zeros(),
            dc_f: Vector3::zeros(),
            zeroed: false,
        }
    }
}

/// Backward through posing + composition for one Gaussian.
///
/// `d_x_posed`/`d_f_world` come from the renderer, `d_color` from the
/// renderer and losses, `d_q_total`/`d_sigma_total` are extra direct
/// cotangents (the consistency bundle), `d_opacity` is in sigmoid space.
#[allow(clippy::too_many_arguments)]
pub fn compose_backward<T: Real>(
    cloud: &GaussianCloud<T>,
    i: usize,
    offsets: &DeformationOutput<T>,
    composed: &ComposedGaussian<T>,
    blend: &RigidTransform<T>,
    d_x_posed: &Vector3<T>,
    d_f_world: &Matrix3<T>,
    d_color: &Vector3<T>,
    d_q_total_extra: &Quat<T>,
    d_sigma_extra: &Vector3<T>,
    d_x_deformed_extra: &Vector3<T>,
    d_opacity: T,
) -> ComposeGrads<T> {
    let mut g = ComposeGrads::default();

    // x_posed = M x_deformed + t.
    let d_x_def = blend.rot.transpose() * d_x_posed + d_x_deformed_extra;
    g.d_position += d_x_def;
    g.d_offsets.dx += d_x_def;
    g.d_offsets.dx_f += d_x_def;

    // F_world = M (R S). S diag with entries exp(sigma).
    let d_rs = blend.rot.transpose() * d_f_world;
    let r = quat_to_matrix(&composed.q_total);
    let mut d_r = Matrix3::zeros();
    let mut d_sigma = *d_sigma_extra;
    for c in 0..3 {
        let s = composed.sigma_total[c].exp();
        let mut ds_acc = T::zero();
        for rr in 0..3 {
            d_r[(rr, c)] = d_rs[(rr, c)] * s;
            ds_acc += d_rs[(rr, c)] * r[(rr, c)];
        }
        d_sigma[c] += ds_acc * s;
    }
    g.d_log_scale += d_sigma;
    g.d_offsets.ds += d_sigma;
    g.d_offsets.ds_f += d_sigma;

    // q_total = dq_f (dq q_hat).
    let mut d_q_total = quat_to_matrix_backward(&composed.q_total, &d_r);
    for k in 0..4 {
        d_q_total[k] += d_q_total_extra[k];
    }
    let (d_dq_f, d_dqq) = quat_mul_backward(&composed.dq_f, &composed.dq_q, &d_q_total);
    let (d_dq, d_qhat) = quat_mul_backward(&composed.dq, &composed.q_hat, &d_dqq);
    g.d_offsets.dq_vec_f += quat_from_vec_backward(&offsets.dq_vec_f, &d_dq_f);
    g.d_offsets.dq_vec += quat_from_vec_backward(&offsets.dq_vec, &d_dq);
    g.d_rotation = quat_normalize_backward(&cloud.rotations[i], &d_qhat);

    // Color clamp: subgradient zero outside [0, 1].
    let mut d_c = *d_color;
    for c in 0..3 {
        if composed.clamp_mask[c] {
            d_c[c] = T::zero();
        }
    }
    g.d_color += d_c;
    g.d_offsets.dc += d_c;
    g.d_offsets.dc_f += d_c;

    // Opacity logit through the sigmoid.
    g.d_opacity_logit =
        d_opacity * crate::math::sigmoid_grad_from_output(composed.opacity);
    g
}

/// Scatter offset cotangents back through the decoder heads.
pub fn deform_backward<T: Real>(
    nets: &DeformationNets<T>,
    tapes: &DeformTapes<T>,
    offsets: &DeformationOutput<T>,
    d_offsets: &DeformationOutput<T>,
    geo_grads: &mut MlpGrads<T>,
    app_grads: &mut MlpGrads<T>,
    fusion_grads: &mut MlpGrads<T>,
) -> Result<DecoderInputGrads<T>, Error> {
    if offsets.zeroed {
        // The forward pass replaced this Gaussian's offsets with constants.
        return Ok(DecoderInputGrads::zeros(nets));
    }
    let mut geo_cot = vec![T::zero(); GEO_OUT];
    geo_cot[0..3].copy_from_slice(d_offsets.dx.as_slice());
    geo_cot[3..6].copy_from_slice(d_offsets.dq_vec.as_slice());
    geo_cot[6..9].copy_from_slice(d_offsets.ds.as_slice());
    let d_geo_in = nets.geo.backward(&tapes.geo, &geo_cot, geo_grads)?;

    let mut app_cot = vec![T::zero(); APP_OUT];
    app_cot[0..3].copy_from_slice(d_offsets.dc.as_slice());
    let d_app_in = nets.app.backward(&tapes.app, &app_cot, app_grads)?;

    let mut fusion_cot = vec![T::zero(); FUSION_OUT];
    fusion_cot[0..3].copy_from_slice(d_offsets.dx_f.as_slice());
    fusion_cot[3..6].copy_from_slice(d_offsets.dq_vec_f.as_slice());
    fusion_cot[6..9].copy_from_slice(d_offsets.ds_f.as_slice());
    fusion_cot[9..12].copy_from_slice(d_offsets.dc_f.as_slice());
    let d_fusion_in = nets.fusion.backward(&tapes.fusion, &fusion_cot, fusion_grads)?;

    Ok(DecoderInputGrads::split(nets, &d_geo_in, &d_app_in, &d_fusion_in))
}

/// Input-side gradients of the decoders, split by block.
pub struct DecoderInputGrads<T: Real> {
    pub d_e_g: Vec<T>,
    pub d_e_a: Vec<T>,
    pub d_descriptor: Vec<T>,
}

impl<T: Real> DecoderInputGrads<T> {
    fn zeros(nets: &DeformationNets<T>) -> Self {
        Self {
            d_e_g: vec![T::zero(); nets.embed_dim],
            d_e_a: vec![T::zero(); nets.embed_dim],
            d_descriptor: vec![T::zero(); nets.descriptor_dim],
        }
    }

    fn split(nets: &DeformationNets<T>, geo: &[T], app: &[T], fusion: &[T]) -> Self {
        let d = nets.embed_dim;
        let m = nets.descriptor_dim;
        let mut out = Self::zeros(nets);
        // geo input: [e_g, P, T]
        for k in 0..d {
            out.d_e_g[k] += geo[k];
        }
        for k in 0..m {
            out.d_descriptor[k] += geo[d + k];
        }
        // app input: [e_a, P, T]
        for k in 0..d {
            out.d_e_a[k] += app[k];
        }
        for k in 0..m {
            out.d_descriptor[k] += app[d + k];
        }
        // fusion input: [e_g, e_a, P, T]
        for k in 0..d {
            out.d_e_g[k] += fusion[k];
            out.d_e_a[k] += fusion[d + k];
        }
        for k in 0..m {
            out.d_descriptor[k] += fusion[2 * d + k];
        }
        out
    }
}

/// Densification thresholds and limits.
#[derive(Debug, Clone)]
pub struct DensifyParams {
    /// Mean positional-gradient magnitude that triggers clone/split.
    pub grad_threshold: f64,
    /// World-space scale above which a triggered Gaussian splits.
    pub split_scale: f64,
    /// Sigmoid-space opacity below which a Gaussian is pruned.
    pub opacity_prune: f64,
    /// Scale divisor for split children.
    pub split_factor: f64,
    /// Hard cap; densification is skipped above it.
    pub max_gaussians: usize,
}

impl Default for DensifyParams {
    fn default() -> Self {
        Self {
            grad_threshold: 5e-5,
            split_scale: 0.01,
            opacity_prune: 0.005,
            split_factor: 1.6,
            max_gaussians: 200_000,
        }
    }
}

/// Window-accumulated positional gradient statistics.
#[derive(Debug, Clone, Default)]
pub struct GradStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl GradStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n] }
    }

    pub fn record<T: Real>(&mut self, grads: &[Vector3<T>], visible: &[bool]) {
        for (i, g) in grads.iter().enumerate() {
            if visible[i] {
                self.accum[i] += g.norm().to_f64().unwrap_or(0.0);
                self.count[i] += 1;
            }
        }
    }
}

/// Provenance of each post-densification Gaussian, for optimizer-state remap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Kept(usize),
    Spawned(usize),
}

#[derive(Debug, Clone, Default)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub cap_skipped: bool,
}

/// Clone/split high-gradient Gaussians and prune transparent ones.
/// Returns the report plus the origin of every surviving Gaussian.
pub fn densify_and_prune<T: Real>(
    cloud: &mut GaussianCloud<T>,
    stats: &GradStats,
    params: &DensifyParams,
    rng: &mut ChaCha8Rng,
) -> (DensifyReport, Vec<Origin>) {
    let n = cloud.len();
    let mut report = DensifyReport::default();
    let mut origins: Vec<Origin> = Vec::with_capacity(n + 16);
    let keep = |cloud: &mut GaussianCloud<T>, src: usize, out: &mut Vec<usize>| {
        out.push(src);
        let _ = cloud;
    };

    let over_cap = n >= params.max_gaussians;
    if over_cap {
        report.cap_skipped = true;
    }

    // First pass: decide fate per Gaussian.
    let mut kept_src: Vec<usize> = Vec::with_capacity(n);
    let mut spawn: Vec<(usize, bool)> = Vec::new(); // (parent, is_split)
    for i in 0..n {
        let opacity = sigmoid(cloud.opacity_logits[i]).to_f64().unwrap();
        if opacity < params.opacity_prune {
            report.pruned += 1;
            continue;
        }
        let mean_grad =
            if stats.count[i] > 0 { stats.accum[i] / stats.count[i] as f64 } else { 0.0 };
        if !over_cap && mean_grad > params.grad_threshold {
            let max_scale = cloud.log_scales[i].map(|s| s.exp()).max().to_f64().unwrap();
            if max_scale > params.split_scale {
                // Split: replace the parent with two shrunken children.
                spawn.push((i, true));
                spawn.push((i, true));
                report.split += 1;
                continue;
            } else {
                keep(cloud, i, &mut kept_src);
                spawn.push((i, false));
                report.cloned += 1;
                continue;
            }
        }
        keep(cloud, i, &mut kept_src);
    }

    // Rebuild storage.
    let d = cloud.embed_dim;
    let mut next = GaussianCloud {
        positions: Vec::new(),
        rotations: Vec::new(),
        log_scales: Vec::new(),
        colors: Vec::new(),
        opacity_logits: Vec::new(),
        e_g: Vec::new(),
        e_a: Vec::new(),
        embed_dim: d,
        skin_weights: Vec::new(),
    };
    let push_from = |next: &mut GaussianCloud<T>, src: usize| {
        next.positions.push(cloud.positions[src]);
        next.rotations.push(cloud.rotations[src]);
        next.log_scales.push(cloud.log_scales[src]);
        next.colors.push(cloud.colors[src]);
        next.opacity_logits.push(cloud.opacity_logits[src]);
        next.e_g.extend_from_slice(&cloud.e_g[src * d..(src + 1) * d]);
        next.e_a.extend_from_slice(&cloud.e_a[src * d..(src + 1) * d]);
        next.skin_weights
            .extend_from_slice(&cloud.skin_weights[src * JOINT_COUNT..(src + 1) * JOINT_COUNT]);
    };

    for &src in &kept_src {
        push_from(&mut next, src);
        origins.push(Origin::Kept(src));
    }
    let split_div = real::<T>(params.split_factor.ln());
    for &(parent, is_split) in &spawn {
        push_from(&mut next, parent);
        origins.push(Origin::Spawned(parent));
        if is_split {
            let last = next.len() - 1;
            // Sample the child position inside the parent footprint.
            let f = covariance_factor(&cloud.rotations[parent], &cloud.log_scales[parent]);
            let xi = Vector3::new(
                real::<T>(normal(rng)),
                real::<T>(normal(rng)),
                real::<T>(normal(rng)),
            );
            next.positions[last] = cloud.positions[parent] + f * xi;
            next.log_scales[last] = cloud.log_scales[parent].map(|s| s - split_div);
        }
    }

    *cloud = next;
    (report, origins)
}

/// Write the cloud as an ASCII point-cloud file with per-vertex attributes.
pub fn write_ply<T: Real, W: Write>(cloud: &GaussianCloud<T>, mut w: W) -> std::io::Result<()> {
    writeln!(w, "ply")?;
    writeln!(w, "format ascii 1.0")?;
    writeln!(w, "element vertex {}", cloud.len())?;
    for p in ["x", "y", "z"] {
        writeln!(w, "property float {p}")?;
    }
    for p in ["red", "green", "blue"] {
        writeln!(w, "property uchar {p}")?;
    }
    writeln!(w, "property float opacity")?;
    for k in 0..3 {
        writeln!(w, "property float scale_{k}")?;
    }
    for k in 0..4 {
        writeln!(w, "property float rot_{k}")?;
    }
    writeln!(w, "end_header")?;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let c = cloud.colors[i];
        let o = sigmoid(cloud.opacity_logits[i]);
        let s = cloud.log_scales[i];
        let q = cloud.rotations[i];
        let byte = |v: T| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8;
        writeln!(
            w,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            p.x.to_f64().unwrap(),
            p.y.to_f64().unwrap(),
            p.z.to_f64().unwrap(),
            byte(c.x),
            byte(c.y),
            byte(c.z),
            o.to_f64().unwrap(),
            s.x.to_f64().unwrap(),
            s.y.to_f64().unwrap(),
            s.z.to_f64().unwrap(),
            q[0].to_f64().unwrap(),
            q[1].to_f64().unwrap(),
            q[2].to_f64().unwrap(),
            q[3].to_f64().unwrap(),
        )?;
    }
    Ok(())
}

const CLOUD_MAGIC: &[u8; 4] = b"HSCL";
const CLOUD_VERSION: u32 = 1;

/// Versioned binary point records, little-endian f64 scalars.
pub fn write_cloud<T: Real, W: Write>(cloud: &GaussianCloud<T>, mut w: W) -> std::io::Result<()> {
    w.write_all(CLOUD_MAGIC)?;
    w.write_all(&CLOUD_VERSION.to_le_bytes())?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    w.write_all(&(cloud.embed_dim as u32).to_le_bytes())?;
    let put = |v: T, w: &mut W| w.write_all(&v.to_f64().unwrap().to_le_bytes());
    for i in 0..cloud.len() {
        for c in 0..3 {
            put(cloud.positions[i][c], &mut w)?;
        }
        for c in 0..4 {
            put(cloud.rotations[i][c], &mut w)?;
        }
        for c in 0..3 {
            put(cloud.log_scales[i][c], &mut w)?;
        }
        for c in 0..3 {
            put(cloud.colors[i][c], &mut w)?;
        }
        put(cloud.opacity_logits[i], &mut w)?;
        for &v in cloud.embedding_g(i) {
            put(v, &mut w)?;
        }
        for &v in cloud.embedding_a(i) {
            put(v, &mut w)?;
        }
        for &v in cloud.skin_row(i) {
            put(v, &mut w)?;
        }
    }
    Ok(())
}

pub fn read_cloud<T: Real, R: Read>(mut r: R) -> Result<GaussianCloud<T>, Error> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if &magic != CLOUD_MAGIC {
        return Err(Error::Checkpoint("bad cloud magic".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if u32::from_le_bytes(b4) != CLOUD_VERSION {
        return Err(Error::Checkpoint("unsupported cloud version".into()));
    }
    r.read_exact(&mut b8).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b4).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let d = u32::from_le_bytes(b4) as usize;
    let get = |r: &mut R| -> Result<T, Error> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(real(f64::from_le_bytes(b)))
    };
    let mut cloud = GaussianCloud {
        positions: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        log_scales: Vec::with_capacity(n),
        colors: Vec::with_capacity(n),
        opacity_logits: Vec::with_capacity(n),
        e_g: Vec::with_capacity(n * d),
        e_a: Vec::with_capacity(n * d),
        embed_dim: d,
        skin_weights: Vec::with_capacity(n * JOINT_COUNT),
    };
    for _ in 0..n {
        cloud.positions.push(Vector3::new(get(&mut r)?, get(&mut r)?, get(&mut r)?));
        cloud.rotations.push([get(&mut r)?, get(&mut r)?, get(&mut r)?, get(&mut r)?]);
        cloud.log_scales.push(Vector3::new(get(&mut r)?, get(&mut r)?, get(&mut r)?));
        cloud.colors.push(Vector3::new(get(&mut r)?, get(&mut r)?, get(&mut r)?));
        cloud.opacity_logits.push(get(&mut r)?);
        for _ in 0..d {
            let v = get(&mut r)?;
            cloud.e_g.push(v);
        }
        for _ in 0..d {
            let v = get(&mut r)?;
            cloud.e_a.push(v);
        }
        for _ in 0..JOINT_COUNT {
            let v = get(&mut r)?;
            cloud.skin_weights.push(v);
        }
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn small_cloud() -> GaussianCloud<f64> {
        let model: SkeletonModel<f64> = SkeletonModel::with_template_count(64);
        GaussianCloud::init_from_template(&model, 4, 7)
    }

    #[test]
    fn init_matches_template() {
        let model: SkeletonModel<f64> = SkeletonModel::with_template_count(128);
        let cloud = GaussianCloud::init_from_template(&model, 8, 1);
        assert_eq!(cloud.len(), 128);
        assert!(cloud.colors.iter().all(|c| (0.3..=0.7).contains(&c.x)));
        assert!(cloud.rotations.iter().all(|q| *q == quat_identity::<f64>()));
    }

    #[test]
    fn gate_zero_deform_is_identity() {
        let cloud = small_cloud();
        let nets = DeformationNets::<f64>::new(4, 10, 16);
        let descriptor = vec![0.3; 10];
        let motion = [0.1; 12];
        let (off, _) = deform_gaussian(
            &nets,
            cloud.embedding_g(0),
            cloud.embedding_a(0),
            &descriptor,
            &motion,
            true,
        )
        .unwrap();
        assert_eq!(off.dx, Vector3::zeros());
        assert_eq!(off.dc_f, Vector3::zeros());
        let composed = compose_gaussian(&cloud, 0, &off);
        assert_eq!(composed.x_deformed, cloud.positions[0]);
        assert_eq!(composed.color, cloud.colors[0]);
        assert_eq!(composed.sigma_total, cloud.log_scales[0]);
        assert_eq!(composed.q_total, quat_normalize(&cloud.rotations[0]));
    }

    #[test]
    fn position_offsets_are_additive() {
        let cloud = small_cloud();
        let off = DeformationOutput {
            dx: Vector3::new(0.001, 0.0, 0.0),
            dx_f: Vector3::new(0.0, 0.002, 0.0),
            ..Default::default()
        };
        let composed = compose_gaussian(&cloud, 0, &off);
        let delta = composed.x_deformed - cloud.positions[0];
        assert_relative_eq!(delta.x, 0.001, epsilon = 1e-15);
        assert_relative_eq!(delta.y, 0.002, epsilon = 1e-15);
        assert_relative_eq!(delta.z, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn rotating_an_isotropic_covariance_changes_nothing() {
        let mut cloud = small_cloud();
        cloud.log_scales[0] = Vector3::new(-3.0, -3.0, -3.0);
        let base = cloud.covariance(0);
        // 90 degrees about z as an offset rotation.
        let angle: f64 = std::f64::consts::FRAC_PI_2;
        let half = angle / 2.0;
        let v = half.tan(); // quat_from_vec builds (1, v)/sqrt(1+v^2)
        let off = DeformationOutput { dq_vec: Vector3::new(0.0, 0.0, v), ..Default::default() };
        let composed = compose_gaussian(&cloud, 0, &off);
        let f = covariance_factor(&composed.q_total, &composed.sigma_total);
        let cov = f * f.transpose();
        assert_relative_eq!((cov - base).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn realized_covariances_are_psd_under_random_deformation() {
        let cloud = small_cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..2000 {
            let i = rng.random_range(0..cloud.len());
            let off = DeformationOutput {
                dq_vec: Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
                ds: Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ),
                dq_vec_f: Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ),
                ..Default::default()
            };
            let composed = compose_gaussian(&cloud, i, &off);
            let f = covariance_factor(&composed.q_total, &composed.sigma_total);
            let cov = f * f.transpose();
            let eig = cov.symmetric_eigenvalues();
            assert!(eig.min() >= -1e-10, "negative eigenvalue {}", eig.min());
        }
    }

    #[test]
    fn color_clamp_keeps_unit_interval() {
        let cloud = small_cloud();
        let off = DeformationOutput {
            dc: Vector3::new(5.0, -5.0, 0.1),
            ..Default::default()
        };
        let composed = compose_gaussian(&cloud, 0, &off);
        assert_eq!(composed.color.x, 1.0);
        assert_eq!(composed.color.y, 0.0);
        assert!((0.0..=1.0).contains(&composed.color.z));
    }

    #[test]
    fn compose_backward_matches_finite_differences() {
        let cloud = small_cloud();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let blend = RigidTransform {
            rot: crate::skeleton::axis_angle_to_matrix(&Vector3::new(0.4, -0.2, 0.9))
                * 0.95,
            tr: Vector3::new(0.02, -0.01, 0.05),
        };
        let rand_v3 = |rng: &mut ChaCha8Rng| {
            Vector3::new(
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
                rng.random_range(-0.1..0.1),
            )
        };
        let offsets = DeformationOutput {
            dx: rand_v3(&mut rng) * 0.01,
            dq_vec: rand_v3(&mut rng),
            ds: rand_v3(&mut rng),
            dc: rand_v3(&mut rng),
            dx_f: rand_v3(&mut rng) * 0.01,
            dq_vec_f: rand_v3(&mut rng),
            ds_f: rand_v3(&mut rng),
            dc_f: rand_v3(&mut rng),
            zeroed: false,
        };
        let d_x_posed = rand_v3(&mut rng) * 10.0;
        let d_f = Matrix3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let d_color = rand_v3(&mut rng) * 10.0;
        let d_qt = [0.0; 4];
        let d_sig = Vector3::zeros();
        let d_xd = Vector3::zeros();

        let loss = |cloud: &GaussianCloud<f64>, offsets: &DeformationOutput<f64>| -> f64 {
            let composed = compose_gaussian(cloud, 0, offsets);
            let (xp, fw) = pose_composed(&composed, &blend);
            let mut acc = xp.dot(&d_x_posed) + composed.color.dot(&d_color);
            for r in 0..3 {
                for c in 0..3 {
                    acc += fw[(r, c)] * d_f[(r, c)];
                }
            }
            acc
        };

        let composed = compose_gaussian(&cloud, 0, &offsets);
        let g = compose_backward(
            &cloud, 0, &offsets, &composed, &blend, &d_x_posed, &d_f, &d_color, &d_qt, &d_sig,
            &d_xd, 0.0,
        );

        let h = 1e-6;
        // Cloud parameters.
        for c in 0..3 {
            let mut cp = cloud.clone();
            cp.positions[0][c] += h;
            let mut cm = cloud.clone();
            cm.positions[0][c] -= h;
            let fd = (loss(&cp, &offsets) - loss(&cm, &offsets)) / (2.0 * h);
            assert_relative_eq!(g.d_position[c], fd, max_relative = 1e-5, epsilon = 1e-9);

            let mut cp = cloud.clone();
            cp.log_scales[0][c] += h;
            let mut cm = cloud.clone();
            cm.log_scales[0][c] -= h;
            let fd = (loss(&cp, &offsets) - loss(&cm, &offsets)) / (2.0 * h);
            assert_relative_eq!(g.d_log_scale[c], fd, max_relative = 1e-5, epsilon = 1e-9);

            let mut cp = cloud.clone();
            cp.colors[0][c] += h;
            let mut cm = cloud.clone();
            cm.colors[0][c] -= h;
            let fd = (loss(&cp, &offsets) - loss(&cm, &offsets)) / (2.0 * h);
            assert_relative_eq!(g.d_color[c], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
        for c in 0..4 {
            let mut cp = cloud.clone();
            cp.rotations[0][c] += h;
            let mut cm = cloud.clone();
            cm.rotations[0][c] -= h;
            let fd = (loss(&cp, &offsets) - loss(&cm, &offsets)) / (2.0 * h);
            assert_relative_eq!(g.d_rotation[c], fd, max_relative = 1e-5, epsilon = 1e-9);
        }
        // Offsets.
        let fields: Vec<(&str, Box<dyn Fn(&mut DeformationOutput<f64>, usize, f64)>)> = vec![
            ("dx", Box::new(|o, c, v| o.dx[c] += v)),
            ("dq_vec", Box::new(|o, c, v| o.dq_vec[c] += v)),
            ("ds", Box::new(|o, c, v| o.ds[c] += v)),
            ("dc", Box::new(|o, c, v| o.dc[c] += v)),
            ("dx_f", Box::new(|o, c, v| o.dx_f[c] += v)),
            ("dq_vec_f", Box::new(|o, c, v| o.dq_vec_f[c] += v)),
            ("ds_f", Box::new(|o, c, v| o.ds_f[c] += v)),
            ("dc_f", Box::new(|o, c, v| o.dc_f[c] += v)),
        ];
        let got = |name: &str, c: usize| -> f64 {
            match name {
                "dx" => g.d_offsets.dx[c],
                "dq_vec" => g.d_offsets.dq_vec[c],
                "ds" => g.d_offsets.ds[c],
                "dc" => g.d_offsets.dc[c],
                "dx_f" => g.d_offsets.dx_f[c],
                "dq_vec_f" => g.d_offsets.dq_vec_f[c],
                "ds_f" => g.d_offsets.ds_f[c],
                "dc_f" => g.d_offsets.dc_f[c],
                _ => unreachable!(),
            }
        };
        for (name, bump) in &fields {
            for c in 0..3 {
                let mut op = offsets.clone();
                bump(&mut op, c, h);
                let mut om = offsets.clone();
                bump(&mut om, c, -h);
                let fd = (loss(&cloud, &op) - loss(&cloud, &om)) / (2.0 * h);
                assert_relative_eq!(got(name, c), fd, max_relative = 1e-5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn zero_grads_leave_cloud_unchanged_except_pruning() {
        let mut cloud = small_cloud();
        let n = cloud.len();
        // Make one Gaussian transparent.
        cloud.opacity_logits[3] = -10.0;
        let stats = GradStats::new(n);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (report, origins) =
            densify_and_prune(&mut cloud, &stats, &DensifyParams::default(), &mut rng);
        assert_eq!(report.pruned, 1);
        assert_eq!(report.cloned + report.split, 0);
        assert_eq!(cloud.len(), n - 1);
        assert_eq!(origins.len(), n - 1);
    }

    #[test]
    fn high_gradient_large_scale_splits_with_shrunken_children() {
        let mut cloud = small_cloud();
        let n = cloud.len();
        cloud.log_scales[0] = Vector3::new(-2.0, -2.0, -2.0); // exp = 0.135 > split_scale
        let mut stats = GradStats::new(n);
        stats.accum[0] = 1.0;
        stats.count[0] = 1;
        let parent_scale = cloud.log_scales[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = DensifyParams::default();
        let (report, origins) = densify_and_prune(&mut cloud, &stats, &params, &mut rng);
        assert_eq!(report.split, 1);
        assert_eq!(cloud.len(), n + 1);
        let children: Vec<usize> = origins
            .iter()
            .enumerate()
            .filter(|(_, o)| matches!(o, Origin::Spawned(0)))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(children.len(), 2);
        for &c in &children {
            let want = parent_scale.x - params.split_factor.ln();
            assert_relative_eq!(cloud.log_scales[c].x, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn high_gradient_small_scale_clones() {
        let mut cloud = small_cloud();
        let n = cloud.len();
        cloud.log_scales[1] = Vector3::new(-8.0, -8.0, -8.0);
        let mut stats = GradStats::new(n);
        stats.accum[1] = 1.0;
        stats.count[1] = 1;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (report, _) =
            densify_and_prune(&mut cloud, &stats, &DensifyParams::default(), &mut rng);
        assert_eq!(report.cloned, 1);
        assert_eq!(cloud.len(), n + 1);
    }

    #[test]
    fn cap_skips_densification() {
        let mut cloud = small_cloud();
        let n = cloud.len();
        let mut stats = GradStats::new(n);
        stats.accum.fill(1.0);
        stats.count.fill(1);
        let params = DensifyParams { max_gaussians: n, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (report, _) = densify_and_prune(&mut cloud, &stats, &params, &mut rng);
        assert!(report.cap_skipped);
        assert_eq!(cloud.len(), n);
    }

    #[test]
    fn cloud_blob_round_trips() {
        let cloud = small_cloud();
        let mut buf = Vec::new();
        write_cloud(&cloud, &mut buf).unwrap();
        let back: GaussianCloud<f64> = read_cloud(&buf[..]).unwrap();
        assert_eq!(back.len(), cloud.len());
        assert_eq!(back.positions, cloud.positions);
        assert_eq!(back.e_g, cloud.e_g);
        assert_eq!(back.skin_weights, cloud.skin_weights);
    }

    #[test]
    fn ply_export_has_header_and_rows() {
        let cloud = small_cloud();
        let mut buf = Vec::new();
        write_ply(&cloud, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ply\n"));
        assert!(text.contains(&format!("element vertex {}", cloud.len())));
        let body_lines =
            text.lines().skip_while(|l| *l != "end_header").skip(1).count();
        assert_eq!(body_lines, cloud.len());
    }
}
