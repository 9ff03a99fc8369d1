//! Model assembly, the full differentiable forward/backward step, and the
//! training loop.
//!
//! One training iteration: sample a (pose, camera) frame; pose the cloud by
//! LBS; build the bone basis and per-Gaussian structural descriptors; run the
//! deformation decoders; render; evaluate the image, consistency, and
//! smoothness losses; backpropagate through every stage; Adam-step the
//! parameter groups; update the EMA memory; periodically densify.

use crate::config::{Precision, RunConfig};
use crate::data::{load_frame, DatasetManifest, FrameData, Split};
use crate::error::Error;
use crate::gaussians::{
    compose_backward, compose_gaussian, deform_backward, deform_gaussian, densify_and_prune,
    pose_composed, ComposedGaussian, DeformTapes, DeformationNets, DeformationOutput,
    DensifyParams, GaussianCloud, GradStats, Origin, MOTION_EMBED_DIM,
};
use crate::losses::{
    base_losses, consistency_loss, correspondence, pose_similarity, psnr, smoothness_loss,
    ConsistencyMemory, LossParts,
};
use crate::math::{quat_normalize, real, Quat, Real};
use crate::nn::{adam_step, AdamHyper, AdamState, Mlp, MlpGrads};
use crate::renderer::{
    project_backward, project_gaussian, rasterize, rasterize_backward, Camera, RenderOutput,
    Splat,
};
use crate::scs::{
    descriptor_entry_backward, dynamic_bones_backward, generate_dynamic_bones, structural_coordinates,
    BoneSource, DynamicBoneGenerator, DynamicBones, SmoothingKernel, StructuralBasis,
};
use crate::skeleton::{
    blend_transforms, build_static_topology, forward_kinematics_full, motion_embedding,
    BoneTopology, Pose, RigidTransform, SkeletonModel, POSE_DOF,
};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Shard width for deterministic gradient reduction.
const SHARD: usize = 256;

/// All trainable state plus the frozen skeleton machinery.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub skeleton: SkeletonModel<T>,
    pub topology: BoneTopology,
    pub kernel: SmoothingKernel<T>,
    pub cloud: GaussianCloud<T>,
    pub decoders: DeformationNets<T>,
    pub generator: DynamicBoneGenerator<T>,
    pub phi_pose: Mlp<T>,
    pub config: RunConfig,
}

impl<T: Real> Model<T> {
    pub fn new(config: &RunConfig) -> Result<Self, Error> {
        config.validate()?;
        let skeleton: SkeletonModel<T> = SkeletonModel::default_hand();
        let topology = build_static_topology(&skeleton)?;
        let kernel = SmoothingKernel::from_topology(&topology);
        let cloud =
            GaussianCloud::init_from_template(&skeleton, config.embed_dim, config.seed ^ 0x474153);
        let m = basis_size(config, topology.len());
        let decoders = DeformationNets::new(config.embed_dim, m, config.hidden_width);
        let generator =
            DynamicBoneGenerator::new(config.dynamic_bones.max(1), topology.len(), config.hidden_width);
        // The pose-embedding net trains only through the similarity weight;
        // a zero gate would freeze it, so it opens at 1.
        let phi_pose = Mlp::new(&[POSE_DOF, 64, 32], "phi_pose").with_gate(T::one());
        Ok(Self {
            skeleton,
            topology,
            kernel,
            cloud,
            decoders,
            generator,
            phi_pose,
            config: config.clone(),
        })
    }

    /// Descriptor width M of this run.
    pub fn basis_size(&self) -> usize {
        basis_size(&self.config, self.topology.len())
    }

    /// Consistency bundle width of this run.
    pub fn bundle_width(&self) -> usize {
        let d = self.config.embed_dim;
        let m = self.basis_size();
        13 + 2 * (d + m + MOTION_EMBED_DIM)
    }
}

pub fn basis_size(config: &RunConfig, static_bones: usize) -> usize {
    let s = if config.ablation.no_static_bones { 0 } else { static_bones };
    let d = if config.ablation.no_dynamic_bones { 0 } else { config.dynamic_bones };
    s + d
}

/// Gradients for everything trainable, mirroring [`Model`].
#[derive(Debug, Clone)]
pub struct ModelGrads<T: Real> {
    pub d_positions: Vec<Vector3<T>>,
    pub d_rotations: Vec<Quat<T>>,
    pub d_log_scales: Vec<Vector3<T>>,
    pub d_colors: Vec<Vector3<T>>,
    pub d_opacity: Vec<T>,
    pub d_e_g: Vec<T>,
    pub d_e_a: Vec<T>,
    pub geo: MlpGrads<T>,
    pub app: MlpGrads<T>,
    pub fusion: MlpGrads<T>,
    pub generator: MlpGrads<T>,
    pub phi: MlpGrads<T>,
    /// Per-Gaussian posed-position gradient norms feed densification.
    pub posed_position_grads: Vec<Vector3<T>>,
    pub visible: Vec<bool>,
}

impl<T: Real> ModelGrads<T> {
    pub fn zeros(model: &Model<T>) -> Self {
        let n = model.cloud.len();
        let d = model.cloud.embed_dim;
        Self {
            d_positions: vec![Vector3::zeros(); n],
            d_rotations: vec![[T::zero(); 4]; n],
            d_log_scales: vec![Vector3::zeros(); n],
            d_colors: vec![Vector3::zeros(); n],
            d_opacity: vec![T::zero(); n],
            d_e_g: vec![T::zero(); n * d],
            d_e_a: vec![T::zero(); n * d],
            geo: MlpGrads::zeros_like(&model.decoders.geo),
            app: MlpGrads::zeros_like(&model.decoders.app),
            fusion: MlpGrads::zeros_like(&model.decoders.fusion),
            generator: MlpGrads::zeros_like(&model.generator.net),
            phi: MlpGrads::zeros_like(&model.phi_pose),
            posed_position_grads: vec![Vector3::zeros(); n],
            visible: vec![false; n],
        }
    }
}

/// Compact per-stage fingerprints of one iteration, for the ablation
/// pathway checks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IterTrace {
    pub posed_joint_sum: f64,
    pub static_bones: usize,
    pub dynamic_bones: usize,
    pub descriptor_norm: f64,
    pub t_values: Vec<f64>,
    pub delta_norm: f64,
    pub embeddings_fed: bool,
    pub offsets_norm: f64,
    pub consistency_active: bool,
    pub render_sum: f64,
}

/// Outputs of one forward (and optionally backward) step.
pub struct StepOutcome<T: Real> {
    pub losses: LossParts<T>,
    pub psnr: f64,
    pub render: RenderOutput<T>,
    pub bundles: Vec<T>,
    pub posed_positions: Vec<Vector3<T>>,
    pub correspondence: Option<Vec<usize>>,
    pub trace: IterTrace,
    pub nonfinite_gaussians: usize,
}

pub struct ForwardState<T: Real> {
    posed_joints: Vec<Vector3<T>>,
    blends: Vec<RigidTransform<T>>,
    x_lbs: Vec<Vector3<T>>,
    basis: StructuralBasis<T>,
    dynamic: Option<DynamicBones<T>>,
    offsets: Vec<DeformationOutput<T>>,
    tapes: Vec<DeformTapes<T>>,
    composed: Vec<ComposedGaussian<T>>,
    x_posed: Vec<Vector3<T>>,
    f_world: Vec<Matrix3<T>>,
    splats: Vec<Splat<T>>,
    visible: Vec<bool>,
    quat_flips: Vec<T>,
    similarity: Option<crate::losses::PoseSimilarity<T>>,
    d_color_img: crate::renderer::ImageF<T>,
    d_alpha_img: crate::renderer::ImageF<T>,
    consistency_d_bundles: Option<Vec<T>>,
    consistency_d_omega: T,
    smooth_d_embeddings: Vec<T>,
}

/// Geometry stage: kinematics, basis, descriptors, deformation,
/// projection. Shared by training and pure rendering.
pub struct GeometryState<T: Real> {
    pub posed_joints: Vec<Vector3<T>>,
    pub blends: Vec<RigidTransform<T>>,
    pub x_lbs: Vec<Vector3<T>>,
    pub motions: Vec<[T; 12]>,
    pub basis: StructuralBasis<T>,
    pub dynamic: Option<DynamicBones<T>>,
    pub descriptors: Vec<T>,
    pub offsets: Vec<DeformationOutput<T>>,
    pub tapes: Vec<DeformTapes<T>>,
    pub composed: Vec<ComposedGaussian<T>>,
    pub x_posed: Vec<Vector3<T>>,
    pub f_world: Vec<Matrix3<T>>,
    pub splats: Vec<Splat<T>>,
    pub visible: Vec<bool>,
    pub nonfinite: usize,
}

pub fn pose_and_project<T: Real>(
    model: &Model<T>,
    pose: &Pose<T>,
    camera: &Camera<T>,
) -> Result<GeometryState<T>, Error> {
    let config = &model.config;
    let n = model.cloud.len();
    let ab = config.ablation;

    // Kinematics and rigid posing.
    let (posed_joints, skinning) = forward_kinematics_full(&model.skeleton, pose)?;
    let (x_lbs, blends) =
        blend_transforms(&skinning, &model.cloud.positions, &model.cloud.skin_weights)?;
    let motions: Vec<[T; 12]> = blends.iter().map(motion_embedding).collect();

    // Bone basis.
    let mut basis = if ab.no_static_bones {
        StructuralBasis { starts: vec![], ends: vec![], provenance: vec![] }
    } else {
        StructuralBasis::from_static(&model.topology, &posed_joints)
    };
    let dynamic = if ab.no_dynamic_bones {
        None
    } else {
        let bones = generate_dynamic_bones(
            &model.generator,
            &model.skeleton,
            pose,
            &posed_joints,
            &model.topology,
            &model.kernel,
            !ab.no_t,
            !ab.no_delta,
        )?;
        for (slot, (p, q)) in bones.segments.iter().enumerate() {
            basis.push_dynamic(slot, *p, *q);
        }
        Some(bones)
    };
    let m = basis.len();
    debug_assert_eq!(m, model.basis_size());

    // Structural descriptors.
    let tau = real::<T>(config.tau);
    let descriptors = if ab.no_intra_pose {
        vec![T::zero(); n * m]
    } else {
        structural_coordinates(&x_lbs, &basis, tau).values
    };

    // Deformation decoders, sharded.
    let shards: Vec<(usize, usize)> = shard_ranges(n);
    let decoded: Vec<Vec<(DeformationOutput<T>, DeformTapes<T>)>> = shards
        .par_iter()
        .map(|&(lo, hi)| {
            (lo..hi)
                .map(|i| {
                    deform_gaussian(
                        &model.decoders,
                        model.cloud.embedding_g(i),
                        model.cloud.embedding_a(i),
                        &descriptors[i * m..(i + 1) * m],
                        &motions[i],
                        !ab.no_embeddings,
                    )
                    .expect("decoder widths are fixed per run")
                })
                .collect()
        })
        .collect();
    let mut offsets = Vec::with_capacity(n);
    let mut tapes = Vec::with_capacity(n);
    let mut nonfinite = 0usize;
    for shard in decoded {
        for (o, t) in shard {
            if o.zeroed {
                nonfinite += 1;
            }
            offsets.push(o);
            tapes.push(t);
        }
    }

    // Compose and pose.
    let mut composed = Vec::with_capacity(n);
    let mut x_posed = Vec::with_capacity(n);
    let mut f_world = Vec::with_capacity(n);
    for i in 0..n {
        let c = compose_gaussian(&model.cloud, i, &offsets[i]);
        let (xp, fw) = pose_composed(&c, &blends[i]);
        composed.push(c);
        x_posed.push(xp);
        f_world.push(fw);
    }

    // Project and rasterize.
    let mut splats = Vec::with_capacity(n);
    let mut visible = vec![false; n];
    for i in 0..n {
        if let Some(p) = project_gaussian(camera, &x_posed[i], &f_world[i]) {
            visible[i] = true;
            splats.push(Splat {
                mean: p.mean,
                conic: p.conic,
                color: composed[i].color,
                opacity: composed[i].opacity,
                depth: p.depth,
                radius: p.radius,
                id: i,
            });
        }
    }
    Ok(GeometryState {
        posed_joints,
        blends,
        x_lbs,
        motions,
        basis,
        dynamic,
        descriptors,
        offsets,
        tapes,
        composed,
        x_posed,
        f_world,
        splats,
        visible,
        nonfinite,
    })
}

/// Forward pass through the whole pipeline for one frame.
pub fn forward<T: Real>(
    model: &Model<T>,
    frame: &FrameData<T>,
    memory: Option<&ConsistencyMemory<T>>,
) -> Result<(StepOutcome<T>, Box<ForwardState<T>>), Error> {
    let config = &model.config;
    let n = model.cloud.len();
    let ab = config.ablation;
    let geo = pose_and_project(model, &frame.pose, &frame.camera)?;
    let GeometryState {
        posed_joints,
        blends,
        x_lbs,
        motions,
        basis,
        dynamic,
        descriptors,
        offsets,
        tapes,
        composed,
        x_posed,
        f_world,
        splats,
        visible,
        nonfinite,
    } = geo;
    let m = basis.len();

    let background = Vector3::zeros();
    let render = rasterize(&splats, frame.camera.width, frame.camera.height, &background);

    // Image losses.
    let base = base_losses(&render.color, &render.alpha, &frame.image, &frame.mask, &config.loss_weights)?;

    // Consistency bundles.
    let width = model.bundle_width();
    let mut bundles = vec![T::zero(); n * width];
    let mut quat_flips = vec![T::one(); n];
    for i in 0..n {
        let flip = if composed[i].q_total[0] < T::zero() { -T::one() } else { T::one() };
        quat_flips[i] = flip;
        let row = &mut bundles[i * width..(i + 1) * width];
        row[0..3].copy_from_slice(x_posed[i].as_slice());
        for k in 0..4 {
            row[3 + k] = composed[i].q_total[k] * flip;
        }
        row[7..10].copy_from_slice(composed[i].sigma_total.as_slice());
        row[10..13].copy_from_slice(composed[i].color.as_slice());
        let d = config.embed_dim;
        let mut o = 13;
        row[o..o + d].copy_from_slice(model.cloud.embedding_g(i));
        o += d;
        row[o..o + m].copy_from_slice(&descriptors[i * m..(i + 1) * m]);
        o += m;
        row[o..o + MOTION_EMBED_DIM].copy_from_slice(&motions[i]);
        o += MOTION_EMBED_DIM;
        row[o..o + d].copy_from_slice(model.cloud.embedding_a(i));
        o += d;
        row[o..o + m].copy_from_slice(&descriptors[i * m..(i + 1) * m]);
        o += m;
        row[o..o + MOTION_EMBED_DIM].copy_from_slice(&motions[i]);
    }

    let mut losses = LossParts::<T> {
        rgb: base.rgb,
        mask: base.mask,
        ssim: base.ssim_loss,
        ..Default::default()
    };
    let mut similarity = None;
    let mut pi = None;
    let mut consistency_d_bundles = None;
    let mut consistency_d_omega = T::zero();
    let consistency_active = !ab.no_inter_pose && memory.is_some();
    if consistency_active {
        let mem = memory.unwrap();
        if mem.width == width && !mem.positions.is_empty() {
            let sim = pose_similarity(
                &model.phi_pose,
                &frame.pose.axis_angle,
                &mem.prev_pose,
                real(config.delta),
            )?;
            let map = correspondence(&x_posed, &mem.positions)?;
            let res = consistency_loss(&bundles, width, n, mem, &map, sim.omega)?;
            losses.consistency = res.loss;
            losses.omega = sim.omega;
            similarity = Some(sim);
            pi = Some(map);
            consistency_d_bundles = Some(res.d_bundles);
            consistency_d_omega = res.d_omega;
        }
    }

    // Embedding smoothness on canonical positions.
    let smooth = smoothness_loss(
        &model.cloud.e_g,
        config.embed_dim,
        &model.cloud.positions,
        config.smooth_k,
    );
    losses.smoothness = smooth.loss;

    let trace = IterTrace {
        posed_joint_sum: posed_joints
            .iter()
            .map(|p| (p.x + p.y + p.z).to_f64().unwrap())
            .sum(),
        static_bones: basis
            .provenance
            .iter()
            .filter(|p| matches!(p, BoneSource::Static(_)))
            .count(),
        dynamic_bones: basis
            .provenance
            .iter()
            .filter(|p| matches!(p, BoneSource::Dynamic(_)))
            .count(),
        descriptor_norm: descriptors
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap();
                x * x
            })
            .sum::<f64>()
            .sqrt(),
        t_values: dynamic
            .as_ref()
            .map(|d| d.params.iter().map(|p| p.t_start.to_f64().unwrap()).collect())
            .unwrap_or_default(),
        delta_norm: dynamic
            .as_ref()
            .map(|d| {
                d.params
                    .iter()
                    .map(|p| (p.delta_p.norm() + p.delta_q.norm()).to_f64().unwrap())
                    .sum()
            })
            .unwrap_or(0.0),
        embeddings_fed: !ab.no_embeddings,
        offsets_norm: offsets
            .iter()
            .map(|o| (o.dx.norm() + o.dx_f.norm() + o.dc.norm()).to_f64().unwrap())
            .sum(),
        consistency_active: similarity.is_some(),
        render_sum: render.color.data.iter().map(|v| v.to_f64().unwrap()).sum(),
    };

    let frame_psnr = psnr(&render.color, &frame.image);
    let outcome = StepOutcome {
        losses,
        psnr: frame_psnr,
        render: render.clone(),
        bundles,
        posed_positions: x_posed.clone(),
        correspondence: pi,
        trace,
        nonfinite_gaussians: nonfinite,
    };
    let state = ForwardState {
        posed_joints,
        blends,
        x_lbs,
        basis,
        dynamic,
        offsets,
        tapes,
        composed,
        x_posed,
        f_world,
        splats,
        visible,
        quat_flips,
        similarity,
        d_color_img: base.d_color,
        d_alpha_img: base.d_alpha,
        consistency_d_bundles,
        consistency_d_omega,
        smooth_d_embeddings: smooth.d_embeddings,
    };
    Ok((outcome, Box::new(state)))
}

fn shard_ranges(n: usize) -> Vec<(usize, usize)> {
    (0..n.div_ceil(SHARD)).map(|s| (s * SHARD, ((s + 1) * SHARD).min(n))).collect()
}

/// Scalar total loss only (used by finite-difference verification).
pub fn loss_only<T: Real>(
    model: &Model<T>,
    frame: &FrameData<T>,
    memory: Option<&ConsistencyMemory<T>>,
) -> Result<T, Error> {
    let (outcome, _) = forward(model, frame, memory)?;
    Ok(outcome.losses.total(&model.config.loss_weights))
}

/// Per-shard gradient payload for the deterministic reduction.
struct ShardGrads<T: Real> {
    geo: MlpGrads<T>,
    app: MlpGrads<T>,
    fusion: MlpGrads<T>,
    dyn_segments: Vec<(Vector3<T>, Vector3<T>)>,
    cloud: Vec<(usize, crate::gaussians::ComposeGrads<T>, Vec<T>, Vec<T>, Vector3<T>)>,
}

/// Full forward + backward for one frame.
pub fn forward_backward<T: Real>(
    model: &Model<T>,
    frame: &FrameData<T>,
    memory: Option<&ConsistencyMemory<T>>,
) -> Result<(StepOutcome<T>, ModelGrads<T>), Error> {
    let (outcome, state) = forward(model, frame, memory)?;
    let config = &model.config;
    let ab = config.ablation;
    let n = model.cloud.len();
    let m = model.basis_size();
    let d = config.embed_dim;
    let width = model.bundle_width();
    let lambda_con = real::<T>(config.loss_weights.lambda_con);
    let lambda_smooth = real::<T>(config.loss_weights.lambda_smooth);

    let mut grads = ModelGrads::zeros(model);
    grads.visible.copy_from_slice(&state.visible);

    // Renderer backward.
    let background = Vector3::zeros();
    let raster_grads = rasterize_backward(
        &state.splats,
        &outcome.render,
        &state.d_color_img,
        &state.d_alpha_img,
        &background,
        n,
    );

    // Per-Gaussian chain, sharded deterministically.
    let shards = shard_ranges(n);
    let shard_outputs: Vec<ShardGrads<T>> = shards
        .par_iter()
        .map(|&(lo, hi)| {
            let mut sg = ShardGrads {
                geo: MlpGrads::zeros_like(&model.decoders.geo),
                app: MlpGrads::zeros_like(&model.decoders.app),
                fusion: MlpGrads::zeros_like(&model.decoders.fusion),
                dyn_segments: vec![(Vector3::zeros(), Vector3::zeros()); basis_dynamic_count(&state.basis)],
                cloud: Vec::with_capacity(hi - lo),
            };
            for i in lo..hi {
                // Gather cotangents.
                let mut d_x_posed = Vector3::zeros();
                let mut d_f = Matrix3::zeros();
                let mut d_color = Vector3::zeros();
                let mut d_opacity = T::zero();
                let mut d_q_extra = [T::zero(); 4];
                let mut d_sigma_extra = Vector3::zeros();
                let mut d_p_row = vec![T::zero(); m];
                let mut d_eg_row = vec![T::zero(); d];
                let mut d_ea_row = vec![T::zero(); d];

                if state.visible[i] {
                    let (dx, df) = project_backward(
                        &frame.camera,
                        &state.x_posed[i],
                        &state.f_world[i],
                        &raster_grads.d_mean[i],
                        &raster_grads.d_conic[i],
                    );
                    d_x_posed += dx;
                    d_f += df;
                    d_color += raster_grads.d_color[i];
                    d_opacity += raster_grads.d_opacity[i];
                }

                if let Some(db) = &state.consistency_d_bundles {
                    let row = &db[i * width..(i + 1) * width];
                    for c in 0..3 {
                        d_x_posed[c] += lambda_con * row[c];
                    }
                    for k in 0..4 {
                        d_q_extra[k] += lambda_con * row[3 + k] * state.quat_flips[i];
                    }
                    for c in 0..3 {
                        d_sigma_extra[c] += lambda_con * row[7 + c];
                        d_color[c] += lambda_con * row[10 + c];
                    }
                    let mut o = 13;
                    for k in 0..d {
                        d_eg_row[k] += lambda_con * row[o + k];
                    }
                    o += d;
                    for k in 0..m {
                        d_p_row[k] += lambda_con * row[o + k];
                    }
                    o += m + MOTION_EMBED_DIM;
                    for k in 0..d {
                        d_ea_row[k] += lambda_con * row[o + k];
                    }
                    o += d;
                    for k in 0..m {
                        d_p_row[k] += lambda_con * row[o + k];
                    }
                }

                let cg = compose_backward(
                    &model.cloud,
                    i,
                    &state.offsets[i],
                    &state.composed[i],
                    &state.blends[i],
                    &d_x_posed,
                    &d_f,
                    &d_color,
                    &d_q_extra,
                    &d_sigma_extra,
                    &Vector3::zeros(),
                    d_opacity,
                );

                // Decoder backward.
                let input_grads = deform_backward(
                    &model.decoders,
                    &state.tapes[i],
                    &state.offsets[i],
                    &cg.d_offsets,
                    &mut sg.geo,
                    &mut sg.app,
                    &mut sg.fusion,
                )
                .expect("tapes recorded this step");
                if !ab.no_embeddings {
                    for k in 0..d {
                        d_eg_row[k] += input_grads.d_e_g[k];
                        d_ea_row[k] += input_grads.d_e_a[k];
                    }
                }
                for k in 0..m {
                    d_p_row[k] += input_grads.d_descriptor[k];
                }

                // Descriptor backward into positions and dynamic bones.
                let mut d_x_lbs = Vector3::zeros();
                if !ab.no_intra_pose {
                    for (mi, &dpk) in d_p_row.iter().enumerate() {
                        if dpk == T::zero() {
                            continue;
                        }
                        let eg = descriptor_entry_backward(
                            &state.x_lbs[i],
                            &state.basis.starts[mi],
                            &state.basis.ends[mi],
                            real(config.tau),
                            dpk,
                        );
                        d_x_lbs += eg.d_x;
                        if let BoneSource::Dynamic(slot) = state.basis.provenance[mi] {
                            sg.dyn_segments[slot].0 += eg.d_start;
                            sg.dyn_segments[slot].1 += eg.d_end;
                        }
                    }
                }

                sg.cloud.push((i, cg, d_eg_row, d_ea_row, d_x_lbs));
            }
            sg
        })
        .collect();

    // Deterministic merge in shard order.
    let mut dyn_segment_grads =
        vec![(Vector3::<T>::zeros(), Vector3::<T>::zeros()); basis_dynamic_count(&state.basis)];
    for sg in shard_outputs {
        grads.geo.add_assign(&sg.geo);
        grads.app.add_assign(&sg.app);
        grads.fusion.add_assign(&sg.fusion);
        for (a, b) in dyn_segment_grads.iter_mut().zip(&sg.dyn_segments) {
            a.0 += b.0;
            a.1 += b.1;
        }
        for (i, cg, d_eg_row, d_ea_row, d_x_lbs) in sg.cloud {
            grads.d_positions[i] += cg.d_position;
            for k in 0..4 {
                grads.d_rotations[i][k] += cg.d_rotation[k];
            }
            grads.d_log_scales[i] += cg.d_log_scale;
            grads.d_colors[i] += cg.d_color;
            grads.d_opacity[i] += cg.d_opacity_logit;
            for k in 0..d {
                grads.d_e_g[i * d + k] += d_eg_row[k];
                grads.d_e_a[i * d + k] += d_ea_row[k];
            }
            // x_lbs = blend(x): chain the descriptor path into the canonical
            // position (the deformation path was handled in compose_backward).
            grads.d_positions[i] += state.blends[i].rot.transpose() * d_x_lbs;
            grads.posed_position_grads[i] = cg.d_position; // pre-LBS magnitude proxy
        }
    }

    // Dynamic bone generator backward.
    if let Some(dynamic) = &state.dynamic {
        if !ab.no_intra_pose {
            dynamic_bones_backward(
                &model.generator,
                dynamic,
                &model.topology,
                &state.posed_joints,
                &model.kernel,
                !ab.no_t,
                !ab.no_delta,
                &dyn_segment_grads,
                &mut grads.generator,
            )?;
        }
    }

    // Similarity weight backward into the pose-embedding net.
    if let Some(sim) = &state.similarity {
        sim.backward(&model.phi_pose, lambda_con * state.consistency_d_omega, &mut grads.phi)?;
    }

    // Smoothness into the geometry embeddings.
    for (g, s) in grads.d_e_g.iter_mut().zip(&state.smooth_d_embeddings) {
        *g += lambda_smooth * *s;
    }

    Ok((outcome, grads))
}

fn basis_dynamic_count<T: Real>(basis: &StructuralBasis<T>) -> usize {
    basis.provenance.iter().filter(|p| matches!(p, BoneSource::Dynamic(_))).count()
}

/// Render a pose through the full deformation path (no gradients kept).
pub fn render_pose<T: Real>(
    model: &Model<T>,
    pose: &Pose<T>,
    camera: &Camera<T>,
) -> Result<RenderOutput<T>, Error> {
    let geo = pose_and_project(model, pose, camera)?;
    Ok(rasterize(&geo.splats, camera.width, camera.height, &Vector3::zeros()))
}

/// Render the pure LBS-posed cloud, skipping the decoders entirely.
pub fn render_lbs_only<T: Real>(
    model: &Model<T>,
    pose: &Pose<T>,
    camera: &Camera<T>,
) -> Result<RenderOutput<T>, Error> {
    let (_, skinning) = forward_kinematics_full(&model.skeleton, pose)?;
    let (x_lbs, blends) =
        blend_transforms(&skinning, &model.cloud.positions, &model.cloud.skin_weights)?;
    let mut splats = Vec::with_capacity(model.cloud.len());
    for i in 0..model.cloud.len() {
        let q_hat = quat_normalize(&model.cloud.rotations[i]);
        let f = blends[i].rot
            * crate::gaussians::covariance_factor(&q_hat, &model.cloud.log_scales[i]);
        if let Some(p) = project_gaussian(camera, &x_lbs[i], &f) {
            let mut color = model.cloud.colors[i];
            for c in 0..3 {
                color[c] = color[c].clamp(T::zero(), T::one());
            }
            splats.push(Splat {
                mean: p.mean,
                conic: p.conic,
                color,
                opacity: crate::math::sigmoid(model.cloud.opacity_logits[i]),
                depth: p.depth,
                radius: p.radius,
                id: i,
            });
        }
    }
    Ok(rasterize(&splats, camera.width, camera.height, &Vector3::zeros()))
}

/// Adam moments for every trainable tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<T: Real> {
    pub positions: AdamState<T>,
    pub rotations: AdamState<T>,
    pub log_scales: AdamState<T>,
    pub colors: AdamState<T>,
    pub opacity: AdamState<T>,
    pub e_g: AdamState<T>,
    pub e_a: AdamState<T>,
    pub nets: Vec<AdamState<T>>, // flattened per net: geo, app, fusion, generator, phi
}

impl<T: Real> OptimizerState<T> {
    pub fn new(model: &Model<T>) -> Self {
        let n = model.cloud.len();
        let d = model.cloud.embed_dim;
        let net_state = |net: &Mlp<T>| AdamState::new(net.parameter_count());
        Self {
            positions: AdamState::new(3 * n),
            rotations: AdamState::new(4 * n),
            log_scales: AdamState::new(3 * n),
            colors: AdamState::new(3 * n),
            opacity: AdamState::new(n),
            e_g: AdamState::new(n * d),
            e_a: AdamState::new(n * d),
            nets: vec![
                net_state(&model.decoders.geo),
                net_state(&model.decoders.app),
                net_state(&model.decoders.fusion),
                net_state(&model.generator.net),
                net_state(&model.phi_pose),
            ],
        }
    }

    /// Remap cloud-tensor moments after densification: kept Gaussians retain
    /// their moments, spawned ones start fresh.
    pub fn remap(&mut self, origins: &[Origin], embed_dim: usize) {
        fn remap_one<T: Real>(state: &mut AdamState<T>, origins: &[Origin], stride: usize) {
            let mut m = vec![T::zero(); origins.len() * stride];
            let mut v = vec![T::zero(); origins.len() * stride];
            for (new, origin) in origins.iter().enumerate() {
                if let Origin::Kept(old) = origin {
                    for c in 0..stride {
                        m[new * stride + c] = state.m[old * stride + c];
                        v[new * stride + c] = state.v[old * stride + c];
                    }
                }
            }
            state.m = m;
            state.v = v;
        }
        remap_one(&mut self.positions, origins, 3);
        remap_one(&mut self.rotations, origins, 4);
        remap_one(&mut self.log_scales, origins, 3);
        remap_one(&mut self.colors, origins, 3);
        remap_one(&mut self.opacity, origins, 1);
        remap_one(&mut self.e_g, origins, embed_dim);
        remap_one(&mut self.e_a, origins, embed_dim);
    }
}

fn vec3_as_flat<T: Real>(v: &mut [Vector3<T>]) -> Vec<T> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn flat_into_vec3<T: Real>(flat: &[T], out: &mut [Vector3<T>]) {
    for (i, x) in out.iter_mut().enumerate() {
        *x = Vector3::new(flat[3 * i], flat[3 * i + 1], flat[3 * i + 2]);
    }
}

fn net_params_flat<T: Real>(net: &Mlp<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(net.parameter_count());
    for w in &net.weights {
        out.extend_from_slice(w);
    }
    for b in &net.biases {
        out.extend_from_slice(b);
    }
    out.push(net.gate);
    out
}

fn net_params_unflatten<T: Real>(net: &mut Mlp<T>, flat: &[T]) {
    let mut o = 0;
    for w in &mut net.weights {
        let len = w.len();
        w.copy_from_slice(&flat[o..o + len]);
        o += len;
    }
    for b in &mut net.biases {
        let len = b.len();
        b.copy_from_slice(&flat[o..o + len]);
        o += len;
    }
    net.gate = flat[o];
}

fn net_grads_flat<T: Real>(g: &MlpGrads<T>) -> Vec<T> {
    let mut out = Vec::new();
    for w in &g.weights {
        out.extend_from_slice(w);
    }
    for b in &g.biases {
        out.extend_from_slice(b);
    }
    out.push(g.gate);
    out
}

/// One optimizer step over all parameter groups.
pub fn apply_gradients<T: Real>(
    model: &mut Model<T>,
    grads: &ModelGrads<T>,
    opt: &mut OptimizerState<T>,
) {
    let lr_g = AdamHyper::with_lr(model.config.lr_gaussians);
    let lr_n = AdamHyper::with_lr(model.config.lr_networks);

    let mut flat = vec3_as_flat(&mut model.cloud.positions);
    let gflat: Vec<T> = grads.d_positions.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
    adam_step(&mut flat, &gflat, &mut opt.positions, &lr_g);
    flat_into_vec3(&flat, &mut model.cloud.positions);

    let mut qflat: Vec<T> = model.cloud.rotations.iter().flatten().copied().collect();
    let qg: Vec<T> = grads.d_rotations.iter().flatten().copied().collect();
    adam_step(&mut qflat, &qg, &mut opt.rotations, &lr_g);
    for (i, q) in model.cloud.rotations.iter_mut().enumerate() {
        *q = quat_normalize(&[qflat[4 * i], qflat[4 * i + 1], qflat[4 * i + 2], qflat[4 * i + 3]]);
    }

    let mut flat = vec3_as_flat(&mut model.cloud.log_scales);
    let gflat: Vec<T> = grads.d_log_scales.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
    adam_step(&mut flat, &gflat, &mut opt.log_scales, &lr_g);
    flat_into_vec3(&flat, &mut model.cloud.log_scales);

    let mut flat = vec3_as_flat(&mut model.cloud.colors);
    let gflat: Vec<T> = grads.d_colors.iter().flat_map(|x| [x.x, x.y, x.z]).collect();
    adam_step(&mut flat, &gflat, &mut opt.colors, &lr_g);
    flat_into_vec3(&flat, &mut model.cloud.colors);

    adam_step(&mut model.cloud.opacity_logits, &grads.d_opacity, &mut opt.opacity, &lr_g);

    // Embeddings train at the network rate.
    adam_step(&mut model.cloud.e_g, &grads.d_e_g, &mut opt.e_g, &lr_n);
    adam_step(&mut model.cloud.e_a, &grads.d_e_a, &mut opt.e_a, &lr_n);

    let nets: [(&mut Mlp<T>, &MlpGrads<T>); 5] = [
        (&mut model.decoders.geo, &grads.geo),
        (&mut model.decoders.app, &grads.app),
        (&mut model.decoders.fusion, &grads.fusion),
        (&mut model.generator.net, &grads.generator),
        (&mut model.phi_pose, &grads.phi),
    ];
    for (k, (net, g)) in nets.into_iter().enumerate() {
        let mut flat = net_params_flat(net);
        let gflat = net_grads_flat(g);
        adam_step(&mut flat, &gflat, &mut opt.nets[k], &lr_n);
        net_params_unflatten(net, &flat);
    }
}

/// Per-iteration metrics row.
#[derive(Debug, Clone, Copy)]
pub struct MetricsRow {
    pub iteration: usize,
    pub rgb: f64,
    pub mask: f64,
    pub ssim: f64,
    pub consistency: f64,
    pub smoothness: f64,
    pub omega: f64,
    pub psnr: f64,
}

impl MetricsRow {
    pub const HEADER: &'static str =
        "iteration,l_rgb,l_mask,l_ssim,l_con,l_smooth,omega,psnr";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8},{:.8},{:.8},{:.8},{:.8},{:.6},{:.4}",
            self.iteration,
            self.rgb,
            self.mask,
            self.ssim,
            self.consistency,
            self.smoothness,
            self.omega,
            self.psnr
        )
    }
}

/// The training driver.
pub struct Trainer<T: Real> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub memory: Option<ConsistencyMemory<T>>,
    pub stats: GradStats,
    pub iteration: usize,
    pub rng: ChaCha8Rng,
    pub nonfinite_incidents: u64,
    pub metrics: Vec<MetricsRow>,
    frames: Vec<FrameData<T>>,
    pub last_frame_pose: Option<usize>,
    out_dir: Option<PathBuf>,
}

impl<T: Real> Trainer<T> {
    pub fn new(
        config: &RunConfig,
        manifest: &DatasetManifest,
        data_root: &Path,
        out_dir: Option<PathBuf>,
    ) -> Result<Self, Error> {
        let model = Model::new(config)?;
        let optimizer = OptimizerState::new(&model);
        let train_records: Vec<_> = manifest.records_in(Split::Train).cloned().collect();
        if train_records.is_empty() {
            return Err(Error::Config("manifest has no training records".into()));
        }
        let frames = train_records
            .iter()
            .map(|r| load_frame::<T>(data_root, manifest, r))
            .collect::<Result<Vec<_>, _>>()?;
        let n = model.cloud.len();
        Ok(Self {
            model,
            optimizer,
            memory: None,
            stats: GradStats::new(n),
            iteration: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            nonfinite_incidents: 0,
            metrics: Vec::new(),
            frames,
            last_frame_pose: None,
            out_dir,
        })
    }

    /// Pick the next training frame: occasionally keep the previous pose
    /// with a different camera (the same-pose cross-view case).
    fn sample_frame(&mut self) -> usize {
        let same_pose = self
            .last_frame_pose
            .filter(|_| self.rng.random::<f64>() < self.model.config.same_pose_prob);
        let idx = if let Some(pose_frame) = same_pose {
            let candidates: Vec<usize> = self
                .frames
                .iter()
                .enumerate()
                .filter(|(_, f)| f.record.frame == pose_frame)
                .map(|(i, _)| i)
                .collect();
            candidates[self.rng.random_range(0..candidates.len())]
        } else {
            self.rng.random_range(0..self.frames.len())
        };
        self.last_frame_pose = Some(self.frames[idx].record.frame);
        idx
    }

    /// Run one training iteration.
    pub fn step(&mut self) -> Result<MetricsRow, Error> {
        let frame_idx = self.sample_frame();
        let config = self.model.config.clone();
        let (outcome, grads) = {
            let frame = &self.frames[frame_idx];
            forward_backward(&self.model, frame, self.memory.as_ref())?
        };
        self.nonfinite_incidents += outcome.nonfinite_gaussians as u64;
        let total = outcome.losses.total(&config.loss_weights);
        if !total.is_finite() {
            let component = outcome.losses.non_finite_component().unwrap_or("total");
            return Err(Error::Numeric(format!(
                "non-finite loss component '{component}' at iteration {}",
                self.iteration
            )));
        }

        apply_gradients(&mut self.model, &grads, &mut self.optimizer);
        self.stats.record(&grads.posed_position_grads, &grads.visible);

        // Memory bookkeeping (after the step, matching iteration pairing).
        if !config.ablation.no_inter_pose {
            let pose_vec: Vec<T> = self.frames[frame_idx].pose.axis_angle.clone();
            match &mut self.memory {
                None => {
                    self.memory = Some(ConsistencyMemory::seed(
                        outcome.bundles.clone(),
                        self.model.bundle_width(),
                        outcome.posed_positions.clone(),
                        pose_vec,
                        real(config.ema_decay),
                    ));
                }
                Some(mem) => {
                    if mem.width != self.model.bundle_width() {
                        mem.reseed(
                            outcome.bundles.clone(),
                            self.model.bundle_width(),
                            outcome.posed_positions.clone(),
                            pose_vec,
                        );
                    } else {
                        let pi = match &outcome.correspondence {
                            Some(pi) => pi.clone(),
                            None => correspondence(&outcome.posed_positions, &mem.positions)?,
                        };
                        mem.update(&outcome.bundles, &outcome.posed_positions, &pose_vec, &pi);
                    }
                }
            }
        }

        self.iteration += 1;

        // Densification window.
        if self.iteration >= config.densify_from
            && self.iteration <= config.densify_until
            && self.iteration % config.densify_every == 0
        {
            let params = DensifyParams {
                grad_threshold: config.densify_grad_threshold,
                split_scale: config.densify_split_scale,
                opacity_prune: config.opacity_prune,
                split_factor: 1.6,
                max_gaussians: config.max_gaussians,
            };
            let (_report, origins) =
                densify_and_prune(&mut self.model.cloud, &self.stats, &params, &mut self.rng);
            self.optimizer.remap(&origins, self.model.cloud.embed_dim);
            self.stats = GradStats::new(self.model.cloud.len());
        }

        let row = MetricsRow {
            iteration: self.iteration,
            rgb: outcome.losses.rgb.to_f64().unwrap(),
            mask: outcome.losses.mask.to_f64().unwrap(),
            ssim: outcome.losses.ssim.to_f64().unwrap(),
            consistency: outcome.losses.consistency.to_f64().unwrap(),
            smoothness: outcome.losses.smoothness.to_f64().unwrap(),
            omega: outcome.losses.omega.to_f64().unwrap(),
            psnr: outcome.psnr,
        };
        self.metrics.push(row);
        Ok(row)
    }

    /// Train for the configured number of iterations, checkpointing and
    /// logging metrics when an output directory is set.
    pub fn run(&mut self) -> Result<(), Error> {
        let iterations = self.model.config.iterations;
        let every = self.model.config.checkpoint_every;
        let mut log = match &self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                self.model.config.save(&dir.join("config.resolved.json"))?;
                let path = dir.join("metrics.csv");
                let fresh = !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{}", MetricsRow::HEADER).map_err(|e| Error::io(&path, e))?;
                }
                Some((f, path))
            }
            None => None,
        };
        while self.iteration < iterations {
            let row = self.step()?;
            if let Some((f, path)) = &mut log {
                writeln!(f, "{}", row.to_csv()).map_err(|e| Error::io(&*path, e))?;
            }
            if let Some(dir) = &self.out_dir {
                if every > 0 && (self.iteration % every == 0 || self.iteration == iterations) {
                    crate::checkpoint::save(self, &dir.join("checkpoint.bin"))?;
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            crate::checkpoint::save(self, &dir.join("checkpoint.bin"))?;
        }
        Ok(())
    }
}

/// Install the configured rayon pool and run `f` inside it. Deterministic
/// mode forces one thread for bitwise-stable scheduling... reductions are
/// already fixed-order, so this is belt and braces for timing-dependent
/// consumers.
pub fn with_thread_pool<R>(config: &RunConfig, f: impl FnOnce() -> R + Send) -> R
where
    R: Send,
{
    let threads = if config.deterministic && config.threads == 0 { 1 } else { config.threads };
    if threads == 0 {
        f()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
            .install(f)
    }
}

/// Run training with the configured precision, dispatching the generic
/// pipeline at this single point.
pub fn train_dispatch(
    config: &RunConfig,
    manifest: &DatasetManifest,
    data_root: &Path,
    out_dir: Option<PathBuf>,
) -> Result<(), Error> {
    match config.precision {
        Precision::F32 => with_thread_pool(config, || {
            Trainer::<f32>::new(config, manifest, data_root, out_dir)?.run()
        }),
        Precision::F64 => with_thread_pool(config, || {
            Trainer::<f64>::new(config, manifest, data_root, out_dir)?.run()
        }),
    }
}

// ---------------------------------------------------------------------------
// Flat parameter access, used by finite-difference verification and the
// checkpoint writer. Order: cloud tensors, then nets.

pub const NET_NAMES: [&str; 5] = ["psi_geo", "psi_app", "psi_fusion", "generator", "phi_pose"];

impl<T: Real> Model<T> {
    fn net(&self, k: usize) -> &Mlp<T> {
        match k {
            0 => &self.decoders.geo,
            1 => &self.decoders.app,
            2 => &self.decoders.fusion,
            3 => &self.generator.net,
            _ => &self.phi_pose,
        }
    }

    fn net_mut(&mut self, k: usize) -> &mut Mlp<T> {
        match k {
            0 => &mut self.decoders.geo,
            1 => &mut self.decoders.app,
            2 => &mut self.decoders.fusion,
            3 => &mut self.generator.net,
            _ => &mut self.phi_pose,
        }
    }

    fn section_sizes(&self) -> Vec<(String, usize)> {
        let n = self.cloud.len();
        let d = self.cloud.embed_dim;
        let mut out = vec![
            ("positions".to_string(), 3 * n),
            ("rotations".to_string(), 4 * n),
            ("log_scales".to_string(), 3 * n),
            ("colors".to_string(), 3 * n),
            ("opacity".to_string(), n),
            ("e_g".to_string(), n * d),
            ("e_a".to_string(), n * d),
        ];
        for (k, name) in NET_NAMES.iter().enumerate() {
            out.push((name.to_string(), self.net(k).parameter_count()));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.section_sizes().iter().map(|(_, s)| s).sum()
    }

    /// Section name and in-section offset of a flat parameter index.
    pub fn param_name(&self, idx: usize) -> String {
        let mut rest = idx;
        for (name, size) in self.section_sizes() {
            if rest < size {
                return format!("{name}[{rest}]");
            }
            rest -= size;
        }
        panic!("parameter index out of range")
    }

    pub fn get_param(&self, idx: usize) -> f64 {
        self.with_section(idx, |section, off| match section {
            0 => self.cloud.positions[off / 3][off % 3].to_f64().unwrap(),
            1 => self.cloud.rotations[off / 4][off % 4].to_f64().unwrap(),
            2 => self.cloud.log_scales[off / 3][off % 3].to_f64().unwrap(),
            3 => self.cloud.colors[off / 3][off % 3].to_f64().unwrap(),
            4 => self.cloud.opacity_logits[off].to_f64().unwrap(),
            5 => self.cloud.e_g[off].to_f64().unwrap(),
            6 => self.cloud.e_a[off].to_f64().unwrap(),
            k => net_params_flat(self.net(k - 7))[off].to_f64().unwrap(),
        })
    }

    pub fn set_param(&mut self, idx: usize, value: f64) {
        let (section, off) = self.locate(idx);
        let v: T = real(value);
        match section {
            0 => self.cloud.positions[off / 3][off % 3] = v,
            1 => self.cloud.rotations[off / 4][off % 4] = v,
            2 => self.cloud.log_scales[off / 3][off % 3] = v,
            3 => self.cloud.colors[off / 3][off % 3] = v,
            4 => self.cloud.opacity_logits[off] = v,
            5 => self.cloud.e_g[off] = v,
            6 => self.cloud.e_a[off] = v,
            k => {
                let net = self.net_mut(k - 7);
                let mut flat = net_params_flat(net);
                flat[off] = v;
                net_params_unflatten(net, &flat);
            }
        }
    }

    fn locate(&self, idx: usize) -> (usize, usize) {
        let mut rest = idx;
        for (section, (_, size)) in self.section_sizes().iter().enumerate() {
            if rest < *size {
                return (section, rest);
            }
            rest -= size;
        }
        panic!("parameter index out of range")
    }

    fn with_section<R>(&self, idx: usize, f: impl FnOnce(usize, usize) -> R) -> R {
        let (section, off) = self.locate(idx);
        f(section, off)
    }
}

impl<T: Real> ModelGrads<T> {
    /// Gradient for the flat parameter index, matching `Model::get_param`.
    pub fn get_param(&self, model: &Model<T>, idx: usize) -> f64 {
        let (section, off) = model.locate(idx);
        match section {
            0 => self.d_positions[off / 3][off % 3].to_f64().unwrap(),
            1 => self.d_rotations[off / 4][off % 4].to_f64().unwrap(),
            2 => self.d_log_scales[off / 3][off % 3].to_f64().unwrap(),
            3 => self.d_colors[off / 3][off % 3].to_f64().unwrap(),
            4 => self.d_opacity[off].to_f64().unwrap(),
            5 => self.d_e_g[off].to_f64().unwrap(),
            6 => self.d_e_a[off].to_f64().unwrap(),
            k => {
                let g = match k - 7 {
                    0 => &self.geo,
                    1 => &self.app,
                    2 => &self.fusion,
                    3 => &self.generator,
                    _ => &self.phi,
                };
                net_grads_flat(g)[off].to_f64().unwrap()
            }
        }
    }
}
