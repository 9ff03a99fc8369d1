//! Synthetic oracle dataset: a procedurally textured ground-truth Gaussian
//! hand, smooth random pose trajectories, a spherical camera rig, and
//! multi-view renders with masks.
//!
//! The oracle hand is not a pure LBS model: flexing joints bulge the nearby
//! surface outward and darken the skin around creases, so pose-dependent
//! appearance is present in the ground truth and must be learned rather than
//! inherited from skinning alone.

use crate::error::Error;
use crate::gaussians::{covariance_factor, GaussianCloud};
use crate::math::{real, sigmoid, Real};
use crate::renderer::{project_gaussian, rasterize, Camera, ImageF, RenderOutput, Splat};
use crate::skeleton::{
    blend_transforms, forward_kinematics_full, Pose, SkeletonModel, ARTICULATED_COUNT, FINGER_BASE,
    POSE_DOF,
};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Everything that defines a synthetic scene, validated before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    /// Oracle ground-truth Gaussian count.
    pub oracle_gaussians: usize,
    pub cameras_train: usize,
    pub cameras_novel: usize,
    /// Total trajectory length in frames.
    pub frames: usize,
    /// Final frames held out as the novel-pose split.
    pub frames_novel: usize,
    pub resolution: usize,
    /// Camera sphere radius, meters.
    pub camera_radius: f64,
    pub seed: u64,
    /// Scales the per-joint articulation range (0 freezes the trajectory).
    pub articulation_scale: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            oracle_gaussians: 8192,
            cameras_train: 8,
            cameras_novel: 4,
            frames: 60,
            frames_novel: 10,
            resolution: 256,
            camera_radius: 0.5,
            seed: 0,
            articulation_scale: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let checks = [
            (self.oracle_gaussians == 0, "oracle_gaussians must be positive"),
            (self.cameras_train == 0, "cameras_train must be positive"),
            (self.frames == 0, "frames must be positive"),
            (self.frames_novel >= self.frames, "frames_novel must be below frames"),
            (self.resolution < 16, "resolution must be at least 16"),
            (self.camera_radius <= 0.0, "camera_radius must be positive"),
            (self.articulation_scale < 0.0, "articulation_scale must be non-negative"),
        ];
        for (bad, msg) in checks {
            if bad {
                return Err(Error::Config(msg.into()));
            }
        }
        Ok(())
    }

    pub fn train_frames(&self) -> usize {
        self.frames - self.frames_novel
    }
}

/// Per-dof articulation limits (radians), flexion-biased.
pub fn joint_limits() -> Vec<(f64, f64)> {
    let mut limits = Vec::with_capacity(POSE_DOF);
    for finger in 0..5 {
        for part in 0..3 {
            let (x, y, z) = match (finger, part) {
                // Thumb: looser off-axis play at the base.
                (0, 0) => ((-0.3, 1.2), (-0.4, 0.4), (-0.4, 0.4)),
                (0, 1) => ((0.0, 1.0), (-0.1, 0.1), (-0.1, 0.1)),
                (0, 2) => ((0.0, 1.2), (-0.05, 0.05), (-0.05, 0.05)),
                // Finger base: flexion plus spread.
                (_, 0) => ((-0.2, 1.8), (-0.05, 0.05), (-0.25, 0.25)),
                (_, 1) => ((0.0, 2.1), (-0.05, 0.05), (-0.05, 0.05)),
                _ => ((0.0, 1.5), (-0.05, 0.05), (-0.05, 0.05)),
            };
            limits.push(x);
            limits.push(y);
            limits.push(z);
        }
    }
    limits
}

/// The frozen synthetic scene: oracle cloud, skeleton, trajectory, rig.
pub struct OracleScene<T: Real> {
    pub skeleton: SkeletonModel<T>,
    pub cloud: GaussianCloud<T>,
    pub poses: Vec<Pose<T>>,
    pub cameras: Vec<Camera<T>>,
    pub config: SceneConfig,
    /// Per-Gaussian, per-articulated-joint bulge weights (meters per radian).
    bulge: Vec<T>,
    /// Per-Gaussian, per-articulated-joint crease darkening weights.
    crease: Vec<T>,
}

/// Deterministic scene from (seed, config).
pub fn generate_scene<T: Real>(config: &SceneConfig) -> Result<OracleScene<T>, Error> {
    config.validate()?;
    let skeleton: SkeletonModel<T> = SkeletonModel::default_hand();
    let cloud = oracle_cloud(&skeleton, config);
    let poses = sample_trajectory(config);
    let cameras = camera_rig(config);
    let (bulge, crease) = deformation_tables(&skeleton, &cloud);
    Ok(OracleScene { skeleton, cloud, poses, cameras, config: config.clone(), bulge, crease })
}

fn oracle_cloud<T: Real>(skeleton: &SkeletonModel<T>, config: &SceneConfig) -> GaussianCloud<T> {
    // Sample a denser capsule surface than the training template so the
    // oracle is not trivially identifiable.
    let dense: SkeletonModel<T> = SkeletonModel::with_template_count(config.oracle_gaussians);
    let mut cloud = GaussianCloud::init_at_points(
        skeleton,
        dense.template_vertices.clone(),
        dense.skinning_weights.clone(),
        8,
        config.seed ^ 0x6f7261636c65,
    );

    // Procedural skin: per-finger hue over a base tone, low-frequency noise,
    // darker nail caps at the fingertip bones.
    let base = Vector3::new(real::<T>(0.82), real::<T>(0.62), real::<T>(0.50));
    let finger_hue: [[f64; 3]; 5] = [
        [0.04, 0.02, 0.01],
        [-0.03, 0.01, 0.03],
        [0.02, -0.02, 0.02],
        [-0.02, 0.03, -0.02],
        [0.03, -0.01, -0.03],
    ];
    let joints = &skeleton.canonical_joints;
    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        // Closest finger by distance to its chain joints.
        let mut finger = 0usize;
        let mut best = T::max_value().unwrap();
        for (f, &b) in FINGER_BASE.iter().enumerate() {
            for j in b..b + 4 {
                let d = (joints[j] - p).norm();
                if d < best {
                    best = d;
                    finger = f;
                }
            }
        }
        let hue = finger_hue[finger];
        let mut c = base + Vector3::new(real(hue[0]), real(hue[1]), real(hue[2]));
        // Value noise from a position hash.
        let n = position_noise(&p);
        c += Vector3::new(real(n * 0.05), real(n * 0.04), real(n * 0.03));
        // Nail cap: near the tip joint, on the back (-z) side.
        let tip = joints[FINGER_BASE[finger] + 3];
        let tip_dist = (tip - p).norm();
        if tip_dist < real(0.012) && p.z < joints[FINGER_BASE[finger]].z {
            c = Vector3::new(real(0.55), real(0.45), real(0.42));
        }
        for ch in 0..3 {
            c[ch] = c[ch].clamp(T::zero(), T::one());
        }
        cloud.colors[i] = c;
        // Mostly solid surface.
        cloud.opacity_logits[i] = real(2.0 + position_noise(&(p * real::<T>(3.0))) * 0.5);
    }
    cloud
}

fn position_noise<T: Real>(p: &Vector3<T>) -> f64 {
    let x = p.x.to_f64().unwrap() * 131.07;
    let y = p.y.to_f64().unwrap() * 311.77;
    let z = p.z.to_f64().unwrap() * 74.13;
    let h = (x.sin() * 43758.5453 + y.cos() * 12543.81 + (z * 1.7).sin() * 9913.3).fract();
    h * 2.0 - 1.0
}

fn deformation_tables<T: Real>(
    skeleton: &SkeletonModel<T>,
    cloud: &GaussianCloud<T>,
) -> (Vec<T>, Vec<T>) {
    // Bulge amplitude 4 mm/rad and crease darkening 0.35/rad, both with a
    // Gaussian falloff around each articulated joint.
    let sigma_b = 0.012f64;
    let sigma_c = 0.008f64;
    let n = cloud.len();
    let mut bulge = vec![T::zero(); n * ARTICULATED_COUNT];
    let mut crease = vec![T::zero(); n * ARTICULATED_COUNT];
    for i in 0..n {
        let p = cloud.positions[i];
        for a in 0..ARTICULATED_COUNT {
            let j = skeleton.articulated_joint(a);
            let d = (skeleton.canonical_joints[j] - p).norm().to_f64().unwrap();
            bulge[i * ARTICULATED_COUNT + a] =
                real(0.004 * (-d * d / (2.0 * sigma_b * sigma_b)).exp());
            crease[i * ARTICULATED_COUNT + a] =
                real(0.35 * (-d * d / (2.0 * sigma_c * sigma_c)).exp());
        }
    }
    (bulge, crease)
}

fn sample_trajectory<T: Real>(config: &SceneConfig) -> Vec<Pose<T>> {
    let limits = joint_limits();
    let scale = config.articulation_scale;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x706f7365);
    let mut state = vec![0.0f64; POSE_DOF];
    let mut target = vec![0.0f64; POSE_DOF];
    let mut poses = Vec::with_capacity(config.frames);
    let segment = 12usize;
    for frame in 0..config.frames {
        if frame % segment == 0 {
            // Alternate between open-hand and grip-leaning targets so the
            // trajectory keeps visiting self-contact-prone articulations.
            let grip: bool = rng.random_bool(0.5);
            for (d, (lo, hi)) in limits.iter().enumerate() {
                let is_flexion = d % 3 == 0;
                target[d] = if grip && is_flexion {
                    hi * rng.random_range(0.9..1.0)
                } else if is_flexion {
                    rng.random_range(*lo..hi * 0.3)
                } else {
                    rng.random_range(lo * 0.5..hi * 0.5)
                };
            }
        }
        for (d, (lo, hi)) in limits.iter().enumerate() {
            let noise: f64 = rng.random_range(-1.0..1.0);
            state[d] += (target[d] - state[d]) / 3.5 + noise * 0.025;
            state[d] = state[d].clamp(lo * scale, hi * scale);
            if scale == 0.0 {
                state[d] = 0.0;
            }
        }
        let mut pose = Pose::identity();
        for (d, v) in state.iter().enumerate() {
            pose.axis_angle[d] = real(*v);
        }
        poses.push(pose);
    }
    poses
}

fn camera_rig<T: Real>(config: &SceneConfig) -> Vec<Camera<T>> {
    let total = config.cameras_train + config.cameras_novel;
    let target = Vector3::new(real::<T>(0.0), real::<T>(0.06), real::<T>(0.0));
    let golden = std::f64::consts::PI * (3.0 - 5.0f64.sqrt());
    let mut cams = Vec::with_capacity(total);
    for i in 0..total {
        // Fibonacci sphere, avoiding the poles.
        let frac = (i as f64 + 0.5) / total as f64;
        let z = 1.0 - 2.0 * frac;
        let r = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let dir = Vector3::new(
            real::<T>(r * phi.cos()),
            real::<T>(r * phi.sin()),
            real::<T>(z * 0.85),
        )
        .normalize();
        let eye = target + dir.scale(real(config.camera_radius));
        let up = if dir.z.to_f64().unwrap().abs() < 0.85 {
            Vector3::new(T::zero(), T::zero(), T::one())
        } else {
            Vector3::new(T::zero(), T::one(), T::zero())
        };
        let f = real::<T>(1.7 * config.resolution as f64);
        cams.push(Camera::look_at(eye, target, up, f, config.resolution, config.resolution));
    }
    cams
}

impl<T: Real> OracleScene<T> {
    /// Pose the oracle cloud: LBS plus the analytic bulge, with pose-driven
    /// crease darkening on the colors.
    pub fn posed_oracle(
        &self,
        pose: &Pose<T>,
    ) -> Result<(Vec<Vector3<T>>, Vec<nalgebra::Matrix3<T>>, Vec<Vector3<T>>), Error> {
        let (posed_joints, skinning) = forward_kinematics_full(&self.skeleton, pose)?;
        let (posed, blends) =
            blend_transforms(&skinning, &self.cloud.positions, &self.cloud.skin_weights)?;
        let mut flex = [T::zero(); ARTICULATED_COUNT];
        for (a, f) in flex.iter_mut().enumerate() {
            // Flexion component only, curls toward the palm.
            *f = pose.axis_angle[3 * a].max(T::zero());
        }
        let n = self.cloud.len();
        let mut positions = Vec::with_capacity(n);
        let mut factors = Vec::with_capacity(n);
        let mut colors = Vec::with_capacity(n);
        for i in 0..n {
            let mut x = posed[i];
            let mut darken = T::zero();
            for a in 0..ARTICULATED_COUNT {
                let f = flex[a];
                if f == T::zero() {
                    continue;
                }
                let b = self.bulge[i * ARTICULATED_COUNT + a];
                if b > real(1e-7) {
                    let j = self.skeleton.articulated_joint(a);
                    let radial = x - posed_joints[j];
                    let norm = radial.norm();
                    if norm > real(1e-9) {
                        x += radial.scale(b * f / norm);
                    }
                }
                darken += self.crease[i * ARTICULATED_COUNT + a] * f;
            }
            positions.push(x);
            let fac = blends[i].rot
                * covariance_factor(&self.cloud.rotations[i], &self.cloud.log_scales[i]);
            factors.push(fac);
            let keep = (T::one() - darken).max(real(0.4));
            colors.push(self.cloud.colors[i].scale(keep));
        }
        Ok((positions, factors, colors))
    }

    /// Render ground truth for one (frame, camera) pair.
    pub fn render_frame(&self, frame: usize, camera: usize) -> Result<RenderOutput<T>, Error> {
        let pose = &self.poses[frame];
        let cam = &self.cameras[camera];
        let (positions, factors, colors) = self.posed_oracle(pose)?;
        let mut splats = Vec::with_capacity(positions.len());
        for i in 0..positions.len() {
            if let Some(p) = project_gaussian(cam, &positions[i], &factors[i]) {
                splats.push(Splat {
                    mean: p.mean,
                    conic: p.conic,
                    color: colors[i],
                    opacity: sigmoid(self.cloud.opacity_logits[i]),
                    depth: p.depth,
                    radius: p.radius,
                    id: i,
                });
            }
        }
        Ok(rasterize(&splats, cam.width, cam.height, &Vector3::zeros()))
    }

    /// Fraction of frames with at least one fingertip within 1 cm of the
    /// palm plane (wrist, index base, pinky base).
    pub fn self_contact_fraction(&self) -> f64 {
        let mut hits = 0usize;
        for pose in &self.poses {
            let posed = crate::skeleton::forward_kinematics(&self.skeleton, pose).unwrap();
            let a = posed[0];
            let b = posed[FINGER_BASE[1]];
            let c = posed[FINGER_BASE[4]];
            let normal = (b - a).cross(&(c - a)).normalize();
            let close = FINGER_BASE.iter().any(|&base| {
                let tip = posed[base + 3];
                (tip - a).dot(&normal).abs() < real(0.01)
            });
            if close {
                hits += 1;
            }
        }
        hits as f64 / self.poses.len() as f64
    }
}

/// Split tag of one dataset record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    NovelPose,
    NovelView,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "train" => Ok(Split::Train),
            "novel-pose" => Ok(Split::NovelPose),
            "novel-view" => Ok(Split::NovelView),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub camera_id: usize,
    pub pose_file: String,
    pub image: String,
    pub mask: String,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SceneConfig,
    pub cameras: Vec<Camera<f64>>,
    pub records: Vec<FrameRecord>,
}

impl DatasetManifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &FrameRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Render the whole dataset to `out_dir` and write the manifest.
pub fn render_dataset<T: Real>(
    scene: &OracleScene<T>,
    out_dir: &Path,
) -> Result<DatasetManifest, Error> {
    let config = &scene.config;
    for sub in ["images", "masks", "poses"] {
        std::fs::create_dir_all(out_dir.join(sub)).map_err(|e| Error::io(out_dir.join(sub), e))?;
    }
    for f in 0..config.frames {
        let pose64 = Pose::<f64> {
            axis_angle: scene.poses[f].axis_angle.iter().map(|v| v.to_f64().unwrap()).collect(),
            global_rotation: scene.poses[f].global_rotation.map(|v| v.to_f64().unwrap()),
            global_translation: scene.poses[f].global_translation.map(|v| v.to_f64().unwrap()),
        };
        let path = out_dir.join(format!("poses/{f:04}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&pose64)?)
            .map_err(|e| Error::io(&path, e))?;
    }

    let train_frames = config.train_frames();
    let pairs: Vec<(usize, usize)> = (0..config.frames)
        .flat_map(|f| (0..scene.cameras.len()).map(move |c| (f, c)))
        .collect();
    let rendered: Vec<(usize, usize, RenderOutput<T>)> = pairs
        .par_iter()
        .map(|&(f, c)| {
            let out = scene.render_frame(f, c).expect("frame render");
            (f, c, out)
        })
        .collect();

    let mut records = Vec::with_capacity(rendered.len());
    for (f, c, out) in rendered {
        let image_rel = format!("images/cam{c:02}/{f:04}.png");
        let mask_rel = format!("masks/cam{c:02}/{f:04}.png");
        let image_path = out_dir.join(&image_rel);
        let mask_path = out_dir.join(&mask_rel);
        for p in [&image_path, &mask_path] {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        save_png_rgb(&out.color, &image_path)?;
        save_png_mask(&out.alpha, &mask_path)?;
        let split = if c >= config.cameras_train {
            Split::NovelView
        } else if f >= train_frames {
            Split::NovelPose
        } else {
            Split::Train
        };
        records.push(FrameRecord {
            frame: f,
            camera_id: c,
            pose_file: format!("poses/{f:04}.json"),
            image: image_rel,
            mask: mask_rel,
            split,
        });
    }
    let manifest = DatasetManifest {
        seed: config.seed,
        config: config.clone(),
        cameras: scene.cameras.iter().map(|c| c.cast::<f64>()).collect(),
        records,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

pub fn save_png_rgb<T: Real>(img: &ImageF<T>, path: &Path) -> Result<(), Error> {
    assert_eq!(img.channels, 3);
    let buf = image::RgbImage::from_raw(img.width as u32, img.height as u32, img.to_bytes())
        .expect("buffer size");
    buf.save(path)?;
    Ok(())
}

pub fn save_png_mask<T: Real>(alpha: &ImageF<T>, path: &Path) -> Result<(), Error> {
    assert_eq!(alpha.channels, 1);
    // Mask = thresholded alpha (> 0.5), exactly.
    let bytes: Vec<u8> = alpha
        .data
        .iter()
        .map(|&a| if a.to_f64().unwrap() > 0.5 { 255u8 } else { 0u8 })
        .collect();
    let buf = image::GrayImage::from_raw(alpha.width as u32, alpha.height as u32, bytes)
        .expect("buffer size");
    buf.save(path)?;
    Ok(())
}

pub fn load_png_rgb<T: Real>(path: &Path) -> Result<ImageF<T>, Error> {
    let img = image::open(path)?.to_rgb8();
    Ok(ImageF::from_bytes(img.width() as usize, img.height() as usize, 3, img.as_raw()))
}

pub fn load_png_mask<T: Real>(path: &Path) -> Result<ImageF<T>, Error> {
    let img = image::open(path)?.to_luma8();
    Ok(ImageF::from_bytes(img.width() as usize, img.height() as usize, 1, img.as_raw()))
}

/// One training/eval frame loaded into memory.
pub struct FrameData<T: Real> {
    pub pose: Pose<T>,
    pub camera: Camera<T>,
    pub image: ImageF<T>,
    pub mask: ImageF<T>,
    pub record: FrameRecord,
}

pub fn load_frame<T: Real>(
    root: &Path,
    manifest: &DatasetManifest,
    record: &FrameRecord,
) -> Result<FrameData<T>, Error> {
    let pose_path = root.join(&record.pose_file);
    let text = std::fs::read_to_string(&pose_path).map_err(|e| Error::io(&pose_path, e))?;
    let pose64: Pose<f64> = serde_json::from_str(&text)?;
    let pose = Pose {
        axis_angle: pose64.axis_angle.iter().map(|&v| real(v)).collect(),
        global_rotation: pose64.global_rotation.map(|v| real(v)),
        global_translation: pose64.global_translation.map(|v| real(v)),
    };
    let camera = manifest.cameras[record.camera_id].cast::<T>();
    let image = load_png_rgb(&root.join(&record.image))?;
    let mask = load_png_mask(&root.join(&record.mask))?;
    Ok(FrameData { pose, camera, image, mask, record: record.clone() })
}

/// Resolve a manifest path that may point at the file or its directory.
pub fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.json")
    } else {
        data.to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::psnr;

    fn tiny_config() -> SceneConfig {
        SceneConfig {
            oracle_gaussians: 600,
            cameras_train: 3,
            cameras_novel: 2,
            frames: 8,
            frames_novel: 2,
            resolution: 48,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn invalid_config_names_the_field() {
        let bad = SceneConfig { frames_novel: 60, frames: 60, ..Default::default() };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("frames_novel"), "{err}");
    }

    #[test]
    fn scene_generation_is_deterministic() {
        let config = tiny_config();
        let a: OracleScene<f32> = generate_scene(&config).unwrap();
        let b: OracleScene<f32> = generate_scene(&config).unwrap();
        assert_eq!(a.cloud.positions, b.cloud.positions);
        assert_eq!(a.cloud.colors, b.cloud.colors);
        for (pa, pb) in a.poses.iter().zip(&b.poses) {
            assert_eq!(pa.axis_angle, pb.axis_angle);
        }
    }

    #[test]
    fn zero_articulation_range_freezes_the_pose() {
        let config = SceneConfig { articulation_scale: 0.0, ..tiny_config() };
        let scene: OracleScene<f64> = generate_scene(&config).unwrap();
        for pose in &scene.poses {
            assert!(pose.axis_angle.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn poses_respect_joint_limits() {
        let scene: OracleScene<f64> = generate_scene(&tiny_config()).unwrap();
        let limits = joint_limits();
        for pose in &scene.poses {
            pose.validate().unwrap();
            for (d, &v) in pose.axis_angle.iter().enumerate() {
                assert!(v >= limits[d].0 - 1e-9 && v <= limits[d].1 + 1e-9);
            }
        }
    }

    #[test]
    fn default_trajectory_covers_self_contact() {
        let config = SceneConfig { frames: 60, frames_novel: 10, ..tiny_config() };
        let scene: OracleScene<f64> = generate_scene(&config).unwrap();
        assert!(
            scene.self_contact_fraction() >= 0.2,
            "self-contact fraction {} below 0.2",
            scene.self_contact_fraction()
        );
    }

    #[test]
    fn dataset_has_one_record_per_camera_frame_pair() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene: OracleScene<f32> = generate_scene(&config).unwrap();
        let manifest = render_dataset(&scene, dir.path()).unwrap();
        assert_eq!(manifest.records.len(), 5 * 8);
        // Split exclusivity.
        for r in &manifest.records {
            match r.split {
                Split::Train => {
                    assert!(r.camera_id < config.cameras_train);
                    assert!(r.frame < config.train_frames());
                }
                Split::NovelPose => {
                    assert!(r.camera_id < config.cameras_train);
                    assert!(r.frame >= config.train_frames());
                }
                Split::NovelView => assert!(r.camera_id >= config.cameras_train),
            }
        }
        let novel_cams: std::collections::HashSet<usize> = manifest
            .records_in(Split::NovelView)
            .map(|r| r.camera_id)
            .collect();
        assert!(manifest
            .records_in(Split::Train)
            .all(|r| !novel_cams.contains(&r.camera_id)));
    }

    #[test]
    fn rerendered_frame_matches_stored_image_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene: OracleScene<f64> = generate_scene(&config).unwrap();
        let manifest = render_dataset(&scene, dir.path()).unwrap();
        let record = &manifest.records[7];
        let rerender = scene.render_frame(record.frame, record.camera_id).unwrap();
        let stored: ImageF<f64> = load_png_rgb(&dir.path().join(&record.image)).unwrap();
        let p = psnr(&rerender.color, &stored);
        assert!(p >= 50.0, "round-trip PSNR {p}");
    }

    #[test]
    fn masks_equal_thresholded_alpha_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene: OracleScene<f64> = generate_scene(&config).unwrap();
        let manifest = render_dataset(&scene, dir.path()).unwrap();
        let record = &manifest.records[3];
        let out = scene.render_frame(record.frame, record.camera_id).unwrap();
        let mask: ImageF<f64> = load_png_mask(&dir.path().join(&record.mask)).unwrap();
        for (a, m) in out.alpha.data.iter().zip(&mask.data) {
            let want = if *a > 0.5 { 1.0 } else { 0.0 };
            assert_eq!(*m, want);
        }
    }

    #[test]
    fn manifests_are_byte_identical_across_runs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let scene_a: OracleScene<f32> = generate_scene(&config).unwrap();
        let scene_b: OracleScene<f32> = generate_scene(&config).unwrap();
        render_dataset(&scene_a, dir_a.path()).unwrap();
        render_dataset(&scene_b, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(a, b);
        // Spot-check an image byte-for-byte too.
        let ia = std::fs::read(dir_a.path().join("images/cam01/0004.png")).unwrap();
        let ib = std::fs::read(dir_b.path().join("images/cam01/0004.png")).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn oracle_renders_cover_a_reasonable_silhouette() {
        let config = tiny_config();
        let scene: OracleScene<f32> = generate_scene(&config).unwrap();
        let out = scene.render_frame(0, 0).unwrap();
        let coverage = out.alpha.data.iter().filter(|&&a| a > 0.5).count() as f64
            / out.alpha.data.len() as f64;
        assert!(coverage > 0.03, "hand covers only {coverage} of the frame");
        assert!(coverage < 0.9, "hand floods the frame ({coverage})");
    }
}
