//! Run configuration: every tunable with its default, ablation switches, and
//! the `--set key=value` override mechanism. Unknown keys are rejected.

use crate::data::SceneConfig;
use crate::error::Error;
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Scalar precision of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Ablation switches. Every flag disables exactly one documented pathway.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationFlags {
    /// Zero the per-Gaussian embeddings in the decoder inputs.
    pub no_embeddings: bool,
    /// Replace the structural descriptor vector with zeros.
    pub no_intra_pose: bool,
    /// Drop the consistency loss (and its memory).
    pub no_inter_pose: bool,
    /// Basis uses dynamic bones only.
    pub no_static_bones: bool,
    /// Basis uses static bones only.
    pub no_dynamic_bones: bool,
    /// Pin the dynamic interpolation factors at 0.5.
    pub no_t: bool,
    /// Zero the dynamic endpoint offsets.
    pub no_delta: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dynamic bone count M_d.
    pub dynamic_bones: usize,
    /// Radial decay of the structural descriptors (meters).
    pub tau: f64,
    /// Pose-similarity decay.
    pub delta: f64,
    pub loss_weights: LossWeights,
    /// EMA decay of the consistency memory.
    pub ema_decay: f64,
    /// Per-Gaussian embedding width d.
    pub embed_dim: usize,
    /// Hidden width of every MLP.
    pub hidden_width: usize,
    /// Adam learning rate for networks and embeddings.
    pub lr_networks: f64,
    /// Adam learning rate for Gaussian base attributes.
    pub lr_gaussians: f64,
    pub iterations: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Smoothness neighbors.
    pub smooth_k: usize,
    /// Probability of keeping the previous pose with a new camera (the
    /// same-pose cross-view case of the consistency loss).
    pub same_pose_prob: f64,
    pub densify_from: usize,
    pub densify_until: usize,
    pub densify_every: usize,
    pub densify_grad_threshold: f64,
    pub densify_split_scale: f64,
    pub opacity_prune: f64,
    pub max_gaussians: usize,
    pub checkpoint_every: usize,
    /// Thread count; 0 means the rayon default.
    pub threads: usize,
    /// Force fixed-order reductions and a single-thread pool.
    pub deterministic: bool,
    pub ablation: AblationFlags,
    /// Dataset generation parameters (also recorded for provenance).
    pub scene: SceneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dynamic_bones: 20,
            tau: 0.08,
            delta: 1.5,
            loss_weights: LossWeights::default(),
            ema_decay: 0.9,
            embed_dim: 16,
            hidden_width: 64,
            lr_networks: 1e-3,
            lr_gaussians: 1e-4,
            iterations: 3000,
            seed: 0,
            precision: Precision::F32,
            smooth_k: 5,
            same_pose_prob: 0.3,
            densify_from: 300,
            densify_until: 2200,
            densify_every: 200,
            densify_grad_threshold: 5e-5,
            densify_split_scale: 0.01,
            opacity_prune: 0.005,
            max_gaussians: 200_000,
            checkpoint_every: 1000,
            threads: 0,
            deterministic: false,
            ablation: AblationFlags::default(),
            scene: SceneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let checks = [
            (self.tau <= 0.0, "tau must be positive"),
            (self.delta <= 0.0, "delta must be positive"),
            (!(0.0..1.0).contains(&self.ema_decay), "ema_decay must be in [0, 1)"),
            (self.embed_dim == 0, "embed_dim must be positive"),
            (self.hidden_width == 0, "hidden_width must be positive"),
            (self.smooth_k == 0, "smooth_k must be positive"),
            (
                self.ablation.no_static_bones
                    && self.ablation.no_dynamic_bones
                    && !self.ablation.no_intra_pose,
                "no_static_bones plus no_dynamic_bones leaves an empty basis; \
                 combine them with no_intra_pose instead",
            ),
            (
                self.ablation.no_static_bones && self.dynamic_bones == 0,
                "no_static_bones requires dynamic_bones > 0",
            ),
        ];
        for (bad, msg) in checks {
            if bad {
                return Err(Error::Config(msg.into()));
            }
        }
        self.scene.validate()
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Apply one `key=value` override using dotted paths into the JSON tree,
    /// e.g. `ablation.no_intra_pose=true` or `tau=0.05`. Type errors and
    /// unknown keys fail here; cross-field validation happens once all
    /// overrides are in.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), Error> {
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{spec}' is not key=value")))?;
        let mut tree = serde_json::to_value(&*self)?;
        let mut cursor = &mut tree;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, seg) in segments.iter().enumerate() {
            let obj = cursor
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("'{}' is not an object", segments[..i].join("."))))?;
            cursor = obj
                .get_mut(*seg)
                .ok_or_else(|| Error::Config(format!("unknown config key '{path}'")))?;
        }
        let parsed: serde_json::Value = serde_json::from_str(value)
            .or_else(|_| serde_json::from_str(&format!("\"{value}\"")))
            .map_err(|_| Error::Config(format!("cannot parse value '{value}'")))?;
        *cursor = parsed;
        *self = serde_json::from_value(tree)?;
        Ok(())
    }
}
