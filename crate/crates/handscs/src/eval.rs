//! Evaluation (PSNR/SSIM per split) and renderer throughput benchmarks.

use crate::data::{load_frame, DatasetManifest, Split};
use crate::error::Error;
use crate::losses::{psnr, ssim};
use crate::math::Real;
use crate::renderer::Camera;
use crate::train::{render_pose, Model};
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct FrameMetrics {
    pub frame: usize,
    pub camera_id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub split: String,
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Frames that failed to load; evaluation continues without them.
    pub missing: Vec<String>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,camera_id,psnr,ssim\n");
        for f in &self.frames {
            out.push_str(&format!("{},{},{:.4},{:.6}\n", f.frame, f.camera_id, f.psnr, f.ssim));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "split {:>11} | frames {:>4} | mean PSNR {:>8.3} dB | mean SSIM {:>7.4}\n",
            self.split,
            self.frames.len(),
            self.mean_psnr,
            self.mean_ssim
        );
        if !self.missing.is_empty() {
            out.push_str(&format!("missing frames: {}\n", self.missing.join(", ")));
        }
        out
    }
}

/// Evaluate a model against one split of the dataset.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    manifest: &DatasetManifest,
    data_root: &Path,
    split: Split,
) -> Result<EvalReport, Error> {
    let mut report = EvalReport {
        split: format!("{split:?}"),
        ..Default::default()
    };
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;
    for record in manifest.records_in(split) {
        let frame = match load_frame::<T>(data_root, manifest, record) {
            Ok(f) => f,
            Err(e) => {
                report.missing.push(format!("{} ({e})", record.image));
                continue;
            }
        };
        let render = render_pose(model, &frame.pose, &frame.camera)?;
        let p = psnr(&render.color, &frame.image);
        let s = ssim(&render.color, &frame.image).to_f64().unwrap();
        psnr_sum += p;
        ssim_sum += s;
        report.frames.push(FrameMetrics {
            frame: record.frame,
            camera_id: record.camera_id,
            psnr: p,
            ssim: s,
        });
    }
    let n = report.frames.len().max(1) as f64;
    report.mean_psnr = psnr_sum / n;
    report.mean_ssim = ssim_sum / n;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub gaussians: usize,
    pub resolution: usize,
    pub frames: usize,
    pub ms_per_frame_single: f64,
    pub ms_per_frame_multi: f64,
    /// Fixed overhead measured on an empty cloud (ms).
    pub empty_overhead_ms: f64,
}

impl BenchReport {
    pub fn to_table(&self) -> String {
        format!(
            "{} gaussians @ {}x{} over {} frames\n  single-thread: {:>8.2} ms/frame\n  multi-thread:  {:>8.2} ms/frame\n  empty-cloud overhead: {:.3} ms\n",
            self.gaussians,
            self.resolution,
            self.resolution,
            self.frames,
            self.ms_per_frame_single,
            self.ms_per_frame_multi,
            self.empty_overhead_ms
        )
    }
}

/// Forward-render throughput at the requested resolution.
pub fn bench_renderer<T: Real>(
    model: &Model<T>,
    resolution: usize,
    frames: usize,
) -> Result<BenchReport, Error> {
    let pose = crate::skeleton::Pose::identity();
    let camera: Camera<T> = Camera::look_at(
        nalgebra::Vector3::new(
            crate::math::real(0.0),
            crate::math::real(0.06),
            crate::math::real(-0.5),
        ),
        nalgebra::Vector3::new(crate::math::real(0.0), crate::math::real(0.06), T::zero()),
        nalgebra::Vector3::new(T::zero(), T::one(), T::zero()),
        crate::math::real(1.7 * resolution as f64),
        resolution,
        resolution,
    );

    let time_run = |threads: usize| -> Result<f64, Error> {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let start = Instant::now();
            for _ in 0..frames {
                render_pose(model, &pose, &camera)?;
            }
            Ok(start.elapsed().as_secs_f64() * 1000.0 / frames.max(1) as f64)
        })
    };
    let single = time_run(1)?;
    let multi = time_run(0usize.max(rayon::current_num_threads()))?;

    // Empty-cloud overhead.
    let mut empty = model.clone();
    empty.cloud.positions.clear();
    empty.cloud.rotations.clear();
    empty.cloud.log_scales.clear();
    empty.cloud.colors.clear();
    empty.cloud.opacity_logits.clear();
    empty.cloud.e_g.clear();
    empty.cloud.e_a.clear();
    empty.cloud.skin_weights.clear();
    let start = Instant::now();
    render_pose(&empty, &pose, &camera)?;
    let empty_overhead_ms = start.elapsed().as_secs_f64() * 1000.0;

    Ok(BenchReport {
        gaussians: model.cloud.len(),
        resolution,
        frames,
        ms_per_frame_single: single,
        ms_per_frame_multi: multi,
        empty_overhead_ms,
    })
}
