//! Training objectives: image losses, the inter-pose consistency loss with
//! its EMA memory, and embedding smoothness.

mod ssim;

pub use ssim::{ssim, ssim_backward, SSIM_WINDOW};

use crate::error::Error;
use crate::knn::UniformGrid;
use crate::math::{real, Real};
use crate::nn::{GradientTape, Mlp, MlpGrads};
use crate::renderer::ImageF;
use nalgebra::Vector3;

/// Loss weights: `L = L_rgb + l1 L_mask + l2 L_ssim + l_con L_con +
/// l_smooth L_smooth` (the perceptual term is intentionally absent).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_mask: f64,
    pub lambda_ssim: f64,
    pub lambda_con: f64,
    pub lambda_smooth: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_mask: 0.1, lambda_ssim: 0.01, lambda_con: 0.01, lambda_smooth: 1.0 }
    }
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts<T: Real> {
    pub rgb: T,
    pub mask: T,
    pub ssim: T,
    pub consistency: T,
    pub smoothness: T,
    pub omega: T,
}

impl<T: Real> LossParts<T> {
    pub fn total(&self, w: &LossWeights) -> T {
        self.rgb
            + real::<T>(w.lambda_mask) * self.mask
            + real::<T>(w.lambda_ssim) * self.ssim
            + real::<T>(w.lambda_con) * self.consistency
            + real::<T>(w.lambda_smooth) * self.smoothness
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            (self.rgb, "rgb"),
            (self.mask, "mask"),
            (self.ssim, "ssim"),
            (self.consistency, "consistency"),
            (self.smoothness, "smoothness"),
        ]
        .into_iter()
        .find(|(v, _)| !v.is_finite())
        .map(|(_, n)| n)
    }
}

/// Mean absolute error plus its gradient image.
pub fn l1_loss<T: Real>(pred: &ImageF<T>, gt: &ImageF<T>) -> Result<(T, ImageF<T>), Error> {
    if pred.width != gt.width || pred.height != gt.height || pred.channels != gt.channels {
        return Err(Error::Contract("image resolution mismatch".into()));
    }
    let n = real::<T>(pred.data.len() as f64);
    let mut grad = ImageF::zeros(pred.width, pred.height, pred.channels);
    let mut total = T::zero();
    for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        let d = p - g;
        total += d.abs();
        grad.data[i] = if d > T::zero() {
            T::one() / n
        } else if d < T::zero() {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    Ok((total / n, grad))
}

/// Peak signal-to-noise ratio for images in [0, 1].
pub fn psnr<T: Real>(pred: &ImageF<T>, gt: &ImageF<T>) -> f64 {
    let mut mse = 0.0f64;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        let d = (p - g).to_f64().unwrap();
        mse += d * d;
    }
    mse /= pred.data.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Base image losses and their cotangent images.
pub struct BaseLosses<T: Real> {
    pub rgb: T,
    pub mask: T,
    pub ssim_loss: T,
    /// Combined dL_base/d(pred color), weights applied.
    pub d_color: ImageF<T>,
    /// dL_base/d(alpha image), weights applied.
    pub d_alpha: ImageF<T>,
}

pub fn base_losses<T: Real>(
    pred: &ImageF<T>,
    alpha: &ImageF<T>,
    gt: &ImageF<T>,
    mask: &ImageF<T>,
    weights: &LossWeights,
) -> Result<BaseLosses<T>, Error> {
    let (rgb, mut d_color) = l1_loss(pred, gt)?;
    let (mask_loss, mut d_alpha) = l1_loss(alpha, mask)?;
    let s = ssim(pred, gt);
    let ssim_loss = T::one() - s;
    // d(1 - ssim)/dpred = -dssim/dpred, weighted.
    let ssim_grad = ssim_backward(pred, gt, -real::<T>(weights.lambda_ssim));
    for (a, b) in d_color.data.iter_mut().zip(&ssim_grad.data) {
        *a += *b;
    }
    for v in d_alpha.data.iter_mut() {
        *v *= real(weights.lambda_mask);
    }
    Ok(BaseLosses { rgb, mask: mask_loss, ssim_loss, d_color, d_alpha })
}

/// Pose-similarity weight of the consistency loss, plus everything needed to
/// backpropagate into the pose-embedding net.
pub struct PoseSimilarity<T: Real> {
    pub omega: T,
    embed_current: Vec<T>,
    embed_previous: Vec<T>,
    tape_current: GradientTape<T>,
    tape_previous: GradientTape<T>,
    delta: T,
}

/// `omega = exp(-|phi(t) - phi(prev)|^2 / (2 delta^2))`.
pub fn pose_similarity<T: Real>(
    phi: &Mlp<T>,
    theta_current: &[T],
    theta_previous: &[T],
    delta: T,
) -> Result<PoseSimilarity<T>, Error> {
    assert!(delta > T::zero(), "similarity decay must be positive");
    let mut tape_current = GradientTape::default();
    let mut tape_previous = GradientTape::default();
    let embed_current = phi.forward_tape(theta_current, &mut tape_current)?;
    let embed_previous = phi.forward_tape(theta_previous, &mut tape_previous)?;
    let mut dist2 = T::zero();
    for (a, b) in embed_current.iter().zip(&embed_previous) {
        let d = *a - *b;
        dist2 += d * d;
    }
    let omega = (-dist2 / (real::<T>(2.0) * delta * delta)).exp();
    Ok(PoseSimilarity { omega, embed_current, embed_previous, tape_current, tape_previous, delta })
}

impl<T: Real> PoseSimilarity<T> {
    /// Backpropagate `d_omega` into the pose-embedding net parameters.
    pub fn backward(&self, phi: &Mlp<T>, d_omega: T, grads: &mut MlpGrads<T>) -> Result<(), Error> {
        let coeff = -d_omega * self.omega / (self.delta * self.delta);
        let d_cur: Vec<T> = self
            .embed_current
            .iter()
            .zip(&self.embed_previous)
            .map(|(&a, &b)| coeff * (a - b))
            .collect();
        let d_prev: Vec<T> = d_cur.iter().map(|&v| -v).collect();
        phi.backward(&self.tape_current, &d_cur, grads)?;
        phi.backward(&self.tape_previous, &d_prev, grads)?;
        Ok(())
    }
}

/// Nearest-neighbor correspondence from the current cloud into the previous
/// one (grid-accelerated, exact).
pub fn correspondence<T: Real>(
    current: &[Vector3<T>],
    previous: &[Vector3<T>],
) -> Result<Vec<usize>, Error> {
    if previous.is_empty() || current.is_empty() {
        return Err(Error::Contract("correspondence requires non-empty clouds".into()));
    }
    let grid = UniformGrid::build(previous);
    Ok(current.iter().map(|p| grid.nearest(p)).collect())
}

/// EMA-averaged attribute memory for the inter-pose consistency loss.
#[derive(Debug, Clone)]
pub struct ConsistencyMemory<T: Real> {
    /// Flattened bundle rows.
    pub bundles: Vec<T>,
    pub width: usize,
    pub count: usize,
    /// EMA decay (history keep fraction).
    pub decay: T,
    /// Pose of the previous iteration (articulation vector).
    pub prev_pose: Vec<T>,
    /// Posed positions of the previous iteration, for correspondence.
    pub positions: Vec<Vector3<T>>,
}

impl<T: Real> ConsistencyMemory<T> {
    /// Seed from the first iteration's bundles.
    pub fn seed(
        bundles: Vec<T>,
        width: usize,
        positions: Vec<Vector3<T>>,
        pose: Vec<T>,
        decay: T,
    ) -> Self {
        let count = positions.len();
        assert_eq!(bundles.len(), count * width);
        Self { bundles, width, count, decay, prev_pose: pose, positions }
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.bundles[i * self.width..(i + 1) * self.width]
    }

    /// EMA update after the loss: elementwise when the count matches, else
    /// rebuilt through the correspondence map.
    pub fn update(
        &mut self,
        bundles: &[T],
        positions: &[Vector3<T>],
        pose: &[T],
        pi: &[usize],
    ) {
        let n = positions.len();
        let g = self.decay;
        let one_m = T::one() - g;
        if n == self.count {
            for (m, &b) in self.bundles.iter_mut().zip(bundles) {
                *m = g * *m + one_m * b;
            }
        } else {
            let mut next = vec![T::zero(); n * self.width];
            for i in 0..n {
                let src = self.row(pi[i]);
                let dst = &mut next[i * self.width..(i + 1) * self.width];
                for k in 0..self.width {
                    dst[k] = g * src[k] + one_m * bundles[i * self.width + k];
                }
            }
            self.bundles = next;
            self.count = n;
        }
        self.positions = positions.to_vec();
        self.prev_pose = pose.to_vec();
    }

    /// Drop and re-seed when the bundle layout changes.
    pub fn reseed(&mut self, bundles: Vec<T>, width: usize, positions: Vec<Vector3<T>>, pose: Vec<T>) {
        self.width = width;
        self.count = positions.len();
        self.bundles = bundles;
        self.positions = positions;
        self.prev_pose = pose;
    }
}

/// Consistency loss value and gradients into the current bundles. Memory
/// rows are detached targets.
pub struct ConsistencyResult<T: Real> {
    pub loss: T,
    /// dL/d(bundle), flattened like the input, without the omega * lambda
    /// factor applied... includes omega; excludes lambda_con.
    pub d_bundles: Vec<T>,
    /// dL/d(omega).
    pub d_omega: T,
}

pub fn consistency_loss<T: Real>(
    bundles: &[T],
    width: usize,
    n: usize,
    memory: &ConsistencyMemory<T>,
    pi: &[usize],
    omega: T,
) -> Result<ConsistencyResult<T>, Error> {
    if memory.width != width {
        return Err(Error::Contract(format!(
            "bundle width {} does not match memory width {}",
            width, memory.width
        )));
    }
    assert_eq!(bundles.len(), n * width);
    assert_eq!(pi.len(), n);
    let inv_n = T::one() / real::<T>(n as f64);
    let mut sum = T::zero();
    let mut d_bundles = vec![T::zero(); bundles.len()];
    let two = real::<T>(2.0);
    for i in 0..n {
        let target = memory.row(pi[i]);
        let row = &bundles[i * width..(i + 1) * width];
        let drow = &mut d_bundles[i * width..(i + 1) * width];
        for k in 0..width {
            let d = row[k] - target[k];
            sum += d * d;
            drow[k] = omega * two * d * inv_n;
        }
    }
    let mean = sum * inv_n;
    Ok(ConsistencyResult { loss: omega * mean, d_bundles, d_omega: mean })
}

/// Embedding smoothness over the k nearest canonical neighbors.
pub struct SmoothnessResult<T: Real> {
    pub loss: T,
    pub d_embeddings: Vec<T>,
}

pub fn smoothness_loss<T: Real>(
    embeddings: &[T],
    dim: usize,
    positions: &[Vector3<T>],
    k: usize,
) -> SmoothnessResult<T> {
    let n = positions.len();
    assert_eq!(embeddings.len(), n * dim);
    let k = k.min(n.saturating_sub(1)).max(1);
    if n < 2 {
        return SmoothnessResult { loss: T::zero(), d_embeddings: vec![T::zero(); embeddings.len()] };
    }
    let grid = UniformGrid::build(positions);
    let norm = T::one() / real::<T>((n * k) as f64);
    let two = real::<T>(2.0);
    let mut loss = T::zero();
    let mut d = vec![T::zero(); embeddings.len()];
    for i in 0..n {
        let neighbors = grid.k_nearest_excluding(&positions[i], k, Some(i));
        for &j in &neighbors {
            let ei = &embeddings[i * dim..(i + 1) * dim];
            let ej = &embeddings[j * dim..(j + 1) * dim];
            for c in 0..dim {
                let diff = ei[c] - ej[c];
                loss += diff * diff * norm;
                d[i * dim + c] += two * diff * norm;
                d[j * dim + c] -= two * diff * norm;
            }
        }
    }
    SmoothnessResult { loss, d_embeddings: d }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knn::nearest_brute;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> ImageF<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = ImageF::zeros(w, h, c);
        for v in img.data.iter_mut() {
            *v = rng.random_range(0.0..1.0);
        }
        img
    }

    #[test]
    fn identical_images_give_zero_base_losses() {
        let img = random_image(20, 20, 3, 1);
        let alpha = random_image(20, 20, 1, 2);
        let b = base_losses(&img, &alpha, &img, &alpha, &LossWeights::default()).unwrap();
        assert_relative_eq!(b.rgb, 0.0, epsilon = 1e-15);
        assert_relative_eq!(b.mask, 0.0, epsilon = 1e-15);
        assert_relative_eq!(b.ssim_loss, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_offset_gives_that_l1() {
        let img = random_image(16, 16, 3, 3);
        let mut shifted = img.clone();
        for v in shifted.data.iter_mut() {
            *v += 0.1;
        }
        let (l, _) = l1_loss(&shifted, &img).unwrap();
        assert_relative_eq!(l, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let a = random_image(8, 8, 3, 1);
        let b = random_image(9, 8, 3, 1);
        assert!(l1_loss(&a, &b).is_err());
    }

    #[test]
    fn psnr_of_identical_images_is_infinite() {
        let img = random_image(8, 8, 3, 4);
        assert!(psnr(&img, &img).is_infinite());
    }

    #[test]
    fn omega_is_one_for_identical_poses() {
        let phi = Mlp::<f64>::new(&[6, 16, 8], "phi_test").with_gate(1.0);
        let theta = vec![0.3, -0.2, 0.9, 0.0, 0.5, -1.0];
        let sim = pose_similarity(&phi, &theta, &theta, 1.5).unwrap();
        assert_relative_eq!(sim.omega, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn omega_at_embedding_distance_delta_sqrt2_is_inverse_e() {
        // Identity-like net: gate 1, single linear layer passing input through.
        let mut phi = Mlp::<f64>::new(&[2, 2], "phi_id").with_gate(1.0);
        phi.weights[0] = vec![1.0, 0.0, 0.0, 1.0];
        phi.biases[0] = vec![0.0, 0.0];
        let delta: f64 = 1.5;
        let d = delta * 2.0f64.sqrt();
        let sim = pose_similarity(&phi, &[0.0, 0.0], &[d, 0.0], delta).unwrap();
        assert_relative_eq!(sim.omega, (-1.0f64).exp(), epsilon = 1e-12);
    }

    #[test]
    fn omega_decays_monotonically_with_distance() {
        let mut phi = Mlp::<f64>::new(&[1, 1], "phi_mono").with_gate(1.0);
        phi.weights[0] = vec![1.0];
        phi.biases[0] = vec![0.0];
        let mut last = 1.0;
        for step in 0..20 {
            let x = step as f64 * 0.7;
            let sim = pose_similarity(&phi, &[0.0], &[x], 1.5).unwrap();
            assert!(sim.omega <= last + 1e-15);
            assert!(sim.omega > 0.0);
            last = sim.omega;
        }
        assert!(last < 1e-6);
    }

    #[test]
    fn omega_backward_matches_fd() {
        let phi = Mlp::<f64>::new(&[4, 8, 3], "phi_fd").with_gate(0.7);
        let ta = vec![0.2, -0.5, 0.8, 0.1];
        let tb = vec![-0.3, 0.4, 0.0, 0.9];
        let sim = pose_similarity(&phi, &ta, &tb, 1.5).unwrap();
        let mut grads = MlpGrads::zeros_like(&phi);
        sim.backward(&phi, 1.0, &mut grads).unwrap();
        let h = 1e-6;
        for l in 0..phi.weights.len() {
            for i in (0..phi.weights[l].len()).step_by(7) {
                let mut p = phi.clone();
                p.weights[l][i] += h;
                let mut m = phi.clone();
                m.weights[l][i] -= h;
                let op = pose_similarity(&p, &ta, &tb, 1.5).unwrap().omega;
                let om = pose_similarity(&m, &ta, &tb, 1.5).unwrap().omega;
                let fd = (op - om) / (2.0 * h);
                assert_relative_eq!(grads.weights[l][i], fd, max_relative = 1e-4, epsilon = 1e-10);
            }
        }
    }

    fn random_points(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn correspondence_of_identical_clouds_is_identity() {
        let pts = random_points(100, 5);
        let pi = correspondence(&pts, &pts).unwrap();
        for (i, &p) in pi.iter().enumerate() {
            assert_eq!(p, i);
        }
    }

    #[test]
    fn correspondence_survives_small_perturbation() {
        let pts = random_points(200, 6);
        // Half the minimum spacing.
        let mut min_d = f64::INFINITY;
        for i in 0..pts.len() {
            for j in 0..i {
                min_d = min_d.min((pts[i] - pts[j]).norm());
            }
        }
        let eps = 0.4 * min_d;
        let moved: Vec<Vector3<f64>> =
            pts.iter().map(|p| p + Vector3::new(eps * 0.5, -eps * 0.4, eps * 0.3)).collect();
        let pi = correspondence(&moved, &pts).unwrap();
        for (i, &p) in pi.iter().enumerate() {
            assert_eq!(p, i);
        }
    }

    #[test]
    fn correspondence_matches_brute_force_on_1000_points() {
        let cur = random_points(1000, 7);
        let prev = random_points(1000, 8);
        let pi = correspondence(&cur, &prev).unwrap();
        for (i, c) in cur.iter().enumerate() {
            assert_eq!(pi[i], nearest_brute(c, &prev));
        }
    }

    #[test]
    fn empty_previous_cloud_is_an_error() {
        let cur = random_points(5, 9);
        assert!(correspondence(&cur, &[]).is_err());
    }

    #[test]
    fn consistency_loss_is_zero_for_identical_bundles() {
        let width = 7;
        let n = 12;
        let bundles: Vec<f64> = (0..n * width).map(|i| (i as f64 * 0.37).sin()).collect();
        let positions = random_points(n, 10);
        let mem = ConsistencyMemory::seed(
            bundles.clone(),
            width,
            positions.clone(),
            vec![0.0; 4],
            0.9,
        );
        let pi: Vec<usize> = (0..n).collect();
        let res = consistency_loss(&bundles, width, n, &mem, &pi, 0.63).unwrap();
        assert_relative_eq!(res.loss, 0.0, epsilon = 1e-15);
        assert!(res.d_bundles.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_gaussian_difference_vector_gives_norm_squared() {
        let width = 4;
        let mem_bundle = vec![0.0; width];
        let v = [0.3, -0.7, 0.2, 0.9];
        let mem = ConsistencyMemory::seed(
            mem_bundle,
            width,
            vec![Vector3::zeros()],
            vec![0.0],
            0.9,
        );
        let res = consistency_loss(&v, width, 1, &mem, &[0], 1.0).unwrap();
        let want: f64 = v.iter().map(|x| x * x).sum();
        assert_relative_eq!(res.loss, want, epsilon = 1e-15);

        // Scaled by omega = exp(-1).
        let res2 = consistency_loss(&v, width, 1, &mem, &[0], (-1.0f64).exp()).unwrap();
        assert_relative_eq!(res2.loss, (-1.0f64).exp() * want, epsilon = 1e-15);
        // d_omega returns the unscaled mean.
        assert_relative_eq!(res2.d_omega, want, epsilon = 1e-15);
    }

    #[test]
    fn consistency_gradients_match_fd() {
        let width = 5;
        let n = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bundles: Vec<f64> = (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mem_bundles: Vec<f64> =
            (0..n * width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let positions = random_points(n, 12);
        let mem =
            ConsistencyMemory::seed(mem_bundles, width, positions, vec![0.0; 3], 0.9);
        let pi: Vec<usize> = (0..n).map(|i| (i + 3) % n).collect();
        let omega = 0.42;
        let res = consistency_loss(&bundles, width, n, &mem, &pi, omega).unwrap();
        let h = 1e-6;
        for idx in (0..bundles.len()).step_by(6) {
            let mut p = bundles.clone();
            p[idx] += h;
            let mut m = bundles.clone();
            m[idx] -= h;
            let lp = consistency_loss(&p, width, n, &mem, &pi, omega).unwrap().loss;
            let lm = consistency_loss(&m, width, n, &mem, &pi, omega).unwrap().loss;
            assert_relative_eq!(res.d_bundles[idx], (lp - lm) / (2.0 * h), max_relative = 1e-5);
        }
    }

    #[test]
    fn memory_width_mismatch_is_an_error() {
        let mem = ConsistencyMemory::seed(vec![0.0; 6], 3, random_points(2, 1), vec![], 0.9);
        assert!(consistency_loss(&[0.0; 8], 4, 2, &mem, &[0, 1], 1.0).is_err());
    }

    #[test]
    fn ema_update_is_elementwise() {
        let width = 3;
        let init = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut mem = ConsistencyMemory::seed(
            init.clone(),
            width,
            random_points(2, 2),
            vec![0.0],
            0.9,
        );
        let fresh = vec![2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
        let pos = random_points(2, 3);
        mem.update(&fresh, &pos, &[1.0], &[0, 1]);
        for k in 0..6 {
            assert_relative_eq!(mem.bundles[k], 0.9 * init[k] + 0.1 * fresh[k], epsilon = 1e-15);
        }
        assert_eq!(mem.prev_pose, vec![1.0]);
    }

    #[test]
    fn ema_converges_geometrically_on_a_constant_stream() {
        let width = 2;
        let target = vec![0.5, -0.25];
        let m0 = vec![3.0, 1.0];
        let gamma: f64 = 0.9;
        let mut mem = ConsistencyMemory::seed(
            m0.clone(),
            width,
            vec![Vector3::zeros()],
            vec![],
            gamma,
        );
        for n in 1..=50 {
            mem.update(&target, &[Vector3::zeros()], &[], &[0]);
            let bound = gamma.powi(n);
            for k in 0..width {
                let err = (mem.bundles[k] - target[k]).abs();
                let init_err = (m0[k] - target[k]).abs();
                assert!(err <= bound * init_err + 1e-12, "n={n} err={err}");
            }
        }
    }

    #[test]
    fn count_change_rebuilds_through_correspondence() {
        let width = 2;
        let mem_bundles = vec![1.0, 2.0, 5.0, 6.0];
        let mem_pos = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let mut mem = ConsistencyMemory::seed(mem_bundles, width, mem_pos, vec![], 0.9);
        // Three new Gaussians; the third is closest to old index 1.
        let bundles = vec![1.0, 2.0, 5.0, 6.0, 7.0, 8.0];
        let pos = vec![
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(1.1, 0.0, 0.0),
        ];
        let pi = vec![0usize, 1, 1];
        mem.update(&bundles, &pos, &[], &pi);
        assert_eq!(mem.count, 3);
        assert_relative_eq!(mem.bundles[4], 0.9 * 5.0 + 0.1 * 7.0, epsilon = 1e-15);
        assert_relative_eq!(mem.bundles[5], 0.9 * 6.0 + 0.1 * 8.0, epsilon = 1e-15);
    }

    #[test]
    fn equal_embeddings_have_zero_smoothness() {
        let positions = random_points(20, 13);
        let embeddings = vec![0.7; 20 * 4];
        let res = smoothness_loss(&embeddings, 4, &positions, 5);
        assert_relative_eq!(res.loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn two_point_cloud_gives_symmetric_pair_norm() {
        let positions = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let embeddings = vec![0.2, -0.4, 0.9, 0.1]; // dim 2: e0=(0.2,-0.4), e1=(0.9,0.1)
        let res = smoothness_loss(&embeddings, 2, &positions, 5);
        let v = [0.2 - 0.9, -0.4 - 0.1];
        let want: f64 = v.iter().map(|x| x * x).sum();
        assert_relative_eq!(res.loss, want, epsilon = 1e-14);
    }

    #[test]
    fn smoothness_matches_brute_force_knn_sum() {
        let n = 60;
        let dim = 3;
        let positions = random_points(n, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let embeddings: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k = 5;
        let res = smoothness_loss(&embeddings, dim, &positions, k);
        // Exhaustive reference.
        let mut want = 0.0;
        for i in 0..n {
            let nn = crate::knn::k_nearest_brute(&positions[i], &positions, k, Some(i));
            for j in nn {
                for c in 0..dim {
                    let d = embeddings[i * dim + c] - embeddings[j * dim + c];
                    want += d * d;
                }
            }
        }
        want /= (n * k) as f64;
        assert_relative_eq!(res.loss, want, epsilon = 1e-12);
    }

    #[test]
    fn smoothness_gradient_matches_fd() {
        let n = 15;
        let dim = 2;
        let positions = random_points(n, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let embeddings: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let res = smoothness_loss(&embeddings, dim, &positions, 4);
        let h = 1e-6;
        for idx in (0..embeddings.len()).step_by(5) {
            let mut p = embeddings.clone();
            p[idx] += h;
            let mut m = embeddings.clone();
            m[idx] -= h;
            let lp = smoothness_loss(&p, dim, &positions, 4).loss;
            let lm = smoothness_loss(&m, dim, &positions, 4).loss;
            assert_relative_eq!(res.d_embeddings[idx], (lp - lm) / (2.0 * h), max_relative = 1e-5, epsilon = 1e-10);
        }
    }

    #[test]
    fn total_loss_weights_are_wired_exactly() {
        let parts = LossParts::<f64> {
            rgb: 1.0,
            mask: 1.0,
            ssim: 1.0,
            consistency: 1.0,
            smoothness: 1.0,
            omega: 1.0,
        };
        let w = LossWeights::default();
        let total = parts.total(&w);
        assert_eq!(total, 1.0 + 0.1 * 1.0 + 0.01 * 1.0 + 0.01 * 1.0 + 1.0 * 1.0);
        assert_relative_eq!(total, 2.12, epsilon = 1e-12);
    }

    #[test]
    fn zero_components_give_zero_total() {
        let parts = LossParts::<f64>::default();
        assert_eq!(parts.total(&LossWeights::default()), 0.0);
    }

    #[test]
    fn non_finite_component_is_identified_by_name() {
        let parts = LossParts::<f64> { consistency: f64::NAN, ..Default::default() };
        assert_eq!(parts.non_finite_component(), Some("consistency"));
    }
}
