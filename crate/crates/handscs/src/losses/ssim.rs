//! Windowed SSIM with an 11x11 Gaussian window and its backward pass with
//! respect to the predicted image.
//!
//! Statistics are computed over valid window positions only (no padding),
//! with the window shrunk to fit images smaller than 11 pixels.

use crate::math::{real, Real};
use crate::renderer::ImageF;
use rayon::prelude::*;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window<T: Real>(size: usize) -> Vec<T> {
    let center = (size - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in w.iter_mut() {
        *v /= sum;
    }
    w.into_iter().map(real).collect()
}

/// Separable Gaussian filter producing one value per valid window top-left.
fn valid_filter<T: Real>(
    src: &[T],
    width: usize,
    height: usize,
    window: &[T],
) -> Vec<T> {
    let ws = window.len();
    let out_w = width - ws + 1;
    let out_h = height - ws + 1;
    // Horizontal pass.
    let mut tmp = vec![T::zero(); out_w * height];
    for y in 0..height {
        for x in 0..out_w {
            let mut acc = T::zero();
            for (k, &g) in window.iter().enumerate() {
                acc += g * src[y * width + x + k];
            }
            tmp[y * out_w + x] = acc;
        }
    }
    // Vertical pass.
    let mut out = vec![T::zero(); out_w * out_h];
    for y in 0..out_h {
        for x in 0..out_w {
            let mut acc = T::zero();
            for (k, &g) in window.iter().enumerate() {
                acc += g * tmp[(y + k) * out_w + x];
            }
            out[y * out_w + x] = acc;
        }
    }
    out
}

/// Per-window SSIM statistics for one channel.
struct SsimMaps<T: Real> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    sxx: Vec<T>,
    syy: Vec<T>,
    sxy: Vec<T>,
}

fn channel_plane<T: Real>(img: &ImageF<T>, channel: usize) -> Vec<T> {
    img.data.iter().skip(channel).step_by(img.channels).copied().collect()
}

fn ssim_maps<T: Real>(
    x: &[T],
    y: &[T],
    width: usize,
    height: usize,
    window: &[T],
) -> SsimMaps<T> {
    let x2: Vec<T> = x.iter().map(|&v| v * v).collect();
    let y2: Vec<T> = y.iter().map(|&v| v * v).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    SsimMaps {
        mu_x: valid_filter(x, width, height, window),
        mu_y: valid_filter(y, width, height, window),
        sxx: valid_filter(&x2, width, height, window),
        syy: valid_filter(&y2, width, height, window),
        sxy: valid_filter(&xy, width, height, window),
    }
}

/// Mean SSIM over channels and valid window positions.
pub fn ssim<T: Real>(pred: &ImageF<T>, gt: &ImageF<T>) -> T {
    assert_eq!(pred.width, gt.width);
    assert_eq!(pred.height, gt.height);
    assert_eq!(pred.channels, gt.channels);
    let ws = SSIM_WINDOW.min(pred.width).min(pred.height);
    let window = gaussian_window::<T>(ws);
    let c1 = real::<T>(SSIM_C1);
    let c2 = real::<T>(SSIM_C2);
    let two = real::<T>(2.0);
    let mut total = T::zero();
    let mut count = 0usize;
    for ch in 0..pred.channels {
        let x = channel_plane(pred, ch);
        let y = channel_plane(gt, ch);
        let maps = ssim_maps(&x, &y, pred.width, pred.height, &window);
        for i in 0..maps.mu_x.len() {
            let (mx, my) = (maps.mu_x[i], maps.mu_y[i]);
            let vx = maps.sxx[i] - mx * mx;
            let vy = maps.syy[i] - my * my;
            let cxy = maps.sxy[i] - mx * my;
            let s = ((two * mx * my + c1) * (two * cxy + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += s;
            count += 1;
        }
    }
    total / real(count as f64)
}

/// Gradient of mean SSIM with respect to the predicted image, scaled by
/// `cotangent` (so the 1 - SSIM loss passes -cotangent).
pub fn ssim_backward<T: Real>(pred: &ImageF<T>, gt: &ImageF<T>, cotangent: T) -> ImageF<T> {
    let ws = SSIM_WINDOW.min(pred.width).min(pred.height);
    let window = gaussian_window::<T>(ws);
    let c1 = real::<T>(SSIM_C1);
    let c2 = real::<T>(SSIM_C2);
    let two = real::<T>(2.0);
    let width = pred.width;
    let height = pred.height;
    let out_w = width - ws + 1;
    let out_h = height - ws + 1;
    let scale = cotangent / real::<T>((out_w * out_h * pred.channels) as f64);

    let mut grad = ImageF::zeros(width, height, pred.channels);
    for ch in 0..pred.channels {
        let x = channel_plane(pred, ch);
        let y = channel_plane(gt, ch);
        let maps = ssim_maps(&x, &y, width, height, &window);
        // Per-window coefficient maps.
        let n = maps.mu_x.len();
        let mut a1 = vec![T::zero(); n];
        let mut a2 = vec![T::zero(); n];
        let mut b1 = vec![T::zero(); n];
        let mut b2 = vec![T::zero(); n];
        for i in 0..n {
            let (mx, my) = (maps.mu_x[i], maps.mu_y[i]);
            let vx = maps.sxx[i] - mx * mx;
            let vy = maps.syy[i] - my * my;
            let cxy = maps.sxy[i] - mx * my;
            a1[i] = two * mx * my + c1;
            a2[i] = two * cxy + c2;
            b1[i] = mx * mx + my * my + c1;
            b2[i] = vx + vy + c2;
        }

        // Gather per pixel over the windows containing it.
        let rows: Vec<Vec<T>> = (0..height)
            .into_par_iter()
            .map(|py| {
                let mut row = vec![T::zero(); width];
                let wy0 = py.saturating_sub(ws - 1);
                let wy1 = py.min(out_h - 1);
                for (px, slot) in row.iter_mut().enumerate() {
                    let wx0 = px.saturating_sub(ws - 1);
                    let wx1 = px.min(out_w - 1);
                    if wy0 > wy1 || wx0 > wx1 {
                        continue;
                    }
                    let mut acc = T::zero();
                    for wy in wy0..=wy1 {
                        for wx in wx0..=wx1 {
                            let wi = wy * out_w + wx;
                            let g = window[py - wy] * window[px - wx];
                            let (mx, my) = (maps.mu_x[wi], maps.mu_y[wi]);
                            let xk = x[py * width + px];
                            let yk = y[py * width + px];
                            let num = (two * my * a2[wi] + a1[wi] * two * (yk - my))
                                * b1[wi]
                                * b2[wi]
                                - a1[wi]
                                    * a2[wi]
                                    * (two * mx * b2[wi] + two * (xk - mx) * b1[wi]);
                            let den = b1[wi] * b2[wi];
                            acc += g * num / (den * den);
                        }
                    }
                    *slot = acc * scale;
                }
                row
            })
            .collect();
        for (py, row) in rows.into_iter().enumerate() {
            for (px, v) in row.into_iter().enumerate() {
                grad.data[(py * width + px) * pred.channels + ch] = v;
            }
        }
    }
    grad
}
