//! Tiled front-to-back alpha compositing, its backward pass, and the
//! brute-force per-pixel reference path.

use super::ImageF;
use crate::math::{real, Real};
use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;

pub const TILE_SIZE: usize = 16;
/// Contributions with alpha below this are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Upper clamp on per-splat alpha.
pub const ALPHA_CLAMP: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// One screen-space Gaussian ready for compositing.
#[derive(Debug, Clone, Copy)]
pub struct Splat<T: Real> {
    pub mean: Vector2<T>,
    pub conic: [T; 3],
    pub color: Vector3<T>,
    /// Post-sigmoid opacity in (0, 1).
    pub opacity: T,
    pub depth: T,
    pub radius: T,
    /// Index into the source cloud, used to scatter gradients.
    pub id: usize,
}

#[derive(Debug, Clone)]
pub struct RenderOutput<T: Real> {
    pub color: ImageF<T>,
    pub alpha: ImageF<T>,
    /// Number of composited splats per pixel.
    pub contributors: Vec<u32>,
}

/// Gradients with respect to splat inputs, indexed by splat `id`.
#[derive(Debug, Clone)]
pub struct SplatGrads<T: Real> {
    pub d_mean: Vec<Vector2<T>>,
    pub d_conic: Vec<[T; 3]>,
    pub d_color: Vec<Vector3<T>>,
    pub d_opacity: Vec<T>,
}

impl<T: Real> SplatGrads<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mean: vec![Vector2::zeros(); n],
            d_conic: vec![[T::zero(); 3]; n],
            d_color: vec![Vector3::zeros(); n],
            d_opacity: vec![T::zero(); n],
        }
    }
}

/// Alpha of `splat` at pixel center `p`, or `None` when outside its square
/// 3-sigma bound or below the alpha cutoff. This pointwise rule is shared by
/// the tiled path, the backward replay, and the reference renderer.
#[inline]
fn splat_alpha<T: Real>(splat: &Splat<T>, px: T, py: T) -> Option<(T, T)> {
    let dx = px - splat.mean.x;
    let dy = py - splat.mean.y;
    if dx.abs() > splat.radius || dy.abs() > splat.radius {
        return None;
    }
    let [a, b, c] = splat.conic;
    let q = a * dx * dx + real::<T>(2.0) * b * dx * dy + c * dy * dy;
    if q < T::zero() {
        return None;
    }
    let g = (-real::<T>(0.5) * q).exp();
    let alpha = (splat.opacity * g).min(real(ALPHA_CLAMP));
    if alpha < real(ALPHA_MIN) {
        return None;
    }
    Some((alpha, g))
}

/// Splat order: front to back by depth, ties broken by id for determinism.
fn sort_key<T: Real>(s: &Splat<T>) -> (T, usize) {
    (s.depth, s.id)
}

fn sorted_indices<T: Real>(splats: &[Splat<T>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..splats.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, ia) = sort_key(&splats[a]);
        let (db, ib) = sort_key(&splats[b]);
        da.partial_cmp(&db).unwrap().then(ia.cmp(&ib))
    });
    order
}

struct TileGrid {
    tiles_x: usize,
    #[allow(dead_code)]
    tiles_y: usize,
    /// Per tile: splat indices (into the splat slice), front-to-back.
    lists: Vec<Vec<usize>>,
}

fn build_tiles<T: Real>(splats: &[Splat<T>], width: usize, height: usize) -> TileGrid {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for &si in &sorted_indices(splats) {
        let s = &splats[si];
        let min_x = (s.mean.x - s.radius).to_f64().unwrap();
        let max_x = (s.mean.x + s.radius).to_f64().unwrap();
        let min_y = (s.mean.y - s.radius).to_f64().unwrap();
        let max_y = (s.mean.y + s.radius).to_f64().unwrap();
        if max_x < 0.0 || max_y < 0.0 || min_x >= width as f64 || min_y >= height as f64 {
            continue;
        }
        let tx0 = (min_x.max(0.0) as usize) / TILE_SIZE;
        let ty0 = (min_y.max(0.0) as usize) / TILE_SIZE;
        let tx1 = ((max_x.min(width as f64 - 1.0)) as usize) / TILE_SIZE;
        let ty1 = ((max_y.min(height as f64 - 1.0)) as usize) / TILE_SIZE;
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                lists[ty * tiles_x + tx].push(si);
            }
        }
    }
    TileGrid { tiles_x, tiles_y, lists }
}

struct PixelState<T: Real> {
    color: Vector3<T>,
    transmittance: T,
    contributors: u32,
}

/// Composite the given splat sequence at one pixel.
fn composite_pixel<T: Real>(
    splats: &[Splat<T>],
    order: &[usize],
    px: T,
    py: T,
) -> PixelState<T> {
    let mut color = Vector3::zeros();
    let mut transmittance = T::one();
    let mut contributors = 0u32;
    for &si in order {
        let s = &splats[si];
        if let Some((alpha, _)) = splat_alpha(s, px, py) {
            color += s.color.scale(alpha * transmittance);
            transmittance *= T::one() - alpha;
            contributors += 1;
            if transmittance < real(TRANSMITTANCE_MIN) {
                break;
            }
        }
    }
    PixelState { color, transmittance, contributors }
}

/// Tiled forward rasterization.
pub fn rasterize<T: Real>(
    splats: &[Splat<T>],
    width: usize,
    height: usize,
    background: &Vector3<T>,
) -> RenderOutput<T> {
    let grid = build_tiles(splats, width, height);
    let tiles: Vec<(usize, Vec<T>, Vec<T>, Vec<u32>)> = (0..grid.lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let w = TILE_SIZE.min(width - x0);
            let h = TILE_SIZE.min(height - y0);
            let order = &grid.lists[ti];
            let mut color = vec![T::zero(); w * h * 3];
            let mut alpha = vec![T::zero(); w * h];
            let mut contrib = vec![0u32; w * h];
            for py in 0..h {
                for px in 0..w {
                    let cx = real::<T>((x0 + px) as f64 + 0.5);
                    let cy = real::<T>((y0 + py) as f64 + 0.5);
                    let st = composite_pixel(splats, order, cx, cy);
                    let o = py * w + px;
                    let final_color = st.color + background.scale(st.transmittance);
                    color[o * 3] = final_color.x;
                    color[o * 3 + 1] = final_color.y;
                    color[o * 3 + 2] = final_color.z;
                    alpha[o] = T::one() - st.transmittance;
                    contrib[o] = st.contributors;
                }
            }
            (ti, color, alpha, contrib)
        })
        .collect();

    let mut out_color = ImageF::zeros(width, height, 3);
    let mut out_alpha = ImageF::zeros(width, height, 1);
    let mut out_contrib = vec![0u32; width * height];
    for (ti, color, alpha, contrib) in tiles {
        let tx = ti % grid.tiles_x;
        let ty = ti / grid.tiles_x;
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let w = TILE_SIZE.min(width - x0);
        let h = TILE_SIZE.min(height - y0);
        for py in 0..h {
            for px in 0..w {
                let src = py * w + px;
                let dst = (y0 + py) * width + (x0 + px);
                out_color.data[dst * 3..dst * 3 + 3]
                    .copy_from_slice(&color[src * 3..src * 3 + 3]);
                out_alpha.data[dst] = alpha[src];
                out_contrib[dst] = contrib[src];
            }
        }
    }
    RenderOutput { color: out_color, alpha: out_alpha, contributors: out_contrib }
}

/// Reference renderer: per-pixel loop over the global front-to-back order,
/// no tiling. Kept independent of the tiled path on purpose.
pub fn rasterize_reference<T: Real>(
    splats: &[Splat<T>],
    width: usize,
    height: usize,
    background: &Vector3<T>,
) -> RenderOutput<T> {
    let order = sorted_indices(splats);
    let mut color = ImageF::zeros(width, height, 3);
    let mut alpha = ImageF::zeros(width, height, 1);
    let mut contributors = vec![0u32; width * height];
    for y in 0..height {
        for x in 0..width {
            let cx = real::<T>(x as f64 + 0.5);
            let cy = real::<T>(y as f64 + 0.5);
            let st = composite_pixel(splats, &order, cx, cy);
            let o = y * width + x;
            let final_color = st.color + background.scale(st.transmittance);
            color.data[o * 3] = final_color.x;
            color.data[o * 3 + 1] = final_color.y;
            color.data[o * 3 + 2] = final_color.z;
            alpha.data[o] = T::one() - st.transmittance;
            contributors[o] = st.contributors;
        }
    }
    RenderOutput { color, alpha, contributors }
}

/// Backward pass. `d_color`/`d_alpha` are cotangent images; `forward` is the
/// cached forward output. Gradients accumulate per splat id in a fixed tile
/// order, so results do not depend on the thread count.
pub fn rasterize_backward<T: Real>(
    splats: &[Splat<T>],
    forward: &RenderOutput<T>,
    d_color: &ImageF<T>,
    d_alpha: &ImageF<T>,
    background: &Vector3<T>,
    splat_count: usize,
) -> SplatGrads<T> {
    let width = forward.color.width;
    let height = forward.color.height;
    let grid = build_tiles(splats, width, height);

    type Contribution<T> = (usize, Vector2<T>, [T; 3], Vector3<T>, T);
    let tile_grads: Vec<Vec<Contribution<T>>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|ti| {
            let tx = ti % grid.tiles_x;
            let ty = ti / grid.tiles_x;
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let w = TILE_SIZE.min(width - x0);
            let h = TILE_SIZE.min(height - y0);
            let order = &grid.lists[ti];
            let mut local: Vec<Contribution<T>> = Vec::new();
            for py in 0..h {
                for px in 0..w {
                    let gx = x0 + px;
                    let gy = y0 + py;
                    backward_pixel(
                        splats,
                        order,
                        gx,
                        gy,
                        forward,
                        d_color,
                        d_alpha,
                        background,
                        &mut local,
                    );
                }
            }
            local
        })
        .collect();

    let mut grads = SplatGrads::zeros(splat_count);
    for tile in tile_grads {
        for (id, dm, dcn, dcl, dop) in tile {
            grads.d_mean[id] += dm;
            for k in 0..3 {
                grads.d_conic[id][k] += dcn[k];
            }
            grads.d_color[id] += dcl;
            grads.d_opacity[id] += dop;
        }
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn backward_pixel<T: Real>(
    splats: &[Splat<T>],
    order: &[usize],
    gx: usize,
    gy: usize,
    forward: &RenderOutput<T>,
    d_color: &ImageF<T>,
    d_alpha: &ImageF<T>,
    background: &Vector3<T>,
    local: &mut Vec<(usize, Vector2<T>, [T; 3], Vector3<T>, T)>,
) {
    let o = gy * forward.color.width + gx;
    let dc = Vector3::new(
        d_color.data[o * 3],
        d_color.data[o * 3 + 1],
        d_color.data[o * 3 + 2],
    );
    let da = d_alpha.data[o];
    if dc == Vector3::zeros() && da == T::zero() {
        return;
    }
    let px = real::<T>(gx as f64 + 0.5);
    let py = real::<T>(gy as f64 + 0.5);

    let t_final = T::one() - forward.alpha.data[o];
    // Pure splat color (forward stored color includes the background term).
    let splat_color = Vector3::new(
        forward.color.data[o * 3],
        forward.color.data[o * 3 + 1],
        forward.color.data[o * 3 + 2],
    ) - background.scale(t_final);

    let mut transmittance = T::one();
    let mut accum = Vector3::<T>::zeros();
    let mut seen = 0u32;
    let n_contrib = forward.contributors[o];
    for &si in order {
        if seen == n_contrib {
            break;
        }
        let s = &splats[si];
        let Some((alpha, g)) = splat_alpha(s, px, py) else { continue };
        seen += 1;
        let weight = alpha * transmittance;
        // Color gradient.
        let d_col = dc.scale(weight);
        // Alpha gradient: direct term plus the suffix correction, the
        // background term, and the alpha-image term.
        let one_m = T::one() - alpha;
        accum += s.color.scale(weight);
        let suffix = (splat_color - accum).scale(T::one() / one_m);
        let mut d_alpha_s = dc.dot(&(s.color.scale(transmittance) - suffix));
        d_alpha_s += (da - dc.dot(background)) * (t_final / one_m);

        // Through alpha = min(clamp, opacity * g): zero gradient when clamped.
        let mut d_mean = Vector2::zeros();
        let mut d_conic = [T::zero(); 3];
        let mut d_opacity = T::zero();
        if s.opacity * g < real(ALPHA_CLAMP) {
            d_opacity = d_alpha_s * g;
            let d_g = d_alpha_s * s.opacity;
            let d_q = -real::<T>(0.5) * g * d_g;
            let dx = px - s.mean.x;
            let dy = py - s.mean.y;
            let [a, b, c] = s.conic;
            d_conic = [d_q * dx * dx, d_q * real::<T>(2.0) * dx * dy, d_q * dy * dy];
            let two = real::<T>(2.0);
            let dq_ddx = two * (a * dx + b * dy);
            let dq_ddy = two * (b * dx + c * dy);
            d_mean = Vector2::new(-d_q * dq_ddx, -d_q * dq_ddy);
        }
        local.push((s.id, d_mean, d_conic, d_col, d_opacity));

        transmittance *= one_m;
        if transmittance < real(TRANSMITTANCE_MIN) {
            break;
        }
    }
}
