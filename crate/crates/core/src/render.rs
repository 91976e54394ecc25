//! Differentiable tile-binned splat rasterizer and its brute-force oracle.
//!
//! Compositing runs front to back: `C = Σ c_i α'_i T_i` with `T_i = Π_{j<i} (1 − α'_j)`,
//! `α'_i = α_i exp(−½ dᵀ Σ'⁻¹ d)`. The background is black.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::scene::{project_gaussian_backward, project_gaussian_recorded, Camera, GaussianCloud, GaussianGrad, ProjectionRecord, Splat2D, SplatGrad};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderSettings {
    /// Diagonal term added to every projected covariance (px²).
    pub cov2d_regularizer: f64,
    /// Mahalanobis radius beyond which a splat does not touch a pixel.
    pub footprint_sigmas: f64,
    /// Compositing stops once transmittance falls below this value.
    pub min_transmittance: f64,
    pub tile_size: usize,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { cov2d_regularizer: crate::scene::COV2D_REGULARIZER, footprint_sigmas: 4.0, min_transmittance: 1e-4, tile_size: 16 }
    }
}

/// Splats ordered by ascending depth; ties keep the lower source index first.
#[derive(Debug, Clone, Default)]
pub struct SortedSplatList {
    splats: Vec<Splat2D>,
}

impl SortedSplatList {
    pub fn new(mut splats: Vec<Splat2D>) -> Self {
        splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source.cmp(&b.source)));
        Self { splats }
    }

    pub fn as_slice(&self) -> &[Splat2D] {
        &self.splats
    }

    pub fn len(&self) -> usize {
        self.splats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splats.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderTarget {
    pub image: Image,
    /// Per-pixel accumulated opacity `1 − T_final`.
    pub alpha: Vec<f64>,
}

/// Per-splat state reused by the forward and reverse passes.
#[derive(Debug, Clone, Copy)]
struct Footprint {
    center: Vector2<f64>,
    conic: Matrix2<f64>,
    /// Pixel bounding box (inclusive) of the cutoff disc.
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

/// Forward record: per-tile splat bins in depth order.
#[derive(Debug, Clone)]
pub struct RasterTape {
    width: usize,
    height: usize,
    tiles_x: usize,
    tile_size: usize,
    footprints: Vec<Option<Footprint>>,
    bins: Vec<Vec<u32>>,
    settings: RenderSettings,
}

fn footprint(s: &Splat2D, width: usize, height: usize, sigmas: f64) -> Result<Option<Footprint>> {
    let cov = s.cov_matrix();
    let det = cov.determinant();
    if !(det > 0.0) {
        return Err(Error::NumericalDomain(format!("splat {}: covariance not positive definite", s.source)));
    }
    let conic = Matrix2::new(cov[(1, 1)] / det, -cov[(0, 1)] / det, -cov[(1, 0)] / det, cov[(0, 0)] / det);
    let mid = 0.5 * (cov[(0, 0)] + cov[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let radius = sigmas * lambda_max.sqrt();
    let [cx, cy] = s.center;
    // pixel centers sit at integer + 0.5
    let lo_x = (cx - radius - 0.5).ceil();
    let hi_x = (cx + radius - 0.5).floor();
    let lo_y = (cy - radius - 0.5).ceil();
    let hi_y = (cy + radius - 0.5).floor();
    if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x <= (width - 1) as f64 && lo_y <= (height - 1) as f64) || lo_x > hi_x || lo_y > hi_y {
        return Ok(None);
    }
    Ok(Some(Footprint {
        center: Vector2::new(cx, cy),
        conic,
        x0: lo_x.max(0.0) as usize,
        x1: (hi_x as usize).min(width - 1),
        y0: lo_y.max(0.0) as usize,
        y1: (hi_y as usize).min(height - 1),
    }))
}

#[inline]
fn mahalanobis2(f: &Footprint, px: f64, py: f64) -> (f64, Vector2<f64>) {
    let d = Vector2::new(px - f.center.x, py - f.center.y);
    let q = f.conic[(0, 0)] * d.x * d.x + 2.0 * f.conic[(0, 1)] * d.x * d.y + f.conic[(1, 1)] * d.y * d.y;
    (q, d)
}

pub fn rasterize(splats: &SortedSplatList, resolution: [usize; 2], settings: &RenderSettings) -> Result<RenderTarget> {
    rasterize_recorded(splats, resolution, settings).map(|(t, _)| t)
}

/// Forward pass that also returns the record needed by [`rasterize_backward`].
pub fn rasterize_recorded(
    splats: &SortedSplatList,
    resolution: [usize; 2],
    settings: &RenderSettings,
) -> Result<(RenderTarget, RasterTape)> {
    let [width, height] = resolution;
    let ts = settings.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut footprints = Vec::with_capacity(splats.len());
    for (i, s) in splats.as_slice().iter().enumerate() {
        let fp = footprint(s, width, height, settings.footprint_sigmas)?;
        if let Some(f) = &fp {
            for ty in f.y0 / ts..=f.y1 / ts {
                for tx in f.x0 / ts..=f.x1 / ts {
                    bins[ty * tiles_x + tx].push(i as u32);
                }
            }
        }
        footprints.push(fp);
    }
    let tape = RasterTape { width, height, tiles_x, tile_size: ts, footprints, bins, settings: *settings };

    let mut image = Image::new(width, height);
    let mut alpha = vec![0.0; width * height];
    let cutoff = settings.footprint_sigmas * settings.footprint_sigmas;
    let list = splats.as_slice();
    for (tile, bin) in tape.bins.iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        for y in ty * ts..((ty + 1) * ts).min(height) {
            for x in tx * ts..((tx + 1) * ts).min(width) {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut t = 1.0;
                let mut c = [0.0; 3];
                for &i in bin {
                    let f = tape.footprints[i as usize].as_ref().expect("binned splat has a footprint");
                    if x < f.x0 || x > f.x1 || y < f.y0 || y > f.y1 {
                        continue;
                    }
                    let (m2, _) = mahalanobis2(f, px, py);
                    if m2 > cutoff {
                        continue;
                    }
                    let s = &list[i as usize];
                    let a = s.opacity * (-0.5 * m2).exp();
                    let w = a * t;
                    for k in 0..3 {
                        c[k] += s.color[k] * w;
                    }
                    t *= 1.0 - a;
                    if t < settings.min_transmittance {
                        break;
                    }
                }
                if !(c.iter().all(|v| v.is_finite()) && t.is_finite()) {
                    return Err(Error::NumericalDomain(format!("non-finite composite at pixel ({x}, {y})")));
                }
                let p = y * width + x;
                image.data[p * 3..p * 3 + 3].copy_from_slice(&c);
                alpha[p] = 1.0 - t;
            }
        }
    }
    Ok((RenderTarget { image, alpha }, tape))
}

/// Reverse pass: per-pixel colour gradient → gradient for each splat of the sorted list.
pub fn rasterize_backward(target_grad: &Image, splats: &SortedSplatList, tape: &RasterTape) -> Result<Vec<SplatGrad>> {
    if target_grad.width != tape.width || target_grad.height != tape.height {
        return Err(Error::Contract(format!(
            "gradient image {}x{} does not match recorded render {}x{}",
            target_grad.width, target_grad.height, tape.width, tape.height
        )));
    }
    if tape.footprints.len() != splats.len() {
        return Err(Error::Contract("splat list does not match the recorded forward pass".into()));
    }
    let list = splats.as_slice();
    let n = list.len();
    // Accumulators: center (2), conic gradient as symmetric matrix (3), opacity, color (3).
    let mut d_center = vec![[0.0f64; 2]; n];
    let mut d_conic = vec![[0.0f64; 3]; n];
    let mut d_opacity = vec![0.0f64; n];
    let mut d_color = vec![[0.0f64; 3]; n];

    let ts = tape.tile_size;
    let cutoff = tape.settings.footprint_sigmas * tape.settings.footprint_sigmas;
    struct Contribution {
        idx: usize,
        alpha: f64,
        gauss: f64,
        t_before: f64,
        d: Vector2<f64>,
    }
    let mut chain: Vec<Contribution> = Vec::new();
    for (tile, bin) in tape.bins.iter().enumerate() {
        let (tx, ty) = (tile % tape.tiles_x, tile / tape.tiles_x);
        for y in ty * ts..((ty + 1) * ts).min(tape.height) {
            for x in tx * ts..((tx + 1) * ts).min(tape.width) {
                let p = y * tape.width + x;
                let g = [target_grad.data[p * 3], target_grad.data[p * 3 + 1], target_grad.data[p * 3 + 2]];
                if g == [0.0; 3] {
                    continue;
                }
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                chain.clear();
                let mut t = 1.0;
                for &i in bin {
                    let f = tape.footprints[i as usize].as_ref().expect("binned splat has a footprint");
                    if x < f.x0 || x > f.x1 || y < f.y0 || y > f.y1 {
                        continue;
                    }
                    let (m2, d) = mahalanobis2(f, px, py);
                    if m2 > cutoff {
                        continue;
                    }
                    let gauss = (-0.5 * m2).exp();
                    let a = list[i as usize].opacity * gauss;
                    chain.push(Contribution { idx: i as usize, alpha: a, gauss, t_before: t, d });
                    t *= 1.0 - a;
                    if t < tape.settings.min_transmittance {
                        break;
                    }
                }
                // Walk back to front; `behind` is the colour composited behind the current splat.
                let mut behind = [0.0; 3];
                for c in chain.iter().rev() {
                    let s = &list[c.idx];
                    let w = c.alpha * c.t_before;
                    let mut d_alpha = 0.0;
                    for k in 0..3 {
                        d_color[c.idx][k] += g[k] * w;
                        d_alpha += g[k] * c.t_before * (s.color[k] - behind[k]);
                        behind[k] = s.color[k] * c.alpha + (1.0 - c.alpha) * behind[k];
                    }
                    d_opacity[c.idx] += d_alpha * c.gauss;
                    let d_power = d_alpha * c.alpha;
                    let f = tape.footprints[c.idx].as_ref().unwrap();
                    // power = −½ dᵀ Q d, d = pixel − center
                    let qd = f.conic * c.d;
                    d_center[c.idx][0] += d_power * qd.x;
                    d_center[c.idx][1] += d_power * qd.y;
                    d_conic[c.idx][0] += -0.5 * d_power * c.d.x * c.d.x;
                    d_conic[c.idx][1] += -0.5 * d_power * c.d.x * c.d.y;
                    d_conic[c.idx][2] += -0.5 * d_power * c.d.y * c.d.y;
                }
            }
        }
    }

    let mut out = vec![SplatGrad::default(); n];
    for i in 0..n {
        let Some(f) = tape.footprints[i].as_ref() else { continue };
        let gq = Matrix2::new(d_conic[i][0], d_conic[i][1], d_conic[i][1], d_conic[i][2]);
        // Q = Σ⁻¹  ⇒  G_Σ = −Q G_Q Q
        let gs = -(f.conic * gq * f.conic);
        out[i] = SplatGrad {
            center: d_center[i],
            cov: [gs[(0, 0)], gs[(0, 1)] + gs[(1, 0)], gs[(1, 1)]],
            opacity: d_opacity[i],
            color: d_color[i],
        };
    }
    Ok(out)
}

/// Oracle: every splat at every pixel, no footprint cutoff, no early exit.
pub fn rasterize_bruteforce(splats: &SortedSplatList, resolution: [usize; 2]) -> Result<RenderTarget> {
    let [width, height] = resolution;
    let list = splats.as_slice();
    let mut conics = Vec::with_capacity(list.len());
    for s in list {
        let inv = s
            .cov_matrix()
            .try_inverse()
            .ok_or_else(|| Error::NumericalDomain(format!("splat {}: singular covariance", s.source)))?;
        conics.push(inv);
    }
    let mut image = Image::new(width, height);
    let mut alpha = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            let pix = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for (s, q) in list.iter().zip(&conics) {
                let d = pix - Vector2::new(s.center[0], s.center[1]);
                let a = s.opacity * (-0.5 * d.dot(&(q * d))).exp();
                for k in 0..3 {
                    c[k] += s.color[k] * a * t;
                }
                t *= 1.0 - a;
            }
            let p = y * width + x;
            image.data[p * 3..p * 3 + 3].copy_from_slice(&c);
            alpha[p] = 1.0 - t;
        }
    }
    Ok(RenderTarget { image, alpha })
}

/// Everything needed to push image gradients back onto a Gaussian cloud.
#[derive(Debug, Clone)]
pub struct CloudRenderTape {
    pub splats: SortedSplatList,
    pub raster: RasterTape,
    /// Projection records indexed like the cloud (`None` when culled).
    pub projections: Vec<Option<ProjectionRecord>>,
}

/// Projects, sorts and rasterizes a whole cloud through one camera.
pub fn render_cloud(cloud: &GaussianCloud, cam: &Camera, settings: &RenderSettings) -> Result<(RenderTarget, CloudRenderTape)> {
    let mut splats = Vec::with_capacity(cloud.len());
    let mut projections = vec![None; cloud.len()];
    for (j, g) in cloud.iter().enumerate() {
        if let Some((s, rec)) = project_gaussian_recorded(&g, cam, settings.cov2d_regularizer, j)? {
            splats.push(s);
            projections[j] = Some(rec);
        }
    }
    let splats = SortedSplatList::new(splats);
    let (target, raster) = rasterize_recorded(&splats, cam.resolution, settings)?;
    Ok((target, CloudRenderTape { splats, raster, projections }))
}

/// Reverse pass of [`render_cloud`], returning one gradient per Gaussian.
pub fn render_cloud_backward(cloud: &GaussianCloud, cam: &Camera, tape: &CloudRenderTape, image_grad: &Image) -> Result<Vec<GaussianGrad>> {
    let sg = rasterize_backward(image_grad, &tape.splats, &tape.raster)?;
    let mut out = vec![GaussianGrad::default(); cloud.len()];
    for (s, g) in tape.splats.as_slice().iter().zip(&sg) {
        let rec = tape.projections[s.source].as_ref().expect("splat has a projection record");
        out[s.source] = project_gaussian_backward(&cloud.get(s.source), cam, rec, g);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn splat(center: [f64; 2], var: f64, opacity: f64, color: [f64; 3], depth: f64, source: usize) -> Splat2D {
        Splat2D { center, cov: [var, 0.0, var], depth, opacity, color, source }
    }

    #[test]
    fn empty_list_renders_black() {
        let t = rasterize(&SortedSplatList::new(vec![]), [8, 4], &RenderSettings::default()).unwrap();
        assert!(t.image.data.iter().all(|&v| v == 0.0));
        assert!(t.alpha.iter().all(|&v| v == 0.0));
        let b = rasterize_bruteforce(&SortedSplatList::new(vec![]), [8, 4]).unwrap();
        assert!(b.image.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn splat_at_pixel_center() {
        let s = splat([2.5, 1.5], 1.0, 0.5, [1.0, 0.0, 0.0], 1.0, 0);
        let t = rasterize(&SortedSplatList::new(vec![s]), [6, 4], &RenderSettings::default()).unwrap();
        assert_eq!(t.image.at(2, 1), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn two_layer_composite() {
        let front = splat([0.5, 0.5], 1.0, 0.5, [1.0, 0.0, 0.0], 1.0, 0);
        let back = splat([0.5, 0.5], 1.0, 0.5, [0.0, 1.0, 0.0], 2.0, 1);
        let list = SortedSplatList::new(vec![back, front]);
        let t = rasterize(&list, [2, 2], &RenderSettings::default()).unwrap();
        assert_eq!(t.image.at(0, 0), [0.5, 0.25, 0.0]);
        assert_eq!(t.alpha[0], 0.75);
    }

    #[test]
    fn depth_ties_break_by_source() {
        let a = splat([0.5, 0.5], 1.0, 0.5, [1.0, 0.0, 0.0], 1.0, 3);
        let b = splat([0.5, 0.5], 1.0, 0.5, [0.0, 1.0, 0.0], 1.0, 1);
        let list = SortedSplatList::new(vec![a, b]);
        assert_eq!(list.as_slice()[0].source, 1);
    }

    #[test]
    fn saturated_splat_gives_its_color() {
        let s = splat([3.5, 3.5], 4.0, 1.0 - 1e-9, [0.2, 0.4, 0.6], 1.0, 0);
        let t = rasterize_bruteforce(&SortedSplatList::new(vec![s]), [8, 8]).unwrap();
        let c = t.image.at(3, 3);
        for k in 0..3 {
            assert!((c[k] - [0.2, 0.4, 0.6][k]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_parameter_gradient() {
        let s = splat([3.0, 3.3], 2.0, 0.7, [0.2, 0.4, 0.6], 1.0, 0);
        let list = SortedSplatList::new(vec![s]);
        let (_, tape) = rasterize_recorded(&list, [8, 8], &RenderSettings::default()).unwrap();
        let g = rasterize_backward(&Image::new(8, 8), &list, &tape).unwrap();
        assert_eq!(g[0], SplatGrad::default());
    }

    #[test]
    fn color_gradient_of_single_splat_is_sum_of_alphas() {
        let s = splat([3.0, 3.3], 2.0, 0.7, [0.2, 0.4, 0.6], 1.0, 0);
        let list = SortedSplatList::new(vec![s]);
        let settings = RenderSettings::default();
        let (_, tape) = rasterize_recorded(&list, [8, 8], &settings).unwrap();
        let g = rasterize_backward(&Image::filled(8, 8, 1.0), &list, &tape).unwrap();
        let cutoff = settings.footprint_sigmas.powi(2);
        let mut want = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let (dx, dy) = (x as f64 + 0.5 - 3.0, y as f64 + 0.5 - 3.3);
                let m2 = (dx * dx + dy * dy) / 2.0;
                if m2 <= cutoff {
                    want += 0.7 * (-0.5 * m2).exp();
                }
            }
        }
        for k in 0..3 {
            assert!((g[0].color[k] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn record_mismatch_is_contract_error() {
        let list = SortedSplatList::new(vec![splat([1.0, 1.0], 1.0, 0.5, [1.0; 3], 1.0, 0)]);
        let (_, tape) = rasterize_recorded(&list, [4, 4], &RenderSettings::default()).unwrap();
        assert!(matches!(rasterize_backward(&Image::new(5, 4), &list, &tape), Err(Error::Contract(_))));
    }
}
