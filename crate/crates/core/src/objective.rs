//! Window loss: per-frame L1 + DSSIM, top-k hard-frame mining and the three-term
//! motion loss on consecutive-frame differences.
//!
//! Every operation that the trainer differentiates comes in a `*_with_grad` form
//! returning the gradient with respect to the rendered image(s).

use std::fmt;

use crate::error::{Error, Result};
use crate::img::Image;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Weight of the DSSIM term inside the per-frame photometric loss.
    pub lambda_dssim: f64,
    /// `true` uses DSSIM = (1 − SSIM)/2, `false` uses 1 − SSIM.
    pub dssim_halved: bool,
    /// k = max(1, round(topk_ratio · real frames)).
    pub topk_ratio: f64,
    pub frame_weight: f64,
    pub motion_weight: f64,
    pub lambda_diff: f64,
    pub lambda_amp: f64,
    pub lambda_dir: f64,
    /// Pixels whose difference vectors are shorter than this contribute 0 to the direction term.
    pub dir_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_dssim: 0.2,
            dssim_halved: true,
            topk_ratio: 0.6,
            frame_weight: 0.8,
            motion_weight: 0.2,
            lambda_diff: 0.7,
            lambda_amp: 0.2,
            lambda_dir: 0.1,
            dir_eps: 1e-8,
        }
    }
}

// ---------------------------------------------------------------------------
// SSIM

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn ssim_kernel() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut k = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Zero-padded "same" Gaussian blur of a single-channel plane. The kernel is symmetric,
/// so the operator is self-adjoint and the reverse pass reuses it.
fn blur(plane: &[f64], w: usize, h: usize, kernel: &[f64], tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    let r = kernel.len() / 2;
    tmp.clear();
    tmp.resize(w * h, 0.0);
    out.clear();
    out.resize(w * h, 0.0);
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let mut acc = 0.0;
            for xx in lo..=hi {
                acc += kernel[xx + r - x] * row[xx];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += kernel[yy + r - y] * tmp[yy * w + x];
            }
            out[y * w + x] = acc;
        }
    }
}

/// Mean SSIM over pixels and channels, plus its gradient with respect to `x` when requested.
fn ssim_impl(x: &Image, y: &Image, want_grad: bool) -> (f64, Option<Image>) {
    let (w, h) = (x.width, x.height);
    let n = w * h;
    let kernel = ssim_kernel();
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h));
    let norm = 1.0 / (3 * n) as f64;
    let (mut tmp, mut mx, mut my, mut exx, mut eyy, mut exy) = (vec![], vec![], vec![], vec![], vec![], vec![]);
    let mut plane_x = vec![0.0; n];
    let mut plane_y = vec![0.0; n];
    let mut scratch = vec![0.0; n];
    for c in 0..3 {
        for p in 0..n {
            plane_x[p] = x.data[p * 3 + c];
            plane_y[p] = y.data[p * 3 + c];
        }
        blur(&plane_x, w, h, &kernel, &mut tmp, &mut mx);
        blur(&plane_y, w, h, &kernel, &mut tmp, &mut my);
        for p in 0..n {
            scratch[p] = plane_x[p] * plane_x[p];
        }
        blur(&scratch, w, h, &kernel, &mut tmp, &mut exx);
        for p in 0..n {
            scratch[p] = plane_y[p] * plane_y[p];
        }
        blur(&scratch, w, h, &kernel, &mut tmp, &mut eyy);
        for p in 0..n {
            scratch[p] = plane_x[p] * plane_y[p];
        }
        blur(&scratch, w, h, &kernel, &mut tmp, &mut exy);

        let mut u_m = if want_grad { vec![0.0; n] } else { vec![] };
        let mut u_xx = if want_grad { vec![0.0; n] } else { vec![] };
        let mut u_xy = if want_grad { vec![0.0; n] } else { vec![] };
        for p in 0..n {
            let (ux, uy) = (mx[p], my[p]);
            let sxx = exx[p] - ux * ux;
            let syy = eyy[p] - uy * uy;
            let sxy = exy[p] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * sxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = sxx + syy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let d_a1 = a2 / (b1 * b2);
                let d_a2 = a1 / (b1 * b2);
                let d_b1 = -s / b1;
                let d_b2 = -s / b2;
                u_m[p] = norm * (d_a1 * 2.0 * uy + d_a2 * (-2.0 * uy) + d_b1 * 2.0 * ux + d_b2 * (-2.0 * ux));
                u_xx[p] = norm * d_b2;
                u_xy[p] = norm * d_a2 * 2.0;
            }
        }
        if let Some(g) = grad.as_mut() {
            let mut bm = vec![];
            let mut bxx = vec![];
            let mut bxy = vec![];
            blur(&u_m, w, h, &kernel, &mut tmp, &mut bm);
            blur(&u_xx, w, h, &kernel, &mut tmp, &mut bxx);
            blur(&u_xy, w, h, &kernel, &mut tmp, &mut bxy);
            for p in 0..n {
                g.data[p * 3 + c] = bm[p] + 2.0 * plane_x[p] * bxx[p] + plane_y[p] * bxy[p];
            }
        }
    }
    (total * norm, grad)
}

/// Mean SSIM (11×11 Gaussian window, σ = 1.5, zero padding, channels averaged).
pub fn ssim(x: &Image, y: &Image) -> Result<f64> {
    x.check_same_shape(y)?;
    Ok(ssim_impl(x, y, false).0)
}

/// Mean SSIM and its gradient with respect to `x`.
pub fn ssim_with_grad(x: &Image, y: &Image) -> Result<(f64, Image)> {
    x.check_same_shape(y)?;
    let (s, g) = ssim_impl(x, y, true);
    Ok((s, g.expect("gradient requested")))
}

// ---------------------------------------------------------------------------
// Photometric

fn dssim_scale(cfg: &LossConfig) -> f64 {
    if cfg.dssim_halved {
        0.5
    } else {
        1.0
    }
}

/// `(1 − λ)·mean|Î − I| + λ·DSSIM(Î, I)`.
pub fn photometric(rendered: &Image, gt: &Image, cfg: &LossConfig) -> Result<f64> {
    rendered.check_same_shape(gt)?;
    let l1 = rendered.data.iter().zip(&gt.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / rendered.data.len() as f64;
    let s = ssim_impl(rendered, gt, false).0;
    Ok((1.0 - cfg.lambda_dssim) * l1 + cfg.lambda_dssim * dssim_scale(cfg) * (1.0 - s))
}

pub fn photometric_with_grad(rendered: &Image, gt: &Image, cfg: &LossConfig) -> Result<(f64, Image)> {
    rendered.check_same_shape(gt)?;
    let count = rendered.data.len() as f64;
    let (s, sg) = ssim_impl(rendered, gt, true);
    let mut grad = sg.expect("gradient requested");
    let k_ssim = -cfg.lambda_dssim * dssim_scale(cfg);
    let k_l1 = (1.0 - cfg.lambda_dssim) / count;
    let mut l1 = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&rendered.data).zip(&gt.data) {
        let d = a - b;
        l1 += d.abs();
        *g = k_ssim * *g + k_l1 * sign(d);
    }
    let loss = (1.0 - cfg.lambda_dssim) * l1 / count + cfg.lambda_dssim * dssim_scale(cfg) * (1.0 - s);
    Ok((loss, grad))
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

// ---------------------------------------------------------------------------
// Top-k

/// Number of hard frames kept for `real_count` supervised frames (round half up, floor 1).
pub fn topk_count(real_count: usize, ratio: f64) -> usize {
    ((ratio * real_count as f64 + 0.5).floor() as usize).clamp(1, real_count.max(1))
}

/// Mean of the k largest per-frame losses among real frames; `None` entries are placeholders.
/// Ties prefer the lower frame index. Returns the mean and the selected indices (descending loss).
pub fn topk_frame_loss(per_frame: &[Option<f64>], ratio: f64) -> Result<(f64, Vec<usize>)> {
    let mut real: Vec<(usize, f64)> = per_frame.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v))).collect();
    if real.is_empty() {
        return Err(Error::Contract("top-k loss needs at least one real frame".into()));
    }
    let k = topk_count(real.len(), ratio);
    real.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let chosen: Vec<usize> = real[..k].iter().map(|(i, _)| *i).collect();
    let mean = real[..k].iter().map(|(_, v)| v).sum::<f64>() / k as f64;
    Ok((mean, chosen))
}

// ---------------------------------------------------------------------------
// Motion

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionTerms {
    pub l_diff: f64,
    pub l_amp: f64,
    pub l_dir: f64,
    pub l_motion: f64,
    /// False when fewer than two real frames were available (all terms reported as 0).
    pub valid: bool,
}

/// Motion loss over consecutive real frames. `rendered[i]`/`gt[i]` are `None` for placeholders.
/// When `want_grad` is set, returns the gradient per rendered frame (`None` for placeholders).
pub fn motion_loss_impl(
    rendered: &[Option<&Image>],
    gt: &[Option<&Image>],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(MotionTerms, Vec<Option<Image>>)> {
    if rendered.len() != gt.len() {
        return Err(Error::Contract("rendered and ground-truth windows differ in length".into()));
    }
    let real: Vec<usize> = (0..rendered.len())
        .filter(|&i| match (rendered[i], gt[i]) {
            (Some(_), Some(_)) => true,
            (None, None) => false,
            _ => true,
        })
        .collect();
    for &i in &real {
        let (Some(r), Some(g)) = (rendered[i], gt[i]) else {
            return Err(Error::Contract(format!("frame {i} has only one of rendered / ground truth")));
        };
        r.check_same_shape(g)?;
    }
    let mut grads: Vec<Option<Image>> = rendered
        .iter()
        .map(|r| if want_grad { r.map(|im| Image::new(im.width, im.height)) } else { None })
        .collect();
    if real.len() < 2 {
        return Ok((MotionTerms::default(), grads));
    }
    let pairs = real.len() - 1;
    let npix = rendered[real[0]].unwrap().pixels();
    let scale = 1.0 / (pairs * npix) as f64;
    let (mut s_diff, mut s_amp, mut s_dir) = (0.0, 0.0, 0.0);
    for w in real.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (ra, rb) = (rendered[a].unwrap(), rendered[b].unwrap());
        let (ga, gb) = (gt[a].unwrap(), gt[b].unwrap());
        for p in 0..npix {
            let mut dr = [0.0; 3];
            let mut dg = [0.0; 3];
            for c in 0..3 {
                dr[c] = rb.data[p * 3 + c] - ra.data[p * 3 + c];
                dg[c] = gb.data[p * 3 + c] - ga.data[p * 3 + c];
            }
            let mut g = [0.0; 3];
            // diff
            for c in 0..3 {
                let e = dr[c] - dg[c];
                s_diff += e.abs();
                g[c] += cfg.lambda_diff * scale * sign(e);
            }
            // amplitude hinge
            let n1_r: f64 = dr.iter().map(|v| v.abs()).sum();
            let n1_g: f64 = dg.iter().map(|v| v.abs()).sum();
            let hinge = n1_g - n1_r;
            if hinge > 0.0 {
                s_amp += hinge;
                for c in 0..3 {
                    g[c] -= cfg.lambda_amp * scale * sign(dr[c]);
                }
            }
            // direction
            let n2_r = (dr[0] * dr[0] + dr[1] * dr[1] + dr[2] * dr[2]).sqrt();
            let n2_g = (dg[0] * dg[0] + dg[1] * dg[1] + dg[2] * dg[2]).sqrt();
            if n2_r >= cfg.dir_eps && n2_g >= cfg.dir_eps {
                let denom = n2_r.max(cfg.dir_eps) * n2_g.max(cfg.dir_eps);
                let dot = dr[0] * dg[0] + dr[1] * dg[1] + dr[2] * dg[2];
                let cos = dot / denom;
                // 1 − cos via the unit-vector gap so identical directions give exactly 0
                s_dir += 0.5 * (0..3).map(|c| (dr[c] / n2_r - dg[c] / n2_g).powi(2)).sum::<f64>();
                for c in 0..3 {
                    let dcos = dg[c] / denom - cos * dr[c] / (n2_r * n2_r);
                    g[c] -= cfg.lambda_dir * scale * dcos;
                }
            }
            if want_grad {
                for c in 0..3 {
                    grads[b].as_mut().unwrap().data[p * 3 + c] += g[c];
                    grads[a].as_mut().unwrap().data[p * 3 + c] -= g[c];
                }
            }
        }
    }
    let l_diff = s_diff * scale;
    let l_amp = s_amp * scale;
    let l_dir = s_dir * scale;
    let terms = MotionTerms {
        l_diff,
        l_amp,
        l_dir,
        l_motion: cfg.lambda_diff * l_diff + cfg.lambda_amp * l_amp + cfg.lambda_dir * l_dir,
        valid: true,
    };
    Ok((terms, grads))
}

/// Which branch each non-smooth piece of the motion loss takes, pair by pair and pixel by pixel.
/// Two inputs with equal patterns lie on the same smooth piece.
pub fn motion_activation_pattern(rendered: &[Option<&Image>], gt: &[Option<&Image>], cfg: &LossConfig) -> Vec<bool> {
    let real: Vec<usize> = (0..rendered.len()).filter(|&i| rendered[i].is_some() && gt[i].is_some()).collect();
    let mut pat = Vec::new();
    for w in real.windows(2) {
        let (ra, rb, ga, gb) = (rendered[w[0]].unwrap(), rendered[w[1]].unwrap(), gt[w[0]].unwrap(), gt[w[1]].unwrap());
        for p in 0..ra.pixels() {
            let dr: [f64; 3] = std::array::from_fn(|c| rb.data[p * 3 + c] - ra.data[p * 3 + c]);
            let dg: [f64; 3] = std::array::from_fn(|c| gb.data[p * 3 + c] - ga.data[p * 3 + c]);
            for c in 0..3 {
                pat.push(dr[c] > dg[c]);
                pat.push(dr[c] > 0.0);
            }
            let n1_r: f64 = dr.iter().map(|v| v.abs()).sum();
            let n1_g: f64 = dg.iter().map(|v| v.abs()).sum();
            pat.push(n1_g > n1_r);
            pat.push(dr.iter().map(|v| v * v).sum::<f64>().sqrt() >= cfg.dir_eps);
        }
    }
    pat
}

pub fn motion_loss(rendered: &[Option<&Image>], gt: &[Option<&Image>], cfg: &LossConfig) -> Result<MotionTerms> {
    motion_loss_impl(rendered, gt, cfg, false).map(|(t, _)| t)
}

// ---------------------------------------------------------------------------
// Total

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLossReport {
    /// Photometric loss per slot; `None` for placeholder slots.
    pub per_frame_photometric: Vec<Option<f64>>,
    pub selected_indices: Vec<usize>,
    pub l_frame: f64,
    pub motion: MotionTerms,
    pub total: f64,
}

impl FrameLossReport {
    pub fn l_motion(&self) -> f64 {
        self.motion.l_motion
    }
}

impl fmt::Display for FrameLossReport {
    /// `total=… frame=… motion=… diff=… amp=… dir=… topk=i,j,…`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sel: Vec<String> = self.selected_indices.iter().map(|i| i.to_string()).collect();
        write!(
            f,
            "total={:.9e} frame={:.9e} motion={:.9e} diff={:.9e} amp={:.9e} dir={:.9e} topk={}",
            self.total,
            self.l_frame,
            self.motion.l_motion,
            self.motion.l_diff,
            self.motion.l_amp,
            self.motion.l_dir,
            sel.join(",")
        )
    }
}

/// Full window loss and (optionally) its gradient per rendered slot.
pub fn total_loss_impl(
    rendered: &[Option<&Image>],
    gt: &[Option<&Image>],
    cfg: &LossConfig,
    want_grad: bool,
) -> Result<(FrameLossReport, Vec<Option<Image>>)> {
    let (motion, mut grads) = motion_loss_impl(rendered, gt, cfg, want_grad)?;
    let mut per_frame = vec![None; rendered.len()];
    let mut frame_grads: Vec<Option<Image>> = vec![None; rendered.len()];
    for i in 0..rendered.len() {
        if let (Some(r), Some(g)) = (rendered[i], gt[i]) {
            if want_grad {
                let (l, gr) = photometric_with_grad(r, g, cfg)?;
                per_frame[i] = Some(l);
                frame_grads[i] = Some(gr);
            } else {
                per_frame[i] = Some(photometric(r, g, cfg)?);
            }
        }
    }
    let (l_frame, selected) = topk_frame_loss(&per_frame, cfg.topk_ratio)?;
    let total = cfg.frame_weight * l_frame + cfg.motion_weight * motion.l_motion;
    if want_grad {
        let k = selected.len() as f64;
        for g in grads.iter_mut().flatten() {
            g.data.iter_mut().for_each(|v| *v *= cfg.motion_weight);
        }
        for &i in &selected {
            let fg = frame_grads[i].as_ref().unwrap();
            let dst = grads[i].as_mut().unwrap();
            for (d, s) in dst.data.iter_mut().zip(&fg.data) {
                *d += cfg.frame_weight / k * s;
            }
        }
    }
    let report = FrameLossReport { per_frame_photometric: per_frame, selected_indices: selected, l_frame, motion, total };
    Ok((report, grads))
}

pub fn total_loss(rendered: &[Option<&Image>], gt: &[Option<&Image>], cfg: &LossConfig) -> Result<FrameLossReport> {
    total_loss_impl(rendered, gt, cfg, false).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: usize, h: usize) -> Image {
        let mut im = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let v = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
                for c in 0..3 {
                    im.data[(y * w + x) * 3 + c] = v;
                }
            }
        }
        im
    }

    #[test]
    fn photometric_identical_is_zero() {
        let a = checker(8, 8);
        assert_eq!(photometric(&a, &a, &LossConfig::default()).unwrap(), 0.0);
    }

    #[test]
    fn photometric_inverted_binary_l1_term() {
        let a = checker(8, 8);
        let mut b = a.clone();
        b.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        let cfg = LossConfig { lambda_dssim: 0.2, ..Default::default() };
        let l1_only = LossConfig { lambda_dssim: 0.0, ..cfg };
        // L1 term alone: (1 − 0.2)·1
        let l = photometric(&b, &a, &cfg).unwrap();
        let s = ssim(&b, &a).unwrap();
        assert!((l - (0.8 + 0.2 * 0.5 * (1.0 - s))).abs() < 1e-15);
        assert_eq!(photometric(&b, &a, &l1_only).unwrap(), 1.0);
    }

    #[test]
    fn photometric_shape_mismatch() {
        assert!(matches!(photometric(&Image::new(4, 4), &Image::new(4, 5), &LossConfig::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn ssim_self_is_one() {
        let a = checker(9, 7);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn topk_examples() {
        let l: Vec<Option<f64>> = [5.0, 1.0, 4.0, 2.0, 3.0, 6.0].iter().map(|&v| Some(v)).collect();
        let (m, idx) = topk_frame_loss(&l, 0.6).unwrap();
        assert_eq!(m, 4.5);
        assert_eq!(idx, vec![5, 0, 2, 4]);

        let eq = vec![Some(2.0); 6];
        let (m, idx) = topk_frame_loss(&eq, 0.6).unwrap();
        assert_eq!(m, 2.0);
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let one = vec![None, Some(7.0), None];
        assert_eq!(topk_frame_loss(&one, 0.6).unwrap(), (7.0, vec![1]));

        assert!(matches!(topk_frame_loss(&[None, None], 0.6), Err(Error::Contract(_))));
        assert_eq!(topk_count(4, 0.6), 2);
        assert_eq!(topk_count(6, 0.6), 4);
        assert_eq!(topk_count(1, 0.6), 1);
    }

    fn seq(vals: &[f64]) -> Vec<Image> {
        vals.iter().map(|&v| Image::filled(4, 4, v)).collect()
    }

    fn refs(v: &[Image]) -> Vec<Option<&Image>> {
        v.iter().map(Some).collect()
    }

    #[test]
    fn motion_perfect_is_zero() {
        let s = seq(&[0.1, 0.4, 0.2]);
        let m = motion_loss(&refs(&s), &refs(&s), &LossConfig::default()).unwrap();
        assert_eq!((m.l_diff, m.l_amp, m.l_dir, m.l_motion), (0.0, 0.0, 0.0, 0.0));
        assert!(m.valid);
    }

    #[test]
    fn motion_static_gt_moving_render() {
        let gt = seq(&[0.3, 0.3, 0.3]);
        let r = seq(&[0.1, 0.4, 0.2]);
        let m = motion_loss(&refs(&r), &refs(&gt), &LossConfig::default()).unwrap();
        assert_eq!(m.l_amp, 0.0);
        assert_eq!(m.l_dir, 0.0);
        assert!(m.l_diff > 0.0);
    }

    #[test]
    fn motion_opposite_direction_is_two() {
        let gt = seq(&[0.5, 1.0, 0.5]);
        let r = seq(&[0.5, 0.0, 0.5]);
        let m = motion_loss(&refs(&r), &refs(&gt), &LossConfig::default()).unwrap();
        assert!((m.l_dir - 2.0).abs() < 1e-12);
        // equal amplitudes: hinge exactly at the kink contributes 0
        assert_eq!(m.l_amp, 0.0);
    }

    #[test]
    fn motion_needs_two_real_frames() {
        let s = seq(&[0.1, 0.4]);
        let m = motion_loss(&[Some(&s[0]), None], &[Some(&s[1]), None], &LossConfig::default()).unwrap();
        assert!(!m.valid);
        assert_eq!(m.l_motion, 0.0);
    }

    #[test]
    fn total_mixing_arithmetic() {
        let cfg = LossConfig::default();
        assert!((cfg.frame_weight * 1.0 + cfg.motion_weight * 0.5 - 0.9).abs() < 1e-15);
        let s = seq(&[0.1, 0.4, 0.2]);
        let r = total_loss(&refs(&s), &refs(&s), &cfg).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn placeholders_are_unsupervised() {
        let cfg = LossConfig::default();
        let gt = seq(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let r = seq(&[0.15, 0.9, 0.35, 0.4, 0.9, 0.6]);
        let mask = [true, false, true, true, false, true];
        let rr: Vec<Option<&Image>> = r.iter().zip(mask).map(|(im, m)| m.then_some(im)).collect();
        let gg: Vec<Option<&Image>> = gt.iter().zip(mask).map(|(im, m)| m.then_some(im)).collect();
        let (rep, grads) = total_loss_impl(&rr, &gg, &cfg, true).unwrap();
        assert_eq!(rep.selected_indices.len(), 2);
        assert!(rep.per_frame_photometric[1].is_none());
        assert!(grads[1].is_none() && grads[4].is_none());
    }
}
