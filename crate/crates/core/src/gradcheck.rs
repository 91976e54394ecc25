//! Finite-difference verification of every hand-written reverse pass.
//!
//! Each component builds a tiny random instance per seed, computes analytic
//! gradients of a scalar loss and compares them with central differences at
//! steps h and h/2, combined by one Richardson extrapolation.
//! The relative error of one entry is `|a − n| / max(|a|, |n|, floor)` with
//! `floor = 1e-5 · max(1, |L|)`. Entries whose perturbation flips a ReLU unit
//! or another branch switch (motion-loss signs, top-k membership) are counted as
//! kink crossings and excluded, since the derivative is undefined there.
//!
//! The renderer instances widen the footprint cutoff to 8σ and disable early
//! termination: both are intentional discontinuities of the fast path whose
//! jumps would otherwise dominate a difference quotient.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::control::{propagate, propagate_backward, skin_weights, skin_weights_backward, AffinityEmbedder, AffinityMode, AffinityParams, ControlNodes, build_skinning};
use crate::deformer::{self, DeformWindow, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::{Model, ParamGroup};
use crate::objective::{motion_activation_pattern, total_loss_impl, LossConfig};
use crate::quat;
use crate::render::{render_cloud, render_cloud_backward, RenderSettings};
use crate::scene::{build_covariance, build_covariance_backward, project_gaussian_backward, project_gaussian_recorded, Camera, Gaussian3D, GaussianCloud, SplatGrad};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    SceneCore,
    Renderer,
    ControlGraph,
    Deformer,
    Objective,
    Pipeline,
}

impl Component {
    pub const ALL: [Component; 6] =
        [Component::SceneCore, Component::Renderer, Component::ControlGraph, Component::Deformer, Component::Objective, Component::Pipeline];

    pub fn name(self) -> &'static str {
        match self {
            Component::SceneCore => "scene-core",
            Component::Renderer => "renderer",
            Component::ControlGraph => "control-graph",
            Component::Deformer => "deformer",
            Component::Objective => "objective",
            Component::Pipeline => "pipeline",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Component::SceneCore => 1e-5,
            Component::Pipeline => 1e-3,
            _ => 1e-4,
        }
    }
}

impl FromStr for Component {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "scene-core" | "scene" => Component::SceneCore,
            "renderer" | "render" => Component::Renderer,
            "control-graph" | "control" => Component::ControlGraph,
            "deformer" | "temporal-deformer" | "network" => Component::Deformer,
            "objective" | "loss" => Component::Objective,
            "pipeline" | "full" => Component::Pipeline,
            other => return Err(Error::Config(format!("unknown grad-check component {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub seed: u64,
    pub label: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub component: Component,
    pub seeds: u64,
    pub checked: usize,
    pub kink_skips: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Entries above tolerance, worst first (at most 10).
    pub worst: Vec<Mismatch>,
    pub seconds: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.checked > 0
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "grad-check {}: {} seeds, {} entries, {} kink skips, max rel error {:.3e} (tol {:.0e}) in {:.2}s: {}",
            self.component.name(),
            self.seeds,
            self.checked,
            self.kink_skips,
            self.max_rel_error,
            self.tolerance,
            self.seconds,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for m in &self.worst {
            writeln!(f, "  seed {} {}: analytic {:.9e} numeric {:.9e} rel {:.3e}", m.seed, m.label, m.analytic, m.numeric, m.rel_error)?;
        }
        Ok(())
    }
}

/// Loss value plus an optional activation pattern for kink detection.
type Eval = (f64, Vec<bool>);

struct Accumulator {
    seed: u64,
    checked: usize,
    kinks: usize,
    max_rel: f64,
    tol: f64,
    bad: Vec<Mismatch>,
}

impl Accumulator {
    /// Compares `analytic` with the extrapolated central difference of `eval_at(offset)`.
    fn check(&mut self, label: impl Fn() -> String, analytic: f64, base: &Eval, mut eval_at: impl FnMut(f64) -> Result<Eval>) -> Result<()> {
        let mut quotient = |h: f64| -> Result<Option<f64>> {
            let (up, pu) = eval_at(h)?;
            let (dn, pd) = eval_at(-h)?;
            Ok((pu == base.1 && pd == base.1).then(|| (up - dn) / (2.0 * h)))
        };
        let (Some(wide), Some(narrow)) = (quotient(FD_STEP)?, quotient(0.5 * FD_STEP)?) else {
            self.kinks += 1;
            return Ok(());
        };
        // Richardson step: cancels the h² truncation term, which the steep encodings make visible
        let numeric = (4.0 * narrow - wide) / 3.0;
        // roundoff of the extrapolated quotient is a few 1e-10 on O(1) losses; the floor keeps near-zero entries out of the ratio
        let floor = 1e-5 * base.0.abs().max(1.0);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if rel > self.max_rel || rel.is_nan() {
            self.max_rel = if rel.is_nan() { f64::INFINITY } else { rel };
        }
        if !(rel < self.tol) {
            self.bad.push(Mismatch { seed: self.seed, label: label(), analytic, numeric, rel_error: rel });
        }
        Ok(())
    }
}

fn randn<R: Rng>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

fn random_gaussian<R: Rng>(rng: &mut R, spread: f64) -> Gaussian3D {
    let q = [1.0 + 0.5 * randn(rng), 0.5 * randn(rng), 0.5 * randn(rng), 0.5 * randn(rng)];
    Gaussian3D {
        mean: [spread * randn(rng), spread * randn(rng), spread * randn(rng)],
        rotation: quat::normalize(&q).0,
        log_scale: [rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6), rng.random_range(-2.6..-1.6)],
        opacity_logit: rng.random_range(-1.0..1.5),
        color: [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)],
    }
}

fn random_camera<R: Rng>(rng: &mut R, res: usize) -> Result<Camera> {
    let az: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let el: f64 = rng.random_range(-0.4..0.6);
    let d = 2.0;
    let eye = [d * el.cos() * az.sin(), d * el.sin(), d * el.cos() * az.cos()];
    Camera::look_at("check", eye, [0.0; 3], [0.0, 1.0, 0.0], res as f64 * 1.6, [res, res])
}

/// Renderer settings for gradient checks (no cutoff or early-exit discontinuities).
pub fn smooth_render_settings() -> RenderSettings {
    RenderSettings { footprint_sigmas: 8.0, min_transmittance: 0.0, ..RenderSettings::default() }
}

fn gaussian_field(g: &mut Gaussian3D, k: usize) -> &mut f64 {
    match k {
        0..=2 => &mut g.mean[k],
        3..=6 => &mut g.rotation[k - 3],
        7..=9 => &mut g.log_scale[k - 7],
        10 => &mut g.opacity_logit,
        _ => &mut g.color[k - 11],
    }
}

fn gaussian_grad_field(g: &crate::scene::GaussianGrad, k: usize) -> f64 {
    match k {
        0..=2 => g.mean[k],
        3..=6 => g.rotation[k - 3],
        7..=9 => g.log_scale[k - 7],
        10 => g.opacity_logit,
        _ => g.color[k - 11],
    }
}

const FIELD_NAMES: [&str; 14] = ["x", "y", "z", "qw", "qx", "qy", "qz", "s0", "s1", "s2", "opacity", "r", "g", "b"];

fn check_scene_core(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // covariance: L = tr(G Σ) with a random symmetric G
    let mut gm = Matrix3::from_fn(|_, _| randn(&mut rng));
    gm = 0.5 * (gm + gm.transpose());
    let g = random_gaussian(&mut rng, 0.3);
    let cov_loss = |q: &quat::Quat, s: &[f64; 3]| -> Result<Eval> { Ok(((gm * build_covariance(q, s)?).trace(), vec![])) };
    let (dq, ds) = build_covariance_backward(&g.rotation, &g.log_scale, &gm);
    let base = cov_loss(&g.rotation, &g.log_scale)?;
    for k in 0..4 {
        acc.check(|| format!("covariance d{}", FIELD_NAMES[3 + k]), dq[k], &base, |h| {
            let mut q = g.rotation;
            q[k] += h;
            cov_loss(&q, &g.log_scale)
        })?;
    }
    for k in 0..3 {
        acc.check(|| format!("covariance ds{k}"), ds[k], &base, |h| {
            let mut s = g.log_scale;
            s[k] += h;
            cov_loss(&g.rotation, &s)
        })?;
    }
    // projection: L = Σ r · (center, cov, opacity, color)
    let cam = random_camera(&mut rng, 16)?;
    let w: Vec<f64> = (0..9).map(|_| randn(&mut rng)).collect();
    let proj_loss = |g: &Gaussian3D| -> Result<Eval> {
        let (s, _) = project_gaussian_recorded(g, &cam, crate::scene::COV2D_REGULARIZER, 0)?
            .ok_or_else(|| Error::Contract("grad-check Gaussian culled".into()))?;
        let v = w[0] * s.center[0]
            + w[1] * s.center[1]
            + w[2] * s.cov[0]
            + w[3] * s.cov[1]
            + w[4] * s.cov[2]
            + w[5] * s.opacity
            + w[6] * s.color[0]
            + w[7] * s.color[1]
            + w[8] * s.color[2];
        Ok((v, vec![]))
    };
    let (_, rec) = project_gaussian_recorded(&g, &cam, crate::scene::COV2D_REGULARIZER, 0)?.expect("in front of camera");
    let dsplat = SplatGrad { center: [w[0], w[1]], cov: [w[2], w[3], w[4]], opacity: w[5], color: [w[6], w[7], w[8]] };
    let grad = project_gaussian_backward(&g, &cam, &rec, &dsplat);
    let base = proj_loss(&g)?;
    for k in 0..14 {
        acc.check(|| format!("projection d{}", FIELD_NAMES[k]), gaussian_grad_field(&grad, k), &base, |h| {
            let mut gg = g;
            *gaussian_field(&mut gg, k) += h;
            proj_loss(&gg)
        })?;
    }
    Ok(())
}

fn random_weights<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| randn(rng)).collect()
}

fn check_renderer(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = GaussianCloud::from_gaussians(&(0..8).map(|_| random_gaussian(&mut rng, 0.25)).collect::<Vec<_>>());
    let cam = random_camera(&mut rng, 16)?;
    let settings = smooth_render_settings();
    let w = Image::from_data(16, 16, random_weights(&mut rng, 16 * 16 * 3))?;
    let loss = |c: &GaussianCloud| -> Result<Eval> {
        let (t, _) = render_cloud(c, &cam, &settings)?;
        Ok((t.image.data.iter().zip(&w.data).map(|(a, b)| a * b).sum(), vec![]))
    };
    let (_, tape) = render_cloud(&cloud, &cam, &settings)?;
    let grads = render_cloud_backward(&cloud, &cam, &tape, &w)?;
    let base = loss(&cloud)?;
    for j in 0..cloud.len() {
        for k in 0..14 {
            acc.check(|| format!("gaussian {j} d{}", FIELD_NAMES[k]), gaussian_grad_field(&grads[j], k), &base, |h| {
                let mut c = cloud.clone();
                let mut g = c.get(j);
                *gaussian_field(&mut g, k) += h;
                set_gaussian(&mut c, j, &g);
                loss(&c)
            })?;
        }
    }
    Ok(())
}

fn set_gaussian(c: &mut GaussianCloud, j: usize, g: &Gaussian3D) {
    c.means[j] = g.mean;
    c.rotations[j] = g.rotation;
    c.log_scales[j] = g.log_scale;
    c.opacity_logits[j] = g.opacity_logit;
    c.colors[j] = g.color;
}

fn random_window<R: Rng>(rng: &mut R, nodes: usize, frames: usize) -> DeformWindow {
    let mut w = DeformWindow::identity(nodes, (0..frames).map(|t| t as f64 / frames as f64).collect(), vec![false; frames]);
    for r in 0..nodes * frames {
        w.delta_p[r] = [0.1 * randn(rng), 0.1 * randn(rng), 0.1 * randn(rng)];
        w.delta_s[r] = [0.1 * randn(rng), 0.1 * randn(rng), 0.1 * randn(rng)];
        w.delta_q[r] = quat::normalize(&[1.0, 0.2 * randn(rng), 0.2 * randn(rng), 0.2 * randn(rng)]).0;
    }
    w
}

fn check_control_graph(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let code_dim = 4;
    let cloud = GaussianCloud::from_gaussians(&(0..4).map(|_| random_gaussian(&mut rng, 0.3)).collect::<Vec<_>>());
    let positions: Vec<[f64; 3]> = (0..3).map(|_| [0.3 * randn(&mut rng), 0.3 * randn(&mut rng), 0.3 * randn(&mut rng)]).collect();
    let codes = random_weights(&mut rng, 3 * code_dim);
    let nodes = ControlNodes::new(positions, codes, code_dim)?;
    let embedder = AffinityEmbedder::random(code_dim, &mut rng);
    let window = random_window(&mut rng, 3, 2);
    let slot = 1;
    let wm: Vec<f64> = random_weights(&mut rng, 4 * 10);
    for mode in [AffinityMode::Learned, AffinityMode::Spatial] {
        let params0 = AffinityParams { mode, nodes: &nodes, embedder: &embedder, spatial_scale: 2.0 };
        let skin = build_skinning(&cloud, &params0, 3, 0)?;
        // L = Σ wm · (deformed mean, rotation, log-scale)
        let loss = |cloud: &GaussianCloud, nodes: &ControlNodes, emb: &AffinityEmbedder, win: &DeformWindow| -> Result<Eval> {
            let p = AffinityParams { mode, nodes, embedder: emb, spatial_scale: 2.0 };
            let (w, tape) = skin_weights(cloud, &p, &skin);
            let (d, _) = propagate(&skin, &w, win, slot, cloud)?;
            let mut v = 0.0;
            for j in 0..d.len() {
                let f = [&d.means[j][..], &d.rotations[j][..], &d.log_scales[j][..]].concat();
                v += f.iter().zip(&wm[j * 10..(j + 1) * 10]).map(|(a, b)| a * b).sum::<f64>();
            }
            Ok((v, tape.activation_pattern()))
        };
        let (w, wtape) = skin_weights(&cloud, &params0, &skin);
        let (_, ptape) = propagate(&skin, &w, &window, slot, &cloud)?;
        let mut d_def = vec![crate::scene::GaussianGrad::default(); cloud.len()];
        for j in 0..cloud.len() {
            let r = &wm[j * 10..(j + 1) * 10];
            d_def[j].mean = [r[0], r[1], r[2]];
            d_def[j].rotation = [r[3], r[4], r[5], r[6]];
            d_def[j].log_scale = [r[7], r[8], r[9]];
        }
        let mut d_win = window.zeros_like();
        let pg = propagate_backward(&skin, &w, &window, &cloud, &ptape, &d_def, &mut d_win);
        let ag = skin_weights_backward(&cloud, &params0, &skin, &wtape, &pg.weights);
        let base = loss(&cloud, &nodes, &embedder, &window)?;
        let tag = if mode == AffinityMode::Learned { "learned" } else { "spatial" };
        for j in 0..cloud.len() {
            for k in 0..10 {
                let a = gaussian_grad_field(&pg.cloud[j], k) + gaussian_grad_field(&ag.cloud[j], k);
                acc.check(|| format!("{tag} gaussian {j} d{}", FIELD_NAMES[k]), a, &base, |h| {
                    let mut c = cloud.clone();
                    let mut g = c.get(j);
                    *gaussian_field(&mut g, k) += h;
                    set_gaussian(&mut c, j, &g);
                    loss(&c, &nodes, &embedder, &window)
                })?;
            }
        }
        if mode == AffinityMode::Learned {
            for i in 0..embedder.params.len() {
                acc.check(|| format!("embedder[{i}]"), ag.embedder[i], &base, |h| {
                    let mut e = embedder.clone();
                    e.params[i] += h;
                    loss(&cloud, &nodes, &e, &window)
                })?;
            }
            for i in 0..nodes.codes.len() {
                acc.check(|| format!("code[{i}]"), ag.codes[i], &base, |h| {
                    let mut n = nodes.clone();
                    n.codes[i] += h;
                    loss(&cloud, &n, &embedder, &window)
                })?;
            }
        } else {
            for i in 0..nodes.len() {
                for a in 0..3 {
                    acc.check(|| format!("node {i} position {a}"), ag.node_positions[i][a], &base, |h| {
                        let mut n = nodes.clone();
                        n.positions[i][a] += h;
                        loss(&cloud, &n, &embedder, &window)
                    })?;
                }
            }
        }
        for i in 0..3 {
            let r = window.index(i, slot);
            for a in 0..3 {
                acc.check(|| format!("{tag} node {i} dp{a}"), d_win.delta_p[r][a], &base, |h| {
                    let mut wn = window.clone();
                    wn.delta_p[r][a] += h;
                    loss(&cloud, &nodes, &embedder, &wn)
                })?;
                acc.check(|| format!("{tag} node {i} ds{a}"), d_win.delta_s[r][a], &base, |h| {
                    let mut wn = window.clone();
                    wn.delta_s[r][a] += h;
                    loss(&cloud, &nodes, &embedder, &wn)
                })?;
            }
            for a in 0..4 {
                acc.check(|| format!("{tag} node {i} dq{a}"), d_win.delta_q[r][a], &base, |h| {
                    let mut wn = window.clone();
                    wn.delta_q[r][a] += h;
                    loss(&cloud, &nodes, &embedder, &wn)
                })?;
            }
        }
    }
    Ok(())
}

fn check_deformer(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = NetConfig { width: 16, ..NetConfig::default() };
    let mut params = NetParams::init(&cfg, &mut rng)?;
    params.randomize_heads(0.3, &mut rng);
    let positions: Vec<[f64; 3]> = (0..3).map(|_| [0.3 * randn(&mut rng), 0.3 * randn(&mut rng), 0.3 * randn(&mut rng)]).collect();
    let times = [0.0, 0.3, 0.65, 1.0];
    let mask = deformer::sample_mask(4, cfg.mask_ratio_max, None, &mut rng);
    // L = sum of every window entry
    let loss = |p: &NetParams, pos: &[[f64; 3]]| -> Result<Eval> {
        let (w, tape) = deformer::forward(pos, &times, &mask, p)?;
        let v = w.delta_p.iter().flatten().chain(w.delta_q.iter().flatten()).chain(w.delta_s.iter().flatten()).sum::<f64>();
        Ok((v, tape.activation_pattern()))
    };
    let (w, tape) = deformer::forward(&positions, &times, &mask, &params)?;
    let mut ones = w.zeros_like();
    ones.delta_p.iter_mut().for_each(|v| *v = [1.0; 3]);
    ones.delta_q.iter_mut().for_each(|v| *v = [1.0; 4]);
    ones.delta_s.iter_mut().for_each(|v| *v = [1.0; 3]);
    let g = deformer::backward(&params, &w, &tape, &ones);
    let base = loss(&params, &positions)?;
    for i in 0..params.values.len() {
        acc.check(|| format!("network[{i}]"), g.params[i], &base, |h| {
            let mut p = params.clone();
            p.values[i] += h;
            loss(&p, &positions)
        })?;
    }
    for i in 0..positions.len() {
        for a in 0..3 {
            acc.check(|| format!("node {i} position {a}"), g.positions[i][a], &base, |h| {
                let mut pos = positions.clone();
                pos[i][a] += h;
                loss(&params, &pos)
            })?;
        }
    }
    Ok(())
}

fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize) -> Image {
    Image { width: w, height: h, data: (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect() }
}

fn check_objective(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = LossConfig::default();
    let frames = 4;
    let placeholder = 2;
    let rendered: Vec<Image> = (0..frames).map(|_| random_image(&mut rng, 8, 8)).collect();
    let gt: Vec<Image> = (0..frames).map(|_| random_image(&mut rng, 8, 8)).collect();
    let refs = |r: &[Image]| -> Vec<Option<Image>> { r.iter().enumerate().map(|(t, im)| (t != placeholder).then(|| im.clone())).collect() };
    let gt_o = refs(&gt);
    let loss = |r: &[Image]| -> Result<(Eval, Vec<usize>)> {
        let ro = refs(r);
        let (rep, _) = total_loss_impl(&as_refs(&ro), &as_refs(&gt_o), &cfg, false)?;
        Ok(((rep.total, motion_activation_pattern(&as_refs(&ro), &as_refs(&gt_o), &cfg)), rep.selected_indices))
    };
    let ro = refs(&rendered);
    let (_, grads) = total_loss_impl(&as_refs(&ro), &as_refs(&gt_o), &cfg, true)?;
    let ((base_loss, base_pat), selected) = loss(&rendered)?;
    let base = (base_loss, vec![]);
    for t in (0..frames).filter(|&t| t != placeholder) {
        for i in 0..rendered[t].data.len() {
            let a = grads[t].as_ref().expect("real slot gradient").data[i];
            acc.check(|| format!("frame {t} pixel value {i}"), a, &base, |h| {
                let mut r = rendered.clone();
                r[t].data[i] += h;
                let (e, sel) = loss(&r)?;
                // a change of the top-k set or of a motion branch is a kink, not a gradient error
                Ok((e.0, if sel == selected && e.1 == base_pat { vec![] } else { vec![true] }))
            })?;
        }
    }
    Ok(())
}

fn as_refs(v: &[Option<Image>]) -> Vec<Option<&Image>> {
    v.iter().map(Option::as_ref).collect()
}

/// Standard tiny model used by the pipeline check: 8 Gaussians, 4 nodes, a small network.
pub fn tiny_model(seed: u64) -> Result<(Model, Camera)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cloud = GaussianCloud::from_gaussians(&(0..8).map(|_| random_gaussian(&mut rng, 0.25)).collect::<Vec<_>>());
    let cam = random_camera(&mut rng, 16)?;
    let cfg = NetConfig { layers: 3, width: 8, attn_layers: vec![1], heads: 2, pos_freqs: 3, time_freqs: 2, ..NetConfig::default() };
    let mut net = NetParams::init(&cfg, &mut rng)?;
    net.randomize_heads(0.2, &mut rng);
    let mut model = Model {
        cloud,
        nodes: ControlNodes::new(vec![], vec![], 4)?,
        embedder: AffinityEmbedder::zeros(4),
        net,
        affinity: AffinityMode::Learned,
        spatial_scale: 1.0,
        neighbors: 3,
        render: smooth_render_settings(),
        skin: None,
    };
    model.init_nodes(4, 4, &mut rng)?;
    model.embedder = AffinityEmbedder::random(4, &mut rng);
    model.rebuild_skinning(0)?;
    Ok((model, cam))
}

fn check_pipeline(seed: u64, acc: &mut Accumulator) -> Result<()> {
    let (model, cam) = tiny_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
    let times = [0.0, 0.5, 1.0];
    let mask = [false, true, false];
    let real = [true, true, true];
    let gt: Vec<Option<Image>> = (0..3).map(|_| Some(random_image(&mut rng, 16, 16))).collect();
    let cfg = LossConfig::default();
    let loss = |m: &Model| -> Result<Eval> {
        let fwd = m.forward_window(&cam, &times, &mask, &real)?;
        let (rep, _) = total_loss_impl(&as_refs(&fwd.images), &as_refs(&gt), &cfg, false)?;
        let mut pat = fwd.activation_pattern();
        pat.extend(rep.selected_indices.iter().map(|&i| i % 2 == 0));
        pat.push(rep.selected_indices.len() % 2 == 0);
        pat.extend(motion_activation_pattern(&as_refs(&fwd.images), &as_refs(&gt), &cfg));
        Ok((rep.total, pat))
    };
    let fwd = model.forward_window(&cam, &times, &mask, &real)?;
    let (_, img_grads) = total_loss_impl(&as_refs(&fwd.images), &as_refs(&gt), &cfg, true)?;
    let grad = model.backward_window(&cam, &fwd, &img_grads)?;
    let base = loss(&model)?;
    for g in ParamGroup::ALL {
        let n = model.group(g).len();
        for i in 0..n {
            acc.check(|| format!("{}[{i}]", g.name()), grad.group(g)[i], &base, |h| {
                let mut m = model.clone();
                m.group_mut(g)[i] += h;
                loss(&m)
            })?;
        }
    }
    Ok(())
}

/// Runs one component over `seeds` seeds starting at `first_seed`.
pub fn grad_check(component: Component, first_seed: u64, seeds: u64) -> Result<GradCheckReport> {
    let start = std::time::Instant::now();
    let mut acc = Accumulator { seed: first_seed, checked: 0, kinks: 0, max_rel: 0.0, tol: component.tolerance(), bad: Vec::new() };
    for seed in first_seed..first_seed + seeds {
        acc.seed = seed;
        match component {
            Component::SceneCore => check_scene_core(seed, &mut acc)?,
            Component::Renderer => check_renderer(seed, &mut acc)?,
            Component::ControlGraph => check_control_graph(seed, &mut acc)?,
            Component::Deformer => check_deformer(seed, &mut acc)?,
            Component::Objective => check_objective(seed, &mut acc)?,
            Component::Pipeline => check_pipeline(seed, &mut acc)?,
        }
    }
    acc.bad.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    acc.bad.truncate(10);
    Ok(GradCheckReport {
        component,
        seeds,
        checked: acc.checked,
        kink_skips: acc.kinks,
        max_rel_error: acc.max_rel,
        tolerance: acc.tol,
        worst: acc.bad,
        seconds: start.elapsed().as_secs_f64(),
    })
}
