//! Synthetic ground truth: canonical Gaussians grouped into rigid parts with
//! closed-form trajectories, a ring camera rig, and a dataset writer.
//!
//! Dataset directory layout:
//!
//! ```text
//! <out>/manifest.txt
//! <out>/scene_gt.json          canonical ground-truth cloud + cameras
//! <out>/scene_init.json        perturbed starting cloud for training
//! <out>/frames/<view>/<idx>.dsfd
//! <out>/preview/<view>/<idx>.png
//! ```

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::img::Image;
use crate::quat::{self, Quat};
use crate::render::{rasterize_bruteforce, SortedSplatList};
use crate::sampling::{CameraRole, FrameRecord, Manifest, ViewRecord};
use crate::scene::{project_gaussian, Camera, Gaussian3D, GaussianCloud, SceneFile};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Static,
    Oscillator,
    TwoBody,
    Articulated,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" => Ok(Preset::Static),
            "oscillator" => Ok(Preset::Oscillator),
            "two-body" | "two_body" => Ok(Preset::TwoBody),
            "articulated" => Ok(Preset::Articulated),
            other => Err(Error::Config(format!("unknown preset {other:?} (expected static|oscillator|two-body|articulated)"))),
        }
    }
}

/// One sinusoidal component `amp · sin(2π·freq·t)`; vanishes at t = 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Wave {
    pub amp: [f64; 3],
    pub freq: f64,
}

/// Rigid motion of one group: rotation about `pivot` (canonical frame), then
/// translation, then the parent's full motion.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupMotion {
    pub parent: Option<usize>,
    pub pivot: [f64; 3],
    pub axis: [f64; 3],
    /// angle(t) = amp · (sin(2π·freq·t + phase) − sin(phase))
    pub angle_amp: f64,
    pub angle_freq: f64,
    pub angle_phase: f64,
    pub translation: Vec<Wave>,
}

impl GroupMotion {
    fn still() -> Self {
        Self { parent: None, pivot: [0.0; 3], axis: [0.0, 0.0, 1.0], angle_amp: 0.0, angle_freq: 1.0, angle_phase: 0.0, translation: vec![] }
    }

    pub fn angle(&self, t: f64) -> f64 {
        self.angle_amp * ((2.0 * PI * self.angle_freq * t + self.angle_phase).sin() - self.angle_phase.sin())
    }

    pub fn offset(&self, t: f64) -> [f64; 3] {
        let mut o = [0.0; 3];
        for w in &self.translation {
            let s = (2.0 * PI * w.freq * t).sin();
            for a in 0..3 {
                o[a] += w.amp[a] * s;
            }
        }
        o
    }
}

/// Rigid transform x ↦ R·x + t with R given as a unit quaternion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid {
    pub rotation: Quat,
    pub translation: [f64; 3],
}

impl Rigid {
    pub const IDENTITY: Rigid = Rigid { rotation: quat::IDENTITY, translation: [0.0; 3] };

    pub fn apply(&self, x: &[f64; 3]) -> [f64; 3] {
        let r = quat::to_matrix(&self.rotation) * Vector3::from(*x);
        [r[0] + self.translation[0], r[1] + self.translation[1], r[2] + self.translation[2]]
    }

    /// `self ∘ inner`
    pub fn compose(&self, inner: &Rigid) -> Rigid {
        let t = self.apply(&inner.translation);
        Rigid { rotation: quat::normalize(&quat::mul(&self.rotation, &inner.rotation)).0, translation: t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneScript {
    pub preset: Preset,
    pub cloud: GaussianCloud,
    /// Rigid group of every Gaussian.
    pub groups: Vec<usize>,
    pub motions: Vec<GroupMotion>,
    pub cameras: Vec<(Camera, CameraRole)>,
    pub frame_count: usize,
    pub resolution: [usize; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigConfig {
    pub resolution: [usize; 2],
    pub focal: f64,
    pub distance: f64,
    pub elevation_deg: f64,
    pub train_azimuths_deg: Vec<f64>,
    pub test_azimuths_deg: Vec<f64>,
    pub frame_count: usize,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            resolution: [64, 64],
            focal: 90.0,
            distance: 2.5,
            elevation_deg: 20.0,
            train_azimuths_deg: vec![0.0, 90.0, 180.0, 270.0],
            test_azimuths_deg: vec![45.0],
            frame_count: 30,
        }
    }
}

/// Cameras on a ring around the origin, y up. Training views come first.
pub fn ring_rig(cfg: &RigConfig) -> Result<Vec<(Camera, CameraRole)>> {
    let el = cfg.elevation_deg.to_radians();
    let mut out = Vec::new();
    let all = cfg.train_azimuths_deg.iter().map(|a| (*a, CameraRole::Train)).chain(cfg.test_azimuths_deg.iter().map(|a| (*a, CameraRole::Test)));
    for (k, (az, role)) in all.enumerate() {
        let az = az.to_radians();
        let eye = [cfg.distance * el.cos() * az.sin(), cfg.distance * el.sin(), cfg.distance * el.cos() * az.cos()];
        out.push((Camera::look_at(format!("view{k}"), eye, [0.0; 3], [0.0, 1.0, 0.0], cfg.focal, cfg.resolution)?, role));
    }
    Ok(out)
}

/// Smooth colour pattern so that motion produces visible image change.
fn pattern_color(p: &[f64; 3], base: [f64; 3]) -> [f64; 3] {
    let mut c = [0.0; 3];
    for k in 0..3 {
        let wave = 0.5 + 0.5 * (7.0 * p[(k + 1) % 3] + 3.0 * p[k] + k as f64).sin();
        c[k] = (0.35 * base[k] + 0.65 * base[k] * wave + 0.1 * wave).clamp(0.02, 0.98);
    }
    c
}

struct BlobSpec {
    center: [f64; 3],
    radius: f64,
    count: usize,
    log_scale: f64,
    /// Scale anisotropy of the first axis in log units.
    stretch: f64,
    base_color: [f64; 3],
    orientation: Quat,
    group: usize,
}

fn add_blob<R: Rng + ?Sized>(spec: &BlobSpec, cloud: &mut GaussianCloud, groups: &mut Vec<usize>, rng: &mut R) {
    let jitter = Normal::new(0.0, 0.15).expect("std");
    let mut made = 0;
    while made < spec.count {
        let p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        if p[0] * p[0] + p[1] * p[1] + p[2] * p[2] > 1.0 {
            continue;
        }
        let mean = [spec.center[0] + spec.radius * p[0], spec.center[1] + spec.radius * p[1], spec.center[2] + spec.radius * p[2]];
        let tilt = quat::from_axis_angle([p[2], p[0], p[1] + 1e-3], 0.3 * jitter.sample(rng));
        cloud.push(Gaussian3D {
            mean,
            rotation: quat::normalize(&quat::mul(&spec.orientation, &tilt)).0,
            log_scale: [
                spec.log_scale + spec.stretch + jitter.sample(rng),
                spec.log_scale + jitter.sample(rng),
                spec.log_scale + jitter.sample(rng),
            ],
            opacity_logit: 2.0 + jitter.sample(rng),
            color: pattern_color(&p, spec.base_color),
        });
        groups.push(spec.group);
        made += 1;
    }
}

/// Builds a preset scene. Deterministic in `seed`.
pub fn generate_scene(preset: Preset, seed: u64, rig: &RigConfig) -> Result<SceneScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::with_capacity(256);
    let mut groups = Vec::new();
    let ln = |v: f64| v.ln();
    let motions = match preset {
        Preset::Static | Preset::Oscillator => {
            let spec = BlobSpec {
                center: [0.0; 3],
                radius: 0.3,
                count: 160,
                log_scale: ln(0.05),
                stretch: 0.4,
                base_color: [0.9, 0.6, 0.3],
                orientation: quat::IDENTITY,
                group: 0,
            };
            add_blob(&spec, &mut cloud, &mut groups, &mut rng);
            let mut m = GroupMotion::still();
            if preset == Preset::Oscillator {
                m.translation = vec![Wave { amp: [0.3, 0.0, 0.0], freq: 1.0 }];
            }
            vec![m]
        }
        Preset::TwoBody => {
            let a = BlobSpec {
                center: [-0.1, 0.0, 0.0],
                radius: 0.15,
                count: 90,
                log_scale: ln(0.035),
                stretch: 0.0,
                base_color: [0.95, 0.35, 0.2],
                orientation: quat::IDENTITY,
                group: 0,
            };
            let b = BlobSpec {
                center: [0.1, 0.0, 0.0],
                radius: 0.15,
                count: 90,
                log_scale: ln(0.045),
                stretch: 0.7,
                base_color: [0.2, 0.5, 0.95],
                orientation: quat::from_axis_angle([0.0, 0.0, 1.0], 0.9),
                group: 1,
            };
            add_blob(&a, &mut cloud, &mut groups, &mut rng);
            add_blob(&b, &mut cloud, &mut groups, &mut rng);
            let mut ma = GroupMotion::still();
            ma.translation = vec![Wave { amp: [0.35, 0.0, 0.0], freq: 1.0 }, Wave { amp: [0.0, 0.12, 0.0], freq: 0.5 }];
            let mut mb = GroupMotion::still();
            mb.translation = vec![Wave { amp: [-0.35, 0.0, 0.0], freq: 1.0 }, Wave { amp: [0.0, -0.12, 0.0], freq: 0.5 }];
            vec![ma, mb]
        }
        Preset::Articulated => {
            let colors = [[0.9, 0.3, 0.3], [0.3, 0.9, 0.3], [0.3, 0.4, 0.95]];
            for g in 0..3 {
                let spec = BlobSpec {
                    center: [-0.3 + 0.3 * g as f64, 0.0, 0.0],
                    radius: 0.13,
                    count: 60,
                    log_scale: ln(0.035),
                    stretch: 0.5,
                    base_color: colors[g],
                    orientation: quat::IDENTITY,
                    group: g,
                };
                add_blob(&spec, &mut cloud, &mut groups, &mut rng);
            }
            (0..3)
                .map(|g| GroupMotion {
                    parent: if g == 0 { None } else { Some(g - 1) },
                    pivot: [-0.45 + 0.3 * g as f64, 0.0, 0.0],
                    axis: [0.0, 0.0, 1.0],
                    angle_amp: 0.5,
                    angle_freq: 1.0,
                    angle_phase: g as f64 * PI / 3.0,
                    translation: vec![],
                })
                .collect()
        }
    };
    Ok(SceneScript { preset, cloud, groups, motions, cameras: ring_rig(rig)?, frame_count: rig.frame_count, resolution: rig.resolution })
}

impl SceneScript {
    /// World transform of every group at time `t`.
    pub fn group_transforms(&self, t: f64) -> Vec<Rigid> {
        let mut out: Vec<Rigid> = Vec::with_capacity(self.motions.len());
        for m in &self.motions {
            let q = quat::from_axis_angle(m.axis, m.angle(t));
            let rot = Rigid { rotation: q, translation: [0.0; 3] };
            let about = rot.apply(&m.pivot);
            let off = m.offset(t);
            let local = Rigid {
                rotation: q,
                translation: [m.pivot[0] - about[0] + off[0], m.pivot[1] - about[1] + off[1], m.pivot[2] - about[2] + off[2]],
            };
            let world = match m.parent {
                Some(p) => out[p].compose(&local),
                None => local,
            };
            out.push(world);
        }
        out
    }

    /// Center of mass of each group's means at time `t`.
    pub fn group_centers(&self, t: f64) -> Vec<[f64; 3]> {
        let cloud = self.deformed_cloud(t);
        let mut sums = vec![[0.0; 3]; self.motions.len()];
        let mut counts = vec![0usize; self.motions.len()];
        for (j, &g) in self.groups.iter().enumerate() {
            for a in 0..3 {
                sums[g][a] += cloud.means[j][a];
            }
            counts[g] += 1;
        }
        sums.iter().zip(&counts).map(|(s, &c)| s.map(|v| v / c.max(1) as f64)).collect()
    }

    /// Applies the exact group motions to the canonical cloud.
    pub fn deformed_cloud(&self, t: f64) -> GaussianCloud {
        let xf = self.group_transforms(t);
        let mut out = self.cloud.clone();
        for j in 0..out.len() {
            let r = &xf[self.groups[j]];
            if *r == Rigid::IDENTITY {
                continue;
            }
            out.means[j] = r.apply(&self.cloud.means[j]);
            out.rotations[j] = quat::normalize(&quat::mul(&r.rotation, &self.cloud.rotations[j])).0;
        }
        out
    }

    pub fn frame_time(&self, index: usize) -> f64 {
        if self.frame_count <= 1 {
            0.0
        } else {
            index as f64 / (self.frame_count - 1) as f64
        }
    }
}

/// Brute-force render of any cloud (no footprint cutoff, no early exit).
pub fn render_oracle(cloud: &GaussianCloud, cam: &Camera) -> Result<Image> {
    let mut splats = Vec::with_capacity(cloud.len());
    for (j, g) in cloud.iter().enumerate() {
        if let Some(mut s) = project_gaussian(&g, cam)? {
            s.source = j;
            splats.push(s);
        }
    }
    Ok(rasterize_bruteforce(&SortedSplatList::new(splats), cam.resolution)?.image)
}

/// Ground-truth image of the scripted scene at time `t`.
pub fn render_ground_truth(script: &SceneScript, t: f64, cam: &Camera) -> Result<Image> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("time {t} outside [0, 1]")));
    }
    render_oracle(&script.deformed_cloud(t), cam)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitNoise {
    /// Std of the mean perturbation as a fraction of the scene extent.
    pub position: f64,
    pub gray: f64,
}

impl Default for InitNoise {
    fn default() -> Self {
        Self { position: 0.01, gray: 0.5 }
    }
}

/// Starting cloud for training: perturbed ground-truth means, isotropic scales from
/// nearest-neighbour spacing, identity rotations, gray colour, mid opacity.
pub fn initial_cloud(script: &SceneScript, noise: &InitNoise, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1417);
    let extent = script.cloud.extent();
    let n = Normal::new(0.0, (noise.position * extent).max(1e-12)).expect("std");
    let spacing = crate::control::mean_nearest_distance(&script.cloud.means);
    let mut out = GaussianCloud::with_capacity(script.cloud.len());
    for m in &script.cloud.means {
        out.push(Gaussian3D {
            mean: [m[0] + n.sample(&mut rng), m[1] + n.sample(&mut rng), m[2] + n.sample(&mut rng)],
            rotation: quat::IDENTITY,
            log_scale: [(0.7 * spacing).ln(); 3],
            opacity_logit: 0.0,
            color: [noise.gray; 3],
        });
    }
    out
}

/// Renders every frame of every camera and writes the dataset directory.
pub fn write_dataset(script: &SceneScript, out: &Path, seed: u64, noise: &InitNoise) -> Result<Manifest> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut views = Vec::new();
    for (cam, role) in &script.cameras {
        let fdir = out.join("frames").join(&cam.id);
        let pdir = out.join("preview").join(&cam.id);
        std::fs::create_dir_all(&fdir).map_err(|e| Error::io(&fdir, e))?;
        std::fs::create_dir_all(&pdir).map_err(|e| Error::io(&pdir, e))?;
        let mut frames = Vec::new();
        for k in 0..script.frame_count {
            let t = script.frame_time(k);
            let img = render_ground_truth(script, t, cam)?;
            let rel = PathBuf::from("frames").join(&cam.id).join(format!("{k:04}.dsfd"));
            img.save_float_dump(&out.join(&rel))?;
            img.write_png(&pdir.join(format!("{k:04}.png")))?;
            frames.push(FrameRecord { index: k, time: t, path: rel });
        }
        views.push(ViewRecord { camera: cam.clone(), role: *role, frames });
    }
    let cams: Vec<Camera> = script.cameras.iter().map(|(c, _)| c.clone()).collect();
    SceneFile { cloud: script.cloud.clone(), cameras: cams.clone() }.save(&out.join("scene_gt.json"))?;
    SceneFile { cloud: initial_cloud(script, noise, seed), cameras: cams }.save(&out.join("scene_init.json"))?;
    let manifest = Manifest {
        resolution: script.resolution,
        frame_count: script.frame_count,
        scene_init: Some("scene_init.json".into()),
        scene_gt: Some("scene_gt.json".into()),
        views,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.txt"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn script(p: Preset) -> SceneScript {
        generate_scene(p, 1, &RigConfig { resolution: [24, 24], focal: 34.0, frame_count: 5, ..RigConfig::default() }).unwrap()
    }

    #[test]
    fn static_preset_is_identity() {
        let s = script(Preset::Static);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(s.deformed_cloud(t), s.cloud);
        }
        let cam = &s.cameras[0].0;
        assert_eq!(render_ground_truth(&s, 0.0, cam).unwrap(), render_ground_truth(&s, 0.7, cam).unwrap());
    }

    #[test]
    fn motion_vanishes_at_zero() {
        for p in [Preset::Oscillator, Preset::TwoBody, Preset::Articulated] {
            let s = script(p);
            let d = s.deformed_cloud(0.0);
            for j in 0..d.len() {
                for a in 0..3 {
                    assert!((d.means[j][a] - s.cloud.means[j][a]).abs() < 1e-15, "{p:?}");
                }
            }
        }
    }

    #[test]
    fn oscillator_periodic_and_mirrored() {
        let s = script(Preset::Oscillator);
        let c0 = s.group_centers(0.0)[0];
        let c1 = s.group_centers(1.0)[0];
        assert!((c0[0] - c1[0]).abs() < 1e-12);
        let a = s.group_centers(0.2)[0][0] - c0[0];
        let b = s.group_centers(0.8)[0][0] - c0[0];
        assert!((a + b).abs() < 1e-12);
        assert!((a - 0.3 * (0.4 * PI).sin()).abs() < 1e-12);
    }

    #[test]
    fn two_body_groups_cross() {
        let s = script(Preset::TwoBody);
        let mut min = f64::INFINITY;
        for k in 0..=1000 {
            let c = s.group_centers(k as f64 / 1000.0);
            let d = ((c[0][0] - c[1][0]).powi(2) + (c[0][1] - c[1][1]).powi(2) + (c[0][2] - c[1][2]).powi(2)).sqrt();
            min = min.min(d);
        }
        assert!(min < 0.15, "min distance {min}");
    }

    #[test]
    fn articulated_chain_is_rigid_per_group() {
        let s = script(Preset::Articulated);
        let d = s.deformed_cloud(0.37);
        // distances inside a group are preserved
        let idx: Vec<usize> = (0..s.groups.len()).filter(|&j| s.groups[j] == 2).take(2).collect();
        let dist = |c: &GaussianCloud| {
            let (a, b) = (c.means[idx[0]], c.means[idx[1]]);
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
        };
        assert!((dist(&d) - dist(&s.cloud)).abs() < 1e-12);
    }

    #[test]
    fn unknown_preset_rejected() {
        assert!(matches!("spinning".parse::<Preset>(), Err(Error::Config(_))));
    }
}
