//! Canonical Gaussians, pinhole cameras and the world-to-screen projection.
//!
//! Symmetric matrix gradients follow one convention throughout the crate: for a
//! symmetric matrix `X`, the gradient is the symmetric matrix `G` with
//! `dL = tr(G dX)` for every symmetric perturbation `dX`.

use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quat::{self, Quat};

/// Diagonal low-pass term added to every projected covariance, in px².
pub const COV2D_REGULARIZER: f64 = 0.3;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian3D {
    pub mean: [f64; 3],
    /// Unit quaternion (w, x, y, z).
    pub rotation: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

impl Gaussian3D {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }
}

/// Per-Gaussian gradient, laid out like [`Gaussian3D`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub rotation: Quat,
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color: [f64; 3],
}

/// Structure-of-arrays storage for the canonical Gaussians.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<Quat>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub colors: Vec<[f64; 3]>,
}

impl GaussianCloud {
    pub fn with_capacity(n: usize) -> Self {
        Self {
            means: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            colors: Vec::with_capacity(n),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            means: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            colors: vec![[0.0; 3]; n],
        }
    }

    pub fn from_gaussians(gs: &[Gaussian3D]) -> Self {
        let mut cloud = Self::with_capacity(gs.len());
        for g in gs {
            cloud.push(*g);
        }
        cloud
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian3D) {
        self.means.push(g.mean);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.colors.push(g.color);
    }

    pub fn get(&self, j: usize) -> Gaussian3D {
        Gaussian3D {
            mean: self.means[j],
            rotation: self.rotations[j],
            log_scale: self.log_scales[j],
            opacity_logit: self.opacity_logits[j],
            color: self.colors[j],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian3D> + '_ {
        (0..self.len()).map(|j| self.get(j))
    }

    pub fn add_grad(&mut self, j: usize, g: &GaussianGrad) {
        for k in 0..3 {
            self.means[j][k] += g.mean[k];
            self.log_scales[j][k] += g.log_scale[k];
            self.colors[j][k] += g.color[k];
        }
        for k in 0..4 {
            self.rotations[j][k] += g.rotation[k];
        }
        self.opacity_logits[j] += g.opacity_logit;
    }

    /// Restores unit norm on every rotation.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = quat::norm(q);
            if n > 0.0 && n.is_finite() {
                for v in q.iter_mut() {
                    *v /= n;
                }
            } else {
                *q = quat::IDENTITY;
            }
        }
    }

    /// Axis-aligned bounding box of the means.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for m in &self.means {
            for k in 0..3 {
                lo[k] = lo[k].min(m[k]);
                hi[k] = hi[k].max(m[k]);
            }
        }
        (lo, hi)
    }

    /// Length of the bounding-box diagonal of the means.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bounds();
        ((hi[0] - lo[0]).powi(2) + (hi[1] - lo[1]).powi(2) + (hi[2] - lo[2]).powi(2)).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().flatten().all(|v| v.is_finite())
            && self.rotations.iter().flatten().all(|v| v.is_finite())
            && self.log_scales.iter().flatten().all(|v| v.is_finite())
            && self.opacity_logits.iter().all(|v| v.is_finite())
            && self.colors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Pinhole camera with an OpenCV-style frame (x right, y down, z forward).
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub id: String,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    /// (width, height) in pixels.
    pub resolution: [usize; 2],
    pub near_clip: f64,
}

impl Camera {
    pub fn new(
        id: impl Into<String>,
        world_to_camera: Matrix4<f64>,
        focal: [f64; 2],
        principal_point: [f64; 2],
        resolution: [usize; 2],
        near_clip: f64,
    ) -> Result<Self> {
        let rotation = world_to_camera.fixed_view::<3, 3>(0, 0).into_owned();
        let translation = world_to_camera.fixed_view::<3, 1>(0, 3).into_owned();
        let cam = Self { id: id.into(), rotation, translation, focal, principal_point, resolution, near_clip };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` giving the image's upward direction.
    pub fn look_at(
        id: impl Into<String>,
        eye: [f64; 3],
        target: [f64; 3],
        up: [f64; 3],
        focal: f64,
        resolution: [usize; 2],
    ) -> Result<Self> {
        let eye = Vector3::from(eye);
        let forward = (Vector3::from(target) - eye).normalize();
        let right = forward.cross(&Vector3::from(up)).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        let cam = Self {
            id: id.into(),
            rotation,
            translation,
            focal: [focal, focal],
            principal_point: [resolution[0] as f64 * 0.5, resolution[1] as f64 * 0.5],
            resolution,
            near_clip: 0.01,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn world_to_camera(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn width(&self) -> usize {
        self.resolution[0]
    }

    pub fn height(&self) -> usize {
        self.resolution[1]
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.rotation * self.rotation.transpose() - Matrix3::identity();
        if !(e.abs().max() <= 1e-9) {
            return Err(Error::ParameterDomain(format!("camera {}: rotation block is not orthonormal", self.id)));
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::ParameterDomain(format!("camera {}: focal lengths must be positive", self.id)));
        }
        if !(self.near_clip > 0.0) {
            return Err(Error::ParameterDomain(format!("camera {}: near_clip must be positive", self.id)));
        }
        if self.resolution[0] == 0 || self.resolution[1] == 0 {
            return Err(Error::ParameterDomain(format!("camera {}: empty resolution", self.id)));
        }
        Ok(())
    }

    /// World position of the camera center.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }
}

/// A Gaussian projected to the image plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    pub center: [f64; 2],
    /// Upper triangle of the symmetric covariance: (xx, xy, yy), px².
    pub cov: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub color: [f64; 3],
    /// Index of the Gaussian this splat came from.
    pub source: usize,
}

impl Splat2D {
    pub fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], self.cov[1], self.cov[1], self.cov[2])
    }
}

/// Gradient with respect to a splat. `cov[1]` is the derivative with respect to the
/// single off-diagonal parameter (it appears twice in the matrix).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub center: [f64; 2],
    pub cov: [f64; 3],
    pub opacity: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    pub fn add(&mut self, o: &SplatGrad) {
        self.center[0] += o.center[0];
        self.center[1] += o.center[1];
        for k in 0..3 {
            self.cov[k] += o.cov[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }

    /// The symmetric-matrix form of the covariance gradient.
    pub fn cov_matrix_grad(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0], 0.5 * self.cov[1], 0.5 * self.cov[1], self.cov[2])
    }
}

fn check_finite(what: &str, vals: &[f64]) -> Result<()> {
    if vals.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::ParameterDomain(format!("{what} contains non-finite values")))
    }
}

/// Σ = R S Sᵀ Rᵀ with S = diag(exp(log_scale)). The rotation is normalized internally.
pub fn build_covariance(rotation: &Quat, log_scale: &[f64; 3]) -> Result<Matrix3<f64>> {
    check_finite("rotation", rotation)?;
    check_finite("log_scale", log_scale)?;
    let n = quat::norm(rotation);
    if !(n > 0.0) {
        return Err(Error::ParameterDomain("rotation quaternion has zero norm".into()));
    }
    Ok(covariance_unchecked(rotation, log_scale))
}

fn covariance_unchecked(rotation: &Quat, log_scale: &[f64; 3]) -> Matrix3<f64> {
    let (q, _) = quat::normalize(rotation);
    let r = quat::to_matrix(&q);
    let s = Matrix3::from_diagonal(&Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()));
    let m = r * s;
    m * m.transpose()
}

/// Reverse pass of [`build_covariance`] given the symmetric gradient `grad` on Σ.
pub fn build_covariance_backward(rotation: &Quat, log_scale: &[f64; 3], grad: &Matrix3<f64>) -> (Quat, [f64; 3]) {
    let (q, n) = quat::normalize(rotation);
    let r = quat::to_matrix(&q);
    let s = Vector3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp());
    let m = r * Matrix3::from_diagonal(&s);
    // Σ = M Mᵀ  ⇒  dL/dM = 2 G M for symmetric G.
    let dm = 2.0 * grad * m;
    let dr = dm * Matrix3::from_diagonal(&s);
    let mut dlog = [0.0; 3];
    for i in 0..3 {
        let ds = (0..3).map(|row| dm[(row, i)] * r[(row, i)]).sum::<f64>();
        dlog[i] = ds * s[i];
    }
    let dq_hat = quat::to_matrix_backward(&q, &dr);
    (quat::normalize_backward(&q, n, &dq_hat), dlog)
}

/// Intermediate state kept by the projection for its reverse pass.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionRecord {
    pub p_cam: Vector3<f64>,
    pub sigma: Matrix3<f64>,
    /// J · W_rot, the 2×3 linearized world-to-pixel map.
    pub jw: Matrix2x3<f64>,
}

/// Projects a Gaussian; `Ok(None)` means it was culled by the near plane.
pub fn project_gaussian(g: &Gaussian3D, cam: &Camera) -> Result<Option<Splat2D>> {
    Ok(project_gaussian_recorded(g, cam, COV2D_REGULARIZER, 0)?.map(|(s, _)| s))
}

pub fn project_gaussian_recorded(
    g: &Gaussian3D,
    cam: &Camera,
    regularizer: f64,
    source: usize,
) -> Result<Option<(Splat2D, ProjectionRecord)>> {
    let p_cam = cam.rotation * Vector3::from(g.mean) + cam.translation;
    let (x, y, z) = (p_cam.x, p_cam.y, p_cam.z);
    if !(z > cam.near_clip) {
        if z.is_nan() {
            return Err(Error::NumericalDomain(format!("gaussian {source}: non-finite camera-space mean")));
        }
        return Ok(None);
    }
    let sigma = build_covariance(&g.rotation, &g.log_scale)?;
    let [fx, fy] = cam.focal;
    let j = Matrix2x3::new(fx / z, 0.0, -fx * x / (z * z), 0.0, fy / z, -fy * y / (z * z));
    let jw = j * cam.rotation;
    let cov = jw * sigma * jw.transpose() + Matrix2::identity() * regularizer;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det > 0.0) || !det.is_finite() {
        return Err(Error::NumericalDomain(format!("gaussian {source}: degenerate projected covariance (det = {det})")));
    }
    let splat = Splat2D {
        center: [fx * x / z + cam.principal_point[0], fy * y / z + cam.principal_point[1]],
        cov: [cov[(0, 0)], 0.5 * (cov[(0, 1)] + cov[(1, 0)]), cov[(1, 1)]],
        depth: z,
        opacity: g.opacity(),
        color: g.color,
        source,
    };
    Ok(Some((splat, ProjectionRecord { p_cam, sigma, jw })))
}

/// Reverse pass of the projection: splat gradient → Gaussian parameter gradient.
pub fn project_gaussian_backward(g: &Gaussian3D, cam: &Camera, rec: &ProjectionRecord, dsplat: &SplatGrad) -> GaussianGrad {
    let (x, y, z) = (rec.p_cam.x, rec.p_cam.y, rec.p_cam.z);
    let [fx, fy] = cam.focal;
    let g2 = dsplat.cov_matrix_grad();

    // Σ' = M Σ Mᵀ with M = J·W.
    let dsigma = rec.jw.transpose() * g2 * rec.jw;
    let dm = 2.0 * g2 * rec.jw * rec.sigma;
    let dj = dm * cam.rotation.transpose();

    // Camera-space mean from the center and from J.
    let mut dp = Vector3::zeros();
    let [du, dv] = dsplat.center;
    dp.x += du * fx / z;
    dp.y += dv * fy / z;
    dp.z += -du * fx * x / (z * z) - dv * fy * y / (z * z);
    // J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]]
    let z2 = z * z;
    let z3 = z2 * z;
    dp.x += dj[(0, 2)] * (-fx / z2);
    dp.y += dj[(1, 2)] * (-fy / z2);
    dp.z += dj[(0, 0)] * (-fx / z2) + dj[(0, 2)] * (2.0 * fx * x / z3) + dj[(1, 1)] * (-fy / z2) + dj[(1, 2)] * (2.0 * fy * y / z3);
    let dmean = cam.rotation.transpose() * dp;

    let (drot, dlog) = build_covariance_backward(&g.rotation, &g.log_scale, &dsigma);
    let alpha = g.opacity();
    GaussianGrad {
        mean: [dmean.x, dmean.y, dmean.z],
        rotation: drot,
        log_scale: dlog,
        opacity_logit: dsplat.opacity * alpha * (1.0 - alpha),
        color: dsplat.color,
    }
}

// ---------------------------------------------------------------------------
// Scene file

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CameraRecord {
    id: String,
    /// Row-major 4×4.
    world_to_camera: Vec<f64>,
    focal: [f64; 2],
    principal_point: [f64; 2],
    resolution: [usize; 2],
    near_clip: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SceneDocument {
    version: u32,
    gaussians: Vec<Gaussian3D>,
    cameras: Vec<CameraRecord>,
}

pub const SCENE_FILE_VERSION: u32 = 1;

/// Canonical Gaussians plus a camera rig, as stored in a scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFile {
    pub cloud: GaussianCloud,
    pub cameras: Vec<Camera>,
}

impl SceneFile {
    pub fn to_json(&self) -> String {
        let doc = SceneDocument {
            version: SCENE_FILE_VERSION,
            gaussians: self.cloud.iter().collect(),
            cameras: self
                .cameras
                .iter()
                .map(|c| {
                    let m = c.world_to_camera();
                    CameraRecord {
                        id: c.id.clone(),
                        world_to_camera: (0..16).map(|k| m[(k / 4, k % 4)]).collect(),
                        focal: c.focal,
                        principal_point: c.principal_point,
                        resolution: c.resolution,
                        near_clip: c.near_clip,
                    }
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("scene document serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let doc: SceneDocument = serde_json::from_str(text).map_err(|e| Error::format(origin, e.to_string()))?;
        if doc.version != SCENE_FILE_VERSION {
            return Err(Error::format(origin, format!("unsupported scene version {}", doc.version)));
        }
        let mut cameras = Vec::with_capacity(doc.cameras.len());
        for c in doc.cameras {
            if c.world_to_camera.len() != 16 {
                return Err(Error::format(origin, format!("camera {}: world_to_camera needs 16 values", c.id)));
            }
            let m = Matrix4::from_row_slice(&c.world_to_camera);
            cameras.push(Camera::new(c.id, m, c.focal, c.principal_point, c.resolution, c.near_clip)?);
        }
        Ok(Self { cloud: GaussianCloud::from_gaussians(&doc.gaussians), cameras })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn axis_camera(focal: f64) -> Camera {
        Camera::new("c", Matrix4::identity(), [focal, focal], [0.0, 0.0], [64, 64], 0.01).unwrap()
    }

    #[test]
    fn covariance_identity_rotation_is_squared_scale() {
        let s = build_covariance(&quat::IDENTITY, &[0.0, LN_2, 3f64.ln()]).unwrap();
        let want = Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 9.0));
        assert!((s - want).abs().max() < 1e-12);
        let s = build_covariance(&quat::IDENTITY, &[0.0; 3]).unwrap();
        assert_eq!(s, Matrix3::identity());
    }

    #[test]
    fn covariance_rotated_about_z() {
        let q = quat::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let s = build_covariance(&q, &[0.0, LN_2, 0.0]).unwrap();
        let want = Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0));
        assert!((s - want).abs().max() < 1e-12, "{s}");
    }

    #[test]
    fn covariance_rejects_non_finite() {
        assert!(matches!(build_covariance(&[f64::NAN, 0.0, 0.0, 1.0], &[0.0; 3]), Err(Error::ParameterDomain(_))));
        assert!(matches!(build_covariance(&quat::IDENTITY, &[f64::INFINITY, 0.0, 0.0]), Err(Error::ParameterDomain(_))));
    }

    #[test]
    fn projection_on_axis() {
        let cam = axis_camera(100.0);
        let g = Gaussian3D { mean: [0.0, 0.0, 1.0], rotation: quat::IDENTITY, log_scale: [0.0; 3], opacity_logit: 0.0, color: [1.0; 3] };
        let s = project_gaussian(&g, &cam).unwrap().unwrap();
        assert!((s.cov[0] - 10000.3).abs() < 1e-9);
        assert!(s.cov[1].abs() < 1e-12);
        assert!((s.cov[2] - 10000.3).abs() < 1e-9);
        assert_eq!(s.center, [0.0, 0.0]);
        assert_eq!(s.opacity, 0.5);
    }

    #[test]
    fn projection_culls_behind_camera() {
        let cam = axis_camera(100.0);
        let g = Gaussian3D { mean: [0.0, 0.0, -1.0], rotation: quat::IDENTITY, log_scale: [0.0; 3], opacity_logit: 0.0, color: [1.0; 3] };
        assert!(project_gaussian(&g, &cam).unwrap().is_none());
    }

    #[test]
    fn look_at_faces_target() {
        let cam = Camera::look_at("c", [0.0, 0.0, -3.0], [0.0; 3], [0.0, -1.0, 0.0], 50.0, [32, 32]).unwrap();
        let p = cam.rotation * Vector3::zeros() + cam.translation;
        assert!((p - Vector3::new(0.0, 0.0, 3.0)).norm() < 1e-12);
        assert!((cam.center() - Vector3::new(0.0, 0.0, -3.0)).norm() < 1e-12);
    }

    #[test]
    fn scene_file_round_trip_is_exact() {
        let cam = Camera::look_at("view0", [1.0, 0.3, -2.7], [0.0; 3], [0.0, -1.0, 0.0], 77.7, [48, 32]).unwrap();
        let g = Gaussian3D {
            mean: [0.1, 1.0 / 3.0, -0.7],
            rotation: quat::from_axis_angle([0.2, 1.0, 0.3], 0.9),
            log_scale: [-2.1, -3.3, -2.0],
            opacity_logit: 1.2345678901234567,
            color: [0.2, 0.5, 0.9],
        };
        let scene = SceneFile { cloud: GaussianCloud::from_gaussians(&[g]), cameras: vec![cam] };
        let back = SceneFile::from_json(&scene.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back, scene);
    }
}
