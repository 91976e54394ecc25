//! Multi-frame group construction (sparse stride and interpolation samplers),
//! the sparse/interpolation schedule, epoch coverage, and the dataset manifest.
//!
//! Manifest grammar, one record per line, `#` starts a comment:
//!
//! ```text
//! resolution <W> <H>
//! frames <N>
//! scene_init <path>                     optional, relative to the manifest
//! scene_gt <path>                       optional
//! camera <id> <train|test> <fx> <fy> <cx> <cy> <near> <r00> <r01> <r02> <r10> … <r22> <t0> <t1> <t2>
//! frame <view-id> <index> <time> <path>
//! ```
//!
//! Frame times are normalized to [0, 1] over the whole dataset on load.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::img::Image;
use crate::scene::Camera;

/// One slot of a training window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Slot {
    pub time: f64,
    /// Index into the view's timeline; present iff the slot is real.
    pub frame: Option<usize>,
}

impl Slot {
    pub fn is_real(&self) -> bool {
        self.frame.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub view: usize,
    pub slots: Vec<Slot>,
}

impl FrameGroup {
    pub fn timestamps(&self) -> Vec<f64> {
        self.slots.iter().map(|s| s.time).collect()
    }

    pub fn real_flags(&self) -> Vec<bool> {
        self.slots.iter().map(Slot::is_real).collect()
    }

    /// Strictly increasing times, at least two real slots, placeholders strictly between reals.
    pub fn check_invariants(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Contract(format!("frame group: {m}")));
        if self.slots.windows(2).any(|w| !(w[0].time < w[1].time)) {
            return bad("timestamps not strictly increasing");
        }
        if self.slots.iter().filter(|s| s.is_real()).count() < 2 {
            return bad("fewer than two real slots");
        }
        if !self.slots.first().is_some_and(Slot::is_real) || !self.slots.last().is_some_and(Slot::is_real) {
            return bad("boundary slot is a placeholder");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplerKind {
    Sparse,
    Interpolation,
}

/// Bernoulli choice of sampler for one iteration.
pub fn schedule<R: Rng + ?Sized>(sparse_ratio: f64, rng: &mut R) -> SamplerKind {
    if rng.random_bool(sparse_ratio.clamp(0.0, 1.0)) {
        SamplerKind::Sparse
    } else {
        SamplerKind::Interpolation
    }
}

/// `T` real frames `start, start + stride, …` of one view's timeline. A window that
/// overruns the timeline is shifted back to the last valid start.
pub fn sparse_stride_sample(view: usize, times: &[f64], frames: usize, stride: usize, start: usize) -> Result<FrameGroup> {
    if frames < 2 || stride == 0 {
        return Err(Error::Contract(format!("sparse sampler needs T ≥ 2 and stride ≥ 1 (T = {frames}, stride = {stride})")));
    }
    let span = (frames - 1) * stride;
    if span >= times.len() {
        return Err(Error::Contract(format!("window of {frames} frames at stride {stride} exceeds a {}-frame timeline", times.len())));
    }
    let start = start.min(times.len() - 1 - span);
    let slots = (0..frames)
        .map(|k| {
            let f = start + k * stride;
            Slot { time: times[f], frame: Some(f) }
        })
        .collect();
    Ok(FrameGroup { view, slots })
}

/// How placeholder timestamps are placed between their flanking real frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlaceholderTimes {
    /// Evenly spaced inside each placeholder run (a single placeholder sits at the midpoint).
    Interpolated,
    /// Sorted uniform draws inside the run's open interval.
    Uniform,
}

impl std::str::FromStr for PlaceholderTimes {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interpolated" | "midpoint" => Ok(Self::Interpolated),
            "uniform" => Ok(Self::Uniform),
            other => Err(Error::Config(format!("unknown placeholder mode {other:?} (expected interpolated|uniform)"))),
        }
    }
}

/// Consecutive window starting at `start` whose interior slots listed in
/// `placeholders` are replaced by interpolated timestamps.
pub fn interpolation_group<R: Rng + ?Sized>(
    view: usize,
    times: &[f64],
    frames: usize,
    start: usize,
    placeholders: &[usize],
    mode: PlaceholderTimes,
    rng: &mut R,
) -> Result<FrameGroup> {
    let mut g = sparse_stride_sample(view, times, frames, 1, start)?;
    for &p in placeholders {
        if p == 0 || p + 1 >= frames {
            return Err(Error::Contract(format!("slot {p} is a window boundary and must stay real")));
        }
        g.slots[p].frame = None;
    }
    let mut k = 1;
    while k + 1 < frames {
        if g.slots[k].is_real() {
            k += 1;
            continue;
        }
        let run_start = k;
        while !g.slots[k].is_real() {
            k += 1;
        }
        let (t0, t1) = (g.slots[run_start - 1].time, g.slots[k].time);
        let n = k - run_start;
        let mut ts: Vec<f64> = match mode {
            PlaceholderTimes::Interpolated => (1..=n).map(|i| t0 + (t1 - t0) * i as f64 / (n + 1) as f64).collect(),
            PlaceholderTimes::Uniform => (0..n)
                .map(|_| {
                    let u: f64 = rng.random_range(0.0..1.0);
                    t0 + (t1 - t0) * u.max(1e-6)
                })
                .collect(),
        };
        ts.sort_by(f64::total_cmp);
        for (i, t) in ts.into_iter().enumerate() {
            g.slots[run_start + i].time = t;
        }
    }
    Ok(g)
}

/// Random consecutive window with a random interior subset replaced by placeholders.
/// If `anchor` is given, the window contains that frame and it stays real.
pub fn interpolation_sample<R: Rng + ?Sized>(
    view: usize,
    times: &[f64],
    frames: usize,
    anchor: Option<usize>,
    mode: PlaceholderTimes,
    rng: &mut R,
) -> Result<FrameGroup> {
    if frames < 2 || times.len() < frames {
        return Err(Error::Contract(format!("interpolation sampler needs {frames} ≥ 2 frames, timeline has {}", times.len())));
    }
    let last_start = times.len() - frames;
    let start = match anchor {
        Some(f) => {
            let lo = f.saturating_sub(frames - 1);
            let hi = f.min(last_start);
            rng.random_range(lo..=hi)
        }
        None => rng.random_range(0..=last_start),
    };
    let mut interior: Vec<usize> = (1..frames - 1).filter(|&k| Some(start + k) != anchor).collect();
    let count = rng.random_range(0..=interior.len());
    interior.shuffle(rng);
    let mut chosen = interior[..count].to_vec();
    chosen.sort_unstable();
    interpolation_group(view, times, frames, start, &chosen, mode, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub window: usize,
    pub sparse_ratio: f64,
    pub strides: Vec<usize>,
    pub placeholder_times: PlaceholderTimes,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { window: 6, sparse_ratio: 0.7, strides: vec![1, 2, 3], placeholder_times: PlaceholderTimes::Interpolated }
    }
}

/// Stateful group source: each epoch visits every (view, frame) pair once in shuffled
/// order, and the group built for a visit always contains that frame as a real slot.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSampler {
    pub config: SamplerConfig,
    /// Normalized times per view (indexed like the dataset's views).
    timelines: Vec<Vec<f64>>,
    views: Vec<usize>,
    queue: Vec<(usize, usize)>,
    pub epoch: u64,
}

impl GroupSampler {
    pub fn new(config: SamplerConfig, timelines: Vec<Vec<f64>>, views: Vec<usize>) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::Config("sampler has no training views".into()));
        }
        for &v in &views {
            if timelines[v].len() < config.window {
                return Err(Error::Config(format!("view {v} has {} frames, window needs {}", timelines[v].len(), config.window)));
            }
        }
        if config.window < 2 {
            return Err(Error::Config("window must hold at least 2 frames".into()));
        }
        if config.strides.is_empty() || config.strides.contains(&0) {
            return Err(Error::Config("stride set must be non-empty and positive".into()));
        }
        Ok(Self { config, timelines, views, queue: Vec::new(), epoch: 0 })
    }

    pub fn timelines(&self) -> &[Vec<f64>] {
        &self.timelines
    }

    /// Remaining (view, frame) anchors of the current epoch, next one last.
    pub fn queue(&self) -> &[(usize, usize)] {
        &self.queue
    }

    pub fn restore(&mut self, queue: Vec<(usize, usize)>, epoch: u64) -> Result<()> {
        for &(v, f) in &queue {
            if !self.views.contains(&v) || f >= self.timelines[v].len() {
                return Err(Error::Contract(format!("sampler state names frame {f} of view {v}, which is not a training frame")));
            }
        }
        self.queue = queue;
        self.epoch = epoch;
        Ok(())
    }

    fn refill<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.queue = self.views.iter().flat_map(|&v| (0..self.timelines[v].len()).map(move |f| (v, f))).collect();
        self.queue.shuffle(rng);
        // pop() takes from the back; reverse so the shuffled order is consumed front to back
        self.queue.reverse();
        self.epoch += 1;
    }

    /// Draws the next group. Consumes randomness in a fixed order for determinism.
    pub fn next_group<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<FrameGroup> {
        if self.queue.is_empty() {
            self.refill(rng);
        }
        let (view, f) = self.queue.pop().expect("refilled");
        let times = &self.timelines[view];
        let t_len = self.config.window;
        match schedule(self.config.sparse_ratio, rng) {
            SamplerKind::Sparse => {
                let stride = self.config.strides[rng.random_range(0..self.config.strides.len())];
                let feasible = |stride: usize| -> Vec<usize> {
                    if (t_len - 1) * stride >= times.len() {
                        return vec![];
                    }
                    let last_start = times.len() - 1 - (t_len - 1) * stride;
                    // slot positions p with start = f − p·stride inside [0, last_start]
                    (0..t_len).filter(|&p| p * stride <= f && f - p * stride <= last_start).collect()
                };
                let mut positions = feasible(stride);
                let mut stride = stride;
                if positions.is_empty() {
                    stride = 1;
                    positions = feasible(1);
                }
                let feasible = positions;
                let p = feasible[rng.random_range(0..feasible.len())];
                sparse_stride_sample(view, times, t_len, stride, f - p * stride)
            }
            SamplerKind::Interpolation => interpolation_sample(view, times, t_len, Some(f), self.config.placeholder_times, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CameraRole {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub index: usize,
    /// Normalized to [0, 1].
    pub time: f64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    pub camera: Camera,
    pub role: CameraRole,
    /// Ordered by frame index.
    pub frames: Vec<FrameRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub resolution: [usize; 2],
    pub frame_count: usize,
    pub scene_init: Option<PathBuf>,
    pub scene_gt: Option<PathBuf>,
    pub views: Vec<ViewRecord>,
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

impl Manifest {
    pub fn view_index(&self, id: &str) -> Option<usize> {
        self.views.iter().position(|v| v.camera.id == id)
    }

    pub fn train_views(&self) -> Vec<usize> {
        (0..self.views.len()).filter(|&i| self.views[i].role == CameraRole::Train).collect()
    }

    pub fn timelines(&self) -> Vec<Vec<f64>> {
        self.views.iter().map(|v| v.frames.iter().map(|f| f.time).collect()).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# dynsplat dataset manifest v1\n");
        let _ = writeln!(s, "resolution {} {}", self.resolution[0], self.resolution[1]);
        let _ = writeln!(s, "frames {}", self.frame_count);
        if let Some(p) = &self.scene_init {
            let _ = writeln!(s, "scene_init {}", p.display());
        }
        if let Some(p) = &self.scene_gt {
            let _ = writeln!(s, "scene_gt {}", p.display());
        }
        for v in &self.views {
            let c = &v.camera;
            let role = if v.role == CameraRole::Train { "train" } else { "test" };
            let mut fields = vec![c.id.clone(), role.to_string()];
            fields.extend([c.focal[0], c.focal[1], c.principal_point[0], c.principal_point[1], c.near_clip].map(fmt_f64));
            for r in 0..3 {
                for k in 0..3 {
                    fields.push(fmt_f64(c.rotation[(r, k)]));
                }
            }
            fields.extend((0..3).map(|k| fmt_f64(c.translation[k])));
            let _ = writeln!(s, "camera {}", fields.join(" "));
        }
        for v in &self.views {
            for f in &v.frames {
                let _ = writeln!(s, "frame {} {} {} {}", v.camera.id, f.index, fmt_f64(f.time), f.path.display());
            }
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let root = origin.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |line: usize, msg: String| Error::format(origin, format!("line {}: {msg}", line + 1));
        let mut resolution = None;
        let mut frame_count = None;
        let mut scene_init = None;
        let mut scene_gt = None;
        let mut views: Vec<ViewRecord> = Vec::new();
        let mut by_id: HashMap<String, usize> = HashMap::new();
        let mut raw_frames: Vec<(usize, usize, f64, PathBuf)> = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let tok: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                tok.get(i).ok_or_else(|| err(ln, "missing field".into()))?.parse::<f64>().map_err(|e| err(ln, format!("bad number: {e}")))
            };
            let int = |i: usize| -> Result<usize> {
                tok.get(i).ok_or_else(|| err(ln, "missing field".into()))?.parse::<usize>().map_err(|e| err(ln, format!("bad integer: {e}")))
            };
            match tok[0] {
                "resolution" => resolution = Some([int(1)?, int(2)?]),
                "frames" => frame_count = Some(int(1)?),
                "scene_init" => scene_init = Some(PathBuf::from(tok.get(1).ok_or_else(|| err(ln, "missing path".into()))?)),
                "scene_gt" => scene_gt = Some(PathBuf::from(tok.get(1).ok_or_else(|| err(ln, "missing path".into()))?)),
                "camera" => {
                    if tok.len() != 20 {
                        return Err(err(ln, format!("camera record has {} fields, expected 20", tok.len())));
                    }
                    let res = resolution.ok_or_else(|| err(ln, "camera before resolution".into()))?;
                    let role = match tok[2] {
                        "train" => CameraRole::Train,
                        "test" => CameraRole::Test,
                        r => return Err(err(ln, format!("unknown camera role {r:?}"))),
                    };
                    let mut r = [0.0; 9];
                    for (k, v) in r.iter_mut().enumerate() {
                        *v = num(8 + k)?;
                    }
                    let camera = Camera {
                        id: tok[1].to_string(),
                        rotation: Matrix3::from_row_slice(&r),
                        translation: Vector3::new(num(17)?, num(18)?, num(19)?),
                        focal: [num(3)?, num(4)?],
                        principal_point: [num(5)?, num(6)?],
                        resolution: res,
                        near_clip: num(7)?,
                    };
                    camera.validate().map_err(|e| err(ln, e.to_string()))?;
                    if by_id.insert(camera.id.clone(), views.len()).is_some() {
                        return Err(err(ln, format!("duplicate camera {}", camera.id)));
                    }
                    views.push(ViewRecord { camera, role, frames: Vec::new() });
                }
                "frame" => {
                    if tok.len() != 5 {
                        return Err(err(ln, "frame record needs: frame <view> <index> <time> <path>".into()));
                    }
                    let v = *by_id.get(tok[1]).ok_or_else(|| err(ln, format!("unknown view {}", tok[1])))?;
                    raw_frames.push((v, int(2)?, num(3)?, PathBuf::from(tok[4])));
                }
                other => return Err(err(ln, format!("unknown record {other:?}"))),
            }
        }
        let resolution = resolution.ok_or_else(|| Error::format(origin, "missing resolution record"))?;
        let frame_count = frame_count.ok_or_else(|| Error::format(origin, "missing frames record"))?;
        let (lo, hi) = raw_frames.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), f| (lo.min(f.2), hi.max(f.2)));
        let span = hi - lo;
        for (v, index, t, path) in raw_frames {
            let time = if span > 0.0 { (t - lo) / span } else { 0.0 };
            views[v].frames.push(FrameRecord { index, time, path });
        }
        for v in &mut views {
            v.frames.sort_by_key(|f| f.index);
            if v.frames.windows(2).any(|w| w[0].index == w[1].index || !(w[0].time < w[1].time)) {
                return Err(Error::format(origin, format!("view {}: duplicate frame index or non-increasing time", v.camera.id)));
            }
        }
        Ok(Self { resolution, frame_count, scene_init, scene_gt, views, root })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// A manifest with every frame image loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// `images[view][frame]`
    pub images: Vec<Vec<Image>>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let path = if manifest_path.is_dir() { manifest_path.join("manifest.txt") } else { manifest_path.to_path_buf() };
        let manifest = Manifest::load(&path)?;
        let mut images = Vec::with_capacity(manifest.views.len());
        for v in &manifest.views {
            let mut imgs = Vec::with_capacity(v.frames.len());
            for f in &v.frames {
                let p = manifest.resolve(&f.path);
                let img = Image::load_float_dump(&p)?;
                if [img.width, img.height] != manifest.resolution {
                    return Err(Error::format(&p, format!("image is {}x{}, manifest says {:?}", img.width, img.height, manifest.resolution)));
                }
                imgs.push(img);
            }
            images.push(imgs);
        }
        Ok(Self { manifest, images })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn timeline(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn sparse_stride_examples() {
        let t = timeline(30);
        let g = sparse_stride_sample(0, &t, 6, 3, 0).unwrap();
        let frames: Vec<usize> = g.slots.iter().map(|s| s.frame.unwrap()).collect();
        assert_eq!(frames, vec![0, 3, 6, 9, 12, 15]);
        let g = sparse_stride_sample(0, &t, 6, 1, 4).unwrap();
        let frames: Vec<usize> = g.slots.iter().map(|s| s.frame.unwrap()).collect();
        assert_eq!(frames, vec![4, 5, 6, 7, 8, 9]);
        // overrun shifts back
        let g = sparse_stride_sample(0, &t, 6, 3, 25).unwrap();
        assert_eq!(g.slots.last().unwrap().frame, Some(29));
        assert_eq!(g.slots[5].time - g.slots[0].time, t[29] - t[14]);
    }

    #[test]
    fn midpoint_placeholder() {
        let t = [0.0, 0.1, 0.2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = interpolation_group(0, &t, 3, 0, &[1], PlaceholderTimes::Interpolated, &mut rng).unwrap();
        assert!((g.slots[1].time - 0.1).abs() < 1e-15);
        assert!(!g.slots[1].is_real());
        assert!(interpolation_group(0, &t, 3, 0, &[0], PlaceholderTimes::Interpolated, &mut rng).is_err());
    }

    #[test]
    fn zero_placeholders_equals_stride_one() {
        let t = timeline(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = interpolation_group(0, &t, 4, 2, &[], PlaceholderTimes::Interpolated, &mut rng).unwrap();
        assert_eq!(a, sparse_stride_sample(0, &t, 4, 1, 2).unwrap());
    }

    #[test]
    fn sampler_covers_every_frame_each_epoch() {
        let cfg = SamplerConfig::default();
        let mut s = GroupSampler::new(cfg, vec![timeline(30), timeline(30)], vec![0, 1]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = vec![vec![false; 30]; 2];
        for _ in 0..60 {
            let g = s.next_group(&mut rng).unwrap();
            g.check_invariants().unwrap();
            for sl in &g.slots {
                if let Some(f) = sl.frame {
                    seen[g.view][f] = true;
                }
            }
        }
        assert!(seen.iter().flatten().all(|v| *v));
        assert_eq!(s.epoch, 1);
    }

    #[test]
    fn manifest_round_trip() {
        let cam = Camera::look_at("view0", [0.0, 0.5, 2.0], [0.0; 3], [0.0, 1.0, 0.0], 90.0, [64, 48]).unwrap();
        let m = Manifest {
            resolution: [64, 48],
            frame_count: 2,
            scene_init: Some("scene_init.json".into()),
            scene_gt: None,
            views: vec![ViewRecord {
                camera: cam,
                role: CameraRole::Train,
                frames: vec![
                    FrameRecord { index: 0, time: 0.0, path: "a.dsfd".into() },
                    FrameRecord { index: 1, time: 1.0, path: "b.dsfd".into() },
                ],
            }],
            root: PathBuf::from("/data"),
        };
        let back = Manifest::parse(&m.to_text(), Path::new("/data/manifest.txt")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn manifest_normalizes_times() {
        let text = "resolution 4 4\nframes 2\ncamera v train 10 10 2 2 0.01 1 0 0 0 1 0 0 0 1 0 0 3\nframe v 0 5.0 a\nframe v 1 7.0 b\n";
        let m = Manifest::parse(text, Path::new("m.txt")).unwrap();
        assert_eq!(m.views[0].frames[0].time, 0.0);
        assert_eq!(m.views[0].frames[1].time, 1.0);
        assert!(Manifest::parse("resolution 4 4\nbogus 1\n", Path::new("m.txt")).is_err());
    }
}
