//! Two-stage optimization: a canonical warm-up followed by joint training of
//! Gaussians, control nodes, affinity embedder and deformation network.

use std::collections::BTreeSet;
use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::control::{lifecycle_step, AffinityEmbedder, ControlNodes, NodeGradStats};
use crate::deformer::{self, NetParams};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::model::{Model, ModelGrad, ParamGroup};
use crate::objective::{photometric_with_grad, total_loss_impl};
use crate::optim::{exp_decay, Adam, Moments};
use crate::render::render_cloud_backward;
use crate::sampling::{Dataset, GroupSampler};
use crate::scene::{Camera, GaussianCloud, SceneFile};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_SKIP_STREAK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Warmup,
    Main,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Warmup => "warmup",
            Stage::Main => "main",
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub stage: Stage,
    /// 1-based count of iterations run in this stage.
    pub iteration: usize,
    pub loss: f64,
    pub l_frame: f64,
    pub l_motion: f64,
    pub nodes: usize,
    pub skipped: bool,
    pub millis: f64,
}

impl LogRecord {
    /// The record without its timing, which is the part that must be reproducible.
    pub fn deterministic_part(&self) -> String {
        format!(
            "stage={} iter={} loss={:?} frame={:?} motion={:?} nodes={} skipped={}",
            self.stage.name(),
            self.iteration,
            self.loss,
            self.l_frame,
            self.l_motion,
            self.nodes,
            self.skipped
        )
    }
}

impl fmt::Display for LogRecord {
    /// `stage=main iter=120 loss=… frame=… motion=… nodes=64 skipped=false ms=12.3`
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ms={:.1}", self.deterministic_part(), self.millis)
    }
}

/// Complete training state; everything here except `history` is checkpointed.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub sampler: GroupSampler,
    pub grad_stats: NodeGradStats,
    pub warmup_done: usize,
    pub main_done: usize,
    pub skip_streak: usize,
    pub skipped_total: usize,
    /// Dataset cameras, kept so a checkpoint can render without the dataset.
    pub cameras: Vec<Camera>,
    pub train_views: Vec<usize>,
    /// Groups that have received a non-zero gradient so far.
    pub groups_touched: BTreeSet<&'static str>,
    pub history: Vec<LogRecord>,
}

impl Trainer {
    /// Fresh state from the dataset's initial cloud (`scene_init` in the manifest).
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let m = &data.manifest;
        let init = m.scene_init.as_ref().ok_or_else(|| Error::Config("dataset manifest has no scene_init record".into()))?;
        let scene = SceneFile::load(&m.resolve(init))?;
        Self::with_cloud(config, data, scene.cloud)
    }

    pub fn with_cloud(config: TrainConfig, data: &Dataset, cloud: GaussianCloud) -> Result<Self> {
        config.validate()?;
        if cloud.is_empty() {
            return Err(Error::Config("initial cloud is empty".into()));
        }
        let m = &data.manifest;
        let train_views = m.train_views();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let net = NetParams::init(&config.net, &mut rng)?;
        let model = Model {
            cloud,
            nodes: ControlNodes::new(vec![], vec![], config.code_dim)?,
            embedder: AffinityEmbedder::zeros(config.code_dim),
            net,
            affinity: config.affinity,
            spatial_scale: 1.0,
            neighbors: config.neighbors,
            render: config.render,
            skin: None,
        };
        let sampler = GroupSampler::new(config.sampler.clone(), m.timelines(), train_views.clone())?;
        Ok(Self {
            adam: Adam::new(&model),
            model,
            rng,
            sampler,
            grad_stats: NodeGradStats::new(0),
            warmup_done: 0,
            main_done: 0,
            skip_streak: 0,
            skipped_total: 0,
            cameras: m.views.iter().map(|v| v.camera.clone()).collect(),
            train_views,
            groups_touched: BTreeSet::new(),
            history: Vec::new(),
            config,
        })
    }

    pub fn nodes_initialized(&self) -> bool {
        !self.model.nodes.is_empty()
    }

    pub fn finished(&self) -> bool {
        self.nodes_initialized() && self.warmup_done >= self.config.warmup_iters && self.main_done >= self.config.main_iters
    }

    fn learning_rate(&self, g: ParamGroup) -> f64 {
        let lr = &self.config.lr;
        match g {
            ParamGroup::Position => {
                let total = (self.config.warmup_iters + self.config.main_iters).max(1);
                exp_decay(lr.position, lr.position_final, (self.warmup_done + self.main_done) as f64 / total as f64)
            }
            ParamGroup::Rotation => lr.rotation,
            ParamGroup::Scale => lr.scale,
            ParamGroup::Opacity => lr.opacity,
            ParamGroup::Color => lr.color,
            ParamGroup::NodePosition => lr.node_position,
            ParamGroup::NodeCode => lr.node_code,
            ParamGroup::Embedder => lr.embedder,
            ParamGroup::Network => lr.network,
        }
    }

    fn apply_update(&mut self, grad: &ModelGrad, groups: &[ParamGroup]) -> Result<()> {
        for &g in groups {
            if grad.group(g).iter().any(|&v| v != 0.0) {
                self.groups_touched.insert(g.name());
            }
        }
        let rates: Vec<(ParamGroup, f64)> = ParamGroup::ALL.iter().map(|&g| (g, self.learning_rate(g))).collect();
        let lr = |g: ParamGroup| rates.iter().find(|(h, _)| *h == g).map_or(0.0, |r| r.1);
        self.adam.step(&mut self.model, grad, groups, lr)
    }

    /// Records a non-finite step; errors once the streak reaches the limit.
    fn skip(&mut self, what: &str) -> Result<()> {
        self.skip_streak += 1;
        self.skipped_total += 1;
        log::warn!("non-finite {what}; skipping step ({} in a row)", self.skip_streak);
        if self.skip_streak >= MAX_SKIP_STREAK {
            return Err(Error::Diverged(format!("{} consecutive non-finite steps ({what})", self.skip_streak)));
        }
        Ok(())
    }

    /// One warm-up iteration: canonical render of a random training frame,
    /// photometric loss, update of the Gaussian groups only.
    pub fn warmup_step(&mut self, data: &Dataset) -> Result<LogRecord> {
        let start = Instant::now();
        let view = self.train_views[self.rng.random_range(0..self.train_views.len())];
        let frame = self.rng.random_range(0..data.images[view].len());
        let cam = &data.manifest.views[view].camera;
        let (img, tape) = self.model.render_canonical(cam)?;
        let (loss, d_img) = photometric_with_grad(&img, &data.images[view][frame], &self.config.loss)?;
        let grads = render_cloud_backward(&self.model.cloud, cam, &tape, &d_img)?;
        let mut grad = ModelGrad::zeros(&self.model);
        for (j, g) in grads.iter().enumerate() {
            grad.cloud.add_grad(j, g);
        }
        self.warmup_done += 1;
        let skipped = !(loss.is_finite() && grad.is_finite());
        if skipped {
            self.skip("warm-up loss")?;
        } else {
            self.skip_streak = 0;
            self.apply_update(&grad, &ParamGroup::GAUSSIAN)?;
        }
        let rec = LogRecord {
            stage: Stage::Warmup,
            iteration: self.warmup_done,
            loss,
            l_frame: loss,
            l_motion: 0.0,
            nodes: 0,
            skipped,
            millis: start.elapsed().as_secs_f64() * 1e3,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Places the control nodes on the warmed-up cloud and gives the new groups fresh moments.
    pub fn init_nodes(&mut self) -> Result<()> {
        let count = self.config.nodes.min(self.model.cloud.len());
        self.model.init_nodes(count, self.config.code_dim, &mut self.rng)?;
        for g in [ParamGroup::NodePosition, ParamGroup::NodeCode, ParamGroup::Embedder] {
            self.adam.groups.insert(g.name(), Moments::zeros(self.model.group(g).len()));
        }
        self.grad_stats = NodeGradStats::new(self.model.nodes.len());
        Ok(())
    }

    /// One main-stage iteration over a sampled frame group.
    pub fn main_step(&mut self, data: &Dataset) -> Result<LogRecord> {
        let start = Instant::now();
        if self.model.skin.is_none() || self.main_done % self.config.rebuild_every == 0 {
            self.model.rebuild_skinning(self.main_done as u64)?;
        }
        let group = self.sampler.next_group(&mut self.rng)?;
        let window = self.config.window();
        let mask = deformer::sample_mask(window, self.config.net.mask_ratio_max, None, &mut self.rng);
        let cam = &data.manifest.views[group.view].camera;
        let real = group.real_flags();
        let fwd = self.model.forward_window(cam, &group.timestamps(), &mask, &real)?;
        let gt: Vec<Option<&Image>> = group.slots.iter().map(|s| s.frame.map(|f| &data.images[group.view][f])).collect();
        let rendered: Vec<Option<&Image>> = fwd.images.iter().map(Option::as_ref).collect();
        let (report, image_grads) = total_loss_impl(&rendered, &gt, &self.config.loss, true)?;
        let grad = self.model.backward_window(cam, &fwd, &image_grads)?;
        self.main_done += 1;
        let skipped = !(report.total.is_finite() && grad.is_finite());
        if skipped {
            self.skip("main-stage loss or gradient")?;
        } else {
            self.skip_streak = 0;
            self.apply_update(&grad, &ParamGroup::ALL)?;
            self.grad_stats.accumulate(&grad.node_positions);
        }
        let c = &self.config;
        if self.main_done % c.lifecycle_every == 0 && (c.lifecycle_start..=c.lifecycle_stop).contains(&self.main_done) {
            self.run_lifecycle()?;
        }
        let rec = LogRecord {
            stage: Stage::Main,
            iteration: self.main_done,
            loss: report.total,
            l_frame: report.l_frame,
            l_motion: report.l_motion(),
            nodes: self.model.nodes.len(),
            skipped,
            millis: start.elapsed().as_secs_f64() * 1e3,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    fn run_lifecycle(&mut self) -> Result<()> {
        let skin = self.model.skin.as_ref().ok_or_else(|| Error::Contract("lifecycle needs a skinning field".into()))?;
        let extent = self.model.cloud.extent();
        let out = lifecycle_step(&self.model.nodes, skin, &self.grad_stats, extent, &self.config.lifecycle, &mut self.rng);
        if out.rebuild {
            log::info!("lifecycle at main iteration {}: cloned {} pruned {} -> {} nodes", self.main_done, out.cloned, out.pruned, out.nodes.len());
            let kept = out.source_rows.len() - out.cloned;
            self.adam.remap_rows(ParamGroup::NodePosition, 3, &out.source_rows, kept);
            self.adam.remap_rows(ParamGroup::NodeCode, self.model.nodes.code_dim, &out.source_rows, kept);
            self.model.nodes = out.nodes;
            self.model.skin = None;
        }
        self.grad_stats = NodeGradStats::new(self.model.nodes.len());
        Ok(())
    }

    /// Advances by one iteration of whichever stage is current. Returns `None` when done.
    pub fn step(&mut self, data: &Dataset) -> Result<Option<LogRecord>> {
        if self.warmup_done < self.config.warmup_iters {
            return self.warmup_step(data).map(Some);
        }
        if !self.nodes_initialized() {
            self.init_nodes()?;
        }
        if self.main_done < self.config.main_iters {
            return self.main_step(data).map(Some);
        }
        Ok(None)
    }

    /// Runs until finished or until `stop_after` further iterations, calling `on_record` after each.
    pub fn run(&mut self, data: &Dataset, stop_after: Option<usize>, mut on_record: impl FnMut(&Trainer, &LogRecord) -> Result<()>) -> Result<()> {
        let mut n = 0;
        while stop_after.is_none_or(|s| n < s) {
            match self.step(data)? {
                Some(rec) => on_record(self, &rec)?,
                None => break,
            }
            n += 1;
        }
        // a run that ends exactly at the warm-up boundary still leaves nodes placed
        if self.warmup_done >= self.config.warmup_iters && !self.nodes_initialized() {
            self.init_nodes()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, write_dataset, InitNoise, Preset, RigConfig};

    pub(crate) fn tiny_dataset(preset: Preset) -> (tempfile::TempDir, Dataset) {
        let dir = tempfile::tempdir().unwrap();
        let rig = RigConfig { resolution: [24, 24], focal: 34.0, frame_count: 8, ..RigConfig::default() };
        let script = generate_scene(preset, 1, &rig).unwrap();
        write_dataset(&script, dir.path(), 1, &InitNoise::default()).unwrap();
        let data = Dataset::load(dir.path()).unwrap();
        (dir, data)
    }

    fn tiny_config() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.warmup_iters = 3;
        c.main_iters = 4;
        c.nodes = 8;
        c.net = crate::deformer::NetConfig { layers: 3, width: 16, attn_layers: vec![1], heads: 2, ..Default::default() };
        c.sampler.window = 4;
        c.lifecycle_every = 2;
        c.lifecycle_start = 2;
        c.rebuild_every = 2;
        c
    }

    #[test]
    fn zero_warmup_passes_cloud_through() {
        let (_d, data) = tiny_dataset(Preset::Static);
        let mut c = tiny_config();
        c.warmup_iters = 0;
        c.main_iters = 1;
        let mut t = Trainer::new(c, &data).unwrap();
        let before = t.model.cloud.clone();
        t.run(&data, Some(0), |_, _| Ok(())).unwrap();
        assert_eq!(t.model.cloud, before);
        assert_eq!(t.model.nodes.len(), 8);
    }

    #[test]
    fn zero_learning_rates_leave_parameters() {
        let (_d, data) = tiny_dataset(Preset::Oscillator);
        let mut t = Trainer::new(tiny_config(), &data).unwrap();
        t.warmup_done = t.config.warmup_iters;
        t.init_nodes().unwrap();
        let snapshot = t.model.clone();
        // rates must be positive in a config, so emulate zero rates through the optimizer directly
        let mut grad = ModelGrad::zeros(&t.model);
        grad.net.iter_mut().for_each(|v| *v = 1.0);
        t.adam.step(&mut t.model, &grad, &ParamGroup::ALL, |_| 0.0).unwrap();
        assert_eq!(t.model, snapshot);
        let rec = t.main_step(&data).unwrap();
        assert!(rec.loss.is_finite());
    }

    #[test]
    fn full_tiny_run_is_reproducible() {
        let (_d, data) = tiny_dataset(Preset::Oscillator);
        let run = || {
            let mut t = Trainer::new(tiny_config(), &data).unwrap();
            t.run(&data, None, |_, _| Ok(())).unwrap();
            assert!(t.finished());
            t.history.iter().map(LogRecord::deterministic_part).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a.len(), 7);
        assert_eq!(a, run());
    }

    #[test]
    fn three_non_finite_steps_abort() {
        let (_d, mut data) = tiny_dataset(Preset::Static);
        let mut t = Trainer::new(tiny_config(), &data).unwrap();
        for img in data.images.iter_mut().flatten() {
            img.data[0] = f64::NAN;
        }
        let before = t.model.cloud.clone();
        assert!(t.warmup_step(&data).is_ok());
        assert!(t.warmup_step(&data).is_ok());
        assert!(matches!(t.warmup_step(&data), Err(Error::Diverged(_))));
        assert_eq!(t.skipped_total, 3);
        assert_eq!(t.model.cloud, before);
    }
}
