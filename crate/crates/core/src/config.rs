//! Training configuration: a `key = value` text file over one of two profiles.
//!
//! `profile` (if present) selects the base values; every other key overrides one
//! field. Unknown or repeated keys are errors. [`TrainConfig::to_text`] writes the
//! effective configuration with every key, and its SHA-256 identifies a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::control::{AffinityMode, LifecycleConfig};
use crate::deformer::NetConfig;
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::render::RenderSettings;
use crate::sampling::{PlaceholderTimes, SamplerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Small CPU-friendly run: 64 nodes, 5k main iterations.
    Desk,
    /// Full-size schedule: 2048 nodes, 5k warm-up and 35k main iterations.
    Full,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "full" => Ok(Profile::Full),
            o => Err(Error::Config(format!("unknown profile {o:?} (desk | full)"))),
        }
    }
}

impl Profile {
    pub fn name(self) -> &'static str {
        match self {
            Profile::Desk => "desk",
            Profile::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LearningRates {
    pub position: f64,
    /// Position rate at the last iteration; decays log-linearly from `position`.
    pub position_final: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
    pub node_position: f64,
    pub node_code: f64,
    pub embedder: f64,
    pub network: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            position_final: 1.6e-6,
            rotation: 1e-3,
            scale: 5e-3,
            opacity: 5e-2,
            color: 5e-3,
            node_position: 1.6e-4,
            node_code: 1e-3,
            embedder: 1e-4,
            network: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub profile: Profile,
    pub seed: u64,
    pub warmup_iters: usize,
    pub main_iters: usize,
    /// Initial control-node count.
    pub nodes: usize,
    pub code_dim: usize,
    /// K, the neighbors per Gaussian.
    pub neighbors: usize,
    pub affinity: AffinityMode,
    pub net: NetConfig,
    /// `sampler.window` is the temporal window T.
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub lifecycle: LifecycleConfig,
    pub lr: LearningRates,
    pub render: RenderSettings,
    pub lifecycle_every: usize,
    /// Main-stage iteration range in which the node lifecycle runs.
    pub lifecycle_start: usize,
    pub lifecycle_stop: usize,
    pub rebuild_every: usize,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn profile(p: Profile) -> Self {
        let full = Self {
            profile: p,
            seed: 0,
            warmup_iters: 5000,
            main_iters: 35000,
            nodes: 2048,
            code_dim: 8,
            neighbors: 3,
            affinity: AffinityMode::Learned,
            net: NetConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            lifecycle: LifecycleConfig::default(),
            lr: LearningRates::default(),
            render: RenderSettings::default(),
            lifecycle_every: 500,
            lifecycle_start: 500,
            lifecycle_stop: 17500,
            rebuild_every: 100,
            checkpoint_every: 5000,
            log_every: 100,
        };
        match p {
            Profile::Full => full,
            Profile::Desk => Self {
                warmup_iters: 1000,
                main_iters: 5000,
                nodes: 64,
                net: NetConfig { layers: 6, width: 64, attn_layers: vec![1, 4], ..NetConfig::default() },
                lifecycle_stop: 2500,
                checkpoint_every: 1000,
                ..full
            },
        }
    }

    pub fn window(&self) -> usize {
        self.sampler.window
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("main_iters", self.main_iters),
            ("nodes", self.nodes),
            ("code_dim", self.code_dim),
            ("neighbors", self.neighbors),
            ("window", self.sampler.window),
            ("lifecycle_every", self.lifecycle_every),
            ("rebuild_every", self.rebuild_every),
            ("log_every", self.log_every),
        ];
        for (k, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be at least 1")));
            }
        }
        if self.neighbors > self.nodes {
            return Err(Error::Config(format!("neighbors = {} exceeds nodes = {}", self.neighbors, self.nodes)));
        }
        let l = &self.lr;
        for (k, v) in [
            ("lr_position", l.position),
            ("lr_position_final", l.position_final),
            ("lr_rotation", l.rotation),
            ("lr_scale", l.scale),
            ("lr_opacity", l.opacity),
            ("lr_color", l.color),
            ("lr_node_position", l.node_position),
            ("lr_node_code", l.node_code),
            ("lr_embedder", l.embedder),
            ("lr_network", l.network),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.sampler.sparse_ratio) {
            return Err(Error::Config("sparse_ratio must lie in [0, 1]".into()));
        }
        if self.sampler.strides.is_empty() || self.sampler.strides.contains(&0) {
            return Err(Error::Config("strides must be a non-empty list of positive integers".into()));
        }
        self.net.validate()
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse::<T>().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        fn list(key: &str, v: &str) -> Result<Vec<usize>> {
            if v == "none" || v.is_empty() {
                return Ok(vec![]);
            }
            v.split(',').map(|t| p::<usize>(key, t.trim())).collect()
        }
        let v = value;
        match key {
            "profile" => self.profile = v.parse()?,
            "seed" => self.seed = p(key, v)?,
            "warmup_iters" => self.warmup_iters = p(key, v)?,
            "main_iters" => self.main_iters = p(key, v)?,
            "nodes" => self.nodes = p(key, v)?,
            "code_dim" => self.code_dim = p(key, v)?,
            "neighbors" => self.neighbors = p(key, v)?,
            "affinity" => self.affinity = v.parse()?,
            "window" => self.sampler.window = p(key, v)?,
            "net_layers" => self.net.layers = p(key, v)?,
            "net_width" => self.net.width = p(key, v)?,
            "attn_layers" => self.net.attn_layers = list(key, v)?,
            "attn_heads" => self.net.heads = p(key, v)?,
            "pos_freqs" => self.net.pos_freqs = p(key, v)?,
            "time_freqs" => self.net.time_freqs = p(key, v)?,
            "mask_ratio_max" => self.net.mask_ratio_max = p(key, v)?,
            "gate_bias_init" => self.net.gate_bias_init = p(key, v)?,
            "sparse_ratio" => self.sampler.sparse_ratio = p(key, v)?,
            "strides" => self.sampler.strides = list(key, v)?,
            "placeholder_times" => self.sampler.placeholder_times = v.parse::<PlaceholderTimes>()?,
            "lambda_dssim" => self.loss.lambda_dssim = p(key, v)?,
            "dssim_halved" => self.loss.dssim_halved = p(key, v)?,
            "topk_ratio" => self.loss.topk_ratio = p(key, v)?,
            "frame_weight" => self.loss.frame_weight = p(key, v)?,
            "motion_weight" => self.loss.motion_weight = p(key, v)?,
            "lambda_diff" => self.loss.lambda_diff = p(key, v)?,
            "lambda_amp" => self.loss.lambda_amp = p(key, v)?,
            "lambda_dir" => self.loss.lambda_dir = p(key, v)?,
            "dir_eps" => self.loss.dir_eps = p(key, v)?,
            "densify_threshold" => self.lifecycle.densify_threshold = p(key, v)?,
            "prune_threshold" => self.lifecycle.prune_threshold = p(key, v)?,
            "clone_position_jitter" => self.lifecycle.position_jitter = p(key, v)?,
            "clone_code_jitter" => self.lifecycle.code_jitter = p(key, v)?,
            "max_nodes" => self.lifecycle.max_nodes = p(key, v)?,
            "lr_position" => self.lr.position = p(key, v)?,
            "lr_position_final" => self.lr.position_final = p(key, v)?,
            "lr_rotation" => self.lr.rotation = p(key, v)?,
            "lr_scale" => self.lr.scale = p(key, v)?,
            "lr_opacity" => self.lr.opacity = p(key, v)?,
            "lr_color" => self.lr.color = p(key, v)?,
            "lr_node_position" => self.lr.node_position = p(key, v)?,
            "lr_node_code" => self.lr.node_code = p(key, v)?,
            "lr_embedder" => self.lr.embedder = p(key, v)?,
            "lr_network" => self.lr.network = p(key, v)?,
            "footprint_sigmas" => self.render.footprint_sigmas = p(key, v)?,
            "min_transmittance" => self.render.min_transmittance = p(key, v)?,
            "lifecycle_every" => self.lifecycle_every = p(key, v)?,
            "lifecycle_start" => self.lifecycle_start = p(key, v)?,
            "lifecycle_stop" => self.lifecycle_stop = p(key, v)?,
            "rebuild_every" => self.rebuild_every = p(key, v)?,
            "checkpoint_every" => self.checkpoint_every = p(key, v)?,
            "log_every" => self.log_every = p(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a config text. `profile` is applied first wherever it appears.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs: Vec<(usize, &str, &str)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", ln + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if pairs.iter().any(|(_, pk, _)| *pk == k) {
                return Err(Error::Config(format!("line {}: key {k:?} repeated", ln + 1)));
            }
            pairs.push((ln, k, v));
        }
        let profile = match pairs.iter().find(|(_, k, _)| *k == "profile") {
            Some((_, _, v)) => v.parse()?,
            None => Profile::Desk,
        };
        let mut cfg = Self::profile(profile);
        for (ln, k, v) in pairs {
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", ln + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Every key with its effective value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        fn f(v: f64) -> String {
            format!("{v:?}")
        }
        fn l(v: &[usize]) -> String {
            if v.is_empty() {
                "none".into()
            } else {
                v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
            }
        }
        let pt = match self.sampler.placeholder_times {
            PlaceholderTimes::Interpolated => "interpolated",
            PlaceholderTimes::Uniform => "uniform",
        };
        let aff = match self.affinity {
            AffinityMode::Learned => "learned",
            AffinityMode::Spatial => "spatial",
        };
        vec![
            ("profile", self.profile.name().into()),
            ("seed", self.seed.to_string()),
            ("warmup_iters", self.warmup_iters.to_string()),
            ("main_iters", self.main_iters.to_string()),
            ("nodes", self.nodes.to_string()),
            ("code_dim", self.code_dim.to_string()),
            ("neighbors", self.neighbors.to_string()),
            ("affinity", aff.into()),
            ("window", self.sampler.window.to_string()),
            ("net_layers", self.net.layers.to_string()),
            ("net_width", self.net.width.to_string()),
            ("attn_layers", l(&self.net.attn_layers)),
            ("attn_heads", self.net.heads.to_string()),
            ("pos_freqs", self.net.pos_freqs.to_string()),
            ("time_freqs", self.net.time_freqs.to_string()),
            ("mask_ratio_max", f(self.net.mask_ratio_max)),
            ("gate_bias_init", f(self.net.gate_bias_init)),
            ("sparse_ratio", f(self.sampler.sparse_ratio)),
            ("strides", l(&self.sampler.strides)),
            ("placeholder_times", pt.into()),
            ("lambda_dssim", f(self.loss.lambda_dssim)),
            ("dssim_halved", self.loss.dssim_halved.to_string()),
            ("topk_ratio", f(self.loss.topk_ratio)),
            ("frame_weight", f(self.loss.frame_weight)),
            ("motion_weight", f(self.loss.motion_weight)),
            ("lambda_diff", f(self.loss.lambda_diff)),
            ("lambda_amp", f(self.loss.lambda_amp)),
            ("lambda_dir", f(self.loss.lambda_dir)),
            ("dir_eps", f(self.loss.dir_eps)),
            ("densify_threshold", f(self.lifecycle.densify_threshold)),
            ("prune_threshold", f(self.lifecycle.prune_threshold)),
            ("clone_position_jitter", f(self.lifecycle.position_jitter)),
            ("clone_code_jitter", f(self.lifecycle.code_jitter)),
            ("max_nodes", self.lifecycle.max_nodes.to_string()),
            ("lr_position", f(self.lr.position)),
            ("lr_position_final", f(self.lr.position_final)),
            ("lr_rotation", f(self.lr.rotation)),
            ("lr_scale", f(self.lr.scale)),
            ("lr_opacity", f(self.lr.opacity)),
            ("lr_color", f(self.lr.color)),
            ("lr_node_position", f(self.lr.node_position)),
            ("lr_node_code", f(self.lr.node_code)),
            ("lr_embedder", f(self.lr.embedder)),
            ("lr_network", f(self.lr.network)),
            ("footprint_sigmas", f(self.render.footprint_sigmas)),
            ("min_transmittance", f(self.render.min_transmittance)),
            ("lifecycle_every", self.lifecycle_every.to_string()),
            ("lifecycle_start", self.lifecycle_start.to_string()),
            ("lifecycle_stop", self.lifecycle_stop.to_string()),
            ("rebuild_every", self.rebuild_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }

    /// Effective-config snapshot; parsing it back yields an identical config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# effective configuration\n");
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::profile(Profile::Desk)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_roundtrip_through_text() {
        for p in [Profile::Desk, Profile::Full] {
            let c = TrainConfig::profile(p);
            c.validate().unwrap();
            assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn every_key_is_settable() {
        let c = TrainConfig::profile(Profile::Full);
        for (k, v) in c.entries() {
            let mut d = TrainConfig::profile(Profile::Full);
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_and_repeated_keys_rejected() {
        assert!(TrainConfig::parse("main_iter = 5").is_err());
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("seed 1").is_err());
        assert!(TrainConfig::parse("lr_network = 0").is_err());
    }

    #[test]
    fn profile_applies_before_overrides() {
        let c = TrainConfig::parse("main_iters = 7\nprofile = full\n").unwrap();
        assert_eq!(c.main_iters, 7);
        assert_eq!(c.nodes, 2048);
        let d = TrainConfig::parse("# nothing\n").unwrap();
        assert_eq!(d, TrainConfig::profile(Profile::Desk));
    }

    #[test]
    fn hash_tracks_values() {
        let a = TrainConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn attention_list_none() {
        let c = TrainConfig::parse("attn_layers = none").unwrap();
        assert!(c.net.attn_layers.is_empty());
    }
}
