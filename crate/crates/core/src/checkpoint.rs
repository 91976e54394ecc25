//! Versioned binary checkpoint of the full training state.
//!
//! Layout (little endian):
//!
//! ```text
//! "DSCK"  u32 version  [u8; 32] config hash  u32 section count
//! per section: u32 name length, name bytes, u64 payload length, payload
//! ```
//!
//! Sections: `meta config cloud nodes embedder network skin optimizer rng sampler gradstats cameras`.
//! `config` holds the effective configuration text; `cameras` is a scene-file JSON
//! document with an empty cloud. Everything else is raw `u64`/`f64` data.
//! Files are written to a temporary sibling and renamed into place.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::TrainConfig;
use crate::control::{AffinityEmbedder, AffinityMode, ControlNodes, NodeGradStats, SkinningField};
use crate::deformer::NetParams;
use crate::error::{Error, Result};
use crate::model::{Model, ParamGroup};
use crate::optim::{Adam, Moments};
use crate::sampling::GroupSampler;
use crate::scene::{Gaussian3D, GaussianCloud, SceneFile};
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Buf(Vec<u8>);

impl Buf {
    fn u64(&mut self, v: u64) {
        self.0.write_u64::<LE>(v).expect("vec write");
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.0.write_f64::<LE>(v).expect("vec write");
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], section: &'static str) -> Self {
        Self { cur: Cursor::new(data), section }
    }
    fn err(&self, e: impl std::fmt::Display) -> Error {
        Error::Contract(format!("checkpoint section {}: {e}", self.section))
    }
    fn u64(&mut self) -> Result<u64> {
        self.cur.read_u64::<LE>().map_err(|e| self.err(e))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|e| self.err(e))
    }
    /// A length that must fit in the remaining payload at `unit` bytes per item.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        let left = self.cur.get_ref().len() - self.cur.position() as usize;
        if n.checked_mul(unit).is_none_or(|b| b > left) {
            return Err(self.err(format!("length {n} exceeds payload")));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        self.cur.read_f64::<LE>().map_err(|e| self.err(e))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        let mut b = vec![0; n];
        self.cur.read_exact(&mut b).map_err(|e| self.err(e))?;
        String::from_utf8(b).map_err(|e| self.err(e))
    }
    fn done(&self) -> Result<()> {
        if self.cur.position() as usize != self.cur.get_ref().len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn group_from_name(name: &str) -> Option<ParamGroup> {
    ParamGroup::ALL.iter().copied().find(|g| g.name() == name)
}

fn encode(t: &Trainer) -> Vec<(&'static str, Vec<u8>)> {
    let m = &t.model;
    let mut out = Vec::new();

    let mut b = Buf::default();
    b.usize(t.warmup_done);
    b.usize(t.main_done);
    b.usize(t.skip_streak);
    b.usize(t.skipped_total);
    b.u64(match m.affinity {
        AffinityMode::Learned => 0,
        AffinityMode::Spatial => 1,
    });
    b.f64(m.spatial_scale);
    b.usize(m.neighbors);
    b.usize(t.train_views.len());
    t.train_views.iter().for_each(|&v| b.usize(v));
    b.usize(t.groups_touched.len());
    t.groups_touched.iter().for_each(|g| b.str(g));
    out.push(("meta", b.0));

    out.push(("config", t.config.to_text().into_bytes()));

    let mut b = Buf::default();
    b.usize(m.cloud.len());
    for g in m.cloud.iter() {
        g.mean.iter().chain(&g.rotation).chain(&g.log_scale).chain(std::iter::once(&g.opacity_logit)).chain(&g.color).for_each(|&v| b.f64(v));
    }
    out.push(("cloud", b.0));

    let mut b = Buf::default();
    b.usize(m.nodes.code_dim);
    b.f64s(m.nodes.positions.as_flattened());
    b.f64s(&m.nodes.codes);
    out.push(("nodes", b.0));

    let mut b = Buf::default();
    b.usize(m.embedder.out_dim);
    b.f64s(&m.embedder.params);
    out.push(("embedder", b.0));

    let mut b = Buf::default();
    let shapes = m.net.shapes();
    b.usize(shapes.len());
    for (name, dims) in &shapes {
        b.str(name);
        b.usize(dims.len());
        dims.iter().for_each(|&d| b.usize(d));
    }
    b.f64s(&m.net.values);
    out.push(("network", b.0));

    let mut b = Buf::default();
    match &m.skin {
        None => b.u64(0),
        Some(s) => {
            b.u64(1);
            b.usize(s.k);
            b.u64(s.epoch);
            b.usize(s.neighbor_idx.len());
            s.neighbor_idx.iter().for_each(|&i| b.usize(i));
            b.f64s(&s.weights);
        }
    }
    out.push(("skin", b.0));

    let mut b = Buf::default();
    b.u64(t.adam.step);
    b.usize(t.adam.groups.len());
    for (name, mo) in &t.adam.groups {
        b.str(name);
        b.f64s(&mo.m);
        b.f64s(&mo.v);
    }
    out.push(("optimizer", b.0));

    let mut b = Buf::default();
    b.0.extend_from_slice(&t.rng.get_seed());
    b.u64(t.rng.get_stream());
    b.0.write_u128::<LE>(t.rng.get_word_pos()).expect("vec write");
    out.push(("rng", b.0));

    let mut b = Buf::default();
    b.usize(t.sampler.timelines().len());
    t.sampler.timelines().iter().for_each(|tl| b.f64s(tl));
    b.u64(t.sampler.epoch);
    b.usize(t.sampler.queue().len());
    for &(v, f) in t.sampler.queue() {
        b.usize(v);
        b.usize(f);
    }
    out.push(("sampler", b.0));

    let mut b = Buf::default();
    b.u64(t.grad_stats.steps);
    b.f64s(&t.grad_stats.grad_norm_sum);
    out.push(("gradstats", b.0));

    let cams = SceneFile { cloud: GaussianCloud::zeros(0), cameras: t.cameras.clone() };
    out.push(("cameras", cams.to_json().into_bytes()));
    out
}

/// Serializes the trainer into checkpoint bytes.
pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let sections = encode(t);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LE>(VERSION).expect("vec write");
    out.extend_from_slice(&t.config.hash());
    out.write_u32::<LE>(sections.len() as u32).expect("vec write");
    for (name, payload) in sections {
        out.write_u32::<LE>(name.len() as u32).expect("vec write");
        out.extend_from_slice(name.as_bytes());
        out.write_u64::<LE>(payload.len() as u64).expect("vec write");
        out.extend_from_slice(&payload);
    }
    out
}

/// Atomic save: write a temporary sibling, then rename over `path`.
pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let bytes = to_bytes(t);
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn split_sections(bytes: &[u8]) -> Result<([u8; 32], BTreeMap<String, &[u8]>)> {
    let bad = |m: &str| Error::Contract(format!("checkpoint: {m}"));
    if bytes.len() < 44 || &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut cur = Cursor::new(bytes);
    cur.set_position(4);
    let version = cur.read_u32::<LE>().map_err(|_| bad("truncated header"))?;
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut hash = [0u8; 32];
    cur.read_exact(&mut hash).map_err(|_| bad("truncated header"))?;
    let count = cur.read_u32::<LE>().map_err(|_| bad("truncated header"))?;
    let mut sections = BTreeMap::new();
    for _ in 0..count {
        let n = cur.read_u32::<LE>().map_err(|_| bad("truncated section header"))? as usize;
        let p = cur.position() as usize;
        let name = bytes.get(p..p + n).ok_or_else(|| bad("truncated section name"))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| bad("section name is not UTF-8"))?;
        cur.set_position((p + n) as u64);
        let len = cur.read_u64::<LE>().map_err(|_| bad("truncated section header"))? as usize;
        let p = cur.position() as usize;
        let payload = bytes.get(p..p.checked_add(len).ok_or_else(|| bad("bad length"))?).ok_or_else(|| bad("truncated section"))?;
        cur.set_position((p + len) as u64);
        sections.insert(name, payload);
    }
    if cur.position() as usize != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok((hash, sections))
}

/// Rebuilds a trainer from checkpoint bytes. The loss history is not stored.
pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
    let (hash, sections) = split_sections(bytes)?;
    let get = |name: &'static str| -> Result<Reader<'_>> {
        sections.get(name).map(|d| Reader::new(d, name)).ok_or_else(|| Error::Contract(format!("checkpoint lacks section {name}")))
    };
    let config_text = String::from_utf8(sections.get("config").ok_or_else(|| Error::Contract("checkpoint lacks config".into()))?.to_vec())
        .map_err(|_| Error::Contract("checkpoint config is not UTF-8".into()))?;
    let config = TrainConfig::parse(&config_text)?;
    if config.hash() != hash {
        return Err(Error::Contract("checkpoint config does not match its recorded hash".into()));
    }

    let mut r = get("meta")?;
    let warmup_done = r.usize()?;
    let main_done = r.usize()?;
    let skip_streak = r.usize()?;
    let skipped_total = r.usize()?;
    let affinity = match r.u64()? {
        0 => AffinityMode::Learned,
        1 => AffinityMode::Spatial,
        o => return Err(r.err(format!("unknown affinity mode {o}"))),
    };
    let spatial_scale = r.f64()?;
    let neighbors = r.usize()?;
    let nv = r.len(8)?;
    let train_views = (0..nv).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let ng = r.len(8)?;
    let mut groups_touched = BTreeSet::new();
    for _ in 0..ng {
        let s = r.str()?;
        let g = group_from_name(&s).ok_or_else(|| Error::Contract(format!("unknown parameter group {s}")))?;
        groups_touched.insert(g.name());
    }
    r.done()?;

    let mut r = get("cloud")?;
    let n = r.len(14 * 8)?;
    let mut gs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut v = [0.0; 14];
        for x in v.iter_mut() {
            *x = r.f64()?;
        }
        gs.push(Gaussian3D {
            mean: [v[0], v[1], v[2]],
            rotation: [v[3], v[4], v[5], v[6]],
            log_scale: [v[7], v[8], v[9]],
            opacity_logit: v[10],
            color: [v[11], v[12], v[13]],
        });
    }
    r.done()?;
    let cloud = GaussianCloud::from_gaussians(&gs);

    let mut r = get("nodes")?;
    let code_dim = r.usize()?;
    let flat = r.f64s()?;
    let codes = r.f64s()?;
    r.done()?;
    if flat.len() % 3 != 0 {
        return Err(Error::Contract("checkpoint node positions are not 3-vectors".into()));
    }
    let positions: Vec<[f64; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let nodes = ControlNodes::new(positions, codes, code_dim)?;

    let mut r = get("embedder")?;
    let out_dim = r.usize()?;
    let params = r.f64s()?;
    r.done()?;
    if params.len() != AffinityEmbedder::param_count(out_dim) {
        return Err(Error::Contract("checkpoint embedder size does not match its output dimension".into()));
    }
    let embedder = AffinityEmbedder { params, out_dim };

    let mut r = get("network")?;
    let ns = r.len(8)?;
    let mut shapes = Vec::with_capacity(ns);
    for _ in 0..ns {
        let name = r.str()?;
        let nd = r.len(8)?;
        let dims = (0..nd).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        shapes.push((name, dims));
    }
    let values = r.f64s()?;
    r.done()?;
    let net = NetParams { config: config.net.clone(), values };
    if net.shapes() != shapes || net.values.len() != NetParams::param_count(&config.net) {
        return Err(Error::Contract("checkpoint network shapes do not match the configuration".into()));
    }

    let mut r = get("skin")?;
    let skin = match r.u64()? {
        0 => None,
        _ => {
            let k = r.usize()?;
            let epoch = r.u64()?;
            let ni = r.len(8)?;
            let neighbor_idx = (0..ni).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let weights = r.f64s()?;
            if weights.len() != neighbor_idx.len() || k == 0 || ni != k * cloud.len() || neighbor_idx.iter().any(|&i| i >= nodes.len()) {
                return Err(Error::Contract("checkpoint skinning field is inconsistent".into()));
            }
            Some(SkinningField { k, neighbor_idx, weights, epoch })
        }
    };
    r.done()?;

    let model = Model { cloud, nodes, embedder, net, affinity, spatial_scale, neighbors, render: config.render, skin };

    let mut r = get("optimizer")?;
    let step = r.u64()?;
    let ng = r.len(8)?;
    let mut groups = BTreeMap::new();
    for _ in 0..ng {
        let name = r.str()?;
        let g = group_from_name(&name).ok_or_else(|| Error::Contract(format!("unknown optimizer group {name}")))?;
        let m = r.f64s()?;
        let v = r.f64s()?;
        if m.len() != v.len() || m.len() != model.group(g).len() {
            return Err(Error::Contract(format!("optimizer moments for {name} do not match the parameters")));
        }
        groups.insert(g.name(), Moments { m, v });
    }
    r.done()?;
    let adam = Adam { step, groups };

    let mut r = get("rng")?;
    let mut seed = [0u8; 32];
    r.cur.read_exact(&mut seed).map_err(|e| r.err(e))?;
    let stream = r.u64()?;
    let word_pos = r.cur.read_u128::<LE>().map_err(|e| r.err(e))?;
    r.done()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let cams = SceneFile::from_json(
        std::str::from_utf8(sections.get("cameras").ok_or_else(|| Error::Contract("checkpoint lacks cameras".into()))?)
            .map_err(|_| Error::Contract("checkpoint cameras are not UTF-8".into()))?,
        Path::new("<checkpoint>"),
    )?;

    let mut r = get("sampler")?;
    let nt = r.len(8)?;
    let timelines = (0..nt).map(|_| r.f64s()).collect::<Result<Vec<_>>>()?;
    let epoch = r.u64()?;
    let nq = r.len(16)?;
    let queue = (0..nq).map(|_| Ok((r.usize()?, r.usize()?))).collect::<Result<Vec<_>>>()?;
    r.done()?;
    if train_views.iter().any(|&v| v >= timelines.len()) {
        return Err(Error::Contract("checkpoint training views exceed the stored timelines".into()));
    }
    let mut sampler = GroupSampler::new(config.sampler.clone(), timelines, train_views.clone())?;
    sampler.restore(queue, epoch)?;

    let mut r = get("gradstats")?;
    let steps = r.u64()?;
    let grad_norm_sum = r.f64s()?;
    r.done()?;

    Ok(Trainer {
        config,
        model,
        adam,
        rng,
        sampler,
        grad_stats: NodeGradStats { grad_norm_sum, steps },
        warmup_done,
        main_done,
        skip_streak,
        skipped_total,
        cameras: cams.cameras,
        train_views,
        groups_touched,
        history: Vec::new(),
    })
}

pub fn load(path: &Path) -> Result<Trainer> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::Dataset;
    use crate::synth::{generate_scene, write_dataset, InitNoise, Preset, RigConfig};

    fn setup() -> (tempfile::TempDir, Dataset, TrainConfig) {
        let dir = tempfile::tempdir().unwrap();
        let rig = RigConfig { resolution: [24, 24], focal: 34.0, frame_count: 8, ..RigConfig::default() };
        let script = generate_scene(Preset::Oscillator, 2, &rig).unwrap();
        write_dataset(&script, dir.path(), 2, &InitNoise::default()).unwrap();
        let data = Dataset::load(dir.path()).unwrap();
        let mut c = TrainConfig::default();
        c.warmup_iters = 2;
        c.main_iters = 9;
        c.nodes = 8;
        c.net = crate::deformer::NetConfig { layers: 3, width: 16, attn_layers: vec![1], heads: 2, ..Default::default() };
        c.sampler.window = 4;
        c.lifecycle_every = 3;
        c.lifecycle_start = 3;
        c.rebuild_every = 4;
        c.lifecycle.densify_threshold = 0.0;
        (dir, data, c)
    }

    #[test]
    fn bytes_roundtrip_preserves_state() {
        let (_d, data, c) = setup();
        let mut t = Trainer::new(c, &data).unwrap();
        t.run(&data, Some(5), |_, _| Ok(())).unwrap();
        let back = from_bytes(&to_bytes(&t)).unwrap();
        assert_eq!(back.model, t.model);
        assert_eq!(back.adam, t.adam);
        assert_eq!(back.rng, t.rng);
        assert_eq!(back.sampler.queue(), t.sampler.queue());
        assert_eq!(back.grad_stats, t.grad_stats);
        assert_eq!(back.cameras, t.cameras);
        assert_eq!(to_bytes(&back), to_bytes(&t));
    }

    #[test]
    fn resume_matches_uninterrupted_run_at_any_split() {
        let (dir, data, c) = setup();
        let mut full = Trainer::new(c.clone(), &data).unwrap();
        full.run(&data, None, |_, _| Ok(())).unwrap();
        let reference: Vec<String> = full.history.iter().map(|r| r.deterministic_part()).collect();
        for split in [1, 2, 5, 7] {
            let mut a = Trainer::new(c.clone(), &data).unwrap();
            a.run(&data, Some(split), |_, _| Ok(())).unwrap();
            let path = dir.path().join("ckpt.bin");
            save(&a, &path).unwrap();
            let mut b = load(&path).unwrap();
            b.run(&data, None, |_, _| Ok(())).unwrap();
            let tail: Vec<String> = b.history.iter().map(|r| r.deterministic_part()).collect();
            assert_eq!(tail, reference[split..], "split {split}");
            assert_eq!(b.model, full.model);
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let (_d, data, c) = setup();
        let t = Trainer::new(c, &data).unwrap();
        let bytes = to_bytes(&t);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut bad = bytes.clone();
        bad[10] ^= 1; // inside the config hash
        assert!(from_bytes(&bad).is_err());
    }
}
