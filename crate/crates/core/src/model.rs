//! The full dynamic model: canonical cloud, control nodes, affinity embedder and
//! deformation network, with the window forward pass and its reverse pass.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::control::{
    build_skinning, farthest_point_sampling, mean_nearest_distance, propagate, propagate_backward, skin_weights, skin_weights_backward,
    AffinityEmbedder, AffinityMode, AffinityParams, ControlNodes, PropagateTape, SkinningField, WeightsTape,
};
use crate::deformer::{self, DeformWindow, NetParams, NetTape};
use crate::error::{Error, Result};
use crate::img::Image;
use crate::render::{render_cloud, render_cloud_backward, CloudRenderTape, RenderSettings};
use crate::scene::{Camera, GaussianCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cloud: GaussianCloud,
    pub nodes: ControlNodes,
    pub embedder: AffinityEmbedder,
    pub net: NetParams,
    pub affinity: AffinityMode,
    /// Inverse length scale: spatial affinity is `(scale·‖x − p‖)²`.
    pub spatial_scale: f64,
    pub neighbors: usize,
    pub render: RenderSettings,
    /// Derived state, rebuilt on a cadence and never serialized.
    pub skin: Option<SkinningField>,
}

/// Learnable parameter groups; each has its own learning rate and optimizer state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Position,
    Rotation,
    Scale,
    Opacity,
    Color,
    NodePosition,
    NodeCode,
    Embedder,
    Network,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 9] = [
        ParamGroup::Position,
        ParamGroup::Rotation,
        ParamGroup::Scale,
        ParamGroup::Opacity,
        ParamGroup::Color,
        ParamGroup::NodePosition,
        ParamGroup::NodeCode,
        ParamGroup::Embedder,
        ParamGroup::Network,
    ];

    pub const GAUSSIAN: [ParamGroup; 5] = [ParamGroup::Position, ParamGroup::Rotation, ParamGroup::Scale, ParamGroup::Opacity, ParamGroup::Color];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Position => "position",
            ParamGroup::Rotation => "rotation",
            ParamGroup::Scale => "scale",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Color => "color",
            ParamGroup::NodePosition => "node_position",
            ParamGroup::NodeCode => "node_code",
            ParamGroup::Embedder => "embedder",
            ParamGroup::Network => "network",
        }
    }

    /// Values per row for groups whose rows follow Gaussians or nodes.
    pub fn row_len(self, code_dim: usize) -> usize {
        match self {
            ParamGroup::Position | ParamGroup::Scale | ParamGroup::Color | ParamGroup::NodePosition => 3,
            ParamGroup::Rotation => 4,
            ParamGroup::Opacity => 1,
            ParamGroup::NodeCode => code_dim,
            ParamGroup::Embedder | ParamGroup::Network => 1,
        }
    }
}

fn cloud_group(c: &GaussianCloud, g: ParamGroup) -> &[f64] {
    match g {
        ParamGroup::Position => c.means.as_flattened(),
        ParamGroup::Rotation => c.rotations.as_flattened(),
        ParamGroup::Scale => c.log_scales.as_flattened(),
        ParamGroup::Opacity => &c.opacity_logits,
        ParamGroup::Color => c.colors.as_flattened(),
        _ => unreachable!("not a Gaussian group"),
    }
}

fn cloud_group_mut(c: &mut GaussianCloud, g: ParamGroup) -> &mut [f64] {
    match g {
        ParamGroup::Position => c.means.as_flattened_mut(),
        ParamGroup::Rotation => c.rotations.as_flattened_mut(),
        ParamGroup::Scale => c.log_scales.as_flattened_mut(),
        ParamGroup::Opacity => &mut c.opacity_logits,
        ParamGroup::Color => c.colors.as_flattened_mut(),
        _ => unreachable!("not a Gaussian group"),
    }
}

/// Gradient of a scalar loss with respect to every learnable group.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub cloud: GaussianCloud,
    pub node_positions: Vec<[f64; 3]>,
    pub codes: Vec<f64>,
    pub embedder: Vec<f64>,
    pub net: Vec<f64>,
}

impl ModelGrad {
    pub fn zeros(model: &Model) -> Self {
        Self {
            cloud: GaussianCloud::zeros(model.cloud.len()),
            node_positions: vec![[0.0; 3]; model.nodes.len()],
            codes: vec![0.0; model.nodes.codes.len()],
            embedder: vec![0.0; model.embedder.params.len()],
            net: vec![0.0; model.net.values.len()],
        }
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::NodePosition => self.node_positions.as_flattened(),
            ParamGroup::NodeCode => &self.codes,
            ParamGroup::Embedder => &self.embedder,
            ParamGroup::Network => &self.net,
            _ => cloud_group(&self.cloud, g),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::NodePosition => self.node_positions.as_flattened_mut(),
            ParamGroup::NodeCode => &mut self.codes,
            ParamGroup::Embedder => &mut self.embedder,
            ParamGroup::Network => &mut self.net,
            _ => cloud_group_mut(&mut self.cloud, g),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cloud.is_finite()
            && self.node_positions.iter().flatten().all(|v| v.is_finite())
            && self.codes.iter().chain(&self.embedder).chain(&self.net).all(|v| v.is_finite())
    }
}

/// Everything recorded by [`Model::forward_window`].
#[derive(Debug, Clone)]
pub struct WindowForward {
    pub window: DeformWindow,
    net_tape: NetTape,
    weights: Vec<f64>,
    weights_tape: WeightsTape,
    /// Per slot: deformed cloud, propagation record and render record (only for rendered slots).
    slots: Vec<Option<SlotForward>>,
    pub images: Vec<Option<Image>>,
}

#[derive(Debug, Clone)]
struct SlotForward {
    deformed: GaussianCloud,
    prop: PropagateTape,
    render: CloudRenderTape,
}

impl WindowForward {
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut p = self.net_tape.activation_pattern();
        p.extend(self.weights_tape.activation_pattern());
        p
    }
}

impl Model {
    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::NodePosition => self.nodes.positions.as_flattened(),
            ParamGroup::NodeCode => &self.nodes.codes,
            ParamGroup::Embedder => &self.embedder.params,
            ParamGroup::Network => &self.net.values,
            _ => cloud_group(&self.cloud, g),
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::NodePosition => self.nodes.positions.as_flattened_mut(),
            ParamGroup::NodeCode => &mut self.nodes.codes,
            ParamGroup::Embedder => &mut self.embedder.params,
            ParamGroup::Network => &mut self.net.values,
            _ => cloud_group_mut(&mut self.cloud, g),
        }
    }

    pub fn affinity_params(&self) -> AffinityParams<'_> {
        AffinityParams { mode: self.affinity, nodes: &self.nodes, embedder: &self.embedder, spatial_scale: self.spatial_scale }
    }

    /// Places `count` nodes by farthest-point sampling over the canonical means and
    /// seeds codes and embedder so the initial affinity follows spatial proximity.
    pub fn init_nodes<R: Rng + ?Sized>(&mut self, count: usize, code_dim: usize, rng: &mut R) -> Result<()> {
        let picks = farthest_point_sampling(&self.cloud.means, count);
        if picks.len() < self.neighbors {
            return Err(Error::Config(format!("only {} nodes could be placed, need K = {}", picks.len(), self.neighbors)));
        }
        let positions: Vec<[f64; 3]> = picks.iter().map(|&j| self.cloud.means[j]).collect();
        let scale = 1.0 / mean_nearest_distance(&positions).max(1e-9);
        let mut codes = Vec::with_capacity(positions.len() * code_dim);
        for p in &positions {
            for d in 0..code_dim {
                let base = if d < 3 { scale * p[d] } else { 0.0 };
                codes.push(base + 0.01 * rng.sample::<f64, _>(StandardNormal));
            }
        }
        self.nodes = ControlNodes::new(positions, codes, code_dim)?;
        self.embedder = AffinityEmbedder::position_seeded(code_dim, scale, rng);
        self.spatial_scale = scale;
        self.skin = None;
        Ok(())
    }

    pub fn rebuild_skinning(&mut self, epoch: u64) -> Result<()> {
        let skin = build_skinning(&self.cloud, &self.affinity_params(), self.neighbors, epoch)?;
        self.skin = Some(skin);
        Ok(())
    }

    fn skin(&self) -> Result<&SkinningField> {
        self.skin.as_ref().ok_or_else(|| Error::Contract("skinning field has not been built".into()))
    }

    /// Runs the network for one window and renders the slots flagged in `render_slots`.
    pub fn forward_window(&self, cam: &Camera, timestamps: &[f64], mask: &[bool], render_slots: &[bool]) -> Result<WindowForward> {
        let skin = self.skin()?;
        if skin.len() != self.cloud.len() {
            return Err(Error::Contract(format!("skinning covers {} Gaussians, cloud has {}", skin.len(), self.cloud.len())));
        }
        let (window, net_tape) = deformer::forward(&self.nodes.positions, timestamps, mask, &self.net)?;
        let (weights, weights_tape) = skin_weights(&self.cloud, &self.affinity_params(), skin);
        let mut slots = Vec::with_capacity(timestamps.len());
        let mut images = Vec::with_capacity(timestamps.len());
        for (t, &wanted) in render_slots.iter().enumerate() {
            if !wanted {
                slots.push(None);
                images.push(None);
                continue;
            }
            let (deformed, prop) = propagate(skin, &weights, &window, t, &self.cloud)?;
            let (target, render) = render_cloud(&deformed, cam, &self.render)?;
            images.push(Some(target.image));
            slots.push(Some(SlotForward { deformed, prop, render }));
        }
        Ok(WindowForward { window, net_tape, weights, weights_tape, slots, images })
    }

    /// Reverse pass given dL/d(image) for each rendered slot.
    pub fn backward_window(&self, cam: &Camera, fwd: &WindowForward, image_grads: &[Option<Image>]) -> Result<ModelGrad> {
        let skin = self.skin()?;
        let mut grad = ModelGrad::zeros(self);
        let mut d_window = fwd.window.zeros_like();
        let mut d_weights = vec![0.0; fwd.weights.len()];
        for (t, slot) in fwd.slots.iter().enumerate() {
            let (Some(slot), Some(ig)) = (slot, image_grads.get(t).and_then(Option::as_ref)) else {
                continue;
            };
            let d_deformed = render_cloud_backward(&slot.deformed, cam, &slot.render, ig)?;
            let pg = propagate_backward(skin, &fwd.weights, &fwd.window, &self.cloud, &slot.prop, &d_deformed, &mut d_window);
            for (j, g) in pg.cloud.iter().enumerate() {
                grad.cloud.add_grad(j, g);
            }
            for (a, b) in d_weights.iter_mut().zip(&pg.weights) {
                *a += b;
            }
        }
        let ag = skin_weights_backward(&self.cloud, &self.affinity_params(), skin, &fwd.weights_tape, &d_weights);
        for (j, g) in ag.cloud.iter().enumerate() {
            grad.cloud.add_grad(j, g);
        }
        grad.codes = ag.codes;
        grad.embedder = ag.embedder;
        grad.node_positions = ag.node_positions;
        let ng = deformer::backward(&self.net, &fwd.window, &fwd.net_tape, &d_window);
        for (a, b) in grad.node_positions.iter_mut().zip(&ng.positions) {
            for k in 0..3 {
                a[k] += b[k];
            }
        }
        grad.net = ng.params;
        Ok(grad)
    }

    /// Renders the canonical (undeformed) cloud.
    pub fn render_canonical(&self, cam: &Camera) -> Result<(Image, CloudRenderTape)> {
        let (t, tape) = render_cloud(&self.cloud, cam, &self.render)?;
        Ok((t.image, tape))
    }

    /// Inference path: non-overlapping windows of `window` frames; a trailing partial
    /// window is padded with its last timestamp and the padding discarded.
    pub fn render_sequence(&self, cam: &Camera, times: &[f64], window: usize) -> Result<Vec<Image>> {
        if window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        let mut out = Vec::with_capacity(times.len());
        for chunk in times.chunks(window) {
            let mut ts = chunk.to_vec();
            let last = *ts.last().expect("non-empty chunk");
            ts.resize(window, last);
            let mut render_slots = vec![false; window];
            render_slots[..chunk.len()].iter_mut().for_each(|v| *v = true);
            let fwd = self.forward_window(cam, &ts, &vec![false; window], &render_slots)?;
            out.extend(fwd.images.into_iter().take(chunk.len()).map(|i| i.expect("rendered slot")));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deformer::NetConfig;
    use crate::synth::{generate_scene, Preset, RigConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> (Model, Camera) {
        let rig = RigConfig { resolution: [16, 16], focal: 22.0, frame_count: 3, ..RigConfig::default() };
        let s = generate_scene(Preset::Oscillator, 2, &rig).unwrap();
        let mut cloud = GaussianCloud::with_capacity(8);
        for j in 0..8 {
            cloud.push(s.cloud.get(j * 7));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = NetConfig { layers: 2, width: 8, attn_layers: vec![1], heads: 2, pos_freqs: 2, time_freqs: 2, ..NetConfig::default() };
        let mut m = Model {
            cloud,
            nodes: ControlNodes::new(vec![], vec![], 4).unwrap(),
            embedder: AffinityEmbedder::zeros(4),
            net: NetParams::init(&cfg, &mut rng).unwrap(),
            affinity: AffinityMode::Learned,
            spatial_scale: 1.0,
            neighbors: 3,
            render: RenderSettings::default(),
            skin: None,
        };
        m.init_nodes(4, 4, &mut rng).unwrap();
        m.rebuild_skinning(0).unwrap();
        (m, s.cameras[0].0.clone())
    }

    #[test]
    fn identity_network_renders_canonical_scene() {
        let (m, cam) = tiny_model();
        let (canon, _) = m.render_canonical(&cam).unwrap();
        let fwd = m.forward_window(&cam, &[0.0, 0.5, 1.0], &[false; 3], &[true; 3]).unwrap();
        for img in fwd.images.iter().flatten() {
            assert!(img.max_abs_diff(&canon) <= 1e-12);
        }
    }

    #[test]
    fn sequence_inference_uses_one_forward_per_window() {
        let (m, cam) = tiny_model();
        let times: Vec<f64> = (0..7).map(|i| i as f64 / 6.0).collect();
        let before = deformer::forward_calls();
        let imgs = m.render_sequence(&cam, &times, 3).unwrap();
        assert_eq!(imgs.len(), 7);
        assert_eq!(deformer::forward_calls() - before, 3);
    }
}
