//! Decoupled control nodes: learned Gaussian-to-node affinity, top-K softmax
//! skinning, deformation propagation and the densify/prune lifecycle.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::deformer::DeformWindow;
use crate::error::{Error, Result};
use crate::quat::{self, Quat};
use crate::scene::{GaussianCloud, GaussianGrad};

/// Width of the embedder's hidden layer.
pub const EMBED_HIDDEN: usize = 32;
/// Gaussian canonical parameters fed to the embedder: mean (3), rotation (4), log-scale (3).
pub const EMBED_INPUT: usize = 10;

/// Control nodes stored as positions plus a flat `M × code_dim` code matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlNodes {
    pub positions: Vec<[f64; 3]>,
    pub codes: Vec<f64>,
    pub code_dim: usize,
}

impl ControlNodes {
    pub fn new(positions: Vec<[f64; 3]>, codes: Vec<f64>, code_dim: usize) -> Result<Self> {
        if codes.len() != positions.len() * code_dim {
            return Err(Error::Contract(format!(
                "{} codes values for {} nodes of dimension {code_dim}",
                codes.len(),
                positions.len()
            )));
        }
        Ok(Self { positions, codes, code_dim })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn code(&self, i: usize) -> &[f64] {
        &self.codes[i * self.code_dim..(i + 1) * self.code_dim]
    }

    /// Keeps rows in the order given by `rows` (indices into the current node list).
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let mut codes = Vec::with_capacity(rows.len() * self.code_dim);
        for &r in rows {
            codes.extend_from_slice(self.code(r));
        }
        Self { positions: rows.iter().map(|&r| self.positions[r]).collect(), codes, code_dim: self.code_dim }
    }
}

/// Canonical parameter vector φ_j = (x_j, q_j, s_j) of one Gaussian.
pub fn canonical_features(cloud: &GaussianCloud, j: usize) -> [f64; EMBED_INPUT] {
    let m = cloud.means[j];
    let q = cloud.rotations[j];
    let s = cloud.log_scales[j];
    [m[0], m[1], m[2], q[0], q[1], q[2], q[3], s[0], s[1], s[2]]
}

/// Two-layer perceptron mapping φ_j ∈ R¹⁰ to the node-code space R^D.
///
/// Parameter layout (row-major): `w1: H×10`, `b1: H`, `w2: D×H`, `b2: D` with `H = 32`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityEmbedder {
    pub params: Vec<f64>,
    pub out_dim: usize,
}

impl AffinityEmbedder {
    pub fn param_count(out_dim: usize) -> usize {
        EMBED_HIDDEN * EMBED_INPUT + EMBED_HIDDEN + out_dim * EMBED_HIDDEN + out_dim
    }

    pub fn zeros(out_dim: usize) -> Self {
        Self { params: vec![0.0; Self::param_count(out_dim)], out_dim }
    }

    /// Fully random (He-normal) initialization.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, rng: &mut R) -> Self {
        let mut e = Self::zeros(out_dim);
        let s1 = (2.0 / EMBED_INPUT as f64).sqrt();
        let s2 = (1.0 / EMBED_HIDDEN as f64).sqrt();
        let (w1, _, w2, _) = e.split_mut();
        w1.iter_mut().for_each(|v| *v = s1 * rng.sample::<f64, _>(StandardNormal));
        w2.iter_mut().for_each(|v| *v = s2 * rng.sample::<f64, _>(StandardNormal));
        e
    }

    /// Initialization whose output starts as `scale · x_j` in the first three code
    /// dimensions (exactly, through ReLU(a) − ReLU(−a) = a) plus a small random
    /// dependence on the full φ_j. Code distances then begin as scaled spatial distances.
    pub fn position_seeded<R: Rng + ?Sized>(out_dim: usize, scale: f64, rng: &mut R) -> Self {
        assert!(out_dim >= 3, "code dimension must be at least 3");
        let mut e = Self::zeros(out_dim);
        let (w1, _, w2, _) = e.split_mut();
        for axis in 0..3 {
            w1[axis * EMBED_INPUT + axis] = scale;
            w1[(axis + 3) * EMBED_INPUT + axis] = -scale;
            w2[axis * EMBED_HIDDEN + axis] = 1.0;
            w2[axis * EMBED_HIDDEN + axis + 3] = -1.0;
        }
        let s1 = (2.0 / EMBED_INPUT as f64).sqrt();
        for h in 6..EMBED_HIDDEN {
            for k in 0..EMBED_INPUT {
                w1[h * EMBED_INPUT + k] = s1 * rng.sample::<f64, _>(StandardNormal);
            }
            for d in 0..out_dim {
                w2[d * EMBED_HIDDEN + h] = 0.01 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        e
    }

    fn split(&self) -> (&[f64], &[f64], &[f64], &[f64]) {
        let (w1, rest) = self.params.split_at(EMBED_HIDDEN * EMBED_INPUT);
        let (b1, rest) = rest.split_at(EMBED_HIDDEN);
        let (w2, b2) = rest.split_at(self.out_dim * EMBED_HIDDEN);
        (w1, b1, w2, b2)
    }

    fn split_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64], &mut [f64]) {
        let (w1, rest) = self.params.split_at_mut(EMBED_HIDDEN * EMBED_INPUT);
        let (b1, rest) = rest.split_at_mut(EMBED_HIDDEN);
        let (w2, b2) = rest.split_at_mut(self.out_dim * EMBED_HIDDEN);
        (w1, b1, w2, b2)
    }

    /// Returns the embedding and the post-ReLU hidden activations.
    pub fn forward(&self, phi: &[f64; EMBED_INPUT]) -> (Vec<f64>, [f64; EMBED_HIDDEN]) {
        let (w1, b1, w2, b2) = self.split();
        let mut h = [0.0; EMBED_HIDDEN];
        for (r, hv) in h.iter_mut().enumerate() {
            let row = &w1[r * EMBED_INPUT..(r + 1) * EMBED_INPUT];
            let z = b1[r] + row.iter().zip(phi).map(|(a, b)| a * b).sum::<f64>();
            *hv = z.max(0.0);
        }
        let mut e = b2.to_vec();
        for (d, ev) in e.iter_mut().enumerate() {
            let row = &w2[d * EMBED_HIDDEN..(d + 1) * EMBED_HIDDEN];
            *ev += row.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>();
        }
        (e, h)
    }

    pub fn embed(&self, phi: &[f64; EMBED_INPUT]) -> Vec<f64> {
        self.forward(phi).0
    }

    /// Accumulates parameter gradients into `grad` and returns dL/dφ.
    pub fn backward(&self, phi: &[f64; EMBED_INPUT], hidden: &[f64; EMBED_HIDDEN], d_embed: &[f64], grad: &mut [f64]) -> [f64; EMBED_INPUT] {
        let (w1, _, w2, _) = self.split();
        let (gw1, rest) = grad.split_at_mut(EMBED_HIDDEN * EMBED_INPUT);
        let (gb1, rest) = rest.split_at_mut(EMBED_HIDDEN);
        let (gw2, gb2) = rest.split_at_mut(self.out_dim * EMBED_HIDDEN);
        let mut dh = [0.0; EMBED_HIDDEN];
        for d in 0..self.out_dim {
            let g = d_embed[d];
            if g == 0.0 {
                continue;
            }
            gb2[d] += g;
            for r in 0..EMBED_HIDDEN {
                gw2[d * EMBED_HIDDEN + r] += g * hidden[r];
                dh[r] += g * w2[d * EMBED_HIDDEN + r];
            }
        }
        let mut dphi = [0.0; EMBED_INPUT];
        for r in 0..EMBED_HIDDEN {
            if hidden[r] <= 0.0 {
                continue;
            }
            let g = dh[r];
            gb1[r] += g;
            for k in 0..EMBED_INPUT {
                gw1[r * EMBED_INPUT + k] += g * phi[k];
                dphi[k] += g * w1[r * EMBED_INPUT + k];
            }
        }
        dphi
    }
}

/// How Gaussian-to-node distances are measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// 𝒟 = ‖embed(φ_j) − f_i‖² (decoupled nodes).
    Learned,
    /// 𝒟 = scale²·‖x_j − p_i‖² (position-only k-NN baseline).
    Spatial,
}

impl std::str::FromStr for AffinityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(AffinityMode::Learned),
            "spatial" => Ok(AffinityMode::Spatial),
            other => Err(Error::Config(format!("unknown affinity mode {other:?} (expected learned|spatial)"))),
        }
    }
}

/// Everything the affinity depends on, borrowed from the model.
#[derive(Debug, Clone, Copy)]
pub struct AffinityParams<'a> {
    pub mode: AffinityMode,
    pub nodes: &'a ControlNodes,
    pub embedder: &'a AffinityEmbedder,
    /// Inverse length scale used by [`AffinityMode::Spatial`].
    pub spatial_scale: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Learned affinity score 𝒟(g_j, n_i) = ‖embed(φ_j) − f_i‖².
pub fn affinity_score(phi: &[f64; EMBED_INPUT], code: &[f64], embedder: &AffinityEmbedder) -> Result<f64> {
    if code.len() != embedder.out_dim {
        return Err(Error::Contract(format!("embedder emits {} dims but node code has {}", embedder.out_dim, code.len())));
    }
    Ok(squared_distance(&embedder.embed(phi), code))
}

/// Per-Gaussian top-K node indices and softmax weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SkinningField {
    pub k: usize,
    /// `N × K`, ascending 𝒟 per row.
    pub neighbor_idx: Vec<usize>,
    /// `N × K`, rows sum to 1.
    pub weights: Vec<f64>,
    /// Iteration at which the field was last rebuilt.
    pub epoch: u64,
}

impl SkinningField {
    pub fn len(&self) -> usize {
        self.neighbor_idx.len() / self.k.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_idx.is_empty()
    }

    pub fn row(&self, j: usize) -> (&[usize], &[f64]) {
        (&self.neighbor_idx[j * self.k..(j + 1) * self.k], &self.weights[j * self.k..(j + 1) * self.k])
    }

    /// Σ_j w_ij for every node.
    pub fn node_influence(&self, node_count: usize) -> Vec<f64> {
        let mut inf = vec![0.0; node_count];
        for (i, w) in self.neighbor_idx.iter().zip(&self.weights) {
            inf[*i] += w;
        }
        inf
    }
}

/// Softmax of −𝒟 over one row (temperature 1).
pub fn softmax_neg(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = scores.iter().map(|s| (-(s - lo)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

fn all_scores(cloud: &GaussianCloud, j: usize, p: &AffinityParams, emb: Option<&[f64]>) -> Vec<f64> {
    match p.mode {
        AffinityMode::Learned => {
            let e = emb.expect("embedding provided");
            (0..p.nodes.len()).map(|i| squared_distance(e, p.nodes.code(i))).collect()
        }
        AffinityMode::Spatial => {
            let s2 = p.spatial_scale * p.spatial_scale;
            (0..p.nodes.len()).map(|i| s2 * squared_distance(&cloud.means[j], &p.nodes.positions[i])).collect()
        }
    }
}

/// Selects the K lowest-𝒟 nodes per Gaussian (ties → lower node index) and their weights.
pub fn build_skinning(cloud: &GaussianCloud, p: &AffinityParams, k: usize, epoch: u64) -> Result<SkinningField> {
    if k == 0 || p.nodes.len() < k {
        return Err(Error::Config(format!("skinning needs at least K = {k} nodes, have {}", p.nodes.len())));
    }
    if p.mode == AffinityMode::Learned && p.embedder.out_dim != p.nodes.code_dim {
        return Err(Error::Contract("embedder output dimension differs from node code dimension".into()));
    }
    let n = cloud.len();
    let mut neighbor_idx = Vec::with_capacity(n * k);
    let mut weights = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(p.nodes.len());
    for j in 0..n {
        let emb = (p.mode == AffinityMode::Learned).then(|| p.embedder.embed(&canonical_features(cloud, j)));
        let scores = all_scores(cloud, j, p, emb.as_deref());
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NumericalDomain(format!("gaussian {j}: non-finite affinity score")));
        }
        order.clear();
        order.extend(0..p.nodes.len());
        let cmp = |a: &usize, b: &usize| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b));
        order.select_nth_unstable_by(k - 1, cmp);
        order[..k].sort_by(cmp);
        let row: Vec<f64> = order[..k].iter().map(|&i| scores[i]).collect();
        neighbor_idx.extend_from_slice(&order[..k]);
        weights.extend(softmax_neg(&row));
    }
    Ok(SkinningField { k, neighbor_idx, weights, epoch })
}

/// Forward record of [`skin_weights`].
#[derive(Debug, Clone)]
pub struct WeightsTape {
    embeddings: Vec<Vec<f64>>,
    hidden: Vec<[f64; EMBED_HIDDEN]>,
    weights: Vec<f64>,
}

impl WeightsTape {
    /// On/off state of every embedder hidden unit.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.hidden.iter().flat_map(|h| h.iter().map(|v| *v > 0.0)).collect()
    }
}

/// Recomputes differentiable weights for a fixed neighbour selection.
pub fn skin_weights(cloud: &GaussianCloud, p: &AffinityParams, skin: &SkinningField) -> (Vec<f64>, WeightsTape) {
    let k = skin.k;
    let n = cloud.len();
    let mut weights = Vec::with_capacity(n * k);
    let mut embeddings = Vec::new();
    let mut hidden = Vec::new();
    for j in 0..n {
        let (idx, _) = skin.row(j);
        let scores: Vec<f64> = match p.mode {
            AffinityMode::Learned => {
                let (e, h) = p.embedder.forward(&canonical_features(cloud, j));
                let s = idx.iter().map(|&i| squared_distance(&e, p.nodes.code(i))).collect();
                embeddings.push(e);
                hidden.push(h);
                s
            }
            AffinityMode::Spatial => {
                let s2 = p.spatial_scale * p.spatial_scale;
                idx.iter().map(|&i| s2 * squared_distance(&cloud.means[j], &p.nodes.positions[i])).collect()
            }
        };
        weights.extend(softmax_neg(&scores));
    }
    let tape = WeightsTape { embeddings, hidden, weights: weights.clone() };
    (weights, tape)
}

/// Gradients produced by [`skin_weights_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityGrad {
    pub embedder: Vec<f64>,
    pub codes: Vec<f64>,
    pub node_positions: Vec<[f64; 3]>,
    /// dL/dφ mapped onto mean, rotation and log-scale.
    pub cloud: Vec<GaussianGrad>,
}

pub fn skin_weights_backward(
    cloud: &GaussianCloud,
    p: &AffinityParams,
    skin: &SkinningField,
    tape: &WeightsTape,
    d_weights: &[f64],
) -> AffinityGrad {
    let k = skin.k;
    let mut out = AffinityGrad {
        embedder: vec![0.0; p.embedder.params.len()],
        codes: vec![0.0; p.nodes.codes.len()],
        node_positions: vec![[0.0; 3]; p.nodes.len()],
        cloud: vec![GaussianGrad::default(); cloud.len()],
    };
    let dim = p.nodes.code_dim;
    for j in 0..cloud.len() {
        let (idx, _) = skin.row(j);
        let w = &tape.weights[j * k..(j + 1) * k];
        let gw = &d_weights[j * k..(j + 1) * k];
        let mean_g: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
        // w = softmax(−𝒟) ⇒ dL/d𝒟_k = −w_k (g_k − Σ w g)
        let d_score: Vec<f64> = (0..k).map(|c| -w[c] * (gw[c] - mean_g)).collect();
        match p.mode {
            AffinityMode::Learned => {
                let e = &tape.embeddings[j];
                let mut de = vec![0.0; dim];
                for (c, &i) in idx.iter().enumerate() {
                    let code = p.nodes.code(i);
                    for d in 0..dim {
                        let g = 2.0 * (e[d] - code[d]) * d_score[c];
                        de[d] += g;
                        out.codes[i * dim + d] -= g;
                    }
                }
                let phi = canonical_features(cloud, j);
                let dphi = p.embedder.backward(&phi, &tape.hidden[j], &de, &mut out.embedder);
                let g = &mut out.cloud[j];
                g.mean = [dphi[0], dphi[1], dphi[2]];
                g.rotation = [dphi[3], dphi[4], dphi[5], dphi[6]];
                g.log_scale = [dphi[7], dphi[8], dphi[9]];
            }
            AffinityMode::Spatial => {
                let s2 = p.spatial_scale * p.spatial_scale;
                let x = cloud.means[j];
                for (c, &i) in idx.iter().enumerate() {
                    let pi = p.nodes.positions[i];
                    for a in 0..3 {
                        let g = 2.0 * s2 * (x[a] - pi[a]) * d_score[c];
                        out.cloud[j].mean[a] += g;
                        out.node_positions[i][a] -= g;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Propagation

/// Per-Gaussian state of one propagated slot.
#[derive(Debug, Clone)]
pub struct PropagateTape {
    slot: usize,
    /// Sign applied to each neighbour's Δq (alignment with the first neighbour).
    signs: Vec<f64>,
    blend_hat: Vec<Quat>,
    blend_norm: Vec<f64>,
}

/// Deformed cloud for one slot of a window: Δx = Σ w Δp, Δlog s = Σ w Δs, and the
/// sign-aligned normalized quaternion blend left-multiplied onto the canonical rotation.
pub fn propagate(
    skin: &SkinningField,
    weights: &[f64],
    window: &DeformWindow,
    slot: usize,
    cloud: &GaussianCloud,
) -> Result<(GaussianCloud, PropagateTape)> {
    let k = skin.k;
    let n = cloud.len();
    let mut out = cloud.clone();
    let mut signs = Vec::with_capacity(n * k);
    let mut blend_hat = Vec::with_capacity(n);
    let mut blend_norm = Vec::with_capacity(n);
    for j in 0..n {
        let (idx, _) = skin.row(j);
        let w = &weights[j * k..(j + 1) * k];
        let mut dx = [0.0; 3];
        let mut ds = [0.0; 3];
        let mut qb = [0.0; 4];
        let q0 = window.dq(idx[0], slot);
        for (c, &i) in idx.iter().enumerate() {
            if i >= window.nodes {
                return Err(Error::Contract(format!("gaussian {j} references node {i}, window has {}", window.nodes)));
            }
            let dp = window.dp(i, slot);
            let dsc = window.ds(i, slot);
            let dq = window.dq(i, slot);
            if !(dp.iter().chain(dsc.iter()).chain(dq.iter()).all(|v| v.is_finite())) {
                return Err(Error::NumericalDomain(format!("node {i}: non-finite deformation at frame {slot}")));
            }
            for a in 0..3 {
                dx[a] += w[c] * dp[a];
                ds[a] += w[c] * dsc[a];
            }
            let sgn = if quat::dot(&dq, &q0) < 0.0 { -1.0 } else { 1.0 };
            signs.push(sgn);
            for a in 0..4 {
                qb[a] += w[c] * sgn * dq[a];
            }
        }
        let (q_hat, q_norm) = quat::normalize(&qb);
        for a in 0..3 {
            out.means[j][a] = cloud.means[j][a] + dx[a];
            out.log_scales[j][a] = cloud.log_scales[j][a] + ds[a];
        }
        out.rotations[j] = quat::mul(&q_hat, &cloud.rotations[j]);
        blend_hat.push(q_hat);
        blend_norm.push(q_norm);
    }
    Ok((out, PropagateTape { slot, signs, blend_hat, blend_norm }))
}

/// Gradients of one propagated slot.
#[derive(Debug, Clone)]
pub struct PropagateGrad {
    pub cloud: Vec<GaussianGrad>,
    /// `N × K`
    pub weights: Vec<f64>,
}

/// Reverse pass of [`propagate`]. Node deformation gradients are accumulated into
/// `window_grad` (laid out like the window).
pub fn propagate_backward(
    skin: &SkinningField,
    weights: &[f64],
    window: &DeformWindow,
    cloud: &GaussianCloud,
    tape: &PropagateTape,
    d_deformed: &[GaussianGrad],
    window_grad: &mut DeformWindow,
) -> PropagateGrad {
    let k = skin.k;
    let slot = tape.slot;
    let mut out = PropagateGrad { cloud: vec![GaussianGrad::default(); cloud.len()], weights: vec![0.0; cloud.len() * k] };
    for j in 0..cloud.len() {
        let g = &d_deformed[j];
        let (idx, _) = skin.row(j);
        let w = &weights[j * k..(j + 1) * k];
        let (d_blend_hat, d_qj) = quat::mul_backward(&tape.blend_hat[j], &cloud.rotations[j], &g.rotation);
        let d_blend = quat::normalize_backward(&tape.blend_hat[j], tape.blend_norm[j], &d_blend_hat);
        let og = &mut out.cloud[j];
        og.mean = g.mean;
        og.log_scale = g.log_scale;
        og.rotation = d_qj;
        og.opacity_logit = g.opacity_logit;
        og.color = g.color;
        for (c, &i) in idx.iter().enumerate() {
            let sgn = tape.signs[j * k + c];
            let dp = window.dp(i, slot);
            let ds = window.ds(i, slot);
            let dq = window.dq(i, slot);
            let r = window_grad.index(i, slot);
            let mut dw = 0.0;
            for a in 0..3 {
                dw += dp[a] * g.mean[a] + ds[a] * g.log_scale[a];
                window_grad.delta_p[r][a] += w[c] * g.mean[a];
                window_grad.delta_s[r][a] += w[c] * g.log_scale[a];
            }
            for a in 0..4 {
                dw += sgn * dq[a] * d_blend[a];
                window_grad.delta_q[r][a] += w[c] * sgn * d_blend[a];
            }
            out.weights[j * k + c] = dw;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Initialization and lifecycle

/// Farthest-point sampling over `points`, starting from index 0. Returns at most `m` indices.
pub fn farthest_point_sampling(points: &[[f64; 3]], m: usize) -> Vec<usize> {
    let m = m.min(points.len());
    if m == 0 {
        return vec![];
    }
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = points.iter().map(|p| squared_distance(p, &points[0])).collect();
    while chosen.len() < m {
        let mut best = 0;
        for (i, d) in dist.iter().enumerate() {
            if *d > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            dist[i] = dist[i].min(squared_distance(p, &points[best]));
        }
    }
    chosen
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nearest_distance(points: &[[f64; 3]]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != i)
                .map(|(_, q)| squared_distance(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum();
    total / points.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifecycleConfig {
    /// Clone a node when its mean positional-gradient norm over the interval exceeds this.
    pub densify_threshold: f64,
    /// Remove a node when Σ_j w_ij falls below this.
    pub prune_threshold: f64,
    /// Clone jitter std as a fraction of the scene extent.
    pub position_jitter: f64,
    pub code_jitter: f64,
    pub max_nodes: usize,
}

impl Default for LifecycleConfig {
    fn default() -> Self {
        Self { densify_threshold: 2e-4, prune_threshold: 0.05, position_jitter: 0.01, code_jitter: 0.01, max_nodes: 4096 }
    }
}

/// Per-node statistics gathered between lifecycle steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NodeGradStats {
    pub grad_norm_sum: Vec<f64>,
    pub steps: u64,
}

impl NodeGradStats {
    pub fn new(nodes: usize) -> Self {
        Self { grad_norm_sum: vec![0.0; nodes], steps: 0 }
    }

    pub fn accumulate(&mut self, grads: &[[f64; 3]]) {
        if self.grad_norm_sum.len() != grads.len() {
            self.grad_norm_sum.resize(grads.len(), 0.0);
        }
        for (s, g) in self.grad_norm_sum.iter_mut().zip(grads) {
            *s += (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        }
        self.steps += 1;
    }

    pub fn mean(&self, i: usize) -> f64 {
        if self.steps == 0 {
            0.0
        } else {
            self.grad_norm_sum[i] / self.steps as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleOutcome {
    pub nodes: ControlNodes,
    /// For every row of the new node list, the old row it was derived from.
    pub source_rows: Vec<usize>,
    pub cloned: usize,
    pub pruned: usize,
    /// True when membership changed and the skinning field must be rebuilt.
    pub rebuild: bool,
}

/// One densify/prune pass.
pub fn lifecycle_step<R: Rng + ?Sized>(
    nodes: &ControlNodes,
    skin: &SkinningField,
    stats: &NodeGradStats,
    scene_extent: f64,
    cfg: &LifecycleConfig,
    rng: &mut R,
) -> LifecycleOutcome {
    let m = nodes.len();
    let influence = skin.node_influence(m);
    let mut keep: Vec<usize> = (0..m).filter(|&i| influence[i] >= cfg.prune_threshold).collect();
    if keep.len() < skin.k {
        log::warn!("lifecycle: pruning would leave {} nodes (< K = {}); keeping all", keep.len(), skin.k);
        keep = (0..m).collect();
    }
    let pruned = m - keep.len();
    let mut source_rows = keep.clone();
    let mut positions: Vec<[f64; 3]> = keep.iter().map(|&i| nodes.positions[i]).collect();
    let mut codes: Vec<f64> = keep.iter().flat_map(|&i| nodes.code(i).to_vec()).collect();
    let pos_noise = Normal::new(0.0, (cfg.position_jitter * scene_extent).max(0.0)).expect("finite std");
    let code_noise = Normal::new(0.0, cfg.code_jitter.max(0.0)).expect("finite std");
    let mut cloned = 0;
    for i in 0..m {
        if positions.len() >= cfg.max_nodes {
            break;
        }
        if stats.mean(i) > cfg.densify_threshold && influence[i] >= cfg.prune_threshold {
            let p = nodes.positions[i];
            positions.push([p[0] + pos_noise.sample(rng), p[1] + pos_noise.sample(rng), p[2] + pos_noise.sample(rng)]);
            codes.extend(nodes.code(i).iter().map(|c| c + code_noise.sample(rng)));
            source_rows.push(i);
            cloned += 1;
        }
    }
    LifecycleOutcome {
        nodes: ControlNodes { positions, codes, code_dim: nodes.code_dim },
        source_rows,
        cloned,
        pruned,
        rebuild: cloned > 0 || pruned > 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Gaussian3D;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud_of(means: &[[f64; 3]]) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            &means
                .iter()
                .map(|&m| Gaussian3D { mean: m, rotation: quat::IDENTITY, log_scale: [-2.0; 3], opacity_logit: 1.0, color: [0.5; 3] })
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn affinity_zero_and_unit() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let emb = AffinityEmbedder::random(4, &mut rng);
        let phi = [0.1, 0.2, 0.3, 1.0, 0.0, 0.0, 0.0, -2.0, -2.0, -2.0];
        let e = emb.embed(&phi);
        assert_eq!(affinity_score(&phi, &e, &emb).unwrap(), 0.0);
        let mut off = e.clone();
        off[0] -= 1.0;
        assert!((affinity_score(&phi, &off, &emb).unwrap() - 1.0).abs() < 1e-12);
        assert!(affinity_score(&phi, &[0.0; 3], &emb).is_err());
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_neg(&[0.7, 0.7, 0.7]);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let w = softmax_neg(&[0.0, std::f64::consts::LN_2, std::f64::consts::LN_2]);
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15 && (w[2] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn skinning_needs_k_nodes() {
        let cloud = cloud_of(&[[0.0; 3]]);
        let nodes = ControlNodes::new(vec![[0.0; 3]; 2], vec![0.0; 2 * 3], 3).unwrap();
        let emb = AffinityEmbedder::zeros(3);
        let p = AffinityParams { mode: AffinityMode::Learned, nodes: &nodes, embedder: &emb, spatial_scale: 1.0 };
        assert!(matches!(build_skinning(&cloud, &p, 3, 0), Err(Error::Config(_))));
    }

    #[test]
    fn spatial_skinning_picks_nearest() {
        let cloud = cloud_of(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let nodes = ControlNodes::new(vec![[0.9, 0.0, 0.0], [0.1, 0.0, 0.0], [5.0, 0.0, 0.0], [-0.2, 0.0, 0.0]], vec![0.0; 12], 3).unwrap();
        let emb = AffinityEmbedder::zeros(3);
        let p = AffinityParams { mode: AffinityMode::Spatial, nodes: &nodes, embedder: &emb, spatial_scale: 1.0 };
        let skin = build_skinning(&cloud, &p, 2, 0).unwrap();
        assert_eq!(skin.row(0).0, &[1, 3]);
        assert_eq!(skin.row(1).0, &[0, 1]);
    }

    #[test]
    fn fps_spreads_points() {
        let pts = [[0.0, 0.0, 0.0], [0.1, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.0, 0.0]];
        assert_eq!(farthest_point_sampling(&pts, 3), vec![0, 2, 3]);
        assert_eq!(farthest_point_sampling(&pts, 10).len(), 4);
    }

    #[test]
    fn position_seeded_embedder_reproduces_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let emb = AffinityEmbedder::position_seeded(8, 5.0, &mut rng);
        let phi = [0.3, -0.2, 0.7, 1.0, 0.0, 0.0, 0.0, -2.0, -2.5, -3.0];
        let e = emb.embed(&phi);
        for a in 0..3 {
            assert!((e[a] - 5.0 * phi[a]).abs() < 0.2, "{e:?}");
        }
    }

    #[test]
    fn lifecycle_noop_below_thresholds() {
        let nodes = ControlNodes::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![0.0; 9], 3).unwrap();
        let skin = SkinningField { k: 3, neighbor_idx: vec![0, 1, 2, 0, 1, 2], weights: vec![0.4, 0.3, 0.3, 0.2, 0.4, 0.4], epoch: 0 };
        let stats = NodeGradStats { grad_norm_sum: vec![1e-5; 3], steps: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = lifecycle_step(&nodes, &skin, &stats, 1.0, &LifecycleConfig::default(), &mut rng);
        assert!(!out.rebuild);
        assert_eq!(out.nodes, nodes);
    }

    #[test]
    fn lifecycle_clones_hot_node_and_refuses_overpruning() {
        let nodes = ControlNodes::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![0.5; 9], 3).unwrap();
        let skin = SkinningField { k: 3, neighbor_idx: vec![0, 1, 2, 0, 1, 2], weights: vec![0.4, 0.3, 0.3, 0.2, 0.4, 0.4], epoch: 0 };
        let stats = NodeGradStats { grad_norm_sum: vec![0.0, 1.0, 0.0], steps: 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = lifecycle_step(&nodes, &skin, &stats, 1.0, &LifecycleConfig::default(), &mut rng);
        assert_eq!(out.nodes.len(), 4);
        assert_eq!(out.source_rows, vec![0, 1, 2, 1]);
        let c = out.nodes.positions[3];
        assert!(((c[0] - 1.0).powi(2) + c[1].powi(2) + c[2].powi(2)).sqrt() < 0.1);

        // every node has low influence, but pruning may not go below K
        let weak = SkinningField { k: 3, neighbor_idx: vec![0, 1, 2], weights: vec![0.01, 0.01, 0.98], epoch: 0 };
        let none = NodeGradStats::new(3);
        let out = lifecycle_step(&nodes, &weak, &none, 1.0, &LifecycleConfig::default(), &mut rng);
        assert_eq!(out.nodes.len(), 3);
        assert!(!out.rebuild);
    }
}
