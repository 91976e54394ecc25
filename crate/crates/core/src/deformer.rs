//! Multi-frame deformation network: sinusoidal input encoding, an MLP backbone
//! interleaved with per-node temporal self-attention and gated fusion, and three
//! linear heads decoding per-node, per-frame (Δp, Δq, Δs).
//!
//! Activations are row-major `(M·T) × C` matrices with node-major rows (`i·T + t`).
//! Matrices multiply on the right: `Y = X·W + b`.

use std::f64::consts::PI;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::quat::{self, Quat};
use crate::scene::sigmoid;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub layers: usize,
    pub width: usize,
    /// An attention block follows the MLP layer with each of these indices.
    pub attn_layers: Vec<usize>,
    pub heads: usize,
    pub pos_freqs: usize,
    pub time_freqs: usize,
    pub mask_ratio_max: f64,
    /// Initial bias of the gate half of the gate generator (σ(2) ≈ 0.88 keeps most of the stream).
    pub gate_bias_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: 8,
            width: 128,
            attn_layers: vec![2, 5],
            heads: 4,
            pos_freqs: 6,
            time_freqs: 4,
            mask_ratio_max: 1.0 / 3.0,
            gate_bias_init: 2.0,
        }
    }
}

impl NetConfig {
    pub fn input_channels(&self) -> usize {
        3 * 2 * self.pos_freqs + 2 * self.time_freqs
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.width == 0 {
            return Err(Error::Config("network needs at least one layer of nonzero width".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} not divisible by heads {}", self.width, self.heads)));
        }
        if let Some(l) = self.attn_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Config(format!("attention layer {l} outside [0, {})", self.layers)));
        }
        if !(0.0..1.0).contains(&self.mask_ratio_max) {
            return Err(Error::Config(format!("mask_ratio_max {} outside [0, 1)", self.mask_ratio_max)));
        }
        Ok(())
    }

    fn has_attention(&self, l: usize) -> bool {
        self.attn_layers.contains(&l)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnLayout {
    q: Dense,
    k: Dense,
    v: Dense,
    o: Dense,
    gate: Dense,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    mask: usize,
    mlp: Vec<Dense>,
    attn: Vec<Option<AttnLayout>>,
    head_p: Dense,
    head_q: Dense,
    head_s: Dense,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetConfig) -> Self {
        let mut off = 0;
        let mut dense = |rows: usize, cols: usize| {
            let d = Dense { w: off, b: off + rows * cols, rows, cols };
            off += rows * cols + cols;
            d
        };
        let w = cfg.width;
        let mask_len = 2 * cfg.time_freqs;
        let mask = 0;
        // reserve the mask vector first
        let _ = dense(0, mask_len);
        let mut mlp = Vec::new();
        let mut attn = Vec::new();
        for l in 0..cfg.layers {
            let input = if l == 0 { cfg.input_channels() } else { w };
            mlp.push(dense(input, w));
            attn.push(if cfg.has_attention(l) {
                Some(AttnLayout { q: dense(w, w), k: dense(w, w), v: dense(w, w), o: dense(w, w), gate: dense(w, 2 * w) })
            } else {
                None
            });
        }
        let head_p = dense(w, 3);
        let head_q = dense(w, 4);
        let head_s = dense(w, 3);
        Self { mask, mlp, attn, head_p, head_q, head_s, total: off }
    }
}

/// Flat parameter vector of the network together with its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub config: NetConfig,
    pub values: Vec<f64>,
}

/// Name and shape of each tensor in the flat layout, in storage order.
pub type TensorShapes = Vec<(String, Vec<usize>)>;

impl NetParams {
    pub fn param_count(cfg: &NetConfig) -> usize {
        Layout::new(cfg).total
    }

    /// Random backbone and attention weights, zero heads and zero mask vector.
    pub fn init<R: Rng + ?Sized>(cfg: &NetConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::new(cfg);
        let mut values = vec![0.0; layout.total];
        let mut fill = |d: &Dense, std: f64, values: &mut Vec<f64>| {
            for v in &mut values[d.w..d.w + d.rows * d.cols] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        for (l, d) in layout.mlp.iter().enumerate() {
            fill(d, (2.0 / d.rows as f64).sqrt(), &mut values);
            if let Some(a) = &layout.attn[l] {
                let std = (1.0 / cfg.width as f64).sqrt();
                for d in [&a.q, &a.k, &a.v, &a.o, &a.gate] {
                    fill(d, std, &mut values);
                }
                for v in &mut values[a.gate.b..a.gate.b + cfg.width] {
                    *v = cfg.gate_bias_init;
                }
            }
        }
        Ok(Self { config: cfg.clone(), values })
    }

    /// Overwrites the three output heads with small random weights (used by gradient checks).
    pub fn randomize_heads<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        let layout = Layout::new(&self.config);
        for d in [layout.head_p, layout.head_q, layout.head_s] {
            for v in &mut self.values[d.w..d.b + d.cols] {
                *v = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        for v in &mut self.values[layout.mask..layout.mask + 2 * self.config.time_freqs] {
            *v = std * rng.sample::<f64, _>(StandardNormal);
        }
    }

    pub fn shapes(&self) -> TensorShapes {
        let layout = Layout::new(&self.config);
        let mut out = vec![("mask".to_string(), vec![2 * self.config.time_freqs])];
        let mut push = |name: String, d: &Dense| {
            out.push((format!("{name}.weight"), vec![d.rows, d.cols]));
            out.push((format!("{name}.bias"), vec![d.cols]));
        };
        for (l, d) in layout.mlp.iter().enumerate() {
            push(format!("mlp{l}"), d);
            if let Some(a) = &layout.attn[l] {
                for (n, d) in [("q", &a.q), ("k", &a.k), ("v", &a.v), ("o", &a.o), ("gate", &a.gate)] {
                    push(format!("attn{l}.{n}"), d);
                }
            }
        }
        push("head_p".into(), &layout.head_p);
        push("head_q".into(), &layout.head_q);
        push("head_s".into(), &layout.head_s);
        out
    }
}

/// Per-node, per-frame deformations of one window. Row `i·T + t` holds node `i` at slot `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformWindow {
    pub nodes: usize,
    pub frames: usize,
    pub delta_p: Vec<[f64; 3]>,
    pub delta_q: Vec<Quat>,
    pub delta_s: Vec<[f64; 3]>,
    pub timestamps: Vec<f64>,
    pub mask_flags: Vec<bool>,
}

impl DeformWindow {
    pub fn identity(nodes: usize, timestamps: Vec<f64>, mask_flags: Vec<bool>) -> Self {
        let frames = timestamps.len();
        Self {
            nodes,
            frames,
            delta_p: vec![[0.0; 3]; nodes * frames],
            delta_q: vec![quat::IDENTITY; nodes * frames],
            delta_s: vec![[0.0; 3]; nodes * frames],
            timestamps,
            mask_flags,
        }
    }

    /// Same shape, all entries zero (used as a gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let n = self.nodes * self.frames;
        Self {
            nodes: self.nodes,
            frames: self.frames,
            delta_p: vec![[0.0; 3]; n],
            delta_q: vec![[0.0; 4]; n],
            delta_s: vec![[0.0; 3]; n],
            timestamps: self.timestamps.clone(),
            mask_flags: self.mask_flags.clone(),
        }
    }

    #[inline]
    pub fn index(&self, node: usize, slot: usize) -> usize {
        node * self.frames + slot
    }

    #[inline]
    pub fn dp(&self, node: usize, slot: usize) -> [f64; 3] {
        self.delta_p[self.index(node, slot)]
    }

    #[inline]
    pub fn dq(&self, node: usize, slot: usize) -> Quat {
        self.delta_q[self.index(node, slot)]
    }

    #[inline]
    pub fn ds(&self, node: usize, slot: usize) -> [f64; 3] {
        self.delta_s[self.index(node, slot)]
    }

    pub fn is_finite(&self) -> bool {
        self.delta_p.iter().flatten().chain(self.delta_q.iter().flatten()).chain(self.delta_s.iter().flatten()).all(|v| v.is_finite())
    }
}

fn push_sincos(out: &mut Vec<f64>, x: f64, freqs: usize) {
    for f in 0..freqs {
        let w = (1u64 << f) as f64 * PI;
        out.push((w * x).sin());
        out.push((w * x).cos());
    }
}

/// Builds the `(M·T) × C_in` input matrix.
pub fn encode_inputs(positions: &[[f64; 3]], timestamps: &[f64], mask_flags: &[bool], params: &NetParams) -> Result<Array2<f64>> {
    let cfg = &params.config;
    if mask_flags.len() != timestamps.len() {
        return Err(Error::Contract(format!("{} mask flags for {} timestamps", mask_flags.len(), timestamps.len())));
    }
    if let Some(t) = timestamps.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::Contract(format!("timestamp {t} outside [0, 1]")));
    }
    let c_in = cfg.input_channels();
    let t_len = timestamps.len();
    let mask = &params.values[..2 * cfg.time_freqs];
    let mut data = Vec::with_capacity(positions.len() * t_len * c_in);
    let mut pos_enc = Vec::with_capacity(6 * cfg.pos_freqs);
    for p in positions {
        pos_enc.clear();
        for &x in p {
            push_sincos(&mut pos_enc, x, cfg.pos_freqs);
        }
        for (t, &masked) in timestamps.iter().zip(mask_flags) {
            data.extend_from_slice(&pos_enc);
            if masked {
                data.extend_from_slice(mask);
            } else {
                push_sincos(&mut data, *t, cfg.time_freqs);
            }
        }
    }
    Ok(Array2::from_shape_vec((positions.len() * t_len, c_in), data).expect("encoding shape"))
}

fn weight<'a>(values: &'a [f64], d: &Dense) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((d.rows, d.cols), &values[d.w..d.w + d.rows * d.cols]).expect("weight shape")
}

fn bias<'a>(values: &'a [f64], d: &Dense) -> &'a [f64] {
    &values[d.b..d.b + d.cols]
}

fn affine(x: &ArrayView2<f64>, values: &[f64], d: &Dense) -> Array2<f64> {
    let mut y = x.dot(&weight(values, d));
    let b = bias(values, d);
    for mut row in y.rows_mut() {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += bv;
        }
    }
    y
}

/// Accumulates dW, db into `grad` and returns dX.
fn affine_backward(x: &ArrayView2<f64>, dy: &ArrayView2<f64>, values: &[f64], d: &Dense, grad: &mut [f64]) -> Array2<f64> {
    let dw = x.t().dot(dy);
    {
        let mut gw = ArrayViewMut2::from_shape((d.rows, d.cols), &mut grad[d.w..d.w + d.rows * d.cols]).expect("grad shape");
        gw += &dw;
    }
    let gb = &mut grad[d.b..d.b + d.cols];
    for row in dy.rows() {
        for (g, v) in gb.iter_mut().zip(row) {
            *g += v;
        }
    }
    dy.dot(&weight(values, d).t())
}

#[derive(Debug, Clone)]
struct AttnCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// `M × heads × T × T` row-softmaxed attention weights.
    probs: Vec<f64>,
    concat: Array2<f64>,
    h_attn: Array2<f64>,
    gate_sig: Array2<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Array2<f64>,
    output: Array2<f64>,
    attn: Option<AttnCache>,
}

/// Forward record needed by [`backward`].
#[derive(Debug, Clone)]
pub struct NetTape {
    positions: Vec<[f64; 3]>,
    mask_flags: Vec<bool>,
    layers: Vec<LayerCache>,
    last: Array2<f64>,
    q_norms: Vec<f64>,
}

impl NetTape {
    /// Attention probability rows of the first attention block (for inspection in tests).
    pub fn first_attention_probs(&self) -> Option<&[f64]> {
        self.layers.iter().find_map(|l| l.attn.as_ref().map(|a| a.probs.as_slice()))
    }

    /// On/off state of every ReLU unit; finite-difference checks use it to detect kink crossings.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.output.iter().map(|v| *v > 0.0)).collect()
    }
}

fn attention_forward(x: Array2<f64>, values: &[f64], a: &AttnLayout, nodes: usize, frames: usize, heads: usize) -> (Array2<f64>, AttnCache) {
    let w = x.ncols();
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = affine(&x.view(), values, &a.q);
    let k = affine(&x.view(), values, &a.k);
    let v = affine(&x.view(), values, &a.v);
    let mut concat = Array2::zeros((nodes * frames, w));
    let mut probs = vec![0.0; nodes * heads * frames * frames];
    for i in 0..nodes {
        let rows = i * frames..(i + 1) * frames;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![rows.clone(), cols.clone()]);
            let kh = k.slice(s![rows.clone(), cols.clone()]);
            let vh = v.slice(s![rows.clone(), cols.clone()]);
            let mut sc = qh.dot(&kh.t());
            sc *= scale;
            for mut row in sc.rows_mut() {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - mx).exp());
                let z = row.sum();
                row /= z;
            }
            let base = (i * heads + h) * frames * frames;
            probs[base..base + frames * frames].copy_from_slice(sc.as_slice().expect("contiguous"));
            concat.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vh));
        }
    }
    let h_attn = affine(&concat.view(), values, &a.o);
    let g = affine(&h_attn.view(), values, &a.gate);
    let gate_sig = g.slice(s![.., ..w]).mapv(sigmoid);
    let out = &x * &gate_sig + &g.slice(s![.., w..]);
    (out, AttnCache { x, q, k, v, probs, concat, h_attn, gate_sig })
}

fn attention_backward(
    d_out: &Array2<f64>,
    c: &AttnCache,
    values: &[f64],
    a: &AttnLayout,
    nodes: usize,
    frames: usize,
    heads: usize,
    grad: &mut [f64],
) -> Array2<f64> {
    let w = c.x.ncols();
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dx = d_out * &c.gate_sig;
    let mut dg = Array2::zeros((d_out.nrows(), 2 * w));
    let d_gate = d_out * &c.x * &c.gate_sig.mapv(|s| s * (1.0 - s));
    dg.slice_mut(s![.., ..w]).assign(&d_gate);
    dg.slice_mut(s![.., w..]).assign(d_out);
    let d_hattn = affine_backward(&c.h_attn.view(), &dg.view(), values, &a.gate, grad);
    let d_concat = affine_backward(&c.concat.view(), &d_hattn.view(), values, &a.o, grad);
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for i in 0..nodes {
        let rows = i * frames..(i + 1) * frames;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let base = (i * heads + h) * frames * frames;
            let p = ArrayView2::from_shape((frames, frames), &c.probs[base..base + frames * frames]).expect("probs shape");
            let d_o = d_concat.slice(s![rows.clone(), cols.clone()]);
            let qh = c.q.slice(s![rows.clone(), cols.clone()]);
            let kh = c.k.slice(s![rows.clone(), cols.clone()]);
            let vh = c.v.slice(s![rows.clone(), cols.clone()]);
            let dp = d_o.dot(&vh.t());
            dv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&d_o));
            let mut ds = Array2::zeros((frames, frames));
            for r in 0..frames {
                let dot: f64 = (0..frames).map(|c2| p[[r, c2]] * dp[[r, c2]]).sum();
                for c2 in 0..frames {
                    ds[[r, c2]] = p[[r, c2]] * (dp[[r, c2]] - dot) * scale;
                }
            }
            dq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![rows.clone(), cols]).assign(&ds.t().dot(&qh));
        }
    }
    dx += &affine_backward(&c.x.view(), &dq.view(), values, &a.q, grad);
    dx += &affine_backward(&c.x.view(), &dk.view(), values, &a.k, grad);
    dx += &affine_backward(&c.x.view(), &dv.view(), values, &a.v, grad);
    dx
}

fn check_finite(m: &Array2<f64>, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalDomain(format!("non-finite activation at layer {layer}")))
    }
}

thread_local! {
    static FORWARD_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of network forward passes run on the current thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

/// Runs the network on one window and returns the deformations plus the forward record.
pub fn forward(positions: &[[f64; 3]], timestamps: &[f64], mask_flags: &[bool], params: &NetParams) -> Result<(DeformWindow, NetTape)> {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
    let cfg = &params.config;
    cfg.validate()?;
    let layout = Layout::new(cfg);
    if params.values.len() != layout.total {
        return Err(Error::Contract(format!("network has {} parameters, config expects {}", params.values.len(), layout.total)));
    }
    let (nodes, frames) = (positions.len(), timestamps.len());
    let mut h = encode_inputs(positions, timestamps, mask_flags, params)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut out = affine(&h.view(), &params.values, &layout.mlp[l]);
        out.mapv_inplace(|v| v.max(0.0));
        check_finite(&out, l)?;
        let input = std::mem::replace(&mut h, out);
        let attn = match &layout.attn[l] {
            Some(a) => {
                let (y, cache) = attention_forward(h.clone(), &params.values, a, nodes, frames, cfg.heads);
                check_finite(&y, l)?;
                h = y;
                Some(cache)
            }
            None => None,
        };
        let output = match &attn {
            Some(c) => c.x.clone(),
            None => h.clone(),
        };
        layers.push(LayerCache { input, output, attn });
    }
    let dp = affine(&h.view(), &params.values, &layout.head_p);
    let dq = affine(&h.view(), &params.values, &layout.head_q);
    let ds = affine(&h.view(), &params.values, &layout.head_s);
    let rows = nodes * frames;
    let mut win = DeformWindow::identity(nodes, timestamps.to_vec(), mask_flags.to_vec());
    let mut q_norms = Vec::with_capacity(rows);
    for r in 0..rows {
        win.delta_p[r] = [dp[[r, 0]], dp[[r, 1]], dp[[r, 2]]];
        win.delta_s[r] = [ds[[r, 0]], ds[[r, 1]], ds[[r, 2]]];
        let raw = [1.0 + dq[[r, 0]], dq[[r, 1]], dq[[r, 2]], dq[[r, 3]]];
        let (q_hat, n) = quat::normalize(&raw);
        win.delta_q[r] = q_hat;
        q_norms.push(n);
    }
    if !win.is_finite() {
        return Err(Error::NumericalDomain(format!("non-finite deformation head output after layer {}", cfg.layers - 1)));
    }
    Ok((win, NetTape { positions: positions.to_vec(), mask_flags: mask_flags.to_vec(), layers, last: h, q_norms }))
}

/// Gradients of a window loss with respect to network parameters and node positions.
#[derive(Debug, Clone)]
pub struct NetGrad {
    pub params: Vec<f64>,
    pub positions: Vec<[f64; 3]>,
}

/// Reverse pass. `d_window` holds dL/d(Δp, normalized Δq, Δs).
pub fn backward(params: &NetParams, window: &DeformWindow, tape: &NetTape, d_window: &DeformWindow) -> NetGrad {
    let cfg = &params.config;
    let layout = Layout::new(cfg);
    let values = &params.values;
    let (nodes, frames) = (window.nodes, window.frames);
    let rows = nodes * frames;
    let mut grad = vec![0.0; values.len()];
    let mut d_p = Array2::zeros((rows, 3));
    let mut d_q = Array2::zeros((rows, 4));
    let mut d_s = Array2::zeros((rows, 3));
    for r in 0..rows {
        let raw_grad = quat::normalize_backward(&window.delta_q[r], tape.q_norms[r], &d_window.delta_q[r]);
        for a in 0..3 {
            d_p[[r, a]] = d_window.delta_p[r][a];
            d_s[[r, a]] = d_window.delta_s[r][a];
        }
        for a in 0..4 {
            d_q[[r, a]] = raw_grad[a];
        }
    }
    let hv = tape.last.view();
    let mut dh = affine_backward(&hv, &d_p.view(), values, &layout.head_p, &mut grad);
    dh += &affine_backward(&hv, &d_q.view(), values, &layout.head_q, &mut grad);
    dh += &affine_backward(&hv, &d_s.view(), values, &layout.head_s, &mut grad);
    for l in (0..cfg.layers).rev() {
        let lc = &tape.layers[l];
        if let (Some(c), Some(a)) = (&lc.attn, &layout.attn[l]) {
            dh = attention_backward(&dh, c, values, a, nodes, frames, cfg.heads, &mut grad);
        }
        ndarray::Zip::from(&mut dh).and(&lc.output).for_each(|g, &o| {
            if o <= 0.0 {
                *g = 0.0;
            }
        });
        dh = affine_backward(&lc.input.view(), &dh.view(), values, &layout.mlp[l], &mut grad);
    }
    // dh is now dL/dH⁰: route to the mask vector and node positions
    let tf = 2 * cfg.time_freqs;
    let pc = 6 * cfg.pos_freqs;
    let mut d_pos = vec![[0.0; 3]; nodes];
    for i in 0..nodes {
        for t in 0..frames {
            let row = dh.row(i * frames + t);
            if tape.mask_flags[t] {
                for c in 0..tf {
                    grad[layout.mask + c] += row[pc + c];
                }
            }
            for a in 0..3 {
                let x = tape.positions[i][a];
                for f in 0..cfg.pos_freqs {
                    let w = (1u64 << f) as f64 * PI;
                    let base = a * 2 * cfg.pos_freqs + 2 * f;
                    d_pos[i][a] += w * ((w * x).cos() * row[base] - (w * x).sin() * row[base + 1]);
                }
            }
        }
    }
    NetGrad { params: grad, positions: d_pos }
}

/// Draws the per-window masking pattern. Slots with `eligible[t] == false`
/// (placeholders) are never masked, and the result always leaves one slot visible.
pub fn sample_mask<R: Rng + ?Sized>(frames: usize, mask_ratio_max: f64, eligible: Option<&[bool]>, rng: &mut R) -> Vec<bool> {
    let ok = |t: usize| eligible.map_or(true, |e| e[t]);
    if mask_ratio_max <= 0.0 || frames == 0 {
        return vec![false; frames];
    }
    loop {
        let rate = rng.random_range(0.0..=mask_ratio_max);
        let flags: Vec<bool> = (0..frames).map(|t| ok(t) && rng.random_bool(rate.clamp(0.0, 1.0))).collect();
        if flags.iter().any(|m| !m) {
            return flags;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetConfig {
        NetConfig { layers: 3, width: 16, attn_layers: vec![1], heads: 2, ..NetConfig::default() }
    }

    #[test]
    fn input_channel_count() {
        assert_eq!(NetConfig::default().input_channels(), 44);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NetParams::init(&NetConfig::default(), &mut rng).unwrap();
        let h = encode_inputs(&[[0.1; 3]; 5], &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], &[false; 6], &p).unwrap();
        assert_eq!(h.dim(), (30, 44));
        assert_eq!(&h.row(0).as_slice().unwrap()[36..], &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn timestamps_outside_unit_range_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = NetParams::init(&small_cfg(), &mut rng).unwrap();
        assert!(matches!(encode_inputs(&[[0.0; 3]], &[1.5], &[false], &p), Err(Error::Contract(_))));
    }

    #[test]
    fn identity_at_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = NetParams::init(&NetConfig::default(), &mut rng).unwrap();
        let pos: Vec<[f64; 3]> = (0..10).map(|i| [i as f64 * 0.1, -0.3, 0.2]).collect();
        let (w, _) = forward(&pos, &[0.0, 0.2, 0.4, 0.6, 0.8, 1.0], &[false, true, false, false, false, false], &p).unwrap();
        assert_eq!(w.delta_p.len(), 60);
        assert!(w.delta_p.iter().flatten().all(|v| *v == 0.0));
        assert!(w.delta_s.iter().flatten().all(|v| *v == 0.0));
        assert!(w.delta_q.iter().all(|q| q == &quat::IDENTITY));
    }

    #[test]
    fn all_masked_is_time_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = NetParams::init(&small_cfg(), &mut rng).unwrap();
        p.randomize_heads(0.1, &mut rng);
        let pos = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.5]];
        let (a, _) = forward(&pos, &[0.0, 0.5, 1.0], &[true; 3], &p).unwrap();
        let (b, _) = forward(&pos, &[0.1, 0.3, 0.9], &[true; 3], &p).unwrap();
        assert_eq!(a.delta_p, b.delta_p);
        assert_eq!(a.delta_p[0], a.delta_p[1]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = NetParams::init(&small_cfg(), &mut rng).unwrap();
        let (_, tape) = forward(&[[0.3, 0.1, -0.2]; 2], &[0.0, 0.3, 0.6, 1.0], &[false; 4], &p).unwrap();
        let probs = tape.first_attention_probs().unwrap();
        for row in probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn node_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = NetParams::init(&small_cfg(), &mut rng).unwrap();
        p.randomize_heads(0.2, &mut rng);
        let pos = [[0.1, 0.2, 0.3], [-0.4, 0.0, 0.5], [0.9, -0.9, 0.0]];
        let perm = [2, 0, 1];
        let ppos: Vec<[f64; 3]> = perm.iter().map(|&i| pos[i]).collect();
        let ts = [0.0, 0.4, 1.0];
        let (a, _) = forward(&pos, &ts, &[false; 3], &p).unwrap();
        let (b, _) = forward(&ppos, &ts, &[false; 3], &p).unwrap();
        for (new_i, &old_i) in perm.iter().enumerate() {
            for t in 0..3 {
                assert_eq!(b.dp(new_i, t), a.dp(old_i, t));
                assert_eq!(b.dq(new_i, t), a.dq(old_i, t));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = NetParams::init(&small_cfg(), &mut rng).unwrap();
        p.randomize_heads(0.3, &mut rng);
        let pos = vec![[0.1, 0.2, 0.3], [-0.4, 0.0, 0.5], [0.2, -0.1, 0.05]];
        let ts = [0.0, 0.3, 0.7, 1.0];
        let mask = [false, true, false, false];
        let loss = |p: &NetParams, pos: &[[f64; 3]]| {
            let (w, _) = forward(pos, &ts, &mask, p).unwrap();
            w.delta_p.iter().flatten().chain(w.delta_q.iter().flatten()).chain(w.delta_s.iter().flatten()).sum::<f64>()
        };
        let (w, tape) = forward(&pos, &ts, &mask, &p).unwrap();
        let mut d = w.zeros_like();
        d.delta_p.iter_mut().for_each(|v| *v = [1.0; 3]);
        d.delta_q.iter_mut().for_each(|v| *v = [1.0; 4]);
        d.delta_s.iter_mut().for_each(|v| *v = [1.0; 3]);
        let g = backward(&p, &w, &tape, &d);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in (0..p.values.len()).step_by(7) {
            let mut pp = p.clone();
            pp.values[idx] += h;
            let up = loss(&pp, &pos);
            pp.values[idx] -= 2.0 * h;
            let dn = loss(&pp, &pos);
            let num = (up - dn) / (2.0 * h);
            let rel = (num - g.params[idx]).abs() / num.abs().max(g.params[idx].abs()).max(1e-5);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "worst rel error {worst}");
        // high-frequency position bands cross ReLU kinks at larger steps
        let h = 1e-6;
        for i in 0..3 {
            for a in 0..3 {
                let mut pp = pos.clone();
                pp[i][a] += h;
                let up = loss(&p, &pp);
                pp[i][a] -= 2.0 * h;
                let num = (up - loss(&p, &pp)) / (2.0 * h);
                let rel = (num - g.positions[i][a]).abs() / num.abs().max(g.positions[i][a].abs()).max(1e-5);
                assert!(rel < 1e-4, "position grad {i},{a}: {num} vs {}", g.positions[i][a]);
            }
        }
    }

    #[test]
    fn mask_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(sample_mask(6, 0.0, None, &mut rng), vec![false; 6]);
        for _ in 0..1000 {
            let m = sample_mask(2, 0.99, None, &mut rng);
            assert!(m.iter().any(|v| !v));
            let m = sample_mask(3, 0.9, Some(&[true, false, true]), &mut rng);
            assert!(!m[1]);
        }
    }
}
