//! Forward and analytic backward passes of the decoder, generic over the
//! element type so the same code runs in f32 (training) and f64 (gradient
//! checks).

use std::collections::BTreeMap;

use super::config::{ModelConfig, ROPE_BASE};
use super::loss::{ce_rows, kl_rows};
use super::params::ParamSet;
use super::scalar::{gemm, linear, linear_backward, Mat, Real};
use crate::error::{Error, Result};

/// How normalization sites compute their output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormMode {
    /// `x / rms(x) * gain`.
    #[default]
    Rms,
    /// `x * gain`; used by trimming oracles where RMS statistics must not move.
    Identity,
}

/// Which value a norm tap records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormTap {
    #[default]
    PostGain,
    PreGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapMode {
    /// Raw `(batch, seq, width)` tensors.
    #[default]
    Full,
    /// Per-sample mean over positions of the unit magnitude, `(batch, units)`.
    SeqMeanAbs,
}

/// Which activation sites to capture during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct TapSpec {
    pub mlp: bool,
    pub heads: bool,
    pub norms: bool,
    pub residual: bool,
    pub mode: TapMode,
    pub norm_tap: NormTap,
}

impl TapSpec {
    pub fn none() -> Self {
        Self::default()
    }

    /// Aggregated width-importance taps.
    pub fn importance(norm_tap: NormTap) -> Self {
        TapSpec { mlp: true, heads: true, norms: true, residual: false, mode: TapMode::SeqMeanAbs, norm_tap }
    }

    pub fn full() -> Self {
        TapSpec { mlp: true, heads: true, norms: true, residual: true, mode: TapMode::Full, norm_tap: NormTap::PostGain }
    }

    pub fn residual_only() -> Self {
        TapSpec { residual: true, ..Self::default() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Layers flagged `true` pass the residual stream through unchanged.
    pub skip: Vec<bool>,
    pub norm_mode: NormMode,
    pub taps: TapSpec,
}

impl ForwardOptions {
    pub fn skipping(skip: Vec<bool>) -> Self {
        ForwardOptions { skip, ..Default::default() }
    }

    fn skipped(&self, layer: usize) -> bool {
        self.skip.get(layer).copied().unwrap_or(false)
    }
}

/// One captured activation site.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Capture {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Activations captured by a forward pass. Empty vectors mean "not tapped".
/// Norm sites are ordered `layer0.attn, layer0.mlp, layer1.attn, ..., final`;
/// residual states are `input of layer 0, ..., output of the last layer`.
#[derive(Debug, Clone, Default)]
pub struct ForwardTrace {
    pub mlp: Vec<Capture>,
    pub heads: Vec<Capture>,
    pub norms: Vec<Capture>,
    pub residual: Vec<Capture>,
}

/// Borrowed weights of one layer.
pub struct LayerWeights<'a, T> {
    pub q: &'a [T],
    pub k: &'a [T],
    pub v: &'a [T],
    pub o: &'a [T],
    pub gate: &'a [T],
    pub up: &'a [T],
    pub down: &'a [T],
    pub norm_attn: &'a [T],
    pub norm_mlp: &'a [T],
}

/// Borrowed view of a full model.
pub struct Weights<'a, T> {
    pub cfg: &'a ModelConfig,
    pub embed: &'a [T],
    pub layers: Vec<LayerWeights<'a, T>>,
    pub final_norm: &'a [T],
    pub head: &'a [T],
}

/// Anything that can hand out named tensors for the engine.
pub trait TensorSource<T> {
    fn config(&self) -> &ModelConfig;
    fn slice(&self, name: &str) -> Option<&[T]>;
}

impl TensorSource<f32> for ParamSet {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn slice(&self, name: &str) -> Option<&[f32]> {
        self.tensors.get(name).map(|t| t.data.as_slice())
    }
}

/// f64 copy of a `ParamSet`, used for gradient checks.
#[derive(Debug, Clone)]
pub struct WideParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Vec<f64>>,
}

impl WideParams {
    pub fn from_params(p: &ParamSet) -> Self {
        let tensors = p
            .tensors
            .iter()
            .map(|(n, t)| (n.clone(), t.data.iter().map(|&x| x as f64).collect()))
            .collect();
        WideParams { config: p.config.clone(), tensors }
    }
}

impl TensorSource<f64> for WideParams {
    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn slice(&self, name: &str) -> Option<&[f64]> {
        self.tensors.get(name).map(|t| t.as_slice())
    }
}

impl<'a, T: Real> Weights<'a, T> {
    pub fn new<S: TensorSource<T>>(src: &'a S) -> Result<Self> {
        let cfg = src.config();
        cfg.validate()?;
        let mut missing = Vec::new();
        let shapes: BTreeMap<String, usize> =
            cfg.tensor_shapes().into_iter().map(|(n, s)| (n, s.iter().product())).collect();
        let mut get = |name: String| -> &'a [T] {
            match src.slice(&name) {
                Some(s) if Some(&s.len()) == shapes.get(&name) => s,
                Some(s) => {
                    missing.push(format!("{name}: {} values, expected {:?}", s.len(), shapes.get(&name)));
                    &[]
                }
                None => {
                    missing.push(format!("missing tensor {name}"));
                    &[]
                }
            }
        };
        let embed = get("embed.tok".into());
        let layers = (0..cfg.depth)
            .map(|i| LayerWeights {
                q: get(format!("layer.{i}.attn.q")),
                k: get(format!("layer.{i}.attn.k")),
                v: get(format!("layer.{i}.attn.v")),
                o: get(format!("layer.{i}.attn.o")),
                gate: get(format!("layer.{i}.mlp.gate")),
                up: get(format!("layer.{i}.mlp.up")),
                down: get(format!("layer.{i}.mlp.down")),
                norm_attn: get(format!("layer.{i}.norm.attn")),
                norm_mlp: get(format!("layer.{i}.norm.mlp")),
            })
            .collect();
        let final_norm = get("final.norm".into());
        let head = if cfg.tie_embeddings { embed } else { get("head.out".into()) };
        if !missing.is_empty() {
            return Err(Error::ArchMismatch(missing));
        }
        Ok(Weights { cfg, embed, layers, final_norm, head })
    }
}

/// Gradients in engine layout.
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub o: Vec<T>,
    pub gate: Vec<T>,
    pub up: Vec<T>,
    pub down: Vec<T>,
    pub norm_attn: Vec<T>,
    pub norm_mlp: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Grads<T> {
    pub embed: Vec<T>,
    pub layers: Vec<LayerGrads<T>>,
    pub final_norm: Vec<T>,
    /// Empty when embeddings are tied (the head gradient lands in `embed`).
    pub head: Vec<T>,
}

impl<T: Real> Grads<T> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let z = |n: usize| vec![T::zero(); n];
        let (h, a, kv, m) = (cfg.hidden, cfg.attn_width(), cfg.kv_width(), cfg.mlp_hidden);
        Grads {
            embed: z(cfg.vocab * h),
            layers: (0..cfg.depth)
                .map(|_| LayerGrads {
                    q: z(a * h),
                    k: z(kv * h),
                    v: z(kv * h),
                    o: z(h * a),
                    gate: z(m * h),
                    up: z(m * h),
                    down: z(h * m),
                    norm_attn: z(h),
                    norm_mlp: z(h),
                })
                .collect(),
            final_norm: z(h),
            head: if cfg.tie_embeddings { Vec::new() } else { z(cfg.vocab * h) },
        }
    }

    /// Gradients keyed by canonical tensor name.
    pub fn into_named(self) -> BTreeMap<String, Vec<T>> {
        let mut out = BTreeMap::new();
        out.insert("embed.tok".to_string(), self.embed);
        for (i, l) in self.layers.into_iter().enumerate() {
            out.insert(format!("layer.{i}.attn.q"), l.q);
            out.insert(format!("layer.{i}.attn.k"), l.k);
            out.insert(format!("layer.{i}.attn.v"), l.v);
            out.insert(format!("layer.{i}.attn.o"), l.o);
            out.insert(format!("layer.{i}.mlp.gate"), l.gate);
            out.insert(format!("layer.{i}.mlp.up"), l.up);
            out.insert(format!("layer.{i}.mlp.down"), l.down);
            out.insert(format!("layer.{i}.norm.attn"), l.norm_attn);
            out.insert(format!("layer.{i}.norm.mlp"), l.norm_mlp);
        }
        out.insert("final.norm".to_string(), self.final_norm);
        if !self.head.is_empty() {
            out.insert("head.out".to_string(), self.head);
        }
        out
    }
}

/// Loss head used by the backward pass.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a> {
    /// Next-token cross-entropy against `targets` (one per input position).
    CrossEntropy { targets: &'a [u32] },
    /// Forward KL from the teacher's logits `(batch, seq, vocab)`.
    Kl { teacher_logits: &'a [f32] },
    /// KL plus `ce_weight` times cross-entropy. Experimental; not part of the
    /// default recipe.
    KlWithCe { teacher_logits: &'a [f32], targets: &'a [u32], ce_weight: f64 },
}

struct LayerCache<T> {
    x_in: Vec<T>,
    r1: Vec<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    x_mid: Vec<T>,
    r2: Vec<T>,
    h2: Vec<T>,
    gate: Vec<T>,
    up: Vec<T>,
    act: Vec<T>,
}

struct Cache<T> {
    layers: Vec<Option<LayerCache<T>>>,
    x_final: Vec<T>,
    rf: Vec<T>,
    hf: Vec<T>,
}

struct Rope<T> {
    cos: Vec<T>,
    sin: Vec<T>,
    half: usize,
}

impl<T: Real> Rope<T> {
    fn new(seq: usize, head_dim: usize) -> Self {
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(seq * half);
        let mut sin = Vec::with_capacity(seq * half);
        for pos in 0..seq {
            for j in 0..half {
                let theta = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
                let angle = pos as f64 * theta;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Rope { cos, sin, half }
    }

    /// Rotates every head of a `(batch*seq, heads*head_dim)` buffer in place.
    fn apply(&self, buf: &mut [T], seq: usize, heads: usize, inverse: bool) {
        let hd = self.half * 2;
        let width = heads * hd;
        for (row, chunk) in buf.chunks_mut(width).enumerate() {
            let pos = row % seq;
            let cs = &self.cos[pos * self.half..(pos + 1) * self.half];
            let sn = &self.sin[pos * self.half..(pos + 1) * self.half];
            for head in chunk.chunks_mut(hd) {
                for j in 0..self.half {
                    let (a, b) = (head[j], head[j + self.half]);
                    let (c, s) = (cs[j], if inverse { -sn[j] } else { sn[j] });
                    head[j] = a * c - b * s;
                    head[j + self.half] = b * c + a * s;
                }
            }
        }
    }
}

fn rms_forward<T: Real>(x: &[T], g: &[T], eps: T, mode: NormMode, y: &mut [T], r: &mut [T]) {
    let h = g.len();
    let inv_h = T::one() / T::from_f64(h as f64);
    for ((xr, yr), rr) in x.chunks(h).zip(y.chunks_mut(h)).zip(r.iter_mut()) {
        let scale = match mode {
            NormMode::Rms => {
                let ms: T = xr.iter().map(|&v| v * v).sum::<T>() * inv_h;
                T::one() / (ms + eps).sqrt()
            }
            NormMode::Identity => T::one(),
        };
        *rr = scale;
        for ((yv, &xv), &gv) in yr.iter_mut().zip(xr).zip(g) {
            *yv = xv * scale * gv;
        }
    }
}

/// Accumulates into `dx` and `dg`.
fn rms_backward<T: Real>(dy: &[T], x: &[T], g: &[T], r: &[T], mode: NormMode, dx: &mut [T], dg: &mut [T]) {
    let h = g.len();
    let inv_h = T::one() / T::from_f64(h as f64);
    for (((dyr, xr), &rr), dxr) in dy.chunks(h).zip(x.chunks(h)).zip(r).zip(dx.chunks_mut(h)) {
        for j in 0..h {
            dg[j] += dyr[j] * xr[j] * rr;
        }
        match mode {
            NormMode::Identity => {
                for j in 0..h {
                    dxr[j] += dyr[j] * g[j];
                }
            }
            NormMode::Rms => {
                let dot: T = (0..h).map(|j| dyr[j] * g[j] * xr[j]).sum();
                let coef = dot * rr * rr * rr * inv_h;
                for j in 0..h {
                    dxr[j] += rr * g[j] * dyr[j] - xr[j] * coef;
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

struct Dims {
    batch: usize,
    seq: usize,
    n: usize,
}

fn check_tokens(cfg: &ModelConfig, tokens: &[u32], batch: usize, seq: usize) -> Result<Dims> {
    if batch == 0 || seq == 0 {
        return Err(Error::Empty("token batch".into()));
    }
    if tokens.len() != batch * seq {
        return Err(Error::Shape(format!("{} tokens for batch {batch} x seq {seq}", tokens.len())));
    }
    if seq > cfg.context {
        return Err(Error::SequenceTooLong { len: seq, context: cfg.context });
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab: cfg.vocab });
    }
    Ok(Dims { batch, seq, n: batch * seq })
}

fn to_capture<T: Real>(shape: Vec<usize>, data: &[T]) -> Capture {
    Capture { shape, data: data.iter().map(|v| v.widen() as f32).collect() }
}

/// Per-sample mean over positions of `|x|`, for `units` columns.
fn seq_mean_abs<T: Real>(x: &[T], d: &Dims, units: usize) -> Capture {
    let mut out = vec![0.0f64; d.batch * units];
    for b in 0..d.batch {
        let acc = &mut out[b * units..(b + 1) * units];
        for t in 0..d.seq {
            let row = &x[(b * d.seq + t) * units..(b * d.seq + t + 1) * units];
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v.widen().abs();
            }
        }
        acc.iter_mut().for_each(|a| *a /= d.seq as f64);
    }
    Capture { shape: vec![d.batch, units], data: out.into_iter().map(|v| v as f32).collect() }
}

/// Per-sample mean over positions of each head's output l2 norm.
fn head_magnitudes<T: Real>(att: &[T], d: &Dims, heads: usize, hd: usize) -> Capture {
    let mut out = vec![0.0f64; d.batch * heads];
    for b in 0..d.batch {
        for t in 0..d.seq {
            let row = &att[(b * d.seq + t) * heads * hd..(b * d.seq + t + 1) * heads * hd];
            for h in 0..heads {
                let s: f64 = row[h * hd..(h + 1) * hd].iter().map(|v| v.widen().powi(2)).sum();
                out[b * heads + h] += s.sqrt();
            }
        }
    }
    out.iter_mut().for_each(|a| *a /= d.seq as f64);
    Capture { shape: vec![d.batch, heads], data: out.into_iter().map(|v| v as f32).collect() }
}

fn capture_norm<T: Real>(d: &Dims, taps: &TapSpec, x: &[T], r: &[T], y: &[T], h: usize) -> Capture {
    let pre;
    let src: &[T] = match taps.norm_tap {
        NormTap::PostGain => y,
        NormTap::PreGain => {
            pre = x
                .chunks(h)
                .zip(r)
                .flat_map(|(row, &rr)| row.iter().map(move |&v| v * rr))
                .collect::<Vec<T>>();
            &pre
        }
    };
    match taps.mode {
        TapMode::Full => to_capture(vec![d.batch, d.seq, h], src),
        TapMode::SeqMeanAbs => seq_mean_abs(src, d, h),
    }
}

fn run<T: Real>(
    w: &Weights<T>,
    tokens: &[u32],
    d: &Dims,
    opts: &ForwardOptions,
    want_cache: bool,
) -> (Vec<T>, ForwardTrace, Option<Cache<T>>) {
    let cfg = w.cfg;
    let (h, a, kv, m, v) = (cfg.hidden, cfg.attn_width(), cfg.kv_width(), cfg.mlp_hidden, cfg.vocab);
    let (qh, hd, hpg) = (cfg.query_heads, cfg.head_dim, cfg.heads_per_group());
    let n = d.n;
    let eps = T::from_f64(cfg.norm_eps);
    let taps = &opts.taps;
    let rope = Rope::<T>::new(d.seq, hd);
    let scale = T::one() / T::from_f64(hd as f64).sqrt();

    let mut trace = ForwardTrace::default();
    let mut layer_caches = Vec::with_capacity(cfg.depth);

    let mut x = vec![T::zero(); n * h];
    for (row, &tok) in x.chunks_mut(h).zip(tokens) {
        row.copy_from_slice(&w.embed[tok as usize * h..(tok as usize + 1) * h]);
    }
    if taps.residual {
        trace.residual.push(to_capture(vec![d.batch, d.seq, h], &x));
    }

    for (li, lw) in w.layers.iter().enumerate() {
        if opts.skipped(li) {
            if taps.norms {
                trace.norms.push(Capture::default());
                trace.norms.push(Capture::default());
            }
            if taps.mlp {
                trace.mlp.push(Capture::default());
            }
            if taps.heads {
                trace.heads.push(Capture::default());
            }
            if taps.residual {
                trace.residual.push(to_capture(vec![d.batch, d.seq, h], &x));
            }
            layer_caches.push(None);
            continue;
        }
        let x_in = x.clone();
        let mut h1 = vec![T::zero(); n * h];
        let mut r1 = vec![T::zero(); n];
        rms_forward(&x_in, lw.norm_attn, eps, opts.norm_mode, &mut h1, &mut r1);
        if taps.norms {
            trace.norms.push(capture_norm(d, taps, &x_in, &r1, &h1, h));
        }

        let mut q = vec![T::zero(); n * a];
        let mut k = vec![T::zero(); n * kv];
        let mut vv = vec![T::zero(); n * kv];
        linear(&h1, lw.q, n, h, a, &mut q);
        linear(&h1, lw.k, n, h, kv, &mut k);
        linear(&h1, lw.v, n, h, kv, &mut vv);
        rope.apply(&mut q, d.seq, qh, false);
        rope.apply(&mut k, d.seq, cfg.attention_groups, false);

        let t = d.seq;
        let mut probs = vec![T::zero(); d.batch * qh * t * t];
        let mut att = vec![T::zero(); n * a];
        for b in 0..d.batch {
            for head in 0..qh {
                let g = head / hpg;
                let p = &mut probs[(b * qh + head) * t * t..(b * qh + head + 1) * t * t];
                gemm(
                    &q,
                    Mat::strided(t, hd, b * t * a + head * hd, a),
                    &k,
                    Mat::strided(t, hd, b * t * kv + g * hd, kv).t(),
                    T::zero(),
                    p,
                    Mat::row_major(t, t),
                );
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    let mut mx = T::neg_infinity();
                    for s in 0..=i {
                        row[s] *= scale;
                        mx = mx.max(row[s]);
                    }
                    let mut sum = T::zero();
                    for s in 0..=i {
                        row[s] = (row[s] - mx).exp();
                        sum += row[s];
                    }
                    let inv = T::one() / sum;
                    for s in 0..=i {
                        row[s] *= inv;
                    }
                    for s in (i + 1)..t {
                        row[s] = T::zero();
                    }
                }
                gemm(
                    p,
                    Mat::row_major(t, t),
                    &vv,
                    Mat::strided(t, hd, b * t * kv + g * hd, kv),
                    T::zero(),
                    &mut att,
                    Mat::strided(t, hd, b * t * a + head * hd, a),
                );
            }
        }
        if taps.heads {
            trace.heads.push(match taps.mode {
                TapMode::Full => to_capture(vec![d.batch, d.seq, a], &att),
                TapMode::SeqMeanAbs => head_magnitudes(&att, d, qh, hd),
            });
        }

        let mut proj = vec![T::zero(); n * h];
        linear(&att, lw.o, n, a, h, &mut proj);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        let x_mid = x.clone();

        let mut h2 = vec![T::zero(); n * h];
        let mut r2 = vec![T::zero(); n];
        rms_forward(&x_mid, lw.norm_mlp, eps, opts.norm_mode, &mut h2, &mut r2);
        if taps.norms {
            trace.norms.push(capture_norm(d, taps, &x_mid, &r2, &h2, h));
        }
        let mut gate = vec![T::zero(); n * m];
        let mut up = vec![T::zero(); n * m];
        linear(&h2, lw.gate, n, h, m, &mut gate);
        linear(&h2, lw.up, n, h, m, &mut up);
        let act: Vec<T> = gate.iter().zip(&up).map(|(&g, &u)| g * sigmoid(g) * u).collect();
        if taps.mlp {
            trace.mlp.push(match taps.mode {
                TapMode::Full => to_capture(vec![d.batch, d.seq, m], &act),
                TapMode::SeqMeanAbs => seq_mean_abs(&act, d, m),
            });
        }
        linear(&act, lw.down, n, m, h, &mut proj);
        for (xv, pv) in x.iter_mut().zip(&proj) {
            *xv += *pv;
        }
        if taps.residual {
            trace.residual.push(to_capture(vec![d.batch, d.seq, h], &x));
        }
        layer_caches.push(if want_cache {
            Some(LayerCache { x_in, r1, h1, q, k, v: vv, probs, att, x_mid, r2, h2, gate, up, act })
        } else {
            None
        });
    }

    let mut hf = vec![T::zero(); n * h];
    let mut rf = vec![T::zero(); n];
    rms_forward(&x, w.final_norm, eps, opts.norm_mode, &mut hf, &mut rf);
    if taps.norms {
        trace.norms.push(capture_norm(d, taps, &x, &rf, &hf, h));
    }
    let mut logits = vec![T::zero(); n * v];
    linear(&hf, w.head, n, h, v, &mut logits);
    let cache = want_cache.then_some(Cache { layers: layer_caches, x_final: x, rf, hf });
    (logits, trace, cache)
}

fn backprop<T: Real>(
    w: &Weights<T>,
    tokens: &[u32],
    d: &Dims,
    opts: &ForwardOptions,
    cache: Cache<T>,
    dlogits: Vec<T>,
) -> Grads<T> {
    let cfg = w.cfg;
    let (h, a, kv, m, v) = (cfg.hidden, cfg.attn_width(), cfg.kv_width(), cfg.mlp_hidden, cfg.vocab);
    let (qh, hd, hpg) = (cfg.query_heads, cfg.head_dim, cfg.heads_per_group());
    let n = d.n;
    let t = d.seq;
    let rope = Rope::<T>::new(t, hd);
    let scale = T::one() / T::from_f64(hd as f64).sqrt();
    let mut g = Grads::zeros(cfg);

    let mut dhf = vec![T::zero(); n * h];
    {
        let dhead: &mut [T] = if cfg.tie_embeddings { &mut g.embed } else { &mut g.head };
        linear_backward(&dlogits, &cache.hf, w.head, n, h, v, &mut dhf, false, dhead);
    }
    let mut dx = vec![T::zero(); n * h];
    rms_backward(&dhf, &cache.x_final, w.final_norm, &cache.rf, opts.norm_mode, &mut dx, &mut g.final_norm);

    for li in (0..cfg.depth).rev() {
        let Some(c) = cache.layers[li].as_ref() else { continue };
        let lw = &w.layers[li];
        let lg = &mut g.layers[li];

        // MLP: x_out = x_mid + down(act)
        let mut dact = vec![T::zero(); n * m];
        linear_backward(&dx, &c.act, lw.down, n, m, h, &mut dact, false, &mut lg.down);
        let mut dgate = vec![T::zero(); n * m];
        let mut dup = vec![T::zero(); n * m];
        for i in 0..n * m {
            let gv = c.gate[i];
            let s = sigmoid(gv);
            let silu = gv * s;
            dup[i] = dact[i] * silu;
            dgate[i] = dact[i] * c.up[i] * s * (T::one() + gv * (T::one() - s));
        }
        let mut dh2 = vec![T::zero(); n * h];
        linear_backward(&dgate, &c.h2, lw.gate, n, h, m, &mut dh2, false, &mut lg.gate);
        linear_backward(&dup, &c.h2, lw.up, n, h, m, &mut dh2, true, &mut lg.up);
        rms_backward(&dh2, &c.x_mid, lw.norm_mlp, &c.r2, opts.norm_mode, &mut dx, &mut lg.norm_mlp);

        // Attention: x_mid = x_in + o(att)
        let mut datt = vec![T::zero(); n * a];
        linear_backward(&dx, &c.att, lw.o, n, a, h, &mut datt, false, &mut lg.o);
        let mut dq = vec![T::zero(); n * a];
        let mut dk = vec![T::zero(); n * kv];
        let mut dv = vec![T::zero(); n * kv];
        let mut dp = vec![T::zero(); t * t];
        for b in 0..d.batch {
            for head in 0..qh {
                let grp = head / hpg;
                let p = &c.probs[(b * qh + head) * t * t..(b * qh + head + 1) * t * t];
                let q_m = Mat::strided(t, hd, b * t * a + head * hd, a);
                let kv_m = Mat::strided(t, hd, b * t * kv + grp * hd, kv);
                // dP = dO V^T
                gemm(&datt, q_m, &c.v, kv_m.t(), T::zero(), &mut dp, Mat::row_major(t, t));
                // dV += P^T dO
                gemm(p, Mat::row_major(t, t).t(), &datt, q_m, T::one(), &mut dv, kv_m);
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: T = (0..=i).map(|s| pr[s] * dr[s]).sum();
                    for s in 0..t {
                        dr[s] = if s <= i { pr[s] * (dr[s] - dot) * scale } else { T::zero() };
                    }
                }
                // dQ = dS K ; dK += dS^T Q
                gemm(&dp, Mat::row_major(t, t), &c.k, kv_m, T::zero(), &mut dq, q_m);
                gemm(&dp, Mat::row_major(t, t).t(), &c.q, q_m, T::one(), &mut dk, kv_m);
            }
        }
        rope.apply(&mut dq, t, qh, true);
        rope.apply(&mut dk, t, cfg.attention_groups, true);
        let mut dh1 = vec![T::zero(); n * h];
        linear_backward(&dq, &c.h1, lw.q, n, h, a, &mut dh1, false, &mut lg.q);
        linear_backward(&dk, &c.h1, lw.k, n, h, kv, &mut dh1, true, &mut lg.k);
        linear_backward(&dv, &c.h1, lw.v, n, h, kv, &mut dh1, true, &mut lg.v);
        rms_backward(&dh1, &c.x_in, lw.norm_attn, &c.r1, opts.norm_mode, &mut dx, &mut lg.norm_attn);
    }

    for (row, &tok) in dx.chunks(h).zip(tokens) {
        let dst = &mut g.embed[tok as usize * h..(tok as usize + 1) * h];
        for (dv, &gv) in dst.iter_mut().zip(row) {
            *dv += gv;
        }
    }
    g
}

/// Output of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `(batch, seq, vocab)` row-major.
    pub logits: Vec<T>,
    pub trace: ForwardTrace,
}

/// Runs the model over a `(batch, seq)` grid of token ids.
pub fn forward_with<T: Real, S: TensorSource<T>>(
    src: &S,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<T>> {
    let w = Weights::new(src)?;
    let d = check_tokens(w.cfg, tokens, batch, seq)?;
    let (logits, trace, _) = run(&w, tokens, &d, opts, false);
    Ok(ForwardOutput { logits, trace })
}

/// Loss and full gradient for one batch.
pub fn loss_and_grads<T: Real, S: TensorSource<T>>(
    src: &S,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    loss: LossSpec<'_>,
    opts: &ForwardOptions,
) -> Result<(f64, Grads<T>)> {
    let w = Weights::new(src)?;
    let d = check_tokens(w.cfg, tokens, batch, seq)?;
    let vocab = w.cfg.vocab;
    let check_targets = |targets: &[u32]| -> Result<()> {
        if targets.len() != d.n {
            return Err(Error::Shape(format!("{} targets for {} positions", targets.len(), d.n)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange { id: bad, vocab });
        }
        Ok(())
    };
    let check_teacher = |tl: &[f32]| -> Result<()> {
        if tl.len() != d.n * vocab {
            return Err(Error::Shape(format!("teacher logits {} for {} positions x vocab {vocab}", tl.len(), d.n)));
        }
        Ok(())
    };
    match loss {
        LossSpec::CrossEntropy { targets } => check_targets(targets)?,
        LossSpec::Kl { teacher_logits } => check_teacher(teacher_logits)?,
        LossSpec::KlWithCe { teacher_logits, targets, .. } => {
            check_teacher(teacher_logits)?;
            check_targets(targets)?;
        }
    }
    let (logits, _, cache) = run(&w, tokens, &d, opts, true);
    let mut dlogits = vec![T::zero(); logits.len()];
    let value = match loss {
        LossSpec::CrossEntropy { targets } => ce_rows(&logits, targets, vocab, Some(&mut dlogits), 1.0),
        LossSpec::Kl { teacher_logits } => {
            let tl: Vec<T> = teacher_logits.iter().map(|&x| T::from_f32(x)).collect();
            kl_rows(&tl, &logits, vocab, Some(&mut dlogits))
        }
        LossSpec::KlWithCe { teacher_logits, targets, ce_weight } => {
            let tl: Vec<T> = teacher_logits.iter().map(|&x| T::from_f32(x)).collect();
            kl_rows(&tl, &logits, vocab, Some(&mut dlogits))
                + ce_weight * ce_rows(&logits, targets, vocab, Some(&mut dlogits), ce_weight)
        }
    };
    let grads = backprop(&w, tokens, &d, opts, cache.expect("cache requested"), dlogits);
    Ok((value, grads))
}

/// Scalar loss only (no gradient), used by finite-difference oracles.
pub fn loss_only<T: Real, S: TensorSource<T>>(
    src: &S,
    tokens: &[u32],
    batch: usize,
    seq: usize,
    loss: LossSpec<'_>,
    opts: &ForwardOptions,
) -> Result<f64> {
    let out = forward_with::<T, S>(src, tokens, batch, seq, opts)?;
    let vocab = src.config().vocab;
    Ok(match loss {
        LossSpec::CrossEntropy { targets } => ce_rows(&out.logits, targets, vocab, None, 1.0),
        LossSpec::Kl { teacher_logits } => {
            let tl: Vec<T> = teacher_logits.iter().map(|&x| T::from_f32(x)).collect();
            kl_rows(&tl, &out.logits, vocab, None)
        }
        LossSpec::KlWithCe { teacher_logits, targets, ce_weight } => {
            let tl: Vec<T> = teacher_logits.iter().map(|&x| T::from_f32(x)).collect();
            kl_rows(&tl, &out.logits, vocab, None) + ce_weight * ce_rows(&out.logits, targets, vocab, None, 1.0)
        }
    })
}
