//! Activation-based importance for width axes and the three depth metrics.
//!
//! Width scores record, per calibration sample, the mean over positions of a
//! unit's activation magnitude and then take the l2 norm of those means over
//! samples. Neurons read the gated MLP activation, heads the l2 norm of their
//! pre-projection output and embedding channels the normalized residual
//! stream, summed over every norm site.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::ClozeItem;
use crate::error::{Error, Result};
use crate::model::{forward, ForwardOptions, ModelConfig, NormTap, ParamSet, TapSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregation {
    /// Reduction over positions within one sample.
    pub sequence: String,
    /// Reduction over samples.
    pub batch: String,
    /// Per-unit functional applied before aggregation.
    pub unit: String,
    pub head_unit: String,
    pub channel_sites: String,
    pub norm_tap: NormTap,
}

impl Aggregation {
    pub fn standard(norm_tap: NormTap) -> Self {
        Aggregation {
            sequence: "mean".into(),
            batch: "l2".into(),
            unit: "abs".into(),
            head_unit: "l2_norm_of_head_output".into(),
            channel_sites: "sum".into(),
            norm_tap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportanceMeta {
    pub calibration_samples: usize,
    pub seq_len: usize,
    pub aggregation: Aggregation,
    pub seed: Option<u64>,
    pub source_config: ModelConfig,
}

/// Importance scores of every prunable width unit of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WidthImportance {
    /// `[layer][neuron]`.
    pub neurons: Vec<Vec<f64>>,
    /// `[layer][query head]`.
    pub heads: Vec<Vec<f64>>,
    /// `[channel]`, shared across layers.
    pub channels: Vec<f64>,
    pub meta: ImportanceMeta,
}

impl WidthImportance {
    /// Query-head scores averaged within each KV group: `[layer][group]`.
    pub fn group_scores(&self) -> Vec<Vec<f64>> {
        let cfg = &self.meta.source_config;
        let hpg = cfg.heads_per_group();
        self.heads
            .iter()
            .map(|layer| layer.chunks(hpg).map(|c| c.iter().sum::<f64>() / hpg as f64).collect())
            .collect()
    }

    pub fn check_against(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = self.neurons.len() == cfg.depth
            && self.heads.len() == cfg.depth
            && self.neurons.iter().all(|n| n.len() == cfg.mlp_hidden)
            && self.heads.iter().all(|h| h.len() == cfg.query_heads)
            && self.channels.len() == cfg.hidden;
        if ok {
            Ok(())
        } else {
            Err(Error::Trim("importance scores do not match the source config".into()))
        }
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("importance serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImportanceOptions {
    pub batch_size: usize,
    pub norm_tap: NormTap,
}

impl Default for ImportanceOptions {
    fn default() -> Self {
        ImportanceOptions { batch_size: 16, norm_tap: NormTap::PostGain }
    }
}

fn check_windows(windows: &[Vec<u32>]) -> Result<usize> {
    let Some(first) = windows.first() else {
        return Err(Error::Empty("calibration set".into()));
    };
    let len = first.len();
    if len == 0 || windows.iter().any(|w| w.len() != len) {
        return Err(Error::Shape("calibration windows must share one non-zero length".into()));
    }
    Ok(len)
}

/// Forward-only width importance over calibration windows.
pub fn estimate_width_importance(
    params: &ParamSet,
    windows: &[Vec<u32>],
    opts: &ImportanceOptions,
) -> Result<WidthImportance> {
    let seq = check_windows(windows)?;
    let cfg = &params.config;
    let mut neurons = vec![vec![0.0f64; cfg.mlp_hidden]; cfg.depth];
    let mut heads = vec![vec![0.0f64; cfg.query_heads]; cfg.depth];
    let sites = 2 * cfg.depth + 1;
    let mut channels = vec![vec![0.0f64; cfg.hidden]; sites];
    let fopts = ForwardOptions { taps: TapSpec::importance(opts.norm_tap), ..Default::default() };
    for chunk in windows.chunks(opts.batch_size.max(1)) {
        let toks: Vec<u32> = chunk.concat();
        let out = forward(params, &toks, chunk.len(), seq, &fopts)?;
        let tr = &out.trace;
        if tr.mlp.len() != cfg.depth || tr.heads.len() != cfg.depth || tr.norms.len() != sites {
            return Err(Error::Shape("forward trace does not match the config".into()));
        }
        let accumulate = |acc: &mut [f64], cap: &crate::model::Capture| {
            let units = acc.len();
            for sample in cap.data.chunks(units) {
                for (a, &v) in acc.iter_mut().zip(sample) {
                    *a += (v as f64) * (v as f64);
                }
            }
        };
        for l in 0..cfg.depth {
            accumulate(&mut neurons[l], &tr.mlp[l]);
            accumulate(&mut heads[l], &tr.heads[l]);
        }
        for (s, cap) in tr.norms.iter().enumerate() {
            accumulate(&mut channels[s], cap);
        }
    }
    let sqrt_all = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = x.sqrt());
    neurons.iter_mut().for_each(sqrt_all);
    heads.iter_mut().for_each(sqrt_all);
    channels.iter_mut().for_each(sqrt_all);
    let mut total = vec![0.0f64; cfg.hidden];
    for site in &channels {
        for (t, v) in total.iter_mut().zip(site) {
            *t += v;
        }
    }
    Ok(WidthImportance {
        neurons,
        heads,
        channels: total,
        meta: ImportanceMeta {
            calibration_samples: windows.len(),
            seq_len: seq,
            aggregation: Aggregation::standard(opts.norm_tap),
            seed: None,
            source_config: cfg.clone(),
        },
    })
}

/// Unit indices sorted by descending score; ties keep the lower index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthMetric {
    LmLoss,
    BlockImportance,
    TaskAccuracy,
}

impl DepthMetric {
    /// Whether larger values mean "more important".
    fn higher_is_more_important(self) -> bool {
        match self {
            DepthMetric::LmLoss | DepthMetric::BlockImportance => true,
            DepthMetric::TaskAccuracy => false,
        }
    }
}

impl std::str::FromStr for DepthMetric {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "loss" | "lm_loss" => Ok(DepthMetric::LmLoss),
            "bi" | "block_importance" => Ok(DepthMetric::BlockImportance),
            "task" | "task_accuracy" => Ok(DepthMetric::TaskAccuracy),
            other => Err(format!("unknown depth metric {other:?} (expected loss, bi or task)")),
        }
    }
}

/// A depth-importance curve. `values[i]` belongs to the block starting at
/// layer `i` (0-based), reported as start index `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthScan {
    pub metric: DepthMetric,
    pub block_size: usize,
    pub depth: usize,
    pub values: Vec<f64>,
    /// Metric of the unmodified model.
    pub base: Option<f64>,
    /// Positions excluded because a residual vector had zero norm (BI only).
    pub excluded: usize,
    pub samples: usize,
}

impl DepthScan {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "start_index,value")?;
        for (i, v) in self.values.iter().enumerate() {
            writeln!(f, "{},{}", i + 1, v)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn check_block(cfg: &ModelConfig, n: usize) -> Result<()> {
    if n == 0 || n >= cfg.depth {
        return Err(Error::InvalidArgument(format!("block size must satisfy 1 <= n < depth ({}), got {n}", cfg.depth)));
    }
    Ok(())
}

fn skip_mask(depth: usize, start: usize, n: usize) -> Vec<bool> {
    (0..depth).map(|l| l >= start && l < start + n).collect()
}

/// Mean next-token loss over calibration windows with `skip` layers bypassed.
pub fn calibration_loss(params: &ParamSet, windows: &[Vec<u32>], skip: &[bool], batch_size: usize) -> Result<f64> {
    let len = check_windows(windows)?;
    if len < 2 {
        return Err(Error::Shape("loss windows need at least two tokens".into()));
    }
    let seq = len - 1;
    let opts = ForwardOptions::skipping(skip.to_vec());
    let v = params.config.vocab;
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in windows.chunks(batch_size.max(1)) {
        let inputs: Vec<u32> = chunk.iter().flat_map(|w| w[..seq].iter().copied()).collect();
        let targets: Vec<u32> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let out = forward(params, &inputs, chunk.len(), seq, &opts)?;
        total += crate::model::lm_loss(&out.logits, &targets, v)? * targets.len() as f64;
        count += targets.len();
    }
    Ok(total / count as f64)
}

/// Loss with each contiguous block of `n` layers removed in turn.
pub fn depth_scan_loss(params: &ParamSet, windows: &[Vec<u32>], n: usize, batch_size: usize) -> Result<DepthScan> {
    let cfg = &params.config;
    check_block(cfg, n)?;
    let base = calibration_loss(params, windows, &[], batch_size)?;
    let values = (0..=cfg.depth - n)
        .map(|s| calibration_loss(params, windows, &skip_mask(cfg.depth, s, n), batch_size))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthScan {
        metric: DepthMetric::LmLoss,
        block_size: n,
        depth: cfg.depth,
        values,
        base: Some(base),
        excluded: 0,
        samples: windows.len(),
    })
}

/// `1 - cos(a, b)`, or `None` when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

/// Block importance: mean cosine distance between the residual stream
/// entering a block of `n` layers and the stream leaving it.
pub fn block_importance(params: &ParamSet, windows: &[Vec<u32>], n: usize, batch_size: usize) -> Result<DepthScan> {
    let seq = check_windows(windows)?;
    let cfg = &params.config;
    check_block(cfg, n)?;
    let h = cfg.hidden;
    let starts = cfg.depth - n + 1;
    let mut sums = vec![0.0f64; starts];
    let mut counts = vec![0usize; starts];
    let mut excluded = 0usize;
    let opts = ForwardOptions { taps: TapSpec::residual_only(), ..Default::default() };
    let mut a = vec![0.0f64; h];
    let mut b = vec![0.0f64; h];
    for chunk in windows.chunks(batch_size.max(1)) {
        let toks: Vec<u32> = chunk.concat();
        let out = forward(params, &toks, chunk.len(), seq, &opts)?;
        let res = &out.trace.residual;
        for s in 0..starts {
            let (xin, xout) = (&res[s].data, &res[s + n].data);
            for (rin, rout) in xin.chunks(h).zip(xout.chunks(h)) {
                a.iter_mut().zip(rin).for_each(|(d, &v)| *d = v as f64);
                b.iter_mut().zip(rout).for_each(|(d, &v)| *d = v as f64);
                match cosine_distance(&a, &b) {
                    Some(dist) => {
                        sums[s] += dist;
                        counts[s] += 1;
                    }
                    None => excluded += 1,
                }
            }
        }
    }
    let values = sums.iter().zip(&counts).map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 }).collect();
    Ok(DepthScan {
        metric: DepthMetric::BlockImportance,
        block_size: n,
        depth: cfg.depth,
        values,
        base: Some(0.0),
        excluded,
        samples: windows.len(),
    })
}

/// Fraction of items whose labeled candidate scores strictly higher.
pub fn cloze_accuracy(params: &ParamSet, items: &[ClozeItem], skip: &[bool]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::Empty("cloze set".into()));
    }
    let opts = ForwardOptions::skipping(skip.to_vec());
    let mut correct = 0usize;
    for it in items {
        let prefix = it.prefix_tokens();
        let s0 = crate::model::score_continuation_with(params, &prefix, &it.candidate_tokens(0), &opts)?;
        let s1 = crate::model::score_continuation_with(params, &prefix, &it.candidate_tokens(1), &opts)?;
        let pick = if s0 > s1 {
            Some(0)
        } else if s1 > s0 {
            Some(1)
        } else {
            None
        };
        if pick == Some(it.label) {
            correct += 1;
        }
    }
    Ok(correct as f64 / items.len() as f64)
}

/// Cloze accuracy with each contiguous block of `n` layers removed.
pub fn depth_scan_task(params: &ParamSet, items: &[ClozeItem], n: usize) -> Result<DepthScan> {
    let cfg = &params.config;
    check_block(cfg, n)?;
    let base = cloze_accuracy(params, items, &[])?;
    let values = (0..=cfg.depth - n)
        .map(|s| cloze_accuracy(params, items, &skip_mask(cfg.depth, s, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok(DepthScan {
        metric: DepthMetric::TaskAccuracy,
        block_size: n,
        depth: cfg.depth,
        values,
        base: Some(base),
        excluded: 0,
        samples: items.len(),
    })
}

/// The contiguous block whose removal hurts least: argmax accuracy or argmin
/// loss / BI, lowest start on ties. Returns 0-based layer indices.
pub fn select_contiguous(scan: &DepthScan) -> Result<Vec<usize>> {
    if scan.values.is_empty() {
        return Err(Error::Empty("depth scan".into()));
    }
    let higher = scan.metric.higher_is_more_important();
    let mut best = 0;
    for (i, &v) in scan.values.iter().enumerate() {
        let better = if higher { v < scan.values[best] } else { v > scan.values[best] };
        if better {
            best = i;
        }
    }
    Ok((best..best + scan.block_size).collect())
}

/// The `n_drop` layers whose individual removal hurts least, ascending.
pub fn select_noncontiguous(scan: &DepthScan, n_drop: usize) -> Result<Vec<usize>> {
    if scan.block_size != 1 {
        return Err(Error::InvalidArgument("non-contiguous selection needs a single-layer scan".into()));
    }
    if n_drop == 0 || n_drop >= scan.depth {
        return Err(Error::InvalidArgument(format!("n_drop must satisfy 1 <= n_drop < depth ({})", scan.depth)));
    }
    // Least important first: rank by "importance" and take the tail.
    let importance: Vec<f64> = if scan.metric.higher_is_more_important() {
        scan.values.iter().map(|v| -v).collect()
    } else {
        scan.values.clone()
    };
    let mut picked: Vec<usize> = rank(&importance).into_iter().take(n_drop).collect();
    picked.sort_unstable();
    Ok(picked)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&x, &y| v[x].partial_cmp(&v[y]).unwrap_or(std::cmp::Ordering::Equal));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[idx[k]] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}
