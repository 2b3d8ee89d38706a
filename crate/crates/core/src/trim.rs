//! Single-shot structural trimming along width axes and depth.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{rank, WidthImportance};
use crate::model::{ModelConfig, ParamSet, Tensor};

/// Kept unit indices per axis, in original order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimPlan {
    pub source: ModelConfig,
    pub target: ModelConfig,
    /// `[layer] -> kept MLP neurons`.
    pub neurons: Vec<Vec<usize>>,
    /// `[layer] -> kept query heads`.
    pub heads: Vec<Vec<usize>>,
    /// `[layer] -> kept KV groups`.
    pub groups: Vec<Vec<usize>>,
    pub channels: Vec<usize>,
}

fn all(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Checks that `target` is a width-shrink of `source` on trimmable axes only.
pub fn check_width_target(source: &ModelConfig, target: &ModelConfig) -> Result<()> {
    target.validate()?;
    let mut v = Vec::new();
    let fixed = [
        ("depth", source.depth, target.depth),
        ("head_dim", source.head_dim, target.head_dim),
        ("vocab", source.vocab, target.vocab),
        ("context", source.context, target.context),
    ];
    for (name, s, t) in fixed {
        if s != t {
            v.push(format!("{name} cannot change in a width trim ({s} -> {t})"));
        }
    }
    if source.tie_embeddings != target.tie_embeddings {
        v.push("tie_embeddings cannot change".into());
    }
    if source.norm_eps != target.norm_eps {
        v.push("norm_eps cannot change".into());
    }
    let shrink = [
        ("hidden", source.hidden, target.hidden),
        ("mlp_hidden", source.mlp_hidden, target.mlp_hidden),
        ("query_heads", source.query_heads, target.query_heads),
        ("attention_groups", source.attention_groups, target.attention_groups),
    ];
    for (name, s, t) in shrink {
        if t > s {
            v.push(format!("target {name} {t} exceeds source {s}"));
        }
    }
    if v.is_empty() && target.heads_per_group() > source.heads_per_group() {
        v.push(format!(
            "target keeps {} heads per group but source groups only hold {}",
            target.heads_per_group(),
            source.heads_per_group()
        ));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(Error::ArchMismatch(v))
    }
}

impl TrimPlan {
    /// Keeps every unit.
    pub fn identity(cfg: &ModelConfig) -> Self {
        TrimPlan {
            source: cfg.clone(),
            target: cfg.clone(),
            neurons: vec![all(cfg.mlp_hidden); cfg.depth],
            heads: vec![all(cfg.query_heads); cfg.depth],
            groups: vec![all(cfg.attention_groups); cfg.depth],
            channels: all(cfg.hidden),
        }
    }

    /// Top-ranked units per axis. Heads: groups ranked by mean head score,
    /// then the best heads inside each kept group.
    pub fn from_importance(source: &ModelConfig, target: &ModelConfig, imp: &WidthImportance) -> Result<Self> {
        check_width_target(source, target)?;
        imp.check_against(source)?;
        let top = |scores: &[f64], k: usize| {
            let mut keep: Vec<usize> = rank(scores).into_iter().take(k).collect();
            keep.sort_unstable();
            keep
        };
        let hpg = source.heads_per_group();
        let group_scores = imp.group_scores();
        let mut neurons = Vec::with_capacity(source.depth);
        let mut heads = Vec::with_capacity(source.depth);
        let mut groups = Vec::with_capacity(source.depth);
        for l in 0..source.depth {
            neurons.push(top(&imp.neurons[l], target.mlp_hidden));
            let kept_groups = top(&group_scores[l], target.attention_groups);
            let mut kept_heads = Vec::new();
            for &g in &kept_groups {
                let within = &imp.heads[l][g * hpg..(g + 1) * hpg];
                kept_heads.extend(top(within, target.heads_per_group()).into_iter().map(|h| g * hpg + h));
            }
            heads.push(kept_heads);
            groups.push(kept_groups);
        }
        Ok(TrimPlan {
            source: source.clone(),
            target: target.clone(),
            neurons,
            heads,
            groups,
            channels: top(&imp.channels, target.hidden),
        })
    }

    /// Uniformly random keep-sets, deterministic in `seed`.
    pub fn random(source: &ModelConfig, target: &ModelConfig, seed: u64) -> Result<Self> {
        check_width_target(source, target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pick = |n: usize, k: usize| {
            let mut v = rand::seq::index::sample(&mut rng, n, k).into_vec();
            v.sort_unstable();
            v
        };
        let hpg = source.heads_per_group();
        let mut neurons = Vec::new();
        let mut heads = Vec::new();
        let mut groups = Vec::new();
        for _ in 0..source.depth {
            neurons.push(pick(source.mlp_hidden, target.mlp_hidden));
            let kept_groups = pick(source.attention_groups, target.attention_groups);
            let mut kept_heads = Vec::new();
            for &g in &kept_groups {
                kept_heads.extend(pick(hpg, target.heads_per_group()).into_iter().map(|h| g * hpg + h));
            }
            heads.push(kept_heads);
            groups.push(kept_groups);
        }
        let channels = pick(source.hidden, target.hidden);
        Ok(TrimPlan { source: source.clone(), target: target.clone(), neurons, heads, groups, channels })
    }

    fn check(&self) -> Result<()> {
        let s = &self.source;
        let t = &self.target;
        let mut v = Vec::new();
        let sorted_in = |keep: &[usize], n: usize| keep.windows(2).all(|w| w[0] < w[1]) && keep.iter().all(|&i| i < n);
        if self.neurons.len() != s.depth || self.heads.len() != s.depth || self.groups.len() != s.depth {
            v.push("keep-sets must cover every layer".into());
        }
        for l in 0..self.neurons.len().min(self.heads.len()).min(self.groups.len()) {
            if self.neurons[l].len() != t.mlp_hidden || !sorted_in(&self.neurons[l], s.mlp_hidden) {
                v.push(format!("layer {l}: neuron keep-set invalid"));
            }
            if self.groups[l].len() != t.attention_groups || !sorted_in(&self.groups[l], s.attention_groups) {
                v.push(format!("layer {l}: group keep-set invalid"));
            }
            let hs = &self.heads[l];
            if hs.len() != t.query_heads || !sorted_in(hs, s.query_heads) {
                v.push(format!("layer {l}: head keep-set invalid"));
            } else {
                let hpg = s.heads_per_group();
                let tpg = t.heads_per_group();
                for (j, &g) in self.groups[l].iter().enumerate() {
                    if hs[j * tpg..(j + 1) * tpg].iter().any(|&h| h / hpg != g) {
                        v.push(format!("layer {l}: heads of kept group {g} do not match"));
                    }
                }
            }
        }
        if self.channels.len() != t.hidden || !sorted_in(&self.channels, s.hidden) {
            v.push("channel keep-set invalid".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Trim(v.join("; ")))
        }
    }

    pub fn report(&self, method: &str, importance_digest: Option<String>, seed: Option<u64>) -> TrimReport {
        let per_layer = |sets: &[Vec<usize>]| sets.iter().enumerate().map(|(l, k)| (l.to_string(), k.clone())).collect();
        let mut axes = BTreeMap::new();
        axes.insert("neurons".to_string(), per_layer(&self.neurons));
        axes.insert("heads".to_string(), per_layer(&self.heads));
        axes.insert("kv_groups".to_string(), per_layer(&self.groups));
        axes.insert("channels".to_string(), BTreeMap::from([("all".to_string(), self.channels.clone())]));
        TrimReport {
            source_cfg: self.source.clone(),
            target_cfg: self.target.clone(),
            axes,
            dropped_layers: Vec::new(),
            method: method.into(),
            importance_digest,
            seed,
        }
    }
}

/// Audit record written next to every trimmed checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrimReport {
    pub source_cfg: ModelConfig,
    pub target_cfg: ModelConfig,
    /// `axis -> layer -> kept indices`; channels use the single key `"all"`.
    pub axes: BTreeMap<String, BTreeMap<String, Vec<usize>>>,
    pub dropped_layers: Vec<usize>,
    pub method: String,
    pub importance_digest: Option<String>,
    pub seed: Option<u64>,
}

impl TrimReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// Row/column gather from a 2-D tensor, or element gather from a 1-D one.
fn gather(t: &Tensor, rows: Option<&[usize]>, cols: Option<&[usize]>) -> Tensor {
    if t.shape.len() == 1 {
        let idx = rows.or(cols).expect("1-D gather needs indices");
        return Tensor { shape: vec![idx.len()], data: idx.iter().map(|&i| t.data[i]).collect() };
    }
    let (r, c) = t.dims2();
    let row_idx: Vec<usize> = rows.map(<[usize]>::to_vec).unwrap_or_else(|| all(r));
    let col_idx: Vec<usize> = cols.map(<[usize]>::to_vec).unwrap_or_else(|| all(c));
    let mut data = Vec::with_capacity(row_idx.len() * col_idx.len());
    for &i in &row_idx {
        let row = &t.data[i * c..(i + 1) * c];
        data.extend(col_idx.iter().map(|&j| row[j]));
    }
    Tensor { shape: vec![row_idx.len(), col_idx.len()], data }
}

fn expand(units: &[usize], width: usize) -> Vec<usize> {
    units.iter().flat_map(|&u| u * width..(u + 1) * width).collect()
}

/// Applies a keep-set plan, producing a model of `plan.target` shape.
pub fn apply_plan(params: &ParamSet, plan: &TrimPlan) -> Result<ParamSet> {
    params.check_arch(&plan.source)?;
    plan.check()?;
    let ch = plan.channels.as_slice();
    let hd = plan.source.head_dim;
    let mut out = BTreeMap::new();
    let mut put = |name: String, t: Tensor| {
        out.insert(name, t);
    };
    put("embed.tok".into(), gather(params.get("embed.tok")?, None, Some(ch)));
    for l in 0..plan.source.depth {
        let p = |s: &str| format!("layer.{l}.{s}");
        let q_rows = expand(&plan.heads[l], hd);
        let kv_rows = expand(&plan.groups[l], hd);
        let nr = plan.neurons[l].as_slice();
        put(p("norm.attn"), gather(params.get(&p("norm.attn"))?, Some(ch), None));
        put(p("norm.mlp"), gather(params.get(&p("norm.mlp"))?, Some(ch), None));
        put(p("attn.q"), gather(params.get(&p("attn.q"))?, Some(&q_rows), Some(ch)));
        put(p("attn.k"), gather(params.get(&p("attn.k"))?, Some(&kv_rows), Some(ch)));
        put(p("attn.v"), gather(params.get(&p("attn.v"))?, Some(&kv_rows), Some(ch)));
        put(p("attn.o"), gather(params.get(&p("attn.o"))?, Some(ch), Some(&q_rows)));
        put(p("mlp.gate"), gather(params.get(&p("mlp.gate"))?, Some(nr), Some(ch)));
        put(p("mlp.up"), gather(params.get(&p("mlp.up"))?, Some(nr), Some(ch)));
        put(p("mlp.down"), gather(params.get(&p("mlp.down"))?, Some(ch), Some(nr)));
    }
    put("final.norm".into(), gather(params.get("final.norm")?, Some(ch), None));
    if !plan.source.tie_embeddings {
        put("head.out".into(), gather(params.get("head.out")?, None, Some(ch)));
    }
    let trimmed = ParamSet { config: plan.target.clone(), tensors: out };
    trimmed.check_arch(&plan.target)?;
    Ok(trimmed)
}

/// Importance-ranked width trim.
pub fn trim_width(params: &ParamSet, target: &ModelConfig, imp: &WidthImportance) -> Result<(ParamSet, TrimReport)> {
    let plan = TrimPlan::from_importance(&params.config, target, imp)?;
    let out = apply_plan(params, &plan)?;
    Ok((out, plan.report("importance", Some(imp.digest()), None)))
}

/// Random keep-sets with the same mechanics as [`trim_width`].
pub fn random_prune(params: &ParamSet, target: &ModelConfig, seed: u64) -> Result<(ParamSet, TrimReport)> {
    let plan = TrimPlan::random(&params.config, target, seed)?;
    let out = apply_plan(params, &plan)?;
    Ok((out, plan.report("random", None, Some(seed))))
}

/// Removes whole layers and renumbers the rest in order.
pub fn trim_depth(params: &ParamSet, drop: &[usize]) -> Result<(ParamSet, TrimReport)> {
    let cfg = &params.config;
    params.check_arch(cfg)?;
    let mut drop_sorted = drop.to_vec();
    drop_sorted.sort_unstable();
    drop_sorted.dedup();
    if drop_sorted.is_empty() {
        return Err(Error::Trim("drop set is empty".into()));
    }
    if drop_sorted.len() != drop.len() {
        return Err(Error::Trim("drop set has duplicates".into()));
    }
    if let Some(&bad) = drop_sorted.iter().find(|&&l| l >= cfg.depth) {
        return Err(Error::Trim(format!("layer {bad} out of range for depth {}", cfg.depth)));
    }
    if drop_sorted.len() >= cfg.depth {
        return Err(Error::Trim("cannot drop every layer".into()));
    }
    let keep: Vec<usize> = (0..cfg.depth).filter(|l| drop_sorted.binary_search(l).is_err()).collect();
    let mut target = cfg.clone();
    target.depth = keep.len();
    let mut tensors = BTreeMap::new();
    for (name, t) in &params.tensors {
        if !name.starts_with("layer.") {
            tensors.insert(name.clone(), t.clone());
        }
    }
    for (new, &old) in keep.iter().enumerate() {
        let prefix = format!("layer.{old}.");
        for (name, t) in params.tensors.range(prefix.clone()..) {
            let Some(rest) = name.strip_prefix(&prefix) else { break };
            tensors.insert(format!("layer.{new}.{rest}"), t.clone());
        }
    }
    let out = ParamSet { config: target.clone(), tensors };
    out.check_arch(&target)?;
    let report = TrimReport {
        source_cfg: cfg.clone(),
        target_cfg: target,
        axes: BTreeMap::from([(
            "layers".to_string(),
            BTreeMap::from([("kept".to_string(), keep)]),
        )]),
        dropped_layers: drop_sorted,
        method: "depth".into(),
        importance_digest: None,
        seed: None,
    };
    Ok((out, report))
}

/// Full shape audit of `params` against `cfg`.
pub fn check_arch(params: &ParamSet, cfg: &ModelConfig) -> std::result::Result<(), Vec<String>> {
    let v = params.arch_violations(cfg);
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}
