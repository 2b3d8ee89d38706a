//! Scripted experiments. Each preset reads shared per-seed base artifacts
//! from `workspace/base/seed_{s}/`, writes one directory per arm and seed
//! under `workspace/<preset>/`, and finishes with `summary.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{eval_batches, sample_calibration, synth_cloze_set, synth_corpus, ClozeItem, Corpus, Style, TokenBatch};
use crate::error::{Error, Result};
use crate::importance::{
    block_importance, depth_scan_loss, depth_scan_task, estimate_width_importance, select_contiguous,
    select_noncontiguous, spearman, DepthScan, ImportanceOptions,
};
use crate::model::{ModelConfig, ParamSet};
use crate::train::{correct_teacher, distill, distill_interleaved, train_ce, LossMode, MetricsLog, Schedule, TrainConfig};
use crate::trim::{random_prune, trim_depth, trim_width, TrimReport};

use super::{eval_cloze, eval_val_loss};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    TeacherCorrection,
    WidthVsDepth,
    FourwayAblation,
    CorrectionVariants,
    DepthMetrics,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::TeacherCorrection,
        Preset::WidthVsDepth,
        Preset::FourwayAblation,
        Preset::CorrectionVariants,
        Preset::DepthMetrics,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::TeacherCorrection => "teacher_correction",
            Preset::WidthVsDepth => "width_vs_depth",
            Preset::FourwayAblation => "fourway_ablation",
            Preset::CorrectionVariants => "correction_variants",
            Preset::DepthMetrics => "depth_metrics",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown preset {s:?}"))
    }
}

/// Sizes and budgets shared by every preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scale {
    pub name: String,
    pub teacher: ModelConfig,
    pub width_hidden: usize,
    /// Width-student MLP size; solved from parameter parity when absent.
    pub width_mlp: Option<usize>,
    pub depth_student: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub pretrain_tokens: u64,
    pub correction_tokens: u64,
    pub distill_tokens: u64,
    pub retrain_tokens: u64,
    pub pretrain_lr: f64,
    pub peak_lr: f64,
    pub min_lr_ratio: f64,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub corpus_a_tokens: usize,
    pub corpus_b_tokens: usize,
    pub val_batches: usize,
    pub calib_samples: usize,
    pub calib_seq: usize,
    pub cloze_items: usize,
    pub interleave_segments: usize,
}

impl Scale {
    pub fn reference() -> Self {
        Scale {
            name: "reference".into(),
            teacher: ModelConfig {
                depth: 8,
                hidden: 256,
                mlp_hidden: 1024,
                query_heads: 8,
                attention_groups: 4,
                head_dim: 32,
                vocab: crate::data::VOCAB,
                context: 256,
                norm_eps: 1e-5,
                tie_embeddings: false,
            },
            width_hidden: 192,
            width_mlp: None,
            depth_student: 4,
            batch_size: 32,
            seq_len: 256,
            pretrain_tokens: 20_000_000,
            correction_tokens: 2_000_000,
            distill_tokens: 6_000_000,
            retrain_tokens: 2_000_000,
            pretrain_lr: 1e-3,
            peak_lr: 6e-4,
            min_lr_ratio: 0.1,
            warmup_steps: 50,
            eval_interval: 50,
            corpus_a_tokens: 24_000_000,
            corpus_b_tokens: 8_000_000,
            val_batches: 16,
            calib_samples: 1024,
            calib_seq: 256,
            cloze_items: 1000,
            interleave_segments: 8,
        }
    }

    /// A reduced configuration that runs the full suite on a single core
    /// in minutes.
    pub fn quick() -> Self {
        Scale {
            name: "quick".into(),
            teacher: ModelConfig {
                depth: 8,
                hidden: 64,
                mlp_hidden: 256,
                query_heads: 4,
                attention_groups: 2,
                head_dim: 16,
                vocab: crate::data::VOCAB,
                context: 64,
                norm_eps: 1e-5,
                tie_embeddings: false,
            },
            width_hidden: 48,
            width_mlp: None,
            depth_student: 4,
            batch_size: 16,
            seq_len: 64,
            pretrain_tokens: 3600 * 1024,
            correction_tokens: 100 * 1024,
            distill_tokens: 150 * 1024,
            retrain_tokens: 75 * 1024,
            pretrain_lr: 3e-3,
            peak_lr: 2e-3,
            min_lr_ratio: 0.1,
            warmup_steps: 20,
            eval_interval: 25,
            corpus_a_tokens: 4_000_000,
            corpus_b_tokens: 400_000,
            val_batches: 8,
            calib_samples: 64,
            calib_seq: 64,
            cloze_items: 300,
            interleave_segments: 6,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            "quick" => Ok(Self::quick()),
            path => {
                let p = Path::new(path);
                if !p.exists() {
                    return Err(Error::InvalidArgument(format!(
                        "unknown scale {path:?} (expected reference, quick or a JSON file)"
                    )));
                }
                serde_json::from_slice(&std::fs::read(p)?).map_err(|e| Error::Config(format!("{path}: {e}")))
            }
        }
    }

    pub fn depth_student_config(&self) -> ModelConfig {
        ModelConfig { depth: self.depth_student, ..self.teacher.clone() }
    }

    /// Width student with the MLP size that best matches the depth
    /// student's non-embedding parameter count.
    pub fn width_student_config(&self) -> ModelConfig {
        let base = ModelConfig { hidden: self.width_hidden, ..self.teacher.clone() };
        if let Some(m) = self.width_mlp {
            return ModelConfig { mlp_hidden: m, ..base };
        }
        let target = self.depth_student_config().count_params().1 as i64;
        (1..=self.teacher.mlp_hidden)
            .map(|m| ModelConfig { mlp_hidden: m, ..base.clone() })
            .min_by_key(|c| (c.count_params().1 as i64 - target).abs())
            .expect("mlp range is non-empty")
    }

    fn tc(&self, tokens: u64, peak_lr: f64, seed: u64, mode: LossMode) -> TrainConfig {
        TrainConfig {
            peak_lr,
            min_lr: peak_lr * self.min_lr_ratio,
            warmup_steps: self.warmup_steps,
            schedule: Schedule::Cosine,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            total_tokens: tokens,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed,
            loss_mode: mode,
            eval_interval: self.eval_interval,
            ce_mix: 0.0,
            log_wall_time: false,
        }
    }

    pub fn pretrain_tc(&self, seed: u64) -> TrainConfig {
        self.tc(self.pretrain_tokens, self.pretrain_lr, seed, LossMode::Ce)
    }

    pub fn correction_tc(&self, seed: u64) -> TrainConfig {
        self.tc(self.correction_tokens, self.peak_lr, seed ^ 0xc0, LossMode::Ce)
    }

    pub fn distill_tc(&self, seed: u64, mode: LossMode) -> TrainConfig {
        self.tc(self.distill_tokens, self.peak_lr, seed ^ 0xd1, mode)
    }

    pub fn retrain_tc(&self, seed: u64) -> TrainConfig {
        self.tc(self.retrain_tokens, self.peak_lr, seed ^ 0xe7, LossMode::Kl)
    }
}

#[derive(Debug, Clone)]
pub struct PresetOptions {
    pub workspace: PathBuf,
    pub seeds: Vec<u64>,
    pub scale: Scale,
    /// Build missing upstream artifacts instead of failing.
    pub build_deps: bool,
}

/// Seed-derived corpora and evaluation sets, regenerated on demand.
pub struct SeedData {
    pub a_train: Corpus,
    pub b_train: Corpus,
    pub a_val: Vec<TokenBatch>,
    pub b_val: Vec<TokenBatch>,
    pub calibration: Vec<Vec<u32>>,
    pub cloze: Vec<ClozeItem>,
}

impl SeedData {
    pub fn new(scale: &Scale, seed: u64) -> Result<Self> {
        let s = seed.wrapping_mul(1000);
        let a_train = synth_corpus(Style::A, scale.corpus_a_tokens, s + 1)?;
        let b_train = synth_corpus(Style::B, scale.corpus_b_tokens, s + 2)?;
        let val_tokens = scale.val_batches * scale.batch_size * scale.seq_len + 1;
        let a_val = eval_batches(&synth_corpus(Style::A, val_tokens, s + 3)?, scale.seq_len, scale.batch_size, scale.val_batches)?;
        let b_val = eval_batches(&synth_corpus(Style::B, val_tokens, s + 4)?, scale.seq_len, scale.batch_size, scale.val_batches)?;
        let calibration = sample_calibration(&b_train, scale.calib_samples, scale.calib_seq, s + 5)?;
        let cloze = synth_cloze_set(Style::B, scale.cloze_items, s + 6)?;
        Ok(SeedData { a_train, b_train, a_val, b_val, calibration, cloze })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseEval {
    pub teacher_val_a: f64,
    pub teacher_val_b: f64,
    pub corrected_val_b: f64,
}

/// Pretrained and corrected teachers for one seed.
pub struct Base {
    pub teacher: ParamSet,
    pub corrected: ParamSet,
    pub eval: BaseEval,
}

pub fn base_dir(workspace: &Path, seed: u64) -> PathBuf {
    workspace.join("base").join(format!("seed_{seed}"))
}

/// Loads the per-seed teachers, pretraining and correcting them first when
/// `build` is set and they are missing.
pub fn ensure_base(opts: &PresetOptions, seed: u64, data: &SeedData) -> Result<Base> {
    let dir = base_dir(&opts.workspace, seed);
    let teacher_path = dir.join("teacher.mshr");
    let corrected_path = dir.join("teacher_corrected.mshr");
    let eval_path = dir.join("eval.json");
    let scale = &opts.scale;
    if !(teacher_path.exists() && corrected_path.exists() && eval_path.exists()) {
        if !opts.build_deps {
            let missing = [&teacher_path, &corrected_path, &eval_path].into_iter().find(|p| !p.exists());
            return Err(Error::MissingDependency(missing.cloned().unwrap_or(dir)));
        }
        std::fs::create_dir_all(&dir)?;
        let teacher = if teacher_path.exists() {
            load_checkpoint(&teacher_path)?
        } else {
            let init = ParamSet::init(&scale.teacher, seed)?;
            let (t, log) = train_ce(&init, &data.a_train, &scale.pretrain_tc(seed), Some(&data.a_val))?;
            log.write_jsonl(&dir.join("teacher.metrics.jsonl"))?;
            save_checkpoint(&t, &teacher_path)?;
            t
        };
        let (corrected, log) = correct_teacher(&teacher, &data.b_train, &scale.correction_tc(seed), Some(&data.b_val))?;
        log.write_jsonl(&dir.join("teacher_corrected.metrics.jsonl"))?;
        save_checkpoint(&corrected, &corrected_path)?;
        let eval = BaseEval {
            teacher_val_a: eval_val_loss(&teacher, &data.a_val)?,
            teacher_val_b: eval_val_loss(&teacher, &data.b_val)?,
            corrected_val_b: eval_val_loss(&corrected, &data.b_val)?,
        };
        std::fs::write(&eval_path, serde_json::to_vec_pretty(&eval)?)?;
    }
    let teacher = load_checkpoint(&teacher_path)?;
    let corrected = load_checkpoint(&corrected_path)?;
    teacher.check_arch(&scale.teacher)?;
    let eval: BaseEval = serde_json::from_slice(&std::fs::read(&eval_path)?)?;
    Ok(Base { teacher, corrected, eval })
}

/// Outcome of one arm on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub initial_val_loss: Option<f64>,
    pub final_val_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cloze_accuracy: Option<f64>,
    pub non_embedding_params: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// A value is missing, e.g. because an arm diverged.
    Incomplete,
}

/// One directional comparison `lhs <relation> rhs` on seed medians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub description: String,
    pub lhs_label: String,
    pub lhs: Option<f64>,
    pub relation: String,
    pub rhs_label: String,
    pub rhs: Option<f64>,
    /// Whether the verdict counts toward pass/fail of the preset.
    pub asserted: bool,
    pub verdict: Verdict,
}

impl Claim {
    fn new(id: &str, description: &str, lhs: (&str, Option<f64>), relation: &str, rhs: (&str, Option<f64>), asserted: bool) -> Self {
        let verdict = match (lhs.1, rhs.1) {
            (Some(a), Some(b)) if a.is_finite() && b.is_finite() => {
                let ok = match relation {
                    "<" => a < b,
                    "<=" => a <= b,
                    ">" => a > b,
                    ">=" => a >= b,
                    _ => unreachable!("unknown relation"),
                };
                if ok {
                    Verdict::Pass
                } else {
                    Verdict::Fail
                }
            }
            _ => Verdict::Incomplete,
        };
        Claim {
            id: id.into(),
            description: description.into(),
            lhs_label: lhs.0.into(),
            lhs: lhs.1,
            relation: relation.into(),
            rhs_label: rhs.0.into(),
            rhs: rhs.1,
            asserted,
            verdict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub scale: Scale,
    /// `arm -> seed -> result`.
    pub arms: BTreeMap<String, BTreeMap<String, ArmResult>>,
    pub claims: Vec<Claim>,
    /// Preset-specific measurements.
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Summary {
    pub fn claim(&self, id: &str) -> Option<&Claim> {
        self.claims.iter().find(|c| c.id == id)
    }

    pub fn passed(&self) -> bool {
        self.claims.iter().filter(|c| c.asserted).all(|c| c.verdict == Verdict::Pass)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingDependency(path.to_path_buf()));
        }
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    fn arm_values(&self, arm: &str, f: impl Fn(&ArmResult) -> Option<f64>) -> Vec<Option<f64>> {
        let Some(per_seed) = self.arms.get(arm) else { return vec![None] };
        self.seeds.iter().map(|s| per_seed.get(&s.to_string()).and_then(&f)).collect()
    }

    pub fn arm_median(&self, arm: &str, f: impl Fn(&ArmResult) -> Option<f64>) -> Option<f64> {
        median_all(&self.arm_values(arm, f))
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Median of values that must all be present.
fn median_all(values: &[Option<f64>]) -> Option<f64> {
    let v: Option<Vec<f64>> = values.iter().copied().collect();
    median(&v?)
}

fn final_loss(r: &ArmResult) -> Option<f64> {
    r.final_val_loss
}

fn initial_loss(r: &ArmResult) -> Option<f64> {
    r.initial_val_loss
}

struct ArmOutput {
    params: ParamSet,
    log: MetricsLog,
    report: Option<TrimReport>,
}

fn arm_dir(opts: &PresetOptions, preset: Preset, arm: &str, seed: u64) -> PathBuf {
    opts.workspace.join(preset.name()).join(format!("{arm}-seed{seed}"))
}

/// Runs one arm, persists its artifacts and condenses it to an [`ArmResult`].
/// Failures are recorded rather than propagated.
fn record_arm(
    opts: &PresetOptions,
    preset: Preset,
    arm: &str,
    seed: u64,
    cloze: Option<&[ClozeItem]>,
    run: impl FnOnce() -> Result<ArmOutput>,
) -> Result<(ArmResult, Option<ParamSet>)> {
    let dir = arm_dir(opts, preset, arm, seed);
    std::fs::create_dir_all(&dir)?;
    match run() {
        Ok(out) => {
            save_checkpoint(&out.params, &dir.join("checkpoint.mshr"))?;
            out.log.write_jsonl(&dir.join("metrics.jsonl"))?;
            if let Some(rep) = &out.report {
                rep.save(&dir.join("trim_report.json"))?;
            }
            let cloze_accuracy = match cloze {
                Some(items) => Some(eval_cloze(&out.params, items)?),
                None => None,
            };
            let res = ArmResult {
                initial_val_loss: out.log.initial_val_loss(),
                final_val_loss: out.log.final_val_loss(),
                cloze_accuracy,
                non_embedding_params: out.params.config.count_params().1,
                error: None,
            };
            Ok((res, Some(out.params)))
        }
        Err(e @ (Error::Divergence { .. } | Error::Trim(_) | Error::ArchMismatch(_))) => {
            let res = ArmResult {
                initial_val_loss: None,
                final_val_loss: None,
                cloze_accuracy: None,
                non_embedding_params: 0,
                error: Some(e.to_string()),
            };
            Ok((res, None))
        }
        Err(e) => Err(e),
    }
}

fn width_prune(teacher: &ParamSet, scale: &Scale, data: &SeedData, seed: u64) -> Result<(ParamSet, TrimReport)> {
    let mut imp = estimate_width_importance(teacher, &data.calibration, &ImportanceOptions::default())?;
    imp.meta.seed = Some(seed);
    trim_width(teacher, &scale.width_student_config(), &imp)
}

fn depth_prune(teacher: &ParamSet, scale: &Scale, data: &SeedData) -> Result<(ParamSet, TrimReport)> {
    let n = teacher.config.depth - scale.depth_student;
    let scan = depth_scan_loss(teacher, &data.calibration, n, 16)?;
    trim_depth(teacher, &select_contiguous(&scan)?)
}

fn distill_arm(
    student: ParamSet,
    report: Option<TrimReport>,
    teacher: &ParamSet,
    data: &SeedData,
    tc: &TrainConfig,
) -> Result<ArmOutput> {
    let (params, log) = distill(&student, teacher, &data.b_train, tc, Some(&data.b_val))?;
    Ok(ArmOutput { params, log, report })
}

type ArmTable = BTreeMap<String, BTreeMap<String, ArmResult>>;

fn insert(arms: &mut ArmTable, arm: &str, seed: u64, r: ArmResult) {
    arms.entry(arm.to_string()).or_default().insert(seed.to_string(), r);
}

/// Runs a preset over every seed and writes `workspace/<preset>/summary.json`.
pub fn run_preset(preset: Preset, opts: &PresetOptions) -> Result<Summary> {
    if opts.seeds.is_empty() {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    opts.scale.teacher.validate()?;
    let upstream = match preset {
        Preset::CorrectionVariants => Some(upstream_correction_gap(opts)?),
        _ => None,
    };
    let scale = &opts.scale;
    let mut arms = ArmTable::new();
    let mut extra = BTreeMap::new();
    let mut per_seed_extra: BTreeMap<String, serde_json::Value> = BTreeMap::new();
    for &seed in &opts.seeds {
        let data = SeedData::new(scale, seed)?;
        let base = ensure_base(opts, seed, &data)?;
        let dtc = scale.distill_tc(seed, LossMode::Kl);
        match preset {
            Preset::TeacherCorrection => {
                let (r, _) = record_arm(opts, preset, "from-corrected", seed, None, || {
                    let (s, rep) = width_prune(&base.corrected, scale, &data, seed)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "from-corrected", seed, r);
                let (r, _) = record_arm(opts, preset, "from-original", seed, None, || {
                    let (s, rep) = width_prune(&base.teacher, scale, &data, seed)?;
                    distill_arm(s, Some(rep), &base.teacher, &data, &dtc)
                })?;
                insert(&mut arms, "from-original", seed, r);
                per_seed_extra.insert(seed.to_string(), serde_json::to_value(&base.eval)?);
            }
            Preset::WidthVsDepth => {
                let (r, _) = record_arm(opts, preset, "width", seed, None, || {
                    let (s, rep) = width_prune(&base.corrected, scale, &data, seed)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "width", seed, r);
                let (r, _) = record_arm(opts, preset, "depth", seed, None, || {
                    let (s, rep) = depth_prune(&base.corrected, scale, &data)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "depth", seed, r);
            }
            Preset::FourwayAblation => {
                let target = scale.width_student_config();
                let (r, _) = record_arm(opts, preset, "random-init-kl", seed, None, || {
                    let s = ParamSet::init(&target, seed ^ 0x1417)?;
                    distill_arm(s, None, &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "random-init-kl", seed, r);
                let (r, _) = record_arm(opts, preset, "random-prune-kl", seed, None, || {
                    let (s, rep) = random_prune(&base.corrected, &target, seed ^ 0x5a5a)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "random-prune-kl", seed, r);
                let (r, _) = record_arm(opts, preset, "importance-prune-ce", seed, None, || {
                    let (s, rep) = width_prune(&base.corrected, scale, &data, seed)?;
                    let tc = scale.distill_tc(seed, LossMode::Ce);
                    let (params, log) = train_ce(&s, &data.b_train, &tc, Some(&data.b_val))?;
                    Ok(ArmOutput { params, log, report: Some(rep) })
                })?;
                insert(&mut arms, "importance-prune-ce", seed, r);
                let (r, _) = record_arm(opts, preset, "importance-prune-kl", seed, None, || {
                    let (s, rep) = width_prune(&base.corrected, scale, &data, seed)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "importance-prune-kl", seed, r);
            }
            Preset::CorrectionVariants => {
                let (r, _) = record_arm(opts, preset, "prune-corrected", seed, None, || {
                    let (s, rep) = width_prune(&base.corrected, scale, &data, seed)?;
                    distill_arm(s, Some(rep), &base.corrected, &data, &dtc)
                })?;
                insert(&mut arms, "prune-corrected", seed, r);
                let (r, _) = record_arm(opts, preset, "prune-original-interleaved", seed, None, || {
                    let (s, rep) = width_prune(&base.teacher, scale, &data, seed)?;
                    let (params, log, _) = distill_interleaved(
                        &s,
                        &base.teacher,
                        &data.b_train,
                        &dtc,
                        &scale.correction_tc(seed),
                        scale.interleave_segments,
                        Some(&data.b_val),
                    )?;
                    Ok(ArmOutput { params, log, report: Some(rep) })
                })?;
                insert(&mut arms, "prune-original-interleaved", seed, r);
            }
            Preset::DepthMetrics => {
                let v = depth_metrics_seed(opts, seed, &base, &data, &mut arms)?;
                per_seed_extra.insert(seed.to_string(), v);
            }
        }
    }
    if !per_seed_extra.is_empty() {
        extra.insert("per_seed".into(), serde_json::to_value(&per_seed_extra)?);
    }
    let mut summary = Summary { preset, seeds: opts.seeds.clone(), scale: scale.clone(), arms, claims: Vec::new(), extra };
    summary.claims = claims_for(&mut summary, upstream)?;
    let dir = opts.workspace.join(preset.name());
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(summary)
}

/// Median correction gap (nats) measured by the teacher_correction preset.
fn upstream_correction_gap(opts: &PresetOptions) -> Result<f64> {
    let path = opts.workspace.join(Preset::TeacherCorrection.name()).join("summary.json");
    let fresh = |s: &Summary| s.seeds == opts.seeds && s.scale == opts.scale;
    let summary = match Summary::load(&path) {
        Ok(s) if fresh(&s) => s,
        Ok(_) | Err(Error::MissingDependency(_)) if opts.build_deps => run_preset(Preset::TeacherCorrection, opts)?,
        Ok(_) => {
            return Err(Error::InvalidArgument(format!(
                "{} was produced with different seeds or scale",
                path.display()
            )))
        }
        Err(e) => return Err(e),
    };
    summary
        .extra
        .get("correction_gap")
        .and_then(|v| v.as_f64())
        .ok_or_else(|| Error::InvalidArgument("teacher_correction summary lacks a correction gap".into()))
}

fn depth_metrics_seed(
    opts: &PresetOptions,
    seed: u64,
    base: &Base,
    data: &SeedData,
    arms: &mut ArmTable,
) -> Result<serde_json::Value> {
    let scale = &opts.scale;
    let teacher = &base.corrected;
    let depth = teacher.config.depth;
    let mut sizes = vec![1, 2, depth / 4, depth / 2];
    sizes.retain(|&n| n >= 1 && n < depth);
    sizes.sort_unstable();
    sizes.dedup();
    let scan_dir = opts.workspace.join(Preset::DepthMetrics.name()).join(format!("scans-seed{seed}"));
    std::fs::create_dir_all(&scan_dir)?;
    let mut scans: BTreeMap<String, DepthScan> = BTreeMap::new();
    for &n in &sizes {
        let set = [
            ("loss", depth_scan_loss(teacher, &data.calibration, n, 16)?),
            ("bi", block_importance(teacher, &data.calibration, n, 16)?),
            ("task", depth_scan_task(teacher, &data.cloze, n)?),
        ];
        for (metric, scan) in set {
            let stem = format!("{metric}_n{n}");
            scan.write_csv(&scan_dir.join(format!("{stem}.csv")))?;
            scan.save(&scan_dir.join(format!("{stem}.json")))?;
            scans.insert(stem, scan);
        }
    }
    let loss1 = &scans["loss_n1"];
    let bi1 = &scans["bi_n1"];
    let rho = spearman(&bi1.values, &loss1.values);
    let drop = depth - scale.depth_student;
    let contiguous = select_contiguous(&depth_scan_task(teacher, &data.cloze, drop)?)?;
    let noncontiguous = select_noncontiguous(loss1, drop)?;
    let tc = scale.retrain_tc(seed);
    for (arm, layers) in [("contiguous", &contiguous), ("noncontiguous", &noncontiguous)] {
        let (r, _) = record_arm(opts, Preset::DepthMetrics, arm, seed, Some(&data.cloze), || {
            let (s, rep) = trim_depth(teacher, layers)?;
            distill_arm(s, Some(rep), teacher, data, &tc)
        })?;
        insert(arms, arm, seed, r);
    }
    Ok(serde_json::json!({
        "block_sizes": sizes,
        "spearman_bi_loss": rho,
        "contiguous_layers": contiguous,
        "noncontiguous_layers": noncontiguous,
        "teacher_cloze_accuracy": eval_cloze(teacher, &data.cloze)?,
    }))
}

fn claims_for(summary: &mut Summary, upstream_gap: Option<f64>) -> Result<Vec<Claim>> {
    let s = &*summary;
    let mut claims = Vec::new();
    let mut extra = BTreeMap::new();
    match s.preset {
        Preset::TeacherCorrection => {
            let corr = s.arm_median("from-corrected", final_loss);
            let orig = s.arm_median("from-original", final_loss);
            claims.push(Claim::new(
                "correction_lowers_student_loss",
                "student distilled from the corrected teacher ends with lower validation loss on the distillation corpus",
                ("from-corrected final val loss", corr),
                "<",
                ("from-original final val loss", orig),
                true,
            ));
            if let (Some(c), Some(o)) = (corr, orig) {
                extra.insert("correction_gap".to_string(), serde_json::json!(o - c));
                extra.insert("correction_gap_relative".to_string(), serde_json::json!((o - c) / o));
            }
            let per_seed = s.extra.get("per_seed").cloned().unwrap_or_default();
            let pick = |key: &str| -> Option<f64> {
                let v: Option<Vec<f64>> =
                    s.seeds.iter().map(|sd| per_seed.get(sd.to_string()).and_then(|e| e.get(key)).and_then(|x| x.as_f64())).collect();
                median(&v?)
            };
            claims.push(Claim::new(
                "correction_lowers_teacher_loss",
                "teacher correction lowers the teacher's validation loss on the distillation corpus",
                ("corrected teacher val loss (B)", pick("corrected_val_b")),
                "<",
                ("original teacher val loss (B)", pick("teacher_val_b")),
                true,
            ));
            let shift = pick("teacher_val_a").map(|a| a * 1.1);
            claims.push(Claim::new(
                "distribution_shift",
                "original teacher loss on the distillation corpus exceeds its pretraining-corpus loss by at least 10% relative",
                ("original teacher val loss (B)", pick("teacher_val_b")),
                ">=",
                ("1.1 x original teacher val loss (A)", shift),
                false,
            ));
        }
        Preset::WidthVsDepth => {
            let pw = s.arm_median("width", |r| Some(r.non_embedding_params as f64));
            let pd = s.arm_median("depth", |r| Some(r.non_embedding_params as f64));
            let mismatch = match (pw, pd) {
                (Some(w), Some(d)) if d > 0.0 => Some((w - d).abs() / d),
                _ => None,
            };
            claims.push(Claim::new(
                "iso_parameter",
                "width and depth students match non-embedding parameter counts within 2%",
                ("relative parameter mismatch", mismatch),
                "<=",
                ("tolerance", Some(0.02)),
                true,
            ));
            claims.push(Claim::new(
                "width_lower_initial_loss",
                "width-pruned student starts from a lower validation loss than the depth-pruned student",
                ("width initial val loss", s.arm_median("width", initial_loss)),
                "<",
                ("depth initial val loss", s.arm_median("depth", initial_loss)),
                true,
            ));
            claims.push(Claim::new(
                "width_lower_final_loss",
                "width-pruned student ends with a lower validation loss than the depth-pruned student",
                ("width final val loss", s.arm_median("width", final_loss)),
                "<",
                ("depth final val loss", s.arm_median("depth", final_loss)),
                true,
            ));
        }
        Preset::FourwayAblation => {
            let best = s.arm_median("importance-prune-kl", final_loss);
            for (id, other, what) in [
                ("beats_random_init", "random-init-kl", "a randomly initialized student"),
                ("beats_random_prune", "random-prune-kl", "a randomly pruned student"),
                ("beats_ce_retraining", "importance-prune-ce", "the same pruned student retrained with cross-entropy"),
            ] {
                claims.push(Claim::new(
                    id,
                    &format!("importance-pruned student distilled with KL ends below {what}"),
                    ("importance-prune-kl final val loss", best),
                    "<",
                    (&format!("{other} final val loss"), s.arm_median(other, final_loss)),
                    true,
                ));
            }
        }
        Preset::CorrectionVariants => {
            let a = s.arm_values("prune-corrected", final_loss);
            let b = s.arm_values("prune-original-interleaved", final_loss);
            let diffs: Vec<Option<f64>> = a.iter().zip(&b).map(|(x, y)| Some((x.as_ref()? - y.as_ref()?).abs())).collect();
            let diff = median_all(&diffs);
            let gap = upstream_gap.map(|g| 0.1 * g.abs());
            extra.insert("upstream_correction_gap".to_string(), serde_json::json!(upstream_gap));
            claims.push(Claim::new(
                "pruning_order_insensitive",
                "pruning the corrected teacher and pruning the original teacher while correcting during distillation end within 10% of the correction gap",
                ("median |final loss difference|", diff),
                "<=",
                ("0.1 x correction gap", gap),
                true,
            ));
        }
        Preset::DepthMetrics => {
            let per_seed = s.extra.get("per_seed").cloned().unwrap_or_default();
            let rhos: Option<Vec<f64>> = s
                .seeds
                .iter()
                .map(|sd| per_seed.get(sd.to_string()).and_then(|e| e.get("spearman_bi_loss")).and_then(|x| x.as_f64()))
                .collect();
            claims.push(Claim::new(
                "bi_tracks_loss",
                "single-layer block importance and loss-increase rankings are positively rank-correlated",
                ("median Spearman correlation", rhos.and_then(|r| median(&r))),
                ">",
                ("zero", Some(0.0)),
                true,
            ));
            claims.push(Claim::new(
                "contiguous_not_worse",
                "after retraining, dropping the best contiguous block is at least as accurate as dropping the individually least important layers",
                ("contiguous cloze accuracy", s.arm_median("contiguous", |r| r.cloze_accuracy)),
                ">=",
                ("non-contiguous cloze accuracy", s.arm_median("noncontiguous", |r| r.cloze_accuracy)),
                false,
            ));
        }
    }
    summary.extra.extend(extra);
    Ok(claims)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert_eq!(median_all(&[Some(1.0), None]), None);
    }

    #[test]
    fn width_student_matches_depth_student() {
        for scale in [Scale::reference(), Scale::quick()] {
            let w = scale.width_student_config().count_params().1 as f64;
            let d = scale.depth_student_config().count_params().1 as f64;
            assert!((w - d).abs() / d <= 0.02, "{}: {w} vs {d}", scale.name);
        }
    }

    #[test]
    fn claim_verdicts() {
        let c = Claim::new("x", "", ("a", Some(1.0)), "<", ("b", Some(2.0)), true);
        assert_eq!(c.verdict, Verdict::Pass);
        let c = Claim::new("x", "", ("a", None), "<", ("b", Some(2.0)), true);
        assert_eq!(c.verdict, Verdict::Incomplete);
        let c = Claim::new("x", "", ("a", Some(3.0)), "<=", ("b", Some(2.0)), true);
        assert_eq!(c.verdict, Verdict::Fail);
    }

    #[test]
    fn preset_names_roundtrip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
    }
}
