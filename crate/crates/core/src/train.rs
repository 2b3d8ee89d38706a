//! Training loops: next-token cross-entropy, teacher correction and
//! logit-only forward-KL distillation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{build_batches, BatchStream, Corpus, TokenBatch};
use crate::error::{Error, Result};
use crate::evalx::eval_val_loss;
use crate::model::{backward, forward, ForwardOptions, LossSpec, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    Kl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Cosine,
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.95
}
fn d_eps() -> f64 {
    1e-8
}
fn d_wd() -> f64 {
    0.1
}
fn d_clip() -> f64 {
    1.0
}
fn d_eval_interval() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    #[serde(default)]
    pub schedule: Schedule,
    pub batch_size: usize,
    pub seq_len: usize,
    pub total_tokens: u64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    /// Decoupled decay, applied to matrices only.
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    #[serde(default = "d_clip")]
    pub grad_clip: f64,
    pub seed: u64,
    pub loss_mode: LossMode,
    #[serde(default = "d_eval_interval")]
    pub eval_interval: usize,
    /// Weight of an extra cross-entropy term during distillation. Off by default.
    #[serde(default)]
    pub ce_mix: f64,
    /// Record wall-clock seconds per record (breaks byte-identical logs).
    #[serde(default)]
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn tokens_per_step(&self) -> u64 {
        (self.batch_size * self.seq_len) as u64
    }

    pub fn total_steps(&self) -> usize {
        (self.total_tokens / self.tokens_per_step().max(1)) as usize
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            v.push("peak_lr must be finite and >= 0".into());
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.peak_lr) {
            v.push("min_lr must satisfy 0 <= min_lr <= peak_lr".into());
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            v.push("batch_size and seq_len must be >= 1".into());
        }
        if self.total_tokens < self.tokens_per_step() {
            v.push(format!(
                "total_tokens {} is less than one batch ({} tokens)",
                self.total_tokens,
                self.tokens_per_step()
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 || self.ce_mix < 0.0 {
            v.push("eps must be > 0; weight_decay, grad_clip and ce_mix >= 0".into());
        }
        if self.eval_interval == 0 {
            v.push("eval_interval must be >= 1".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(v))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        Ok(cfg)
    }

    pub fn with_tokens(&self, total_tokens: u64) -> Self {
        TrainConfig { total_tokens, ..self.clone() }
    }
}

/// Linear warmup to `peak_lr`, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, tc: &TrainConfig, total_steps: usize) -> f64 {
    if step < tc.warmup_steps {
        return tc.peak_lr * step as f64 / tc.warmup_steps as f64;
    }
    if total_steps <= tc.warmup_steps {
        return tc.peak_lr;
    }
    let p = ((step - tc.warmup_steps) as f64 / (total_steps - tc.warmup_steps) as f64).min(1.0);
    tc.min_lr + (tc.peak_lr - tc.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub step: usize,
    pub tokens_seen: u64,
    pub lr: f64,
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_s: Option<f64>,
}

/// Append-only training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub records: Vec<MetricRecord>,
}

impl MetricsLog {
    pub fn push(&mut self, r: MetricRecord) {
        if let Some(last) = self.records.last() {
            assert!(r.step > last.step, "metric steps must increase");
        }
        self.records.push(r);
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.val_loss)
    }

    pub fn initial_val_loss(&self) -> Option<f64> {
        self.records.iter().find_map(|r| r.val_loss)
    }

    pub fn val_series(&self) -> Vec<(usize, f64)> {
        self.records.iter().filter_map(|r| r.val_loss.map(|v| (r.step, v))).collect()
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).expect("record serializes");
            out.push(b'\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_jsonl())?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut log = MetricsLog::default();
        for line in f.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                log.records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(log)
    }
}

/// AdamW with decoupled weight decay on 2-D tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: u32,
}

impl AdamW {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| p.tensors.iter().map(|(k, t)| (k.clone(), vec![0.0f32; t.numel()])).collect();
        AdamW { m: zeros(params), v: zeros(params), t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, lr: f64, tc: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.t as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.t as i32);
        let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
        let step = (lr / bc1) as f32;
        let inv_bc2 = (1.0 / bc2) as f32;
        let eps = tc.eps as f32;
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let decay = if p.shape.len() >= 2 { (1.0 - lr * tc.weight_decay) as f32 } else { 1.0 };
            let m = self.m.get_mut(name).expect("optimizer state");
            let v = self.v.get_mut(name).expect("optimizer state");
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p.data[i] = p.data[i] * decay - step * m[i] / denom;
            }
        }
    }
}

fn clip(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data.iter())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().for_each(|t| t.data.iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// What a student is trained against.
#[derive(Clone, Copy)]
pub enum Objective<'a> {
    Ce,
    Kl { teacher: &'a ParamSet },
}

/// A resumable optimization run over one batch stream.
pub struct Trainer {
    pub params: ParamSet,
    pub log: MetricsLog,
    pub tc: TrainConfig,
    opt: AdamW,
    stream: BatchStream,
    step: usize,
    total_steps: usize,
    started: Instant,
}

impl Trainer {
    pub fn new(params: ParamSet, corpus: &Corpus, tc: &TrainConfig) -> Result<Self> {
        tc.validate()?;
        if tc.seq_len > params.config.context {
            return Err(Error::SequenceTooLong { len: tc.seq_len, context: params.config.context });
        }
        let stream = build_batches(corpus, tc.seq_len, tc.batch_size, tc.seed)?;
        Ok(Trainer {
            opt: AdamW::new(&params),
            params,
            log: MetricsLog::default(),
            tc: tc.clone(),
            stream,
            step: 0,
            total_steps: tc.total_steps(),
            started: Instant::now(),
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn finished(&self) -> bool {
        self.step >= self.total_steps
    }

    fn wall(&self) -> Option<f64> {
        self.tc.log_wall_time.then(|| self.started.elapsed().as_secs_f64())
    }

    /// Logs the starting validation loss as step 0.
    pub fn log_initial(&mut self, val: Option<&[TokenBatch]>) -> Result<()> {
        if self.step == 0 && self.log.records.is_empty() {
            if let Some(v) = val {
                let loss = eval_val_loss(&self.params, v)?;
                let wall_s = self.wall();
                self.log.push(MetricRecord {
                    step: 0,
                    tokens_seen: 0,
                    lr: lr_at(0, &self.tc, self.total_steps),
                    train_loss: None,
                    val_loss: Some(loss),
                    wall_s,
                });
            }
        }
        Ok(())
    }

    fn batch_loss_grads(&self, batch: &TokenBatch, objective: Objective<'_>) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let p = &self.params;
        match objective {
            Objective::Ce => {
                backward(p, &batch.inputs, batch.batch, batch.seq, LossSpec::CrossEntropy { targets: &batch.targets })
            }
            Objective::Kl { teacher } => {
                if teacher.config.vocab != p.config.vocab {
                    return Err(Error::ArchMismatch(vec![format!(
                        "teacher vocab {} differs from student vocab {}",
                        teacher.config.vocab, p.config.vocab
                    )]));
                }
                let t = forward(teacher, &batch.inputs, batch.batch, batch.seq, &ForwardOptions::default())?;
                let spec = if self.tc.ce_mix > 0.0 {
                    LossSpec::KlWithCe { teacher_logits: &t.logits, targets: &batch.targets, ce_weight: self.tc.ce_mix }
                } else {
                    LossSpec::Kl { teacher_logits: &t.logits }
                };
                backward(p, &batch.inputs, batch.batch, batch.seq, spec)
            }
        }
    }

    /// Runs up to `n` more optimizer steps.
    pub fn run_steps(&mut self, n: usize, objective: Objective<'_>, val: Option<&[TokenBatch]>) -> Result<()> {
        self.log_initial(val)?;
        let end = (self.step + n).min(self.total_steps);
        while self.step < end {
            let batch = self.stream.next().expect("batch stream is endless");
            let lr = lr_at(self.step, &self.tc, self.total_steps);
            let (loss, mut grads) = match self.batch_loss_grads(&batch, objective) {
                Ok(x) => x,
                Err(Error::Divergence { loss, .. }) => return Err(Error::Divergence { step: self.step, loss }),
                Err(e) => return Err(e),
            };
            clip(&mut grads, self.tc.grad_clip);
            self.opt.step(&mut self.params, &grads, lr, &self.tc);
            self.step += 1;
            let eval_now = self.step.is_multiple_of(self.tc.eval_interval) || self.step == self.total_steps;
            let val_loss = match (val, eval_now) {
                (Some(v), true) => Some(eval_val_loss(&self.params, v)?),
                _ => None,
            };
            let wall_s = self.wall();
            self.log.push(MetricRecord {
                step: self.step,
                tokens_seen: self.step as u64 * self.tc.tokens_per_step(),
                lr,
                train_loss: Some(loss),
                val_loss,
                wall_s,
            });
        }
        Ok(())
    }

    pub fn run_to_end(&mut self, objective: Objective<'_>, val: Option<&[TokenBatch]>) -> Result<()> {
        let rest = self.total_steps - self.step;
        self.run_steps(rest, objective, val)
    }

    pub fn into_parts(self) -> (ParamSet, MetricsLog) {
        (self.params, self.log)
    }
}

/// Cross-entropy training for exactly `total_tokens / (batch * seq)` steps.
pub fn train_ce(
    params: &ParamSet,
    corpus: &Corpus,
    tc: &TrainConfig,
    val: Option<&[TokenBatch]>,
) -> Result<(ParamSet, MetricsLog)> {
    if tc.loss_mode != LossMode::Ce {
        return Err(Error::InvalidArgument("train_ce needs loss_mode \"ce\"".into()));
    }
    let mut t = Trainer::new(params.clone(), corpus, tc)?;
    t.run_to_end(Objective::Ce, val)?;
    Ok(t.into_parts())
}

/// Cross-entropy fine-tune of a teacher on the distillation corpus. A zero
/// token budget returns the teacher unchanged.
pub fn correct_teacher(
    teacher: &ParamSet,
    corpus: &Corpus,
    tc: &TrainConfig,
    val: Option<&[TokenBatch]>,
) -> Result<(ParamSet, MetricsLog)> {
    if tc.total_tokens == 0 {
        return Ok((teacher.clone(), MetricsLog::default()));
    }
    let tc = TrainConfig { loss_mode: LossMode::Ce, ..tc.clone() };
    train_ce(teacher, corpus, &tc, val)
}

/// Logit-only distillation: the student minimizes forward KL to a frozen teacher.
pub fn distill(
    student: &ParamSet,
    teacher: &ParamSet,
    corpus: &Corpus,
    tc: &TrainConfig,
    val: Option<&[TokenBatch]>,
) -> Result<(ParamSet, MetricsLog)> {
    if tc.loss_mode != LossMode::Kl {
        return Err(Error::InvalidArgument("distill needs loss_mode \"kl\"".into()));
    }
    let mut t = Trainer::new(student.clone(), corpus, tc)?;
    t.run_to_end(Objective::Kl { teacher }, val)?;
    Ok(t.into_parts())
}

/// Distillation from a teacher that keeps being corrected: the student's
/// steps are split into `segments` equal segments, each preceded by a teacher
/// correction segment of the same length until the correction budget runs out.
/// Returns the student, its log, and the final teacher.
pub fn distill_interleaved(
    student: &ParamSet,
    teacher: &ParamSet,
    corpus: &Corpus,
    distill_tc: &TrainConfig,
    correct_tc: &TrainConfig,
    segments: usize,
    val: Option<&[TokenBatch]>,
) -> Result<(ParamSet, MetricsLog, ParamSet)> {
    if segments == 0 {
        return Err(Error::InvalidArgument("interleaving needs at least one segment".into()));
    }
    let correct_tc = TrainConfig { loss_mode: LossMode::Ce, ..correct_tc.clone() };
    let mut s = Trainer::new(student.clone(), corpus, distill_tc)?;
    let mut t = Trainer::new(teacher.clone(), corpus, &correct_tc)?;
    s.log_initial(val)?;
    let seg = s.total_steps().div_ceil(segments).max(1);
    while !s.finished() {
        t.run_steps(seg, Objective::Ce, None)?;
        s.run_steps(seg, Objective::Kl { teacher: &t.params }, val)?;
    }
    let teacher_final = t.params.clone();
    let (p, log) = s.into_parts();
    Ok((p, log, teacher_final))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tc() -> TrainConfig {
        TrainConfig {
            peak_lr: 1e-3,
            min_lr: 1e-4,
            warmup_steps: 10,
            schedule: Schedule::Cosine,
            batch_size: 2,
            seq_len: 8,
            total_tokens: 16 * 110,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
            seed: 0,
            loss_mode: LossMode::Ce,
            eval_interval: 10,
            ce_mix: 0.0,
            log_wall_time: false,
        }
    }

    #[test]
    fn schedule_endpoints() {
        let c = tc();
        let total = c.total_steps();
        assert_eq!(total, 110);
        assert_eq!(lr_at(0, &c, total), 0.0);
        assert_eq!(lr_at(10, &c, total), c.peak_lr);
        assert_eq!(lr_at(total, &c, total), c.min_lr);
        let mid = lr_at(60, &c, total);
        assert!((mid - (c.peak_lr + c.min_lr) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for s in 10..=total {
            let lr = lr_at(s, &c, total);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_rejects_tiny_budget_and_unknown_keys() {
        let mut c = tc();
        c.total_tokens = 15;
        assert!(c.validate().is_err());
        let mut j = serde_json::to_value(tc()).unwrap();
        j["bogus"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TrainConfig>(j).is_err());
        let minimal = r#"{"peak_lr":1e-3,"min_lr":1e-4,"warmup_steps":0,"batch_size":1,"seq_len":4,
            "total_tokens":4,"seed":1,"loss_mode":"kl"}"#;
        let c: TrainConfig = serde_json::from_str(minimal).unwrap();
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!(c.beta2, 0.95);
    }

    #[test]
    fn metrics_jsonl_roundtrip() {
        let mut log = MetricsLog::default();
        log.push(MetricRecord { step: 0, tokens_seen: 0, lr: 0.0, train_loss: None, val_loss: Some(5.5), wall_s: None });
        log.push(MetricRecord { step: 1, tokens_seen: 16, lr: 1e-4, train_loss: Some(5.4), val_loss: None, wall_s: None });
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        log.write_jsonl(&p).unwrap();
        assert_eq!(MetricsLog::read_jsonl(&p).unwrap(), log);
        assert_eq!(log.final_val_loss(), Some(5.5));
    }
}
