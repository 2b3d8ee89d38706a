//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shrink::checkpoint::{load_checkpoint, save_checkpoint};
use shrink::data::{synth_cloze_set, Style};
use shrink::evalx::presets::{base_dir, ensure_base, SeedData, Verdict};
use shrink::evalx::{eval_cloze, eval_val_loss, run_preset, Preset, PresetOptions, Scale, Summary};
use shrink::importance::{block_importance, cosine_distance};
use shrink::model::engine::{loss_and_grads, loss_only};
use shrink::model::{forward, forward_kl, ForwardOptions, LossSpec, ModelConfig, NormMode, ParamSet, WideParams};
use shrink::trim::{apply_plan, random_prune, TrimPlan};

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn fail(detail: impl Into<String>) -> Outcome {
    outcome(false, detail)
}

fn within(limit_min: u64, took: Duration, o: Outcome) -> Outcome {
    let ok = took <= Duration::from_secs(limit_min * 60);
    let detail = format!("{}; {:.0}s of {} min budget", o.detail, took.as_secs_f64(), limit_min);
    outcome(o.pass && ok, detail)
}

fn report(n: usize, name: &str, took: Duration, o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n:>2} {status} {name}: {} [{:.1}s]", o.detail, took.as_secs_f64());
}

fn toy(tie: bool) -> ModelConfig {
    ModelConfig {
        depth: 2,
        hidden: 8,
        mlp_hidden: 16,
        query_heads: 4,
        attention_groups: 2,
        head_dim: 2,
        vocab: 10,
        context: 16,
        norm_eps: 1e-5,
        tie_embeddings: tie,
    }
}

fn spread(cfg: &ModelConfig, seed: u64, scale: f32) -> ParamSet {
    let mut p = ParamSet::init(cfg, seed).unwrap();
    for (name, t) in p.tensors.iter_mut() {
        for (i, x) in t.data.iter_mut().enumerate() {
            if name.contains("norm") {
                *x = 1.0 + 0.3 * (i as f32 * 1.7 + seed as f32).sin();
            } else {
                *x *= scale;
            }
        }
    }
    p
}

fn ids(n: usize, vocab: usize, salt: u32) -> Vec<u32> {
    (0..n as u32).map(|i| (i * 7 + salt * 3 + (i * i) % 5) % vocab as u32).collect()
}

fn worst_rel_err(wide: &WideParams, toks: &[u32], b: usize, t: usize, spec: LossSpec<'_>) -> (f64, usize) {
    let opts = ForwardOptions::default();
    let (_, g) = loss_and_grads::<f64, _>(wide, toks, b, t, spec, &opts).unwrap();
    let g = g.into_named();
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut coords = 0;
    for (name, base) in &wide.tensors {
        let Some(analytic) = g.get(name) else { continue };
        for i in 0..base.len() {
            let mut plus = wide.clone();
            plus.tensors.get_mut(name).unwrap()[i] += h;
            let mut minus = wide.clone();
            minus.tensors.get_mut(name).unwrap()[i] -= h;
            let lp = loss_only::<f64, _>(&plus, toks, b, t, spec, &opts).unwrap();
            let lm = loss_only::<f64, _>(&minus, toks, b, t, spec, &opts).unwrap();
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / (1e-8f64).max(a.abs() + numeric.abs()));
            coords += 1;
        }
    }
    (worst, coords)
}

fn gradient_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let mut coords = 0;
    let mut largest = 0;
    for tie in [false, true] {
        let cfg = toy(tie);
        let n = cfg.count_params().0;
        largest = largest.max(n);
        if n > 10_000 {
            return fail(format!("oracle model has {n} parameters"));
        }
        let wide = WideParams::from_params(&spread(&cfg, 3 + tie as u64, 20.0));
        let toks = ids(10, cfg.vocab, 1);
        let tgts = ids(10, cfg.vocab, 2);
        let (w, c) = worst_rel_err(&wide, &toks, 2, 5, LossSpec::CrossEntropy { targets: &tgts });
        worst = worst.max(w);
        coords += c;
        let teacher: Vec<f32> = (0..10 * cfg.vocab).map(|i| (i as f32 * 0.91).sin() * 2.0).collect();
        let (w, c) = worst_rel_err(&wide, &toks, 2, 5, LossSpec::Kl { teacher_logits: &teacher });
        worst = worst.max(w);
        coords += c;
    }
    outcome(
        worst <= 1e-4,
        format!("CE and KL heads, {coords} coordinates, <= {largest} params, max rel err {worst:.2e} (tol 1e-4)"),
    )
}

fn trim_cfg() -> ModelConfig {
    ModelConfig {
        depth: 3,
        hidden: 12,
        mlp_hidden: 20,
        query_heads: 6,
        attention_groups: 3,
        head_dim: 4,
        vocab: 30,
        context: 16,
        norm_eps: 1e-5,
        tie_embeddings: false,
    }
}

fn logits(p: &ParamSet, mode: NormMode) -> Vec<f32> {
    let toks = ids(20, p.config.vocab, 5);
    forward(p, &toks, 2, 10, &ForwardOptions { norm_mode: mode, ..Default::default() }).unwrap().logits
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn masked(p: &ParamSet, plan: &TrimPlan) -> ParamSet {
    let hd = plan.source.head_dim;
    let mut m = p.clone();
    for l in 0..plan.source.depth {
        for (w, keep, width) in [("attn.o", &plan.heads[l], hd), ("mlp.down", &plan.neurons[l], 1)] {
            let t = m.get_mut(&format!("layer.{l}.{w}")).unwrap();
            let cols = t.shape[1];
            for row in t.data.chunks_mut(cols) {
                for (j, x) in row.iter_mut().enumerate() {
                    if !keep.contains(&(j / width)) {
                        *x = 0.0;
                    }
                }
            }
        }
    }
    m
}

fn trimming_oracles() -> Outcome {
    let cfg = trim_cfg();
    let p = spread(&cfg, 2, 8.0);
    let identity_ok = apply_plan(&p, &TrimPlan::identity(&cfg)).unwrap().bit_eq(&p)
        && (0..5).all(|s| random_prune(&p, &cfg, s).unwrap().0.bit_eq(&p));

    let mut worst = 0.0f32;
    for seed in 0..8 {
        let target = ModelConfig { mlp_hidden: 11, attention_groups: 2, query_heads: 2 + 2 * (seed as usize % 2), ..cfg.clone() };
        let plan = TrimPlan::random(&cfg, &target, seed).unwrap();
        let trimmed = apply_plan(&p, &plan).unwrap();
        worst = worst.max(max_abs(&logits(&trimmed, NormMode::Identity), &logits(&masked(&p, &plan), NormMode::Identity)));
    }

    let full_target = ModelConfig { mlp_hidden: 9, attention_groups: 2, query_heads: 2, hidden: 8, ..cfg.clone() };
    let full = TrimPlan::random(&cfg, &full_target, 11).unwrap();
    let one_step = apply_plan(&p, &full).unwrap();
    let mut composed = true;
    for first_axis in ["neurons", "channels", "heads"] {
        let mut first = TrimPlan::identity(&cfg);
        let mut rest = TrimPlan { source: cfg.clone(), ..full.clone() };
        match first_axis {
            "neurons" => {
                first.neurons = full.neurons.clone();
                first.target.mlp_hidden = 9;
                rest.neurons = vec![(0..9).collect(); 3];
            }
            "channels" => {
                first.channels = full.channels.clone();
                first.target.hidden = 8;
                rest.channels = (0..8).collect();
            }
            _ => {
                first.heads = full.heads.clone();
                first.groups = full.groups.clone();
                first.target.attention_groups = 2;
                first.target.query_heads = 2;
                rest.heads = vec![vec![0, 1]; 3];
                rest.groups = vec![vec![0, 1]; 3];
            }
        }
        rest.source = first.target.clone();
        let mid = apply_plan(&p, &first).unwrap();
        composed &= apply_plan(&mid, &rest).unwrap().bit_eq(&one_step);
    }
    outcome(
        identity_ok && worst <= 1e-5 && composed,
        format!(
            "identity bit-exact={identity_ok}, neuron/head masking max |dlogit| {worst:.2e} (tol 1e-5), axis composition bit-exact={composed}"
        ),
    )
}

fn metric_identities() -> Outcome {
    let cfg = ModelConfig { vocab: 258, ..toy(false) };
    let zero = ParamSet::zeros(&cfg).unwrap();
    let toks = ids(16, 258, 3);
    let batch = shrink::data::TokenBatch {
        inputs: toks[..15].to_vec(),
        targets: toks[1..].to_vec(),
        offsets: vec![0],
        batch: 1,
        seq: 15,
    };
    let ce = eval_val_loss(&zero, &[batch]).unwrap();
    let ce_err = (ce - 258f64.ln()).abs();

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut min_kl = f64::INFINITY;
    let mut max_equal = 0.0f64;
    for _ in 0..2_000 {
        let v = rng.random_range(2..40);
        let scale = rng.random_range(0.1f32..20.0);
        let a: Vec<f32> = (0..3 * v).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        let b: Vec<f32> = (0..3 * v).map(|_| rng.random_range(-1.0f32..1.0) * scale).collect();
        min_kl = min_kl.min(forward_kl(&a, &b, v).unwrap());
        max_equal = max_equal.max(forward_kl(&a, &a, v).unwrap().abs());
    }

    let mut p = spread(&toy(false), 9, 10.0);
    for w in ["attn.o", "mlp.down"] {
        p.get_mut(&format!("layer.1.{w}")).unwrap().data.fill(0.0);
    }
    let windows: Vec<Vec<u32>> = (0..4).map(|s| ids(8, 10, s)).collect();
    let bi_identity = block_importance(&p, &windows, 1, 2).unwrap().values[1];

    let mut bi_ok = 0;
    for _ in 0..10_000 {
        let n = rng.random_range(1..32);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        bi_ok += cosine_distance(&a, &b).is_none_or(|d| (0.0..=2.0).contains(&d)) as usize;
    }
    let pass = ce_err <= 1e-6 && min_kl >= 0.0 && max_equal <= 1e-9 && bi_identity == 0.0 && bi_ok == 10_000;
    outcome(
        pass,
        format!(
            "|CE - ln 258| {ce_err:.1e}, min KL {min_kl:.2e}, KL at equal logits {max_equal:.1e}, BI(identity block) {bi_identity}, BI in [0,2] {bi_ok}/10000"
        ),
    )
}

fn claim_line(s: &Summary, id: &str) -> (bool, String) {
    match s.claim(id) {
        Some(c) => {
            let f = |v: Option<f64>| v.map_or("missing".to_string(), |x| format!("{x:.4}"));
            (c.verdict == Verdict::Pass, format!("{id}: {} {} {}", f(c.lhs), c.relation, f(c.rhs)))
        }
        None => (false, format!("{id}: missing")),
    }
}

fn claims_outcome(s: &Summary, ids: &[&str]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for id in ids {
        let (ok, line) = claim_line(s, id);
        pass &= ok;
        parts.push(line);
    }
    outcome(pass, parts.join(", "))
}

fn run(preset: Preset, opts: &PresetOptions) -> (Result<Summary, String>, Duration) {
    let t = Instant::now();
    let r = run_preset(preset, opts).map_err(|e| e.to_string());
    (r, t.elapsed())
}

fn teacher_correction(s: &Summary) -> Outcome {
    let mut o = claims_outcome(s, &["correction_lowers_student_loss"]);
    let gap = s.extra.get("correction_gap_relative").and_then(|v| v.as_f64());
    let (a, b) = (
        s.arm_median("from-corrected", |r| r.final_val_loss),
        s.arm_median("from-original", |r| r.final_val_loss),
    );
    if let (Some(a), Some(b)) = (a, b) {
        o.detail += &format!(", student relative gap {:.1}%", 100.0 * (b - a) / b);
    }
    if let Some(g) = gap {
        o.detail += &format!(", teacher relative gap {:.1}%", 100.0 * g);
    }
    o
}

fn depth_metrics(s: &Summary, workspace: &Path) -> Outcome {
    let mut o = claims_outcome(s, &["bi_tracks_loss"]);
    let mut bundle = true;
    for seed in &s.seeds {
        let dir = workspace.join("depth_metrics").join(format!("scans-seed{seed}"));
        for metric in ["loss", "bi", "task"] {
            bundle &= dir.join(format!("{metric}_n1.csv")).exists();
        }
        for arm in ["contiguous", "noncontiguous"] {
            bundle &= s.arms.get(arm).and_then(|m| m.get(&seed.to_string())).and_then(|r| r.cloze_accuracy).is_some();
        }
    }
    let (_, line) = claim_line(s, "contiguous_not_worse");
    o.pass &= bundle;
    o.detail += &format!(", bundle complete={bundle}, reported {line}");
    o
}

fn chance_level() -> Outcome {
    let cfg = Scale::quick().teacher;
    let p = ParamSet::init(&cfg, 0).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for style in [Style::A, Style::B] {
        let items = synth_cloze_set(style, 2_000, 17).unwrap();
        let acc = eval_cloze(&p, &items).unwrap();
        pass &= (0.45..=0.55).contains(&acc);
        parts.push(format!("style {style}: {acc:.3} on {} items", items.len()));
    }
    outcome(pass, parts.join(", "))
}

fn repro_scale() -> Scale {
    let mut s = Scale::quick();
    s.name = "repro".into();
    s.pretrain_tokens = 40 * 1024;
    s.correction_tokens = 10 * 1024;
    s.distill_tokens = 20 * 1024;
    s.retrain_tokens = 10 * 1024;
    s.corpus_a_tokens = 100_000;
    s.corpus_b_tokens = 100_000;
    s.eval_interval = 10;
    s
}

fn reproducibility(root: &Path, main_ws: &Path) -> Outcome {
    let mut summaries = Vec::new();
    for run_id in ["first", "second"] {
        let ws = root.join(format!("repro-{run_id}"));
        let _ = std::fs::remove_dir_all(&ws);
        let opts = PresetOptions { workspace: ws.clone(), seeds: vec![4], scale: repro_scale(), build_deps: true };
        if let Err(e) = run_preset(Preset::TeacherCorrection, &opts) {
            return fail(format!("preset failed: {e}"));
        }
        summaries.push(std::fs::read(ws.join("teacher_correction").join("summary.json")).unwrap());
    }
    let same_summary = summaries[0] == summaries[1];

    let mut roundtrips = 0;
    let mut checked = 0;
    let tmp = root.join("roundtrip.mshr");
    for seed in SEEDS {
        for name in ["teacher.mshr", "teacher_corrected.mshr"] {
            let path = base_dir(main_ws, seed).join(name);
            let Ok(p) = load_checkpoint(&path) else { continue };
            checked += 1;
            save_checkpoint(&p, &tmp).unwrap();
            let back = load_checkpoint(&tmp).unwrap();
            roundtrips += (back.bit_eq(&p) && std::fs::read(&tmp).unwrap() == std::fs::read(&path).unwrap()) as usize;
        }
    }
    outcome(
        same_summary && checked > 0 && roundtrips == checked,
        format!(
            "rerun summary.json byte-identical={same_summary} ({} bytes), checkpoint round-trips bit-exact {roundtrips}/{checked}",
            summaries[0].len()
        ),
    )
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let workspace = root.join("workspace");
    let _ = std::fs::remove_dir_all(&workspace);
    std::fs::create_dir_all(&workspace).unwrap();
    let scale = Scale::quick();
    println!("acceptance: scale {} seeds {:?} workspace {}", scale.name, SEEDS, workspace.display());
    let opts = PresetOptions { workspace: workspace.clone(), seeds: SEEDS.to_vec(), scale, build_deps: true };
    let suite = Instant::now();
    let mut failures = 0;
    let mut record = |n: usize, name: &str, took: Duration, o: Outcome| {
        report(n, name, took, &o);
        failures += !o.pass as usize;
    };

    let t = Instant::now();
    let o = gradient_oracle();
    let took = t.elapsed();
    record(1, "gradient oracle", took, within(1, took, o));

    let t = Instant::now();
    let o = trimming_oracles();
    let took = t.elapsed();
    record(2, "trimming oracles", took, within(1, took, o));

    let t = Instant::now();
    record(3, "loss and metric identities", t.elapsed(), metric_identities());

    let t = Instant::now();
    for &seed in &SEEDS {
        if let Err(e) = SeedData::new(&opts.scale, seed).and_then(|d| ensure_base(&opts, seed, &d)) {
            println!("acceptance: base build for seed {seed} failed: {e}");
        }
    }
    println!("acceptance: teachers pretrained and corrected for seeds {SEEDS:?} [{:.1}s]", t.elapsed().as_secs_f64());

    let presets: [(usize, &str, Preset, u64); 5] = [
        (4, "teacher correction", Preset::TeacherCorrection, 20),
        (5, "width vs depth", Preset::WidthVsDepth, 25),
        (6, "four-way ablation", Preset::FourwayAblation, 40),
        (7, "correction variants", Preset::CorrectionVariants, 20),
        (8, "depth metrics", Preset::DepthMetrics, 20),
    ];
    for (n, name, preset, budget) in presets {
        let (res, took) = run(preset, &opts);
        let o = match res {
            Err(e) => fail(format!("preset error: {e}")),
            Ok(s) => match preset {
                Preset::TeacherCorrection => teacher_correction(&s),
                Preset::WidthVsDepth => {
                    claims_outcome(&s, &["iso_parameter", "width_lower_initial_loss", "width_lower_final_loss"])
                }
                Preset::FourwayAblation => {
                    claims_outcome(&s, &["beats_random_init", "beats_random_prune", "beats_ce_retraining"])
                }
                Preset::CorrectionVariants => claims_outcome(&s, &["pruning_order_insensitive"]),
                Preset::DepthMetrics => depth_metrics(&s, &workspace),
            },
        };
        record(n, name, took, within(budget, took, o));
    }

    let t = Instant::now();
    record(9, "chance-level cloze", t.elapsed(), chance_level());

    let t = Instant::now();
    let o = reproducibility(&root, &workspace);
    record(10, "reproducibility", t.elapsed(), o);

    let total = suite.elapsed();
    let budget_ok = total <= Duration::from_secs(150 * 60);
    println!(
        "acceptance: {} of 10 criteria passed; total {:.1} min ({})",
        10 - failures,
        total.as_secs_f64() / 60.0,
        if budget_ok { "within the 2.5 h budget" } else { "over the 2.5 h budget" }
    );
    if failures == 0 && budget_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
