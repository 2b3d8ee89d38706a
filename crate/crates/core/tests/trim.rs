use proptest::prelude::*;
use shrink::model::{forward, ForwardOptions, ModelConfig, NormMode, ParamSet};
use shrink::trim::{apply_plan, random_prune, trim_depth, TrimPlan};

fn cfg() -> ModelConfig {
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

fn params(seed: u64) -> ParamSet {
    let mut p = ParamSet::init(&cfg(), seed).unwrap();
    for (name, t) in p.tensors.iter_mut() {
        for (i, x) in t.data.iter_mut().enumerate() {
            if name.contains("norm") {
                *x = 0.8 + 0.4 * ((i as f32 * 0.9 + seed as f32).sin()).abs();
            } else {
                *x *= 8.0;
            }
        }
    }
    p
}

fn toks(n: usize) -> Vec<u32> {
    (0..n as u32).map(|i| (i * 11 + 3) % 30).collect()
}

fn logits(p: &ParamSet, mode: NormMode) -> Vec<f32> {
    let opts = ForwardOptions { norm_mode: mode, ..Default::default() };
    forward(p, &toks(2 * 10), 2, 10, &opts).unwrap().logits
}

fn max_abs(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn target(mlp: usize, groups: usize, hpg: usize, hidden: usize) -> ModelConfig {
    ModelConfig { mlp_hidden: mlp, attention_groups: groups, query_heads: groups * hpg, hidden, ..cfg() }
}

/// Zeroes every unit that `plan` would remove, leaving shapes intact.
fn mask(p: &ParamSet, plan: &TrimPlan) -> ParamSet {
    let c = &plan.source;
    let hd = c.head_dim;
    let mut m = p.clone();
    let zero_cols = |t: &mut shrink::model::Tensor, keep: &dyn Fn(usize) -> bool| {
        let (r, cols) = t.dims2();
        for i in 0..r {
            for j in 0..cols {
                if !keep(j) {
                    t.data[i * cols + j] = 0.0;
                }
            }
        }
    };
    for l in 0..c.depth {
        let heads = plan.heads[l].clone();
        zero_cols(m.get_mut(&format!("layer.{l}.attn.o")).unwrap(), &|j| heads.contains(&(j / hd)));
        let neurons = plan.neurons[l].clone();
        zero_cols(m.get_mut(&format!("layer.{l}.mlp.down")).unwrap(), &|j| neurons.contains(&j));
    }
    let ch = plan.channels.clone();
    zero_cols(m.get_mut("embed.tok").unwrap(), &|j| ch.contains(&j));
    for l in 0..c.depth {
        for w in ["attn.o", "mlp.down"] {
            let t = m.get_mut(&format!("layer.{l}.{w}")).unwrap();
            let (_, cols) = t.dims2();
            for (i, row) in t.data.chunks_mut(cols).enumerate() {
                if !ch.contains(&i) {
                    row.fill(0.0);
                }
            }
        }
    }
    m
}

fn only<F: FnOnce(&mut TrimPlan)>(f: F) -> TrimPlan {
    let mut p = TrimPlan::identity(&cfg());
    f(&mut p);
    p
}

#[test]
fn identity_trim_is_bit_exact() {
    let p = params(1);
    let out = apply_plan(&p, &TrimPlan::identity(&cfg())).unwrap();
    assert!(out.bit_eq(&p));
    let seeded = random_prune(&p, &cfg(), 99).unwrap().0;
    assert!(seeded.bit_eq(&p));
}

#[test]
fn neuron_and_head_masking_match_trimming() {
    let p = params(2);
    for seed in 0..4 {
        let plan = TrimPlan::random(&cfg(), &target(13, 2, 1, 12), seed).unwrap();
        let trimmed = apply_plan(&p, &plan).unwrap();
        let masked = mask(&p, &plan);
        let d = max_abs(&logits(&trimmed, NormMode::Rms), &logits(&masked, NormMode::Rms));
        assert!(d <= 1e-5, "seed {seed}: {d}");
    }
}

#[test]
fn channel_masking_matches_trimming_in_identity_norm_mode() {
    let p = params(3);
    for seed in 0..4 {
        let plan = TrimPlan::random(&cfg(), &target(11, 2, 2, 7), seed).unwrap();
        let trimmed = apply_plan(&p, &plan).unwrap();
        let masked = mask(&p, &plan);
        let d = max_abs(&logits(&trimmed, NormMode::Identity), &logits(&masked, NormMode::Identity));
        assert!(d <= 1e-5, "seed {seed}: {d}");
    }
}

#[test]
fn axis_order_does_not_matter() {
    let p = params(4);
    let full = TrimPlan::random(&cfg(), &target(9, 2, 1, 8), 11).unwrap();
    let neurons_first = only(|q| {
        q.neurons = full.neurons.clone();
        q.target.mlp_hidden = 9;
    });
    let mid = apply_plan(&p, &neurons_first).unwrap();
    let rest = TrimPlan {
        source: mid.config.clone(),
        target: full.target.clone(),
        neurons: vec![(0..9).collect(); 3],
        heads: full.heads.clone(),
        groups: full.groups.clone(),
        channels: full.channels.clone(),
    };
    let two_step = apply_plan(&mid, &rest).unwrap();
    let one_step = apply_plan(&p, &full).unwrap();
    assert!(two_step.bit_eq(&one_step));

    let channels_first = only(|q| {
        q.channels = full.channels.clone();
        q.target.hidden = 8;
    });
    let mid = apply_plan(&p, &channels_first).unwrap();
    let rest = TrimPlan {
        source: mid.config.clone(),
        target: full.target.clone(),
        neurons: full.neurons.clone(),
        heads: full.heads.clone(),
        groups: full.groups.clone(),
        channels: (0..8).collect(),
    };
    assert!(apply_plan(&mid, &rest).unwrap().bit_eq(&one_step));
}

#[test]
fn depth_trim_matches_skipping() {
    let p = params(5);
    let (shallow, report) = trim_depth(&p, &[1]).unwrap();
    assert_eq!(shallow.config.depth, 2);
    assert_eq!(report.dropped_layers, vec![1]);
    let skip = ForwardOptions::skipping(vec![false, true, false]);
    let a = forward(&p, &toks(10), 1, 10, &skip).unwrap().logits;
    let b = forward(&shallow, &toks(10), 1, 10, &ForwardOptions::default()).unwrap().logits;
    assert_eq!(a, b);
}

#[test]
fn bad_plans_are_rejected() {
    let p = params(6);
    let mut plan = TrimPlan::identity(&cfg());
    plan.neurons[0].swap(0, 1);
    assert!(apply_plan(&p, &plan).is_err());
    assert!(random_prune(&p, &ModelConfig { hidden: 13, ..cfg() }, 0).is_err());
    assert!(random_prune(&p, &ModelConfig { depth: 2, ..cfg() }, 0).is_err());
    assert!(trim_depth(&p, &[]).is_err());
    assert!(trim_depth(&p, &[3]).is_err());
    assert!(trim_depth(&p, &[1, 1]).is_err());
    assert!(trim_depth(&p, &[0, 1, 2]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn masking_oracle_holds_for_random_targets(
        mlp in 1usize..=20,
        groups in 1usize..=3,
        hpg in 1usize..=2,
        hidden in 1usize..=12,
        seed in 0u64..1000,
    ) {
        let p = params(seed % 7);
        let plan = TrimPlan::random(&cfg(), &target(mlp, groups, hpg, hidden), seed).unwrap();
        let trimmed = apply_plan(&p, &plan).unwrap();
        prop_assert_eq!(trimmed.config.count_params().0, trimmed.num_params());
        let d = max_abs(&logits(&trimmed, NormMode::Identity), &logits(&mask(&p, &plan), NormMode::Identity));
        prop_assert!(d <= 1e-5, "{}", d);
    }

    #[test]
    fn random_plans_are_sorted_subsets(seed in 0u64..10_000) {
        let plan = TrimPlan::random(&cfg(), &target(7, 2, 1, 5), seed).unwrap();
        prop_assert_eq!(&plan, &TrimPlan::random(&cfg(), &target(7, 2, 1, 5), seed).unwrap());
        prop_assert!(plan.channels.windows(2).all(|w| w[0] < w[1]));
        for l in 0..3 {
            prop_assert!(plan.heads[l].iter().zip(&plan.groups[l]).all(|(h, g)| h / 2 == *g));
        }
    }
}
