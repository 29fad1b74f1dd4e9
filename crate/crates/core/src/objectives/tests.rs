use proptest::prelude::*;

use super::*;
use crate::encoder::tokenizer::{CLS, MASK, SEP};
use crate::encoder::{select_trainable, ArchitectureConfig, Pooling, Scope};

fn emb(v: &[f64]) -> SentenceEmbedding<f64> {
    SentenceEmbedding::new(v.to_vec())
}

fn pairs(left: &[&[f64]], right: &[&[f64]], labels: Option<Vec<u8>>) -> PairBatch<f64> {
    PairBatch::new(left.iter().map(|v| emb(v)).collect(), right.iter().map(|v| emb(v)).collect(), labels).unwrap()
}

#[test]
fn cosine_pair_loss_examples() {
    let same = pairs(&[&[1.0, 2.0]], &[&[1.0, 2.0]], Some(vec![1]));
    assert!(cosine_pair_loss(&same).unwrap().abs() < 1e-12);
    let orth0 = pairs(&[&[1.0, 0.0]], &[&[0.0, 3.0]], Some(vec![0]));
    assert_eq!(cosine_pair_loss(&orth0).unwrap(), 0.0);
    let orth1 = pairs(&[&[1.0, 0.0]], &[&[0.0, 3.0]], Some(vec![1]));
    assert_eq!(cosine_pair_loss(&orth1).unwrap(), 1.0);
    // residuals 1 and 0.5: squared mean 0.625, absolute mean 0.75
    let mixed = pairs(&[&[1.0, 0.0], &[1.0, 0.0]], &[&[0.0, 1.0], &[1.0, 3f64.sqrt()]], Some(vec![1, 1]));
    assert!((cosine_pair_loss(&mixed).unwrap() - 0.625).abs() < 1e-12);
    assert!((cosine_pair_loss_with(&mixed, PairReduction::MeanAbsolute).unwrap() - 0.75).abs() < 1e-12);
}

#[test]
fn cosine_pair_loss_needs_labels_and_nonzero_inputs() {
    let unlabeled = pairs(&[&[1.0, 0.0]], &[&[0.0, 1.0]], None);
    assert!(matches!(cosine_pair_loss(&unlabeled), Err(Error::Config(_))));
    let zero = pairs(&[&[0.0, 0.0]], &[&[0.0, 1.0]], Some(vec![1]));
    assert!(matches!(cosine_pair_loss(&zero), Err(Error::Degenerate(_))));
    assert!(PairBatch::new(vec![emb(&[1.0])], vec![emb(&[1.0])], Some(vec![2])).is_err());
    assert!(PairBatch::<f64>::new(vec![], vec![], None).is_err());
}

#[test]
fn mnrl_examples() {
    let one = pairs(&[&[1.0, 2.0]], &[&[-3.0, 0.5]], None);
    assert_eq!(mnrl_loss(&one, 1.0).unwrap(), 0.0);
    let v: &[f64] = &[1.0, 1.0];
    let uniform = pairs(&[v, v, v, v], &[v, v, v, v], None);
    assert!((mnrl_loss(&uniform, 1.0).unwrap() - 4f64.ln()).abs() < 1e-12);
    let diag = pairs(&[&[1.0, 0.0], &[0.0, 1.0]], &[&[2.0, 0.0], &[0.0, 5.0]], None);
    let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((mnrl_loss(&diag, 1.0).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.31326).abs() < 1e-5);
    assert!(mnrl_loss(&diag, 0.0).is_err());
}

/// `K` anchors `e_i` with positives `c·e_i + √(1−c²)·e_{K+i}`: diagonal cosine `c`,
/// every off-diagonal cosine 0.
fn diagonal_batch(k: usize, c: f64) -> PairBatch<f64> {
    let d = 2 * k;
    let unit = |i: usize, s: f64| (0..d).map(|j| if j == i { s } else { 0.0 }).collect::<Vec<_>>();
    let left = (0..k).map(|i| SentenceEmbedding::new(unit(i, 1.0))).collect();
    let right = (0..k)
        .map(|i| {
            let mut v = unit(i, c);
            v[k + i] = (1.0 - c * c).sqrt();
            SentenceEmbedding::new(v)
        })
        .collect();
    PairBatch::new(left, right, None).unwrap()
}

fn vecs(k: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, d), k)
        .prop_filter("nonzero rows", |rows| rows.iter().all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3))
}

proptest! {
    #[test]
    fn cosine_pair_loss_is_scale_invariant(
        u in vecs(3, 4), v in vecs(3, 4), y in proptest::collection::vec(0u8..=1, 3),
        a in 0.01f64..100.0, b in 0.01f64..100.0,
    ) {
        let batch = |s: f64, t: f64| PairBatch::new(
            u.iter().map(|r| SentenceEmbedding::new(r.iter().map(|x| x * s).collect())).collect(),
            v.iter().map(|r| SentenceEmbedding::new(r.iter().map(|x| x * t).collect())).collect(),
            Some(y.clone()),
        ).unwrap();
        let base = cosine_pair_loss(&batch(1.0, 1.0)).unwrap();
        let scaled = cosine_pair_loss(&batch(a, b)).unwrap();
        prop_assert!((base - scaled).abs() < 1e-10);
        prop_assert!(base >= 0.0);
    }

    #[test]
    fn mnrl_is_nonnegative(x in vecs(4, 3), y in vecs(4, 3), scale in 0.1f64..20.0) {
        let b = PairBatch::new(
            x.into_iter().map(SentenceEmbedding::new).collect(),
            y.into_iter().map(SentenceEmbedding::new).collect(),
            None,
        ).unwrap();
        prop_assert!(mnrl_loss(&b, scale).unwrap() >= 0.0);
    }

    #[test]
    fn mnrl_decreases_as_diagonal_cosines_grow(k in 2usize..6, c1 in -0.99f64..0.99, dc in 0.001f64..0.5) {
        let c2 = (c1 + dc).min(1.0);
        let lo = mnrl_loss(&diagonal_batch(k, c1), 1.0).unwrap();
        let hi = mnrl_loss(&diagonal_batch(k, c2), 1.0).unwrap();
        prop_assert!(hi < lo);
        prop_assert!(hi > 0.0);
    }
}

/// Central differences of a loss over both embedding matrices.
fn check_embedding_gradients(build: impl Fn(&mut Graph<f64>, Var, Var) -> Var, u: Tensor<f64>, v: Tensor<f64>) {
    let mut g = Graph::new();
    let (a, b) = (g.leaf(u.clone(), true), g.leaf(v.clone(), true));
    let out = build(&mut g, a, b);
    let grads = g.backward(out);
    let eval = |u: &Tensor<f64>, v: &Tensor<f64>| {
        let mut g = Graph::new();
        let (a, b) = (g.constant(u.clone()), g.constant(v.clone()));
        let out = build(&mut g, a, b);
        g.value(out).data()[0]
    };
    for (which, var) in [(0, a), (1, b)] {
        let analytic = grads.get(var).unwrap();
        for j in 0..u.numel() {
            let h = 1e-6;
            let (mut up, mut vp, mut um, mut vm) = (u.clone(), v.clone(), u.clone(), v.clone());
            if which == 0 {
                up.data_mut()[j] += h;
                um.data_mut()[j] -= h;
            } else {
                vp.data_mut()[j] += h;
                vm.data_mut()[j] -= h;
            }
            let fd = (eval(&up, &vp) - eval(&um, &vm)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(analytic[j].abs()) + 1e-9;
            assert!((fd - analytic[j]).abs() <= tol, "input {which}[{j}]: fd {fd} vs {}", analytic[j]);
        }
    }
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::SeedableRng;
    Tensor::randn(shape, 1.0, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn loss_gradients_match_finite_differences() {
    let labels = [1u8, 0, 1, 0, 1];
    for reduction in [PairReduction::MeanSquared, PairReduction::MeanAbsolute] {
        check_embedding_gradients(
            |g, a, b| cosine_pair_loss_graph(g, a, b, &labels, reduction).unwrap(),
            randn(&[5, 6], 1),
            randn(&[5, 6], 2),
        );
    }
    for scale in [1.0, 20.0] {
        check_embedding_gradients(|g, a, b| mnrl_loss_graph(g, a, b, scale).unwrap(), randn(&[5, 6], 3), randn(&[5, 6], 4));
    }
}

fn tokens(rows: &[&[usize]]) -> TokenBatch {
    let seq = rows.iter().map(|r| r.len()).max().unwrap();
    let mut ids = Vec::new();
    let mut mask = Vec::new();
    for r in rows {
        ids.extend(r.iter().copied().chain(std::iter::repeat(0).take(seq - r.len())));
        mask.extend((0..seq).map(|i| u8::from(i < r.len())));
    }
    TokenBatch::new(ids, mask, rows.len(), seq).unwrap()
}

fn long_batch(rows: usize, len: usize, seed: usize) -> TokenBatch {
    let data: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            let mut row = vec![CLS];
            row.extend((0..len).map(|i| 5 + (r * 7919 + i * 104_729 + seed) % 995));
            row.push(SEP);
            row
        })
        .collect();
    let refs: Vec<&[usize]> = data.iter().map(Vec::as_slice).collect();
    tokens(&refs)
}

#[test]
fn zero_mask_prob_changes_nothing() {
    let b = long_batch(4, 30, 0);
    let (plan, corrupted, labels) = plan_mlm_mask(&b, &MaskingConfig::with_prob(0.0), 1000, 7).unwrap();
    assert!(plan.positions.is_empty());
    assert_eq!(corrupted, b);
    assert!(labels.iter().all(|&l| l == IGNORE_INDEX));
}

#[test]
fn forced_mask_branch_masks_every_eligible_position() {
    let b = tokens(&[&[CLS, 10, 11, 12, SEP], &[CLS, 13, SEP]]);
    let cfg = MaskingConfig { mask_prob: 1.0, mask_token_frac: 1.0, random_token_frac: 0.0 };
    let (plan, corrupted, labels) = plan_mlm_mask(&b, &cfg, 1000, 3).unwrap();
    assert_eq!(plan.positions, vec![1, 2, 3, 6]);
    assert!(plan.actions.iter().all(|&a| a == MaskAction::MaskToken));
    assert_eq!(corrupted.token_ids, vec![CLS, MASK, MASK, MASK, SEP, CLS, MASK, SEP, 0, 0]);
    assert_eq!(labels, vec![IGNORE_INDEX, 10, 11, 12, IGNORE_INDEX, IGNORE_INDEX, 13, IGNORE_INDEX, IGNORE_INDEX, IGNORE_INDEX]);
}

#[test]
fn selection_rate_concentrates() {
    use statrs::distribution::{Binomial, DiscreteCDF};
    // 10,000 eligible positions
    let b = long_batch(100, 100, 1);
    let (plan, _, _) = plan_mlm_mask(&b, &MaskingConfig::default(), 1000, 11).unwrap();
    let frac = plan.positions.len() as f64 / 10_000.0;
    assert!((0.13..=0.17).contains(&frac), "selected fraction {frac}");
    // the window holds with overwhelming probability under Binomial(10000, 0.15)
    let bin = Binomial::new(0.15, 10_000).unwrap();
    assert!(bin.cdf(1299) + (1.0 - bin.cdf(1700)) < 1e-5);
}

#[test]
fn action_split_is_eighty_ten_ten() {
    let b = long_batch(500, 200, 2);
    let cfg = MaskingConfig::with_prob(1.0);
    let (plan, corrupted, labels) = plan_mlm_mask(&b, &cfg, 1000, 5).unwrap();
    let n = plan.actions.len() as f64;
    assert_eq!(n, 100_000.0);
    let share = |a: MaskAction| plan.actions.iter().filter(|&&x| x == a).count() as f64 / n;
    assert!((share(MaskAction::MaskToken) - 0.8).abs() < 0.02);
    assert!((share(MaskAction::RandomToken) - 0.1).abs() < 0.02);
    assert!((share(MaskAction::Keep) - 0.1).abs() < 0.02);
    for (&p, &a) in plan.positions.iter().zip(&plan.actions) {
        let id = corrupted.token_ids[p];
        match a {
            MaskAction::MaskToken => assert_eq!(id, MASK),
            MaskAction::Keep => assert_eq!(id as i64, labels[p]),
            MaskAction::RandomToken => assert!(id >= crate::encoder::tokenizer::NUM_SPECIAL),
        }
    }
    let again = plan_mlm_mask(&b, &cfg, 1000, 5).unwrap();
    assert_eq!(again.0, plan);
}

#[test]
fn mlm_loss_examples() {
    let sharp = Tensor::new(vec![1, 3], vec![100.0, 0.0, 0.0]).unwrap();
    assert!(mlm_loss(&sharp, &[0]).unwrap().loss().unwrap() < 1e-30);
    let uniform = Tensor::<f64>::zeros(&[2, 1000]);
    let l = mlm_loss(&uniform, &[3, IGNORE_INDEX]).unwrap().loss().unwrap();
    assert!((l - 1000f64.ln()).abs() < 1e-12);
    // probabilities 1/2 and 1/4 on the true ids
    let halves = Tensor::new(vec![2, 4], vec![3f64.ln(), 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let l = mlm_loss(&halves, &[0, 1]).unwrap().loss().unwrap();
    assert!((l - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
    assert!((l - 1.0397).abs() < 1e-4);
    assert!(mlm_loss(&uniform, &[IGNORE_INDEX, IGNORE_INDEX]).unwrap().is_skip());
}

fn tiny(seed: u64) -> EncoderState<f64> {
    EncoderState::init(ArchitectureConfig::tiny(), Pooling::Mean, seed).unwrap()
}

#[test]
fn mlm_step_skips_batches_without_eligible_tokens() {
    let state = tiny(0);
    let b = tokens(&[&[CLS, SEP]]);
    let mut ctx = ForwardCtx::inference();
    let out = mlm_step(&mut ctx, &state, &b, &MaskingConfig::default(), 0).unwrap();
    assert!(out.is_skip());
}

/// Finite differences through a full objective for a few sampled parameters.
fn check_step_gradients(state: &EncoderState<f64>, names: &[&str], step: impl Fn(&mut ForwardCtx<f64>, &EncoderState<f64>) -> Var) {
    let mut ctx = ForwardCtx::training(names.iter().copied(), None);
    let loss = step(&mut ctx, state);
    let grads = ctx.gradients(loss);
    let eval = |s: &EncoderState<f64>| {
        let mut ctx = ForwardCtx::inference();
        let l = step(&mut ctx, s);
        ctx.graph.value(l).data()[0]
    };
    for name in names {
        let g = &grads[*name];
        for j in [0, g.len() / 3, g.len() - 1] {
            let h = 1e-5;
            let mut plus = state.clone();
            plus.param_mut(name).unwrap().data_mut()[j] += h;
            let mut minus = state.clone();
            minus.param_mut(name).unwrap().data_mut()[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let tol = 1e-4 * fd.abs().max(g[j].abs()) + 1e-8;
            assert!((fd - g[j]).abs() <= tol, "{name}[{j}]: fd {fd} vs {}", g[j]);
        }
    }
}

#[test]
fn mlm_step_gradients() {
    let state = tiny(1);
    let b = long_batch(2, 6, 3);
    let cfg = MaskingConfig::with_prob(0.5);
    check_step_gradients(&state, &["head.mlm.dense.w", "embeddings.word", "layers.1.ffn.up.w"], |ctx, s| {
        mlm_step(ctx, s, &b, &cfg, 9).unwrap().loss().unwrap()
    });
}

#[test]
fn tsdae_noise_lengths_and_determinism() {
    for len in 1..40 {
        for ratio in [0.0, 0.3, 0.6, 0.9] {
            let k = kept_len(len, ratio);
            assert!(k >= 1 && k <= len);
            assert_eq!(k, (((1.0 - ratio) * len as f64).round() as usize).max(1));
        }
    }
    let b = tokens(&[&[CLS, 10, 11, 12, 13, 14, SEP], &[CLS, 20, SEP], &[CLS, 30, 31, SEP]]);
    let nb = tsdae_noise(&b, 0.6, 4).unwrap().unwrap();
    assert_eq!(nb.rows, vec![0, 2]);
    assert_eq!(nb.noisy.lengths(), vec![2 + 2, 2 + 1]);
    assert_eq!(nb.decoder_input.lengths(), vec![6, 3]);
    assert_eq!(nb.targets, vec![10, 11, 12, 13, 14, SEP, 30, 31, SEP]);
    // kept tokens preserve order
    let kept: Vec<usize> = nb.noisy.row_ids(0)[1..3].to_vec();
    assert!(kept.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(tsdae_noise(&b, 0.6, 4).unwrap().unwrap(), nb);
    assert!(tsdae_noise(&tokens(&[&[CLS, 5, SEP]]), 0.6, 0).unwrap().is_none());
}

#[test]
fn tsdae_step_gradients() {
    let mut state = tiny(2);
    ensure_tsdae_decoder(&mut state, 3);
    let b = long_batch(2, 5, 1);
    check_step_gradients(
        &state,
        &["head.tsdae.layers.0.cross.v.w", "head.tsdae.bias", "embeddings.word", "layers.0.attn.q.w"],
        |ctx, s| tsdae_step(ctx, s, &b, 0.6, 5).unwrap().loss().unwrap(),
    );
    let mut ctx = ForwardCtx::inference();
    assert!(tsdae_step(&mut ctx, &state, &tokens(&[&[CLS, 7, SEP]]), 0.6, 0).unwrap().is_skip());
    assert!(tsdae_step(&mut ctx, &tiny(0), &b, 0.6, 0).is_err());
}

#[test]
fn simcse_examples() {
    let state = tiny(4);
    let b8 = long_batch(8, 6, 2);
    let mut ctx = ForwardCtx::<f64>::training(std::iter::empty::<String>(), Some(1));
    let l0 = simcse_step(&mut ctx, &state, &b8, 0.0, 1.0).unwrap();
    let l0 = ctx.graph.value(l0).data()[0];
    let e = crate::encoder::encode(&state, &b8).unwrap();
    let direct = mnrl_loss(&PairBatch::new(e.clone(), e, None).unwrap(), 1.0).unwrap();
    assert!((l0 - direct).abs() < 1e-12);

    let mut ctx = ForwardCtx::<f64>::training(std::iter::empty::<String>(), Some(1));
    let l = simcse_step(&mut ctx, &state, &long_batch(1, 6, 2), 0.1, 1.0).unwrap();
    assert_eq!(ctx.graph.value(l).data()[0], 0.0);

    let mut ctx = ForwardCtx::<f64>::training(std::iter::empty::<String>(), Some(2));
    let l = simcse_step(&mut ctx, &state, &b8, 0.1, 1.0).unwrap();
    let l = ctx.graph.value(l).data()[0];
    assert!(l > 0.0 && l <= 8f64.ln() + 1e-3, "dropout-view loss {l}");

    let mut ctx = ForwardCtx::<f64>::inference();
    assert!(simcse_step(&mut ctx, &state, &b8, 0.1, 1.0).is_err());
}

#[test]
fn simcse_gradients_flow_to_adapters() {
    let state = crate::adapters::attach(
        &tiny(5),
        crate::adapters::AdapterConfig::parallel().with_init(crate::adapters::InitMode::Random),
        1,
    )
    .unwrap();
    let names: Vec<String> = select_trainable(&state, Scope::Adapter).unwrap().names().cloned().collect();
    let mut ctx = ForwardCtx::training(names.clone(), Some(3));
    let l = simcse_step(&mut ctx, &state, &long_batch(4, 5, 0), 0.1, 1.0).unwrap();
    let grads = ctx.gradients(l);
    assert_eq!(grads.len(), names.len());
    assert!(grads.values().all(|g| g.iter().all(|v| v.is_finite())));
}
