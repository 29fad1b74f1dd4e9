use super::*;
use crate::adapters::{attach, import_adapter, AdapterConfig, InitMode};
use crate::data::{sample_few_shot, synth_corpus, PairStream, SynthCorpus, SynthSpec};
use crate::encoder::{cos_sim, encode_texts, ArchitectureConfig, ForwardCtx, Pooling, Scope};
use crate::head::{HeadConfig, LogisticHead};
use crate::objectives::{mlm_step, StepOutcome};
use crate::pairgen::FewShotSet;

type E = EncoderState<f32>;

fn base(seed: u64) -> E {
    EncoderState::init(ArchitectureConfig::tiny(), Pooling::Mean, seed).unwrap()
}

fn corpus(train_per_class: usize, seed: u64) -> SynthCorpus {
    let spec = SynthSpec { train_per_class, test_per_class: 20, pairs_per_class: 20, seed, ..SynthSpec::default() };
    synth_corpus(&spec, &base(0).tokenizer()).unwrap()
}

fn quick(cfg: StageConfig, steps: usize, batch: usize, lr: f64) -> StageConfig {
    StageConfig { batch_size: batch, learning_rate: Some(lr), ..cfg.with_steps(steps) }
}

#[test]
fn stage_config_needs_exactly_one_budget() {
    let mut cfg = StageConfig::dapt();
    cfg.epochs = Some(1);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    cfg.steps = None;
    cfg.epochs = None;
    assert!(cfg.validate().is_err());
    assert!(StageConfig::sept().validate().is_ok());
    assert_eq!(StageConfig::dapt().resolved_lr(StageTag::Dapt, true), 1e-4);
    assert_eq!(StageConfig::sept().resolved_lr(StageTag::Sept, false), 2e-5);
    let texts = vec!["a b c".to_string()];
    assert!(run_dapt(&base(0), &[], &StageConfig::dapt()).is_err());
    assert!(run_sept(&base(0), &PairStream::new("x", vec![]).unwrap(), &StageConfig::sept()).is_err());
    assert!(run_dapt(&base(0), &texts, &cfg).is_err());
}

#[test]
fn batch_plans_cover_each_epoch() {
    let plan = batch_plan(10, 4, None, Some(2), 1);
    assert_eq!(plan.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2, 4, 4, 2]);
    let mut first: Vec<usize> = plan[..3].concat();
    first.sort_unstable();
    assert_eq!(first, (0..10).collect::<Vec<_>>());
    assert_eq!(batch_plan(10, 4, Some(7), None, 1).len(), 7);
    assert_eq!(batch_plan(64, 64, None, Some(1), 1).len(), 1);
}

#[test]
fn zero_dapt_steps_is_a_no_op() {
    let b = base(1);
    let (out, log) = run_dapt(&b, &["x y z".to_string()], &StageConfig::dapt().with_steps(0)).unwrap();
    assert_eq!(out, b);
    assert_eq!(log.steps, 0);
}

fn mlm_eval(state: &E, texts: &[String]) -> f64 {
    let batch = state.tokenizer().batch(texts, 64).unwrap();
    let mut ctx = ForwardCtx::inference();
    let cfg = crate::objectives::MaskingConfig::with_prob(0.3);
    match mlm_step(&mut ctx, state, &batch, &cfg, 99).unwrap() {
        StepOutcome::Loss(l) => ctx.graph.value(l).data()[0] as f64,
        StepOutcome::SkipBatch => panic!("masked nothing"),
    }
}

#[test]
fn mlm_overfits_one_batch() {
    let texts = corpus(3, 2).unlabeled[..8].to_vec();
    let b = base(3);
    let before = mlm_eval(&b, &texts);
    let (out, log) = run_dapt(&b, &texts, &quick(StageConfig::dapt(), 50, 8, 1e-3)).unwrap();
    assert_eq!(log.steps, 50);
    let after = mlm_eval(&out, &texts);
    assert!(after < before, "{before} -> {after}");
    assert_eq!(out.provenance.stages(), vec![StageTag::Base, StageTag::Dapt]);
}

#[test]
fn tsdae_and_simcse_losses_fall() {
    let texts = corpus(3, 4).unlabeled[..8].to_vec();
    for objective in [Objective::Tsdae, Objective::Simcse] {
        let cfg = StageConfig { objective, ..quick(StageConfig::dapt(), 40, 8, 1e-3) };
        let (out, log) = run_dapt(&base(5), &texts, &cfg).unwrap();
        assert!(out.all_finite());
        let head: f64 = log.losses[..5].iter().sum();
        let tail: f64 = log.losses[log.losses.len() - 5..].iter().sum();
        assert!(tail < head, "{objective:?}: {head} -> {tail}");
    }
}

#[test]
fn peft_dapt_trains_only_the_adapter_and_head() {
    let texts = corpus(3, 6).unlabeled[..8].to_vec();
    let b = base(7);
    let cfg = quick(StageConfig::dapt(), 5, 8, 1e-3).with_peft(AdapterConfig::parallel());
    let (out, _) = run_dapt(&b, &texts, &cfg).unwrap();
    assert!(out.weights.bit_eq(&b.weights));
    assert!(!out.heads.bit_eq(&b.heads));
    let ad = out.adapter.as_ref().unwrap();
    assert_eq!(ad.trained_stages, vec![StageTag::Dapt]);
    assert!(ad.tensors.iter().any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
}

fn diag_cos(state: &E, pairs: &PairStream) -> f64 {
    let (a, p): (Vec<&str>, Vec<&str>) = pairs.pairs.iter().map(|(a, p)| (a.as_str(), p.as_str())).unzip();
    let x = encode_texts(state, &a, 64).unwrap();
    let y = encode_texts(state, &p, 64).unwrap();
    x.iter().zip(&y).map(|(u, v)| cos_sim(&u.vector, &v.vector).unwrap() as f64).sum::<f64>() / x.len() as f64
}

#[test]
fn sept_pulls_positives_together() {
    let pairs = PairStream::new("p", corpus(10, 8).pairs.pairs[..30].to_vec()).unwrap();
    let b = base(9);
    let cfg = StageConfig { batch_size: 10, learning_rate: Some(1e-3), ..StageConfig::sept().with_epochs(20) };
    let (out, log) = run_sept(&b, &pairs, &cfg).unwrap();
    assert_eq!(log.steps, 60);
    let out = out.into_encoder().unwrap();
    let (before, after) = (diag_cos(&b, &pairs), diag_cos(&out, &pairs));
    assert!(after > before, "{before} -> {after}");
    assert_eq!(out.provenance.stages(), vec![StageTag::Base, StageTag::Sept]);
}

#[test]
fn peft_sept_freezes_the_backbone() {
    let spec = SynthSpec { pairs_per_class: 22, seed: 10, ..SynthSpec::default() };
    let c = synth_corpus(&spec, &base(0).tokenizer()).unwrap();
    let pairs = PairStream::new("p", c.pairs.pairs[..64].to_vec()).unwrap();
    let b = base(11);
    let cfg = StageConfig { learning_rate: Some(1e-3), ..StageConfig::sept().with_peft(AdapterConfig::parallel()) };
    let (out, log) = run_sept(&b, &pairs, &cfg).unwrap();
    assert_eq!(log.steps, 1);
    let ad = out.into_adapter().unwrap();
    assert_eq!(ad.trained_stages, vec![StageTag::Sept]);
    assert!(ad.training_hash.is_some());
    let on = import_adapter(&b, &ad).unwrap();
    assert!(on.weights.bit_eq(&b.weights));
    assert_eq!(on.provenance.stages(), vec![StageTag::Base, StageTag::Sept]);
}

fn builder(b: E) -> Builder<f32> {
    let dapt = quick(StageConfig::dapt(), 3, 8, 1e-3);
    let sept = StageConfig { batch_size: 8, learning_rate: Some(1e-3), ..StageConfig::sept() };
    Builder::new(b, dapt, sept, AdapterConfig::parallel())
}

#[test]
fn strategies_compose_in_the_stated_order() {
    let c = corpus(4, 12);
    let mut bd = builder(base(13));
    let b = bd.registry.encoder(&ArtifactKey::Base).unwrap().clone();
    assert_eq!(compose(StrategyId::Base, "t", &bd.registry).unwrap(), b);
    assert!(matches!(
        compose(StrategyId::Adasent, "t", &bd.registry),
        Err(Error::MissingArtifact { ref stage, .. }) if stage == "dapt/t"
    ));
    for s in StrategyId::ALL {
        let enc = bd.build(s, "t", &c.unlabeled, &c.pairs).unwrap();
        let mut want = vec![StageTag::Base];
        want.extend(s.stages());
        assert_eq!(enc.provenance.stages(), want, "{s}");
        assert_eq!(StrategyId::parse(&s.as_str().to_lowercase()).unwrap(), s);
    }
    let ada = bd.build(StrategyId::Adasent, "t", &c.unlabeled, &c.pairs).unwrap();
    let own = bd.build(StrategyId::DaptThenSeptAda, "t", &c.unlabeled, &c.pairs).unwrap();
    assert!(ada.weights.bit_eq(&own.weights));
    assert!(!ada.adapter.as_ref().unwrap().tensors.bit_eq(&own.adapter.as_ref().unwrap().tensors));
    let ds = bd.build(StrategyId::DaptThenSept, "t", &c.unlabeled, &c.pairs).unwrap();
    let sd = bd.build(StrategyId::SeptThenDapt, "t", &c.unlabeled, &c.pairs).unwrap();
    assert!(!ds.weights.bit_eq(&sd.weights));
    // each artifact trained once: 2 shared SEPT + 2 per-task SEPT, 3 DAPT runs
    assert_eq!(bd.runs(StageTag::Sept), 4);
    assert_eq!(bd.runs(StageTag::Dapt), 3);
}

#[test]
fn shared_adapter_is_trained_once_across_tasks() {
    let tasks: Vec<(String, SynthCorpus)> = (0..3).map(|t| (format!("t{t}"), corpus(4, 20 + t))).collect();
    let mut ada = builder(base(14));
    let mut seq = builder(base(14));
    for (name, c) in &tasks {
        ada.build(StrategyId::Adasent, name, &c.unlabeled, &c.pairs).unwrap();
        seq.build(StrategyId::DaptThenSept, name, &c.unlabeled, &c.pairs).unwrap();
    }
    assert_eq!((ada.runs(StageTag::Sept), ada.runs(StageTag::Dapt)), (1, 3));
    assert_eq!((seq.runs(StageTag::Sept), seq.runs(StageTag::Dapt)), (3, 3));
    assert!(ada.ledger.iter().filter(|r| r.stage == StageTag::Sept).all(|r| r.shared));
}

#[test]
fn untrained_shared_adapter_is_invisible() {
    let c = corpus(4, 15);
    let mut bd = builder(base(16));
    bd.ensure(&ArtifactKey::Dapt { dataset: "t".into() }, &c.unlabeled, &c.pairs).unwrap();
    let dapt = bd.registry.encoder(&ArtifactKey::Dapt { dataset: "t".into() }).unwrap().clone();
    let fresh = attach(&dapt, AdapterConfig::parallel().with_init(InitMode::ZeroOutProj), 0).unwrap();
    bd.registry.insert(ArtifactKey::SeptAdapter, Artifact::Adapter(fresh.adapter.unwrap()));
    let ada = compose(StrategyId::Adasent, "t", &bd.registry).unwrap();
    let texts = &c.unlabeled[..6];
    let x = encode_texts(&ada, texts, 8).unwrap();
    let y = encode_texts(&dapt, texts, 8).unwrap();
    assert_eq!(x, y);
}

fn few_shot(c: &SynthCorpus, k: usize, seed: u64) -> FewShotSet {
    sample_few_shot(&c.dataset, k, seed).unwrap()
}

#[test]
fn setfit_with_no_scope_only_fits_the_head() {
    let c = corpus(10, 17);
    let b = base(18);
    let fs = few_shot(&c, 4, 1);
    let cfg = SetFitConfig { scope: Some(Scope::None), ..SetFitConfig::default() };
    let (model, log) = run_setfit(&b, &fs, &cfg).unwrap();
    assert_eq!(model.encoder, b);
    assert_eq!(log.steps, 0);
    let direct = LogisticHead::fit(&encode_texts(&b, &fs.texts(), 64).unwrap(), &fs.labels(), 3, &HeadConfig::default()).unwrap();
    assert!(model.head.bit_eq(&direct));
}

#[test]
fn setfit_tunes_then_fits_on_the_tuned_encoder() {
    let c = corpus(20, 19);
    let b = base(20);
    let fs = few_shot(&c, 8, 2);
    let cfg = SetFitConfig { learning_rate: Some(1e-3), rng_seed: 3, ..SetFitConfig::default() };
    let (model, log) = run_setfit(&b, &fs, &cfg).unwrap();
    // 3 classes of 8: 84 positives, as many negatives, in batches of 16
    assert_eq!(log.steps, 168usize.div_ceil(16));
    assert!(!model.encoder.weights.bit_eq(&b.weights));
    assert_eq!(model.encoder.provenance.stages().last(), Some(&StageTag::Setfit));
    let refit = LogisticHead::fit(&encode_texts(&model.encoder, &fs.texts(), 64).unwrap(), &fs.labels(), 3, &cfg.head).unwrap();
    assert!(model.head.bit_eq(&refit));
    let single = FewShotSet::from_items(vec![("a".into(), 0), ("b".into(), 1)], vec!["x".into(), "y".into()], 0).unwrap();
    assert!(matches!(run_setfit(&b, &single, &cfg), Err(Error::NoPositives)));
}

#[test]
fn setfit_separates_disjoint_vocabularies() {
    let c = corpus(20, 21);
    let fs = few_shot(&c, 8, 4);
    let cfg = SetFitConfig { learning_rate: Some(1e-3), epochs: 2, rng_seed: 4, ..SetFitConfig::default() };
    let (model, _) = run_setfit(&base(22), &fs, &cfg).unwrap();
    let texts: Vec<&str> = c.dataset.test.iter().map(|e| e.text.as_str()).collect();
    let pred = model.predict(&texts).unwrap();
    let acc = pred.iter().zip(&c.dataset.test).filter(|(p, e)| **p == e.label).count() as f64 / texts.len() as f64;
    assert!(acc > 1.0 / 3.0 + 0.2, "accuracy {acc}");
}

fn blobs(seed: u64, n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for c in 0..2 {
        for _ in 0..n {
            let centre = if c == 0 { -1.5 } else { 1.5 };
            x.push(vec![centre + rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)]);
            y.push(c);
        }
    }
    (x, y)
}

#[test]
fn self_training_degenerate_cases_return_the_plain_fit() {
    let (gx, gy) = blobs(1, 8);
    let plain = LogisticHead::fit_rows(&gx, &gy, 2, &HeadConfig::default()).unwrap();
    let (ux, _) = blobs(2, 50);
    let high = SelfTrainingConfig { threshold: 1.1, ..SelfTrainingConfig::default() };
    let out = self_train_rows(&plain, &gx, &gy, &ux, &high).unwrap();
    assert!(out.head.bit_eq(&plain) && out.pseudo.is_empty());
    let out = self_train_rows(&plain, &gx, &gy, &[], &SelfTrainingConfig::default()).unwrap();
    assert!(out.head.bit_eq(&plain));
    for bad in [0.0, -1.0, f64::INFINITY, f64::NAN] {
        let cfg = SelfTrainingConfig { threshold: bad, ..SelfTrainingConfig::default() };
        assert!(matches!(self_train_rows(&plain, &gx, &gy, &ux, &cfg), Err(Error::Config(_))));
    }
}

#[test]
fn pseudo_labels_only_accumulate() {
    let (gx, gy) = blobs(3, 8);
    let plain = LogisticHead::fit_rows(&gx, &gy, 2, &HeadConfig::default()).unwrap();
    let (ux, _) = blobs(4, 200);
    let cfg = SelfTrainingConfig { threshold: 0.7, ..SelfTrainingConfig::default() };
    let out = self_train_rows(&plain, &gx, &gy, &ux, &cfg).unwrap();
    assert!(!out.pseudo.is_empty() && out.iterations <= 10);
    assert!(out.pseudo.windows(2).all(|w| w[0].iteration <= w[1].iteration));
    let mut ids: Vec<usize> = out.pseudo.iter().map(|p| p.index).collect();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), out.pseudo.len());
}

#[test]
fn self_training_runs_on_encoder_embeddings() {
    let c = corpus(10, 23);
    let b = base(24);
    let fs = few_shot(&c, 4, 5);
    let (model, _) = run_setfit(&b, &fs, &SetFitConfig { scope: Some(Scope::None), ..SetFitConfig::default() }).unwrap();
    let none: [&str; 0] = [];
    let out = run_self_training(&model.head, &model.encoder, &fs, &none, &SelfTrainingConfig::default()).unwrap();
    assert!(out.head.bit_eq(&model.head));
    let out = run_self_training(&model.head, &model.encoder, &fs, &c.unlabeled, &SelfTrainingConfig::default()).unwrap();
    assert!(out.pseudo.iter().all(|p| p.index < c.unlabeled.len()));
}
