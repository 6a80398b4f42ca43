use super::*;
use crate::action::Action;
use crate::dataio::{generate_dataset, generate_world, DatasetShape, Example};
use crate::interaction::{build_cooccurrence, build_taxonomy, DecodeMode};
use crate::numerics::Tensor;

fn tiny() -> TrainConfig {
    TrainConfig {
        d_model: 16,
        enc_layers: 1,
        dec_layers: 1,
        heads: 2,
        n_state: 4,
        feature_dim: 8,
        num_verbs: 5,
        num_nouns: 7,
        long_len: 4,
        short_len: 4,
        num_queries: 3,
        batch_size: 4,
        epochs: 2,
        ..TrainConfig::default()
    }
}

fn examples(cfg: &TrainConfig, clips: usize) -> Vec<Example<f64>> {
    let mut world = generate_world(2, cfg.num_verbs, cfg.num_nouns, 0.5).unwrap();
    world.options.feature_dim = cfg.feature_dim;
    let shape = DatasetShape {
        train_clips: clips,
        val_clips: 0,
        duration_s: 30.0,
        min_events: 6,
    };
    let ds = generate_dataset(&world, 3, &shape).unwrap();
    build_examples(&ds, cfg, 2).unwrap().0
}

fn zero_heads(model: &mut QueryMamba<f64>) {
    for p in model.store.iter_mut() {
        if p.name.starts_with("head.") {
            p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

#[test]
fn config_text_overrides_defaults() {
    let cfg = TrainConfig::from_text("d_model = 32\nseed = 9\ndecode_mode = \"argmax\"\nprecision = \"f32\"\n").unwrap();
    assert_eq!(cfg.d_model, 32);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.decode_mode, DecodeMode::Argmax);
    assert_eq!(cfg.precision, Precision::F32);
    assert_eq!(cfg.num_verbs, TrainConfig::default().num_verbs);
    assert!(TrainConfig::from_text("no_such_key = 1").is_err());
    assert!(TrainConfig::from_text("loss_verb = false\nloss_noun = false").is_err());
    assert!(TrainConfig::from_text("d_model = 30\nheads = 8").is_err());
    let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn uniform_predictions_give_log_vocab_loss() {
    let cfg = tiny();
    let ex = examples(&cfg, 2);
    let mut model = QueryMamba::<f64>::new(cfg, None).unwrap();
    zero_heads(&mut model);
    let parts = model.loss(&ex[0]).unwrap();
    assert!((parts.total - (5f64.ln() + 7f64.ln())).abs() < 1e-12);
}

#[test]
fn action_loss_needs_taxonomy_and_adds_nonnegative_term() {
    let cfg = TrainConfig {
        loss_action: true,
        ..tiny()
    };
    assert!(matches!(QueryMamba::<f64>::new(cfg.clone(), None), Err(crate::Error::Config(_))));
    let ex = examples(&cfg, 3);
    let cooc = build_cooccurrence(ex.iter().flat_map(|e| e.targets.0.clone()), 5, 7, "train").unwrap();
    let tax = build_taxonomy(&cooc);
    let with = QueryMamba::<f64>::new(cfg.clone(), Some(tax.clone())).unwrap();
    let without = QueryMamba::<f64>::new(tiny(), Some(tax)).unwrap();
    let a = with.loss(&ex[0]).unwrap();
    let b = without.loss(&ex[0]).unwrap();
    assert!(a.action > 0.0);
    assert_eq!(a.verb, b.verb);
    assert_eq!(a.noun, b.noun);
    assert!((a.total - b.total - a.action).abs() < 1e-12);
}

#[test]
fn action_head_leaves_verb_noun_outputs_unchanged() {
    let cfg = tiny();
    let ex = examples(&cfg, 1);
    let tax = crate::interaction::ActionTaxonomy::from_pairs(vec![Action::new(0, 0), Action::new(1, 2)]).unwrap();
    let plain = QueryMamba::<f64>::new(cfg.clone(), None).unwrap();
    let with = QueryMamba::<f64>::new(
        TrainConfig {
            loss_action: true,
            ..cfg
        },
        Some(tax),
    )
    .unwrap();
    let p = plain.predict(&ex[0].memory).unwrap();
    let q = with.predict(&ex[0].memory).unwrap();
    assert_eq!(p.verbs, q.verbs);
    assert_eq!(p.nouns, q.nouns);
    assert_eq!(q.actions.unwrap().shape(), &[3, 2]);
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = TrainConfig {
        epochs: 15,
        learning_rate: 3e-3,
        ..tiny()
    };
    let ex = examples(&cfg, 2);
    let run = || {
        let mut m = QueryMamba::<f64>::new(cfg.clone(), None).unwrap();
        let s = train(&mut m, &ex).unwrap();
        (m, s)
    };
    let (m1, s1) = run();
    let (m2, s2) = run();
    assert_eq!(s1.curve, s2.curve);
    assert_eq!(m1.store.iter().next().unwrap().value, m2.store.iter().next().unwrap().value);
    let first = s1.curve.first().unwrap().loss;
    let last = s1.curve.last().unwrap().loss;
    assert!(last < first, "{first} -> {last}");
    assert_eq!(s1.curve.len(), planned_steps(&cfg, ex.len()));
}

#[test]
fn nan_input_aborts_with_diagnostic() {
    let cfg = tiny();
    let mut ex = examples(&cfg, 1);
    let n = ex[0].memory.embeddings.numel();
    ex[0].memory.embeddings.data_mut()[n - 1] = f64::NAN;
    let mut m = QueryMamba::<f64>::new(cfg, None).unwrap();
    let batch = [&ex[0]];
    let mut opt = AdamW::new(&m.store);
    let err = train_step(&mut m, &mut opt, &batch, 1e-3);
    assert!(matches!(err, Err(crate::Error::Diverged { .. }) | Err(crate::Error::NonFinite(_))), "{err:?}");
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let cfg = TrainConfig { epochs: 1, ..tiny() };
    let ex = examples(&cfg, 2);
    let mut m = QueryMamba::<f64>::new(cfg, None).unwrap();
    let state = train(&mut m, &ex).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::new(&m, state.clone()).save(&path).unwrap();
    assert_eq!(checkpoint_scalar(&path).unwrap(), "f64");
    let back = Checkpoint::<f64>::load(&path).unwrap();
    assert!(Checkpoint::<f32>::load(&path).is_err());
    assert_eq!(back.state.curve, state.curve);
    let m2 = back.model().unwrap();
    let a = m.predict(&ex[0].memory).unwrap();
    let b = m2.predict(&ex[0].memory).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let cfg = TrainConfig { epochs: 2, ..tiny() };
    let ex = examples(&cfg, 3);
    let mut full = QueryMamba::<f64>::new(cfg.clone(), None).unwrap();
    let full_state = train(&mut full, &ex).unwrap();

    let mut part = QueryMamba::<f64>::new(cfg, None).unwrap();
    let fresh = TrainState {
        optimizer: AdamW::new(&part.store),
        epoch: 0,
        curve: Vec::new(),
    };
    let st = resume_until(&mut part, &ex, fresh, 3).unwrap();
    assert_eq!(st.curve.len(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    Checkpoint::new(&part, st).save(&path).unwrap();
    let back = Checkpoint::<f64>::load(&path).unwrap();
    let mut part = back.model().unwrap();
    let resumed = resume(&mut part, &ex, back.state).unwrap();
    assert_eq!(resumed.curve, full_state.curve);
    for (p, q) in part.store.iter().zip(full.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
}

#[test]
fn argmax_without_interaction_is_independent_argmax() {
    let cfg = tiny();
    let ex = examples(&cfg, 1);
    let m = QueryMamba::<f64>::new(cfg, None).unwrap();
    let opts = InferOptions {
        decode_mode: DecodeMode::Argmax,
        k: 1,
        use_interaction: false,
        seed: 0,
    };
    let got = predict_example(&m, &ex[0], None, &opts).unwrap();
    let p = m.predict(&ex[0].memory).unwrap();
    let argmax = |t: &Tensor<f64>, r: usize| {
        let row = t.row(r);
        (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b })
    };
    let expected: Vec<Action> = (0..3).map(|z| Action::new(argmax(&p.verbs, z), argmax(&p.nouns, z))).collect();
    assert_eq!(got, vec![expected.into_iter().collect()]);
}

#[test]
fn one_hot_cooccurrence_collapses_predictions() {
    let cfg = tiny();
    let ex = examples(&cfg, 2);
    let m = QueryMamba::<f64>::new(cfg, None).unwrap();
    let cooc = build_cooccurrence([Action::new(3, 4)], 5, 7, "train").unwrap();
    for mode in [DecodeMode::Argmax, DecodeMode::Sample] {
        let opts = InferOptions {
            decode_mode: mode,
            k: 4,
            use_interaction: true,
            seed: 1,
        };
        for rec in infer(&m, &ex[..1], Some(&cooc), &opts).unwrap() {
            assert!(rec.candidates.iter().flat_map(|s| s.0.iter()).all(|&a| a == Action::new(3, 4)));
        }
    }
    let wrong = build_cooccurrence([Action::new(0, 0)], 4, 7, "train").unwrap();
    let opts = InferOptions {
        decode_mode: DecodeMode::Sample,
        k: 2,
        use_interaction: true,
        seed: 1,
    };
    assert!(matches!(infer(&m, &ex[..1], Some(&wrong), &opts), Err(crate::Error::Config(_))));
}

#[test]
fn sampling_is_reproducible() {
    let cfg = tiny();
    let ex = examples(&cfg, 2);
    let m = QueryMamba::<f64>::new(cfg, None).unwrap();
    let opts = InferOptions {
        decode_mode: DecodeMode::Sample,
        k: 5,
        use_interaction: false,
        seed: 4,
    };
    let a = predict_example(&m, &ex[0], None, &opts).unwrap();
    assert_eq!(a, predict_example(&m, &ex[0], None, &opts).unwrap());
    assert_eq!(a.len(), 5);
}

#[test]
fn baseline_takes_per_slot_mode() {
    let cfg = tiny();
    let mut ex = examples(&cfg, 1);
    ex.truncate(1);
    let mut second = ex[0].clone();
    second.clip_id = "other".into();
    let mut third = ex[0].clone();
    third.clip_id = "third".into();
    third.targets.0[0] = Action::new(4, 6);
    let set = vec![ex[0].clone(), second, third];
    let b = MarginalBaseline::fit(&set).unwrap();
    assert_eq!(b.slots, ex[0].targets);
    assert_eq!(b.predict(&set).len(), 3);
}

#[test]
fn cosine_schedule() {
    let cfg = TrainConfig {
        learning_rate: 1.0,
        warmup_steps: 2,
        ..TrainConfig::default()
    };
    assert_eq!(learning_rate(&cfg, 0, 12), 0.5);
    assert_eq!(learning_rate(&cfg, 2, 12), 1.0);
    assert!((learning_rate(&cfg, 7, 12) - 0.5).abs() < 1e-12);
    assert!(learning_rate(&cfg, 12, 12).abs() < 1e-12);
}

#[test]
fn gradient_clipping_caps_global_norm() {
    let mut store = crate::nn::ParamStore::<f64>::new(0);
    let a = store.constant("a", &[2], 0.0);
    let b = store.constant("b", &[1], 0.0);
    store.get_mut(a).grad = Some(Tensor::vector(vec![3.0, 0.0]));
    store.get_mut(b).grad = Some(Tensor::vector(vec![4.0]));
    assert_eq!(clip_gradients(&mut store, 1.0), 5.0);
    let ga = store.get(a).grad.as_ref().unwrap().data();
    assert!((ga[0] - 0.6).abs() < 1e-15 && ga[1] == 0.0);
    assert!((store.get(b).grad.as_ref().unwrap().data()[0] - 0.8).abs() < 1e-15);
}
