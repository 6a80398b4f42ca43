use super::*;
use crate::action::Action;
use crate::rng::rng_from;

fn world() -> SyntheticWorldSpec {
    generate_world(7, 12, 24, 0.2).unwrap()
}

#[test]
fn full_sparsity_permits_everything() {
    let w = generate_world(1, 4, 5, 1.0).unwrap();
    assert!(w.mask.iter().all(|&m| m));
    assert_eq!(w.num_actions(), 20);
}

#[test]
fn world_is_reproducible_and_valid() {
    let a = world();
    assert_eq!(a, world());
    a.validate().unwrap();
    assert_ne!(a, generate_world(8, 12, 24, 0.2).unwrap());
}

#[test]
fn mask_density_near_sparsity() {
    // every noun keeps at least one verb, so the count sits a little above V·N·p
    let mut total = 0;
    for seed in 0..20 {
        total += generate_world(seed, 10, 20, 0.2).unwrap().num_actions();
    }
    let mean = total as f64 / 20.0;
    assert!((38.0..=48.0).contains(&mean), "mean permitted pairs {mean}");
}

#[test]
fn rejects_bad_arguments() {
    assert!(generate_world(0, 1, 5, 0.5).is_err());
    assert!(generate_world(0, 5, 5, 0.0).is_err());
    assert!(generate_world(0, 5, 5, 1.5).is_err());
}

#[test]
fn transitions_stay_in_permitted_states() {
    let w = world();
    for (s, row) in w.transitions.iter().enumerate() {
        assert!(row.len() <= w.options.fanout);
        assert!(row.iter().all(|&(t, _)| t != s && t < w.num_actions()));
    }
}

#[test]
fn empirical_transitions_match() {
    let w = generate_world(3, 4, 6, 0.5).unwrap();
    let path = w.sample_chain(200_000, &mut rng_from(9)).unwrap();
    let n = w.num_actions();
    let mut counts = vec![0f64; n * n];
    let mut from = vec![0f64; n];
    for pair in path.windows(2) {
        counts[pair[0] * n + pair[1]] += 1.0;
        from[pair[0]] += 1.0;
    }
    for s in 0..n {
        for t in 0..n {
            let emp = counts[s * n + t] / from[s];
            assert!((emp - w.transition_prob(s, t)).abs() < 0.02, "{s}->{t}: {emp}");
        }
    }
}

#[test]
fn clip_consistency() {
    let w = world();
    let (clip, feats) = generate_clip(&w, "c", 11, 60.0, 8).unwrap();
    clip.validate().unwrap();
    assert!(clip.events.len() >= 8);
    assert!(clip.events.iter().all(|e| w.permitted(e.action())));
    assert_eq!(feats.num_windows(), (60.0 / WINDOW_SECONDS).floor() as usize);
    assert_eq!(feats.dim(), w.options.feature_dim);
    assert_eq!(clip.events.last().unwrap().end_s, 60.0);
    let (c2, f2) = generate_clip(&w, "c", 11, 60.0, 8).unwrap();
    assert_eq!((clip, feats), (c2, f2));
}

#[test]
fn noiseless_windows_are_prototypes() {
    let opts = WorldOptions {
        noise_sigma: 0.0,
        ..WorldOptions::default()
    };
    let w = generate_world_with(5, 6, 8, 0.4, opts).unwrap();
    let protos = w.prototypes();
    let (clip, feats) = generate_clip(&w, "c", 2, 40.0, 4).unwrap();
    for r in 0..feats.num_windows() {
        let ev = clip.event_at((r as f64 + 0.5) * WINDOW_SECONDS).unwrap();
        let s = w.state_of(ev.action()).unwrap();
        for (c, &x) in feats.embeddings.row(r).iter().enumerate() {
            assert_eq!(x, protos.get2(s, c) as f32);
        }
    }
}

#[test]
fn two_stream_shares_verb_half() {
    let opts = WorldOptions {
        two_stream: true,
        ..WorldOptions::default()
    };
    let w = generate_world_with(5, 3, 8, 1.0, opts).unwrap();
    let p = w.prototypes();
    let (a, b) = (w.state_of(Action::new(1, 0)).unwrap(), w.state_of(Action::new(1, 5)).unwrap());
    assert_eq!(&p.row(a)[..16], &p.row(b)[..16]);
    assert_ne!(&p.row(a)[16..], &p.row(b)[16..]);
}

#[test]
fn short_duration_is_rejected() {
    assert!(generate_clip(&world(), "c", 1, 5.0, 8).is_err());
}

#[test]
fn example_targets_and_padding() {
    let w = world();
    let (clip, feats) = generate_clip(&w, "c", 4, 60.0, 12).unwrap();
    let cut = clip.events[3].start_s;
    let ex = make_example::<f64>(&clip, &feats, cut, 16, 8, 5).unwrap().unwrap();
    let expected: Vec<Action> = clip.events[3..8].iter().map(|e| e.action()).collect();
    assert_eq!(ex.targets.0, expected);
    let observed = ((cut / WINDOW_SECONDS) + 1e-9).floor() as usize;
    let padded = 24usize.saturating_sub(observed);
    assert_eq!(ex.memory.mask.iter().filter(|m| !**m).count(), padded);
    assert!(ex.memory.embeddings.row(0).iter().all(|&x| x == 0.0) || padded == 0);
    let last = ex.memory.embeddings.row(23);
    let src = feats.embeddings.row(observed - 1);
    assert!(last.iter().zip(src).all(|(a, b)| *a == *b as f64));
    assert_eq!(ex.frame_labels[23], Some(clip.events[2].action()));

    // minimal observation
    let ex = make_example::<f64>(&clip, &feats, WINDOW_SECONDS, 16, 8, 5).unwrap().unwrap();
    assert_eq!(ex.memory.mask.iter().filter(|m| **m).count(), 1);
    assert!(ex.memory.mask[23]);
    assert_eq!(ex.targets.len(), 5);
}

#[test]
fn example_skips() {
    let w = world();
    let (clip, feats) = generate_clip(&w, "c", 4, 60.0, 12).unwrap();
    assert!(matches!(
        make_example::<f64>(&clip, &feats, 0.1, 4, 4, 3).unwrap(),
        Err(SkipReason::NoObservation { .. })
    ));
    let late = clip.events[clip.events.len() - 2].start_s;
    assert!(matches!(
        make_example::<f64>(&clip, &feats, late, 4, 4, 3).unwrap(),
        Err(SkipReason::TooFewFutureActions { have: 2, need: 3, .. })
    ));
}

#[test]
fn cuts_are_valid() {
    let w = world();
    let (clip, feats) = generate_clip(&w, "c", 4, 60.0, 12).unwrap();
    let cuts = candidate_cuts(&clip, WINDOW_SECONDS, 8, 5, 4);
    assert_eq!(cuts.len(), 4);
    for c in cuts {
        assert!(make_example::<f64>(&clip, &feats, c, 16, 8, 5).unwrap().is_ok());
    }
}

#[test]
fn files_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let w = world();
    let shape = DatasetShape {
        train_clips: 3,
        val_clips: 2,
        duration_s: 40.0,
        min_events: 6,
    };
    let ds = generate_dataset(&w, 1, &shape).unwrap();
    assert_eq!(ds.split("val").len(), 2);
    ds.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, ds);
    assert_eq!(generate_dataset(&w, 1, &shape).unwrap(), ds);
    let bytes = std::fs::read(dir.path().join("features/train_00000.bin")).unwrap();
    assert_eq!(&bytes[..4], &ds.features[0].embeddings.data()[0].to_le_bytes());
}

#[test]
fn annotation_validation() {
    let mut clip = ClipAnnotation {
        clip_id: "x".into(),
        split: "train".into(),
        num_verbs: 2,
        num_nouns: 2,
        duration_s: 3.0,
        events: vec![
            Event { start_s: 0.0, end_s: 1.0, verb_id: 0, noun_id: 1 },
            Event { start_s: 1.0, end_s: 2.0, verb_id: 1, noun_id: 1 },
        ],
    };
    clip.validate().unwrap();
    clip.events[1].start_s = 0.5;
    assert!(clip.validate().is_err());
    clip.events[1].start_s = 1.0;
    clip.events[1].noun_id = 2;
    assert!(clip.validate().is_err());
}

#[test]
fn ego4d_grouping() {
    let json = r#"{"clips": [
        {"clip_uid": "b", "action_idx": 1, "verb_label": 3, "noun_label": 4, "action_clip_start_sec": 2.0, "action_clip_end_sec": 3.0},
        {"clip_uid": "a", "action_idx": 0, "verb_label": 0, "noun_label": 1, "action_clip_start_sec": 0.0, "action_clip_end_sec": 1.0},
        {"clip_uid": "b", "action_idx": 0, "verb_label": 1, "noun_label": 2, "action_clip_start_sec": 0.5, "action_clip_end_sec": 2.5}
    ]}"#;
    let clips = read_ego4d_lta(json, "train", 117, 521).unwrap();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips[1].clip_id, "b");
    assert_eq!(clips[1].actions().0, vec![Action::new(1, 2), Action::new(3, 4)]);
    assert_eq!(clips[1].events[1].start_s, 2.5);
    let unlabeled = r#"{"clips": [{"clip_uid": "a", "action_idx": 0, "verb_label": null, "noun_label": null, "action_clip_start_sec": 0.0, "action_clip_end_sec": 1.0}]}"#;
    assert!(read_ego4d_lta(unlabeled, "test", 117, 521).is_err());
}
