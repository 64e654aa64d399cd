use fairpref::datagen::{PreferencePair, World, WorldConfig};
use fairpref::fairness::FairnessSpec;
use fairpref::trainer::{
    gap_accuracy, model_gaps, resume, trace_to_csv, train, Checkpoint, Model, ObjectiveKind, OptimizerKind,
    TrainConfig, TrainData, TRACE_CSV_HEADER,
};
use fairpref::Error;

fn pairs(pairs_per_group: usize, seed: u64) -> Vec<PreferencePair> {
    World::new(WorldConfig {
        pairs_per_group,
        seed,
        ..WorldConfig::default()
    })
    .unwrap()
    .generate_pairs()
}

fn cfg(objective: ObjectiveKind) -> TrainConfig {
    TrainConfig {
        objective,
        epochs: 2,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn degenerate_fairness_weights_reproduce_baselines() {
    let data = pairs(200, 3);
    let zero = FairnessSpec {
        alpha: 0.0,
        gamma: 0.0,
        tau: 2.0,
        ..FairnessSpec::default()
    };
    for (base, others) in [
        (ObjectiveKind::BtRm, [ObjectiveKind::FrRm, ObjectiveKind::FcRm]),
        (ObjectiveKind::Dpo, [ObjectiveKind::FrDpo, ObjectiveKind::FcDpo]),
    ] {
        let with = |o| TrainConfig {
            fairness: zero,
            ..cfg(o)
        };
        let reference = train(&with(base), TrainData::Pairs(&data)).unwrap();
        for o in others {
            let out = train(&with(o), TrainData::Pairs(&data)).unwrap();
            assert_eq!(out.trace, reference.trace, "{}", o.as_str());
            assert_eq!(out.checkpoint.model.net(), reference.checkpoint.model.net());
        }
    }
}

#[test]
fn replay_is_deterministic() {
    let data = pairs(200, 4);
    let c = cfg(ObjectiveKind::FrRm);
    let a = train(&c, TrainData::Pairs(&data)).unwrap();
    let b = train(&c, TrainData::Pairs(&data)).unwrap();
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.checkpoint, b.checkpoint);
    let other = train(
        &TrainConfig {
            seed: 12,
            ..c
        },
        TrainData::Pairs(&data),
    )
    .unwrap();
    assert_ne!(a.trace, other.trace);
}

#[test]
fn resume_equals_uninterrupted() {
    let data = pairs(400, 5);
    for objective in [ObjectiveKind::FcRm, ObjectiveKind::FrDpo] {
        let base = TrainConfig {
            epochs: 50,
            ..cfg(objective)
        };
        let full = train(
            &TrainConfig {
                max_steps: Some(200),
                ..base.clone()
            },
            TrainData::Pairs(&data),
        )
        .unwrap();
        let first = train(
            &TrainConfig {
                max_steps: Some(100),
                ..base.clone()
            },
            TrainData::Pairs(&data),
        )
        .unwrap();
        assert_eq!(first.checkpoint.step, 100);
        // Through the on-disk encoding, as the CLI does.
        let ck = Checkpoint::from_json(&first.checkpoint.to_json().unwrap()).unwrap();
        let rest = resume(
            &ck,
            &TrainConfig {
                max_steps: Some(200),
                ..base
            },
            TrainData::Pairs(&data),
        )
        .unwrap();
        assert_eq!(rest.checkpoint.step, 200);
        assert_eq!(rest.checkpoint.model, full.checkpoint.model);
        assert_eq!(rest.checkpoint.optimizer, full.checkpoint.optimizer);
        let joined: Vec<_> = first.trace.iter().chain(&rest.trace).copied().collect();
        assert_eq!(joined, full.trace);
    }
}

#[test]
fn resume_rejects_incompatible_runs() {
    let data = pairs(100, 6);
    let c = TrainConfig {
        max_steps: Some(5),
        ..cfg(ObjectiveKind::BtRm)
    };
    let ck = train(&c, TrainData::Pairs(&data)).unwrap().checkpoint;

    let lr = TrainConfig {
        learning_rate: 0.01,
        ..c.clone()
    };
    assert!(matches!(resume(&ck, &lr, TrainData::Pairs(&data)), Err(Error::Checkpoint(_))));

    let objective = TrainConfig {
        objective: ObjectiveKind::FrRm,
        ..c.clone()
    };
    match resume(&ck, &objective, TrainData::Pairs(&data)) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("objective")),
        other => panic!("{other:?}"),
    }

    let fewer = &data[..150];
    assert!(matches!(resume(&ck, &c, TrainData::Pairs(fewer)), Err(Error::Checkpoint(_))));

    let narrow = World::new(WorldConfig {
        pairs_per_group: 100,
        feature_dim: 5,
        ..WorldConfig::default()
    })
    .unwrap()
    .generate_pairs();
    match resume(&ck, &c, TrainData::Pairs(&narrow)) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("feature_dim")),
        other => panic!("{other:?}"),
    }

    let mut bad = ck.to_json().unwrap();
    bad = bad.replacen("fairpref-checkpoint", "something-else", 1);
    assert!(matches!(Checkpoint::from_json(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn dpo_starts_at_ln2_and_keeps_reference() {
    let world = World::new(WorldConfig {
        pairs_per_group: 1,
        seed: 2,
        ..WorldConfig::default()
    })
    .unwrap();
    let pw = world.generate_prompt_world(100, 4, 3).unwrap();
    let data = TrainData::Prompts {
        bank: &pw.bank,
        pairs: &pw.pairs,
    };
    for objective in [ObjectiveKind::Dpo, ObjectiveKind::FrDpo, ObjectiveKind::FcDpo] {
        let c = cfg(objective);
        let out = train(&c, data).unwrap();
        assert!((out.trace[0].utility_term - std::f64::consts::LN_2).abs() <= 1e-9);
        let Model::Policy(policy) = &out.checkpoint.model else {
            panic!("dpo objectives train a policy");
        };
        let init = fairpref::models::RewardNet::init(policy.net().feature_dim(), c.hidden, c.seed).unwrap();
        assert_eq!(policy.reference(), &init);
        assert_ne!(policy.net(), &init);
    }
}

#[test]
fn reward_objectives_reject_prompt_data() {
    let world = World::new(WorldConfig::default()).unwrap();
    let pw = world.generate_prompt_world(5, 3, 2).unwrap();
    let data = TrainData::Prompts {
        bank: &pw.bank,
        pairs: &pw.pairs,
    };
    assert!(matches!(train(&cfg(ObjectiveKind::BtRm), data), Err(Error::Invalid { .. })));
    assert!(matches!(train(&cfg(ObjectiveKind::BtRm), TrainData::Pairs(&[])), Err(Error::Invalid { .. })));
}

#[test]
fn bt_fits_noiseless_separable_data() {
    let data = World::new(WorldConfig {
        pairs_per_group: 1000,
        preference_temperature: 0.0,
        seed: 8,
        ..WorldConfig::default()
    })
    .unwrap()
    .generate_pairs();
    let c = TrainConfig {
        epochs: 40,
        learning_rate: 3e-3,
        ..cfg(ObjectiveKind::BtRm)
    };
    let out = train(&c, TrainData::Pairs(&data)).unwrap();
    let acc = gap_accuracy(&model_gaps(&out.checkpoint.model, TrainData::Pairs(&data), c.beta).unwrap());
    assert!(acc > 0.97, "accuracy {acc}");
    let first = out.trace.first().unwrap().loss;
    let last = out.trace.last().unwrap().loss;
    assert!(last < first);
}

#[test]
fn divergence_is_reported() {
    let data = pairs(50, 1);
    let c = TrainConfig {
        learning_rate: 1e307,
        optimizer: OptimizerKind::Sgd,
        clip_norm: 1e300,
        epochs: 20,
        ..cfg(ObjectiveKind::BtRm)
    };
    let r = train(&c, TrainData::Pairs(&data));
    assert!(matches!(r, Err(Error::Divergence { .. })), "{:?}", r.map(|o| o.checkpoint.step));
}

#[test]
fn trace_layout() {
    let data = pairs(100, 2);
    let c = TrainConfig {
        eval_every: 3,
        batch_size: 50,
        ..cfg(ObjectiveKind::FrRm)
    };
    let out = train(&c, TrainData::Pairs(&data)).unwrap();
    assert_eq!(out.trace.len(), 8);
    assert_eq!(out.trace.iter().map(|r| r.step).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    assert_eq!(out.evals.iter().map(|e| e.0).collect::<Vec<_>>(), vec![3, 6]);
    for r in &out.trace {
        assert!(r.batch_jain > 0.0 && r.batch_jain <= 1.0);
        assert!((r.loss - (r.utility_term - 0.1 * r.fairness_value)).abs() < 1e-12);
    }
    let csv = trace_to_csv(&out.trace);
    assert_eq!(csv.lines().next().unwrap(), TRACE_CSV_HEADER);
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn invalid_config_fields_are_named() {
    let data = pairs(10, 0);
    let cases = [
        (
            TrainConfig {
                batch_size: 0,
                ..cfg(ObjectiveKind::BtRm)
            },
            "train.batch_size",
        ),
        (
            TrainConfig {
                batch_size: 1,
                ..cfg(ObjectiveKind::FrRm)
            },
            "train.batch_size",
        ),
        (
            TrainConfig {
                fairness: FairnessSpec::fr(1.0, 0.1),
                ..cfg(ObjectiveKind::FrRm)
            },
            "fairness.tau",
        ),
        (
            TrainConfig {
                beta: 0.0,
                ..cfg(ObjectiveKind::Dpo)
            },
            "train.beta",
        ),
    ];
    for (c, field) in cases {
        match train(&c, TrainData::Pairs(&data)) {
            Err(e @ Error::Invalid { .. }) => assert!(e.to_string().contains(field), "{e}"),
            other => panic!("{field}: {other:?}"),
        }
    }
}
