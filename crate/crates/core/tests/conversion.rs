use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use theseus_core::conversion::{
    make_schedule, route_inputs, run_conversion, trainable_parameters, ConversionConfig, ReplacementMapping,
    ScheduleKind,
};
use theseus_core::data::{gen_dataset, Dataset, DatasetKind, DatasetSpec};
use theseus_core::nets::{
    deep_mlp_spec, toy_cnn_spec, Activation, HeadSpec, Input, ModelSpec, ModuleGraph, PartSpec, SlotSpec, StemSpec,
};
use theseus_core::similarity::MetricSpec;
use theseus_core::tensor::Tensor;
use theseus_core::training::{AdamWConfig, AlignConfig, LrSchedule, TapCache};
use theseus_core::Error;
use theseus_oracle as oracle;

fn images() -> Dataset {
    gen_dataset(&DatasetSpec {
        kind: DatasetKind::TranslatedPatterns {
            classes: 3,
            size: 6,
            template: 3,
        },
        train: 96,
        test: 16,
        unlabeled: 0,
        noise: 0.2,
        seed: 4,
    })
    .unwrap()
}

fn cfg(epochs: usize, lr: f64) -> ConversionConfig {
    ConversionConfig {
        align: AlignConfig {
            epochs,
            batch_size: 16,
            schedule: LrSchedule::Constant { lr },
            optimizer: AdamWConfig::default(),
            eval_samples: 64,
        },
        stage_epochs: vec![],
        stage_lr: vec![],
        auto: None,
    }
}

fn cnn_setup() -> (ModuleGraph, ReplacementMapping) {
    let guide = ModuleGraph::build(&toy_cnn_spec(1, 6, 4, 4, 3), 10).unwrap();
    let mapping = ReplacementMapping::uniform(
        &guide,
        PartSpec::LowRankLinear {
            rank: 8,
            batch_norm: true,
            activation: Activation::Relu,
        },
    )
    .unwrap();
    (guide, mapping)
}

#[test]
fn every_stage_mutates_exactly_its_trainable_slots() {
    let data = images();
    let (guide, mapping) = cnn_setup();
    for kind in [
        ScheduleKind::Progressive,
        ScheduleKind::Sequential,
        ScheduleKind::Independent,
        ScheduleKind::Joint,
    ] {
        let schedule = make_schedule(kind, 4, None).unwrap();
        let out = run_conversion(
            &guide,
            &mapping,
            &schedule,
            &MetricSpec::cka(),
            &cfg(1, 1e-3),
            &data.train.inputs,
            1,
        )
        .unwrap();
        assert_eq!(out.guide_hash_before, out.guide_hash_after);
        assert_eq!(out.audits.len(), schedule.len());
        for (t, audit) in out.audits.iter().enumerate() {
            assert_eq!(audit.trainable, schedule.stage(t + 1).unwrap().to_vec(), "{kind:?}");
            assert_eq!(audit.mutated, audit.trainable, "{kind:?} stage {}", t + 1);
            assert!(audit.adapters_unchanged);
        }
        assert_eq!(out.reports.len(), schedule.len());
        for (t, r) in out.reports.iter().enumerate() {
            assert_eq!(r.final_per_layer.len(), schedule.stage(t + 1).unwrap().len());
        }
    }
}

#[test]
fn sequential_masks_earlier_target_slots() {
    let (guide, _) = cnn_setup();
    let schedule = make_schedule(ScheduleKind::Sequential, 4, None).unwrap();
    let mask = trainable_parameters(&guide, &schedule, 3).unwrap();
    assert!(mask.iter().all(|(name, &on)| on == name.starts_with("slot3.")));
    let progressive = make_schedule(ScheduleKind::Progressive, 4, None).unwrap();
    let mask = trainable_parameters(&guide, &progressive, 3).unwrap();
    assert!(mask
        .iter()
        .all(|(name, &on)| on == ["slot1.", "slot2.", "slot3."].iter().any(|p| name.starts_with(p))));
}

#[test]
fn copy_of_guide_has_zero_dissimilarity() {
    let data = images();
    let (guide, _) = cnn_setup();
    let mapping = ReplacementMapping::identity(&guide, true).unwrap();
    let schedule = make_schedule(ScheduleKind::Progressive, 4, None).unwrap();
    let out = run_conversion(
        &guide,
        &mapping,
        &schedule,
        &MetricSpec::cka(),
        &cfg(1, 1e-3),
        &data.train.inputs,
        0,
    )
    .unwrap();
    for r in &out.reports {
        assert!(
            r.final_per_layer.iter().all(|v| v.abs() < 1e-12),
            "{:?}",
            r.final_per_layer
        );
        for rec in &r.records {
            assert!(rec.per_layer_loss.iter().all(|v| v.abs() < 1e-12));
        }
    }
    assert!(out.audits.iter().all(|a| a.mutated.is_empty()));
}

#[test]
fn independent_slots_ignore_upstream_training() {
    let data = images();
    let (guide, mapping) = cnn_setup();
    let schedule = make_schedule(ScheduleKind::Independent, 4, None).unwrap();
    let run = |first_epochs: usize, kind_schedule: &theseus_core::conversion::Schedule| {
        let mut c = cfg(1, 1e-3);
        c.stage_epochs = vec![first_epochs, 1, 1, 1];
        run_conversion(
            &guide,
            &mapping,
            kind_schedule,
            &MetricSpec::cka(),
            &c,
            &data.train.inputs,
            2,
        )
        .unwrap()
    };
    let (a, b) = (run(1, &schedule), run(3, &schedule));
    assert_ne!(a.target.slot_hash(1), b.target.slot_hash(1));
    for i in 2..=4 {
        assert_eq!(a.target.slot_hash(i), b.target.slot_hash(i), "slot {i}");
    }
    // The hybrid route does see upstream changes.
    let seq = make_schedule(ScheduleKind::Sequential, 4, None).unwrap();
    let (c, d) = (run(1, &seq), run(3, &seq));
    assert_ne!(c.target.slot_hash(2), d.target.slot_hash(2));
}

#[test]
fn routing_reads_guide_taps_or_hybrid_forward() {
    let data = images();
    let (guide, _) = cnn_setup();
    let pool = &data.train.inputs;
    let cache = TapCache::build(&guide, pool, &[0, 1, 2, 3, 4], 32).unwrap();
    let idx = [0, 5, 9];
    let routed = route_inputs(ScheduleKind::Independent, &guide, &cache, pool, 3, &idx).unwrap();
    assert_eq!(routed, cache.batch(2, &idx).unwrap());
    let first = route_inputs(ScheduleKind::Progressive, &guide, &cache, pool, 1, &idx).unwrap();
    assert_eq!(first, cache.batch(0, &idx).unwrap());
}

fn linear_guide(rank: usize) -> ModuleGraph {
    let spec = ModelSpec {
        input: vec![8],
        stem: StemSpec::Identity,
        slots: vec![SlotSpec {
            part: PartSpec::LowRankLinear {
                rank,
                batch_norm: false,
                activation: Activation::None,
            },
            output: Some(vec![8]),
        }],
        head: HeadSpec::Linear { classes: 2 },
    };
    ModuleGraph::build(&spec, 77).unwrap()
}

#[test]
fn full_rank_pair_reaches_a_linear_guide() {
    let guide = linear_guide(8);
    let n = 512;
    let x = Tensor::randn(&[n, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let pool = Input::Dense(x.clone());
    // A zero-residual linear fit exists, so the target class can represent it.
    let y = guide.tap_activations(&pool, &[1]).unwrap()[&1].tensor().clone();
    let ones = Tensor::from_fn(
        &[n, 9],
        |i| if i % 9 == 8 { 1.0 } else { x.data()[(i / 9) * 8 + i % 9] },
    );
    let (_, resid) = oracle::least_squares(
        &oracle::from_flat(n, 9, ones.data()),
        &oracle::from_flat(n, 8, y.data()),
    );
    assert!(resid < 1e-12, "least-squares residual {resid}");

    let mapping = ReplacementMapping::uniform(
        &guide,
        PartSpec::LowRankLinear {
            rank: 8,
            batch_norm: false,
            activation: Activation::None,
        },
    )
    .unwrap();
    let schedule = make_schedule(ScheduleKind::Progressive, 1, None).unwrap();
    let mut c = cfg(150, 1e-2);
    c.align.batch_size = 64;
    c.align.eval_samples = 512;
    c.align.optimizer.weight_decay = 0.0;
    let out = run_conversion(&guide, &mapping, &schedule, &MetricSpec::cka(), &c, &pool, 5).unwrap();
    let delta = out.reports[0].final_loss();
    assert!(delta <= 1e-3, "final dissimilarity {delta}");
}

#[test]
fn reversed_progressive_runs_all_stages() {
    let data = images();
    let (guide, mapping) = cnn_setup();
    let schedule = make_schedule(ScheduleKind::Progressive, 4, None)
        .unwrap()
        .reversed()
        .unwrap();
    let out = run_conversion(
        &guide,
        &mapping,
        &schedule,
        &MetricSpec::cka(),
        &cfg(1, 1e-3),
        &data.train.inputs,
        1,
    )
    .unwrap();
    assert_eq!(out.reports.len(), 4);
    assert_eq!(out.reports[0].slots, vec![4]);
    assert_eq!(out.reports[1].slots.len(), 2);
}

#[test]
fn exploding_rate_is_reported_as_divergence() {
    let data = images();
    let (guide, mapping) = cnn_setup();
    let schedule = make_schedule(ScheduleKind::Progressive, 4, None).unwrap();
    let err = run_conversion(
        &guide,
        &mapping,
        &schedule,
        &MetricSpec::cka(),
        &cfg(3, 1e300),
        &data.train.inputs,
        1,
    )
    .unwrap_err();
    assert!(matches!(err, Error::Diverged { stage: 1, .. }), "{err}");
}

#[test]
fn group_progressive_builds_one_slot_per_group() {
    let data = gen_dataset(&DatasetSpec {
        kind: DatasetKind::GaussianBlobs {
            classes: 3,
            dim: 8,
            spread: 1.0,
        },
        train: 80,
        test: 16,
        unlabeled: 0,
        noise: 0.0,
        seed: 6,
    })
    .unwrap();
    let guide = ModuleGraph::build(&deep_mlp_spec(8, 8, 8, 8, 3), 2).unwrap();
    let mapping = ReplacementMapping::grouped(&guide, 4, PartSpec::BlockGroup { hidden: 8, depth: 2 }).unwrap();
    let schedule = make_schedule(ScheduleKind::GroupProgressive, 8, Some(4)).unwrap();
    let out = run_conversion(
        &guide,
        &mapping,
        &schedule,
        &MetricSpec::cka(),
        &cfg(1, 1e-3),
        &data.train.inputs,
        3,
    )
    .unwrap();
    assert_eq!(out.target.k(), 2);
    assert_eq!(out.reports.len(), 2);
    assert_eq!(out.reports[0].guide_slots, vec![4]);
    assert_eq!(out.reports[1].guide_slots, vec![4, 8]);
    assert!(make_schedule(ScheduleKind::GroupProgressive, 8, Some(4))
        .unwrap()
        .reversed()
        .is_err());
}
