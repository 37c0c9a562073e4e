use groundtrack_core::annotations::ScenarioKind;
use groundtrack_core::checkpoint::Checkpoint;
use groundtrack_core::metrics::summary;
use groundtrack_core::model::{ForwardMode, ModelConfig};
use groundtrack_core::simworld::{export_groot, generate, ground_truth, ground_truth_from_annotations, WorldConfig};
use groundtrack_core::tokens::EncoderConfig;
use groundtrack_core::tracker::{run_sequence, NetworkDetector, OracleDetector, PromptSchedule, TrackerConfig};
use groundtrack_core::train::{evaluate_loss, loss_curve_csv, train_epochs, TrainConfig, TrainState};

fn small() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        steps_per_epoch: 40,
        world: WorldConfig {
            frames: 8,
            grid_w: 4,
            grid_h: 4,
            min_objects: 2,
            max_objects: 3,
            min_size: 0.1,
            max_size: 0.15,
            ..WorldConfig::default()
        },
        model: ModelConfig {
            d: 16,
            heads: 2,
            encoder: EncoderConfig {
                grid_w: 4,
                grid_h: 4,
                raw_width: 8,
                geometry_scale: 4.0,
            },
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn resume_from_checkpoint_is_bit_exact() {
    let cfg = small();
    let mut straight = TrainState::new(cfg.clone()).unwrap();
    train_epochs(&mut straight, 2, |_| {}).unwrap();

    let mut first = TrainState::new(cfg).unwrap();
    train_epochs(&mut first, 1, |_| {}).unwrap();
    let json = Checkpoint::from_state(&first).to_json().unwrap();
    let mut resumed = Checkpoint::from_json(&json).unwrap().train_state().unwrap();
    train_epochs(&mut resumed, 1, |_| {}).unwrap();

    assert_eq!(resumed.weights, straight.weights);
    assert_eq!(resumed.curve, straight.curve);
    assert_eq!(loss_curve_csv(&resumed.curve), loss_curve_csv(&straight.curve));
}

#[test]
fn loss_trends_down() {
    let cfg = TrainConfig {
        epochs: 5,
        steps_per_epoch: 150,
        lr_network: 3e-3,
        lr_embedding: 1.5e-3,
        ..small()
    };
    let before = evaluate_loss(&TrainState::new(cfg.clone()).unwrap().weights, &cfg, 99, 100).unwrap();
    let mut st = TrainState::new(cfg.clone()).unwrap();
    train_epochs(&mut st, cfg.epochs, |_| {}).unwrap();
    let after = evaluate_loss(&st.weights, &cfg, 99, 100).unwrap();
    let totals: Vec<f64> = st.curve.iter().map(|e| e.total).collect();
    assert!(after < before, "held-out loss {before} -> {after}");
    assert!(totals.last().unwrap() < totals.first().unwrap(), "curve {totals:?}");
    // Least-squares slope of the curve is negative.
    let n = totals.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = totals.iter().sum::<f64>() / n;
    let slope: f64 = totals.iter().enumerate().map(|(i, y)| (i as f64 - mx) * (y - my)).sum();
    assert!(slope < 0.0);
}

#[test]
fn reloaded_weights_track_identically() {
    let cfg = small();
    let st = TrainState::new(cfg.clone()).unwrap();
    let back = Checkpoint::from_json(&Checkpoint::from_weights(&st.weights).to_json().unwrap())
        .unwrap()
        .weights()
        .unwrap();
    let s = generate(5, &cfg.world).unwrap();
    let sched = PromptSchedule::new(s.schedule.clone()).unwrap();
    let tc = TrackerConfig {
        gamma: 0.1,
        ..TrackerConfig::default()
    };
    for mode in [ForwardMode::Simplified, ForwardMode::Full] {
        let a = run_sequence(
            (0..s.frames()).map(|f| s.frame(f)),
            &sched,
            &NetworkDetector::new(&st.weights, mode, ScenarioKind::Name),
            tc,
        )
        .unwrap();
        let b = run_sequence(
            (0..s.frames()).map(|f| s.frame(f)),
            &sched,
            &NetworkDetector::new(&back, mode, ScenarioKind::Name),
            tc,
        )
        .unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn oracle_handles_entries_exits_and_occlusions() {
    let cfg = WorldConfig {
        entry_prob: 0.4,
        exit_prob: 0.4,
        occlusion_prob: 0.5,
        noise: 0.0,
        ..WorldConfig::default()
    };
    for seed in 0..30 {
        let s = generate(seed, &cfg).unwrap();
        let sched = PromptSchedule::new(s.schedule.clone()).unwrap();
        let pred = run_sequence(
            (0..s.frames()).map(|f| s.frame(f)),
            &sched,
            &OracleDetector::default(),
            TrackerConfig::default(),
        )
        .unwrap();
        let sm = summary(&ground_truth(&s), &pred).unwrap();
        assert_eq!((sm.ca_mota, sm.ca_idf1, sm.id_switches), (1.0, 1.0, 0), "seed {seed}");
    }
}

#[test]
fn annotation_export_matches_ground_truth() {
    for seed in 0..5 {
        let s = generate(seed, &WorldConfig::default()).unwrap();
        let set = export_groot(&s).unwrap();
        let mut from_doc = ground_truth_from_annotations(&set, 1);
        // The document annotates every object, not only prompt targets.
        let mut direct: Vec<_> = (0..s.frames())
            .flat_map(|f| {
                s.frame(f).objects.into_iter().map(move |o| groundtrack_core::annotations::TrackRecord {
                    frame: f,
                    id: o.track_id,
                    bbox: o.bbox.to_array(),
                    conf: 1.0,
                    class: Some(o.attributes.category_name().to_string()),
                })
            })
            .collect();
        assert!(direct.len() > ground_truth(&s).len());
        let key = |r: &groundtrack_core::annotations::TrackRecord| (r.frame, r.id);
        from_doc.sort_by_key(key);
        direct.sort_by_key(key);
        assert_eq!(from_doc.len(), direct.len());
        for (a, b) in from_doc.iter().zip(&direct) {
            assert_eq!((a.frame, a.id, &a.class), (b.frame, b.id, &b.class));
            for (x, y) in a.bbox.iter().zip(b.bbox) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
