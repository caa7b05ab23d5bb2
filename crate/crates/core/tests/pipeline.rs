use tailcast::dataio::{load_csv, prepare, CsvSchema, PrepareConfig, Prepared};
use tailcast::eval::{score, Subset};
use tailcast::finetune::{sweep, FreezeSpec};
use tailcast::nn::{init_params, MlpSpec};
use tailcast::synth::{generate, SynthSpec};
use tailcast::train::{fit, Strategy, TrainConfig, TrainingSubset};
use tailcast::Error;

fn small_data(seed: u64) -> Prepared {
    let frame = generate(&SynthSpec {
        length: 3000,
        seed,
        ..SynthSpec::default()
    })
    .unwrap()
    .frame;
    prepare(
        &frame,
        &PrepareConfig {
            lookback: 24,
            horizon: 6,
            ..PrepareConfig::default()
        },
    )
    .unwrap()
}

fn small_spec(data: &Prepared) -> MlpSpec {
    MlpSpec {
        input_dim: data.split.train[0].x.len(),
        hidden_widths: vec![8, 4],
        output_dim: data.split.train[0].y.len(),
        dropout_rate: 0.1,
    }
}

fn config(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        learning_rate: 0.1,
        meta_learning_rate: Some(10.0),
        batch_size: 100,
        eval_batch_size: 100,
        max_epochs: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn every_strategy_trains_and_scores() {
    let data = small_data(0);
    let spec = small_spec(&data);
    for strategy in [Strategy::Unweighted, Strategy::Ipf, Strategy::Evt, Strategy::Meta] {
        let (params, report) = fit(init_params(&spec, 1), &spec, &data.split, &config(strategy)).unwrap();
        assert_eq!(report.strategy, strategy);
        assert_eq!(report.monitored, "eval_extreme");
        assert!(report.best_eval_loss.is_finite());
        assert!(report.epochs.iter().all(|e| e.train_loss.is_finite() && e.eval_loss.is_finite()));
        let m = score(&params, &data.split.test, &data.normalizer, Subset::All).unwrap();
        assert!(m.mae.is_finite() && m.rmse >= m.mae);
    }
}

#[test]
fn fit_reports_are_byte_identical_across_reruns() {
    let data = small_data(3);
    let spec = small_spec(&data);
    for strategy in [Strategy::Evt, Strategy::Meta] {
        let run = || {
            let (p, r) = fit(init_params(&spec, 9), &spec, &data.split, &config(strategy)).unwrap();
            (serde_json::to_string(&r).unwrap(), p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}

#[test]
fn patience_one_stops_after_first_non_improvement() {
    let data = small_data(0);
    let spec = small_spec(&data);
    let c = TrainConfig {
        patience: 1,
        max_epochs: 200,
        learning_rate: 2.0,
        ..config(Strategy::Unweighted)
    };
    let (_, report) = fit(init_params(&spec, 0), &spec, &data.split, &c).unwrap();
    assert!(report.early_stopped);
    assert_eq!(report.stopped_epoch, report.best_epoch + 1);
    let last = report.epochs.last().unwrap();
    assert!(last.eval_loss >= report.best_eval_loss);
}

#[test]
fn weight_audit_invariants() {
    let data = small_data(2);
    let spec = small_spec(&data);
    for strategy in [Strategy::Ipf, Strategy::Evt] {
        let (_, r) = fit(init_params(&spec, 0), &spec, &data.split, &config(strategy)).unwrap();
        assert!((r.static_weight_mean.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.weight_stats.iter().all(|s| s.min > 0.0));
    }
    let (_, r) = fit(init_params(&spec, 0), &spec, &data.split, &config(Strategy::Meta)).unwrap();
    assert!(!r.weight_stats.is_empty());
    for s in &r.weight_stats {
        assert!(s.min >= 0.0);
        assert!((s.sum - 1.0).abs() < 1e-9 || s.sum == 0.0, "batch sum {}", s.sum);
    }
}

#[test]
fn csv_round_trip_feeds_the_pipeline() {
    let frame = generate(&SynthSpec {
        length: 1500,
        ..SynthSpec::default()
    })
    .unwrap()
    .frame;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    frame.write_csv(&path).unwrap();
    let schema = CsvSchema {
        timestamp_column: "timestamp".into(),
        features: vec!["c0".into(), "c1".into(), "y".into()],
        targets: vec!["y".into()],
    };
    let back = load_csv(&path, &schema).unwrap();
    assert_eq!(back.timestamps(), frame.timestamps());
    for (a, b) in back.values().iter().zip(frame.values()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
    let config = PrepareConfig {
        lookback: 24,
        horizon: 6,
        ..PrepareConfig::default()
    };
    let a = prepare(&frame, &config).unwrap();
    let b = prepare(&back, &config).unwrap();
    assert_eq!(a.split.manifest(), b.split.manifest());
}

#[test]
fn meta_without_extreme_eval_windows_is_refused() {
    let mut data = small_data(0);
    data.split.eval_extreme.clear();
    let spec = small_spec(&data);
    let err = fit(init_params(&spec, 0), &spec, &data.split, &config(Strategy::Meta)).unwrap_err();
    assert!(matches!(err, Error::StrategyUnavailable(_)));
    let (_, r) = fit(init_params(&spec, 0), &spec, &data.split, &config(Strategy::Unweighted)).unwrap();
    assert_eq!(r.monitored, "validation");
}

#[test]
fn sweep_best_is_never_worse_than_the_starting_model() {
    let data = small_data(0);
    let spec = small_spec(&data);
    let (params, _) = fit(init_params(&spec, 0), &spec, &data.split, &config(Strategy::Meta)).unwrap();
    let fs = FreezeSpec {
        max_epochs: 5,
        ..FreezeSpec::default()
    };
    let base = TrainConfig {
        training_subset: TrainingSubset::Both,
        ..config(Strategy::Meta)
    };
    let out = sweep(&params, &spec, &data.split, &data.normalizer, &[0, 1, 3], &fs, &base).unwrap();
    assert_eq!(out.rows.len(), 3);
    let full_freeze = out.rows.iter().find(|r| r.k == 3).unwrap();
    assert!(out.rows.iter().all(|r| r.eval_loss <= full_freeze.eval_loss + 1e-15));
    assert_eq!(out.best_k, out.rows.iter().min_by(|a, b| a.eval_loss.total_cmp(&b.eval_loss)).unwrap().k);
}
