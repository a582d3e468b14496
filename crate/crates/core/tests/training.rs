use csls::checkpoint;
use csls::corpus::DatasetSplit;
use csls::trainkit::sweep::sweep;
use csls::trainkit::train::{write_history_csv, write_history_json};
use csls::trainkit::*;
use csls::{CslsError, CslsModel, ModelBatch, ModelConfig};

fn small_split() -> DatasetSplit {
    synthetic_split(24, 8, 8, 123456)
}

fn short_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_deterministic() {
    let split = small_split();
    let a = fit(ModelConfig::desk(), &split, &short_config()).unwrap();
    let b = fit(ModelConfig::desk(), &split, &short_config()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.steps, 2 * 2);
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let split = small_split();
    let model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
    let before = model.params.clone();
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        ..TrainConfig::desk()
    };
    let out = train(model, &split, &cfg).unwrap();
    assert_eq!(out.model.params, before);
}

#[test]
fn empty_training_split_is_an_error() {
    let split = DatasetSplit {
        train: vec![],
        ..small_split()
    };
    let model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
    assert!(matches!(
        train(model, &split, &short_config()),
        Err(CslsError::Empty(_))
    ));
}

#[test]
fn nan_loss_names_the_step() {
    let split = small_split();
    let mut model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
    let bias = model.head.out.bias;
    model.params.get_mut(bias).data[0] = f64::NAN;
    match train(model, &split, &short_config()) {
        Err(CslsError::Diverged { step, loss }) => {
            assert_eq!(step, 0);
            assert!(loss.is_nan());
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.steps)),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let split = small_split();
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..short_config()
        },
        TrainConfig {
            learning_rate: -1.0,
            ..short_config()
        },
        TrainConfig {
            learning_rate: f64::NAN,
            ..short_config()
        },
        TrainConfig {
            threshold: 1.5,
            ..short_config()
        },
    ] {
        let model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
        assert!(
            matches!(
                train(model, &split, &cfg),
                Err(CslsError::InvalidArgument(_))
            ),
            "{cfg:?}"
        );
    }
}

#[test]
fn max_steps_caps_training() {
    let split = small_split();
    let cfg = TrainConfig {
        epochs: 5,
        max_steps: Some(3),
        ..TrainConfig::desk()
    };
    let out = fit(ModelConfig::desk(), &split, &cfg).unwrap();
    assert_eq!(out.steps, 3);
    assert_eq!(out.history.len(), 2);
}

#[test]
fn single_cell_sweep_matches_direct_run() {
    let split = small_split();
    let cfg = short_config();
    let mut model_cfg = ModelConfig::desk();
    model_cfg.preprocess.p = 10;
    model_cfg.preprocess.k_cap = 70;
    let out = fit(model_cfg, &split, &cfg).unwrap();
    let report = evaluate(&out.model, &split.test, cfg.threshold, cfg.batch_size).unwrap();
    let rows = sweep(&[(10, 70)], &ModelConfig::desk(), &cfg, &split).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].accuracy, Some(report.accuracy));
    assert_eq!(rows[0].f1, Some(report.f1));
    assert_eq!(rows[0].recall, Some(report.recall));
    assert_eq!(rows[0].precision, Some(report.precision));
}

#[test]
fn failing_sweep_cell_is_recorded() {
    let split = small_split();
    let rows = sweep(
        &[(1, 70), (10, 70)],
        &ModelConfig::desk(),
        &short_config(),
        &split,
    )
    .unwrap();
    assert!(rows[0].error.is_some() && rows[0].f1.is_none());
    assert!(rows[1].error.is_none());
    assert!(sweep(&[], &ModelConfig::desk(), &short_config(), &split).is_err());
}

#[test]
fn checkpoint_reload_predicts_identically() {
    let split = small_split();
    let out = fit(ModelConfig::desk(), &split, &short_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&out.model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    let refs: Vec<_> = split.test.iter().collect();
    let batch = ModelBatch::build(&refs, &out.model.cfg.preprocess, &csls::ByteTokenizer).unwrap();
    assert_eq!(
        out.model.predict(&batch).unwrap().0,
        back.predict(&batch).unwrap().0
    );
}

#[test]
fn history_files() {
    let split = small_split();
    let out = fit(ModelConfig::desk(), &split, &short_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("history.csv");
    write_history_csv(&out.history, &csv_path).unwrap();
    let mut r = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(
        r.headers().unwrap(),
        vec!["epoch", "loss", "acc", "prec", "rec", "f1"]
    );
    assert_eq!(r.records().count(), 2);
    let json_path = dir.path().join("history.json");
    write_history_json(&out.history, &json_path).unwrap();
    let back: Vec<EpochRecord> =
        serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
    assert_eq!(back, out.history);
}

#[test]
fn evaluation_report_is_consistent() {
    let split = small_split();
    let model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
    let r = evaluate(&model, &split.test, 0.5, 3).unwrap();
    assert_eq!(r.confusion.total(), split.test.len());
    for rec in &r.records {
        assert_eq!(rec.prediction, u8::from(rec.probability >= 0.5));
    }
    // batch size does not change what gets predicted for each snippet
    let whole = evaluate(&model, &split.test, 0.5, 8).unwrap();
    for (a, b) in r.records.iter().zip(&whole.records) {
        assert!((a.probability - b.probability).abs() <= 1e-4);
    }
    let audit = r.sensitive_audit(&split.test);
    assert_eq!(audit.len(), split.test.len());
    assert!(evaluate(&model, &[], 0.5, 3).is_err());
}

#[test]
fn self_comparison_has_no_unique_counts() {
    let split = small_split();
    let model = CslsModel::new(ModelConfig::desk(), 5).unwrap();
    let r = evaluate(&model, &split.test, 0.5, 8).unwrap();
    let c = compare_models(&r, &r, ChiSquareMethod::Pearson).unwrap();
    assert_eq!((c.true_positives.only_a, c.true_positives.only_b), (0, 0));
    assert_eq!((c.false_negatives.only_a, c.false_negatives.only_b), (0, 0));
    assert_eq!(
        (
            c.contingency.a_correct_b_wrong,
            c.contingency.a_wrong_b_correct
        ),
        (0, 0)
    );
}
