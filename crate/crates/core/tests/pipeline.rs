//! Cohort on disk through training, model files and inference.

use lmreg::model::{infer, init_params, load_model, save_model, DetectorConfig};
use lmreg::phantom::{load_cohort, make_cohort, PhantomSpec};
use lmreg::trainer::{TrainConfig, Trainer};

fn spec() -> PhantomSpec {
    PhantomSpec {
        shape: [16; 3],
        landmarks: 4,
        site_radius: 4.0,
        min_separation: 3.0,
        blob_sigma: [1.8, 0.2],
        jitter: 0.3,
        seed: 2,
        ..PhantomSpec::default()
    }
}

#[test]
fn disk_cohort_trains_and_model_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    make_cohort(&spec(), 3, 1, dir.path()).unwrap();
    let cohort = load_cohort(&dir.path().join("manifest.json")).unwrap();
    assert_eq!((cohort.train.len(), cohort.test.len()), (3, 1));

    let det = DetectorConfig::small([16; 3], 4);
    let cfg = TrainConfig {
        steps: 4,
        warmup_steps: 1,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        cfg,
        det.clone(),
        init_params(&det, 0),
        cohort.template.clone(),
        cohort.landmarks.clone(),
        cohort.train.iter().map(|(v, _)| v.clone()).collect(),
    )
    .unwrap();
    trainer.run(|_| {}).unwrap();
    assert_eq!(trainer.log.len(), 4);
    assert!(trainer.log.iter().all(|r| r.total.is_finite()));

    let path = dir.path().join("model.json");
    save_model(&path, &trainer.detector, &trainer.params, trainer.step as u64, 0).unwrap();
    let (det2, params2) = load_model(&path, Some(&det)).unwrap();
    let scan = &cohort.test[0].0;
    assert_eq!(infer(&det2, &params2, scan).unwrap(), infer(&det, &trainer.params, scan).unwrap());
}

#[test]
fn supervised_warmup_reduces_landmark_loss() {
    let cohort = lmreg::phantom::generate_cohort(&spec(), 2, 0).unwrap();
    let det = DetectorConfig::small([16; 3], 4);
    let cfg = TrainConfig {
        steps: 201,
        warmup_steps: 200,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(
        cfg,
        det.clone(),
        init_params(&det, 1),
        cohort.template.clone(),
        cohort.landmarks.clone(),
        cohort.train.iter().map(|(v, _)| v.clone()).collect(),
    )
    .unwrap();
    trainer.run_until(200, |_| {}).unwrap();
    let totals: Vec<f64> = trainer.log.iter().map(|r| r.total).collect();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&totals[180..]) < 0.5 * mean(&totals[..20]), "{totals:?}");
}
