use pmf_core::checkpoint::load_sections;
use pmf_core::data::{generate_synthetic_pair, load_kg_pair, write_kg_pair, CorruptionRates, DatasetLayout, SyntheticSpec};
use pmf_core::experiment::{evaluate_run, read_metrics, run_training, ExperimentConfig};
use pmf_core::{Modality, PmfError};

fn config(n: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset.synthetic = Some(SyntheticSpec {
        n_entities: n,
        corrupt_rate: CorruptionRates {
            img: 0.3,
            ..CorruptionRates::default()
        },
        ..SyntheticSpec::default()
    });
    cfg.dataset.seed_ratio = 0.4;
    cfg.model.dim = 16;
    cfg.train.epochs = 8;
    cfg.train.iterative_epochs = 0;
    cfg.train.eval_interval = 2;
    cfg
}

#[test]
fn written_dataset_trains_like_generated_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(60);
    let generated = generate_synthetic_pair(cfg.dataset.synthetic.as_ref().unwrap()).unwrap();
    let data = tmp.path().join("data");
    write_kg_pair(&data, &generated.pair).unwrap();
    let loaded = load_kg_pair(&data, DatasetLayout::Pmf).unwrap();
    assert_eq!(loaded.pairs, generated.pair.pairs);
    assert_eq!(loaded.corruption.as_ref().unwrap().count(Modality::Img), 18);

    let from_memory = run_training(&cfg, &tmp.path().join("a")).unwrap();
    let mut on_disk = cfg.clone();
    on_disk.dataset.synthetic = None;
    on_disk.dataset.path = Some(data);
    let from_disk = run_training(&on_disk, &tmp.path().join("b")).unwrap();
    assert_eq!(from_memory.metrics.test, from_disk.metrics.test);
}

#[test]
fn checkpoint_reload_reproduces_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run_training(&config(60), tmp.path()).unwrap();
    let sections = load_sections(&tmp.path().join("checkpoint.bin")).unwrap();
    assert!(sections.keys().any(|k| k.starts_with("fusion.")));
    let again = evaluate_run(tmp.path(), false, false).unwrap();
    assert_eq!(again.metrics, out.metrics.test);
    assert_eq!(read_metrics(tmp.path()).unwrap(), out.metrics);
}

#[test]
fn iterative_phase_writes_augmented_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(60);
    cfg.train.epochs = 4;
    cfg.train.iterative_epochs = 12;
    cfg.train.probation_interval = 1;
    cfg.train.probation_stability = 2;
    cfg.train.early_stop_patience = 100;
    let out = run_training(&cfg, tmp.path()).unwrap();
    let text = std::fs::read_to_string(tmp.path().join("augmented_seeds.tsv")).unwrap();
    assert_eq!(text.lines().count(), out.metrics.n_augmented);
    assert!(out.metrics.n_augmented > 0);
    let last = out.history.records.last().unwrap();
    assert_eq!(last.n_train_seeds, out.metrics.n_train + out.metrics.n_augmented);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    run_training(&config(30), tmp.path()).unwrap();
    let path = tmp.path().join("checkpoint.bin");
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(matches!(evaluate_run(tmp.path(), false, false), Err(PmfError::Format { .. })));
}
