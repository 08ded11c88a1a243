use maf_core::eval::accuracy;
use maf_core::inference::{predict_unsup_dataset, predict_weak_dataset, read_predictions, write_predictions};
use maf_core::synth::generate;
use maf_core::training::train;
use maf_core::{load_dataset, AreaConvention, Checkpoint, EmbeddingTable, SynthConfig, TrainConfig};

const CONV: AreaConvention = AreaConvention::Continuous;

#[test]
fn paper_learning_rate_still_lowers_loss() {
    let s = generate(&SynthConfig::default()).unwrap();
    let features = s.dataset.features.clone();
    let table_tokens = s.table.tokens().to_vec();
    let ck = train(&s.dataset, &s.table, &TrainConfig::default(), |_| {}).unwrap();
    assert_eq!(ck.epoch_losses.len(), 25);
    assert!(ck.epoch_losses[24] < ck.epoch_losses[0], "{:?}", ck.epoch_losses);
    assert_eq!(s.dataset.features, features);
    assert_eq!(s.table.tokens(), table_tokens.as_slice());
}

#[test]
fn two_object_duplicates_defeat_unsupervised_matching() {
    let cfg = SynthConfig {
        objects_per_image: 2,
        phrases_per_caption: 2,
        ..SynthConfig::duplicate_labels()
    };
    let s = generate(&cfg).unwrap();
    let unsup = predict_unsup_dataset(&s.dataset, &s.table);
    let unsup = accuracy(&unsup, &s.dataset.images, CONV).unwrap().accuracy;
    let ck = train(
        &s.dataset,
        &s.table,
        &TrainConfig {
            lr: 1e-3,
            ..Default::default()
        },
        |_| {},
    )
    .unwrap();
    let weak = predict_weak_dataset(&s.dataset, &ck.params, &s.table).unwrap();
    let weak = accuracy(&weak, &s.dataset.images, CONV).unwrap().accuracy;
    assert!(unsup < weak, "unsupervised {unsup} vs trained {weak}");
}

#[test]
fn files_on_disk_reproduce_in_memory_results() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&SynthConfig {
        n_images: 40,
        ..Default::default()
    })
    .unwrap();
    let paths = s.write(dir.path()).unwrap();
    let dataset = load_dataset(&paths.images, &paths.features, 0.1).unwrap();
    let table = EmbeddingTable::load(&paths.embeddings).unwrap();

    let cfg = TrainConfig {
        epochs: 3,
        lr: 1e-3,
        ..Default::default()
    };
    let from_disk = train(&dataset, &table, &cfg, |_| {}).unwrap();
    let in_memory = train(&s.dataset, &s.table, &cfg, |_| {}).unwrap();
    assert_eq!(from_disk.encode(), in_memory.encode());

    let ck_path = dir.path().join("model.ckpt");
    from_disk.save(&ck_path).unwrap();
    let back = Checkpoint::load(&ck_path).unwrap();
    assert_eq!(back, from_disk);

    let preds = predict_weak_dataset(&dataset, &back.params, &table).unwrap();
    let pred_path = dir.path().join("preds.jsonl");
    write_predictions(&preds, &pred_path).unwrap();
    assert_eq!(read_predictions(&pred_path).unwrap(), preds);
}
