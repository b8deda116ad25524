use filament_anet::{load_checkpoint, train, AnetConfig, TrainConfig};
use filament_core::imgcore::{Image2D, SourceDepth};
use filament_core::preprocess::{build_dataset, load_manifest, Split, WeightParams, MANIFEST_FILE};

#[test]
fn trains_from_a_manifest_and_writes_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let orig = Image2D::from_fn(32, 16, 62.5, SourceDepth::U16, |r, c| if c % 8 == 3 { 900.0 } else { (r % 3) as f64 }).unwrap();
    let label = Image2D::from_fn(32, 16, 62.5, SourceDepth::U8, |_, c| if c % 8 == 3 { 1.0 } else { 0.0 }).unwrap();
    build_dataset(&[orig], &[label], 16, &WeightParams::default(), Split::Train, &dir.path().join("ds")).unwrap();
    let manifest = load_manifest(&dir.path().join("ds").join(MANIFEST_FILE)).unwrap();
    let tc = TrainConfig {
        epochs: 4,
        lr: 1e-3,
        seed: 9,
        checkpoint_every: 2,
        checkpoint_dir: Some(dir.path().join("ck")),
        ..TrainConfig::default()
    };
    let out = train(&manifest, AnetConfig::new(2, 2), &tc).unwrap();
    assert_eq!(out.log.len(), 8);
    assert_eq!(out.checkpoints.len(), 2);
    let (model, meta) = load_checkpoint(&out.checkpoints[1]).unwrap();
    assert_eq!(meta.epoch, 4);
    assert_eq!(meta.adam.unwrap().t, 8);
    for (a, b) in model.params.iter().zip(&out.model.params) {
        assert_eq!(*a, *b as f32 as f64);
    }
    model.check_invariants().unwrap();
}
