use std::fs;
use std::path::Path;

use tta_core::model::{load_dataset, DatasetError};
use tta_core::synth::{generate_synthetic_dataset, DEFAULT_LEXICON};

fn lexicon() -> Vec<String> {
    DEFAULT_LEXICON.iter().map(|s| s.to_string()).collect()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir.join("images"))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out.push(("manifest.json".into(), fs::read(dir.join("manifest.json")).unwrap()));
    out
}

#[test]
fn synthesis_is_deterministic_in_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    generate_synthetic_dataset(&a, 5, &lexicon(), 11).unwrap();
    generate_synthetic_dataset(&b, 5, &lexicon(), 11).unwrap();
    generate_synthetic_dataset(&c, 5, &lexicon(), 12).unwrap();
    assert_eq!(files(&a), files(&b));
    assert_ne!(files(&a), files(&c));
}

#[test]
fn save_load_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let mut ds = generate_synthetic_dataset(tmp.path(), 4, &lexicon(), 3).unwrap();
    let loaded = load_dataset(&tmp.path().join("manifest.json")).unwrap();
    assert_eq!(loaded.records, ds.records);
    for (i, rec) in ds.records.iter_mut().enumerate() {
        rec.fold = Some(i % 2);
    }
    let path = tmp.path().join("folds.json");
    ds.save(&path).unwrap();
    let again = load_dataset(&path).unwrap();
    assert_eq!(again.records, ds.records);
    assert_eq!(again.fold_labels(), Some(vec![0, 1, 0, 1]));
}

#[test]
fn load_rejects_bad_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = generate_synthetic_dataset(tmp.path(), 2, &lexicon(), 3).unwrap();
    let manifest = tmp.path().join("manifest.json");

    fs::remove_file(ds.image_path(&ds.records[1])).unwrap();
    assert!(matches!(
        load_dataset(&manifest),
        Err(DatasetError::DanglingImage { .. })
    ));

    let mut dup = ds.clone();
    dup.records[1] = dup.records[0].clone();
    dup.save(&manifest).unwrap();
    assert!(matches!(load_dataset(&manifest), Err(DatasetError::DuplicateId(id)) if id == "rec00000"));

    fs::write(&manifest, "{\"records\": [").unwrap();
    assert!(matches!(load_dataset(&manifest), Err(DatasetError::Malformed { .. })));
    assert!(matches!(
        load_dataset(&tmp.path().join("none.json")),
        Err(DatasetError::Io { .. })
    ));
}
