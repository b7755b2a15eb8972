//! Kaokore-layout ingestion against a synthetic fixture: `labels.csv` with
//! integer codes, images under `images_256/`, optional `set` column.

use std::path::Path;

use styleaug_core::corpus::{
    class_histogram, load_manifest, load_manifest_with, KaokoreNames, ManifestFormat, Split, Task,
};
use styleaug_core::error::Error;
use styleaug_core::imageio;
use styleaug_core::tensor::Tensor;

/// labels.csv rows as (image, gender, status, set).
fn write_fixture(root: &Path, rows: &[(&str, u8, u8, Option<&str>)], with_set: bool) {
    std::fs::create_dir_all(root.join("images_256")).unwrap();
    let mut csv = if with_set {
        String::from("image,gender,status,set\n")
    } else {
        String::from("image,gender,status\n")
    };
    for (image, gender, status, set) in rows {
        if with_set {
            csv.push_str(&format!("{image},{gender},{status},{}\n", set.unwrap_or("train")));
        } else {
            csv.push_str(&format!("{image},{gender},{status}\n"));
        }
        let img = Tensor::full(&[3, 32, 32], (*status as f64) / 4.0);
        imageio::save_image(&root.join("images_256").join(image), &img).unwrap();
    }
    std::fs::write(root.join("labels.csv"), csv).unwrap();
}

fn all_pairs() -> Vec<(String, u8, u8, Option<&'static str>)> {
    let mut rows = Vec::new();
    let sets = ["train", "train", "dev", "test"];
    let mut i = 0;
    for status in 0..4u8 {
        for gender in 0..2u8 {
            rows.push((format!("{i:05}.png"), gender, status, Some(sets[i % 4])));
            i += 1;
        }
    }
    rows
}

#[test]
fn status_task_yields_four_named_classes() {
    let dir = tempfile::tempdir().unwrap();
    let rows = all_pairs();
    let borrowed: Vec<(&str, u8, u8, Option<&str>)> =
        rows.iter().map(|(i, g, s, set)| (i.as_str(), *g, *s, *set)).collect();
    write_fixture(dir.path(), &borrowed, false);
    let manifest = load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Status).unwrap();
    assert_eq!(manifest.classes, vec!["commoner", "incarnation", "noble", "warrior"]);
    assert_eq!(manifest.records.len(), 8);
    // without a set column everything lands in train
    assert_eq!(manifest.records_in(Split::Train).count(), 8);
}

#[test]
fn gender_task_yields_two_classes() {
    let dir = tempfile::tempdir().unwrap();
    let rows = all_pairs();
    let borrowed: Vec<(&str, u8, u8, Option<&str>)> =
        rows.iter().map(|(i, g, s, set)| (i.as_str(), *g, *s, *set)).collect();
    write_fixture(dir.path(), &borrowed, false);
    let manifest = load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Gender).unwrap();
    assert_eq!(manifest.classes, vec!["male", "female"]);
}

#[test]
fn combined_task_enumerates_the_cartesian_product() {
    // fixture carries all 4x2 label pairs, so all 8 classes appear
    let dir = tempfile::tempdir().unwrap();
    let rows = all_pairs();
    let borrowed: Vec<(&str, u8, u8, Option<&str>)> =
        rows.iter().map(|(i, g, s, set)| (i.as_str(), *g, *s, *set)).collect();
    write_fixture(dir.path(), &borrowed, true);
    let manifest = load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Combined8).unwrap();
    assert_eq!(manifest.classes.len(), 8);
    let hist = class_histogram(&manifest);
    let present: usize = manifest
        .classes
        .iter()
        .map(|c| usize::from(manifest.records.iter().any(|r| &r.class_label == c)))
        .sum();
    assert_eq!(present, 8);
    assert_eq!(hist.total(), manifest.records_in(Split::Train).count());
    // the set column was honored
    assert!(manifest.records_in(Split::Val).count() > 0);
    assert!(manifest.records_in(Split::Test).count() > 0);
}

#[test]
fn custom_code_tables_override_defaults() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &[("a.png", 0, 1, None)], false);
    let names = KaokoreNames {
        gender: vec!["m".into(), "f".into()],
        status: vec!["noble".into(), "warrior".into(), "incarnation".into(), "commoner".into()],
    };
    let manifest =
        load_manifest_with(dir.path(), ManifestFormat::Kaokore, Task::Status, &names).unwrap();
    assert_eq!(manifest.records[0].class_label, "warrior");
}

#[test]
fn missing_pieces_relay_the_path() {
    let dir = tempfile::tempdir().unwrap();
    // no labels.csv at all
    std::fs::create_dir_all(dir.path().join("images_256")).unwrap();
    match load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Status) {
        Err(Error::Ingestion { path, .. }) => assert!(path.ends_with("labels.csv")),
        other => panic!("expected ingestion error, got {other:?}"),
    }
    // unknown status code names the row
    write_fixture(dir.path(), &[("a.png", 0, 9, None)], false);
    match load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Status) {
        Err(Error::Validation(msg)) => assert!(msg.contains("row 2"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
    // referenced image missing
    write_fixture(dir.path(), &[("b.png", 0, 1, None)], false);
    std::fs::remove_file(dir.path().join("images_256/b.png")).unwrap();
    match load_manifest(dir.path(), ManifestFormat::Kaokore, Task::Status) {
        Err(Error::Validation(msg)) => assert!(msg.contains("missing"), "{msg}"),
        other => panic!("expected validation error, got {other:?}"),
    }
}

#[test]
fn generic_csv_empty_manifest_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("manifest.csv"), "relative_path,label,split\n").unwrap();
    let manifest = load_manifest(dir.path(), ManifestFormat::GenericCsv, Task::Generic).unwrap();
    assert!(manifest.records.is_empty());
    assert!(manifest.classes.is_empty());
}
