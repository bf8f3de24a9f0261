use std::fs;
use std::path::Path;

use tokencompose::data::dataset::{generate_dataset, load_dataset, read_manifest, render_samples};
use tokencompose::data::registry::CategoryRegistry;
use tokencompose::data::scene::{tokenize, SceneSampler};
use tokencompose::Error;

fn dataset(n: usize, seed: u64) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(n, &CategoryRegistry::default(), &SceneSampler::default(), seed, dir.path()).unwrap();
    dir
}

fn rewrite_first_line(dir: &Path, f: impl Fn(&mut serde_json::Value)) {
    let path = dir.join("metadata.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let mut v: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    f(&mut v);
    lines[0] = v.to_string();
    fs::write(&path, lines.join("\n") + "\n").unwrap();
}

fn first_error(dir: &Path) -> Error {
    load_dataset(dir, 32).unwrap().find_map(|r| r.err()).expect("loading should fail")
}

#[test]
fn round_trip_matches_renders() {
    let reg = CategoryRegistry::default();
    let dir = dataset(100, 21);
    let loaded: Vec<_> = load_dataset(dir.path(), 32).unwrap().collect::<Result<_, _>>().unwrap();
    let rendered = render_samples(100, &reg, &SceneSampler::default(), 21).unwrap();
    assert_eq!(loaded.len(), 100);
    assert_eq!(loaded, rendered);
    let manifest = read_manifest(dir.path()).unwrap();
    assert_eq!(manifest.count, 100);
    assert_eq!(manifest.samples.len(), 100);
}

#[test]
fn grounded_positions_point_at_nouns() {
    for s in render_samples(200, &CategoryRegistry::default(), &SceneSampler::default(), 4).unwrap() {
        let tokens = tokenize(&s.caption);
        for g in &s.groundings {
            assert_eq!(&tokens[g.token_position], g.category.split_whitespace().last().unwrap());
            assert!(!g.mask.is_empty());
        }
    }
}

#[test]
fn same_seed_gives_identical_files() {
    let a = dataset(12, 3);
    let b = dataset(12, 3);
    for f in ["metadata.jsonl", "manifest.json", "images/000005.png"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_json_reports_line() {
    let dir = dataset(3, 1);
    let path = dir.path().join("metadata.jsonl");
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("{not json\n");
    fs::write(&path, text).unwrap();
    match first_error(dir.path()) {
        Error::Metadata { line, .. } => assert_eq!(line, 4),
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn wrong_token_position_is_rejected() {
    let dir = dataset(2, 1);
    rewrite_first_line(dir.path(), |v| v["groundings"][0]["token_position"] = 0.into());
    assert!(matches!(first_error(dir.path()), Error::Metadata { line: 1, .. }));
}

#[test]
fn missing_field_is_rejected() {
    let dir = dataset(2, 1);
    rewrite_first_line(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("caption");
    });
    assert!(matches!(first_error(dir.path()), Error::Metadata { line: 1, .. }));
}

#[test]
fn missing_mask_names_the_token() {
    let dir = dataset(2, 1);
    let meta = fs::read_to_string(dir.path().join("metadata.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(meta.lines().next().unwrap()).unwrap();
    let g = &first["groundings"][0];
    fs::remove_file(dir.path().join(g["mask_file"].as_str().unwrap())).unwrap();
    let noun = g["category"].as_str().unwrap().split_whitespace().last().unwrap().to_string();
    match first_error(dir.path()) {
        Error::MissingMask { token, .. } => assert!(token.ends_with(&noun), "{token}"),
        e => panic!("unexpected error {e}"),
    }
}

#[test]
fn missing_metadata_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_dataset(dir.path(), 32), Err(Error::Io(_))));
}

#[test]
fn category_marginals_are_uniform() {
    let reg = CategoryRegistry::default();
    let samples = render_samples(1000, &reg, &SceneSampler::default(), 77).unwrap();
    let c = reg.len() as f64;
    let mut expected = 0.0;
    let mut var = 0.0;
    for s in &samples {
        let p = s.groundings.len() as f64 / c;
        expected += p;
        var += p * (1.0 - p);
    }
    for name in reg.names() {
        let count = samples.iter().filter(|s| s.groundings.iter().any(|g| g.category == name)).count() as f64;
        assert!((count - expected).abs() <= 3.0 * var.sqrt(), "{name}: {count} vs {expected:.1} ± {:.1}", var.sqrt());
    }
}
