use std::fs;
use std::path::{Path, PathBuf};

use annoforge::datasets::{
    load_dataset, make_fixture, reference_fixture_spec, sample_instances, write_dataset,
    DatasetError, FixtureSpec, ScriptBlock,
};
use annoforge::domain::Instance;
use annoforge::metrics::{per_round_series, Golds};

fn shipped_fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/reference")
}

fn write_fomc(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let labels = ["Dovish", "Hawkish", "Neutral"];
    let mut body = String::new();
    for i in 0..n {
        body.push_str(&format!(
            "{{\"id\":\"f{i:03}\",\"content\":\"sentence {i}\",\"choices\":[\"Dovish\",\"Hawkish\",\"Neutral\"],\"gold\":\"{}\",\"meta\":{{\"year\":{}}}}}\n",
            labels[i % 3],
            1996 + i % 20
        ));
    }
    let data = dir.join("fomc.jsonl");
    let guide = dir.join("guideline.txt");
    fs::write(&data, body).unwrap();
    fs::write(&guide, "Label the monetary policy stance.").unwrap();
    (data, guide)
}

#[test]
fn loads_fomc_style_file() {
    let dir = tempfile::tempdir().unwrap();
    let (data, guide) = write_fomc(dir.path(), 200);
    let ds = load_dataset(&data, &guide).unwrap();
    assert_eq!(ds.task.label_space.len(), 3);
    assert_eq!(ds.instances.len(), 200);
    assert_eq!(ds.task.dataset_name, "fomc");
    assert_eq!(ds.golds().len(), 200);
}

#[test]
fn reordered_choices_are_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, guide) = write_fomc(dir.path(), 3);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("{\"id\":\"x\",\"content\":\"c\",\"choices\":[\"Hawkish\",\"Dovish\",\"Neutral\"],\"gold\":\"Dovish\"}\n");
    fs::write(&data, text).unwrap();
    assert!(matches!(load_dataset(&data, &guide), Err(DatasetError::Schema { line: 4, .. })));
}

#[test]
fn missing_guideline_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = write_fomc(dir.path(), 3);
    let err = load_dataset(&data, &dir.path().join("absent.txt")).unwrap_err();
    assert!(matches!(err, DatasetError::Parse { .. }));
}

#[test]
fn invalid_gold_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (data, guide) = write_fomc(dir.path(), 2);
    let mut text = fs::read_to_string(&data).unwrap();
    text.push_str("{\"id\":\"x\",\"content\":\"c\",\"choices\":[\"Dovish\",\"Hawkish\",\"Neutral\"],\"gold\":\"Bullish\"}\n");
    fs::write(&data, text).unwrap();
    assert!(matches!(load_dataset(&data, &guide), Err(DatasetError::Validation(_))));
}

#[test]
fn load_emit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, guide) = write_fomc(dir.path(), 40);
    let ds = load_dataset(&data, &guide).unwrap();
    let again = dir.path().join("copy").join("fomc.jsonl");
    fs::create_dir_all(again.parent().unwrap()).unwrap();
    write_dataset(&again, &ds.task, &ds.instances).unwrap();
    let back = load_dataset(&again, &guide).unwrap();
    assert_eq!(back, ds);
}

fn pool(n: usize) -> Vec<Instance> {
    (0..n)
        .map(|i| Instance::new(format!("i{i:04}"), format!("t{i}"), None))
        .collect()
}

fn ids(v: &[Instance]) -> Vec<&str> {
    v.iter().map(|i| i.id.as_str()).collect()
}

#[test]
fn golden_sample_ids() {
    let p = pool(1000);
    let cases: [(u64, [&str; 5]); 3] = [
        (1, ["i0287", "i0559", "i0731", "i0894", "i0898"]),
        (2, ["i0051", "i0393", "i0696", "i0874", "i0929"]),
        (42, ["i0343", "i0368", "i0509", "i0636", "i0904"]),
    ];
    for (seed, expected) in cases {
        let s = sample_instances(&p, 5, seed);
        assert_eq!(ids(&s), expected, "seed {seed}");
    }
}

#[test]
fn sampling_properties() {
    let p = pool(1000);
    let a = sample_instances(&p, 200, 42);
    assert_eq!(ids(&a), ids(&sample_instances(&p, 200, 42)));
    let mut uniq = ids(&a);
    uniq.dedup();
    assert_eq!(uniq.len(), 200);
    assert_ne!(ids(&sample_instances(&p, 200, 1)), ids(&sample_instances(&p, 200, 2)));
    assert_eq!(sample_instances(&p, 1000, 9), p);
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn regenerated_fixture_matches_shipped_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let f = make_fixture(&reference_fixture_spec(), 7, dir.path()).unwrap();
    assert_eq!(f.accuracy, 0.675);
    let shipped = shipped_fixture();
    let ours = files_under(dir.path());
    assert_eq!(ours, files_under(&shipped));
    for rel in ours {
        assert_eq!(
            fs::read(dir.path().join(&rel)).unwrap(),
            fs::read(shipped.join(&rel)).unwrap(),
            "{}",
            rel.display()
        );
    }
}

fn small_spec(blocks: Vec<ScriptBlock>) -> FixtureSpec {
    let n = blocks.iter().map(|b| b.count).sum();
    FixtureSpec {
        dataset_name: "tiny".into(),
        n_instances: n,
        labels: vec!["A".into(), "B".into(), "C".into()],
        gold_distribution: vec![n, 0, 0],
        agents: vec!["x".into(), "y".into(), "z".into()],
        r_max: 2,
        tie_policy: Default::default(),
        agent_scripts: blocks,
        expected_accuracy: None,
    }
}

fn block(count: usize, rounds: &[&[&str]]) -> ScriptBlock {
    ScriptBlock {
        count,
        rounds: rounds.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
    }
}

#[test]
fn unanimous_scripts_give_kappa_one() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec(vec![
        block(4, &[&["gold", "gold", "gold"]]),
        block(3, &[&["wrong:1", "wrong:1", "wrong:1"]]),
    ]);
    let f = make_fixture(&spec, 1, dir.path()).unwrap();
    let ds = load_dataset(&f.dataset, &f.guideline).unwrap();
    let golds: Golds = ds.golds();
    let series = per_round_series(&f.transcripts, &golds, &ds.task.label_space, Default::default()).unwrap();
    assert_eq!(series[0].fleiss_kappa, Some(1.0));
    assert!((f.accuracy - 4.0 / 7.0).abs() < 1e-12);
}

#[test]
fn fixture_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = small_spec(vec![
        block(5, &[&["gold", "wrong:0", "gold"], &["gold", "gold", "gold"]]),
        block(5, &[&["invalid", "gold", "wrong:1"], &["gold", "gold", "wrong:1"], &["gold", "gold", "wrong:1"]]),
    ]);
    make_fixture(&spec, 3, a.path()).unwrap();
    make_fixture(&spec, 3, b.path()).unwrap();
    let files = files_under(a.path());
    assert_eq!(files, files_under(b.path()));
    for rel in files {
        assert_eq!(fs::read(a.path().join(&rel)).unwrap(), fs::read(b.path().join(&rel)).unwrap());
    }
}

#[test]
fn contradictory_specs_are_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let cases = vec![
        // Continues after reaching consensus.
        small_spec(vec![block(2, &[&["gold", "gold", "gold"], &["gold", "gold", "gold"]])]),
        // Stops early without consensus.
        small_spec(vec![block(2, &[&["gold", "wrong:0", "gold"]])]),
        // Unknown token.
        small_spec(vec![block(2, &[&["gold", "maybe", "gold"]])]),
        // Wrong index out of range.
        small_spec(vec![block(2, &[&["gold", "wrong:2", "gold"]])]),
    ];
    for spec in cases {
        assert!(matches!(make_fixture(&spec, 1, dir.path()), Err(DatasetError::Infeasible(_))));
    }
    let mut bad_counts = small_spec(vec![block(2, &[&["gold", "gold", "gold"]])]);
    bad_counts.gold_distribution = vec![1, 0, 0];
    assert!(matches!(make_fixture(&bad_counts, 1, dir.path()), Err(DatasetError::Infeasible(_))));
    let mut wrong_target = reference_fixture_spec();
    wrong_target.expected_accuracy = Some(0.7);
    assert!(matches!(make_fixture(&wrong_target, 7, dir.path()), Err(DatasetError::Infeasible(_))));
}
