use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use morphospace_cli::{RunManifest, Stage};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_morphospace"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn fixtures(dir: &Path, seed: &str, amplitude: &str) -> Output {
    run(&[
        "fixtures",
        "--members",
        "5",
        "--clusters",
        "2",
        "--amplitude",
        amplitude,
        "--resolution",
        "2",
        "--seed",
        seed,
        "--output",
        dir.to_str().unwrap(),
    ])
}

fn pipeline(input: &Path, output: &Path) -> Output {
    run(&[
        "pipeline",
        "--input",
        input.to_str().unwrap(),
        "--output",
        output.to_str().unwrap(),
        "--n-samples",
        "30",
        "--clusters",
        "4",
        "--seed",
        "5",
    ])
}

fn files(dir: &Path, ext: &str) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn stderr_json(o: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&o.stderr);
    let line = text
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn fixtures_repeat_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(fixtures(&a, "9", "0.1").status.success());
    assert!(fixtures(&b, "9", "0.1").status.success());
    let (fa, fb) = (files(&a, "ply"), files(&b, "ply"));
    assert_eq!(fa.len(), 5);
    assert_eq!(fa, fb);
    assert_eq!(
        std::fs::read(a.join("manifest.json")).unwrap(),
        std::fs::read(b.join("manifest.json")).unwrap()
    );
}

#[test]
fn folding_fixture_fails_with_json_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = fixtures(tmp.path(), "1", "40");
    assert_eq!(o.status.code(), Some(3));
    let err = stderr_json(&o);
    assert_eq!(err["stage"], "fixtures");
    assert!(err["message"].as_str().unwrap().contains("flipped"));
}

#[test]
fn missing_input_is_a_config_error_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = pipeline(&tmp.path().join("nowhere"), &out);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
    assert!(!out.exists());
}

#[test]
fn bad_flags_and_config_keys_exit_with_code_two() {
    assert_eq!(run(&["pipeline", "--n-samples", "many"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "[hdm]\nclustres = 3\n").unwrap();
    let o = run(&["pipeline", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(stderr_json(&o)["error"], "config");
}

#[test]
fn pipeline_is_deterministic_and_cached() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    assert!(fixtures(&input, "2", "0.1").status.success());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let o = pipeline(&input, &a);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(pipeline(&input, &b).status.success());
    let csv_a = files(&a, "csv");
    assert!(csv_a.len() > 20);
    assert_eq!(csv_a, files(&b, "csv"));
    assert_eq!(files(&a, "ply"), files(&b, "ply"));
    assert_eq!(
        std::fs::read(a.join("align/mst.json")).unwrap(),
        std::fs::read(b.join("align/mst.json")).unwrap()
    );

    let first = RunManifest::load(&a).unwrap();
    assert!(first.stages.iter().all(|r| !r.cached));
    assert!(pipeline(&input, &a).status.success());
    let second = RunManifest::load(&a).unwrap();
    assert!(second.stages.iter().all(|r| r.cached));
    for (x, y) in first.stages.iter().zip(&second.stages) {
        assert_eq!((x.stage, &x.key, &x.outputs), (y.stage, &y.key, &y.outputs));
    }

    std::fs::remove_file(a.join("hdm/hbdd.csv")).unwrap();
    assert!(pipeline(&input, &a).status.success());
    let third = RunManifest::load(&a).unwrap();
    let rerun: Vec<Stage> = third.stages.iter().filter(|r| !r.cached).map(|r| r.stage).collect();
    assert_eq!(rerun, [Stage::Hdm, Stage::Segment, Stage::Refine]);
    assert_eq!(files(&a, "csv"), csv_a);
}

#[test]
fn single_stage_command_runs_only_its_closure() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("in");
    assert!(fixtures(&input, "3", "0.1").status.success());
    let out = tmp.path().join("out");
    let o = run(&[
        "ariadne",
        "--input",
        input.to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = RunManifest::load(&out).unwrap();
    let stages: Vec<Stage> = m.stages.iter().map(|r| r.stage).collect();
    assert_eq!(stages, [Stage::Ingest, Stage::Ariadne]);
    assert!(out.join("ariadne/totals.csv").exists());
}
