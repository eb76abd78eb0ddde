use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dfmk::harness::{random_distance_set, seeded_joint_target};
use dfmk::io::{self, TargetFile, TokensFile};
use dfmk::sampler::TargetDistribution;
use serde_json::Value;

fn dfmk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dfmk")).args(args).output().expect("run dfmk")
}

fn ok(args: &[&str]) -> String {
    let out = dfmk(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn schema() -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas/report.schema.json");
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&schema).unwrap()
}

fn valid_report(path: &Path, command: &str) -> Value {
    let report: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = schema();
    let errors: Vec<String> = validator.iter_errors(&report).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{command}: {errors:?}");
    assert_eq!(report["command"], command);
    report
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ds = random_distance_set(4, 2, 3, 1).unwrap();
        io::save_distances_json(&dir.path().join("d.json"), &ds).unwrap();
        let target = TargetFile {
            length: 2,
            vocab: 4,
            codebooks: vec![
                TargetDistribution::Joint(seeded_joint_target(4, 2, 3).unwrap()),
                TargetDistribution::Joint(seeded_joint_target(4, 2, 4).unwrap()),
            ],
        };
        io::save_target(&dir.path().join("q.json"), &target).unwrap();
        io::save_tokens(&dir.path().join("prompt.json"), &TokensFile { tokens: vec![vec![1, 3]] }).unwrap();
        io::save_tokens(&dir.path().join("x1.json"), &TokensFile { tokens: vec![vec![0, 1], vec![2, 3], vec![3, 3]] }).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    fn schedule(&self) -> String {
        let out = self.s("schedule.json");
        if !self.path("schedule.json").exists() {
            ok(&["build-schedule", "--distances", &self.s("d.json"), "--grid", "512", "--points", "128", "--out", &out]);
        }
        out
    }
}

#[test]
fn build_and_inspect() {
    let f = Fixture::new();
    let out = f.s("default.json");
    ok(&["build-schedule", "--distances", &f.s("d.json"), "--out", &out, "--report", &f.s("build.json")]);
    let report = valid_report(&f.path("build.json"), "build-schedule");
    assert_eq!(report["config"]["eps"], 1e-8);
    assert_eq!(report["config"]["grid"], 4096);
    assert_eq!(report["config"]["points"], 1024);
    let ko = io::load_schedule(Path::new(&out)).unwrap();
    assert_eq!(ko.tables[0].len(), 1024);
    assert_eq!(ko.tables[0].meta.grid_size, 4096);
    assert_eq!(ko.tables[0].meta.tolerance, 1e-8);

    let text = ok(&["inspect-schedule", "--in", &out, "--speed-check", "--samples", "64", "--distances", &f.s("d.json"), "--report", &f.s("inspect.json")]);
    assert!(text.contains("relative std"));
    let report = valid_report(&f.path("inspect.json"), "inspect-schedule");
    assert_eq!(report["speed"]["speeds"].as_array().unwrap().len(), 62);

    // the speed check cannot run without the geometry
    assert_eq!(dfmk(&["inspect-schedule", "--in", &out, "--speed-check"]).status.code(), Some(2));
}

#[test]
fn per_codebook_schedule() {
    let f = Fixture::new();
    let out = f.s("pc.json");
    ok(&["build-schedule", "--distances", &f.s("d.json"), "--grid", "256", "--points", "64", "--per-codebook", "--out", &out]);
    assert_eq!(io::load_schedule(Path::new(&out)).unwrap().tables.len(), 2);
    let text = ok(&["inspect-schedule", "--in", &out, "--speed-check", "--samples", "32", "--distances", &f.s("d.json")]);
    assert_eq!(text.matches("relative std").count(), 2);
}

#[test]
fn simulate_every_path() {
    let f = Fixture::new();
    let schedule = f.schedule();
    let cases: Vec<Vec<String>> = vec![
        vec!["--schedule".into(), schedule.clone(), "--distances".into(), f.s("d.json")],
        vec!["--distances".into(), f.s("d.json"), "--scheduler".into(), "heuristic:a=5,c=1".into()],
        vec!["--path".into(), "mixture".into(), "--scheduler".into(), "closed-ko".into()],
        vec!["--path".into(), "mixture".into(), "--scheduler".into(), "t2".into(), "--no-corrector".into()],
        vec!["--path".into(), "mask".into(), "--scheduler".into(), "closed-ko".into()],
        vec!["--path".into(), "mask".into(), "--scheduler".into(), "sin".into()],
    ];
    let q = f.s("q.json");
    for (i, extra) in cases.iter().enumerate() {
        let report = f.s(&format!("sim{i}.json"));
        let mut args = vec!["simulate", "--target", &q, "--nfe", "8", "--trials", "300", "--seed", "5", "--report", &report];
        args.extend(extra.iter().map(String::as_str));
        ok(&args);
        let r = valid_report(Path::new(&report), "simulate");
        assert_eq!(r["config"]["seed"], 5);
        assert_eq!(r["config"]["nfe"], 8);
        assert_eq!(r["runs"][0]["trials"], 300);
        assert_eq!(r["runs"][0]["per_step_speed"].as_array().unwrap().len(), 8);
    }
}

#[test]
fn simulate_with_prompt() {
    let f = Fixture::new();
    let schedule = f.schedule();
    let report = f.s("p.json");
    ok(&[
        "simulate", "--schedule", &schedule, "--distances", &f.s("d.json"), "--target", &f.s("q.json"),
        "--prompt", &f.s("prompt.json"), "--nfe", "4", "--trials", "100", "--report", &report,
    ]);
    let r = valid_report(Path::new(&report), "simulate");
    assert_eq!(r["config"]["prompt_length"], 1);
}

#[test]
fn misconfigured_runs_fail() {
    let f = Fixture::new();
    let q = f.s("q.json");
    // numerical-ko without a table
    assert_eq!(dfmk(&["simulate", "--distances", &f.s("d.json"), "--target", &q, "--trials", "10"]).status.code(), Some(2));
    // heuristic on a mixture path
    assert_eq!(dfmk(&["simulate", "--path", "mixture", "--scheduler", "heuristic", "--target", &q]).status.code(), Some(2));
    // metric path without distances
    assert_eq!(dfmk(&["simulate", "--scheduler", "heuristic", "--target", &q]).status.code(), Some(2));
    assert!(!dfmk(&["simulate", "--scheduler", "cosine", "--target", &q]).status.success());
}

#[test]
fn sweep_writes_csv() {
    let f = Fixture::new();
    let schedule = f.schedule();
    let csv_path = f.path("sweep.csv");
    let report = f.s("sweep.json");
    ok(&[
        "sweep", "--schedule", &schedule, "--distances", &f.s("d.json"), "--target", &f.s("q.json"),
        "--nfe", "2,4", "--paired", "--trials", "200", "--csv", csv_path.to_str().unwrap(), "--report", &report,
    ]);
    let r = valid_report(Path::new(&report), "sweep");
    assert_eq!(r["runs"].as_array().unwrap().len(), 4);
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(&headers[0], "nfe");
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!((&rows[0][0], &rows[0][1]), ("2", "true"));
    assert_eq!((&rows[3][0], &rows[3][1]), ("4", "false"));
}

#[test]
fn corrupt_round_trip() {
    let f = Fixture::new();
    let schedule = f.schedule();
    let out = f.s("noisy.json");
    let report = f.s("corrupt.json");
    ok(&[
        "corrupt", "--distances", &f.s("d.json"), "--schedule", &schedule, "--tokens", &f.s("x1.json"), "--t", "1",
        "--prompt-ratio", "0.3", "--seed", "3", "--out", &out, "--report", &report,
    ]);
    // at t = 1 every cell sits on its clean token
    assert_eq!(io::load_tokens(Path::new(&out)).unwrap(), io::load_tokens(&f.path("x1.json")).unwrap());
    let r = valid_report(Path::new(&report), "corrupt");
    assert_eq!(r["config"]["prompt_count"], 1);
    let strict = dfmk(&[
        "corrupt", "--distances", &f.s("d.json"), "--schedule", &schedule, "--tokens", &f.s("x1.json"), "--t", "0.5",
        "--prompt-ratio", "0.5", "--out", &out,
    ]);
    assert_eq!(strict.status.code(), Some(2));
}

#[test]
fn verify_passes() {
    let f = Fixture::new();
    let report = f.s("verify.json");
    let text = ok(&["verify", "--report", &report]);
    assert!(!text.contains("FAIL"), "{text}");
    let r = valid_report(Path::new(&report), "verify");
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["passed"] == true));
}
