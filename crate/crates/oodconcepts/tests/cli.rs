use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use sha2::{Digest, Sha256};
use tempfile::TempDir;

const SMALL: &str = "\
seed = 7

[data]
classes = 3
channels = 6
patches = 3
per_class = 30

[head]
epochs = 150

[learn]
preset = energy-all
concepts = 4
hidden = 16
epochs = 4
batch_size = 16
neighbors = 3

[explain]
finetune_steps = 3
finetune_samples = 24
";

struct Run {
    dir: TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.ini"), config).unwrap();
        Run { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn cmd(&self, out: &str, args: &[&str]) -> Output {
        let out = self.path(out);
        let mut full = vec!["--config".to_string(), self.path("run.ini").display().to_string(), "--out".into(), out.display().to_string()];
        full.extend(args.iter().map(|s| s.to_string()));
        raw(&full)
    }

    fn ok(&self, out: &str, args: &[&str]) -> Output {
        let o = self.cmd(out, args);
        assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn learned(&self, out: &str) -> String {
        self.ok(out, &["learn"]);
        self.path(out).join("model.ckpt").display().to_string()
    }
}

fn raw(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodconcepts")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn generate_is_byte_identical() {
    let r = Run::new(SMALL);
    r.ok("a", &["generate"]);
    r.ok("b", &["generate"]);
    let a = dir_files(&r.path("a"));
    assert_eq!(a.len(), 9);
    assert_eq!(a, dir_files(&r.path("b")));
    assert!(a.iter().any(|(n, b)| n == "id_train.cft" && &b[..4] == b"CFT1"));
    assert!(a.iter().any(|(n, b)| n == "id_train.labels" && &b[..4] == b"LBL1"));
}

#[test]
fn bad_arguments_exit_with_two() {
    let r = Run::new(SMALL);
    let o = raw(&["--config".into(), r.path("run.ini").display().to_string(), "generate".into()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));

    let one_class = Run::new(&SMALL.replace("classes = 3", "classes = 1"));
    assert_eq!(code(&one_class.cmd("o", &["generate"])), 2);

    let unknown = Run::new(&format!("{SMALL}\n[learn2]\nx = 1\n"));
    assert_eq!(code(&unknown.cmd("o", &["generate"])), 2);

    let typo = Run::new(&SMALL.replace("hidden = 16", "hiden = 16"));
    assert_eq!(code(&typo.cmd("o", &["learn"])), 2);

    let mismatch = Run::new(&SMALL.replace("preset = energy-all", "preset = msp-all\n[detector]\nkind = energy"));
    assert_eq!(code(&mismatch.cmd("o", &["learn"])), 2);

    let missing = r.cmd("o", &["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert_eq!(code(&missing), 3);
}

#[test]
fn learn_is_deterministic_and_records_history() {
    let r = Run::new(SMALL);
    let a = r.learned("a");
    let b = r.learned("b");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read(r.path("a/history.csv")).unwrap(), fs::read(r.path("b/history.csv")).unwrap());

    let mut rd = csv::Reader::from_path(r.path("a/history.csv")).unwrap();
    let header: Vec<String> = rd.headers().unwrap().iter().map(str::to_string).collect();
    assert_eq!(header, ["epoch", "crossEntropy", "rExpl", "jMse", "jNorm", "jSep", "etaDetVal"]);
    assert_eq!(rd.records().count(), 4);

    let other_seed = r.ok("c", &["--seed", "8", "learn"]);
    drop(other_seed);
    assert_ne!(fs::read(&a).unwrap(), fs::read(r.path("c/model.ckpt")).unwrap());
}

#[test]
fn baseline_preset_has_no_regularizer_columns() {
    let r = Run::new(&SMALL.replace("energy-all", "baseline"));
    r.learned("a");
    let mut rd = csv::Reader::from_path(r.path("a/history.csv")).unwrap();
    for row in rd.records() {
        let row = row.unwrap();
        for col in [3, 4, 5] {
            assert_eq!(row[col].parse::<f64>().unwrap(), 0.0, "column {col} in {row:?}");
        }
        assert!(row[2].parse::<f64>().unwrap() != 0.0);
    }
}

#[test]
fn file_data_matches_synthetic_source() {
    let r = Run::new(SMALL);
    r.ok("data", &["generate"]);
    let synthetic = r.learned("a");
    let files = Run::new(&SMALL.replace("[data]\nclasses = 3\nchannels = 6\npatches = 3\nper_class = 30\n", &format!("[data]\ndir = {}\n", r.path("data").display())));
    let from_files = files.learned("b");
    assert_eq!(fs::read(synthetic).unwrap(), fs::read(from_files).unwrap());

    let cft = r.path("data/ood_test.cft");
    let mut bytes = fs::read(&cft).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&cft, bytes).unwrap();
    let broken = files.cmd("c", &["learn"]);
    assert_eq!(code(&broken), 3);
    assert!(String::from_utf8_lossy(&broken.stderr).contains("ood_test.cft"));
}

#[test]
fn eval_against_itself_has_zero_relative_separability() {
    let r = Run::new(SMALL);
    let ck = r.learned("a");
    r.ok("a", &["eval", "--checkpoint", &ck, "--baseline", &ck]);
    let m = json(&r.path("a/metrics.json"));
    let mut keys: Vec<&str> = m.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["etaClf", "etaDet", "jSepGlobal", "jSepPerClass", "jSepRelative", "perClassDet"]);
    assert_eq!(m["jSepRelative"].as_f64(), Some(0.0));
    assert_eq!(m["perClassDet"].as_array().unwrap().len(), 3);

    r.ok("a", &["eval", "--checkpoint", &ck]);
    assert!(json(&r.path("a/metrics.json"))["jSepRelative"].is_null());
}

#[test]
fn shape_mismatch_exits_with_five() {
    let r = Run::new(SMALL);
    let ck = r.learned("a");
    let wide = Run::new(&SMALL.replace("channels = 6", "channels = 8"));
    assert_eq!(code(&wide.cmd("b", &["eval", "--checkpoint", &ck])), 5);
}

#[test]
fn diverging_training_exits_with_four() {
    let r = Run::new(&SMALL.replace("batch_size = 16", "batch_size = 16\nlearning_rate = 1e300\nlambda_sep = 1e300"));
    let o = r.cmd("a", &["learn"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

fn shapley_results(path: &Path) -> Vec<Value> {
    json(path)["results"].as_array().unwrap().clone()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn explain_exact_and_monte_carlo() {
    let r = Run::new(SMALL);
    let ck = r.learned("a");
    r.ok("a", &["explain", "--checkpoint", &ck, "--mode", "exact"]);
    let exact = shapley_results(&r.path("a/shapley.json"));
    assert!(!exact.is_empty());
    assert_eq!(exact[0]["classId"], "global");
    for res in &exact {
        let vals = floats(&res["perConcept"]);
        assert_eq!(vals.len(), 4);
        let total: f64 = vals.iter().sum();
        let (full, empty) = (res["nuFull"].as_f64().unwrap(), res["nuEmpty"].as_f64().unwrap());
        assert_eq!(empty, 0.0);
        assert!((total - (full - empty)).abs() < 1e-9);
        assert!((res["sum"].as_f64().unwrap() - total).abs() < 1e-12);
        assert_eq!(res["characteristicCache"].as_object().unwrap().len(), 16);
        let mut ranking: Vec<u64> = res["ranking"].as_array().unwrap().iter().map(|x| x.as_u64().unwrap()).collect();
        assert!(ranking.windows(2).all(|w| vals[w[0] as usize] >= vals[w[1] as usize]));
        ranking.sort();
        assert_eq!(ranking, [0, 1, 2, 3]);
    }
    assert!(r.path("a/patterns.csv").exists());
    let nearest = json(&r.path("a/nearest_patches.json"));
    assert!(nearest.to_string().len() > 2);

    r.ok("b", &["explain", "--checkpoint", &ck, "--mode", "mc", "--samples", "2000"]);
    r.ok("c", &["explain", "--checkpoint", &ck, "--mode", "mc", "--samples", "2000"]);
    assert_eq!(fs::read(r.path("b/shapley.json")).unwrap(), fs::read(r.path("c/shapley.json")).unwrap());
    let mc = shapley_results(&r.path("b/shapley.json"));
    for (e, m) in exact.iter().zip(&mc) {
        assert_eq!(m["mode"], "monteCarlo");
        let (ev, mv, se) = (floats(&e["perConcept"]), floats(&m["perConcept"]), floats(&m["stdErrors"]));
        for k in 0..4 {
            assert!((ev[k] - mv[k]).abs() <= 4.0 * se[k] + 1e-9, "concept {k}: exact {} mc {} se {}", ev[k], mv[k], se[k]);
        }
    }
}

fn curve(path: &Path) -> Vec<(usize, usize, f64, f64)> {
    csv::Reader::from_path(path).unwrap().deserialize().map(|r| r.unwrap()).collect()
}

#[test]
fn intervention_curve_rows() {
    let r = Run::new(SMALL);
    let ck = r.learned("a");
    r.ok("a", &["intervene", "--checkpoint", &ck]);
    let rows = curve(&r.path("a/intervention.csv"));
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    assert_eq!(rows[0].1, 0);
    assert_eq!(rows[0].2, rows[0].3);
    assert!(rows.iter().all(|r| r.2 == rows[0].2));

    r.ok("b", &["intervene", "--checkpoint", &ck, "--k", "4,0,2,2"]);
    assert_eq!(curve(&r.path("b/intervention.csv")).iter().map(|r| r.0).collect::<Vec<_>>(), [0, 2, 4]);
    assert_eq!(code(&r.cmd("c", &["intervene", "--checkpoint", &ck, "--k", "5"])), 2);
}

#[test]
fn report_manifest_hashes_its_outputs() {
    let r = Run::new(SMALL);
    let ck = r.learned("a");
    r.ok("rep", &["report", "--checkpoint", &ck, "--baseline", &ck]);
    let m = json(&r.path("rep/manifest.json"));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["checkpointSha256"].as_str().unwrap(), format!("{:x}", Sha256::digest(fs::read(&ck).unwrap())));
    let files = m["files"].as_array().unwrap();
    assert_eq!(files.len(), 5);
    for f in files {
        let bytes = fs::read(r.path("rep").join(f["file"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(f["sha256"].as_str().unwrap(), format!("{:x}", Sha256::digest(&bytes)));
    }
}
