use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdfit_core::body_model::SkeletonTemplate;
use crowdfit_core::io::{self, ResultFile};

fn crowdfit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdfit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = crowdfit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new(persons: usize) -> Self {
        let w = Work { dir: tempfile::tempdir().unwrap() };
        fs::write(w.path("spec.json"), format!(r#"{{"persons": {persons}, "seed": 3}}"#)).unwrap();
        ok(&["generate", "--spec", &w.arg("spec.json"), "--out", &w.arg("scene.json")]);
        w
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }
}

fn load(path: &Path) -> ResultFile {
    ResultFile::load(path).unwrap()
}

#[test]
fn fit_defaults_are_the_published_configuration() {
    let w = Work::new(2);
    ok(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json")]);
    let r = load(&w.path("r.json"));
    assert_eq!(r.config.crowd.iters, 260);
    assert_eq!(r.config.crowd.batch_size, 50);
    assert_eq!(r.config.crowd.lr, 1e-5);
    assert_eq!(r.config.threshold, 0.23);
    assert!(r.scene.crowd_stage);
    assert_eq!(r.scene.iterations.len(), 261);
    assert!(!r.notes.is_empty());
}

#[test]
fn no_crowd_differs_only_in_crowd_stage() {
    let w = Work::new(3);
    ok(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("a.json"), "--no-crowd"]);
    ok(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("b.json")]);
    let (a, b) = (load(&w.path("a.json")), load(&w.path("b.json")));
    assert!(!a.scene.crowd_stage && b.scene.crowd_stage);
    assert!(a.scene.iterations.is_empty());
    assert_eq!(a.intrinsics, b.intrinsics);
    assert_eq!(a.template_version, b.template_version);
    let mut cfg = a.config.clone();
    cfg.no_crowd = false;
    assert_eq!(cfg, b.config);
    let ids = |r: &ResultFile| r.persons.iter().map(|p| p.id).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
}

#[test]
fn flags_override_config_file() {
    let w = Work::new(2);
    fs::write(w.path("cfg.json"), r#"{"threshold": 0.5, "crowd": {"iters": 7, "batch_size": 1}}"#).unwrap();
    ok(&[
        "fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json"), "--config", &w.arg("cfg.json"),
        "--iters", "5", "--lr", "2e-5", "--seed", "9", "--freeze-normal-every", "3", "--literal-init",
    ]);
    let r = load(&w.path("r.json"));
    assert_eq!(r.config.threshold, 0.5);
    assert_eq!(r.config.crowd.iters, 5);
    assert_eq!(r.config.crowd.batch_size, 1);
    assert_eq!(r.config.crowd.lr, 2e-5);
    assert_eq!(r.config.seed, 9);
    assert!(r.config.crowd.literal_init);
    // Two batches of one person, six log entries each.
    assert_eq!(r.scene.iterations.len(), 12);
}

#[test]
fn export_writes_one_file_per_person_and_a_scene() {
    let w = Work::new(2);
    ok(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json"), "--iters", "20"]);
    let t = SkeletonTemplate::builtin();
    for format in ["obj", "ply"] {
        let out = w.arg(format);
        ok(&["export", "--result", &w.arg("r.json"), "--format", format, "--out", &out]);
        let mut names: Vec<String> =
            fs::read_dir(&out).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
        names.sort();
        assert_eq!(names, vec![format!("person_0.{format}"), format!("person_1.{format}"), format!("scene.{format}")]);
        if format == "obj" {
            for n in &names[..2] {
                let v = io::obj_vertices(&fs::read_to_string(Path::new(&out).join(n)).unwrap()).unwrap();
                assert_eq!(v.len(), t.point_count());
            }
            let all = io::obj_vertices(&fs::read_to_string(Path::new(&out).join("scene.obj")).unwrap()).unwrap();
            assert_eq!(all.len(), 2 * t.point_count() + 4);
        }
    }
}

#[test]
fn eval_reports_metrics() {
    let w = Work::new(2);
    ok(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json"), "--iters", "10"]);
    let out = ok(&["eval", "--result", &w.arg("r.json"), "--scene", &w.arg("scene.json")]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let oks = v["mean_oks"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&oks));
    assert_eq!(v["persons"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_input_fails_with_a_diagnostic() {
    let w = Work::new(1);
    let out = crowdfit(&["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json"), "--bogus"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let text = fs::read_to_string(w.path("scene.json")).unwrap().replacen("\"score\"", "\"scor\"", 1);
    fs::write(w.path("bad.json"), text).unwrap();
    let out = crowdfit(&["fit", "--scene", &w.arg("bad.json"), "--out", &w.arg("r.json")]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scor") && err.contains("line"), "{err}");

    let out = crowdfit(&["fit", "--scene", &w.arg("missing.json"), "--out", &w.arg("r.json")]);
    assert!(!out.status.success());
}

#[test]
fn template_can_be_overridden() {
    let w = Work::new(1);
    let out = Command::new(env!("CARGO_BIN_EXE_crowdfit"))
        .env(io::TEMPLATE_ENV, w.path("nope.json"))
        .args(["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("template"));

    let t = SkeletonTemplate::builtin();
    fs::write(w.path("t.json"), serde_json::to_string(&t).unwrap()).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_crowdfit"))
        .env(io::TEMPLATE_ENV, w.path("t.json"))
        .args(["fit", "--scene", &w.arg("scene.json"), "--out", &w.arg("r.json"), "--iters", "3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
