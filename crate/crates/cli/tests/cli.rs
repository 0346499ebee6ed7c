use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tips_core::config::RunConfig;

fn tips(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tips"))
        .args(args)
        .env("TIPS_LOG", "error")
        .output()
        .expect("run tips")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(&o));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small simulated world and a config pointing at it.
fn small_world(dir: &Path, epochs: usize) -> PathBuf {
    let cfg = dir.join("cfg.toml");
    let world = dir.join("world");
    std::fs::write(
        &cfg,
        format!(
            "seed = 3\n[data]\npath = \"{}\"\n[data.format]\ndelimiter = \"\\t\"\ncolumns = [\"user\", \"item\", \"timestamp\"]\n\
             [world]\nn_users = 60\nn_items = 40\nsteps = 20\n[model]\ndim = 8\nheads = 2\nmax_len = 10\n\
             [train]\noptimizer = \"adam\"\nlr = 0.005\nepochs = {epochs}\n",
            s(&world.join("interactions.tsv"))
        ),
    )
    .unwrap();
    ok(tips(&["simulate", "--config", s(&cfg), "--out", s(&world)]));
    cfg
}

#[test]
fn missing_config_names_the_path() {
    let o = tips(&["train", "--config", "/nonexistent/run.toml", "--out", "/tmp/never"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/run.toml"), "{}", stderr(&o));
}

#[test]
fn missing_input_names_the_path() {
    let o = tips(&["ingest", "--input", "/nonexistent/ratings.dat", "--format", "movielens"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("/nonexistent/ratings.dat"), "{}", stderr(&o));
}

#[test]
fn malformed_row_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ratings.dat");
    std::fs::write(&f, "1::10::5::100\n1::11::4::200\n1::12::4::3oo\n").unwrap();
    let o = tips(&["ingest", "--input", s(&f), "--format", "movielens"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains(&format!("{}:3:", s(&f))), "{}", stderr(&o));
}

#[test]
fn ingest_reports_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("ratings.dat");
    std::fs::write(&f, "1::10::5::100\n1::11::4::200\n2::10::3::50\n").unwrap();
    let o = ok(tips(&["ingest", "--input", s(&f), "--format", "movielens"]));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["stats"]["n_interactions"], 3);
    assert_eq!(v["stats"]["n_users"], 2);
    assert!(v["config_hash"].is_string() && v["seed"].is_u64());
}

#[test]
fn exit_codes_for_usage() {
    assert_eq!(tips(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tips(&["--help"]).status.code(), Some(0));
    assert_eq!(tips(&["train", "--config", "x.toml", "--out", "y", "--mode", "bogus"]).status.code(), Some(1));
}

#[test]
fn printed_defaults_round_trip() {
    let o = ok(tips(&["print-config"]));
    let cfg = RunConfig::from_toml(&stdout(&o)).unwrap();
    assert_eq!(cfg, RunConfig::default());
}

#[test]
fn unknown_config_keys_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "seed = 1\n[train]\nlearning_rate = 0.1\n").unwrap();
    let o = tips(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("ckpt"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn train_then_eval_is_byte_identical_and_hash_checked() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_world(dir.path(), 2);
    let ckpt = dir.path().join("ckpt");
    ok(tips(&["train", "--config", s(&cfg), "--out", s(&ckpt)]));
    let history = std::fs::read_to_string(ckpt.join("history.csv")).unwrap();
    let run = RunConfig::load(&cfg).unwrap();
    assert!(history.starts_with(&format!("# config {} seed 3\n", run.config_hash())));

    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    for out in [&a, &b] {
        ok(tips(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--oracle", s(&dir.path().join("world")), "--out", s(out)]));
    }
    let (ra, rb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ra, rb);
    let report: serde_json::Value = serde_json::from_slice(&ra).unwrap();
    assert_eq!(report["config_hash"], run.config_hash());
    assert!(report["metrics"]["HR@10"].is_f64());

    // a config with different training settings is refused
    let other = dir.path().join("other.toml");
    std::fs::write(&other, std::fs::read_to_string(&cfg).unwrap().replace("lr = 0.005", "lr = 0.004")).unwrap();
    let o = tips(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("config"), "{}", stderr(&o));
}

#[test]
fn untrained_model_has_zero_propensity_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_world(dir.path(), 0);
    let ckpt = dir.path().join("ckpt");
    ok(tips(&["train", "--config", s(&cfg), "--out", s(&ckpt)]));
    let out = dir.path().join("analysis");
    ok(tips(&["analyze", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("propensity_gap.json")).unwrap()).unwrap();
    let mean = v["learned"]["mean"].as_f64().unwrap();
    assert!(mean.abs() < 1e-9, "{mean}");
    assert!(v["users"].as_array().unwrap().len() <= 100);
    let csv = std::fs::read_to_string(out.join("propensity_gap_histogram.csv")).unwrap();
    assert!(csv.starts_with("# config "));
    assert_eq!(csv.lines().count(), 2 + 20);
}

#[test]
fn ablation_on_simulator_world_ranks_tips_first() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world");
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/simulator.toml");
    let text = std::fs::read_to_string(shipped)
        .unwrap()
        .replace("data/sim/interactions.tsv", s(&world.join("interactions.tsv")));
    let cfg = dir.path().join("simulator.toml");
    std::fs::write(&cfg, text).unwrap();
    ok(tips(&["simulate", "--config", s(&cfg), "--out", s(&world)]));
    let out = dir.path().join("ablation");
    let o = ok(tips(&["ablate", "--config", s(&cfg), "--oracle", s(&world), "--out", s(&out)]));
    let table = stdout(&o);
    assert_eq!(std::fs::read_to_string(out.join("ablation.txt")).unwrap(), table);
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("TIPS")).collect();
    assert_eq!(rows.len(), 4, "{table}");
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    let hr: Vec<(String, f64)> = v["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["mode"].as_str().unwrap().to_string(), r["metrics"]["HR@10"].as_f64().unwrap()))
        .collect();
    let tips_hr = hr.iter().find(|(m, _)| m == "tips").unwrap().1;
    assert!(hr.iter().all(|(m, h)| m == "tips" || *h < tips_hr), "{hr:?}");
}
