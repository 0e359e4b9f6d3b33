use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use smartcampus::model::{DeviceId, Timestamp};
use smartcampus::simnet::TruthFile;
use smartcampus_cli::config::{RunConfig, Section};
use smartcampus_cli::{sections_for, SUBCOMMANDS};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smartcampus"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("synth");
    let mut args = vec!["synth", "--out", p(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&read(&dir.join("run.json"))).unwrap()
}

#[test]
fn synth_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["--devices", "10", "--seed", "7", "--days", "3"];
    let da = synth(a.path(), &args);
    let db = synth(b.path(), &args);
    for f in ["lora.csv", "sensors.csv", "truth.json", "run.json"] {
        assert_eq!(read(&da.join(f)), read(&db.join(f)), "{f} differs");
    }
    let other = tempfile::tempdir().unwrap();
    let dc = synth(other.path(), &["--devices", "10", "--seed", "8", "--days", "3"]);
    assert_ne!(read(&da.join("sensors.csv")), read(&dc.join("sensors.csv")));
}

#[test]
fn fcnt_gaps_reproduce_truth_masks() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "6", "--seed", "11", "--days", "4", "--drop-prob", "0.15"]);
    let g = dir.path().join("gaps");
    ok(&["gaps", "--in", p(&s.join("lora.csv")), "--out", p(&g)]);

    let truth = TruthFile::from_json(&String::from_utf8(read(&s.join("truth.json"))).unwrap()).unwrap();
    let expected: BTreeMap<DeviceId, Vec<Timestamp>> = truth.masks().unwrap();
    assert!(expected.values().map(Vec::len).sum::<usize>() > 0, "fixture should drop some slots");

    let csv = String::from_utf8(read(&g.join("gaps.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("deveui,slot_start,slot_end,missing_count,source"));
    let mut found: BTreeMap<DeviceId, Vec<Timestamp>> = BTreeMap::new();
    let cadence = 15 * 60_000;
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        let start = Timestamp::parse_joined(c[1]).unwrap();
        let end = Timestamp::parse_joined(c[2]).unwrap();
        let n: i64 = c[3].parse().unwrap();
        assert_eq!(end.millis() - start.millis(), n * cadence);
        assert_eq!(c[4], "fcnt");
        let slots = found.entry(c[0].parse().unwrap()).or_default();
        slots.extend((0..n).map(|i| start.offset(i * cadence)));
    }
    assert_eq!(found, expected);
}

#[test]
fn cadence_gaps_agree_with_fcnt_gaps() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "3", "--seed", "5", "--days", "2", "--drop-prob", "0.2"]);
    let (f, c) = (dir.path().join("f"), dir.path().join("c"));
    ok(&["gaps", "--in", p(&s.join("lora.csv")), "--out", p(&f)]);
    ok(&["gaps", "--method", "cadence", "--in", p(&s.join("sensors.csv")), "--out", p(&c)]);
    let strip = |d: &Path| -> Vec<String> {
        String::from_utf8(read(&d.join("gaps.csv")))
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.rsplit_once(',').unwrap().0.to_string())
            .collect()
    };
    assert_eq!(strip(&f), strip(&c));
}

#[test]
fn impute_zero_fills_exactly_the_missing_slots() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "1", "--seed", "3", "--days", "3", "--drop-prob", "0.2"]);
    let out = dir.path().join("imp");
    ok(&["impute", "--in", p(&s.join("sensors.csv")), "--strategy", "zero", "--out", p(&out)]);

    let truth = TruthFile::from_json(&String::from_utf8(read(&s.join("truth.json"))).unwrap()).unwrap();
    let missing: BTreeSet<String> =
        truth.masks().unwrap().into_values().flatten().map(|t| t.format_joined()).collect();
    assert!(!missing.is_empty());
    let observed: BTreeMap<String, f64> = String::from_utf8(read(&s.join("sensors.csv")))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[2].parse().unwrap())
        })
        .collect();

    let grid = String::from_utf8(read(&out.join("grid.csv"))).unwrap();
    let mut lines = grid.lines();
    assert_eq!(lines.next(), Some("time,deveui,field,value,imputed"));
    let mut zeros = 0;
    for line in lines {
        let c: Vec<&str> = line.split(',').collect();
        let v: f64 = c[3].parse().unwrap();
        if missing.contains(c[0]) {
            assert_eq!(v, 0.0, "{line}");
            assert_eq!(c[4], "1");
            zeros += 1;
        } else {
            assert_eq!(v, observed[c[0]], "{line}");
            assert_eq!(c[4], "0");
        }
    }
    assert_eq!(zeros, missing.len());
}

#[test]
fn impute_drop_omits_missing_slots_and_knn_auto_records_k() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "1", "--seed", "4", "--days", "2", "--drop-prob", "0.1"]);
    let (d, k) = (dir.path().join("drop"), dir.path().join("knn"));
    ok(&["impute", "--in", p(&s.join("sensors.csv")), "--strategy", "drop", "--out", p(&d)]);
    let grid = String::from_utf8(read(&d.join("grid.csv"))).unwrap();
    assert!(grid.lines().skip(1).all(|l| l.ends_with(",0")));

    ok(&["impute", "--in", p(&s.join("sensors.csv")), "--strategy", "knn:auto", "--set", "eval.k_candidates=[1,3]", "--out", p(&k)]);
    let m = manifest(&k);
    let k_star = m["summary"]["k_star"].as_u64().unwrap();
    assert!([1, 3].contains(&k_star));
    assert_eq!(m["summary"]["resolved"], format!("knn:{k_star}"));
}

#[test]
fn help_lists_every_config_key_read() {
    let defaults = serde_json::to_value(RunConfig::default()).unwrap();
    for name in SUBCOMMANDS {
        let out = ok(&[name, "--help"]);
        let help = String::from_utf8(out.stdout).unwrap();
        for sec in sections_for(name) {
            let keys: Vec<String> = match sec {
                Section::Seed => vec!["seed".into()],
                _ => defaults[sec.name()]
                    .as_object()
                    .unwrap()
                    .keys()
                    .map(|k| format!("{}.{k}", sec.name()))
                    .collect(),
            };
            for key in keys {
                assert!(help.contains(&format!("  {key} ")), "`{name} --help` does not list {key}");
            }
        }
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path());
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--out", out, "--set", "sim.nope=1"]).status.code(), Some(1));
    assert_eq!(run(&["synth", "--out", out, "--drop-prob", "1.5"]).status.code(), Some(1));
    assert_eq!(run(&["impute", "--in", "x.csv", "--strategy", "poly:4", "--out", out]).status.code(), Some(1));
    assert_eq!(run(&["gaps", "--in", "/definitely/missing.csv", "--out", out]).status.code(), Some(2));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not,a,header\n").unwrap();
    assert_eq!(run(&["gaps", "--in", p(&bad), "--out", out]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn config_precedence_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 21\n[sim]\nn_devices = 3\nstart = \"2021-03-01T00:00:00Z\"\nend = \"2021-03-02T00:00:00Z\"\n",
    )
    .unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["synth", "--config", p(&cfg), "--set", "sim.n_devices=4", "--devices", "2", "--seed", "5", "--out", p(&b)]);
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config"]["sim"]["n_devices"], 3);
    assert_eq!(ma["seeds"]["sim"], 21);
    assert_eq!(ma["config"]["sim"]["start"], "2021-03-01T00:00:00.000Z");
    assert_eq!(mb["config"]["sim"]["n_devices"], 2);
    assert_eq!(mb["seeds"]["sim"], 5);
    assert_ne!(ma["config_hash"], mb["config_hash"]);
    let outputs: Vec<&str> = ma["outputs"].as_array().unwrap().iter().map(|o| o["path"].as_str().unwrap()).collect();
    assert_eq!(outputs, ["lora.csv", "sensors.csv", "truth.json"]);
    assert_eq!(ma["outputs"][1]["sha256"], smartcampus_cli::output::sha256_hex(&read(&a.join("sensors.csv"))));
    assert_eq!(ma["inputs"].as_array().unwrap().len(), 0);
    let leftovers: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".tmp"))
        .collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn ingest_round_trips_and_reports_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "2", "--seed", "9", "--days", "1"]);
    let raw = dir.path().join("raw.csv");
    let mut text = String::from_utf8(read(&s.join("sensors.csv"))).unwrap();
    text.push_str("2020.02.30 00.00.00.000,0000000000000001,1,1,1,1,1,nan,nan,nan,nan,1\n");
    std::fs::write(&raw, text).unwrap();
    let out = dir.path().join("ing");
    ok(&["ingest", "--sensors", p(&raw), "--lora", p(&s.join("lora.csv")), "--out", p(&out)]);
    assert_eq!(read(&out.join("sensors.csv")), read(&s.join("sensors.csv")));
    assert_eq!(read(&out.join("lora.csv")), read(&s.join("lora.csv")));
    let rep: serde_json::Value = serde_json::from_slice(&read(&out.join("ingest_report.json"))).unwrap();
    assert_eq!(rep["sensors"]["rows_rejected"], 1);
    assert_eq!(rep["lora"]["rows_rejected"], 0);
}

#[test]
fn forecast_eval_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(dir.path(), &["--devices", "1", "--seed", "2", "--days", "5", "--drop-prob", "0"]);
    let out = dir.path().join("fe");
    let sensors = s.join("sensors.csv");
    let args = [
        "forecast-eval",
        "--in",
        p(&sensors),
        "--max-slots",
        "300",
        "--set",
        "forecast.window=8",
        "--set",
        "forecast.dims=[6]",
        "--set",
        "forecast.epochs=3",
        "--set",
        "eval.strategies=[\"zero\",\"linear\",\"knn:auto\"]",
        "--set",
        "eval.k_candidates=[1,5]",
        "--out",
        p(&out),
    ];
    ok(&args);
    let rmse = String::from_utf8(read(&out.join("rmse_by_strategy.csv"))).unwrap();
    let rows: Vec<&str> = rmse.lines().collect();
    assert_eq!(rows[0], "strategy,rmse");
    assert_eq!(rows.iter().skip(1).map(|r| r.split(',').next().unwrap()).collect::<Vec<_>>(), ["zero", "linear", "knn:auto"]);
    assert!(rows[1..].iter().all(|r| r.split(',').nth(1).unwrap().parse::<f64>().unwrap().is_finite()));
    let curves = String::from_utf8(read(&out.join("loss_curves.csv"))).unwrap();
    assert!(curves.starts_with("strategy,epoch,train_loss,val_loss\n"));
    let overlay = String::from_utf8(read(&out.join("forecast_overlay.csv"))).unwrap();
    assert!(overlay.starts_with("strategy,slot,truth,predicted\n"));
    assert_eq!(manifest(&out)["summary"]["slots"], 300);

    let again = dir.path().join("fe2");
    let mut args2 = args.to_vec();
    *args2.last_mut().unwrap() = p(&again);
    ok(&args2);
    for f in ["rmse_by_strategy.csv", "loss_curves.csv", "forecast_overlay.csv", "run.json"] {
        assert_eq!(read(&out.join(f)), read(&again.join(f)), "{f} differs between identical runs");
    }
}

#[test]
fn count_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let s = synth(
        dir.path(),
        &["--devices", "4", "--seed", "42", "--days", "14", "--occupancy-rooms", "2", "--set", "sim.max_occupancy=3"],
    );
    let out = dir.path().join("count");
    let sensors = s.join("sensors.csv");
    let labels = s.join("truth.json");
    let base = ["count", "--sensors", p(&sensors), "--labels", p(&labels), "--max-rows", "600"];
    let small = ["--set", "counter.hidden=[16]", "--set", "counter.epochs=3", "--set", "counter.classes=3"];

    let mut bad = base.to_vec();
    bad.extend(["--set", "counter.classes=5", "--out", p(&out)]);
    assert_eq!(run(&bad).status.code(), Some(1), "class count mismatch is a config error");
    assert!(!out.join("report.json").exists());

    let mut args = base.to_vec();
    args.extend(small);
    args.extend(["--out", p(&out)]);
    ok(&args);
    let history = String::from_utf8(read(&out.join("history.csv"))).unwrap();
    assert!(history.starts_with("epoch,train_loss,val_loss,train_acc,val_acc\n"));
    assert!(history.lines().count() >= 2);
    let rep: serde_json::Value = serde_json::from_slice(&read(&out.join("report.json"))).unwrap();
    let acc = rep["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let model: serde_json::Value = serde_json::from_slice(&read(&out.join("model.json"))).unwrap();
    assert_eq!(model["layout"], "mlp-relu-softmax");
    assert_eq!(manifest(&out)["summary"]["classes"], serde_json::json!([1, 2, 3]));

    let r = dir.path().join("report");
    let printed = ok(&["report", "--in", p(&out.join("confusion.csv")), "--out", p(&r)]);
    let table = String::from_utf8(printed.stdout).unwrap();
    assert_eq!(table.as_bytes(), read(&r.join("report.txt")));
    assert!(table.starts_with("Class"));
    let rep2: serde_json::Value = serde_json::from_slice(&read(&r.join("report.json"))).unwrap();
    assert_eq!(rep, rep2);
}
