use std::path::Path;
use std::process::{Command, Output};

fn asf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asf")).args(args).env_remove("ASF_DATA_DIR").output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// `(params, macs)` from the `total` row.
fn totals(o: &Output) -> (f64, f64) {
    let text = stdout(o);
    let line = text.lines().find(|l| l.starts_with("total")).expect("total row");
    let v: Vec<f64> = line.split_whitespace().skip(1).map(|x| x.parse().unwrap()).collect();
    (v[0], v[1])
}

#[test]
fn describe_small_is_within_reference_bands() {
    let o = asf(&["describe", "--variant", "s"]);
    assert!(o.status.success());
    let (p, m) = totals(&o);
    assert!((p / 19.3e6 - 1.0).abs() <= 0.05, "{p}");
    assert!((m / 5.5e9 - 1.0).abs() <= 0.08, "{m}");
    assert!(stdout(&o).contains("3136"));
}

#[test]
fn describe_tiny_succeeds() {
    let o = asf(&["describe", "--variant", "tiny"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("tiny/hmcb/adaptive/shortcut"));
}

#[test]
fn pcm_build_is_heavier() {
    let (hp, hm) = totals(&asf(&["describe", "--variant", "s"]));
    let (pp, pm) = totals(&asf(&["describe", "--variant", "s", "--branch", "pcm"]));
    assert!(pp > hp && pm > hm);
}

#[test]
fn describe_json_parses() {
    let o = asf(&["describe", "--variant", "tiny", "--json"]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["token_trace"].as_array().unwrap().len(), 6);
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        &["describe", "--variant", "x"][..],
        &["describe", "--shortcut", "maybe"],
        &["describe", "--branch", "hmcb-only", "--fusion", "simple"],
        &["train"],
        &["eval", "--synthetic", "4"],
        &["frobnicate"],
    ] {
        let o = asf(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(o.stdout.is_empty(), "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    assert_eq!(asf(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_leave_no_files() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("m.ckpt");
    let ck = ck.to_str().unwrap();
    // no data source
    assert_eq!(asf(&["train", "--checkpoint", ck]).status.code(), Some(1));
    // 224-pixel variant on 32-pixel images
    assert_eq!(asf(&["train", "--synthetic", "8", "--variant", "s", "--checkpoint", ck]).status.code(), Some(1));
    assert_eq!(asf(&["train", "--synthetic", "8", "--batch-size", "1", "--checkpoint", ck]).status.code(), Some(1));
    assert!(!Path::new(ck).exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn gradcheck_passes_and_catches_a_wrong_rule() {
    let o = asf(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("model/tiny"));
    let o = asf(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(2));
    let text = stdout(&o);
    let faulty = text.lines().find(|l| l.contains("faulty")).expect("faulty op reported");
    assert!(faulty.starts_with("FAIL"));
}

#[test]
fn train_eval_analyze_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (ck, log) = (p("tiny.ckpt"), p("metrics.log"));
    let o = asf(&["train", "--synthetic", "16", "--epochs", "2", "--batch-size", "8", "--checkpoint", &ck, "--log", &log]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let o = asf(&["eval", "--synthetic", "16", "--checkpoint", &ck]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let value = |key: &str| -> f64 {
        text.lines().find_map(|l| l.strip_prefix(key)).unwrap().trim().parse().unwrap()
    };
    assert!(value("top5") >= value("top1"));
    assert_eq!(asf(&["eval", "--synthetic", "16", "--checkpoint", &ck, "--ema"]).status.code(), Some(0));

    let o = asf(&["eval", "--synthetic", "16", "--checkpoint", &ck, "--variant", "tiny", "--fusion", "simple"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint holds model"));
    assert_eq!(asf(&["eval", "--synthetic", "4", "--checkpoint", &p("missing.ckpt")]).status.code(), Some(2));

    let (r1, r2) = (p("a1.tsv"), p("a2.tsv"));
    for r in [&r1, &r2] {
        let o = asf(&["analyze-alpha", "--synthetic", "12", "--checkpoint", &ck, "--report", r]);
        assert_eq!(o.status.code(), Some(0));
    }
    let report = std::fs::read(&r1).unwrap();
    assert_eq!(report, std::fs::read(&r2).unwrap());
    let text = String::from_utf8(report).unwrap();
    let rows: Vec<&str> = text.lines().skip(2).take_while(|l| !l.is_empty()).collect();
    assert_eq!(rows.len(), 6);
    for row in rows {
        let f: Vec<f64> = row.split('\t').map(|x| x.parse().unwrap()).collect();
        assert!(f[1] > 0.0 && f[1] < 1.0);
        assert_eq!(f[1] + f[2], 1.0);
    }
    assert_eq!(asf(&["analyze-alpha", "--synthetic", "4", "--checkpoint", &ck, "--depth", "7"]).status.code(), Some(1));
}
