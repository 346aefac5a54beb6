use std::path::Path;
use std::process::{Command, Output};

const START: i64 = 1_577_836_800;

fn gafrl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gafrl"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gafrl(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Market CSV, tiny classifier and a run config in `dir`.
fn workspace(dir: &Path) {
    ok(dir, &["gen-market", "--bars", "450", "--out", "saw.csv"]);
    ok(dir, &["gen-corpus", "--total", "90", "--seed", "1", "--out", "corpus.csv"]);
    ok(dir, &["train-cnn", "--corpus", "corpus.csv", "--epochs", "1", "--out", "cnn.json"]);
    let cfg = format!(
        "data = saw.csv\nclassifier = cnn.json\nasset = saw\nseed = 2\nepisodes = 4\nupdate_timestep = 256\n\
         train_to = {}\neval_from = {}\n",
        START + 299 * 900,
        START + 300 * 900
    );
    std::fs::write(dir.join("run.cfg"), cfg).unwrap();
}

fn error_json(out: &Output) -> String {
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "expected one error line, got {stderr:?}");
    lines[0].to_string()
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let agent = format!("{run}/agent.json");
        let report = format!("{run}/report");
        ok(d, &["train-agent", "--config", "run.cfg", "--out", &agent, "--log", &format!("{run}/log.csv")]);
        let printed = ok(d, &["backtest", "--config", "run.cfg", "--agent", &agent, "--out", &report]);
        assert!(printed.contains("total_return_pct="));
        let files: Vec<Vec<u8>> = ["report.csv", "equity.csv", "trades.csv", "equity.svg"]
            .iter()
            .map(|f| std::fs::read(d.join(&report).join(f)).unwrap())
            .collect();
        reports.push((files, std::fs::read(d.join(&agent)).unwrap()));
    }
    assert!(reports[0] == reports[1]);
    assert!(d.join("a/agent.json.meta").exists());
    assert_eq!(ok(d, &["report", "--dir", "a/report"]), ok(d, &["report", "--dir", "b/report"]));
}

#[test]
fn mode_key_dispatches_and_transfer_tags_target() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    ok(d, &["gen-market", "--bars", "200", "--seed", "3", "--set", "base=60", "--set", "noise=0.002", "--out", "b.csv"]);
    ok(d, &["run", "--config", "run.cfg", "--set", "mode=train-agent", "--set", "agent=agent.json"]);
    let printed = ok(
        d,
        &["transfer-eval", "--config", "run.cfg", "--agent", "agent.json", "--target", "b.csv", "--target-asset", "B", "--set", "eval_from=0", "--out", "t"],
    );
    assert!(printed.contains("source_asset=saw"));
    assert!(printed.contains("target_asset=B"));
}

#[test]
fn overlapping_ranges_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    ok(d, &["train-agent", "--config", "run.cfg", "--out", "agent.json"]);
    let out = gafrl(d, &["backtest", "--config", "run.cfg", "--agent", "agent.json", "--set", "eval_from=0", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out).starts_with(r#"{"error":"overlap","#));
    assert!(!d.join("r/report.csv").exists());
}

#[test]
fn missing_input_and_bad_usage_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = gafrl(d, &["backtest", "--data", "nope.csv", "--classifier", "nope.json", "--agent", "a.json", "--out", "r"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out).contains(r#""error":"config""#));

    let out = gafrl(d, &["train-cnn", "--config", "missing.cfg"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out).contains(r#""error":"config""#));

    let out = gafrl(d, &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_json(&out).contains(r#""error":"usage""#));

    std::fs::write(d.join("bad.csv"), "timestamp,open,high,low,close,volume\n1,2,1,3,2,1\n").unwrap();
    std::fs::write(d.join("cnn.json"), "{}").unwrap();
    let out = gafrl(d, &["encode", "--data", "bad.csv", "--out", "e"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(error_json(&out).contains(r#""error":"market_data""#));
}

#[test]
fn encode_writes_channels_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-market", "--bars", "40", "--out", "saw.csv"]);
    let printed = ok(d, &["encode", "--data", "saw.csv", "--start", "5", "--out", "enc"]);
    assert!(printed.starts_with("window_start=5 "));
    for channel in ["open", "high", "low", "close"] {
        let text = std::fs::read_to_string(d.join(format!("enc/gaf_{channel}.csv"))).unwrap();
        let m: Vec<Vec<f64>> = text.lines().map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
        assert_eq!(m.len(), 10);
        for i in 0..10 {
            assert_eq!(m[i].len(), 10);
            for j in 0..10 {
                assert_eq!(m[i][j], m[j][i]);
                assert!((-1.0..=1.0).contains(&m[i][j]));
            }
        }
    }
    let png = image::open(d.join("enc/gaf.png")).unwrap();
    assert_eq!((png.width(), png.height()), (2 * 160 + 2, 2 * 160 + 2));
}

#[test]
fn classify_emits_one_row_per_window() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    workspace(d);
    let text = ok(d, &["classify", "--data", "saw.csv", "--classifier", "cnn.json"]);
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("window_start,timestamp,rule,predicted,p_bullish_engulfing"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 440);
    for row in rows {
        let p: f64 = row.split(',').skip(4).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((p - 1.0).abs() < 1e-9);
    }
}
