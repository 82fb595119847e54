use std::path::Path;

use analog_md::cli::main_with_args;
use analog_md::config::ConfigFile;
use analog_md::error::Error;
use analog_md::system::Metrics;

// a schedule small enough for a debug-speed test
const QUICK: &str = "csnr_db = 15.0\nepsilon = 0.05\nsource_points = 101\nchannel_points = 65\nmodels = 4\nrestarts = 2\nalpha = 0.6\nt_min_ratio = 1e-2\nrefine_max_rounds = 60\n";

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("analog-md").chain(args.iter().copied()))
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn metrics(dir: &Path) -> Metrics {
    Metrics::from_text(&std::fs::read_to_string(dir.join("metrics.txt")).unwrap()).unwrap()
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let out = out.to_str().unwrap();
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["opta", "--mode", "3to1"]), 1);
    let bad = write_config(tmp.path(), "bad.toml", "csnr_db = 15.0\nepsilonn = 0.1\n");
    assert_eq!(run(&["opta", "--config", &bad, "--out", out]), 1);
    // a grid far too coarse for the linear anchor is a numerical-contract failure
    let coarse = write_config(tmp.path(), "coarse.toml", "csnr_db = 15.0\nsource_points = 5\nchannel_points = 5\n");
    assert_eq!(run(&["linear", "--config", &coarse, "--out", out]), 2);
    let ok = write_config(tmp.path(), "ok.toml", "csnr_db = 15.0\nepsilon = 0.0\n");
    assert_eq!(run(&["opta", "--config", &ok, "--out", out]), 0);
    let csv = std::fs::read_to_string(tmp.path().join("o/opta.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[0], 0.0);
    assert!((row[6] - 30.272).abs() < 0.01, "{csv}");
}

#[test]
fn config_errors_carry_line_numbers() {
    let err = ConfigFile::parse("csnr_db = 15.0\nseed = 3\nrestart = 2\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
    let err = ConfigFile::parse("epsilon = \"high\"\n").unwrap_err();
    assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
}

#[test]
fn exported_mapping_reevaluates_to_the_reported_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", QUICK);
    let opt = tmp.path().join("opt");
    let ev = tmp.path().join("ev");
    assert_eq!(run(&["optimize", "--config", &cfg, "--out", opt.to_str().unwrap()]), 0);
    let mapping = opt.join("mapping.csv");
    assert_eq!(run(&["evaluate", "--config", &cfg, "--mapping", mapping.to_str().unwrap(), "--out", ev.to_str().unwrap()]), 0);
    let (a, b) = (metrics(&opt), metrics(&ev));
    // the evaluator weights powers with the configured λ, the optimizer with its searched λ
    for (x, y) in [(a.d0, b.d0), (a.d1, b.d1), (a.d2, b.d2), (a.p1, b.p1), (a.p2, b.p2), (a.snr_db, b.snr_db)] {
        assert!((x - y).abs() <= 1e-10, "{a:?} vs {b:?}");
    }
    assert!((a.with_lambda(b.lambda).j_cost - b.j_cost).abs() <= 1e-10);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", &format!("{QUICK}seed = 11\n"));
    let first = tmp.path().join("first");
    let second = tmp.path().join("second");
    assert_eq!(run(&["optimize", "--config", &cfg, "--out", first.to_str().unwrap()]), 0);
    let echoed = first.join("effective_config.toml");
    assert_eq!(run(&["optimize", "--config", echoed.to_str().unwrap(), "--out", second.to_str().unwrap()]), 0);
    for f in ["mapping.csv", "metrics.txt", "trace.csv", "run_info.toml"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn two_to_one_linear_writes_the_projection() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "csnr_db = 15.0\nmode = \"2to1\"\nsource_points = 31\nchannel_points = 61\n");
    let out = tmp.path().join("lin");
    assert_eq!(run(&["linear", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let m = metrics(&out);
    assert!((m.p1 - m.p2).abs() < 1e-12);
    assert!((m.d1 - m.d2).abs() < 1e-12);
    let mapping = std::fs::read_to_string(out.join("mapping.csv")).unwrap();
    assert!(mapping.starts_with("x1,x2,g1,g2\n"));
    assert_eq!(mapping.lines().count(), 31 * 31 + 1);
}

#[test]
fn two_to_one_bound_uses_half_bandwidth() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.toml", "csnr_db = 15.0\nmode = \"2to1\"\nepsilon = 0.0\n");
    let out = tmp.path().join("o");
    assert_eq!(run(&["opta", "--config", &cfg, "--out", out.to_str().unwrap()]), 0);
    let csv = std::fs::read_to_string(out.join("opta.csv")).unwrap();
    let row: Vec<f64> = csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    // ν = (1+P)^{-1/2}·(1+P)^{-1/2}
    let expect = 10.0 * (1.0 + 10f64.powf(1.5)).log10();
    assert!((row[6] - expect).abs() < 1e-9, "{csv}");
}
