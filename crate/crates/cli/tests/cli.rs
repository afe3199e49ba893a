use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use mcreg_core::simlab::{draw_replication, DgpSpec, Innovation};
use mcreg_core::ReturnsPanel;

fn sample() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_panel.csv")
}

fn mcreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcreg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn write_panel(dir: &Path, name: &str, p: &ReturnsPanel) -> PathBuf {
    let path = dir.join(name);
    p.write_csv(std::fs::File::create(&path).unwrap()).unwrap();
    path
}

fn null_panel(dir: &Path) -> PathBuf {
    let spec = DgpSpec::new(8, 60, 0.0, Innovation::Normal, 5).unwrap();
    let (_, _, p) = draw_replication(&spec, 5).unwrap();
    write_panel(dir, "null.csv", &p)
}

#[test]
fn adjust_pvalues_writes_json_and_matrix() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = mcreg(&[
        "adjust-pvalues", "--input", sample().to_str().unwrap(), "--seed", "1", "--out", out.to_str().unwrap(), "-B", "100",
        "--dump-null", tmp.path().join("null.bin").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("pvalues.json"));
    assert_eq!(v["procedure"], "sd");
    assert_eq!(v["replications"], 100);
    let pairs = v["pairs"].as_array().unwrap();
    assert_eq!(pairs.len(), 45);
    for p in pairs {
        let pv = p["pvalue"].as_f64().unwrap();
        assert!(pv > 0.0 && pv <= 1.0);
        assert_eq!(p["rejected"].as_bool().unwrap(), p["numerator"].as_u64().unwrap() <= 5);
    }
    let matrix = std::fs::read_to_string(out.join("pvalue_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 11);
    assert!(matrix.starts_with("asset,A01,"));
    assert!(tmp.path().join("null.bin").metadata().unwrap().len() > 0);
    assert!(out.join("run.log").exists());
}

#[test]
fn non_integer_alpha_b_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mcreg(&[
        "adjust-pvalues", "--input", sample().to_str().unwrap(), "--seed", "1", "--out", tmp.path().to_str().unwrap(), "-B", "30",
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("1.5"));
}

#[test]
fn fdp_without_a_valid_k_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let input = null_panel(tmp.path());
    let o = mcreg(&[
        "regularize", "--input", input.to_str().unwrap(), "--procedure", "sd:fdp=0.1", "--seed", "3", "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn corrupted_csv_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "date,A,B\n2020-01-01,0.1,0.2\n2020-01-02,oops,0.1\n2020-01-03,0.0,0.3\n").unwrap();
    let o = mcreg(&["adjust-pvalues", "--input", bad.to_str().unwrap(), "--seed", "1", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("oops"));
}

#[test]
fn missing_seed_and_unknown_procedure_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let input = sample();
    let o = mcreg(&["adjust-pvalues", "--input", input.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let o = mcreg(&[
        "regularize", "--input", input.to_str().unwrap(), "--procedure", "xx", "--seed", "1", "--out", tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    let o = mcreg(&["adjust-pvalues", "--input", input.to_str().unwrap(), "--procedure", "bps:a", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn uncorrelated_input_gives_diagonal_covariance() {
    let tmp = tempfile::tempdir().unwrap();
    // mutually orthogonal columns with zero mean
    let base = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]];
    let rows: Vec<Vec<f64>> = (0..40).map(|t| base[t % 4].iter().map(|v| v * 0.01).collect()).collect();
    let stamps = (0..40).map(|t| format!("d{t:02}")).collect();
    let p = ReturnsPanel::from_rows(vec!["a".into(), "b".into(), "c".into()], stamps, &rows).unwrap();
    let input = write_panel(tmp.path(), "orth.csv", &p);
    for procedure in ["sd", "bps:b"] {
        let out = tmp.path().join(procedure.replace(':', "_"));
        let o = mcreg(&[
            "regularize", "--input", input.to_str().unwrap(), "--procedure", procedure, "--seed", "9", "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let v = json(&out.join("regularize.json"));
        assert_eq!(v["xi_star"], 0.0);
        assert_eq!(v["mask_density"], 0.0);
        let mut rdr = csv::Reader::from_path(out.join("covariance.csv")).unwrap();
        for (i, row) in rdr.records().enumerate() {
            let row = row.unwrap();
            for j in 0..3 {
                let v: f64 = row[j + 1].parse().unwrap();
                if i == j {
                    assert!((v - 1e-4).abs() < 1e-15);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
}

#[test]
fn backtest_report_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = mcreg(&[
        "backtest", "--input", sample().to_str().unwrap(), "--strategy", "ew,vt,sample,sd:k=sqrt,bps:b", "--window", "250",
        "--holding", "63", "--seed", "4", "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("report.json"));
    let strategies = v["strategies"].as_array().unwrap();
    let labels: Vec<&str> = strategies.iter().map(|s| s["strategy"].as_str().unwrap()).collect();
    assert_eq!(labels, ["EW", "VT", "Sample", "SD_k=sqrt", "BPS_b"]);
    // rows 0..800, first formation at row 249, holding 63
    let periods = (800 - 1 - 249) / 63;
    for s in strategies {
        for key in ["av", "sd", "to", "mdd", "tw"] {
            assert!(s[key].as_f64().unwrap().is_finite(), "{key}");
        }
        assert_eq!(s["n_formations"], periods);
        assert_eq!(s["n_returns"], periods * 63);
        let f = s["formations"].as_array().unwrap();
        assert_eq!(f[0]["index"], 249);
        assert!(f[0]["turnover"].is_null());
        assert!(f[1]["turnover"].as_f64().unwrap() >= 0.0);
        for w in f {
            let sum: f64 = w["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
    assert!(strategies[0]["to"].as_f64().unwrap() > 0.0);
    let net = std::fs::read_to_string(out.join("net_returns.csv")).unwrap();
    assert_eq!(net.lines().next().unwrap(), "date,EW,VT,Sample,SD_k=sqrt,BPS_b");
    assert_eq!(net.lines().count(), 1 + periods * 63);
    let sig = std::fs::read_to_string(out.join("significant_proportion.csv")).unwrap();
    assert_eq!(sig.lines().next().unwrap(), "date,SD_k=sqrt,BPS_b");
    assert_eq!(sig.lines().count(), 1 + periods);
}

#[test]
fn long_only_backtest_has_no_negative_weights() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = mcreg(&[
        "backtest", "--input", sample().to_str().unwrap(), "--strategy", "sample,ls", "--window", "126", "--no-short-sales",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(&out.join("report.json"));
    for s in v["strategies"].as_array().unwrap() {
        assert_eq!(s["short_sales"], false);
        for f in s["formations"].as_array().unwrap() {
            assert!(f["weights"].as_array().unwrap().iter().all(|w| w.as_f64().unwrap() >= 0.0));
        }
    }
}

#[test]
fn config_file_feeds_simulate_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("grid.toml");
    std::fs::write(
        &cfg,
        "N_list = [5]\nT_list = [30]\ndelta = [0.0, 0.6]\ninnovation = \"normal\"\nprocedures = [\"ss\", \"sd\", \"bps:a\"]\nR = 500\nB = 20\nseed = 11\n",
    )
    .unwrap();
    let out = tmp.path().join("o");
    let o = mcreg(&["simulate", "--config", cfg.to_str().unwrap(), "-R", "30", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let r_col = headers.iter().position(|h| h == "replications").unwrap();
    assert!(rows.iter().all(|r| &r[r_col] == "30"));
}

#[test]
fn bad_config_key_type_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    std::fs::write(&cfg, "alpha = \"high\"\n").unwrap();
    let o = mcreg(&[
        "adjust-pvalues", "--config", cfg.to_str().unwrap(), "--input", sample().to_str().unwrap(), "--seed", "1", "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn worker_count_does_not_change_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = null_panel(tmp.path());
    let mut files = Vec::new();
    for w in ["1", "3"] {
        let out = tmp.path().join(format!("w{w}"));
        let o = mcreg(&[
            "regularize", "--input", input.to_str().unwrap(), "--procedure", "ss:k=sqrt", "--seed", "8", "--workers", w, "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0);
        files.push([
            std::fs::read(out.join("covariance.csv")).unwrap(),
            std::fs::read(out.join("regularize.json")).unwrap(),
        ]);
    }
    assert_eq!(files[0], files[1]);
}
