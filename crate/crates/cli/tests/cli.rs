use std::path::Path;
use std::process::{Command, Output};

use cashgof::dataset::BinnedDataset;
use cashgof::report::AnalysisReport;

fn cashgof(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cashgof"))
        .args(args)
        .current_dir(dir)
        .env_remove("CASHGOF_TABLE")
        .output()
        .expect("spawn cashgof")
}

fn diagnostic(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("diagnostic on stderr");
    serde_json::from_str(line).expect("JSON diagnostic")
}

const PL: &str = r#"{"model":"powerlaw","params":{"K":60.0,"Gamma":0.5}}"#;

fn simulated(dir: &Path) {
    let out = cashgof(
        dir,
        &[
            "simulate", "--bins", "200", "--model", PL, "--seed", "1", "--out", "d.csv",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn simulate_then_fit_recovers_the_truth() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let out = cashgof(
        dir.path(),
        &["fit", "--data", "d.csv", "--model", r#"{"model":"powerlaw"}"#],
    );
    assert!(out.status.success());
    let r = AnalysisReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    let cov = r.fit.fisher.clone().try_inverse().unwrap();
    for (k, truth) in [60.0, 0.5].iter().enumerate() {
        assert!((r.fit.theta()[k] - truth).abs() < 4.0 * cov[(k, k)].sqrt());
    }
    assert!(r.gof.is_empty());
    assert_eq!(r.table_checksum, None);
}

#[test]
fn gof_report_has_one_result_per_method() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let args = [
        "gof",
        "--data",
        "d.csv",
        "--model",
        PL,
        "--method",
        "lr-chi2,corrected-z-high,bootstrap",
        "--B",
        "40",
        "--seed",
        "3",
    ];
    let out = cashgof(dir.path(), &args);
    assert!(out.status.success());
    let r = AnalysisReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    let labels: Vec<&str> = r.gof.iter().map(|g| g.algorithm.label()).collect();
    assert_eq!(labels, ["lr-chi2", "corrected-z-high", "bootstrap"]);
    assert_eq!(r.config.seed, Some(3));
    assert_eq!(r.config.b, Some(40));

    let mut csv_args = args.to_vec();
    csv_args.extend(["--format", "csv"]);
    let out = cashgof(dir.path(), &csv_args);
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "spectrum,statistic,lr-chi2,corrected-z-high,bootstrap");
    assert!(lines[1].starts_with("d,"));
    assert_eq!(lines.len(), 2);
}

#[test]
fn table_verify_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let out = cashgof(p, &["table", "build", "--out", "t.bin", "--rows", "3000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cashgof(p, &["table", "verify", "t.bin"]).status.success());

    let mut bytes = std::fs::read(p.join("t.bin")).unwrap();
    bytes[1000] ^= 0x10;
    std::fs::write(p.join("bad.bin"), bytes).unwrap();
    let out = cashgof(p, &["table", "verify", "bad.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(diagnostic(&out)["code"], "E_CHECKSUM");
}

#[test]
fn table_checksum_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulated(p);
    let out = cashgof(p, &["table", "build", "--out", "t.bin", "--rows", "3000"]);
    let built: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let out = cashgof(p, &["gof", "--data", "d.csv", "--model", PL, "--table", "t.bin"]);
    assert!(out.status.success());
    let r = AnalysisReport::from_json(std::str::from_utf8(&out.stdout).unwrap()).unwrap();
    assert_eq!(r.table_checksum.as_deref(), built["checksum"].as_str());
}

#[test]
fn validation_failures_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulated(p);
    let cases: [(&[&str], &str); 5] = [
        (
            &["gof", "--data", "d.csv", "--model", PL, "--method", "bootstrap"],
            "E_SEED_REQUIRED",
        ),
        (&["fit", "--data", "missing.csv", "--model", PL], "E_IO"),
        (
            &["fit", "--data", "d.csv", "--model", r#"{"model":"powerlaw","extra":1}"#],
            "E_SCHEMA",
        ),
        (
            &["gof", "--data", "d.csv", "--model", PL, "--method", "nonsense"],
            "E_SCHEMA",
        ),
        (
            &[
                "fit",
                "--data",
                "d.csv",
                "--model",
                r#"{"model":"constant","params":{"K":1.0}}"#,
            ],
            "E_INCOMPATIBLE",
        ),
    ];
    for (args, code) in cases {
        let out = cashgof(p, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(diagnostic(&out)["code"], code, "{args:?}");
    }
}

#[test]
fn failures_leave_no_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulated(p);
    let out = cashgof(
        p,
        &[
            "gof",
            "--data",
            "d.csv",
            "--model",
            PL,
            "--method",
            "bootstrap",
            "--out",
            "r.json",
        ],
    );
    assert!(!out.status.success());
    assert!(!p.join("r.json").exists());
    let leftovers: Vec<_> = std::fs::read_dir(p)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().contains(".tmp"))
        .collect();
    assert!(leftovers.is_empty());
}

#[test]
fn segments_conserve_counts() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    simulated(p);
    let out = cashgof(
        p,
        &["segment", "--data", "d.csv", "--k", "2", "--seed", "4", "--out", "seg"],
    );
    assert!(out.status.success());
    let whole = BinnedDataset::read_csv(p.join("d.csv")).unwrap();
    let a = BinnedDataset::read_csv(p.join("seg/segment_01.csv")).unwrap();
    let b = BinnedDataset::read_csv(p.join("seg/segment_02.csv")).unwrap();
    for i in 0..whole.len() {
        assert_eq!(a.counts()[i] + b.counts()[i], whole.counts()[i]);
    }
    assert_eq!(a.exposure(), 0.5 * whole.exposure());
}

#[test]
fn folded_fit_reads_response_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let n = 30;
    let edges = cashgof::dataset::unit_grid_edges(n);
    let resp = cashgof::response::InstrumentResponse::tridiagonal(&edges).unwrap();
    resp.write_csv(p.join("rmf.csv"), p.join("arf.csv")).unwrap();
    let model = r#"{"model":"powerlaw","params":{"K":40.0,"Gamma":3.0}}"#;
    let sim = cashgof(
        p,
        &[
            "simulate", "--bins", "30", "--rmf", "rmf.csv", "--arf", "arf.csv", "--model", model, "--seed", "2",
            "--out", "d.csv",
        ],
    );
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let out = cashgof(
        p,
        &[
            "fit", "--data", "d.csv", "--rmf", "rmf.csv", "--arf", "arf.csv", "--model", model, "--format", "csv",
        ],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("parameter,value\nK,"));
    assert!(text.contains("\nGamma,") && text.contains("\nC,"));
}

#[test]
fn stochastic_commands_require_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    for args in [
        &["simulate", "--bins", "5", "--model", PL][..],
        &["calibrate", "type1-desk"][..],
        &["bench", "--n", "10"][..],
    ] {
        let out = cashgof(p, args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert_eq!(diagnostic(&out)["code"], "E_SEED_REQUIRED");
    }
}
