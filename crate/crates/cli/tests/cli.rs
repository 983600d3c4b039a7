use std::path::Path;
use std::process::{Command, Output};

use flashsvd_core::memtier::{expected_bytes, Formula};
use flashsvd_core::Geometry;

fn flashsvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flashsvd"))
        .args(args)
        .env("FLASHSVD_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: [&str; 6] = ["--d-model", "64", "--d-ff", "256", "--heads", "4"];

#[test]
fn plan_prints_reference_thresholds_and_speedup() {
    let o = flashsvd(&["plan", "--rank", "96", "--groups", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("768/13 = 59.08"), "{text}");
    assert!(text.contains("384 = 384.00"));
    assert!(text.contains("= 7.805"));
}

#[test]
fn plan_rejects_zero_bandwidth() {
    assert_eq!(flashsvd(&["plan", "--beta", "0"]).status.code(), Some(2));
}

#[test]
fn plan_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("plan.json");
    let o = flashsvd(&["plan", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["compresses"], serde_json::json!(false));
}

#[test]
fn verify_passes_and_filters() {
    let o = flashsvd(&["verify", "--suite", "attn", "--cases", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text
        .lines()
        .filter(|l| l.starts_with("PASS"))
        .all(|l| l.starts_with("PASS attn:")));
    assert!(!text.contains("FAIL"));
}

#[test]
fn verify_everything_passes() {
    let o = flashsvd(&["verify", "--cases", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn injected_off_by_one_fails_meter_suite() {
    let o = flashsvd(&["verify", "--suite", "meter", "--inject-off-by-one", "dense_attn"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let failed: Vec<_> = text.lines().filter(|l| l.starts_with("FAIL")).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].contains("dense_attn"));
}

#[test]
fn unknown_suite_is_config_error() {
    assert_eq!(flashsvd(&["verify", "--suite", "nope"]).status.code(), Some(2));
}

#[test]
fn compress_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.fsvd");
    let out_s = out.to_str().unwrap();
    let mut args = vec!["compress", "--rank", "8", "--layers", "2", "--out", out_s];
    args.extend(SMALL);
    let o = flashsvd(&args);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("compresses: yes"), "{text}");
    let layers = flashsvd_core::format::load_model(&out).unwrap();
    assert_eq!(layers.len(), 2);
    assert!(layers.iter().all(|l| l.is_factored()));
    assert!(Path::new(&format!("{out_s}.json")).exists());

    let mut again = vec!["compress", "--rank", "8", "--layers", "2", "--out", out_s];
    again.extend(SMALL);
    flashsvd(&again);
    assert_eq!(
        std::fs::read(&out).unwrap(),
        flashsvd_core::format::encode_model(&layers).unwrap()
    );

    assert_eq!(flashsvd(&["compress", "--rank", "0"]).status.code(), Some(2));
    assert_eq!(
        flashsvd(&["compress", "--input", out_s, "--rank", "4"]).status.code(),
        Some(2)
    );
    let missing = dir.path().join("absent.fsvd");
    assert_eq!(
        flashsvd(&["compress", "--input", missing.to_str().unwrap(), "--rank", "4"])
            .status
            .code(),
        Some(3)
    );
}

#[test]
fn compress_verdict_above_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.fsvd");
    let mut args = vec!["compress", "--rank", "16", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    let text = stdout(&flashsvd(&args));
    assert!(text.contains("compresses: no"), "{text}");
}

#[test]
fn compress_from_dense_file() {
    let dir = tempfile::tempdir().unwrap();
    let dense = dir.path().join("dense.fsvd");
    let spec = flashsvd_core::synth::SynthSpec::new(1, 32, 64, 2);
    flashsvd_core::format::save_model(&dense, &flashsvd_core::synth::synth_dense_model(1, spec).unwrap()).unwrap();
    let out = dir.path().join("low.fsvd");
    let o = flashsvd(&[
        "compress",
        "--input",
        dense.to_str().unwrap(),
        "--rank",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("heads 2, groups 2"));
}

fn bench_rows(extra: &[&str]) -> Vec<csv::StringRecord> {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("b.csv");
    let mut args = vec!["bench", "--reps", "1", "--out", out.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    let o = flashsvd(&args);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let mut r = csv::Reader::from_path(&out).unwrap();
    assert_eq!(
        r.headers().unwrap().iter().collect::<Vec<_>>(),
        [
            "b",
            "m",
            "h",
            "d_model",
            "d_ff",
            "rank",
            "mode",
            "peak_transient_bytes",
            "persistent_bytes",
            "flops_exact",
            "io_bytes_in",
            "wall_ms",
            "max_abs_err_vs_dense"
        ]
    );
    r.records().map(Result::unwrap).collect()
}

#[test]
fn bench_grid_rows_and_columns() {
    let rows = bench_rows(&["--batch", "1,2", "--seqlen", "16,33", "--rank", "4,16"]);
    assert_eq!(rows.len(), 2 * 2 * 2 * 4);
    for row in &rows {
        let num = |i: usize| row[i].parse::<u64>().unwrap();
        let g = Geometry::multi_head(num(0) as usize, num(1) as usize, 64, 256, 4, num(5) as usize);
        let err: f64 = row[12].parse().unwrap();
        if row[6].starts_with("flash") {
            assert_eq!(num(7), expected_bytes(Formula::FlashSvdAttn, &g));
            assert!(err <= 1e-4);
        }
        if &row[6] == "dense" {
            assert_eq!(err, 0.0);
        }
    }
}

#[test]
fn bench_numeric_columns_are_reproducible() {
    let strip = |rows: Vec<csv::StringRecord>| -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .filter(|(i, _)| *i != 11)
                    .map(|(_, v)| v.to_string())
                    .collect()
            })
            .collect()
    };
    let args = ["--batch", "2", "--seqlen", "9", "--rank", "5", "--seed", "3"];
    assert_eq!(strip(bench_rows(&args)), strip(bench_rows(&args)));
}

#[test]
fn bench_io_error_exit_code() {
    let mut args = vec!["bench", "--rank", "4", "--out", "/nonexistent-dir/x.csv"];
    args.extend(SMALL);
    assert_eq!(flashsvd(&args).status.code(), Some(3));
}

#[test]
fn config_file_supplies_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "d_model = 64\nd_ff = 256\nheads = 4\nrank = 4\nbatch = 1\nseqlen = 8\nmode = [\"flash-v2\"]\nreps = 1\n",
    )
    .unwrap();
    let o = flashsvd(&["bench", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 2);
    assert!(text.contains(",flash-v2,"));
    std::fs::write(&cfg, "d_model = \"wide\"\n").unwrap();
    assert_eq!(
        flashsvd(&["plan", "--config", cfg.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn bad_flag_values_exit_2() {
    assert_eq!(flashsvd(&["plan", "--mode", "turbo"]).status.code(), Some(2));
    assert_eq!(flashsvd(&["plan", "--heads", "5"]).status.code(), Some(2));
    assert_eq!(flashsvd(&["plan", "--tile-bm", "0"]).status.code(), Some(2));
    assert_eq!(flashsvd(&["plan", "--batch", "1,2"]).status.code(), Some(2));
}
