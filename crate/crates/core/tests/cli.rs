use std::path::Path;

use mnkit::cli::{run, ResultRecord, EXIT_INPUT, EXIT_OK, EXIT_USAGE};

fn mnkit(args: &[&str]) -> i32 {
    run(std::iter::once("mnkit").chain(args.iter().copied()))
}

fn record(path: &Path) -> ResultRecord {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn srm_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("srm.json"), r#"{"n":3,"v":20,"t":60,"k":2,"snr":2.0,"n_heldout":1}"#).unwrap();
    assert_eq!(mnkit(&["gen", "srm", "--config", &p("srm.json"), "--out-dir", &p("data"), "--format", "csv"]), EXIT_OK);
    assert_eq!(std::fs::read_dir(p("data/train")).unwrap().count(), 3);
    assert!(Path::new(&p("data/heldout/subject_000.csv")).exists());

    for variant in ["dp", "mn"] {
        let model = format!("model_{variant}");
        let fit = format!("fit_{variant}.json");
        let code = mnkit(&[
            "fit", "srm", "--data-dir", &p("data/train"), "--k", "2", "--variant", variant,
            "--model-out", &p(&model), "--out", &p(&fit),
        ]);
        assert_eq!(code, EXIT_OK);
        let eval = format!("eval_{variant}.json");
        let code = mnkit(&[
            "eval", "srm", "--model", &p(&model), "--heldout", &p("data/heldout/subject_000.csv"),
            "--out", &p(&eval),
        ]);
        assert_eq!(code, EXIT_OK);
        let err = record(Path::new(&p(&eval))).metrics["reconstruction_error"];
        assert!(err > 0.0 && err < 1.0, "{variant}: {err}");
    }
}

#[test]
fn srm_k_too_large_is_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("srm.json"), r#"{"n":2,"v":5,"t":20,"k":2}"#).unwrap();
    assert_eq!(mnkit(&["gen", "srm", "--config", &p("srm.json"), "--out-dir", &p("d")]), EXIT_OK);
    assert_eq!(mnkit(&["fit", "srm", "--data-dir", &p("d/train"), "--k", "5"]), EXIT_INPUT);
}

#[test]
fn bench_writes_one_line_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.jsonl");
    let code = mnkit(&[
        "bench", "rsa", "--voxels", "30,40", "--trs", "50", "--snrs", "1.0", "--reps", "2",
        "--conditions", "3", "--rank", "1", "--max-iters", "30", "--jobs", "2",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(code, EXIT_OK);
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<ResultRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|r| r.command == "bench rsa"));
}

#[test]
fn malformed_inputs_map_to_usage_and_input_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    std::fs::write(p("bad.csv"), "1,2\n3,oops\n").unwrap();
    std::fs::write(p("x.csv"), "1\n0\n").unwrap();
    assert_eq!(mnkit(&["fit", "rsa", "--data", &p("bad.csv"), "--design", &p("x.csv")]), EXIT_INPUT);
    assert_eq!(mnkit(&["fit", "rsa", "--data", &p("bad.csv")]), EXIT_USAGE);
    assert_eq!(mnkit(&["fit", "srm", "--data-dir", &p("bad.csv"), "--k", "two"]), EXIT_USAGE);
    assert_eq!(mnkit(&["gen", "rsa", "--config", &p("x.csv"), "--out-dir", &p("o")]), EXIT_INPUT);
}
