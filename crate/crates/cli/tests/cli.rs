use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdgmm::numerics::Matrix;
use hdgmm::panel::simulate_panel;
use hdgmm::simulate::{generate_dataset, DesignSpec};

fn hdgmm() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hdgmm"))
}

fn write_matrix(path: &Path, prefix: &str, m: &Matrix) {
    let mut s = (1..=m.cols())
        .map(|j| format!("{prefix}{j}"))
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    for i in 0..m.rows() {
        s.push_str(
            &m.row(i)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

struct Files {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Files {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

fn dataset_files(n: usize) -> Files {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut spec = DesignSpec::new(1, n, 4, 8, 1, 31);
    spec.grid_size = 10;
    let s = generate_dataset(&spec, 0).unwrap();
    write_matrix(&root.join("X.csv"), "x", &s.data.x);
    write_matrix(&root.join("Z.csv"), "z", &s.data.z);
    write_matrix(&root.join("Y.csv"), "y", &Matrix::column(&s.data.y));
    Files { _dir: dir, root }
}

fn data_args(f: &Files) -> Vec<String> {
    [
        "--x",
        "X.csv",
        "--z",
        "Z.csv",
        "--y",
        "Y.csv",
        "--grid-size",
        "10",
    ]
    .iter()
    .map(|s| match *s {
        "X.csv" | "Z.csv" | "Y.csv" => f.path(s).display().to_string(),
        other => other.to_string(),
    })
    .collect()
}

fn run(args: &[String]) -> Output {
    hdgmm().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(|c| c.parse::<f64>().unwrap()).collect())
        .collect();
    (header, rows)
}

#[test]
fn infer_writes_one_row_per_coefficient() {
    let f = dataset_files(80);
    let mut args = vec!["infer".to_string()];
    args.extend(data_args(&f));
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = parse_csv(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(
        header,
        ["j", "beta_hat", "b_hat", "se", "t", "ci_lower", "ci_upper"]
    );
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r[3] > 0.0 && r[5] < r[2] && r[2] < r[6]);
    }
}

#[test]
fn csv_and_json_agree_bit_for_bit() {
    let f = dataset_files(80);
    let mut args = vec!["infer".to_string()];
    args.extend(data_args(&f));
    let csv = run(&args);
    args.extend(["--format".into(), "json".into()]);
    let json = run(&args);
    assert!(csv.status.success() && json.status.success());
    let (_, rows) = parse_csv(&String::from_utf8(csv.stdout).unwrap());
    let v: serde_json::Value = serde_json::from_slice(&json.stdout).unwrap();
    let coefs = v["coefficients"].as_array().unwrap();
    for (r, c) in rows.iter().zip(coefs) {
        for (k, name) in ["beta_hat", "b_hat", "se", "t", "ci_lower", "ci_upper"]
            .iter()
            .enumerate()
        {
            assert_eq!(
                r[k + 1].to_bits(),
                c[name].as_f64().unwrap().to_bits(),
                "{name}"
            );
        }
    }
}

#[test]
fn null_file_shifts_t_statistics() {
    let f = dataset_files(80);
    std::fs::write(f.path("null.csv"), "null\n1\n1\n0\n0\n").unwrap();
    let mut args = vec!["infer".to_string()];
    args.extend(data_args(&f));
    let base = run(&args);
    args.extend(["--null".into(), f.path("null.csv").display().to_string()]);
    let shifted = run(&args);
    assert!(shifted.status.success(), "{}", stderr(&shifted));
    let (_, b) = parse_csv(&String::from_utf8(base.stdout).unwrap());
    let (_, s) = parse_csv(&String::from_utf8(shifted.stdout).unwrap());
    let null = [1.0, 1.0, 0.0, 0.0];
    for j in 0..4 {
        let expected = (b[j][2] - null[j]) / b[j][3];
        assert!((s[j][4] - expected).abs() < 1e-9 * expected.abs().max(1.0));
    }
    std::fs::write(f.path("null.csv"), "null\n1\n").unwrap();
    assert_eq!(run(&args).status.code(), Some(2));
}

#[test]
fn row_count_mismatch_is_an_input_error() {
    let f = dataset_files(80);
    let text = std::fs::read_to_string(f.path("Z.csv")).unwrap();
    let trimmed: Vec<&str> = text.lines().take(71).collect();
    std::fs::write(f.path("Z.csv"), trimmed.join("\n") + "\n").unwrap();
    let mut args = vec!["fit".to_string()];
    args.extend(data_args(&f));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert!(msg.contains("80") && msg.contains("70"), "{msg}");
}

#[test]
fn malformed_cell_reports_its_line() {
    let f = dataset_files(30);
    let text = std::fs::read_to_string(f.path("X.csv")).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[4] = lines[4].replacen(|c: char| c.is_ascii_digit(), "q", 1);
    std::fs::write(f.path("X.csv"), lines.join("\n") + "\n").unwrap();
    let mut args = vec!["fit".to_string()];
    args.extend(data_args(&f));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    lines[4] = "1,2".into();
    std::fs::write(f.path("X.csv"), lines.join("\n") + "\n").unwrap();
    let o = run(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn degenerate_moments_are_a_numerical_error() {
    let f = dataset_files(40);
    std::fs::write(f.path("Y.csv"), "y\n".to_string() + &"0\n".repeat(40)).unwrap();
    let mut args = vec!["infer".to_string()];
    args.extend(data_args(&f));
    let o = run(&args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("two-step lasso-gmm"), "{}", stderr(&o));
}

fn simulate_args(dir: &Path, name: &str, extra: &[&str]) -> Vec<String> {
    let mut a: Vec<String> = [
        "simulate", "--design", "1", "--n", "150", "--p", "10", "--q", "20",
    ]
    .iter()
    .chain(["--reps", "10", "--grid-size", "10", "--seed", "12345"].iter())
    .map(|s| s.to_string())
    .collect();
    a.extend(extra.iter().map(|s| s.to_string()));
    a.extend(["--out".into(), dir.join(name).display().to_string()]);
    a
}

#[test]
fn simulate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(&simulate_args(dir.path(), "a.csv", &[]));
    let b = hdgmm()
        .args(simulate_args(dir.path(), "b.csv", &[]))
        .env("HDGMM_THREADS", "1")
        .output()
        .unwrap();
    assert!(a.status.success() && b.status.success(), "{}", stderr(&a));
    let fa = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(fa, std::fs::read(dir.path().join("b.csv")).unwrap());
    let text = String::from_utf8(fa).unwrap();
    for key in [
        "size",
        "power",
        "coverage",
        "length",
        "mse",
        "seed",
        "reps",
        "grid_size",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{key},"))),
            "{key}"
        );
    }
    assert!(stderr(&a).contains("runtime"));
}

#[test]
fn simulate_markdown_has_five_measures() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&simulate_args(
        dir.path(),
        "t.md",
        &["--format", "markdown"],
    ));
    assert!(o.status.success(), "{}", stderr(&o));
    let md = std::fs::read_to_string(dir.path().join("t.md")).unwrap();
    for m in ["Size", "Power", "Coverage", "Length", "MSE"] {
        assert_eq!(
            md.lines()
                .filter(|l| l.starts_with(&format!("| {m} |")))
                .count(),
            1,
            "{m}"
        );
    }
}

#[test]
fn simulate_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let bad_q = run(&simulate_args(
        dir.path(),
        "x.csv",
        &["--design", "3", "--q", "22"],
    ));
    assert_eq!(bad_q.status.code(), Some(2));
    let mut no_seed = simulate_args(dir.path(), "x.csv", &[]);
    let at = no_seed.iter().position(|s| s == "--seed").unwrap();
    no_seed.drain(at..at + 2);
    let o = run(&no_seed);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--seed"));
}

#[test]
fn simulate_reads_json_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("spec.json");
    std::fs::write(
        &cfg,
        r#"{"design_id": 2, "n": 60, "p": 4, "q": 8, "reps": 2, "grid_size": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("s.json");
    let o = hdgmm()
        .args(["simulate", "--seed", "9", "--format", "json", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let cov = v["summary"]["coverage"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&cov));
}

fn write_panel(path: &Path, units: usize, periods: usize, drop_last: bool) {
    let p = simulate_panel(units, periods, 0.5, &[1.0], 4).unwrap();
    let mut s = String::from("unit,period,y,x_1\n");
    for i in 0..units {
        for t in 1..=periods {
            if drop_last && i == units - 1 && t == periods {
                continue;
            }
            s.push_str(&format!("{i},{t},{},{}\n", p.y(i, t), p.x(i, t, 0)));
        }
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn panel_reports_instrument_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write_panel(&input, 20, 4, false);
    let out = dir.path().join("stacked");
    let o = hdgmm()
        .args(["panel", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("q = 15"));
    let z = std::fs::read_to_string(out.join("Z.csv")).unwrap();
    assert_eq!(z.lines().next().unwrap().split(',').count(), 15);
    assert_eq!(z.lines().count(), 1 + 20 * 2);
}

#[test]
fn panel_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    let out = dir.path().join("stacked");
    std::fs::write(
        &input,
        "unit,period,y,x_1\na,1,0.5,1\na,2,0.7,2\nb,1,0.1,3\nb,2,0.2,4\n",
    )
    .unwrap();
    let o = hdgmm()
        .args(["panel", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    write_panel(&input, 5, 4, true);
    let o = hdgmm()
        .args(["panel", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unbalanced"));
}

#[test]
fn panel_then_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write_panel(&input, 150, 4, false);
    let out = dir.path().join("stacked");
    let o = hdgmm()
        .args(["panel", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success());
    let o = hdgmm()
        .arg("infer")
        .arg("--x")
        .arg(out.join("X.csv"))
        .arg("--z")
        .arg(out.join("Z.csv"))
        .arg("--y")
        .arg(out.join("Y.csv"))
        .args(["--grid-size", "10"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("identically-zero"));
    let (_, rows) = parse_csv(&String::from_utf8(o.stdout).unwrap());
    assert_eq!(rows.len(), 2);
}

#[test]
fn stacked_files_parse_back_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("panel.csv");
    write_panel(&input, 6, 5, false);
    let out = dir.path().join("stacked");
    assert!(hdgmm()
        .args(["panel", "--input"])
        .arg(&input)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap()
        .success());
    let p = simulate_panel(6, 5, 0.5, &[1.0], 4).unwrap();
    let stacked = hdgmm::panel::panel_to_gmm(&p).unwrap();
    let (_, z) = parse_csv(&std::fs::read_to_string(out.join("Z.csv")).unwrap());
    let (_, y) = parse_csv(&std::fs::read_to_string(out.join("Y.csv")).unwrap());
    for (i, row) in z.iter().enumerate() {
        assert_eq!(row.as_slice(), stacked.z.row(i));
    }
    assert_eq!(y.iter().map(|r| r[0]).collect::<Vec<_>>(), stacked.y);
}
