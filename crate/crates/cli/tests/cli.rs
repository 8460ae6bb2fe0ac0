//! End-to-end checks of the `sta` binary: container round trips, generator
//! determinism, distance symmetry, bound curves and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sta() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sta"))
}

fn run(args: &[&str]) -> Output {
    sta().args(args).output().expect("spawn sta")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines.next().expect("header").split(',').map(str::to_string).collect();
    let rows = lines
        .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("column {name}"))
}

/// A tiny dataset with constant frames in sample 0, written by hand.
fn write_constant_dataset(path: &Path) {
    let (n, t, p) = (2usize, 5usize, 4usize);
    let mut data = vec![0.0f64; n * t * p];
    for tt in 0..t {
        for j in 0..p {
            data[tt * p + j] = 0.2 + 0.1 * j as f64; // sample 0: constant frames
            data[(t + tt) * p + j] = if j == tt % p { 1.0 } else { 0.05 }; // sample 1
        }
    }
    sta_cli::stsd::write(
        path,
        &sta_cli::stsd::StsdFile {
            n: n as u32,
            t: t as u32,
            p: p as u32,
            data,
            meta: Some(sta_cli::stsd::StsdMeta {
                labels: Some(vec![0, 1]),
                grid: Some([2, 2]),
                provenance: None,
            }),
        },
    )
    .unwrap();
}

#[test]
fn gen_is_byte_deterministic_and_has_published_header() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.stsd"), dir.path().join("b.stsd"));
    for p in [&a, &b] {
        let out = run(&["--seed", "11", "gen", "--output", p.to_str().unwrap()]);
        assert_success(&out);
    }
    let bytes_a = std::fs::read(&a).unwrap();
    let bytes_b = std::fs::read(&b).unwrap();
    assert_eq!(bytes_a, bytes_b);

    let file = sta_cli::stsd::read(&a).unwrap();
    assert_eq!((file.n, file.t, file.p), (100, 13, 900));
}

#[test]
fn gen_single_sample() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("one.stsd");
    let out = run(&[
        "gen",
        "--classes",
        "1",
        "--per-class",
        "1",
        "--output",
        path.to_str().unwrap(),
    ]);
    assert_success(&out);
    assert_eq!(sta_cli::stsd::read(&path).unwrap().n, 1);
}

#[test]
fn dist_self_counts_paths_and_swap_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    write_constant_dataset(&data);

    // i = j on a constant-frame series: all pairwise costs vanish, so the
    // value is -beta log D(T, T) at the resolved beta. D(5,5) = 1683.
    let out = run(&["dist", "-i", "0", "-j", "0", "--input", data.to_str().unwrap()]);
    assert_success(&out);
    let (header, rows) = parse_csv(&String::from_utf8_lossy(&out.stdout));
    let row = &rows[0];
    let sta_v: f64 = row[column(&header, "sta")].parse().unwrap();
    let beta: f64 = row[column(&header, "beta")].parse().unwrap();
    let uot_v: f64 = row[column(&header, "uot_frame")].parse().unwrap();
    let expected = -beta * 1683.0f64.ln();
    assert!((sta_v - expected).abs() <= 1e-6 * (1.0 + expected.abs()), "{sta_v} vs {expected}");
    assert!(uot_v.abs() < 1e-6, "{uot_v}");

    let fwd = run(&["dist", "-i", "0", "-j", "1", "--input", data.to_str().unwrap()]);
    let rev = run(&["dist", "-i", "1", "-j", "0", "--input", data.to_str().unwrap()]);
    assert_success(&fwd);
    assert_success(&rev);
    let (h1, r1) = parse_csv(&String::from_utf8_lossy(&fwd.stdout));
    let (_, r2) = parse_csv(&String::from_utf8_lossy(&rev.stdout));
    for name in ["sta", "uot_frame", "l2_frame", "l2_flat"] {
        let a: f64 = r1[0][column(&h1, name)].parse().unwrap();
        let b: f64 = r2[0][column(&h1, name)].parse().unwrap();
        assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{name}: {a} vs {b}");
    }
}

#[test]
fn dist_reports_resolved_beta_from_kmax() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    write_constant_dataset(&data);
    let out = run(&[
        "--kmax",
        "3",
        "dist",
        "-i",
        "0",
        "-j",
        "1",
        "--input",
        data.to_str().unwrap(),
    ]);
    assert_success(&out);
    let (header, rows) = parse_csv(&String::from_utf8_lossy(&out.stdout));
    let beta: f64 = rows[0][column(&header, "beta")].parse().unwrap();
    assert!(beta > 0.0);
}

#[test]
fn bound_rows_dominate_the_lower_bound() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bound.csv");
    let out = run(&[
        "bound",
        "--t",
        "100",
        "--t-star",
        "30",
        "--kmax-list",
        "20",
        "--shifts",
        "60",
        "--output",
        csv.to_str().unwrap(),
    ]);
    assert_success(&out);
    let text = std::fs::read_to_string(&csv).unwrap();
    let (header, rows) = parse_csv(&text);
    let (kc, gc, lc, sc) =
        (column(&header, "k"), column(&header, "gap"), column(&header, "lb"), column(&header, "saturated"));
    assert_eq!(rows.len(), 61);
    let mut first_saturated = None;
    for row in &rows {
        let k: usize = row[kc].parse().unwrap();
        let gap: f64 = row[gc].parse().unwrap();
        let lb: f64 = row[lc].parse().unwrap();
        assert!(gap >= lb - 1e-9, "k={k}: gap {gap} < lb {lb}");
        if k == 0 {
            assert_eq!(gap, 0.0);
            assert_eq!(lb, 0.0);
        }
        if first_saturated.is_none() && k > 0 && row[sc] == "1" {
            first_saturated = Some(k);
        }
    }
    // Saturation sets in near the requested k_max = 20.
    let first = first_saturated.expect("some saturated row");
    assert!((10..=40).contains(&first), "first saturated at {first}");
}

#[test]
fn forecast_clamps_prefix_in_predictions_file() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    let out = run(&[
        "--seed",
        "3",
        "gen",
        "--classes",
        "2",
        "--per-class",
        "3",
        "--t",
        "6",
        "--grid",
        "8x8",
        "--shift-max",
        "2",
        "--crop-min",
        "4",
        "--output",
        data.to_str().unwrap(),
    ]);
    assert_success(&out);
    let pred = dir.path().join("pred.stsd");
    let scores = dir.path().join("scores.csv");
    let out = run(&[
        "forecast",
        "--input",
        data.to_str().unwrap(),
        "--t0",
        "3",
        "-k",
        "2",
        "--loss",
        "flat-l2",
        "--queries",
        "0,4",
        "--output-pred",
        pred.to_str().unwrap(),
        "--output-scores",
        scores.to_str().unwrap(),
    ]);
    assert_success(&out);
    let dataset = sta_cli::stsd::read(&data).unwrap();
    let preds = sta_cli::stsd::read(&pred).unwrap();
    assert_eq!(preds.n, 2);
    let p = preds.p as usize;
    let t = preds.t as usize;
    for (slot, query) in [(0usize, 0usize), (1, 4)] {
        for tt in 0..3 {
            for j in 0..p {
                let a = preds.data[(slot * t + tt) * p + j];
                let b = dataset.data[(query * t + tt) * p + j];
                assert_eq!(a.to_bits(), b.to_bits(), "query {query} frame {tt}");
            }
        }
    }
    let (header, rows) = parse_csv(&std::fs::read_to_string(&scores).unwrap());
    assert_eq!(rows.len(), 2);
    let lc = column(&header, "l2");
    for row in &rows {
        let l2: f64 = row[lc].parse().unwrap();
        assert!(l2.is_finite() && l2 >= 0.0);
    }
}

#[test]
fn outputs_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    write_constant_dataset(&data);
    let mut outputs = Vec::new();
    for threads in ["1", "2"] {
        let csv = dir.path().join(format!("dist-{threads}.csv"));
        let out = run(&[
            "--threads",
            threads,
            "dist",
            "-i",
            "0",
            "-j",
            "1",
            "--input",
            data.to_str().unwrap(),
            "--output",
            csv.to_str().unwrap(),
        ]);
        assert_success(&out);
        outputs.push(std::fs::read(&csv).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn exit_codes_follow_the_contract() {
    // Usage: unknown flag.
    let out = run(&["dist", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(1));

    // Usage: conflicting temperature sources.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    write_constant_dataset(&data);
    let out = run(&[
        "--beta",
        "0.1",
        "--kmax",
        "5",
        "dist",
        "-i",
        "0",
        "-j",
        "1",
        "--input",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));

    // I/O: missing input file.
    let out = run(&["dist", "-i", "0", "-j", "1", "--input", "/nonexistent/x.stsd"]);
    assert_eq!(out.status.code(), Some(3));

    // Numerical: an absurd iteration cap cannot converge.
    let out = run(&[
        "--max-iter",
        "1",
        "--tol",
        "1e-12",
        "dist",
        "-i",
        "0",
        "-j",
        "1",
        "--input",
        data.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bary_euclidean_of_identical_inputs_returns_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.stsd");
    // Two identical samples.
    let (t, p) = (3usize, 4usize);
    let frame: Vec<f64> = (0..t * p).map(|i| 0.1 + i as f64 * 0.01).collect();
    let mut all = frame.clone();
    all.extend_from_slice(&frame);
    sta_cli::stsd::write(
        &data,
        &sta_cli::stsd::StsdFile {
            n: 2,
            t: t as u32,
            p: p as u32,
            data: all,
            meta: Some(sta_cli::stsd::StsdMeta {
                labels: None,
                grid: Some([2, 2]),
                provenance: None,
            }),
        },
    )
    .unwrap();
    let out_path: PathBuf = dir.path().join("bary.stsd");
    let profile = dir.path().join("profile.csv");
    let out = run(&[
        "bary",
        "--input",
        data.to_str().unwrap(),
        "--method",
        "euclidean",
        "--output",
        out_path.to_str().unwrap(),
        "--profile",
        profile.to_str().unwrap(),
    ]);
    assert_success(&out);
    let bary = sta_cli::stsd::read(&out_path).unwrap();
    assert_eq!(bary.n, 1);
    for (a, b) in bary.data.iter().zip(&frame) {
        assert!((a - b).abs() < 1e-15);
    }
    let (header, rows) = parse_csv(&std::fs::read_to_string(&profile).unwrap());
    assert_eq!(rows.len(), t);
    assert_eq!(header, vec!["t", "l2_norm"]);
}
