use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use latentgeo::io::{load_embeddings, load_measure, load_meaning, save_embeddings, save_field, AnyField};
use latentgeo::{EmbeddingSet, GridSpec, MeasureField, TransformField};
use serde_json::Value;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn run(dir: &Path, args: &[&str]) -> Run {
    let out: Output = Command::new(env!("CARGO_BIN_EXE_latentgeo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    Run {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8(out.stdout).unwrap(),
        stderr: String::from_utf8(out.stderr).unwrap(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let r = run(dir, args);
    assert_eq!(r.code, 0, "{args:?} failed: {}", r.stderr);
    r.stdout
}

fn json(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

fn unit() -> GridSpec<f64> {
    GridSpec::new([0.0, 0.0], [1.0, 1.0], [16, 16]).unwrap()
}

fn write_identity(dir: &Path) -> PathBuf {
    let p = dir.join("id.lcf");
    save_field(&p, &AnyField::from(TransformField::identity(unit()))).unwrap();
    p
}

fn write_points(dir: &Path, name: &str, pts: Vec<[f64; 2]>, labels: Option<Vec<String>>) -> PathBuf {
    let p = dir.join(name);
    save_embeddings(&p, &EmbeddingSet::new(pts, labels).unwrap()).unwrap();
    p
}

#[test]
fn identity_meaning_gives_unit_measure() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["fixtures", "analytic", "--map", "identity", "--grid", "12", "10", "--bounds", "-1", "1", "-2", "0.5", "-o", "h.lcf"]);
    ok(dir, &["measure", "h.lcf", "-o", "m.lcf"]);
    let m = load_measure::<f64>(dir.join("m.lcf")).unwrap();
    assert!(m.values().iter().all(|v| (v - 1.0).abs() <= 1e-10));
}

#[test]
fn jsd_needs_distribution_field() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["fixtures", "analytic", "--map", "sine", "--grid", "8", "8", "--bounds", "0", "1", "0", "1", "-o", "h.lcf"]);
    let r = run(dir, &["measure", "h.lcf", "--kind", "jsd", "-o", "m.lcf"]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(!dir.join("m.lcf").exists());
}

#[test]
fn zero_blur_is_no_blur() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["fixtures", "analytic", "--map", "parabola", "--grid", "9", "9", "--bounds", "0", "1", "0", "1", "-o", "h.lcf"]);
    ok(dir, &["measure", "h.lcf", "-o", "a.lcf"]);
    ok(dir, &["measure", "h.lcf", "--blur", "0", "-o", "b.lcf"]);
    assert_eq!(std::fs::read(dir.join("a.lcf")).unwrap(), std::fs::read(dir.join("b.lcf")).unwrap());
    // relaxation needs embeddings
    assert_eq!(run(dir, &["measure", "h.lcf", "--relax", "0.1", "-o", "c.lcf"]).code, 2);
}

#[test]
fn transform_reports_diagnostics() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    save_field(dir.join("u.lcf"), &AnyField::from(MeasureField::constant(unit(), 1.0).unwrap())).unwrap();
    let r = json(&ok(dir, &["transform", "u.lcf", "-o", "t.lcf"]));
    assert!(r["diagnostics"]["max_displacement"].as_f64().unwrap() < 1e-3);

    ok(dir, &["fixtures", "bump", "--grid", "48", "48", "--bounds", "0", "1", "0", "1", "-o", "b.lcf"]);
    let r = json(&ok(dir, &["transform", "b.lcf", "-o", "t.lcf"]));
    assert!(r["cv_reduction"].as_f64().unwrap() >= 10.0, "{r}");
    for key in ["cv_before", "cv_after", "area_ratio", "diagnostics"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }

    save_field(dir.join("z.lcf"), &AnyField::from(MeasureField::constant(unit(), 0.0).unwrap())).unwrap();
    let r = run(dir, &["transform", "z.lcf", "-o", "t2.lcf"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("error"));
}

#[test]
fn apply_roundtrips_and_names_bad_rows() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write_identity(dir);
    let pts = vec![[0.3, 0.4], [0.5, 0.5], [0.71, 0.2]];
    write_points(dir, "e.csv", pts.clone(), Some(vec!["a".into(), "b".into(), "a".into()]));
    ok(dir, &["apply", "id.lcf", "e.csv", "-o", "f.csv"]);
    assert_eq!(std::fs::read(dir.join("e.csv")).unwrap(), std::fs::read(dir.join("f.csv")).unwrap());

    ok(dir, &["fixtures", "bump", "--grid", "32", "32", "--bounds", "0", "1", "0", "1", "-o", "b.lcf"]);
    ok(dir, &["transform", "b.lcf", "-o", "t.lcf"]);
    ok(dir, &["apply", "t.lcf", "e.csv", "-o", "fwd.csv"]);
    ok(dir, &["apply", "t.lcf", "fwd.csv", "--inverse", "-o", "back.csv"]);
    let back = load_embeddings::<f64>(dir.join("back.csv")).unwrap();
    let w = 1.0 / 32.0;
    for (p, q) in pts.iter().zip(back.points()) {
        assert!((p[0] - q[0]).abs() / w <= 1e-6 && (p[1] - q[1]).abs() / w <= 1e-6);
    }
    assert_eq!(back.labels(), Some(&["a".to_string(), "b".into(), "a".into()][..]));

    write_points(dir, "bad.csv", vec![[0.5, 0.5], [0.5, 0.5], [1.5, 0.5]], None);
    let r = run(dir, &["apply", "t.lcf", "bad.csv", "-o", "x.csv"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("row 2"), "{}", r.stderr);
}

#[test]
fn geodesic_output() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write_identity(dir);
    let out = ok(dir, &["geodesic", "id.lcf", "--from", "0.2,0.3", "--to", "0.8,0.6", "--points", "4"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "z1,z2,zt1,zt2,length");
    assert_eq!(lines.len(), 5);
    for (k, l) in lines[1..].iter().enumerate() {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        let s = k as f64 / 3.0;
        assert!((v[0] - (0.2 + 0.6 * s)).abs() < 1e-12 && (v[1] - (0.3 + 0.3 * s)).abs() < 1e-12);
    }
    let last: Vec<f64> = lines[4].split(',').map(|x| x.parse().unwrap()).collect();
    assert!((last[4] - (0.36f64 + 0.09).sqrt()).abs() < 1e-12);

    let out = ok(dir, &["geodesic", "id.lcf", "--from", "0.2,0.3", "--to", "0.8,0.6", "--points", "2", "-o", "p.csv"]);
    assert_eq!(out.lines().count(), 3);
    let p = load_embeddings::<f64>(dir.join("p.csv")).unwrap();
    assert_eq!(p.points(), &[[0.2, 0.3], [0.8, 0.6]]);

    assert_eq!(run(dir, &["geodesic", "id.lcf", "--from", "-0.5,0.3", "--to", "0.8,0.6"]).code, 2);
    assert_eq!(run(dir, &["geodesic", "id.lcf", "--from", "0.5", "--to", "0.8,0.6"]).code, 2);
}

#[test]
fn eval_report_is_stable() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["fixtures", "mixture", "--n-per-class", "60", "--grid-cells", "16", "--embeddings-out", "e.csv", "--measure-out", "m.lcf"]);
    let m = load_measure::<f64>(dir.join("m.lcf")).unwrap();
    save_field(dir.join("id.lcf"), &AnyField::from(TransformField::identity(*m.spec()))).unwrap();
    let args = ["eval", "--measure", "m.lcf", "--transform", "id.lcf", "--before", "e.csv", "--after", "e.csv", "--seed", "4"];
    let a = ok(dir, &args);
    assert_eq!(a, ok(dir, &args));
    let r = json(&a);
    assert_eq!(r["entropy_before"], r["entropy_after"]);
    let mut keys: Vec<&String> = r.as_object().unwrap().keys().collect();
    keys.sort();
    assert_eq!(keys, ["area_ratio", "cv_after", "cv_before", "entropy_after", "entropy_before", "f1_after", "f1_before"]);
}

#[test]
fn render_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    write_identity(dir);
    ok(dir, &["fixtures", "bump", "--grid", "16", "16", "--bounds", "0", "1", "0", "1", "-o", "b.lcf"]);
    ok(dir, &["distance", "id.lcf", "--from", "0.5,0.5", "-o", "d.lcf"]);
    write_points(dir, "e.csv", vec![[0.2, 0.2], [0.7, 0.4]], Some(vec!["x".into(), "y".into()]));
    let base = ["render", "--measure", "b.lcf", "--embeddings", "e.csv", "--distance", "d.lcf", "--contours", "0.1,0.3"];
    ok(dir, &[&base[..], &["-o", "a.svg"]].concat());
    ok(dir, &[&base[..], &["-o", "b.svg"]].concat());
    ok(dir, &[&base[..], &["--contrast", "linear", "-o", "c.svg"]].concat());
    let a = std::fs::read_to_string(dir.join("a.svg")).unwrap();
    assert_eq!(a, std::fs::read_to_string(dir.join("b.svg")).unwrap());
    let c = std::fs::read_to_string(dir.join("c.svg")).unwrap();
    let strip = |s: &str| {
        s.lines()
            .map(|l| match l.find("fill=\"#") {
                Some(k) => format!("{}{}", &l[..k], &l[k + 14..]),
                None => l.to_string(),
            })
            .collect::<Vec<_>>()
    };
    assert_ne!(a, c);
    assert_eq!(strip(&a), strip(&c));

    let r = run(dir, &["render", "--layers", "heatmap", "--embeddings", "e.csv", "-o", "n.svg"]);
    assert_eq!(r.code, 2);
    assert_eq!(run(dir, &["render", "-o", "n.svg"]).code, 2);
}

#[test]
fn classifier_field_outputs() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    let pts: Vec<[f64; 2]> = (0..40).map(|k| [if k % 2 == 0 { -1.0 } else { 1.0 } + 0.01 * k as f64, 0.05 * k as f64]).collect();
    let labels = |a: &str, b: &str| Some((0..40).map(|k| if k % 2 == 0 { a } else { b }.to_string()).collect());
    write_points(dir, "e.csv", pts.clone(), labels("l", "r"));
    write_points(dir, "f.csv", pts.clone(), labels("r", "l"));
    write_points(dir, "u.csv", pts, None);
    ok(dir, &["classifier-field", "e.csv", "--grid", "8", "8", "-o", "h.lcf"]);
    ok(dir, &["classifier-field", "f.csv", "--grid", "8", "8", "-o", "g.lcf"]);
    let h = load_meaning::<f64>(dir.join("h.lcf")).unwrap();
    let g = load_meaning::<f64>(dir.join("g.lcf")).unwrap();
    assert!(h.is_distribution());
    for i in 0..8 {
        for j in 0..8 {
            assert!((h.cell(i, j).sum() - 1.0).abs() < 1e-9);
            assert!((h.cell(i, j)[0] - g.cell(i, j)[1]).abs() < 1e-9);
        }
    }
    assert_eq!(run(dir, &["classifier-field", "u.csv", "-o", "x.lcf"]).code, 2);
}

#[test]
fn thread_count_does_not_change_results() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    ok(dir, &["fixtures", "bump", "--grid", "24", "24", "--bounds", "0", "1", "0", "1", "-o", "b.lcf"]);
    let a = ok(dir, &["--threads", "1", "transform", "b.lcf", "-o", "t1.lcf"]);
    let b = ok(dir, &["--threads", "3", "transform", "b.lcf", "-o", "t3.lcf"]);
    assert_eq!(a, b);
    assert_eq!(std::fs::read(dir.join("t1.lcf")).unwrap(), std::fs::read(dir.join("t3.lcf")).unwrap());
    assert_eq!(run(dir, &["--threads", "0", "transform", "b.lcf", "-o", "t0.lcf"]).code, 2);
}

#[test]
fn corrupt_inputs_exit_with_format_errors() {
    let d = tempfile::tempdir().unwrap();
    let dir = d.path();
    std::fs::write(dir.join("bad.lcf"), b"XXXX\x02\x00\x00\x00{}").unwrap();
    let r = run(dir, &["transform", "bad.lcf", "-o", "t.lcf"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("byte 0"), "{}", r.stderr);
    std::fs::write(dir.join("bad.csv"), "z1,z2\n1,2\n3\n").unwrap();
    write_identity(dir);
    let r = run(dir, &["apply", "id.lcf", "bad.csv", "-o", "o.csv"]);
    assert_eq!(r.code, 2);
    assert!(r.stderr.contains("line 3"), "{}", r.stderr);
    assert_eq!(run(dir, &["transform", "missing.lcf", "-o", "t.lcf"]).code, 2);
    assert_eq!(run(dir, &["no-such-command"]).code, 2);
}
