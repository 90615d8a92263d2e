//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails. Criteria run one after another
//! so that the timing limits see an otherwise idle machine.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use latentgeo::eval::{density_equalization, histogram_entropy, kmeans_f1, KMeansOptions};
use latentgeo::fixtures::{make_analytic_meaning, make_centered_bump, make_distorted_mixture, AnalyticMap};
use latentgeo::geometry::{pseudo_geodesic, transform_embeddings, transformed_path_length};
use latentgeo::io::{decode_embeddings, decode_field, encode_embeddings, encode_field, AnyField};
use latentgeo::{
    finite_diff_jacobian, heuristic_measure, jsd_distance, riemannian_measure, solve_transform, DiffusionParams,
    DissimilarityKind, EmbeddingSet, Error, GridSpec, MeaningField, MeasureField, TransformField,
};
use ndarray::{Array2, Array3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn single_threaded<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("pool").install(f)
}

fn within(limit: Duration, took: Duration) -> String {
    format!("{:.2} s of {} s", took.as_secs_f64(), limit.as_secs())
}

fn unit_grid(n: usize) -> GridSpec<f64> {
    GridSpec::new([0.0, 0.0], [1.0, 1.0], [n, n]).unwrap()
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn jacobian_order() -> Outcome {
    let start = Instant::now();
    let err = |n: usize| {
        let g = GridSpec::<f64>::new([-1.0, -1.0], [1.0, 1.0], [n, n]).unwrap();
        let h = make_analytic_meaning(AnalyticMap::Sine, &g);
        let mut worst = 0.0f64;
        for i in 1..n - 1 {
            for j in 1..n - 1 {
                let exact = AnalyticMap::Sine.jacobian(g.cell_center(i, j).unwrap());
                let jac = finite_diff_jacobian(&h, i, j).unwrap().jacobian;
                for (c, row) in exact.iter().enumerate() {
                    worst = worst.max((jac[[c, 0]] - row[0]).abs()).max((jac[[c, 1]] - row[1]).abs());
                }
            }
        }
        worst
    };
    let ratio = err(50) / err(100);
    let took = start.elapsed();
    check(
        (3.5..=4.5).contains(&ratio) && took < Duration::from_secs(1),
        format!("error ratio {ratio:.3} between 50 and 100 cells; {}", within(Duration::from_secs(1), took)),
    )
}

fn riemannian_oracles() -> Outcome {
    let g = GridSpec::<f64>::new([-1.0, -0.5], [1.5, 2.0], [13, 11]).unwrap();
    let id = riemannian_measure(&make_analytic_meaning(AnalyticMap::Identity, &g));
    let affine = riemannian_measure(&make_analytic_meaning(AnalyticMap::Affine, &g));
    let id_err = id.values().iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let affine_err = affine.values().iter().map(|v| (v - 6.0).abs()).fold(0.0, f64::max);
    // five cells on [0, 1] put a center at z1 = 0.5
    let g = unit_grid(5);
    let parabola = riemannian_measure(&make_analytic_meaning(AnalyticMap::Parabola, &g));
    let c = g.cell_center(2, 2).unwrap();
    let para_err = (parabola.values()[[2, 2]] - 2f64.sqrt()).abs();
    check(
        id_err <= 1e-10 && affine_err <= 1e-10 && para_err <= 1e-10 && (c[0] - 0.5).abs() < 1e-15,
        format!("max errors: identity {id_err:.1e}, affine {affine_err:.1e}, parabola {para_err:.1e}"),
    )
}

fn jsd_checks() -> Outcome {
    let ln2 = 2f64.ln();
    let hand = [
        (jsd_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), ln2.sqrt()),
        // KL terms 0.5 ln(4/3) and ln(4/3)
        (jsd_distance(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), (0.75 * (4.0f64 / 3.0).ln()).sqrt()),
        (jsd_distance(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0),
    ];
    let mut worst = hand.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let g = GridSpec::<f64>::new([0.0, 0.0], [1.0, 1.0], [6, 6]).unwrap();
    let board = Array3::from_shape_fn((6, 6, 2), |(i, j, c)| if (i + j + c) % 2 == 0 { 1.0 } else { 0.0 });
    let m = heuristic_measure(&MeaningField::new(g, board, true).unwrap(), DissimilarityKind::Jsd).unwrap();
    worst = worst.max((m.values()[[3, 3]] - ln2.sqrt()).abs());

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut violations = 0;
    for _ in 0..10_000 {
        let d = rng.random_range(1..=16usize);
        let mut draw = || {
            let mut v: Vec<f64> = (0..d)
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { rng.random::<f64>() })
                .collect();
            if v.iter().all(|&x| x == 0.0) {
                v[0] = 1.0;
            }
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let (p, q, r) = (draw(), draw(), draw());
        let pq = jsd_distance(&p, &q).unwrap();
        let qp = jsd_distance(&q, &p).unwrap();
        let pr = jsd_distance(&p, &r).unwrap();
        let qr = jsd_distance(&q, &r).unwrap();
        let pp = jsd_distance(&p, &p).unwrap();
        if (pq - qp).abs() > 1e-12 || pp > 1e-7 || pr > pq + qr + 1e-12 || pq > ln2.sqrt() + 1e-12 {
            violations += 1;
        }
    }
    check(
        worst <= 1e-9 && violations == 0,
        format!("hand values within {worst:.1e}; {violations} metric violations in 10000 triples"),
    )
}

struct BumpRun {
    transform: TransformField<f64>,
}

fn bump_equalization(out: &mut Option<BumpRun>) -> Outcome {
    let limit = Duration::from_secs(60);
    let m = make_centered_bump(&unit_grid(128), 0.1, 5.0).unwrap();
    let start = Instant::now();
    let t = single_threaded(|| solve_transform(&m, &DiffusionParams::default()));
    let took = start.elapsed();
    let t = t.map_err(|e| format!("solve failed: {e}"))?;
    let eq = density_equalization(&m, &t, 1e-8).unwrap();
    let inverted = t.inverted_quads();
    let detail = format!(
        "CV {:.4} -> {:.5} ({:.4}x), area ratio {:.5}, {inverted} inverted quads; {}",
        eq.cv_before,
        eq.cv_after,
        eq.cv_after / eq.cv_before,
        eq.area_ratio,
        within(limit, took)
    );
    let ok = eq.cv_after <= 0.1 * eq.cv_before && (eq.area_ratio - 1.0).abs() <= 0.01 && inverted == 0 && took < limit;
    *out = Some(BumpRun { transform: t });
    check(ok, detail)
}

fn uniform_identity() -> Outcome {
    let limit = Duration::from_secs(30);
    let m = MeasureField::constant(unit_grid(128), 1.0).unwrap();
    let start = Instant::now();
    let t = single_threaded(|| solve_transform(&m, &DiffusionParams::default())).map_err(|e| e.to_string())?;
    let took = start.elapsed();
    let moved = t.max_displacement_cells();
    check(
        moved < 1e-3 && took < limit,
        format!("max displacement {moved:.2e} cells; {}", within(limit, took)),
    )
}

fn roundtrip(bump: &Option<BumpRun>) -> Outcome {
    let t = &bump.as_ref().ok_or("no bump transform")?.transform;
    let w = t.spec().min_cell_width();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z = [rng.random_range(w..1.0 - w), rng.random_range(w..1.0 - w)];
        let back = t.inverse_map(t.forward_map(z).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        worst = worst.max(dist(z, back) / w);
    }
    check(worst <= 1e-6, format!("worst roundtrip error {worst:.2e} cells over 1000 points"))
}

fn full_scale() -> Outcome {
    let limit = Duration::from_secs(600);
    let g = unit_grid(800);
    let start = Instant::now();
    let threads = rayon::current_num_threads();
    let meaning = make_analytic_meaning(AnalyticMap::Sine, &g);
    let rm = riemannian_measure(&meaning);
    let m = make_centered_bump(&g, 0.1, 5.0).unwrap();
    let t = solve_transform(&m, &DiffusionParams::default()).map_err(|e| e.to_string())?;
    let eq = density_equalization(&m, &t, 1e-8).unwrap();
    let took = start.elapsed();
    check(
        took < limit && eq.cv_after <= 0.1 * eq.cv_before && rm.values().iter().all(|v| v.is_finite()),
        format!(
            "800x800 measure + transform on {threads} thread(s), CV {:.4} -> {:.5}, {} steps; {}",
            eq.cv_before,
            eq.cv_after,
            t.diagnostics().iterations,
            within(limit, took)
        ),
    )
}

fn undistortion() -> Outcome {
    let limit = Duration::from_secs(120);
    let start = Instant::now();
    let mix = make_distorted_mixture::<f64>(500, 4, 2.0, 7).unwrap();
    let t = solve_transform(&mix.measure, &DiffusionParams::default()).map_err(|e| e.to_string())?;
    let after = transform_embeddings(&t, &mix.embeddings).map_err(|e| e.to_string())?;
    let opts = KMeansOptions::default();
    let f1_before = kmeans_f1(&mix.embeddings, opts).unwrap().f1;
    let f1_after = kmeans_f1(&after, opts).unwrap().f1;
    let h_before = histogram_entropy(&mix.embeddings, 64).unwrap();
    let h_after = histogram_entropy(&after, 64).unwrap();
    let took = start.elapsed();
    check(
        f1_after >= f1_before + 0.10 && h_after >= h_before + 0.2 && took < limit,
        format!(
            "F1 {f1_before:.3} -> {f1_after:.3}, entropy {h_before:.3} -> {h_after:.3} nats; {}",
            within(limit, took)
        ),
    )
}

fn geodesic_consistency(bump: &Option<BumpRun>) -> Outcome {
    let t = &bump.as_ref().ok_or("no bump transform")?.transform;
    let mut worst = 0.0f64;
    for (a, b) in [([0.1, 0.2], [0.9, 0.75]), ([0.3, 0.5], [0.7, 0.5]), ([0.5, 0.05], [0.52, 0.95])] {
        let p = pseudo_geodesic(t, a, b, 256).map_err(|e| e.to_string())?;
        let own = transformed_path_length(t, p.points()).map_err(|e| e.to_string())?;
        worst = worst.max((own - p.length()).abs() / p.length());
    }
    let id = TransformField::identity(unit_grid(32));
    let p = pseudo_geodesic(&id, [0.1, 0.3], [0.9, 0.5], 256).unwrap();
    let straight = p.points().iter().enumerate().all(|(k, z)| {
        let s = k as f64 / 255.0;
        dist(*z, [0.1 + 0.8 * s, 0.3 + 0.2 * s]) <= 1e-12
    });
    check(
        worst <= 1e-3 && straight,
        format!("worst relative length gap {worst:.2e} at 256 samples; identity path straight: {straight}"),
    )
}

fn random_field(rng: &mut ChaCha8Rng) -> AnyField<f64> {
    let (n1, n2) = (rng.random_range(2..12usize), rng.random_range(2..12usize));
    let lo = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
    let g = GridSpec::new(lo, [lo[0] + rng.random_range(1e-3..20.0), lo[1] + rng.random_range(1e-3..20.0)], [n1, n2])
        .unwrap();
    let value = |r: &mut ChaCha8Rng| f64::from_bits(r.random::<u64>() >> 2 | 0x3000_0000_0000_0000) - 1.0;
    match rng.random_range(0..4u8) {
        0 => AnyField::from(MeasureField::new(g, Array2::from_shape_fn((n1, n2), |_| value(rng).abs())).unwrap()),
        1 => {
            let dh = rng.random_range(1..6);
            AnyField::from(MeaningField::new(g, Array3::from_shape_fn((n1, n2, dh), |_| value(rng)), false).unwrap())
        }
        2 => {
            let dh = rng.random_range(1..6);
            let raw = Array3::from_shape_fn((n1, n2, dh), |_| rng.random::<f64>() + 1e-3);
            let mut p = raw.clone();
            for i in 0..n1 {
                for j in 0..n2 {
                    let s: f64 = raw.slice(ndarray::s![i, j, ..]).sum();
                    p.slice_mut(ndarray::s![i, j, ..]).mapv_inplace(|v| v / s);
                }
            }
            AnyField::from(MeaningField::new(g, p, true).unwrap())
        }
        _ => AnyField::from(TransformField::new(g, Array3::from_shape_fn((n1, n2, 2), |_| value(rng))).unwrap()),
    }
}

fn same_bits(a: &AnyField<f64>, b: &AnyField<f64>) -> bool {
    let bits = |f: &AnyField<f64>| -> Vec<u64> {
        match f {
            AnyField::Measure(m) => m.values().iter().map(|v| v.to_bits()).collect(),
            AnyField::Meaning(m) => m.values().iter().map(|v| v.to_bits()).collect(),
            AnyField::Transform(t) => t.positions().iter().map(|v| v.to_bits()).collect(),
        }
    };
    a.kind() == b.kind() && a.spec() == b.spec() && bits(a) == bits(b)
}

fn cli(dir: &Path, args: &[&str]) -> (i32, Vec<u8>, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_latentgeo"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs");
    (out.status.code().unwrap_or(-1), out.stdout, String::from_utf8_lossy(&out.stderr).into_owned())
}

fn format_roundtrips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut bad = 0;
    for _ in 0..100 {
        let f = random_field(&mut rng);
        let bytes = encode_field(&f).unwrap();
        if !decode_field::<f64>(&bytes).map(|b| same_bits(&b, &f)).unwrap_or(false) {
            bad += 1;
        }
        let n = rng.random_range(1..50);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [f64::from_bits(rng.random::<u64>() >> 2), -rng.random::<f64>()]).collect();
        let labels = rng.random::<bool>().then(|| (0..n).map(|k| format!("c{}", k % 3)).collect());
        let e = EmbeddingSet::new(pts, labels).unwrap();
        let back: EmbeddingSet<f64> = decode_embeddings(&encode_embeddings(&e).unwrap()).unwrap();
        let exact = back.labels() == e.labels()
            && back.points().iter().zip(e.points()).all(|(a, b)| a[0].to_bits() == b[0].to_bits() && a[1].to_bits() == b[1].to_bits());
        if !exact {
            bad += 1;
        }
    }

    let measure = encode_field(&AnyField::from(MeasureField::constant(unit_grid(3), 1.0).unwrap())).unwrap();
    let mut magic = measure.clone();
    magic[..4].copy_from_slice(b"XXXX");
    let mut nan = measure.clone();
    let at = nan.len() - 8;
    nan[at..].copy_from_slice(&f64::NAN.to_le_bytes());
    let header = br#"{"kind":"measure","shape":[2,2],"bounds":[[0,1],[0,1]]}"#;
    let mut count = b"LCF1".to_vec();
    count.extend_from_slice(&(header.len() as u32).to_le_bytes());
    count.extend_from_slice(header);
    count.extend((0..5).flat_map(|k| (k as f64).to_le_bytes()));
    let cases: Vec<(&str, Vec<u8>, String)> = vec![
        ("bad magic", magic, "byte 0".into()),
        ("truncated payload", measure[..measure.len() - 3].to_vec(), "expected 9".into()),
        ("payload count", count, "expected 4".into()),
        ("non-finite value", nan, format!("byte {at}")),
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    for (name, bytes, needle) in &cases {
        let lib_ok = matches!(decode_field::<f64>(bytes), Err(Error::Format { .. }));
        std::fs::write(dir.path().join("f.lcf"), bytes).unwrap();
        let (code, _, err) = cli(dir.path(), &["transform", "f.lcf", "-o", "t.lcf"]);
        if !lib_ok || code != 2 || !err.contains(needle.as_str()) {
            failures.push(format!("{name}: exit {code}, {}", err.trim()));
        }
    }
    std::fs::write(dir.path().join("e.csv"), "z1,z2\n0.1,0.2\n0.3,0.4,x\n").unwrap();
    save_identity(dir.path());
    let (code, _, err) = cli(dir.path(), &["apply", "id.lcf", "e.csv", "-o", "o.csv"]);
    if code != 2 || !err.contains("line 3") {
        failures.push(format!("csv arity: exit {code}, {}", err.trim()));
    }
    std::fs::write(dir.path().join("h.csv"), "z1,z2\n").unwrap();
    let (code, _, _) = cli(dir.path(), &["apply", "id.lcf", "h.csv", "-o", "o.csv"]);
    if code != 2 {
        failures.push(format!("header-only csv: exit {code}"));
    }
    check(
        bad == 0 && failures.is_empty(),
        format!(
            "{bad} of 200 roundtrips differ; {} of {} corrupted-file cases wrong{}",
            failures.len(),
            cases.len() + 2,
            if failures.is_empty() { String::new() } else { format!(": {}", failures.join("; ")) }
        ),
    )
}

fn save_identity(dir: &Path) {
    latentgeo::io::save_field(dir.join("id.lcf"), &AnyField::from(TransformField::identity(unit_grid(8)))).unwrap();
}

fn pipeline(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let steps: [&[&str]; 10] = [
        &["fixtures", "mixture", "--n-per-class", "200", "--grid-cells", "64", "--embeddings-out", "e.csv", "--measure-out", "true.lcf"],
        &["classifier-field", "e.csv", "--grid", "64", "64", "--max-iters", "2000", "-o", "h.lcf"],
        &["measure", "h.lcf", "--kind", "jsd", "--blur", "1", "--relax", "0.05", "--embeddings", "e.csv", "-o", "m.lcf"],
        &["transform", "m.lcf", "-o", "t.lcf"],
        &["apply", "t.lcf", "e.csv", "-o", "after.csv"],
        &["eval", "--measure", "m.lcf", "--transform", "t.lcf", "--before", "e.csv", "--after", "after.csv", "--seed", "3"],
        &["geodesic", "t.lcf", "--from", "-0.3,-0.2", "--to", "0.3,0.25", "--points", "40", "-o", "path.csv"],
        &["distance", "t.lcf", "--from", "-0.3,-0.2", "-o", "d.lcf"],
        &["render", "--measure", "m.lcf", "--embeddings", "e.csv", "--path", "path.csv", "--distance", "d.lcf", "--contours", "0.05,0.1,0.2", "-o", "fig.svg"],
        &["render", "--embeddings", "after.csv", "--contrast", "linear", "-o", "after.svg"],
    ];
    let mut outputs = Vec::new();
    for (k, args) in steps.iter().enumerate() {
        let (code, stdout, err) = cli(dir, args);
        if code != 0 {
            return Err(format!("{} exited {code}: {}", args[0], err.trim()));
        }
        outputs.push((format!("stdout of step {}", k + 1), stdout));
    }
    let mut names: Vec<String> =
        std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    for n in names {
        let bytes = std::fs::read(dir.join(&n)).unwrap();
        outputs.push((n, bytes));
    }
    Ok(outputs)
}

fn cli_determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let start = Instant::now();
    let ra = pipeline(a.path())?;
    let rb = pipeline(b.path())?;
    let differing: Vec<&str> = ra
        .iter()
        .zip(&rb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let files = ra.iter().filter(|(n, _)| !n.starts_with("stdout")).count();
    check(
        differing.is_empty() && ra.len() == rb.len() && ra.iter().any(|(n, _)| n == "fig.svg"),
        format!(
            "{files} files and 10 stdout streams compared over two runs ({:.1} s), differing: {differing:?}",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let mut bump = None;
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Option<BumpRun>) -> Outcome>)> = vec![
        ("Jacobian order of accuracy", Box::new(|_| jacobian_order())),
        ("Riemannian measure oracles", Box::new(|_| riemannian_oracles())),
        ("Jensen-Shannon values and metric axioms", Box::new(|_| jsd_checks())),
        ("bump equalization at 128x128", Box::new(bump_equalization)),
        ("identity on uniform density", Box::new(|_| uniform_identity())),
        ("forward/inverse roundtrip", Box::new(|b| roundtrip(b))),
        ("800x800 scale run", Box::new(|_| full_scale())),
        ("mixture un-distortion", Box::new(|_| undistortion())),
        ("pseudo-geodesic consistency", Box::new(|b| geodesic_consistency(b))),
        ("format roundtrips and corrupt files", Box::new(|_| format_roundtrips())),
        ("CLI pipeline determinism", Box::new(|_| cli_determinism())),
    ];
    let total = criteria.len();
    let mut failed = 0;
    for (k, (name, run)) in criteria.into_iter().enumerate() {
        let (tag, detail) = match run(&mut bump) {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}  {name}: {detail}", k + 1);
    }
    println!("{} of {total} criteria passed", total - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
