//! `latentgeo`: file-based pipeline over the `latentgeo` library.
//!
//! Exit status is 0 on success, 2 for input, format and usage errors, and
//! 3 when a solver fails. Machine-readable reports go to stdout as JSON;
//! errors go to stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use latentgeo::eval::{
    density_equalization, equalization_report, fit_classifier_field, ClassifierOptions, KMeansOptions, ReportOptions,
};
use latentgeo::fixtures::{make_analytic_meaning, make_centered_bump, make_distorted_mixture_with, AnalyticMap, MixtureOptions};
use latentgeo::geometry::{distance_field, inverse_transform_embeddings, pseudo_geodesic, transform_embeddings};
use latentgeo::io::{
    load_embeddings, load_measure, load_meaning, load_transform, save_embeddings, save_field, AnyField,
};
use latentgeo::measures::{gaussian_blur, heuristic_measure, relax_to_mean, riemannian_measure, DissimilarityKind};
use latentgeo::render::{render_scene, Colormap, Contrast, Layer, RenderSpec, Scene};
use latentgeo::{solve_transform, DiffusionParams, EmbeddingSet64, Error, GridSpec64, Point};

#[derive(Parser)]
#[command(name = "latentgeo", version, about = "Measure and undo geometric distortion in 2-D latent spaces")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic inputs.
    #[command(subcommand)]
    Fixtures(FixtureCommand),
    /// Compute a measure field from a meaning field.
    Measure(MeasureArgs),
    /// Solve for the density-equalizing transform of a measure.
    Transform(TransformArgs),
    /// Map embeddings through a transform (or its inverse).
    Apply(ApplyArgs),
    /// Pseudo-geodesic between two latent points.
    Geodesic(GeodesicArgs),
    /// Transformed-space distance from a point, per cell.
    Distance(DistanceArgs),
    /// Entropy, clustering and equalization statistics.
    Eval(EvalArgs),
    /// Draw measures, embeddings, paths and contours as SVG.
    Render(RenderArgs),
    /// Fit class probabilities over the grid as a meaning field.
    ClassifierField(ClassifierArgs),
}

#[derive(Subcommand)]
enum FixtureCommand {
    /// Closed-form meaning field (identity, affine, parabola, sine).
    Analytic {
        #[arg(long)]
        map: String,
        #[arg(long, num_args = 2, value_names = ["N1", "N2"])]
        grid: Vec<usize>,
        #[arg(long, num_args = 4, value_names = ["MIN1", "MAX1", "MIN2", "MAX2"], allow_negative_numbers = true)]
        bounds: Vec<f64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Squashed Gaussian mixture and the measure that undoes the squash.
    Mixture {
        #[arg(long, default_value_t = 500)]
        n_per_class: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 2.0)]
        squash: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        grid_cells: usize,
        #[arg(long, default_value_t = 0.05)]
        pad: f64,
        #[arg(long)]
        embeddings_out: PathBuf,
        #[arg(long)]
        measure_out: PathBuf,
        /// Also write the points before squashing.
        #[arg(long)]
        original_out: Option<PathBuf>,
    },
    /// Unit background plus one centered Gaussian bump.
    Bump {
        #[arg(long, num_args = 2, value_names = ["N1", "N2"])]
        grid: Vec<usize>,
        #[arg(long, num_args = 4, value_names = ["MIN1", "MAX1", "MIN2", "MAX2"], allow_negative_numbers = true)]
        bounds: Vec<f64>,
        /// Bump width as a fraction of the shorter grid side.
        #[arg(long, default_value_t = 0.1)]
        sigma_fraction: f64,
        /// Peak value over the field mean.
        #[arg(long, default_value_t = 5.0)]
        peak: f64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct MeasureArgs {
    /// Meaning field file.
    meaning: PathBuf,
    #[arg(long, default_value = "riemannian")]
    kind: String,
    /// Gaussian blur width in cells.
    #[arg(long)]
    blur: Option<f64>,
    /// Relaxation width in latent units; needs --embeddings.
    #[arg(long, requires = "embeddings")]
    relax: Option<f64>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct TransformArgs {
    /// Measure field file.
    measure: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    pad: f64,
    #[arg(long, default_value_t = 1e-8)]
    floor: f64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 12.0)]
    max_time_factor: f64,
    #[arg(long, default_value_t = 0.8)]
    rk_safety: f64,
    #[arg(long, default_value_t = 0.2)]
    max_step: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    transform: PathBuf,
    embeddings: PathBuf,
    #[arg(long)]
    inverse: bool,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct GeodesicArgs {
    transform: PathBuf,
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    from: Point<f64>,
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    to: Point<f64>,
    #[arg(long, default_value_t = 64)]
    points: usize,
    /// Also write the latent path as an embeddings file.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct DistanceArgs {
    transform: PathBuf,
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    from: Point<f64>,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    measure: PathBuf,
    #[arg(long)]
    transform: PathBuf,
    #[arg(long)]
    before: PathBuf,
    #[arg(long)]
    after: PathBuf,
    #[arg(long, default_value_t = 64)]
    bins: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// Clusters (default: number of labels).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    floor: f64,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    measure: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Path as an embeddings file (repeatable).
    #[arg(long = "path")]
    paths: Vec<PathBuf>,
    /// Distance field for the contour layer.
    #[arg(long)]
    distance: Option<PathBuf>,
    #[arg(long, default_value = "sqrt")]
    contrast: String,
    #[arg(long, default_value = "reds")]
    colormap: String,
    #[arg(long, value_delimiter = ',')]
    contours: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "heatmap,contours,scatter,paths")]
    layers: Vec<String>,
    #[arg(long, default_value_t = 800)]
    width: u32,
    #[arg(long, default_value_t = 800)]
    height: u32,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ClassifierArgs {
    embeddings: PathBuf,
    #[arg(long, num_args = 2, value_names = ["N1", "N2"], default_values_t = [64, 64])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 0.05)]
    pad: f64,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    #[arg(long, default_value_t = 5000)]
    max_iters: usize,
    #[arg(short, long)]
    output: PathBuf,
}

fn parse_point(s: &str) -> std::result::Result<Point<f64>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"z1,z2\", got {s:?}"));
    }
    let mut p = [0.0f64; 2];
    for (a, part) in parts.iter().enumerate() {
        p[a] = part.trim().parse().map_err(|_| format!("cannot parse {part:?} as a number"))?;
        if !p[a].is_finite() {
            return Err(format!("coordinate {part:?} is not finite"));
        }
    }
    Ok(p)
}

fn grid_from(grid: &[usize], bounds: &[f64]) -> Result<GridSpec64, Error> {
    GridSpec64::new([bounds[0], bounds[2]], [bounds[1], bounds[3]], [grid[0], grid[1]])
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("JSON values serialize"));
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Fixtures(f) => fixtures(f),
        Command::Measure(a) => {
            let h = load_meaning::<f64>(&a.meaning)?;
            let mut m = match a.kind.as_str() {
                "riemannian" => riemannian_measure(&h),
                other => heuristic_measure(&h, other.parse::<DissimilarityKind>()?)?,
            };
            if let Some(sigma) = a.blur {
                m = gaussian_blur(&m, sigma)?;
            }
            if let Some(sigma) = a.relax {
                let e = load_embeddings::<f64>(a.embeddings.as_ref().expect("clap enforces --embeddings"))?;
                m = relax_to_mean(&m, &e, sigma)?;
            }
            save_field(&a.output, &AnyField::from(m))
        }
        Command::Transform(a) => {
            let m = load_measure::<f64>(&a.measure)?;
            let params = DiffusionParams {
                pad_factor: a.pad,
                density_floor_rel: a.floor,
                convergence_tol: a.tol,
                max_time_factor: a.max_time_factor,
                rk_safety: a.rk_safety,
                max_step_displacement: a.max_step,
            };
            eprintln!("solving {}x{} transform", m.spec().n1(), m.spec().n2());
            let t = solve_transform(&m, &params)?;
            let eq = density_equalization(&m, &t, a.floor)?;
            let report = json!({
                "diagnostics": t.diagnostics(),
                "cv_before": eq.cv_before,
                "cv_after": eq.cv_after,
                "area_ratio": eq.area_ratio,
                "cv_reduction": if eq.cv_after > 0.0 { eq.cv_before / eq.cv_after } else { f64::INFINITY },
            });
            save_field(&a.output, &AnyField::from(t))?;
            print_json(&report);
            Ok(())
        }
        Command::Apply(a) => {
            let t = load_transform::<f64>(&a.transform)?;
            let e = load_embeddings::<f64>(&a.embeddings)?;
            let out = if a.inverse {
                inverse_transform_embeddings(&t, &e)
            } else {
                transform_embeddings(&t, &e)
            }
            .map_err(|err| match err {
                // data rows start on line 2 of the file
                Error::AtIndex { index, source } if !source.is_solver_failure() => {
                    Error::Input(format!("row {} (line {}): {source}", index, index + 2))
                }
                other => other,
            })?;
            save_embeddings(&a.output, &out)
        }
        Command::Geodesic(a) => {
            let t = load_transform::<f64>(&a.transform)?;
            let path = pseudo_geodesic(&t, a.from, a.to, a.points)?;
            let mut csv = String::from("z1,z2,zt1,zt2,length\n");
            for ((p, q), s) in path.points().iter().zip(path.images()).zip(path.cumulative_length()) {
                csv.push_str(&format!("{:?},{:?},{:?},{:?},{:?}\n", p[0], p[1], q[0], q[1], s));
            }
            print!("{csv}");
            eprintln!("length {:?}", path.length());
            if let Some(out) = a.output {
                save_embeddings(&out, &EmbeddingSet64::new(path.points().to_vec(), None)?)?;
            }
            Ok(())
        }
        Command::Distance(a) => {
            let t = load_transform::<f64>(&a.transform)?;
            save_field(&a.output, &AnyField::from(distance_field(&t, a.from)?))
        }
        Command::Eval(a) => {
            let m = load_measure::<f64>(&a.measure)?;
            let t = load_transform::<f64>(&a.transform)?;
            let before = load_embeddings::<f64>(&a.before)?;
            let after = load_embeddings::<f64>(&a.after)?;
            let opts = ReportOptions {
                bins: a.bins,
                kmeans: KMeansOptions {
                    k: a.k,
                    seed: a.seed,
                    restarts: a.restarts,
                },
                density_floor_rel: a.floor,
            };
            let report = equalization_report(&m, &t, &before, &after, opts)?;
            print_json(&serde_json::to_value(report).expect("report serializes"));
            Ok(())
        }
        Command::Render(a) => {
            let measure = a.measure.as_ref().map(load_measure::<f64>).transpose()?;
            let embeddings = a.embeddings.as_ref().map(load_embeddings::<f64>).transpose()?;
            let distance = a.distance.as_ref().map(load_measure::<f64>).transpose()?;
            let paths = a
                .paths
                .iter()
                .map(|p| {
                    let e = load_embeddings::<f64>(p)?;
                    latentgeo::geometry::LatentPath::new(e.points().to_vec(), e.points().to_vec())
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let spec = RenderSpec {
                width: a.width,
                height: a.height,
                contrast: a.contrast.parse::<Contrast>()?,
                colormap: a.colormap.parse::<Colormap>()?,
                layers: a.layers.iter().map(|l| l.parse::<Layer>()).collect::<Result<_, _>>()?,
                contour_levels: a.contours,
            };
            let scene = Scene {
                measure: measure.as_ref(),
                embeddings: embeddings.as_ref(),
                paths: &paths,
                distance: distance.as_ref(),
            };
            let svg = render_scene(&scene, &spec)?;
            std::fs::write(&a.output, svg)?;
            Ok(())
        }
        Command::ClassifierField(a) => {
            let e = load_embeddings::<f64>(&a.embeddings)?;
            let spec = GridSpec64::covering(&e, a.grid[0], a.grid[1], a.pad)?;
            let fit = fit_classifier_field(
                &e,
                &spec,
                ClassifierOptions {
                    l2_penalty: a.l2,
                    max_iters: a.max_iters,
                    ..Default::default()
                },
            )?;
            if !fit.converged {
                eprintln!(
                    "warning: classifier stopped after {} iterations with gradient norm {:e}",
                    fit.iterations, fit.grad_norm
                );
            }
            let report = json!({
                "classes": fit.classes,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "grad_norm": fit.grad_norm,
            });
            save_field(&a.output, &AnyField::from(fit.field))?;
            print_json(&report);
            Ok(())
        }
    }
}

fn fixtures(f: FixtureCommand) -> Result<(), Error> {
    match f {
        FixtureCommand::Analytic {
            map,
            grid,
            bounds,
            output,
        } => {
            let spec = grid_from(&grid, &bounds)?;
            let h = make_analytic_meaning(map.parse::<AnalyticMap>()?, &spec);
            save_field(&output, &AnyField::from(h))
        }
        FixtureCommand::Mixture {
            n_per_class,
            classes,
            squash,
            seed,
            grid_cells,
            pad,
            embeddings_out,
            measure_out,
            original_out,
        } => {
            let mix = make_distorted_mixture_with::<f64>(&MixtureOptions {
                n_per_class,
                classes,
                squash,
                seed,
                grid_cells,
                pad_fraction: pad,
            })?;
            save_embeddings(&embeddings_out, &mix.embeddings)?;
            save_field(&measure_out, &AnyField::from(mix.measure))?;
            if let Some(p) = original_out {
                save_embeddings(&p, &mix.original)?;
            }
            Ok(())
        }
        FixtureCommand::Bump {
            grid,
            bounds,
            sigma_fraction,
            peak,
            output,
        } => {
            let spec = grid_from(&grid, &bounds)?;
            save_field(&output, &AnyField::from(make_centered_bump(&spec, sigma_fraction, peak)?))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_solver_failure() {
                if let Error::SolverFailure {
                    diagnostics: Some(d), ..
                } = &e
                {
                    print_json(&json!({ "diagnostics": d }));
                }
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
