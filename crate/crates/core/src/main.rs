use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use ghostblend::antiplane::{default_core, AntiplaneCoupled};
use ghostblend::blending::BlendKind;
use ghostblend::coupling::Method;
use ghostblend::solver::SolverConfig;
use ghostblend::study::{
    convergence_study, ghost_audit_sweep, read_csv, slopes, solve_single, write_csv, Benchmark, StudyConfig,
};
use ghostblend::{Error, Result};

#[derive(Parser)]
#[command(name = "ghostblend", version, about = "Blended atomistic/continuum coupling benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchArg {
    Divacancy,
    Microcrack,
    Dislocation,
}

impl From<BenchArg> for Benchmark {
    fn from(b: BenchArg) -> Self {
        match b {
            BenchArg::Divacancy => Benchmark::Divacancy,
            BenchArg::Microcrack => Benchmark::Microcrack,
            BenchArg::Dislocation => Benchmark::Dislocation,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Residual at zero displacement on the defect-free lattice.
    Audit {
        #[arg(long, default_value_t = 6.0)]
        r_a: f64,
        /// Blending widths K.
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        widths: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "BQCE,BQCF,BGFC")]
        methods: Vec<Method>,
        #[arg(long, default_value = "spline")]
        blend: String,
    },
    /// Solve one coupled problem and write the solution as JSON.
    Solve {
        #[arg(long, value_enum, default_value = "divacancy")]
        benchmark: BenchArg,
        /// JSON study configuration; overrides the benchmark preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "BGFC")]
        method: Method,
        #[arg(long)]
        r_a: f64,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Run a convergence study and write the CSV report.
    Study {
        #[arg(long, value_enum, default_value = "divacancy")]
        benchmark: BenchArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override the list of R_a.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        /// Leave the wall-time column at zero so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Fit log-log slopes of the error columns against DOF.
    Slopes {
        input: PathBuf,
        /// Use only the last m sizes of each method.
        #[arg(long)]
        last: Option<usize>,
    },
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn load_config(benchmark: BenchArg, config: &Option<PathBuf>) -> Result<StudyConfig> {
    match config {
        Some(p) => StudyConfig::from_json(BufReader::new(File::open(p)?)),
        None => Ok(StudyConfig::preset(benchmark.into())),
    }
}

#[derive(Serialize)]
struct ScalarSolution {
    method: Method,
    r_a: f64,
    r_b: f64,
    r_c: f64,
    nodes: Vec<[f64; 2]>,
    u: Vec<f64>,
    energy: f64,
    residual: f64,
    iterations: usize,
    converged: bool,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Audit { r_a, widths, methods, blend } => {
            let blend: BlendKind = serde_json::from_value(serde_json::Value::String(blend))?;
            let rows = ghost_audit_sweep(&methods, r_a, &widths, blend)?;
            let mut w = output(&None)?;
            writeln!(w, "method,K_blend,residual")?;
            for r in rows {
                writeln!(w, "{},{},{:.6e}", r.method, r.k_blend, r.residual)?;
            }
            w.flush()?;
        }
        Command::Solve { benchmark, config, method, r_a, out } => {
            let mut cfg = load_config(benchmark, &config)?;
            cfg.sizes = vec![r_a];
            if let Some(rc) = &cfg.outer_radii {
                cfg.outer_radii = Some(vec![rc[0]]);
            }
            let solver = SolverConfig { grad_tol: cfg.tolerances.coupled, ..cfg.solver.clone() };
            let mut w = output(&out)?;
            if cfg.benchmark == Benchmark::Dislocation {
                let r_b = r_a + cfg.width_rule(method).width(r_a);
                let r_c = cfg.outer_radius(0).max(r_b);
                let m = AntiplaneCoupled::build(method, r_a, r_b, r_c, cfg.exponent(), default_core())?;
                let res = m.solve(&solver)?;
                let sol = ScalarSolution {
                    method,
                    r_a,
                    r_b,
                    r_c,
                    nodes: m.mesh().nodes().iter().map(|x| [x.x, x.y]).collect(),
                    u: res.u,
                    energy: res.energy,
                    residual: res.grad_norm,
                    iterations: res.iterations,
                    converged: res.converged,
                };
                serde_json::to_writer_pretty(&mut w, &sol)?;
            } else {
                let (_, sol) = solve_single(&cfg.setup(0, method)?, method, &solver)?;
                info!("{} nodes, {} iterations, residual {:.3e}", sol.nodes.len(), sol.iterations, sol.residual);
                serde_json::to_writer_pretty(&mut w, &sol)?;
            }
            writeln!(w)?;
            w.flush()?;
        }
        Command::Study { benchmark, config, sizes, methods, no_timing, out } => {
            let mut cfg = load_config(benchmark, &config)?;
            if let Some(s) = sizes {
                cfg.sizes = s;
                cfg.outer_radii = None;
            }
            if let Some(m) = methods {
                cfg.methods = m;
            }
            if no_timing {
                cfg.record_wall_time = false;
            }
            let rows = convergence_study(&cfg)?;
            write_csv(&rows, output(&out)?)?;
            for r in rows.iter().filter(|r| !r.is_ok()) {
                eprintln!("{} R_a={} failed: {}", r.method, r.r_a, r.failure.as_deref().unwrap_or("?"));
            }
        }
        Command::Slopes { input, last } => {
            let rows = read_csv(BufReader::new(File::open(&input)?))?;
            let mut w = output(&None)?;
            writeln!(w, "method,points,slope_h1,slope_w1inf,slope_energy_rel")?;
            for s in slopes(&rows, last)? {
                writeln!(w, "{},{},{:.4},{:.4},{:.4}", s.method, s.points, s.h1, s.w1inf, s.energy_rel)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::InvalidInput(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
