mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use num_complex::Complex64;
use serde_json::{json, Value};

use critheights::boettcher::{boettcher, phi_n_map, trace_ray};
use critheights::census::{self, CensusError, CensusOptions, CensusStore, FiberCensus};
use critheights::escape::{green, heights};
use critheights::heights_space::{
    build_height_complex, classify, independence_classes, simplex_coords, subannuli, DEFAULT_REL_TOL,
};
use critheights::precision::green_brute_force;
use critheights::tree::{build_tree, twist_periods, GridSpec, TreeError};
use critheights::{selftest, EscapeBudget, HeightsVector, MarkedPolynomial};

use config::{Config, Precision};

#[derive(Parser, Debug)]
#[command(name = "critheights", version, about = "Critical heights, trees and fibers of polynomial escape rates")]
struct Cli {
    /// `key = value` configuration file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for parallel sweeps.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Budget {
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    maxiter: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sorted critical heights of a polynomial.
    Heights {
        #[arg(long)]
        poly: PathBuf,
        #[command(flatten)]
        budget: Budget,
    },
    /// Escape rate at a point, with Böttcher data when above the critical level.
    Green {
        #[arg(long)]
        poly: PathBuf,
        /// Point as `re,im`.
        #[arg(long, allow_hyphen_values = true)]
        z: String,
        #[command(flatten)]
        budget: Budget,
    },
    /// External ray as CSV rows `h,angle,re,im`.
    Ray {
        #[arg(long)]
        poly: PathBuf,
        /// Angle in radians.
        #[arg(long, allow_hyphen_values = true)]
        angle: f64,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
    },
    /// Image under `Φ_n` as log-coordinates.
    Phin {
        #[arg(long)]
        poly: PathBuf,
        #[arg(long)]
        n: u32,
    },
    /// Polynomial tree down to a floor height.
    Tree {
        #[arg(long)]
        poly: PathBuf,
        #[arg(long)]
        floor: f64,
        #[arg(long)]
        res: Option<usize>,
        /// Also write a Graphviz description here.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Independence classes, subannuli and cell of a heights vector.
    Strata {
        #[arg(long)]
        d: usize,
        /// Comma-separated heights.
        #[arg(long)]
        heights: String,
        #[arg(long, default_value_t = DEFAULT_REL_TOL)]
        rel_tol: f64,
    },
    /// Simplicial complex on the projectivized heights space.
    Complex {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        depth: u32,
    },
    /// Numerical census of the fiber over a heights vector.
    Census(CensusArgs),
    /// Fast invariant suite.
    Selftest {
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args, Debug)]
#[command(args_conflicts_with_subcommands = true)]
struct CensusArgs {
    #[command(subcommand)]
    action: Option<CensusAction>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    heights: Option<String>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    grid: Option<usize>,
    /// JSON list of seed polynomials.
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Recompute even when a stored census exists.
    #[arg(long)]
    no_cache: bool,
    #[arg(long)]
    skip_trees: bool,
    #[arg(long)]
    max_solutions: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum CensusAction {
    /// `(count_Tstar, count_T)` for a stored census.
    Compare {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        eps: f64,
    },
}

/// Problems with the invocation rather than the mathematics.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = Config::load(cli.config.as_deref()).map_err(|e| usage(format!("{e:#}")))?;
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(usage("--workers must be at least 1"));
        }
        cfg.workers = w;
    }
    rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global().ok();
    let out = cli.out.as_deref();
    match cli.command {
        Command::Heights { poly, budget } => {
            let f = read_poly(&poly)?;
            let b = escape_budget(&cfg, &budget)?;
            let h = heights(&f, &b);
            let flags: Vec<&str> = h.escaped.iter().map(|&e| if e { "escaped" } else { "bounded" }).collect();
            emit_json(
                out,
                &json!({ "heights": h.heights.heights, "M": h.heights.max(), "flags": flags, "order": h.order }),
            )?;
        }
        Command::Green { poly, z, budget } => {
            let f = read_poly(&poly)?;
            let z = parse_complex(&z)?;
            let b = escape_budget(&cfg, &budget)?;
            let v = green(&f, z, &b)?;
            let mut doc = json!({ "z": [z.re, z.im], "green": v });
            if cfg.precision == Precision::Reference {
                doc["reference"] = json!(green_brute_force(&f, z, 256, 60));
            }
            if let Ok(phi) = boettcher(&f, z, 1e-14) {
                doc["boettcher"] = json!(phi);
            }
            emit_json(out, &doc)?;
        }
        Command::Ray { poly, angle, from, to, steps } => {
            let f = read_poly(&poly)?;
            let path = trace_ray(&f, angle, from, to, steps)?;
            let mut text = String::from("h,angle,re,im\n");
            for p in path {
                text.push_str(&format!("{},{},{},{}\n", p.height, p.angle, p.z.re, p.z.im));
            }
            emit_text(out, &text)?;
        }
        Command::Phin { poly, n } => {
            let f = read_poly(&poly)?;
            emit_json(out, &json!(phi_n_map(&f, n)?))?;
        }
        Command::Tree { poly, floor, res, dot } => {
            let f = read_poly(&poly)?;
            let spec =
                GridSpec { resolution: res.unwrap_or(cfg.tree_resolution), refinement_limit: cfg.refinement_limit };
            let tree = match build_tree(&f, floor, spec) {
                Ok(t) => t,
                Err(e @ (TreeError::InvalidFloor(_) | TreeError::InvalidGrid(_))) => return Err(usage(e.to_string())),
                Err(e) => return Err(e.into()),
            };
            let mut doc = json!(tree);
            if let Ok(periods) = twist_periods(&tree) {
                doc["twist_periods"] = json!(periods);
            }
            emit_json(out, &doc)?;
            if let Some(path) = dot {
                fs::write(&path, tree.to_dot()).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Strata { d, heights, rel_tol } => {
            let h = parse_heights(d, &heights)?;
            let classes = independence_classes(&h, rel_tol)?;
            let mut doc = json!({ "d": d, "heights": h.heights, "classes": classes, "N": classes.len() });
            if h.is_shift_locus() {
                let dec = subannuli(&h, rel_tol)?;
                doc["simplex"] = json!(simplex_coords(&dec)?);
                doc["subannuli"] = json!(dec);
                if let Ok((label, coords)) = classify(&h, rel_tol) {
                    doc["cell"] = json!({ "label": label, "dim": label.dim(), "coords": coords });
                }
            }
            emit_json(out, &doc)?;
        }
        Command::Complex { d, depth } => {
            if d < 2 {
                return Err(usage("--d must be at least 2"));
            }
            let c = build_height_complex(d, depth);
            emit_json(out, &json!({ "counts": c.count_by_dim(), "complex": c }))?;
        }
        Command::Census(args) => return census_command(&cfg, out, args),
        Command::Selftest { seed } => {
            let results = selftest::run(seed.unwrap_or(cfg.seed));
            let ok = results.iter().all(|r| r.passed);
            let mut text = String::new();
            for r in &results {
                text.push_str(&format!(
                    "{} {:<40} {:>7.2}s  {}\n",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.seconds,
                    r.detail
                ));
            }
            emit_text(out, &text)?;
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn census_command(cfg: &Config, out: Option<&Path>, args: CensusArgs) -> Result<ExitCode> {
    if let Some(CensusAction::Compare { input, eps }) = args.action {
        let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
        let doc: Value = serde_json::from_str(&text).context("census file is not JSON")?;
        let census: FiberCensus = serde_json::from_value(doc.get("census").cloned().unwrap_or(doc))
            .context("census file does not hold a census")?;
        let (tstar, t) = census::compare_projections(&census, eps);
        emit_json(out, &json!({ "count_Tstar": tstar, "count_T": t }))?;
        return Ok(ExitCode::SUCCESS);
    }
    let d = args.d.ok_or_else(|| usage("census needs --d"))?;
    let heights = args.heights.ok_or_else(|| usage("census needs --heights"))?;
    let target = parse_heights(d, &heights)?;
    let grid = args.grid.unwrap_or(cfg.angle_grid);
    let seeds: Vec<MarkedPolynomial> = match &args.seeds {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| usage(format!("--seeds {}: {e}", p.display())))?
        }
        None => Vec::new(),
    };
    if seeds.iter().any(|s| s.degree() != d) {
        return Err(usage("--seeds: every seed must have degree --d"));
    }
    let mut opts = CensusOptions {
        rng_seed: cfg.seed,
        build_trees: !args.skip_trees,
        tree_grid: GridSpec { resolution: cfg.tree_resolution, refinement_limit: cfg.refinement_limit },
        ..CensusOptions::default()
    };
    if let Some(m) = args.max_solutions {
        opts.max_solutions = m;
    }
    let result = if args.no_cache {
        census::fiber_census(d, &target, args.n, grid, &seeds, &opts).map(|c| (c, false))
    } else {
        let dir = args.cache_dir.clone().unwrap_or_else(|| cfg.cache_dir.clone());
        CensusStore::new(dir).get_or_compute(d, &target, args.n, grid, &seeds, &opts)
    };
    match result {
        Ok((census, cached)) => {
            if cached {
                log::info!("reusing stored census");
            }
            emit_json(out, &census_document(&census))?;
            Ok(ExitCode::SUCCESS)
        }
        Err(CensusError::InsufficientSeeds { census }) => {
            emit_json(out, &census_document(&census))?;
            eprintln!(
                "error: {} angle cells have missing solutions (coverage gaps: {:?})",
                census.coverage_gaps.len(),
                &census.coverage_gaps[..census.coverage_gaps.len().min(20)]
            );
            Ok(ExitCode::from(1))
        }
        Err(e @ CensusError::InvalidGrid(_)) => Err(usage(e.to_string())),
        Err(e) => Err(e.into()),
    }
}

fn census_document(census: &FiberCensus) -> Value {
    let components: Vec<Value> = census
        .components
        .iter()
        .map(|c| {
            let residual = c.solutions.iter().map(|&k| census.solutions[k].residual).fold(0.0, f64::max);
            json!({
                "id": c.id,
                "size": c.solutions.len(),
                "representative": c.representative,
                "max_residual": residual,
                "monodromy": c.monodromy,
                "tree": c.tree.as_ref().map(|t| json!({
                    "vertices": t.vertices.len(),
                    "edges": t.edges.len(),
                    "twist_periods": twist_periods(t).ok(),
                })),
                "tree_error": c.tree_error,
            })
        })
        .collect();
    let (tstar, t) = census::compare_projections(census, 1e-4);
    json!({
        "summary": {
            "d": census.d,
            "n": census.n,
            "target": census.target.heights,
            "grid": census.angle_grid,
            "generic": census.generic,
            "accepted": census.accepted(),
            "torus_check": census.torus_check(),
            "base_solutions": census.solutions.len(),
            "coverage_gaps": census.coverage_gaps.len(),
            "failed_links": census.failed_links,
            "count_Tstar": tstar,
            "count_T": t,
            "components": components,
        },
        "census": census,
    })
}

fn escape_budget(cfg: &Config, b: &Budget) -> Result<EscapeBudget> {
    let budget = EscapeBudget {
        target_tolerance: b.tol.unwrap_or(cfg.tolerance),
        max_iterations: b.maxiter.unwrap_or(cfg.max_iterations),
        ..EscapeBudget::default()
    };
    budget.validate().map_err(|e| usage(format!("--tol/--maxiter: {e}")))?;
    Ok(budget)
}

fn read_poly(path: &Path) -> Result<MarkedPolynomial> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("--poly {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("--poly {}: {e}", path.display())))
}

fn parse_complex(s: &str) -> Result<Complex64> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [re, im] = parts.as_slice() else {
        return Err(usage(format!("--z {s:?}: expected re,im")));
    };
    let parse = |x: &str| x.parse::<f64>().map_err(|_| usage(format!("--z {s:?}: {x:?} is not a number")));
    Ok(Complex64::new(parse(re)?, parse(im)?))
}

fn parse_heights(d: usize, s: &str) -> Result<HeightsVector> {
    let values = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| usage(format!("--heights {s:?}: not a comma-separated list of numbers")))?;
    HeightsVector::new(d, values).ok_or_else(|| {
        usage(format!("--heights {s:?}: need {} non-negative finite values for --d {d}", d.saturating_sub(1)))
    })
}

fn emit_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout.write_all(text.as_bytes()).map_err(|e| anyhow!(e))
        }
    }
}

fn emit_json(out: Option<&Path>, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    emit_text(out, &text)
}
