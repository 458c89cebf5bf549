//! Command-line flags, the optional TOML config file, and their merge.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use shannon_cert::analysis;
use shannon_cert::catalog::{self, CatalogEntry, Relaxation};
use shannon_cert::entropy::{CertifyOptions, DEFAULT_SEED};
use shannon_cert::sdp::Tolerances;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "shannon-cert", version, about = "Device-independent Shannon-entropy certification")]
pub struct Cli {
    /// TOML file with flag values; flags given on the command line win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Bell inequalities in the catalog, with verified bounds.
    Catalog {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Numerical quantum bound of one inequality.
    Tsirelson {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Certified probability bounds at one noise level.
    Bounds {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        point: PointArgs,
        #[command(flatten)]
        solver: SolverArgs,
        /// Also bound pair and triple sums.
        #[arg(long)]
        extras: bool,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Entropy certificate at one noise level.
    Certify {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        point: PointArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        entropy: EntropyArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Certificates along a noise grid.
    Sweep {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        entropy: EntropyArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Second derivative of the closed-form entropy along a sweep.
    Convexity {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        entropy: EntropyArgs,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Sweeps two inequalities and locates where their entropies cross.
    Compare {
        #[command(flatten)]
        target: TargetArgs,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        solver: SolverArgs,
        #[command(flatten)]
        entropy: EntropyArgs,
        /// Bisection width for the crossover.
        #[arg(long, value_name = "WIDTH")]
        crossover_tol: Option<f64>,
        #[command(flatten)]
        output: OutputArgs,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Catalog { .. } => "catalog",
            Command::Tsirelson { .. } => "tsirelson",
            Command::Bounds { .. } => "bounds",
            Command::Certify { .. } => "certify",
            Command::Sweep { .. } => "sweep",
            Command::Convexity { .. } => "convexity",
            Command::Compare { .. } => "compare",
        }
    }
}

#[derive(Debug, Args, Default)]
pub struct TargetArgs {
    /// Inequality, `NAME` or `NAME:key=value,...` (e.g. `BC:n=3`, `BC3`).
    #[arg(long = "ineq", value_name = "NAME")]
    pub ineq: Vec<String>,
    /// Parameter `key=value` applied to every inequality.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub param: Vec<String>,
}

#[derive(Debug, Args, Default)]
pub struct PointArgs {
    /// Noise level p in [0, 1].
    #[arg(long, value_name = "P")]
    pub noise: Option<f64>,
    /// Spot setting `x,y` in the inequality's own labels.
    #[arg(long, value_name = "X,Y")]
    pub spot: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct GridArgs {
    /// `start:stop:step` or a comma-separated list of noise levels.
    #[arg(long, value_name = "GRID")]
    pub grid: Option<String>,
    /// Spot setting `x,y` in the inequality's own labels.
    #[arg(long, value_name = "X,Y")]
    pub spot: Option<String>,
}

#[derive(Debug, Args, Default)]
pub struct SolverArgs {
    /// Relaxation level: `1`, `2`, `3` or `1+AB`.
    #[arg(long, value_name = "LEVEL")]
    pub level: Option<String>,
    #[arg(long, value_name = "TOL")]
    pub feasibility_tol: Option<f64>,
    #[arg(long, value_name = "TOL")]
    pub gap_tol: Option<f64>,
    #[arg(long, value_name = "N")]
    pub max_iter: Option<usize>,
}

#[derive(Debug, Args, Default)]
pub struct EntropyArgs {
    /// Also bound pair and triple sums.
    #[arg(long)]
    pub extras: bool,
    /// Basin-hopping rounds (default 1500, or 100 with --extras).
    #[arg(long, value_name = "N")]
    pub restarts: Option<usize>,
    #[arg(long, value_name = "SEED")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args, Default)]
pub struct OutputArgs {
    /// Write results here instead of standard output.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

/// Contents of `--config`: flat keys named like the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct FileConfig {
    pub ineq: Option<OneOrMany>,
    pub param: Option<Vec<String>>,
    pub noise: Option<f64>,
    pub spot: Option<String>,
    pub grid: Option<String>,
    pub level: Option<LevelValue>,
    pub feasibility_tol: Option<f64>,
    pub gap_tol: Option<f64>,
    pub max_iter: Option<usize>,
    pub extras: Option<bool>,
    pub restarts: Option<usize>,
    pub seed: Option<u64>,
    pub crossover_tol: Option<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum LevelValue {
    Number(usize),
    Text(String),
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| {
            let line = e.span().filter(|s| s.start > 0).map(|s| text[..s.start].matches('\n').count() + 1);
            let at = line.map(|l| format!(" (line {l})")).unwrap_or_default();
            CliError::Usage(format!("config {}{at}: {}", path.display(), e.message()))
        })
    }
}

/// Everything a subcommand needs, validated.
#[derive(Debug)]
pub struct RunConfig {
    pub entries: Vec<CatalogEntry>,
    pub noise: Option<f64>,
    pub spot: Option<(usize, usize)>,
    pub grid: Option<Vec<f64>>,
    pub certify: CertifyOptions,
    pub crossover_tol: f64,
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn relaxation(&self) -> Relaxation {
        self.certify.relaxation
    }

    pub fn tolerances(&self) -> Tolerances {
        self.certify.tolerances
    }

    pub fn entry(&self) -> Result<&CatalogEntry, CliError> {
        match self.entries.as_slice() {
            [e] => Ok(e),
            [] => Err(CliError::Usage("--ineq is required".into())),
            _ => Err(CliError::Usage("this subcommand takes exactly one --ineq".into())),
        }
    }

    pub fn noise(&self) -> Result<f64, CliError> {
        self.noise.ok_or_else(|| CliError::Usage("--noise is required".into()))
    }

    /// Explicit spot or the entry's default, 0-based.
    pub fn spot_for(&self, entry: &CatalogEntry) -> (usize, usize) {
        self.spot.unwrap_or_else(|| entry.default_spot())
    }

    pub fn grid(&self) -> &[f64] {
        self.grid.as_deref().unwrap_or(&[])
    }
}

pub struct Parts<'a> {
    pub target: &'a TargetArgs,
    pub point: Option<&'a PointArgs>,
    pub grid: Option<&'a GridArgs>,
    pub default_grid: &'static str,
    pub solver: &'a SolverArgs,
    pub entropy: Option<&'a EntropyArgs>,
    pub extras_flag: bool,
    pub crossover_tol: Option<f64>,
    pub output: &'a OutputArgs,
}

fn parse_params(items: &[String]) -> Result<BTreeMap<String, f64>, CliError> {
    let mut out = BTreeMap::new();
    for item in items {
        for kv in item.split(',').filter(|s| !s.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("parameter '{kv}' is not key=value")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("parameter '{kv}' has a non-numeric value")))?;
            out.insert(k.trim().to_string(), v);
        }
    }
    Ok(out)
}

fn parse_entry(spec: &str, shared: &BTreeMap<String, f64>) -> Result<CatalogEntry, CliError> {
    let (name, inline) = match spec.split_once(':') {
        Some((n, rest)) => (n, parse_params(&[rest.to_string()])?),
        None => (spec, BTreeMap::new()),
    };
    let mut params = shared.clone();
    params.extend(inline);
    catalog::get(name.trim(), &params).map_err(CliError::from)
}

pub fn parse_spot(text: &str) -> Result<(usize, usize), CliError> {
    let bad = || CliError::Usage(format!("spot '{text}' is not x,y"));
    let (x, y) = text.split_once(',').ok_or_else(bad)?;
    Ok((x.trim().parse().map_err(|_| bad())?, y.trim().parse().map_err(|_| bad())?))
}

pub fn parse_grid(text: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Usage(format!("grid '{text}': {why}"));
    let parts: Vec<&str> = text.split(':').collect();
    let grid = match parts.as_slice() {
        [a, b, c] => {
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad("expected start:stop:step"));
            analysis::uniform_grid(num(a)?, num(b)?, num(c)?).map_err(CliError::from)?
        }
        [list] => list
            .split(',')
            .map(|s| s.trim().parse::<f64>().map_err(|_| bad("expected numbers")))
            .collect::<Result<Vec<_>, _>>()?,
        _ => return Err(bad("expected start:stop:step or a list")),
    };
    if grid.is_empty() {
        return Err(bad("no points"));
    }
    if grid.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(bad("noise levels must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(bad("noise levels must increase"));
    }
    Ok(grid)
}

pub fn resolve(parts: Parts<'_>, file: &FileConfig) -> Result<RunConfig, CliError> {
    let mut params_src = file.param.clone().unwrap_or_default();
    if !parts.target.param.is_empty() {
        params_src = parts.target.param.clone();
    }
    let shared = parse_params(&params_src)?;
    let specs: Vec<String> = if !parts.target.ineq.is_empty() {
        parts.target.ineq.clone()
    } else {
        match &file.ineq {
            Some(OneOrMany::One(s)) => vec![s.clone()],
            Some(OneOrMany::Many(v)) => v.clone(),
            None => Vec::new(),
        }
    };
    let entries = specs
        .iter()
        .map(|s| parse_entry(s, &shared))
        .collect::<Result<Vec<_>, _>>()?;

    let level = match (&parts.solver.level, &file.level) {
        (Some(s), _) => Some(s.clone()),
        (None, Some(LevelValue::Number(n))) => Some(n.to_string()),
        (None, Some(LevelValue::Text(s))) => Some(s.clone()),
        (None, None) => None,
    };
    let relaxation = match level {
        Some(s) => s.parse::<Relaxation>().map_err(CliError::from)?,
        None => Relaxation::default(),
    };
    let defaults = Tolerances::default();
    let tolerances = Tolerances {
        feasibility: parts.solver.feasibility_tol.or(file.feasibility_tol).unwrap_or(defaults.feasibility),
        gap: parts.solver.gap_tol.or(file.gap_tol).unwrap_or(defaults.gap),
        max_iterations: parts.solver.max_iter.or(file.max_iter).unwrap_or(defaults.max_iterations),
    };
    if !(tolerances.feasibility > 0.0 && tolerances.gap > 0.0 && tolerances.max_iterations > 0) {
        return Err(CliError::Usage("tolerances and --max-iter must be positive".into()));
    }

    let noise = parts.point.and_then(|p| p.noise).or(file.noise);
    if let Some(p) = noise {
        if !(0.0..=1.0).contains(&p) {
            return Err(CliError::Usage(format!("--noise {p} outside [0, 1]")));
        }
    }
    let spot_text = parts
        .point
        .and_then(|p| p.spot.clone())
        .or_else(|| parts.grid.and_then(|g| g.spot.clone()))
        .or_else(|| file.spot.clone());
    let spot = match (spot_text, entries.as_slice()) {
        (Some(t), [e]) => Some(e.spot_from_label(parse_spot(&t)?).map_err(CliError::from)?),
        (Some(_), []) => return Err(CliError::Usage("--spot needs an --ineq".into())),
        (Some(_), _) => return Err(CliError::Usage("--spot cannot be shared by several inequalities".into())),
        (None, _) => None,
    };
    let grid = match parts.grid {
        Some(g) => {
            let text = g.grid.clone().or_else(|| file.grid.clone());
            Some(parse_grid(text.as_deref().unwrap_or(parts.default_grid))?)
        }
        None => None,
    };

    let entropy_flags = parts.entropy;
    let extras = parts.extras_flag || entropy_flags.is_some_and(|e| e.extras) || file.extras.unwrap_or(false);
    let restarts = entropy_flags.and_then(|e| e.restarts).or(file.restarts);
    let seed = entropy_flags.and_then(|e| e.seed).or(file.seed).unwrap_or(DEFAULT_SEED);
    let certify = CertifyOptions {
        relaxation,
        extras,
        restarts,
        seed,
        tolerances,
        ..CertifyOptions::default()
    };
    let crossover_tol = parts.crossover_tol.or(file.crossover_tol).unwrap_or(1e-4);
    if !(crossover_tol > 0.0) {
        return Err(CliError::Usage("--crossover-tol must be positive".into()));
    }
    Ok(RunConfig {
        entries,
        noise,
        spot,
        grid,
        certify,
        crossover_tol,
        out: parts.output.out.clone().or_else(|| file.out.clone()),
        format: parts.output.format.or(file.format),
    })
}
