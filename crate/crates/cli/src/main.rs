//! `shannon-cert` command-line front end.

mod config;
mod report;

use std::fmt::Write as _;
use std::process::ExitCode;

use clap::Parser;
use serde_json::{json, Value};
use shannon_cert::analysis::{self, DerivativeReport, SweepResult};
use shannon_cert::catalog::{self, CatalogEntry, CatalogRecord};
use shannon_cert::entropy::{self, EntropyCertificate};
use shannon_cert::probbounds::{self, BoundBox, BoundOptions};
use shannon_cert::Error;

use config::{Cli, Command, FileConfig, Format, Parts, RunConfig};
use report::{csv_row, num, opt_num, Provenance};

const SWEEP_GRID: &str = "0:0.5:0.005";
const CONVEXITY_GRID: &str = "0.01:0.5:0.005";

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Solver { stage: String, message: String },
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Solver { .. } => 3,
            CliError::Io(_) => 1,
        }
    }

    fn in_stage(stage: &str, err: Error) -> CliError {
        match CliError::from(err) {
            CliError::Solver { stage: inner, message } if inner == "solve" => CliError::Solver {
                stage: stage.to_string(),
                message,
            },
            other => other,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Solver { stage, message } => write!(f, "solver failure [{stage}]: {message}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let mut stage = "solve";
        let mut inner = &err;
        while let Error::Stage { stage: s, source } = inner {
            stage = s;
            inner = source;
        }
        match inner {
            Error::Argument(_) | Error::Capacity(_) => CliError::Usage(inner.to_string()),
            _ => CliError::Solver {
                stage: stage.to_string(),
                message: inner.to_string(),
            },
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let name = cli.command.name();
    match &cli.command {
        Command::Catalog { target, solver, output } => {
            let cfg = config::resolve(parts(target, solver, output), &file)?;
            catalog_cmd(name, &cfg)
        }
        Command::Tsirelson { target, solver, output } => {
            let cfg = config::resolve(parts(target, solver, output), &file)?;
            tsirelson_cmd(name, &cfg)
        }
        Command::Bounds {
            target,
            point,
            solver,
            extras,
            output,
        } => {
            let cfg = config::resolve(
                Parts {
                    point: Some(point),
                    extras_flag: *extras,
                    ..parts(target, solver, output)
                },
                &file,
            )?;
            bounds_cmd(name, &cfg)
        }
        Command::Certify {
            target,
            point,
            solver,
            entropy,
            output,
        } => {
            let cfg = config::resolve(
                Parts {
                    point: Some(point),
                    entropy: Some(entropy),
                    ..parts(target, solver, output)
                },
                &file,
            )?;
            certify_cmd(name, &cfg)
        }
        Command::Sweep {
            target,
            grid,
            solver,
            entropy,
            output,
        } => {
            let cfg = config::resolve(
                Parts {
                    grid: Some(grid),
                    default_grid: SWEEP_GRID,
                    entropy: Some(entropy),
                    ..parts(target, solver, output)
                },
                &file,
            )?;
            sweep_cmd(name, &cfg)
        }
        Command::Convexity {
            target,
            grid,
            solver,
            entropy,
            output,
        } => {
            let cfg = config::resolve(
                Parts {
                    grid: Some(grid),
                    default_grid: CONVEXITY_GRID,
                    entropy: Some(entropy),
                    ..parts(target, solver, output)
                },
                &file,
            )?;
            convexity_cmd(name, &cfg)
        }
        Command::Compare {
            target,
            grid,
            solver,
            entropy,
            crossover_tol,
            output,
        } => {
            let cfg = config::resolve(
                Parts {
                    grid: Some(grid),
                    default_grid: SWEEP_GRID,
                    entropy: Some(entropy),
                    crossover_tol: *crossover_tol,
                    ..parts(target, solver, output)
                },
                &file,
            )?;
            compare_cmd(name, &cfg)
        }
    }
}

fn parts<'a>(
    target: &'a config::TargetArgs,
    solver: &'a config::SolverArgs,
    output: &'a config::OutputArgs,
) -> Parts<'a> {
    Parts {
        target,
        point: None,
        grid: None,
        default_grid: SWEEP_GRID,
        solver,
        entropy: None,
        extras_flag: false,
        crossover_tol: None,
        output,
    }
}

fn emit_json(cfg: &RunConfig, provenance: &Provenance, body: Value) -> Result<(), CliError> {
    let doc = report::json_document(provenance, body);
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    report::emit(cfg.out.as_deref(), &text)
}

fn emit_text(cfg: &RunConfig, text: &str) -> Result<(), CliError> {
    report::emit(cfg.out.as_deref(), text)
}

fn label(entry: &CatalogEntry, spot: (usize, usize)) -> String {
    let (x, y) = entry.to_label(spot);
    format!("{x},{y}")
}

fn catalog_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entries = if cfg.entries.is_empty() {
        catalog::standard_entries()
    } else {
        cfg.entries.clone()
    };
    let records = entries
        .iter()
        .map(|e| {
            e.record_with(cfg.relaxation(), &cfg.tolerances())
                .map_err(|err| CliError::in_stage("bell bound", err))
        })
        .collect::<Result<Vec<CatalogRecord>, _>>()?;
    let provenance = Provenance::new(name, &cfg.certify);
    match cfg.format {
        Some(Format::Json) => emit_json(cfg, &provenance, json!({ "entries": records })),
        Some(Format::Csv) => {
            let mut text = provenance.csv_header();
            text += &csv_row(["name", "params", "constant", "tsirelson_claimed", "tsirelson_verified", "spot_settings"]);
            for r in &records {
                text += &csv_row([
                    r.name.clone(),
                    params_text(&r.params),
                    num(r.constant),
                    opt_num(r.tsirelson_claimed),
                    num(r.tsirelson_verified),
                    spots_text(&r.spot_settings),
                ]);
            }
            emit_text(cfg, &text)
        }
        None => {
            let mut text = String::new();
            let _ = writeln!(
                text,
                "{:<10} {:<30} {:>8} {:>12} {:>12}  spots",
                "name", "params", "constant", "claimed", "verified"
            );
            for r in &records {
                let _ = writeln!(
                    text,
                    "{:<10} {:<30} {:>8} {:>12} {:>12}  {}",
                    r.name,
                    params_text(&r.params),
                    format!("{}", r.constant),
                    r.tsirelson_claimed.map(num).unwrap_or_else(|| "-".into()),
                    num(r.tsirelson_verified),
                    spots_text(&r.spot_settings)
                );
            }
            text.push('\n');
            let doc = report::json_document(&provenance, json!({ "entries": records }));
            text += &serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
            text.push('\n');
            emit_text(cfg, &text)
        }
    }
}

fn params_text(params: &std::collections::BTreeMap<String, f64>) -> String {
    params.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
}

fn spots_text(spots: &[(usize, usize)]) -> String {
    spots.iter().map(|(x, y)| format!("({x},{y})")).collect::<Vec<_>>().join(" ")
}

fn tsirelson_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entry = cfg.entry()?;
    let bound = entry
        .tsirelson_numeric(cfg.relaxation(), &cfg.tolerances())
        .map_err(|e| CliError::in_stage("bell bound", e))?;
    let local = entry.local_bound()?;
    let provenance = Provenance::new(name, &cfg.certify);
    let body = json!({
        "inequality": entry.display_name(),
        "params": entry.params(),
        "local_bound": local,
        "tsirelson_claimed": entry.tsirelson_claimed(),
        "tsirelson_verified": bound.upper,
        "attained": bound.attained,
        "status": bound.status,
        "level": bound.relaxation.to_string(),
    });
    match cfg.format {
        Some(Format::Csv) => {
            let mut text = provenance.csv_header();
            text += &csv_row(["inequality", "local_bound", "tsirelson_claimed", "tsirelson_verified", "attained", "status"]);
            text += &csv_row([
                entry.display_name(),
                num(local),
                opt_num(entry.tsirelson_claimed()),
                num(bound.upper),
                num(bound.attained),
                bound.status.as_str().to_string(),
            ]);
            emit_text(cfg, &text)
        }
        _ => emit_json(cfg, &provenance, body),
    }
}

fn bounds_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entry = cfg.entry()?;
    let p = cfg.noise()?;
    let spot = cfg.spot_for(entry);
    let options = BoundOptions {
        relaxation: cfg.relaxation(),
        relation: cfg.certify.relation,
        tolerances: cfg.tolerances(),
    };
    let exprs = probbounds::standard_expressions(cfg.certify.extras);
    let bounds = probbounds::bound_box(entry, p, spot, &exprs, &options).map_err(|e| CliError::in_stage("bounds", e))?;
    let provenance = Provenance::new(name, &cfg.certify);
    match cfg.format {
        Some(Format::Json) => emit_json(
            cfg,
            &provenance,
            json!({ "spot_label": label(entry, spot), "bounds": bounds }),
        ),
        _ => {
            let mut text = provenance.csv_header();
            let _ = writeln!(text, "# inequality: {} p: {} spot: {}", entry.display_name(), num(p), label(entry, spot));
            let _ = writeln!(text, "# bell_target: {}", num(bounds.bell_target));
            text += &bounds_csv(&bounds);
            emit_text(cfg, &text)
        }
    }?;
    check_box(&bounds)
}

fn bounds_csv(bounds: &BoundBox) -> String {
    let mut text = csv_row(["label", "lo", "hi", "solver_status_lo", "solver_status_hi", "gap_lo", "gap_hi"]);
    for e in &bounds.entries {
        text += &csv_row([
            e.expr.label.clone(),
            num(e.lo),
            num(e.hi),
            e.status_lo.as_str().to_string(),
            e.status_hi.as_str().to_string(),
            num(e.gap_lo),
            num(e.gap_hi),
        ]);
    }
    text
}

fn check_box(bounds: &BoundBox) -> Result<(), CliError> {
    let worst = bounds.worst_status();
    if worst.is_usable() {
        Ok(())
    } else {
        Err(CliError::Solver {
            stage: "bounds".into(),
            message: format!("a bound solve finished with status {worst}"),
        })
    }
}

fn certificate_json(entry: &CatalogEntry, cert: &EntropyCertificate) -> Value {
    let mut body = report::to_json_value(cert);
    if let Value::Object(map) = &mut body {
        map.insert("spot_label".into(), json!(label(entry, cert.spot)));
        map.insert("min_entropy_definition".into(), json!("-log2 max_i hi_i"));
    }
    body
}

fn summary(entry: &CatalogEntry, cert: &EntropyCertificate) -> String {
    let conj = match (cert.conjecture_entropy, cert.agreement) {
        (Some(h), Some(a)) => format!("closed form {} (|diff| {})", num(h), num(a)),
        _ => "closed form infeasible".into(),
    };
    format!(
        "{} p={} spot ({}) level {}: H >= {} bits, H_min >= {} bits, {}",
        entry.display_name(),
        num(cert.p),
        label(entry, cert.spot),
        cert.level,
        num(cert.shannon_lower),
        num(cert.min_entropy),
        conj
    )
}

fn certify_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entry = cfg.entry()?;
    let p = cfg.noise()?;
    let spot = cfg.spot_for(entry);
    let cert = entropy::certify(entry, p, spot, &cfg.certify)?;
    let provenance = Provenance::new(name, &cfg.certify);
    emit_json(cfg, &provenance, certificate_json(entry, &cert))?;
    let line = summary(entry, &cert);
    if cfg.out.is_some() {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
    check_box(&cert.bounds)
}

fn run_sweep(entry: &CatalogEntry, spot: (usize, usize), cfg: &RunConfig) -> Result<SweepResult, CliError> {
    log::info!("sweeping {} over {} points", entry.display_name(), cfg.grid().len());
    analysis::sweep(entry, spot, cfg.grid(), &cfg.certify).map_err(|e| CliError::in_stage("sweep", e))
}

fn sweep_failures(result: &SweepResult) -> Result<(), CliError> {
    let failed: Vec<String> = result
        .points
        .iter()
        .filter(|pt| pt.certificate.is_none())
        .map(|pt| num(pt.p))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Solver {
            stage: "sweep".into(),
            message: format!(
                "{}: {} grid point(s) failed (p = {})",
                result.entry.display_name(),
                failed.len(),
                failed.join(", ")
            ),
        })
    }
}

const SWEEP_COLUMNS: [&str; 14] = [
    "p",
    "shannon_lower",
    "min_entropy",
    "conjecture_entropy",
    "agreement",
    "lo_mm",
    "hi_mm",
    "lo_mp",
    "hi_mp",
    "lo_pm",
    "hi_pm",
    "lo_pp",
    "hi_pp",
    "status",
];

fn sweep_row(point: &analysis::SweepPoint) -> Vec<String> {
    match &point.certificate {
        Some(c) => {
            let mut row = vec![
                num(c.p),
                num(c.shannon_lower),
                num(c.min_entropy),
                opt_num(c.conjecture_entropy),
                opt_num(c.agreement),
            ];
            match c.bounds.singles() {
                Ok((lo, hi)) => {
                    for i in 0..4 {
                        row.push(num(lo[i]));
                        row.push(num(hi[i]));
                    }
                }
                Err(_) => row.extend(std::iter::repeat_n(String::new(), 8)),
            }
            row.push(c.bounds.worst_status().as_str().to_string());
            row
        }
        None => {
            let mut row = vec![num(point.p)];
            row.extend(std::iter::repeat_n(String::new(), 12));
            row.push("failed".into());
            row
        }
    }
}

fn sweep_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entry = cfg.entry()?;
    let spot = cfg.spot_for(entry);
    let result = run_sweep(entry, spot, cfg)?;
    let provenance = Provenance::new(name, &cfg.certify);
    match cfg.format {
        Some(Format::Json) => {
            let rows: Vec<Value> = result
                .points
                .iter()
                .map(|pt| {
                    let mut obj = serde_json::Map::new();
                    for (k, v) in SWEEP_COLUMNS.iter().zip(sweep_row(pt)) {
                        let value = match v.parse::<f64>() {
                            Ok(x) if *k != "status" => json!(x),
                            _ if v.is_empty() => Value::Null,
                            _ => json!(v),
                        };
                        obj.insert(k.to_string(), value);
                    }
                    if let Some(err) = &pt.error {
                        obj.insert("error".into(), json!(err));
                    }
                    Value::Object(obj)
                })
                .collect();
            emit_json(
                cfg,
                &provenance,
                json!({
                    "inequality": entry.display_name(),
                    "spot_label": label(entry, spot),
                    "rows": rows,
                }),
            )
        }
        _ => {
            let mut text = provenance.csv_header();
            let _ = writeln!(text, "# inequality: {} spot: {}", entry.display_name(), label(entry, spot));
            text += &csv_row(SWEEP_COLUMNS);
            for pt in &result.points {
                text += &csv_row(sweep_row(pt));
            }
            for pt in &result.points {
                if let Some(err) = &pt.error {
                    let _ = writeln!(text, "# failed p={}: {}", num(pt.p), err.replace('\n', " "));
                }
            }
            emit_text(cfg, &text)
        }
    }?;
    sweep_failures(&result)
}

const CONVEXITY_COLUMNS: [&str; 20] = [
    "p",
    "segment",
    "l_a",
    "l_b",
    "u",
    "dl_a",
    "dl_b",
    "du",
    "d2l_a",
    "d2l_b",
    "d2u",
    "alpha",
    "beta_1",
    "beta_2",
    "beta_3",
    "entropy",
    "dh_dp",
    "d2h_printed",
    "d2h_analytic",
    "d2h_direct",
];

fn convexity_comments(report: &DerivativeReport) -> String {
    let mut text = String::new();
    for s in &report.segments {
        let r = s.roles;
        let _ = writeln!(
            text,
            "# segment: p {}..{} lower {:?} upper {} residual {}",
            num(s.p_start),
            num(s.p_end),
            r.lower,
            r.upper,
            r.residual
        );
    }
    let boundaries: Vec<String> = report.boundaries.iter().map(|&p| num(p)).collect();
    let _ = writeln!(text, "# boundaries: {}", boundaries.join(" "));
    for r in &report.regions {
        let _ = writeln!(text, "# region: {:?} p {}..{}", r.curvature, num(r.p_start), num(r.p_end));
    }
    let _ = writeln!(text, "# max_dev_printed: {}", num(report.max_dev_printed));
    let _ = writeln!(text, "# max_dev_analytic: {}", num(report.max_dev_analytic));
    let _ = writeln!(text, "# closer_path: {}", report.closer_path());
    text
}

fn convexity_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let entry = cfg.entry()?;
    let spot = cfg.spot_for(entry);
    let result = run_sweep(entry, spot, cfg)?;
    let report = analysis::entropy_second_derivative(&result.grid(), &result.role_trajectory())
        .map_err(|e| CliError::in_stage("convexity", e))?;
    let provenance = Provenance::new(name, &cfg.certify);
    match cfg.format {
        Some(Format::Json) => {
            let mut body = report::to_json_value(&report);
            if let Value::Object(map) = &mut body {
                map.insert("inequality".into(), json!(entry.display_name()));
                map.insert("spot_label".into(), json!(label(entry, spot)));
                map.insert("closer_path".into(), json!(report.closer_path()));
            }
            emit_json(cfg, &provenance, body)
        }
        _ => {
            let mut text = provenance.csv_header();
            let _ = writeln!(text, "# inequality: {} spot: {}", entry.display_name(), label(entry, spot));
            text += &convexity_comments(&report);
            text += &csv_row(CONVEXITY_COLUMNS);
            for r in &report.rows {
                let mut row = vec![num(r.p), r.segment.to_string()];
                row.extend(r.values.iter().chain(&r.first).chain(&r.second).map(|&x| num(x)));
                row.push(num(r.alpha));
                row.extend(r.beta.iter().map(|&x| num(x)));
                row.extend([r.entropy, r.dh_dp, r.d2h_printed, r.d2h_analytic, r.d2h_direct].map(num));
                text += &csv_row(row);
            }
            emit_text(cfg, &text)
        }
    }?;
    sweep_failures(&result)
}

fn compare_cmd(name: &'static str, cfg: &RunConfig) -> Result<(), CliError> {
    let [a, b] = cfg.entries.as_slice() else {
        return Err(CliError::Usage("compare takes exactly two --ineq".into()));
    };
    let ra = run_sweep(a, cfg.spot_for(a), cfg)?;
    let rb = run_sweep(b, cfg.spot_for(b), cfg)?;
    let crossover = analysis::find_crossover(&ra, &rb, cfg.crossover_tol).map_err(|e| CliError::in_stage("crossover", e))?;
    let provenance = Provenance::new(name, &cfg.certify);
    let side = |r: &SweepResult| json!({ "inequality": r.entry.display_name(), "spot_label": label(&r.entry, r.spot) });
    match cfg.format {
        Some(Format::Csv) => {
            let mut text = provenance.csv_header();
            let _ = writeln!(text, "# crossover: {}", crossover.map(num).unwrap_or_else(|| "none".into()));
            let _ = writeln!(text, "# crossover_tol: {:e}", cfg.crossover_tol);
            text += &csv_row([
                "p".to_string(),
                format!("shannon_lower_{}", a.display_name()),
                format!("shannon_lower_{}", b.display_name()),
            ]);
            for (pa, pb) in ra.points.iter().zip(&rb.points) {
                let h = |pt: &analysis::SweepPoint| pt.certificate.as_ref().map(|c| num(c.shannon_lower)).unwrap_or_default();
                text += &csv_row([num(pa.p), h(pa), h(pb)]);
            }
            emit_text(cfg, &text)
        }
        _ => emit_json(
            cfg,
            &provenance,
            json!({
                "a": side(&ra),
                "b": side(&rb),
                "grid_points": ra.points.len(),
                "crossover": crossover,
                "crossover_tol": cfg.crossover_tol,
            }),
        ),
    }?;
    if let Some(p) = crossover {
        let line = format!("crossover p* = {}", num(p));
        if cfg.out.is_some() {
            println!("{line}");
        } else {
            eprintln!("{line}");
        }
    }
    sweep_failures(&ra)?;
    sweep_failures(&rb)
}
