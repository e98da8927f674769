//! File formats: datasets (CSV with a `# d=<d> n=<n>` header), models
//! (JSON with a fixed key order), experiment specs (TOML) and result tables.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degeneracy::{BallCountReport, DivergenceTrace};
use crate::em::{EmConfig, Init, KappaUpdate};
use crate::error::{Error, Result};
use crate::model::{C3Row, PenaltyReport, PenaltySpec, VmfComponent, VmfMixture};
use crate::sim::{ExperimentSpec, ExperimentTable, MeanDirectionRule};
use crate::sphere::{norm, UnitVector};

/// Rows whose norm is further than this from one are rejected unless
/// renormalization is requested.
pub const UNIT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub points: Vec<UnitVector>,
    /// Whether any row had to be projected back onto the sphere.
    pub renormalized: bool,
}

fn parse_err(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_header(path: &str, line: &str) -> Result<(usize, usize)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| parse_err(path, 1, "expected header `# d=<d> n=<n>`"))?;
    let (mut d, mut n) = (None, None);
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| parse_err(path, 1, format!("malformed header token `{tok}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| parse_err(path, 1, format!("header value `{v}` is not an integer")))?;
        match k {
            "d" => d = Some(v),
            "n" => n = Some(v),
            _ => return Err(parse_err(path, 1, format!("unknown header key `{k}`"))),
        }
    }
    match (d, n) {
        (Some(d), Some(n)) if d >= 2 => Ok((d, n)),
        (Some(d), Some(_)) => Err(parse_err(path, 1, format!("d must be >= 2, got {d}"))),
        _ => Err(parse_err(path, 1, "header must give both d and n")),
    }
}

/// Parses dataset text. `origin` names the source in error messages.
pub fn parse_dataset(text: &str, origin: &str, renormalize: bool) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(origin, 1, "empty dataset"))?;
    let (d, n) = parse_header(origin, header.trim())?;
    let mut points = Vec::with_capacity(n);
    let mut renormalized = false;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let coords = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| parse_err(origin, lineno, format!("row {}: {e}", points.len() + 1)))?;
        if coords.len() != d {
            return Err(parse_err(
                origin,
                lineno,
                format!("row {} has {} coordinates, expected {d}", points.len() + 1, coords.len()),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(parse_err(origin, lineno, format!("row {} has non-finite values", points.len() + 1)));
        }
        let len = norm(&coords);
        if (len - 1.0).abs() > UNIT_TOL {
            if !renormalize || len == 0.0 {
                return Err(parse_err(
                    origin,
                    lineno,
                    format!("row {} has norm {len}, not 1 (use renormalization to project it)", points.len() + 1),
                ));
            }
            renormalized = true;
        }
        points.push(UnitVector::new(coords).map_err(|e| parse_err(origin, lineno, e.to_string()))?);
    }
    if points.len() != n {
        return Err(parse_err(origin, 1, format!("header says n={n} but {} rows follow", points.len())));
    }
    if n == 0 {
        return Err(Error::EmptyData);
    }
    Ok(Dataset { d, points, renormalized })
}

pub fn read_dataset(path: &Path, renormalize: bool) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_dataset(&text, &path.display().to_string(), renormalize)
}

/// Dataset text; coordinates carry 17 significant digits.
pub fn format_dataset(points: &[UnitVector]) -> Result<String> {
    let first = points.first().ok_or(Error::EmptyData)?;
    let d = first.dim();
    let mut out = format!("# d={d} n={}\n", points.len());
    for p in points {
        if p.dim() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: p.dim(),
            });
        }
        let row: Vec<String> = p.coords().iter().map(|c| format!("{c:.16e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, points: &[UnitVector]) -> Result<()> {
    fs::write(path, format_dataset(points)?)?;
    Ok(())
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

// ---------------------------------------------------------------------------
// Models
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMetadata {
    pub pll: f64,
    pub iterations: usize,
    pub converged: bool,
    pub seed: u64,
    pub psi_n: f64,
    pub renormalized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    mu: Vec<f64>,
    kappa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    d: usize,
    p: usize,
    weights: Vec<f64>,
    components: Vec<ComponentFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata: Option<FitMetadata>,
}

/// Model document. Keys always appear in the same order, so equal models
/// serialize to equal bytes.
pub fn format_model(mix: &VmfMixture, metadata: Option<&FitMetadata>) -> Result<String> {
    let file = ModelFile {
        d: mix.dim(),
        p: mix.p(),
        weights: mix.weights().to_vec(),
        components: mix
            .components()
            .iter()
            .map(|c| ComponentFile {
                mu: c.mu().coords().to_vec(),
                kappa: c.kappa(),
            })
            .collect(),
        metadata: metadata.cloned(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

pub fn parse_model(text: &str) -> Result<(VmfMixture, Option<FitMetadata>)> {
    let file: ModelFile = serde_json::from_str(text)?;
    if file.p != file.components.len() || file.p != file.weights.len() {
        return Err(Error::InvalidMixture(format!(
            "p = {} but {} weights and {} components are listed",
            file.p,
            file.weights.len(),
            file.components.len()
        )));
    }
    let comps = file
        .components
        .into_iter()
        .map(|c| {
            if c.mu.len() != file.d {
                return Err(Error::DimensionMismatch {
                    expected: file.d,
                    found: c.mu.len(),
                });
            }
            let len = norm(&c.mu);
            if (len - 1.0).abs() > UNIT_TOL {
                return Err(Error::InvalidMixture(format!("mean direction has norm {len}, not 1")));
            }
            VmfComponent::new(UnitVector::new(c.mu)?, c.kappa)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((VmfMixture::new(file.weights, comps)?, file.metadata))
}

pub fn read_model(path: &Path) -> Result<(VmfMixture, Option<FitMetadata>)> {
    parse_model(&fs::read_to_string(path)?)
}

pub fn write_model(path: &Path, mix: &VmfMixture, metadata: Option<&FitMetadata>) -> Result<()> {
    fs::write(path, format_model(mix, metadata)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Penalty flags
// ---------------------------------------------------------------------------

/// Parses `zeta=<z>`, `psi=<psi>` or `circular`.
pub fn parse_penalty(s: &str) -> Result<PenaltySpec> {
    let s = s.trim();
    if s == "circular" || s == "circular_variance" {
        return Ok(PenaltySpec::CircularVariance);
    }
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::InvalidConfig(format!("penalty `{s}`: expected zeta=<z>, psi=<psi> or circular")))?;
    let v: f64 = v
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("penalty value `{v}` is not a number")))?;
    match k.trim() {
        "zeta" if v > 0.0 && v.is_finite() => Ok(PenaltySpec::Zeta(v)),
        "zeta" => Err(Error::InvalidConfig(format!("zeta must be positive, got {v}"))),
        "psi" if v >= 0.0 && v.is_finite() => Ok(PenaltySpec::Fixed(v)),
        "psi" => Err(Error::InvalidConfig(format!("psi must be >= 0, got {v}"))),
        other => Err(Error::InvalidConfig(format!("unknown penalty kind `{other}`"))),
    }
}

// ---------------------------------------------------------------------------
// Experiment specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(usize),
    Many(Vec<usize>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmSection {
    restarts: Option<usize>,
    init: Option<String>,
    kappa_update: Option<String>,
    max_iters: Option<usize>,
    tol: Option<f64>,
    penalty: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    d: usize,
    n: OneOrMany,
    replications: usize,
    weights: Vec<f64>,
    kappas: Vec<f64>,
    seed: Option<u64>,
    mean_rule: Option<String>,
    means: Option<Vec<Vec<f64>>>,
    em: Option<EmSection>,
}

/// Parses an experiment spec; a list of `n` values expands to one spec per
/// cell.
pub fn parse_experiment_specs(text: &str) -> Result<Vec<ExperimentSpec>> {
    let file: SpecFile = toml::from_str(text).map_err(|e| Error::Toml(e.message().to_string()))?;
    let p = file.weights.len();
    let mut em = EmConfig::new(p);
    if let Some(sec) = &file.em {
        if let Some(r) = sec.restarts {
            em.restarts = r;
        }
        if let Some(m) = sec.max_iters {
            em.max_iters = m;
        }
        if let Some(t) = sec.tol {
            em.tol = t;
        }
        if let Some(init) = &sec.init {
            em.init = match init.as_str() {
                "random_restarts" => Init::RandomRestarts,
                "kmeans_seeded" => Init::KMeansSeeded,
                other => return Err(Error::InvalidConfig(format!("em.init: unknown value `{other}`"))),
            };
        }
        if let Some(k) = &sec.kappa_update {
            em.kappa_update = match k.as_str() {
                "approx" => KappaUpdate::Approx,
                "exact" => KappaUpdate::Exact,
                other => return Err(Error::InvalidConfig(format!("em.kappa_update: unknown value `{other}`"))),
            };
        }
        if let Some(pen) = &sec.penalty {
            em.penalty = parse_penalty(pen)?;
        }
    }
    let mean_rule = match (file.mean_rule.as_deref(), &file.means) {
        (None | Some("uniform_per_replicate"), None) => MeanDirectionRule::UniformPerReplicate,
        (None | Some("fixed"), Some(means)) => MeanDirectionRule::Fixed(
            means
                .iter()
                .map(|m| UnitVector::new(m.clone()))
                .collect::<Result<Vec<_>>>()?,
        ),
        (Some("fixed"), None) => return Err(Error::InvalidConfig("mean_rule = \"fixed\" needs `means`".into())),
        (Some(other), _) => return Err(Error::InvalidConfig(format!("mean_rule: unknown value `{other}`"))),
    };
    let ns = match file.n {
        OneOrMany::One(n) => vec![n],
        OneOrMany::Many(v) => v,
    };
    if ns.is_empty() {
        return Err(Error::InvalidConfig("n: at least one sample size is required".into()));
    }
    let seed = file.seed.unwrap_or(0);
    em.seed = seed;
    let specs: Vec<ExperimentSpec> = ns
        .into_iter()
        .map(|n| ExperimentSpec {
            d: file.d,
            n,
            replications: file.replications,
            true_weights: file.weights.clone(),
            true_kappas: file.kappas.clone(),
            mean_rule: mean_rule.clone(),
            em: em.clone(),
            seed,
        })
        .collect();
    for s in &specs {
        s.validate()?;
    }
    Ok(specs)
}

pub fn read_experiment_specs(path: &Path) -> Result<Vec<ExperimentSpec>> {
    parse_experiment_specs(&fs::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// One CSV for a set of cells: a `mean` and a `std` row per cell.
pub fn format_table_csv(tables: &[ExperimentTable]) -> String {
    let Some(first) = tables.first() else {
        return String::new();
    };
    let names: Vec<&str> = first.columns.iter().map(|c| c.name.as_str()).collect();
    let mut out = format!("d,n,replications,failures,statistic,{}\n", names.join(","));
    for t in tables {
        for (label, pick) in [("mean", 0usize), ("std", 1)] {
            let vals: Vec<String> = t
                .columns
                .iter()
                .map(|c| format!("{:.6}", if pick == 0 { c.mean } else { c.std }))
                .collect();
            let _ = writeln!(out, "{},{},{},{},{label},{}", t.d, t.n, t.replications, t.failures, vals.join(","));
        }
    }
    out
}

/// Aligned text table: means with standard deviations beneath.
pub fn format_table_text(tables: &[ExperimentTable]) -> String {
    let Some(first) = tables.first() else {
        return String::new();
    };
    let mut out = format!("{:>3} {:>6}", "d", "n");
    for c in &first.columns {
        let _ = write!(out, " {:>9}", c.name);
    }
    out.push('\n');
    for t in tables {
        let _ = write!(out, "{:>3} {:>6}", t.d, t.n);
        for c in &t.columns {
            let _ = write!(out, " {:>9.3}", c.mean);
        }
        out.push('\n');
        let _ = write!(out, "{:>3} {:>6}", "", "");
        for c in &t.columns {
            let _ = write!(out, " {:>9}", format!("({:.3})", c.std));
        }
        out.push('\n');
    }
    out
}

pub fn format_trace_csv(trace: &DivergenceTrace) -> String {
    let mut out = String::from("q,loglik,penalized_loglik\n");
    for ((q, l), p) in trace.q_values.iter().zip(&trace.loglik).zip(&trace.penalized_loglik) {
        let _ = writeln!(out, "{q},{l:.10},{p:.10}");
    }
    out
}

pub fn format_ball_report_csv(report: &BallCountReport) -> String {
    let mut out = String::from("n,epsilon,net_size,delta,bound,uniform_bound,max_fraction,violations,uniform_violations\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{:.6e},{},{:.6e},{:.6e},{:.6e},{:.6e},{},{}",
            r.n, r.epsilon, r.net_size, r.delta, r.bound, r.uniform_bound, r.max_fraction, r.violations, r.uniform_violations
        );
    }
    out
}

pub fn format_penalty_report(report: &PenaltyReport) -> String {
    let yes = |b: bool| if b { "pass" } else { "fail" };
    let mut out = format!("C1 {}\nC2 {}\nC3 {}", yes(report.c1), yes(report.c2), yes(report.c3));
    if let Some(n) = report.c3_from {
        let _ = write!(out, " (holds from n = {n})");
    }
    out.push_str("\n\nn,psi_n,log_kappa_star,penalty,bound,holds\n");
    for C3Row {
        n,
        psi_n,
        log_kappa_star,
        penalty,
        bound,
        holds,
    } in &report.rows
    {
        let _ = writeln!(out, "{n},{psi_n:.6e},{log_kappa_star:.6},{penalty:.6e},{bound:.6e},{holds}");
    }
    out
}
