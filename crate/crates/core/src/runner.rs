//! Experiment orchestration: configuration, result tables, cached maps and
//! calibrations, and the three figure pipelines.
//!
//! Every emitted table carries a provenance header (config hash, seed, tool
//! version). Outputs are deterministic for a given configuration, so
//! rerunning a command with the same seed reproduces the same bytes. A
//! creation time is recorded only when `SOURCE_DATE_EPOCH` is set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic;
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::localization::{CrlbModel, LocationModel};
use crate::radiomap::{build_map, RadioMap};
use crate::rateselect::{
    calibrate_backoff, calibrate_ci, calibrate_oracle, CalibrationRecord, CalibrationSpec,
    RateContext, RateFunction, RateSelector,
};
use crate::reliability::{self, PhaseCache, ThroughputQuadrature};

/// Reads a configuration file; absent keys take the default system values.
pub fn load_config(path: impl AsRef<Path>) -> Result<SystemConfig> {
    SystemConfig::load(path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

impl FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::validation("format", format!("unknown format {s:?} (csv, json)"))),
        }
    }
}

/// One command invocation: what to run, with which system, and where to write.
#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub name: String,
    pub config: SystemConfig,
    pub config_path: Option<PathBuf>,
    pub params: BTreeMap<String, String>,
    pub out_dir: PathBuf,
    /// Worker threads; `None` uses every available core.
    pub threads: Option<usize>,
    pub format: Format,
}

impl ExperimentPlan {
    pub fn new(name: &str, config: SystemConfig, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentPlan {
            name: name.to_owned(),
            config,
            config_path: None,
            params: BTreeMap::new(),
            out_dir: out_dir.into(),
            threads: None,
            format: Format::Csv,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.numerics.seed
    }

    /// Creates the output directory and checks that it accepts files.
    pub fn prepare(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let probe = self.out_dir.join(".locrel-write-probe");
        std::fs::write(&probe, b"")?;
        std::fs::remove_file(&probe)?;
        Ok(())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance::new(&self.config)
    }

    pub fn path(&self, stem: &str) -> PathBuf {
        self.out_dir.join(format!("{stem}.{}", self.format.extension()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created: Option<String>,
}

impl Provenance {
    pub fn new(cfg: &SystemConfig) -> Self {
        Provenance {
            version: format!("locrel {}", env!("CARGO_PKG_VERSION")),
            config_hash: cfg.hash(),
            seed: cfg.numerics.seed,
            created: std::env::var("SOURCE_DATE_EPOCH").ok(),
        }
    }
}

/// A rectangular numeric table with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultTable {
    pub name: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub params: BTreeMap<String, String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ResultTable {
    pub fn new(name: &str, provenance: Provenance, columns: &[&str]) -> Self {
        ResultTable {
            name: name.to_owned(),
            provenance,
            params: BTreeMap::new(),
            columns: columns.iter().map(|c| (*c).to_owned()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.columns.is_empty() {
            return Err(Error::validation("columns", "table has no columns"));
        }
        for (c, name) in self.columns.iter().enumerate() {
            if name.is_empty() || name.contains([',', '\n', '#']) {
                return Err(Error::validation("columns", format!("bad column name {name:?} at {c}")));
            }
        }
        if let Some(i) = self.rows.iter().position(|r| r.len() != self.columns.len()) {
            return Err(Error::validation(
                "rows",
                format!("row {i} has {} values, expected {}", self.rows[i].len(), self.columns.len()),
            ));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        self.validate()?;
        let mut s = String::new();
        let p = &self.provenance;
        writeln!(s, "# table: {}", self.name).unwrap();
        writeln!(s, "# version: {}", p.version).unwrap();
        writeln!(s, "# config_hash: {}", p.config_hash).unwrap();
        writeln!(s, "# seed: {}", p.seed).unwrap();
        if let Some(c) = &p.created {
            writeln!(s, "# created: {c}").unwrap();
        }
        for (k, v) in &self.params {
            writeln!(s, "# param.{k}: {v}").unwrap();
        }
        writeln!(s, "{}", self.columns.join(",")).unwrap();
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(s, "{}", cells.join(",")).unwrap();
        }
        Ok(s)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut name = None;
        let mut version = None;
        let mut hash = None;
        let mut seed = None;
        let mut created = None;
        let mut params = BTreeMap::new();
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest
                    .split_once(": ")
                    .ok_or_else(|| Error::Parse(format!("line {}: bad header {line:?}", n + 1)))?;
                match k {
                    "table" => name = Some(v.to_owned()),
                    "version" => version = Some(v.to_owned()),
                    "config_hash" => hash = Some(v.to_owned()),
                    "seed" => {
                        seed = Some(v.parse().map_err(|_| Error::Parse(format!("line {}: bad seed", n + 1)))?)
                    }
                    "created" => created = Some(v.to_owned()),
                    _ => match k.strip_prefix("param.") {
                        Some(p) => {
                            params.insert(p.to_owned(), v.to_owned());
                        }
                        None => return Err(Error::Parse(format!("line {}: unknown header {k:?}", n + 1))),
                    },
                }
            } else if columns.is_none() {
                columns = Some(line.split(',').map(str::to_owned).collect());
            } else {
                let row = line
                    .split(',')
                    .map(|c| c.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number {c:?}", n + 1))))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(row);
            }
        }
        let missing = |what: &str| Error::Parse(format!("missing {what} header"));
        let table = ResultTable {
            name: name.ok_or_else(|| missing("table"))?,
            provenance: Provenance {
                version: version.ok_or_else(|| missing("version"))?,
                config_hash: hash.ok_or_else(|| missing("config_hash"))?,
                seed: seed.ok_or_else(|| missing("seed"))?,
                created,
            },
            params,
            columns: columns.ok_or_else(|| Error::Parse("missing column line".into()))?,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn to_json(&self) -> Result<String> {
        self.validate()?;
        if self.rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDomain(format!(
                "table {} holds non-finite values, which JSON cannot carry",
                self.name
            )));
        }
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: ResultTable = serde_json::from_str(text)?;
        t.validate()?;
        Ok(t)
    }
}

/// Shortest round-trip decimal; exponent form outside a readable range.
fn fmt_f64(v: f64) -> String {
    let a = v.abs();
    if v == 0.0 || (1e-4..1e15).contains(&a) || !v.is_finite() {
        format!("{v}")
    } else {
        format!("{v:e}")
    }
}

pub fn emit(table: &ResultTable, format: Format, path: impl AsRef<Path>) -> Result<()> {
    let text = match format {
        Format::Csv => table.to_csv()?,
        Format::Json => table.to_json()?,
    };
    std::fs::write(path, text)?;
    Ok(())
}

/// Files written so far by a pipeline; removed again unless committed.
struct Outputs {
    paths: Vec<PathBuf>,
    committed: bool,
}

impl Outputs {
    fn new() -> Self {
        Outputs {
            paths: Vec::new(),
            committed: false,
        }
    }

    fn write(&mut self, path: PathBuf, text: &str) -> Result<()> {
        self.paths.push(path.clone());
        std::fs::write(path, text)?;
        Ok(())
    }

    fn table(&mut self, plan: &ExperimentPlan, table: &ResultTable) -> Result<()> {
        let text = match plan.format {
            Format::Csv => table.to_csv()?,
            Format::Json => table.to_json()?,
        };
        self.write(plan.path(&table.name), &text)
    }

    fn commit(mut self) -> Vec<PathBuf> {
        self.committed = true;
        std::mem::take(&mut self.paths)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = std::fs::remove_file(p);
            }
        }
    }
}

pub const MAP_FILE: &str = "map.json";

/// Loads `out_dir/map.json` if it was built from `cfg`, else builds and
/// saves it.
pub fn obtain_map(cfg: &SystemConfig, out_dir: &Path) -> Result<RadioMap> {
    let path = out_dir.join(MAP_FILE);
    if path.exists() {
        if let Ok(map) = RadioMap::load(&path) {
            if map.ensure_matches(cfg).is_ok() {
                return Ok(map);
            }
        }
    }
    let map = build_map(cfg)?;
    std::fs::create_dir_all(out_dir)?;
    map.save(&path)?;
    Ok(map)
}

/// Outage target, meta-probability bound and figure settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FigureParams {
    pub eps: f64,
    pub delta: f64,
    /// Constrained true locations for the calibrations.
    pub calib_range: (f64, f64),
    /// Curve locations for the reliability figure.
    pub curve_range: (f64, f64),
    /// True location and backoff of the outage-region figure.
    pub probe_x: f64,
    pub probe_k: f64,
}

impl Default for FigureParams {
    fn default() -> Self {
        FigureParams {
            eps: 1e-3,
            delta: 1e-3,
            calib_range: (45.0, 955.0),
            curve_range: (10.0, 990.0),
            probe_x: 300.0,
            probe_k: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig1,
    Fig2,
    Fig3,
}

impl FromStr for Figure {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig1" => Ok(Figure::Fig1),
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            _ => Err(Error::validation("figure", format!("unknown figure {s:?} (fig1, fig2, fig3)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Backoff,
    ConfInterval,
    Oracle,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Backoff, Scheme::ConfInterval, Scheme::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Backoff => "backoff",
            Scheme::ConfInterval => "ci",
            Scheme::Oracle => "oracle",
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "backoff" => Ok(Scheme::Backoff),
            "ci" | "conf_interval" => Ok(Scheme::ConfInterval),
            "oracle" => Ok(Scheme::Oracle),
            _ => Err(Error::validation("scheme", format!("unknown scheme {s:?} (backoff, ci, oracle)"))),
        }
    }
}

fn range_points(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| lo + i as f64 * step).collect()
}

/// Map, location model and quantile context shared by the pipelines.
pub struct Session<'m> {
    pub cfg: SystemConfig,
    pub params: FigureParams,
    pub model: CrlbModel,
    pub ctx: RateContext<'m>,
}

impl<'m> Session<'m> {
    pub fn new(cfg: &SystemConfig, map: &'m RadioMap, params: FigureParams) -> Result<Self> {
        map.ensure_matches(cfg)?;
        let model = CrlbModel::new(cfg)?;
        let ctx = RateContext::with_model(map, params.eps, &model, cfg)?;
        Ok(Session {
            cfg: cfg.clone(),
            params,
            model,
            ctx,
        })
    }

    pub fn calibration_spec(&self) -> Result<CalibrationSpec> {
        let (lo, hi) = self.params.calib_range;
        CalibrationSpec::new(self.params.delta, lo, hi, self.cfg.numerics.calib_x_step)
    }

    pub fn phase_cache(&self) -> Result<PhaseCache> {
        let spec = self.calibration_spec()?;
        PhaseCache::build(&spec.points(), &self.model, self.cfg.numerics.phase_nodes)
    }

    pub fn calibrate(&self, scheme: Scheme, cache: &PhaseCache) -> Result<CalibrationRecord> {
        let spec = self.calibration_spec()?;
        match scheme {
            Scheme::Backoff => calibrate_backoff(&spec, &self.ctx, cache),
            Scheme::ConfInterval => calibrate_ci(&spec, &self.ctx, cache),
            Scheme::Oracle => calibrate_oracle(&spec, &self.ctx, cache),
        }
    }

    pub fn quadrature(&self) -> ThroughputQuadrature {
        let n = &self.cfg.numerics;
        ThroughputQuadrature::new(n.throughput_phase_nodes, n.hermite_nodes)
    }

    /// Meta-probability alone at each location.
    pub fn meta_table(&self, sel: &RateSelector, xs: &[f64]) -> Result<ResultTable> {
        let bound = self.ctx.bind(sel)?;
        let nodes = self.cfg.numerics.phase_nodes;
        let rows = xs
            .par_iter()
            .map(|&x| {
                let m = reliability::meta_prob(x, &bound, &self.ctx, &self.model, nodes)?;
                Ok(vec![x, m.total, m.per_bs[0], m.per_bs[1], m.weights[0]])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = ResultTable::new(
            "meta",
            Provenance::new(&self.cfg),
            &["x_m", "meta_prob", "meta_bs1", "meta_bs2", "p_sel1"],
        )
        .param("scheme", sel.name())
        .param("eps", self.params.eps);
        t.rows = rows;
        Ok(t)
    }

    /// Throughput ratio alone at each location.
    pub fn throughput_table(&self, sel: &RateSelector, xs: &[f64]) -> Result<ResultTable> {
        let bound = self.ctx.bind(sel)?;
        let quad = self.quadrature();
        let rows = xs
            .par_iter()
            .map(|&x| {
                let w = reliability::throughput_ratio(x, &bound, &self.ctx, &self.model, &quad)?;
                Ok(vec![x, w.ratio])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut t = ResultTable::new("throughput", Provenance::new(&self.cfg), &["x_m", "omega"])
            .param("scheme", sel.name())
            .param("eps", self.params.eps);
        t.rows = rows;
        Ok(t)
    }

    /// Meta-probability and throughput ratio at each location.
    pub fn reliability_table(&self, name: &str, sel: &RateSelector, xs: &[f64]) -> Result<ResultTable> {
        let bound = self.ctx.bind(sel)?;
        let reports = reliability::report_curve(
            xs,
            &bound,
            &self.ctx,
            &self.model,
            self.cfg.numerics.phase_nodes,
            &self.quadrature(),
        )?;
        let mut t = ResultTable::new(
            name,
            Provenance::new(&self.cfg),
            &[
                "x_m",
                "meta_prob",
                "meta_bs1",
                "meta_bs2",
                "p_sel1",
                "omega",
                "meta_phase_error",
                "omega_phase_error",
            ],
        )
        .param("scheme", sel.name())
        .param("eps", self.params.eps);
        for r in reports {
            t.push(vec![
                r.x,
                r.meta_prob,
                r.meta_bs[0],
                r.meta_bs[1],
                r.selection[0],
                r.throughput_ratio,
                r.meta_phase_error,
                r.throughput_phase_error,
            ]);
        }
        Ok(t)
    }
}

/// `σ̄(x)`, phase extremes of the variance, and the ε-quantiles of both BSs.
pub fn fig1_table(session: &Session, xs: &[f64]) -> Result<ResultTable> {
    let nodes = session.cfg.numerics.phase_nodes;
    let rows = xs
        .par_iter()
        .map(|&x| -> Result<Vec<f64>> {
            let v = session.model.variance_summary(x, nodes)?;
            let map = session.ctx.map;
            Ok(vec![
                x,
                v.mean.sqrt(),
                v.min,
                v.max,
                map.eps_quantile(session.params.eps, x, 0)?,
                map.eps_quantile(session.params.eps, x, 1)?,
                map.bs_select_prob(x)?[0],
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = ResultTable::new(
        "fig1",
        Provenance::new(&session.cfg),
        &["x_m", "sigma_bar", "var_min", "var_max", "quantile_bs1", "quantile_bs2", "p_sel1"],
    )
    .param("eps", session.params.eps);
    t.rows = rows;
    Ok(t)
}

/// Outage probability against the estimate, the estimate density, and the
/// outage-region edges at the probe location (BS at the origin serving).
pub fn fig2_tables(session: &Session) -> Result<(ResultTable, ResultTable)> {
    let p = session.params;
    let (x, k) = (p.probe_x, p.probe_k);
    let sel = RateSelector::backoff(k, p.eps);
    let bound = session.ctx.bind(&sel)?;
    let ctx = &session.ctx;
    let sigmas = session.model.phase_sigmas(x, session.cfg.numerics.phase_nodes)?;
    let g = ctx.map.grid;
    let lo = g.clamp(x - 500.0);
    let hi = g.clamp(x + 500.0);
    let x_hats: Vec<f64> = g.points().into_iter().filter(|&v| v >= lo && v <= hi).collect();
    let rows = x_hats
        .par_iter()
        .map(|&xh| -> Result<Vec<f64>> {
            let p_out = reliability::outage_prob_given_estimate(x, xh, 0, &bound, ctx)?;
            let density = sigmas
                .iter()
                .map(|&s| crate::numerics::normal_pdf((xh - x) / s) / s)
                .sum::<f64>()
                / sigmas.len() as f64;
            Ok(vec![xh, bound.rate(xh, 0), p_out, density])
        })
        .collect::<Result<Vec<_>>>()?;
    let prov = Provenance::new(&session.cfg);
    let mut curve = ResultTable::new("fig2_outage", prov.clone(), &["x_hat", "rate", "p_out", "density"])
        .param("x_m", x)
        .param("k", k)
        .param("eps", p.eps)
        .param("bs", 0);
    curve.rows = rows;
    let iv = reliability::outage_interval(x, 0, &bound, ctx)?;
    let meta = reliability::meta_prob_bs(x, 0, &bound, ctx, &sigmas)?;
    let mut edges = ResultTable::new(
        "fig2_edges",
        prov,
        &["x_m", "k", "eps_quantile", "edge_lo", "edge_hi", "meta_prob_bs1"],
    )
    .param("eps", p.eps);
    edges.push(vec![x, k, ctx.quantile(x, 0), iv.lo, iv.hi, meta]);
    Ok((curve, edges))
}

/// Reads `calibration_<scheme>.json` from `dir` if it matches the session,
/// else calibrates and writes it.
pub fn obtain_calibration(
    session: &Session,
    scheme: Scheme,
    cache: &PhaseCache,
    dir: &Path,
) -> Result<CalibrationRecord> {
    let path = dir.join(format!("calibration_{}.json", scheme.name()));
    let spec = session.calibration_spec()?;
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(rec) = CalibrationRecord::from_json(&text) {
            let same = rec.config_hash == session.ctx.map.config_hash
                && rec.spec == spec
                && rec.selector.eps == session.params.eps
                && rec.selector.name() == scheme.name();
            if same {
                return Ok(rec);
            }
        }
    }
    let rec = session.calibrate(scheme, cache)?;
    std::fs::write(&path, rec.to_json())?;
    Ok(rec)
}

/// Recomputes the constrained maximum and fails if it exceeds `delta`.
pub fn enforce_calibration(session: &Session, rec: &CalibrationRecord, cache: &PhaseCache) -> Result<f64> {
    let bound = session.ctx.bind(&rec.selector)?;
    let m = reliability::meta_over(&bound, &session.ctx, cache)?
        .into_iter()
        .fold(0.0, f64::max);
    if m > session.params.delta {
        return Err(Error::Infeasible(format!(
            "{} selector reaches meta-probability {m:e} > {} on the calibration range",
            rec.selector.name(),
            session.params.delta
        )));
    }
    Ok(m)
}

fn plot_script(figure: Figure, plan: &ExperimentPlan) -> String {
    let ext = plan.format.extension();
    let loader = match plan.format {
        Format::Csv => "import csv\n\ndef load(name):\n    with open(name) as f:\n        rows = [l for l in f if not l.startswith('#')]\n    r = list(csv.DictReader(rows))\n    return {k: [float(v[k]) for v in r] for k in r[0]}\n",
        Format::Json => "import json\n\ndef load(name):\n    t = json.load(open(name))\n    return {c: [r[i] for r in t['rows']] for i, c in enumerate(t['columns'])}\n",
    };
    let body = match figure {
        Figure::Fig1 => format!(
            "t = load('fig1.{ext}')\nfig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))\na.plot(t['x_m'], t['sigma_bar'])\na.set_xlabel('x [m]'); a.set_ylabel('average std [m]')\nb.plot(t['x_m'], t['quantile_bs1'], label='BS 1')\nb.plot(t['x_m'], t['quantile_bs2'], label='BS 2')\nb.set_xlabel('x [m]'); b.set_ylabel('eps-quantile MAR [bit/s/Hz]'); b.legend()\nfig.savefig('fig1.pdf')\n"
        ),
        Figure::Fig2 => format!(
            "t = load('fig2_outage.{ext}')\ne = load('fig2_edges.{ext}')\nfig, a = plt.subplots()\na.semilogy(t['x_hat'], t['p_out'], label='outage probability')\nb = a.twinx()\nb.plot(t['x_hat'], t['density'], 'g', label='estimate density')\nfor v in (e['edge_lo'][0], e['edge_hi'][0]):\n    a.axvline(v, color='k', ls='--')\na.set_xlabel('estimated location [m]')\nfig.savefig('fig2.pdf')\n"
        ),
        Figure::Fig3 => format!(
            "fig, (a, b) = plt.subplots(1, 2, figsize=(10, 4))\nfor s in ('backoff', 'ci', 'oracle'):\n    t = load('fig3_' + s + '.{ext}')\n    a.semilogy(t['x_m'], t['meta_prob'], label=s)\n    b.plot(t['x_m'], t['omega'], label=s)\na.set_xlabel('x [m]'); a.set_ylabel('meta-probability'); a.legend()\nb.set_xlabel('x [m]'); b.set_ylabel('throughput ratio'); b.legend()\nfig.savefig('fig3.pdf')\n"
        ),
    };
    format!("import matplotlib\nmatplotlib.use('Agg')\nimport matplotlib.pyplot as plt\n{loader}\n{body}")
}

/// Runs one figure pipeline into `plan.out_dir`, returning the tables.
///
/// The radio map and calibrations are cached in the output directory. On
/// failure, files written by this run are removed.
pub fn run_figure(figure: Figure, plan: &ExperimentPlan, params: FigureParams) -> Result<Vec<ResultTable>> {
    plan.prepare()?;
    let map = obtain_map(&plan.config, &plan.out_dir)?;
    run_figure_with_map(figure, plan, params, &map)
}

pub fn run_figure_with_map(
    figure: Figure,
    plan: &ExperimentPlan,
    params: FigureParams,
    map: &RadioMap,
) -> Result<Vec<ResultTable>> {
    plan.prepare()?;
    let session = Session::new(&plan.config, map, params)?;
    let mut out = Outputs::new();
    let step = plan.config.numerics.curve_x_step;
    let (lo, hi) = params.curve_range;
    let tables = match figure {
        Figure::Fig1 => vec![fig1_table(&session, &range_points(lo, hi, step))?],
        Figure::Fig2 => {
            let (a, b) = fig2_tables(&session)?;
            vec![a, b]
        }
        Figure::Fig3 => {
            let cache = session.phase_cache()?;
            let mut records = Vec::new();
            for scheme in Scheme::ALL {
                let rec = obtain_calibration(&session, scheme, &cache, &plan.out_dir)?;
                enforce_calibration(&session, &rec, &cache)?;
                records.push(rec);
            }
            let xs = range_points(lo, hi, step);
            let mut tables = Vec::new();
            let mut summary = ResultTable::new(
                "fig3_calibration",
                Provenance::new(&plan.config),
                &["scheme", "parameter", "max_meta"],
            )
            .param("scheme_codes", "0=backoff 1=ci 2=oracle")
            .param("parameter", "k for backoff, alpha for ci, 0 for oracle")
            .param("delta", params.delta);
            for (code, rec) in records.iter().enumerate() {
                let parameter = match &rec.selector.kind {
                    crate::rateselect::SelectorKind::Backoff { k } => *k,
                    crate::rateselect::SelectorKind::ConfInterval { alpha } => *alpha,
                    crate::rateselect::SelectorKind::Oracle { .. } => 0.0,
                };
                summary.push(vec![code as f64, parameter, rec.max_meta]);
                let name = format!("fig3_{}", rec.selector.name());
                tables.push(session.reliability_table(&name, &rec.selector, &xs)?);
            }
            tables.push(summary);
            tables
        }
    };
    for t in &tables {
        out.table(plan, t)?;
    }
    let stem = match figure {
        Figure::Fig1 => "fig1",
        Figure::Fig2 => "fig2",
        Figure::Fig3 => "fig3",
    };
    out.write(plan.out_dir.join(format!("plot_{stem}.py")), &plot_script(figure, plan))?;
    out.commit();
    Ok(tables)
}

/// `σ̄(x)` and the phase extremes of the CRLB over `xs`.
pub fn crlb_sweep(cfg: &SystemConfig, xs: &[f64]) -> Result<ResultTable> {
    let model = CrlbModel::new(cfg)?;
    let nodes = cfg.numerics.phase_nodes;
    let rows = xs
        .par_iter()
        .map(|&x| {
            let v = model.variance_summary(x, nodes)?;
            Ok(vec![x, v.mean.sqrt(), v.mean, v.min, v.max])
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = ResultTable::new(
        "crlb_sweep",
        Provenance::new(cfg),
        &["x_m", "sigma_bar", "var_mean", "var_min", "var_max"],
    )
    .param("phase_nodes", nodes);
    t.rows = rows;
    Ok(t)
}

/// Quantile, outage probability of a given rate, and serving-BS
/// probability at each location.
pub fn map_query(
    map: &RadioMap,
    cfg: &SystemConfig,
    xs: &[f64],
    eps: f64,
    rate: Option<f64>,
    bs: Option<usize>,
) -> Result<ResultTable> {
    let which: Vec<usize> = match bs {
        None => vec![0, 1],
        Some(b @ 1..=2) => vec![b - 1],
        Some(b) => return Err(Error::validation("bs", format!("base station {b} is not 1 or 2"))),
    };
    let mut columns = vec!["x_m".to_owned()];
    for prefix in ["quantile_bs", "outage_bs", "p_sel"] {
        columns.extend(which.iter().map(|b| format!("{prefix}{}", b + 1)));
    }
    let columns: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut t = ResultTable::new("map_query", Provenance::new(cfg), &columns).param("eps", eps);
    for &x in xs {
        let sel = map.bs_select_prob(x)?;
        let mut row = vec![x];
        for &b in &which {
            row.push(map.eps_quantile(eps, x, b)?);
        }
        for &b in &which {
            row.push(match rate {
                Some(r) => map.outage_prob(r, x, b)?,
                None => f64::NAN,
            });
        }
        row.extend(which.iter().map(|&b| sel[b]));
        t.push(row);
    }
    if let Some(r) = rate {
        t = t.param("rate", r);
    }
    Ok(t)
}

/// Single-subcarrier closed forms at each `(x, k)`.
pub fn analytic_table(cfg: &SystemConfig, xs: &[f64], k: f64, eps: f64) -> Result<ResultTable> {
    let c = cfg.single_subcarrier();
    let tc = analytic::TailConstants::new(eps, &c)?;
    let mut t = ResultTable::new(
        "analytic",
        Provenance::new(cfg),
        &["x_m", "k", "psi", "psi_prime", "capacity", "edge_exact", "edge_approx"],
    )
    .param("eps", eps);
    for &x in xs {
        t.push(vec![
            x,
            k,
            tc.psi,
            tc.psi_prime,
            analytic::analytic_outage_capacity(eps, x, &c)?,
            analytic::edge_exact(x, k, eps, &c)?,
            analytic::edge_approx(x, k)?,
        ]);
    }
    Ok(t)
}

/// Writes `table` under `plan`, returning the path.
pub fn write_table(plan: &ExperimentPlan, table: &ResultTable) -> Result<PathBuf> {
    plan.prepare()?;
    let path = plan.path(&table.name);
    emit(table, plan.format, &path)?;
    Ok(path)
}

/// One line of the built-in self check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fast internal consistency checks on reduced settings.
pub fn selftest(cfg: &SystemConfig) -> Vec<SelfCheck> {
    fn check(checks: &mut Vec<SelfCheck>, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) {
        let (passed, detail) = f().unwrap_or_else(|e| (false, e.to_string()));
        checks.push(SelfCheck { name, passed, detail });
    }
    let mut checks = Vec::new();

    check(&mut checks, "q_function", || {
        let q = crate::numerics::q_function(1.0);
        Ok(((q - 0.158_655_253_931_457_05).abs() < 1e-15, format!("Q(1) = {q}")))
    });

    check(&mut checks, "config_round_trip", || {
        let back = SystemConfig::from_json(&cfg.to_json())?;
        Ok((back == *cfg, format!("hash {}", &cfg.hash()[..12])))
    });

    check(&mut checks, "tail_constants", || {
        let t = analytic::TailConstants::new(1e-3, &cfg.single_subcarrier())?;
        Ok((t.psi > 0.0 && t.psi_prime > 0.0, format!("psi = {:.1}, psi' = {:.2}", t.psi, t.psi_prime)))
    });

    check(&mut checks, "crlb_midpoint_symmetry", || {
        let model = CrlbModel::new(cfg)?;
        let mid = 0.5 * (cfg.bs_positions[0] + cfg.bs_positions[1]);
        let off = 0.2 * (cfg.bs_positions[1] - cfg.bs_positions[0]);
        let a = model.average_std(mid - off, 8)?;
        let b = model.average_std(mid + off, 8)?;
        Ok((((a - b) / a).abs() < 1e-9, format!("{a:.6} vs {b:.6} m")))
    });

    check(&mut checks, "small_map_meta", || {
        let mut c = cfg.clone();
        let span = cfg.bs_positions[1] - cfg.bs_positions[0];
        c.numerics.grid_min = cfg.bs_positions[0] - 0.2 * span;
        c.numerics.grid_max = cfg.bs_positions[1] + 0.2 * span;
        c.numerics.grid_step = span / 100.0;
        c.numerics.mar_samples = 20_000;
        c.numerics.bs_select_samples = 500;
        let map = build_map(&c)?;
        let model = CrlbModel::new(&c)?;
        let ctx = RateContext::with_model(&map, 1e-3, &model, &c)?;
        let sel = RateSelector::backoff(0.25, 1e-3);
        let bound = ctx.bind(&sel)?;
        let x = cfg.bs_positions[0] + 0.3 * span;
        let m = reliability::meta_prob(x, &bound, &ctx, &model as &dyn LocationModel, 16)?;
        Ok(((0.0..=1.0).contains(&m.total), format!("meta({x}) = {:.3e}", m.total)))
    });

    checks
}
