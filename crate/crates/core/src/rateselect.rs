//! Location-based rate selection and its calibration.
//!
//! A selector maps an estimated location `x̂` and serving BS to a rate. Three
//! families are provided: a scaled quantile (backoff), the worst quantile
//! over a Gaussian confidence interval around `x̂`, and a per-cell table
//! tuned directly against the reliability constraint (oracle).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::localization::LocationModel;
use crate::numerics::q_inverse;
use crate::radiomap::{GridSpec, RadioMap};
use crate::reliability::{self, PhaseCache};

/// Smallest backoff factor tried by the calibration.
pub const K_MIN: f64 = 1e-3;
/// Smallest confidence level tried by the calibration.
pub const ALPHA_MIN: f64 = 1e-15;
/// Ratio between neighbouring oracle rate candidates.
pub const ORACLE_RATIO: f64 = 1.01;

/// `σ̄` at every map grid point. Locations outside the BS segment use the
/// nearest admissible point, since position and clock bias are not
/// separable there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StdTable {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl StdTable {
    pub fn build(
        grid: GridSpec,
        model: &dyn LocationModel,
        nodes: usize,
        cfg: &SystemConfig,
    ) -> Result<Self> {
        let values = grid
            .points()
            .par_iter()
            .map(|&x| model.average_std(admissible(x, cfg), nodes))
            .collect::<Result<Vec<_>>>()?;
        Ok(StdTable { grid, values })
    }

    /// Interpolated `σ̄(x̂)`, clamped to the grid.
    pub fn at(&self, x_hat: f64) -> f64 {
        let (i, t) = self.grid.locate(self.grid.clamp(x_hat)).expect("clamped");
        if t == 0.0 {
            self.values[i]
        } else {
            self.values[i] + t * (self.values[i + 1] - self.values[i])
        }
    }
}

/// Clamps `x` into the part of the BS segment where the CRLB exists.
pub fn admissible(x: f64, cfg: &SystemConfig) -> f64 {
    let [a, b] = cfg.bs_positions;
    let d = cfg.numerics.min_bs_distance;
    x.clamp(a.min(b) + d, a.max(b) - d)
}

/// Per-cell oracle rates; a query uses the nearest grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub grid: GridSpec,
    pub rates: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum SelectorKind {
    Backoff { k: f64 },
    ConfInterval { alpha: f64 },
    Oracle { table: OracleTable },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSelector {
    #[serde(flatten)]
    pub kind: SelectorKind,
    pub eps: f64,
}

impl RateSelector {
    pub fn backoff(k: f64, eps: f64) -> Self {
        RateSelector {
            kind: SelectorKind::Backoff { k },
            eps,
        }
    }

    pub fn conf_interval(alpha: f64, eps: f64) -> Self {
        RateSelector {
            kind: SelectorKind::ConfInterval { alpha },
            eps,
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            SelectorKind::Backoff { .. } => "backoff",
            SelectorKind::ConfInterval { .. } => "ci",
            SelectorKind::Oracle { .. } => "oracle",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(Error::validation("eps", format!("{} not in (0, 1)", self.eps)));
        }
        match &self.kind {
            SelectorKind::Backoff { k } if !(*k > 0.0 && *k <= 1.0) => {
                Err(Error::validation("k", format!("{k} not in (0, 1]")))
            }
            SelectorKind::ConfInterval { alpha } if !(*alpha > 0.0 && *alpha < 1.0) => {
                Err(Error::validation("alpha", format!("{alpha} not in (0, 1)")))
            }
            SelectorKind::Oracle { table } => {
                let ok = table
                    .rates
                    .iter()
                    .all(|r| r.len() == table.grid.len && r.iter().all(|&v| v >= 0.0));
                if ok {
                    Ok(())
                } else {
                    Err(Error::validation("table", "rates must be non-negative, one per grid point"))
                }
            }
            _ => Ok(()),
        }
    }
}

/// Everything a selector needs from the map at one outage level.
#[derive(Debug, Clone)]
pub struct RateContext<'a> {
    pub map: &'a RadioMap,
    pub eps: f64,
    /// `F⁻¹(eps; ·, bs)` at every grid point.
    pub columns: [Vec<f64>; 2],
    pub std: StdTable,
}

impl<'a> RateContext<'a> {
    pub fn new(map: &'a RadioMap, eps: f64, std: StdTable) -> Result<Self> {
        if std.grid != map.grid {
            return Err(Error::validation("std", "standard-deviation table grid differs from the map grid"));
        }
        Ok(RateContext {
            map,
            eps,
            columns: [map.quantile_column(eps, 0)?, map.quantile_column(eps, 1)?],
            std,
        })
    }

    /// Builds the `σ̄` table from `model` first.
    pub fn with_model(
        map: &'a RadioMap,
        eps: f64,
        model: &dyn LocationModel,
        cfg: &SystemConfig,
    ) -> Result<Self> {
        let std = StdTable::build(map.grid, model, cfg.numerics.phase_nodes, cfg)?;
        RateContext::new(map, eps, std)
    }

    pub fn grid(&self) -> &GridSpec {
        &self.map.grid
    }

    /// `F⁻¹(eps; x̂, bs)` with `x̂` clamped to the grid.
    pub fn quantile(&self, x_hat: f64, bs: usize) -> f64 {
        let g = &self.map.grid;
        let (i, t) = g.locate(g.clamp(x_hat)).expect("clamped");
        let c = &self.columns[bs];
        if t == 0.0 {
            c[i]
        } else {
            c[i] + t * (c[i + 1] - c[i])
        }
    }

    /// Smallest quantile over `[lo, hi]` (clamped to the grid).
    pub fn min_quantile(&self, lo: f64, hi: f64, bs: usize) -> f64 {
        let g = &self.map.grid;
        let (lo, hi) = (g.clamp(lo), g.clamp(hi));
        let ends = self.quantile(lo, bs).min(self.quantile(hi, bs));
        if self.map.unimodal {
            // each column peaks at its BS, so the minimum sits at an end
            return ends;
        }
        let first = ((lo - g.min) / g.step).ceil() as usize;
        let last = (((hi - g.min) / g.step).floor() as usize).min(g.len - 1);
        (first..=last).fold(ends, |m, i| m.min(self.columns[bs][i]))
    }

    pub fn bind(&'a self, selector: &'a RateSelector) -> Result<BoundSelector<'a>> {
        selector.validate()?;
        if (selector.eps - self.eps).abs() > 1e-15 * self.eps {
            return Err(Error::validation(
                "eps",
                format!("selector level {} differs from context level {}", selector.eps, self.eps),
            ));
        }
        let rule = match &selector.kind {
            SelectorKind::Backoff { k } => Rule::Backoff(*k),
            SelectorKind::ConfInterval { alpha } => Rule::Interval(q_inverse(alpha / 2.0)),
            SelectorKind::Oracle { table } => {
                if table.grid != self.map.grid {
                    return Err(Error::validation("table", "oracle grid differs from the map grid"));
                }
                Rule::Table(table)
            }
        };
        Ok(BoundSelector { ctx: self, rule })
    }
}

#[derive(Debug, Clone, Copy)]
enum Rule<'a> {
    Backoff(f64),
    /// Half-width of the interval in units of `σ̄(x̂)`.
    Interval(f64),
    Table(&'a OracleTable),
}

/// A rate function over estimated locations.
pub trait RateFunction: Sync {
    fn rate(&self, x_hat: f64, bs: usize) -> f64;

    /// Rates at every grid point of the context map.
    fn grid_rates(&self, bs: usize) -> Vec<f64>;

    /// Where the rate jumps between adjacent grid points `left < right`, for
    /// piecewise-constant rules. `None` means the rate is searched for the
    /// crossing instead.
    fn step_edge(&self, _left: f64, _right: f64) -> Option<f64> {
        None
    }
}

/// A selector evaluated against a [`RateContext`].
#[derive(Debug, Clone, Copy)]
pub struct BoundSelector<'a> {
    ctx: &'a RateContext<'a>,
    rule: Rule<'a>,
}

impl RateFunction for BoundSelector<'_> {
    fn rate(&self, x_hat: f64, bs: usize) -> f64 {
        let ctx = self.ctx;
        match self.rule {
            Rule::Backoff(k) => k * ctx.quantile(x_hat, bs),
            Rule::Interval(q) => {
                let w = q * ctx.std.at(x_hat);
                ctx.min_quantile(x_hat - w, x_hat + w, bs)
            }
            Rule::Table(t) => t.rates[bs][ctx.grid().nearest(x_hat)],
        }
    }

    fn grid_rates(&self, bs: usize) -> Vec<f64> {
        match self.rule {
            Rule::Backoff(k) => self.ctx.columns[bs].iter().map(|v| k * v).collect(),
            Rule::Table(t) => t.rates[bs].clone(),
            Rule::Interval(_) => self
                .ctx
                .grid()
                .points()
                .iter()
                .map(|&x| self.rate(x, bs))
                .collect(),
        }
    }

    fn step_edge(&self, left: f64, right: f64) -> Option<f64> {
        match self.rule {
            // nearest-point cells switch halfway
            Rule::Table(_) => Some(0.5 * (left + right)),
            _ => None,
        }
    }
}

/// The ideal rate `F⁻¹(eps; x̂, bs)`.
#[derive(Debug, Clone, Copy)]
pub struct IdealSelector<'a>(pub &'a RateContext<'a>);

impl RateFunction for IdealSelector<'_> {
    fn rate(&self, x_hat: f64, bs: usize) -> f64 {
        self.0.quantile(x_hat, bs)
    }

    fn grid_rates(&self, bs: usize) -> Vec<f64> {
        self.0.columns[bs].clone()
    }
}

pub fn backoff_rate(x_hat: f64, bs: usize, k: f64, eps: f64, map: &RadioMap) -> Result<f64> {
    if !(k > 0.0 && k <= 1.0) {
        return Err(Error::validation("k", format!("{k} not in (0, 1]")));
    }
    Ok(k * map.eps_quantile(eps, map.grid.clamp(x_hat), bs)?)
}

/// Smallest `F⁻¹(eps; ·, bs)` over `x̂ ± q_{1−α/2} σ̄(x̂)`.
pub fn ci_rate(
    x_hat: f64,
    bs: usize,
    alpha: f64,
    eps: f64,
    map: &RadioMap,
    std: &StdTable,
) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::validation("alpha", format!("{alpha} not in (0, 1)")));
    }
    let ctx = RateContext::new(map, eps, std.clone())?;
    let w = q_inverse(alpha / 2.0) * std.at(x_hat);
    Ok(ctx.min_quantile(x_hat - w, x_hat + w, bs))
}

pub fn oracle_rate(x_hat: f64, bs: usize, table: &OracleTable) -> Result<f64> {
    let g = &table.grid;
    if !(x_hat >= g.min - 0.5 * g.step && x_hat <= g.max() + 0.5 * g.step) {
        return Err(Error::OutOfMapRange {
            x: x_hat,
            lo: g.min,
            hi: g.max(),
        });
    }
    Ok(table.rates[bs][g.nearest(x_hat)])
}

/// The reliability constraint a calibration must meet.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSpec {
    /// Bound on the meta-probability.
    pub delta: f64,
    pub x_min: f64,
    pub x_max: f64,
    pub x_step: f64,
}

impl CalibrationSpec {
    pub fn new(delta: f64, x_min: f64, x_max: f64, x_step: f64) -> Result<Self> {
        let spec = CalibrationSpec {
            delta,
            x_min,
            x_max,
            x_step,
        };
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::validation("delta", format!("{delta} not in (0, 1)")));
        }
        if !(x_step > 0.0 && x_min <= x_max) {
            return Err(Error::validation("x_range", format!("empty range [{x_min}, {x_max}] step {x_step}")));
        }
        Ok(spec)
    }

    pub fn points(&self) -> Vec<f64> {
        let n = ((self.x_max - self.x_min) / self.x_step + 1e-9).floor() as usize;
        (0..=n).map(|i| self.x_min + i as f64 * self.x_step).collect()
    }

    fn check_map(&self, map: &RadioMap) -> Result<()> {
        if self.x_min < map.grid.min || self.x_max > map.grid.max() {
            return Err(Error::validation(
                "x_range",
                format!(
                    "[{}, {}] not inside map grid [{}, {}]",
                    self.x_min,
                    self.x_max,
                    map.grid.min,
                    map.grid.max()
                ),
            ));
        }
        Ok(())
    }
}

/// Outcome of a calibration: the tuned selector and the constraint it meets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub selector: RateSelector,
    pub spec: CalibrationSpec,
    /// Largest meta-probability over the calibration grid at the returned selector.
    pub max_meta: f64,
    pub config_hash: String,
    pub map_seed: u64,
    pub version: String,
}

impl CalibrationRecord {
    fn new(selector: RateSelector, spec: CalibrationSpec, max_meta: f64, map: &RadioMap) -> Self {
        CalibrationRecord {
            selector,
            spec,
            max_meta,
            config_hash: map.config_hash.clone(),
            map_seed: map.seed,
            version: env!("CARGO_PKG_VERSION").to_owned(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("record serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: CalibrationRecord = serde_json::from_str(text)?;
        rec.selector.validate()?;
        Ok(rec)
    }
}

fn max_meta(ctx: &RateContext, sel: &RateSelector, cache: &PhaseCache) -> Result<f64> {
    let bound = ctx.bind(sel)?;
    let values = reliability::meta_over(&bound, ctx, cache)?;
    Ok(values.into_iter().fold(0.0, f64::max))
}

/// Largest backoff factor whose meta-probability stays below `delta` over
/// the calibration grid, to within `1e-3`.
pub fn calibrate_backoff(
    spec: &CalibrationSpec,
    ctx: &RateContext,
    cache: &PhaseCache,
) -> Result<CalibrationRecord> {
    spec.check_map(ctx.map)?;
    let meta = |k: f64| max_meta(ctx, &RateSelector::backoff(k, ctx.eps), cache);
    let top = meta(1.0)?;
    if top <= spec.delta {
        return Ok(CalibrationRecord::new(RateSelector::backoff(1.0, ctx.eps), *spec, top, ctx.map));
    }
    let mut lo_meta = meta(K_MIN)?;
    if lo_meta > spec.delta {
        return Err(Error::Infeasible(format!(
            "backoff k = {K_MIN} still gives meta-probability {lo_meta:e} > {}",
            spec.delta
        )));
    }
    let (mut lo, mut hi) = (K_MIN, 1.0);
    while hi - lo > 1e-3 {
        let mid = 0.5 * (lo + hi);
        let m = meta(mid)?;
        if m <= spec.delta {
            lo = mid;
            lo_meta = m;
        } else {
            hi = mid;
        }
    }
    Ok(CalibrationRecord::new(RateSelector::backoff(lo, ctx.eps), *spec, lo_meta, ctx.map))
}

/// Largest confidence level `α` (bisection in `log α` until the bracket
/// ratio is below 1.5) meeting the constraint.
pub fn calibrate_ci(
    spec: &CalibrationSpec,
    ctx: &RateContext,
    cache: &PhaseCache,
) -> Result<CalibrationRecord> {
    spec.check_map(ctx.map)?;
    let meta = |a: f64| max_meta(ctx, &RateSelector::conf_interval(a, ctx.eps), cache);
    let top_alpha = 1.0 - 1e-12;
    let top = meta(top_alpha)?;
    if top <= spec.delta {
        return Ok(CalibrationRecord::new(
            RateSelector::conf_interval(top_alpha, ctx.eps),
            *spec,
            top,
            ctx.map,
        ));
    }
    let mut lo_meta = meta(ALPHA_MIN)?;
    if lo_meta > spec.delta {
        return Err(Error::Infeasible(format!(
            "confidence level {ALPHA_MIN:e} still gives meta-probability {lo_meta:e} > {}",
            spec.delta
        )));
    }
    let (mut lo, mut hi) = (ALPHA_MIN.ln(), top_alpha.ln());
    while hi - lo > 1.5f64.ln() {
        let mid = 0.5 * (lo + hi);
        let m = meta(mid.exp())?;
        if m <= spec.delta {
            lo = mid;
            lo_meta = m;
        } else {
            hi = mid;
        }
    }
    Ok(CalibrationRecord::new(
        RateSelector::conf_interval(lo.exp(), ctx.eps),
        *spec,
        lo_meta,
        ctx.map,
    ))
}

/// Greedy per-cell search for the oracle table.
///
/// Starts from the largest feasible backoff table sampled at the grid
/// points. Each pass then raises every cell (farthest from its BS first) to
/// its next candidate `F⁻¹(eps; x̂, bs) / 1.01^m` if every constrained
/// location stays below `delta`, until a full pass changes nothing.
pub fn calibrate_oracle(
    spec: &CalibrationSpec,
    ctx: &RateContext,
    cache: &PhaseCache,
) -> Result<CalibrationRecord> {
    spec.check_map(ctx.map)?;
    let map = ctx.map;
    let grid = map.grid;
    let target = spec.delta * (1.0 - 1e-3);
    let xs = &cache.xs;
    let weights: Vec<[f64; 2]> = xs
        .iter()
        .map(|&x| map.bs_select_prob(x))
        .collect::<Result<_>>()?;
    let thresholds: [Vec<f64>; 2] = [0, 1].map(|b| xs.iter().map(|&x| ctx_threshold(ctx, x, b)).collect());
    let masses = reliability::CellMasses::new(&grid, cache)?;

    // start: grid-sampled backoff, with the factor tuned for this table
    let backoff_table = |k: f64| OracleTable {
        grid,
        rates: [0, 1].map(|b| ctx.columns[b].iter().map(|v| k * v).collect()),
    };
    let table_meta = |t: &OracleTable| -> Vec<f64> {
        (0..xs.len())
            .map(|n| {
                (0..2)
                    .map(|b| {
                        weights[n][b]
                            * t.rates[b]
                                .iter()
                                .enumerate()
                                .filter(|(_, &r)| r > thresholds[b][n])
                                .map(|(c, _)| masses.mass(n, c))
                                .sum::<f64>()
                    })
                    .sum()
            })
            .collect()
    };
    let feasible = |k: f64| table_meta(&backoff_table(k)).iter().all(|&m| m <= target);
    if !feasible(K_MIN) {
        return Err(Error::Infeasible(format!("oracle start with k = {K_MIN} violates the bound")));
    }
    let (mut lo, mut hi) = (K_MIN, 1.0);
    if feasible(1.0) {
        lo = 1.0;
    }
    while hi - lo > 1e-4 {
        let mid = 0.5 * (lo + hi);
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut table = backoff_table(lo);
    let mut meta = table_meta(&table);

    // true locations sorted by threshold, per BS
    let order: [Vec<usize>; 2] = [0, 1].map(|b| {
        let mut o: Vec<usize> = (0..xs.len()).collect();
        o.sort_by(|&p, &q| thresholds[b][p].total_cmp(&thresholds[b][q]));
        o
    });
    let mut cells: Vec<(usize, usize)> = (0..2)
        .flat_map(|b| (0..grid.len).map(move |c| (b, c)))
        .collect();
    cells.sort_by(|p, q| {
        let dp = (grid.x(p.1) - map.bs_positions[p.0]).abs();
        let dq = (grid.x(q.1) - map.bs_positions[q.0]).abs();
        dq.total_cmp(&dp).then(p.cmp(q))
    });

    // one candidate step per cell and pass, so neighbouring cells share the
    // budget of the locations they both reach
    let mut frozen = vec![[false; 2]; grid.len];
    loop {
        let mut changed = false;
        for &(b, c) in &cells {
            if frozen[c][b] {
                continue;
            }
            let old = table.rates[b][c];
            let ceiling = ctx.columns[b][c];
            if ceiling <= 0.0 || old >= ceiling {
                frozen[c][b] = true;
                continue;
            }
            let new = if old > 0.0 {
                // `old` may itself be a candidate up to rounding
                let m = (ceiling / old).ln() / ORACLE_RATIO.ln();
                let steps = if (m - m.round()).abs() < 1e-9 { m.round() - 1.0 } else { m.floor() };
                ceiling / ORACLE_RATIO.powf(steps.max(0.0))
            } else {
                ceiling
            };
            if new <= old {
                frozen[c][b] = true;
                continue;
            }
            // locations whose threshold falls in [old, new) start seeing this cell
            let start = order[b].partition_point(|&n| thresholds[b][n] < old);
            let reached = order[b][start..].partition_point(|&n| thresholds[b][n] < new);
            let affected = &order[b][start..start + reached];
            let fits = affected
                .iter()
                .all(|&n| meta[n] + weights[n][b] * masses.mass(n, c) <= target);
            if !fits {
                // meta only grows, so this step stays infeasible
                frozen[c][b] = true;
                continue;
            }
            for &n in affected {
                meta[n] += weights[n][b] * masses.mass(n, c);
            }
            table.rates[b][c] = new;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    let selector = RateSelector {
        kind: SelectorKind::Oracle { table },
        eps: ctx.eps,
    };
    let achieved = max_meta(ctx, &selector, cache)?;
    if achieved > spec.delta {
        return Err(Error::Infeasible(format!(
            "oracle table reaches meta-probability {achieved:e} > {}",
            spec.delta
        )));
    }
    Ok(CalibrationRecord::new(selector, *spec, achieved, map))
}

fn ctx_threshold(ctx: &RateContext, x: f64, bs: usize) -> f64 {
    ctx.quantile(x, bs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::localization::ConstantStd;
    use crate::radiomap::build_map;
    use std::sync::OnceLock;

    fn small() -> &'static (SystemConfig, RadioMap) {
        static MAP: OnceLock<(SystemConfig, RadioMap)> = OnceLock::new();
        MAP.get_or_init(|| {
            let mut c = SystemConfig::default();
            c.numerics.grid_min = -200.0;
            c.numerics.grid_max = 1200.0;
            c.numerics.grid_step = 10.0;
            c.numerics.mar_samples = 20_000;
            c.numerics.bs_select_samples = 1_000;
            let m = build_map(&c).unwrap();
            (c, m)
        })
    }

    fn ctx(sd: f64) -> RateContext<'static> {
        let (c, m) = small();
        RateContext::with_model(m, 1e-3, &ConstantStd(sd), c).unwrap()
    }

    #[test]
    fn backoff_is_proportional() {
        let (_, m) = small();
        let full = backoff_rate(300.0, 0, 1.0, 1e-3, m).unwrap();
        assert_eq!(full, m.eps_quantile(1e-3, 300.0, 0).unwrap());
        let half = backoff_rate(300.0, 0, 0.5, 1e-3, m).unwrap();
        let quarter = backoff_rate(300.0, 0, 0.25, 1e-3, m).unwrap();
        assert!((half - 2.0 * quarter).abs() < 1e-12 * half);
        // clamps outside the grid
        assert_eq!(backoff_rate(-1e4, 0, 1.0, 1e-3, m).unwrap(), m.eps_quantile(1e-3, -200.0, 0).unwrap());
        assert!(backoff_rate(300.0, 0, 1.5, 1e-3, m).is_err());
    }

    #[test]
    fn ci_rate_limits_and_nesting() {
        let (_, m) = small();
        let ctx = ctx(8.0);
        let ideal = m.eps_quantile(1e-3, 300.0, 0).unwrap();
        let loose = ci_rate(300.0, 0, 1.0 - 1e-12, 1e-3, m, &ctx.std).unwrap();
        assert!((loose - ideal).abs() < 1e-6 * ideal);
        let mut last = f64::INFINITY;
        for a in [0.5, 1e-2, 1e-4, 1e-8] {
            let r = ci_rate(300.0, 0, a, 1e-3, m, &ctx.std).unwrap();
            assert!(r <= last && r <= ideal);
            last = r;
        }
    }

    #[test]
    fn ci_rate_matches_dense_scan() {
        let (_, m) = small();
        let ctx = ctx(9.0);
        let alpha = 1.6e-5;
        let w = q_inverse(alpha / 2.0) * 9.0;
        for x_hat in [300.0, 47.0, 962.5] {
            let got = ci_rate(x_hat, 0, alpha, 1e-3, m, &ctx.std).unwrap();
            let steps = (2.0 * w / 0.1).ceil() as usize;
            let scan = (0..=steps)
                .map(|s| (x_hat - w + s as f64 * 0.1).min(x_hat + w))
                .chain([x_hat + w])
                .map(|x| m.eps_quantile(1e-3, x, 0).unwrap())
                .fold(f64::INFINITY, f64::min);
            // the scan can only miss the exact minimizer between its points
            assert!(got <= scan + 1e-12 && got >= scan - 0.01 * scan, "{x_hat}: {got} vs {scan}");
        }
    }

    #[test]
    fn selectors_stay_below_ideal() {
        let ctx = ctx(7.0);
        let table = OracleTable {
            grid: ctx.map.grid,
            rates: [ctx.columns[0].clone(), ctx.columns[1].iter().map(|v| 0.5 * v).collect()],
        };
        let sels = [
            RateSelector::backoff(0.3, 1e-3),
            RateSelector::conf_interval(1e-3, 1e-3),
            RateSelector {
                kind: SelectorKind::Oracle { table },
                eps: 1e-3,
            },
        ];
        for s in &sels {
            let b = ctx.bind(s).unwrap();
            for bs in 0..2 {
                for (r, q) in b.grid_rates(bs).iter().zip(&ctx.columns[bs]) {
                    assert!(*r <= q + 1e-12);
                }
            }
        }
    }

    #[test]
    fn oracle_lookup_is_nearest_cell() {
        let ctx = ctx(7.0);
        let g = ctx.map.grid;
        let table = OracleTable {
            grid: g,
            rates: [(0..g.len).map(|i| i as f64).collect(), vec![1.0; g.len]],
        };
        assert_eq!(oracle_rate(g.x(7), 0, &table).unwrap(), 7.0);
        assert_eq!(oracle_rate(g.x(7) + 0.49 * g.step, 0, &table).unwrap(), 7.0);
        assert_eq!(oracle_rate(g.x(7) + 0.51 * g.step, 0, &table).unwrap(), 8.0);
        assert!(oracle_rate(g.max() + g.step, 0, &table).is_err());
    }

    #[test]
    fn records_round_trip() {
        let (_, m) = small();
        let spec = CalibrationSpec::new(1e-3, 45.0, 955.0, 5.0).unwrap();
        let rec = CalibrationRecord::new(RateSelector::conf_interval(1.6e-5, 1e-3), spec, 9e-4, m);
        let back = CalibrationRecord::from_json(&rec.to_json()).unwrap();
        assert_eq!(back, rec);
        assert!(rec.to_json().contains("\"scheme\": \"conf_interval\""));
        assert!(CalibrationSpec::new(1.5, 0.0, 1.0, 1.0).is_err());
    }
}
