//! Reliability of a rate selector under location uncertainty.
//!
//! For a true location `x` and serving BS `i`, the selected rate fails the
//! outage target exactly when `R(x̂) > F⁻¹(ε; x, i)`. The set of such `x̂`
//! (the outage region) is found on the map grid and refined by bisection.
//! Its Gaussian mass, averaged over the scatter phases, is the
//! meta-probability.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::localization::LocationModel;
use crate::numerics::{bisect, q_function, GaussHermite};
use crate::radiomap::GridSpec;
use crate::rateselect::{RateContext, RateFunction};

/// Edge tolerance of the outage-region bisection, metres.
pub const EDGE_TOL: f64 = 1e-2;

/// Union of disjoint intervals, in increasing order. Ends may be infinite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutageRegion {
    pub pieces: Vec<(f64, f64)>,
}

impl OutageRegion {
    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn hull(&self) -> Option<(f64, f64)> {
        Some((self.pieces.first()?.0, self.pieces.last()?.1))
    }

    /// Probability that `N(x, σ²)` falls in the region.
    pub fn gaussian_mass(&self, x: f64, sigma: f64) -> f64 {
        self.pieces
            .iter()
            .map(|&(lo, hi)| interval_mass(lo, hi, x, sigma))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OutageInterval {
    pub lo: f64,
    pub hi: f64,
    pub empty: bool,
}

/// `P(lo < N(x, σ²) < hi)`, using whichever tails avoid cancellation.
pub fn interval_mass(lo: f64, hi: f64, x: f64, sigma: f64) -> f64 {
    let zl = (lo - x) / sigma;
    let zh = (hi - x) / sigma;
    if zl >= 0.0 {
        q_function(zl) - q_function(zh)
    } else if zh <= 0.0 {
        q_function(-zh) - q_function(-zl)
    } else {
        1.0 - q_function(-zl) - q_function(zh)
    }
}

/// Outage probability at `x` for the rate chosen at `x̂`.
pub fn outage_prob_given_estimate(
    x: f64,
    x_hat: f64,
    bs: usize,
    sel: &dyn RateFunction,
    ctx: &RateContext,
) -> Result<f64> {
    ctx.map.outage_prob(sel.rate(x_hat, bs), x, bs)
}

fn threshold(ctx: &RateContext, x: f64, bs: usize) -> Result<f64> {
    ctx.map.grid.locate(x)?;
    Ok(ctx.quantile(x, bs))
}

/// Region where `rate(x̂) > thr`, from a grid scan with bisected edges.
fn region_on_grid(
    thr: f64,
    rates: &[f64],
    sel: &dyn RateFunction,
    bs: usize,
    grid: &GridSpec,
) -> OutageRegion {
    let f = |x: f64| sel.rate(x, bs) - thr;
    let crossing = |a: f64, b: f64| {
        sel.step_edge(a, b)
            .or_else(|| bisect(f, a, b, EDGE_TOL))
            .unwrap_or(0.5 * (a + b))
    };
    let mut pieces = Vec::new();
    let mut i = 0;
    while i < rates.len() {
        if rates[i] <= thr {
            i += 1;
            continue;
        }
        let start = i;
        while i < rates.len() && rates[i] > thr {
            i += 1;
        }
        let end = i - 1;
        let lo = if start == 0 {
            f64::NEG_INFINITY
        } else {
            crossing(grid.x(start - 1), grid.x(start))
        };
        let hi = if end == rates.len() - 1 {
            f64::INFINITY
        } else {
            crossing(grid.x(end), grid.x(end + 1))
        };
        pieces.push((lo, hi));
    }
    OutageRegion { pieces }
}

/// All `x̂` whose selected rate is too high for true location `x`.
pub fn outage_region(
    x: f64,
    bs: usize,
    sel: &dyn RateFunction,
    ctx: &RateContext,
) -> Result<OutageRegion> {
    let thr = threshold(ctx, x, bs)?;
    Ok(region_on_grid(thr, &sel.grid_rates(bs), sel, bs, &ctx.map.grid))
}

/// The outage region as one interval; more than one piece is reported as
/// [`Error::NonMonotoneSelector`].
pub fn outage_interval(
    x: f64,
    bs: usize,
    sel: &dyn RateFunction,
    ctx: &RateContext,
) -> Result<OutageInterval> {
    let region = outage_region(x, bs, sel, ctx)?;
    match region.pieces.as_slice() {
        [] => Ok(OutageInterval {
            lo: x,
            hi: x,
            empty: true,
        }),
        [(lo, hi)] => Ok(OutageInterval {
            lo: *lo,
            hi: *hi,
            empty: false,
        }),
        pieces => {
            let (lo, hi) = region.hull().expect("non-empty");
            Err(Error::NonMonotoneSelector {
                pieces: pieces.len(),
                lo,
                hi,
            })
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Phase-averaged Gaussian mass of the outage region of BS `bs`.
///
/// `sigmas` holds `σ(x; φ)` on the tensor phase grid.
pub fn meta_prob_bs(
    x: f64,
    bs: usize,
    sel: &dyn RateFunction,
    ctx: &RateContext,
    sigmas: &[f64],
) -> Result<f64> {
    let region = outage_region(x, bs, sel, ctx)?;
    Ok(region_meta(&region, x, sigmas))
}

fn region_meta(region: &OutageRegion, x: f64, sigmas: &[f64]) -> f64 {
    if region.is_empty() {
        return 0.0;
    }
    mean(sigmas.iter().map(|&s| region.gaussian_mass(x, s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetaBreakdown {
    pub total: f64,
    pub per_bs: [f64; 2],
    /// Serving-BS probabilities used as mixture weights.
    pub weights: [f64; 2],
}

/// BS-averaged meta-probability at `x`.
pub fn meta_prob(
    x: f64,
    sel: &dyn RateFunction,
    ctx: &RateContext,
    model: &dyn LocationModel,
    nodes: usize,
) -> Result<MetaBreakdown> {
    let sigmas = model.phase_sigmas(x, nodes)?;
    let weights = ctx.map.bs_select_prob(x)?;
    let per_bs = [
        meta_prob_bs(x, 0, sel, ctx, &sigmas)?,
        meta_prob_bs(x, 1, sel, ctx, &sigmas)?,
    ];
    Ok(MetaBreakdown {
        total: weights[0] * per_bs[0] + weights[1] * per_bs[1],
        per_bs,
        weights,
    })
}

/// Phase-grid standard deviations at a fixed set of true locations.
#[derive(Debug, Clone)]
pub struct PhaseCache {
    pub xs: Vec<f64>,
    pub nodes: usize,
    pub sigmas: Vec<Vec<f64>>,
}

impl PhaseCache {
    pub fn build(xs: &[f64], model: &dyn LocationModel, nodes: usize) -> Result<Self> {
        let sigmas = xs
            .par_iter()
            .map(|&x| model.phase_sigmas(x, nodes))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhaseCache {
            xs: xs.to_vec(),
            nodes,
            sigmas,
        })
    }
}

/// Meta-probability at every cached location.
pub fn meta_over(sel: &dyn RateFunction, ctx: &RateContext, cache: &PhaseCache) -> Result<Vec<f64>> {
    let rates = [sel.grid_rates(0), sel.grid_rates(1)];
    cache
        .xs
        .par_iter()
        .zip(&cache.sigmas)
        .map(|(&x, sigmas)| {
            let w = ctx.map.bs_select_prob(x)?;
            let mut total = 0.0;
            for b in 0..2 {
                if w[b] == 0.0 {
                    continue;
                }
                let region = region_on_grid(threshold(ctx, x, b)?, &rates[b], sel, b, &ctx.map.grid);
                total += w[b] * region_meta(&region, x, sigmas);
            }
            Ok(total)
        })
        .collect()
}

/// Phase-averaged probability that `x̂` lands in each grid cell (cells are
/// nearest-point neighbourhoods), for every cached true location.
#[derive(Debug, Clone)]
pub struct CellMasses {
    first: Vec<usize>,
    masses: Vec<Vec<f64>>,
}

/// Cells beyond this many standard deviations carry no mass.
const CELL_WINDOW: f64 = 10.0;

impl CellMasses {
    pub fn new(grid: &GridSpec, cache: &PhaseCache) -> Result<Self> {
        let h = grid.step;
        let parts: Vec<(usize, Vec<f64>)> = cache
            .xs
            .par_iter()
            .zip(&cache.sigmas)
            .map(|(&x, sig)| {
                let s_max = sig.iter().copied().fold(0.0, f64::max);
                let reach = CELL_WINDOW * s_max + h;
                let first = grid.nearest(x - reach);
                let last = grid.nearest(x + reach);
                // smaller-tail mass beyond each cell edge
                let tail = |e: f64| -> f64 {
                    if e.is_infinite() {
                        return 0.0;
                    }
                    let d = (e - x).abs();
                    mean(sig.iter().map(|&s| q_function(d / s)))
                };
                let edge = |k: usize| -> f64 {
                    // edge k sits below cell k
                    if k == 0 {
                        f64::NEG_INFINITY
                    } else if k == grid.len {
                        f64::INFINITY
                    } else {
                        grid.x(k) - 0.5 * h
                    }
                };
                let tails: Vec<f64> = (first..=last + 1).map(|k| tail(edge(k))).collect();
                let masses = (first..=last)
                    .map(|c| {
                        let (lo, hi) = (edge(c), edge(c + 1));
                        let (tl, th) = (tails[c - first], tails[c + 1 - first]);
                        let m = if hi <= x {
                            th - tl
                        } else if lo >= x {
                            tl - th
                        } else {
                            1.0 - tl - th
                        };
                        m.max(0.0)
                    })
                    .collect();
                (first, masses)
            })
            .collect();
        let (first, masses) = parts.into_iter().unzip();
        Ok(CellMasses { first, masses })
    }

    /// Mass of cell `c` for the `n`-th cached location.
    pub fn mass(&self, n: usize, c: usize) -> f64 {
        let f = self.first[n];
        if c < f {
            return 0.0;
        }
        self.masses[n].get(c - f).copied().unwrap_or(0.0)
    }
}

/// Phase and estimate quadrature for the throughput ratio.
#[derive(Debug, Clone)]
pub struct ThroughputQuadrature {
    pub phase_nodes: usize,
    pub hermite: GaussHermite,
}

impl ThroughputQuadrature {
    pub fn new(phase_nodes: usize, hermite_nodes: usize) -> Self {
        ThroughputQuadrature {
            phase_nodes,
            hermite: GaussHermite::new(hermite_nodes),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputBreakdown {
    pub ratio: f64,
    /// Change when every other phase node is dropped.
    pub phase_error: f64,
}

/// Expected successful rate relative to a perfectly located ideal selector.
pub fn throughput_ratio(
    x: f64,
    sel: &dyn RateFunction,
    ctx: &RateContext,
    model: &dyn LocationModel,
    quad: &ThroughputQuadrature,
) -> Result<ThroughputBreakdown> {
    let m = quad.phase_nodes;
    let sigmas = model.phase_sigmas(x, m)?;
    let w = ctx.map.bs_select_prob(x)?;
    let mut num = 0.0;
    let mut num_half = 0.0;
    let mut den = 0.0;
    for (b, &wb) in w.iter().enumerate() {
        if wb == 0.0 {
            continue;
        }
        let per_phase = sigmas
            .iter()
            .map(|&s| -> Result<f64> {
                let mut err = None;
                let v = quad.hermite.expect(x, s, |x_hat| {
                    let r = sel.rate(x_hat, b);
                    match ctx.map.outage_prob(r, x, b) {
                        Ok(p) => r * (1.0 - p),
                        Err(e) => {
                            err = Some(e);
                            0.0
                        }
                    }
                });
                err.map_or(Ok(v), Err)
            })
            .collect::<Result<Vec<f64>>>()?;
        num += wb * mean(per_phase.iter().copied());
        let half = (0..m)
            .step_by(2)
            .flat_map(|a| (0..m).step_by(2).map(move |c| a * m + c))
            .map(|k| per_phase[k]);
        num_half += wb * mean(half);
        den += wb * threshold(ctx, x, b)?;
    }
    den *= 1.0 - ctx.eps;
    if !(den > 0.0) {
        return Err(Error::InvalidDomain(format!("ideal throughput vanishes at x = {x}")));
    }
    Ok(ThroughputBreakdown {
        ratio: num / den,
        phase_error: ((num - num_half) / den).abs(),
    })
}

/// Meta-probability and throughput ratio at one true location.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReliabilityReport {
    pub x: f64,
    pub meta_prob: f64,
    pub meta_bs: [f64; 2],
    pub selection: [f64; 2],
    pub throughput_ratio: f64,
    /// Meta-probability change when every other phase node is dropped.
    pub meta_phase_error: f64,
    pub throughput_phase_error: f64,
}

pub fn report(
    x: f64,
    sel: &dyn RateFunction,
    ctx: &RateContext,
    model: &dyn LocationModel,
    phase_nodes: usize,
    quad: &ThroughputQuadrature,
) -> Result<ReliabilityReport> {
    let sigmas = model.phase_sigmas(x, phase_nodes)?;
    let m = phase_nodes;
    let half: Vec<f64> = (0..m)
        .step_by(2)
        .flat_map(|a| (0..m).step_by(2).map(move |c| a * m + c))
        .map(|k| sigmas[k])
        .collect();
    let weights = ctx.map.bs_select_prob(x)?;
    let mut meta_bs = [0.0; 2];
    let mut meta_half = 0.0;
    for b in 0..2 {
        let region = outage_region(x, b, sel, ctx)?;
        meta_bs[b] = region_meta(&region, x, &sigmas);
        meta_half += weights[b] * region_meta(&region, x, &half);
    }
    let meta = weights[0] * meta_bs[0] + weights[1] * meta_bs[1];
    let tp = throughput_ratio(x, sel, ctx, model, quad)?;
    Ok(ReliabilityReport {
        x,
        meta_prob: meta,
        meta_bs,
        selection: weights,
        throughput_ratio: tp.ratio,
        meta_phase_error: (meta - meta_half).abs(),
        throughput_phase_error: tp.phase_error,
    })
}

/// Reports at every location in `xs`, in order.
pub fn report_curve(
    xs: &[f64],
    sel: &dyn RateFunction,
    ctx: &RateContext,
    model: &dyn LocationModel,
    phase_nodes: usize,
    quad: &ThroughputQuadrature,
) -> Result<Vec<ReliabilityReport>> {
    xs.par_iter()
        .map(|&x| report(x, sel, ctx, model, phase_nodes, quad))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SystemConfig;
    use crate::localization::ConstantStd;
    use crate::radiomap::{build_map, RadioMap};
    use crate::rateselect::{IdealSelector, RateSelector};
    use std::sync::OnceLock;

    fn small() -> &'static (SystemConfig, RadioMap) {
        static MAP: OnceLock<(SystemConfig, RadioMap)> = OnceLock::new();
        MAP.get_or_init(|| {
            let mut c = SystemConfig::default();
            c.numerics.grid_min = -300.0;
            c.numerics.grid_max = 1300.0;
            c.numerics.grid_step = 5.0;
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
    fn interval_mass_cases() {
        assert_eq!(interval_mass(f64::NEG_INFINITY, f64::INFINITY, 3.0, 2.0), 1.0);
        let w = 1.7;
        let want = 1.0 - 2.0 * q_function(w / 0.8);
        assert!((interval_mass(5.0 - w, 5.0 + w, 5.0, 0.8) - want).abs() < 1e-15);
        let far = interval_mass(30.0, 60.0, 0.0, 1.0);
        assert!(((far - q_function(30.0)) / far).abs() < 1e-12);
        let empty = OutageRegion { pieces: vec![] };
        assert_eq!(region_meta(&empty, 0.0, &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn identity_selection_hits_target() {
        let ctx = ctx(5.0);
        let sel = RateSelector::backoff(1.0, 1e-3);
        let b = ctx.bind(&sel).unwrap();
        let n = ctx.map.n_samples as f64;
        let p = outage_prob_given_estimate(300.0, 300.0, 0, &b, &ctx).unwrap();
        assert!((p - 1e-3).abs() <= 1.0 / n);
        let k = RateSelector::backoff(0.3, 1e-3);
        let b = ctx.bind(&k).unwrap();
        assert!(outage_prob_given_estimate(300.0, 300.0, 0, &b, &ctx).unwrap() <= 1e-3);
        assert!(outage_prob_given_estimate(300.0, 0.0, 0, &b, &ctx).unwrap() > 1e-3);
    }

    #[test]
    fn backoff_region_is_symmetric_interval() {
        let ctx = ctx(5.0);
        let sel = RateSelector::backoff(0.25, 1e-3);
        let b = ctx.bind(&sel).unwrap();
        let iv = outage_interval(300.0, 0, &b, &ctx).unwrap();
        assert!(!iv.empty);
        assert!((iv.lo + iv.hi).abs() < 2.0 * EDGE_TOL + 1e-9, "{iv:?}");
        assert!(iv.hi > 100.0 && iv.hi < 200.0);
        let tiny = RateSelector::backoff(0.05, 1e-3);
        let b = ctx.bind(&tiny).unwrap();
        let small = outage_interval(300.0, 0, &b, &ctx).unwrap();
        assert!(small.hi < iv.hi && small.lo > iv.lo);
    }

    #[test]
    fn multiple_pieces_are_reported() {
        struct Bumps;
        impl RateFunction for Bumps {
            fn rate(&self, x: f64, _bs: usize) -> f64 {
                if (x - 100.0).abs() < 20.0 || (x - 600.0).abs() < 20.0 {
                    1e6
                } else {
                    0.0
                }
            }
            fn grid_rates(&self, bs: usize) -> Vec<f64> {
                small().1.grid.points().iter().map(|&x| self.rate(x, bs)).collect()
            }
        }
        let ctx = ctx(5.0);
        match outage_interval(300.0, 0, &Bumps, &ctx) {
            Err(Error::NonMonotoneSelector { pieces: 2, lo, hi }) => {
                assert!((lo - 80.0).abs() < 0.1 && (hi - 620.0).abs() < 0.1);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn meta_prob_mixture_and_monotonicity() {
        let (c, _) = small();
        let ctx = ctx(6.0);
        let model = ConstantStd(6.0);
        let mut last = 0.0;
        for k in [0.1, 0.2, 0.3, 0.5] {
            let sel = RateSelector::backoff(k, 1e-3);
            let b = ctx.bind(&sel).unwrap();
            let m = meta_prob(60.0, &b, &ctx, &model, c.numerics.phase_nodes).unwrap();
            assert!((0.0..=1.0).contains(&m.total));
            assert!(m.total >= last);
            last = m.total;
            let want = m.weights[0] * m.per_bs[0] + m.weights[1] * m.per_bs[1];
            assert!((m.total - want).abs() < 1e-15);
        }
        // mirror symmetry at the midpoint
        let sel = RateSelector::backoff(0.5, 1e-3);
        let b = ctx.bind(&sel).unwrap();
        let m = meta_prob(500.0, &b, &ctx, &model, 8).unwrap();
        assert!((m.per_bs[0] - m.per_bs[1]).abs() < 1e-12);
    }

    #[test]
    fn perfect_localization_gives_unit_throughput() {
        let ctx = ctx(1e-9);
        let ideal = IdealSelector(&ctx);
        let quad = ThroughputQuadrature::new(4, 5);
        for x in [100.0, 300.0, 650.0] {
            let t = throughput_ratio(x, &ideal, &ctx, &ConstantStd(0.0), &quad).unwrap();
            assert!((t.ratio - 1.0).abs() < 1e-3, "{x}: {}", t.ratio);
        }
    }

    #[test]
    fn cell_masses_sum_to_one() {
        let (_, m) = small();
        let cache = PhaseCache::build(&[100.0, 500.0], &ConstantStd(7.0), 4).unwrap();
        let cm = CellMasses::new(&m.grid, &cache).unwrap();
        for n in 0..2 {
            let s: f64 = (0..m.grid.len).map(|c| cm.mass(n, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        // a cell centred on x holds 1 - 2Q(h / 2σ)
        let c = m.grid.nearest(100.0);
        let want = 1.0 - 2.0 * q_function(2.5 / 7.0);
        assert!((cm.mass(0, c) - want).abs() < 1e-14);
    }
}
