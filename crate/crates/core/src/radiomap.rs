//! Location-indexed statistics of the maximum achievable rate (MAR).
//!
//! The MAR only depends on the UE-to-BS distance and the scatter draw. With
//! `a_scatter = a_los · w`, `w ~ CN(0, e^{-Δτ/ρ}/ρ)` has a distance-free law and
//!
//! ```text
//! |h_j|² = P_L(d) · (1 + |w|² + 2 Re(w) cos θ_j + 2 Im(w) sin θ_j),  θ_j = 2π j Δf Δτ.
//! ```
//!
//! The map draws one set of `w` and reuses it at every distance (common random
//! numbers). Each sample's MAR then decreases with distance, so every
//! empirical quantile does too.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::channel::{self, complex_normal, PingEnergySampler};
use crate::config::SystemConfig;
use crate::error::{Error, Result};
use crate::rng::{stream, Domain};

pub const MAP_FORMAT_VERSION: u32 = 1;

/// Samples per random stream when drawing the shared scatter set.
const SAMPLE_CHUNK: usize = 1 << 16;

/// Terms multiplied together between exponent renormalizations.
const PRODUCT_BLOCK: usize = 25;

/// Lanes evaluated together in the MAR kernel.
const LANES: usize = 8;

/// `Σ_j log₂(1 + P_tx |h_j|² / σ_n²)` for one scatter draw.
pub fn mar_sample(x: f64, bs: usize, a_scatter: Complex64, cfg: &SystemConfig) -> Result<f64> {
    let h = channel::freq_response(x, bs, a_scatter, cfg)?;
    let snr = cfg.tx_power / cfg.noise_power;
    Ok(h.values
        .iter()
        .map(|v| (snr * v.norm_sqr()).ln_1p())
        .sum::<f64>()
        / std::f64::consts::LN_2)
}

/// A scatter draw relative to the line of sight, stored as the coefficients
/// of `g(θ) = a + b cos θ + c sin θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Gain {
    a: f64,
    b: f64,
    c: f64,
}

impl Gain {
    fn new(w: Complex64) -> Self {
        Gain {
            a: 1.0 + w.norm_sqr(),
            b: 2.0 * w.re,
            c: 2.0 * w.im,
        }
    }
}

/// Evaluates MARs of many scatter draws at a given SNR scale.
#[derive(Debug, Clone)]
struct MarKernel {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl MarKernel {
    fn new(cfg: &SystemConfig) -> Self {
        let step = 2.0 * PI * cfg.subcarrier_spacing() * cfg.excess_delay;
        let (sin, cos) = (0..cfg.n_subcarriers)
            .map(|j| (j as f64 * step).sin_cos())
            .unzip();
        MarKernel { cos, sin }
    }

    /// MAR in bits for each gain at `snr = P_tx P_L(d) / σ_n²`.
    fn rates(&self, gains: &[Gain], snr: f64, out: &mut Vec<f64>) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the required CPU feature was detected above.
            unsafe { self.rates_avx2(gains, snr, out) };
            return;
        }
        self.rates_portable(gains, snr, out);
    }

    // Same arithmetic as `rates_portable`, compiled for wider vectors. No FMA
    // contraction happens, so both paths round identically.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn rates_avx2(&self, gains: &[Gain], snr: f64, out: &mut Vec<f64>) {
        self.rates_portable(gains, snr, out);
    }

    #[inline(always)]
    fn rates_portable(&self, gains: &[Gain], snr: f64, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(gains.len());
        let n = self.cos.len();
        let mut lanes = gains.chunks_exact(LANES);
        for chunk in &mut lanes {
            let mut a = [0.0; LANES];
            let mut b = [0.0; LANES];
            let mut c = [0.0; LANES];
            for l in 0..LANES {
                a[l] = 1.0 + snr * chunk[l].a;
                b[l] = snr * chunk[l].b;
                c[l] = snr * chunk[l].c;
            }
            // running product kept as mantissa in [1, 2) and a binary exponent
            let mut mant = [1.0; LANES];
            let mut expo = [0i64; LANES];
            let mut ok = true;
            let mut k = 0;
            while k < n {
                let end = (k + PRODUCT_BLOCK).min(n);
                let cb = &self.cos[k..end];
                let sb = &self.sin[k..end];
                let mut prod = mant;
                for j in 0..cb.len() {
                    let (cj, sj) = (cb[j], sb[j]);
                    for l in 0..LANES {
                        prod[l] *= a[l] + b[l] * cj + c[l] * sj;
                    }
                }
                for l in 0..LANES {
                    ok &= prod[l].is_normal() && prod[l] > 0.0;
                    let (m, e) = split_exponent(prod[l]);
                    mant[l] = m;
                    expo[l] += e;
                }
                k = end;
            }
            if ok {
                out.extend((0..LANES).map(|l| mant[l].log2() + expo[l] as f64));
            } else {
                out.extend(chunk.iter().map(|g| self.rate_by_terms(*g, snr)));
            }
        }
        for g in lanes.remainder() {
            out.push(self.rate_by_terms(*g, snr));
        }
    }

    fn rate_by_terms(&self, g: Gain, snr: f64) -> f64 {
        self.cos
            .iter()
            .zip(&self.sin)
            .map(|(&cj, &sj)| (snr * (g.a + g.b * cj + g.c * sj)).max(0.0).ln_1p())
            .sum::<f64>()
            / std::f64::consts::LN_2
    }
}

/// Splits a positive normal float into a mantissa in `[1, 2)` and its
/// unbiased binary exponent.
#[inline(always)]
fn split_exponent(p: f64) -> (f64, i64) {
    let bits = p.to_bits();
    let e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    (f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | 0x3ff0_0000_0000_0000), e)
}

fn relative_scatter_variance(cfg: &SystemConfig) -> f64 {
    (-cfg.excess_delay / cfg.pdp_rho).exp() / cfg.pdp_rho
}

fn snr_at(d: f64, cfg: &SystemConfig) -> Result<f64> {
    Ok(cfg.tx_power * channel::path_gain(d, cfg)? / cfg.noise_power)
}

/// 1-based order statistic `⌈p·n⌉` used for the level-`p` quantile.
pub fn order_statistic(p: f64, n: usize) -> usize {
    let v = p * n as f64;
    let r = v.round();
    // treat products within rounding of an integer as that integer
    let k = if (v - r).abs() <= 1e-9 * r.max(1.0) { r } else { v.ceil() };
    (k as usize).clamp(1, n)
}

/// Sorted MAR draws at one location.
#[derive(Debug, Clone, PartialEq)]
pub struct MarSampleSet {
    pub location: f64,
    pub bs: usize,
    pub rates: Vec<f64>,
    pub n_samples: usize,
}

impl MarSampleSet {
    pub fn quantile(&self, eps: f64) -> Result<f64> {
        if !(eps * self.n_samples as f64 >= 1.0 - 1e-9) || eps > 1.0 {
            return Err(Error::QuantileUnresolvable {
                eps,
                n_samples: self.n_samples,
            });
        }
        Ok(self.rates[order_statistic(eps, self.n_samples) - 1])
    }

    /// Fraction of draws at or below `r`.
    pub fn cdf(&self, r: f64) -> f64 {
        self.rates.partition_point(|&v| v <= r) as f64 / self.n_samples as f64
    }
}

fn required_samples(cfg: &SystemConfig) -> (usize, f64) {
    let eps_min = cfg
        .numerics
        .eps_levels
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if eps_min.is_finite() {
        ((10.0 / eps_min).ceil() as usize, eps_min)
    } else {
        (1, 1.0)
    }
}

/// Draws `n_samples` scatter coefficients at `x` and sorts the resulting MARs.
pub fn build_cdf<R: Rng + ?Sized>(
    x: f64,
    bs: usize,
    n_samples: usize,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<MarSampleSet> {
    let (need, eps) = required_samples(cfg);
    if n_samples < need {
        return Err(Error::InsufficientSamples {
            got: n_samples,
            need,
            eps,
        });
    }
    let d = channel::distance(x, bs, cfg)?;
    let var = relative_scatter_variance(cfg);
    let gains: Vec<Gain> = (0..n_samples)
        .map(|_| Gain::new(complex_normal(var, rng)))
        .collect();
    let mut rates = Vec::new();
    MarKernel::new(cfg).rates(&gains, snr_at(d, cfg)?, &mut rates);
    rates.sort_unstable_by(f64::total_cmp);
    Ok(MarSampleSet {
        location: x,
        bs,
        rates,
        n_samples,
    })
}

/// Frequencies with which each BS delivers the stronger ping at `x`.
pub fn bs_selection_prob<R: Rng + ?Sized>(
    x: f64,
    n_mc: usize,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let d = [channel::distance(x, 0, cfg)?, channel::distance(x, 1, cfg)?];
    selection_at_distances(d, n_mc, &PingEnergySampler::new(cfg), cfg, rng)
}

fn selection_at_distances<R: Rng + ?Sized>(
    d: [f64; 2],
    n_mc: usize,
    sampler: &PingEnergySampler,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<[f64; 2]> {
    if n_mc == 0 {
        return Err(Error::validation("n_mc", "need at least one ping pair"));
    }
    let gain = [channel::path_gain(d[0], cfg)?, channel::path_gain(d[1], cfg)?];
    let var = [
        channel::scatter_variance(d[0], cfg)?,
        channel::scatter_variance(d[1], cfg)?,
    ];
    let mut first = 0usize;
    for _ in 0..n_mc {
        let e1 = sampler.sample(gain[0], var[0], rng);
        let e2 = sampler.sample(gain[1], var[1], rng);
        if e1 >= e2 {
            first += 1;
        }
    }
    let p1 = first as f64 / n_mc as f64;
    Ok([p1, (n_mc - first) as f64 / n_mc as f64])
}

/// Uniform location grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub step: f64,
    pub len: usize,
}

impl GridSpec {
    pub fn from_config(cfg: &SystemConfig) -> Self {
        let n = &cfg.numerics;
        let len = ((n.grid_max - n.grid_min) / n.grid_step + 1e-9).floor() as usize + 1;
        GridSpec {
            min: n.grid_min,
            step: n.grid_step,
            len,
        }
    }

    pub fn x(&self, i: usize) -> f64 {
        self.min + i as f64 * self.step
    }

    pub fn max(&self) -> f64 {
        self.x(self.len - 1)
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.x(i)).collect()
    }

    /// Left neighbour and weight of the right neighbour, for `x` in range.
    pub fn locate(&self, x: f64) -> Result<(usize, f64)> {
        let hi = self.max();
        if !(x >= self.min && x <= hi) {
            return Err(Error::OutOfMapRange {
                x,
                lo: self.min,
                hi,
            });
        }
        if self.len == 1 {
            return Ok((0, 0.0));
        }
        let u = (x - self.min) / self.step;
        let i = (u.floor() as usize).min(self.len - 2);
        Ok((i, (u - i as f64).clamp(0.0, 1.0)))
    }

    /// Index of the grid point nearest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let u = ((x - self.min) / self.step).round();
        if u.is_nan() || u < 0.0 {
            0
        } else {
            (u as usize).min(self.len - 1)
        }
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.min, self.max())
    }
}

/// Probability levels stored in every quantile table: log-spaced below 0.1,
/// then linear, plus each requested outage level exactly.
pub fn table_levels(n_samples: usize, eps_levels: &[f64]) -> Vec<f64> {
    let p_min = 1.0 / n_samples as f64;
    let mut out: Vec<f64> = Vec::new();
    let start = p_min.log10();
    let mut k = 0;
    loop {
        let p = 10f64.powf(start + k as f64 / 10.0);
        if p >= 0.1 {
            break;
        }
        out.push(if k == 0 { p_min } else { p });
        k += 1;
    }
    out.extend((0..17).map(|k| 0.1 + 0.05 * k as f64));
    out.extend([0.95, 0.99, 0.999, 1.0]);
    out.retain(|p| {
        *p >= p_min && !eps_levels.iter().any(|e| ((p - e) / e).abs() < 1e-6)
    });
    out.extend(eps_levels.iter().copied().filter(|&e| e >= p_min * (1.0 - 1e-9)));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Values at 0-based ranks `idx` (ascending) by recursive selection.
fn select_ranks(v: &mut [f64], idx: &[usize], out: &mut [f64]) {
    if idx.is_empty() {
        return;
    }
    let mid = idx.len() / 2;
    let k = idx[mid];
    let (left, pivot, right) = v.select_nth_unstable_by(k, f64::total_cmp);
    out[mid] = *pivot;
    select_ranks(left, &idx[..mid], &mut out[..mid]);
    let offset = k + 1;
    let right_idx: Vec<usize> = idx[mid + 1..].iter().map(|&i| i - offset).collect();
    select_ranks(right, &right_idx, &mut out[mid + 1..]);
}

/// Quantile table of one location: `values[k]` is the level-`levels[k]` quantile.
fn quantile_table(rates: &mut [f64], levels: &[f64]) -> Vec<f64> {
    let n = rates.len();
    let ranks: Vec<usize> = levels.iter().map(|&p| order_statistic(p, n) - 1).collect();
    let mut uniq = ranks.clone();
    uniq.dedup();
    let mut vals = vec![0.0; uniq.len()];
    select_ranks(rates, &uniq, &mut vals);
    ranks
        .iter()
        .map(|r| vals[uniq.binary_search(r).expect("rank present")])
        .collect()
}

/// Empirical MAR statistics over a location grid, for both base stations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadioMap {
    pub format_version: u32,
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub n_samples: usize,
    pub bs_select_samples: usize,
    pub grid: GridSpec,
    pub bs_positions: [f64; 2],
    pub min_bs_distance: f64,
    pub eps_levels: Vec<f64>,
    pub levels: Vec<f64>,
    /// `quantiles[bs][grid index][level index]`, bits/s/Hz.
    pub quantiles: [Vec<Vec<f64>>; 2],
    /// Serving-BS probabilities per grid point.
    pub bs_select: Vec<[f64; 2]>,
    /// Every quantile column is non-increasing in distance to its BS.
    pub unimodal: bool,
}

/// Builds the map described by `cfg.numerics`.
pub fn build_map(cfg: &SystemConfig) -> Result<RadioMap> {
    let num = &cfg.numerics;
    let (need, eps) = required_samples(cfg);
    if num.mar_samples < need {
        return Err(Error::InsufficientSamples {
            got: num.mar_samples,
            need,
            eps,
        });
    }
    let grid = GridSpec::from_config(cfg);
    let n = num.mar_samples;
    let levels = table_levels(n, &num.eps_levels);

    let var = relative_scatter_variance(cfg);
    let n_chunks = n.div_ceil(SAMPLE_CHUNK);
    let gains: Vec<Gain> = (0..n_chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream(num.seed, Domain::MarSamples, c as u64);
            let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
            (0..len)
                .map(|_| Gain::new(complex_normal(var, &mut rng)))
                .collect::<Vec<_>>()
        })
        .collect();

    // statistics depend on the clamped distance only
    let clamp = |d: f64| d.max(num.min_bs_distance);
    let mut distances: Vec<f64> = (0..grid.len)
        .flat_map(|i| [0, 1].map(|b| clamp((grid.x(i) - cfg.bs_position(b)).abs())))
        .collect();
    distances.sort_by(f64::total_cmp);
    distances.dedup();
    let kernel = MarKernel::new(cfg);
    let tables: Vec<Vec<f64>> = distances
        .par_iter()
        .map_init(Vec::new, |buf, &d| {
            kernel.rates(&gains, snr_at(d, cfg)?, buf);
            Ok(quantile_table(buf, &levels))
        })
        .collect::<Result<_>>()?;
    let by_distance: HashMap<u64, usize> = distances
        .iter()
        .enumerate()
        .map(|(k, d)| (d.to_bits(), k))
        .collect();
    let quantiles: [Vec<Vec<f64>>; 2] = [0, 1].map(|b| {
        (0..grid.len)
            .map(|i| {
                let d = clamp((grid.x(i) - cfg.bs_position(b)).abs());
                tables[by_distance[&d.to_bits()]].clone()
            })
            .collect()
    });

    let sampler = PingEnergySampler::new(cfg);
    let bs_select = (0..grid.len)
        .into_par_iter()
        .map(|i| {
            let x = grid.x(i);
            let d = [0, 1].map(|b| clamp((x - cfg.bs_position(b)).abs()));
            let mut rng = stream(num.seed, Domain::BsSelection, i as u64);
            selection_at_distances(d, num.bs_select_samples, &sampler, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut map = RadioMap {
        format_version: MAP_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_owned(),
        config_hash: cfg.hash(),
        seed: num.seed,
        n_samples: n,
        bs_select_samples: num.bs_select_samples,
        grid,
        bs_positions: cfg.bs_positions,
        min_bs_distance: num.min_bs_distance,
        eps_levels: num.eps_levels.clone(),
        levels,
        quantiles,
        bs_select,
        unimodal: false,
    };
    map.unimodal = map.check_unimodal();
    Ok(map)
}

impl RadioMap {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let map: RadioMap = serde_json::from_reader(r)?;
        if map.format_version != MAP_FORMAT_VERSION {
            return Err(Error::Parse(format!(
                "map format version {} not supported",
                map.format_version
            )));
        }
        Ok(map)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("map serializes")
    }

    /// Fails when `cfg` describes a different system or grid than the map.
    pub fn ensure_matches(&self, cfg: &SystemConfig) -> Result<()> {
        if self.config_hash != cfg.hash() {
            return Err(Error::validation(
                "map",
                "radio map was built from a different configuration",
            ));
        }
        Ok(())
    }

    fn check_unimodal(&self) -> bool {
        (0..2).all(|b| {
            let xb = self.bs_positions[b];
            (0..self.levels.len()).all(|k| {
                (1..self.grid.len).all(|i| {
                    let (x0, x1) = (self.grid.x(i - 1), self.grid.x(i));
                    let (q0, q1) = (self.quantiles[b][i - 1][k], self.quantiles[b][i][k]);
                    if x1 <= xb {
                        q1 >= q0
                    } else if x0 >= xb {
                        q1 <= q0
                    } else {
                        true
                    }
                })
            })
        })
    }

    fn resolvable(&self, eps: f64) -> Result<()> {
        if eps * (self.n_samples as f64) < 1.0 - 1e-9 || !(eps <= 1.0) {
            return Err(Error::QuantileUnresolvable {
                eps,
                n_samples: self.n_samples,
            });
        }
        Ok(())
    }

    /// Level-`eps` quantile at grid point `i`.
    fn grid_quantile(&self, eps: f64, i: usize, bs: usize) -> f64 {
        let table = &self.quantiles[bs][i];
        let k = self.levels.partition_point(|&p| p < eps);
        if k < self.levels.len() && self.levels[k] == eps {
            return table[k];
        }
        let k = k.clamp(1, self.levels.len() - 1);
        let (p0, p1) = (self.levels[k - 1], self.levels[k]);
        let t = ((eps - p0) / (p1 - p0)).clamp(0.0, 1.0);
        table[k - 1] + t * (table[k] - table[k - 1])
    }

    /// Outage probability of rate `r` at grid point `i`.
    fn grid_cdf(&self, r: f64, i: usize, bs: usize) -> f64 {
        let table = &self.quantiles[bs][i];
        if r < table[0] {
            return 0.0;
        }
        let last = table.len() - 1;
        if r >= table[last] {
            return 1.0;
        }
        let k = table.partition_point(|&q| q <= r);
        let (q0, q1) = (table[k - 1], table[k]);
        let (p0, p1) = (self.levels[k - 1], self.levels[k]);
        p0 + (p1 - p0) * (r - q0) / (q1 - q0)
    }

    /// `F⁻¹(eps; x, bs)`.
    pub fn eps_quantile(&self, eps: f64, x: f64, bs: usize) -> Result<f64> {
        self.resolvable(eps)?;
        let (i, t) = self.grid.locate(x)?;
        if t == 0.0 {
            return Ok(self.grid_quantile(eps, i, bs));
        }
        let a = self.grid_quantile(eps, i, bs);
        let b = self.grid_quantile(eps, i + 1, bs);
        Ok(a + t * (b - a))
    }

    /// `F(r; x, bs)`, the probability that the MAR falls below `r`.
    pub fn outage_prob(&self, r: f64, x: f64, bs: usize) -> Result<f64> {
        let (i, t) = self.grid.locate(x)?;
        let a = self.grid_cdf(r, i, bs);
        if t == 0.0 {
            return Ok(a);
        }
        Ok(a + t * (self.grid_cdf(r, i + 1, bs) - a))
    }

    /// `F⁻¹(eps; ·, bs)` at every grid point.
    pub fn quantile_column(&self, eps: f64, bs: usize) -> Result<Vec<f64>> {
        self.resolvable(eps)?;
        Ok((0..self.grid.len)
            .map(|i| self.grid_quantile(eps, i, bs))
            .collect())
    }

    /// Serving-BS probabilities at `x`, interpolated between grid points.
    pub fn bs_select_prob(&self, x: f64) -> Result<[f64; 2]> {
        let (i, t) = self.grid.locate(x)?;
        let a = self.bs_select[i];
        if t == 0.0 {
            return Ok(a);
        }
        let b = self.bs_select[i + 1];
        let p1 = a[0] + t * (b[0] - a[0]);
        Ok([p1, 1.0 - p1])
    }
}

pub fn outage_prob(r: f64, x: f64, bs: usize, map: &RadioMap) -> Result<f64> {
    map.outage_prob(r, x, bs)
}

pub fn eps_quantile(eps: f64, x: f64, bs: usize, map: &RadioMap) -> Result<f64> {
    map.eps_quantile(eps, x, bs)
}
