//! Geometric two-path channel between the UE and a base station.
//!
//! Path 1 is the deterministic line of sight, path 2 lumps the unresolved
//! scatterers into one `CN(0, σ²)` coefficient whose power follows an
//! exponential delay profile. Every subcarrier is Rician with the same
//! parameters, and all subcarriers share one scatter draw.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::config::{SystemConfig, SPEED_OF_LIGHT};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathCoefficients {
    pub a_los: Complex64,
    pub a_scatter: Complex64,
    /// Line-of-sight delay, s.
    pub tau_los: f64,
    /// Scatter delay, `tau_los + excess_delay`, s.
    pub tau_scatter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyResponse {
    pub values: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RicianParams {
    /// Mean power `E|h|²`.
    pub avg_power: f64,
    /// Ratio of line-of-sight to diffuse power.
    pub k_factor: f64,
}

/// How to obtain the scatter coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScatterDraw {
    /// `a ~ CN(0, σ²(d))` from the generator.
    Sampled,
    /// Given phase, magnitude at the given quantile of its Rayleigh law.
    Fixed { phase: f64, quantile: f64 },
}

/// UE-to-BS distance, guarded against the path-loss singularity.
pub fn distance(x: f64, bs: usize, cfg: &SystemConfig) -> Result<f64> {
    check_distance((x - cfg.bs_position(bs)).abs(), cfg)
}

fn check_distance(d: f64, cfg: &SystemConfig) -> Result<f64> {
    let min = cfg.numerics.min_bs_distance;
    if d.is_finite() && d >= min {
        Ok(d)
    } else {
        Err(Error::DegenerateGeometry { distance: d, min })
    }
}

/// Free-space gain `λ² / (16 π² d²)`.
pub fn path_gain(d: f64, cfg: &SystemConfig) -> Result<f64> {
    let d = check_distance(d, cfg)?;
    let lambda = cfg.wavelength();
    Ok(lambda * lambda / (16.0 * PI * PI * d * d))
}

pub fn los_coefficient(x: f64, bs: usize, cfg: &SystemConfig) -> Result<Complex64> {
    let d = distance(x, bs, cfg)?;
    let magnitude = path_gain(d, cfg)?.sqrt();
    let phase = -2.0 * PI * d / cfg.wavelength();
    Ok(Complex64::from_polar(magnitude, phase))
}

/// Scatter power `P_L(d)/ρ · exp(-Δτ/ρ)`, with Δτ in seconds as configured.
pub fn scatter_variance(d: f64, cfg: &SystemConfig) -> Result<f64> {
    let rho = cfg.pdp_rho;
    Ok(path_gain(d, cfg)? / rho * (-cfg.excess_delay / rho).exp())
}

pub fn scatter_coefficient<R: Rng + ?Sized>(
    d: f64,
    draw: ScatterDraw,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Complex64> {
    let var = scatter_variance(d, cfg)?;
    match draw {
        ScatterDraw::Sampled => Ok(complex_normal(var, rng)),
        ScatterDraw::Fixed { phase, quantile } => {
            if !(0.0..1.0).contains(&quantile) {
                return Err(Error::InvalidDomain(format!(
                    "magnitude quantile {quantile} not in [0, 1)"
                )));
            }
            // |a|² ~ Exp(mean σ²)
            let magnitude = (-var * (-quantile).ln_1p()).sqrt();
            Ok(Complex64::from_polar(magnitude, phase))
        }
    }
}

/// `CN(0, var)` sample.
pub fn complex_normal<R: Rng + ?Sized>(var: f64, rng: &mut R) -> Complex64 {
    let s = (0.5 * var).sqrt();
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(s * re, s * im)
}

pub fn path_coefficients(
    x: f64,
    bs: usize,
    a_scatter: Complex64,
    cfg: &SystemConfig,
) -> Result<PathCoefficients> {
    let d = distance(x, bs, cfg)?;
    let tau_los = d / SPEED_OF_LIGHT;
    Ok(PathCoefficients {
        a_los: los_coefficient(x, bs, cfg)?,
        a_scatter,
        tau_los,
        tau_scatter: tau_los + cfg.excess_delay,
    })
}

/// Subcarrier steering term `d_j(τ) = exp(-j 2π j Δf τ)`.
#[inline]
pub fn steering(j: usize, tau: f64, cfg: &SystemConfig) -> Complex64 {
    Complex64::from_polar(1.0, -2.0 * PI * j as f64 * cfg.subcarrier_spacing() * tau)
}

pub fn response_from_paths(paths: &PathCoefficients, cfg: &SystemConfig) -> FrequencyResponse {
    let values = (0..cfg.n_subcarriers)
        .map(|j| {
            paths.a_los * steering(j, paths.tau_los, cfg)
                + paths.a_scatter * steering(j, paths.tau_scatter, cfg)
        })
        .collect();
    FrequencyResponse { values }
}

pub fn freq_response(
    x: f64,
    bs: usize,
    a_scatter: Complex64,
    cfg: &SystemConfig,
) -> Result<FrequencyResponse> {
    let paths = path_coefficients(x, bs, a_scatter, cfg)?;
    Ok(response_from_paths(&paths, cfg))
}

pub fn rician_params(x: f64, bs: usize, cfg: &SystemConfig) -> Result<RicianParams> {
    let d = distance(x, bs, cfg)?;
    let ratio = cfg.excess_delay / cfg.pdp_rho;
    Ok(RicianParams {
        avg_power: path_gain(d, cfg)? * (1.0 + (-ratio).exp() / cfg.pdp_rho),
        k_factor: cfg.pdp_rho * ratio.exp(),
    })
}

/// One received ping `y_j = √P_tx h_j + n_j` with unit pilots and a fresh
/// scatter draw.
pub fn simulate_ping<R: Rng + ?Sized>(
    x: f64,
    bs: usize,
    cfg: &SystemConfig,
    rng: &mut R,
) -> Result<Vec<Complex64>> {
    let d = distance(x, bs, cfg)?;
    let a_scatter = scatter_coefficient(d, ScatterDraw::Sampled, cfg, rng)?;
    let h = freq_response(x, bs, a_scatter, cfg)?;
    let amp = cfg.tx_power.sqrt();
    Ok(h.values
        .into_iter()
        .map(|hj| amp * hj + complex_normal(cfg.noise_power, rng))
        .collect())
}

/// Draws `‖y‖²` of one ping without materializing the vector.
///
/// With `u = √P_tx h` and white noise, rotate the noise basis so its first
/// axis is along `u`: `‖u + n‖² = |‖u‖ + n₁|² + Σ_{k≥2} |n_k|²`, where the
/// last sum is `σ²/2 · χ²(2N - 2)`. Same law as `simulate_ping`'s energy.
#[derive(Debug, Clone)]
pub struct PingEnergySampler {
    n: usize,
    tx_power: f64,
    noise_power: f64,
    /// `Σ_j exp(+j 2π j Δf Δτ)`, the cross term of `‖h‖²`.
    cross_sum: Complex64,
    rest: Option<Gamma<f64>>,
}

impl PingEnergySampler {
    pub fn new(cfg: &SystemConfig) -> Self {
        let n = cfg.n_subcarriers;
        let cross_sum = (0..n)
            .map(|j| steering(j, cfg.excess_delay, cfg).conj())
            .sum();
        let rest = (n > 1).then(|| {
            Gamma::new((n - 1) as f64, cfg.noise_power).expect("positive gamma parameters")
        });
        PingEnergySampler {
            n,
            tx_power: cfg.tx_power,
            noise_power: cfg.noise_power,
            cross_sum,
            rest,
        }
    }

    /// `‖h‖²` for given path amplitudes.
    pub fn channel_energy(&self, a_los: Complex64, a_scatter: Complex64) -> f64 {
        // h_j = d_j(τ1) (a1 + a2 e^{-jθ_j}); |h_j|² = |a1|² + |a2|² + 2 Re(a1 a2* e^{jθ_j})
        self.n as f64 * (a_los.norm_sqr() + a_scatter.norm_sqr())
            + 2.0 * (a_los * a_scatter.conj() * self.cross_sum).re
    }

    pub fn sample<R: Rng + ?Sized>(&self, path_gain: f64, scatter_var: f64, rng: &mut R) -> f64 {
        let a_los = Complex64::new(path_gain.sqrt(), 0.0);
        let a_scatter = complex_normal(scatter_var, rng);
        let signal = (self.tx_power * self.channel_energy(a_los, a_scatter)).sqrt();
        let n1 = complex_normal(self.noise_power, rng);
        let head = (signal + n1.re).powi(2) + n1.im * n1.im;
        let tail = self.rest.as_ref().map_or(0.0, |g| g.sample(rng));
        head + tail
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Domain};

    fn cfg() -> SystemConfig {
        SystemConfig::default()
    }

    #[test]
    fn path_gain_identity_and_inverse_square() {
        let mut c = cfg();
        c.numerics.min_bs_distance = 1e-3;
        let d0 = c.wavelength() / (4.0 * PI);
        assert!((path_gain(d0, &c).unwrap() - 1.0).abs() < 1e-14);
        let g = path_gain(37.0, &c).unwrap();
        assert!((path_gain(74.0, &c).unwrap() - g / 4.0).abs() < 1e-14 * g);
    }

    #[test]
    fn path_gain_at_one_km() {
        // λ²/(16π²·10⁶) with λ = 299792458/2.1e9, evaluated in 40-digit arithmetic.
        let g = path_gain(1000.0, &cfg()).unwrap();
        assert!(((g - 1.290_574_525_429_353_8e-10) / g).abs() < 1e-13, "{g:e}");
    }

    #[test]
    fn degenerate_geometry() {
        let c = cfg();
        assert!(matches!(path_gain(0.5, &c), Err(Error::DegenerateGeometry { .. })));
        assert!(los_coefficient(0.2, 0, &c).is_err());
        assert!(rician_params(1000.0, 1, &c).is_err());
    }

    #[test]
    fn los_phase_wraps() {
        let mut c = cfg();
        c.numerics.min_bs_distance = 1e-3;
        let lambda = c.wavelength();
        let a = los_coefficient(lambda, 0, &c).unwrap();
        assert!((a.re - 1.0 / (4.0 * PI)).abs() < 1e-12);
        assert!(a.im.abs() < 1e-12);
        let half = los_coefficient(lambda / 2.0, 0, &c).unwrap();
        assert!(half.re < 0.0 && half.im.abs() < 1e-12 * half.re.abs());
        let at300 = los_coefficient(300.0, 0, &c).unwrap();
        assert!((at300.norm() - path_gain(300.0, &c).unwrap().sqrt()).abs() < 1e-20);
    }

    #[test]
    fn scatter_variance_cases() {
        let mut c = cfg();
        let pl = path_gain(120.0, &c).unwrap();
        // default system: P_L/2 · exp(-2.5e-8)
        let v = scatter_variance(120.0, &c).unwrap();
        assert!(((v - pl / 2.0 * (1.0 - 2.5e-8 + 3.125e-16)) / v).abs() < 1e-15);
        c.excess_delay = 0.0;
        c.pdp_rho = 1.0;
        assert!((scatter_variance(120.0, &c).unwrap() - pl).abs() < 1e-15 * pl);
        c.pdp_rho = 2.0;
        assert!((scatter_variance(120.0, &c).unwrap() - pl / 2.0).abs() < 1e-15 * pl);
    }

    #[test]
    fn fixed_scatter_coefficient() {
        let c = cfg();
        let mut rng = stream(0, Domain::Tests, 0);
        let var = scatter_variance(200.0, &c).unwrap();
        let a0 = scatter_coefficient(200.0, ScatterDraw::Fixed { phase: 0.0, quantile: 0.5 }, &c, &mut rng).unwrap();
        assert!(a0.im.abs() < 1e-30);
        assert!((a0.re - (var * 2f64.ln()).sqrt()).abs() < 1e-12 * a0.re);
        let api = scatter_coefficient(200.0, ScatterDraw::Fixed { phase: PI, quantile: 0.5 }, &c, &mut rng).unwrap();
        assert!((api + a0).norm() < 1e-12 * a0.norm());
    }

    #[test]
    fn sampled_scatter_variance() {
        let c = cfg();
        let mut rng = stream(3, Domain::Tests, 1);
        let var = scatter_variance(250.0, &c).unwrap();
        let n = 1_000_000;
        let mean: f64 = (0..n)
            .map(|_| scatter_coefficient(250.0, ScatterDraw::Sampled, &c, &mut rng).unwrap().norm_sqr())
            .sum::<f64>()
            / n as f64;
        assert!((mean / var - 1.0).abs() < 0.01, "{}", mean / var);
    }

    #[test]
    fn response_single_path_and_zeroth_subcarrier() {
        let c = cfg();
        let h = freq_response(310.0, 0, Complex64::new(0.0, 0.0), &c).unwrap();
        assert_eq!(h.values.len(), 600);
        let a = los_coefficient(310.0, 0, &c).unwrap();
        for v in &h.values {
            assert!((v.norm() - a.norm()).abs() < 1e-12 * a.norm());
        }
        let s = Complex64::new(1e-6, -2e-6);
        let h = freq_response(310.0, 0, s, &c).unwrap();
        assert!((h.values[0] - (a + s)).norm() < 1e-18);
    }

    #[test]
    fn response_is_linear_in_scatter() {
        let c = cfg();
        let s1 = Complex64::new(3e-6, 1e-6);
        let s2 = Complex64::new(-1e-6, 4e-6);
        let h0 = freq_response(420.0, 1, Complex64::new(0.0, 0.0), &c).unwrap();
        let h1 = freq_response(420.0, 1, s1, &c).unwrap();
        let h2 = freq_response(420.0, 1, s2, &c).unwrap();
        let h12 = freq_response(420.0, 1, s1 + s2, &c).unwrap();
        for j in 0..c.n_subcarriers {
            let lhs = h12.values[j] - h0.values[j];
            let rhs = (h1.values[j] - h0.values[j]) + (h2.values[j] - h0.values[j]);
            assert!((lhs - rhs).norm() < 1e-15);
        }
    }

    #[test]
    fn rician_parameters() {
        let mut c = cfg();
        let p = rician_params(300.0, 0, &c).unwrap();
        // K = 2·exp(2.5e-8)
        assert!((p.k_factor - (2.0 + 5e-8 + 6.25e-16)).abs() < 1e-15);
        let q = rician_params(800.0, 0, &c).unwrap();
        let r1 = p.avg_power / path_gain(300.0, &c).unwrap();
        let r2 = q.avg_power / path_gain(800.0, &c).unwrap();
        assert!((r1 - r2).abs() < 1e-14);
        c.excess_delay = 0.0;
        assert_eq!(rician_params(300.0, 0, &c).unwrap().k_factor, c.pdp_rho);
    }

    #[test]
    fn noiseless_single_path_ping() {
        let mut c = cfg();
        c.set_noise_power_watt(1e-300);
        c.excess_delay = 1e3; // scatter power exp(-500) vanishes
        let mut rng = stream(1, Domain::Tests, 2);
        let y = simulate_ping(250.0, 0, &c, &mut rng).unwrap();
        let want = c.tx_power * path_gain(250.0, &c).unwrap();
        for v in y {
            assert!((v.norm_sqr() / want - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn channel_energy_closed_form_matches_sum() {
        let c = cfg();
        let s = Complex64::new(2e-5, -1e-5);
        let paths = path_coefficients(333.0, 0, s, &c).unwrap();
        let direct: f64 = response_from_paths(&paths, &c).values.iter().map(|v| v.norm_sqr()).sum();
        let closed = PingEnergySampler::new(&c).channel_energy(paths.a_los, s);
        assert!((direct - closed).abs() < 1e-12 * direct);
    }
}
