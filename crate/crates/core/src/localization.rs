//! Position CRLB from the ping signals of both base stations.
//!
//! Each BS contributes a 6-parameter Gaussian model
//! `μ_j = a₁ d_j(τ₁) + a₂ d_j(τ₂)`. Its Fisher matrix only involves the
//! subcarrier moments `S_m = Σ w_j^m` and `C_m = Σ w_j^m e^{-i w_j Δτ}`
//! (`w_j = 2π j Δf`), which do not depend on location, so they are computed
//! once per configuration. The nuisance parameters are removed by a Schur
//! complement, and the two per-BS delay informations are mapped to
//! (position, clock bias).

use nalgebra::{Matrix2, Matrix6, SMatrix};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::channel::{self, PathCoefficients};
use crate::config::{SystemConfig, SPEED_OF_LIGHT};
use crate::error::{Error, Result};
use crate::numerics::PeriodicGrid;

/// Largest accepted condition number of the equilibrated nuisance block.
const MAX_CONDITION: f64 = 1e12;

/// Fisher information of `[τ₁, τ₂, Re a₁, Im a₁, Re a₂, Im a₂]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamFisher {
    pub matrix: Matrix6<f64>,
}

impl ParamFisher {
    /// Positive semi-definite up to `tol · ‖J‖`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let norm = self.matrix.norm();
        self.matrix
            .symmetric_eigenvalues()
            .iter()
            .all(|&l| l >= -tol * norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocUncertainty {
    /// Position variance, m².
    pub variance: f64,
    /// Information matrix of (x, B).
    pub clock_bias_coupled: Matrix2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePair {
    pub phi1: f64,
    pub phi2: f64,
}

impl PhasePair {
    /// Wraps both phases into `[0, 2π)`.
    pub fn new(phi1: f64, phi2: f64) -> Self {
        PhasePair {
            phi1: wrap(phi1),
            phi2: wrap(phi2),
        }
    }

    pub fn get(&self, bs: usize) -> f64 {
        if bs == 0 {
            self.phi1
        } else {
            self.phi2
        }
    }
}

fn wrap(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Subcarrier moments of the two-path Fisher matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Moments {
    delta_tau: f64,
    s: [f64; 3],
    c: [Complex64; 3],
}

impl Moments {
    fn new(delta_tau: f64, cfg: &SystemConfig) -> Self {
        let df = cfg.subcarrier_spacing();
        let mut s = [0.0; 3];
        let mut c = [Complex64::new(0.0, 0.0); 3];
        for j in 0..cfg.n_subcarriers {
            let w = 2.0 * PI * j as f64 * df;
            let u = Complex64::from_polar(1.0, -w * delta_tau);
            let mut wp = 1.0;
            for m in 0..3 {
                s[m] += wp;
                c[m] += u * wp;
                wp *= w;
            }
        }
        Moments { delta_tau, s, c }
    }

    /// Unscaled `Σ_j Re(∂μ_j ∂μ_j^H)`.
    fn fisher(&self, a1: Complex64, a2: Complex64) -> Matrix6<f64> {
        let [s0, s1, s2] = self.s;
        let [c0, c1, c2] = self.c;
        let i = Complex64::i();
        let mut m = Matrix6::zeros();
        let mut set = |p: usize, q: usize, v: f64| {
            m[(p, q)] = v;
            m[(q, p)] = v;
        };
        set(0, 0, a1.norm_sqr() * s2);
        set(0, 1, (a1 * a2.conj() * c2.conj()).re);
        set(0, 2, a1.im * s1);
        set(0, 3, -a1.re * s1);
        set(0, 4, (-i * a1 * c1.conj()).re);
        set(0, 5, (-a1 * c1.conj()).re);
        set(1, 1, a2.norm_sqr() * s2);
        set(1, 2, (-i * a2 * c1).re);
        set(1, 3, (-a2 * c1).re);
        set(1, 4, a2.im * s1);
        set(1, 5, -a2.re * s1);
        set(2, 2, s0);
        set(2, 3, 0.0);
        set(2, 4, c0.re);
        set(2, 5, -c0.im);
        set(3, 3, s0);
        set(3, 4, c0.im);
        set(3, 5, c0.re);
        set(4, 4, s0);
        set(4, 5, 0.0);
        set(5, 5, s0);
        m
    }
}

/// Fisher matrix of one BS's ping for the given path coefficients.
pub fn fisher_eta(
    x: f64,
    bs: usize,
    coeffs: &PathCoefficients,
    cfg: &SystemConfig,
) -> Result<ParamFisher> {
    channel::distance(x, bs, cfg)?;
    let delta_tau = coeffs.tau_scatter - coeffs.tau_los;
    if delta_tau == 0.0 {
        return Err(Error::SingularModel(
            "line-of-sight and scatter delays coincide".into(),
        ));
    }
    let moments = Moments::new(delta_tau, cfg);
    let scale = 2.0 * cfg.tx_power / cfg.noise_power;
    Ok(ParamFisher {
        matrix: moments.fisher(coeffs.a_los, coeffs.a_scatter) * scale,
    })
}

/// Information left on `τ₁` after the five nuisance parameters.
pub fn equivalent_fisher(j: &ParamFisher) -> Result<f64> {
    let m = &j.matrix;
    let mut scale = [0.0; 6];
    for (k, s) in scale.iter_mut().enumerate() {
        let d = m[(k, k)];
        if !(d > 0.0 && d.is_finite()) {
            return Err(Error::IllConditioned(format!(
                "Fisher diagonal entry {k} is {d}"
            )));
        }
        *s = 1.0 / d.sqrt();
    }
    // unit-diagonal form, so the condition check is scale free
    let eq = Matrix6::from_fn(|p, q| m[(p, q)] * scale[p] * scale[q]);
    let block: SMatrix<f64, 5, 5> = eq.fixed_view::<5, 5>(1, 1).into_owned();
    let cross: SMatrix<f64, 5, 1> = eq.fixed_view::<5, 1>(1, 0).into_owned();
    let eig = block.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if !(lo > 0.0) || hi / lo >= MAX_CONDITION {
        return Err(Error::IllConditioned(format!(
            "nuisance block eigenvalues in [{lo:e}, {hi:e}]"
        )));
    }
    let chol = block
        .cholesky()
        .ok_or_else(|| Error::IllConditioned("nuisance block not positive definite".into()))?;
    let loss = cross.dot(&chol.solve(&cross));
    Ok((1.0 - loss).max(0.0) * m[(0, 0)])
}

/// Evaluates CRLBs for one configuration, caching the subcarrier moments.
#[derive(Debug, Clone)]
pub struct CrlbModel {
    cfg: SystemConfig,
    moments: Moments,
    scale: f64,
}

impl CrlbModel {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        if cfg.excess_delay == 0.0 {
            return Err(Error::SingularModel("zero excess delay".into()));
        }
        Ok(CrlbModel {
            cfg: cfg.clone(),
            moments: Moments::new(cfg.excess_delay, cfg),
            scale: 2.0 * cfg.tx_power / cfg.noise_power,
        })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    /// Equivalent delay information of BS `bs` with the given scatter coefficient.
    pub fn delay_information(&self, x: f64, bs: usize, a_scatter: Complex64) -> Result<f64> {
        let a_los = channel::los_coefficient(x, bs, &self.cfg)?;
        let j = ParamFisher {
            matrix: self.moments.fisher(a_los, a_scatter) * self.scale,
        };
        debug_assert_eq!(self.moments.delta_tau, self.cfg.excess_delay);
        equivalent_fisher(&j)
    }

    /// Delay information with the conventional scatter magnitude `√σ²(d)`.
    pub fn delay_information_at_phase(&self, x: f64, bs: usize, phase: f64) -> Result<f64> {
        let d = channel::distance(x, bs, &self.cfg)?;
        let mag = channel::scatter_variance(d, &self.cfg)?.sqrt();
        self.delay_information(x, bs, Complex64::from_polar(mag, phase))
    }

    pub fn crlb(&self, x: f64, phases: PhasePair) -> Result<LocUncertainty> {
        let je = [
            self.delay_information_at_phase(x, 0, phases.phi1)?,
            self.delay_information_at_phase(x, 1, phases.phi2)?,
        ];
        self.combine(x, je)
    }

    pub fn crlb_with_scatter(&self, x: f64, a_scatter: [Complex64; 2]) -> Result<LocUncertainty> {
        let je = [
            self.delay_information(x, 0, a_scatter[0])?,
            self.delay_information(x, 1, a_scatter[1])?,
        ];
        self.combine(x, je)
    }

    /// Maps the per-BS delay informations to (x, B) and inverts.
    fn combine(&self, x: f64, je: [f64; 2]) -> Result<LocUncertainty> {
        let s: [f64; 2] = std::array::from_fn(|i| (x - self.cfg.bs_position(i)).signum());
        if s[0] == s[1] {
            return Err(Error::IllConditioned(format!(
                "x = {x} m lies outside the base-station segment; position and clock bias are not separable"
            )));
        }
        let mut j = Matrix2::zeros();
        for i in 0..2 {
            let row = [s[i] / SPEED_OF_LIGHT, 1.0];
            for p in 0..2 {
                for q in 0..2 {
                    j[(p, q)] += je[i] * row[p] * row[q];
                }
            }
        }
        let det = j[(0, 0)] * j[(1, 1)] - j[(0, 1)] * j[(1, 0)];
        if !(det > 1e-12 * j[(0, 0)] * j[(1, 1)]) {
            return Err(Error::IllConditioned(format!(
                "position/clock-bias information singular at x = {x} m (det {det:e})"
            )));
        }
        Ok(LocUncertainty {
            variance: j[(1, 1)] / det,
            clock_bias_coupled: j,
        })
    }

    /// Position standard deviations on the `nodes × nodes` phase grid,
    /// row-major with `φ₁` as the slow index.
    pub fn phase_sigmas(&self, x: f64, nodes: usize) -> Result<Vec<f64>> {
        let grid = PeriodicGrid::new(nodes);
        let je: [Vec<f64>; 2] = [0, 1].map(|bs| {
            grid.nodes()
                .iter()
                .map(|&phi| self.delay_information_at_phase(x, bs, phi))
                .collect::<Result<Vec<f64>>>()
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .try_into()
        .expect("two base stations");
        let mut out = Vec::with_capacity(nodes * nodes);
        for &j1 in &je[0] {
            for &j2 in &je[1] {
                out.push(self.combine(x, [j1, j2])?.variance.sqrt());
            }
        }
        Ok(out)
    }

    /// Extremes and mean of the variance over the phase grid.
    pub fn variance_summary(&self, x: f64, nodes: usize) -> Result<VarianceSummary> {
        let sig = self.phase_sigmas(x, nodes)?;
        let mut sum = 0.0;
        let mut min = f64::INFINITY;
        let mut max = 0.0f64;
        for s in &sig {
            let v = s * s;
            sum += v;
            min = min.min(v);
            max = max.max(v);
        }
        Ok(VarianceSummary {
            mean: sum / sig.len() as f64,
            min,
            max,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// The location-estimate model consumed by the reliability evaluators.
pub trait LocationModel: Sync {
    /// `σ(x; φ)` on a `nodes × nodes` phase grid.
    fn phase_sigmas(&self, x: f64, nodes: usize) -> Result<Vec<f64>>;

    /// Phase-averaged standard deviation `σ̄(x)`.
    fn average_std(&self, x: f64, nodes: usize) -> Result<f64> {
        let sig = self.phase_sigmas(x, nodes)?;
        Ok((sig.iter().map(|s| s * s).sum::<f64>() / sig.len() as f64).sqrt())
    }
}

impl LocationModel for CrlbModel {
    fn phase_sigmas(&self, x: f64, nodes: usize) -> Result<Vec<f64>> {
        CrlbModel::phase_sigmas(self, x, nodes)
    }
}

/// Phase-independent standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantStd(pub f64);

impl LocationModel for ConstantStd {
    fn phase_sigmas(&self, _x: f64, nodes: usize) -> Result<Vec<f64>> {
        Ok(vec![self.0; nodes * nodes])
    }
}

pub fn crlb(x: f64, phases: PhasePair, cfg: &SystemConfig) -> Result<LocUncertainty> {
    CrlbModel::new(cfg)?.crlb(x, phases)
}

/// `σ̄(x)` with `cfg.numerics.phase_nodes` nodes per phase axis.
pub fn average_std(x: f64, cfg: &SystemConfig) -> Result<f64> {
    CrlbModel::new(cfg)?.average_std(x, cfg.numerics.phase_nodes)
}

/// Draws `x̂`: uniform phases, then a Gaussian around `x` with the CRLB variance.
pub fn sample_estimate<R: Rng + ?Sized>(x: f64, cfg: &SystemConfig, rng: &mut R) -> Result<f64> {
    CrlbModel::new(cfg)?.sample_estimate(x, rng)
}

impl CrlbModel {
    pub fn sample_estimate<R: Rng + ?Sized>(&self, x: f64, rng: &mut R) -> Result<f64> {
        let phases = PhasePair::new(rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
        let sd = self.crlb(x, phases)?.variance.sqrt();
        let normal = Normal::new(x, sd).map_err(|e| Error::InvalidDomain(e.to_string()))?;
        Ok(normal.sample(rng))
    }
}
