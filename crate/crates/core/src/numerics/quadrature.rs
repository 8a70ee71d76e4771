//! Quadrature rules: the periodic trapezoid rule on `[0, 2π)` and
//! Gauss-Hermite nodes for expectations under a normal law.

use nalgebra::{DMatrix, SymmetricEigen};
use std::f64::consts::{PI, SQRT_2};

/// Equispaced nodes on `[0, 2π)` with equal weights `1/M`. Spectrally
/// accurate for smooth periodic integrands.
#[derive(Debug, Clone)]
pub struct PeriodicGrid {
    nodes: Vec<f64>,
}

impl PeriodicGrid {
    pub fn new(m: usize) -> Self {
        assert!(m > 0);
        let h = 2.0 * PI / m as f64;
        PeriodicGrid {
            nodes: (0..m).map(|k| k as f64 * h).collect(),
        }
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.nodes.len() as f64
    }
}

/// Gauss-Hermite rule rescaled for `E[f(Z)]`, `Z ~ N(0, 1)`:
/// `E[f(Z)] ≈ Σ p_k f(z_k)` with `Σ p_k = 1`.
#[derive(Debug, Clone)]
pub struct GaussHermite {
    points: Vec<f64>,
    probs: Vec<f64>,
}

impl GaussHermite {
    /// Golub-Welsch: eigen-decomposition of the Jacobi matrix of the
    /// physicists' Hermite recurrence.
    pub fn new(n: usize) -> Self {
        assert!(n > 0);
        let mut jacobi = DMatrix::<f64>::zeros(n, n);
        for k in 1..n {
            let b = (k as f64 / 2.0).sqrt();
            jacobi[(k, k - 1)] = b;
            jacobi[(k - 1, k)] = b;
        }
        let eig = SymmetricEigen::new(jacobi);
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let v0 = eig.eigenvectors[(0, k)];
                (SQRT_2 * eig.eigenvalues[k], v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        // Symmetrize to remove eigen-solver round-off.
        for k in 0..n / 2 {
            let j = n - 1 - k;
            let z = 0.5 * (pairs[j].0 - pairs[k].0);
            let p = 0.5 * (pairs[j].1 + pairs[k].1);
            pairs[k] = (-z, p);
            pairs[j] = (z, p);
        }
        if n % 2 == 1 {
            pairs[n / 2].0 = 0.0;
        }
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        GaussHermite {
            points: pairs.iter().map(|p| p.0).collect(),
            probs: pairs.iter().map(|p| p.1 / total).collect(),
        }
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `E[f(mean + sd·Z)]`.
    pub fn expect<F: FnMut(f64) -> f64>(&self, mean: f64, sd: f64, mut f: F) -> f64 {
        self.points
            .iter()
            .zip(&self.probs)
            .map(|(&z, &p)| p * f(mean + sd * z))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trapezoid_is_exact_for_low_trig_polynomials() {
        let g = PeriodicGrid::new(16);
        let mean = |f: &dyn Fn(f64) -> f64| g.nodes().iter().map(|&t| f(t)).sum::<f64>() * g.weight();
        assert!((mean(&|t| (3.0 * t).cos() + 2.0)).abs() - 2.0 < 1e-14);
        assert!((mean(&|t| t.sin().powi(2)) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn hermite_reproduces_normal_moments() {
        let gh = GaussHermite::new(41);
        // E[Z^(2m)] = (2m-1)!!
        let mut dfact = 1.0;
        for m in 1..=10 {
            dfact *= (2 * m - 1) as f64;
            let got = gh.expect(0.0, 1.0, |z| z.powi(2 * m));
            assert!((got - dfact).abs() / dfact < 1e-11, "moment {m}: {got} vs {dfact}");
            let odd = gh.expect(0.0, 1.0, |z| z.powi(2 * m - 1));
            let scale = gh.expect(0.0, 1.0, |z| z.abs().powi(2 * m - 1));
            assert!(odd.abs() < 1e-14 * scale);
        }
        assert!((gh.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hermite_smooth_expectation() {
        // E[cos(Z)] = exp(-1/2)
        let gh = GaussHermite::new(20);
        assert!((gh.expect(0.0, 1.0, f64::cos) - (-0.5f64).exp()).abs() < 1e-14);
        assert!((gh.expect(2.0, 3.0, |x| x) - 2.0).abs() < 1e-13);
    }
}
