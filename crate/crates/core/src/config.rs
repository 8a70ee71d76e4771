//! System configuration.
//!
//! The on-disk document uses dBm for powers; [`SystemConfig`] holds linear
//! watts. The conversion happens once, in [`SystemConfig::from_document`].

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn dbm_to_watt(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0) * 1e-3
}

pub fn watt_to_dbm(w: f64) -> f64 {
    10.0 * (w * 1e3).log10()
}

/// Numerical-method settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Numerics {
    /// Radio map grid, metres.
    pub grid_min: f64,
    pub grid_max: f64,
    pub grid_step: f64,
    /// Scatter draws per map location.
    pub mar_samples: usize,
    /// Ping pairs per map location for the serving-BS frequencies.
    pub bs_select_samples: usize,
    /// Outage levels that must appear exactly in every quantile table.
    pub eps_levels: Vec<f64>,
    /// Trapezoid nodes per phase axis for the CRLB average and meta-probability.
    pub phase_nodes: usize,
    /// Trapezoid nodes per phase axis for the throughput ratio.
    pub throughput_phase_nodes: usize,
    /// Gauss-Hermite nodes over the conditional location estimate.
    pub hermite_nodes: usize,
    pub seed: u64,
    /// Closest admissible UE-to-BS distance, metres.
    pub min_bs_distance: f64,
    /// True-location step used by the calibrations, metres.
    pub calib_x_step: f64,
    /// Location step of the figure curves, metres.
    pub curve_x_step: f64,
}

impl Default for Numerics {
    fn default() -> Self {
        Numerics {
            grid_min: -400.0,
            grid_max: 1400.0,
            grid_step: 1.0,
            mar_samples: 1_000_000,
            bs_select_samples: 20_000,
            eps_levels: vec![1e-3],
            phase_nodes: 64,
            throughput_phase_nodes: 32,
            hermite_nodes: 41,
            seed: 1,
            min_bs_distance: 1.0,
            calib_x_step: 5.0,
            curve_x_step: 10.0,
        }
    }
}

/// The JSON document a configuration is read from. Every key is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigDocument {
    pub bs_positions: [f64; 2],
    pub tx_power_dbm: f64,
    pub noise_power_dbm: f64,
    pub bandwidth_hz: f64,
    pub carrier_freq_hz: f64,
    pub n_subcarriers: usize,
    pub excess_delay_s: f64,
    pub pdp_rho: f64,
    pub numerics: Numerics,
}

impl Default for ConfigDocument {
    fn default() -> Self {
        ConfigDocument {
            bs_positions: [0.0, 1000.0],
            tx_power_dbm: 10.0,
            noise_power_dbm: -70.0,
            bandwidth_hz: 10e6,
            carrier_freq_hz: 2.1e9,
            n_subcarriers: 600,
            excess_delay_s: 50e-9,
            pdp_rho: 2.0,
            numerics: Numerics::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub bs_positions: [f64; 2],
    /// Transmit power per subcarrier, W.
    pub tx_power: f64,
    /// Noise variance, W.
    pub noise_power: f64,
    pub bandwidth: f64,
    pub carrier_freq: f64,
    pub n_subcarriers: usize,
    /// Scatter-path excess delay, s.
    pub excess_delay: f64,
    pub pdp_rho: f64,
    pub numerics: Numerics,
    // dBm values as read, so a document survives load/save unchanged.
    tx_power_dbm: f64,
    noise_power_dbm: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig::from_document(ConfigDocument::default()).expect("defaults are valid")
    }
}

impl SystemConfig {
    pub fn from_document(doc: ConfigDocument) -> Result<Self> {
        let cfg = SystemConfig {
            bs_positions: doc.bs_positions,
            tx_power: dbm_to_watt(doc.tx_power_dbm),
            noise_power: dbm_to_watt(doc.noise_power_dbm),
            bandwidth: doc.bandwidth_hz,
            carrier_freq: doc.carrier_freq_hz,
            n_subcarriers: doc.n_subcarriers,
            excess_delay: doc.excess_delay_s,
            pdp_rho: doc.pdp_rho,
            numerics: doc.numerics,
            tx_power_dbm: doc.tx_power_dbm,
            noise_power_dbm: doc.noise_power_dbm,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ConfigDocument = serde_json::from_str(text)?;
        SystemConfig::from_document(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        SystemConfig::from_json(&text)
    }

    pub fn to_document(&self) -> ConfigDocument {
        let tx_power_dbm = if dbm_to_watt(self.tx_power_dbm) == self.tx_power {
            self.tx_power_dbm
        } else {
            watt_to_dbm(self.tx_power)
        };
        let noise_power_dbm = if dbm_to_watt(self.noise_power_dbm) == self.noise_power {
            self.noise_power_dbm
        } else {
            watt_to_dbm(self.noise_power)
        };
        ConfigDocument {
            bs_positions: self.bs_positions,
            tx_power_dbm,
            noise_power_dbm,
            bandwidth_hz: self.bandwidth,
            carrier_freq_hz: self.carrier_freq,
            n_subcarriers: self.n_subcarriers,
            excess_delay_s: self.excess_delay,
            pdp_rho: self.pdp_rho,
            numerics: self.numerics.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_document()).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON document.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(&self.to_document()).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| -> Result<()> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(field, format!("must be finite and > 0, got {v}")))
            }
        };
        let [b1, b2] = self.bs_positions;
        if !(b1.is_finite() && b2.is_finite()) || b1 == b2 {
            return Err(Error::validation(
                "bs_positions",
                format!("need two distinct finite positions, got [{b1}, {b2}]"),
            ));
        }
        positive("tx_power_dbm", self.tx_power)?;
        positive("noise_power_dbm", self.noise_power)?;
        positive("bandwidth_hz", self.bandwidth)?;
        positive("carrier_freq_hz", self.carrier_freq)?;
        positive("excess_delay_s", self.excess_delay)?;
        positive("pdp_rho", self.pdp_rho)?;
        if self.n_subcarriers == 0 {
            return Err(Error::validation("n_subcarriers", "must be at least 1"));
        }
        let n = &self.numerics;
        positive("numerics.grid_step", n.grid_step)?;
        positive("numerics.min_bs_distance", n.min_bs_distance)?;
        positive("numerics.calib_x_step", n.calib_x_step)?;
        positive("numerics.curve_x_step", n.curve_x_step)?;
        if !(n.grid_min.is_finite() && n.grid_max.is_finite()) || n.grid_max <= n.grid_min {
            return Err(Error::validation(
                "numerics.grid_max",
                format!("grid [{}, {}] is empty", n.grid_min, n.grid_max),
            ));
        }
        if n.mar_samples == 0 {
            return Err(Error::validation("numerics.mar_samples", "must be at least 1"));
        }
        if n.bs_select_samples == 0 {
            return Err(Error::validation("numerics.bs_select_samples", "must be at least 1"));
        }
        if n.phase_nodes < 2 || n.throughput_phase_nodes < 2 {
            return Err(Error::validation("numerics.phase_nodes", "need at least 2 nodes"));
        }
        if n.hermite_nodes == 0 {
            return Err(Error::validation("numerics.hermite_nodes", "must be at least 1"));
        }
        for &e in &n.eps_levels {
            if !(e > 0.0 && e < 1.0) {
                return Err(Error::validation("numerics.eps_levels", format!("{e} not in (0, 1)")));
            }
        }
        Ok(())
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_freq
    }

    pub fn subcarrier_spacing(&self) -> f64 {
        self.bandwidth / self.n_subcarriers as f64
    }

    pub fn set_tx_power_watt(&mut self, w: f64) {
        self.tx_power = w;
        self.tx_power_dbm = watt_to_dbm(w);
    }

    pub fn set_noise_power_watt(&mut self, w: f64) {
        self.noise_power = w;
        self.noise_power_dbm = watt_to_dbm(w);
    }

    pub fn bs_position(&self, bs: usize) -> f64 {
        self.bs_positions[bs]
    }

    /// Single-subcarrier variant with BS 1 at the origin, used by the
    /// closed-form tail results.
    pub fn single_subcarrier(&self) -> SystemConfig {
        let mut cfg = self.clone();
        cfg.n_subcarriers = 1;
        let span = self.bs_positions[1] - self.bs_positions[0];
        cfg.bs_positions = [0.0, span];
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_table_defaults() {
        let cfg = SystemConfig::from_json("{}").unwrap();
        assert_eq!(cfg.bs_positions, [0.0, 1000.0]);
        assert!((cfg.tx_power - 0.01).abs() < 1e-15);
        assert!((cfg.noise_power - 1e-10).abs() < 1e-24);
        assert_eq!(cfg.bandwidth, 10e6);
        assert_eq!(cfg.carrier_freq, 2.1e9);
        assert_eq!(cfg.n_subcarriers, 600);
        assert_eq!(cfg.excess_delay, 50e-9);
        assert_eq!(cfg.pdp_rho, 2.0);
        assert_eq!(cfg.numerics.min_bs_distance, 1.0);
    }

    #[test]
    fn negative_bandwidth_is_rejected() {
        let err = SystemConfig::from_json(r#"{"bandwidth_hz": -1.0}"#).unwrap_err();
        match err {
            Error::Validation { field, .. } => assert_eq!(field, "bandwidth_hz"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn coincident_base_stations_are_rejected() {
        assert!(SystemConfig::from_json(r#"{"bs_positions": [5.0, 5.0]}"#).is_err());
    }

    #[test]
    fn unknown_key_is_a_parse_error() {
        let err = SystemConfig::from_json(r#"{"bandwith_hz": 1.0}"#).unwrap_err();
        assert!(matches!(err, Error::Parse(_)));
    }

    #[test]
    fn load_save_load_is_identity() {
        let text = r#"{"tx_power_dbm": 13.7, "noise_power_dbm": -93.1, "numerics": {"seed": 9}}"#;
        let a = SystemConfig::from_json(text).unwrap();
        let b = SystemConfig::from_json(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn derived_quantities() {
        let cfg = SystemConfig::default();
        assert!((cfg.subcarrier_spacing() - 16_666.666_666_666_668).abs() < 1e-9);
        assert!((cfg.wavelength() - 0.142_758_313_333_333_34).abs() < 1e-15);
    }
}
