//! Surrogate transmission model of a slit flanked by two gratings.
//!
//! Each grating contributes a Lorentzian resonance centred at `n_eff·Λ` with
//! amplitude `h/h_max`:
//!
//! ```text
//! T(λ) = t_bg + (1 − t_bg) · ½ · [g(λ; Λ₁, h₁) + g(λ; Λ₂, h₂)]
//! g(λ; Λ, h) = (h / h_max) · γ² / ((λ − n_eff·Λ)² + γ²)
//! ```
//!
//! The two gratings enter symmetrically, so mirroring the device
//! (swapping `(Λ₁, h₁)` with `(Λ₂, h₂)`) leaves the spectrum bit-identical.
//! That swap is the only source of ambiguity in the inverse problem.

use numerics::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[Λ₁, Λ₂, h₁, h₂]` in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceParams {
    pub lambda1_nm: f64,
    pub lambda2_nm: f64,
    pub h1_nm: f64,
    pub h2_nm: f64,
}

impl DeviceParams {
    pub const DIM: usize = 4;
    pub const NAMES: [&'static str; 4] = ["lambda1_nm", "lambda2_nm", "h1_nm", "h2_nm"];

    pub fn new(lambda1_nm: f64, lambda2_nm: f64, h1_nm: f64, h2_nm: f64) -> Self {
        Self {
            lambda1_nm,
            lambda2_nm,
            h1_nm,
            h2_nm,
        }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let a: [f64; 4] = v.try_into().map_err(|_| Error::Length {
            what: "device parameters",
            expected: 4,
            found: v.len(),
        })?;
        Ok(Self::from_array(a))
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.lambda1_nm, self.lambda2_nm, self.h1_nm, self.h2_nm]
    }

    /// The device reflected through the slit centre.
    pub fn mirrored(self) -> Self {
        Self::new(self.lambda2_nm, self.lambda1_nm, self.h2_nm, self.h1_nm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpticsConfig {
    pub grid_min_nm: f64,
    pub grid_max_nm: f64,
    pub grid_points: usize,
    pub lambda_min_nm: f64,
    pub lambda_max_nm: f64,
    pub h_min_nm: f64,
    pub h_max_nm: f64,
    /// Maps a grating period to its resonance wavelength.
    pub n_eff: f64,
    /// Lorentzian half-width.
    pub gamma_nm: f64,
    /// Off-resonance transmission.
    pub t_bg: f64,
    // Fixed geometry, recorded for documentation only; the surrogate does not use it.
    pub slit_width_nm: f64,
    pub film_thickness_nm: f64,
    pub ambient_index: f64,
    pub duty_cycle: f64,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            grid_min_nm: 400.0,
            grid_max_nm: 900.0,
            grid_points: 128,
            lambda_min_nm: 450.0,
            lambda_max_nm: 800.0,
            h_min_nm: 20.0,
            h_max_nm: 100.0,
            n_eff: 1.05,
            gamma_nm: 20.0,
            t_bg: 0.02,
            slit_width_nm: 100.0,
            film_thickness_nm: 250.0,
            ambient_index: 1.0,
            duty_cycle: 0.5,
        }
    }
}

impl OpticsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.grid_min_nm < self.grid_max_nm) {
            return fail(format!(
                "grid_min_nm {} must be below grid_max_nm {}",
                self.grid_min_nm, self.grid_max_nm
            ));
        }
        if self.grid_points < 2 || !self.grid_points.is_power_of_two() {
            return fail(format!(
                "grid_points {} must be a power of two ≥ 2",
                self.grid_points
            ));
        }
        if !(self.lambda_min_nm < self.lambda_max_nm) || !(self.h_min_nm < self.h_max_nm) {
            return fail("parameter bounds must be non-empty intervals".into());
        }
        if !(self.h_min_nm >= 0.0) {
            return fail(format!("h_min_nm {} must be non-negative", self.h_min_nm));
        }
        if !(self.gamma_nm > 0.0) || !(self.n_eff > 0.0) {
            return fail("gamma_nm and n_eff must be positive".into());
        }
        if !(0.0..1.0).contains(&self.t_bg) {
            return fail(format!("t_bg {} must lie in [0, 1)", self.t_bg));
        }
        let lo = self.n_eff * self.lambda_min_nm;
        let hi = self.n_eff * self.lambda_max_nm;
        if lo < self.grid_min_nm || hi > self.grid_max_nm {
            return fail(format!(
                "resonances [{lo}, {hi}] nm fall outside the grid [{}, {}] nm",
                self.grid_min_nm, self.grid_max_nm
            ));
        }
        Ok(())
    }

    pub fn grid_step_nm(&self) -> f64 {
        (self.grid_max_nm - self.grid_min_nm) / (self.grid_points - 1) as f64
    }

    pub fn wavelength(&self, k: usize) -> f64 {
        self.grid_min_nm + k as f64 * self.grid_step_nm()
    }

    pub fn wavelengths(&self) -> Vec<f64> {
        (0..self.grid_points).map(|k| self.wavelength(k)).collect()
    }

    /// Lower and upper bound of each device component, in `DeviceParams` order.
    pub fn bounds(&self) -> [(f64, f64); 4] {
        let l = (self.lambda_min_nm, self.lambda_max_nm);
        let h = (self.h_min_nm, self.h_max_nm);
        [l, l, h, h]
    }

    pub fn check_device(&self, d: &DeviceParams) -> Result<()> {
        for ((name, value), (min, max)) in DeviceParams::NAMES.iter().zip(d.to_array()).zip(self.bounds()) {
            if !(value >= min && value <= max) {
                return Err(Error::DeviceOutOfBounds {
                    param: name,
                    value,
                    min,
                    max,
                });
            }
        }
        Ok(())
    }

    pub fn in_bounds(&self, d: &DeviceParams) -> bool {
        self.check_device(d).is_ok()
    }

    /// Period separation above which the two resonances are resolved.
    pub fn resolvable_period_gap_nm(&self) -> f64 {
        2.0 * self.gamma_nm / self.n_eff
    }
}

/// Transmission samples on the configured wavelength grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Spectrum(pub Vec<f64>);

impl Spectrum {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn resonance(lambda: f64, period: f64, depth: f64, cfg: &OpticsConfig) -> f64 {
    let g2 = cfg.gamma_nm * cfg.gamma_nm;
    let detune = lambda - cfg.n_eff * period;
    (depth / cfg.h_max_nm) * g2 / (detune * detune + g2)
}

/// Surrogate transmission at an arbitrary wavelength; no bounds check.
pub fn transmission_at(device: &DeviceParams, cfg: &OpticsConfig, lambda_nm: f64) -> f64 {
    let a = resonance(lambda_nm, device.lambda1_nm, device.h1_nm, cfg);
    let b = resonance(lambda_nm, device.lambda2_nm, device.h2_nm, cfg);
    // a + b is commutative in IEEE arithmetic, which makes the mirror symmetry exact.
    cfg.t_bg + (1.0 - cfg.t_bg) * 0.5 * (a + b)
}

pub fn simulate(device: &DeviceParams, cfg: &OpticsConfig) -> Result<Spectrum> {
    cfg.check_device(device)?;
    Ok(Spectrum(
        (0..cfg.grid_points)
            .map(|k| transmission_at(device, cfg, cfg.wavelength(k)))
            .collect(),
    ))
}

/// Independent uniform draw of each component over its interval.
pub fn sample_device(rng: &mut Rng, cfg: &OpticsConfig) -> DeviceParams {
    DeviceParams::new(
        rng.uniform(cfg.lambda_min_nm, cfg.lambda_max_nm),
        rng.uniform(cfg.lambda_min_nm, cfg.lambda_max_nm),
        rng.uniform(cfg.h_min_nm, cfg.h_max_nm),
        rng.uniform(cfg.h_min_nm, cfg.h_max_nm),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        OpticsConfig::default().validate().unwrap();
    }

    #[test]
    fn config_rejects_bad_grid() {
        let cfg = OpticsConfig {
            grid_points: 100,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = OpticsConfig {
            lambda_max_nm: 900.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn swap_symmetry_exact() {
        let cfg = OpticsConfig::default();
        let d = DeviceParams::new(512.3, 701.9, 33.0, 87.5);
        let a = simulate(&d, &cfg).unwrap();
        let b = simulate(&d.mirrored(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn peak_value_symmetric_device() {
        let cfg = OpticsConfig::default();
        let full = DeviceParams::new(600.0, 600.0, 100.0, 100.0);
        assert!((transmission_at(&full, &cfg, 630.0) - 1.0).abs() < 1e-15);
        let shallow = DeviceParams::new(600.0, 600.0, 20.0, 20.0);
        assert!((transmission_at(&shallow, &cfg, 630.0) - 0.216).abs() < 1e-15);
    }

    #[test]
    fn out_of_bounds_names_parameter() {
        let cfg = OpticsConfig::default();
        let err = simulate(&DeviceParams::new(600.0, 600.0, 120.0, 50.0), &cfg).unwrap_err();
        assert!(matches!(err, Error::DeviceOutOfBounds { param: "h1_nm", .. }));
        let err = simulate(&DeviceParams::new(600.0, 440.0, 50.0, 50.0), &cfg).unwrap_err();
        assert!(err.to_string().contains("lambda2_nm"), "{err}");
    }

    #[test]
    fn sample_device_respects_bounds_and_seed() {
        let cfg = OpticsConfig::default();
        let mut a = Rng::new(4);
        let mut b = Rng::new(4);
        for _ in 0..1000 {
            let d = sample_device(&mut a, &cfg);
            assert!(cfg.in_bounds(&d));
            assert_eq!(d, sample_device(&mut b, &cfg));
        }
    }

    #[test]
    fn sample_device_means() {
        let cfg = OpticsConfig::default();
        let mut rng = Rng::new(21);
        let n = 100_000;
        let mut sum = [0.0; 4];
        for _ in 0..n {
            for (s, v) in sum.iter_mut().zip(sample_device(&mut rng, &cfg).to_array()) {
                *s += v;
            }
        }
        for (s, (lo, hi)) in sum.iter().zip(cfg.bounds()) {
            let mid = 0.5 * (lo + hi);
            assert!((s / n as f64 - mid).abs() < 0.01 * mid);
        }
    }

    #[test]
    fn two_peaks_for_separated_periods() {
        let cfg = OpticsConfig::default();
        let d = DeviceParams::new(480.0, 760.0, 70.0, 90.0);
        let s = simulate(&d, &cfg).unwrap();
        let v = s.values();
        let maxima: Vec<usize> = (1..v.len() - 1).filter(|&k| v[k] > v[k - 1] && v[k] > v[k + 1]).collect();
        assert_eq!(maxima.len(), 2);
        let step = cfg.grid_step_nm();
        for (k, period) in maxima.iter().zip([480.0, 760.0]) {
            assert!((cfg.wavelength(*k) - cfg.n_eff * period).abs() <= step);
        }
    }
}
