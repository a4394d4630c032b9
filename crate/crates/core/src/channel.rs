//! Line-of-sight mmWave channel of a half-wavelength uniform linear array.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scenario::{SimConfig, VehicleState};
use crate::sensing::{self, AoIVector};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Array response `a(theta)`; every entry is a unit-modulus phasor.
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringVector(pub Vec<Complex64>);

impl SteeringVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelVector {
    pub entries: Vec<Complex64>,
    /// Free-space amplitude `lambda / (4 pi d)`.
    pub alpha: f64,
    /// Carrier phase `2 pi f_c d / c` (rad); the channel carries `exp(-j phase)`.
    pub phase: f64,
}

/// `a_m(theta) = exp(j pi m sin(theta))`, phase reference at element 0.
pub fn steering(theta: f64, antennas: usize) -> SteeringVector {
    let s = PI * theta.sin();
    SteeringVector((0..antennas).map(|m| Complex64::from_polar(1.0, s * m as f64)).collect())
}

/// Angle derivative of [`steering`]: `j pi m cos(theta) a_m(theta)`.
pub fn steering_derivative(theta: f64, antennas: usize) -> Vec<Complex64> {
    let s = PI * theta.sin();
    let c = PI * theta.cos();
    (0..antennas)
        .map(|m| {
            let m = m as f64;
            Complex64::new(0.0, c * m) * Complex64::from_polar(1.0, s * m)
        })
        .collect()
}

/// Free-space path amplitude.
pub fn path_gain(d: f64, cfg: &SimConfig) -> f64 {
    cfg.wavelength() / (4.0 * PI * d)
}

/// `h = alpha(d) exp(-j 2 pi f_c d / c) a(theta)`.
pub fn channel(d: f64, theta: f64, cfg: &SimConfig) -> Result<ChannelVector> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("range must be positive, got {d}")));
    }
    let alpha = path_gain(d, cfg);
    let phase = 2.0 * PI * cfg.carrier_frequency * d / SPEED_OF_LIGHT;
    let common = Complex64::from_polar(alpha, -phase);
    let entries = steering(theta, cfg.antennas).0.into_iter().map(|a| common * a).collect();
    Ok(ChannelVector { entries, alpha, phase })
}

/// `sum_m m^2` for an M-element array.
fn index_square_sum(antennas: usize) -> f64 {
    let m = antennas as f64;
    (m - 1.0) * m * (2.0 * m - 1.0) / 6.0
}

/// `||dh/dtheta||^2 / alpha^2 = pi^2 cos^2(theta) sum m^2`.
fn angular_sensitivity(theta: f64, antennas: usize) -> f64 {
    (PI * theta.cos()).powi(2) * index_square_sum(antennas)
}

/// `||dh/dd||^2 / alpha^2 = M (1/d^2 + (2 pi f_c / c)^2)`; the first term is
/// the path-loss slope, the second the carrier-phase slope.
fn range_sensitivity(d: f64, cfg: &SimConfig) -> f64 {
    let k = 2.0 * PI * cfg.carrier_frequency / SPEED_OF_LIGHT;
    cfg.antennas as f64 * (1.0 / (d * d) + k * k)
}

/// First-order expected channel error `E||dh||^2` caused by stale position
/// knowledge: angular term `||dh/dtheta||^2 sigma_tan^2 / d^2` plus radial
/// term `||dh/dd||^2 sigma_rad^2`.
pub fn channel_error_variance(state: &VehicleState, aoi: &AoIVector, cfg: &SimConfig) -> Result<f64> {
    let d = state.d;
    if !(d > 0.0) {
        return Err(Error::Domain(format!("range must be positive, got {d}")));
    }
    let alpha = path_gain(d, cfg);
    Ok(alpha * alpha * normalized_error_terms(state, aoi, cfg).total())
}

/// Angular and radial contributions of the channel error, normalized by the
/// path gain `alpha^2` so that the geometric scaling is visible in isolation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelErrorTerms {
    pub tangential: f64,
    pub radial: f64,
}

impl ChannelErrorTerms {
    pub fn total(&self) -> f64 {
        self.tangential + self.radial
    }
}

pub fn normalized_error_terms(state: &VehicleState, aoi: &AoIVector, cfg: &SimConfig) -> ChannelErrorTerms {
    let unc = sensing::uncertainty(aoi, state.u_rad, state.u_tan, cfg);
    let d = state.d;
    ChannelErrorTerms {
        tangential: angular_sensitivity(state.theta, cfg.antennas) * unc.sigma_tan.powi(2) / (d * d),
        radial: range_sensitivity(d, cfg) * unc.sigma_rad.powi(2),
    }
}

/// `x^H y`.
pub fn inner(x: &[Complex64], y: &[Complex64]) -> Complex64 {
    x.iter().zip(y).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm_sqr(x: &[Complex64]) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum()
}
