//! Vector age of information, AoI-driven position uncertainty, beam
//! misalignment probability and the angular posterior Cramér-Rao bound.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{inner, steering, steering_derivative};
use crate::scenario::SimConfig;

/// Ages (in slots) of the radar and camera information about one vehicle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AoIVector {
    pub a_rad: u64,
    pub a_tan: u64,
}

impl AoIVector {
    pub fn fresh() -> Self {
        AoIVector { a_rad: 1, a_tan: 1 }
    }
}

impl Default for AoIVector {
    fn default() -> Self {
        Self::fresh()
    }
}

/// Radar refreshes every slot; the camera age resets to the sojourn time of a
/// completed visual task and otherwise grows by one.
pub fn update_aoi(aoi: AoIVector, task_completed: bool, t_queue: u64) -> AoIVector {
    let a_tan = if task_completed { t_queue.max(1) } else { aoi.a_tan + 1 };
    AoIVector { a_rad: 1, a_tan }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UncertaintyPair {
    pub sigma_rad: f64,
    pub sigma_tan: f64,
}

pub fn uncertainty(aoi: &AoIVector, u_rad: f64, u_tan: f64, cfg: &SimConfig) -> UncertaintyPair {
    let drift_rad = cfg.c_rad * u_rad * aoi.a_rad as f64;
    let drift_tan = cfg.c_tan * u_tan * aoi.a_tan as f64;
    UncertaintyPair {
        sigma_rad: drift_rad.hypot(cfg.eps_rad),
        sigma_tan: drift_tan.hypot(cfg.eps_cam),
    }
}

/// Standard normal upper tail.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Probability that the pointing error exceeds half the beamwidth.
pub fn misalignment_probability(sigma_tan: f64, d: f64, beamwidth: f64) -> f64 {
    let reach = beamwidth * d;
    if !(sigma_tan > 0.0) {
        return if reach > 0.0 { 0.0 } else { 1.0 };
    }
    (2.0 * q_function(reach / (2.0 * sigma_tan))).clamp(0.0, 1.0)
}

/// Diagonal 2x2 Fisher information in (theta, d).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fim2x2 {
    pub j11: f64,
    pub j22: f64,
}

impl std::ops::Add for Fim2x2 {
    type Output = Fim2x2;

    fn add(self, rhs: Fim2x2) -> Fim2x2 {
        Fim2x2 { j11: self.j11 + rhs.j11, j22: self.j22 + rhs.j22 }
    }
}

/// Information carried by the echo of beam `v` from azimuth `theta`.
pub fn data_fim(v: &[Complex64], theta: f64, cfg: &SimConfig) -> Fim2x2 {
    let m = v.len();
    let a = steering(theta, m);
    let da = steering_derivative(theta, m);
    Fim2x2 {
        j11: cfg.snr_linear * cfg.beta_theta * inner(&da, v).norm_sqr(),
        j22: cfg.snr_linear * cfg.beta_d * inner(a.as_slice(), v).norm_sqr(),
    }
}

pub fn prior_fim(unc: &UncertaintyPair, d: f64) -> Fim2x2 {
    Fim2x2 {
        j11: d * d / (unc.sigma_tan * unc.sigma_tan),
        j22: 1.0 / (unc.sigma_rad * unc.sigma_rad),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pcrb {
    pub value: f64,
    /// True when the total information was zero and `value` is the cap.
    pub saturated: bool,
}

/// `[J_B^-1]_{1,1}` for the diagonal Bayesian information `data + prior`.
pub fn pcrb_theta(data: &Fim2x2, prior: &Fim2x2, cap: f64) -> Pcrb {
    let total = data.j11 + prior.j11;
    if total > 0.0 && total.is_finite() {
        Pcrb { value: (1.0 / total).min(cap), saturated: false }
    } else if total.is_infinite() {
        Pcrb { value: 0.0, saturated: false }
    } else {
        Pcrb { value: cap, saturated: true }
    }
}

/// Range bound `[J_B^-1]_{2,2}`; diagnostic only.
pub fn pcrb_range(data: &Fim2x2, prior: &Fim2x2, cap: f64) -> Pcrb {
    pcrb_theta(&Fim2x2 { j11: data.j22, j22: 0.0 }, &Fim2x2 { j11: prior.j22, j22: 0.0 }, cap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::default_config;

    #[test]
    fn aoi_update_cases() {
        let aoi = AoIVector { a_rad: 1, a_tan: 7 };
        assert_eq!(update_aoi(aoi, true, 2).a_tan, 2);
        assert_eq!(update_aoi(aoi, false, 0).a_tan, 8);
        assert_eq!(update_aoi(AoIVector { a_rad: 5, a_tan: 3 }, false, 0).a_rad, 1);
    }

    #[test]
    fn uncertainty_cases() {
        let cfg = SimConfig { c_tan: 1e-3, eps_cam: 0.1, ..default_config() };
        let aoi = AoIVector { a_rad: 1, a_tan: 10 };
        let u = uncertainty(&aoi, 0.0, 15.0, &cfg);
        assert!((u.sigma_tan - (0.15f64 * 0.15 + 0.01).sqrt()).abs() < 1e-12);
        assert!((u.sigma_tan - 0.1803).abs() < 1e-4);
        assert_eq!(uncertainty(&aoi, 3.0, 0.0, &cfg).sigma_tan, cfg.eps_cam);
        let cfg = SimConfig { eps_cam: 0.0, ..cfg };
        let one = uncertainty(&AoIVector { a_rad: 1, a_tan: 6 }, 0.0, 15.0, &cfg).sigma_tan;
        let two = uncertainty(&AoIVector { a_rad: 1, a_tan: 12 }, 0.0, 15.0, &cfg).sigma_tan;
        assert!((two / one - 2.0).abs() < 1e-12);
    }

    #[test]
    fn q_function_table() {
        // Standard normal upper tail values.
        let table = [
            (0.0, 0.5),
            (0.5, 0.308_537_538_725_986_9),
            (1.0, 0.158_655_253_931_457_05),
            (1.959_963_984_540_054, 0.025),
            (3.0, 0.001_349_898_031_630_094_6),
            (-1.0, 0.841_344_746_068_542_9),
        ];
        for (x, want) in table {
            assert!((q_function(x) - want).abs() < 1e-12, "Q({x})");
        }
    }

    #[test]
    fn misalignment_cases() {
        assert!((misalignment_probability(1.0, 10.0, 1e-300) - 1.0).abs() < 1e-12);
        assert_eq!(misalignment_probability(0.0, 10.0, 0.1), 0.0);
        assert!(misalignment_probability(1e-9, 10.0, 0.1) < 1e-300);
        // theta_bw * d / (2 sigma) = 1.959964
        let p = misalignment_probability(1.0, 1.959_964 * 2.0, 1.0);
        assert!((p - 0.05).abs() < 1e-4);
    }

    #[test]
    fn misalignment_monotone() {
        let mut last = 1.1;
        for i in 1..40 {
            let p = misalignment_probability(0.5, i as f64, 0.03);
            assert!(p < last || p == 0.0);
            assert!((0.0..=1.0).contains(&p));
            last = p;
        }
    }

    fn conjugate(theta: f64, m: usize) -> Vec<Complex64> {
        let scale = 1.0 / (m as f64).sqrt();
        steering(theta, m).0.into_iter().map(|a| a * scale).collect()
    }

    #[test]
    fn data_fim_cases() {
        let cfg = default_config();
        let v = conjugate(0.4, cfg.antennas);
        let fim = data_fim(&v, 0.4, &cfg);
        assert!((fim.j22 / (cfg.snr_linear * cfg.beta_d * 64.0) - 1.0).abs() < 1e-12);
        let silent = data_fim(&v, 0.4, &SimConfig { snr_linear: 0.0, ..cfg.clone() });
        assert_eq!(silent, Fim2x2::default());
        // Two-element array: [1, 1]/sqrt2 is orthogonal to a(pi/2) = [1, -1].
        let v = vec![Complex64::new(0.5f64.sqrt(), 0.0); 2];
        let fim = data_fim(&v, std::f64::consts::FRAC_PI_2, &SimConfig { antennas: 2, ..cfg });
        assert!(fim.j22 < 1e-28);
    }

    #[test]
    fn prior_fim_cases() {
        let unc = UncertaintyPair { sigma_rad: 1.0, sigma_tan: 3.0 };
        let fim = prior_fim(&unc, 30.0);
        assert!((fim.j11 - 100.0).abs() < 1e-12);
        assert_eq!(fim.j22, 1.0);
        let far = prior_fim(&unc, 30.0 * 2f64.sqrt());
        assert!((far.j11 / fim.j11 - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pcrb_cases() {
        let zero = Fim2x2::default();
        let p = pcrb_theta(&zero, &Fim2x2 { j11: 100.0, j22: 0.0 }, 1e2);
        assert!((p.value - 0.01).abs() < 1e-15 && !p.saturated);
        let p = pcrb_theta(&Fim2x2 { j11: 100.0, j22: 0.0 }, &Fim2x2 { j11: 900.0, j22: 0.0 }, 1e2);
        assert!((p.value - 1e-3).abs() < 1e-15);
        let p = pcrb_theta(&zero, &zero, 1e2);
        assert_eq!(p, Pcrb { value: 1e2, saturated: true });
        let r = pcrb_range(&Fim2x2 { j11: 0.0, j22: 3.0 }, &Fim2x2 { j11: 0.0, j22: 1.0 }, 1e2);
        assert!((r.value - 0.25).abs() < 1e-15);
    }

    #[test]
    fn pcrb_grid_monotone_in_snr_and_age() {
        let base = default_config();
        let d = 25.0;
        let theta = 0.3;
        let v = conjugate(theta + 0.01, base.antennas);
        let snrs = [0.0, 1.0, 3.0, 10.0, 100.0];
        let ages = [1, 5, 20, 80, 300];
        for &age in &ages {
            let mut last = f64::INFINITY;
            for &snr in &snrs {
                let cfg = SimConfig { snr_linear: snr, ..base.clone() };
                let unc = uncertainty(&AoIVector { a_rad: 1, a_tan: age }, 1.0, 15.0, &cfg);
                let p = pcrb_theta(&data_fim(&v, theta, &cfg), &prior_fim(&unc, d), cfg.pcrb_cap).value;
                assert!(p <= last);
                last = p;
            }
        }
        for &snr in &snrs {
            let cfg = SimConfig { snr_linear: snr, ..base.clone() };
            let mut last = 0.0;
            for &age in &ages {
                let unc = uncertainty(&AoIVector { a_rad: 1, a_tan: age }, 1.0, 15.0, &cfg);
                let p = pcrb_theta(&data_fim(&v, theta, &cfg), &prior_fim(&unc, d), cfg.pcrb_cap).value;
                assert!(p >= last);
                last = p;
            }
        }
    }
}
