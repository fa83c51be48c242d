//! Analytic model of the two-photon comb: spectral geometry and the
//! normalized time-correlation shape
//!
//!   G2(tau) = c * exp(-2 pi f_fwhm |tau|) * Comb(tau) + noise_floor
//!   Comb(tau) = sum_{n=-(N-1)}^{N-1} exp(-4 ln2 ((tau - n t_fsr)/T_fwhm)^2)
//!
//! with Gaussian teeth spaced by the cavity round-trip time under a
//! single-sided exponential envelope.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::C_LIGHT_M_PER_S;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("field {name} must be positive and finite, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("comb span {span_thz} THz holds less than one mode at FSR {fsr_mhz} MHz")]
    EmptyComb { span_thz: f64, fsr_mhz: f64 },
    #[error("tooth FWHM {tooth_fwhm_ns} ns must be below the tooth spacing {t_fsr_ns} ns")]
    UnresolvableComb { tooth_fwhm_ns: f64, t_fsr_ns: f64 },
}

fn require_positive(name: &'static str, value: f64) -> Result<(), SourceError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(SourceError::NonPositive { name, value })
    }
}

/// Cavity-side description of the comb spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombSpec {
    pub fsr_mhz: f64,
    pub cavity_linewidth_mhz: f64,
    pub span_thz: f64,
    pub center_wavelength_nm: f64,
}

impl CombSpec {
    pub fn validate(&self) -> Result<(), SourceError> {
        require_positive("fsr_mhz", self.fsr_mhz)?;
        require_positive("cavity_linewidth_mhz", self.cavity_linewidth_mhz)?;
        require_positive("span_thz", self.span_thz)?;
        require_positive("center_wavelength_nm", self.center_wavelength_nm)?;
        if self.span_thz * 1e6 / self.fsr_mhz < 1.0 {
            return Err(SourceError::EmptyComb {
                span_thz: self.span_thz,
                fsr_mhz: self.fsr_mhz,
            });
        }
        Ok(())
    }
}

/// Parameters of the fitted/generated correlation shape. Counts units for
/// `c` and `noise_floor`, ns for times, MHz for the envelope linewidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombModelParams {
    pub c: f64,
    pub f_fwhm_mhz: f64,
    pub t_fsr_ns: f64,
    pub tooth_fwhm_ns: f64,
    pub n_teeth: usize,
    pub noise_floor: f64,
}

impl CombModelParams {
    pub fn validate(&self) -> Result<(), SourceError> {
        if !(self.c >= 0.0 && self.c.is_finite()) {
            return Err(SourceError::NonPositive { name: "c", value: self.c });
        }
        require_positive("f_fwhm_mhz", self.f_fwhm_mhz)?;
        require_positive("t_fsr_ns", self.t_fsr_ns)?;
        require_positive("tooth_fwhm_ns", self.tooth_fwhm_ns)?;
        require_positive("n_teeth", self.n_teeth as f64)?;
        if !(self.noise_floor >= 0.0 && self.noise_floor.is_finite()) {
            return Err(SourceError::NonPositive {
                name: "noise_floor",
                value: self.noise_floor,
            });
        }
        if self.tooth_fwhm_ns >= self.t_fsr_ns {
            return Err(SourceError::UnresolvableComb {
                tooth_fwhm_ns: self.tooth_fwhm_ns,
                t_fsr_ns: self.t_fsr_ns,
            });
        }
        Ok(())
    }

    /// Envelope decay rate 2 pi f_fwhm in 1/ns.
    pub fn envelope_rate_per_ns(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.f_fwhm_mhz * 1e-3
    }

    /// Default tooth count: enough teeth that the envelope has decayed to
    /// exp(-5) at the edge of the modeled train.
    pub fn default_n_teeth(f_fwhm_mhz: f64, t_fsr_ns: f64) -> usize {
        let a = 2.0 * std::f64::consts::PI * f_fwhm_mhz * 1e-3 * t_fsr_ns;
        (5.0 / a).ceil().max(1.0) as usize
    }
}

const FOUR_LN2: f64 = 4.0 * std::f64::consts::LN_2;

/// Evaluates the comb correlation model at a delay in ns.
///
/// The tooth sum is truncated to the teeth whose centers lie within
/// 7 sigma of tau; everything farther contributes below 1e-21 of a tooth
/// height, far under both fit tolerances and f64 noise on realistic counts.
pub fn g2_analytic(tau_ns: f64, p: &CombModelParams) -> f64 {
    let envelope = (-p.envelope_rate_per_ns() * tau_ns.abs()).exp();
    p.c * envelope * comb_factor(tau_ns, p) + p.noise_floor
}

/// The bare comb sum at a delay, without envelope or floor.
pub(crate) fn comb_factor(tau_ns: f64, p: &CombModelParams) -> f64 {
    let sigma = p.tooth_fwhm_ns / (8.0 * std::f64::consts::LN_2).sqrt();
    let reach = (7.0 * sigma / p.t_fsr_ns).ceil() as i64 + 1;
    let n_max = p.n_teeth as i64 - 1;
    let center = (tau_ns / p.t_fsr_ns).round() as i64;
    let lo = (center - reach).max(-n_max);
    let hi = (center + reach).min(n_max);
    let mut sum = 0.0;
    let mut n = lo;
    while n <= hi {
        let u = (tau_ns - n as f64 * p.t_fsr_ns) / p.tooth_fwhm_ns;
        sum += (-FOUR_LN2 * u * u).exp();
        n += 1;
    }
    sum
}

/// Cavity round-trip time in ns, 1000 / FSR[MHz].
pub fn round_trip_time(fsr_mhz: f64) -> Result<f64, SourceError> {
    require_positive("fsr_mhz", fsr_mhz)?;
    Ok(1e3 / fsr_mhz)
}

/// Linewidth of the frequency-degenerate comb mode, 0.64x the bare cavity
/// linewidth (two-photon interference narrows the degenerate mode).
pub fn degenerate_linewidth(cavity_linewidth_mhz: f64) -> Result<f64, SourceError> {
    require_positive("cavity_linewidth_mhz", cavity_linewidth_mhz)?;
    Ok(0.64 * cavity_linewidth_mhz)
}

/// Converts a wavelength span at a center wavelength to THz.
pub fn span_from_wavelength(delta_lambda_nm: f64, center_nm: f64) -> Result<f64, SourceError> {
    if delta_lambda_nm < 0.0 || !delta_lambda_nm.is_finite() {
        return Err(SourceError::NonPositive {
            name: "delta_lambda_nm",
            value: delta_lambda_nm,
        });
    }
    require_positive("center_nm", center_nm)?;
    let lambda_m = center_nm * 1e-9;
    Ok(C_LIGHT_M_PER_S * delta_lambda_nm * 1e-9 / (lambda_m * lambda_m) / 1e12)
}

/// Number of comb modes inside the span.
pub fn mode_count(spec: &CombSpec) -> Result<u64, SourceError> {
    spec.validate()?;
    Ok((spec.span_thz * 1e6 / spec.fsr_mhz).round() as u64)
}
