//! Scenario assembly: one config describing the source, transport,
//! detection, and timing electronics of a distribution link, plus the
//! analytic rate budget derived from it.
//!
//! A scenario is the unit the simulator and the CLI consume. The spectral
//! side of the comb is modeled as a Gaussian of FWHM equal to the comb
//! span; a pair shares one frequency offset delta_nu drawn from it
//! (signal at +delta_nu, idler at -delta_nu by energy conservation), which
//! is what turns fiber dispersion into anti-correlated timing shifts and
//! the converter passband into a correlation filter acting on both photons
//! of a pair at once.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::channel::{self, ChannelError, ConverterSpec, FiberSpec, MemorySpec};
use crate::qstate::{PureState, StateError};
use crate::source::{CombModelParams, CombSpec, SourceError};
use crate::C_LIGHT_M_PER_S;

/// Config format version accepted by this build.
pub const SCHEMA_VERSION: u32 = 1;

/// sqrt(8 ln 2), the FWHM of a unit-sigma Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Gaussian time-bandwidth product (FWHM x FWHM), 2 ln 2 / pi.
const TIME_BANDWIDTH_GAUSS: f64 = 0.441_271_200_305_303_1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("unsupported schema_version {found}, this build reads {SCHEMA_VERSION}")]
    UnsupportedSchema { found: u32 },
    #[error("field {name} out of range: {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error(
        "tcspc window {window_ns} ns does not hold a whole number of {bin_ps} ps bins per side"
    )]
    RaggedBins { window_ns: f64, bin_ps: f64 },
    #[error("|alpha|^2 + |beta|^2 = {norm:.9}, must be 1 within 1e-6")]
    UnnormalizedState { norm: f64 },
    #[error("comb: {0}")]
    Source(#[from] SourceError),
    #[error("channel: {0}")]
    Channel(#[from] ChannelError),
    #[error("state: {0}")]
    State(#[from] StateError),
}

/// Single-photon detector plus the counting channel behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub efficiency: f64,
    pub jitter_fwhm_ps: f64,
    pub dead_time_ns: f64,
    pub dark_cps: f64,
    /// Saturation limit of the channel; scenarios whose expected singles
    /// rate exceeds it are rejected before generation.
    pub max_rate_cps: f64,
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v, lo, hi) in [
            ("efficiency", self.efficiency, 0.0, 1.0),
            ("jitter_fwhm_ps", self.jitter_fwhm_ps, 0.0, f64::INFINITY),
            ("dead_time_ns", self.dead_time_ns, 0.0, f64::INFINITY),
            ("dark_cps", self.dark_cps, 0.0, f64::INFINITY),
            ("max_rate_cps", self.max_rate_cps, f64::MIN_POSITIVE, f64::INFINITY),
        ] {
            if !v.is_finite() || v < lo || v > hi {
                return Err(ScenarioError::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }

    pub fn jitter_sigma_ps(&self) -> f64 {
        self.jitter_fwhm_ps / FWHM_PER_SIGMA
    }
}

/// TCSPC delay axis: `bin_ps` resolution over delays in [-window, +window].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TcspcSpec {
    pub bin_ps: f64,
    /// Half width of the delay axis in ns.
    pub window_ns: f64,
}

impl TcspcSpec {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v) in [("bin_ps", self.bin_ps), ("window_ns", self.window_ns)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ScenarioError::OutOfRange { name, value: v });
            }
        }
        let per_side = self.window_ns * 1e3 / self.bin_ps;
        if (per_side - per_side.round()).abs() > 1e-6 * per_side.max(1.0) || per_side < 0.5 {
            return Err(ScenarioError::RaggedBins {
                window_ns: self.window_ns,
                bin_ps: self.bin_ps,
            });
        }
        Ok(())
    }

    pub fn bins_per_side(&self) -> usize {
        (self.window_ns * 1e3 / self.bin_ps).round() as usize
    }

    pub fn n_bins(&self) -> usize {
        2 * self.bins_per_side()
    }

    /// Centers of all bins in ps, strictly increasing, uniformly spaced.
    pub fn bin_centers_ps(&self) -> Vec<f64> {
        let w = self.window_ns * 1e3;
        (0..self.n_bins())
            .map(|i| (i as f64 + 0.5) * self.bin_ps - w)
            .collect()
    }
}

/// Pair-generation rate law: pairs/s scale linearly with SPDC pump, and the
/// crystal adds `intracavity_noise_coeff` uncorrelated comb-spectrum singles
/// per generated pair on each channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceRateModel {
    pub pair_rate_per_mw: f64,
    pub pump_mw: f64,
    pub intracavity_noise_coeff: f64,
}

impl SourceRateModel {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        for (name, v, lo) in [
            ("pair_rate_per_mw", self.pair_rate_per_mw, f64::MIN_POSITIVE),
            ("pump_mw", self.pump_mw, f64::MIN_POSITIVE),
            ("intracavity_noise_coeff", self.intracavity_noise_coeff, 0.0),
        ] {
            if !v.is_finite() || v < lo {
                return Err(ScenarioError::OutOfRange { name, value: v });
            }
        }
        Ok(())
    }

    pub fn pair_rate_cps(&self) -> f64 {
        self.pair_rate_per_mw * self.pump_mw
    }
}

/// Polarization state of the emitted pair, alpha|HH> + beta|VV>,
/// each amplitude as [re, im].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairStateConfig {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
}

impl PairStateConfig {
    /// Builds the two-qubit state; amplitudes off by at most 1e-6 in norm
    /// are renormalized (config files carry finite-precision decimals).
    pub fn pure_state(&self) -> Result<PureState, ScenarioError> {
        let a = num_complex::Complex64::new(self.alpha[0], self.alpha[1]);
        let b = num_complex::Complex64::new(self.beta[0], self.beta[1]);
        let norm2 = a.norm_sqr() + b.norm_sqr();
        if !norm2.is_finite() || (norm2 - 1.0).abs() > 1e-6 {
            return Err(ScenarioError::UnnormalizedState { norm: norm2 });
        }
        let s = norm2.sqrt();
        Ok(PureState::from_alpha_beta(a / s, b / s)?)
    }
}

/// Converter block of a scenario. `enabled` gates whether the photons are
/// actually routed through the waveguide; the calibration constants are
/// kept either way so the sweep and budget commands can read them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConverter {
    pub enabled: bool,
    pub spec: ConverterSpec,
}

/// Full link description. When the converter is enabled it acts on both
/// photons of a pair (they enter the same waveguide), so its passband gates
/// the shared spectral offset and its external efficiency multiplies both
/// arm survivals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub comb: CombSpec,
    pub rate: SourceRateModel,
    pub state: PairStateConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub signal_fiber: Option<FiberSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub idler_fiber: Option<FiberSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub converter: Option<ScenarioConverter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemorySpec>,
    pub signal_detector: DetectorSpec,
    pub idler_detector: DetectorSpec,
    pub tcspc: TcspcSpec,
    pub seed: u64,
    pub duration_s: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ScenarioError::UnsupportedSchema {
                found: self.schema_version,
            });
        }
        self.comb.validate()?;
        self.rate.validate()?;
        self.state.pure_state()?;
        if let Some(f) = &self.signal_fiber {
            f.validate()?;
        }
        if let Some(f) = &self.idler_fiber {
            f.validate()?;
        }
        if let Some(c) = &self.converter {
            c.spec.validate()?;
        }
        if let Some(m) = &self.memory {
            m.validate()?;
        }
        self.signal_detector.validate()?;
        self.idler_detector.validate()?;
        self.tcspc.validate()?;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(ScenarioError::OutOfRange {
                name: "duration_s",
                value: self.duration_s,
            });
        }
        Ok(())
    }

    /// Converter calibration, present or not, regardless of `enabled`.
    pub fn converter_spec(&self) -> Option<&ConverterSpec> {
        self.converter.as_ref().map(|c| &c.spec)
    }

    /// Converter only when it sits in the photon path.
    pub fn enabled_converter(&self) -> Option<&ConverterSpec> {
        self.converter.as_ref().filter(|c| c.enabled).map(|c| &c.spec)
    }

    /// Correlation-shape parameters of the source comb: unit peak scale,
    /// zero floor, intrinsic (Fourier-limited) tooth width.
    pub fn comb_params(&self) -> CombModelParams {
        let t_fsr_ns = 1e3 / self.comb.fsr_mhz;
        let f = self.comb.cavity_linewidth_mhz;
        CombModelParams {
            c: 1.0,
            f_fwhm_mhz: f,
            t_fsr_ns,
            tooth_fwhm_ns: TIME_BANDWIDTH_GAUSS / (self.comb.span_thz * 1e3),
            n_teeth: CombModelParams::default_n_teeth(f, t_fsr_ns),
            noise_floor: 0.0,
        }
    }

    /// Analytic rate budget; meaningful for configs that pass `validate`.
    pub fn rates(&self) -> ScenarioRates {
        let pair_rate_cps = self.rate.pair_rate_cps();
        let conv = self.enabled_converter();
        let wc_ext = conv.map_or(1.0, |c| channel::wc_efficiency(c.sfg_pump_mw, c, true));
        let t_sig = self.signal_fiber.as_ref().map_or(1.0, channel::fiber_transmittance);
        let t_idl = self.idler_fiber.as_ref().map_or(1.0, channel::fiber_transmittance);
        let signal_survival = t_sig * wc_ext * self.signal_detector.efficiency;
        let idler_survival = t_idl * wc_ext * self.idler_detector.efficiency;

        let sigma_nu_ghz = self.comb.span_thz * 1e3 / FWHM_PER_SIGMA;
        let band_halfwidth_ghz = conv.map(|c| c.bandwidth_ghz / 2.0);
        let p_band = band_halfwidth_ghz
            .map_or(1.0, |h| erf(h / (sigma_nu_ghz * std::f64::consts::SQRT_2)));

        let dlam_nm_per_ghz = self.comb.center_wavelength_nm.powi(2) / C_LIGHT_M_PER_S;
        let k_of = |f: Option<&FiberSpec>| {
            f.map_or(0.0, |f| f.dispersion_ps_nm_km.abs() * f.length_km * dlam_nm_per_ghz)
        };

        let coincidence_cps = pair_rate_cps * p_band * signal_survival * idler_survival;
        let wc_noise_cps = conv.map_or(0.0, |c| channel::wc_noise_kcps(c.sfg_pump_mw, c) * 1e3);
        let comb_factor = pair_rate_cps * (1.0 + self.rate.intracavity_noise_coeff) * p_band;
        let signal_singles_cps =
            comb_factor * signal_survival + wc_noise_cps + self.signal_detector.dark_cps;
        let idler_singles_cps =
            comb_factor * idler_survival + wc_noise_cps + self.idler_detector.dark_cps;

        ScenarioRates {
            pair_rate_cps,
            signal_survival,
            idler_survival,
            p_band,
            sigma_nu_ghz,
            band_halfwidth_ghz,
            k_signal_ps_per_ghz: k_of(self.signal_fiber.as_ref()),
            k_idler_ps_per_ghz: k_of(self.idler_fiber.as_ref()),
            coincidence_cps,
            signal_singles_cps,
            idler_singles_cps,
            signal_pairless_cps: signal_singles_cps - coincidence_cps,
            idler_pairless_cps: idler_singles_cps - coincidence_cps,
            signal_jitter_sigma_ps: self.signal_detector.jitter_sigma_ps(),
            idler_jitter_sigma_ps: self.idler_detector.jitter_sigma_ps(),
            intrinsic_tooth_sigma_ps: self.comb_params().tooth_fwhm_ns * 1e3 / FWHM_PER_SIGMA,
        }
    }
}

/// Detected-rate budget of a scenario. All rates are post-survival,
/// pre-dead-time. `coincidence_cps` counts pairs with both photons
/// detected (and inside the converter band when one is enabled);
/// `*_pairless_cps` is everything else on a channel, which carries no
/// timing structure and is generated uniform.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioRates {
    pub pair_rate_cps: f64,
    pub signal_survival: f64,
    pub idler_survival: f64,
    pub p_band: f64,
    pub sigma_nu_ghz: f64,
    pub band_halfwidth_ghz: Option<f64>,
    pub k_signal_ps_per_ghz: f64,
    pub k_idler_ps_per_ghz: f64,
    pub coincidence_cps: f64,
    pub signal_singles_cps: f64,
    pub idler_singles_cps: f64,
    pub signal_pairless_cps: f64,
    pub idler_pairless_cps: f64,
    pub signal_jitter_sigma_ps: f64,
    pub idler_jitter_sigma_ps: f64,
    pub intrinsic_tooth_sigma_ps: f64,
}

impl ScenarioRates {
    /// Accidental coincidences per histogram bin per second of acquisition,
    /// valid while channel occupancy over the window stays small.
    pub fn accidental_floor_cps_per_bin(&self, bin_ps: f64) -> f64 {
        self.signal_singles_cps * self.idler_singles_cps * bin_ps * 1e-12
    }
}
