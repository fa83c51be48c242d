//! Histogram-level extraction of the headline quantities: g2(0), comb
//! model fits, envelope linewidth, dispersion-broadening bandwidth, and
//! pump-power scaling of the correlation contrast.

use nalgebra::{SMatrix, SVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::channel::FiberSpec;
use crate::sim::CoincidenceHistogram;
use crate::source::{self, CombModelParams, SourceError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("interval [{lo}, {hi}] is empty or reversed")]
    BadInterval { lo: f64, hi: f64 },
    #[error("noise region [{lo_ns}, {hi_ns}] ns contains no histogram bins")]
    EmptyNoiseRegion { lo_ns: f64, hi_ns: f64 },
    #[error("noise region mean is zero, the count ratio is undefined")]
    ZeroNoiseMean,
    #[error(
        "noise region intrudes into the +/-{halfwidth_ps} ps exclusion zone \
         around the peak at {peak_ps} ps"
    )]
    NoiseOverlapsPeak { peak_ps: f64, halfwidth_ps: f64 },
    #[error("found {found} comb teeth, need at least {need}")]
    TooFewTeeth { found: usize, need: usize },
    #[error("histogram shows no comb structure above the noise floor")]
    NoCombStructure,
    #[error(
        "tooth width {tooth_fwhm_ns} ns is narrower than the intrinsic \
         width {intrinsic_fwhm_ns} ns; nothing to deconvolve"
    )]
    NegativeQuadrature { tooth_fwhm_ns: f64, intrinsic_fwhm_ns: f64 },
    #[error("fiber dispersion is zero, bandwidth is undefined")]
    ZeroDispersion,
    #[error("{name} must be positive and finite, got {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("pump sweep needs at least 3 usable points, {usable} remain after exclusions")]
    TooFewSweepPoints { usable: usize },
    #[error("source: {0}")]
    Source(#[from] SourceError),
}

/// Peak-to-floor contrast of a coincidence histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct G2Result {
    pub g2_zero: f64,
    /// 1 sigma from Poisson propagation of peak and floor.
    pub g2_std: f64,
    pub peak_counts: f64,
    pub peak_delay_ps: f64,
    pub noise_mean: f64,
    pub noise_std: f64,
    pub noise_bins: usize,
    pub warning: Option<String>,
}

/// Ratio of the highest histogram count to the average count inside the
/// noise region, with 1 sigma Poisson propagation. Ties for the highest
/// count resolve toward the delay closest to zero.
pub fn g2_zero(
    h: &CoincidenceHistogram,
    peak_halfwidth_ps: f64,
    noise_region_ns: (f64, f64),
) -> Result<G2Result, AnalysisError> {
    if !(peak_halfwidth_ps >= 0.0 && peak_halfwidth_ps.is_finite()) {
        return Err(AnalysisError::OutOfRange {
            name: "peak_halfwidth_ps",
            value: peak_halfwidth_ps,
        });
    }
    let (lo_ns, hi_ns) = noise_region_ns;
    if !(lo_ns < hi_ns) || !lo_ns.is_finite() || !hi_ns.is_finite() {
        return Err(AnalysisError::BadInterval { lo: lo_ns, hi: hi_ns });
    }

    let mut peak_idx = 0usize;
    for (i, &c) in h.counts.iter().enumerate() {
        let better = c > h.counts[peak_idx]
            || (c == h.counts[peak_idx]
                && h.bin_centers_ps[i].abs() < h.bin_centers_ps[peak_idx].abs());
        if better {
            peak_idx = i;
        }
    }
    let peak_counts = h.counts[peak_idx] as f64;
    let peak_delay_ps = h.bin_centers_ps[peak_idx];

    let (lo_ps, hi_ps) = (lo_ns * 1e3, hi_ns * 1e3);
    if lo_ps <= peak_delay_ps + peak_halfwidth_ps && hi_ps >= peak_delay_ps - peak_halfwidth_ps {
        return Err(AnalysisError::NoiseOverlapsPeak {
            peak_ps: peak_delay_ps,
            halfwidth_ps: peak_halfwidth_ps,
        });
    }

    let noise: Vec<f64> = h
        .bin_centers_ps
        .iter()
        .zip(&h.counts)
        .filter(|(&c, _)| c >= lo_ps && c <= hi_ps)
        .map(|(_, &n)| n as f64)
        .collect();
    if noise.is_empty() {
        return Err(AnalysisError::EmptyNoiseRegion { lo_ns, hi_ns });
    }
    let k = noise.len() as f64;
    let noise_mean = noise.iter().sum::<f64>() / k;
    if noise_mean <= 0.0 {
        return Err(AnalysisError::ZeroNoiseMean);
    }
    let noise_std =
        (noise.iter().map(|n| (n - noise_mean).powi(2)).sum::<f64>() / k.max(2.0)).sqrt();

    let g2 = peak_counts / noise_mean;
    // var(peak) = peak; var(noise_mean) = noise_mean / K for Poisson bins.
    let g2_std = (peak_counts + peak_counts.powi(2) / (k * noise_mean)).sqrt() / noise_mean;

    let warning = (lo_ns < 0.0).then(|| {
        "noise region extends to negative delays, where detector dead time \
         suppresses and flattens the accidental floor"
            .to_string()
    });

    Ok(G2Result {
        g2_zero: g2,
        g2_std,
        peak_counts,
        peak_delay_ps,
        noise_mean,
        noise_std,
        noise_bins: noise.len(),
        warning,
    })
}

/// Default g2 noise interval: the tooth-free gap between the third and
/// fourth positive-delay teeth, clear of both the peak and the dead-time
/// flattened negative side.
pub fn default_noise_region_ns(t_fsr_ns: f64) -> (f64, f64) {
    (3.25 * t_fsr_ns, 3.75 * t_fsr_ns)
}

/// Comb-model least-squares fit.
#[derive(Debug, Clone, PartialEq)]
pub struct CombFitResult {
    pub params: CombModelParams,
    pub sigma_c: f64,
    pub sigma_f_fwhm_mhz: f64,
    pub sigma_t_fsr_ns: f64,
    pub sigma_tooth_fwhm_ns: f64,
    pub sigma_noise_floor: f64,
    pub residual_rms: f64,
    pub chi2: f64,
    pub iterations: usize,
    pub converged: bool,
}

const FOUR_LN2: f64 = 4.0 * std::f64::consts::LN_2;

/// Model count and its gradient in [c, f_fwhm_mhz, t_fsr_ns,
/// tooth_fwhm_ns, noise_floor] at one delay.
fn comb_model_grad(tau_ns: f64, x: &[f64; 5], n_cap: i64) -> (f64, [f64; 5]) {
    let [c, f, t, tw, noise] = *x;
    let rate = 2.0 * std::f64::consts::PI * f * 1e-3;
    let envelope = (-rate * tau_ns.abs()).exp();
    let sigma = tw / (8.0 * std::f64::consts::LN_2).sqrt();
    let reach = (7.0 * sigma / t).ceil() as i64 + 1;
    let center = (tau_ns / t).round() as i64;
    let lo = (center - reach).max(-n_cap);
    let hi = (center + reach).min(n_cap);
    let mut s = 0.0;
    let mut ds_dt = 0.0;
    let mut ds_dtw = 0.0;
    let mut n = lo;
    while n <= hi {
        let d = tau_ns - n as f64 * t;
        let u = d / tw;
        let g = (-FOUR_LN2 * u * u).exp();
        s += g;
        ds_dt += g * 2.0 * FOUR_LN2 * d * n as f64 / (tw * tw);
        ds_dtw += g * 2.0 * FOUR_LN2 * d * d / (tw * tw * tw);
        n += 1;
    }
    let es = envelope * s;
    let m = c * es + noise;
    let grad = [
        es,
        c * es * (-2.0 * std::f64::consts::PI * 1e-3 * tau_ns.abs()),
        c * envelope * ds_dt,
        c * envelope * ds_dtw,
        1.0,
    ];
    (m, grad)
}

/// Levenberg-Marquardt fit of the comb correlation model to a histogram
/// with Pearson weights 1/max(model, 1), reweighted as the fit moves.
/// Count-based weights would bias every Poisson level low by about one
/// count per bin; model-based weights have no such first-order bias.
/// Non-convergence inside the iteration budget is reported through
/// `converged`, not as an error.
pub fn fit_comb(
    h: &CoincidenceHistogram,
    init: &CombModelParams,
) -> Result<CombFitResult, AnalysisError> {
    init.validate()?;
    let span_ns = (h.bin_centers_ps[h.bin_centers_ps.len() - 1] - h.bin_centers_ps[0]) * 1e-3;
    let teeth_spanned = (span_ns / init.t_fsr_ns).floor() as usize;
    if teeth_spanned < 5 {
        return Err(AnalysisError::TooFewTeeth { found: teeth_spanned, need: 5 });
    }

    let tau_ns: Vec<f64> = h.bin_centers_ps.iter().map(|c| c * 1e-3).collect();
    let y: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    let n_cap = init.n_teeth as i64 - 1;
    let n_pts = y.len();

    let chi2_of = |x: &[f64; 5]| -> f64 {
        tau_ns
            .iter()
            .zip(&y)
            .map(|(&tau, &yi)| {
                let (m, _) = comb_model_grad(tau, x, n_cap);
                (yi - m) * (yi - m) / m.max(1.0)
            })
            .sum()
    };
    let normal_eqs = |x: &[f64; 5]| -> (SMatrix<f64, 5, 5>, SVector<f64, 5>, f64) {
        let mut a = SMatrix::<f64, 5, 5>::zeros();
        let mut g = SVector::<f64, 5>::zeros();
        let mut chi2 = 0.0;
        for (&tau, &yi) in tau_ns.iter().zip(&y) {
            let (m, j) = comb_model_grad(tau, x, n_cap);
            let wi = 1.0 / m.max(1.0);
            let r = yi - m;
            chi2 += wi * r * r;
            for p in 0..5 {
                g[p] += wi * j[p] * r;
                for q in p..5 {
                    a[(p, q)] += wi * j[p] * j[q];
                }
            }
        }
        for p in 0..5 {
            for q in 0..p {
                a[(p, q)] = a[(q, p)];
            }
        }
        (a, g, chi2)
    };
    let valid = |x: &[f64; 5]| x[0] > 0.0 && x[2] > 0.0 && x[3] > 0.0 && x[3] < x[2];

    let mut x = [init.c, init.f_fwhm_mhz, init.t_fsr_ns, init.tooth_fwhm_ns, init.noise_floor];
    let (mut a, mut g, mut chi2) = normal_eqs(&x);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    'outer: for _ in 0..200 {
        iterations += 1;
        let mut accepted = false;
        for _ in 0..40 {
            let mut damped = a;
            for p in 0..5 {
                damped[(p, p)] = a[(p, p)] * (1.0 + lambda) + 1e-30;
            }
            let Some(step) = damped.lu().solve(&g) else {
                lambda *= 10.0;
                continue;
            };
            let mut xn = x;
            for p in 0..5 {
                xn[p] += step[p];
            }
            // Rates and the floor saturate at zero instead of going
            // unphysical; scale parameters must stay positive.
            xn[1] = xn[1].max(0.0);
            xn[4] = xn[4].max(0.0);
            if !valid(&xn) {
                lambda *= 10.0;
                continue;
            }
            let chi2_new = chi2_of(&xn);
            if chi2_new.is_finite() && chi2_new <= chi2 {
                let d_chi2 = chi2 - chi2_new;
                let max_rel_step = (0..5)
                    .map(|p| (xn[p] - x[p]).abs() / x[p].abs().max(1e-12))
                    .fold(0.0f64, f64::max);
                x = xn;
                let refreshed = normal_eqs(&x);
                a = refreshed.0;
                g = refreshed.1;
                chi2 = refreshed.2;
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if d_chi2 <= 1e-10 * chi2.max(1e-30) || max_rel_step < 1e-9 {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e14 {
                break 'outer;
            }
        }
        if !accepted {
            break;
        }
    }

    // Covariance from the undamped normal equations at the solution,
    // inflated by the reduced chi-square when the fit is poor.
    let (a_fin, _, chi2_fin) = normal_eqs(&x);
    let dof = (n_pts.saturating_sub(5)).max(1) as f64;
    let inflate = (chi2_fin / dof).max(1.0);
    let sigmas: [f64; 5] = match a_fin.lu().try_inverse() {
        Some(cov) => std::array::from_fn(|p| (cov[(p, p)] * inflate).max(0.0).sqrt()),
        None => [f64::NAN; 5],
    };
    let residual_rms = (tau_ns
        .iter()
        .zip(&y)
        .map(|(&tau, &yi)| {
            let (m, _) = comb_model_grad(tau, &x, n_cap);
            (yi - m) * (yi - m)
        })
        .sum::<f64>()
        / n_pts as f64)
        .sqrt();

    Ok(CombFitResult {
        params: CombModelParams {
            c: x[0],
            f_fwhm_mhz: x[1],
            t_fsr_ns: x[2],
            tooth_fwhm_ns: x[3],
            n_teeth: CombModelParams::default_n_teeth(x[1].max(1e-6), x[2]),
            noise_floor: x[4],
        },
        sigma_c: sigmas[0],
        sigma_f_fwhm_mhz: sigmas[1],
        sigma_t_fsr_ns: sigmas[2],
        sigma_tooth_fwhm_ns: sigmas[3],
        sigma_noise_floor: sigmas[4],
        residual_rms,
        chi2: chi2_fin,
        iterations,
        converged,
    })
}

/// Detected comb structure used to initialize fits and envelope estimates.
struct CombScan {
    noise: f64,
    /// Tooth positions (ps, from the max bin) with heights above noise.
    peaks: Vec<(f64, f64)>,
    t_fsr_ps: f64,
    central_fwhm_ps: f64,
    c_amp: f64,
}

fn scan_comb(h: &CoincidenceHistogram) -> Result<CombScan, AnalysisError> {
    let n = h.counts.len();
    let bin_ps = h.bin_width_ps();
    let mut sorted: Vec<u64> = h.counts.clone();
    sorted.sort_unstable();
    let quartile = &sorted[..(n / 4).max(1)];
    let noise = quartile.iter().sum::<u64>() as f64 / quartile.len() as f64;

    let mean = h.counts.iter().sum::<u64>() as f64 / n as f64;
    let dev: Vec<f64> = h.counts.iter().map(|&c| c as f64 - mean).collect();

    // Tooth period from the count autocorrelation. The global maximum can
    // land on a multiple of the period when the fundamental lag sits
    // between bins, so divisor lags with comparable correlation pull the
    // estimate back to the fundamental, and the farthest clean multiple
    // refines it to sub-bin accuracy.
    let max_lag = n / 3;
    let ac = |lag: usize| -> f64 { (0..n - lag).map(|i| dev[i] * dev[i + lag]).sum() };
    let mut zc = 1;
    while zc < max_lag && ac(zc) > 0.0 {
        zc += 1;
    }
    if zc >= max_lag {
        return Err(AnalysisError::NoCombStructure);
    }
    let argmax = |lo: usize, hi: usize| -> (usize, f64) {
        let mut best = (0usize, f64::NEG_INFINITY);
        for l in lo..hi.min(max_lag) {
            let v = ac(l);
            if v > best.1 {
                best = (l, v);
            }
        }
        best
    };
    let (best_lag, best_ac) = argmax(zc, max_lag);
    if best_lag == 0 || best_ac <= 0.0 {
        return Err(AnalysisError::NoCombStructure);
    }
    let mut fund = best_lag;
    for m in 2..=8usize {
        let cand = (best_lag as f64 / m as f64).round() as usize;
        if cand < zc.max(3) {
            continue;
        }
        let (arg, v) = argmax(cand - 2, cand + 3);
        if v >= 0.5 * best_ac && arg < fund {
            fund = arg;
        }
    }
    let k_max = ((max_lag - 2) / fund).max(1);
    let guard = (fund / 4).max(2);
    let (peak_lag, _) = argmax((k_max * fund).saturating_sub(guard).max(zc), k_max * fund + guard);
    let refined = if peak_lag >= 1 && peak_lag + 1 < max_lag {
        let (ym, y0, yp) = (ac(peak_lag - 1), ac(peak_lag), ac(peak_lag + 1));
        let denom = ym - 2.0 * y0 + yp;
        let frac = if denom.abs() > 0.0 { 0.5 * (ym - yp) / denom } else { 0.0 };
        peak_lag as f64 + frac.clamp(-0.5, 0.5)
    } else {
        peak_lag as f64
    };
    let t_fsr_ps = refined / ((refined / fund as f64).round().max(1.0)) * bin_ps;

    // Tooth heights: the maximum bin within a quarter period of each
    // nominal tooth center.
    let first = h.bin_centers_ps[0];
    let last = h.bin_centers_ps[n - 1];
    let n_lo = (first / t_fsr_ps).ceil() as i64;
    let n_hi = (last / t_fsr_ps).floor() as i64;
    let mut peaks = Vec::new();
    let floor_sigma = noise.max(1.0).sqrt();
    for tooth in n_lo..=n_hi {
        let center = tooth as f64 * t_fsr_ps;
        let lo_idx = (((center - 0.25 * t_fsr_ps) - first) / bin_ps).ceil().max(0.0) as usize;
        let hi_idx =
            ((((center + 0.25 * t_fsr_ps) - first) / bin_ps).floor() as usize).min(n - 1);
        if lo_idx > hi_idx {
            continue;
        }
        let (best_i, best_c) = (lo_idx..=hi_idx)
            .map(|i| (i, h.counts[i]))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        let height = best_c as f64 - noise;
        if height > 5.0 * floor_sigma {
            peaks.push((h.bin_centers_ps[best_i], height));
        }
    }
    if peaks.is_empty() {
        return Err(AnalysisError::NoCombStructure);
    }

    // FWHM of the tallest tooth by scanning to half height on both sides.
    let (&(tallest_ps, tallest_h), _) = peaks
        .iter()
        .map(|p| (p, p.1))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let tallest_idx = ((tallest_ps - first) / bin_ps).round() as usize;
    let half = noise + tallest_h / 2.0;
    let mut left = tallest_idx;
    while left > 0 && h.counts[left - 1] as f64 > half {
        left -= 1;
    }
    let mut right = tallest_idx;
    while right + 1 < n && h.counts[right + 1] as f64 > half {
        right += 1;
    }
    let central_fwhm_ps = ((right - left + 1) as f64) * bin_ps;

    Ok(CombScan { noise, peaks, t_fsr_ps, central_fwhm_ps, c_amp: tallest_h })
}

/// Data-driven starting point for `fit_comb`: floor from the lower count
/// quartile, period from the count autocorrelation, envelope rate from
/// log-linear tooth decay, tooth width from a half-height scan.
pub fn estimate_comb_init(h: &CoincidenceHistogram) -> Result<CombModelParams, AnalysisError> {
    let scan = scan_comb(h)?;
    let f_fwhm_mhz = envelope_rate_fit(&scan.peaks)?.max(0.01);
    let t_fsr_ns = scan.t_fsr_ps * 1e-3;
    // Half-height scans overestimate the width of a strongly envelope-
    // modulated or coarsely binned tooth; the fit tightens it.
    let tooth_fwhm_ns = (scan.central_fwhm_ps * 1e-3).min(0.45 * t_fsr_ns);
    CombModelParams {
        c: scan.c_amp,
        f_fwhm_mhz,
        t_fsr_ns,
        tooth_fwhm_ns,
        n_teeth: CombModelParams::default_n_teeth(f_fwhm_mhz, t_fsr_ns),
        noise_floor: scan.noise,
    }
    .validate()
    .map(|()| CombModelParams {
        c: scan.c_amp,
        f_fwhm_mhz,
        t_fsr_ns,
        tooth_fwhm_ns,
        n_teeth: CombModelParams::default_n_teeth(f_fwhm_mhz, t_fsr_ns),
        noise_floor: scan.noise,
    })
    .map_err(AnalysisError::from)
}

/// Weighted least squares of ln(height) against |tau|; returns the
/// equivalent Lorentzian FWHM in MHz.
fn envelope_rate_fit(peaks: &[(f64, f64)]) -> Result<f64, AnalysisError> {
    let pts: Vec<(f64, f64)> = peaks
        .iter()
        .filter(|(_, height)| *height > 0.0)
        .map(|&(tau_ps, height)| (tau_ps.abs() * 1e-3, height.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(AnalysisError::TooFewTeeth { found: pts.len(), need: 3 });
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(AnalysisError::TooFewTeeth { found: pts.len(), need: 3 });
    }
    // ln h = const - 2 pi f 1e-3 |tau_ns|.
    Ok(-sxy / sxx * 1e3 / (2.0 * std::f64::consts::PI))
}

/// Envelope linewidth from tooth-peak decay, in MHz.
pub fn linewidth_from_envelope(h: &CoincidenceHistogram) -> Result<f64, AnalysisError> {
    let scan = scan_comb(h)?;
    if scan.peaks.len() < 5 {
        return Err(AnalysisError::TooFewTeeth { found: scan.peaks.len(), need: 5 });
    }
    envelope_rate_fit(&scan.peaks)
}

/// Source bandwidth inferred from dispersion broadening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthEstimate {
    pub delta_lambda_nm: f64,
    pub span_thz: f64,
}

/// Deconvolves the intrinsic tooth width in quadrature and converts the
/// dispersion-broadened remainder into a wavelength span and bandwidth.
pub fn bandwidth_from_dispersion(
    tooth_fwhm_ns: f64,
    intrinsic_fwhm_ns: f64,
    fiber: &FiberSpec,
    center_nm: f64,
) -> Result<BandwidthEstimate, AnalysisError> {
    if !(tooth_fwhm_ns > 0.0 && tooth_fwhm_ns.is_finite()) {
        return Err(AnalysisError::OutOfRange { name: "tooth_fwhm_ns", value: tooth_fwhm_ns });
    }
    if !(intrinsic_fwhm_ns >= 0.0 && intrinsic_fwhm_ns.is_finite()) {
        return Err(AnalysisError::OutOfRange {
            name: "intrinsic_fwhm_ns",
            value: intrinsic_fwhm_ns,
        });
    }
    if tooth_fwhm_ns < intrinsic_fwhm_ns {
        return Err(AnalysisError::NegativeQuadrature { tooth_fwhm_ns, intrinsic_fwhm_ns });
    }
    let disp_ps_nm = fiber.dispersion_ps_nm_km.abs() * fiber.length_km;
    if disp_ps_nm == 0.0 {
        return Err(AnalysisError::ZeroDispersion);
    }
    let broadened_ps = (tooth_fwhm_ns.powi(2) - intrinsic_fwhm_ns.powi(2)).sqrt() * 1e3;
    let delta_lambda_nm = broadened_ps / disp_ps_nm;
    let span_thz = source::span_from_wavelength(delta_lambda_nm, center_nm)?;
    Ok(BandwidthEstimate { delta_lambda_nm, span_thz })
}

/// Log-log slope of the pump sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSlope {
    pub slope: f64,
    pub n_used: usize,
    pub warning: Option<String>,
}

/// Least-squares slope of ln(g2 - 1) against ln(pump power). Points with
/// g2 <= 1 carry no excess correlation and are excluded with a warning.
pub fn pump_sweep_slope(points: &[(f64, f64)]) -> Result<SweepSlope, AnalysisError> {
    for &(pump_mw, _) in points {
        if !(pump_mw > 0.0 && pump_mw.is_finite()) {
            return Err(AnalysisError::OutOfRange { name: "pump_mw", value: pump_mw });
        }
    }
    let usable: Vec<(f64, f64)> = points
        .iter()
        .filter(|(_, g2)| *g2 > 1.0)
        .map(|&(p, g2)| (p.ln(), (g2 - 1.0).ln()))
        .collect();
    if usable.len() < 3 {
        return Err(AnalysisError::TooFewSweepPoints { usable: usable.len() });
    }
    let excluded = points.len() - usable.len();
    let n = usable.len() as f64;
    let mx = usable.iter().map(|p| p.0).sum::<f64>() / n;
    let my = usable.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = usable.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = usable.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 0.0 {
        return Err(AnalysisError::TooFewSweepPoints { usable: 1 });
    }
    Ok(SweepSlope {
        slope: sxy / sxx,
        n_used: usable.len(),
        warning: (excluded > 0)
            .then(|| format!("excluded {excluded} point(s) with g2 <= 1 from the log-log fit")),
    })
}

/// Pearson chi-square flatness check of a histogram region.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatnessReport {
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub mean: f64,
    pub bins: usize,
}

/// Tests the bins inside [lo, hi] ns against a constant-rate hypothesis:
/// chi2 = sum (n_i - mean)^2 / mean with dof = bins - 1.
pub fn floor_flatness(
    h: &CoincidenceHistogram,
    region_ns: (f64, f64),
) -> Result<FlatnessReport, AnalysisError> {
    let (lo_ns, hi_ns) = region_ns;
    if !(lo_ns < hi_ns) || !lo_ns.is_finite() || !hi_ns.is_finite() {
        return Err(AnalysisError::BadInterval { lo: lo_ns, hi: hi_ns });
    }
    let counts: Vec<f64> = h
        .bin_centers_ps
        .iter()
        .zip(&h.counts)
        .filter(|(&c, _)| c >= lo_ns * 1e3 && c <= hi_ns * 1e3)
        .map(|(_, &n)| n as f64)
        .collect();
    if counts.len() < 10 {
        return Err(AnalysisError::EmptyNoiseRegion { lo_ns, hi_ns });
    }
    let mean = counts.iter().sum::<f64>() / counts.len() as f64;
    if mean <= 0.0 {
        return Err(AnalysisError::ZeroNoiseMean);
    }
    let chi2: f64 = counts.iter().map(|&n| (n - mean).powi(2) / mean).sum();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).expect("dof >= 9");
    Ok(FlatnessReport {
        chi2,
        dof,
        p_value: 1.0 - dist.cdf(chi2),
        mean,
        bins: counts.len(),
    })
}

#[cfg(test)]
mod tests {
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    use super::*;
    use crate::scenario::TcspcSpec;
    use crate::source::g2_analytic;

    fn synthetic_histogram(params: &CombModelParams, bin_ps: f64, window_ns: f64) -> CoincidenceHistogram {
        let tcspc = TcspcSpec { bin_ps, window_ns };
        let centers = tcspc.bin_centers_ps();
        let counts = centers
            .iter()
            .map(|c| g2_analytic(c * 1e-3, params).round().max(0.0) as u64)
            .collect();
        CoincidenceHistogram { bin_centers_ps: centers, counts, acquisition_s: 60.0 }
    }

    fn fig2a_like() -> CombModelParams {
        CombModelParams {
            c: 5000.0,
            f_fwhm_mhz: 0.95,
            t_fsr_ns: 8.620689655172415,
            tooth_fwhm_ns: 0.06,
            n_teeth: 98,
            noise_floor: 50.0,
        }
    }

    #[test]
    fn g2_flat_histogram_is_unity() {
        let h = CoincidenceHistogram {
            bin_centers_ps: (0..100).map(|i| -990.0 + 20.0 * i as f64).collect(),
            counts: vec![100; 100],
            acquisition_s: 1.0,
        };
        let r = g2_zero(&h, 50.0, (0.3, 0.9)).unwrap();
        assert_relative_eq!(r.g2_zero, 1.0);
        assert_relative_eq!(r.noise_mean, 100.0);
        assert_eq!(r.warning, None);
        // Ties resolve toward zero delay: centers straddle -10 and +10.
        assert_relative_eq!(r.peak_delay_ps, -10.0);
    }

    #[test]
    fn g2_ratio_and_propagated_sigma() {
        let mut counts = vec![100u64; 101];
        counts[50] = 300;
        let h = CoincidenceHistogram {
            bin_centers_ps: (0..101).map(|i| (i as f64 - 50.0) * 20.0).collect(),
            counts,
            acquisition_s: 1.0,
        };
        let r = g2_zero(&h, 100.0, (0.4, 0.8)).unwrap();
        assert_relative_eq!(r.g2_zero, 3.0);
        assert_relative_eq!(r.peak_counts, 300.0);
        let k = r.noise_bins as f64;
        assert_relative_eq!(
            r.g2_std,
            (300.0 + 300.0_f64.powi(2) / (k * 100.0)).sqrt() / 100.0,
            max_relative = 1e-12
        );

        // Scale invariance of the ratio.
        let scaled = CoincidenceHistogram {
            bin_centers_ps: h.bin_centers_ps.clone(),
            counts: h.counts.iter().map(|c| c * 7).collect(),
            acquisition_s: 1.0,
        };
        let r7 = g2_zero(&scaled, 100.0, (0.4, 0.8)).unwrap();
        assert_relative_eq!(r7.g2_zero, 3.0);
    }

    #[test]
    fn g2_guards_regions() {
        let mut counts = vec![10u64; 101];
        counts[50] = 90;
        let h = CoincidenceHistogram {
            bin_centers_ps: (0..101).map(|i| (i as f64 - 50.0) * 20.0).collect(),
            counts: counts.clone(),
            acquisition_s: 1.0,
        };
        assert!(matches!(
            g2_zero(&h, 100.0, (-0.05, 0.05)),
            Err(AnalysisError::NoiseOverlapsPeak { .. })
        ));
        assert!(matches!(
            g2_zero(&h, 100.0, (5.0, 6.0)),
            Err(AnalysisError::EmptyNoiseRegion { .. })
        ));
        assert!(matches!(
            g2_zero(&h, 100.0, (0.8, 0.4)),
            Err(AnalysisError::BadInterval { .. })
        ));

        let zero = CoincidenceHistogram {
            bin_centers_ps: h.bin_centers_ps.clone(),
            counts: {
                let mut c = vec![0u64; 101];
                c[50] = 90;
                c
            },
            acquisition_s: 1.0,
        };
        assert!(matches!(g2_zero(&zero, 100.0, (0.4, 0.8)), Err(AnalysisError::ZeroNoiseMean)));

        let warned = g2_zero(&h, 100.0, (-0.8, -0.4)).unwrap();
        assert!(warned.warning.as_deref().unwrap().contains("dead time"));
    }

    #[test]
    fn fit_recovers_noiseless_curve() {
        let truth = fig2a_like();
        let h = synthetic_histogram(&truth, 32.0, 200.0);
        let init = CombModelParams {
            c: truth.c * 1.25,
            f_fwhm_mhz: truth.f_fwhm_mhz * 0.8,
            t_fsr_ns: truth.t_fsr_ns * 1.002,
            tooth_fwhm_ns: truth.tooth_fwhm_ns * 1.4,
            n_teeth: truth.n_teeth,
            noise_floor: truth.noise_floor * 2.0,
        };
        let fit = fit_comb(&h, &init).unwrap();
        assert!(fit.converged, "fit did not converge: {fit:?}");
        assert_relative_eq!(fit.params.c, truth.c, max_relative = 1e-3);
        assert_relative_eq!(fit.params.f_fwhm_mhz, truth.f_fwhm_mhz, max_relative = 1e-3);
        assert_relative_eq!(fit.params.t_fsr_ns, truth.t_fsr_ns, max_relative = 1e-5);
        assert_relative_eq!(fit.params.tooth_fwhm_ns, truth.tooth_fwhm_ns, max_relative = 1e-3);
        assert_relative_eq!(fit.params.noise_floor, truth.noise_floor, max_relative = 2e-2);
        assert!(fit.residual_rms < 1.0);
        assert!(fit.sigma_f_fwhm_mhz >= 0.0);
    }

    #[test]
    fn estimate_init_feeds_the_fit() {
        let truth = fig2a_like();
        let h = synthetic_histogram(&truth, 32.0, 200.0);
        let init = estimate_comb_init(&h).unwrap();
        assert_relative_eq!(init.t_fsr_ns, truth.t_fsr_ns, max_relative = 0.05);
        assert_relative_eq!(init.f_fwhm_mhz, truth.f_fwhm_mhz, max_relative = 0.5);
        assert_relative_eq!(init.c, truth.c, max_relative = 0.3);
        let fit = fit_comb(&h, &init).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.params.f_fwhm_mhz, truth.f_fwhm_mhz, max_relative = 5e-3);
        assert_relative_eq!(fit.params.t_fsr_ns, truth.t_fsr_ns, max_relative = 1e-4);
    }

    #[test]
    fn fit_rejects_short_spans() {
        let truth = fig2a_like();
        let h = synthetic_histogram(&truth, 32.0, 20.0);
        assert!(matches!(
            fit_comb(&h, &truth),
            Err(AnalysisError::TooFewTeeth { need: 5, .. })
        ));
    }

    #[test]
    fn linewidth_examples() {
        for (f, tol) in [(0.95, 0.05), (1.35, 0.07)] {
            let mut p = fig2a_like();
            p.f_fwhm_mhz = f;
            p.n_teeth = CombModelParams::default_n_teeth(f, p.t_fsr_ns);
            let h = synthetic_histogram(&p, 16.0, 200.0);
            let lw = linewidth_from_envelope(&h).unwrap();
            assert!((lw - f).abs() < tol, "linewidth {lw} vs {f}");
        }

        // Envelope-free comb: constant tooth heights, slope ~ 0.
        let mut flat = fig2a_like();
        flat.f_fwhm_mhz = 1e-4;
        flat.n_teeth = 10_000;
        let h = synthetic_histogram(&flat, 16.0, 200.0);
        let lw = linewidth_from_envelope(&h).unwrap();
        assert!(lw.abs() < 0.02, "expected ~0, got {lw}");
    }

    #[test]
    fn bandwidth_from_dispersion_examples() {
        let fiber = FiberSpec { length_km: 10.0, loss_db_per_km: 0.2, dispersion_ps_nm_km: 15.0 };
        let est = bandwidth_from_dispersion(2.0, 0.0, &fiber, 1514.0).unwrap();
        assert_relative_eq!(est.delta_lambda_nm, 2000.0 / 150.0, max_relative = 1e-12);
        assert!((1.0..2.0).contains(&est.span_thz));
        assert_relative_eq!(
            est.span_thz,
            source::span_from_wavelength(est.delta_lambda_nm, 1514.0).unwrap(),
            max_relative = 1e-12
        );

        // Inverse proportionality to fiber length.
        let half = FiberSpec { length_km: 5.0, ..fiber };
        let est_half = bandwidth_from_dispersion(2.0, 0.0, &half, 1514.0).unwrap();
        assert_relative_eq!(est_half.delta_lambda_nm, 2.0 * est.delta_lambda_nm);

        let same = bandwidth_from_dispersion(1.5, 1.5, &fiber, 1514.0).unwrap();
        assert_abs_diff_eq!(same.delta_lambda_nm, 0.0);
        assert_abs_diff_eq!(same.span_thz, 0.0);

        assert!(matches!(
            bandwidth_from_dispersion(1.0, 2.0, &fiber, 1514.0),
            Err(AnalysisError::NegativeQuadrature { .. })
        ));
        let no_disp = FiberSpec { dispersion_ps_nm_km: 0.0, ..fiber };
        assert!(matches!(
            bandwidth_from_dispersion(2.0, 0.0, &no_disp, 1514.0),
            Err(AnalysisError::ZeroDispersion)
        ));
    }

    #[test]
    fn sweep_slope_examples() {
        let exact: Vec<(f64, f64)> =
            [0.01, 0.05, 0.1, 0.5, 1.0].iter().map(|&p| (p, 1.0 + 0.2 / p)).collect();
        let r = pump_sweep_slope(&exact).unwrap();
        assert_relative_eq!(r.slope, -1.0, epsilon = 1e-12);
        assert_eq!(r.warning, None);

        let constant: Vec<(f64, f64)> =
            [0.01, 0.1, 1.0, 10.0].iter().map(|&p| (p, 5.0)).collect();
        let r = pump_sweep_slope(&constant).unwrap();
        assert_abs_diff_eq!(r.slope, 0.0, epsilon = 1e-12);

        let mut with_bad = exact.clone();
        with_bad.push((2.0, 0.9));
        with_bad.push((3.0, 1.0));
        let r = pump_sweep_slope(&with_bad).unwrap();
        assert_relative_eq!(r.slope, -1.0, epsilon = 1e-12);
        assert_eq!(r.n_used, 5);
        assert!(r.warning.as_deref().unwrap().contains("excluded 2"));

        assert!(matches!(
            pump_sweep_slope(&[(1.0, 0.5), (2.0, 0.5), (3.0, 2.0), (4.0, 3.0)]),
            Err(AnalysisError::TooFewSweepPoints { usable: 2 })
        ));
        assert!(matches!(
            pump_sweep_slope(&[(0.0, 2.0), (2.0, 2.0), (3.0, 2.0)]),
            Err(AnalysisError::OutOfRange { name: "pump_mw", .. })
        ));
    }

    #[test]
    fn flatness_distinguishes_flat_from_spiked() {
        let flat = CoincidenceHistogram {
            bin_centers_ps: (0..200).map(|i| i as f64 * 20.0).collect(),
            counts: vec![400; 200],
            acquisition_s: 1.0,
        };
        let r = floor_flatness(&flat, (0.0, 4.0)).unwrap();
        assert_abs_diff_eq!(r.chi2, 0.0);
        assert_relative_eq!(r.p_value, 1.0);

        let mut counts = vec![400u64; 200];
        counts[100] = 1200;
        let spiked = CoincidenceHistogram {
            bin_centers_ps: flat.bin_centers_ps.clone(),
            counts,
            acquisition_s: 1.0,
        };
        let r = floor_flatness(&spiked, (0.0, 4.0)).unwrap();
        assert!(r.p_value < 1e-12, "p = {}", r.p_value);
        assert!(floor_flatness(&flat, (100.0, 200.0)).is_err());
    }
}
