//! Seeded Monte Carlo generation of detection timestamp streams, TCSPC
//! coincidence histogramming, and synthetic tomography acquisitions.
//!
//! Generation is slice-parallel: the acquisition splits into 125 ms
//! slices, each driven by its own counter-mode RNG stream, so results are
//! bit-identical for a given seed regardless of thread count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use rayon::prelude::*;
use statrs::function::erf::{erf, erf_inv};
use thiserror::Error;

use crate::qstate::DensityMatrix;
use crate::scenario::{ScenarioConfig, ScenarioError, ScenarioRates, TcspcSpec};
use crate::source::CombModelParams;
use crate::tomo::{predicted_counts, TomographyCounts};

const SLICE_S: f64 = 0.125;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(
        "{channel} channel: analytic singles rate {expected_cps:.4e} cps exceeds the \
         detector max_rate_cps {max_rate_cps:.4e}; the linear detection model does not hold"
    )]
    Saturated {
        channel: &'static str,
        expected_cps: f64,
        max_rate_cps: f64,
    },
    #[error("{name} must be positive and finite, got {value}")]
    OutOfRange { name: &'static str, value: f64 },
    #[error("histogram: {0}")]
    BadHistogram(String),
}

/// Detection timestamps for both channels, sorted ascending, integer
/// picoseconds from the start of the acquisition, dead-time censored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimestampStreams {
    pub signal_ps: Vec<i64>,
    pub idler_ps: Vec<i64>,
}

/// A start-stop coincidence histogram over a symmetric delay window.
#[derive(Debug, Clone, PartialEq)]
pub struct CoincidenceHistogram {
    pub bin_centers_ps: Vec<f64>,
    pub counts: Vec<u64>,
    pub acquisition_s: f64,
}

impl CoincidenceHistogram {
    /// Validating constructor for histograms from external sources;
    /// centers must be uniformly spaced and ascending.
    pub fn new(
        bin_centers_ps: Vec<f64>,
        counts: Vec<u64>,
        acquisition_s: f64,
    ) -> Result<Self, SimError> {
        if bin_centers_ps.len() != counts.len() {
            return Err(SimError::BadHistogram(format!(
                "{} bin centers but {} counts",
                bin_centers_ps.len(),
                counts.len()
            )));
        }
        if bin_centers_ps.len() < 2 {
            return Err(SimError::BadHistogram(
                "need at least two bins".to_string(),
            ));
        }
        if !(acquisition_s > 0.0 && acquisition_s.is_finite()) {
            return Err(SimError::OutOfRange {
                name: "acquisition_s",
                value: acquisition_s,
            });
        }
        let w = bin_centers_ps[1] - bin_centers_ps[0];
        if !(w > 0.0) {
            return Err(SimError::BadHistogram(
                "bin centers must ascend".to_string(),
            ));
        }
        for pair in bin_centers_ps.windows(2) {
            if ((pair[1] - pair[0]) - w).abs() > 1e-6 * w {
                return Err(SimError::BadHistogram(
                    "bin centers must be uniformly spaced".to_string(),
                ));
            }
        }
        Ok(Self { bin_centers_ps, counts, acquisition_s })
    }

    pub fn bin_width_ps(&self) -> f64 {
        self.bin_centers_ps[1] - self.bin_centers_ps[0]
    }

    pub fn total_counts(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-slice generation parameters, precomputed once per run.
struct StreamModel {
    pair_cps: f64,
    signal_pairless_cps: f64,
    idler_pairless_cps: f64,
    /// Cumulative envelope weights over tooth index -n_side..=n_side.
    tooth_cum: Vec<f64>,
    n_side: i64,
    t_fsr_ps: f64,
    tooth_sigma_ps: f64,
    sigma_nu_ghz: f64,
    /// erf-transformed half band for inverse-CDF truncated sampling.
    band_edge: Option<f64>,
    k_signal: f64,
    k_idler: f64,
    needs_dnu: bool,
    jitter_signal_ps: f64,
    jitter_idler_ps: f64,
    duration_s: f64,
    duration_ps: f64,
}

impl StreamModel {
    fn build(rates: &ScenarioRates, comb: &CombModelParams, duration_s: f64) -> Self {
        let n_side = comb.n_teeth.saturating_sub(1) as i64;
        let decay_per_tooth = comb.envelope_rate_per_ns() * comb.t_fsr_ns;
        let mut cum = Vec::with_capacity((2 * n_side + 1) as usize);
        let mut total = 0.0;
        for n in -n_side..=n_side {
            total += (-decay_per_tooth * n.abs() as f64).exp();
            cum.push(total);
        }
        for c in &mut cum {
            *c /= total;
        }
        *cum.last_mut().unwrap() = 1.0;

        let sqrt2 = std::f64::consts::SQRT_2;
        let band_edge = rates
            .band_halfwidth_ghz
            .map(|h| erf(h / (rates.sigma_nu_ghz * sqrt2)));
        let needs_dnu =
            band_edge.is_some() || rates.k_signal_ps_per_ghz > 0.0 || rates.k_idler_ps_per_ghz > 0.0;

        Self {
            pair_cps: rates.coincidence_cps,
            signal_pairless_cps: rates.signal_pairless_cps,
            idler_pairless_cps: rates.idler_pairless_cps,
            tooth_cum: cum,
            n_side,
            t_fsr_ps: comb.t_fsr_ns * 1e3,
            tooth_sigma_ps: rates.intrinsic_tooth_sigma_ps,
            sigma_nu_ghz: rates.sigma_nu_ghz,
            band_edge,
            k_signal: rates.k_signal_ps_per_ghz,
            k_idler: rates.k_idler_ps_per_ghz,
            needs_dnu,
            jitter_signal_ps: rates.signal_jitter_sigma_ps,
            jitter_idler_ps: rates.idler_jitter_sigma_ps,
            duration_s,
            duration_ps: duration_s * 1e12,
        }
    }

    fn slice(&self, seed: u64, index: u64) -> (Vec<i64>, Vec<i64>) {
        let start_s = index as f64 * SLICE_S;
        let end_s = (start_s + SLICE_S).min(self.duration_s);
        let len_s = end_s - start_s;
        let start_ps = start_s * 1e12;
        let end_ps = end_s * 1e12;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index);

        let draw_count = |rng: &mut ChaCha8Rng, rate_cps: f64| -> u64 {
            let lambda = rate_cps * len_s;
            if lambda > 0.0 {
                Poisson::new(lambda).unwrap().sample(rng) as u64
            } else {
                0
            }
        };
        let n_pairs = draw_count(&mut rng, self.pair_cps);
        let n_signal_only = draw_count(&mut rng, self.signal_pairless_cps);
        let n_idler_only = draw_count(&mut rng, self.idler_pairless_cps);

        let tooth_noise = Normal::new(0.0, self.tooth_sigma_ps).unwrap();
        let dnu_open = Normal::new(0.0, self.sigma_nu_ghz).unwrap();
        let jit_s = Normal::new(0.0, self.jitter_signal_ps).unwrap();
        let jit_i = Normal::new(0.0, self.jitter_idler_ps).unwrap();
        let sqrt2 = std::f64::consts::SQRT_2;

        let mut signal = Vec::with_capacity(n_pairs as usize + n_signal_only as usize);
        let mut idler = Vec::with_capacity(n_pairs as usize + n_idler_only as usize);
        let keep = |v: &mut Vec<i64>, t_ps: f64| {
            if t_ps >= 0.0 && t_ps < self.duration_ps {
                v.push(t_ps.round() as i64);
            }
        };

        for _ in 0..n_pairs {
            let t = rng.random_range(start_ps..end_ps);
            let u: f64 = rng.random();
            let tooth = self.tooth_cum.partition_point(|&c| c <= u) as i64 - self.n_side;
            let tooth_off = tooth_noise.sample(&mut rng);
            let dnu = if self.needs_dnu {
                match self.band_edge {
                    // Detuning conditioned on passing the converter band.
                    Some(edge) => {
                        let v = rng.random_range(-edge..edge);
                        self.sigma_nu_ghz * sqrt2 * erf_inv(v)
                    }
                    None => dnu_open.sample(&mut rng),
                }
            } else {
                0.0
            };
            let t_signal = t + jit_s.sample(&mut rng) - self.k_signal * dnu;
            let t_idler = t
                + tooth as f64 * self.t_fsr_ps
                + tooth_off
                + jit_i.sample(&mut rng)
                + self.k_idler * dnu;
            keep(&mut signal, t_signal);
            keep(&mut idler, t_idler);
        }
        for _ in 0..n_signal_only {
            keep(&mut signal, rng.random_range(start_ps..end_ps));
        }
        for _ in 0..n_idler_only {
            keep(&mut idler, rng.random_range(start_ps..end_ps));
        }
        (signal, idler)
    }
}

/// Non-paralyzable dead time: an event inside the dead window of the last
/// accepted event is dropped.
fn censor_dead_time(sorted_ps: Vec<i64>, dead_ps: i64) -> Vec<i64> {
    if dead_ps <= 0 {
        return sorted_ps;
    }
    let mut out = Vec::with_capacity(sorted_ps.len());
    let mut last: Option<i64> = None;
    for t in sorted_ps {
        if last.is_none_or(|l| t - l >= dead_ps) {
            out.push(t);
            last = Some(t);
        }
    }
    out
}

/// Generates both detection streams for `duration_s` seconds of acquisition.
/// `seed` and `duration_s` override the scenario's stored values.
pub fn simulate_stream(
    scenario: &ScenarioConfig,
    seed: u64,
    duration_s: f64,
) -> Result<TimestampStreams, SimError> {
    scenario.validate()?;
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(SimError::OutOfRange { name: "duration_s", value: duration_s });
    }
    let rates = scenario.rates();
    for (channel, expected_cps, max_rate_cps) in [
        ("signal", rates.signal_singles_cps, scenario.signal_detector.max_rate_cps),
        ("idler", rates.idler_singles_cps, scenario.idler_detector.max_rate_cps),
    ] {
        if expected_cps > max_rate_cps {
            return Err(SimError::Saturated { channel, expected_cps, max_rate_cps });
        }
    }

    let model = StreamModel::build(&rates, &scenario.comb_params(), duration_s);
    let n_slices = (duration_s / SLICE_S).ceil() as u64;
    let slices: Vec<(Vec<i64>, Vec<i64>)> = (0..n_slices)
        .into_par_iter()
        .map(|i| model.slice(seed, i))
        .collect();

    let mut signal = Vec::with_capacity(slices.iter().map(|(s, _)| s.len()).sum());
    let mut idler = Vec::with_capacity(slices.iter().map(|(_, i)| i.len()).sum());
    for (s, i) in slices {
        signal.extend(s);
        idler.extend(i);
    }
    signal.par_sort_unstable();
    idler.par_sort_unstable();

    let dead = |ns: f64| (ns * 1e3).round() as i64;
    Ok(TimestampStreams {
        signal_ps: censor_dead_time(signal, dead(scenario.signal_detector.dead_time_ns)),
        idler_ps: censor_dead_time(idler, dead(scenario.idler_detector.dead_time_ns)),
    })
}

/// Bidirectional single-stop histogramming: for every signal event the
/// nearest idler event on each side contributes one delay
/// tau = t_idler - t_signal if it falls inside [-window, +window).
pub fn histogram_coincidences(
    signal_ps: &[i64],
    idler_ps: &[i64],
    tcspc: &TcspcSpec,
    acquisition_s: f64,
) -> CoincidenceHistogram {
    debug_assert!(signal_ps.windows(2).all(|w| w[0] <= w[1]));
    debug_assert!(idler_ps.windows(2).all(|w| w[0] <= w[1]));
    let window_ps = tcspc.window_ns * 1e3;
    let bin_ps = tcspc.bin_ps;
    let n_bins = tcspc.n_bins();
    let mut counts = vec![0u64; n_bins];
    let mut tally = |tau_ps: i64| {
        let tau = tau_ps as f64;
        if tau >= -window_ps && tau < window_ps {
            let idx = ((tau + window_ps) / bin_ps) as usize;
            counts[idx.min(n_bins - 1)] += 1;
        }
    };
    let mut j = 0usize;
    for &s in signal_ps {
        while j < idler_ps.len() && idler_ps[j] < s {
            j += 1;
        }
        if j < idler_ps.len() {
            tally(idler_ps[j] - s);
        }
        if j > 0 {
            tally(idler_ps[j - 1] - s);
        }
    }
    CoincidenceHistogram {
        bin_centers_ps: tcspc.bin_centers_ps(),
        counts,
        acquisition_s,
    }
}

/// Draws one Poisson count per canonical tomography basis around the
/// analytic means n0 * Tr[rho P_k] * acquisition.
pub fn simulate_tomography_counts(
    rho: &DensityMatrix,
    n0_cps: f64,
    acquisition_s: f64,
    seed: u64,
) -> Result<TomographyCounts, SimError> {
    if !(n0_cps > 0.0 && n0_cps.is_finite()) {
        return Err(SimError::OutOfRange { name: "n0_cps", value: n0_cps });
    }
    if !(acquisition_s > 0.0 && acquisition_s.is_finite()) {
        return Err(SimError::OutOfRange { name: "acquisition_s", value: acquisition_s });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = predicted_counts(rho, n0_cps, acquisition_s).map(|(label, mean)| {
        let counts = if mean > 0.0 {
            Poisson::new(mean).unwrap().sample(&mut rng) as u64
        } else {
            0
        };
        (label, counts, acquisition_s)
    });
    Ok(TomographyCounts::new(entries).expect("all 16 canonical bases present"))
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;

    use super::*;
    use crate::qstate::{bell_state, BellKind};
    use crate::scenario::fixtures;

    fn tcspc(bin_ps: f64, window_ns: f64) -> TcspcSpec {
        TcspcSpec { bin_ps, window_ns }
    }

    #[test]
    fn empty_streams_give_empty_histogram() {
        let t = tcspc(32.0, 200.0);
        let h = histogram_coincidences(&[], &[], &t, 1.0);
        assert_eq!(h.counts.len(), t.n_bins());
        assert_eq!(h.total_counts(), 0);
        assert_eq!(h.bin_centers_ps, t.bin_centers_ps());
        assert_relative_eq!(h.bin_width_ps(), 32.0);
    }

    #[test]
    fn single_pair_lands_in_center_bin() {
        let t = tcspc(32.0, 200.0);
        let h = histogram_coincidences(&[1_000_000], &[1_000_000], &t, 1.0);
        assert_eq!(h.total_counts(), 1);
        // tau = 0 sits at the lower edge of the first positive bin.
        assert_eq!(h.counts[t.bins_per_side()], 1);
        assert_relative_eq!(h.bin_centers_ps[t.bins_per_side()], 16.0);
    }

    #[test]
    fn nearest_idler_on_each_side_contributes() {
        let t = tcspc(32.0, 200.0);
        let h = histogram_coincidences(
            &[1_000_000],
            &[999_000, 1_002_000, 1_050_000],
            &t,
            1.0,
        );
        // Only the nearest idler per side counts; 1_050_000 is shadowed.
        assert_eq!(h.total_counts(), 2);
        let idx = |tau: f64| ((tau + 200_000.0) / 32.0) as usize;
        assert_eq!(h.counts[idx(-1000.0)], 1);
        assert_eq!(h.counts[idx(2000.0)], 1);

        // Delays at or beyond the window edge fall outside.
        let h = histogram_coincidences(&[1_000_000], &[1_200_000], &t, 1.0);
        assert_eq!(h.total_counts(), 0);
    }

    #[test]
    fn histogram_constructor_validates() {
        assert!(CoincidenceHistogram::new(vec![0.0, 1.0], vec![1], 1.0).is_err());
        assert!(CoincidenceHistogram::new(vec![0.0], vec![1], 1.0).is_err());
        assert!(CoincidenceHistogram::new(vec![0.0, 1.0, 3.0], vec![1, 2, 3], 1.0).is_err());
        assert!(CoincidenceHistogram::new(vec![0.0, 1.0, 2.0], vec![1, 2, 3], 0.0).is_err());
        let h = CoincidenceHistogram::new(vec![0.0, 1.0, 2.0], vec![1, 2, 3], 2.0).unwrap();
        assert_eq!(h.total_counts(), 6);
    }

    #[test]
    fn streams_are_deterministic_across_thread_counts() {
        let mut scenario = fixtures::fig2a();
        scenario.duration_s = 1.0;
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| simulate_stream(&scenario, 42, 1.0)).unwrap();
        let b = pool4.install(|| simulate_stream(&scenario, 42, 1.0)).unwrap();
        let c = simulate_stream(&scenario, 42, 1.0).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        let other = simulate_stream(&scenario, 43, 1.0).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn zero_efficiency_channel_sees_only_darks() {
        let mut scenario = fixtures::fig2a();
        scenario.idler_detector.efficiency = 0.0;
        let rates = scenario.rates();
        assert_relative_eq!(rates.idler_singles_cps, scenario.idler_detector.dark_cps);
        let streams = simulate_stream(&scenario, 7, 2.0).unwrap();
        // Poisson(2 s x 10 cps) darks, generous band.
        assert!(
            streams.idler_ps.len() >= 3 && streams.idler_ps.len() <= 60,
            "idler kept {} events",
            streams.idler_ps.len()
        );
        assert!(streams.signal_ps.len() > 10_000);
    }

    #[test]
    fn singles_match_the_analytic_budget() {
        let scenario = fixtures::fig2a();
        let duration = 5.0;
        let rates = scenario.rates();
        let streams = simulate_stream(&scenario, 1, duration).unwrap();
        for (stream, rate_cps) in [
            (&streams.signal_ps, rates.signal_singles_cps),
            (&streams.idler_ps, rates.idler_singles_cps),
        ] {
            let expected = rate_cps * duration;
            let sigma = expected.sqrt();
            // Dead time trims ~rate*dead ~ 0.1%, well inside the band.
            assert!(
                (stream.len() as f64 - expected).abs() < 5.0 * sigma + 0.005 * expected,
                "got {} events, expected {expected:.0}",
                stream.len()
            );
        }
    }

    #[test]
    fn dead_time_is_enforced() {
        let scenario = fixtures::telecom_high_rate();
        let streams = simulate_stream(&scenario, 3, 0.2).unwrap();
        let dead_ps = (scenario.signal_detector.dead_time_ns * 1e3) as i64;
        for stream in [&streams.signal_ps, &streams.idler_ps] {
            assert!(stream.len() > 100_000);
            assert!(
                stream.windows(2).all(|w| w[1] - w[0] >= dead_ps),
                "dead-time violation"
            );
        }
    }

    #[test]
    fn saturated_detector_is_rejected() {
        let mut scenario = fixtures::telecom_high_rate();
        scenario.signal_detector.max_rate_cps = 1e6;
        match simulate_stream(&scenario, 1, 1.0) {
            Err(SimError::Saturated { channel: "signal", .. }) => {}
            other => panic!("expected saturation error, got {other:?}"),
        }
    }

    #[test]
    fn bad_duration_is_rejected() {
        let scenario = fixtures::fig2a();
        assert!(matches!(
            simulate_stream(&scenario, 1, 0.0),
            Err(SimError::OutOfRange { name: "duration_s", .. })
        ));
        assert!(matches!(
            simulate_stream(&scenario, 1, f64::NAN),
            Err(SimError::OutOfRange { .. })
        ));
    }

    #[test]
    fn tomography_counts_are_seeded_and_scaled() {
        let rho = bell_state(BellKind::PhiPlus).density();
        let a = simulate_tomography_counts(&rho, 4000.0, 1.0, 3).unwrap();
        let b = simulate_tomography_counts(&rho, 4000.0, 1.0, 3).unwrap();
        assert_eq!(a, b);
        let c = simulate_tomography_counts(&rho, 4000.0, 1.0, 4).unwrap();
        assert_ne!(a, c);

        let get = |counts: &TomographyCounts, want: &str| {
            counts
                .entries()
                .iter()
                .find(|(l, _, _)| l.as_str() == want)
                .map(|&(_, c, _)| c)
                .unwrap()
        };
        // <HV|Phi+> = 0 exactly; HH and DD sit near n0/2.
        assert_eq!(get(&a, "HV"), 0);
        for basis in ["HH", "DD"] {
            let n = get(&a, basis) as f64;
            assert!((n - 2000.0).abs() < 4.0 * 2000.0_f64.sqrt(), "{basis}: {n}");
        }
        assert!(simulate_tomography_counts(&rho, 0.0, 1.0, 3).is_err());
        assert!(simulate_tomography_counts(&rho, 4000.0, 0.0, 3).is_err());
    }
}
