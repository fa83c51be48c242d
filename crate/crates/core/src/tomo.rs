//! 16-basis two-qubit polarization tomography: projector construction,
//! count prediction, linear inversion, and maximum-likelihood
//! reconstruction with a physicality-preserving parametrization.

use nalgebra::{Matrix4, SMatrix, SVector, Vector2};
use num_complex::Complex64;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::qstate::{DensityMatrix, StateError};

pub const N_BASES: usize = 16;

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("line {line}: unknown basis label {label:?}")]
    UnknownLabel { line: usize, label: String },
    #[error("duplicate basis label {label}")]
    DuplicateLabel { label: &'static str },
    #[error("missing basis label {label}")]
    MissingLabel { label: &'static str },
    #[error("expected 16 basis rows, found {found}")]
    WrongRowCount { found: usize },
    #[error("line {line}: {message}")]
    BadRow { line: usize, message: String },
    #[error("basis {label}: acquisition_s must be positive and finite, got {value}")]
    BadAcquisition { label: &'static str, value: f64 },
    #[error("all 16 counts are zero, nothing to reconstruct")]
    AllZeroCounts,
    #[error("counts cannot be normalized: the four H/V bases are all zero")]
    ZeroNormalization,
    #[error("likelihood maximization did not converge after {iterations} iterations")]
    NonConvergence {
        iterations: usize,
        /// Best iterate found, still a physical state.
        best: Box<MleResult>,
    },
    #[error("state: {0}")]
    State(#[from] StateError),
}

/// The 16 measured projector pairs, in canonical acquisition order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[allow(clippy::upper_case_acronyms)]
pub enum BasisLabel {
    HH, HV, VV, VH, RH, RV, DV, DH, DR, DD, RD, HD, VD, VL, HL, RL,
}

use BasisLabel::*;

impl BasisLabel {
    pub const CANONICAL: [BasisLabel; 16] =
        [HH, HV, VV, VH, RH, RV, DV, DH, DR, DD, RD, HD, VD, VL, HL, RL];

    pub fn as_str(self) -> &'static str {
        match self {
            HH => "HH", HV => "HV", VV => "VV", VH => "VH",
            RH => "RH", RV => "RV", DV => "DV", DH => "DH",
            DR => "DR", DD => "DD", RD => "RD", HD => "HD",
            VD => "VD", VL => "VL", HL => "HL", RL => "RL",
        }
    }

    pub fn parse(s: &str) -> Option<BasisLabel> {
        Self::CANONICAL.iter().copied().find(|l| l.as_str() == s)
    }

    fn index(self) -> usize {
        Self::CANONICAL.iter().position(|&l| l == self).unwrap()
    }
}

fn ket(symbol: u8) -> Vector2<Complex64> {
    let z = Complex64::new;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    match symbol {
        b'H' => Vector2::new(z(1.0, 0.0), z(0.0, 0.0)),
        b'V' => Vector2::new(z(0.0, 0.0), z(1.0, 0.0)),
        b'D' => Vector2::new(z(s, 0.0), z(s, 0.0)),
        b'A' => Vector2::new(z(s, 0.0), z(-s, 0.0)),
        b'R' => Vector2::new(z(s, 0.0), z(0.0, s)),
        b'L' => Vector2::new(z(s, 0.0), z(0.0, -s)),
        _ => unreachable!("ket symbols are restricted to H V D A R L"),
    }
}

/// Rank-1 projector |ab><ab| for a two-letter basis label.
pub fn projector_for(label: BasisLabel) -> Matrix4<Complex64> {
    let name = label.as_str().as_bytes();
    let v = ket(name[0]).kronecker(&ket(name[1]));
    &v * v.adjoint()
}

fn projectors() -> [Matrix4<Complex64>; 16] {
    BasisLabel::CANONICAL.map(projector_for)
}

/// One complete 16-basis acquisition. Entries are held in canonical order
/// regardless of construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct TomographyCounts {
    entries: [(BasisLabel, u64, f64); 16],
}

impl TomographyCounts {
    /// Builds from entries in any order; every canonical label must appear
    /// exactly once with a positive finite acquisition time.
    pub fn new(
        entries: impl IntoIterator<Item = (BasisLabel, u64, f64)>,
    ) -> Result<Self, TomoError> {
        let mut slots: [Option<(u64, f64)>; 16] = [None; 16];
        let mut n = 0usize;
        for (label, counts, acq) in entries {
            n += 1;
            if n > 16 {
                return Err(TomoError::WrongRowCount { found: n });
            }
            let slot = &mut slots[label.index()];
            if slot.is_some() {
                return Err(TomoError::DuplicateLabel { label: label.as_str() });
            }
            if !(acq > 0.0 && acq.is_finite()) {
                return Err(TomoError::BadAcquisition { label: label.as_str(), value: acq });
            }
            *slot = Some((counts, acq));
        }
        if n < 16 {
            if let Some(i) = slots.iter().position(Option::is_none) {
                return Err(TomoError::MissingLabel {
                    label: BasisLabel::CANONICAL[i].as_str(),
                });
            }
            return Err(TomoError::WrongRowCount { found: n });
        }
        let mut out = [(HH, 0u64, 0.0f64); 16];
        for (i, label) in BasisLabel::CANONICAL.iter().enumerate() {
            let (c, a) = slots[i].unwrap();
            out[i] = (*label, c, a);
        }
        Ok(Self { entries: out })
    }

    pub fn entries(&self) -> &[(BasisLabel, u64, f64); 16] {
        &self.entries
    }

    pub fn counts(&self) -> [u64; 16] {
        self.entries.map(|(_, c, _)| c)
    }

    pub fn acquisitions_s(&self) -> [f64; 16] {
        self.entries.map(|(_, _, a)| a)
    }

    pub fn total_counts(&self) -> u64 {
        self.entries.iter().map(|&(_, c, _)| c).sum()
    }

    /// Parses `basis_label,counts,acquisition_s` CSV text (header required),
    /// accepting rows in any order.
    pub fn from_csv_str(text: &str) -> Result<Self, TomoError> {
        let mut rows = Vec::with_capacity(16);
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "basis_label,counts,acquisition_s" => {}
            other => {
                return Err(TomoError::BadRow {
                    line: 1,
                    message: format!(
                        "expected header 'basis_label,counts,acquisition_s', got {:?}",
                        other.map(|(_, h)| h).unwrap_or("")
                    ),
                })
            }
        }
        for (idx, raw) in lines {
            let line = idx + 1;
            let row = raw.trim();
            if row.is_empty() {
                continue;
            }
            let mut fields = row.split(',');
            let (label, counts, acq) = match (fields.next(), fields.next(), fields.next(), fields.next()) {
                (Some(l), Some(c), Some(a), None) => (l.trim(), c.trim(), a.trim()),
                _ => {
                    return Err(TomoError::BadRow {
                        line,
                        message: format!("expected 3 comma-separated fields, got {row:?}"),
                    })
                }
            };
            let label = BasisLabel::parse(label).ok_or_else(|| TomoError::UnknownLabel {
                line,
                label: label.to_string(),
            })?;
            let counts: u64 = counts.parse().map_err(|e| TomoError::BadRow {
                line,
                message: format!("counts {counts:?}: {e}"),
            })?;
            let acq: f64 = acq.parse().map_err(|e| TomoError::BadRow {
                line,
                message: format!("acquisition_s {acq:?}: {e}"),
            })?;
            rows.push((label, counts, acq));
        }
        Self::new(rows)
    }

    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("basis_label,counts,acquisition_s\n");
        for (label, counts, acq) in &self.entries {
            s.push_str(&format!("{},{},{}\n", label.as_str(), counts, acq));
        }
        s
    }
}

/// Expected mean counts n0 * Tr[rho P_k] * acquisition for every canonical
/// basis, as real values.
pub fn predicted_counts(
    rho: &DensityMatrix,
    n0_cps: f64,
    acquisition_s: f64,
) -> [(BasisLabel, f64); 16] {
    let proj = projectors();
    let mut out = [(HH, 0.0f64); 16];
    for (i, label) in BasisLabel::CANONICAL.iter().enumerate() {
        let q = (rho.matrix() * proj[i]).trace().re.max(0.0);
        out[i] = (*label, n0_cps * q * acquisition_s);
    }
    out
}

/// Solves the linear system relating normalized count rates to the density
/// matrix. The result is Hermitian with unit trace but can carry negative
/// eigenvalues under Poisson noise.
pub fn linear_inversion(counts: &TomographyCounts) -> Result<Matrix4<Complex64>, TomoError> {
    let proj = projectors();
    // The four H/V rates sum to Tr[rho] = 1 and fix the normalization.
    let n0: f64 = counts.entries[..4]
        .iter()
        .map(|&(_, c, a)| c as f64 / a)
        .sum();
    if n0 <= 0.0 {
        return Err(TomoError::ZeroNormalization);
    }
    let mut design: SMatrix<Complex64, 16, 16> = SMatrix::zeros();
    let mut rates: SVector<Complex64, 16> = SVector::zeros();
    for k in 0..16 {
        let (_, c, a) = counts.entries[k];
        rates[k] = Complex64::new(c as f64 / (a * n0), 0.0);
        for i in 0..4 {
            for j in 0..4 {
                // Tr[rho P] = sum_ij rho_ij P_ji.
                design[(k, 4 * i + j)] = proj[k][(j, i)];
            }
        }
    }
    let solution = design
        .lu()
        .solve(&rates)
        .expect("the canonical 16-projector design matrix is nonsingular");
    let mut rho = Matrix4::zeros();
    for i in 0..4 {
        for j in 0..4 {
            rho[(i, j)] = solution[4 * i + j];
        }
    }
    let rho = (rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
    let trace = rho.trace().re;
    Ok(rho / Complex64::new(trace, 0.0))
}

/// Clips negative eigenvalues to a small floor and renormalizes, mapping
/// any Hermitian matrix to a nearby physical state.
pub fn project_physical(m: &Matrix4<Complex64>) -> DensityMatrix {
    let herm = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.symmetric_eigen();
    let floor = 1e-9;
    let mut out = Matrix4::zeros();
    for i in 0..4 {
        let lam = eig.eigenvalues[i].max(floor);
        let v = eig.eigenvectors.column(i);
        out += (&v * v.adjoint()) * Complex64::new(lam, 0.0);
    }
    let trace = out.trace().re;
    DensityMatrix::new_with_tol(out / Complex64::new(trace, 0.0), 1e-6)
        .expect("eigenvalue clipping produces a physical state")
}

/// Result of a maximum-likelihood reconstruction.
#[derive(Debug, Clone)]
pub struct MleResult {
    pub rho: DensityMatrix,
    /// Poisson log-likelihood of the counts at the optimum, including the
    /// factorial terms.
    pub log_likelihood: f64,
    pub iterations: usize,
    /// Profiled normalization (detected pairs per second at unit overlap).
    pub n0_cps: f64,
}

/// Poisson log-likelihood of observed counts under a state, with the
/// normalization constant profiled out in closed form.
pub fn log_likelihood(rho: &DensityMatrix, counts: &TomographyCounts) -> f64 {
    let proj = projectors();
    let q: Vec<f64> = (0..16)
        .map(|k| (rho.matrix() * proj[k]).trace().re.max(0.0))
        .collect();
    poisson_ll(&q, counts).0
}

fn poisson_ll(q: &[f64], counts: &TomographyCounts) -> (f64, f64) {
    let mut s = 0.0;
    let mut ntot = 0.0;
    for (k, &(_, c, a)) in counts.entries.iter().enumerate() {
        s += a * q[k];
        ntot += c as f64;
    }
    if s <= 0.0 {
        return (f64::NEG_INFINITY, 0.0);
    }
    let n0 = ntot / s;
    let mut ll = -ntot;
    for (k, &(_, c, a)) in counts.entries.iter().enumerate() {
        let n = c as f64;
        if n > 0.0 {
            let mu = n0 * a * q[k];
            if mu <= 0.0 {
                return (f64::NEG_INFINITY, n0);
            }
            ll += n * mu.ln() - ln_gamma(n + 1.0);
        }
    }
    (ll, n0)
}

// Parameter layout of the lower-triangular T in rho = T^dag T / Tr: four
// real diagonal entries first, then (re, im) per subdiagonal entry.
const PARAM_SLOTS: [(usize, usize, bool); 16] = [
    (0, 0, false), (1, 1, false), (2, 2, false), (3, 3, false),
    (1, 0, false), (1, 0, true),
    (2, 0, false), (2, 0, true),
    (2, 1, false), (2, 1, true),
    (3, 0, false), (3, 0, true),
    (3, 1, false), (3, 1, true),
    (3, 2, false), (3, 2, true),
];

fn t_from_x(x: &[f64; 16]) -> Matrix4<Complex64> {
    let mut t = Matrix4::zeros();
    for (p, &(i, j, imag)) in PARAM_SLOTS.iter().enumerate() {
        if imag {
            t[(i, j)] += Complex64::new(0.0, x[p]);
        } else {
            t[(i, j)] += Complex64::new(x[p], 0.0);
        }
    }
    t
}

fn x_from_t(t: &Matrix4<Complex64>) -> [f64; 16] {
    let mut x = [0.0; 16];
    for (p, &(i, j, imag)) in PARAM_SLOTS.iter().enumerate() {
        x[p] = if imag { t[(i, j)].im } else { t[(i, j)].re };
    }
    x
}

/// Lower-triangular T with T^dag T = rho, via Cholesky of the
/// index-reversed matrix (a plain Cholesky would give upper-triangular).
fn seed_t(rho: &Matrix4<Complex64>) -> Matrix4<Complex64> {
    let mut p = Matrix4::<Complex64>::zeros();
    for i in 0..4 {
        p[(i, 3 - i)] = Complex64::new(1.0, 0.0);
    }
    let flipped = p * rho * p;
    let chol = flipped
        .cholesky()
        .or_else(|| {
            let bumped = flipped + Matrix4::identity() * Complex64::new(1e-9, 0.0);
            bumped.cholesky()
        })
        .expect("clipped seed state is positive definite");
    p * chol.l().adjoint() * p
}

struct Objective {
    proj: [Matrix4<Complex64>; 16],
    acq: [f64; 16],
    counts_f: [f64; 16],
    ntot: f64,
    ll_const: f64,
}

impl Objective {
    fn new(counts: &TomographyCounts) -> Self {
        let acq = counts.acquisitions_s();
        let counts_f = counts.counts().map(|c| c as f64);
        let ntot = counts_f.iter().sum();
        let ll_const: f64 = counts_f
            .iter()
            .map(|&n| if n > 0.0 { -ln_gamma(n + 1.0) } else { 0.0 })
            .sum();
        Self { proj: projectors(), acq, counts_f, ntot, ll_const }
    }

    /// Negative profiled log-likelihood (without the factorial constant)
    /// at the parameter point.
    fn value(&self, x: &[f64; 16]) -> f64 {
        let t = t_from_x(x);
        let g = t.adjoint() * &t;
        let c = g.trace().re;
        if !(c > 0.0) {
            return f64::INFINITY;
        }
        let mut s = 0.0;
        let mut data = 0.0;
        for k in 0..16 {
            let q = ((&g * self.proj[k]).trace().re / c).max(0.0);
            s += self.acq[k] * q;
            if self.counts_f[k] > 0.0 {
                if q <= 0.0 {
                    return f64::INFINITY;
                }
                data += self.counts_f[k] * (self.acq[k] * q).ln();
            }
        }
        if s <= 0.0 {
            return f64::INFINITY;
        }
        let ll = self.ntot * (self.ntot / s).ln() - self.ntot + data;
        -ll
    }

    /// Value plus analytic gradient of the negative log-likelihood.
    fn value_grad(&self, x: &[f64; 16]) -> (f64, [f64; 16]) {
        let t = t_from_x(x);
        let g = t.adjoint() * &t;
        let c = g.trace().re;
        let mut grad = [0.0; 16];
        if !(c > 0.0) {
            return (f64::INFINITY, grad);
        }
        let mut q = [0.0f64; 16];
        let mut s = 0.0;
        for k in 0..16 {
            q[k] = ((&g * self.proj[k]).trace().re / c).max(0.0);
            s += self.acq[k] * q[k];
        }
        if s <= 0.0 {
            return (f64::INFINITY, grad);
        }
        let mut data = 0.0;
        for k in 0..16 {
            if self.counts_f[k] > 0.0 {
                if q[k] <= 0.0 {
                    return (f64::INFINITY, grad);
                }
                data += self.counts_f[k] * (self.acq[k] * q[k]).ln();
            }
        }
        let value = -(self.ntot * (self.ntot / s).ln() - self.ntot + data);

        // dLL/dq_k, then chain through q_k = g_k / c with
        // dg_k = 2 Re/Im (T P_k)_ab and dc = 2 Re/Im T_ab.
        let mut w = [0.0f64; 16];
        for k in 0..16 {
            let fit = self.ntot * self.acq[k] / s;
            let dat = if self.counts_f[k] > 0.0 { self.counts_f[k] / q[k] } else { 0.0 };
            w[k] = dat - fit;
        }
        let tp: Vec<Matrix4<Complex64>> = (0..16).map(|k| &t * self.proj[k]).collect();
        for (p, &(i, j, imag)) in PARAM_SLOTS.iter().enumerate() {
            let dc = if imag { 2.0 * t[(i, j)].im } else { 2.0 * t[(i, j)].re };
            let mut dll = 0.0;
            for k in 0..16 {
                if w[k] == 0.0 {
                    continue;
                }
                let dg = if imag { 2.0 * tp[k][(i, j)].im } else { 2.0 * tp[k][(i, j)].re };
                dll += w[k] * (dg - q[k] * dc) / c;
            }
            grad[p] = -dll;
        }
        (value, grad)
    }

    fn report(&self, x: &[f64; 16]) -> (DensityMatrix, f64, f64) {
        let t = t_from_x(x);
        let g = t.adjoint() * &t;
        let c = g.trace().re;
        let rho = DensityMatrix::new_with_tol(g / Complex64::new(c, 0.0), 1e-7)
            .expect("T^dag T / Tr is physical by construction");
        let q: Vec<f64> = (0..16)
            .map(|k| (rho.matrix() * self.proj[k]).trace().re.max(0.0))
            .collect();
        let (ll, n0) = {
            let mut s = 0.0;
            for k in 0..16 {
                s += self.acq[k] * q[k];
            }
            let n0 = self.ntot / s;
            let mut ll = -self.ntot + self.ll_const;
            for k in 0..16 {
                if self.counts_f[k] > 0.0 {
                    ll += self.counts_f[k] * (n0 * self.acq[k] * q[k]).ln();
                }
            }
            (ll, n0)
        };
        (rho, ll, n0)
    }
}

const MAX_ITERS: usize = 800;

/// Maximum-likelihood state reconstruction: rho = T^dag T / Tr with
/// lower-triangular T (16 real parameters), Poisson likelihood with the
/// overall rate profiled out, BFGS with backtracking from a seed projected
/// out of linear inversion.
pub fn mle_reconstruct(counts: &TomographyCounts) -> Result<MleResult, TomoError> {
    if counts.total_counts() == 0 {
        return Err(TomoError::AllZeroCounts);
    }
    let obj = Objective::new(counts);
    let seed_rho = match linear_inversion(counts) {
        Ok(m) => project_physical(&m),
        Err(TomoError::ZeroNormalization) => {
            project_physical(&(Matrix4::identity() * Complex64::new(0.25, 0.0)))
        }
        Err(e) => return Err(e),
    };
    let mut x = x_from_t(&seed_t(seed_rho.matrix()));

    let (mut f, mut grad) = obj.value_grad(&x);
    let scale = 1.0 + obj.ntot;
    let gtol = 1e-9 * scale;
    let ftol = 1e-12;
    let mut h: SMatrix<f64, 16, 16> = SMatrix::identity();
    {
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        h *= 1.0 / gnorm.max(1e-12);
    }
    let mut iterations = 0;
    let mut flat_steps = 0;
    let mut resets = 0;

    while iterations < MAX_ITERS {
        let gvec = SVector::<f64, 16>::from_row_slice(&grad);
        if gvec.amax() <= gtol || flat_steps >= 3 {
            let (rho, log_likelihood, n0_cps) = obj.report(&x);
            return Ok(MleResult { rho, log_likelihood, iterations, n0_cps });
        }
        let mut dir = -(&h * gvec);
        if dir.dot(&gvec) >= 0.0 {
            h = SMatrix::identity() * (1.0 / gvec.norm().max(1e-12));
            dir = -(&h * gvec);
        }
        let slope = dir.dot(&gvec);

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut xn = x;
            for p in 0..16 {
                xn[p] += alpha * dir[p];
            }
            let fn_ = obj.value(&xn);
            if fn_.is_finite() && fn_ <= f + 1e-4 * alpha * slope {
                accepted = Some((xn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((xn, fnew)) = accepted else {
            if resets == 0 {
                resets = 1;
                h = SMatrix::identity() * (1.0 / gvec.norm().max(1e-12));
                iterations += 1;
                continue;
            }
            flat_steps = 3;
            continue;
        };

        let (fchk, gnew) = obj.value_grad(&xn);
        debug_assert!((fchk - fnew).abs() <= 1e-6 * (1.0 + fnew.abs()));
        if (f - fnew).abs() <= ftol * (1.0 + f.abs()) {
            flat_steps += 1;
        } else {
            flat_steps = 0;
        }

        let gv_new = SVector::<f64, 16>::from_row_slice(&gnew);
        let s = alpha * dir;
        let y = gv_new - gvec;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho_bfgs = 1.0 / sy;
            let i16: SMatrix<f64, 16, 16> = SMatrix::identity();
            let left = i16 - rho_bfgs * s * y.transpose();
            h = left * h * left.transpose() + rho_bfgs * s * s.transpose();
        }
        x = xn;
        f = fnew;
        grad = gnew;
        iterations += 1;
    }

    let (rho, log_likelihood, n0_cps) = obj.report(&x);
    Err(TomoError::NonConvergence {
        iterations,
        best: Box::new(MleResult { rho, log_likelihood, iterations, n0_cps }),
    })
}
