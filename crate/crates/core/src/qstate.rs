//! Two-qubit polarization states and entanglement metrics.
//!
//! Basis order is fixed crate-wide to |HH>, |HV>, |VH>, |VV> (first slot =
//! first qubit, H before V). All matrices are 4x4 complex in that order.

use nalgebra::{Matrix2, Matrix3, Matrix4, Vector4};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tag written next to every serialized density matrix so a reader can
/// detect basis-order mismatches instead of silently transposing.
pub const BASIS_ORDER: &str = "HH,HV,VH,VV";

/// Default physicality tolerance for exact-arithmetic construction paths.
pub const PHYS_TOL: f64 = 1e-9;

const SQRT_2_INV: f64 = std::f64::consts::FRAC_1_SQRT_2;

#[derive(Debug, Error)]
pub enum StateError {
    #[error("state vector norm {norm} differs from 1 beyond 1e-12")]
    NotNormalized { norm: f64 },
    #[error("matrix is not Hermitian: max |rho - rho^dag| = {dev:.3e} > tol {tol:.3e}")]
    NotHermitian { dev: f64, tol: f64 },
    #[error("trace {trace} differs from 1 by more than tol {tol:.3e}")]
    TraceNotOne { trace: f64, tol: f64 },
    #[error("matrix not positive semidefinite: min eigenvalue {min_eig:.3e} < -tol {tol:.3e}")]
    NotPositive { min_eig: f64, tol: f64 },
    #[error("probability parameter {p} outside [0, 1]")]
    BadProbability { p: f64 },
    #[error("basis order tag {found:?} does not match {BASIS_ORDER:?}")]
    BasisMismatch { found: String },
}

/// Normalized pure two-qubit state. Holds the alpha, beta amplitudes of the
/// source state alpha|HH> + beta|VV> as the special case with zero middle
/// components, but any unit 4-vector is allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct PureState {
    amps: Vector4<Complex64>,
}

impl PureState {
    pub fn new(amps: Vector4<Complex64>) -> Result<Self, StateError> {
        let norm = amps.norm();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(StateError::NotNormalized { norm });
        }
        Ok(Self { amps })
    }

    /// alpha|HH> + beta|VV>; renormalizes exactly, rejecting the zero vector.
    pub fn from_alpha_beta(alpha: Complex64, beta: Complex64) -> Result<Self, StateError> {
        let norm = (alpha.norm_sqr() + beta.norm_sqr()).sqrt();
        if norm == 0.0 {
            return Err(StateError::NotNormalized { norm: 0.0 });
        }
        let z = Complex64::new(0.0, 0.0);
        Ok(Self {
            amps: Vector4::new(alpha / norm, z, z, beta / norm),
        })
    }

    pub fn amplitudes(&self) -> &Vector4<Complex64> {
        &self.amps
    }

    /// Rank-1 density matrix |psi><psi|.
    pub fn density(&self) -> DensityMatrix {
        let m = self.amps * self.amps.adjoint();
        DensityMatrix { m }
    }

    pub fn overlap(&self, other: &PureState) -> Complex64 {
        self.amps.dotc(&other.amps)
    }
}

/// The four Bell states in the fixed basis order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BellKind {
    PhiPlus,
    PhiMinus,
    PsiPlus,
    PsiMinus,
}

impl BellKind {
    pub const ALL: [BellKind; 4] = [
        BellKind::PhiPlus,
        BellKind::PhiMinus,
        BellKind::PsiPlus,
        BellKind::PsiMinus,
    ];

    pub fn label(self) -> &'static str {
        match self {
            BellKind::PhiPlus => "phi_plus",
            BellKind::PhiMinus => "phi_minus",
            BellKind::PsiPlus => "psi_plus",
            BellKind::PsiMinus => "psi_minus",
        }
    }
}

pub fn bell_state(kind: BellKind) -> PureState {
    let r = Complex64::new(SQRT_2_INV, 0.0);
    let z = Complex64::new(0.0, 0.0);
    let amps = match kind {
        BellKind::PhiPlus => Vector4::new(r, z, z, r),
        BellKind::PhiMinus => Vector4::new(r, z, z, -r),
        BellKind::PsiPlus => Vector4::new(z, r, r, z),
        BellKind::PsiMinus => Vector4::new(z, r, -r, z),
    };
    PureState { amps }
}

/// Physical (Hermitian, unit-trace, PSD) 4x4 density matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: Matrix4<Complex64>,
}

impl DensityMatrix {
    /// Validates at the default tolerance and symmetrizes the stored matrix
    /// so later arithmetic sees an exactly Hermitian operand.
    pub fn new(m: Matrix4<Complex64>) -> Result<Self, StateError> {
        Self::new_with_tol(m, PHYS_TOL)
    }

    /// Reconstruction paths (finite-count tomography) may pass a looser
    /// tolerance explicitly; everything else should use `new`.
    pub fn new_with_tol(m: Matrix4<Complex64>, tol: f64) -> Result<Self, StateError> {
        let herm_dev = (m - m.adjoint()).camax();
        if herm_dev > tol {
            return Err(StateError::NotHermitian { dev: herm_dev, tol });
        }
        let m = (m + m.adjoint()).scale(0.5);
        let trace = m.trace().re;
        if (trace - 1.0).abs() > tol {
            return Err(StateError::TraceNotOne { trace, tol });
        }
        let min_eig = m
            .symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if min_eig < -tol {
            return Err(StateError::NotPositive { min_eig, tol });
        }
        Ok(Self { m })
    }

    pub fn matrix(&self) -> &Matrix4<Complex64> {
        &self.m
    }

    pub fn purity(&self) -> f64 {
        (self.m * self.m).trace().re
    }

    /// Eigenvalues sorted descending.
    pub fn eigenvalues(&self) -> [f64; 4] {
        let mut ev: Vec<f64> = self.m.symmetric_eigenvalues().iter().cloned().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        [ev[0], ev[1], ev[2], ev[3]]
    }
}

/// F = <phi|rho|phi>. This is the probability convention, not its square
/// root; targets are always pure.
pub fn fidelity(rho: &DensityMatrix, target: &PureState) -> f64 {
    let v = &target.amps;
    (v.adjoint() * rho.m * v)[(0, 0)].re.clamp(0.0, 1.0)
}

/// Maximum of <phi|rho|phi> over all pure phi = largest eigenvalue of rho.
pub fn max_pure_fidelity(rho: &DensityMatrix) -> f64 {
    rho.eigenvalues()[0].clamp(0.0, 1.0)
}

/// Wootters concurrence.
///
/// The textbook recipe takes square roots of the eigenvalues of the
/// non-Hermitian product rho * rho_tilde. We instead diagonalize the
/// Hermitian PSD matrix sqrt(rho) * rho_tilde * sqrt(rho), which has the
/// same spectrum and keeps the whole computation inside a symmetric
/// eigensolver (no complex Schur needed, no spurious imaginary parts).
pub fn concurrence(rho: &DensityMatrix) -> f64 {
    let tilde = spin_flip(&rho.m);
    let root = psd_sqrt(&rho.m);
    let m = root * tilde * root;
    let mut lam: Vec<f64> = m
        .symmetric_eigenvalues()
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .collect();
    lam.sort_by(|a, b| b.total_cmp(a));
    (lam[0] - lam[1] - lam[2] - lam[3]).max(0.0).min(1.0)
}

/// Maximal CHSH value over measurement settings (Horodecki criterion):
/// S = 2*sqrt(m1 + m2) with m1, m2 the two largest eigenvalues of T^t T,
/// T_ij = Tr[rho sigma_i x sigma_j].
pub fn chsh_max(rho: &DensityMatrix) -> f64 {
    let t = correlation_matrix(&rho.m);
    let tt = t.transpose() * t;
    let mut ev: Vec<f64> = tt.symmetric_eigenvalues().iter().cloned().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    2.0 * (ev[0] + ev[1]).max(0.0).sqrt()
}

/// p |PhiPlus><PhiPlus| + (1-p) I/4.
pub fn werner(p: f64) -> Result<DensityMatrix, StateError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(StateError::BadProbability { p });
    }
    let bell = bell_state(BellKind::PhiPlus).density();
    let m = bell.m.scale(p) + Matrix4::identity().scale((1.0 - p) / 4.0);
    Ok(DensityMatrix { m })
}

/// Summary of entanglement figures for one reconstructed or model state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntanglementReport {
    pub fidelity_to_target: f64,
    pub max_pure_fidelity: f64,
    pub concurrence: f64,
    pub chsh_s: f64,
    pub purity: f64,
}

impl EntanglementReport {
    pub fn new(rho: &DensityMatrix, target: &PureState) -> Self {
        Self {
            fidelity_to_target: fidelity(rho, target),
            max_pure_fidelity: max_pure_fidelity(rho),
            concurrence: concurrence(rho),
            chsh_s: chsh_max(rho),
            purity: rho.purity(),
        }
    }
}

fn pauli() -> [Matrix2<Complex64>; 3] {
    let z = Complex64::new(0.0, 0.0);
    let one = Complex64::new(1.0, 0.0);
    let i = Complex64::new(0.0, 1.0);
    [
        Matrix2::new(z, one, one, z),
        Matrix2::new(z, -i, i, z),
        Matrix2::new(one, z, z, -one),
    ]
}

fn correlation_matrix(m: &Matrix4<Complex64>) -> Matrix3<f64> {
    let s = pauli();
    Matrix3::from_fn(|i, j| (m * s[i].kronecker(&s[j])).trace().re)
}

/// (sigma_y x sigma_y) rho^* (sigma_y x sigma_y).
fn spin_flip(m: &Matrix4<Complex64>) -> Matrix4<Complex64> {
    let sy = pauli()[1];
    let syy = sy.kronecker(&sy);
    syy * m.conjugate() * syy
}

/// Hermitian PSD square root via symmetric eigendecomposition, with small
/// negative eigenvalues (fp noise) clamped to zero.
fn psd_sqrt(m: &Matrix4<Complex64>) -> Matrix4<Complex64> {
    let eig = m.symmetric_eigen();
    let mut out = Matrix4::zeros();
    for k in 0..4 {
        let lam = eig.eigenvalues[k].max(0.0).sqrt();
        let v = eig.eigenvectors.column(k);
        out += (v * v.adjoint()).scale(lam);
    }
    out
}

// JSON form: {"basis_order": "HH,HV,VH,VV", "matrix": 4x4 of [re, im]}.
#[derive(Serialize, Deserialize)]
struct DmJson {
    basis_order: String,
    matrix: [[[f64; 2]; 4]; 4],
}

impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        let mut matrix = [[[0.0; 2]; 4]; 4];
        for r in 0..4 {
            for c in 0..4 {
                matrix[r][c] = [self.m[(r, c)].re, self.m[(r, c)].im];
            }
        }
        DmJson {
            basis_order: BASIS_ORDER.to_string(),
            matrix,
        }
        .serialize(ser)
    }
}

impl<'de> Deserialize<'de> for DensityMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let raw = DmJson::deserialize(de)?;
        if raw.basis_order != BASIS_ORDER {
            return Err(serde::de::Error::custom(StateError::BasisMismatch {
                found: raw.basis_order,
            }));
        }
        let m = Matrix4::from_fn(|r, c| Complex64::new(raw.matrix[r][c][0], raw.matrix[r][c][1]));
        // Serialized matrices come from reconstruction output, so accept the
        // looser tolerance reconstruction itself is allowed to use.
        DensityMatrix::new_with_tol(m, 1e-7).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn bell_states_are_normalized_and_orthogonal() {
        for a in BellKind::ALL {
            for b in BellKind::ALL {
                let ov = bell_state(a).overlap(&bell_state(b)).norm();
                let want = if a == b { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(ov, want, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn bell_state_components_match_definitions() {
        let phi = bell_state(BellKind::PhiPlus);
        assert_abs_diff_eq!(phi.amplitudes()[0].re, SQRT_2_INV, epsilon = 1e-15);
        assert_abs_diff_eq!(phi.amplitudes()[3].re, SQRT_2_INV, epsilon = 1e-15);
        let psi = bell_state(BellKind::PsiMinus);
        assert_abs_diff_eq!(psi.amplitudes()[1].re, SQRT_2_INV, epsilon = 1e-15);
        assert_abs_diff_eq!(psi.amplitudes()[2].re, -SQRT_2_INV, epsilon = 1e-15);
        let phim = bell_state(BellKind::PhiMinus);
        assert_abs_diff_eq!(phim.amplitudes()[3].re, -SQRT_2_INV, epsilon = 1e-15);
    }

    #[test]
    fn fidelity_identity_and_mixed() {
        let phi = bell_state(BellKind::PhiPlus);
        assert_abs_diff_eq!(fidelity(&phi.density(), &phi), 1.0, epsilon = 1e-12);
        let mixed = werner(0.0).unwrap();
        for kind in BellKind::ALL {
            assert_abs_diff_eq!(fidelity(&mixed, &bell_state(kind)), 0.25, epsilon = 1e-12);
        }
    }

    #[test]
    fn werner_closed_forms() {
        // Eigenvalues (1+3p)/4 and (1-p)/4 x3; fidelity p + (1-p)/4;
        // C = max(0, (3p-1)/2); S = 2 sqrt(2) p.
        let phi = bell_state(BellKind::PhiPlus);
        for &p in &[0.0, 0.25, 0.5, 0.8, 0.9, 0.95, 1.0] {
            let w = werner(p).unwrap();
            assert_abs_diff_eq!(fidelity(&w, &phi), p + (1.0 - p) / 4.0, epsilon = 1e-12);
            assert_abs_diff_eq!(max_pure_fidelity(&w), (1.0 + 3.0 * p) / 4.0, epsilon = 1e-10);
            assert_abs_diff_eq!(
                concurrence(&w),
                ((3.0 * p - 1.0) / 2.0).max(0.0),
                epsilon = 1e-8
            );
            assert_abs_diff_eq!(
                chsh_max(&w),
                2.0 * std::f64::consts::SQRT_2 * p,
                epsilon = 1e-8
            );
        }
        let w = werner(0.5).unwrap();
        assert_abs_diff_eq!(w.eigenvalues()[3], 0.125, epsilon = 1e-12);
        assert!(werner(1.2).is_err());
        assert!(werner(-0.1).is_err());
    }

    #[test]
    fn bell_metrics_saturate() {
        for kind in BellKind::ALL {
            let rho = bell_state(kind).density();
            assert_abs_diff_eq!(concurrence(&rho), 1.0, epsilon = 1e-8);
            assert_abs_diff_eq!(
                chsh_max(&rho),
                2.0 * std::f64::consts::SQRT_2,
                epsilon = 1e-8
            );
            assert_abs_diff_eq!(rho.purity(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn high_concurrence_asymmetric_state() {
        // rho = l1 |PhiPlus><PhiPlus| + l2 |e2><e2| with e2 built from the
        // magic-basis pair (i|PhiMinus>, i|PsiPlus>) at relative phase phi,
        // cos(phi) = (l1 - C)/l2. Gives max_pure_fidelity = l1 = 0.961 and
        // concurrence = l1 - l2 cos(phi) = 0.930 exactly. Frozen against an
        // independent Wootters implementation.
        let rho = high_c_state();
        assert_abs_diff_eq!(max_pure_fidelity(&rho), 0.961, epsilon = 1e-9);
        assert_abs_diff_eq!(concurrence(&rho), 0.930, epsilon = 1e-7);
        assert_abs_diff_eq!(chsh_max(&rho), 2.719532, epsilon = 1e-5);
    }

    pub(crate) fn high_c_state() -> DensityMatrix {
        let (l1, l2, c_target) = (0.961f64, 0.039f64, 0.930f64);
        let phase = ((l1 - c_target) / l2).acos();
        let i = c(0.0, 1.0);
        let m2 = bell_state(BellKind::PhiMinus).amps.map(|a| i * a);
        let m3 = bell_state(BellKind::PsiPlus).amps.map(|a| i * a);
        let e2 = (m2 + m3.map(|a| a * Complex64::from_polar(1.0, phase))).scale(SQRT_2_INV);
        let phi = bell_state(BellKind::PhiPlus).amps;
        let m = (phi * phi.adjoint()).scale(l1) + (e2 * e2.adjoint()).scale(l2);
        DensityMatrix::new(m).unwrap()
    }

    #[test]
    fn rejects_unphysical_matrices() {
        let mut m = Matrix4::<Complex64>::identity().scale(0.25);
        m[(0, 1)] = c(0.0, 0.4);
        // Hermitian completion missing: not Hermitian.
        assert!(matches!(
            DensityMatrix::new(m),
            Err(StateError::NotHermitian { .. })
        ));

        let m = Matrix4::<Complex64>::identity().scale(0.3);
        assert!(matches!(
            DensityMatrix::new(m),
            Err(StateError::TraceNotOne { .. })
        ));

        let mut m = Matrix4::<Complex64>::zeros();
        m[(0, 0)] = c(1.2, 0.0);
        m[(1, 1)] = c(-0.2, 0.0);
        assert!(matches!(
            DensityMatrix::new(m),
            Err(StateError::NotPositive { .. })
        ));
    }

    #[test]
    fn pure_state_normalization_enforced() {
        let v = Vector4::new(c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0));
        assert!(PureState::new(v).is_err());
        let s = PureState::from_alpha_beta(c(1.0, 0.0), c(1.0, 0.0)).unwrap();
        assert_abs_diff_eq!(s.amplitudes().norm(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.amplitudes()[0].re, SQRT_2_INV, epsilon = 1e-15);
    }

    #[test]
    fn json_round_trip_preserves_matrix() {
        let rho = werner(0.73).unwrap();
        let text = serde_json::to_string(&rho).unwrap();
        assert!(text.contains("HH,HV,VH,VV"));
        let back: DensityMatrix = serde_json::from_str(&text).unwrap();
        assert!((rho.matrix() - back.matrix()).camax() < 1e-15);

        let bad = text.replace("HH,HV,VH,VV", "HH,VH,HV,VV");
        assert!(serde_json::from_str::<DensityMatrix>(&bad).is_err());
    }

    #[test]
    fn report_fields_consistent() {
        let rho = werner(0.9).unwrap();
        let rep = EntanglementReport::new(&rho, &bell_state(BellKind::PhiPlus));
        assert_abs_diff_eq!(rep.fidelity_to_target, 0.925, epsilon = 1e-12);
        assert_abs_diff_eq!(rep.max_pure_fidelity, 0.925, epsilon = 1e-10);
        assert_abs_diff_eq!(rep.concurrence, 0.85, epsilon = 1e-8);
        assert_abs_diff_eq!(rep.chsh_s, 2.0 * std::f64::consts::SQRT_2 * 0.9, epsilon = 1e-8);
        assert!(rep.purity <= 1.0 + 1e-12 && rep.purity >= 0.25 - 1e-12);
    }
}
