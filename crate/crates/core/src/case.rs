//! Classical multi-machine model on a reduced network.
//!
//! Each generator is a constant EMF behind its transient reactance; loads are
//! absorbed into the reduced admittance matrix `Y = |Y| ∠ φ`. The module
//! parses case files, evaluates electrical power and its angle Jacobian,
//! finds the operating point and produces the analytic linearization that
//! serves as ground truth for the estimator.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::swing_state_matrix;

const SYMMETRY_TOL: f64 = 1e-12;
const EQUILIBRIUM_TOL: f64 = 1e-9;
const EQUILIBRIUM_MAX_ITER: usize = 50;

/// The physical test system.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerCase {
    pub n: usize,
    /// `M_i = 2 H_i / ω_S`, pu·s²/rad.
    pub inertia: Vec<f64>,
    /// `D_i`, pu·s/rad.
    pub damping: Vec<f64>,
    pub emf: Vec<f64>,
    pub mech_power: Vec<f64>,
    pub y_mag: DMatrix<f64>,
    pub y_ang: DMatrix<f64>,
    /// Load-fluctuation intensities `σ_i`.
    pub sigma: Vec<f64>,
    /// Synchronous speed, rad/s.
    pub omega_s: f64,
}

/// On-disk layout of a case file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseFile {
    n: usize,
    #[serde(rename = "M")]
    inertia: Vec<f64>,
    #[serde(rename = "D")]
    damping: Vec<f64>,
    #[serde(rename = "E")]
    emf: Vec<f64>,
    #[serde(rename = "Pm")]
    mech_power: Vec<f64>,
    sigma: Vec<f64>,
    omega_s: f64,
    #[serde(rename = "Y_mag")]
    y_mag: Vec<Vec<f64>>,
    #[serde(rename = "Y_ang_rad")]
    y_ang: Vec<Vec<f64>>,
}

fn matrix_field(field: &str, rows: &[Vec<f64>], n: usize) -> Result<DMatrix<f64>> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(Error::Parse {
            field: field.to_string(),
            message: format!("expected a {n}x{n} array of rows"),
        });
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn vector_field(field: &str, v: Vec<f64>, n: usize) -> Result<Vec<f64>> {
    if v.len() != n {
        return Err(Error::Parse {
            field: field.to_string(),
            message: format!("expected {n} entries, found {}", v.len()),
        });
    }
    Ok(v)
}

/// Extracts the offending key from a TOML deserialization error, if any.
fn toml_field(err: &toml::de::Error) -> String {
    let msg = err.message();
    if let Some(start) = msg.find('`') {
        if let Some(len) = msg[start + 1..].find('`') {
            return msg[start + 1..start + 1 + len].to_string();
        }
    }
    "case".to_string()
}

/// Parses and validates case-file content.
pub fn load_case(source: &str) -> Result<PowerCase> {
    let raw: CaseFile = toml::from_str(source).map_err(|e| Error::Parse {
        field: toml_field(&e),
        message: e.message().to_string(),
    })?;
    let n = raw.n;
    let case = PowerCase {
        n,
        inertia: vector_field("M", raw.inertia, n)?,
        damping: vector_field("D", raw.damping, n)?,
        emf: vector_field("E", raw.emf, n)?,
        mech_power: vector_field("Pm", raw.mech_power, n)?,
        sigma: vector_field("sigma", raw.sigma, n)?,
        y_mag: matrix_field("Y_mag", &raw.y_mag, n)?,
        y_ang: matrix_field("Y_ang_rad", &raw.y_ang, n)?,
        omega_s: raw.omega_s,
    };
    case.validate()?;
    Ok(case)
}

pub fn load_case_file(path: &Path) -> Result<PowerCase> {
    let text = std::fs::read_to_string(path)?;
    load_case(&text)
}

impl PowerCase {
    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n < 2 {
            return Err(Error::Validation(format!("need at least 2 generators, found {n}")));
        }
        let all = self
            .inertia
            .iter()
            .chain(&self.damping)
            .chain(&self.emf)
            .chain(&self.mech_power)
            .chain(&self.sigma)
            .chain(self.y_mag.iter())
            .chain(self.y_ang.iter());
        if all.clone().any(|v| !v.is_finite()) || !self.omega_s.is_finite() {
            return Err(Error::Validation("case contains non-finite values".into()));
        }
        for i in 0..n {
            if self.inertia[i] <= 0.0 {
                return Err(Error::Validation(format!("M[{}] must be positive", i + 1)));
            }
            if self.damping[i] < 0.0 {
                return Err(Error::Validation(format!("D[{}] must be non-negative", i + 1)));
            }
            if self.emf[i] <= 0.0 {
                return Err(Error::Validation(format!("E[{}] must be positive", i + 1)));
            }
            if self.sigma[i] < 0.0 {
                return Err(Error::Validation(format!("sigma[{}] must be non-negative", i + 1)));
            }
        }
        if self.omega_s <= 0.0 {
            return Err(Error::Validation("omega_s must be positive".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let (ym, ya) = (self.y_mag[(i, j)], self.y_ang[(i, j)]);
                let (ym_t, ya_t) = (self.y_mag[(j, i)], self.y_ang[(j, i)]);
                let scale = 1.0_f64.max(ym.abs());
                if (ym - ym_t).abs() > SYMMETRY_TOL * scale || (ya - ya_t).abs() > SYMMETRY_TOL {
                    return Err(Error::Validation(format!(
                        "reduced admittance is not reciprocal at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if self.y_mag.iter().any(|v| *v < 0.0) {
            return Err(Error::Validation("admittance magnitudes must be non-negative".into()));
        }
        Ok(())
    }

    /// Self-conductance `G_ii = Y_ii cos φ_ii`.
    pub fn self_conductance(&self, i: usize) -> f64 {
        self.y_mag[(i, i)] * self.y_ang[(i, i)].cos()
    }

    /// Per-generator noise gain `E_i² G_ii σ_i` in the swing equation.
    pub fn noise_gain(&self) -> Vec<f64> {
        (0..self.n)
            .map(|i| self.emf[i] * self.emf[i] * self.self_conductance(i) * self.sigma[i])
            .collect()
    }

    pub fn with_sigma(&self, sigma: f64) -> PowerCase {
        PowerCase {
            sigma: vec![sigma; self.n],
            ..self.clone()
        }
    }

    pub fn total_inertia(&self) -> f64 {
        self.inertia.iter().sum()
    }
}

/// Steady-state operating point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub delta_star: Vec<f64>,
    /// Max-norm of the slack-adjusted power mismatch, pu.
    pub residual_norm: f64,
    /// Total mismatch `Σ(P_m − P_e)` absorbed by inertia-proportional slack, pu.
    pub slack: f64,
    pub converged: bool,
}

impl OperatingPoint {
    /// Mechanical power with the slack share removed, i.e. what balances `P_e(δ*)`.
    pub fn balanced_mech_power(&self, case: &PowerCase) -> Vec<f64> {
        let total = case.total_inertia();
        (0..case.n)
            .map(|i| case.mech_power[i] - self.slack * case.inertia[i] / total)
            .collect()
    }

    /// Full equilibrium state `[δ*, 0]`.
    pub fn state(&self) -> Vec<f64> {
        let n = self.delta_star.len();
        let mut x = self.delta_star.clone();
        x.extend(std::iter::repeat_n(0.0, n));
        x
    }
}

/// Analytic linearization at the operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// `∂P_e/∂δ` at `δ*`.
    pub jacobian: DMatrix<f64>,
}

/// `P_e_i = E_i Σ_j E_j Y_ij cos(δ_i − δ_j − φ_ij)`.
pub fn electrical_power(case: &PowerCase, delta: &[f64]) -> Result<DVector<f64>> {
    check_len("rotor angle vector", case.n, delta.len())?;
    let n = case.n;
    Ok(DVector::from_fn(n, |i, _| {
        let mut acc = 0.0;
        for j in 0..n {
            acc += case.emf[j] * case.y_mag[(i, j)] * (delta[i] - delta[j] - case.y_ang[(i, j)]).cos();
        }
        case.emf[i] * acc
    }))
}

/// `∂P_e/∂δ`; rows sum to zero.
pub fn analytic_jacobian(case: &PowerCase, delta: &[f64]) -> Result<DMatrix<f64>> {
    check_len("rotor angle vector", case.n, delta.len())?;
    let n = case.n;
    let mut jac = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut diag = 0.0;
        for j in 0..n {
            if i == j {
                continue;
            }
            let v = case.emf[i]
                * case.emf[j]
                * case.y_mag[(i, j)]
                * (delta[i] - delta[j] - case.y_ang[(i, j)]).sin();
            jac[(i, j)] = v;
            diag -= v;
        }
        jac[(i, i)] = diag;
    }
    Ok(jac)
}

/// Newton iteration for the operating point.
///
/// Unknowns are `δ_2..δ_n` (with `δ_1` pinned to its initial value) and a
/// scalar slack `s` that is shared in proportion to inertia, so the `n`
/// equations `P_m − P_e(δ) − s·M/ΣM = 0` are square.
pub fn solve_equilibrium(case: &PowerCase, initial_guess: &[f64]) -> Result<OperatingPoint> {
    check_len("initial guess", case.n, initial_guess.len())?;
    let n = case.n;
    let total = case.total_inertia();
    let share: Vec<f64> = case.inertia.iter().map(|m| m / total).collect();
    let mut delta = initial_guess.to_vec();
    let mut slack = 0.0;

    let mismatch = |delta: &[f64], slack: f64| -> Result<DVector<f64>> {
        let pe = electrical_power(case, delta)?;
        Ok(DVector::from_fn(n, |i, _| {
            case.mech_power[i] - pe[i] - slack * share[i]
        }))
    };

    let mut residual = f64::INFINITY;
    for _ in 0..=EQUILIBRIUM_MAX_ITER {
        let g = mismatch(&delta, slack)?;
        residual = g.amax();
        if !residual.is_finite() {
            break;
        }
        if residual <= EQUILIBRIUM_TOL {
            return Ok(OperatingPoint {
                delta_star: delta,
                residual_norm: residual,
                slack,
                converged: true,
            });
        }
        let jac = analytic_jacobian(case, &delta)?;
        // columns: δ_2..δ_n, then s
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 1..n {
                h[(i, j - 1)] = -jac[(i, j)];
            }
            h[(i, n - 1)] = -share[i];
        }
        let Some(step) = h.lu().solve(&(-&g)) else {
            break;
        };
        for j in 1..n {
            delta[j] += step[j - 1];
        }
        slack += step[n - 1];
    }
    Err(Error::Equilibrium {
        iterations: EQUILIBRIUM_MAX_ITER,
        residual,
    })
}

/// Analytic `A`, `B` and `∂P_e/∂δ` at a converged operating point.
pub fn build_ground_truth(case: &PowerCase, op: &OperatingPoint) -> Result<GroundTruthModel> {
    if !op.converged {
        return Err(Error::Validation("operating point has not converged".into()));
    }
    let n = case.n;
    let jacobian = analytic_jacobian(case, &op.delta_star)?;
    let a = swing_state_matrix(&jacobian, &case.inertia, &case.damping);
    let gain = case.noise_gain();
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        b[(n + i, i)] = -gain[i] / case.inertia[i];
    }
    Ok(GroundTruthModel { a, b, jacobian })
}


#[cfg(test)]
mod tests {
    use super::fixtures::two_machine_lossless;
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    const TWO_MACHINE: &str = r#"
n = 2
M = [0.1, 0.1]
D = [0.0, 0.0]
E = [1.0, 1.0]
Pm = [0.0, 0.0]
sigma = [0.0, 0.0]
omega_s = 376.99111843077515
Y_mag = [[0.0, 1.0], [1.0, 0.0]]
Y_ang_rad = [[0.0, 1.5707963267948966], [1.5707963267948966, 0.0]]
"#;

    #[test]
    fn loads_minimal_case() {
        let case = load_case(TWO_MACHINE).unwrap();
        assert_eq!(case.n, 2);
        assert_eq!(case.inertia, vec![0.1, 0.1]);
    }

    #[test]
    fn rejects_asymmetric_admittance() {
        let src = TWO_MACHINE.replace("[[0.0, 1.0], [1.0, 0.0]]", "[[0.0, 1.0], [1.1, 0.0]]");
        assert!(matches!(load_case(&src), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_nonpositive_inertia() {
        let src = TWO_MACHINE.replace("M = [0.1, 0.1]", "M = [0.1, 0.0]");
        let err = load_case(&src).unwrap_err();
        assert!(err.to_string().contains("M[2]"), "{err}");
    }

    #[test]
    fn parse_error_names_missing_field() {
        let src = TWO_MACHINE.replace("omega_s = 376.99111843077515\n", "");
        match load_case(&src) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "omega_s"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_names_short_vector() {
        let src = TWO_MACHINE.replace("E = [1.0, 1.0]", "E = [1.0]");
        match load_case(&src) {
            Err(Error::Parse { field, .. }) => assert_eq!(field, "E"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn lossless_line_power() {
        let case = two_machine_lossless([0.0, 0.0]);
        let pe = electrical_power(&case, &[0.0, 0.0]).unwrap();
        assert!(pe.amax() < 1e-15);
        let pe = electrical_power(&case, &[FRAC_PI_2, 0.0]).unwrap();
        assert!((pe[0] - 1.0).abs() < 1e-15);
        assert!((pe[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn power_rejects_wrong_length() {
        let case = two_machine_lossless([0.0, 0.0]);
        assert!(matches!(
            electrical_power(&case, &[0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lossless_jacobian_at_zero_angles() {
        let case = two_machine_lossless([0.0, 0.0]);
        let j = analytic_jacobian(&case, &[0.0, 0.0]).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert!((j - expected).amax() < 1e-15);
    }

    #[test]
    fn single_line_equilibrium_matches_arcsin() {
        let case = two_machine_lossless([0.5, -0.5]);
        let op = solve_equilibrium(&case, &[0.0, 0.0]).unwrap();
        assert!(op.converged);
        let diff = op.delta_star[0] - op.delta_star[1];
        // bisection on sin(x) = 0.5 over [0, π/2] as an independent check
        let (mut lo, mut hi) = (0.0_f64, FRAC_PI_2);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid.sin() < 0.5 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((diff - lo).abs() < 1e-9, "{diff} vs {lo}");
        assert!((diff - 0.5_f64.asin()).abs() < 1e-9);
        assert_eq!(op.delta_star[0], 0.0);
        assert!(op.residual_norm <= 1e-9);
    }

    #[test]
    fn zero_flow_keeps_initial_guess() {
        let case = two_machine_lossless([0.0, 0.0]);
        let op = solve_equilibrium(&case, &[0.3, 0.3]).unwrap();
        assert_eq!(op.delta_star, vec![0.3, 0.3]);
        assert!(op.residual_norm <= 1e-15);
    }

    #[test]
    fn infeasible_transfer_fails() {
        let case = two_machine_lossless([2.0, -2.0]);
        assert!(matches!(
            solve_equilibrium(&case, &[0.0, 0.0]),
            Err(Error::Equilibrium { .. })
        ));
    }

    #[test]
    fn ground_truth_block_structure() {
        let mut case = two_machine_lossless([0.5, -0.5]);
        case.damping = vec![0.02, 0.03];
        let op = solve_equilibrium(&case, &[0.0, 0.0]).unwrap();
        let gt = build_ground_truth(&case, &op).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(gt.a[(i, j)], 0.0);
                assert_eq!(gt.a[(i, 2 + j)], if i == j { 1.0 } else { 0.0 });
            }
        }
        // σ = 0 on both machines
        assert!(gt.b.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_machine_frequency_matches_characteristic_polynomial() {
        let case = two_machine_lossless([0.5, -0.5]);
        let op = solve_equilibrium(&case, &[0.0, 0.0]).unwrap();
        let gt = build_ground_truth(&case, &op).unwrap();
        let j11 = gt.jacobian[(0, 0)];
        let expected_hz = (j11 * (1.0 / 0.1 + 1.0 / 0.1)).sqrt() / (2.0 * std::f64::consts::PI);
        let eigs = gt.a.complex_eigenvalues();
        let f_max = eigs.iter().map(|l| l.im.abs()).fold(0.0, f64::max) / (2.0 * std::f64::consts::PI);
        assert!((f_max - expected_hz).abs() < 1e-9 * expected_hz);
        // undamped: oscillatory pair on the imaginary axis
        assert!(eigs.iter().all(|l| l.re.abs() < 1e-9));
    }
}
