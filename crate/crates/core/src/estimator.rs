//! State-matrix estimation from ambient measurements.
//!
//! For the stationary swing OU process the (2,1) block of the Lyapunov equation
//! gives `J C_δδ = M C_ωω − D C_ωδ`. Because `J·1 = 0`, referencing the angles
//! to their mean (`P = I − 11ᵀ/n`) loses nothing, and
//! `J = (M C_ωω − D C_ωδ) pinv(P C_δδ P)` holds exactly for any damping profile.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{centering_projector, checked_svd, swing_state_matrix, truncated_pinv, MatrixData, PinvInfo};
use crate::modal::decompose;
use crate::pmu::PmuWindow;

/// Default relative truncation of the angle-covariance pseudo-inverse.
pub const DEFAULT_RTOL: f64 = 1e-8;
/// Angle covariance with a largest singular value below this is degenerate.
pub const DEGENERATE_SIGMA: f64 = 1e-14;
/// Real parts below this magnitude mark the translational (null) modes.
pub const NULL_MODE_TOL: f64 = 1e-9;
/// Required relative residual of the projected Lyapunov solve.
pub const LYAPUNOV_RESIDUAL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Detrend {
    /// Samples are taken as deviations; nothing is removed.
    None,
    /// Per-channel means removed.
    #[default]
    Mean,
    /// Inertia-weighted angle and speed averages removed per sample, then channel means.
    Coi,
}

impl FromStr for Detrend {
    type Err = Error;
    fn from_str(s: &str) -> Result<Detrend> {
        match s {
            "none" => Ok(Detrend::None),
            "mean" => Ok(Detrend::Mean),
            "coi" => Ok(Detrend::Coi),
            other => Err(Error::Config(format!(
                "unknown detrend mode `{other}` (expected none, mean or coi)"
            ))),
        }
    }
}

impl std::fmt::Display for Detrend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Detrend::None => "none",
            Detrend::Mean => "mean",
            Detrend::Coi => "coi",
        })
    }
}

/// Angle/speed covariance blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlocks {
    pub dd: DMatrix<f64>,
    pub dw: DMatrix<f64>,
    pub wd: DMatrix<f64>,
    pub ww: DMatrix<f64>,
    /// Zero for the theoretical covariance.
    pub samples: usize,
    pub means: Vec<f64>,
    pub detrend: Detrend,
}

impl CovarianceBlocks {
    pub fn generators(&self) -> usize {
        self.dd.nrows()
    }

    pub fn from_full(c: &DMatrix<f64>, samples: usize, means: Vec<f64>, detrend: Detrend) -> CovarianceBlocks {
        let n = c.nrows() / 2;
        let sym = (c + c.transpose()) * 0.5;
        let dw = sym.view((0, n), (n, n)).into_owned();
        CovarianceBlocks {
            dd: sym.view((0, 0), (n, n)).into_owned(),
            wd: dw.transpose(),
            dw,
            ww: sym.view((n, n), (n, n)).into_owned(),
            samples,
            means,
            detrend,
        }
    }

    pub fn full(&self) -> DMatrix<f64> {
        let n = self.generators();
        let mut c = DMatrix::zeros(2 * n, 2 * n);
        c.view_mut((0, 0), (n, n)).copy_from(&self.dd);
        c.view_mut((0, n), (n, n)).copy_from(&self.dw);
        c.view_mut((n, 0), (n, n)).copy_from(&self.wd);
        c.view_mut((n, n), (n, n)).copy_from(&self.ww);
        c
    }

    /// Covariance of `T y` given the covariance of `y`.
    pub fn reframe(&self, t: &DMatrix<f64>, detrend: Detrend) -> Result<CovarianceBlocks> {
        check_len("reframe matrix", 2 * self.generators(), t.nrows())?;
        let c = t * self.full() * t.transpose();
        let means = (t * DVector::from_column_slice(&self.means)).iter().copied().collect();
        Ok(CovarianceBlocks::from_full(&c, self.samples, means, detrend))
    }
}

/// Linear map removing inertia-weighted averages from angles and speeds.
pub fn coi_transform(inertia: &[f64]) -> DMatrix<f64> {
    let n = inertia.len();
    let total: f64 = inertia.iter().sum();
    let block = DMatrix::from_fn(n, n, |i, j| (if i == j { 1.0 } else { 0.0 }) - inertia[j] / total);
    let mut t = DMatrix::zeros(2 * n, 2 * n);
    t.view_mut((0, 0), (n, n)).copy_from(&block);
    t.view_mut((n, n), (n, n)).copy_from(&block);
    t
}

/// Unbiased (1/(N−1)) sample covariance of a measurement window.
pub fn sample_covariance(window: &PmuWindow, detrend: Detrend, inertia: &[f64]) -> Result<CovarianceBlocks> {
    let n = window.n;
    let rows = window.len();
    if rows < 2 {
        return Err(Error::InsufficientData { samples: rows });
    }
    if detrend == Detrend::Coi {
        check_len("inertia", n, inertia.len())?;
    }
    let w = 2 * n;
    let mut x = DMatrix::from_row_slice(rows, w, &window.samples);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("measurement window".into()));
    }
    let raw_means: Vec<f64> = (0..w).map(|c| x.column(c).mean()).collect();
    if detrend == Detrend::Coi {
        let total: f64 = inertia.iter().sum();
        for mut row in x.row_iter_mut() {
            let coi_d: f64 = (0..n).map(|i| inertia[i] * row[i]).sum::<f64>() / total;
            let coi_w: f64 = (0..n).map(|i| inertia[i] * row[n + i]).sum::<f64>() / total;
            for i in 0..n {
                row[i] -= coi_d;
                row[n + i] -= coi_w;
            }
        }
    }
    if detrend != Detrend::None {
        for c in 0..w {
            let m = x.column(c).mean();
            x.column_mut(c).add_scalar_mut(-m);
        }
    }
    let c = x.tr_mul(&x) / (rows - 1) as f64;
    Ok(CovarianceBlocks::from_full(&c, rows, raw_means, detrend))
}

/// Stationary covariance of `dx = A x dt + B dW` on the stable invariant subspace.
///
/// Null modes (`|Re λ| < 1e-9`) are projected out along their spectral
/// projector, the reduced Lyapunov equation is solved through its Kronecker
/// form, and the solution is lifted back.
pub fn theoretical_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<CovarianceBlocks> {
    let dim = a.nrows();
    check_len("state matrix columns", dim, a.ncols())?;
    check_len("noise matrix rows", dim, b.nrows())?;
    let dec = decompose(a)?;
    let unstable: Vec<_> = dec
        .eigenvalues
        .iter()
        .copied()
        .filter(|l| l.re > NULL_MODE_TOL || (l.re.abs() < NULL_MODE_TOL && l.im.abs() > NULL_MODE_TOL))
        .collect();
    if !unstable.is_empty() {
        return Err(Error::Unstable { eigenvalues: unstable });
    }
    let null_count = dec.eigenvalues.iter().filter(|l| l.re.abs() < NULL_MODE_TOL).count();
    let rank = dim - null_count;
    // null vectors straight from the SVD of A are more accurate than eigenvectors
    let svd = checked_svd(a)?;
    let (u, v_t) = (&svd.u, &svd.v_t);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
    let null = &order[..null_count];
    let right = DMatrix::from_fn(dim, null_count, |r, c| v_t[(null[c], r)]);
    let left = DMatrix::from_fn(dim, null_count, |r, c| u[(r, null[c])]);
    let proj = if null_count == 0 {
        DMatrix::identity(dim, dim)
    } else {
        let coupling = (left.transpose() * &right)
            .try_inverse()
            .ok_or_else(|| Error::Numerical("null mode is not semisimple".into()))?;
        DMatrix::identity(dim, dim) - &right * coupling * left.transpose()
    };
    // the range of `proj` is the orthogonal complement of the left null space
    let eig = (&left * left.transpose()).symmetric_eigen();
    let mut by_size: Vec<usize> = (0..dim).collect();
    by_size.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let v = DMatrix::from_fn(dim, rank, |r, c| eig.eigenvectors[(r, by_size[c])]);
    let a_r = v.transpose() * a * &v;
    let pb = &proj * b;
    let n_r = v.transpose() * &pb * pb.transpose() * &v;
    let x = solve_lyapunov_kronecker(&a_r, &n_r)?;
    let c = &v * x * v.transpose();
    let c = (&c + c.transpose()) * 0.5;
    let noise = &pb * pb.transpose();
    let residual = (a * &c + &c * a.transpose() + &noise).norm() / noise.norm().max(f64::MIN_POSITIVE);
    if noise.norm() > 0.0 && !(residual < LYAPUNOV_RESIDUAL_TOL) {
        return Err(Error::Numerical(format!("lifted Lyapunov residual {residual:.3e}")));
    }
    Ok(CovarianceBlocks::from_full(&c, 0, vec![0.0; dim], Detrend::None))
}

/// Solves `A X + X Aᵀ = −N` by vectorization; checks the relative residual.
pub fn solve_lyapunov_kronecker(a: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = a.nrows();
    let nn = n.norm();
    if nn == 0.0 {
        return Ok(DMatrix::zeros(m, m));
    }
    // column-major vec: vec(AX) = (I⊗A) vec X, vec(XAᵀ) = (A⊗I) vec X
    let eye = DMatrix::<f64>::identity(m, m);
    let op = eye.kronecker(a) + a.kronecker(&eye);
    let rhs = DVector::from_column_slice((-n).as_slice());
    let sol = op
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("Lyapunov operator is singular".into()))?;
    let x = DMatrix::from_column_slice(m, m, sol.as_slice());
    let residual = (a * &x + &x * a.transpose() + n).norm() / nn;
    if !(residual < LYAPUNOV_RESIDUAL_TOL) {
        return Err(Error::Numerical(format!("Lyapunov residual {residual:.3e}")));
    }
    Ok(x)
}

/// Estimated synchronizing matrix and pseudo-inverse conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEstimate {
    pub jacobian: DMatrix<f64>,
    pub conditioning: PinvInfo,
}

/// `Ĵ = (M Q_ωω − D Q_ωδ) pinv(P Q_δδ P)` with mean-referenced angles.
pub fn estimate_jacobian(cov: &CovarianceBlocks, inertia: &[f64], damping: &[f64], rtol: f64) -> Result<JacobianEstimate> {
    let n = cov.generators();
    check_len("inertia", n, inertia.len())?;
    check_len("damping", n, damping.len())?;
    for (what, m) in [("dw", &cov.dw), ("wd", &cov.wd), ("ww", &cov.ww)] {
        if m.nrows() != n || m.ncols() != n {
            return Err(Error::Validation(format!("covariance block {what} is not {n}x{n}")));
        }
    }
    if !(rtol > 0.0 && rtol < 1.0) {
        return Err(Error::Config(format!("truncation rtol must be in (0, 1), got {rtol}")));
    }
    let p = centering_projector(n);
    let referenced = &p * &cov.dd * &p;
    let (pinv, info) = truncated_pinv(&referenced, rtol)?;
    if !(info.sigma_max >= DEGENERATE_SIGMA) {
        return Err(Error::DegenerateWindow { sigma_max: info.sigma_max });
    }
    let mut rhs = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            rhs[(i, j)] = inertia[i] * cov.ww[(i, j)] - damping[i] * cov.wd[(i, j)];
        }
    }
    let jacobian = rhs * pinv;
    if jacobian.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("estimated Jacobian".into()));
    }
    Ok(JacobianEstimate {
        jacobian,
        conditioning: info,
    })
}

/// Description of the data an estimate came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowMeta {
    pub samples: usize,
    /// Hz; zero for the exact-covariance path.
    pub sample_rate: f64,
    pub duration_s: f64,
    pub detrend: Detrend,
    pub rtol: f64,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedModel {
    pub jacobian: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub conditioning: PinvInfo,
    pub window: WindowMeta,
}

/// `Â = [[0, I], [−M⁻¹Ĵ, −M⁻¹D]]`.
pub fn assemble_state_matrix(
    estimate: &JacobianEstimate,
    inertia: &[f64],
    damping: &[f64],
    window: WindowMeta,
) -> Result<EstimatedModel> {
    let n = estimate.jacobian.nrows();
    check_len("jacobian columns", n, estimate.jacobian.ncols())?;
    check_len("inertia", n, inertia.len())?;
    check_len("damping", n, damping.len())?;
    Ok(EstimatedModel {
        a: swing_state_matrix(&estimate.jacobian, inertia, damping),
        jacobian: estimate.jacobian.clone(),
        inertia: inertia.to_vec(),
        damping: damping.to_vec(),
        conditioning: estimate.conditioning,
        window,
    })
}

/// Covariance, Jacobian and state matrix from one measurement window.
pub fn estimate_from_window(
    window: &PmuWindow,
    inertia: &[f64],
    damping: &[f64],
    detrend: Detrend,
    rtol: f64,
) -> Result<EstimatedModel> {
    check_len("generators in window", inertia.len(), window.n)?;
    let cov = sample_covariance(window, detrend, inertia)?;
    let est = estimate_jacobian(&cov, inertia, damping, rtol)?;
    let meta = WindowMeta {
        samples: window.len(),
        sample_rate: window.sample_rate,
        duration_s: window.duration(),
        detrend,
        rtol,
        exact: false,
    };
    assemble_state_matrix(&est, inertia, damping, meta)
}

/// JSON form of an [`EstimatedModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub generators: usize,
    pub jacobian: MatrixData,
    pub state_matrix: MatrixData,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub conditioning: PinvInfo,
    pub window: WindowMeta,
}

impl EstimatedModel {
    pub fn to_file(&self) -> ModelFile {
        ModelFile {
            generators: self.inertia.len(),
            jacobian: (&self.jacobian).into(),
            state_matrix: (&self.a).into(),
            inertia: self.inertia.clone(),
            damping: self.damping.clone(),
            conditioning: self.conditioning,
            window: self.window.clone(),
        }
    }

    pub fn from_file(file: &ModelFile) -> Result<EstimatedModel> {
        let n = file.generators;
        let jacobian = file.jacobian.to_matrix()?;
        let a = file.state_matrix.to_matrix()?;
        check_len("jacobian rows", n, jacobian.nrows())?;
        check_len("jacobian columns", n, jacobian.ncols())?;
        check_len("state matrix rows", 2 * n, a.nrows())?;
        check_len("state matrix columns", 2 * n, a.ncols())?;
        check_len("inertia", n, file.inertia.len())?;
        check_len("damping", n, file.damping.len())?;
        if a.iter().chain(jacobian.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model matrices".into()));
        }
        Ok(EstimatedModel {
            jacobian,
            a,
            inertia: file.inertia.clone(),
            damping: file.damping.clone(),
            conditioning: file.conditioning,
            window: file.window.clone(),
        })
    }
}

/// Relative Frobenius error between two Jacobians on the mean-free angle subspace.
pub fn projected_jacobian_error(estimate: &DMatrix<f64>, truth: &DMatrix<f64>) -> f64 {
    let p = centering_projector(truth.nrows());
    let t = truth * &p;
    (estimate * &p - &t).norm() / t.norm()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window(n: usize, rows: Vec<Vec<f64>>) -> PmuWindow {
        PmuWindow::new(10.0, n, rows.concat()).unwrap()
    }

    fn three_machine() -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
        let j = DMatrix::from_row_slice(3, 3, &[2.2, -1.5, -0.7, -1.4, 2.6, -1.2, -0.5, -1.1, 1.6]);
        (j, vec![0.05, 0.08, 0.11], vec![0.002, 0.009, 0.004])
    }

    fn noise_matrix(inertia: &[f64], gain: &[f64]) -> DMatrix<f64> {
        let n = inertia.len();
        let mut b = DMatrix::zeros(2 * n, n);
        for i in 0..n {
            b[(n + i, i)] = -gain[i] / inertia[i];
        }
        b
    }

    #[test]
    fn constant_window_has_zero_covariance() {
        let w = window(2, vec![vec![0.1, 0.2, 0.0, 0.0]; 5]);
        let cov = sample_covariance(&w, Detrend::Mean, &[1.0, 1.0]).unwrap();
        assert!(cov.full().iter().all(|v| v.abs() < 1e-30));
        assert!(matches!(
            estimate_jacobian(&cov, &[1.0, 1.0], &[0.0, 0.0], DEFAULT_RTOL),
            Err(Error::DegenerateWindow { .. })
        ));
    }

    #[test]
    fn unbiased_normalization() {
        let w = window(2, vec![vec![0.0, 0.0, 0.0, 0.0], vec![2.0, 0.0, 0.0, 0.0]]);
        let cov = sample_covariance(&w, Detrend::Mean, &[1.0, 1.0]).unwrap();
        assert_eq!(cov.dd[(0, 0)], 2.0);
        assert_eq!(cov.means[0], 1.0);
        let single = window(2, vec![vec![0.0; 4]]);
        assert!(matches!(
            sample_covariance(&single, Detrend::Mean, &[1.0, 1.0]),
            Err(Error::InsufficientData { samples: 1 })
        ));
    }

    #[test]
    fn coi_detrend_equals_reframe() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|k| {
                let t = k as f64 * 0.37;
                vec![t.sin(), (2.0 * t).cos(), 0.3 * t.sin() + 0.1, t.cos(), 0.2 * t, (t * 1.3).sin()]
            })
            .collect();
        let w = window(3, rows);
        let inertia = [1.0, 2.0, 3.0];
        let mean = sample_covariance(&w, Detrend::Mean, &inertia).unwrap();
        let coi = sample_covariance(&w, Detrend::Coi, &inertia).unwrap();
        let reframed = mean.reframe(&coi_transform(&inertia), Detrend::Coi).unwrap();
        assert!((coi.full() - reframed.full()).norm() < 1e-12);
        assert_eq!(coi.dw, coi.wd.transpose());
    }

    #[test]
    fn single_machine_closed_form() {
        let (k, m, d, b) = (3.0, 0.4, 0.2, 0.5);
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -k / m, -d / m]);
        let bm = DMatrix::from_row_slice(2, 1, &[0.0, b / m]);
        let cov = theoretical_covariance(&a, &bm).unwrap();
        assert!((cov.ww[(0, 0)] - b * b / (2.0 * d * m)).abs() < 1e-12);
        // Var δ = Var ω / (k/m)
        assert!((cov.dd[(0, 0)] - b * b / (2.0 * d * k)).abs() < 1e-12);
        assert!(cov.dw[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn zero_forcing_gives_zero_covariance() {
        let (j, m, d) = three_machine();
        let a = swing_state_matrix(&j, &m, &d);
        let cov = theoretical_covariance(&a, &DMatrix::zeros(6, 3)).unwrap();
        assert!(cov.full().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn round_trip_recovers_jacobian() {
        let (j, m, d) = three_machine();
        let a = swing_state_matrix(&j, &m, &d);
        let b = noise_matrix(&m, &[0.1, 0.05, 0.07]);
        let cov = theoretical_covariance(&a, &b).unwrap();
        // the driven translational mode leaves a uniform symmetric part in the cross block
        let sym = &cov.wd + cov.wd.transpose();
        let level = sym[(0, 0)];
        assert!(sym.iter().all(|v| (v - level).abs() < 1e-10 * cov.wd.norm()));
        let p = centering_projector(3);
        assert!((&p * &sym * &p).norm() < 1e-10 * cov.wd.norm());
        let est = estimate_jacobian(&cov, &m, &d, DEFAULT_RTOL).unwrap();
        assert_eq!(est.conditioning.truncated, 1);
        assert!(projected_jacobian_error(&est.jacobian, &j) < 1e-8);
    }

    #[test]
    fn unstable_matrix_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.1]);
        let b = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        assert!(matches!(theoretical_covariance(&a, &b), Err(Error::Unstable { .. })));
    }

    #[test]
    fn assembled_blocks() {
        let (j, m, d) = three_machine();
        let est = JacobianEstimate {
            jacobian: j.clone(),
            conditioning: PinvInfo {
                sigma_max: 1.0,
                smallest_retained: 1.0,
                truncated: 0,
            },
        };
        let meta = WindowMeta {
            samples: 0,
            sample_rate: 0.0,
            duration_s: 0.0,
            detrend: Detrend::None,
            rtol: DEFAULT_RTOL,
            exact: true,
        };
        let model = assemble_state_matrix(&est, &m, &d, meta).unwrap();
        let n = 3;
        assert_eq!(model.a.view((0, 0), (n, n)).into_owned(), DMatrix::zeros(n, n));
        assert_eq!(model.a.view((0, n), (n, n)).into_owned(), DMatrix::identity(n, n));
        let lower_right = DMatrix::from_fn(n, n, |i, j| if i == j { -d[i] / m[i] } else { 0.0 });
        assert!((model.a.view((n, n), (n, n)).into_owned() - lower_right).amax() == 0.0);
        let file = model.to_file();
        let back = EstimatedModel::from_file(&serde_json::from_str(&serde_json::to_string(&file).unwrap()).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn detrend_parsing() {
        assert_eq!("coi".parse::<Detrend>().unwrap(), Detrend::Coi);
        assert!(matches!("linear".parse::<Detrend>(), Err(Error::Config(_))));
        assert_eq!(Detrend::Mean.to_string(), "mean");
    }
}
