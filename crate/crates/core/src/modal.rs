//! Modal analysis of a real state matrix.
//!
//! Right eigenvectors come from the null space of `A − λI`; left eigenvectors
//! are the rows of `Φ⁻¹`, so `ΨΦ = I` holds to solver precision and the
//! participation factors of every mode sum to one.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{checked_svd, to_complex, ComplexData, C64};

/// Relative tolerance used for conjugate pairing and real-eigenvalue cleanup.
pub const PAIR_TOL: f64 = 1e-8;
/// Pairs with `|Im λ|` and `|λ|` below this are the translational artifact.
pub const ZERO_MODE_TOL: f64 = 1e-6;
/// Damping-ratio threshold for satisfactory damping.
pub const DEFAULT_WEAK_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone)]
pub struct ModalDecomposition {
    pub eigenvalues: Vec<C64>,
    /// Columns are right eigenvectors `φ_i`.
    pub right: DMatrix<C64>,
    /// Rows are left eigenvectors `ψ_i`.
    pub left: DMatrix<C64>,
    /// Conjugate index pairs `(k₁, k₂)` with `Im λ_{k₁} > 0`.
    pub pairs: Vec<(usize, usize)>,
    pub frequency_hz: Vec<f64>,
    pub damping_ratio: Vec<f64>,
}

fn scale_of(l: C64) -> f64 {
    1.0_f64.max(l.norm())
}

fn damping_ratio(l: C64) -> f64 {
    let mag = l.norm();
    if mag == 0.0 {
        0.0
    } else {
        -l.re / mag
    }
}

/// Null-space basis of `A − λI` of the requested dimension, from the SVD.
fn null_vectors(a: &DMatrix<f64>, lambda: C64, count: usize) -> Result<Vec<DVector<C64>>> {
    let dim = a.nrows();
    if lambda.im == 0.0 {
        let shifted = a - DMatrix::identity(dim, dim) * lambda.re;
        let svd = checked_svd(&shifted)?;
        let v_t = &svd.v_t;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
        Ok(order[..count]
            .iter()
            .map(|&k| v_t.row(k).transpose().map(|v| C64::new(v, 0.0)))
            .collect())
    } else {
        let shifted = to_complex(a) - DMatrix::<C64>::identity(dim, dim) * lambda;
        let svd = checked_svd(&shifted)?;
        let v_t = &svd.v_t;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
        Ok(order[..count]
            .iter()
            .map(|&k| v_t.row(k).transpose().map(|v| v.conj()))
            .collect())
    }
}

/// Unit 2-norm with the largest-magnitude component made real-positive.
fn fix_phase(mut v: DVector<C64>) -> DVector<C64> {
    let norm = v.norm();
    if norm > 0.0 {
        v /= C64::new(norm, 0.0);
    }
    let max = v.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if let Some(pivot) = v.iter().position(|c| c.norm() >= max * (1.0 - 1e-12)) {
        let p = v[pivot];
        let rot = p.conj() / p.norm();
        v *= rot;
        v[pivot] = C64::new(v[pivot].norm(), 0.0);
    }
    v
}

/// Eigendecomposition with bi-orthonormal eigenvectors.
pub fn decompose(a: &DMatrix<f64>) -> Result<ModalDecomposition> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension {
            what: "state matrix columns",
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("state matrix".into()));
    }
    let dim = a.nrows();
    let schur = nalgebra::Schur::try_new(a.clone(), f64::EPSILON, 1000 * dim.max(1))
        .ok_or_else(|| Error::Numerical("Schur iteration did not converge".into()))?;
    let raw: Vec<C64> = schur.complex_eigenvalues().iter().cloned().collect();

    // split into upper half-plane (incl. real) and lower half-plane, pairing conjugates
    let mut upper: Vec<C64> = Vec::new();
    let mut lower: Vec<C64> = Vec::new();
    for l in raw {
        if l.im.abs() <= PAIR_TOL * scale_of(l) {
            upper.push(C64::new(l.re, 0.0));
        } else if l.im > 0.0 {
            upper.push(l);
        } else {
            lower.push(l);
        }
    }
    let complex_upper = upper.iter().filter(|l| l.im != 0.0).count();
    if complex_upper != lower.len() {
        return Err(Error::Numerical(format!(
            "unbalanced conjugate eigenvalues ({complex_upper} vs {})",
            lower.len()
        )));
    }
    // symmetrize each pair
    let mut used = vec![false; lower.len()];
    for l in upper.iter_mut().filter(|l| l.im != 0.0) {
        let (best, dist) = lower
            .iter()
            .enumerate()
            .filter(|(i, _)| !used[*i])
            .map(|(i, m)| (i, (m.conj() - *l).norm()))
            .min_by(|x, y| x.1.total_cmp(&y.1))
            .ok_or_else(|| Error::Numerical("conjugate pairing failed".into()))?;
        if dist > PAIR_TOL * scale_of(*l) {
            return Err(Error::Numerical(format!(
                "eigenvalue {l} has no conjugate partner within tolerance"
            )));
        }
        used[best] = true;
        *l = (*l + lower[best].conj()) * 0.5;
    }
    upper.sort_by(|x, y| y.im.total_cmp(&x.im).then(x.re.total_cmp(&y.re)));

    let mut eigenvalues = upper.clone();
    let mut partner_of = Vec::new();
    for (i, l) in upper.iter().enumerate() {
        if l.im != 0.0 {
            partner_of.push(i);
            eigenvalues.push(l.conj());
        }
    }
    debug_assert_eq!(eigenvalues.len(), dim);

    // right eigenvectors for the upper half, clustering near-equal eigenvalues
    let mut columns: Vec<Option<DVector<C64>>> = vec![None; upper.len()];
    for i in 0..upper.len() {
        if columns[i].is_some() {
            continue;
        }
        let cluster: Vec<usize> = (i..upper.len())
            .filter(|&j| columns[j].is_none() && (upper[j] - upper[i]).norm() <= PAIR_TOL * scale_of(upper[i]))
            .collect();
        let centre = cluster.iter().map(|&j| upper[j]).sum::<C64>() / cluster.len() as f64;
        let vecs = null_vectors(a, centre, cluster.len())?;
        for (&j, v) in cluster.iter().zip(vecs) {
            columns[j] = Some(fix_phase(v));
        }
    }
    let mut right = DMatrix::<C64>::zeros(dim, dim);
    for (i, col) in columns.iter().enumerate() {
        right.set_column(i, col.as_ref().expect("every eigenvalue assigned"));
    }
    let mut pairs = Vec::new();
    for (offset, &k1) in partner_of.iter().enumerate() {
        let k2 = upper.len() + offset;
        let conj_col = right.column(k1).map(|c| c.conj());
        right.set_column(k2, &conj_col);
        pairs.push((k1, k2));
    }

    let left = right
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NonDiagonalizable("eigenvector matrix is singular".into()))?;

    let identity_err = (&left * &right - DMatrix::<C64>::identity(dim, dim)).norm();
    let lambda_norm = eigenvalues.iter().map(|l| l.norm_sqr()).sum::<f64>().sqrt();
    let modal = &left * to_complex(a) * &right;
    let mut off = 0.0;
    for i in 0..dim {
        for j in 0..dim {
            if i != j {
                off += modal[(i, j)].norm_sqr();
            }
        }
    }
    let off = off.sqrt();
    if !(identity_err <= 1e-8) || !(off <= 1e-8 * lambda_norm.max(1.0)) {
        return Err(Error::NonDiagonalizable(format!(
            "|ΨΦ − I| = {identity_err:.2e}, off-diagonal |ΨAΦ| = {off:.2e}"
        )));
    }

    let frequency_hz = eigenvalues.iter().map(|l| l.im.abs() / (2.0 * PI)).collect();
    let damping = eigenvalues.iter().map(|&l| damping_ratio(l)).collect();
    Ok(ModalDecomposition {
        eigenvalues,
        right,
        left,
        pairs,
        frequency_hz,
        damping_ratio: damping,
    })
}

/// Oscillatory mode summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSummary {
    /// Index into `ModalDecomposition::pairs`.
    pub pair: usize,
    pub eigenvalue: C64,
    pub frequency_hz: f64,
    pub damping_ratio: f64,
}

impl ModalDecomposition {
    pub fn dim(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of generators (half the state dimension).
    pub fn generators(&self) -> usize {
        self.dim() / 2
    }

    fn is_zero_mode(&self, pair: usize) -> bool {
        let l = self.eigenvalues[self.pairs[pair].0];
        l.im.abs() < ZERO_MODE_TOL && l.norm() < ZERO_MODE_TOL
    }

    pub fn pair(&self, pair: usize) -> Result<(usize, usize)> {
        self.pairs.get(pair).copied().ok_or(Error::ModeIndex {
            index: pair,
            available: self.pairs.len(),
        })
    }

    /// Oscillatory modes sorted by ascending damping ratio.
    pub fn modes(&self) -> Vec<ModeSummary> {
        let mut out: Vec<ModeSummary> = (0..self.pairs.len())
            .filter(|&p| !self.is_zero_mode(p))
            .map(|p| {
                let k = self.pairs[p].0;
                ModeSummary {
                    pair: p,
                    eigenvalue: self.eigenvalues[k],
                    frequency_hz: self.frequency_hz[k],
                    damping_ratio: self.damping_ratio[k],
                }
            })
            .collect();
        out.sort_by(|x, y| {
            x.damping_ratio
                .total_cmp(&y.damping_ratio)
                .then(x.pair.cmp(&y.pair))
        });
        out
    }

    /// Pair whose upper eigenvalue is nearest to `target`.
    pub fn nearest_pair(&self, target: C64) -> Option<usize> {
        let target = if target.im < 0.0 { target.conj() } else { target };
        (0..self.pairs.len()).min_by(|&x, &y| {
            let dx = (self.eigenvalues[self.pairs[x].0] - target).norm();
            let dy = (self.eigenvalues[self.pairs[y].0] - target).norm();
            dx.total_cmp(&dy)
        })
    }

    /// Oscillatory pair best matching a frequency / damping-ratio target.
    pub fn pair_matching(&self, frequency_hz: f64, damping_ratio: f64) -> Option<usize> {
        self.modes()
            .into_iter()
            .min_by(|x, y| {
                let dx = ((x.frequency_hz - frequency_hz) / frequency_hz.max(1e-9)).powi(2)
                    + (x.damping_ratio - damping_ratio).powi(2);
                let dy = ((y.frequency_hz - frequency_hz) / frequency_hz.max(1e-9)).powi(2)
                    + (y.damping_ratio - damping_ratio).powi(2);
                dx.total_cmp(&dy)
            })
            .map(|m| m.pair)
    }
}

/// Participation factors `P_{j,i} = φ_{j,i} ψ_{i,j}`.
#[derive(Debug, Clone)]
pub struct Participation {
    /// Row `j` (state), column `i` (mode).
    pub complex: DMatrix<C64>,
    /// Per-mode magnitudes divided by their maximum (same layout).
    pub normalized: DMatrix<f64>,
}

impl Participation {
    /// Magnitude of the speed-state participation of every generator in `mode`.
    pub fn speed_magnitudes(&self, mode: usize) -> Vec<f64> {
        let n = self.complex.nrows() / 2;
        (0..n).map(|g| self.complex[(n + g, mode)].norm()).collect()
    }

    pub fn angle_magnitudes(&self, mode: usize) -> Vec<f64> {
        let n = self.complex.nrows() / 2;
        (0..n).map(|g| self.complex[(g, mode)].norm()).collect()
    }
}

pub fn participation_factors(dec: &ModalDecomposition) -> Participation {
    let dim = dec.dim();
    let complex = DMatrix::from_fn(dim, dim, |j, i| dec.right[(j, i)] * dec.left[(i, j)]);
    let mut normalized = complex.map(|c| c.norm());
    for mut col in normalized.column_iter_mut() {
        let max = col.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            col /= max;
        }
    }
    Participation {
        complex,
        normalized,
    }
}

/// Rotor-angle components of `φ_{k₁}`, rotated so the largest has zero phase
/// and scaled to unit maximum magnitude.
pub fn mode_shape(dec: &ModalDecomposition, pair: usize) -> Result<Vec<C64>> {
    let (k1, _) = dec.pair(pair)?;
    let n = dec.generators();
    let angles: Vec<C64> = (0..n).map(|g| dec.right[(g, k1)]).collect();
    let max = angles.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(angles);
    }
    let pivot = angles
        .iter()
        .position(|c| c.norm() >= max * (1.0 - 1e-12))
        .unwrap_or(0);
    let rot = angles[pivot].conj() / (angles[pivot].norm() * max);
    let mut shape: Vec<C64> = angles.iter().map(|c| c * rot).collect();
    shape[pivot] = C64::new(1.0, 0.0);
    Ok(shape)
}

/// Oscillatory pairs with damping ratio below `threshold`, weakest first.
pub fn weak_modes(dec: &ModalDecomposition, threshold: f64) -> Vec<usize> {
    dec.modes()
        .into_iter()
        .filter(|m| m.damping_ratio < threshold)
        .map(|m| m.pair)
        .collect()
}

/// One row of the modal report.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModeRecord {
    /// 1-based position in ascending-damping order.
    pub index: usize,
    pub pair: usize,
    pub eigenvalue: ComplexData,
    pub f_hz: f64,
    pub zeta: f64,
    pub weak: bool,
    pub shape_magnitude: Vec<f64>,
    pub shape_phase_rad: Vec<f64>,
    pub participation_speed: Vec<f64>,
    pub participation_angle: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModalReport {
    pub generators: usize,
    pub weak_threshold: f64,
    pub eigenvalues: Vec<ComplexData>,
    pub modes: Vec<ModeRecord>,
}

impl ModalReport {
    pub fn build(dec: &ModalDecomposition, weak_threshold: f64) -> Result<ModalReport> {
        let part = participation_factors(dec);
        let mut modes = Vec::new();
        for (idx, m) in dec.modes().into_iter().enumerate() {
            let (k1, _) = dec.pairs[m.pair];
            let shape = mode_shape(dec, m.pair)?;
            modes.push(ModeRecord {
                index: idx + 1,
                pair: m.pair,
                eigenvalue: m.eigenvalue.into(),
                f_hz: m.frequency_hz,
                zeta: m.damping_ratio,
                weak: m.damping_ratio < weak_threshold,
                shape_magnitude: shape.iter().map(|c| c.norm()).collect(),
                shape_phase_rad: shape.iter().map(|c| c.arg()).collect(),
                participation_speed: part.speed_magnitudes(k1),
                participation_angle: part.angle_magnitudes(k1),
            });
        }
        Ok(ModalReport {
            generators: dec.generators(),
            weak_threshold,
            eigenvalues: dec.eigenvalues.iter().map(|&l| l.into()).collect(),
            modes,
        })
    }

    /// Plot-ready CSV: one row per (mode, generator).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "mode,f_hz,zeta,generator,shape_magnitude,shape_phase_rad,participation_speed,participation_angle\n",
        );
        for m in &self.modes {
            for g in 0..self.generators {
                out.push_str(&format!(
                    "{},{:.17e},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                    m.index,
                    m.f_hz,
                    m.zeta,
                    g + 1,
                    m.shape_magnitude[g],
                    m.shape_phase_rad[g],
                    m.participation_speed[g],
                    m.participation_angle[g]
                ));
            }
        }
        out
    }
}
