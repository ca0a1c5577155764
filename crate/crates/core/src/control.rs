//! Damping-control synthesis by rank-2 eigenvector feedback.
//!
//! The gain `K = σ(φ₁ψ₁ + φ₂ψ₂)` acts only on the target pair in modal
//! coordinates. Masking it with whole-generator actuator rows `B_c` keeps every
//! other eigenvalue fixed and mixes the target pair through a 2×2 block.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::exec;
use crate::linalg::{to_complex, ComplexData, MatrixData, C64};
use crate::modal::{decompose, participation_factors, ModalDecomposition};

/// Relative tolerance for participation ties in actuator ranking.
pub const TIE_TOL: f64 = 1e-9;
/// Imaginary residue allowed in `K`, relative to its norm.
pub const REALNESS_TOL: f64 = 1e-10;
/// Separation below which a non-target eigenvalue collides with the target block.
pub const COLLISION_TOL: f64 = 1e-10;

/// Generators ranked by speed-state participation in the target mode, best first.
pub fn rank_generators(dec: &ModalDecomposition, pair: usize) -> Result<Vec<usize>> {
    let (k1, _) = dec.pair(pair)?;
    let weights = participation_factors(dec).speed_magnitudes(k1);
    let mut remaining: Vec<usize> = (0..weights.len()).collect();
    let mut ranked = Vec::with_capacity(weights.len());
    while !remaining.is_empty() {
        let max = remaining.iter().map(|&g| weights[g]).fold(0.0, f64::max);
        // lowest index among candidates within the tie tolerance
        let pos = remaining
            .iter()
            .position(|&g| weights[g] >= max * (1.0 - TIE_TOL))
            .unwrap_or(0);
        ranked.push(remaining.remove(pos));
    }
    Ok(ranked)
}

/// The `count` generators with the largest speed-state participation.
pub fn select_actuators(dec: &ModalDecomposition, pair: usize, count: usize) -> Result<Vec<usize>> {
    let n = dec.generators();
    if count == 0 || count > n {
        return Err(Error::Validation(format!(
            "actuator count must be in 1..={n}, got {count}"
        )));
    }
    let mut ranked = rank_generators(dec, pair)?;
    ranked.truncate(count);
    Ok(ranked)
}

/// Diagonal 0/1 actuator mask selecting angle and speed rows of each generator.
pub fn actuator_mask(n: usize, actuators: &[usize]) -> Result<DMatrix<f64>> {
    let mut mask = DMatrix::zeros(2 * n, 2 * n);
    for &g in actuators {
        if g >= n {
            return Err(Error::Validation(format!(
                "actuator {} out of range 1..={n}",
                g + 1
            )));
        }
        mask[(g, g)] = 1.0;
        mask[(n + g, n + g)] = 1.0;
    }
    Ok(mask)
}

/// Signed modal shift for a leftward move of `shift`.
pub fn sigma_for(shift: f64) -> f64 {
    -shift
}

/// `K = σ(φ_{k₁}ψ_{k₁} + φ_{k₂}ψ_{k₂})` with `σ = −shift`.
pub fn design_gain(dec: &ModalDecomposition, pair: usize, shift: f64) -> Result<DMatrix<f64>> {
    let (k1, k2) = dec.pair(pair)?;
    if !shift.is_finite() {
        return Err(Error::Validation(format!("shift must be finite, got {shift}")));
    }
    let target = dec.eigenvalues[k1];
    if target.re - shift >= 0.0 {
        return Err(Error::Validation(format!(
            "shift {shift} would leave the target mode at real part {:.6} (not stable)",
            target.re - shift
        )));
    }
    let sigma = sigma_for(shift);
    let dim = dec.dim();
    let k = DMatrix::from_fn(dim, dim, |r, c| {
        (dec.right[(r, k1)] * dec.left[(k1, c)] + dec.right[(r, k2)] * dec.left[(k2, c)]) * sigma
    });
    let re = k.map(|c| c.re);
    let residue = k.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    let bound = REALNESS_TOL * re.norm();
    if residue > bound && residue > f64::MIN_POSITIVE {
        return Err(Error::Conjugation { residue, bound });
    }
    Ok(re)
}

pub fn closed_loop_matrix(a: &DMatrix<f64>, mask: &DMatrix<f64>, gain: &DMatrix<f64>) -> DMatrix<f64> {
    a + mask * gain
}

/// `λ + σ ψ_i B_c φ_i` for both eigenvalues of the pair.
pub fn predict_shift_first_order(
    dec: &ModalDecomposition,
    mask: &DMatrix<f64>,
    pair: usize,
    shift: f64,
) -> Result<[C64; 2]> {
    let block = modal_block(dec, mask, pair, shift)?;
    Ok([block[0][0], block[1][1]])
}

/// Exact closed-loop pair and an optional collision warning.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactShift {
    pub eigenvalues: [C64; 2],
    pub warning: Option<String>,
}

/// Eigenvalues of the 2×2 modal block of the perturbed system at the target pair.
pub fn predict_shift_exact(
    dec: &ModalDecomposition,
    mask: &DMatrix<f64>,
    pair: usize,
    shift: f64,
) -> Result<ExactShift> {
    let (k1, k2) = dec.pair(pair)?;
    let m = modal_block(dec, mask, pair, shift)?;
    let half_trace = (m[0][0] + m[1][1]) * 0.5;
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let root = (half_trace * half_trace - det).sqrt();
    let (mut a, mut b) = (half_trace + root, half_trace - root);
    if a.im < b.im {
        std::mem::swap(&mut a, &mut b);
    }
    let scale = dec.eigenvalues.iter().map(|l| l.norm()).fold(1.0, f64::max);
    let warning = dec
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != k1 && *i != k2)
        .find(|(_, l)| (**l - a).norm().min((**l - b).norm()) <= COLLISION_TOL * scale)
        .map(|(i, l)| format!("closed-loop target pair collides with untargeted eigenvalue {i} ({l})"));
    Ok(ExactShift {
        eigenvalues: [a, b],
        warning,
    })
}

fn modal_block(dec: &ModalDecomposition, mask: &DMatrix<f64>, pair: usize, shift: f64) -> Result<[[C64; 2]; 2]> {
    let (k1, k2) = dec.pair(pair)?;
    check_len("actuator mask", dec.dim(), mask.nrows())?;
    let sigma = sigma_for(shift);
    let cmask = to_complex(mask);
    let idx = [k1, k2];
    let mut out = [[C64::new(0.0, 0.0); 2]; 2];
    for (r, &i) in idx.iter().enumerate() {
        for (c, &j) in idx.iter().enumerate() {
            let v = (dec.left.row(i) * &cmask * dec.right.column(j))[(0, 0)];
            out[r][c] = v * sigma;
        }
        out[r][r] += dec.eigenvalues[i];
    }
    Ok(out)
}

/// Feedback design for one target pair and actuator set.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPlan {
    pub target_pair: (usize, usize),
    pub target_eigenvalue: C64,
    /// Leftward shift requested; the modal coefficient is `−shift`.
    pub shift: f64,
    /// Zero-based generator indices.
    pub actuators: Vec<usize>,
    pub gain: DMatrix<f64>,
    pub mask: DMatrix<f64>,
    pub predicted_first_order: [C64; 2],
    pub predicted_exact: [C64; 2],
    pub warning: Option<String>,
}

impl ControlPlan {
    pub fn design(dec: &ModalDecomposition, pair: usize, shift: f64, actuators: &[usize]) -> Result<ControlPlan> {
        let (k1, k2) = dec.pair(pair)?;
        let n = dec.generators();
        let mut actuators = actuators.to_vec();
        let len_before = actuators.len();
        actuators.sort_unstable();
        actuators.dedup();
        if actuators.is_empty() || actuators.len() != len_before {
            return Err(Error::Validation(
                "actuator list must be non-empty without duplicates".into(),
            ));
        }
        let mask = actuator_mask(n, &actuators)?;
        let gain = design_gain(dec, pair, shift)?;
        let predicted_first_order = predict_shift_first_order(dec, &mask, pair, shift)?;
        let exact = predict_shift_exact(dec, &mask, pair, shift)?;
        Ok(ControlPlan {
            target_pair: (k1, k2),
            target_eigenvalue: dec.eigenvalues[k1],
            shift,
            actuators,
            gain,
            mask,
            predicted_first_order,
            predicted_exact: exact.eigenvalues,
            warning: exact.warning,
        })
    }

    pub fn generators(&self) -> usize {
        self.gain.nrows() / 2
    }

    /// `B_c K`, the state-derivative feedback matrix.
    pub fn feedback(&self) -> DMatrix<f64> {
        &self.mask * &self.gain
    }

    pub fn closed_loop(&self, a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_len("plan dimension", a.nrows(), self.gain.nrows())?;
        Ok(closed_loop_matrix(a, &self.mask, &self.gain))
    }

    pub fn to_file(&self) -> PlanFile {
        PlanFile {
            target_pair: [self.target_pair.0, self.target_pair.1],
            target_eigenvalue: self.target_eigenvalue.into(),
            shift: self.shift,
            sigma: sigma_for(self.shift),
            actuators: self.actuators.iter().map(|g| g + 1).collect(),
            gain: (&self.gain).into(),
            mask: (0..self.mask.nrows()).map(|i| self.mask[(i, i)]).collect(),
            predicted_first_order: self.predicted_first_order.map(Into::into),
            predicted_exact: self.predicted_exact.map(Into::into),
            warning: self.warning.clone(),
        }
    }

    pub fn from_file(file: &PlanFile) -> Result<ControlPlan> {
        let gain = file.gain.to_matrix()?;
        let dim = gain.nrows();
        check_len("gain columns", dim, gain.ncols())?;
        check_len("mask", dim, file.mask.len())?;
        if dim % 2 != 0 || dim == 0 {
            return Err(Error::Validation(format!("gain dimension {dim} is not 2n")));
        }
        if file.mask.iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Validation("mask entries must be 0 or 1".into()));
        }
        let n = dim / 2;
        let actuators: Vec<usize> = file
            .actuators
            .iter()
            .map(|&g| {
                if g == 0 || g > n {
                    Err(Error::Validation(format!("actuator {g} out of range 1..={n}")))
                } else {
                    Ok(g - 1)
                }
            })
            .collect::<Result<_>>()?;
        let mask = actuator_mask(n, &actuators)?;
        if (0..dim).any(|i| mask[(i, i)] != file.mask[i]) {
            return Err(Error::Validation("mask does not match actuator list".into()));
        }
        Ok(ControlPlan {
            target_pair: (file.target_pair[0], file.target_pair[1]),
            target_eigenvalue: file.target_eigenvalue.into(),
            shift: file.shift,
            actuators,
            gain,
            mask,
            predicted_first_order: file.predicted_first_order.map(Into::into),
            predicted_exact: file.predicted_exact.map(Into::into),
            warning: file.warning.clone(),
        })
    }
}

/// JSON form of a [`ControlPlan`]; actuators are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub target_pair: [usize; 2],
    pub target_eigenvalue: ComplexData,
    pub shift: f64,
    pub sigma: f64,
    pub actuators: Vec<usize>,
    pub gain: MatrixData,
    pub mask: Vec<f64>,
    pub predicted_first_order: [ComplexData; 2],
    pub predicted_exact: [ComplexData; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Globally greedy nearest matching: `result[i]` is the index in `to` paired with `from[i]`.
pub fn match_eigenvalues(from: &[C64], to: &[C64]) -> Vec<usize> {
    let mut candidates: Vec<(f64, usize, usize)> = Vec::with_capacity(from.len() * to.len());
    for (i, a) in from.iter().enumerate() {
        for (j, b) in to.iter().enumerate() {
            candidates.push(((a - b).norm(), i, j));
        }
    }
    candidates.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![usize::MAX; from.len()];
    let mut taken = vec![false; to.len()];
    for (_, i, j) in candidates {
        if out[i] == usize::MAX && !taken[j] {
            out[i] = j;
            taken[j] = true;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenRow {
    pub re: f64,
    pub im: f64,
    pub f_hz: f64,
    pub zeta: f64,
}

impl From<C64> for EigenRow {
    fn from(l: C64) -> Self {
        let mag = l.norm();
        EigenRow {
            re: l.re,
            im: l.im,
            f_hz: l.im.abs() / (2.0 * std::f64::consts::PI),
            zeta: if mag == 0.0 { 0.0 } else { -l.re / mag },
        }
    }
}

/// Closed-loop evaluation of a plan against a reference state matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopReport {
    pub shift: f64,
    pub actuators: Vec<usize>,
    /// Open-loop eigenvalues of the reference matrix.
    pub open_loop: Vec<EigenRow>,
    /// Closed-loop eigenvalues, row-aligned with `open_loop`.
    pub closed_loop: Vec<EigenRow>,
    pub target_rows: [usize; 2],
    pub target_zeta_open: f64,
    pub target_zeta_closed: f64,
    pub max_non_target_displacement: f64,
    pub spectral_radius: f64,
    pub predicted_first_order: [ComplexData; 2],
    pub predicted_exact: [ComplexData; 2],
    pub first_order_error: f64,
    pub exact_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Decomposes `A_ref + B_c K`, aligns it with `open` and measures the plan's effect.
pub fn evaluate_plan(a_ref: &DMatrix<f64>, plan: &ControlPlan, open: &ModalDecomposition) -> Result<ClosedLoopReport> {
    check_len("reference decomposition", a_ref.nrows(), open.dim())?;
    let closed = decompose(&plan.closed_loop(a_ref)?)?;
    let assignment = match_eigenvalues(&open.eigenvalues, &closed.eigenvalues);
    let closed_aligned: Vec<C64> = assignment.iter().map(|&j| closed.eigenvalues[j]).collect();

    // target rows in the reference: nearest to the designed pair
    let t1 = nearest(&open.eigenvalues, plan.target_eigenvalue);
    let t2 = nearest(&open.eigenvalues, plan.target_eigenvalue.conj());
    let mut max_disp: f64 = 0.0;
    for (i, (a, b)) in open.eigenvalues.iter().zip(&closed_aligned).enumerate() {
        if i != t1 && i != t2 {
            max_disp = max_disp.max((a - b).norm());
        }
    }
    let (c1, c2) = (closed_aligned[t1], closed_aligned[t2]);
    let zeta = |l: C64| EigenRow::from(l).zeta;
    let err = |p: &[C64; 2]| (p[0] - c1).norm().max((p[1] - c2).norm());
    let spectral_radius = open.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
    Ok(ClosedLoopReport {
        shift: plan.shift,
        actuators: plan.actuators.iter().map(|g| g + 1).collect(),
        open_loop: open.eigenvalues.iter().map(|&l| l.into()).collect(),
        closed_loop: closed_aligned.iter().map(|&l| l.into()).collect(),
        target_rows: [t1, t2],
        target_zeta_open: zeta(open.eigenvalues[t1]),
        target_zeta_closed: zeta(c1).min(zeta(c2)),
        max_non_target_displacement: max_disp,
        spectral_radius,
        predicted_first_order: plan.predicted_first_order.map(Into::into),
        predicted_exact: plan.predicted_exact.map(Into::into),
        first_order_error: err(&plan.predicted_first_order),
        exact_error: err(&plan.predicted_exact),
        warning: plan.warning.clone(),
    })
}

fn nearest(values: &[C64], target: C64) -> usize {
    (0..values.len())
        .min_by(|&a, &b| (values[a] - target).norm().total_cmp(&(values[b] - target).norm()))
        .unwrap_or(0)
}

/// One row of an actuator-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub count: usize,
    /// 1-based generator indices in ranking order.
    pub actuators: Vec<usize>,
    /// Closed-loop target damping ratio on the design matrix.
    pub zeta_design: f64,
    /// Same plan evaluated on the reference matrix, when supplied.
    pub zeta_reference: Option<f64>,
    pub max_non_target_displacement: f64,
}

/// Closed-loop damping for the top-`count` actuators, for each count.
pub fn actuator_sweep(
    a_design: &DMatrix<f64>,
    dec: &ModalDecomposition,
    pair: usize,
    shift: f64,
    counts: &[usize],
    reference: Option<(&DMatrix<f64>, &ModalDecomposition)>,
    parallel: bool,
) -> Result<Vec<SweepRow>> {
    let ranked = rank_generators(dec, pair)?;
    let run = |&count: &usize| -> Result<SweepRow> {
        let chosen = select_actuators(dec, pair, count)?;
        debug_assert_eq!(chosen, ranked[..count]);
        let plan = ControlPlan::design(dec, pair, shift, &chosen)?;
        let report = evaluate_plan(a_design, &plan, dec)?;
        let zeta_reference = match reference {
            Some((a_ref, dec_ref)) => Some(evaluate_plan(a_ref, &plan, dec_ref)?.target_zeta_closed),
            None => None,
        };
        Ok(SweepRow {
            count,
            actuators: chosen.iter().map(|g| g + 1).collect(),
            zeta_design: report.target_zeta_closed,
            zeta_reference,
            max_non_target_displacement: report.max_non_target_displacement,
        })
    };
    let rows = if parallel {
        exec::map(counts, run)
    } else {
        exec::map_sequential(counts, run)
    };
    rows.into_iter().collect()
}

/// Table layout: actuator set and closed-loop damping ratio in percent.
pub fn sweep_table_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("count,actuators,zeta_percent,zeta_reference_percent\n");
    for r in rows {
        let set = r
            .actuators
            .iter()
            .map(|g| format!("G{g}"))
            .collect::<Vec<_>>()
            .join(" ");
        let reference = r
            .zeta_reference
            .map(|z| format!("{:.4}", 100.0 * z))
            .unwrap_or_default();
        out.push_str(&format!("{},{},{:.4},{}\n", r.count, set, 100.0 * r.zeta_design, reference));
    }
    out
}
