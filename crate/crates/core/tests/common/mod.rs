#![allow(dead_code)]

use std::path::PathBuf;

use ambient_wadc::linalg::swing_state_matrix;
use ambient_wadc::modal::{decompose, ModalDecomposition};
use ambient_wadc::nalgebra::DMatrix;
pub use ambient_wadc::pipeline::{prepare, Prepared};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn benchmark() -> Prepared {
    prepare(&repo_root().join("cases/ten_machine.toml"), None).expect("benchmark case")
}

pub fn two_machine() -> Prepared {
    prepare(&repo_root().join("cases/two_machine.toml"), None).expect("two-machine case")
}

/// Random stable swing system: `(A, J, M, D)`.
pub struct RandomSwing {
    pub a: DMatrix<f64>,
    pub jacobian: DMatrix<f64>,
    pub inertia: Vec<f64>,
    pub damping: Vec<f64>,
    pub dec: ModalDecomposition,
}

/// Connected network with mildly asymmetric couplings; resampled until stable.
pub fn random_swing(seed: u64, n: usize) -> RandomSwing {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut j = DMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    let base = if (r + 1) % n == c || (c + 1) % n == r { 1.0 } else { 0.0 };
                    let w: f64 = base + rng.random_range(0.0..1.5) * if rng.random_bool(0.6) { 1.0 } else { 0.0 };
                    j[(r, c)] = -w * rng.random_range(0.9..1.1);
                }
            }
        }
        for r in 0..n {
            let s: f64 = (0..n).filter(|&c| c != r).map(|c| j[(r, c)]).sum();
            j[(r, r)] = -s;
        }
        let inertia: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.1)).collect();
        let damping: Vec<f64> = inertia.iter().map(|m| m * rng.random_range(0.05..1.5)).collect();
        let a = swing_state_matrix(&j, &inertia, &damping);
        let Ok(dec) = decompose(&a) else { continue };
        let stable = dec.eigenvalues.iter().all(|l| l.re < -1e-6 || l.norm() < 1e-9);
        if stable && !dec.pairs.is_empty() {
            return RandomSwing {
                a,
                jacobian: j,
                inertia,
                damping,
                dec,
            };
        }
    }
}

/// Noise input matrix `−E²Gσ/M` in the speed rows.
pub fn noise_matrix(inertia: &[f64], gain: &[f64]) -> DMatrix<f64> {
    let n = inertia.len();
    let mut b = DMatrix::zeros(2 * n, n);
    for i in 0..n {
        b[(n + i, i)] = -gain[i] / inertia[i];
    }
    b
}

pub fn median(v: &[f64]) -> f64 {
    ambient_wadc::pipeline::median(v).expect("non-empty")
}
