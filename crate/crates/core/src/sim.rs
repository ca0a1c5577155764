//! Ambient stochastic simulation of the swing dynamics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::case::{OperatingPoint, PowerCase};
use crate::control::ControlPlan;
use crate::error::{check_len, Error, Result};
use crate::modal::ModalDecomposition;

/// Largest allowed relative-angle excursion from equilibrium, rad.
pub const DIVERGENCE_LIMIT: f64 = std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Speeds first, then angles with the updated speeds.
    #[default]
    SemiImplicit,
    /// Plain Euler–Maruyama on the full state.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub duration: f64,
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Absolute initial state; equilibrium with zero speed deviation if absent.
    #[serde(default)]
    pub initial_state: Option<Vec<f64>>,
}

impl SimConfig {
    pub fn new(dt: f64, duration: f64, seed: u64) -> SimConfig {
        SimConfig {
            dt,
            duration,
            seed,
            scheme: Scheme::SemiImplicit,
            initial_state: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.duration >= self.dt && self.duration.is_finite()) {
            return Err(Error::Config(format!(
                "duration {} must be at least dt {}",
                self.duration, self.dt
            )));
        }
        Ok(())
    }

    /// Number of stored samples, including the initial state.
    pub fn samples(&self) -> usize {
        // tolerate representation error in duration/dt
        (self.duration / self.dt + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Nonlinear,
    Linear,
    ClosedLoop,
    Measured,
}

/// Uniformly sampled states `[δ_1..δ_n, ω_1..ω_n]`, ω as deviation from synchronous speed.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub n: usize,
    pub seed: u64,
    pub model: ModelTag,
    /// Row-major, `len() × 2n`.
    pub states: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len() / (2 * self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = 2 * self.n;
        &self.states[t * w..(t + 1) * w]
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        let w = 2 * self.n;
        self.states.iter().skip(c).step_by(w).copied().collect()
    }

    pub fn time(&self, t: usize) -> f64 {
        t as f64 * self.dt
    }

    pub fn duration(&self) -> f64 {
        self.time(self.len().saturating_sub(1))
    }
}

/// One independent normal stream per channel, keyed by `(seed, stream)`.
pub(crate) struct NoiseStreams {
    rngs: Vec<ChaCha8Rng>,
}

impl NoiseStreams {
    pub(crate) fn new(seed: u64, first_stream: u64, channels: usize) -> NoiseStreams {
        let rngs = (0..channels)
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(first_stream + c as u64);
                rng
            })
            .collect();
        NoiseStreams { rngs }
    }

    pub(crate) fn fill(&mut self, out: &mut [f64]) {
        for (o, rng) in out.iter_mut().zip(self.rngs.iter_mut()) {
            *o = StandardNormal.sample(rng);
        }
    }
}

/// Electrical power evaluator with the admittance split into `Y cos φ` and `Y sin φ`.
struct PowerFlow {
    emf: Vec<f64>,
    gc: DMatrix<f64>,
    gs: DMatrix<f64>,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl PowerFlow {
    fn new(case: &PowerCase) -> PowerFlow {
        let n = case.n;
        PowerFlow {
            emf: case.emf.clone(),
            gc: DMatrix::from_fn(n, n, |i, j| case.y_mag[(i, j)] * case.y_ang[(i, j)].cos()),
            gs: DMatrix::from_fn(n, n, |i, j| case.y_mag[(i, j)] * case.y_ang[(i, j)].sin()),
            cos: vec![0.0; n],
            sin: vec![0.0; n],
        }
    }

    /// `P_e,i = E_i Σ_j E_j Y_ij cos(δ_i − δ_j − φ_ij)`.
    fn eval(&mut self, delta: &[f64], out: &mut [f64]) {
        let n = self.emf.len();
        for (i, d) in delta.iter().enumerate().take(n) {
            let (s, c) = d.sin_cos();
            self.sin[i] = s;
            self.cos[i] = c;
        }
        for (i, pe) in out.iter_mut().enumerate().take(n) {
            let mut re = 0.0;
            let mut im = 0.0;
            for j in 0..n {
                let (gc, gs) = (self.gc[(i, j)], self.gs[(i, j)]);
                let ej = self.emf[j];
                re += ej * (gc * self.cos[j] - gs * self.sin[j]);
                im += ej * (gc * self.sin[j] + gs * self.cos[j]);
            }
            *pe = self.emf[i] * (self.cos[i] * re + self.sin[i] * im);
        }
    }
}

/// Index of the first generator whose angle, relative to the machine average,
/// has left the small-signal region around `reference`.
fn diverged(delta: &[f64], reference: &[f64]) -> Option<usize> {
    let n = delta.len() as f64;
    let mean: f64 = delta.iter().zip(reference).map(|(d, r)| d - r).sum::<f64>() / n;
    delta
        .iter()
        .zip(reference)
        .position(|(d, r)| !((d - r - mean).abs() <= DIVERGENCE_LIMIT))
}

fn initial_state(cfg: &SimConfig, origin: &[f64]) -> Result<Vec<f64>> {
    match &cfg.initial_state {
        Some(x0) => {
            check_len("initial state", origin.len(), x0.len())?;
            if x0.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("initial state".into()));
            }
            Ok(x0.clone())
        }
        None => Ok(origin.to_vec()),
    }
}

fn guard(state: &[f64], reference: &[f64], n: usize, step: usize, dt: f64) -> Result<()> {
    let bad = if state.iter().any(|v| !v.is_finite()) {
        state.iter().position(|v| !v.is_finite()).map(|c| c % n)
    } else {
        diverged(&state[..n], &reference[..n])
    };
    match bad {
        Some(g) => Err(Error::Divergence {
            step,
            time: step as f64 * dt,
            generator: g + 1,
        }),
        None => Ok(()),
    }
}

fn check_operating_point(case: &PowerCase, op: &OperatingPoint) -> Result<()> {
    if !op.converged {
        return Err(Error::Validation("operating point has not converged".into()));
    }
    check_len("operating point", case.n, op.delta_star.len())
}

/// Nonlinear swing dynamics with optional linear feedback `f = F (x − x*)`
/// added to the state derivative.
fn integrate_swing(
    case: &PowerCase,
    op: &OperatingPoint,
    feedback: Option<&DMatrix<f64>>,
    x0: Vec<f64>,
    cfg: &SimConfig,
    model: ModelTag,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = case.n;
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let steps = cfg.samples();
    let origin = op.state();
    let pm = op.balanced_mech_power(case);
    let noise_scale: Vec<f64> = case
        .noise_gain()
        .iter()
        .zip(&case.inertia)
        .map(|(g, m)| g / m * sqdt)
        .collect();
    let noisy = noise_scale.iter().any(|&s| s != 0.0);
    let mut flow = PowerFlow::new(case);
    let mut noise = NoiseStreams::new(cfg.seed, 0, n);
    let mut xi = vec![0.0; n];
    let mut pe = vec![0.0; n];
    let mut f = vec![0.0; 2 * n];
    let mut dev = vec![0.0; 2 * n];

    let mut x = x0;
    guard(&x, &origin, n, 0, dt)?;
    let mut states = Vec::with_capacity(steps * 2 * n);
    states.extend_from_slice(&x);
    for step in 1..steps {
        flow.eval(&x[..n], &mut pe);
        if noisy {
            noise.fill(&mut xi);
        }
        if let Some(fb) = feedback {
            for k in 0..2 * n {
                dev[k] = x[k] - origin[k];
            }
            for r in 0..2 * n {
                f[r] = (0..2 * n).map(|c| fb[(r, c)] * dev[c]).sum();
            }
        }
        match cfg.scheme {
            Scheme::SemiImplicit => {
                for i in 0..n {
                    let accel = (pm[i] - pe[i] - case.damping[i] * x[n + i]) / case.inertia[i];
                    x[n + i] += dt * (accel + f[n + i]) - noise_scale[i] * xi[i];
                }
                for i in 0..n {
                    x[i] += dt * (x[n + i] + f[i]);
                }
            }
            Scheme::Explicit => {
                for i in 0..n {
                    let accel = (pm[i] - pe[i] - case.damping[i] * x[n + i]) / case.inertia[i];
                    x[i] += dt * (x[n + i] + f[i]);
                    x[n + i] += dt * (accel + f[n + i]) - noise_scale[i] * xi[i];
                }
            }
        }
        guard(&x, &origin, n, step, dt)?;
        states.extend_from_slice(&x);
    }
    Ok(Trajectory {
        dt,
        n,
        seed: cfg.seed,
        model,
        states,
    })
}

/// Ambient trajectory of the nonlinear swing SDE.
pub fn simulate_nonlinear(case: &PowerCase, op: &OperatingPoint, cfg: &SimConfig) -> Result<Trajectory> {
    check_operating_point(case, op)?;
    let x0 = initial_state(cfg, &op.state())?;
    integrate_swing(case, op, None, x0, cfg, ModelTag::Nonlinear)
}

/// Nonlinear trajectory under the feedback of `plan`, started at `x* + excitation`.
pub fn simulate_closed_loop(
    case: &PowerCase,
    op: &OperatingPoint,
    plan: &ControlPlan,
    excitation: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory> {
    check_operating_point(case, op)?;
    check_len("control plan states", 2 * case.n, plan.gain.nrows())?;
    check_len("excitation", 2 * case.n, excitation.len())?;
    let x0: Vec<f64> = op.state().iter().zip(excitation).map(|(a, b)| a + b).collect();
    let fb = plan.feedback();
    integrate_swing(case, op, Some(&fb), x0, cfg, ModelTag::ClosedLoop)
}

/// `ε · Re(φ_{k₁})` for the oscillatory pair `pair`.
pub fn mode_excitation(dec: &ModalDecomposition, pair: usize, epsilon: f64) -> Result<Vec<f64>> {
    let (k1, _) = dec.pair(pair)?;
    Ok(dec.right.column(k1).iter().map(|c| epsilon * c.re).collect())
}

/// Linear Ornstein–Uhlenbeck process `dx = A x dt + B dW` around `origin`.
///
/// States are reported as `origin + x`. With the semi-implicit scheme the first
/// half of the state is advanced using the already-updated second half.
pub fn simulate_linear(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    origin: &[f64],
    cfg: &SimConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let dim = a.nrows();
    check_len("state matrix columns", dim, a.ncols())?;
    check_len("noise matrix rows", dim, b.nrows())?;
    check_len("origin", dim, origin.len())?;
    if !dim.is_multiple_of(2) {
        return Err(Error::Dimension {
            what: "state dimension (must be even)",
            expected: dim + 1,
            found: dim,
        });
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("linear model".into()));
    }
    let n = dim / 2;
    let dt = cfg.dt;
    let sqdt = dt.sqrt();
    let inputs = b.ncols();
    let bs = b * sqdt;
    let noisy = bs.iter().any(|&v| v != 0.0);
    let mut noise = NoiseStreams::new(cfg.seed, 0, inputs);
    let mut xi = vec![0.0; inputs];
    let mut x: Vec<f64> = initial_state(cfg, origin)?
        .iter()
        .zip(origin)
        .map(|(s, o)| s - o)
        .collect();
    let mut next = vec![0.0; dim];
    let steps = cfg.samples();
    let mut states = Vec::with_capacity(steps * dim);
    let push = |states: &mut Vec<f64>, x: &[f64]| states.extend(x.iter().zip(origin).map(|(v, o)| v + o));
    let zero = vec![0.0; dim];
    guard(&x, &zero, n, 0, dt)?;
    push(&mut states, &x);
    for step in 1..steps {
        if noisy {
            noise.fill(&mut xi);
        }
        let kick = |r: usize| -> f64 { (0..inputs).map(|c| bs[(r, c)] * xi[c]).sum() };
        match cfg.scheme {
            Scheme::SemiImplicit => {
                for r in n..dim {
                    let drift: f64 = (0..dim).map(|c| a[(r, c)] * x[c]).sum();
                    next[r] = x[r] + dt * drift + kick(r);
                }
                for r in 0..n {
                    let drift: f64 = (0..n).map(|c| a[(r, c)] * x[c]).sum::<f64>()
                        + (n..dim).map(|c| a[(r, c)] * next[c]).sum::<f64>();
                    next[r] = x[r] + dt * drift + kick(r);
                }
            }
            Scheme::Explicit => {
                for r in 0..dim {
                    let drift: f64 = (0..dim).map(|c| a[(r, c)] * x[c]).sum();
                    next[r] = x[r] + dt * drift + kick(r);
                }
            }
        }
        std::mem::swap(&mut x, &mut next);
        guard(&x, &zero, n, step, dt)?;
        push(&mut states, &x);
    }
    Ok(Trajectory {
        dt,
        n,
        seed: cfg.seed,
        model: ModelTag::Linear,
        states,
    })
}
