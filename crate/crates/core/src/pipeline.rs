//! Seeded end-to-end experiments: simulate, measure, estimate, analyse, design, evaluate.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::case::{build_ground_truth, load_case_file, solve_equilibrium, OperatingPoint, PowerCase};
use crate::control::{actuator_sweep, SweepRow};
use crate::error::{Error, Result};
use crate::estimator::{
    assemble_state_matrix, estimate_from_window, estimate_jacobian, theoretical_covariance, Detrend,
    EstimatedModel, WindowMeta, DEFAULT_RTOL,
};
use crate::exec;
use crate::linalg::PinvInfo;
use crate::modal::{decompose, ModalDecomposition, ModeSummary};
use crate::pmu::emulate_pmu;
use crate::sim::{simulate_linear, simulate_nonlinear, Scheme, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SimModel {
    #[default]
    Nonlinear,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub duration: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub seeds: Vec<u64>,
    /// Overrides every generator's noise intensity when present.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub model: SimModel,
    #[serde(default)]
    pub scheme: Scheme,
}

fn default_dt() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmuSection {
    pub rate: f64,
    #[serde(default)]
    pub noise_angle: f64,
    #[serde(default)]
    pub noise_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationSection {
    #[serde(default)]
    pub detrend: Detrend,
    #[serde(default = "default_rtol")]
    pub rtol: f64,
    /// Use the exact stationary covariance instead of simulated data.
    #[serde(default)]
    pub exact_covariance: bool,
}

fn default_rtol() -> f64 {
    DEFAULT_RTOL
}

impl Default for EstimationSection {
    fn default() -> Self {
        EstimationSection {
            detrend: Detrend::default(),
            rtol: DEFAULT_RTOL,
            exact_covariance: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetRule {
    Weakest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Rule(TargetRule),
    Match { frequency_hz: f64, zeta: f64 },
}

impl Default for Target {
    fn default() -> Self {
        Target::Rule(TargetRule::Weakest)
    }
}

impl Target {
    /// Pair index in `dec` selected by this rule.
    pub fn select(&self, dec: &ModalDecomposition) -> Result<usize> {
        let pair = match *self {
            Target::Rule(TargetRule::Weakest) => dec.modes().first().map(|m| m.pair),
            Target::Match { frequency_hz, zeta } => dec.pair_matching(frequency_hz, zeta),
        };
        pair.ok_or_else(|| Error::Numerical("model has no oscillatory modes".into()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSection {
    #[serde(default)]
    pub target: Target,
    pub shift: f64,
    pub actuator_counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths resolve against the config file's directory.
    pub case: PathBuf,
    pub output_dir: PathBuf,
    /// Run seeds on the thread pool.
    #[serde(default = "default_true")]
    pub parallel: bool,
    pub sim: SimSection,
    pub pmu: PmuSection,
    #[serde(default)]
    pub estimation: EstimationSection,
    pub control: ControlSection,
}

fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads a config and resolves its relative paths.
    pub fn load(path: &Path) -> Result<(ExperimentConfig, String)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = ExperimentConfig::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.case.is_relative() {
            cfg.case = base.join(&cfg.case);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok((cfg, text))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sim.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if !self.case.exists() {
            return Err(Error::Config(format!("case file {} does not exist", self.case.display())));
        }
        if self.control.actuator_counts.is_empty() {
            return Err(Error::Config("actuator_counts is empty".into()));
        }
        if let Some(s) = self.sim.sigma {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("sigma override must be non-negative, got {s}")));
            }
        }
        if !(self.control.shift.is_finite()) {
            return Err(Error::Config("shift must be finite".into()));
        }
        SimConfig::new(self.sim.dt, self.sim.duration, 0).validate()
    }
}

/// Estimated-vs-true comparison of one oscillatory mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeError {
    pub f_true_hz: f64,
    pub zeta_true: f64,
    pub f_est_hz: f64,
    pub zeta_est: f64,
    pub f_err_pct: f64,
    pub zeta_err_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageError {
    pub kind: String,
    pub message: String,
    pub exit_code: i32,
}

impl From<&Error> for StageError {
    fn from(e: &Error) -> Self {
        StageError {
            kind: e.kind().to_string(),
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StageError>,
    /// Covariance, Jacobian and state-matrix assembly, in milliseconds.
    pub estimation_time_ms: f64,
    pub conditioning: Option<PinvInfo>,
    pub mode_errors: Vec<ModeError>,
    /// Largest per-mode errors, percent.
    pub max_f_err_pct: Option<f64>,
    pub max_zeta_err_pct: Option<f64>,
    pub target_f_hz: Option<f64>,
    pub target_zeta: Option<f64>,
    pub sweep: Vec<SweepRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeRow {
    /// 1-based, ascending damping.
    pub index: usize,
    pub f_hz: f64,
    pub zeta: f64,
    pub re: f64,
    pub im: f64,
}

impl From<(usize, &ModeSummary)> for ModeRow {
    fn from((i, m): (usize, &ModeSummary)) -> Self {
        ModeRow {
            index: i + 1,
            f_hz: m.frequency_hz,
            zeta: m.damping_ratio,
            re: m.eigenvalue.re,
            im: m.eigenvalue.im,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub median_max_f_err_pct: Option<f64>,
    pub median_max_zeta_err_pct: Option<f64>,
    pub median_estimation_time_ms: Option<f64>,
    /// Median over seeds of the closed-loop target damping (plans from the estimate, evaluated on truth).
    pub median_zeta_by_count: Vec<(usize, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub toolkit_version: String,
    pub config_sha256: String,
    pub case: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub provenance: Provenance,
    pub operating_point: OperatingPoint,
    pub true_modes: Vec<ModeRow>,
    /// Sweep with plans designed on the true model.
    pub reference_sweep: Vec<SweepRow>,
    pub seeds: Vec<SeedReport>,
    pub summary: Summary,
}

impl RunReport {
    pub fn all_failed(&self) -> bool {
        self.seeds.iter().all(|s| s.error.is_some())
    }

    /// Exit code of the first failure when every seed failed, else 0.
    pub fn exit_code(&self) -> i32 {
        if self.all_failed() {
            self.seeds
                .iter()
                .find_map(|s| s.error.as_ref().map(|e| e.exit_code))
                .unwrap_or(3)
        } else {
            0
        }
    }

    /// Copy with timing fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        for s in &mut r.seeds {
            s.estimation_time_ms = 0.0;
        }
        r.summary.median_estimation_time_ms = None;
        r
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

pub fn config_hash(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-mode errors of `estimated` against every oscillatory mode of `truth`.
pub fn compare_modes(truth: &ModalDecomposition, estimated: &ModalDecomposition) -> Vec<ModeError> {
    truth
        .modes()
        .iter()
        .filter_map(|m| {
            let p = estimated.nearest_pair(m.eigenvalue)?;
            let k = estimated.pairs[p].0;
            let (f, z) = (estimated.frequency_hz[k], estimated.damping_ratio[k]);
            Some(ModeError {
                f_true_hz: m.frequency_hz,
                zeta_true: m.damping_ratio,
                f_est_hz: f,
                zeta_est: z,
                f_err_pct: 100.0 * (f - m.frequency_hz).abs() / m.frequency_hz,
                zeta_err_pct: 100.0 * (z - m.damping_ratio).abs() / m.damping_ratio.abs(),
            })
        })
        .collect()
}

/// Loaded case with its operating point and true model.
pub struct Prepared {
    pub case: PowerCase,
    pub op: OperatingPoint,
    pub a_true: DMatrix<f64>,
    pub b_true: DMatrix<f64>,
    pub dec_true: ModalDecomposition,
}

pub fn prepare(case_path: &Path, sigma: Option<f64>) -> Result<Prepared> {
    let mut case = load_case_file(case_path)?;
    if let Some(s) = sigma {
        case = case.with_sigma(s);
    }
    let op = solve_equilibrium(&case, &vec![0.0; case.n])?;
    let truth = build_ground_truth(&case, &op)?;
    let dec_true = decompose(&truth.a)?;
    Ok(Prepared {
        case,
        op,
        a_true: truth.a,
        b_true: truth.b,
        dec_true,
    })
}

fn estimate_for_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> Result<(EstimatedModel, f64)> {
    let case = &prep.case;
    if cfg.estimation.exact_covariance {
        let start = Instant::now();
        let cov = theoretical_covariance(&prep.a_true, &prep.b_true)?;
        let est = estimate_jacobian(&cov, &case.inertia, &case.damping, cfg.estimation.rtol)?;
        let meta = WindowMeta {
            samples: 0,
            sample_rate: 0.0,
            duration_s: 0.0,
            detrend: Detrend::None,
            rtol: cfg.estimation.rtol,
            exact: true,
        };
        let model = assemble_state_matrix(&est, &case.inertia, &case.damping, meta)?;
        return Ok((model, start.elapsed().as_secs_f64() * 1e3));
    }
    let mut sim = SimConfig::new(cfg.sim.dt, cfg.sim.duration, seed);
    sim.scheme = cfg.sim.scheme;
    let traj = match cfg.sim.model {
        SimModel::Nonlinear => simulate_nonlinear(case, &prep.op, &sim)?,
        SimModel::Linear => simulate_linear(&prep.a_true, &prep.b_true, &prep.op.state(), &sim)?,
    };
    let window = emulate_pmu(&traj, cfg.pmu.rate, cfg.pmu.noise_angle, cfg.pmu.noise_speed, seed)?;
    drop(traj);
    let start = Instant::now();
    let model = estimate_from_window(
        &window,
        &case.inertia,
        &case.damping,
        cfg.estimation.detrend,
        cfg.estimation.rtol,
    )?;
    Ok((model, start.elapsed().as_secs_f64() * 1e3))
}

fn run_seed(cfg: &ExperimentConfig, prep: &Prepared, seed: u64) -> SeedReport {
    let mut report = SeedReport {
        seed,
        error: None,
        estimation_time_ms: 0.0,
        conditioning: None,
        mode_errors: Vec::new(),
        max_f_err_pct: None,
        max_zeta_err_pct: None,
        target_f_hz: None,
        target_zeta: None,
        sweep: Vec::new(),
    };
    let outcome = (|| -> Result<()> {
        let (model, ms) = estimate_for_seed(cfg, prep, seed)?;
        report.estimation_time_ms = ms;
        report.conditioning = Some(model.conditioning);
        let dec = decompose(&model.a)?;
        report.mode_errors = compare_modes(&prep.dec_true, &dec);
        report.max_f_err_pct = Some(report.mode_errors.iter().map(|e| e.f_err_pct).fold(0.0, f64::max));
        report.max_zeta_err_pct = Some(report.mode_errors.iter().map(|e| e.zeta_err_pct).fold(0.0, f64::max));
        let pair = cfg.control.target.select(&dec)?;
        let k1 = dec.pairs[pair].0;
        report.target_f_hz = Some(dec.frequency_hz[k1]);
        report.target_zeta = Some(dec.damping_ratio[k1]);
        report.sweep = actuator_sweep(
            &model.a,
            &dec,
            pair,
            cfg.control.shift,
            &cfg.control.actuator_counts,
            Some((&prep.a_true, &prep.dec_true)),
            false,
        )?;
        Ok(())
    })();
    if let Err(e) = outcome {
        report.error = Some(StageError::from(&e));
    }
    report
}

/// Runs every seed and aggregates the results. Seed failures are recorded, not raised.
pub fn run_pipeline(cfg: &ExperimentConfig, config_text: &str) -> Result<RunReport> {
    cfg.validate()?;
    let prep = prepare(&cfg.case, cfg.sim.sigma)?;
    let pair_true = cfg.control.target.select(&prep.dec_true)?;
    let reference_sweep = actuator_sweep(
        &prep.a_true,
        &prep.dec_true,
        pair_true,
        cfg.control.shift,
        &cfg.control.actuator_counts,
        None,
        cfg.parallel,
    )?;
    let run = |&seed: &u64| run_seed(cfg, &prep, seed);
    let seeds = if cfg.parallel {
        exec::map(&cfg.sim.seeds, run)
    } else {
        exec::map_sequential(&cfg.sim.seeds, run)
    };
    let ok: Vec<&SeedReport> = seeds.iter().filter(|s| s.error.is_none()).collect();
    let median_zeta_by_count = cfg
        .control
        .actuator_counts
        .iter()
        .enumerate()
        .map(|(i, &count)| {
            let zs: Vec<f64> = ok
                .iter()
                .filter_map(|s| s.sweep.get(i).and_then(|r| r.zeta_reference))
                .collect();
            (count, median(&zs))
        })
        .collect();
    let summary = Summary {
        seeds_ok: ok.len(),
        seeds_failed: seeds.len() - ok.len(),
        median_max_f_err_pct: median(&ok.iter().filter_map(|s| s.max_f_err_pct).collect::<Vec<_>>()),
        median_max_zeta_err_pct: median(&ok.iter().filter_map(|s| s.max_zeta_err_pct).collect::<Vec<_>>()),
        median_estimation_time_ms: median(&ok.iter().map(|s| s.estimation_time_ms).collect::<Vec<_>>()),
        median_zeta_by_count,
    };
    Ok(RunReport {
        provenance: Provenance {
            toolkit_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: config_hash(config_text),
            case: cfg.case.display().to_string(),
            seeds: cfg.sim.seeds.clone(),
        },
        operating_point: prep.op.clone(),
        true_modes: prep.dec_true.modes().iter().enumerate().map(ModeRow::from).collect(),
        reference_sweep,
        seeds,
        summary,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("invalid output path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn seeds_csv(report: &RunReport) -> String {
    let mut out = String::from("seed,status,estimation_time_ms,max_f_err_pct,max_zeta_err_pct,target_f_hz,target_zeta\n");
    for s in &report.seeds {
        let status = s.error.as_ref().map(|e| e.kind.as_str()).unwrap_or("ok");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{},{},{},{}\n",
            s.seed,
            status,
            s.estimation_time_ms,
            opt(s.max_f_err_pct),
            opt(s.max_zeta_err_pct),
            opt(s.target_f_hz),
            opt(s.target_zeta)
        ));
    }
    out
}

fn modes_csv(report: &RunReport) -> String {
    let mut out = String::from("seed,mode,f_true_hz,zeta_true,f_est_hz,zeta_est,f_err_pct,zeta_err_pct\n");
    for s in &report.seeds {
        for (i, e) in s.mode_errors.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{:.8},{:.8},{:.8},{:.8},{:.6},{:.6}\n",
                s.seed,
                i + 1,
                e.f_true_hz,
                e.zeta_true,
                e.f_est_hz,
                e.zeta_est,
                e.f_err_pct,
                e.zeta_err_pct
            ));
        }
    }
    out
}

fn table_csv(report: &RunReport) -> String {
    let mut out = String::from("count,actuators_true_design,zeta_true_design_percent,median_zeta_estimated_design_percent\n");
    for (row, (_, med)) in report.reference_sweep.iter().zip(&report.summary.median_zeta_by_count) {
        let set = row.actuators.iter().map(|g| format!("G{g}")).collect::<Vec<_>>().join(" ");
        let med = med.map(|z| format!("{:.4}", 100.0 * z)).unwrap_or_default();
        out.push_str(&format!("{},{},{:.4},{}\n", row.count, set, 100.0 * row.zeta_design, med));
    }
    out
}

/// Writes `report.json`, `seeds.csv`, `modes.csv` and `table.csv` into `dir`.
pub fn write_reports(dir: &Path, report: &RunReport) -> Result<Vec<PathBuf>> {
    let files = [
        ("seeds.csv", seeds_csv(report)),
        ("modes.csv", modes_csv(report)),
        ("table.csv", table_csv(report)),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = dir.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    // the canonical report goes last so its presence implies the others are complete
    let path = dir.join("report.json");
    write_json(&path, report)?;
    written.push(path);
    Ok(written)
}
