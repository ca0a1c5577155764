use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ambient_wadc::case::{build_ground_truth, load_case_file, solve_equilibrium};
use ambient_wadc::control::{actuator_sweep, evaluate_plan, select_actuators, sweep_table_csv, ControlPlan, PlanFile};
use ambient_wadc::estimator::{estimate_from_window, Detrend, EstimatedModel, ModelFile, DEFAULT_RTOL};
use ambient_wadc::modal::{decompose, ModalDecomposition, ModalReport, DEFAULT_WEAK_THRESHOLD};
use ambient_wadc::pipeline::{read_json, run_pipeline, write_atomic, write_json, write_reports, ExperimentConfig};
use ambient_wadc::pmu::{emulate_pmu, read_pmu_csv, read_states_csv, write_states_csv};
use ambient_wadc::sim::{simulate_linear, simulate_nonlinear, ModelTag, SimConfig, Trajectory};
use ambient_wadc::nalgebra::DMatrix;
use ambient_wadc::{Error, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

#[derive(Parser)]
#[command(name = "wadc", version, about = "Ambient state-matrix estimation and damping-control design")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate an ambient trajectory and write it as CSV.
    Simulate {
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 450.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.005)]
        dt: f64,
        /// Override every generator's noise intensity.
        #[arg(long)]
        sigma: Option<f64>,
        /// Integrate the linearized model instead of the nonlinear one.
        #[arg(long)]
        linear: bool,
    },
    /// Decimate a trajectory to PMU rate and add measurement noise.
    Pmu {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        rate: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_angle: f64,
        #[arg(long, default_value_t = 0.0)]
        noise_speed: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the state matrix from a PMU window.
    Estimate {
        #[arg(long)]
        pmu: PathBuf,
        /// Case supplying inertia and damping.
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "mean")]
        detrend: String,
        #[arg(long, default_value_t = DEFAULT_RTOL)]
        rtol: f64,
    },
    /// Modal analysis of an estimated model.
    Modal {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_WEAK_THRESHOLD)]
        weak_threshold: f64,
        /// Also write a plot-ready CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Design a damping controller for one mode.
    Design {
        #[arg(long)]
        model: PathBuf,
        /// 1-based mode index in ascending damping order, or `weakest`.
        #[arg(long, default_value = "weakest")]
        mode: String,
        /// Leftward shift of the target eigenvalue pair, 1/s.
        #[arg(long)]
        shift: f64,
        /// Comma-separated 1-based generator list, or `topN`.
        #[arg(long)]
        actuators: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a plan on the design model and optionally on the truth.
    Evaluate {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Case file (.toml) or model JSON used as reference.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Damping table over the participation ranking, as CSV.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Run a full seeded experiment from a config file.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let body = json!({ "error": "usage", "message": e.to_string().trim(), "exit_code": 2 });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let body = json!({ "error": e.kind(), "message": e.to_string(), "exit_code": e.exit_code() });
            eprintln!("{body}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_model(path: &Path) -> Result<EstimatedModel> {
    EstimatedModel::from_file(&read_json::<ModelFile>(path)?)
}

/// Reference state matrix from a case file or a model JSON.
fn load_reference(path: &Path) -> Result<DMatrix<f64>> {
    if path.extension().is_some_and(|e| e == "toml") {
        let case = load_case_file(path)?;
        let op = solve_equilibrium(&case, &vec![0.0; case.n])?;
        Ok(build_ground_truth(&case, &op)?.a)
    } else {
        Ok(load_model(path)?.a)
    }
}

fn target_pair(dec: &ModalDecomposition, mode: &str) -> Result<usize> {
    let modes = dec.modes();
    if mode == "weakest" {
        return modes
            .first()
            .map(|m| m.pair)
            .ok_or_else(|| Error::Numerical("model has no oscillatory modes".into()));
    }
    let k: usize = mode
        .parse()
        .map_err(|_| Error::Config(format!("--mode must be a positive integer or `weakest`, got `{mode}`")))?;
    if k == 0 || k > modes.len() {
        return Err(Error::ModeIndex {
            index: k,
            available: modes.len(),
        });
    }
    Ok(modes[k - 1].pair)
}

fn parse_actuators(spec: &str, dec: &ModalDecomposition, pair: usize) -> Result<Vec<usize>> {
    let n = dec.generators();
    if let Some(count) = spec.strip_prefix("top") {
        let count: usize = count
            .parse()
            .map_err(|_| Error::Config(format!("bad actuator spec `{spec}`")))?;
        return select_actuators(dec, pair, count);
    }
    spec.split(',')
        .map(|g| {
            let g: usize = g
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad actuator `{g}` in `{spec}`")))?;
            if g == 0 || g > n {
                return Err(Error::Validation(format!("actuator {g} out of range 1..={n}")));
            }
            Ok(g - 1)
        })
        .collect()
}

fn run(command: Command) -> Result<u8> {
    match command {
        Command::Simulate {
            case,
            out,
            seed,
            duration,
            dt,
            sigma,
            linear,
        } => {
            let mut case = load_case_file(&case)?;
            if let Some(s) = sigma {
                case = case.with_sigma(s);
            }
            let op = solve_equilibrium(&case, &vec![0.0; case.n])?;
            let cfg = SimConfig::new(dt, duration, seed);
            let traj = if linear {
                let truth = build_ground_truth(&case, &op)?;
                simulate_linear(&truth.a, &truth.b, &op.state(), &cfg)?
            } else {
                simulate_nonlinear(&case, &op, &cfg)?
            };
            let mut buf = Vec::new();
            write_states_csv(&mut buf, traj.n, traj.dt, &traj.states)?;
            write_atomic(&out, &buf)?;
        }
        Command::Pmu {
            input,
            rate,
            noise_angle,
            noise_speed,
            seed,
            out,
        } => {
            let series = read_states_csv(std::fs::File::open(&input)?)?;
            let traj = Trajectory {
                dt: series.dt,
                n: series.n,
                seed: 0,
                model: ModelTag::Measured,
                states: series.states,
            };
            let window = emulate_pmu(&traj, rate, noise_angle, noise_speed, seed)?;
            let mut buf = Vec::new();
            write_states_csv(&mut buf, window.n, window.dt(), &window.samples)?;
            write_atomic(&out, &buf)?;
        }
        Command::Estimate {
            pmu,
            case,
            out,
            detrend,
            rtol,
        } => {
            let detrend: Detrend = detrend.parse()?;
            let case = load_case_file(&case)?;
            let window = read_pmu_csv(&pmu)?;
            let model = estimate_from_window(&window, &case.inertia, &case.damping, detrend, rtol)?;
            write_json(&out, &model.to_file())?;
        }
        Command::Modal {
            model,
            out,
            weak_threshold,
            csv,
        } => {
            let model = load_model(&model)?;
            let report = ModalReport::build(&decompose(&model.a)?, weak_threshold)?;
            write_json(&out, &report)?;
            if let Some(csv) = csv {
                write_atomic(&csv, report.to_csv().as_bytes())?;
            }
        }
        Command::Design {
            model,
            mode,
            shift,
            actuators,
            out,
        } => {
            let model = load_model(&model)?;
            let dec = decompose(&model.a)?;
            let pair = target_pair(&dec, &mode)?;
            let actuators = parse_actuators(&actuators, &dec, pair)?;
            let plan = ControlPlan::design(&dec, pair, shift, &actuators)?;
            write_json(&out, &plan.to_file())?;
        }
        Command::Evaluate {
            plan,
            model,
            truth,
            out,
            table,
        } => {
            let plan = ControlPlan::from_file(&read_json::<PlanFile>(&plan)?)?;
            let model = load_model(&model)?;
            let dec = decompose(&model.a)?;
            let design = evaluate_plan(&model.a, &plan, &dec)?;
            let reference = match &truth {
                Some(path) => {
                    let a = load_reference(path)?;
                    let dec_ref = decompose(&a)?;
                    let report = evaluate_plan(&a, &plan, &dec_ref)?;
                    Some((a, dec_ref, report))
                }
                None => None,
            };
            let body = json!({
                "design": design,
                "truth": reference.as_ref().map(|r| &r.2),
            });
            write_json(&out, &body)?;
            if let Some(table) = table {
                let pair = dec
                    .nearest_pair(plan.target_eigenvalue)
                    .ok_or_else(|| Error::Numerical("model has no oscillatory modes".into()))?;
                let counts: Vec<usize> = (1..=dec.generators()).collect();
                let rows = actuator_sweep(
                    &model.a,
                    &dec,
                    pair,
                    plan.shift,
                    &counts,
                    reference.as_ref().map(|r| (&r.0, &r.1)),
                    true,
                )?;
                write_atomic(&table, sweep_table_csv(&rows).as_bytes())?;
            }
        }
        Command::Pipeline { config } => {
            let (cfg, text) = ExperimentConfig::load(&config)?;
            let report = run_pipeline(&cfg, &text)?;
            write_reports(&cfg.output_dir, &report)?;
            let s = &report.summary;
            let pct = |v: Option<f64>| v.map(|x| format!("{x:.3}%")).unwrap_or_else(|| "n/a".into());
            println!(
                "seeds ok {} failed {}; median max frequency error {}; median max damping error {}",
                s.seeds_ok,
                s.seeds_failed,
                pct(s.median_max_f_err_pct),
                pct(s.median_max_zeta_err_pct)
            );
            println!("reports written to {}", cfg.output_dir.display());
            if report.all_failed() {
                let first = report.seeds.iter().find_map(|s| s.error.as_ref());
                if let Some(e) = first {
                    eprintln!("{}", json!({ "error": e.kind, "message": e.message, "exit_code": e.exit_code }));
                }
                return Ok(report.exit_code() as u8);
            }
        }
    }
    Ok(0)
}
