//! PMU emulation and state-series CSV exchange.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::{NoiseStreams, Trajectory};

/// Stream offset separating measurement noise from process noise.
const PMU_STREAM_BASE: u64 = 1 << 32;

/// Decimated, optionally noisy measurements `[δ_1..δ_n, ω_1..ω_n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PmuWindow {
    pub sample_rate: f64,
    pub n: usize,
    /// Row-major, `len() × 2n`.
    pub samples: Vec<f64>,
    pub noise_std_angle: f64,
    pub noise_std_speed: f64,
    pub seed: u64,
}

impl PmuWindow {
    pub fn new(sample_rate: f64, n: usize, samples: Vec<f64>) -> Result<PmuWindow> {
        if n == 0 || !samples.len().is_multiple_of(2 * n) {
            return Err(Error::Dimension {
                what: "PMU samples (multiple of 2n)",
                expected: 2 * n.max(1) * (samples.len() / (2 * n.max(1))),
                found: samples.len(),
            });
        }
        if !(sample_rate > 0.0 && sample_rate.is_finite()) {
            return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
        }
        Ok(PmuWindow {
            sample_rate,
            n,
            samples,
            noise_std_angle: 0.0,
            noise_std_speed: 0.0,
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len() / (2 * self.n)
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let w = 2 * self.n;
        &self.samples[t * w..(t + 1) * w]
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn duration(&self) -> f64 {
        self.len().saturating_sub(1) as f64 * self.dt()
    }
}

/// Integer decimation stride for `sample_rate` from a trajectory step `dt`.
pub fn decimation_stride(dt: f64, sample_rate: f64) -> Result<usize> {
    if !(sample_rate > 0.0 && sample_rate.is_finite()) {
        return Err(Error::Config(format!("sample rate must be positive, got {sample_rate}")));
    }
    let ratio = 1.0 / (dt * sample_rate);
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio.max(1.0) {
        return Err(Error::Config(format!(
            "sample rate {sample_rate} Hz is not an integer divisor of the simulation rate {} Hz",
            1.0 / dt
        )));
    }
    Ok(stride as usize)
}

/// Decimates `traj` to `sample_rate` and adds independent Gaussian noise per channel.
pub fn emulate_pmu(
    traj: &Trajectory,
    sample_rate: f64,
    noise_std_angle: f64,
    noise_std_speed: f64,
    seed: u64,
) -> Result<PmuWindow> {
    let stride = decimation_stride(traj.dt, sample_rate)?;
    if !(noise_std_angle >= 0.0 && noise_std_speed >= 0.0) {
        return Err(Error::Config("noise standard deviations must be non-negative".into()));
    }
    let n = traj.n;
    let w = 2 * n;
    let rows = traj.len().div_ceil(stride);
    if rows < 2 {
        return Err(Error::InsufficientData { samples: rows });
    }
    let mut noise = NoiseStreams::new(seed, PMU_STREAM_BASE, w);
    let noisy = noise_std_angle > 0.0 || noise_std_speed > 0.0;
    let mut xi = vec![0.0; w];
    let mut samples = Vec::with_capacity(rows * w);
    for t in (0..traj.len()).step_by(stride) {
        let row = traj.row(t);
        if noisy {
            noise.fill(&mut xi);
            for c in 0..w {
                let std = if c < n { noise_std_angle } else { noise_std_speed };
                samples.push(row[c] + std * xi[c]);
            }
        } else {
            samples.extend_from_slice(row);
        }
    }
    Ok(PmuWindow {
        sample_rate,
        n,
        samples,
        noise_std_angle,
        noise_std_speed,
        seed,
    })
}

fn header(n: usize) -> Vec<String> {
    std::iter::once("t".to_string())
        .chain((1..=n).map(|i| format!("delta_{i}")))
        .chain((1..=n).map(|i| format!("omega_{i}")))
        .collect()
}

/// Writes `t,delta_1..delta_n,omega_1..omega_n` rows with 17 significant digits.
pub fn write_states_csv<W: Write>(out: W, n: usize, dt: f64, rows: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(header(n))?;
    let w = 2 * n;
    let mut record = Vec::with_capacity(w + 1);
    for (t, row) in rows.chunks_exact(w).enumerate() {
        record.clear();
        record.push(format!("{:.16e}", t as f64 * dt));
        record.extend(row.iter().map(|v| format!("{v:.16e}")));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_states_csv(std::io::BufWriter::new(file), traj.n, traj.dt, &traj.states)
}

pub fn write_pmu_csv(path: &Path, window: &PmuWindow) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_states_csv(std::io::BufWriter::new(file), window.n, window.dt(), &window.samples)
}

/// Parsed state series: step, generator count and row-major states.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    pub dt: f64,
    pub n: usize,
    pub states: Vec<f64>,
}

/// Reads the state CSV layout; sampling must be uniform to 1e-6 relative.
pub fn read_states_csv<R: Read>(input: R) -> Result<StateSeries> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let cols = headers.len();
    if cols < 5 || cols % 2 == 0 {
        return Err(Error::Parse {
            field: "header".into(),
            message: format!("expected t plus 2n state columns with n >= 2, found {cols} columns"),
        });
    }
    let n = (cols - 1) / 2;
    let expected = header(n);
    for (i, (got, want)) in headers.iter().zip(&expected).enumerate() {
        if got.trim() != want {
            return Err(Error::Parse {
                field: "header".into(),
                message: format!("column {} is `{}`, expected `{want}`", i + 1, got.trim()),
            });
        }
    }
    let mut times = Vec::new();
    let mut states = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Parse {
                field: expected.get(c).cloned().unwrap_or_default(),
                message: format!("row {}: `{field}` is not a number", line + 2),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    field: expected[c].clone(),
                    message: format!("row {}: non-finite value", line + 2),
                });
            }
            if c == 0 {
                times.push(v);
            } else {
                states.push(v);
            }
        }
    }
    if times.len() < 2 {
        return Err(Error::InsufficientData { samples: times.len() });
    }
    let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::Parse {
            field: "t".into(),
            message: "time column must be strictly increasing".into(),
        });
    }
    for (k, pair) in times.windows(2).enumerate() {
        if ((pair[1] - pair[0]) - dt).abs() > 1e-6 * dt {
            return Err(Error::Parse {
                field: "t".into(),
                message: format!("non-uniform sampling at row {}", k + 3),
            });
        }
    }
    Ok(StateSeries { dt, n, states })
}

/// Imports an external measurement window; the sample rate is inferred from `t`.
pub fn read_pmu_csv(path: &Path) -> Result<PmuWindow> {
    let series = read_states_csv(std::fs::File::open(path)?)?;
    PmuWindow::new(1.0 / series.dt, series.n, series.states)
}
