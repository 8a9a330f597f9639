use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

/// A sampled voltage trace on a time grid that starts at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waveform {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum WaveformError {
    #[error("times and values differ in length ({times} vs {values})")]
    LengthMismatch { times: usize, values: usize },
    #[error("time grid must start at 0 and increase strictly")]
    BadGrid,
    #[error("malformed CSV at line {line}: {reason}")]
    Csv { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub const CSV_HEADER: &str = "time_s,voltage_v";

impl Waveform {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self, WaveformError> {
        if times.len() != values.len() {
            return Err(WaveformError::LengthMismatch {
                times: times.len(),
                values: values.len(),
            });
        }
        if !is_valid_grid(&times) || times.first().is_some_and(|&t| t != 0.0) {
            return Err(WaveformError::BadGrid);
        }
        Ok(Self { times, values })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Uniform grid `0, dt, 2dt, …, steps·dt`.
    pub fn uniform_grid(dt: f64, steps: usize) -> Vec<f64> {
        (0..=steps).map(|k| k as f64 * dt).collect()
    }

    pub fn max_abs_diff(&self, other: &Waveform) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for (t, v) in self.times.iter().zip(&self.values) {
            writeln!(out, "{t:.16e},{v:.16e}")?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Self, WaveformError> {
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != CSV_HEADER {
                    return Err(WaveformError::Csv {
                        line: 1,
                        reason: format!("expected header `{CSV_HEADER}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64, WaveformError> {
                s.ok_or_else(|| WaveformError::Csv {
                    line: i + 1,
                    reason: "missing column".into(),
                })?
                .trim()
                .parse::<f64>()
                .map_err(|e| WaveformError::Csv {
                    line: i + 1,
                    reason: e.to_string(),
                })
            };
            times.push(parse(parts.next())?);
            values.push(parse(parts.next())?);
        }
        Waveform::new(times, values)
    }
}

/// Nonnegative, finite and strictly increasing.
pub fn is_valid_grid(times: &[f64]) -> bool {
    times.iter().all(|t| t.is_finite() && *t >= 0.0) && times.windows(2).all(|w| w[1] > w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip_is_exact() {
        let w = Waveform::new(vec![0.0, 1e-11, 2e-11], vec![0.0, 0.123456789012345678, 1.1])
            .unwrap();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("time_s,voltage_v\n"));
        assert!(text.lines().nth(2).unwrap().contains("1.2345678901234568e-1"));
        assert_eq!(Waveform::read_csv(&buf[..]).unwrap(), w);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Waveform::new(vec![0.0, 0.0], vec![1.0, 1.0]).is_err());
        assert!(Waveform::new(vec![1.0, 2.0], vec![1.0, 1.0]).is_err());
        assert!(Waveform::new(vec![0.0], vec![]).is_err());
    }
}
