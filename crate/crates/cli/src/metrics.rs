use std::fs::File;
use std::path::Path;
use std::time::Instant;

use bsac_core::agent::{EpisodeRecord, EvalRecord};

use crate::CliError;

pub const METRICS_HEADER: [&str; 10] = [
    "env_step",
    "episode",
    "episode_return",
    "avg_return_100",
    "loss_v",
    "loss_q1",
    "loss_q2",
    "loss_pi",
    "mean_sub_entropy",
    "wall_ms",
];

pub const EVALS_HEADER: [&str; 6] = ["env_step", "mean_return", "std_return", "min_return", "max_return", "episodes"];

/// One row per finished training episode.
pub struct MetricsWriter {
    out: csv::Writer<File>,
    start: Instant,
    strip_timing: bool,
    flush_every: u64,
    pending: u64,
}

impl MetricsWriter {
    /// With `strip_timing`, `wall_ms` is written as 0 so the file is
    /// byte-comparable across runs.
    pub fn create(path: &Path, flush_every: u64, strip_timing: bool) -> Result<Self, CliError> {
        let mut out = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        out.write_record(METRICS_HEADER).map_err(csv_err)?;
        out.flush().map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            out,
            start: Instant::now(),
            strip_timing,
            flush_every: flush_every.max(1),
            pending: 0,
        })
    }

    /// Loss columns are 0 until the first gradient update.
    pub fn write(&mut self, r: &EpisodeRecord) -> Result<(), CliError> {
        let (v, q1, q2, pi, h) = match &r.loss {
            Some(l) => (l.loss_v, l.loss_q1, l.loss_q2, l.loss_pi, l.mean_sub_entropy),
            None => (0.0, 0.0, 0.0, 0.0, 0.0),
        };
        let wall_ms = if self.strip_timing { 0 } else { self.start.elapsed().as_millis() };
        self.out
            .write_record([
                r.env_step.to_string(),
                r.episode.to_string(),
                r.episode_return.to_string(),
                r.avg_return_100.to_string(),
                v.to_string(),
                q1.to_string(),
                q2.to_string(),
                pi.to_string(),
                h.to_string(),
                wall_ms.to_string(),
            ])
            .map_err(csv_err)?;
        self.pending += 1;
        if self.pending >= self.flush_every {
            self.flush()?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<(), CliError> {
        self.pending = 0;
        self.out.flush().map_err(|e| CliError::Io(e.to_string()))
    }
}

pub struct EvalWriter {
    out: csv::Writer<File>,
}

impl EvalWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let mut out = csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        out.write_record(EVALS_HEADER).map_err(csv_err)?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &EvalRecord) -> Result<(), CliError> {
        let s = Summary::of(&r.returns);
        self.out
            .write_record([
                r.env_step.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
                s.min.to_string(),
                s.max.to_string(),
                s.episodes.to_string(),
            ])
            .map_err(csv_err)?;
        self.out.flush().map_err(|e| CliError::Io(e.to_string()))
    }
}

/// Population statistics of episodic returns.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Summary {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(returns: &[f64]) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            episodes: returns.len(),
            mean,
            std: var.sqrt(),
            min: returns.iter().copied().fold(f64::INFINITY, f64::min),
            max: returns.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_episode_has_zero_std() {
        let s = Summary::of(&[-3.5]);
        assert_eq!((s.mean, s.std, s.min, s.max), (-3.5, 0.0, -3.5, -3.5));
    }

    #[test]
    fn summary_statistics() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!((s.mean, s.std, s.min, s.max), (2.0, 1.0, 1.0, 3.0));
    }
}
