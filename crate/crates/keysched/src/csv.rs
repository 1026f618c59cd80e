//! CSV outputs. Floats use Rust's shortest round-trip representation, so
//! repeated runs produce identical bytes.

use std::io::{BufRead, Write};
use std::path::Path;

use keysched_core::eval::{CkiHistogram, CurveRow};
use keysched_core::policy::Action;
use keysched_core::schedulers::Rollout;
use keysched_core::trainer::TrainLogRow;

use crate::error::{CliError, Result};

pub const TRAIN_LOG_HEADER: &str = "episode,mean_return,mean_entropy,realized_kar,wallclock_ms";
pub const CURVE_HEADER: &str = "scheduler,control,aki,mean_quality,sim_fps,n_keys,n_frames";
pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";
pub const ROLLOUT_HEADER: &str = "frame,action,quality,lkd,kar,p_key";
pub const ORACLE_HEADER: &str = "budget,aki,quality";

/// One row of the oracle CSV: per-trace key budget and the resulting
/// operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleRow {
    pub budget: usize,
    pub aki: f64,
    pub quality: f64,
}

pub fn write_train_log<W: Write>(mut w: W, rows: &[TrainLogRow]) -> std::io::Result<()> {
    writeln!(w, "{TRAIN_LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.episode, r.mean_return, r.mean_entropy, r.realized_kar, r.wallclock_ms)?;
    }
    w.flush()
}

pub fn write_curve<W: Write>(mut w: W, rows: &[CurveRow]) -> std::io::Result<()> {
    writeln!(w, "{CURVE_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.scheduler, r.control, r.aki, r.mean_quality, r.sim_fps, r.n_keys, r.n_frames
        )?;
    }
    w.flush()
}

pub fn read_curve<R: BufRead>(reader: R, origin: &Path) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| CliError::io(origin, e))?;
        if n == 1 {
            if line.trim_end() != CURVE_HEADER {
                return Err(CliError::format(origin, 1, format!("expected header `{CURVE_HEADER}`")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<&str> = line.trim_end().split(',').collect();
        if c.len() != 7 {
            return Err(CliError::format(origin, n, format!("expected 7 columns, found {}", c.len())));
        }
        let float = |s: &str| s.parse::<f64>().map_err(|_| CliError::format(origin, n, format!("`{s}` is not a number")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| CliError::format(origin, n, format!("`{s}` is not a count")));
        rows.push(CurveRow {
            scheduler: c[0].to_string(),
            control: float(c[1])?,
            aki: float(c[2])?,
            mean_quality: float(c[3])?,
            sim_fps: float(c[4])?,
            n_keys: int(c[5])?,
            n_frames: int(c[6])?,
        });
    }
    if rows.is_empty() {
        return Err(CliError::format(origin, 0, "no curve rows"));
    }
    Ok(rows)
}

pub fn write_histogram<W: Write>(mut w: W, h: &CkiHistogram) -> std::io::Result<()> {
    writeln!(w, "{HISTOGRAM_HEADER}")?;
    for (lo, hi, count) in &h.bins {
        writeln!(w, "{lo},{hi},{count}")?;
    }
    w.flush()
}

pub fn write_rollout<W: Write>(mut w: W, r: &Rollout) -> std::io::Result<()> {
    writeln!(w, "{ROLLOUT_HEADER}")?;
    for e in &r.entries {
        let action = match e.action {
            Action::Key => "key",
            Action::NonKey => "nonkey",
        };
        let p = e.p_key.map(|p| p.to_string()).unwrap_or_default();
        writeln!(w, "{},{action},{},{},{},{p}", e.frame, e.quality, e.lkd, e.kar)?;
    }
    w.flush()
}

pub fn write_oracle<W: Write>(mut w: W, rows: &[OracleRow]) -> std::io::Result<()> {
    writeln!(w, "{ORACLE_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.budget, r.aki, r.quality)?;
    }
    w.flush()
}
