//! Lockstep overlap model for a ring-pipelined sharded matmul.
//!
//! Round 0 runs the first matmul chunk alone; in each later round `j` the
//! matmul chunk `j` runs alongside transfer `j`, and round `j + 1` starts only
//! when both have finished.

use crate::error::{Error, Result};

fn check_durations(compute: &[f64], comm: &[f64]) -> Result<()> {
    if compute.is_empty() {
        return Err(Error::Domain("at least one compute chunk is required".into()));
    }
    if comm.len() + 1 != compute.len() {
        return Err(Error::Domain(format!(
            "{} compute chunks need {} transfers, got {}",
            compute.len(),
            compute.len() - 1,
            comm.len()
        )));
    }
    if let Some(bad) = compute.iter().chain(comm).find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Domain(format!("invalid duration {bad}")));
    }
    Ok(())
}

/// `(start, end)` of each round when every round starts as the previous one
/// ends; `rounds[j] = (compute, comm)` durations.
pub fn lockstep(start: f64, rounds: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut t = start;
    rounds
        .iter()
        .map(|&(a, b)| {
            let s = t;
            t += a.max(b);
            (s, t)
        })
        .collect()
}

/// Makespan `t_m(0) + Σ_{j≥1} max(t_c(j), t_m(j))` for `k` compute chunks and
/// `k − 1` transfers.
pub fn schedule_overlapped(compute: &[f64], comm: &[f64]) -> Result<f64> {
    check_durations(compute, comm)?;
    let mut rounds = vec![(compute[0], 0.0)];
    rounds.extend(compute[1..].iter().zip(comm).map(|(&m, &c)| (m, c)));
    Ok(lockstep(0.0, &rounds).last().map_or(0.0, |r| r.1))
}

/// Serial reference: every transfer and every matmul back to back.
pub fn non_overlapped_makespan(compute: &[f64], comm: &[f64]) -> Result<f64> {
    check_durations(compute, comm)?;
    Ok(compute.iter().sum::<f64>() + comm.iter().sum::<f64>())
}

/// Uniform chunks: `t_m + (k − 1)·max(t_c, t_m)`.
pub fn overlapped_closed_form(k: usize, t_m: f64, t_c: f64) -> f64 {
    t_m + (k.saturating_sub(1)) as f64 * t_c.max(t_m)
}
