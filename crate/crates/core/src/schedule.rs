//! Noise-level schedules: uniform discretization, the Moebius shifting map,
//! and strength-based truncation for stage re-entry.
//!
//! Sigma runs from 1 (pure noise) down to 0 (clean data). Shifting with
//! factor `s` remaps every level through
//!
//! ```text
//! sigma' = s * sigma / (1 + (s - 1) * sigma)
//! ```
//!
//! which for `s > 1` pushes levels toward 1, concentrating the step budget
//! in the high-noise region. The family composes multiplicatively:
//! shifting by `s1` then `s2` equals shifting by `s1 * s2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A discretized noise schedule: `n + 1` strictly decreasing levels from
/// exactly 1.0 to exactly 0.0, plus the cumulative shift factor applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaSchedule {
    sigmas: Vec<f64>,
    shift_factor: f64,
}

impl SigmaSchedule {
    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn shift_factor(&self) -> f64 {
        self.shift_factor
    }

    /// Number of integration steps (one less than the number of levels).
    pub fn num_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    fn check_monotone(&self) -> Result<()> {
        let ok = self.sigmas[0] == 1.0
            && *self.sigmas.last().unwrap() == 0.0
            && self.sigmas.windows(2).all(|w| w[0] > w[1]);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(
                "schedule must decrease strictly from 1.0 to 0.0".into(),
            ))
        }
    }
}

/// Uniform base discretization `sigma_j = 1 - j/n`, `j = 0..=n`.
pub fn build_base_sigmas(n: usize) -> Result<SigmaSchedule> {
    if n == 0 {
        return Err(Error::InvalidParameter("step count must be >= 1".into()));
    }
    let sigmas = (0..=n).map(|j| 1.0 - j as f64 / n as f64).collect();
    let schedule = SigmaSchedule { sigmas, shift_factor: 1.0 };
    schedule.check_monotone()?;
    Ok(schedule)
}

/// The shifting map on a single level. Fixes 0 and 1, is strictly increasing
/// in sigma, and for `s > 1` satisfies `shift_sigma(sigma, s) > sigma` on the
/// open interval.
pub fn shift_sigma(sigma: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "shift factor must be positive, got {s}"
        )));
    }
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::InvalidParameter(format!(
            "sigma {sigma} outside [0, 1]"
        )));
    }
    Ok(s * sigma / (1.0 + (s - 1.0) * sigma))
}

/// Apply the shifting map to every level of a schedule. Monotonicity and the
/// 1.0 / 0.0 endpoints are preserved.
pub fn shift_schedule(base: &SigmaSchedule, s: f64) -> Result<SigmaSchedule> {
    let sigmas = base
        .sigmas
        .iter()
        .map(|&sig| shift_sigma(sig, s))
        .collect::<Result<Vec<_>>>()?;
    let schedule = SigmaSchedule {
        sigmas,
        shift_factor: base.shift_factor * s,
    };
    schedule.check_monotone()?;
    Ok(schedule)
}

/// A stage's shifted schedule together with where denoising re-enters it.
///
/// With strength `w`, the stage skips the first `floor(n * (1 - w))` levels:
/// the entry level `tau` is read off the shifted schedule at that index and
/// the stage runs the remaining `n - start_index` steps down to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSchedule {
    pub schedule: SigmaSchedule,
    pub start_index: usize,
    /// Noise level at re-entry; the weight on fresh noise when the stage
    /// re-noises its input.
    pub start_sigma: f64,
    pub strength: f64,
}

impl StageSchedule {
    pub fn steps_to_run(&self) -> usize {
        self.schedule.num_steps() - self.start_index
    }
}

/// Build a stage schedule: uniform base, shift by `s`, truncate by strength.
pub fn stage_schedule(n: usize, s: f64, strength: f64) -> Result<StageSchedule> {
    if !(strength > 0.0 && strength <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "strength must lie in (0, 1], got {strength}"
        )));
    }
    let base = build_base_sigmas(n)?;
    let schedule = shift_schedule(&base, s)?;
    let start_index = (n as f64 * (1.0 - strength)).floor() as usize;
    debug_assert!(start_index < n + 1);
    let start_sigma = schedule.sigmas()[start_index];
    Ok(StageSchedule { schedule, start_index, start_sigma, strength })
}

/// Render schedules side by side as CSV: header `step,s=<v1>,s=<v2>,...`,
/// one row per level index, LF line endings, 9 significant digits.
/// All schedules must share the same length.
pub fn export_schedule_csv(schedules: &[SigmaSchedule]) -> Result<String> {
    if schedules.is_empty() {
        return Err(Error::InvalidParameter("no schedules to export".into()));
    }
    let rows = schedules[0].sigmas.len();
    if schedules.iter().any(|s| s.sigmas.len() != rows) {
        return Err(Error::InvalidParameter(
            "schedules must share the same step count".into(),
        ));
    }
    let mut out = String::from("step");
    for s in schedules {
        out.push_str(&format!(",s={}", s.shift_factor));
    }
    out.push('\n');
    for j in 0..rows {
        out.push_str(&j.to_string());
        for s in schedules {
            out.push_str(&format!(",{:.8e}", s.sigmas[j]));
        }
        out.push('\n');
    }
    Ok(out)
}
