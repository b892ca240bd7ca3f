//! Post-run diagnostics: band convergence, trailing-window statistics,
//! exponential-rate fits, period averaging, and the residual scaling study.
//!
//! Everything here is a pure function of recorded rows, so recomputing a
//! report from a saved record reproduces it exactly.

use crate::error::{Error, Result};
use crate::sim::{run_closed_loop, RunRecord, SimConfig};

/// Recorded column selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    RhoIn,
    RhoOut,
    QOut,
    Gradient,
    Hessian,
    Control,
    TotalVehicles,
}

/// Extracts one column as (t, value) pairs.
pub fn series(record: &RunRecord, col: Column) -> Vec<(f64, f64)> {
    record
        .rows
        .iter()
        .map(|r| {
            let v = match col {
                Column::RhoIn => r.rho_in,
                Column::RhoOut => r.rho_out,
                Column::QOut => r.q_out,
                Column::Gradient => r.gradient,
                Column::Hessian => r.hessian,
                Column::Control => r.control,
                Column::TotalVehicles => r.total_vehicles,
            };
            (r.t, v)
        })
        .collect()
}

/// Causal sliding mean over a trailing window of the given width: the value
/// at t is the mean of all samples in (t - window, t]. With the window set to
/// one dither period this strips the dither ripple while following the slow
/// component one half-window late.
pub fn sliding_mean(series: &[(f64, f64)], window: f64) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(series.len());
    let mut sum = 0.0;
    let mut lo = 0usize;
    for (i, &(t, v)) in series.iter().enumerate() {
        sum += v;
        while series[lo].0 <= t - window {
            sum -= series[lo].1;
            lo += 1;
        }
        out.push((t, sum / (i - lo + 1) as f64));
    }
    out
}

/// Convergence-into-band report plus trailing-window asymptotics.
#[derive(Debug, Clone, Copy)]
pub struct ConvergenceReport {
    /// First time after which the series never leaves the band; None if it
    /// ends outside or keeps leaving.
    pub entry_time: Option<f64>,
    pub center: f64,
    pub halfwidth: f64,
    /// Mean over the trailing window.
    pub trailing_mean: f64,
    /// Peak-to-peak spread over the trailing window.
    pub trailing_ripple: f64,
}

/// Scans for the last entry into [center - halfwidth, center + halfwidth]
/// that sticks, and summarizes the trailing `window` seconds.
pub fn band_convergence(
    series: &[(f64, f64)],
    center: f64,
    halfwidth: f64,
    window: f64,
) -> Result<ConvergenceReport> {
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    let mut entry_time = None;
    for &(t, v) in series {
        if (v - center).abs() <= halfwidth {
            if entry_time.is_none() {
                entry_time = Some(t);
            }
        } else {
            entry_time = None;
        }
    }
    let t_last = series.last().expect("non-empty").0;
    let tail: Vec<f64> = series
        .iter()
        .filter(|(t, _)| *t >= t_last - window)
        .map(|&(_, v)| v)
        .collect();
    let trailing_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &tail {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    Ok(ConvergenceReport {
        entry_time,
        center,
        halfwidth,
        trailing_mean,
        trailing_ripple: hi - lo,
    })
}

/// Least-squares slope of ln(series) from t_start on. The series must be
/// strictly positive there (fit |e| yourself before calling).
pub fn exp_rate_fit(series: &[(f64, f64)], t_start: f64) -> Result<f64> {
    let window: Vec<(f64, f64)> = series
        .iter()
        .filter(|(t, _)| *t >= t_start)
        .map(|&(t, v)| (t, v))
        .collect();
    if window.len() < 2 {
        return Err(Error::EmptySeries);
    }
    if let Some(&(t, _)) = window.iter().find(|(_, v)| *v <= 0.0) {
        return Err(Error::NonPositiveSample { t });
    }
    let n = window.len() as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for &(t, v) in &window {
        let y = v.ln();
        st += t;
        sy += y;
        stt += t * t;
        sty += t * y;
    }
    let denom = n * stt - st * st;
    if denom == 0.0 {
        return Err(Error::EmptySeries);
    }
    Ok((n * sty - st * sy) / denom)
}

/// One grid point of the scaling study.
#[derive(Debug, Clone, Copy)]
pub struct ScalingRow {
    pub amplitude: f64,
    pub frequency: f64,
    /// |trailing mean of rho_out - rho_star|.
    pub residual_rho: f64,
    /// |trailing mean of q_out - q_star|.
    pub residual_q: f64,
    /// Whether the period-averaged density converged into the nominal band.
    pub converged: bool,
}

/// Ratio between two grid points that differ only in amplitude.
#[derive(Debug, Clone, Copy)]
pub struct AmplitudeRatio {
    pub frequency: f64,
    pub a_from: f64,
    pub a_to: f64,
    /// residual_q(a_to) / residual_q(a_from); ~0.25 for a halving when the
    /// quadratic dither penalty dominates.
    pub ratio_q: f64,
}

/// Ratio between two grid points that differ only in frequency.
#[derive(Debug, Clone, Copy)]
pub struct FrequencyRatio {
    pub amplitude: f64,
    pub w_from: f64,
    pub w_to: f64,
    /// residual_rho(w_to) / residual_rho(w_from).
    pub ratio_rho: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingTable {
    pub rows: Vec<ScalingRow>,
    pub amplitude_ratios: Vec<AmplitudeRatio>,
    pub frequency_ratios: Vec<FrequencyRatio>,
}

/// Summarizes one finished grid run: trailing residuals against the known
/// optimum, with convergence judged on the period-averaged density entering
/// the nominal band and staying there.
pub fn scaling_row(amplitude: f64, frequency: f64, record: &RunRecord) -> Result<ScalingRow> {
    let period = record.meta.period;
    let window = 10.0 * period;
    let rho = series(record, Column::RhoOut);
    let smoothed = sliding_mean(&rho, period);
    let band = band_convergence(&smoothed, record.meta.rho_star, 0.02, window)?;
    let q_report = band_convergence(
        &series(record, Column::QOut),
        record.meta.q_star,
        f64::INFINITY,
        window,
    )?;
    let rho_report = band_convergence(&rho, record.meta.rho_star, 0.02, window)?;
    Ok(ScalingRow {
        amplitude,
        frequency,
        residual_rho: (rho_report.trailing_mean - record.meta.rho_star).abs(),
        residual_q: (q_report.trailing_mean - record.meta.q_star).abs(),
        converged: record.completed() && band.entry_time.is_some(),
    })
}

/// Ratios between consecutive grid entries, skipping pairs with a
/// non-converged or exactly-zero-residual endpoint.
pub fn scaling_ratios(
    rows: &[ScalingRow],
    amplitudes: &[f64],
    frequencies: &[f64],
) -> (Vec<AmplitudeRatio>, Vec<FrequencyRatio>) {
    let at = |a: f64, w: f64| {
        rows.iter()
            .find(|r| r.amplitude == a && r.frequency == w)
            .expect("ratio endpoints must be grid rows")
    };
    let mut amplitude_ratios = Vec::new();
    for &w in frequencies {
        for pair in amplitudes.windows(2) {
            let (from, to) = (at(pair[0], w), at(pair[1], w));
            if from.converged && to.converged && from.residual_q > 0.0 {
                amplitude_ratios.push(AmplitudeRatio {
                    frequency: w,
                    a_from: pair[0],
                    a_to: pair[1],
                    ratio_q: to.residual_q / from.residual_q,
                });
            }
        }
    }
    let mut frequency_ratios = Vec::new();
    for &a in amplitudes {
        for pair in frequencies.windows(2) {
            let (from, to) = (at(a, pair[0]), at(a, pair[1]));
            if from.converged && to.converged && from.residual_rho > 0.0 {
                frequency_ratios.push(FrequencyRatio {
                    amplitude: a,
                    w_from: pair[0],
                    w_to: pair[1],
                    ratio_rho: to.residual_rho / from.residual_rho,
                });
            }
        }
    }
    (amplitude_ratios, frequency_ratios)
}

/// Runs the closed loop over the (amplitude, frequency) grid and tabulates
/// trailing residuals, plus ratios between consecutive amplitude and
/// frequency entries. Non-converged points are flagged and left out of the
/// ratios.
pub fn scaling_study(
    base: &SimConfig,
    amplitudes: &[f64],
    frequencies: &[f64],
) -> Result<ScalingTable> {
    if amplitudes.is_empty() || frequencies.is_empty() {
        return Err(Error::Config(
            "scaling study needs at least one amplitude and one frequency".into(),
        ));
    }
    let mut rows = Vec::with_capacity(amplitudes.len() * frequencies.len());
    for &w in frequencies {
        for &a in amplitudes {
            let cfg = SimConfig {
                amplitude: a,
                frequency: w,
                ..base.clone()
            };
            let record = run_closed_loop(&cfg)?;
            rows.push(scaling_row(a, w, &record)?);
        }
    }
    let (amplitude_ratios, frequency_ratios) = scaling_ratios(&rows, amplitudes, frequencies);
    Ok(ScalingTable {
        rows,
        amplitude_ratios,
        frequency_ratios,
    })
}
