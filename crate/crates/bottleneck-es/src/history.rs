//! Fixed-step sample history over a sliding time window.
//!
//! Backs every delayed quantity in the crate: the controller's predictor
//! integral, the linearized transport plant, and the averaged oracle. The
//! window endpoint `now - span` generally falls inside the oldest sample
//! interval, so both lookup and integration interpolate linearly there.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SampleHistory {
    /// Oldest sample at the front; the back holds the value at the current time.
    samples: VecDeque<f64>,
    dt: f64,
    span: f64,
    /// Number of dt-intervals kept; covers at least `span`.
    intervals: usize,
}

impl SampleHistory {
    /// Creates a history whose every sample is `initial`, representing a
    /// signal that held that value for all past time.
    pub fn new(span: f64, dt: f64, initial: f64) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if !(span.is_finite() && span >= 0.0) {
            return Err(Error::invalid(
                "span",
                format!("must be non-negative, got {span}"),
            ));
        }
        let intervals = if span == 0.0 {
            0
        } else {
            (span / dt).ceil().max(1.0) as usize
        };
        let samples = VecDeque::from(vec![initial; intervals + 1]);
        Ok(SampleHistory {
            samples,
            dt,
            span,
            intervals,
        })
    }

    /// Appends the value at the new current time, dropping the sample that
    /// fell out of the window.
    pub fn push(&mut self, value: f64) {
        self.samples.push_back(value);
        self.samples.pop_front();
    }

    /// Value at the current time.
    pub fn current(&self) -> f64 {
        *self.samples.back().expect("history is never empty")
    }

    /// Value at `now - span`, linearly interpolated inside the oldest
    /// interval.
    pub fn delayed(&self) -> f64 {
        if self.intervals == 0 {
            return self.current();
        }
        let (frac, s0, s1) = self.tail();
        s0 + (s1 - s0) * frac
    }

    /// Trapezoidal approximation of the integral of the signal over
    /// `[now - span, now]`. Exact for signals affine in time.
    pub fn integral(&self) -> f64 {
        if self.intervals == 0 {
            return 0.0;
        }
        let (frac, s0, s1) = self.tail();
        let v_edge = s0 + (s1 - s0) * frac;
        let partial_len = self.dt * (1.0 - frac);
        let mut acc = 0.5 * (v_edge + s1) * partial_len;
        for i in 1..self.intervals {
            acc += 0.5 * (self.samples[i] + self.samples[i + 1]) * self.dt;
        }
        acc
    }

    /// Resets every sample to `value`.
    pub fn fill(&mut self, value: f64) {
        self.samples.iter_mut().for_each(|s| *s = value);
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn span(&self) -> f64 {
        self.span
    }

    /// Fractional position of `now - span` inside the oldest interval,
    /// together with that interval's two samples. The oldest sample sits at
    /// `now - intervals * dt <= now - span`.
    fn tail(&self) -> (f64, f64, f64) {
        let offset = self.intervals as f64 * self.dt - self.span;
        let frac = (offset / self.dt).clamp(0.0, 1.0);
        (frac, self.samples[0], self.samples[1])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_signal_integrates_to_value_times_span() {
        for (span, dt) in [(5.0, 1e-3), (5.0, 0.3), (0.7, 0.1), (2.0, 0.5)] {
            let h = SampleHistory::new(span, dt, 3.25).unwrap();
            let rel = (h.integral() - 3.25 * span).abs() / (3.25 * span);
            assert!(rel < 1e-12, "span {span} dt {dt}: rel err {rel}");
            assert!((h.delayed() - 3.25).abs() < 1e-15);
        }
    }

    #[test]
    fn affine_signal_is_integrated_exactly() {
        // v(t) = 2t + 1 pushed on a dt grid; trapezoids are exact on affine
        // signals, including the interpolated partial interval.
        let span = 1.7;
        let dt = 0.25;
        let mut h = SampleHistory::new(span, dt, 1.0).unwrap();
        let n = 40;
        for i in 1..=n {
            h.push(2.0 * (i as f64 * dt) + 1.0);
        }
        let now = n as f64 * dt;
        let exact = ((now * now + now) - ((now - span) * (now - span) + (now - span))).abs();
        assert!((h.integral() - exact).abs() < 1e-12);
        assert!((h.delayed() - (2.0 * (now - span) + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn sine_integral_has_second_order_error() {
        // At t = 5 with span 5 the window holds sin on [0, 5]:
        // integral = 1 - cos(5) = 0.71634 with O(dt^2) trapezoid error.
        let dt = 1e-3;
        let mut h = SampleHistory::new(5.0, dt, 0.0).unwrap();
        let steps = (5.0 / dt).round() as usize;
        for i in 1..=steps {
            h.push((i as f64 * dt).sin());
        }
        let exact = 1.0 - 5.0_f64.cos();
        assert!((exact - 0.71634).abs() < 5e-6);
        assert!((h.integral() - exact).abs() < 1e-6);
    }

    #[test]
    fn zero_history_integrates_to_zero() {
        let h = SampleHistory::new(5.0, 1e-3, 0.0).unwrap();
        assert_eq!(h.integral(), 0.0);
        assert_eq!(h.delayed(), 0.0);
    }

    #[test]
    fn zero_span_is_degenerate() {
        let mut h = SampleHistory::new(0.0, 0.1, 0.7).unwrap();
        assert_eq!(h.integral(), 0.0);
        assert_eq!(h.delayed(), 0.7);
        h.push(1.3);
        assert_eq!(h.delayed(), 1.3);
    }

    #[test]
    fn delayed_tracks_pushed_ramp() {
        let dt = 0.1;
        let span = 0.5;
        let mut h = SampleHistory::new(span, dt, 0.0).unwrap();
        for i in 1..=20 {
            h.push(i as f64);
        }
        // now = 2.0 (sample 20); now - span = 1.5 = sample 15.
        assert!((h.delayed() - 15.0).abs() < 1e-12);
    }

    #[test]
    fn non_divisible_span_interpolates_tail() {
        // span = 0.25, dt = 0.1: window end falls 0.05 into the oldest
        // interval of the three kept.
        let mut h = SampleHistory::new(0.25, 0.1, 0.0).unwrap();
        for v in [1.0, 2.0, 3.0] {
            h.push(v);
        }
        // Samples at now-0.3..now are [0, 1, 2, 3]; the window endpoint
        // now-0.25 sits halfway into the first interval -> 0.5.
        assert!((h.delayed() - 0.5).abs() < 1e-12);
        // Integral: 0.05*(0.5+1)/2 + 0.1*(1+2)/2 + 0.1*(2+3)/2 = 0.4375.
        assert!((h.integral() - 0.4375).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(SampleHistory::new(5.0, 0.0, 0.0).is_err());
        assert!(SampleHistory::new(-1.0, 0.1, 0.0).is_err());
        assert!(SampleHistory::new(f64::NAN, 0.1, 0.0).is_err());
    }
}
