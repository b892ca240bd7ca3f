//! Delay-compensated gradient extremum seeking.
//!
//! The controller perturbs the inlet density with a phase-advanced dither
//! a sin(w (t + D)), demodulates the measured bottleneck outflow into
//! gradient and curvature estimates, and closes the loop through a predictor
//! that compensates the transport delay D with the integral of the recent
//! control signal. The control law is low-pass filtered:
//!
//! ```text
//! U = c/(s + c) { k (G + H_hat * I) },   I = integral of U over [t-D, t]
//! ```
//!
//! and the estimate integrates it, rho_hat' = U. The density actually
//! applied is rho_hat + a sin(w (t + D)), clamped into the free-flow range.
//!
//! Demodulation acts on the mean-removed measurement (a washout with corner
//! `washout` tracks the slow component of q_out). This is load-bearing, not
//! cosmetic: demodulating the raw measurement feeds the term
//! -(8/a^2) q_mean cos(2wt) into the H_hat * I product, a parametric loop
//! through the predictor integral with gain ~ k (8/a^2) q_mean |W(iw)| / 2
//! (W(s) = (1 - e^{-sD})/s). At the nominal gains that exceeds 1 and the
//! filter state diverges. Mean removal leaves every period-average unchanged
//! (M and N are zero-mean) while shrinking the parametric gain ~50x.

use crate::error::{Error, Result};
use crate::history::SampleHistory;

/// Extremum-seeking parameters.
///
/// `amplitude` may be zero, which disables the dither and both demodulation
/// signals; the loop then coasts on its initial estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EsParams {
    /// Dither amplitude a (vehicles/m).
    pub amplitude: f64,
    /// Dither frequency w (rad/s).
    pub frequency: f64,
    /// Integrator gain k.
    pub gain: f64,
    /// Low-pass corner frequency c (rad/s).
    pub corner: f64,
    /// Compensated transport delay D (s).
    pub delay: f64,
    /// Washout corner (rad/s) of the measurement mean tracker; 0 disables
    /// mean removal (raw demodulation, unstable at nominal gains).
    pub washout: f64,
}

impl EsParams {
    /// Default washout corner: well below the dither band (w = 2.75 pi) and
    /// above the averaged convergence rate |kH| ~ 0.83, so the tracker
    /// follows the slow outflow drift without eating the demodulated content.
    pub const DEFAULT_WASHOUT: f64 = 1.0;

    pub fn new(amplitude: f64, frequency: f64, gain: f64, corner: f64, delay: f64) -> Result<Self> {
        if !(amplitude.is_finite() && amplitude >= 0.0) {
            return Err(Error::invalid(
                "a",
                format!("must be non-negative, got {amplitude}"),
            ));
        }
        if !(frequency.is_finite() && frequency > 0.0) {
            return Err(Error::invalid(
                "omega",
                format!("must be positive, got {frequency}"),
            ));
        }
        if !(gain.is_finite() && gain > 0.0) {
            return Err(Error::invalid("k", format!("must be positive, got {gain}")));
        }
        if !(corner.is_finite() && corner > 0.0) {
            return Err(Error::invalid("c", format!("must be positive, got {corner}")));
        }
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(Error::invalid(
                "delay",
                format!("must be non-negative, got {delay}"),
            ));
        }
        Ok(EsParams {
            amplitude,
            frequency,
            gain,
            corner,
            delay,
            washout: Self::DEFAULT_WASHOUT,
        })
    }

    /// Replaces the washout corner. Must satisfy 0 <= washout < frequency so
    /// the mean tracker stays out of the dither band.
    pub fn with_washout(mut self, washout: f64) -> Result<Self> {
        if !(washout.is_finite() && washout >= 0.0 && washout < self.frequency) {
            return Err(Error::invalid(
                "washout",
                format!(
                    "must satisfy 0 <= washout < omega = {}, got {washout}",
                    self.frequency
                ),
            ));
        }
        self.washout = washout;
        Ok(self)
    }

    /// Gradient demodulation signal M(t) = (2/a) sin(w t).
    pub fn gradient_demod(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        2.0 / self.amplitude * (self.frequency * t).sin()
    }

    /// Curvature demodulation signal N(t) = -(8/a^2) cos(2 w t).
    pub fn hessian_demod(&self, t: f64) -> f64 {
        if self.amplitude == 0.0 {
            return 0.0;
        }
        -8.0 / (self.amplitude * self.amplitude) * (2.0 * self.frequency * t).cos()
    }

    /// Phase-advanced perturbation S(t) = a sin(w (t + D)); after one
    /// transport delay it arrives at the bottleneck in phase with M.
    pub fn perturbation(&self, t: f64) -> f64 {
        self.amplitude * (self.frequency * (t + self.delay)).sin()
    }

    /// Gradient estimate G(t) = M(t) q_out(t).
    pub fn gradient_estimate(&self, q_out: f64, t: f64) -> f64 {
        self.gradient_demod(t) * q_out
    }

    /// Curvature estimate H_hat(t) = N(t) q_out(t).
    pub fn hessian_estimate(&self, q_out: f64, t: f64) -> f64 {
        self.hessian_demod(t) * q_out
    }

    /// Dither period 2 pi / w.
    pub fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.frequency
    }
}

/// First-order low-pass step: one explicit Euler update of
/// x' = c (target - x). Requires dt * c < 2 for stability.
fn lowpass_step(state: f64, target: f64, corner: f64, dt: f64) -> f64 {
    state + dt * corner * (target - state)
}

/// Output of one controller step.
#[derive(Debug, Clone, Copy)]
pub struct ControlOutput {
    /// Inlet density to apply over the next step, already clamped.
    pub applied_density: f64,
    /// Gradient estimate G used this step (demodulated from the
    /// mean-removed measurement).
    pub gradient: f64,
    /// Curvature estimate H_hat used this step (same mean-removed input; its
    /// period-average still converges to the true map curvature).
    pub hessian: f64,
    /// Filtered control signal U after this step.
    pub control: f64,
}

#[derive(Debug, Clone)]
pub struct EsController {
    params: EsParams,
    dt: f64,
    rho_hat: f64,
    control: f64,
    history: SampleHistory,
    /// Washout state: slow tracker of the measured outflow. Seeded from the
    /// first sample so the loop starts with zero deviation instead of a
    /// (2/a) q_out transient kick.
    measured_mean: Option<f64>,
    t: f64,
    applied_min: f64,
    applied_max: f64,
    clamp_events: u64,
}

impl EsController {
    /// Builds the controller at t = 0 with the given initial estimate and the
    /// admissible applied-density range. `control_init` seeds the pre-start
    /// control history (normally zero). The fixed step must satisfy
    /// dt * corner < 2 (filter stability) and dt * frequency < 0.5 (dither
    /// resolution); both are configuration errors here, not at step time.
    pub fn new(
        params: EsParams,
        dt: f64,
        rho_hat0: f64,
        applied_range: (f64, f64),
        control_init: f64,
    ) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if dt * params.corner >= 2.0 {
            return Err(Error::invalid(
                "dt",
                format!(
                    "dt * c = {} >= 2 makes the low-pass filter unstable",
                    dt * params.corner
                ),
            ));
        }
        if dt * params.frequency >= 0.5 {
            return Err(Error::invalid(
                "dt",
                format!(
                    "dt * omega = {} >= 0.5 under-resolves the dither",
                    dt * params.frequency
                ),
            ));
        }
        let (lo, hi) = applied_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::invalid(
                "applied_range",
                format!("must be a proper interval, got [{lo}, {hi}]"),
            ));
        }
        if !rho_hat0.is_finite() {
            return Err(Error::invalid("rho_hat0", "must be finite"));
        }
        Ok(EsController {
            params,
            dt,
            rho_hat: rho_hat0,
            control: control_init,
            history: SampleHistory::new(params.delay, dt, control_init)?,
            measured_mean: None,
            t: 0.0,
            applied_min: lo,
            applied_max: hi,
            clamp_events: 0,
        })
    }

    /// Consumes the outflow measured at the current time and returns the
    /// inlet density to apply over the next step, advancing the internal
    /// clock. Estimates use the measurement time; the perturbation uses the
    /// same time so the applied input is the value at the start of the step.
    pub fn step(&mut self, q_out: f64, dt: f64) -> ControlOutput {
        debug_assert!(
            (dt - self.dt).abs() <= 1e-12 * self.dt,
            "controller requires the fixed step it was built with"
        );
        let p = self.params;
        let deviation = if p.washout == 0.0 {
            q_out
        } else {
            let tracked = match self.measured_mean {
                Some(m) => lowpass_step(m, q_out, p.washout, dt),
                None => q_out,
            };
            self.measured_mean = Some(tracked);
            q_out - tracked
        };
        let gradient = p.gradient_estimate(deviation, self.t);
        let hessian = p.hessian_estimate(deviation, self.t);
        let predictor = self.history.integral();
        let target = p.gain * (gradient + hessian * predictor);
        self.control = lowpass_step(self.control, target, p.corner, dt);
        self.rho_hat += dt * self.control;
        self.history.push(self.control);
        let raw = self.rho_hat + p.perturbation(self.t);
        let applied_density = raw.clamp(self.applied_min, self.applied_max);
        if applied_density != raw {
            self.clamp_events += 1;
        }
        self.t += dt;
        ControlOutput {
            applied_density,
            gradient,
            hessian,
            control: self.control,
        }
    }

    /// Trapezoidal integral of the control signal over [t - D, t].
    pub fn predictor_integral(&self) -> f64 {
        self.history.integral()
    }

    pub fn rho_hat(&self) -> f64 {
        self.rho_hat
    }

    pub fn control(&self) -> f64 {
        self.control
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn params(&self) -> &EsParams {
        &self.params
    }

    #[cfg(test)]
    fn history_mut(&mut self) -> &mut SampleHistory {
        &mut self.history
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn reference_params() -> EsParams {
        EsParams::new(0.05, 2.75 * PI, 0.005, 50.0, 5.0).unwrap()
    }

    #[test]
    fn dither_values() {
        let p = reference_params();
        assert_eq!(p.gradient_demod(0.0), 0.0);
        // At w t = pi/2 the gradient demod peaks at 2/a = 40.
        let t_quarter = 0.5 * PI / p.frequency;
        assert!((p.gradient_demod(t_quarter) - 40.0).abs() < 1e-9);
        // N(0) = -8/a^2 = -3200; zero at w t = pi/4.
        assert!((p.hessian_demod(0.0) + 3200.0).abs() < 1e-9);
        assert!(p.hessian_demod(0.25 * PI / p.frequency).abs() < 1e-9);
    }

    #[test]
    fn dither_periodicity() {
        let p = reference_params();
        let t0 = 0.321;
        let period = p.period();
        assert!((p.gradient_demod(t0 + period) - p.gradient_demod(t0)).abs() < 1e-9);
        assert!((p.hessian_demod(t0 + period) - p.hessian_demod(t0)).abs() < 1e-9);
        assert!((p.perturbation(t0 + period) - p.perturbation(t0)).abs() < 1e-12);
    }

    #[test]
    fn perturbation_phase_advance() {
        let p = reference_params();
        // S(0) = a sin(w D) = 0.05 sin(13.75 pi) = -0.05 sin(pi/4).
        let expect = -0.05 * (0.25 * PI).sin();
        assert!((p.perturbation(0.0) - expect).abs() < 1e-12);
        assert!((expect + 0.03536).abs() < 1e-5);
        // With no delay the perturbation is the plain dither.
        let p0 = EsParams::new(0.05, 2.75 * PI, 0.005, 50.0, 0.0).unwrap();
        assert_eq!(p0.perturbation(0.0), 0.0);
        let t = 0.1;
        assert!((p0.perturbation(t) - 0.05 * (p0.frequency * t).sin()).abs() < 1e-15);
    }

    #[test]
    fn zero_amplitude_disables_dither() {
        let p = EsParams::new(0.0, 2.75 * PI, 0.005, 50.0, 5.0).unwrap();
        for t in [0.0, 0.3, 1.7] {
            assert_eq!(p.gradient_demod(t), 0.0);
            assert_eq!(p.hessian_demod(t), 0.0);
            assert_eq!(p.perturbation(t), 0.0);
        }
    }

    #[test]
    fn demodulation_recovers_gradient_and_curvature() {
        // Feed the analytic outflow for a frozen error e0 through one dither
        // period: q(t) = q* + (H/2)(e0 + a sin(w t))^2. The averages of
        // M q and N q recover H e0 and H exactly for a quadratic map, up to
        // quadrature error (trapezoid on a periodic integrand is spectral).
        let p = reference_params();
        let (q_star, h) = (4.8, -500.0 / 3.0);
        for e0 in [-0.12, -0.03, 0.0, 0.05] {
            let n = 1 << 14;
            let period = p.period();
            let dt = period / n as f64;
            let (mut g_acc, mut h_acc) = (0.0, 0.0);
            for i in 0..n {
                let t = i as f64 * dt;
                let d = e0 + p.amplitude * (p.frequency * t).sin();
                let q = q_star + 0.5 * h * d * d;
                g_acc += p.gradient_estimate(q, t);
                h_acc += p.hessian_estimate(q, t);
            }
            let g_avg = g_acc / n as f64;
            let h_avg = h_acc / n as f64;
            assert!(
                (g_avg - h * e0).abs() < 1e-8,
                "gradient average {g_avg} vs {b}",
                b = h * e0
            );
            assert!((h_avg - h).abs() < 1e-8, "curvature average {h_avg} vs {h}");
        }
    }

    #[test]
    fn lowpass_single_step_and_dc_gain() {
        // One Euler step from rest toward k G = 0.005: 0 + dt c (0.005 - 0).
        let next = lowpass_step(0.0, 0.005, 50.0, 1e-3);
        assert!((next - 2.5e-4).abs() < 1e-19);
        // Frozen target: converges with rate c, error below 1% after 5/c.
        let mut u = 0.0;
        let (c, dt, target) = (50.0_f64, 1e-3, 0.37_f64);
        let steps = (5.0 / c / dt).round() as usize;
        for _ in 0..steps {
            u = lowpass_step(u, target, c, dt);
        }
        assert!((u - target).abs() < 0.01 * target.abs());
    }

    #[test]
    fn predictor_integral_cases() {
        let p = reference_params();
        let dt = 1e-3;
        let mut ctl = EsController::new(p, dt, 0.12, (0.0, 0.38), 0.0).unwrap();
        assert_eq!(ctl.predictor_integral(), 0.0);

        // Constant history integrates to u0 * D.
        ctl.history_mut().fill(0.3);
        assert!((ctl.predictor_integral() - 0.3 * 5.0).abs() < 1e-12);

        // sin samples on [0, 5]: integral = 1 - cos(5) up to O(dt^2).
        ctl.history_mut().fill(0.0);
        let steps = (5.0 / dt).round() as usize;
        for i in 1..=steps {
            ctl.history_mut().push((i as f64 * dt).sin());
        }
        let exact = 1.0 - 5.0_f64.cos();
        assert!((ctl.predictor_integral() - exact).abs() < 1e-6);
    }

    #[test]
    fn stationary_at_optimum_up_to_dither_ripple() {
        // Constant measured outflow: the washout tracker locks onto it, the
        // demodulated deviation is identically zero and the estimate must not
        // drift by more than O(a) per period (here: not at all).
        let p = reference_params();
        let dt = 1e-3;
        let mut ctl = EsController::new(p, dt, 0.24, (0.0, 0.38), 0.0).unwrap();
        let period = p.period();
        let steps_per_period = (period / dt).round() as usize;
        let mut start_of_period = ctl.rho_hat();
        let mut max_drift: f64 = 0.0;
        for i in 0..20 * steps_per_period {
            ctl.step(4.8, dt);
            if (i + 1) % steps_per_period == 0 {
                let now = ctl.rho_hat();
                if i > 5 * steps_per_period {
                    max_drift = max_drift.max((now - start_of_period).abs());
                }
                start_of_period = now;
            }
        }
        assert!(
            max_drift <= p.amplitude,
            "per-period drift {max_drift} exceeds dither amplitude"
        );
        assert_eq!(ctl.rho_hat(), 0.24);
        assert_eq!(ctl.clamp_events(), 0);
    }

    #[test]
    fn raw_demodulation_diverges_through_the_predictor_loop() {
        // washout = 0 demodulates the raw outflow; the -(8/a^2) q cos(2wt)
        // term then closes a parametric loop through the predictor integral
        // whose gain exceeds 1 at nominal parameters. Pinning the divergence
        // documents why the washout is not optional.
        let p = reference_params().with_washout(0.0).unwrap();
        let dt = 1e-3;
        let mut ctl = EsController::new(p, dt, 0.24, (f64::MIN, f64::MAX), 0.0).unwrap();
        for _ in 0..20_000 {
            ctl.step(4.8, dt);
        }
        assert!(
            ctl.rho_hat().abs() > 1.0,
            "raw-demodulation loop unexpectedly stayed bounded: {}",
            ctl.rho_hat()
        );
    }

    #[test]
    fn washed_gradient_preserves_period_average() {
        // Frozen plant q = q* + (H/2)(e0 + a sin(wt))^2 fed through the full
        // step path: once the washout settles, the per-period mean of the
        // demodulated gradient must still be H e0 (mean removal only touches
        // zero-mean products).
        let p = reference_params();
        let dt = 1e-3;
        let (h, e0, q_star) = (-500.0 / 3.0, -0.05, 4.8);
        let mut ctl = EsController::new(p, dt, 0.24, (0.0, 0.38), 0.0).unwrap();
        let steps_per_period = (p.period() / dt).round() as usize;
        let total = 20 * steps_per_period;
        let mut g_sum = 0.0;
        for i in 0..total {
            let t = i as f64 * dt;
            let dev = e0 + p.amplitude * (p.frequency * t).sin();
            let out = ctl.step(q_star + 0.5 * h * dev * dev, dt);
            if i >= total - steps_per_period {
                g_sum += out.gradient;
            }
        }
        let g_mean = g_sum / steps_per_period as f64;
        let expect = h * e0;
        assert!(
            (g_mean - expect).abs() <= 0.05 * expect.abs(),
            "washed gradient mean {g_mean} vs H e0 = {expect}"
        );
    }

    #[test]
    fn applied_density_is_clamped_and_counted() {
        // S(0) ~ -0.035, so the estimate must overshoot the cap by more than
        // that for the first step to clamp.
        let p = reference_params();
        let dt = 1e-3;
        let mut ctl = EsController::new(p, dt, 0.42, (0.0, 0.38), 0.0).unwrap();
        let out = ctl.step(4.8, dt);
        assert!(out.applied_density <= 0.38);
        assert_eq!(ctl.clamp_events(), 1);
    }

    #[test]
    fn constructor_validation() {
        let p = reference_params();
        assert!(EsController::new(p, 0.05, 0.12, (0.0, 0.38), 0.0).is_err()); // dt c = 2.5
        assert!(EsController::new(p, 0.06, 0.12, (0.0, 0.38), 0.0).is_err()); // dt w > 0.5
        assert!(EsController::new(p, 1e-3, 0.12, (0.4, 0.4), 0.0).is_err());
        assert!(EsController::new(p, 1e-3, f64::NAN, (0.0, 0.38), 0.0).is_err());
        assert!(EsParams::new(-0.05, 8.0, 0.005, 50.0, 5.0).is_err());
        assert!(EsParams::new(0.05, 0.0, 0.005, 50.0, 5.0).is_err());
        assert!(EsParams::new(0.05, 8.0, 0.0, 50.0, 5.0).is_err());
        assert!(EsParams::new(0.05, 8.0, 0.005, -1.0, 5.0).is_err());
        assert!(EsParams::new(0.05, 8.0, 0.005, 50.0, -5.0).is_err());
        let base = EsParams::new(0.05, 8.0, 0.005, 50.0, 5.0).unwrap();
        assert!(base.with_washout(-1.0).is_err());
        assert!(base.with_washout(8.0).is_err()); // inside the dither band
        assert_eq!(base.with_washout(0.5).unwrap().washout, 0.5);
    }

    #[test]
    fn zero_gain_path_with_zero_dither_holds_estimate() {
        // a = 0 shuts off G, H_hat and S; with zero initial control the
        // estimate never moves.
        let p = EsParams::new(0.0, 2.75 * PI, 0.005, 50.0, 5.0).unwrap();
        let dt = 1e-3;
        let mut ctl = EsController::new(p, dt, 0.24, (0.0, 0.38), 0.0).unwrap();
        for _ in 0..5000 {
            let out = ctl.step(4.8, dt);
            assert_eq!(out.applied_density, 0.24);
        }
        assert_eq!(ctl.rho_hat(), 0.24);
    }
}
