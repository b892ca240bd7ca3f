//! First-order Godunov discretization of the LWR conservation law
//! d_t rho + d_x Q(rho) = 0 on a single road segment, plus the linearized
//! pure-delay plant used to validate the transport model.
//!
//! Interface fluxes use the demand/supply form of the exact Godunov flux for
//! a concave diagram: F = min(demand(left), supply(right)). The scheme is
//! monotone, keeps densities inside [0, jam density] and resolves transonic
//! rarefactions without an entropy fix.

use crate::error::{Error, Result};
use crate::fundamental::{BottleneckMap, FundamentalDiagram};
use crate::history::SampleHistory;

/// Largest stable time step scaled by a safety factor in (0, 1].
pub fn cfl_dt(dx: f64, u_max: f64, safety: f64) -> Result<f64> {
    if !(dx.is_finite() && dx > 0.0) {
        return Err(Error::invalid("dx", format!("must be positive, got {dx}")));
    }
    if !(u_max.is_finite() && u_max > 0.0) {
        return Err(Error::invalid(
            "u_max",
            format!("must be positive, got {u_max}"),
        ));
    }
    if !(safety.is_finite() && safety > 0.0 && safety <= 1.0) {
        return Err(Error::invalid(
            "cfl_safety",
            format!("must be in (0, 1], got {safety}"),
        ));
    }
    Ok(safety * dx / u_max)
}

/// Cell-averaged densities on a uniform grid. Cell i is centered at
/// (i + 1/2) dx; the segment length is cells * dx.
#[derive(Debug, Clone)]
pub struct RoadState {
    densities: Vec<f64>,
    dx: f64,
    t: f64,
}

impl RoadState {
    /// Uniform initial state. The cell count is length/dx rounded to the
    /// nearest integer, which must reproduce the length to within 1e-9
    /// relative error.
    pub fn uniform(length: f64, dx: f64, rho0: f64) -> Result<Self> {
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid(
                "length",
                format!("must be positive, got {length}"),
            ));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::invalid("dx", format!("must be positive, got {dx}")));
        }
        let cells = (length / dx).round();
        if cells < 1.0 || (cells * dx - length).abs() > 1e-9 * length {
            return Err(Error::Config(format!(
                "grid spacing {dx} does not divide the segment length {length}"
            )));
        }
        RoadState::from_profile(vec![rho0; cells as usize], dx)
    }

    pub fn from_profile(densities: Vec<f64>, dx: f64) -> Result<Self> {
        if densities.is_empty() {
            return Err(Error::invalid("profile", "needs at least one cell"));
        }
        if !(dx.is_finite() && dx > 0.0) {
            return Err(Error::invalid("dx", format!("must be positive, got {dx}")));
        }
        if let Some(rho) = densities.iter().find(|r| !r.is_finite()) {
            return Err(Error::invalid(
                "profile",
                format!("contains non-finite density {rho}"),
            ));
        }
        Ok(RoadState {
            densities,
            dx,
            t: 0.0,
        })
    }

    /// Density of the cell adjacent to the outlet.
    pub fn outlet_density(&self) -> f64 {
        *self.densities.last().expect("state has at least one cell")
    }

    /// Vehicle count dx * sum(rho).
    pub fn total_vehicles(&self) -> f64 {
        self.dx * self.densities.iter().sum::<f64>()
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn length(&self) -> f64 {
        self.dx * self.densities.len() as f64
    }

    pub fn time(&self) -> f64 {
        self.t
    }
}

/// Outlet boundary treatment.
///
/// `FreeOutflow` lets the segment discharge at its own demand; the bottleneck
/// map then acts purely as a sensor on the outlet density. `BottleneckCoupled`
/// additionally caps the boundary flux by the map, so a failing bottleneck
/// spills congestion back into the segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutletBoundary {
    FreeOutflow,
    BottleneckCoupled,
}

/// Boundary fluxes of one step, for conservation audits.
#[derive(Debug, Clone, Copy)]
pub struct StepFluxes {
    pub inflow: f64,
    pub outflow: f64,
}

#[derive(Debug, Clone)]
pub struct GodunovSolver<D: FundamentalDiagram> {
    diagram: D,
    bottleneck: BottleneckMap,
    outlet: OutletBoundary,
    max_speed: f64,
    clamp_events: u64,
    fluxes: Vec<f64>,
}

impl<D: FundamentalDiagram> GodunovSolver<D> {
    pub fn new(diagram: D, bottleneck: BottleneckMap, outlet: OutletBoundary) -> Self {
        let max_speed = diagram.max_char_speed();
        GodunovSolver {
            diagram,
            bottleneck,
            outlet,
            max_speed,
            clamp_events: 0,
            fluxes: Vec::new(),
        }
    }

    /// Advances the state by one step of size dt with the inlet density
    /// imposed through a ghost cell. Returns the realized boundary fluxes.
    pub fn step(&mut self, state: &mut RoadState, inlet_density: f64, dt: f64) -> Result<StepFluxes> {
        let limit = state.dx / self.max_speed;
        if !(dt.is_finite() && dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation {
                dt,
                dx: state.dx,
                u_max: self.max_speed,
                limit,
            });
        }
        self.diagram.check_density(inlet_density)?;
        let rho_max = self.diagram.max_density();
        if let Some(rho) = state
            .densities
            .iter()
            .find(|r| !(0.0..=rho_max).contains(*r))
        {
            return Err(Error::DensityOutOfRange {
                rho: *rho,
                rho_max,
            });
        }

        let n = state.densities.len();
        let diagram = &self.diagram;
        // Densities were range-checked above, so diagram calls cannot fail.
        let demand = |rho: f64| diagram.demand(rho).expect("density in range");
        let supply = |rho: f64| diagram.supply(rho).expect("density in range");

        self.fluxes.clear();
        self.fluxes.reserve(n + 1);
        self.fluxes
            .push(demand(inlet_density).min(supply(state.densities[0])));
        for i in 1..n {
            self.fluxes
                .push(demand(state.densities[i - 1]).min(supply(state.densities[i])));
        }
        let last = state.densities[n - 1];
        let out = match self.outlet {
            OutletBoundary::FreeOutflow => demand(last),
            OutletBoundary::BottleneckCoupled => demand(last).min(self.bottleneck.outflow(last)),
        };
        self.fluxes.push(out);

        let r = dt / state.dx;
        for (i, rho) in state.densities.iter_mut().enumerate() {
            let next = *rho - r * (self.fluxes[i + 1] - self.fluxes[i]);
            if next < 0.0 {
                *rho = 0.0;
                self.clamp_events += 1;
            } else if next > rho_max {
                *rho = rho_max;
                self.clamp_events += 1;
            } else {
                *rho = next;
            }
        }
        state.t += dt;
        Ok(StepFluxes {
            inflow: self.fluxes[0],
            outflow: self.fluxes[n],
        })
    }

    pub fn clamp_events(&self) -> u64 {
        self.clamp_events
    }

    pub fn diagram(&self) -> &D {
        &self.diagram
    }

    pub fn outlet(&self) -> OutletBoundary {
        self.outlet
    }
}

/// Linearized transport plant: around a free-flow reference the outlet
/// density reproduces the inlet density one transport delay later,
/// rho(L, t) = inlet(t - D). Holds the configured initial value for times
/// before the start.
#[derive(Debug, Clone)]
pub struct DelayLinePlant {
    history: SampleHistory,
    t: f64,
}

impl DelayLinePlant {
    pub fn new(delay: f64, dt: f64, initial: f64) -> Result<Self> {
        if !(delay.is_finite() && delay >= 0.0) {
            return Err(Error::invalid(
                "delay",
                format!("must be non-negative, got {delay}"),
            ));
        }
        Ok(DelayLinePlant {
            history: SampleHistory::new(delay, dt, initial)?,
            t: 0.0,
        })
    }

    /// Applies the inlet density over the next step and returns the outlet
    /// density at the new time. The step size must match construction.
    pub fn step(&mut self, inlet_density: f64, dt: f64) -> f64 {
        debug_assert!(
            (dt - self.history.dt()).abs() <= 1e-12 * self.history.dt(),
            "delay line requires the fixed step it was built with"
        );
        self.history.push(inlet_density);
        self.t += dt;
        self.history.delayed()
    }

    pub fn outlet_density(&self) -> f64 {
        self.history.delayed()
    }

    /// Integral of the inlet signal over the window [t - delay, t]. Scaled by
    /// the transport speed this is the vehicle count on the segment.
    pub fn history_integral(&self) -> f64 {
        self.history.integral()
    }

    pub fn time(&self) -> f64 {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fundamental::Greenshields;

    fn diagram() -> Greenshields {
        Greenshields::new(40.0, 0.8).unwrap()
    }

    fn bottleneck() -> BottleneckMap {
        BottleneckMap::from_capacity_drop(&diagram(), 0.6, 0.48).unwrap()
    }

    fn solver(outlet: OutletBoundary) -> GodunovSolver<Greenshields> {
        GodunovSolver::new(diagram(), bottleneck(), outlet)
    }

    #[test]
    fn cfl_dt_values() {
        assert!((cfl_dt(0.05, 40.0, 0.8).unwrap() - 1e-3).abs() < 1e-18);
        assert!((cfl_dt(0.5, 40.0, 0.8).unwrap() - 1e-2).abs() < 1e-17);
        assert!(cfl_dt(0.0, 40.0, 0.8).is_err());
        assert!(cfl_dt(0.05, 0.0, 0.8).is_err());
        assert!(cfl_dt(0.05, 40.0, 0.0).is_err());
        assert!(cfl_dt(0.05, 40.0, 1.1).is_err());
    }

    #[test]
    fn uniform_grid_must_divide_length() {
        assert!(RoadState::uniform(100.0, 0.05, 0.2).is_ok());
        assert_eq!(
            RoadState::uniform(100.0, 0.05, 0.2).unwrap().densities().len(),
            2000
        );
        assert!(RoadState::uniform(100.0, 0.3, 0.2).is_err());
        assert!(RoadState::uniform(1.0, 2.0, 0.2).is_err());
    }

    #[test]
    fn total_vehicles_of_uniform_state() {
        let s = RoadState::uniform(100.0, 0.05, 0.2).unwrap();
        assert!((s.total_vehicles() - 20.0).abs() < 1e-9);
        assert!((s.length() - 100.0).abs() < 1e-12);
    }

    #[test]
    fn constant_state_is_a_fixed_point() {
        let mut s = RoadState::uniform(10.0, 0.1, 0.3).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        for _ in 0..100 {
            solver.step(&mut s, 0.3, 1e-3).unwrap();
        }
        for &rho in s.densities() {
            assert!((rho - 0.3).abs() < 1e-14, "uniform state must not drift");
        }
        assert_eq!(solver.clamp_events(), 0);
    }

    #[test]
    fn step_rejects_cfl_violation() {
        let mut s = RoadState::uniform(10.0, 0.1, 0.3).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        // dx/u_max = 0.1/40 = 2.5e-3.
        assert!(matches!(
            solver.step(&mut s, 0.3, 3e-3),
            Err(Error::CflViolation { .. })
        ));
        assert!(solver.step(&mut s, 0.3, 2.5e-3).is_ok());
    }

    #[test]
    fn step_rejects_bad_inlet_density() {
        let mut s = RoadState::uniform(10.0, 0.1, 0.3).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        assert!(solver.step(&mut s, 0.9, 1e-3).is_err());
        assert!(solver.step(&mut s, -0.1, 1e-3).is_err());
    }

    #[test]
    fn one_step_mass_balance_is_exact() {
        let profile: Vec<f64> = (0..100)
            .map(|i| 0.25 + 0.3 * ((i as f64) * 0.37).sin().abs())
            .collect();
        let mut s = RoadState::from_profile(profile, 0.1).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        let before = s.total_vehicles();
        let dt = 1e-3;
        let f = solver.step(&mut s, 0.3, dt).unwrap();
        let after = s.total_vehicles();
        let balance = (after - before) - dt * (f.inflow - f.outflow);
        assert!(
            balance.abs() <= 1e-10 * before.max(1.0),
            "mass balance off by {balance}"
        );
        assert_eq!(solver.clamp_events(), 0);
    }

    #[test]
    fn maximum_principle_holds() {
        // Monotone scheme: values stay inside the convex hull of the initial
        // data and boundary input.
        let profile: Vec<f64> = (0..200)
            .map(|i| 0.25 + 0.3 * (0.5 + 0.5 * ((i as f64) * 0.711).sin()))
            .collect();
        let lo = profile.iter().cloned().fold(f64::INFINITY, f64::min).min(0.3);
        let hi = profile.iter().cloned().fold(0.0_f64, f64::max).max(0.3);
        let mut s = RoadState::from_profile(profile, 0.1).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        for _ in 0..2000 {
            solver.step(&mut s, 0.3, 2e-3).unwrap();
        }
        for &rho in s.densities() {
            assert!(rho >= lo - 1e-12 && rho <= hi + 1e-12);
        }
        assert_eq!(solver.clamp_events(), 0);
    }

    #[test]
    fn shock_speed_matches_rankine_hugoniot() {
        // Riemann data 0.1 | 0.5: s = (Q(0.5) - Q(0.1)) / 0.4 = (7.5 - 3.5)/0.4
        // = 10 m/s, equal to Q'(0.3) for the quadratic flux.
        let d = diagram();
        let q_l = d.flux(0.1).unwrap();
        let q_r = d.flux(0.5).unwrap();
        let s_rh = (q_r - q_l) / (0.5 - 0.1);
        assert!((s_rh - 10.0).abs() < 1e-12);

        let dx = 0.1;
        let jump = 40.0;
        let profile: Vec<f64> = (0..1000)
            .map(|i| {
                let x = (i as f64 + 0.5) * dx;
                if x < jump {
                    0.1
                } else {
                    0.5
                }
            })
            .collect();
        let mut s = RoadState::from_profile(profile, dx).unwrap();
        let mut solver = solver(OutletBoundary::FreeOutflow);
        let dt = 2e-3;
        let front = |state: &RoadState| -> f64 {
            let level = 0.3;
            let rho = state.densities();
            for i in 0..rho.len() - 1 {
                if (rho[i] - level) * (rho[i + 1] - level) <= 0.0 && rho[i] != rho[i + 1] {
                    let frac = (level - rho[i]) / (rho[i + 1] - rho[i]);
                    return (i as f64 + 0.5 + frac) * state.dx();
                }
            }
            panic!("front not found");
        };
        let mut measured = Vec::new();
        for step in 0..=500 {
            if step == 100 || step == 500 {
                measured.push((s.time(), front(&s)));
            }
            if step < 500 {
                solver.step(&mut s, 0.1, dt).unwrap();
            }
        }
        let speed = (measured[1].1 - measured[0].1) / (measured[1].0 - measured[0].0);
        assert!(
            (speed - s_rh).abs() <= 0.02 * s_rh,
            "measured front speed {speed} vs Rankine-Hugoniot {s_rh}"
        );
    }

    #[test]
    fn rarefaction_matches_self_similar_profile_and_converges() {
        // Riemann data 0.6 | 0.2 opens a transonic fan between
        // Q'(0.6) = -20 and Q'(0.2) = 20 with rho(x, t) = (Q')^{-1}(x/t).
        let l1_error = |dx: f64| -> f64 {
            let jump = 50.0;
            let cells = (100.0 / dx).round() as usize;
            let profile: Vec<f64> = (0..cells)
                .map(|i| {
                    let x = (i as f64 + 0.5) * dx;
                    if x < jump {
                        0.6
                    } else {
                        0.2
                    }
                })
                .collect();
            let mut s = RoadState::from_profile(profile, dx).unwrap();
            let mut solver = solver(OutletBoundary::FreeOutflow);
            let dt = cfl_dt(dx, 40.0, 0.8).unwrap();
            let t_end = 1.5;
            let steps = (t_end / dt).round() as usize;
            for _ in 0..steps {
                solver.step(&mut s, 0.6, dt).unwrap();
            }
            let t = s.time();
            let exact = |x: f64| -> f64 {
                let xi = (x - jump) / t;
                if xi <= -20.0 {
                    0.6
                } else if xi >= 20.0 {
                    0.2
                } else {
                    0.4 * (1.0 - xi / 40.0)
                }
            };
            s.densities()
                .iter()
                .enumerate()
                .map(|(i, rho)| (rho - exact((i as f64 + 0.5) * dx)).abs() * dx)
                .sum()
        };
        let coarse = l1_error(0.2);
        let fine = l1_error(0.1);
        let ratio = fine / coarse;
        assert!(
            ratio > 0.4 && ratio < 0.6,
            "first-order convergence expected: errors {coarse} -> {fine}, ratio {ratio}"
        );
    }

    #[test]
    fn coupled_outlet_caps_discharge() {
        // A uniform 0.3 state discharges Q_B(0.3) = 4.5 < demand(0.3) = 7.5
        // through the coupled boundary, so the outlet cell must congest.
        let mut s = RoadState::uniform(10.0, 0.1, 0.3).unwrap();
        let mut solver = solver(OutletBoundary::BottleneckCoupled);
        let f = solver.step(&mut s, 0.3, 1e-3).unwrap();
        assert!((f.outflow - 4.5).abs() < 1e-12);
        assert!(s.outlet_density() > 0.3);
    }

    #[test]
    fn delay_line_holds_initial_value_then_steps() {
        let dt = 1e-2;
        let mut p = DelayLinePlant::new(5.0, dt, 0.2).unwrap();
        let mut crossed_at = None;
        for i in 1..=700 {
            let out = p.step(0.3, dt);
            let t = i as f64 * dt;
            if t < 5.0 - 1e-9 {
                assert!((out - 0.2).abs() < 1e-12, "held value must persist until D");
            }
            if crossed_at.is_none() && out >= 0.25 {
                crossed_at = Some(t);
            }
        }
        let t_cross = crossed_at.expect("step must arrive");
        assert!(
            (t_cross - 5.0).abs() <= 2.0 * dt,
            "step arrived at {t_cross}, expected 5.0 +- {}",
            2.0 * dt
        );
    }

    #[test]
    fn delay_line_shifts_a_sinusoid() {
        let dt = 1e-3;
        let omega = 2.75 * std::f64::consts::PI;
        let a = 0.05;
        let mut p = DelayLinePlant::new(5.0, dt, 0.2).unwrap();
        let mut max_err: f64 = 0.0;
        for i in 1..=20_000 {
            let t = i as f64 * dt;
            let out = p.step(0.2 + a * (omega * t).sin(), dt);
            if t > 5.0 + dt {
                let expect = 0.2 + a * (omega * (t - 5.0)).sin();
                max_err = max_err.max((out - expect).abs());
            }
        }
        // Linear interpolation on the grid: error O((omega dt)^2 a).
        assert!(max_err < 1e-5, "max shift error {max_err}");
    }

    #[test]
    fn delay_line_zero_delay_is_identity() {
        let mut p = DelayLinePlant::new(0.0, 1e-2, 0.2).unwrap();
        assert_eq!(p.step(0.31, 1e-2), 0.31);
        assert_eq!(p.step(0.35, 1e-2), 0.35);
    }

    #[test]
    fn delay_line_rejects_negative_delay() {
        assert!(DelayLinePlant::new(-1.0, 1e-2, 0.2).is_err());
    }
}
