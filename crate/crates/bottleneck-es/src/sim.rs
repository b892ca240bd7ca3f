//! Scenario orchestration: closed-loop extremum-seeking runs, uncontrolled
//! open-loop runs, and the averaged-system oracle, over either plant.
//!
//! A run owns a single fixed step dt shared by plant and controller, records
//! every `stride`-th step into a `RunRecord`, and never panics on runtime
//! blow-up: a non-finite state aborts the run and keeps the rows produced so
//! far, with the abort time and reason in the metadata.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::escontrol::{EsController, EsParams};
use crate::fundamental::{
    reference_from, BottleneckMap, FundamentalDiagram, Greenshields, ReferencePoint,
};
use crate::history::SampleHistory;
use crate::lwr::{cfl_dt, DelayLinePlant, GodunovSolver, OutletBoundary, RoadState, StepFluxes};

/// Plant used to transport the applied inlet density to the outlet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantKind {
    /// Linearized transport: the outlet density reproduces the inlet density
    /// exactly one delay D later.
    PureDelay,
    /// Godunov discretization of the conservation law.
    NonlinearLwr,
}

impl PlantKind {
    pub fn name(&self) -> &'static str {
        match self {
            PlantKind::PureDelay => "pure_delay",
            PlantKind::NonlinearLwr => "nonlinear_lwr",
        }
    }
}

/// How the bottleneck map is specified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BottleneckSpec {
    /// Capacity-reduction rate and reduced jam density of the constricted
    /// zone; the quadratic map parameters follow from the diagram.
    CapacityDrop { c_d: f64, varrho_m: f64 },
    /// Direct quadratic-map parameters.
    Explicit {
        q_star: f64,
        rho_star: f64,
        hessian: f64,
    },
}

/// Full description of a run. `Default` is the nominal configuration: the
/// 100 m segment with a 60% capacity drop, reference-fidelity grid, and the
/// delay-consistent linearized plant.
///
/// The default plant is `PureDelay` deliberately. The nonlinear plant's
/// kinematic transport delay at the bottleneck optimum, L / Q'(rho_star)
/// = 6.25 s, exceeds the compensated delay D = L / Q'(rho_r) = 5 s designed
/// at the free-flow reference; the phase mismatch (omega * 1.25 s ~ 10.8 rad)
/// rotates the demodulation and biases the converged outlet density to
/// ~0.233 instead of 0.240, and first-order wave steepening attenuates the
/// outlet dither several-fold, collapsing the curvature estimate. The
/// linearized plant is the configuration the control design actually
/// compensates; the nonlinear plant stays selectable for transport studies.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Free-flow speed v_f (m/s).
    pub v_f: f64,
    /// Jam density rho_m (vehicles/m).
    pub rho_m: f64,
    pub bottleneck: BottleneckSpec,
    /// Segment length L (m).
    pub length: f64,
    /// Grid spacing dx (m); must divide the length.
    pub dx: f64,
    /// Free-flow reference density used to linearize transport.
    pub rho_r: f64,
    /// Dither amplitude a (vehicles/m).
    pub amplitude: f64,
    /// Dither frequency omega (rad/s).
    pub frequency: f64,
    /// Integrator gain k.
    pub gain: f64,
    /// Low-pass corner c (rad/s).
    pub corner: f64,
    /// Measurement washout corner (rad/s); see `escontrol`.
    pub washout: f64,
    /// Run duration (s).
    pub t_end: f64,
    /// Fixed step; `None` derives the CFL step from dx and cfl_safety.
    pub dt: Option<f64>,
    pub cfl_safety: f64,
    /// Compensated transport delay; `None` derives length / Q'(rho_r).
    pub delay: Option<f64>,
    pub plant: PlantKind,
    /// Outlet treatment for the LWR plant (the pure-delay plant has none).
    pub outlet: OutletBoundary,
    /// Uniform initial road density; `None` starts at rho_r.
    pub rho0: Option<f64>,
    /// Initial optimum estimate.
    pub rho_hat0: f64,
    /// Applied density is clamped to [0, critical density - margin].
    pub margin: f64,
    /// Record every stride-th step.
    pub stride: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            v_f: 40.0,
            rho_m: 0.8,
            bottleneck: BottleneckSpec::CapacityDrop {
                c_d: 0.6,
                varrho_m: 0.48,
            },
            length: 100.0,
            dx: 0.05,
            rho_r: 0.2,
            amplitude: 0.05,
            frequency: 2.75 * std::f64::consts::PI,
            gain: 0.005,
            corner: 50.0,
            washout: EsParams::DEFAULT_WASHOUT,
            t_end: 100.0,
            dt: None,
            cfl_safety: 0.8,
            delay: None,
            plant: PlantKind::PureDelay,
            outlet: OutletBoundary::FreeOutflow,
            rho0: None,
            rho_hat0: 0.12,
            margin: 0.02,
            stride: 10,
        }
    }
}

/// Configuration with every optional resolved and cross-checks done.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub diagram: Greenshields,
    pub bottleneck: BottleneckMap,
    pub reference: ReferencePoint,
    pub es: EsParams,
    pub dt: f64,
    pub delay: f64,
    pub steps: usize,
    pub rho0: f64,
    pub applied_max: f64,
}

impl SimConfig {
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let diagram = Greenshields::new(self.v_f, self.rho_m)?;
        let bottleneck = match self.bottleneck {
            BottleneckSpec::CapacityDrop { c_d, varrho_m } => {
                BottleneckMap::from_capacity_drop(&diagram, c_d, varrho_m)?
            }
            BottleneckSpec::Explicit {
                q_star,
                rho_star,
                hessian,
            } => BottleneckMap::new(q_star, rho_star, hessian)?,
        };
        if bottleneck.rho_star() >= diagram.critical_density() {
            return Err(Error::invalid(
                "rho_star",
                format!(
                    "optimum {} must stay below the critical density {}",
                    bottleneck.rho_star(),
                    diagram.critical_density()
                ),
            ));
        }
        let reference = reference_from(&diagram, self.rho_r, self.length)?;
        // Grid validity is checked regardless of plant: open-loop scenarios
        // may force the LWR plant onto a pure-delay configuration.
        RoadState::uniform(self.length, self.dx, 0.0)?;
        let cfl_limit = self.dx / diagram.max_char_speed();
        let dt = match self.dt {
            Some(dt) => {
                if !(dt.is_finite() && dt > 0.0) {
                    return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
                }
                if self.plant == PlantKind::NonlinearLwr && dt > cfl_limit * (1.0 + 1e-12) {
                    return Err(Error::CflViolation {
                        dt,
                        dx: self.dx,
                        u_max: diagram.max_char_speed(),
                        limit: cfl_limit,
                    });
                }
                dt
            }
            None => cfl_dt(self.dx, diagram.max_char_speed(), self.cfl_safety)?,
        };
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(Error::invalid(
                "t_end",
                format!("must be positive, got {}", self.t_end),
            ));
        }
        let steps = (self.t_end / dt).round().max(1.0) as usize;
        let delay = self.delay.unwrap_or(reference.delay);
        let es = EsParams::new(self.amplitude, self.frequency, self.gain, self.corner, delay)?
            .with_washout(self.washout)?;
        let rho0 = self.rho0.unwrap_or(self.rho_r);
        diagram.check_density(rho0)?;
        if !(self.margin.is_finite()
            && self.margin >= 0.0
            && self.margin < diagram.critical_density())
        {
            return Err(Error::invalid(
                "margin",
                format!(
                    "must lie in [0, {}), got {}",
                    diagram.critical_density(),
                    self.margin
                ),
            ));
        }
        if self.stride == 0 {
            return Err(Error::invalid("stride", "must be at least 1"));
        }
        Ok(ResolvedConfig {
            applied_max: diagram.critical_density() - self.margin,
            diagram,
            bottleneck,
            reference,
            es,
            dt,
            delay,
            steps,
            rho0,
        })
    }

    /// Key-value echo of the fully resolved configuration, using the same
    /// keys the config-file parser accepts. Written as `#` comment lines at
    /// the top of every CSV so a run is reproducible from its output alone.
    pub fn echo(&self, r: &ResolvedConfig) -> Vec<(String, String)> {
        let mut kv: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: String| kv.push((k.to_string(), v));
        push("v_f", format!("{}", self.v_f));
        push("rho_m", format!("{}", self.rho_m));
        match self.bottleneck {
            BottleneckSpec::CapacityDrop { c_d, varrho_m } => {
                push("c_d", format!("{c_d}"));
                push("varrho_m", format!("{varrho_m}"));
            }
            BottleneckSpec::Explicit {
                q_star,
                rho_star,
                hessian,
            } => {
                push("q_star", format!("{q_star}"));
                push("rho_star", format!("{rho_star}"));
                push("hessian", format!("{hessian}"));
            }
        }
        push("length", format!("{}", self.length));
        push("dx", format!("{}", self.dx));
        push("rho_r", format!("{}", self.rho_r));
        push("a", format!("{}", self.amplitude));
        push("omega", format!("{}", self.frequency));
        push("k", format!("{}", self.gain));
        push("c", format!("{}", self.corner));
        push("washout", format!("{}", self.washout));
        push("t_end", format!("{}", self.t_end));
        push("dt", format!("{}", r.dt));
        push("cfl_safety", format!("{}", self.cfl_safety));
        push("delay", format!("{}", r.delay));
        push("plant", self.plant.name().to_string());
        push(
            "outlet",
            match self.outlet {
                OutletBoundary::FreeOutflow => "free".to_string(),
                OutletBoundary::BottleneckCoupled => "coupled".to_string(),
            },
        );
        push("rho0", format!("{}", r.rho0));
        push("rho_hat0", format!("{}", self.rho_hat0));
        push("margin", format!("{}", self.margin));
        push("stride", format!("{}", self.stride));
        kv
    }
}

/// One sampled step of a run.
#[derive(Debug, Clone, Copy)]
pub struct Row {
    pub t: f64,
    /// Density applied at the inlet at time t.
    pub rho_in: f64,
    /// Outlet density at time t, before the step advances.
    pub rho_out: f64,
    /// Measured bottleneck outflow: the sensor map for closed-loop and
    /// free-outflow runs, the realized boundary flux for coupled runs.
    pub q_out: f64,
    /// Gradient estimate G (zero in open-loop runs).
    pub gradient: f64,
    /// Curvature estimate H_hat (zero in open-loop runs).
    pub hessian: f64,
    /// Filtered control U (zero in open-loop runs).
    pub control: f64,
    /// Vehicles currently on the segment.
    pub total_vehicles: f64,
    /// Cumulative clamp count (controller clamps for closed loop, solver
    /// density clamps for open loop).
    pub clamps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    /// A state stopped being finite or the plant rejected a step; rows up to
    /// the abort time are kept.
    Aborted { t: f64, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunMeta {
    pub scenario: &'static str,
    pub config_echo: Vec<(String, String)>,
    pub version: &'static str,
    /// Diagnostics only; never serialized, so repeated runs stay
    /// byte-identical.
    pub wall_clock: Duration,
    pub outcome: RunOutcome,
    pub dt: f64,
    pub delay: f64,
    /// Dither period 2 pi / omega.
    pub period: f64,
    pub rho_star: f64,
    pub q_star: f64,
    pub hessian: f64,
    /// Time integrals of the realized boundary fluxes, for conservation
    /// audits: final - initial vehicle count must equal their difference.
    pub inflow_integral: f64,
    pub outflow_integral: f64,
    /// Vehicle count after the last completed step, aligned with the flux
    /// integrals (rows sample the state before each step, so the last row
    /// lags this by up to one stride).
    pub final_total_vehicles: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub rows: Vec<Row>,
    pub meta: RunMeta,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.meta.outcome == RunOutcome::Completed
    }
}

/// Either transport model behind one interface.
enum Plant {
    Delay(DelayLinePlant),
    Lwr {
        solver: GodunovSolver<Greenshields>,
        state: RoadState,
    },
}

impl Plant {
    fn build(kind: PlantKind, outlet: OutletBoundary, cfg: &SimConfig, r: &ResolvedConfig) -> Result<Plant> {
        Ok(match kind {
            PlantKind::PureDelay => Plant::Delay(DelayLinePlant::new(r.delay, r.dt, r.rho0)?),
            PlantKind::NonlinearLwr => Plant::Lwr {
                solver: GodunovSolver::new(r.diagram, r.bottleneck, outlet),
                state: RoadState::uniform(cfg.length, cfg.dx, r.rho0)?,
            },
        })
    }

    fn outlet_density(&self) -> f64 {
        match self {
            Plant::Delay(d) => d.outlet_density(),
            Plant::Lwr { state, .. } => state.outlet_density(),
        }
    }

    /// Advances one step; returns the realized boundary fluxes. The delay
    /// line reports the linearized flux u * rho at both ends.
    fn step(&mut self, inlet: f64, dt: f64, u: f64) -> Result<StepFluxes> {
        match self {
            Plant::Delay(d) => {
                let outlet = d.step(inlet, dt);
                Ok(StepFluxes {
                    inflow: u * inlet,
                    outflow: u * outlet,
                })
            }
            Plant::Lwr { solver, state } => solver.step(state, inlet, dt),
        }
    }

    fn total_vehicles(&self, u: f64) -> f64 {
        match self {
            Plant::Delay(d) => u * d.history_integral(),
            Plant::Lwr { state, .. } => state.total_vehicles(),
        }
    }

    fn solver_clamps(&self) -> u64 {
        match self {
            Plant::Delay(_) => 0,
            Plant::Lwr { solver, .. } => solver.clamp_events(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn make_meta(
    scenario: &'static str,
    cfg: &SimConfig,
    r: &ResolvedConfig,
    outcome: RunOutcome,
    wall_clock: Duration,
    inflow_integral: f64,
    outflow_integral: f64,
    final_total_vehicles: f64,
) -> RunMeta {
    RunMeta {
        scenario,
        config_echo: cfg.echo(r),
        version: env!("CARGO_PKG_VERSION"),
        wall_clock,
        outcome,
        dt: r.dt,
        delay: r.delay,
        period: r.es.period(),
        rho_star: r.bottleneck.rho_star(),
        q_star: r.bottleneck.q_star(),
        hessian: r.bottleneck.hessian(),
        inflow_integral,
        outflow_integral,
        final_total_vehicles,
    }
}

/// Closed loop: measure q_out at the outlet, step the controller, apply the
/// returned inlet density, advance the plant.
pub fn run_closed_loop(cfg: &SimConfig) -> Result<RunRecord> {
    let r = cfg.resolve()?;
    let start = Instant::now();
    let mut controller = EsController::new(r.es, r.dt, cfg.rho_hat0, (0.0, r.applied_max), 0.0)?;
    let mut plant = Plant::build(cfg.plant, cfg.outlet, cfg, &r)?;
    let u = r.reference.u;
    let mut rows = Vec::with_capacity(r.steps / cfg.stride + 1);
    let (mut inflow_int, mut outflow_int) = (0.0, 0.0);
    let mut outcome = RunOutcome::Completed;
    for i in 0..r.steps {
        let t = i as f64 * r.dt;
        let rho_out = plant.outlet_density();
        let q_out = r.bottleneck.outflow(rho_out);
        let out = controller.step(q_out, r.dt);
        if !(out.control.is_finite() && controller.rho_hat().is_finite()) {
            outcome = RunOutcome::Aborted {
                t,
                reason: format!("controller state non-finite at t = {t:.6}"),
            };
            break;
        }
        if i % cfg.stride == 0 {
            rows.push(Row {
                t,
                rho_in: out.applied_density,
                rho_out,
                q_out,
                gradient: out.gradient,
                hessian: out.hessian,
                control: out.control,
                total_vehicles: plant.total_vehicles(u),
                clamps: controller.clamp_events(),
            });
        }
        match plant.step(out.applied_density, r.dt, u) {
            Ok(f) => {
                inflow_int += r.dt * f.inflow;
                outflow_int += r.dt * f.outflow;
            }
            Err(e) => {
                outcome = RunOutcome::Aborted {
                    t,
                    reason: e.to_string(),
                };
                break;
            }
        }
    }
    let final_total = plant.total_vehicles(u);
    Ok(RunRecord {
        rows,
        meta: make_meta(
            "closed_loop",
            cfg,
            &r,
            outcome,
            start.elapsed(),
            inflow_int,
            outflow_int,
            final_total,
        ),
    })
}

/// Uncontrolled scenarios.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpenLoopScenario {
    /// Inlet demand ramps linearly from rho_r to 0.9 rho_m over the run,
    /// with the outlet flux capped by the bottleneck, so congestion spills
    /// back and the discharge collapses. Always runs on the LWR plant: the
    /// collapse is a nonlinear congestion phenomenon.
    RampedDemand,
    /// Constant inlet density on the configured plant and outlet.
    ConstantInlet(f64),
}

pub fn run_open_loop(cfg: &SimConfig, scenario: OpenLoopScenario) -> Result<RunRecord> {
    let r = cfg.resolve()?;
    let (kind, outlet, scenario_name): (PlantKind, OutletBoundary, &'static str) = match scenario {
        OpenLoopScenario::RampedDemand => (
            PlantKind::NonlinearLwr,
            OutletBoundary::BottleneckCoupled,
            "open_loop_ramp",
        ),
        OpenLoopScenario::ConstantInlet(v) => {
            r.diagram.check_density(v)?;
            (cfg.plant, cfg.outlet, "open_loop_constant")
        }
    };
    let start = Instant::now();
    let mut plant = Plant::build(kind, outlet, cfg, &r)?;
    let u = r.reference.u;
    let ramp_target = 0.9 * cfg.rho_m;
    let mut rows = Vec::with_capacity(r.steps / cfg.stride + 1);
    let (mut inflow_int, mut outflow_int) = (0.0, 0.0);
    let mut outcome = RunOutcome::Completed;
    for i in 0..r.steps {
        let t = i as f64 * r.dt;
        let inlet = match scenario {
            OpenLoopScenario::RampedDemand => {
                cfg.rho_r + (ramp_target - cfg.rho_r) * (t / cfg.t_end).min(1.0)
            }
            OpenLoopScenario::ConstantInlet(v) => v,
        };
        let rho_out = plant.outlet_density();
        let fluxes = match plant.step(inlet, r.dt, u) {
            Ok(f) => {
                inflow_int += r.dt * f.inflow;
                outflow_int += r.dt * f.outflow;
                f
            }
            Err(e) => {
                outcome = RunOutcome::Aborted {
                    t,
                    reason: e.to_string(),
                };
                break;
            }
        };
        // Coupled outlets report the realized boundary flux (the discharge
        // that actually happened); free outlets report the sensor map.
        let q_out = match outlet {
            OutletBoundary::BottleneckCoupled => fluxes.outflow,
            OutletBoundary::FreeOutflow => r.bottleneck.outflow(rho_out),
        };
        if i % cfg.stride == 0 {
            rows.push(Row {
                t,
                rho_in: inlet,
                rho_out,
                q_out,
                gradient: 0.0,
                hessian: 0.0,
                control: 0.0,
                total_vehicles: plant.total_vehicles(u),
                clamps: plant.solver_clamps(),
            });
        }
    }
    let final_total = plant.total_vehicles(u);
    Ok(RunRecord {
        rows,
        meta: make_meta(
            scenario_name,
            cfg,
            &r,
            outcome,
            start.elapsed(),
            inflow_int,
            outflow_int,
            final_total,
        ),
    })
}

/// Averaged-system oracle: integrates the averaged error dynamics with the
/// true map curvature H,
///
/// ```text
/// theta' = U_av(t - D),
/// U_av'  = -c U_av + c k H (theta + I),   I = integral of U_av over [t-D, t]
/// ```
///
/// and reports e_av(t) = theta(t) + I(t), the averaged estimate error at the
/// inlet. Rows reuse the closed-loop columns: rho_out carries rho_star +
/// theta (the averaged outlet deviation, directly comparable to a
/// period-averaged closed-loop run), rho_in carries rho_star + e_av.
pub fn run_averaged_oracle(cfg: &SimConfig) -> Result<RunRecord> {
    let r = cfg.resolve()?;
    let start = Instant::now();
    let h = r.bottleneck.hessian();
    let (rho_star, q_star) = (r.bottleneck.rho_star(), r.bottleneck.q_star());
    let mut theta = cfg.rho_hat0 - rho_star;
    let mut u_av = 0.0;
    let mut history = SampleHistory::new(r.delay, r.dt, 0.0)?;
    let mut rows = Vec::with_capacity(r.steps / cfg.stride + 1);
    let mut outcome = RunOutcome::Completed;
    for i in 0..r.steps {
        let t = i as f64 * r.dt;
        let delayed = history.delayed();
        let integral = history.integral();
        if i % cfg.stride == 0 {
            rows.push(Row {
                t,
                rho_in: rho_star + theta + integral,
                rho_out: rho_star + theta,
                q_out: q_star + 0.5 * h * theta * theta,
                gradient: h * theta,
                hessian: h,
                control: u_av,
                total_vehicles: cfg.length * (rho_star + theta),
                clamps: 0,
            });
        }
        u_av += r.dt * r.es.corner * (r.es.gain * h * (theta + integral) - u_av);
        theta += r.dt * delayed;
        history.push(u_av);
        if !(u_av.is_finite() && theta.is_finite()) {
            outcome = RunOutcome::Aborted {
                t,
                reason: format!("averaged state non-finite at t = {t:.6}"),
            };
            break;
        }
    }
    Ok(RunRecord {
        rows,
        meta: make_meta(
            "averaged_oracle",
            cfg,
            &r,
            outcome,
            start.elapsed(),
            0.0,
            0.0,
            cfg.length * (rho_star + theta),
        ),
    })
}
