//! Config-file parsing, CSV and report emission, and the command
//! implementations behind the `bottleneck-es` binary.
//!
//! The config format is one `key = value` per line with `#` comments; every
//! key has a default, so an empty (or absent) file reproduces the reference
//! experiment. Unknown keys are hard errors: a typo must not silently run a
//! different experiment. The `# key = value` echo lines at the top of every
//! CSV parse back through this module, so any output file doubles as the
//! config that re-runs it.

use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::lwr::OutletBoundary;
use crate::metrics::{self, Column};
use crate::sim::{
    run_averaged_oracle, run_closed_loop, run_open_loop, BottleneckSpec, OpenLoopScenario,
    PlantKind, RunOutcome, RunRecord, SimConfig,
};

/// Exactly the column order promised for every CSV.
pub const CSV_HEADER: &str = "t,rho_in,rho_out,q_out,G,H_hat,U,total_veh,clamps";

/// Parses a config document against the built-in defaults.
pub fn parse_config(text: &str) -> Result<SimConfig> {
    parse_config_with_overrides(text, &[])
}

/// Parses a config document, then applies `key=value` overrides in order.
/// Overrides go through the same key table as the file, so an unknown or
/// malformed override fails the same way a bad config line does.
pub fn parse_config_with_overrides(text: &str, overrides: &[String]) -> Result<SimConfig> {
    let mut b = Builder::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected 'key = value', got '{line}'",
                i + 1
            ))
        })?;
        b.apply(key.trim(), value.trim(), &format!("line {}", i + 1))?;
    }
    for ov in overrides {
        let (key, value) = ov.split_once('=').ok_or_else(|| {
            Error::Config(format!("override '{ov}': expected KEY=VALUE"))
        })?;
        b.apply(key.trim(), value.trim(), &format!("override '{ov}'"))?;
    }
    b.finish()
}

/// Accumulates keys into a SimConfig; the bottleneck keys need deferred
/// assembly because the capacity-drop pair and the explicit triple are
/// mutually exclusive ways to specify the same thing.
struct Builder {
    cfg: SimConfig,
    c_d: f64,
    varrho_m: f64,
    saw_capacity_drop: bool,
    q_star: Option<f64>,
    rho_star: Option<f64>,
    hessian: Option<f64>,
}

impl Builder {
    fn new() -> Builder {
        let cfg = SimConfig::default();
        let (c_d, varrho_m) = match cfg.bottleneck {
            BottleneckSpec::CapacityDrop { c_d, varrho_m } => (c_d, varrho_m),
            BottleneckSpec::Explicit { .. } => unreachable!("default is capacity drop"),
        };
        Builder {
            cfg,
            c_d,
            varrho_m,
            saw_capacity_drop: false,
            q_star: None,
            rho_star: None,
            hessian: None,
        }
    }

    fn apply(&mut self, key: &str, value: &str, at: &str) -> Result<()> {
        let num = || -> Result<f64> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("{at}: {key} expects a number, got '{value}'")))
        };
        match key {
            "v_f" => self.cfg.v_f = num()?,
            "rho_m" => self.cfg.rho_m = num()?,
            "c_d" => {
                self.c_d = num()?;
                self.saw_capacity_drop = true;
            }
            "varrho_m" => {
                self.varrho_m = num()?;
                self.saw_capacity_drop = true;
            }
            "q_star" => self.q_star = Some(num()?),
            "rho_star" => self.rho_star = Some(num()?),
            "hessian" => self.hessian = Some(num()?),
            "length" => self.cfg.length = num()?,
            "dx" => self.cfg.dx = num()?,
            "rho_r" => self.cfg.rho_r = num()?,
            "a" => self.cfg.amplitude = num()?,
            "omega" => self.cfg.frequency = num()?,
            "k" => self.cfg.gain = num()?,
            "c" => self.cfg.corner = num()?,
            "washout" => self.cfg.washout = num()?,
            "t_end" => self.cfg.t_end = num()?,
            "dt" => self.cfg.dt = Some(num()?),
            "cfl_safety" => self.cfg.cfl_safety = num()?,
            "delay" => self.cfg.delay = Some(num()?),
            "plant" => {
                self.cfg.plant = match value {
                    "pure_delay" => PlantKind::PureDelay,
                    "nonlinear_lwr" => PlantKind::NonlinearLwr,
                    _ => {
                        return Err(Error::Config(format!(
                            "{at}: plant must be pure_delay or nonlinear_lwr, got '{value}'"
                        )))
                    }
                }
            }
            "outlet" => {
                self.cfg.outlet = match value {
                    "free" => OutletBoundary::FreeOutflow,
                    "coupled" => OutletBoundary::BottleneckCoupled,
                    _ => {
                        return Err(Error::Config(format!(
                            "{at}: outlet must be free or coupled, got '{value}'"
                        )))
                    }
                }
            }
            "rho0" => self.cfg.rho0 = Some(num()?),
            "rho_hat0" => self.cfg.rho_hat0 = num()?,
            "margin" => self.cfg.margin = num()?,
            "stride" => {
                self.cfg.stride = value.parse().map_err(|_| {
                    Error::Config(format!(
                        "{at}: stride expects a positive integer, got '{value}'"
                    ))
                })?
            }
            // Metadata echoed into CSV headers; tolerated so the whole
            // `#` block of an artifact re-runs as a config without editing.
            "scenario" | "version" => {}
            _ => return Err(Error::Config(format!("{at}: unknown key '{key}'"))),
        }
        Ok(())
    }

    fn finish(mut self) -> Result<SimConfig> {
        let explicit = [self.q_star, self.rho_star, self.hessian];
        let n_explicit = explicit.iter().filter(|v| v.is_some()).count();
        if n_explicit > 0 && self.saw_capacity_drop {
            return Err(Error::Config(
                "give either c_d/varrho_m or q_star/rho_star/hessian, not both".into(),
            ));
        }
        if n_explicit > 0 {
            if n_explicit < 3 {
                return Err(Error::Config(
                    "explicit bottleneck needs all of q_star, rho_star, hessian".into(),
                ));
            }
            self.cfg.bottleneck = BottleneckSpec::Explicit {
                q_star: self.q_star.unwrap(),
                rho_star: self.rho_star.unwrap(),
                hessian: self.hessian.unwrap(),
            };
        } else {
            self.cfg.bottleneck = BottleneckSpec::CapacityDrop {
                c_d: self.c_d,
                varrho_m: self.varrho_m,
            };
        }
        Ok(self.cfg)
    }
}

/// Writes the full CSV artifact: `#`-prefixed config echo (enough to re-run
/// the experiment), the fixed header row, then one row per record entry at
/// full double precision. Wall-clock time is deliberately absent so repeated
/// runs are byte-identical.
pub fn write_csv(record: &RunRecord, mut out: impl io::Write) -> io::Result<()> {
    writeln!(out, "# scenario = {}", record.meta.scenario)?;
    writeln!(out, "# version = {}", record.meta.version)?;
    for (k, v) in &record.meta.config_echo {
        writeln!(out, "# {k} = {v}")?;
    }
    if let RunOutcome::Aborted { t, reason } = &record.meta.outcome {
        writeln!(out, "# aborted at t = {t}: {reason}")?;
    }
    writeln!(out, "{CSV_HEADER}")?;
    for r in &record.rows {
        writeln!(
            out,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.t,
            r.rho_in,
            r.rho_out,
            r.q_out,
            r.gradient,
            r.hessian,
            r.control,
            r.total_vehicles,
            r.clamps
        )?;
    }
    Ok(())
}

/// Writes the sibling diagnostics report: band convergence of the
/// period-averaged outlet density, trailing-window statistics, conservation
/// audit, and (for the oracle) the fitted decay rate. Pure function of the
/// record, so the report is as reproducible as the CSV.
pub fn write_report(record: &RunRecord, mut out: impl io::Write) -> Result<()> {
    let m = &record.meta;
    writeln!(out, "scenario: {}", m.scenario)?;
    match &m.outcome {
        RunOutcome::Completed => writeln!(out, "outcome: completed")?,
        RunOutcome::Aborted { t, reason } => writeln!(out, "outcome: aborted at t = {t} ({reason})")?,
    }
    writeln!(out, "rows: {}", record.rows.len())?;
    writeln!(out, "dt: {}", m.dt)?;
    writeln!(out, "delay: {}", m.delay)?;
    writeln!(out, "dither_period: {}", m.period)?;
    writeln!(out, "rho_star: {}", m.rho_star)?;
    writeln!(out, "q_star: {}", m.q_star)?;
    writeln!(out, "hessian: {}", m.hessian)?;
    if record.rows.is_empty() {
        return Ok(());
    }
    let window = 10.0 * m.period;
    let rho = metrics::series(record, Column::RhoOut);
    let smoothed = metrics::sliding_mean(&rho, m.period);
    let rho_band = metrics::band_convergence(&smoothed, m.rho_star, 0.02, window)?;
    let rho_raw = metrics::band_convergence(&rho, m.rho_star, 0.02, window)?;
    let q_stats = metrics::band_convergence(
        &metrics::series(record, Column::QOut),
        m.q_star,
        f64::INFINITY,
        window,
    )?;
    writeln!(out, "band_center: {}", rho_band.center)?;
    writeln!(out, "band_halfwidth: {}", rho_band.halfwidth)?;
    match rho_band.entry_time {
        Some(t) => writeln!(out, "entry_time_period_averaged: {t}")?,
        None => writeln!(out, "entry_time_period_averaged: did not converge")?,
    }
    writeln!(out, "trailing_window: {window}")?;
    writeln!(out, "trailing_rho_mean: {}", rho_raw.trailing_mean)?;
    writeln!(out, "trailing_rho_ripple: {}", rho_raw.trailing_ripple)?;
    writeln!(out, "trailing_q_mean: {}", q_stats.trailing_mean)?;
    writeln!(
        out,
        "residual_rho: {}",
        (rho_raw.trailing_mean - m.rho_star).abs()
    )?;
    writeln!(
        out,
        "residual_q: {}",
        (q_stats.trailing_mean - m.q_star).abs()
    )?;
    writeln!(
        out,
        "final_clamps: {}",
        record.rows.last().expect("non-empty").clamps
    )?;
    let change =
        m.final_total_vehicles - record.rows.first().expect("non-empty").total_vehicles;
    writeln!(out, "inflow_integral: {}", m.inflow_integral)?;
    writeln!(out, "outflow_integral: {}", m.outflow_integral)?;
    writeln!(out, "vehicle_change: {change}")?;
    writeln!(
        out,
        "conservation_residual: {}",
        change - (m.inflow_integral - m.outflow_integral)
    )?;
    if m.scenario == "averaged_oracle" {
        // rho_in carries rho_star + e_av for the oracle; fit the decay of
        // |e_av| once the delay interval has passed, stopping where the
        // subtraction degenerates into cancellation noise.
        let e_av: Vec<(f64, f64)> = metrics::series(record, Column::RhoIn)
            .into_iter()
            .map(|(t, v)| (t, (v - m.rho_star).abs()))
            .take_while(|&(_, v)| v > 1e-12)
            .collect();
        match metrics::exp_rate_fit(&e_av, m.delay) {
            Ok(rate) => writeln!(out, "fitted_rate: {rate}")?,
            Err(_) => writeln!(out, "fitted_rate: n/a (error signal touches zero)")?,
        }
    }
    Ok(())
}

/// Reads the config (or takes defaults when absent) and applies overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<SimConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config_with_overrides(&text, overrides)
}

/// Exit status for an error that prevented a run: config and validation
/// problems map to 2, I/O to 1.
fn error_exit(e: &Error) -> i32 {
    match e {
        Error::Io(_) => 1,
        _ => 2,
    }
}

/// Exit status for a finished run: aborted integrations flag 3 after their
/// partial record is flushed.
fn outcome_exit(record: &RunRecord) -> i32 {
    if record.completed() {
        0
    } else {
        3
    }
}

/// Writes the CSV and its sibling `.report`, creating parent directories.
fn write_artifacts(record: &RunRecord, csv_path: &Path) -> Result<()> {
    if let Some(dir) = csv_path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut csv = io::BufWriter::new(fs::File::create(csv_path)?);
    write_csv(record, &mut csv)?;
    csv.flush()?;
    let mut report = io::BufWriter::new(fs::File::create(csv_path.with_extension("report"))?);
    write_report(record, &mut report)?;
    report.flush()?;
    Ok(())
}

fn finish(record: &RunRecord, csv_path: &Path) -> i32 {
    if let Err(e) = write_artifacts(record, csv_path) {
        eprintln!("error: {e}");
        return 1;
    }
    eprintln!(
        "{}: {} rows -> {} ({:.2?})",
        record.meta.scenario,
        record.rows.len(),
        csv_path.display(),
        record.meta.wall_clock
    );
    if let RunOutcome::Aborted { t, reason } = &record.meta.outcome {
        eprintln!("aborted at t = {t}: {reason} (partial record flushed)");
    }
    outcome_exit(record)
}

/// Closed-loop run: parse, simulate, emit CSV + report.
pub fn cmd_run(config: Option<&Path>, out: &Path, overrides: &[String]) -> i32 {
    let record = match load_config(config, overrides).and_then(|cfg| run_closed_loop(&cfg)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    finish(&record, out)
}

/// Open-loop baseline run under the given demand scenario.
pub fn cmd_baseline(
    config: Option<&Path>,
    out: &Path,
    scenario: OpenLoopScenario,
    overrides: &[String],
) -> i32 {
    let record = match load_config(config, overrides).and_then(|cfg| run_open_loop(&cfg, scenario))
    {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    finish(&record, out)
}

/// Averaged-model oracle run.
pub fn cmd_oracle(config: Option<&Path>, out: &Path, overrides: &[String]) -> i32 {
    let record = match load_config(config, overrides).and_then(|cfg| run_averaged_oracle(&cfg)) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return error_exit(&e);
        }
    };
    finish(&record, out)
}

/// Dither-parameter sweep: runs the (amplitude, frequency) grid with up to
/// `jobs` worker threads, writes one CSV per cell plus `summary.csv` and
/// `ratios.csv` into `out_dir`.
pub fn cmd_sweep(
    config: Option<&Path>,
    out_dir: &Path,
    amplitudes: &[f64],
    frequencies: &[f64],
    jobs: usize,
    overrides: &[String],
) -> i32 {
    match sweep_impl(config, out_dir, amplitudes, frequencies, jobs, overrides) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            error_exit(&e)
        }
    }
}

fn sweep_impl(
    config: Option<&Path>,
    out_dir: &Path,
    amplitudes: &[f64],
    frequencies: &[f64],
    jobs: usize,
    overrides: &[String],
) -> Result<i32> {
    if amplitudes.is_empty() || frequencies.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let base = load_config(config, overrides)?;
    let mut cells: Vec<(f64, f64, SimConfig)> = Vec::new();
    for &w in frequencies {
        for &a in amplitudes {
            let cfg = SimConfig {
                amplitude: a,
                frequency: w,
                ..base.clone()
            };
            // Validate every cell before spending time on any of them.
            cfg.resolve()?;
            cells.push((a, w, cfg));
        }
    }
    fs::create_dir_all(out_dir)?;

    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RunRecord>>>> =
        cells.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let result = run_closed_loop(&cells[i].2);
                *slots[i].lock().expect("no poisoned cell") = Some(result);
            });
        }
    });

    let mut records = Vec::with_capacity(cells.len());
    for slot in slots {
        let result = slot
            .into_inner()
            .expect("no poisoned cell")
            .expect("every cell index was claimed");
        records.push(result?);
    }

    let mut rows = Vec::with_capacity(records.len());
    for ((a, w, _), record) in cells.iter().zip(&records) {
        write_artifacts(record, &out_dir.join(format!("run_a{a}_omega{w}.csv")))?;
        rows.push(metrics::scaling_row(*a, *w, record)?);
    }

    let mut summary = io::BufWriter::new(fs::File::create(out_dir.join("summary.csv"))?);
    writeln!(summary, "a,omega,residual_rho,residual_q,converged")?;
    for r in &rows {
        writeln!(
            summary,
            "{:.16e},{:.16e},{:.16e},{:.16e},{}",
            r.amplitude, r.frequency, r.residual_rho, r.residual_q, r.converged
        )?;
    }
    summary.flush()?;

    let (a_ratios, w_ratios) = metrics::scaling_ratios(&rows, amplitudes, frequencies);
    let mut ratios = io::BufWriter::new(fs::File::create(out_dir.join("ratios.csv"))?);
    writeln!(ratios, "kind,fixed,from,to,ratio")?;
    for r in &a_ratios {
        writeln!(
            ratios,
            "amplitude,{:.16e},{:.16e},{:.16e},{:.16e}",
            r.frequency, r.a_from, r.a_to, r.ratio_q
        )?;
    }
    for r in &w_ratios {
        writeln!(
            ratios,
            "frequency,{:.16e},{:.16e},{:.16e},{:.16e}",
            r.amplitude, r.w_from, r.w_to, r.ratio_rho
        )?;
    }
    ratios.flush()?;

    eprintln!(
        "sweep: {} cells -> {}",
        records.len(),
        out_dir.display()
    );
    Ok(if records.iter().all(|r| r.completed()) {
        0
    } else {
        3
    })
}
