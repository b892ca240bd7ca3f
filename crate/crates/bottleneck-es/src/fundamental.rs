//! Equilibrium flow-density relations and the static bottleneck map.
//!
//! Everything downstream of the solver assumes a concave fundamental diagram:
//! demand/supply splitting, the CFL bound, and the existence of a unique
//! flow-maximizing density all follow from it.

use crate::error::{Error, Result};

/// Equilibrium flow-density law Q(rho) on `[0, max_density]`.
///
/// Contract for implementations: Q is C2 and strictly concave with
/// Q(0) = Q(max_density) = 0, so `critical_density` is the unique maximizer
/// of Q, demand is non-decreasing and supply non-increasing in density.
pub trait FundamentalDiagram {
    /// Jam density at which flow vanishes.
    fn max_density(&self) -> f64;

    /// Unique density maximizing Q.
    fn critical_density(&self) -> f64;

    /// Flow Q(rho) in vehicles per second.
    fn flux(&self, rho: f64) -> Result<f64>;

    /// Characteristic speed Q'(rho); positive in free flow, negative when
    /// congested.
    fn char_speed(&self, rho: f64) -> Result<f64>;

    /// Equilibrium vehicle speed V(rho) = Q(rho)/rho, extended to rho = 0 by
    /// its limit Q'(0).
    fn velocity(&self, rho: f64) -> Result<f64> {
        if rho == 0.0 {
            self.char_speed(0.0)
        } else {
            Ok(self.flux(rho)? / rho)
        }
    }

    /// Road capacity q_c = Q(critical density).
    fn capacity(&self) -> f64 {
        self.flux(self.critical_density())
            .expect("critical density lies in the valid range")
    }

    /// Godunov sending flux: Q(min(rho, rho_c)).
    fn demand(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        self.flux(rho.min(self.critical_density()))
    }

    /// Godunov receiving flux: Q(max(rho, rho_c)).
    fn supply(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        self.flux(rho.max(self.critical_density()))
    }

    /// Largest |Q'| over the valid range; concavity puts it at an endpoint.
    fn max_char_speed(&self) -> f64 {
        let a = self
            .char_speed(0.0)
            .expect("0 lies in the valid range")
            .abs();
        let b = self
            .char_speed(self.max_density())
            .expect("max density lies in the valid range")
            .abs();
        a.max(b)
    }

    fn check_density(&self, rho: f64) -> Result<()> {
        if rho.is_finite() && (0.0..=self.max_density()).contains(&rho) {
            Ok(())
        } else {
            Err(self.out_of_range(rho))
        }
    }

    fn out_of_range(&self, rho: f64) -> Error {
        Error::DensityOutOfRange {
            rho,
            rho_max: self.max_density(),
        }
    }
}

/// Greenshield diagram: V(rho) = v_f (1 - rho/rho_m), Q(rho) = rho V(rho).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Greenshields {
    v_f: f64,
    rho_m: f64,
}

impl Greenshields {
    pub fn new(v_f: f64, rho_m: f64) -> Result<Self> {
        if !(v_f.is_finite() && v_f > 0.0) {
            return Err(Error::invalid("v_f", format!("must be positive, got {v_f}")));
        }
        if !(rho_m.is_finite() && rho_m > 0.0) {
            return Err(Error::invalid(
                "rho_m",
                format!("must be positive, got {rho_m}"),
            ));
        }
        Ok(Greenshields { v_f, rho_m })
    }

    pub fn free_speed(&self) -> f64 {
        self.v_f
    }
}

impl FundamentalDiagram for Greenshields {
    fn max_density(&self) -> f64 {
        self.rho_m
    }

    fn critical_density(&self) -> f64 {
        self.rho_m / 2.0
    }

    fn flux(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.v_f * rho * (1.0 - rho / self.rho_m))
    }

    fn char_speed(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.v_f * (1.0 - 2.0 * rho / self.rho_m))
    }

    fn velocity(&self, rho: f64) -> Result<f64> {
        self.check_density(rho)?;
        Ok(self.v_f * (1.0 - rho / self.rho_m))
    }

    fn max_char_speed(&self) -> f64 {
        self.v_f
    }
}

/// Static outflow map of the bottleneck zone: a concave parabola with peak
/// flow `q_star` at density `rho_star` and curvature `hessian` < 0, clamped
/// below at zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BottleneckMap {
    q_star: f64,
    rho_star: f64,
    hessian: f64,
}

impl BottleneckMap {
    pub fn new(q_star: f64, rho_star: f64, hessian: f64) -> Result<Self> {
        if !(q_star.is_finite() && q_star > 0.0) {
            return Err(Error::invalid(
                "q_star",
                format!("must be positive, got {q_star}"),
            ));
        }
        if !(rho_star.is_finite() && rho_star > 0.0) {
            return Err(Error::invalid(
                "rho_star",
                format!("must be positive, got {rho_star}"),
            ));
        }
        if !(hessian.is_finite() && hessian < 0.0) {
            return Err(Error::invalid(
                "hessian",
                format!("must be negative, got {hessian}"),
            ));
        }
        Ok(BottleneckMap {
            q_star,
            rho_star,
            hessian,
        })
    }

    /// Builds the map from a capacity-drop factor `c_d` in (0, 1] and the
    /// reduced jam density of the bottleneck zone. The resulting parabola is
    /// the Greenshield flux with jam density `reduced_rho_m` and the upstream
    /// free speed, so q_star = c_d q_c, rho_star = reduced_rho_m / 2 and
    /// hessian = -2 v_f / reduced_rho_m.
    pub fn from_capacity_drop(
        diagram: &Greenshields,
        c_d: f64,
        reduced_rho_m: f64,
    ) -> Result<Self> {
        if !(c_d.is_finite() && c_d > 0.0 && c_d <= 1.0) {
            return Err(Error::invalid("c_d", format!("must be in (0, 1], got {c_d}")));
        }
        if !(reduced_rho_m.is_finite() && reduced_rho_m > 0.0) {
            return Err(Error::invalid(
                "varrho_m",
                format!("must be positive, got {reduced_rho_m}"),
            ));
        }
        let rho_star = reduced_rho_m / 2.0;
        if rho_star >= diagram.critical_density() {
            return Err(Error::invalid(
                "varrho_m",
                format!(
                    "optimal density {rho_star} must lie below the critical density {}",
                    diagram.critical_density()
                ),
            ));
        }
        BottleneckMap::new(
            c_d * diagram.capacity(),
            rho_star,
            -2.0 * diagram.free_speed() / reduced_rho_m,
        )
    }

    /// Outflow for a given density at the bottleneck entrance, clamped below
    /// at zero. Callers must pass rho_out >= 0.
    pub fn outflow(&self, rho_out: f64) -> f64 {
        debug_assert!(rho_out >= 0.0, "bottleneck density must be non-negative");
        let d = rho_out - self.rho_star;
        (self.q_star + 0.5 * self.hessian * d * d).max(0.0)
    }

    pub fn q_star(&self) -> f64 {
        self.q_star
    }

    pub fn rho_star(&self) -> f64 {
        self.rho_star
    }

    pub fn hessian(&self) -> f64 {
        self.hessian
    }
}

/// Free-flow operating point used to linearize the transport dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferencePoint {
    pub rho_r: f64,
    pub q_r: f64,
    /// Characteristic transport speed u = Q'(rho_r), positive in free flow.
    pub u: f64,
    pub length: f64,
    /// Transport delay D = length / u.
    pub delay: f64,
}

/// Linearizes a diagram at `rho_r` on a segment of the given length.
/// Requires 0 < rho_r < critical density so the transport speed is positive.
pub fn reference_from<D: FundamentalDiagram>(
    diagram: &D,
    rho_r: f64,
    length: f64,
) -> Result<ReferencePoint> {
    if !(length.is_finite() && length > 0.0) {
        return Err(Error::invalid(
            "length",
            format!("must be positive, got {length}"),
        ));
    }
    if !(rho_r.is_finite() && rho_r > 0.0 && rho_r < diagram.critical_density()) {
        return Err(Error::invalid(
            "rho_r",
            format!(
                "must lie in (0, {}) for free-flow transport, got {rho_r}",
                diagram.critical_density()
            ),
        ));
    }
    let u = diagram.char_speed(rho_r)?;
    Ok(ReferencePoint {
        rho_r,
        q_r: diagram.flux(rho_r)?,
        u,
        length,
        delay: length / u,
    })
}
