//! Piecewise-constant-curvature centerline of the stacked arm.
//!
//! Each module is a circular arc of fixed length whose total bend is the
//! module's bend angle. Modules chain tip-to-base, and markers sit at equal
//! arc-length fractions along every module. Positive bend rotates the
//! tangent counterclockwise, so with the base pointing along +y the arm
//! curls toward -x.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_8, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bend magnitudes below this use the series expansion instead of `1/theta`.
pub const SERIES_THRESHOLD: f64 = 1e-6;

/// Position and tangent orientation (w.r.t. +x) of one centerline marker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct MarkerTuple {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
}

impl MarkerTuple {
    pub fn new(x: f64, y: f64, phi: f64) -> Self {
        Self { x, y, phi }
    }

    pub fn distance(&self, other: &MarkerTuple) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 3]> for MarkerTuple {
    fn from([x, y, phi]: [f64; 3]) -> Self {
        Self { x, y, phi }
    }
}

impl From<MarkerTuple> for [f64; 3] {
    fn from(m: MarkerTuple) -> Self {
        [m.x, m.y, m.phi]
    }
}

/// A planar pose: position plus tangent angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmGeometry {
    pub module_count: usize,
    /// Arc length of one module, meters.
    pub module_length: f64,
    pub markers_per_module: usize,
    /// Origin marker pose; the arm grows from here.
    pub base: Pose,
    /// Largest admissible |bend| per module, radians.
    pub theta_max: f64,
}

impl Default for ArmGeometry {
    fn default() -> Self {
        Self {
            module_count: 2,
            module_length: 0.20,
            markers_per_module: 5,
            base: Pose {
                x: 0.0,
                y: 0.0,
                heading: FRAC_PI_2,
            },
            theta_max: FRAC_PI_8,
        }
    }
}

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// `sin(e)/e` and `(1 - cos(e))/e`, with a Taylor fallback near zero.
fn arc_factors(e: f64, series: bool) -> (f64, f64) {
    if series {
        let e2 = e * e;
        (1.0 - e2 / 6.0, 0.5 * e - e * e2 / 24.0)
    } else {
        (e.sin() / e, (1.0 - e.cos()) / e)
    }
}

impl ArmGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.module_count == 0 || self.markers_per_module == 0 {
            return Err(Error::invalid(
                "module and marker counts must be at least 1",
            ));
        }
        if !(self.module_length > 0.0) || !(self.theta_max > 0.0) {
            return Err(Error::invalid(
                "module length and theta_max must be positive",
            ));
        }
        Ok(())
    }

    pub fn marker_count(&self) -> usize {
        self.module_count * self.markers_per_module
    }

    /// Pose at arc length `s` along a module of bend `theta` starting at `start`.
    /// No range check; usable for any finite bend.
    pub fn pose_along(&self, start: Pose, theta: f64, s: f64) -> Pose {
        let e = theta * s / self.module_length;
        let (sinc, cosc) = arc_factors(e, theta.abs() < SERIES_THRESHOLD);
        let (sa, ca) = start.heading.sin_cos();
        Pose {
            x: start.x + s * (ca * sinc - sa * cosc),
            y: start.y + s * (sa * sinc + ca * cosc),
            heading: start.heading + e,
        }
    }

    /// Marker tuples for arbitrary finite bends, base to tip.
    pub fn markers_unchecked(&self, theta: &[f64]) -> Vec<MarkerTuple> {
        let mut out = Vec::with_capacity(self.marker_count());
        let mut start = self.base;
        let n = self.markers_per_module as f64;
        for &th in theta {
            let mut tip = start;
            for j in 1..=self.markers_per_module {
                let s = self.module_length * j as f64 / n;
                tip = self.pose_along(start, th, s);
                out.push(MarkerTuple::new(tip.x, tip.y, wrap_angle(tip.heading)));
            }
            start = tip;
        }
        out
    }

    pub fn check_bends(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.module_count {
            return Err(Error::Dimension {
                what: "bend angles",
                expected: self.module_count,
                got: theta.len(),
            });
        }
        for &th in theta {
            if !th.is_finite() {
                return Err(Error::NonFinite("bend angles"));
            }
            if th.abs() > self.theta_max {
                return Err(Error::OutOfRange {
                    what: "bend angle",
                    value: th,
                    min: -self.theta_max,
                    max: self.theta_max,
                });
            }
        }
        Ok(())
    }

    /// Centerline markers for admissible bends, ordered base to tip.
    pub fn marker_positions(&self, theta: &[f64]) -> Result<Vec<MarkerTuple>> {
        self.check_bends(theta)?;
        Ok(self.markers_unchecked(theta))
    }

    /// Recovers per-module bends from marker orientations.
    pub fn bend_from_markers(&self, markers: &[MarkerTuple]) -> Result<Vec<f64>> {
        if markers.len() != self.marker_count() {
            return Err(Error::Dimension {
                what: "markers",
                expected: self.marker_count(),
                got: markers.len(),
            });
        }
        let mut prev = self.base.heading;
        Ok(markers
            .chunks(self.markers_per_module)
            .map(|module| {
                let tip = module[module.len() - 1].phi;
                let th = wrap_angle(tip - prev);
                prev = tip;
                th
            })
            .collect())
    }

    /// Tip position of the last module.
    pub fn tip(&self, theta: &[f64]) -> Result<MarkerTuple> {
        Ok(*self
            .marker_positions(theta)?
            .last()
            .expect("at least one marker"))
    }
}
