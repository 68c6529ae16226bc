//! Per-axis uncertainty gate between the fused position and LIO position.
//!
//! For each axis the fused value is used while its variance stays at or below
//! the axis threshold; above it the LIO value is used instead. The comparison
//! is strict (`>`), so a variance exactly at threshold keeps the fused value.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GateError {
    #[error("threshold for axis {axis} must be finite and > 0 (got {value})")]
    InvalidThreshold { axis: char, value: f64 },
    #[error("hysteresis fraction must be in [0, 1) (got {0})")]
    InvalidHysteresis(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseSource {
    Fusion,
    Lio,
}

impl PoseSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PoseSource::Fusion => "fusion",
            PoseSource::Lio => "lio",
        }
    }
}

impl std::str::FromStr for PoseSource {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fusion" => Ok(PoseSource::Fusion),
            "lio" => Ok(PoseSource::Lio),
            other => Err(format!("unknown pose source `{other}`")),
        }
    }
}

pub type AxisSources = [PoseSource; 3];

pub const ALL_FUSION: AxisSources = [PoseSource::Fusion; 3];

/// Per-axis variance thresholds, m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateThresholds {
    pub threshold_x: f64,
    pub threshold_y: f64,
    pub threshold_z: f64,
    #[serde(default)]
    pub hysteresis_fraction: f64,
}

impl Default for GateThresholds {
    fn default() -> Self {
        Self {
            threshold_x: 1.0,
            threshold_y: 1.0,
            threshold_z: 1.0,
            hysteresis_fraction: 0.0,
        }
    }
}

impl GateThresholds {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GateError> {
        Self {
            threshold_x: x,
            threshold_y: y,
            threshold_z: z,
            hysteresis_fraction: 0.0,
        }
        .validated()
    }

    pub fn with_hysteresis(mut self, fraction: f64) -> Result<Self, GateError> {
        self.hysteresis_fraction = fraction;
        self.validated()
    }

    pub fn validated(self) -> Result<Self, GateError> {
        for (axis, value) in ['x', 'y', 'z'].into_iter().zip(self.as_array()) {
            if !(value.is_finite() && value > 0.0) {
                return Err(GateError::InvalidThreshold { axis, value });
            }
        }
        let h = self.hysteresis_fraction;
        if !(h.is_finite() && (0.0..1.0).contains(&h)) {
            return Err(GateError::InvalidHysteresis(h));
        }
        Ok(self)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.threshold_x, self.threshold_y, self.threshold_z]
    }
}

/// Position-block variances used as the gate's uncertainty signal.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UncertaintyDiag {
    pub var_x: f64,
    pub var_y: f64,
    pub var_z: f64,
}

impl UncertaintyDiag {
    pub fn new(var_x: f64, var_y: f64, var_z: f64) -> Self {
        Self { var_x, var_y, var_z }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.var_x, self.var_y, self.var_z]
    }

    pub fn is_finite(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
    }
}

/// Result of gating one position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateSelection {
    pub position: Vector3<f64>,
    pub sources: AxisSources,
    /// At least one uncertainty entry was non-finite and forced to LIO.
    pub non_finite: bool,
}

/// Per-axis selection. `prev_sources` only matters when the thresholds carry
/// a hysteresis fraction: an axis that was on LIO returns to fusion only once
/// its variance drops to `threshold·(1 − h)`.
pub fn gate(
    fusion_state: &Vector3<f64>,
    lio_state: &Vector3<f64>,
    u: &UncertaintyDiag,
    th: &GateThresholds,
    prev_sources: Option<&AxisSources>,
) -> GateSelection {
    let var = u.as_array();
    let thr = th.as_array();
    let mut position = Vector3::zeros();
    let mut sources = ALL_FUSION;
    let mut non_finite = false;
    for a in 0..3 {
        let use_lio = if !var[a].is_finite() {
            non_finite = true;
            true
        } else {
            let was_lio = prev_sources.is_some_and(|p| p[a] == PoseSource::Lio);
            if th.hysteresis_fraction > 0.0 && was_lio {
                var[a] > thr[a] * (1.0 - th.hysteresis_fraction)
            } else {
                var[a] > thr[a]
            }
        };
        if use_lio {
            position[a] = lio_state[a];
            sources[a] = PoseSource::Lio;
        } else {
            position[a] = fusion_state[a];
        }
    }
    if non_finite {
        log::warn!("non-finite position uncertainty {var:?}; falling back to LIO on those axes");
    }
    GateSelection {
        position,
        sources,
        non_finite,
    }
}

/// One output pose. Orientation is taken from LIO.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatedPose {
    pub timestamp: f64,
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
    pub sources: AxisSources,
    pub uncertainty: UncertaintyDiag,
    /// Emitted before the datum existed, so the position is in the raw LIO frame.
    pub pre_datum: bool,
}

/// A maximal run of samples in which at least one axis exceeds its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutInterval {
    pub start: f64,
    pub end: f64,
    /// Axes (x, y, z) that exceeded their threshold somewhere in the run.
    pub axes: [bool; 3],
}

impl DropoutInterval {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }

    pub fn axes_label(&self) -> String {
        ['x', 'y', 'z']
            .iter()
            .zip(self.axes)
            .filter(|(_, on)| *on)
            .map(|(c, _)| *c)
            .collect()
    }
}

fn exceeding_axes(u: &UncertaintyDiag, th: &GateThresholds) -> [bool; 3] {
    let var = u.as_array();
    let thr = th.as_array();
    // NaN counts as exceeding.
    [0, 1, 2].map(|a| var[a].is_nan() || var[a] > thr[a])
}

/// Finds the intervals where any axis' variance exceeds its threshold.
/// `start`/`end` are the first and last exceeding sample times.
pub fn detect_dropout_intervals(
    uncertainty_series: &[(f64, UncertaintyDiag)],
    th: &GateThresholds,
) -> Vec<DropoutInterval> {
    let mut out = Vec::new();
    let mut current: Option<DropoutInterval> = None;
    for (t, u) in uncertainty_series {
        let ex = exceeding_axes(u, th);
        if ex.iter().any(|&b| b) {
            match current.as_mut() {
                Some(iv) => {
                    iv.end = *t;
                    for (axis, e) in iv.axes.iter_mut().zip(ex) {
                        *axis |= e;
                    }
                }
                None => {
                    current = Some(DropoutInterval {
                        start: *t,
                        end: *t,
                        axes: ex,
                    })
                }
            }
        } else if let Some(iv) = current.take() {
            out.push(iv);
        }
    }
    out.extend(current);
    out
}

/// Rebuilds a thresholded uncertainty series from intervals: axes flagged in
/// an interval sit at twice their threshold inside it, everything else at zero.
pub fn reconstruct_series(
    timestamps: &[f64],
    intervals: &[DropoutInterval],
    th: &GateThresholds,
) -> Vec<(f64, UncertaintyDiag)> {
    let thr = th.as_array();
    timestamps
        .iter()
        .map(|&t| {
            let mut v = [0.0; 3];
            if let Some(iv) = intervals.iter().find(|iv| iv.contains(t)) {
                for a in 0..3 {
                    if iv.axes[a] {
                        v[a] = 2.0 * thr[a];
                    }
                }
            }
            (t, UncertaintyDiag::new(v[0], v[1], v[2]))
        })
        .collect()
}
