//! Trajectory metrics against a reference in the same frame: RMSE,
//! end-to-end error and multi-run dispersion. No alignment is applied
//! unless asked for with `align_rigid`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default association tolerance, seconds.
pub const DEFAULT_TOLERANCE: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("association tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("no estimate sample lies within tolerance of a reference sample")]
    NoMatches,
    #[error("trajectory is empty")]
    Empty,
    #[error("trajectory spans {span} s, fewer than two periods of {period} s")]
    TooShort { span: f64, period: f64 },
}

pub type TimedPosition = (f64, Vector3<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `(timestamp, estimate, reference)` per matched estimate sample.
    pub pairs: Vec<(f64, Vector3<f64>, Vector3<f64>)>,
    pub unmatched: usize,
}

/// Matches each estimate sample to the nearest-in-time reference sample
/// within `tolerance`. Both inputs must be sorted by time. Ties go to the
/// earlier reference sample.
pub fn associate(
    estimate: &[TimedPosition],
    reference: &[TimedPosition],
    tolerance: f64,
) -> Result<Association, EvalError> {
    if tolerance.is_nan() || tolerance <= 0.0 {
        return Err(EvalError::InvalidTolerance(tolerance));
    }
    let mut pairs = Vec::new();
    let mut unmatched = 0;
    for (t, p) in estimate {
        let i = reference.partition_point(|(tr, _)| tr < t);
        let best = [i.checked_sub(1), (i < reference.len()).then_some(i)]
            .into_iter()
            .flatten()
            .min_by(|&a, &b| (reference[a].0 - t).abs().total_cmp(&(reference[b].0 - t).abs()));
        match best {
            Some(j) if (reference[j].0 - t).abs() <= tolerance => pairs.push((*t, *p, reference[j].1)),
            _ => unmatched += 1,
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoMatches);
    }
    Ok(Association { pairs, unmatched })
}

fn sq_dist(a: &Vector3<f64>, b: &Vector3<f64>, planar: bool) -> f64 {
    let d = a - b;
    if planar {
        d.x * d.x + d.y * d.y
    } else {
        d.norm_squared()
    }
}

/// Root mean square of matched position errors; `planar` ignores z.
pub fn rmse(a: &Association, planar: bool) -> Result<f64, EvalError> {
    if a.pairs.is_empty() {
        return Err(EvalError::NoMatches);
    }
    let ss: f64 = a.pairs.iter().map(|(_, e, r)| sq_dist(e, r, planar)).sum();
    Ok((ss / a.pairs.len() as f64).sqrt())
}

/// Per-axis RMSE of matched errors.
pub fn axis_rmse(a: &Association) -> Result<Vector3<f64>, EvalError> {
    if a.pairs.is_empty() {
        return Err(EvalError::NoMatches);
    }
    let ss = a
        .pairs
        .iter()
        .fold(Vector3::zeros(), |acc, (_, e, r)| acc + (e - r).component_mul(&(e - r)));
    Ok((ss / a.pairs.len() as f64).map(f64::sqrt))
}

/// Distance from the final position to `expected_closure`.
pub fn end_to_end_error(traj: &[TimedPosition], expected_closure: &Vector3<f64>) -> Result<f64, EvalError> {
    let (_, last) = traj.last().ok_or(EvalError::Empty)?;
    Ok((last - expected_closure).norm())
}

fn interpolate(traj: &[TimedPosition], t: f64) -> Option<Vector3<f64>> {
    let (t0, p0) = traj.first()?;
    let (t1, p1) = traj.last()?;
    if t < *t0 - 1e-9 || t > *t1 + 1e-9 {
        return None;
    }
    let i = traj.partition_point(|(tp, _)| *tp <= t);
    if i == 0 {
        return Some(*p0);
    }
    if i == traj.len() {
        return Some(*p1);
    }
    let (ta, pa) = &traj[i - 1];
    let (tb, pb) = &traj[i];
    if *ta == t {
        return Some(*pa);
    }
    Some(pa.lerp(pb, (t - ta) / (tb - ta)))
}

/// For every phase in the first period, the largest pairwise distance
/// between the positions at that phase in each run; the maximum over phases.
/// Positions at off-grid times are linearly interpolated.
pub fn multi_run_dispersion(traj: &[TimedPosition], loop_period: f64) -> Result<f64, EvalError> {
    let (t0, _) = *traj.first().ok_or(EvalError::Empty)?;
    let (t1, _) = *traj.last().expect("nonempty");
    let span = t1 - t0;
    if loop_period.is_nan() || loop_period <= 0.0 || span < 2.0 * loop_period - 1e-9 {
        return Err(EvalError::TooShort {
            span,
            period: loop_period,
        });
    }
    let mut worst: f64 = 0.0;
    for (t, _) in traj.iter().take_while(|(t, _)| *t < t0 + loop_period) {
        let copies: Vec<Vector3<f64>> = (0..)
            .map(|k| t + k as f64 * loop_period)
            .take_while(|tk| *tk <= t1 + 1e-9)
            .filter_map(|tk| interpolate(traj, tk))
            .collect();
        for i in 0..copies.len() {
            for j in i + 1..copies.len() {
                worst = worst.max((copies[i] - copies[j]).norm());
            }
        }
    }
    Ok(worst)
}

/// Metrics for one estimate against one reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub rmse_x: f64,
    pub rmse_y: f64,
    pub rmse_z: f64,
    pub planar: bool,
    pub matches: usize,
    pub unmatched: usize,
    pub tolerance: f64,
    pub end_to_end_error: f64,
    pub end_to_end_error_z: f64,
    pub multi_run_dispersion: Option<f64>,
}

impl EvalReport {
    /// `key: value` lines in a fixed order.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| v.to_string());
        format!(
            "rmse: {}\nrmse_x: {}\nrmse_y: {}\nrmse_z: {}\nplanar: {}\nmatches: {}\nunmatched: {}\ntolerance: {}\n\
             end_to_end_error: {}\nend_to_end_error_z: {}\nmulti_run_dispersion: {}\n",
            self.rmse,
            self.rmse_x,
            self.rmse_y,
            self.rmse_z,
            self.planar,
            self.matches,
            self.unmatched,
            self.tolerance,
            self.end_to_end_error,
            self.end_to_end_error_z,
            opt(self.multi_run_dispersion)
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report fields serialize")
    }
}

/// Least-squares rotation and translation taking the matched estimate
/// points onto the reference points (Kabsch, no scale).
pub fn rigid_alignment(a: &Association) -> Result<(Matrix3<f64>, Vector3<f64>), EvalError> {
    if a.pairs.is_empty() {
        return Err(EvalError::NoMatches);
    }
    let n = a.pairs.len() as f64;
    let (ce, cr) = a
        .pairs
        .iter()
        .fold((Vector3::zeros(), Vector3::zeros()), |(se, sr), (_, e, r)| {
            (se + e, sr + r)
        });
    let (ce, cr) = (ce / n, cr / n);
    let h = a
        .pairs
        .iter()
        .fold(Matrix3::zeros(), |acc, (_, e, r)| acc + (r - cr) * (e - ce).transpose());
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v_t requested"));
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let rotation = u * d * v_t;
    Ok((rotation, cr - rotation * ce))
}

/// The estimate moved by the rigid transform that best fits it to the
/// reference over the matched samples.
pub fn align_rigid(
    estimate: &[TimedPosition],
    reference: &[TimedPosition],
    tolerance: f64,
) -> Result<Vec<TimedPosition>, EvalError> {
    let (r, t) = rigid_alignment(&associate(estimate, reference, tolerance)?)?;
    Ok(estimate.iter().map(|(ts, p)| (*ts, r * p + t)).collect())
}

/// Full evaluation. The closure point is the reference's first position;
/// dispersion is computed when `loop_period` is given and the estimate
/// spans at least two periods.
pub fn evaluate(
    estimate: &[TimedPosition],
    reference: &[TimedPosition],
    tolerance: f64,
    planar: bool,
    loop_period: Option<f64>,
) -> Result<EvalReport, EvalError> {
    let a = associate(estimate, reference, tolerance)?;
    let axes = axis_rmse(&a)?;
    let closure = reference.first().ok_or(EvalError::Empty)?.1;
    let last = estimate.last().ok_or(EvalError::Empty)?.1;
    let dispersion = match loop_period {
        Some(p) => match multi_run_dispersion(estimate, p) {
            Ok(d) => Some(d),
            Err(EvalError::TooShort { .. }) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    Ok(EvalReport {
        rmse: rmse(&a, planar)?,
        rmse_x: axes.x,
        rmse_y: axes.y,
        rmse_z: axes.z,
        planar,
        matches: a.pairs.len(),
        unmatched: a.unmatched,
        tolerance,
        end_to_end_error: end_to_end_error(estimate, &closure)?,
        end_to_end_error_z: (last.z - closure.z).abs(),
        multi_run_dispersion: dispersion,
    })
}
