//! Evaluation metrics: rollout position error, collision rate, and the
//! aggregate report exported as CSV by the CLI.

use crate::datagen::Trajectory;
use crate::dynamics::{contact_pairs, Obstacle};
use crate::error::{Error, Result};

/// Aggregate evaluation statistics for one model on one dataset split.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    /// Per-material held-out energy MSE as (material, mean, std).
    pub energy_mse: Vec<(String, f64, f64)>,
    /// Per-sequence rollout Euclidean error in mm as (mean, std over frames).
    pub rollout_error_mm: Vec<(f64, f64)>,
    /// Per-sequence mean collision rate in percent.
    pub collision_rate_pct: Vec<f64>,
    /// Wall-clock seconds spent producing the rollouts.
    pub runtime_seconds: f64,
    /// Frames per evaluated sequence, recorded for scale context.
    pub frames_per_sequence: usize,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .energy_mse
            .iter()
            .flat_map(|(_, m, s)| [*m, *s])
            .chain(self.rollout_error_mm.iter().flat_map(|(m, s)| [*m, *s]))
            .chain(self.collision_rate_pct.iter().copied())
            .all(f64::is_finite);
        if !finite {
            return Err(Error::Numerical {
                term: "metrics report".into(),
                detail: "non-finite statistic".into(),
            });
        }
        if self
            .collision_rate_pct
            .iter()
            .any(|r| !(0.0..=100.0).contains(r))
        {
            return Err(Error::Numerical {
                term: "collision rate".into(),
                detail: "outside [0, 100] percent".into(),
            });
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    (mean, var.sqrt())
}

/// Mean vertex Euclidean error between two trajectories, in millimetres:
/// per frame the mean over vertices of the position distance, then the
/// mean and standard deviation of those per-frame values across frames.
pub fn metric_rollout_error(pred: &Trajectory, truth: &Trajectory) -> Result<(f64, f64)> {
    if pred.frames.len() != truth.frames.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.frames.len(),
            got: pred.frames.len(),
        });
    }
    let mut per_frame = Vec::with_capacity(pred.frames.len());
    for (p, t) in pred.frames.iter().zip(&truth.frames) {
        if p.len() != t.len() {
            return Err(Error::DimensionMismatch {
                expected: t.len(),
                got: p.len(),
            });
        }
        let mean = p
            .iter()
            .zip(t)
            .map(|(a, b)| (a - b).norm())
            .sum::<f64>()
            / p.len() as f64;
        per_frame.push(mean * 1000.0);
    }
    Ok(mean_std(&per_frame))
}

/// Fraction of cloth vertices penetrating the obstacle per frame, in
/// percent: a vertex counts when its signed distance to the nearest
/// obstacle face plane within the proximity radius is negative.
/// Returns the per-frame rates.
pub fn metric_collision_rate(
    traj: &Trajectory,
    obstacles: &[Obstacle],
    proximity_radius: f64,
) -> Vec<f64> {
    let nv = traj.mesh.num_vertices();
    traj.frames
        .iter()
        .enumerate()
        .map(|(frame, positions)| {
            let pairs = contact_pairs(positions, obstacles, frame, proximity_radius);
            let penetrating = pairs
                .iter()
                .filter(|p| (positions[p.vertex] - p.point).dot(&p.normal) < 0.0)
                .count();
            100.0 * penetrating as f64 / nv as f64
        })
        .collect()
}

/// Mean and standard deviation helper exposed for report assembly.
pub fn aggregate(values: &[f64]) -> (f64, f64) {
    mean_std(values)
}
