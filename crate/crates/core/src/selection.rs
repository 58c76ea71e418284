//! Reference-camera selection.
//!
//! Three *active* cameras feed synthesis; five *subscribed* cameras are kept
//! streaming so the next handover finds its camera already on call.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::geometry::{CameraId, CameraModel};
use crate::sync::Timestamp;

pub const ACTIVE_COUNT: usize = 3;
pub const SUBSCRIBED_COUNT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    /// Meters per radian of optical-axis disagreement.
    pub lambda: f64,
    /// Margin a challenger must win by before it evicts an active camera.
    pub hysteresis: f64,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self { lambda: 1.0, hysteresis: 0.1 }
    }
}

/// `‖C_v − C_r‖ + λ·θ`, with `θ` the angle between the optical axes.
pub fn camera_distance(virtual_cam: &CameraModel, reference: &CameraModel, lambda: f64) -> f64 {
    let center = (virtual_cam.center() - reference.center()).norm();
    let cos = virtual_cam.pose.optical_axis().dot(&reference.pose.optical_axis()).clamp(-1.0, 1.0);
    center + lambda * cos.acos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewState {
    pub virtual_camera: CameraModel,
    /// Ordered by ascending distance.
    pub active: Vec<CameraId>,
    /// Distances matching `active`.
    pub active_distances: Vec<f64>,
    pub subscribed: BTreeSet<CameraId>,
    pub last_update_ts: Timestamp,
}

impl ViewState {
    /// True when the id sets differ (ordering and distances ignored).
    pub fn selection_differs(&self, other: &ViewState) -> bool {
        let a: BTreeSet<_> = self.active.iter().collect();
        let b: BTreeSet<_> = other.active.iter().collect();
        a != b || self.subscribed != other.subscribed
    }
}

/// Cameras sorted by `(distance, id)`.
pub fn rank_cameras(virtual_cam: &CameraModel, rig: &[CameraModel], lambda: f64) -> Vec<(CameraId, f64)> {
    let mut ranked: Vec<(CameraId, f64)> = rig.iter().map(|c| (c.id, camera_distance(virtual_cam, c, lambda))).collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked
}

/// Chooses active and subscribed cameras for a viewpoint.
///
/// An incumbent active camera is evicted only when the challenger replacing
/// it is closer by more than `params.hysteresis`. Cameras missing from `rig`
/// (lost streams) are never selected.
///
/// # Panics
///
/// Panics if `rig` is empty.
pub fn select(
    virtual_cam: &CameraModel,
    rig: &[CameraModel],
    prev: Option<&ViewState>,
    params: &SelectionParams,
    now: Timestamp,
) -> ViewState {
    assert!(!rig.is_empty(), "selection needs at least one camera");
    let ranked = rank_cameras(virtual_cam, rig, params.lambda);
    let distance_of = |id: CameraId| ranked.iter().find(|(c, _)| *c == id).map(|(_, d)| *d);
    let n_active = ACTIVE_COUNT.min(ranked.len());

    let mut active: Vec<(CameraId, f64)> = ranked[..n_active].to_vec();
    if let Some(prev) = prev {
        let incumbents: Vec<(CameraId, f64)> =
            prev.active.iter().filter_map(|id| distance_of(*id).map(|d| (*id, d))).collect();
        let is_incumbent = |id: CameraId| incumbents.iter().any(|(c, _)| *c == id);
        // Incumbents pushed out of the top set, nearest first, get a chance to
        // displace the weakest newcomer.
        let mut dropped: Vec<(CameraId, f64)> =
            incumbents.iter().copied().filter(|(id, _)| !active.iter().any(|(a, _)| a == id)).collect();
        dropped.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        for (inc_id, inc_d) in dropped {
            let challenger = active
                .iter()
                .enumerate()
                .filter(|(_, (id, _))| !is_incumbent(*id))
                .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.1 .0.cmp(&b.1 .0)));
            let Some((slot, &(_, ch_d))) = challenger else { break };
            if inc_d - ch_d <= params.hysteresis {
                active[slot] = (inc_id, inc_d);
            }
        }
        active.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    }

    let n_sub = SUBSCRIBED_COUNT.min(ranked.len());
    let mut subscribed: Vec<(CameraId, f64)> = ranked[..n_sub].to_vec();
    for a in &active {
        if !subscribed.iter().any(|(id, _)| *id == a.0) {
            subscribed.push(*a);
        }
    }
    while subscribed.len() > n_sub {
        let (idx, _) = subscribed
            .iter()
            .enumerate()
            .filter(|(_, (id, _))| !active.iter().any(|(a, _)| a == id))
            .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1).then(a.1 .0.cmp(&b.1 .0)))
            .expect("more subscribed than active");
        subscribed.remove(idx);
    }

    ViewState {
        virtual_camera: *virtual_cam,
        active: active.iter().map(|(id, _)| *id).collect(),
        active_distances: active.iter().map(|(_, d)| *d).collect(),
        subscribed: subscribed.into_iter().map(|(id, _)| id).collect(),
        last_update_ts: now,
    }
}
