//! Positive views of trajectories: detour, masking (segment dropping) and
//! neighbour replacement. Every view keeps the original origin and
//! destination.

use std::collections::VecDeque;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{RoadNetwork, SegmentId, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Share of the trajectory length replaced by a detour.
    pub detour_frac: f64,
    pub mask_prob: f64,
    pub replace_prob: f64,
    /// Apply detour, mask and replace in sequence instead of one of them.
    pub compose: bool,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            detour_frac: 0.1,
            mask_prob: 0.2,
            replace_prob: 0.2,
            compose: false,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detour_frac > 0.0 && self.detour_frac < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "detour_frac {} outside (0, 1)",
                self.detour_frac
            )));
        }
        for (name, p) in [("mask_prob", self.mask_prob), ("replace_prob", self.replace_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AugmentKind {
    Detour,
    Mask,
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetourOutcome {
    pub trajectory: Trajectory,
    /// False when no window admitted an alternative route and the input was
    /// returned unchanged.
    pub applied: bool,
}

/// Number of interior segments a detour replaces.
pub fn detour_window(len: usize, frac: f64) -> usize {
    let k = (frac * len as f64).round() as usize;
    k.clamp(1, len.saturating_sub(2).max(1))
}

/// Shortest directed path `from ⇝ to` avoiding `blocked`, endpoints included.
fn shortest_path_avoiding(
    network: &RoadNetwork,
    from: SegmentId,
    to: SegmentId,
    blocked: &[SegmentId],
) -> Option<Vec<SegmentId>> {
    let n = network.num_segments();
    let mut parent = vec![usize::MAX; n];
    let mut seen = vec![false; n];
    for &b in blocked {
        seen[b] = true;
    }
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &v in network.out_neighbors(u) {
            if v == to {
                let mut path = vec![to, u];
                let mut cur = u;
                while cur != from {
                    cur = parent[cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            if !seen[v] {
                seen[v] = true;
                parent[v] = u;
                queue.push_back(v);
            }
        }
    }
    None
}

/// Replaces a window of about `detour_frac · |τ|` interior segments with the
/// shortest route between the window's anchors that avoids the window.
/// Windows are tried in random order until one admits an alternative.
pub fn detour<R: Rng + ?Sized>(
    network: &RoadNetwork,
    traj: &Trajectory,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> DetourOutcome {
    let len = traj.len();
    let unchanged = || DetourOutcome {
        trajectory: traj.clone(),
        applied: false,
    };
    if len < 3 {
        return unchanged();
    }
    let k = detour_window(len, cfg.detour_frac);
    // anchors at i and i + k + 1
    let mut starts: Vec<usize> = (0..len - k - 1).collect();
    starts.shuffle(rng);
    let segs = &traj.segments;
    for i in starts {
        let (a, b) = (segs[i], segs[i + k + 1]);
        let interior = &segs[i + 1..=i + k];
        if interior.contains(&a) || interior.contains(&b) {
            continue;
        }
        if let Some(path) = shortest_path_avoiding(network, a, b, interior) {
            let mut out = Vec::with_capacity(len - k + path.len());
            out.extend_from_slice(&segs[..=i]);
            out.extend_from_slice(&path[1..path.len() - 1]);
            out.extend_from_slice(&segs[i + k + 1..]);
            return DetourOutcome {
                trajectory: Trajectory::new(traj.id.clone(), out),
                applied: true,
            };
        }
    }
    unchanged()
}

/// Drops each interior segment independently with probability `mask_prob`.
pub fn mask_segments<R: Rng + ?Sized>(traj: &Trajectory, cfg: &AugmentConfig, rng: &mut R) -> Trajectory {
    let len = traj.len();
    if len < 3 {
        return traj.clone();
    }
    let keep: Vec<bool> = (0..len)
        .map(|p| p == 0 || p == len - 1 || !rng.random_bool(cfg.mask_prob))
        .collect();
    let segments = traj
        .segments
        .iter()
        .zip(&keep)
        .filter_map(|(&s, &k)| k.then_some(s))
        .collect();
    let timestamps = traj.timestamps.as_ref().map(|ts| {
        ts.iter()
            .zip(&keep)
            .filter_map(|(&t, &k)| k.then_some(t))
            .collect()
    });
    Trajectory {
        id: traj.id.clone(),
        segments,
        timestamps,
    }
}

/// Swaps each interior segment, with probability `replace_prob`, for a
/// uniformly chosen structural neighbour.
pub fn replace_segments<R: Rng + ?Sized>(
    network: &RoadNetwork,
    traj: &Trajectory,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Trajectory {
    let len = traj.len();
    let mut out = traj.clone();
    if len < 3 {
        return out;
    }
    for s in &mut out.segments[1..len - 1] {
        if rng.random_bool(cfg.replace_prob) {
            if let Some(&n) = network.out_neighbors(*s).choose(rng) {
                *s = n;
            }
        }
    }
    out
}

/// The positive partner of `traj`: one augmentation chosen uniformly, or all
/// three in sequence when `cfg.compose` is set.
pub fn noisy_view<R: Rng + ?Sized>(
    network: &RoadNetwork,
    traj: &Trajectory,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> (Trajectory, AugmentKind) {
    if cfg.compose {
        let t = detour(network, traj, cfg, rng).trajectory;
        let t = mask_segments(&t, cfg, rng);
        return (replace_segments(network, &t, cfg, rng), AugmentKind::Detour);
    }
    match rng.random_range(0..3u8) {
        0 => (detour(network, traj, cfg, rng).trajectory, AugmentKind::Detour),
        1 => (mask_segments(traj, cfg, rng), AugmentKind::Mask),
        _ => (replace_segments(network, traj, cfg, rng), AugmentKind::Replace),
    }
}
