//! Frame-to-frame track association via minimum-cost bipartite matching,
//! plus the heuristic baselines built on top of the resulting tracks.

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::perception::{FrameObservationSet, Observation, NULL_CLASS, SNITCH_CLASS};
use crate::worldsim::{grid_class, GRID};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TrackError {
    #[error("cost matrix must be square and non-empty")]
    BadMatrix,
    #[error("no visible snitch observation in any frame")]
    NoSnitch,
    #[error("frame {0} has no following frame")]
    NoNextFrame(usize),
    #[error("frame {0} has no non-empty observation")]
    EmptyFrame(usize),
}

/// N tracks over T frames, plus the pooled per-frame embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackSet {
    /// tracks[i][t] is the observation track i holds at frame t.
    pub tracks: Vec<Vec<Observation>>,
    /// frame_embeds[t] is the pooled embedding of frame t.
    pub frame_embeds: Vec<Vec<f64>>,
}

impl TrackSet {
    pub fn num_tracks(&self) -> usize {
        self.tracks.len()
    }

    pub fn num_frames(&self) -> usize {
        self.tracks.first().map_or(0, Vec::len)
    }
}

/// Generalized intersection-over-union in [-1, 1]. Zero-area boxes behave
/// as points: their IoU with anything is 0, but the hull penalty still
/// applies, so distant points are still ranked by distance.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    let union = a.area() + b.area() - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    if hull > 0.0 {
        iou - (hull - union) / hull
    } else {
        iou
    }
}

/// Box regression distance: weighted corner L1 plus a generalized-overlap
/// term. Both weights default to 1.
pub fn box_distance(a: &BBox, b: &BBox, w_l1: f64, w_giou: f64) -> f64 {
    let l1 = ((a.x1 - b.x1).abs()
        + (a.y1 - b.y1).abs()
        + (a.x2 - b.x2).abs()
        + (a.y2 - b.y2).abs())
        / 4.0;
    w_l1 * l1 + w_giou * (1.0 - giou(a, b))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchWeights {
    pub lambda_class: f64,
    pub lambda_box: f64,
    pub box_l1: f64,
    pub box_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            lambda_class: 1.0,
            lambda_box: 0.0,
            box_l1: 1.0,
            box_giou: 1.0,
        }
    }
}

/// Association cost between observation `a` (current frame) and candidate
/// `b` (next frame). Costs involving an empty-class `a` are zero, so empty
/// slots absorb whatever assignment is left over.
pub fn track_cost(a: &Observation, b: &Observation, w: &MatchWeights) -> f64 {
    let class_a = a.argmax_class();
    if class_a == NULL_CLASS {
        return 0.0;
    }
    -w.lambda_class * b.class_probs[class_a] + w.lambda_box * box_distance(&a.bbox, &b.bbox, w.box_l1, w.box_giou)
}

/// Minimum-cost perfect matching on a square matrix via shortest augmenting
/// paths with potentials. Returns (assignment row -> col, total cost).
pub fn assignment_min(cost: &[Vec<f64>]) -> Result<(Vec<usize>, f64), TrackError> {
    let n = cost.len();
    if n == 0 || cost.iter().any(|r| r.len() != n) {
        return Err(TrackError::BadMatrix);
    }
    const INF: f64 = f64::INFINITY;
    // 1-indexed potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut p = vec![0usize; n + 1]; // p[j] = row assigned to col j
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    let total = assign.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok((assign, total))
}

const TIE_EPS: f64 = 1e-9;

fn min_with_forced(cost: &[Vec<f64>], forced: &[(usize, usize)]) -> f64 {
    let n = cost.len();
    let rows: Vec<usize> = (0..n).filter(|i| !forced.iter().any(|&(r, _)| r == *i)).collect();
    let cols: Vec<usize> = (0..n).filter(|j| !forced.iter().any(|&(_, c)| c == *j)).collect();
    let fixed: f64 = forced.iter().map(|&(r, c)| cost[r][c]).sum();
    if rows.is_empty() {
        return fixed;
    }
    let sub: Vec<Vec<f64>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| cost[r][c]).collect())
        .collect();
    fixed + assignment_min(&sub).expect("square submatrix").1
}

/// Minimum-cost matching that breaks cost ties by the lexicographically
/// smallest assignment vector.
pub fn assignment_min_lex(cost: &[Vec<f64>]) -> Result<Vec<usize>, TrackError> {
    let n = cost.len();
    let (_, best) = assignment_min(cost)?;
    let mut forced: Vec<(usize, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        let mut chosen = None;
        for j in 0..n {
            if forced.iter().any(|&(_, c)| c == j) {
                continue;
            }
            forced.push((i, j));
            if min_with_forced(cost, &forced) <= best + TIE_EPS {
                chosen = Some(j);
                break;
            }
            forced.pop();
        }
        chosen.expect("some column must extend an optimal assignment");
    }
    Ok(forced.into_iter().map(|(_, j)| j).collect())
}

/// Match current-frame observations (in track order) to next-frame slots.
pub fn match_frames(
    current: &[Observation],
    next: &FrameObservationSet,
    w: &MatchWeights,
) -> Result<Vec<usize>, TrackError> {
    let cost: Vec<Vec<f64>> = current
        .iter()
        .map(|a| next.observations.iter().map(|b| track_cost(a, b, w)).collect())
        .collect();
    assignment_min_lex(&cost)
}

/// Chain per-frame matchings into N tracks over T frames.
pub fn build_tracks(
    frames: &[FrameObservationSet],
    frame_embeds: Vec<Vec<f64>>,
    w: &MatchWeights,
) -> Result<TrackSet, TrackError> {
    assert!(!frames.is_empty());
    assert_eq!(frames.len(), frame_embeds.len());
    let mut tracks: Vec<Vec<Observation>> = frames[0]
        .observations
        .iter()
        .map(|o| vec![o.clone()])
        .collect();
    for t in 1..frames.len() {
        let heads: Vec<Observation> = tracks.iter().map(|tr| tr[t - 1].clone()).collect();
        let assign = match_frames(&heads, &frames[t], w)?;
        for (track, &slot) in assign.iter().enumerate() {
            tracks[track].push(frames[t].observations[slot].clone());
        }
    }
    Ok(TrackSet { tracks, frame_embeds })
}

/// Latest (frame, then track) position whose observation is snitch-classed
/// and visible under the given NT track-major visibility map.
pub fn last_visible_snitch(ts: &TrackSet, vis: &[bool]) -> Result<(usize, usize), TrackError> {
    let t_frames = ts.num_frames();
    for frame in (0..t_frames).rev() {
        for (track, tr) in ts.tracks.iter().enumerate() {
            if tr[frame].argmax_class() == SNITCH_CLASS && vis[track * t_frames + frame] {
                return Ok((track, frame));
            }
        }
    }
    Err(TrackError::NoSnitch)
}

/// Heuristic single-hop: the non-empty observation in the following frame
/// whose bottom-midpoint is L1-closest to the snitch's. Ties go to the
/// lowest track index.
pub fn immediate_container(
    ts: &TrackSet,
    snitch: (usize, usize),
) -> Result<(usize, usize), TrackError> {
    let (track, frame) = snitch;
    let t_frames = ts.num_frames();
    if frame + 1 >= t_frames {
        return Err(TrackError::NoNextFrame(frame));
    }
    let (sx, sy) = ts.tracks[track][frame].bbox.bottom_mid();
    let mut best: Option<(usize, f64)> = None;
    for (j, tr) in ts.tracks.iter().enumerate() {
        let obs = &tr[frame + 1];
        if obs.is_null() {
            continue;
        }
        let (x, y) = obs.bbox.bottom_mid();
        let d = (x - sx).abs() + (y - sy).abs();
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| (j, frame + 1))
        .ok_or(TrackError::EmptyFrame(frame + 1))
}

/// Association-only baseline: follow the most snitch-like track to the end
/// and read a grid cell off its last known box.
pub fn tracking_baseline(ts: &TrackSet) -> usize {
    let t_frames = ts.num_frames();
    let mut best_track = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (i, tr) in ts.tracks.iter().enumerate() {
        let hits = tr.iter().filter(|o| o.argmax_class() == SNITCH_CLASS).count();
        let mass: f64 = tr.iter().map(|o| o.class_probs[SNITCH_CLASS]).sum();
        let score = hits as f64 * 1e6 + mass;
        if score > best_score {
            best_score = score;
            best_track = i;
        }
    }
    let tr = &ts.tracks[best_track];
    let mut bbox = None;
    for f in (0..t_frames).rev() {
        if !tr[f].is_null() {
            bbox = Some(tr[f].bbox);
            break;
        }
    }
    let bbox = bbox.unwrap_or_else(BBox::zero);
    let (x, y) = bbox.bottom_mid();
    let g = GRID as f64;
    let px = (x * g).clamp(0.0, g - 1e-9);
    let py = (y * g).clamp(0.0, g - 1e-9);
    grid_class((px, py)).expect("clamped position is on the grid")
}

/// Fraction of non-empty observations in each track that agree with the
/// track's majority class. A diagnostic for association quality.
pub fn track_purity(ts: &TrackSet) -> Vec<f64> {
    ts.tracks
        .iter()
        .map(|tr| {
            let classes: Vec<usize> = tr
                .iter()
                .map(Observation::argmax_class)
                .filter(|&c| c != NULL_CLASS)
                .collect();
            if classes.is_empty() {
                return 1.0;
            }
            let mut counts = std::collections::BTreeMap::new();
            for &c in &classes {
                *counts.entry(c).or_insert(0usize) += 1;
            }
            let max = counts.values().copied().max().unwrap_or(0);
            max as f64 / classes.len() as f64
        })
        .collect()
}
