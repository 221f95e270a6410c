//! Metrics, baselines, hop diagnostics, and deterministic report rendering.

use std::fmt::Write as _;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mht::{HopRecord, MhtConfig, GRID_CLASSES};
use crate::tensor::TensorError;
use crate::training::{forward_eval, Sample};
use crate::worldsim::GRID;

/// True if `label` ranks among the `k` highest scores; equal scores break
/// ties toward the lower class index.
pub fn topk(scores: &[f64], label: usize, k: usize) -> bool {
    let rank = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > scores[label] || (s == scores[label] && i < label))
        .count();
    rank < k
}

/// Manhattan distance between two cells of the row-major 6x6 grid.
pub fn grid_l1(a: usize, b: usize) -> usize {
    let (r1, c1) = (a / GRID, a % GRID);
    let (r2, c2) = (b / GRID, b % GRID);
    r1.abs_diff(r2) + c1.abs_diff(c2)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinStats {
    pub last_visible_frame: usize,
    pub count: usize,
    pub top1_hits: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub l1_mean: f64,
    pub per_bin: Vec<BinStats>,
}

impl EvalReport {
    pub fn render(&self, title: &str) -> String {
        let mut s = String::new();
        writeln!(s, "# {title}").unwrap();
        writeln!(s, "n {}", self.n).unwrap();
        writeln!(s, "top1 {:.4}", self.top1).unwrap();
        writeln!(s, "top5 {:.4}", self.top5).unwrap();
        writeln!(s, "l1_mean {:.4}", self.l1_mean).unwrap();
        writeln!(s, "bin last_visible_frame count top1").unwrap();
        for b in &self.per_bin {
            let acc = if b.count > 0 {
                b.top1_hits as f64 / b.count as f64
            } else {
                0.0
            };
            writeln!(s, "bin {} {} {:.4}", b.last_visible_frame, b.count, acc).unwrap();
        }
        s
    }
}

/// Aggregate scored predictions into a report. `scores[i]` are 36 class
/// scores for sample i; bins follow the episode's last visible frame.
pub fn report_from_scores(scores: &[Vec<f64>], samples: &[Sample]) -> EvalReport {
    assert_eq!(scores.len(), samples.len());
    let mut top1_hits = 0usize;
    let mut top5_hits = 0usize;
    let mut l1_sum = 0usize;
    let mut bins: std::collections::BTreeMap<usize, BinStats> = std::collections::BTreeMap::new();
    for (sc, sample) in scores.iter().zip(samples) {
        assert_eq!(sc.len(), GRID_CLASSES);
        let t1 = topk(sc, sample.label, 1);
        if t1 {
            top1_hits += 1;
        }
        if topk(sc, sample.label, 5) {
            top5_hits += 1;
        }
        let pred = crate::mht::argmax_tol(sc);
        l1_sum += grid_l1(pred, sample.label);
        let b = bins
            .entry(sample.last_visible_frame)
            .or_insert(BinStats { last_visible_frame: sample.last_visible_frame, count: 0, top1_hits: 0 });
        b.count += 1;
        if t1 {
            b.top1_hits += 1;
        }
    }
    let n = samples.len().max(1);
    EvalReport {
        n: samples.len(),
        top1: top1_hits as f64 / n as f64,
        top5: top5_hits as f64 / n as f64,
        l1_mean: l1_sum as f64 / n as f64,
        per_bin: bins.into_values().collect(),
    }
}

/// Evaluate a trained model; returns the report and the per-sample hop
/// traces for diagnostics.
pub fn evaluate(
    store: &crate::tensor::ParamStore,
    cfg: &MhtConfig,
    samples: &[Sample],
) -> Result<(EvalReport, Vec<Vec<HopRecord>>), TensorError> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut traces = Vec::with_capacity(samples.len());
    for s in samples {
        let (_, probs, hops) = forward_eval(store, cfg, s)?;
        scores.push(probs);
        traces.push(hops);
    }
    Ok((report_from_scores(&scores, samples), traces))
}

/// Score vector for the association-only baseline: one-hot at the cell the
/// followed track's last box lands in.
pub fn tracking_scores(samples: &[Sample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .map(|s| {
            let mut v = vec![0.0; GRID_CLASSES];
            v[s.tracking_pred] = 1.0;
            v
        })
        .collect()
}

/// Uniform-random predictions against the given labels; the calibration
/// floor for the evaluator.
pub fn random_scores(n_classes: usize, n_samples: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_samples)
        .map(|_| {
            let mut ranks: Vec<usize> = (0..n_classes).collect();
            ranks.shuffle(&mut rng);
            ranks.iter().map(|&r| r as f64).collect()
        })
        .collect()
}

/// Required number of hops for an episode: one hop per frame from the last
/// visible snitch to the end, capped by the mandatory minimum.
pub fn required_hops(last_visible_frame: usize, t_frames: usize, min_hops: usize) -> usize {
    (t_frames - last_visible_frame).max(1).min(min_hops)
}

pub const HOP_BINS: usize = 5; // 1, 2, 3, 4, >=5

fn hop_bin(h: usize) -> usize {
    h.clamp(1, HOP_BINS) - 1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HopDiagnostics {
    /// Per bin: ground-truth episode count, predicted count, Jaccard of the
    /// two episode sets.
    pub bins: Vec<(usize, usize, f64)>,
    /// attendance[h][t]: how often hop h+1 most-attended frame t.
    pub attendance: Vec<Vec<usize>>,
    /// Fraction of traces whose hop 2 lands exactly one frame after hop 1.
    pub hop2_follows_hop1: f64,
}

pub fn hop_diagnostics(
    traces: &[Vec<HopRecord>],
    samples: &[Sample],
    cfg: &MhtConfig,
) -> HopDiagnostics {
    assert_eq!(traces.len(), samples.len());
    let mut gt_sets: Vec<Vec<usize>> = vec![Vec::new(); HOP_BINS];
    let mut pred_sets: Vec<Vec<usize>> = vec![Vec::new(); HOP_BINS];
    let max_hops = traces.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut attendance = vec![vec![0usize; cfg.t_frames]; max_hops];
    let mut follow = 0usize;
    let mut follow_total = 0usize;
    for (i, (trace, sample)) in traces.iter().zip(samples).enumerate() {
        let gt = required_hops(sample.last_visible_frame, cfg.t_frames, cfg.min_hops);
        gt_sets[hop_bin(gt)].push(i);
        pred_sets[hop_bin(trace.len().max(1))].push(i);
        for rec in trace {
            attendance[rec.hop - 1][rec.attended_frame] += 1;
        }
        if trace.len() >= 2 {
            follow_total += 1;
            if trace[1].attended_frame == trace[0].attended_frame + 1 {
                follow += 1;
            }
        }
    }
    let bins = (0..HOP_BINS)
        .map(|b| {
            let g = &gt_sets[b];
            let p = &pred_sets[b];
            let inter = g.iter().filter(|i| p.binary_search(i).is_ok()).count();
            let union = g.len() + p.len() - inter;
            let j = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
            (g.len(), p.len(), j)
        })
        .collect();
    HopDiagnostics {
        bins,
        attendance,
        hop2_follows_hop1: if follow_total == 0 {
            0.0
        } else {
            follow as f64 / follow_total as f64
        },
    }
}

impl HopDiagnostics {
    pub fn render(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# hop diagnostics").unwrap();
        writeln!(s, "bin gt_count pred_count jaccard").unwrap();
        for (i, (g, p, j)) in self.bins.iter().enumerate() {
            let name = if i + 1 >= HOP_BINS {
                format!(">={}", HOP_BINS)
            } else {
                format!("{}", i + 1)
            };
            writeln!(s, "{name} {g} {p} {j:.4}").unwrap();
        }
        writeln!(s, "hop2_follows_hop1 {:.4}", self.hop2_follows_hop1).unwrap();
        writeln!(s, "attendance hop x frame").unwrap();
        for (h, row) in self.attendance.iter().enumerate() {
            write!(s, "hop{}", h + 1).unwrap();
            for c in row {
                write!(s, " {c}").unwrap();
            }
            writeln!(s).unwrap();
        }
        s
    }
}
