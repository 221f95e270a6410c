//! Synthetic detector standing in for a trained object detector: per-frame
//! unordered observations with class likelihoods, boxes, and d-dimensional
//! embeddings, plus configurable corruption to emulate detector error.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::tracker::TrackSet;
use crate::worldsim::{
    grid_class, object_box, visible, Episode, Material, ObjectShape, ObjectSize, WorldObject,
    GRID, NUM_COLORS,
};

/// Class catalog: snitch, then every (shape, size, material, color) combo of
/// the four ordinary shapes, then the none class.
pub const SNITCH_CLASS: usize = 0;
pub const NULL_CLASS: usize = 1 + 4 * 3 * 2 * NUM_COLORS;
pub const NUM_CLASSES: usize = NULL_CLASS + 1;

pub fn class_of(obj: &WorldObject) -> usize {
    if obj.shape == ObjectShape::Snitch {
        return SNITCH_CLASS;
    }
    let shape = match obj.shape {
        ObjectShape::Cube => 0,
        ObjectShape::Sphere => 1,
        ObjectShape::Cylinder => 2,
        ObjectShape::Cone => 3,
        ObjectShape::Snitch => unreachable!(),
    };
    let size = match obj.size {
        ObjectSize::Small => 0,
        ObjectSize::Medium => 1,
        ObjectSize::Large => 2,
    };
    let material = match obj.material {
        Material::Metal => 0,
        Material::Rubber => 1,
    };
    1 + ((shape * 3 + size) * 2 + material) * NUM_COLORS + obj.color.0 as usize
}

/// One detected object: likelihoods over all classes (incl. none), a box in
/// relative coordinates, and a d-dimensional embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observation {
    pub class_probs: Vec<f64>,
    pub bbox: BBox,
    pub embed: Vec<f64>,
}

impl Observation {
    pub fn argmax_class(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.class_probs.iter().enumerate() {
            if p > self.class_probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn is_null(&self) -> bool {
        self.argmax_class() == NULL_CLASS
    }

    pub fn null(d: usize, label_temp: f64) -> Self {
        Self {
            class_probs: soften_one_hot(NULL_CLASS, label_temp),
            bbox: BBox::zero(),
            embed: vec![0.0; d],
        }
    }
}

/// Exactly N observations; missing slots are padded with the none class.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameObservationSet {
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub prob_swap: f64,
    pub prob_drop: f64,
    pub embed_sigma: f64,
    pub label_temp: f64,
    pub hallucinate_snitch: bool,
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self {
            prob_swap: 0.0,
            prob_drop: 0.0,
            embed_sigma: 0.0,
            label_temp: 0.1,
            hallucinate_snitch: false,
        }
    }
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::none()
    }
}

fn soften_one_hot(class: usize, temp: f64) -> Vec<f64> {
    let mut probs = vec![0.0; NUM_CLASSES];
    if temp <= 0.0 {
        probs[class] = 1.0;
        return probs;
    }
    let hot = (1.0 / temp).exp();
    let z = hot + (NUM_CLASSES - 1) as f64;
    for p in probs.iter_mut() {
        *p = 1.0 / z;
    }
    probs[class] = hot / z;
    probs
}

/// One-hot attribute layout fed into the fixed projection:
/// shape(5) + size(3) + material(2) + color(8) + grid cell(36) + (x, y)/6.
pub const ATTR_DIM: usize = 5 + 3 + 2 + NUM_COLORS + GRID * GRID + 2;

/// Deterministic attribute-to-embedding encoder: a fixed random projection
/// with orthonormal rows, seeded once per run. At full width (d equal to
/// the attribute dimension) it is the identity, keeping the one-hot
/// structure intact.
#[derive(Debug, Clone)]
pub struct AttrEncoder {
    pub d: usize,
    proj: Vec<f64>, // d x ATTR_DIM, row-major
}

impl AttrEncoder {
    pub fn new(seed: u64, d: usize) -> Self {
        assert!(d <= ATTR_DIM, "embedding dim {d} exceeds attribute dim {ATTR_DIM}");
        if d == ATTR_DIM {
            let mut proj = vec![0.0; ATTR_DIM * ATTR_DIM];
            for i in 0..ATTR_DIM {
                proj[i * ATTR_DIM + i] = 1.0;
            }
            return Self { d, proj };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = (0..d)
            .map(|_| (0..ATTR_DIM).map(|_| rng.sample(StandardNormal)).collect())
            .collect();
        // Gram-Schmidt
        for i in 0..d {
            for j in 0..i {
                let dot: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum();
                for k in 0..ATTR_DIM {
                    rows[i][k] -= dot * rows[j][k];
                }
            }
            let norm: f64 = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
            for v in rows[i].iter_mut() {
                *v /= norm;
            }
        }
        Self {
            d,
            proj: rows.into_iter().flatten().collect(),
        }
    }

    fn attributes(obj: &WorldObject, pos: (f64, f64)) -> Vec<f64> {
        let mut a = vec![0.0; ATTR_DIM];
        let shape = match obj.shape {
            ObjectShape::Cube => 0,
            ObjectShape::Sphere => 1,
            ObjectShape::Cylinder => 2,
            ObjectShape::Cone => 3,
            ObjectShape::Snitch => 4,
        };
        a[shape] = 1.0;
        a[5 + obj.size as usize] = 1.0;
        a[8 + obj.material as usize] = 1.0;
        a[10 + obj.color.0 as usize] = 1.0;
        if let Ok(cell) = grid_class(pos) {
            a[18 + cell] = 1.0;
        }
        a[18 + GRID * GRID] = pos.0 / GRID as f64;
        a[18 + GRID * GRID + 1] = pos.1 / GRID as f64;
        a
    }

    pub fn encode(&self, obj: &WorldObject, pos: (f64, f64)) -> Vec<f64> {
        let attrs = Self::attributes(obj, pos);
        let mut out = vec![0.0; self.d];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.proj[i * ATTR_DIM..(i + 1) * ATTR_DIM];
            *o = row.iter().zip(&attrs).map(|(a, b)| a * b).sum();
        }
        out
    }
}

fn frame_rng(seed: u64, frame: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(frame as u64),
    )
}

/// Detect visible objects in one frame. Covered objects are absent (their
/// slot padded with the none class), mirroring real detector behavior.
pub fn observe(
    ep: &Episode,
    frame: usize,
    noise: &NoiseConfig,
    seed: u64,
    n_slots: usize,
    enc: &AttrEncoder,
) -> FrameObservationSet {
    assert!(frame < ep.t_frames);
    assert!(ep.objects.len() <= n_slots, "more objects than track slots");
    let mut rng = frame_rng(seed, frame);
    let snitch_visible = ep
        .objects
        .iter()
        .enumerate()
        .any(|(i, o)| o.shape == ObjectShape::Snitch && visible(i, frame, ep));

    let mut real: Vec<Observation> = Vec::new();
    for (i, obj) in ep.objects.iter().enumerate() {
        if !visible(i, frame, ep) {
            continue;
        }
        if noise.prob_drop > 0.0 && rng.gen::<f64>() < noise.prob_drop {
            continue;
        }
        let mut probs = soften_one_hot(class_of(obj), noise.label_temp);
        if noise.hallucinate_snitch && !snitch_visible && obj.shape == ObjectShape::Cone {
            // the failure regime the visibility map exists for: a snitch
            // likelihood hallucinated onto every cone
            let snitch_probs = soften_one_hot(SNITCH_CLASS, noise.label_temp);
            for (p, s) in probs.iter_mut().zip(&snitch_probs) {
                *p = 0.5 * *p + 0.5 * s;
            }
        }
        let mut embed = enc.encode(obj, ep.poses[frame][i]);
        if noise.embed_sigma > 0.0 {
            for v in embed.iter_mut() {
                *v += noise.embed_sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
        real.push(Observation {
            class_probs: probs,
            bbox: object_box(obj, ep.poses[frame][i]),
            embed,
        });
    }
    if noise.prob_swap > 0.0 && real.len() >= 2 && rng.gen::<f64>() < noise.prob_swap {
        let i = rng.gen_range(0..real.len());
        let mut j = rng.gen_range(0..real.len() - 1);
        if j >= i {
            j += 1;
        }
        let tmp = real[i].class_probs.clone();
        real[i].class_probs = real[j].class_probs.clone();
        real[j].class_probs = tmp;
    }
    real.shuffle(&mut rng);
    while real.len() < n_slots {
        real.push(Observation::null(enc.d, noise.label_temp));
    }
    FrameObservationSet { observations: real }
}

/// Pooled frame representation: mean of the visible objects' attribute
/// encodings. Permutation invariant; an empty frame maps to the zero vector.
pub fn frame_embedding(ep: &Episode, frame: usize, enc: &AttrEncoder) -> Vec<f64> {
    assert!(frame < ep.t_frames);
    let mut out = vec![0.0; enc.d];
    let mut count = 0usize;
    for (i, obj) in ep.objects.iter().enumerate() {
        if visible(i, frame, ep) {
            let e = enc.encode(obj, ep.poses[frame][i]);
            for (o, v) in out.iter_mut().zip(&e) {
                *o += v;
            }
            count += 1;
        }
    }
    if count > 0 {
        for o in out.iter_mut() {
            *o /= count as f64;
        }
    }
    out
}

/// Object visibility map over NT track-major tokens: an observation is
/// visible iff it is not the none class and its box is not completely
/// contained by another non-none box of the same frame.
pub fn visibility_map(ts: &TrackSet) -> Vec<bool> {
    let n = ts.num_tracks();
    let t = ts.num_frames();
    let mut v = vec![false; n * t];
    for f in 0..t {
        for i in 0..n {
            let obs = &ts.tracks[i][f];
            if obs.is_null() {
                continue;
            }
            let mut vis = true;
            for j in 0..n {
                if j == i || ts.tracks[j][f].is_null() {
                    continue;
                }
                if ts.tracks[j][f].bbox.contains(&obs.bbox) {
                    vis = false;
                    break;
                }
            }
            v[i * t + f] = vis;
        }
    }
    v
}
