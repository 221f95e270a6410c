//! Procedural generator of desk-scale object-permanence episodes.
//!
//! Objects live on a 6x6 plane viewed top-down. Each episode is split into
//! time slots (one sampled frame per slot); at every slot boundary a subset of
//! objects performs one of the four atomic actions. Cones may cover strictly
//! smaller objects; covered objects move with their carrier until the carrier
//! cone is pick-placed away. Ground truth includes the final grid class and
//! the reasoning chain from the last visible snitch to the final frame.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;

pub const GRID: usize = 6;
pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ObjectShape {
    Cube,
    Sphere,
    Cylinder,
    Cone,
    Snitch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectSize {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Material {
    Metal,
    Rubber,
}

pub const NUM_COLORS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Color(pub u8);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldObject {
    pub id: usize,
    pub shape: ObjectShape,
    pub size: ObjectSize,
    pub material: Material,
    pub color: Color,
}

impl WorldObject {
    /// Side length of the synthesized axis-aligned box, in plane units.
    pub fn box_side(&self) -> f64 {
        match self.size {
            ObjectSize::Small => 0.4,
            ObjectSize::Medium => 0.6,
            ObjectSize::Large => 0.85,
        }
    }
}

/// Box for an object at a plane position, in [0,1] relative coordinates.
pub fn object_box(obj: &WorldObject, pos: (f64, f64)) -> BBox {
    let half = obj.box_side() / 2.0;
    let s = GRID as f64;
    BBox::new(
        (pos.0 - half) / s,
        (pos.1 - half) / s,
        (pos.0 + half) / s,
        (pos.1 + half) / s,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionKind {
    Rotate,
    PickPlace { to: (usize, usize) },
    Slide { to: (usize, usize) },
    Contain { target: usize },
    NoAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub slot: usize,
    pub actor: usize,
    pub action: ActionKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Episode {
    pub schema_version: u32,
    pub seed: u64,
    pub t_frames: usize,
    pub objects: Vec<WorldObject>,
    pub script: Vec<ScriptEvent>,
    /// poses[frame][object id] = continuous (x, y), snapped to cell centers.
    pub poses: Vec<Vec<(f64, f64)>>,
    /// containment[frame][object id] = direct container, if covered.
    pub containment: Vec<Vec<Option<usize>>>,
    /// Grid class of the snitch at the final frame.
    pub label: usize,
    pub last_visible_frame: usize,
    /// Ground-truth reasoning chain: (object id, frame), strictly increasing
    /// in frame, from the last visible snitch to the final frame.
    pub chain: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ActionProbs {
    pub rotate: f64,
    pub pick_place: f64,
    pub slide: f64,
    pub contain: f64,
    pub none: f64,
}

impl Default for ActionProbs {
    fn default() -> Self {
        Self {
            rotate: 0.10,
            pick_place: 0.20,
            slide: 0.25,
            contain: 0.35,
            none: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_objects: usize,
    pub t_frames: usize,
    pub action_probs: ActionProbs,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_objects: 5,
            t_frames: 13,
            action_probs: ActionProbs::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("position ({0}, {1}) outside the plane")]
    OutOfBounds(f64, f64),
    #[error("config: {0}")]
    BadConfig(String),
    #[error("unsatisfiable placement after bounded retries")]
    Unsatisfiable,
    #[error("bins short of episodes: {0:?}")]
    BinsShort(Vec<usize>),
}

/// Row-major cell index of a plane position.
pub fn grid_class(pos: (f64, f64)) -> Result<usize, SimError> {
    let s = GRID as f64;
    if pos.0 < 0.0 || pos.0 >= s || pos.1 < 0.0 || pos.1 >= s {
        return Err(SimError::OutOfBounds(pos.0, pos.1));
    }
    let col = pos.0 as usize;
    let row = pos.1 as usize;
    Ok(row * GRID + col)
}

/// Center of a cell, inverse of [`grid_class`].
pub fn cell_center(class: usize) -> (f64, f64) {
    let row = class / GRID;
    let col = class % GRID;
    (col as f64 + 0.5, row as f64 + 0.5)
}

/// Visibility rule: an object is visible iff its box is not completely
/// contained by the box of any other object in that frame.
pub fn visible(object: usize, frame: usize, ep: &Episode) -> bool {
    let b = object_box(&ep.objects[object], ep.poses[frame][object]);
    for (j, obj) in ep.objects.iter().enumerate() {
        if j == object {
            continue;
        }
        let other = object_box(obj, ep.poses[frame][j]);
        if other.contains(&b) {
            return false;
        }
    }
    true
}

/// Topmost carrier of an object's containment stack, or the object itself.
pub fn effective_carrier(ep: &Episode, object: usize, frame: usize) -> usize {
    let mut cur = object;
    while let Some(parent) = ep.containment[frame][cur] {
        cur = parent;
    }
    cur
}

struct World {
    objects: Vec<WorldObject>,
    pos: Vec<(f64, f64)>,
    parent: Vec<Option<usize>>,
}

impl World {

    fn roots(&self) -> Vec<usize> {
        (0..self.objects.len())
            .filter(|&i| self.parent[i].is_none())
            .collect()
    }

    fn occupied_cells(&self) -> Vec<usize> {
        self.roots()
            .iter()
            .map(|&i| grid_class(self.pos[i]).unwrap())
            .collect()
    }

    fn free_cells(&self) -> Vec<usize> {
        let occ = self.occupied_cells();
        (0..GRID * GRID).filter(|c| !occ.contains(c)).collect()
    }

    fn descendants(&self, id: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(cur) = stack.pop() {
            for i in 0..self.objects.len() {
                if self.parent[i] == Some(cur) {
                    out.push(i);
                    stack.push(i);
                }
            }
        }
        out
    }

    fn release_children(&mut self, id: usize) {
        for p in self.parent.iter_mut() {
            if *p == Some(id) {
                *p = None;
            }
        }
    }

    fn apply(&mut self, actor: usize, action: &ActionKind) {
        match action {
            ActionKind::Rotate | ActionKind::NoAction => {}
            ActionKind::PickPlace { to } => {
                // Picking up a containing cone ends its containment; the
                // contents stay behind.
                self.release_children(actor);
                self.pos[actor] = (to.0 as f64 + 0.5, to.1 as f64 + 0.5);
            }
            ActionKind::Slide { to } => {
                let dest = (to.0 as f64 + 0.5, to.1 as f64 + 0.5);
                for d in self.descendants(actor) {
                    self.pos[d] = dest;
                }
                self.pos[actor] = dest;
            }
            ActionKind::Contain { target } => {
                self.release_children(actor);
                self.pos[actor] = self.pos[*target];
                self.parent[*target] = Some(actor);
            }
        }
    }
}

fn sample_objects(rng: &mut ChaCha8Rng, n: usize) -> Vec<WorldObject> {
    let mut objects = Vec::with_capacity(n);
    objects.push(WorldObject {
        id: 0,
        shape: ObjectShape::Snitch,
        size: ObjectSize::Small,
        material: Material::Metal,
        color: Color(0),
    });
    for id in 1..n {
        // cones are over-represented so containment events are common
        let shape = match rng.gen_range(0..10) {
            0..=3 => ObjectShape::Cone,
            4..=5 => ObjectShape::Cube,
            6..=7 => ObjectShape::Sphere,
            _ => ObjectShape::Cylinder,
        };
        let size = if shape == ObjectShape::Cone {
            if rng.gen_bool(0.5) { ObjectSize::Medium } else { ObjectSize::Large }
        } else {
            match rng.gen_range(0..3) {
                0 => ObjectSize::Small,
                1 => ObjectSize::Medium,
                _ => ObjectSize::Large,
            }
        };
        let material = if rng.gen_bool(0.5) { Material::Metal } else { Material::Rubber };
        objects.push(WorldObject {
            id,
            shape,
            size,
            material,
            color: Color(rng.gen_range(0..NUM_COLORS as u8)),
        });
    }
    objects
}

fn afforded_contain_targets(world: &World, cone: usize, moved: &[bool]) -> Vec<usize> {
    // an object that already moved this slot cannot be covered in the same
    // slot: a one-frame-per-slot observer must see it at rest before it hides
    world
        .roots()
        .into_iter()
        .filter(|&t| t != cone && !moved[t] && world.objects[t].size < world.objects[cone].size)
        .collect()
}

/// Generate one episode. Placement failures retry internally with derived
/// seeds; the recorded `seed` is the one that succeeded.
pub fn simulate(seed: u64, config: &SimConfig) -> Result<Episode, SimError> {
    if config.n_objects < 2 {
        return Err(SimError::BadConfig("n_objects must be at least 2".into()));
    }
    if config.t_frames < 2 {
        return Err(SimError::BadConfig("t_frames must be at least 2".into()));
    }
    let mut s = seed;
    for _ in 0..1000 {
        match try_simulate(s, config) {
            Ok(ep) => return Ok(ep),
            Err(SimError::Unsatisfiable) => s = s.wrapping_add(1),
            Err(e) => return Err(e),
        }
    }
    Err(SimError::Unsatisfiable)
}

fn try_simulate(seed: u64, config: &SimConfig) -> Result<Episode, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_objects;
    let t = config.t_frames;
    let objects = sample_objects(&mut rng, n);

    // initial placement on distinct cells
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(&mut rng);
    let mut world = World {
        objects: objects.clone(),
        pos: cells[..n].iter().map(|&c| cell_center(c)).collect(),
        parent: vec![None; n],
    };

    let mut script = Vec::new();
    let mut poses = vec![world.pos.clone()];
    let mut containment = vec![world.parent.clone()];
    let probs = &config.action_probs;

    for slot in 0..t - 1 {
        let actors = world.roots();
        let mut moved = vec![false; n];
        for actor in actors {
            // an earlier action in this slot may have covered this object
            if world.parent[actor].is_some() {
                continue;
            }
            let action = pick_action(&mut rng, &world, actor, probs, &moved)?;
            if matches!(action, ActionKind::PickPlace { .. } | ActionKind::Slide { .. }) {
                moved[actor] = true;
            }
            if action != ActionKind::NoAction {
                script.push(ScriptEvent { slot, actor, action });
            }
            world.apply(actor, &action);
        }
        poses.push(world.pos.clone());
        containment.push(world.parent.clone());
    }

    let mut ep = Episode {
        schema_version: EPISODE_SCHEMA_VERSION,
        seed,
        t_frames: t,
        objects,
        script,
        poses,
        containment,
        label: 0,
        last_visible_frame: 0,
        chain: Vec::new(),
    };
    let snitch = ep
        .objects
        .iter()
        .position(|o| o.shape == ObjectShape::Snitch)
        .unwrap();
    ep.label = grid_class(ep.poses[t - 1][snitch])?;
    ep.last_visible_frame = (0..t)
        .rev()
        .find(|&f| visible(snitch, f, &ep))
        .expect("snitch is visible at frame 0 by construction");
    ep.chain = ground_truth_chain(&ep, snitch);
    Ok(ep)
}

fn pick_action(
    rng: &mut ChaCha8Rng,
    world: &World,
    actor: usize,
    probs: &ActionProbs,
    moved: &[bool],
) -> Result<ActionKind, SimError> {
    let shape = world.objects[actor].shape;
    let can_rotate = matches!(
        shape,
        ObjectShape::Cube | ObjectShape::Cylinder | ObjectShape::Snitch
    );
    let contain_targets = if shape == ObjectShape::Cone {
        afforded_contain_targets(world, actor, moved)
    } else {
        Vec::new()
    };
    let free = world.free_cells();

    let mut options: Vec<(f64, u8)> = vec![(probs.none, 0)];
    if can_rotate {
        options.push((probs.rotate, 1));
    }
    if !free.is_empty() {
        options.push((probs.pick_place, 2));
        options.push((probs.slide, 3));
    }
    if !contain_targets.is_empty() {
        options.push((probs.contain, 4));
    }
    let total: f64 = options.iter().map(|(w, _)| w).sum();
    if total <= 0.0 {
        return Ok(ActionKind::NoAction);
    }
    let mut pick = rng.gen::<f64>() * total;
    let mut chosen = 0u8;
    for (w, tag) in &options {
        if pick < *w {
            chosen = *tag;
            break;
        }
        pick -= w;
    }
    Ok(match chosen {
        0 => ActionKind::NoAction,
        1 => ActionKind::Rotate,
        2 | 3 => {
            if free.is_empty() {
                return Err(SimError::Unsatisfiable);
            }
            let cell = free[rng.gen_range(0..free.len())];
            let to = (cell % GRID, cell / GRID);
            if chosen == 2 {
                ActionKind::PickPlace { to }
            } else {
                ActionKind::Slide { to }
            }
        }
        _ => {
            let target = contain_targets[rng.gen_range(0..contain_targets.len())];
            ActionKind::Contain { target }
        }
    })
}

/// Chain = last visible snitch, then every frame where the snitch's effective
/// carrier changes (covered, handed over, or revealed), then the final frame.
fn ground_truth_chain(ep: &Episode, snitch: usize) -> Vec<(usize, usize)> {
    let t = ep.t_frames;
    let lvs = ep.last_visible_frame;
    let mut chain = vec![(snitch, lvs)];
    let mut prev = effective_carrier(ep, snitch, lvs);
    for f in lvs + 1..t {
        let carrier = effective_carrier(ep, snitch, f);
        if carrier != prev {
            chain.push((carrier, f));
            prev = carrier;
        }
    }
    if chain.last().unwrap().1 != t - 1 {
        chain.push((effective_carrier(ep, snitch, t - 1), t - 1));
    }
    chain
}

/// Hops the model is required to perform for an episode: one hop per frame
/// from the last visible snitch to the end, capped by the minimum-hop rule.
pub fn required_hops(ep: &Episode, min_hops: usize) -> usize {
    min_hops.min(ep.t_frames - ep.last_visible_frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub split: SplitTag,
    pub bin_counts: Vec<usize>,
    pub episode_seeds: Vec<u64>,
}

/// Keep exactly `per_bin` episodes per last-visible-frame bin, in pool order;
/// surplus is discarded. Errors name every short bin.
pub fn balance_by_last_visible(
    pool: &[Episode],
    per_bin: usize,
) -> Result<Vec<Episode>, SimError> {
    let t = match pool.first() {
        Some(ep) => ep.t_frames,
        None => return Err(SimError::BinsShort((0..1).collect())),
    };
    let mut bins: Vec<Vec<&Episode>> = vec![Vec::new(); t];
    for ep in pool {
        let bin = ep.last_visible_frame;
        if bins[bin].len() < per_bin {
            bins[bin].push(ep);
        }
    }
    let short: Vec<usize> = (0..t).filter(|&b| bins[b].len() < per_bin).collect();
    if !short.is_empty() {
        return Err(SimError::BinsShort(short));
    }
    Ok(bins.into_iter().flatten().cloned().collect())
}

/// Stratified random split that keeps each last-visible bin balanced across
/// the two splits.
pub fn split_pool(
    balanced: &[Episode],
    train_ratio: f64,
    seed: u64,
) -> (Vec<Episode>, Vec<Episode>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = balanced.first().map_or(0, |ep| ep.t_frames);
    let mut bins: Vec<Vec<&Episode>> = vec![Vec::new(); t];
    for ep in balanced {
        bins[ep.last_visible_frame].push(ep);
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut bin in bins {
        bin.shuffle(&mut rng);
        let n_train = (bin.len() as f64 * train_ratio).round() as usize;
        for (i, ep) in bin.into_iter().enumerate() {
            if i < n_train {
                train.push(ep.clone());
            } else {
                test.push(ep.clone());
            }
        }
    }
    (train, test)
}

/// Histogram of last-visible-frame values.
pub fn lvs_histogram(episodes: &[Episode]) -> Vec<usize> {
    let t = episodes.first().map_or(0, |ep| ep.t_frames);
    let mut h = vec![0; t];
    for ep in episodes {
        h[ep.last_visible_frame] += 1;
    }
    h
}
