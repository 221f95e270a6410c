//! Sample preparation, loss assembly, and the two-stage training loop.

use std::collections::BTreeMap;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mht::{Forward, HopRecord, MhtConfig, MhtOutput, SourceTokens};
use crate::perception::{
    frame_embedding, observe, visibility_map, AttrEncoder, FrameObservationSet, NoiseConfig,
};
use crate::tensor::{Adam, AdamState, ParamStore, Tape, TensorError, TensorId};
use crate::tracker::{build_tracks, immediate_container, last_visible_snitch, MatchWeights, TrackSet};
use crate::worldsim::Episode;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("tensor error: {0}")]
    Tensor(#[from] TensorError),
    #[error("loss diverged to NaN at epoch {0}")]
    Diverged(usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_grid: f64,
    pub w_hop1: f64,
    pub w_hop2: f64,
    pub w_frame: f64,
    pub w_debias: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_grid: 1.0,
            w_hop1: 1.0,
            w_hop2: 1.0,
            w_frame: 0.1,
            w_debias: 0.1,
        }
    }
}

/// How episodes become model inputs: detector noise, association weights,
/// and the ablation switch replacing Hungarian association with raw
/// detector slot order.
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub noise: NoiseConfig,
    pub match_weights: MatchWeights,
    pub identity_tracking: bool,
    pub encoder_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            noise: NoiseConfig::none(),
            match_weights: MatchWeights::default(),
            identity_tracking: false,
            encoder_seed: 7,
        }
    }
}

/// One training/evaluation example: source tokens plus every target the
/// loss terms may need. Heuristic targets are optional; missing ones skip
/// their loss terms.
#[derive(Debug, Clone)]
pub struct Sample {
    pub source: SourceTokens,
    pub label: usize,
    pub hop1_token: Option<usize>,
    pub hop2_token: Option<usize>,
    pub last_visible_frame: usize,
    pub episode_seed: u64,
    /// The association-only baseline's prediction, computed once here.
    pub tracking_pred: usize,
}

impl Sample {
    pub fn gt_frame(&self, token: Option<usize>, t_frames: usize) -> Option<usize> {
        token.map(|tok| tok % t_frames)
    }

    /// Teacher-forcing schedule: override hop 1 and 2 outcomes with the
    /// heuristic frames when available.
    pub fn forced_schedule(&self, t_frames: usize) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        if let Some(f) = self.gt_frame(self.hop1_token, t_frames) {
            m.insert(1, f);
        }
        if let Some(f) = self.gt_frame(self.hop2_token, t_frames) {
            m.insert(2, f);
        }
        m
    }
}

/// Run the perception and tracking front end over one episode.
pub fn build_track_set(
    ep: &Episode,
    pipe: &PipelineConfig,
    enc: &AttrEncoder,
    n_slots: usize,
) -> TrackSet {
    let frames: Vec<FrameObservationSet> = (0..ep.t_frames)
        .map(|f| observe(ep, f, &pipe.noise, ep.seed, n_slots, enc))
        .collect();
    let embeds: Vec<Vec<f64>> = (0..ep.t_frames)
        .map(|f| frame_embedding(ep, f, enc))
        .collect();
    if pipe.identity_tracking {
        let tracks = (0..n_slots)
            .map(|slot| frames.iter().map(|fr| fr.observations[slot].clone()).collect())
            .collect();
        TrackSet { tracks, frame_embeds: embeds }
    } else {
        build_tracks(&frames, embeds, &pipe.match_weights).expect("square matching never fails")
    }
}

pub fn prepare_sample(ep: &Episode, pipe: &PipelineConfig, enc: &AttrEncoder, n_slots: usize) -> Sample {
    let ts = build_track_set(ep, pipe, enc, n_slots);
    let vis = visibility_map(&ts);
    let t_frames = ts.num_frames();
    let hop1 = last_visible_snitch(&ts, &vis).ok();
    let hop2 = hop1.and_then(|pos| immediate_container(&ts, pos).ok());
    let tracking_pred = crate::tracker::tracking_baseline(&ts);
    Sample {
        source: SourceTokens::from_tracks(&ts, vis),
        label: ep.label,
        hop1_token: hop1.map(|(track, frame)| track * t_frames + frame),
        hop2_token: hop2.map(|(track, frame)| track * t_frames + frame),
        last_visible_frame: ep.last_visible_frame,
        episode_seed: ep.seed,
        tracking_pred,
    }
}

/// Individual loss-term values for logging.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub grid: f64,
    pub hop1: f64,
    pub hop2: f64,
    pub frame: f64,
    pub debias: f64,
    pub total: f64,
}

/// Assemble the weighted loss for one forward pass on the live tape.
///
/// The debias term reruns the model on the same tape with the last hop's
/// most-attended token zeroed and the original hop schedule replayed, then
/// pushes the rerun's grid distribution toward uniform (negative entropy).
pub fn sample_loss(
    fwd: &mut Forward,
    out: &MhtOutput,
    sample: &Sample,
    weights: &LossWeights,
    cfg: &MhtConfig,
    use_debias: bool,
) -> Result<(TensorId, LossParts), TensorError> {
    let t_frames = cfg.t_frames;
    let mut parts = LossParts::default();
    let mut terms: Vec<TensorId> = Vec::new();

    let grid = fwd.tape.cross_entropy(out.grid_logits, sample.label)?;
    parts.grid = fwd.tape.value(grid);
    terms.push(fwd.tape.scale(grid, weights.w_grid));

    if let Some(target) = sample.hop1_token {
        let l = fwd.tape.nll_prob(out.attention_ids[0], target)?;
        parts.hop1 = fwd.tape.value(l);
        terms.push(fwd.tape.scale(l, weights.w_hop1));

        let gt = fwd.tape.scalar((target % t_frames) as f64);
        let fl = fwd.tape.l1_loss(out.soft_frame_ids[0], gt)?;
        parts.frame += fwd.tape.value(fl);
        terms.push(fwd.tape.scale(fl, weights.w_frame));
    }
    if let (Some(target), true) = (sample.hop2_token, out.attention_ids.len() >= 2) {
        let l = fwd.tape.nll_prob(out.attention_ids[1], target)?;
        parts.hop2 = fwd.tape.value(l);
        terms.push(fwd.tape.scale(l, weights.w_hop2));

        let gt = fwd.tape.scalar((target % t_frames) as f64);
        let fl = fwd.tape.l1_loss(out.soft_frame_ids[1], gt)?;
        parts.frame += fwd.tape.value(fl);
        terms.push(fwd.tape.scale(fl, weights.w_frame));
    }

    if use_debias && !out.hops.is_empty() {
        let last_hop = out.hops.last().expect("nonempty");
        let masked_src = sample.source.with_token_masked(last_hop.attended_token);
        let schedule: BTreeMap<usize, usize> = out
            .hops
            .iter()
            .map(|h| (h.hop, h.forced_frame.unwrap_or(h.attended_frame)))
            .collect();
        let neg = fwd.run(&masked_src, &schedule)?;
        let probs = fwd.tape.softmax(neg.grid_logits)?;
        let logp = fwd.tape.ln(probs, 1e-12);
        let plogp = fwd.tape.mul(probs, logp)?;
        let negent = fwd.tape.sum(plogp);
        parts.debias = fwd.tape.value(negent);
        terms.push(fwd.tape.scale(negent, weights.w_debias));
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = fwd.tape.add(total, t)?;
    }
    parts.total = fwd.tape.value(total);
    Ok((total, parts))
}

/// Dropout-free forward pass with frozen parameters.
pub fn forward_eval(
    store: &ParamStore,
    cfg: &MhtConfig,
    sample: &Sample,
) -> Result<(usize, Vec<f64>, Vec<HopRecord>), TensorError> {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut fwd = Forward::new(&mut tape, store, cfg, false, &mut rng);
    let out = fwd.run(&sample.source, &BTreeMap::new())?;
    let probs = out.grid_probs(&tape);
    let pred = crate::mht::argmax_tol(&probs);
    Ok((pred, probs, out.hops))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub teacher_forcing: bool,
    pub weights: LossWeights,
    pub seed: u64,
    pub plateau_patience: usize,
    /// Scheduled 10x learning-rate drop at this epoch (fine-tuning tail);
    /// independent of the plateau rule, which only fires once loss stalls.
    pub lr_decay_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            batch: 16,
            stage1_epochs: 12,
            stage2_epochs: 4,
            teacher_forcing: true,
            weights: LossWeights::default(),
            seed: 0,
            plateau_patience: 10,
            lr_decay_epoch: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub stage: usize,
    pub lr: f64,
    pub mean: LossParts,
    pub val_top1: Option<f64>,
}

/// Two-stage optimization: stage 1 trains with the auxiliary losses and
/// teacher forcing; stage 2 adds the contrastive debias term. Learning rate
/// drops by 10x when the plateau metric stalls for `plateau_patience`
/// epochs. `on_epoch` fires after every epoch with current parameters.
pub fn train(
    store: &mut ParamStore,
    samples: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    mht: &MhtConfig,
    mut on_epoch: impl FnMut(&EpochStats, &ParamStore),
) -> Result<Vec<EpochStats>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam_state = AdamState::new(store);
    let mut lr = cfg.lr;
    let mut best_metric = f64::NEG_INFINITY;
    let mut stall = 0usize;
    let mut stats_log = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let total_epochs = cfg.stage1_epochs + cfg.stage2_epochs;

    for epoch in 0..total_epochs {
        if cfg.lr_decay_epoch == Some(epoch) {
            lr = (lr * 0.1).max(1e-7);
        }
        let stage = if epoch < cfg.stage1_epochs { 1 } else { 2 };
        let use_debias = stage == 2 && cfg.weights.w_debias > 0.0;
        order.shuffle(&mut rng);
        let mut sums = LossParts::default();
        let mut seen = 0usize;

        for chunk in order.chunks(cfg.batch) {
            let mut acc: Vec<Vec<f64>> =
                store.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
            for &si in chunk {
                let sample = &samples[si];
                let forced = if cfg.teacher_forcing {
                    sample.forced_schedule(mht.t_frames)
                } else {
                    BTreeMap::new()
                };
                let mut tape = Tape::new();
                let mut fwd = Forward::new(&mut tape, store, mht, true, &mut rng);
                let out = fwd.run(&sample.source, &forced)?;
                let (loss, parts) = sample_loss(&mut fwd, &out, sample, &cfg.weights, mht, use_debias)?;
                if !parts.total.is_finite() {
                    return Err(TrainError::Diverged(epoch));
                }
                let bound = fwd.bound_ids().to_vec();
                tape.backward(loss)?;
                for (a, g) in acc.iter_mut().zip(store.collect_grads(&tape, &bound)) {
                    for (av, gv) in a.iter_mut().zip(&g) {
                        *av += gv;
                    }
                }
                sums.grid += parts.grid;
                sums.hop1 += parts.hop1;
                sums.hop2 += parts.hop2;
                sums.frame += parts.frame;
                sums.debias += parts.debias;
                sums.total += parts.total;
                seen += 1;
            }
            let scale = 1.0 / chunk.len() as f64;
            for a in acc.iter_mut() {
                for v in a.iter_mut() {
                    *v *= scale;
                }
            }
            let adam = Adam::new(lr, cfg.weight_decay);
            adam.step(store, &acc, &mut adam_state);
        }

        let inv = 1.0 / seen.max(1) as f64;
        let mean = LossParts {
            grid: sums.grid * inv,
            hop1: sums.hop1 * inv,
            hop2: sums.hop2 * inv,
            frame: sums.frame * inv,
            debias: sums.debias * inv,
            total: sums.total * inv,
        };

        let val_top1 = if val.is_empty() {
            None
        } else {
            let mut hits = 0usize;
            for s in val {
                let (pred, _, _) = forward_eval(store, mht, s)?;
                if pred == s.label {
                    hits += 1;
                }
            }
            Some(hits as f64 / val.len() as f64)
        };

        // Plateau tracking follows the train loss: small validation sets make
        // top-1 far too noisy to schedule on.
        let metric = -mean.total;
        if metric > best_metric + 1e-9 {
            best_metric = metric;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.plateau_patience {
                lr = (lr * 0.1).max(1e-7);
                stall = 0;
            }
        }

        let stats = EpochStats { epoch, stage, lr, mean, val_top1 };
        on_epoch(&stats, store);
        stats_log.push(stats);
    }
    Ok(stats_log)
}
