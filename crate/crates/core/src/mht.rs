//! Iterative multi-hop transformer over tracked object tokens.
//!
//! Each hop runs two shared encoder-decoder units: the first adapts the
//! object tokens using helper information (the frame track on hop 1, the
//! previously attended frame's objects afterwards), a sigmoid feature gate
//! re-selects dimensions of the original tokens, a frame-window mask
//! restricts the candidate pool, and the second unit updates the video
//! query while exposing its cross-attention weights. The most attended
//! token decides the next frame; hopping ends at the final frame.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{ParamStore, Tape, TensorError, TensorId};
use crate::tracker::TrackSet;
use crate::worldsim::GRID;

pub const GRID_CLASSES: usize = GRID * GRID;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MhtSwitches {
    /// Allow a hop to land on any frame in the window, not just t+1.
    pub dynamic_stride: bool,
    /// Reserve room in the window so at least `min_hops` hops happen.
    pub min_hop_masking: bool,
    /// Sigmoid feature gate between the two units.
    pub gating: bool,
    /// Apply the frame-window mask inside the first unit too.
    pub mask_both: bool,
    /// Degenerate baseline: only final-frame tokens are ever unmasked.
    pub last_frame_only: bool,
}

impl Default for MhtSwitches {
    fn default() -> Self {
        Self {
            dynamic_stride: true,
            min_hop_masking: true,
            gating: true,
            mask_both: false,
            last_frame_only: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MhtConfig {
    pub d: usize,
    /// Width of the incoming observation embeddings; the input projection
    /// maps this to `d`.
    pub in_dim: usize,
    pub heads: usize,
    pub t_frames: usize,
    pub n_tracks: usize,
    pub beta: f64,
    pub min_hops: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub switches: MhtSwitches,
}

impl Default for MhtConfig {
    fn default() -> Self {
        Self {
            d: 32,
            in_dim: crate::perception::ATTR_DIM,
            heads: 2,
            t_frames: 13,
            n_tracks: 6,
            beta: 1e4,
            min_hops: 5,
            dropout: 0.1,
            head_hidden: 64,
            switches: MhtSwitches::default(),
        }
    }
}

/// Inclusive frame window a hop may attend to. Hop 1 sees every frame; hop
/// h>1 sees frames after t, with the upper bound pulled back so the
/// remaining mandatory hops still have room.
pub fn mask_window(cfg: &MhtConfig, t: usize, h: usize) -> (usize, usize) {
    let last = cfg.t_frames - 1;
    if cfg.switches.last_frame_only {
        return (last, last);
    }
    if h <= 1 {
        return (0, last);
    }
    let lo = (t + 1).min(last);
    if !cfg.switches.dynamic_stride {
        return (lo, lo);
    }
    if cfg.switches.min_hop_masking && h < cfg.min_hops {
        let reserved = last - (cfg.min_hops - h).min(last);
        (lo, reserved.max(lo).min(last))
    } else {
        (lo, last)
    }
}

/// One reasoning step, recorded for trace export and diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HopRecord {
    pub hop: usize,
    pub t_prev: usize,
    pub window: (usize, usize),
    pub window_fallback: bool,
    pub attended_token: usize,
    pub attended_frame: usize,
    pub forced_frame: Option<usize>,
    pub soft_frame: f64,
    /// Head-averaged attention over NT tokens; exact zeros at masked slots.
    pub attention: Vec<f64>,
    pub attention_heads: Vec<Vec<f64>>,
}

/// Tape handles produced by one forward pass, for loss construction.
pub struct MhtOutput {
    pub e: TensorId,
    pub grid_logits: TensorId,
    pub hops: Vec<HopRecord>,
    /// Head-averaged attention tensors per hop, aligned with `hops`.
    pub attention_ids: Vec<TensorId>,
    /// Differentiable frame index per hop, aligned with `hops`.
    pub soft_frame_ids: Vec<TensorId>,
}

impl MhtOutput {
    pub fn grid_probs(&self, tape: &Tape) -> Vec<f64> {
        let logits = tape.data(self.grid_logits);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.iter().map(|v| v / z).collect()
    }
}

/// Raw per-token inputs for one episode, before tape construction.
#[derive(Debug, Clone)]
pub struct SourceTokens {
    /// NT rows, track-major: token i is (track i / T, frame i % T).
    pub objects: Vec<Vec<f64>>,
    /// T rows of pooled frame embeddings.
    pub frames: Vec<Vec<f64>>,
    /// NT visibility flags, track-major.
    pub visibility: Vec<bool>,
}

impl SourceTokens {
    pub fn from_tracks(ts: &TrackSet, visibility: Vec<bool>) -> Self {
        let n = ts.num_tracks();
        let t = ts.num_frames();
        assert_eq!(visibility.len(), n * t);
        let mut objects = Vec::with_capacity(n * t);
        for track in 0..n {
            for frame in 0..t {
                objects.push(ts.tracks[track][frame].embed.clone());
            }
        }
        Self {
            objects,
            frames: ts.frame_embeds.clone(),
            visibility,
        }
    }

    /// Zero out one object token (the contrastive-debias negative source).
    pub fn with_token_masked(&self, token: usize) -> Self {
        let mut out = self.clone();
        for v in out.objects[token].iter_mut() {
            *v = 0.0;
        }
        out
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn small_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    use rand_distr::StandardNormal;
    (0..n).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn register_attn(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(&format!("{prefix}.{w}"), &[d, d], xavier(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(&format!("{prefix}.{b}"), &[1, d], vec![0.0; d]);
    }
}

fn register_ln(store: &mut ParamStore, prefix: &str, d: usize) {
    store.register(&format!("{prefix}.g"), &[1, d], vec![1.0; d]);
    store.register(&format!("{prefix}.b"), &[1, d], vec![0.0; d]);
}

fn register_ff(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    let hidden = 4 * d;
    store.register(&format!("{prefix}.w1"), &[d, hidden], xavier(rng, d, hidden));
    store.register(&format!("{prefix}.b1"), &[1, hidden], vec![0.0; hidden]);
    store.register(&format!("{prefix}.w2"), &[hidden, d], xavier(rng, hidden, d));
    store.register(&format!("{prefix}.b2"), &[1, d], vec![0.0; d]);
}

fn register_unit(store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, d: usize) {
    register_ln(store, &format!("{prefix}.enc.ln1"), d);
    register_attn(store, rng, &format!("{prefix}.enc.attn"), d);
    register_ln(store, &format!("{prefix}.enc.ln2"), d);
    register_ff(store, rng, &format!("{prefix}.enc.ff"), d);
    register_ln(store, &format!("{prefix}.dec.ln1"), d);
    register_attn(store, rng, &format!("{prefix}.dec.self"), d);
    register_ln(store, &format!("{prefix}.dec.ln2"), d);
    register_attn(store, rng, &format!("{prefix}.dec.cross"), d);
    register_ln(store, &format!("{prefix}.dec.ln3"), d);
    register_ff(store, rng, &format!("{prefix}.dec.ff"), d);
}

/// Create and initialize every trainable parameter. The count is fixed and
/// independent of how many hops a forward pass performs.
pub fn init_params(cfg: &MhtConfig, seed: u64) -> ParamStore {
    use rand::SeedableRng;
    assert_eq!(cfg.d % cfg.heads, 0, "model dim must split across heads");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d;
    let mut store = ParamStore::new();
    store.register("in.w", &[cfg.in_dim, d], xavier(&mut rng, cfg.in_dim, d));
    store.register("in.b", &[1, d], vec![0.0; d]);
    store.register("frame.w", &[cfg.in_dim, d], xavier(&mut rng, cfg.in_dim, d));
    store.register("frame.b", &[1, d], vec![0.0; d]);
    store.register("time_enc", &[cfg.t_frames, d], small_normal(&mut rng, cfg.t_frames * d));
    store.register("e0", &[1, d], small_normal(&mut rng, d));
    register_unit(&mut store, &mut rng, "tf", d);
    register_unit(&mut store, &mut rng, "ts", d);
    store.register("gate.w", &[d, d], xavier(&mut rng, d, d));
    store.register("gate.b", &[1, d], vec![0.0; d]);
    register_ln(&mut store, "final_ln", d);
    store.register("head.w1", &[d, cfg.head_hidden], xavier(&mut rng, d, cfg.head_hidden));
    store.register("head.b1", &[1, cfg.head_hidden], vec![0.0; cfg.head_hidden]);
    store.register(
        "head.w2",
        &[cfg.head_hidden, GRID_CLASSES],
        xavier(&mut rng, cfg.head_hidden, GRID_CLASSES),
    );
    store.register("head.b2", &[1, GRID_CLASSES], vec![0.0; GRID_CLASSES]);
    store
}

/// One forward pass under construction: the tape, bound parameter ids, and
/// the dropout state.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    bound: Vec<TensorId>,
    cfg: &'a MhtConfig,
    train: bool,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Forward<'a> {
    pub fn new(
        tape: &'a mut Tape,
        store: &'a ParamStore,
        cfg: &'a MhtConfig,
        train: bool,
        rng: &'a mut ChaCha8Rng,
    ) -> Self {
        let bound = store.bind(tape);
        Self { tape, store, bound, cfg, train, rng }
    }

    pub fn bound_ids(&self) -> &[TensorId] {
        &self.bound
    }

    fn p(&self, name: &str) -> TensorId {
        self.bound[self.store.index_of(name).unwrap_or_else(|| panic!("no param {name}"))]
    }

    fn linear(&mut self, x: TensorId, w: &str, b: &str) -> Result<TensorId, TensorError> {
        let w = self.p(w);
        let b = self.p(b);
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    fn drop(&mut self, x: TensorId) -> TensorId {
        self.tape.dropout(x, self.cfg.dropout, self.train, self.rng)
    }

    /// Multi-head attention. `allowed` restricts which key/value tokens any
    /// query may see; disallowed columns get exactly zero weight. Returns
    /// the output and the per-head attention matrices.
    fn mha(
        &mut self,
        q_in: TensorId,
        kv_in: TensorId,
        prefix: &str,
        allowed: Option<&Rc<Vec<bool>>>,
    ) -> Result<(TensorId, Vec<TensorId>), TensorError> {
        let d = self.cfg.d;
        let nh = self.cfg.heads;
        let dh = d / nh;
        let q = self.linear(q_in, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
        let k = self.linear(kv_in, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
        let v = self.linear(kv_in, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
        let mut heads = Vec::with_capacity(nh);
        let mut weights = Vec::with_capacity(nh);
        for h in 0..nh {
            let qh = self.tape.slice_cols(q, h * dh, dh)?;
            let kh = self.tape.slice_cols(k, h * dh, dh)?;
            let vh = self.tape.slice_cols(v, h * dh, dh)?;
            let kt = self.tape.transpose(kh);
            let scores = self.tape.matmul(qh, kt)?;
            let scaled = self.tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let a = self.tape.softmax_masked(scaled, allowed.cloned())?;
            let a_dropped = self.drop(a);
            heads.push(self.tape.matmul(a_dropped, vh)?);
            weights.push(a);
        }
        let cat = self.tape.concat_cols(&heads)?;
        let out = self.linear(cat, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
        Ok((out, weights))
    }

    fn ln(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, TensorError> {
        let g = self.p(&format!("{prefix}.g"));
        let b = self.p(&format!("{prefix}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn ff(&mut self, x: TensorId, prefix: &str) -> Result<TensorId, TensorError> {
        let h = self.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn residual(&mut self, x: TensorId, dx: TensorId) -> Result<TensorId, TensorError> {
        let dropped = self.drop(dx);
        self.tape.add(x, dropped)
    }

    /// Pre-norm encoder layer: self-attention then feed-forward.
    fn encoder(
        &mut self,
        x: TensorId,
        prefix: &str,
        allowed: Option<&Rc<Vec<bool>>>,
    ) -> Result<TensorId, TensorError> {
        let xn = self.ln(x, &format!("{prefix}.ln1"))?;
        let (attn, _) = self.mha(xn, xn, &format!("{prefix}.attn"), allowed)?;
        let x = self.residual(x, attn)?;
        let xn = self.ln(x, &format!("{prefix}.ln2"))?;
        let ff = self.ff(xn, &format!("{prefix}.ff"))?;
        self.residual(x, ff)
    }

    /// Pre-norm decoder layer: self-attention over the queries, cross
    /// attention into the encoded memory, feed-forward. Returns per-head
    /// cross-attention weights.
    #[allow(clippy::too_many_arguments)]
    fn decoder(
        &mut self,
        y: TensorId,
        memory: TensorId,
        prefix: &str,
        allowed_self: Option<&Rc<Vec<bool>>>,
        allowed_cross: Option<&Rc<Vec<bool>>>,
    ) -> Result<(TensorId, Vec<TensorId>), TensorError> {
        let yn = self.ln(y, &format!("{prefix}.ln1"))?;
        let (attn, _) = self.mha(yn, yn, &format!("{prefix}.self"), allowed_self)?;
        let y = self.residual(y, attn)?;
        let yn = self.ln(y, &format!("{prefix}.ln2"))?;
        let (cross, aw) = self.mha(yn, memory, &format!("{prefix}.cross"), allowed_cross)?;
        let y = self.residual(y, cross)?;
        let yn = self.ln(y, &format!("{prefix}.ln3"))?;
        let ff = self.ff(yn, &format!("{prefix}.ff"))?;
        Ok((self.residual(y, ff)?, aw))
    }

    /// Project raw object/frame rows and add the learned time encodings.
    fn embed_sources(&mut self, src: &SourceTokens) -> Result<(TensorId, TensorId), TensorError> {
        let in_dim = self.cfg.in_dim;
        let t = self.cfg.t_frames;
        let nt = src.objects.len();
        assert_eq!(nt, self.cfg.n_tracks * t, "token count mismatch");
        assert_eq!(src.frames.len(), t, "frame track length mismatch");
        let flat_o: Vec<f64> = src.objects.iter().flatten().copied().collect();
        let obj = self.tape.constant(&[nt, in_dim], flat_o);
        let obj = self.linear(obj, "in.w", "in.b")?;
        let frame_ids: Vec<usize> = (0..nt).map(|i| i % t).collect();
        let time = self.p("time_enc");
        let obj_time = self.tape.embedding_lookup(time, &frame_ids)?;
        let t_o = self.tape.add(obj, obj_time)?;

        let flat_f: Vec<f64> = src.frames.iter().flatten().copied().collect();
        let fr = self.tape.constant(&[t, in_dim], flat_f);
        let fr = self.linear(fr, "frame.w", "frame.b")?;
        let all_frames: Vec<usize> = (0..t).collect();
        let fr_time = self.tape.embedding_lookup(time, &all_frames)?;
        let t_f = self.tape.add(fr, fr_time)?;
        Ok((t_o, t_f))
    }

    /// Full iterative pass. `forced` overrides the attended frame of given
    /// hops (1-based) for teacher forcing and debias reruns; the recorded
    /// attention is still the model's own.
    pub fn run(
        &mut self,
        src: &SourceTokens,
        forced: &BTreeMap<usize, usize>,
    ) -> Result<MhtOutput, TensorError> {
        let cfg = self.cfg;
        let t_frames = cfg.t_frames;
        let n = cfg.n_tracks;
        let nt = n * t_frames;
        let last = t_frames - 1;
        let (t_o, t_f) = self.embed_sources(src)?;
        let mut e = self.p("e0");
        let mut t_cur = 0usize;
        let mut h = 0usize;
        let mut hops: Vec<HopRecord> = Vec::new();
        let mut attention_ids = Vec::new();
        let mut soft_frame_ids = Vec::new();

        while t_cur != last {
            h += 1;
            assert!(h <= t_frames, "hop count exceeded frame count");

            // candidate pool for this hop
            let (lo, hi) = mask_window(cfg, t_cur, h);
            let mut allowed: Vec<bool> = (0..nt)
                .map(|i| {
                    let f = i % t_frames;
                    f >= lo && f <= hi && src.visibility[i]
                })
                .collect();
            let window_fallback = allowed.iter().all(|&a| !a);
            if window_fallback {
                // nothing visible in the window: force progress by opening
                // every final-frame token
                for i in 0..nt {
                    if i % t_frames == last {
                        allowed[i] = true;
                    }
                }
            }
            let allowed = Rc::new(allowed);

            // helper information: frame track on hop 1, previously attended
            // frame's objects afterwards
            let helper = if h == 1 {
                t_f
            } else {
                let idx: Vec<usize> = (0..n).map(|track| track * t_frames + t_cur).collect();
                self.tape.gather_rows(t_o, Rc::new(idx))?
            };

            let mask_f = if cfg.switches.mask_both { Some(&allowed) } else { None };
            let helper_enc = self.encoder(helper, "tf.enc", None)?;
            let (u_update, _) = self.decoder(t_o, helper_enc, "tf.dec", mask_f, None)?;

            let gated = if cfg.switches.gating {
                let gate_pre = self.linear(u_update, "gate.w", "gate.b")?;
                let gate = self.tape.sigmoid(gate_pre);
                self.tape.mul(gate, t_o)?
            } else {
                u_update
            };

            let mem = self.encoder(gated, "ts.enc", Some(&allowed))?;
            let (e_next, head_weights) =
                self.decoder(e, mem, "ts.dec", None, Some(&allowed))?;
            e = e_next;

            // head-average the 1xNT cross-attention rows
            let mut avg = head_weights[0];
            for &w in &head_weights[1..] {
                avg = self.tape.add(avg, w)?;
            }
            let avg = self.tape.scale(avg, 1.0 / head_weights.len() as f64);

            let frame_weights: Rc<Vec<f64>> =
                Rc::new((0..nt).map(|i| (i % t_frames) as f64).collect());
            let soft_frame =
                self.tape
                    .softargmax(avg, cfg.beta, None, Some(frame_weights))?;

            let a_data = self.tape.data(avg).to_vec();
            let attended_token = argmax_tol(&a_data);
            let attended_frame = attended_token % t_frames;
            let forced_frame = forced.get(&h).copied();
            let heads_data: Vec<Vec<f64>> = head_weights
                .iter()
                .map(|&w| self.tape.data(w).to_vec())
                .collect();
            hops.push(HopRecord {
                hop: h,
                t_prev: t_cur,
                window: (lo, hi),
                window_fallback,
                attended_token,
                attended_frame,
                forced_frame,
                soft_frame: self.tape.value(soft_frame),
                attention: a_data,
                attention_heads: heads_data,
            });
            attention_ids.push(avg);
            soft_frame_ids.push(soft_frame);

            t_cur = forced_frame.unwrap_or(attended_frame);
            assert!(
                t_cur > hops[hops.len() - 1].t_prev || h == 1 || forced_frame.is_some(),
                "attended frame must advance"
            );
        }

        let e_final = self.ln(e, "final_ln")?;
        let hmid = self.linear(e_final, "head.w1", "head.b1")?;
        let hmid = self.tape.relu(hmid);
        let grid_logits = self.linear(hmid, "head.w2", "head.b2")?;
        Ok(MhtOutput {
            e: e_final,
            grid_logits,
            hops,
            attention_ids,
            soft_frame_ids,
        })
    }
}

/// Highest-value index; values within 1e-12 of the max tie-break to the
/// lowest index.
pub fn argmax_tol(values: &[f64]) -> usize {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .position(|&v| v >= max - 1e-12)
        .expect("nonempty attention vector")
}
