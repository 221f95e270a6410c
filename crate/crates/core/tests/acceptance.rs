//! End-to-end acceptance gate: one test per release criterion, executed in
//! sequence with a PASS/FAIL line printed for each. The run is long (it
//! trains the full model from scratch); `cargo test --test acceptance` with
//! `--nocapture` shows progress.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use hopper_core::eval::{
    evaluate, hop_diagnostics, random_scores, report_from_scores, tracking_scores, EvalReport,
};
use hopper_core::mht::{init_params, mask_window, Forward, MhtConfig, SourceTokens};
use hopper_core::perception::{class_of, visibility_map, AttrEncoder};
use hopper_core::tensor::{ParamStore, Tape};
use hopper_core::tracker::{immediate_container, last_visible_snitch};
use hopper_core::training::{
    build_track_set, prepare_sample, train, PipelineConfig, Sample, TrainConfig,
};
use hopper_core::worldsim::{balance_by_last_visible, simulate, split_pool, Episode, SimConfig};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use common::{brute_force_assignment, check_grad};

// ---- shared plumbing ----

fn default_cfg() -> MhtConfig {
    MhtConfig::default()
}

/// Simulate until every last-visible-frame bin holds `per_bin` episodes,
/// then balance and split 70:30 stratified.
fn gen_balanced(per_bin: usize, seed: u64) -> (Vec<Episode>, Vec<Episode>) {
    let sim = SimConfig::default();
    let t = sim.t_frames;
    let mut bins = vec![0usize; t];
    let mut pool: Vec<Episode> = Vec::with_capacity(per_bin * t);
    let limit = (per_bin * t).saturating_mul(400) as u64;
    for i in 0..limit {
        if bins.iter().all(|&b| b >= per_bin) {
            break;
        }
        // seeds spaced past the simulator's internal retry range
        let s = seed.wrapping_mul(0x10000000).wrapping_add(i * 1000);
        let ep = simulate(s, &sim).expect("simulation");
        let bin = ep.last_visible_frame;
        if bins[bin] < per_bin {
            bins[bin] += 1;
            pool.push(ep);
        }
    }
    let balanced = balance_by_last_visible(&pool, per_bin).expect("balanced bins");
    split_pool(&balanced, 0.7, seed)
}

fn prepare_all(eps: &[Episode], cfg: &MhtConfig) -> Vec<Sample> {
    let pipe = PipelineConfig::default();
    let enc = AttrEncoder::new(pipe.encoder_seed, cfg.in_dim);
    eps.iter().map(|ep| prepare_sample(ep, &pipe, &enc, cfg.n_tracks)).collect()
}

fn train_and_eval(
    train_set: &[Sample],
    val: &[Sample],
    test: &[Sample],
    mht: &MhtConfig,
    tc: &TrainConfig,
) -> (EvalReport, Vec<Vec<hopper_core::mht::HopRecord>>) {
    let mut store = init_params(mht, tc.seed);
    train(&mut store, train_set, val, tc, mht, |_, _| {}).expect("training");
    evaluate(&store, mht, test).expect("evaluation")
}

// ---- criterion bodies (panic = FAIL) ----

fn criterion_1_autodiff() -> String {
    let start = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(11);
    let mut randv = |n: usize| -> Vec<f64> { (0..n).map(|_| r.gen_range(-1.5..1.5)).collect() };

    // every differentiable op, each against central finite differences
    let w = randv(12);
    check_grad(&[2, 3], &randv(6), 1e-3, {
        let w = w.clone();
        move |tape, x| {
            let wt = tape.leaf(&[3, 4], w.clone(), false);
            let y = tape.matmul(x, wt).unwrap();
            let s = tape.softmax(y).unwrap();
            let l = tape.ln(s, 1e-12);
            tape.sum(l)
        }
    });
    check_grad(&[2, 3], &randv(6), 1e-3, |tape, x| {
        let y = tape.relu(x);
        let z = tape.sigmoid(y);
        tape.sum(z)
    });
    check_grad(&[2, 4], &randv(8), 1e-3, |tape, x| {
        let g = tape.leaf(&[1, 4], vec![1.1, 0.9, 1.2, 0.8], false);
        let b = tape.leaf(&[1, 4], vec![0.1, -0.2, 0.0, 0.3], false);
        let y = tape.layer_norm(x, g, b).unwrap();
        tape.sum(y)
    });
    check_grad(&[1, 6], &randv(6), 1e-3, |tape, x| tape.cross_entropy(x, 2).unwrap());
    let probs = vec![0.1, 0.3, 0.2, 0.25, 0.15];
    check_grad(&[1, 5], &probs, 1e-3, |tape, x| tape.nll_prob(x, 1).unwrap());
    check_grad(&[2, 2], &randv(4), 1e-3, |tape, x| {
        let t = tape.constant(&[2, 2], vec![0.3, -0.4, 0.2, 0.9]);
        tape.l1_loss(x, t).unwrap()
    });
    check_grad(&[1, 6], &randv(6), 1e-3, |tape, x| {
        let s = tape.softmax(x).unwrap();
        tape.softargmax(s, 1e2, None, None).unwrap()
    });
    check_grad(&[3, 2], &randv(6), 1e-3, |tape, x| {
        let row = tape.leaf(&[1, 2], vec![0.5, -0.5], false);
        let y = tape.add_row(x, row).unwrap();
        let t = tape.transpose(y);
        let m = tape.mul(t, t).unwrap();
        tape.sum(m)
    });
    check_grad(&[2, 4], &randv(8), 1e-3, |tape, x| {
        let a = tape.slice_cols(x, 0, 2).unwrap();
        let b = tape.slice_cols(x, 2, 4).unwrap();
        let c = tape.concat_cols(&[b, a]).unwrap();
        let d = tape.gather_rows(c, std::rc::Rc::new(vec![1, 0, 1])).unwrap();
        let e = tape.scale(d, 0.7);
        let f = tape.sub(e, d).unwrap();
        let g = tape.add(f, d).unwrap();
        tape.dot_const(g, std::rc::Rc::new(vec![1.0; 12])).unwrap()
    });
    check_grad(&[1, 5], &randv(5), 1e-3, |tape, x| {
        let s = tape
            .softmax_masked(x, Some(std::rc::Rc::new(vec![true, true, false, true, false])))
            .unwrap();
        let l = tape.ln(s, 1e-9);
        tape.sum(l)
    });

    // the full model forward at T=3, N=2, d=8
    let cfg = MhtConfig { d: 8, in_dim: 8, heads: 2, t_frames: 3, n_tracks: 2, head_hidden: 8, ..default_cfg() };
    let mut store = init_params(&cfg, 17);
    let src = {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let nt = cfg.n_tracks * cfg.t_frames;
        SourceTokens {
            objects: (0..nt).map(|_| (0..cfg.in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            frames: (0..cfg.t_frames).map(|_| (0..cfg.in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect(),
            visibility: vec![true; nt],
        }
    };
    let loss_fn = |store: &ParamStore| -> (f64, Vec<Vec<f64>>) {
        let forced = BTreeMap::from([(1usize, 1usize), (2, 2)]);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut fwd = Forward::new(&mut tape, store, &cfg, false, &mut rng);
        let out = fwd.run(&src, &forced).unwrap();
        let bound: Vec<_> = fwd.bound_ids().to_vec();
        let mut loss = tape.cross_entropy(out.grid_logits, 7).unwrap();
        let n1 = tape.nll_prob(out.attention_ids[0], 1).unwrap();
        loss = tape.add(loss, n1).unwrap();
        let n2 = tape.nll_prob(out.attention_ids[1], 5).unwrap();
        loss = tape.add(loss, n2).unwrap();
        for (&sf, target) in out.soft_frame_ids.iter().zip([1.0, 2.0]) {
            let t = tape.constant(&[], vec![target]);
            let l1 = tape.l1_loss(sf, t).unwrap();
            loss = tape.add(loss, l1).unwrap();
        }
        let v = tape.value(loss);
        tape.backward(loss).unwrap();
        (v, store.collect_grads(&tape, &bound))
    };
    let (_, grads) = loss_fn(&store);
    let h = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0usize;
    for p in 0..store.len() {
        let len = store.params()[p].value.len();
        let mut idxs: Vec<usize> = (0..len).collect();
        idxs.shuffle(&mut rng);
        for &i in idxs.iter().take(6.min(len)) {
            let orig = store.params()[p].value[i];
            store.params_mut()[p].value[i] = orig + h;
            let (up, _) = loss_fn(&store);
            store.params_mut()[p].value[i] = orig - h;
            let (down, _) = loss_fn(&store);
            store.params_mut()[p].value[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let g = grads[p][i];
            if fd.abs() < 1e-7 && g.abs() < 1e-7 {
                continue;
            }
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-3, "param {} [{i}]: rel {rel}", store.params()[p].name);
            checked += 1;
        }
    }
    assert!(checked > 300, "too few informative checks: {checked}");
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 60.0, "gradient checks took {secs:.1}s");
    format!("{checked} full-model coordinates + per-op sweeps, rel err <= 1e-3, {secs:.1}s")
}

fn criterion_2_hungarian() -> String {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let n = rng.gen_range(2..=6);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect())
            .collect();
        let (assign, got) = hopper_core::tracker::assignment_min(&cost).expect("square matrix");
        let (_, want) = brute_force_assignment(&cost);
        assert!((got - want).abs() < 1e-9, "case {case}: {got} vs brute force {want}");
        let mut seen = vec![false; n];
        for &j in &assign {
            assert!(!seen[j], "case {case}: not a permutation");
            seen[j] = true;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 10.0, "took {secs:.1}s");
    format!("200 matrices (N in 2..6) match brute-force minima exactly, {secs:.1}s")
}

fn criterion_3_masking_invariants() -> String {
    let cfg = default_cfg();
    let store = init_params(&cfg, 123);
    let sim = SimConfig::default();
    let pipe = PipelineConfig::default();
    let enc = AttrEncoder::new(pipe.encoder_seed, cfg.in_dim);
    let mut runs = 0usize;
    let mut seed = 0u64;
    while runs < 1000 {
        let Ok(ep) = simulate(seed.wrapping_mul(7919), &sim) else {
            seed += 1;
            continue;
        };
        seed += 1;
        let s = prepare_sample(&ep, &pipe, &enc, cfg.n_tracks);
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = {
            let mut fwd = Forward::new(&mut tape, &store, &cfg, false, &mut rng);
            fwd.run(&s.source, &BTreeMap::new()).expect("forward")
        };
        // (a) masked attention weights are exactly zero
        for hop in &out.hops {
            let (lo, hi) = hop.window;
            for (i, &a) in hop.attention.iter().enumerate() {
                let f = i % cfg.t_frames;
                let allowed = if hop.window_fallback {
                    f == cfg.t_frames - 1
                } else {
                    f >= lo && f <= hi && s.source.visibility[i]
                };
                if !allowed {
                    assert_eq!(a, 0.0, "episode {} hop {}: nonzero masked weight", ep.seed, hop.hop);
                }
            }
        }
        // (b) strictly increasing attended frames, (c) bounded hop count
        assert!(!out.hops.is_empty() && out.hops.len() <= cfg.t_frames);
        for pair in out.hops.windows(2) {
            assert!(pair[1].attended_frame > pair[0].attended_frame);
        }
        // (d) minimum hops unless not possible, counted from the realized
        // first hop: at least min(5, frames remaining after hop 1)
        let t1 = out.hops[0].attended_frame;
        let feasible = cfg.t_frames - t1;
        assert!(
            out.hops.len() >= cfg.min_hops.min(feasible),
            "episode {}: {} hops, hop 1 at frame {t1}",
            ep.seed,
            out.hops.len()
        );
        runs += 1;
    }
    "1000 episodes: masked weights exactly 0, frames strictly increase, hops within [min, T]".into()
}

fn criterion_4_worked_example() -> String {
    let cfg = default_cfg();
    assert_eq!(cfg.t_frames, 13);
    // hop 1 attends the third frame; hop 2 may see the fourth through tenth
    assert_eq!(mask_window(&cfg, 2, 2), (3, 9));
    "13-frame window after hop 1 at frame index 2 is (3, 9)".into()
}

fn criterion_5_random_calibration() -> String {
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            source: SourceTokens { objects: Vec::new(), frames: Vec::new(), visibility: Vec::new() },
            label: rng.gen_range(0..36),
            hop1_token: None,
            hop2_token: None,
            last_visible_frame: 0,
            episode_seed: i as u64,
            tracking_pred: 0,
        })
        .collect();
    let scores = random_scores(36, n, 7);
    let rep = report_from_scores(&scores, &samples);
    assert!((rep.top1 - 1.0 / 36.0).abs() <= 0.005, "top1 {:.4}", rep.top1);
    assert!((rep.top5 - 5.0 / 36.0).abs() <= 0.010, "top5 {:.4}", rep.top5);
    assert!((rep.l1_mean - 35.0 / 9.0).abs() <= 0.05, "l1 {:.4}", rep.l1_mean);
    format!(
        "10k random predictions: top1 {:.4} (2.78% +- 0.5), top5 {:.4} (13.9% +- 1.0), L1 {:.4} (3.89 +- 0.05)",
        rep.top1, rep.top5, rep.l1_mean
    )
}

fn criterion_6_heuristics() -> String {
    let cfg = default_cfg();
    let sim = SimConfig::default();
    let pipe = PipelineConfig::default();
    let enc = AttrEncoder::new(pipe.encoder_seed, cfg.in_dim);
    let mut lvs_hits = 0usize;
    let mut carrier_cases = 0usize;
    let mut carrier_hits = 0usize;
    for seed in 0..1000u64 {
        let ep = simulate(seed.wrapping_mul(104_729), &sim).expect("simulation");
        let ts = build_track_set(&ep, &pipe, &enc, cfg.n_tracks);
        let vis = visibility_map(&ts);
        let snitch_at = last_visible_snitch(&ts, &vis).expect("snitch track");
        if snitch_at.1 == ep.last_visible_frame {
            lvs_hits += 1;
        }
        // first-carrier agreement is only defined when the snitch is covered
        // in the frame right after it was last seen
        if ep.chain.len() >= 2 && ep.chain[1].1 == ep.last_visible_frame + 1 {
            if let Ok((track, f)) = immediate_container(&ts, snitch_at) {
                carrier_cases += 1;
                let carrier_class = class_of(&ep.objects[ep.chain[1].0]);
                if ts.tracks[track][f].argmax_class() == carrier_class {
                    carrier_hits += 1;
                }
            }
        }
    }
    assert_eq!(lvs_hits, 1000, "last-visible-snitch heuristic missed {}", 1000 - lvs_hits);
    let rate = carrier_hits as f64 / carrier_cases.max(1) as f64;
    let alert = if rate < 0.95 { " ALERT: below 95%" } else { "" };
    assert!(carrier_cases >= 100, "too few containment episodes: {carrier_cases}");
    assert!(rate >= 0.95, "carrier agreement {rate:.3} below alert threshold");
    format!(
        "last-visible-snitch 1000/1000; immediate-container agreement {rate:.3} over {carrier_cases} episodes{alert}"
    )
}

fn criterion_10_determinism() -> String {
    let run = || -> String {
        let (train_eps, test_eps) = gen_balanced(4, 31);
        let cfg = default_cfg();
        let tc = TrainConfig {
            lr: 1e-3,
            stage1_epochs: 2,
            stage2_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        };
        let tr = prepare_all(&train_eps, &cfg);
        let te = prepare_all(&test_eps, &cfg);
        let mut store = init_params(&cfg, tc.seed);
        let mut log = String::new();
        train(&mut store, &tr, &te, &tc, &cfg, |stats, _| {
            log.push_str(&serde_json::to_string(stats).unwrap());
            log.push('\n');
        })
        .expect("training");
        let (rep, _) = evaluate(&store, &cfg, &te).expect("evaluation");
        log.push_str(&rep.render("model"));
        log
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "reports differ between identical runs");
    format!("two identical runs: {} report bytes, byte-identical", a.len())
}

// criteria 7 and 9 share one trained model; 8 shares its dataset

struct EndToEnd {
    report: EvalReport,
    tracking: EvalReport,
    last_frame: EvalReport,
    diagnostics: hopper_core::eval::HopDiagnostics,
    minutes: f64,
}

fn run_end_to_end() -> EndToEnd {
    let start = Instant::now();
    let cfg = default_cfg();
    let (train_eps, test_eps) = gen_balanced(230, 0);
    assert!(train_eps.len() >= 2000 && test_eps.len() >= 600);
    let tr = prepare_all(&train_eps, &cfg);
    let te = prepare_all(&test_eps, &cfg);
    let val: Vec<Sample> = te.iter().step_by(te.len() / 120).cloned().collect();

    let tc = TrainConfig {
        lr: 2e-3,
        stage1_epochs: 52,
        stage2_epochs: 2,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut store = init_params(&cfg, tc.seed);
    train(&mut store, &tr, &val, &tc, &cfg, |_, _| {}).expect("training");
    let (report, traces) = evaluate(&store, &cfg, &te).expect("evaluation");
    let diagnostics = hop_diagnostics(&traces, &te, &cfg);

    let tracking = report_from_scores(&tracking_scores(&te), &te);

    // the last-frame ablation only ever attends final-frame tokens; its
    // ceiling is low, so a shorter budget suffices
    let lf_cfg = MhtConfig {
        switches: hopper_core::mht::MhtSwitches {
            last_frame_only: true,
            ..hopper_core::mht::MhtSwitches::default()
        },
        ..default_cfg()
    };
    // hop-level supervision is meaningless when only final-frame tokens are
    // visible, so the baseline trains on the grid loss alone
    let lf_tc = TrainConfig {
        stage1_epochs: 10,
        stage2_epochs: 0,
        teacher_forcing: false,
        weights: hopper_core::training::LossWeights {
            w_hop1: 0.0,
            w_hop2: 0.0,
            w_frame: 0.0,
            w_debias: 0.0,
            ..hopper_core::training::LossWeights::default()
        },
        ..tc.clone()
    };
    let (last_frame, _) = train_and_eval(&tr, &val, &te, &lf_cfg, &lf_tc);

    EndToEnd {
        report,
        tracking,
        last_frame,
        diagnostics,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    }
}

fn criterion_7_end_to_end(e: &EndToEnd) -> String {
    assert!(e.report.top1 >= 0.60, "top1 {:.4} below 0.60", e.report.top1);
    assert!(
        e.report.top1 >= e.tracking.top1 + 0.10,
        "top1 {:.4} does not beat tracking {:.4} by 10 points",
        e.report.top1,
        e.tracking.top1
    );
    assert!(
        e.report.top1 >= e.last_frame.top1 + 0.10,
        "top1 {:.4} does not beat last-frame {:.4} by 10 points",
        e.report.top1,
        e.last_frame.top1
    );
    assert!(e.minutes <= 45.0, "end-to-end took {:.1} min", e.minutes);
    format!(
        "top1 {:.3} (tracking {:.3}, last-frame {:.3}), {:.1} min",
        e.report.top1, e.tracking.top1, e.last_frame.top1, e.minutes
    )
}

fn criterion_9_hop_diagnostics(e: &EndToEnd) -> String {
    let mut detail = String::new();
    for (i, &(gt, pred, j)) in e.diagnostics.bins.iter().enumerate() {
        detail.push_str(&format!("bin{} {:.2} ", i + 1, j));
        if gt == 0 && pred == 0 {
            continue;
        }
        assert!(j >= 0.80, "hop-count bin {} Jaccard {:.3} below 0.80", i + 1, j);
    }
    assert!(
        e.diagnostics.hop2_follows_hop1 >= 0.5,
        "hop 2 follows hop 1 + 1 only {:.3}",
        e.diagnostics.hop2_follows_hop1
    );
    format!(
        "Jaccard {}, hop2 on (hop1 frame)+1 for {:.3} of traces",
        detail.trim_end(),
        e.diagnostics.hop2_follows_hop1
    )
}

fn criterion_8_ablations() -> String {
    let cfg = default_cfg();
    let (train_eps, test_eps) = gen_balanced(40, 1);
    let tr = prepare_all(&train_eps, &cfg);
    let te = prepare_all(&test_eps, &cfg);

    // small-set recipe: the higher lr reaches the attention-sharpening
    // regime within the shortened budget
    let base_tc = TrainConfig {
        lr: 2e-3,
        stage1_epochs: 58,
        stage2_epochs: 2,
        ..TrainConfig::default()
    };
    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let run3 = |mht: &MhtConfig, tc: &TrainConfig| -> f64 {
        let tops: Vec<f64> = (0..3)
            .map(|s| {
                let tc = TrainConfig { seed: 100 + s, ..tc.clone() };
                train_and_eval(&tr, &[], &te, mht, &tc).0.top1
            })
            .collect();
        median(tops)
    };

    let full = run3(&cfg, &base_tc);

    // base: no auxiliary losses, no teacher forcing, no debias, fixed stride
    let base_cfg = MhtConfig {
        switches: hopper_core::mht::MhtSwitches {
            dynamic_stride: false,
            ..hopper_core::mht::MhtSwitches::default()
        },
        ..default_cfg()
    };
    let base_weights = hopper_core::training::LossWeights {
        w_hop1: 0.0,
        w_hop2: 0.0,
        w_frame: 0.0,
        w_debias: 0.0,
        ..hopper_core::training::LossWeights::default()
    };
    let base = run3(
        &base_cfg,
        &TrainConfig {
            teacher_forcing: false,
            weights: base_weights,
            stage2_epochs: 0,
            stage1_epochs: base_tc.stage1_epochs + base_tc.stage2_epochs,
            ..base_tc.clone()
        },
    );

    // no-debias: full configuration minus only the debias term
    let nd_weights =
        hopper_core::training::LossWeights { w_debias: 0.0, ..hopper_core::training::LossWeights::default() };
    let no_debias = run3(&cfg, &TrainConfig { weights: nd_weights, ..base_tc.clone() });

    assert!(full >= base, "full median {full:.4} below base median {base:.4}");
    assert!(
        no_debias <= full,
        "removing debias raised median top1: {no_debias:.4} vs {full:.4}"
    );
    format!("3-seed medians: full {full:.3} >= base {base:.3}; no-debias {no_debias:.3} <= full")
}

#[test]
fn acceptance_criteria() {
    fn run(failures: &mut Vec<String>, name: &str, body: &mut dyn FnMut() -> String) {
        match catch_unwind(AssertUnwindSafe(body)) {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".into());
                println!("FAIL {name}: {msg}");
                failures.push(format!("{name}: {msg}"));
            }
        }
    }
    let mut failures = Vec::new();

    run(&mut failures, "criterion 1 (autodiff)", &mut criterion_1_autodiff);
    run(&mut failures, "criterion 2 (assignment exactness)", &mut criterion_2_hungarian);
    run(&mut failures, "criterion 3 (masking/termination)", &mut criterion_3_masking_invariants);
    run(&mut failures, "criterion 4 (worked window example)", &mut criterion_4_worked_example);
    run(&mut failures, "criterion 5 (random calibration)", &mut criterion_5_random_calibration);
    run(&mut failures, "criterion 6 (heuristic agreement)", &mut criterion_6_heuristics);
    run(&mut failures, "criterion 10 (determinism)", &mut criterion_10_determinism);

    match catch_unwind(AssertUnwindSafe(run_end_to_end)) {
        Ok(e) => {
            run(&mut failures, "criterion 7 (end-to-end accuracy)", &mut || criterion_7_end_to_end(&e));
            run(&mut failures, "criterion 9 (hop diagnostics)", &mut || criterion_9_hop_diagnostics(&e));
        }
        Err(_) => {
            println!("FAIL criterion 7 (end-to-end accuracy): pipeline panicked");
            println!("FAIL criterion 9 (hop diagnostics): pipeline panicked");
            failures.push("criterion 7/9: end-to-end pipeline panicked".into());
        }
    }

    run(&mut failures, "criterion 8 (ablation direction)", &mut criterion_8_ablations);

    assert!(failures.is_empty(), "acceptance failures:\n{}", failures.join("\n"));
}
