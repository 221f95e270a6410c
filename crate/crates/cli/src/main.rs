//! Command-line driver: dataset generation, training, evaluation, trace
//! export, and diagnostics. Every command reads one TOML run configuration
//! and writes deterministic outputs into a per-run directory.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use config::RunConfig;
use hopper_core::eval::{
    evaluate, hop_diagnostics, random_scores, report_from_scores, tracking_scores,
};
use hopper_core::mht::{init_params, GRID_CLASSES};
use hopper_core::perception::{class_of, visibility_map, AttrEncoder};
use hopper_core::tensor::checkpoint;
use hopper_core::tracker::{
    immediate_container, last_visible_snitch, track_purity, tracking_baseline,
};
use hopper_core::training::{build_track_set, forward_eval, prepare_sample, train, Sample};
use hopper_core::worldsim::{
    balance_by_last_visible, lvs_histogram, simulate, split_pool, DatasetManifest, Episode,
    SplitTag, EPISODE_SCHEMA_VERSION,
};

#[derive(Parser)]
#[command(name = "hopper", about = "hidden-object localization workbench")]
struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true, default_value = "run.toml")]
    config: PathBuf,
    /// Root directory holding run outputs.
    #[arg(long, global = true, env = "HOPPER_RUNS", default_value = "runs")]
    runs_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate, balance, and split episodes; write manifests and hashes.
    GenData,
    /// Train the model on the generated train split.
    Train,
    /// Evaluate the trained model on the test split.
    Eval,
    /// Export the hop-by-hop reasoning trace for one test episode.
    Trace {
        /// Index into the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Hop-count agreement and the hop-vs-frame attendance matrix.
    DiagnoseHops,
    /// Track purity and heuristic-vs-ground-truth agreement rates.
    DiagnoseTracks,
    /// Random and association-only baseline reports on the test split.
    Baseline,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(&cli.config)?;
    let dir = cli.runs_root.join(&cfg.name);
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, &dir),
        Cmd::Train => cmd_train(&cfg, &dir),
        Cmd::Eval => cmd_eval(&cfg, &dir),
        Cmd::Trace { index } => cmd_trace(&cfg, &dir, index),
        Cmd::DiagnoseHops => cmd_diagnose_hops(&cfg, &dir),
        Cmd::DiagnoseTracks => cmd_diagnose_tracks(&cfg, &dir),
        Cmd::Baseline => cmd_baseline(&cfg, &dir),
    }
}

// ---- run-directory plumbing ----

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn episodes_path(dir: &Path, split: SplitTag) -> PathBuf {
    dir.join(match split {
        SplitTag::Train => "train.jsonl",
        SplitTag::Test => "test.jsonl",
    })
}

fn write_split(dir: &Path, split: SplitTag, episodes: &[Episode]) -> Result<String> {
    let mut text = String::new();
    for ep in episodes {
        text.push_str(&serde_json::to_string(ep)?);
        text.push('\n');
    }
    let path = episodes_path(dir, split);
    write_text(&path, &text)?;
    let manifest = DatasetManifest {
        schema_version: EPISODE_SCHEMA_VERSION,
        split,
        bin_counts: lvs_histogram(episodes),
        episode_seeds: episodes.iter().map(|e| e.seed).collect(),
    };
    let name = match split {
        SplitTag::Train => "train.manifest.json",
        SplitTag::Test => "test.manifest.json",
    };
    write_text(&dir.join(name), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(sha256_hex(text.as_bytes()))
}

fn load_split(dir: &Path, split: SplitTag) -> Result<Vec<Episode>> {
    let path = episodes_path(dir, split);
    let text = fs::read_to_string(&path).with_context(|| {
        format!("reading {} (run gen-data first?)", path.display())
    })?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))
        })
        .collect()
}

fn prepare_split(cfg: &RunConfig, dir: &Path, split: SplitTag) -> Result<Vec<Sample>> {
    let episodes = load_split(dir, split)?;
    let pipe = cfg.pipeline();
    let enc = AttrEncoder::new(cfg.tracking.encoder_seed, cfg.model.in_dim);
    Ok(episodes
        .iter()
        .map(|ep| prepare_sample(ep, &pipe, &enc, cfg.model.n_tracks))
        .collect())
}

fn load_checkpoint(dir: &Path) -> Result<hopper_core::tensor::ParamStore> {
    let path = dir.join("checkpoint.txt");
    checkpoint::load(&path)
        .with_context(|| format!("loading {} (run train first?)", path.display()))
}

// ---- commands ----

fn gen_data(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let sim = cfg.sim_config();
    let t = cfg.data.t_frames;
    let per_bin = cfg.data.per_bin;

    // fill every last-visible-frame bin; early bins are rare, so the seed
    // budget is generous. Seeds are spaced past the simulator's internal
    // retry range so episodes never collide.
    let mut bins: Vec<usize> = vec![0; t];
    let mut pool: Vec<Episode> = Vec::with_capacity(per_bin * t);
    let limit = (per_bin * t).saturating_mul(400);
    for i in 0..limit as u64 {
        if bins.iter().all(|&b| b >= per_bin) {
            break;
        }
        let seed = cfg.seed.wrapping_mul(0x10000000).wrapping_add(i * 1000);
        let ep = simulate(seed, &sim)?;
        if bins[ep.last_visible_frame] < per_bin {
            bins[ep.last_visible_frame] += 1;
            pool.push(ep);
        }
    }
    let balanced = balance_by_last_visible(&pool, per_bin)?;
    let (train_eps, test_eps) = split_pool(&balanced, cfg.data.train_ratio, cfg.seed);

    let h_train = write_split(dir, SplitTag::Train, &train_eps)?;
    let h_test = write_split(dir, SplitTag::Test, &test_eps)?;
    write_text(&dir.join("config.toml"), &toml::to_string_pretty(cfg)?)?;
    write_text(
        &dir.join("manifest.sha256"),
        &format!("train {h_train}\ntest {h_test}\n"),
    )?;
    println!(
        "wrote {} train / {} test episodes to {}",
        train_eps.len(),
        test_eps.len(),
        dir.display()
    );
    println!("train histogram: {:?}", lvs_histogram(&train_eps));
    println!("test histogram: {:?}", lvs_histogram(&test_eps));
    Ok(())
}

fn cmd_train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let samples = prepare_split(cfg, dir, SplitTag::Train)?;
    if samples.is_empty() {
        bail!("train split is empty");
    }
    let val: Vec<Sample> = if cfg.data.val_max == 0 {
        Vec::new()
    } else {
        let test = prepare_split(cfg, dir, SplitTag::Test)?;
        let stride = (test.len() / cfg.data.val_max.min(test.len()).max(1)).max(1);
        test.into_iter().step_by(stride).take(cfg.data.val_max).collect()
    };

    let mut store = init_params(&cfg.model, cfg.seed);
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path)
        .with_context(|| format!("creating {}", metrics_path.display()))?;
    let ckpt_path = dir.join("checkpoint.txt");
    let start = std::time::Instant::now();
    train(&mut store, &samples, &val, &cfg.train, &cfg.model, |stats, store| {
        writeln!(metrics, "{}", serde_json::to_string(stats).unwrap()).unwrap();
        checkpoint::save(store, &ckpt_path).unwrap();
        println!(
            "epoch {} stage {} loss {:.4} val_top1 {} ({}s)",
            stats.epoch,
            stats.stage,
            stats.mean.total,
            stats
                .val_top1
                .map_or("-".into(), |v| format!("{v:.3}")),
            start.elapsed().as_secs()
        );
    })?;
    println!("saved {}", ckpt_path.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let samples = prepare_split(cfg, dir, SplitTag::Test)?;
    let store = load_checkpoint(dir)?;
    let (report, _) = evaluate(&store, &cfg.model, &samples)?;
    let text = report.render("model");
    write_text(&dir.join("report.txt"), &text)?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(&report)?)?;
    print!("{text}");
    Ok(())
}

fn cmd_trace(cfg: &RunConfig, dir: &Path, index: usize) -> Result<()> {
    let samples = prepare_split(cfg, dir, SplitTag::Test)?;
    let Some(sample) = samples.get(index) else {
        bail!("test index {index} out of range ({} episodes)", samples.len());
    };
    let store = load_checkpoint(dir)?;
    let (pred, probs, hops) = forward_eval(&store, &cfg.model, sample)?;
    let trace = serde_json::json!({
        "index": index,
        "episode_seed": sample.episode_seed,
        "label": sample.label,
        "predicted": pred,
        "grid_probs": probs,
        "hops": hops,
    });
    let path = dir.join(format!("trace_{index}.json"));
    write_text(&path, &serde_json::to_string_pretty(&trace)?)?;
    println!("episode seed {}: label {} predicted {pred}", sample.episode_seed, sample.label);
    for h in &hops {
        println!(
            "hop {}: frames {}..{} -> token {} (frame {})",
            h.hop, h.window.0, h.window.1, h.attended_token, h.attended_frame
        );
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_diagnose_hops(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let samples = prepare_split(cfg, dir, SplitTag::Test)?;
    let store = load_checkpoint(dir)?;
    let (_, traces) = evaluate(&store, &cfg.model, &samples)?;
    let diag = hop_diagnostics(&traces, &samples, &cfg.model);
    let text = diag.render();
    write_text(&dir.join("hops.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_diagnose_tracks(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let episodes = load_split(dir, SplitTag::Test)?;
    let pipe = cfg.pipeline();
    let enc = AttrEncoder::new(cfg.tracking.encoder_seed, cfg.model.in_dim);
    let mut purity_sum = 0.0;
    let mut purity_n = 0usize;
    let mut lvs_hits = 0usize;
    let mut lvs_total = 0usize;
    let mut carrier_hits = 0usize;
    let mut carrier_total = 0usize;
    let mut baseline_hits = 0usize;
    for ep in &episodes {
        let ts = build_track_set(ep, &pipe, &enc, cfg.model.n_tracks);
        for p in track_purity(&ts) {
            purity_sum += p;
            purity_n += 1;
        }
        let vis = visibility_map(&ts);
        if let Ok((track, frame)) = last_visible_snitch(&ts, &vis) {
            lvs_total += 1;
            if frame == ep.last_visible_frame {
                lvs_hits += 1;
            }
            if ep.chain.len() >= 2 && ep.chain[1].1 == ep.last_visible_frame + 1 {
                if let Ok((ct, cf)) = immediate_container(&ts, (track, frame)) {
                    carrier_total += 1;
                    let truth = class_of(&ep.objects[ep.chain[1].0]);
                    if ts.tracks[ct][cf].argmax_class() == truth {
                        carrier_hits += 1;
                    }
                }
            }
        }
        if tracking_baseline(&ts) == ep.label {
            baseline_hits += 1;
        }
    }
    let rate = |num: usize, den: usize| {
        if den == 0 { f64::NAN } else { num as f64 / den as f64 }
    };
    let mut text = String::from("# track diagnostics\n");
    text += &format!("episodes {}\n", episodes.len());
    text += &format!("mean_purity {:.4}\n", purity_sum / purity_n.max(1) as f64);
    text += &format!("last_visible_agreement {:.4} ({lvs_hits}/{lvs_total})\n", rate(lvs_hits, lvs_total));
    text += &format!("carrier_agreement {:.4} ({carrier_hits}/{carrier_total})\n", rate(carrier_hits, carrier_total));
    text += &format!("tracking_baseline_top1 {:.4}\n", rate(baseline_hits, episodes.len()));
    write_text(&dir.join("tracks.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_baseline(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let samples = prepare_split(cfg, dir, SplitTag::Test)?;
    let random = report_from_scores(&random_scores(GRID_CLASSES, samples.len(), cfg.seed), &samples);
    let tracking = report_from_scores(&tracking_scores(&samples), &samples);
    let text = format!("{}{}", random.render("random"), tracking.render("tracking"));
    write_text(&dir.join("baselines.txt"), &text)?;
    print!("{text}");
    Ok(())
}
