//! Command-line surface: dataset generation, training, evaluation, the
//! ablation table, and attention inspection.
//!
//! Config files are flat `key = value` text; `#` starts a comment.
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DatasetSignature};
use crate::data::{
    generate_synthetic, load_dataset, save_dataset, Dataset, ModeSpec, SplitKind, SyntheticConfig,
};
use crate::decoder::ZeroMeanPolicy;
use crate::error::{FtnError, Result};
use crate::graph::GridId;
use crate::model::{
    forward_batch, Ablation, Capture, GlobalCandidateScope, Leaves, ModelArch, ModelConfig,
};
use crate::train::{
    evaluate, ha_baseline, prepare_with_norm, train_prepared, EvalReport, Prepared,
};

#[derive(Parser)]
#[command(name = "ftn", version, about = "Multimodal OD flow forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write a synthetic dataset directory.
    Generate {
        /// Flat key=value config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoint plus metrics history.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Ablation tag: full, od, g, l, or m.
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the full model, all four ablation variants and the
    /// historical-average baseline over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Also write every report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump global/local attention rows and top cross-modal neighbors
    /// for one spatial grid.
    InspectAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Grid as "p,q".
        #[arg(long)]
        node: String,
        #[arg(long, default_value = "test")]
        split: String,
        /// Which example of the split to inspect.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
}

// ── config file parsing ─────────────────────────────────────────────

fn parse_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text =
        fs::read_to_string(path).map_err(|e| FtnError::Config(format!("{}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            FtnError::Config(format!(
                "{} line {}: expected 'key = value'",
                path.display(),
                idx + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| FtnError::Config(format!("bad value '{value}' for {key}")))
}

pub fn synthetic_config_from_file(path: Option<&Path>) -> Result<SyntheticConfig> {
    let mut cfg = SyntheticConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    for (key, value) in parse_kv_file(path)? {
        match key.as_str() {
            "grid_p" => cfg.grid_p = parse_num(&key, &value)?,
            "grid_q" => cfg.grid_q = parse_num(&key, &value)?,
            "days" => cfg.days = parse_num(&key, &value)?,
            "steps_per_day" => cfg.steps_per_day = parse_num(&key, &value)?,
            "base_intensity" => cfg.base_intensity = parse_num(&key, &value)?,
            "peak_amplitude" => cfg.peak_amplitude = parse_num(&key, &value)?,
            "cross_modal_coupling" => cfg.cross_modal_coupling = parse_num(&key, &value)?,
            "noise_std" => cfg.noise_std = parse_num(&key, &value)?,
            "seed" => cfg.seed = parse_num(&key, &value)?,
            "modes" => {
                let mut modes = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    let (name, fraction) = part.split_once(':').ok_or_else(|| {
                        FtnError::Config(format!("mode spec '{part}' must be name:fraction"))
                    })?;
                    modes.push(ModeSpec {
                        name: name.trim().to_string(),
                        fraction: parse_num("mode fraction", fraction.trim())?,
                    });
                }
                cfg.modes = modes;
            }
            other => {
                return Err(FtnError::Config(format!("unknown generator key '{other}'")));
            }
        }
    }
    Ok(cfg)
}

pub fn model_config_from_file(path: Option<&Path>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    let Some(path) = path else { return Ok(cfg) };
    for (key, value) in parse_kv_file(path)? {
        match key.as_str() {
            "window" => cfg.window = parse_num(&key, &value)?,
            "d_c" => cfg.d_c = parse_num(&key, &value)?,
            "d_e" => cfg.d_e = parse_num(&key, &value)?,
            "leaky_slope" => cfg.leaky_slope = parse_num(&key, &value)?,
            "learning_rate" => cfg.learning_rate = parse_num(&key, &value)?,
            "weight_decay" => cfg.weight_decay = parse_num(&key, &value)?,
            "epochs" => cfg.epochs = parse_num(&key, &value)?,
            "batch_size" => cfg.batch_size = parse_num(&key, &value)?,
            "seed" => cfg.seed = parse_num(&key, &value)?,
            "ablation" => cfg.ablation = Ablation::parse(&value)?,
            "global_candidates" => cfg.global_candidates = GlobalCandidateScope::parse(&value)?,
            "max_candidates" => cfg.max_candidates = Some(parse_num(&key, &value)?),
            "train_frac" => cfg.train_frac = parse_num(&key, &value)?,
            "val_frac" => cfg.val_frac = parse_num(&key, &value)?,
            "test_frac" => cfg.test_frac = parse_num(&key, &value)?,
            "eta" => {
                cfg.eta = value
                    .split(',')
                    .map(|v| parse_num("eta", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "on_zero_mean" => {
                cfg.on_zero_mean = match value.as_str() {
                    "skip" => ZeroMeanPolicy::SkipWithWarning,
                    "error" => ZeroMeanPolicy::Error,
                    other => {
                        return Err(FtnError::Config(format!(
                            "on_zero_mean must be skip or error, got '{other}'"
                        )))
                    }
                };
            }
            other => {
                return Err(FtnError::Config(format!("unknown model key '{other}'")));
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

// ── command implementations ─────────────────────────────────────────

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(FtnError::Config(format!(
            "{what} directory {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset> {
    require_dir(path, "data")?;
    load_dataset(path)
}

fn signature_of(dataset: &Dataset) -> DatasetSignature {
    DatasetSignature {
        mode_names: dataset.modes.iter().map(|m| m.mode.name.clone()).collect(),
        node_counts: dataset.modes.iter().map(|m| m.node_count()).collect(),
    }
}

fn check_signature(sig: &DatasetSignature, dataset: &Dataset) -> Result<()> {
    let actual = signature_of(dataset);
    if actual.mode_names != sig.mode_names || actual.node_counts != sig.node_counts {
        return Err(FtnError::Config(format!(
            "checkpoint was trained on modes {:?} with node counts {:?}, dataset has {:?}/{:?}",
            sig.mode_names, sig.node_counts, actual.mode_names, actual.node_counts
        )));
    }
    Ok(())
}

fn cmd_generate(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = synthetic_config_from_file(config)?;
    let dataset = generate_synthetic(&cfg)?;
    save_dataset(&dataset, out)?;
    println!(
        "wrote {} modes x {} steps to {}",
        dataset.modes.len(),
        dataset.steps(),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    data: &Path,
    config: Option<&Path>,
    ablation: Option<&str>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let dataset = load_data(data)?;
    let mut cfg = model_config_from_file(config)?;
    if let Some(tag) = ablation {
        cfg.ablation = Ablation::parse(tag)?;
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let prepared = crate::train::prepare(&dataset, &cfg)?;
    let outcome = train_prepared(&dataset, &cfg, &prepared)?;

    fs::create_dir_all(out).map_err(|e| FtnError::io(out.display().to_string(), e))?;
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        norm: prepared.norm.clone(),
        signature: signature_of(&dataset),
        state: outcome.state,
    };
    save_checkpoint(&checkpoint, &out.join("checkpoint.ftn"))?;
    let metrics = json!({
        "history": outcome.history,
        "test_report": outcome.report,
    });
    let metrics_path = out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&metrics).unwrap())
        .map_err(|e| FtnError::io(metrics_path.display().to_string(), e))?;
    println!(
        "{} seed {}: test MAE {:.6}, RMSE {:.6} -> {}",
        cfg.ablation.label(),
        cfg.seed,
        outcome.report.overall_mae,
        outcome.report.overall_rmse,
        out.display()
    );
    Ok(())
}

fn rebuild(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<(ModelArch, Prepared)> {
    check_signature(&checkpoint.signature, dataset)?;
    let prepared = prepare_with_norm(dataset, &checkpoint.config, checkpoint.norm.clone())?;
    let arch = ModelArch::new(checkpoint.config.clone(), &dataset.modes, Some(&prepared.volumes))?;
    Ok((arch, prepared))
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: &str) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let split = SplitKind::parse(split)?;
    let (arch, prepared) = rebuild(&ck, &dataset)?;
    let report = evaluate(&arch, &ck.state, &prepared, split)?;
    println!("{}", serde_json::to_string_pretty(&report).unwrap());
    Ok(())
}

fn cmd_ablate(data: &Path, config: Option<&Path>, seeds: u64, out: Option<&Path>) -> Result<()> {
    let dataset = load_data(data)?;
    let base = model_config_from_file(config)?;
    let prepared = crate::train::prepare(&dataset, &base)?;

    let variants = [
        Ablation::Full,
        Ablation::NoOdSplit,
        Ablation::NoGlobal,
        Ablation::NoLocal,
        Ablation::NoMpi,
    ];
    let jobs: Vec<(Ablation, u64)> = variants
        .iter()
        .flat_map(|&v| (0..seeds).map(move |s| (v, s)))
        .collect();
    let reports: Vec<(Ablation, u64, EvalReport)> = jobs
        .par_iter()
        .map(|&(variant, seed)| {
            let cfg = ModelConfig {
                ablation: variant,
                seed,
                ..base.clone()
            };
            train_prepared(&dataset, &cfg, &prepared).map(|o| (variant, seed, o.report))
        })
        .collect::<Result<_>>()?;
    let ha = ha_baseline(&dataset, &base)?;

    // table: one row per variant, one column per seed, plus the mean
    let mut header = format!("{:<20}", "variant");
    for s in 0..seeds {
        header.push_str(&format!("{:>10}", format!("seed{s}")));
    }
    header.push_str(&format!("{:>10}", "mean"));
    println!("test MAE");
    println!("{header}");
    let mut means = Vec::new();
    for variant in variants {
        let mut row = format!("{:<20}", variant.label());
        let mut acc = 0.0;
        for seed in 0..seeds {
            let report = &reports
                .iter()
                .find(|(v, s, _)| *v == variant && *s == seed)
                .expect("every job ran")
                .2;
            row.push_str(&format!("{:>10.4}", report.overall_mae));
            acc += report.overall_mae;
        }
        let mean = acc / seeds as f64;
        means.push((variant, mean));
        row.push_str(&format!("{:>10.4}", mean));
        println!("{row}");
    }
    println!("{:<20}{:>10.4}  (seed-independent)", "HA", ha.overall_mae);

    if let Some(out) = out {
        let payload = json!({
            "seeds": seeds,
            "reports": reports
                .iter()
                .map(|(v, s, r)| json!({"variant": v.tag(), "seed": s, "report": r}))
                .collect::<Vec<_>>(),
            "ha": ha,
            "means": means
                .iter()
                .map(|(v, m)| json!({"variant": v.tag(), "mean_mae": m}))
                .collect::<Vec<_>>(),
        });
        fs::write(out, serde_json::to_string_pretty(&payload).unwrap())
            .map_err(|e| FtnError::io(out.display().to_string(), e))?;
    }
    Ok(())
}

fn parse_grid(node: &str) -> Result<GridId> {
    let (p, q) = node
        .split_once(',')
        .ok_or_else(|| FtnError::Config(format!("node '{node}' must be 'p,q'")))?;
    Ok(GridId {
        p: parse_num("node p", p.trim())?,
        q: parse_num("node q", q.trim())?,
    })
}

fn cmd_inspect(
    checkpoint: &Path,
    data: &Path,
    node: &str,
    split: &str,
    index: usize,
) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let dataset = load_data(data)?;
    let grid = parse_grid(node)?;
    let split = SplitKind::parse(split)?;
    let (arch, prepared) = rebuild(&ck, &dataset)?;

    let targets: Vec<usize> = prepared.split.targets(split).collect();
    let target = *targets.get(index).ok_or_else(|| {
        FtnError::Config(format!(
            "index {index} outside the {} examples of the split",
            targets.len()
        ))
    })?;
    let members = arch.unit_index.members(grid).to_vec();
    if members.is_empty() {
        return Err(FtnError::Config(format!("no mode serves grid {grid}")));
    }

    let leaves = Leaves::from_state(&ck.state, false);
    let tensors = crate::model::TensorCache::new(&prepared.cache);
    let out = forward_batch(
        &arch,
        &leaves,
        &tensors,
        &[target],
        Capture {
            attention: true,
            embeddings: false,
        },
    )?;
    let dump = out.attention.expect("attention requested");

    let mut global = Vec::new();
    for &(m, node_idx) in &members {
        let describe_row = |att: &ndarray::Array2<f64>| {
            let mut entries: Vec<serde_json::Value> = arch.candidates[m]
                .entries
                .iter()
                .enumerate()
                .filter(|(j, _)| att[(node_idx, *j)] != 0.0)
                .map(|(j, &(cand_mode, cand_node))| {
                    json!({
                        "mode": arch.mode_names[cand_mode],
                        "grid": dataset.modes[cand_mode].nodes[cand_node].to_string(),
                        "weight": att[(node_idx, j)],
                    })
                })
                .collect();
            entries.sort_by(|a, b| {
                b["weight"]
                    .as_f64()
                    .unwrap()
                    .partial_cmp(&a["weight"].as_f64().unwrap())
                    .unwrap()
            });
            entries
        };
        let origin_row = if dump.global_origin.is_empty() {
            Vec::new()
        } else {
            describe_row(&dump.global_origin[m])
        };
        let dest_row = if dump.global_dest.is_empty() {
            Vec::new()
        } else {
            describe_row(&dump.global_dest[m])
        };
        global.push(json!({
            "mode": arch.mode_names[m],
            "origin_row_sum": origin_row.iter().map(|e| e["weight"].as_f64().unwrap()).sum::<f64>(),
            "dest_row_sum": dest_row.iter().map(|e| e["weight"].as_f64().unwrap()).sum::<f64>(),
            "top_cross_modal_neighbors": origin_row.iter().take(5).cloned().collect::<Vec<_>>(),
            "origin_row": origin_row,
            "dest_row": dest_row,
        }));
    }

    let local = dump
        .local
        .iter()
        .find(|(g, _, _, _)| *g == grid)
        .map(|(_, unit_members, att_o, att_d)| {
            let names: Vec<&str> = unit_members
                .iter()
                .map(|&(m, _)| arch.mode_names[m].as_str())
                .collect();
            json!({
                "modes": names,
                "origin_attention": att_o.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
                "dest_attention": att_d.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            })
        });

    let payload = json!({
        "grid": grid.to_string(),
        "target_step": target,
        "modes_at_grid": members
            .iter()
            .map(|&(m, _)| arch.mode_names[m].clone())
            .collect::<Vec<_>>(),
        "global": global,
        "local": local,
    });
    println!("{}", serde_json::to_string_pretty(&payload).unwrap());
    Ok(())
}

/// Executes a parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { config, out } => cmd_generate(config.as_deref(), &out),
        Command::Train {
            data,
            config,
            ablation,
            seed,
            out,
        } => cmd_train(&data, config.as_deref(), ablation.as_deref(), seed, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
        } => cmd_eval(&checkpoint, &data, &split),
        Command::Ablate {
            data,
            config,
            seeds,
            out,
        } => cmd_ablate(&data, config.as_deref(), seeds, out.as_deref()),
        Command::InspectAttention {
            checkpoint,
            data,
            node,
            split,
            index,
        } => cmd_inspect(&checkpoint, &data, &node, &split, index),
    }
}

/// Exit code for an error: 2 for configuration/usage problems, 1 for
/// runtime failures.
pub fn exit_code(err: &FtnError) -> i32 {
    match err {
        FtnError::Config(_) => 2,
        _ => 1,
    }
}
