//! The six pipeline commands. Each is a thin wrapper over a library
//! operation: it resolves paths, loads inputs, invokes the operation, and
//! writes artifacts. Every artifact embeds the config fingerprint and seed;
//! nothing embeds wall-clock time, so reruns are byte-identical.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use mapbert_core::error::{Error, Result};
use mapbert_core::eval::{
    ablation_run, restoration_accuracy, run_protocol, trial_plan, AblationBudget, CellOutcome,
    Conditioning, EvalReport, SsrProtocol,
};
use mapbert_core::map::{
    apply_mask, object_patches, patch_grid, read_dataset, render_map, render_partial, render_row,
    write_dataset, CategoryPalette, MaskPlan, SemanticMap,
};
use mapbert_core::maskformer::{
    accuracy_trace_jsonl, loss_trace_jsonl, train_maskformer, Completer, Maskformer,
};
use mapbert_core::nn::Checkpoint;
use mapbert_core::quantizers::{train_bitvae, train_vq, BitVae, MapTokenizer, VqVae};
use mapbert_core::rng::Rng;
use mapbert_core::scenegen::generate_dataset;

use crate::config::ExperimentConfig;

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.paths.checkpoints).join(name)
}

fn report_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.paths.reports).join(name)
}

/// Generate the synthetic dataset and its metadata sidecar.
pub fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.scene_spec();
    let maps = generate_dataset(&spec, cfg.scene.count, cfg.scene.seed)?;
    let dataset = PathBuf::from(&cfg.paths.dataset);
    ensure_parent(&dataset)?;
    write_dataset(&maps, &spec.palette, spec.patch_size, &dataset)?;

    let meta = serde_json::json!({
        "fingerprint": cfg.fingerprint(),
        "seed": cfg.scene.seed,
        "count": maps.len(),
        "height": spec.height,
        "width": spec.width,
        "channels": spec.palette.len(),
        "patch": spec.patch_size,
    });
    std::fs::write(dataset.with_extension("meta.json"), meta.to_string())?;
    println!(
        "gen-data: wrote {} maps ({}x{}x{}) to {}",
        maps.len(),
        spec.height,
        spec.width,
        spec.palette.len(),
        dataset.display()
    );
    Ok(())
}

fn load_maps(cfg: &ExperimentConfig) -> Result<(Vec<SemanticMap>, CategoryPalette, usize)> {
    read_dataset(Path::new(&cfg.paths.dataset))
}

/// Train the configured tokenizer and write its checkpoint and loss trace.
pub fn cmd_train_vae(cfg: &ExperimentConfig) -> Result<()> {
    let (maps, _, _) = load_maps(cfg)?;
    let fp = cfg.fingerprint();
    let tcfg = cfg.vae_train_config();
    ensure_dir(Path::new(&cfg.paths.checkpoints))?;
    ensure_dir(Path::new(&cfg.paths.reports))?;

    let (ckpt_name, trace) = match cfg.train.quantizer.as_str() {
        "vqvae" => {
            let (model, trace) = train_vq(&maps, &cfg.vq_config(), &tcfg)?;
            model
                .to_checkpoint(tcfg.seed, &fp)
                .save(&checkpoint_path(cfg, "vqvae.ckpt"))?;
            ("vqvae.ckpt", trace)
        }
        _ => {
            let (model, trace) = train_bitvae(&maps, &cfg.bitvae_config(), &tcfg)?;
            model
                .to_checkpoint(tcfg.seed, &fp)
                .save(&checkpoint_path(cfg, "bitvae.ckpt"))?;
            ("bitvae.ckpt", trace)
        }
    };

    let header = serde_json::json!({
        "stage": "tokenizer",
        "quantizer": cfg.train.quantizer,
        "fingerprint": fp,
        "seed": tcfg.seed,
    });
    std::fs::write(
        report_path(cfg, "vae_trace.jsonl"),
        loss_trace_jsonl(&trace, &header),
    )?;
    let last = trace.epochs.last().expect("at least one epoch");
    println!(
        "train-vae: {} epochs, final train loss {:.4}, val hard IoU {:.3}, saved {}",
        trace.epochs.len(),
        last.train_total,
        last.val_hard_iou,
        ckpt_name
    );
    Ok(())
}

/// Load whichever tokenizer the config selects.
pub fn load_tokenizer(cfg: &ExperimentConfig) -> Result<Box<dyn MapTokenizer>> {
    match cfg.train.quantizer.as_str() {
        "vqvae" => {
            let ckpt = Checkpoint::load(&checkpoint_path(cfg, "vqvae.ckpt"))?;
            Ok(Box::new(VqVae::from_checkpoint(&ckpt)?))
        }
        _ => {
            let ckpt = Checkpoint::load(&checkpoint_path(cfg, "bitvae.ckpt"))?;
            Ok(Box::new(BitVae::from_checkpoint(&ckpt)?))
        }
    }
}

fn load_maskformer(cfg: &ExperimentConfig) -> Result<Maskformer> {
    let ckpt = Checkpoint::load(&checkpoint_path(cfg, "maskformer.ckpt"))?;
    Maskformer::from_checkpoint(&ckpt)
}

/// Train the masked transformer over the frozen tokenizer.
pub fn cmd_train_mt(cfg: &ExperimentConfig) -> Result<()> {
    let (maps, _, _) = load_maps(cfg)?;
    let tokenizer = load_tokenizer(cfg)?;
    let fp = cfg.fingerprint();
    let tcfg = cfg.mt_train_config();
    let mf_cfg = cfg.maskformer_config(tokenizer.bits());
    ensure_dir(Path::new(&cfg.paths.reports))?;

    let (model, trace) = train_maskformer(&maps, tokenizer.as_ref(), &mf_cfg, &tcfg)?;
    model
        .to_checkpoint(tcfg.seed, &fp)
        .save(&checkpoint_path(cfg, "maskformer.ckpt"))?;

    let header = serde_json::json!({
        "stage": "maskformer",
        "quantizer": cfg.train.quantizer,
        "fingerprint": fp,
        "seed": tcfg.seed,
    });
    std::fs::write(
        report_path(cfg, "mt_trace.jsonl"),
        accuracy_trace_jsonl(&trace, &header),
    )?;
    let last = trace.epochs.last().expect("at least one epoch");
    println!(
        "train-mt: {} epochs, final loss {:.4}, val restoration {:.2}%, saved maskformer.ckpt",
        trace.epochs.len(),
        last.train_loss,
        last.val_restoration
    );
    Ok(())
}

pub struct GenerateArgs {
    pub input: Option<PathBuf>,
    pub index: usize,
    pub target: Option<String>,
    pub mask_spec: String,
    pub output: PathBuf,
}

fn parse_mask_spec(
    spec: &str,
    map: &SemanticMap,
    palette: &CategoryPalette,
    patch: usize,
    seed: u64,
) -> Result<MaskPlan> {
    let (rows, cols) = patch_grid(map.height(), map.width(), patch)?;
    let total = rows * cols;
    let mut masked: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut target = None;
    let mut fraction: Option<f64> = None;

    for part in spec.split(',') {
        let part = part.trim();
        if part == "none" || part.is_empty() {
            continue;
        }
        if let Some(frac) = part.strip_prefix("random:") {
            let f: f64 = frac
                .parse()
                .map_err(|_| Error::invalid(format!("bad random fraction {frac:?}")))?;
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::invalid(format!("random fraction {f} outside [0, 1]")));
            }
            fraction = Some(f);
        } else if let Some(name) = part.strip_prefix("object:") {
            let cat = palette
                .by_name(name)
                .ok_or_else(|| Error::invalid(format!("unknown category {name:?}")))?;
            masked.extend(object_patches(map, cat.id, patch)?);
            target = Some(cat.id);
        } else if let Some(list) = part.strip_prefix("patches:") {
            for coord in list.split(';') {
                let (r, c) = coord
                    .split_once('.')
                    .ok_or_else(|| Error::invalid(format!("bad patch coord {coord:?}")))?;
                let r: usize = r
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad patch row {r:?}")))?;
                let c: usize = c
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad patch col {c:?}")))?;
                masked.insert((r, c));
            }
        } else {
            return Err(Error::invalid(format!(
                "mask spec part {part:?}; expected none, random:<f>, object:<name>, or patches:r.c;..."
            )));
        }
    }

    if let Some(f) = fraction {
        let want = ((f * total as f64).ceil() as usize).clamp(masked.len().min(1), total);
        let pool: Vec<(usize, usize)> = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .filter(|p| !masked.contains(p))
            .collect();
        let extra = want.saturating_sub(masked.len()).min(pool.len());
        let mut rng = Rng::derive(seed, 0x6E5);
        for p in rng.choose_distinct(&pool, extra) {
            masked.insert(p);
        }
    }
    MaskPlan::new(patch, rows, cols, masked, target)
}

/// Mask one map, complete it, and write the completed map plus a rendered
/// ground-truth | masked | prediction panel.
pub fn cmd_generate(cfg: &ExperimentConfig, args: &GenerateArgs) -> Result<()> {
    let dataset_path = args
        .input
        .clone()
        .unwrap_or_else(|| PathBuf::from(&cfg.paths.dataset));
    let (maps, palette, patch) = read_dataset(&dataset_path)?;
    let map = maps.get(args.index).ok_or_else(|| {
        Error::invalid(format!(
            "map index {} out of range [0, {})",
            args.index,
            maps.len()
        ))
    })?;

    let tokenizer = load_tokenizer(cfg)?;
    let mut model = load_maskformer(cfg)?;
    model.set_decode_mode(cfg.maskformer_config(tokenizer.bits()).decode);
    let mut completer = Completer::new(tokenizer.as_ref(), &model);
    completer.theta_obs = cfg.eval.theta_obs;

    let target_id = match &args.target {
        Some(name) => Some(
            palette
                .by_name(name)
                .ok_or_else(|| Error::invalid(format!("unknown target category {name:?}")))?
                .id,
        ),
        None => None,
    };
    let plan = parse_mask_spec(&args.mask_spec, map, &palette, patch, cfg.eval.seed)?;
    let pm = apply_mask(map, &plan)?;
    let predicted = completer.generate(&pm, target_id)?;

    ensure_dir(&args.output)?;
    let out_map = args.output.join("generated.bin");
    write_dataset(&[predicted.clone()], &palette, patch, &out_map)?;

    let fp = cfg.fingerprint();
    let comments = vec![format!("fingerprint={fp} seed={}", cfg.eval.seed)];
    let panel = render_row(&[
        render_map(map, &palette, 4)?,
        render_partial(&pm, &palette, 4)?,
        render_map(&predicted, &palette, 4)?,
    ])?;
    std::fs::write(args.output.join("panel.ppm"), panel.to_ppm(&comments))?;

    let meta = serde_json::json!({
        "fingerprint": fp,
        "seed": cfg.eval.seed,
        "input": dataset_path.display().to_string(),
        "index": args.index,
        "target": args.target,
        "mask_spec": args.mask_spec,
        "masked_patches": plan.len(),
    });
    std::fs::write(args.output.join("generated.meta.json"), meta.to_string())?;
    println!(
        "generate: masked {} patches, wrote {} and panel.ppm",
        plan.len(),
        out_map.display()
    );
    Ok(())
}

/// Evaluate the trained pair on freshly generated held-out maps.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let mut spec = cfg.scene_spec();
    spec.seed = cfg.eval.seed;
    let eval_maps = generate_dataset(&spec, cfg.eval.maps, cfg.eval.seed)?;

    let tokenizer = load_tokenizer(cfg)?;
    let mut model = load_maskformer(cfg)?;
    model.set_decode_mode(cfg.maskformer_config(tokenizer.bits()).decode);
    let mut completer = Completer::new(tokenizer.as_ref(), &model);
    completer.theta_obs = cfg.eval.theta_obs;

    let protocol = SsrProtocol {
        mask_fraction: cfg.eval.mask_ratio,
        min_overlap: cfg.eval.min_overlap,
        trials: cfg.eval.trials,
        seed: cfg.eval.seed,
        conditioning: Conditioning::CorrectTarget,
    };
    let outcome = run_protocol(&completer, &eval_maps, &protocol)?;
    let restoration =
        restoration_accuracy(&completer, &eval_maps, cfg.eval.mask_ratio, cfg.eval.seed)?;
    let fp = cfg.fingerprint();
    let report =
        EvalReport::from_outcome(&outcome, restoration, cfg.eval.min_overlap, &fp, cfg.eval.seed)?;

    ensure_dir(Path::new(&cfg.paths.reports))?;
    std::fs::write(
        report_path(cfg, "eval_report.jsonl"),
        report.to_jsonl(&outcome.records),
    )?;
    let label = format!("{}-{}", cfg.train.quantizer, "eval");
    let table = mapbert_core::eval::render_table(
        &format!("evaluation over {} trials", outcome.trials_run),
        &[(label, report.clone())],
    );
    std::fs::write(report_path(cfg, "eval_report.txt"), &table)?;

    // Fig-style panels for the first few trials.
    let palette = cfg.palette();
    for trial in 0..4.min(eval_maps.len()) {
        let map = &eval_maps[trial % eval_maps.len()];
        if let Some((category, plan)) =
            trial_plan(map, tokenizer.patch_size(), &protocol, trial)?
        {
            let pm = apply_mask(map, &plan)?;
            let pred = completer.generate(&pm, Some(category))?;
            let panel = render_row(&[
                render_map(map, &palette, 4)?,
                render_partial(&pm, &palette, 4)?,
                render_map(&pred, &palette, 4)?,
            ])?;
            let comments = vec![format!("fingerprint={fp} trial={trial}")];
            std::fs::write(
                report_path(cfg, &format!("panel_{trial}.ppm")),
                panel.to_ppm(&comments),
            )?;
        }
    }

    print!("{table}");
    println!(
        "eval: sSR {:.2}% over {} trials ({} skipped), restoration {:.2}%",
        report.ssr, report.trials_run, report.skipped, report.restoration
    );
    Ok(())
}

fn worker_threads() -> usize {
    if let Ok(v) = std::env::var("MAPBERT_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            return n.max(1);
        }
    }
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Run the configured ablation grid and write the report table.
pub fn cmd_ablate(cfg: &ExperimentConfig) -> Result<()> {
    let spec = cfg.scene_spec();
    let train_maps = generate_dataset(&spec, cfg.ablate.train_maps, cfg.scene.seed)?;
    let mut eval_spec = spec.clone();
    eval_spec.seed = cfg.eval.seed;
    let eval_maps = generate_dataset(&eval_spec, cfg.ablate.eval_maps, cfg.eval.seed)?;

    let budget = AblationBudget {
        vae_epochs: cfg.ablate.epochs_vae,
        mt_epochs: cfg.ablate.epochs_mt,
        batch: cfg.train.batch,
        lr: cfg.train.lr,
        seed: cfg.train.seed,
        val_fraction: cfg.train.val_fraction,
        trials: cfg.ablate.trials,
        min_overlap: cfg.eval.min_overlap,
    };
    let cells = cfg.ablation_cells();
    let threads = worker_threads();
    let outcomes = ablation_run(
        &cells,
        &train_maps,
        &eval_maps,
        &cfg.bitvae_config(),
        &cfg.vq_config(),
        &cfg.maskformer_config(cfg.bitvae.bits),
        &budget,
        threads,
    );

    ensure_dir(Path::new(&cfg.paths.reports))?;
    let mut jsonl = String::new();
    jsonl.push_str(
        &serde_json::json!({
            "kind": "header",
            "fingerprint": cfg.fingerprint(),
            "seed": cfg.train.seed,
            "cells": cells.len(),
            "threads": threads,
        })
        .to_string(),
    );
    jsonl.push('\n');
    let mut table_rows = Vec::new();
    let mut failures = Vec::new();
    for outcome in &outcomes {
        jsonl.push_str(&serde_json::to_string(outcome).expect("serializable outcome"));
        jsonl.push('\n');
        match outcome {
            CellOutcome::Done { label, report } => table_rows.push((label.clone(), report.clone())),
            CellOutcome::Failed { label, error } => failures.push((label.clone(), error.clone())),
        }
    }
    std::fs::write(report_path(cfg, "ablation.jsonl"), &jsonl)?;
    let mut table = mapbert_core::eval::render_table("ablation grid", &table_rows);
    for (label, error) in &failures {
        table.push_str(&format!("{label:<32} FAILED: {error}\n"));
    }
    std::fs::write(report_path(cfg, "ablation.txt"), &table)?;
    print!("{table}");

    if table_rows.is_empty() {
        return Err(Error::invalid("every ablation cell failed"));
    }
    Ok(())
}
