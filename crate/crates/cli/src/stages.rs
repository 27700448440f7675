//! Pipeline stages. Each reads its inputs from the run directory, writes its
//! artifacts atomically and returns what the manifest should record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use gdpo_core::flow::{
    backbone_checksum, pretrain, read_checkpoint, write_checkpoint, FlowModel, FlowSampler, Normalizer,
    CHECKPOINT_VERSION,
};
use gdpo_core::gdpo::{build_groups, category_scores, draw_items, mean_margin, read_groups, train, write_groups};
use gdpo_core::io::{read_dataset, training_records, write_dataset, ClipShape, DATASET_VERSION};
use gdpo_core::physics::{gen_pool, random_condition, score, Provenance};
use gdpo_core::pipeline::{
    build_histogram, category_difficulty, draw_training_set, filter_pool, sample_budget, CategoryHistograms,
};
use gdpo_core::rng::{child_seed, derive_seed, seeded, stream};
use gdpo_core::{Condition, DpoHyper, PoolRecord, Trajectory, WorldConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::exit::{UsageError, VerificationFailed};
use crate::manifest::{artifact, FormatVersions, RunManifest, MANIFEST_VERSION};
use crate::suites;

/// File layout of a run directory.
#[derive(Debug, Clone)]
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn file(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }
    pub fn pool(&self) -> PathBuf {
        self.file("pool.txt")
    }
    pub fn filtered(&self) -> PathBuf {
        self.file("filtered.txt")
    }
    pub fn richness(&self) -> PathBuf {
        self.file("richness.csv")
    }
    pub fn pretrained(&self) -> PathBuf {
        self.file("pretrained.ckpt")
    }
    pub fn pretrain_loss(&self) -> PathBuf {
        self.file("pretrain_loss.csv")
    }
    pub fn pretrain_scores(&self) -> PathBuf {
        self.file("pretrain_scores.csv")
    }
    pub fn training(&self) -> PathBuf {
        self.file("training.txt")
    }
    pub fn sampling_report(&self) -> PathBuf {
        self.file("sampling_report.csv")
    }
    pub fn groups(&self) -> PathBuf {
        self.file("groups.txt")
    }
    pub fn dpo(&self) -> PathBuf {
        self.file("dpo.ckpt")
    }
    pub fn metrics(&self) -> PathBuf {
        self.file("metrics.jsonl")
    }
    pub fn eval(&self) -> PathBuf {
        self.file("eval.csv")
    }
    pub fn verify(&self) -> PathBuf {
        self.file("verify.txt")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.file("report")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        if command == "report" {
            self.report_dir().join("manifest.json")
        } else {
            self.file("manifests").join(format!("{command}.json"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    GenPool,
    Filter,
    Pretrain,
    Sample,
    GenGroups,
    DpoTrain,
    /// Evaluates the given checkpoint, `dpo.ckpt` by default.
    Eval(Option<PathBuf>),
    Verify,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 9] = [
        Stage::GenPool,
        Stage::Filter,
        Stage::Pretrain,
        Stage::Sample,
        Stage::GenGroups,
        Stage::DpoTrain,
        Stage::Eval(None),
        Stage::Verify,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::GenPool => "gen-pool",
            Stage::Filter => "filter",
            Stage::Pretrain => "pretrain",
            Stage::Sample => "sample",
            Stage::GenGroups => "gen-groups",
            Stage::DpoTrain => "dpo-train",
            Stage::Eval(_) => "eval",
            Stage::Verify => "verify",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Default)]
pub struct StageOutput {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub summary: serde_json::Value,
    /// Human-readable result for standard output.
    pub table: String,
    /// Set when the stage completed but a check failed; the manifest is still
    /// written before the failure is reported.
    pub failure: Option<VerificationFailed>,
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(UsageError(format!("missing input {}; run the producing stage first", path.display())).into())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    gdpo_core::io::atomic_write(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn pairs(records: &[PoolRecord]) -> Vec<(Condition, Trajectory)> {
    records
        .iter()
        .map(|r| (r.condition.clone(), r.trajectory.clone()))
        .collect()
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| x.to_string())
}

/// Runs one stage, writes its manifest and prints its table.
pub fn execute(stage: &Stage, cfg: &RunConfig) -> Result<StageOutput> {
    let dir = RunDir(cfg.out.clone());
    std::fs::create_dir_all(&dir.0).with_context(|| format!("creating {}", dir.0.display()))?;
    let started = Instant::now();
    let out = run_stage(stage, cfg, &dir).with_context(|| format!("stage {}", stage.name()))?;
    let hash = |ps: &[PathBuf]| ps.iter().map(|p| artifact(&dir.0, p)).collect::<Result<Vec<_>>>();
    let manifest = RunManifest {
        command: stage.name().to_string(),
        seed: cfg.seed,
        formats: FormatVersions {
            dataset: DATASET_VERSION,
            checkpoint: CHECKPOINT_VERSION,
            manifest: MANIFEST_VERSION,
        },
        config: cfg.to_text(),
        inputs: hash(&out.inputs)?,
        outputs: hash(&out.outputs)?,
        summary: out.summary.clone(),
        elapsed_seconds: started.elapsed().as_secs_f64(),
    };
    manifest.write(&dir.manifest(stage.name()))?;
    if !out.table.is_empty() {
        print!("{}", out.table);
    }
    if let Some(f) = &out.failure {
        return Err(f.clone().into());
    }
    Ok(out)
}

/// Runs every stage in order, stopping at the first error.
pub fn run_all(cfg: &RunConfig) -> Result<()> {
    for stage in Stage::PIPELINE.iter() {
        println!("== {}", stage.name());
        execute(stage, cfg)?;
    }
    Ok(())
}

pub fn run_stage(stage: &Stage, cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    cfg.validate()?;
    match stage {
        Stage::GenPool => stage_gen_pool(cfg, dir),
        Stage::Filter => stage_filter(cfg, dir),
        Stage::Pretrain => stage_pretrain(cfg, dir),
        Stage::Sample => stage_sample(cfg, dir),
        Stage::GenGroups => stage_gen_groups(cfg, dir),
        Stage::DpoTrain => stage_dpo_train(cfg, dir),
        Stage::Eval(ckpt) => stage_eval(cfg, dir, ckpt.clone().unwrap_or_else(|| dir.dpo())),
        Stage::Verify => stage_verify(cfg, dir),
        Stage::Report => stage_report(dir),
    }
}

fn stage_gen_pool(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    let world = &cfg.world;
    let pool = gen_pool(world, cfg.pool.size, cfg.pool.clean_fraction, &mut stream(cfg.seed, "pool"))?;
    write_dataset(&dir.pool(), &ClipShape::of_world(world), &pool)?;
    let per_cat = build_histogram(&pool, world.num_categories())?;
    let clean = pool.iter().filter(|r| r.provenance == Provenance::Clean).count();
    let table = format!("pool: {} clips ({} clean), per category {:?}\n", pool.len(), clean, per_cat);
    Ok(StageOutput {
        outputs: vec![dir.pool()],
        summary: json!({ "records": pool.len(), "clean": clean, "per_category": per_cat }),
        table,
        ..Default::default()
    })
}

fn stage_filter(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.pool())?;
    let world = &cfg.world;
    let pool = read_dataset(&dir.pool())?;
    let outcome = filter_pool(&pool, cfg.sampling.richness_threshold, world)?;
    if let Some(w) = &outcome.warning {
        eprintln!("warning: {w}");
    }
    write_dataset(&dir.filtered(), &ClipShape::of_world(world), &outcome.kept)?;
    let mut csv = String::from("index,category,provenance,corruption_magnitude,physics_richness,physics_label\n");
    for (i, r) in outcome.scored.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{i},{},{},{},{},{}",
            r.record.condition.category,
            r.record.provenance.name(),
            r.record.corruption_magnitude,
            r.physics_richness,
            r.physics_label
        );
    }
    write_text(&dir.richness(), &csv)?;
    let per_cat = build_histogram(&outcome.kept, world.num_categories())?;
    let clean_kept = outcome.kept.iter().filter(|r| r.provenance == Provenance::Clean).count();
    Ok(StageOutput {
        inputs: vec![dir.pool()],
        outputs: vec![dir.filtered(), dir.richness()],
        summary: json!({
            "kept": outcome.kept.len(),
            "clean_kept": clean_kept,
            "scored": outcome.scored.len(),
            "per_category": per_cat,
            "warning": outcome.warning,
        }),
        table: format!(
            "filter: kept {} of {} ({} clean), per category {:?}\n",
            outcome.kept.len(),
            outcome.scored.len(),
            clean_kept,
            per_cat
        ),
        ..Default::default()
    })
}

/// Clean filtered clips, at most `per_category` per category, in file order.
pub fn pretraining_set(filtered: &[PoolRecord], world: &WorldConfig, per_category: usize) -> Vec<(Condition, Trajectory)> {
    let mut taken = vec![0usize; world.num_categories()];
    let mut out = Vec::new();
    for r in filtered {
        let k = r.condition.category;
        if r.provenance == Provenance::Clean && k < taken.len() && taken[k] < per_category {
            taken[k] += 1;
            out.push((r.condition.clone(), r.trajectory.clone()));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleQuality {
    pub category: usize,
    pub name: String,
    pub samples: usize,
    pub mean_s_sa: f64,
    pub mean_s_pc: f64,
}

/// Mean physics scores of fresh adapter-off samples on `n` random
/// conditions per category.
pub fn sample_quality(model: &FlowModel, world: &WorldConfig, n: usize, steps: usize, seed: u64) -> Result<Vec<SampleQuality>> {
    let mut rng = stream(seed, "pretrain-check");
    let noise = derive_seed(seed, "pretrain-check-noise");
    let conditions: Vec<Condition> = (0..world.num_categories())
        .flat_map(|k| (0..n).map(move |_| k))
        .map(|k| random_condition(world, k, &mut rng))
        .collect();
    let scores: Vec<(usize, f64, f64)> = conditions
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            let mut r = seeded(child_seed(noise, i as u64));
            match model.sample(c, steps, &mut r, false) {
                Ok(clip) => {
                    let s = score(&clip, c, world);
                    Ok((c.category, s.s_sa, s.s_pc))
                }
                Err(e) if e.is_numeric() => Ok((c.category, 0.0, 0.0)),
                Err(e) => Err(e),
            }
        })
        .collect::<gdpo_core::Result<_>>()?;
    Ok(world
        .categories
        .iter()
        .map(|cat| {
            let mine: Vec<_> = scores.iter().filter(|s| s.0 == cat.id).collect();
            let len = mine.len().max(1) as f64;
            SampleQuality {
                category: cat.id,
                name: cat.kind.name().to_string(),
                samples: mine.len(),
                mean_s_sa: mine.iter().map(|s| s.1).sum::<f64>() / len,
                mean_s_pc: mine.iter().map(|s| s.2).sum::<f64>() / len,
            }
        })
        .collect())
}

fn stage_pretrain(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.filtered())?;
    let world = &cfg.world;
    let filtered = read_dataset(&dir.filtered())?;
    let data = pretraining_set(&filtered, world, cfg.pretrain_per_category);
    if data.is_empty() {
        return Err(UsageError("no clean clips survived filtering; nothing to pretrain on".into()).into());
    }
    let counts = build_histogram(&training_records(&data), world.num_categories())?;
    let normalizer = Normalizer::fit(data.iter().map(|(_, t)| t))?;
    let init_seed = derive_seed(cfg.seed, "model-init");
    let mut model = FlowModel::new(world, &cfg.model, normalizer, init_seed, &mut seeded(init_seed))?;
    let report = pretrain(&mut model, &data, &cfg.pretrain, &mut stream(cfg.seed, "pretrain"))?;
    write_checkpoint(&model, &dir.pretrained())?;

    let mut csv = String::from("epoch,train_loss,eval_loss\n");
    for e in &report.curve {
        let _ = writeln!(csv, "{},{},{}", e.epoch, fmt_opt(e.train_loss), e.eval_loss);
    }
    write_text(&dir.pretrain_loss(), &csv)?;

    let quality = sample_quality(&model, world, cfg.eval.conditions_per_category, cfg.model.time_steps, cfg.seed)?;
    let mut qcsv = String::from("category,name,samples,mean_s_sa,mean_s_pc\n");
    for q in &quality {
        let _ = writeln!(qcsv, "{},{},{},{},{}", q.category, q.name, q.samples, q.mean_s_sa, q.mean_s_pc);
    }
    write_text(&dir.pretrain_scores(), &qcsv)?;

    let (initial, last) = (report.initial_loss(), report.final_loss());
    let mut table = format!(
        "pretrain: {} clips {:?}, eval loss {:.4} -> {:.4} ({:.1}% drop)\n",
        data.len(),
        counts,
        initial,
        last,
        100.0 * (1.0 - last / initial)
    );
    for q in &quality {
        let _ = writeln!(table, "  {:<20} s_sa {:.3}  s_pc {:.3}", q.name, q.mean_s_sa, q.mean_s_pc);
    }
    Ok(StageOutput {
        inputs: vec![dir.filtered()],
        outputs: vec![dir.pretrained(), dir.pretrain_loss(), dir.pretrain_scores()],
        summary: json!({
            "clips_per_category": counts,
            "initial_loss": initial,
            "final_loss": last,
            "loss_drop": 1.0 - last / initial,
            "sample_quality": quality,
            "backbone_checksum": backbone_checksum(&model.backbone),
        }),
        table,
        ..Default::default()
    })
}

fn stage_sample(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.filtered())?;
    require(&dir.pretrained())?;
    let world = &cfg.world;
    let filtered = read_dataset(&dir.filtered())?;
    let model = read_checkpoint(&dir.pretrained())?;
    let sampler = FlowSampler {
        model: &model,
        steps: cfg.model.time_steps,
        adapter_on: false,
    };
    let mut rng = stream(cfg.seed, "sample");
    let s_f = category_difficulty(&filtered, world, &sampler, cfg.sampling.n_reps, &mut rng)?;
    let h_f = build_histogram(&filtered, world.num_categories())?;
    let h_r = sample_budget(&h_f, &s_f, cfg.sampling.tau, cfg.sampling.budget)?;
    let report = CategoryHistograms::new(world, h_f, s_f, cfg.sampling.tau, h_r.clone());
    let set = draw_training_set(&filtered, &h_r, world, &mut rng)?;
    write_dataset(&dir.training(), &ClipShape::of_world(world), &training_records(&set))?;
    write_text(&dir.sampling_report(), &report.to_csv())?;
    Ok(StageOutput {
        inputs: vec![dir.filtered(), dir.pretrained()],
        outputs: vec![dir.training(), dir.sampling_report()],
        summary: json!({
            "h_f": report.h_f,
            "s_f": report.s_f,
            "h_r": report.h_r,
            "training_pairs": set.len(),
        }),
        table: report.to_table(),
        ..Default::default()
    })
}

fn stage_gen_groups(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.training())?;
    require(&dir.pretrained())?;
    let model = read_checkpoint(&dir.pretrained())?;
    let set = pairs(&read_dataset(&dir.training())?);
    let built = build_groups(
        &model,
        &set,
        cfg.dpo.m,
        cfg.model.time_steps,
        &cfg.world,
        &mut stream(cfg.seed, "groups"),
    )?;
    for s in &built.skipped {
        eprintln!("warning: skipped {s}");
    }
    write_groups(&dir.groups(), &built.groups)?;
    let scores: Vec<f64> = built
        .groups
        .iter()
        .flat_map(|g| g.loser_scores.iter().map(gdpo_core::physics::overall_score))
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
    Ok(StageOutput {
        inputs: vec![dir.training(), dir.pretrained()],
        outputs: vec![dir.groups()],
        summary: json!({
            "groups": built.groups.len(),
            "losers_per_group": cfg.dpo.m,
            "skipped": built.skipped,
            "mean_loser_overall": mean,
        }),
        table: format!(
            "gen-groups: {} groups of {} losers, mean loser score {:.4}\n",
            built.groups.len(),
            cfg.dpo.m,
            mean
        ),
        ..Default::default()
    })
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub step: usize,
    pub loss: Option<f64>,
    pub margin: Option<f64>,
    pub mean_alpha: f64,
    pub mean_gamma: f64,
    pub lr: f64,
    pub grad_norm: Option<f64>,
    pub rejected: Option<String>,
    pub eval: Option<Vec<Option<f64>>>,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// Held-out conditions, `n` per category, from the `eval` stream.
pub fn eval_conditions(world: &WorldConfig, n: usize, seed: u64) -> Vec<Condition> {
    let mut rng = stream(seed, "eval");
    (0..world.num_categories())
        .flat_map(|k| (0..n).map(move |_| k))
        .map(|k| random_condition(world, k, &mut rng))
        .collect()
}

fn window_mean(xs: &[f64]) -> Option<f64> {
    let v: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn stage_dpo_train(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    require(&dir.pretrained())?;
    require(&dir.groups())?;
    let world = &cfg.world;
    let mut model = read_checkpoint(&dir.pretrained())?;
    let groups = read_groups(&dir.groups())?;
    model.attach_adapter(&cfg.model, &mut stream(cfg.seed, "adapter-init"))?;
    let checksum = backbone_checksum(&model.backbone);

    let probe_hyper = DpoHyper {
        batch: groups.len(),
        ..cfg.dpo
    };
    let probe = draw_items(&groups, &probe_hyper, model.dims.flow_len(), &mut stream(cfg.seed, "dpo-probe"))?;
    let probe_start = mean_margin(&model, &groups, &probe, &cfg.dpo)?;

    let conditions = eval_conditions(world, cfg.eval.conditions_per_category, cfg.seed);
    let noise = derive_seed(cfg.seed, "eval-noise");
    let steps = cfg.model.time_steps;
    let mut hook = |m: &FlowModel| category_scores(m, &conditions, world, steps, true, noise);
    let hook: Option<&mut dyn FnMut(&FlowModel) -> gdpo_core::Result<Vec<Option<f64>>>> =
        if cfg.dpo.eval_every > 0 { Some(&mut hook) } else { None };
    let log = train(&mut model, &groups, &cfg.schedule, &cfg.dpo, &mut stream(cfg.seed, "dpo"), hook)?;
    let probe_end = mean_margin(&model, &groups, &probe, &cfg.dpo)?;

    let mut jsonl = String::new();
    for rec in &log {
        let m = &rec.metrics;
        let line = MetricsLine {
            step: m.step,
            loss: finite(m.loss),
            margin: finite(m.margin),
            mean_alpha: m.mean_alpha,
            mean_gamma: m.mean_gamma,
            lr: m.lr,
            grad_norm: finite(m.grad_norm),
            rejected: m.rejected.clone(),
            eval: rec.eval.clone(),
        };
        jsonl.push_str(&serde_json::to_string(&line)?);
        jsonl.push('\n');
    }
    write_text(&dir.metrics(), &jsonl)?;
    write_checkpoint(&model, &dir.dpo())?;

    let margins: Vec<f64> = log.iter().map(|r| r.metrics.margin).collect();
    let w = (margins.len() / 10).max(1).min(margins.len());
    let (train_start, train_end) = (window_mean(&margins[..w]), window_mean(&margins[margins.len() - w..]));
    let rejected = log.iter().filter(|r| r.metrics.rejected.is_some()).count();
    let after = backbone_checksum(&model.backbone);
    let failure = (after != checksum).then(|| VerificationFailed(format!("backbone changed during training: {checksum} -> {after}")));
    Ok(StageOutput {
        inputs: vec![dir.pretrained(), dir.groups()],
        outputs: vec![dir.dpo(), dir.metrics()],
        summary: json!({
            "steps": log.len(),
            "groups": groups.len(),
            "probe_items": probe.len(),
            "probe_margin_start": probe_start,
            "probe_margin_end": probe_end,
            "train_margin_first_window": train_start,
            "train_margin_last_window": train_end,
            "window": w,
            "rejected_steps": rejected,
            "backbone_checksum": checksum,
            "backbone_unchanged": failure.is_none(),
            "trainable_params": model.trainable_adapter_params(),
        }),
        table: format!(
            "dpo-train: {} steps on {} groups, probe margin {:.3e} -> {:.3e}, rejected {}\n",
            log.len(),
            groups.len(),
            probe_start,
            probe_end,
            rejected
        ),
        failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub category: usize,
    pub name: String,
    pub conditions: usize,
    pub adapter_off: Option<f64>,
    pub adapter_on: Option<f64>,
}

impl EvalRow {
    pub fn relative_change(&self) -> Option<f64> {
        match (self.adapter_off, self.adapter_on) {
            (Some(off), Some(on)) if off != 0.0 => Some((on - off) / off),
            _ => None,
        }
    }
}

pub const EVAL_HEADER: &str = "category,name,conditions,adapter_off,adapter_on,relative_change";

/// Per-category mean overall score of adapter-off and adapter-on samples on
/// the same held-out conditions and noise.
pub fn evaluate(model: &FlowModel, cfg: &RunConfig) -> Result<Vec<EvalRow>> {
    let world = &cfg.world;
    let n = cfg.eval.conditions_per_category;
    let conditions = eval_conditions(world, n, cfg.seed);
    let noise = derive_seed(cfg.seed, "eval-noise");
    let steps = cfg.model.time_steps;
    let off = category_scores(model, &conditions, world, steps, false, noise)?;
    let on = category_scores(model, &conditions, world, steps, true, noise)?;
    Ok(world
        .categories
        .iter()
        .map(|c| EvalRow {
            category: c.id,
            name: c.kind.name().to_string(),
            conditions: n,
            adapter_off: off[c.id],
            adapter_on: on[c.id],
        })
        .collect())
}

fn stage_eval(cfg: &RunConfig, dir: &RunDir, checkpoint: PathBuf) -> Result<StageOutput> {
    require(&checkpoint)?;
    let model = read_checkpoint(&checkpoint)?;
    let rows = evaluate(&model, cfg)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    let mut table = format!("{:<20} {:>10} {:>10} {:>9}\n", "category", "off", "on", "change");
    for r in &rows {
        let change = r.relative_change();
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.category,
            r.name,
            r.conditions,
            fmt_opt(r.adapter_off),
            fmt_opt(r.adapter_on),
            fmt_opt(change)
        );
        let _ = writeln!(
            table,
            "{:<20} {:>10.4} {:>10.4} {:>8.2}%",
            r.name,
            r.adapter_off.unwrap_or(f64::NAN),
            r.adapter_on.unwrap_or(f64::NAN),
            100.0 * change.unwrap_or(f64::NAN)
        );
    }
    let mean = |f: fn(&EvalRow) -> Option<f64>| window_mean(&rows.iter().filter_map(f).collect::<Vec<_>>());
    let (all_off, all_on) = (mean(|r| r.adapter_off), mean(|r| r.adapter_on));
    let _ = writeln!(
        table,
        "{:<20} {:>10.4} {:>10.4}",
        "overall",
        all_off.unwrap_or(f64::NAN),
        all_on.unwrap_or(f64::NAN)
    );
    write_text(&dir.eval(), &csv)?;
    Ok(StageOutput {
        inputs: vec![checkpoint],
        outputs: vec![dir.eval()],
        summary: json!({
            "has_adapter": model.adapter.is_some(),
            "rows": rows,
            "overall_off": all_off,
            "overall_on": all_on,
        }),
        table,
        ..Default::default()
    })
}

fn stage_verify(cfg: &RunConfig, dir: &RunDir) -> Result<StageOutput> {
    let v = &cfg.verify;
    let seed = cfg.seed;
    let report = suites::VerifyReport {
        product: suites::product_suite(v.product_instances, seed),
        proof: suites::proof_suite(v.proof_instances, seed),
        chain: suites::chain_suite(v.chain_instances, v.mc_samples, seed),
        gradient: suites::gradient_suite(v.gradient_configs, seed)?,
    };
    let text = report.to_text();
    write_text(&dir.verify(), &text)?;
    let failure = (!report.passed()).then(|| VerificationFailed("see verify.txt".into()));
    Ok(StageOutput {
        outputs: vec![dir.verify()],
        summary: serde_json::to_value(&report)?,
        table: text,
        failure,
        ..Default::default()
    })
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn parse_opt(s: &str) -> Option<f64> {
    s.parse::<f64>().ok()
}

/// Reads the run directory and writes plot-ready CSVs plus a structured
/// summary into `report/`. Nothing outside `report/` is touched.
fn stage_report(dir: &RunDir) -> Result<StageOutput> {
    let out_dir = dir.report_dir();
    let candidates = [dir.pretrain_loss(), dir.metrics(), dir.sampling_report(), dir.eval(), dir.verify()];
    let inputs: Vec<PathBuf> = candidates.iter().filter(|p| p.is_file()).cloned().collect();
    if inputs.is_empty() {
        return Err(UsageError(format!("{} holds no stage outputs to report on", dir.0.display())).into());
    }
    std::fs::create_dir_all(&out_dir)?;
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    let mut table = String::new();

    if dir.pretrain_loss().is_file() {
        let rows = read_csv(&dir.pretrain_loss())?;
        let path = out_dir.join("pretrain_curve.csv");
        let mut csv = String::from("epoch,eval_loss\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{}", r[0], r[2]);
        }
        write_text(&path, &csv)?;
        outputs.push(path);
        let first = rows.first().and_then(|r| parse_opt(&r[2]));
        let last = rows.last().and_then(|r| parse_opt(&r[2]));
        summary.insert("pretrain".into(), json!({ "epochs": rows.len().saturating_sub(1), "initial_loss": first, "final_loss": last }));
        let _ = writeln!(table, "pretrain loss  {:.4} -> {:.4}", first.unwrap_or(f64::NAN), last.unwrap_or(f64::NAN));
    }

    if dir.metrics().is_file() {
        let text = std::fs::read_to_string(dir.metrics())?;
        let lines: Vec<MetricsLine> = text
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("parsing {}", dir.metrics().display()))?;
        let path = out_dir.join("dpo_curve.csv");
        let mut csv = String::from("step,loss,margin,lr\n");
        for l in &lines {
            let _ = writeln!(csv, "{},{},{},{}", l.step, fmt_opt(l.loss), fmt_opt(l.margin), l.lr);
        }
        write_text(&path, &csv)?;
        outputs.push(path);
        let margins: Vec<f64> = lines.iter().map(|l| l.margin.unwrap_or(f64::NAN)).collect();
        let w = (margins.len() / 10).max(1).min(margins.len());
        let (a, b) = if margins.is_empty() {
            (None, None)
        } else {
            (window_mean(&margins[..w]), window_mean(&margins[margins.len() - w..]))
        };
        summary.insert("dpo".into(), json!({ "steps": lines.len(), "margin_first_window": a, "margin_last_window": b }));
        let _ = writeln!(table, "dpo margin     {:.4e} -> {:.4e}", a.unwrap_or(f64::NAN), b.unwrap_or(f64::NAN));
    }

    let sampling = if dir.sampling_report().is_file() {
        Some(CategoryHistograms::from_csv(&std::fs::read_to_string(dir.sampling_report())?)?)
    } else {
        None
    };
    let eval = if dir.eval().is_file() { Some(read_csv(&dir.eval())?) } else { None };
    if sampling.is_some() || eval.is_some() {
        let n = sampling.as_ref().map(|s| s.names.len()).or(eval.as_ref().map(|e| e.len())).unwrap_or(0);
        let path = out_dir.join("category_scores.csv");
        let mut csv = String::from("category,name,H_f,S_f,H_r,adapter_off,adapter_on\n");
        let mut rows = Vec::new();
        for k in 0..n {
            let name = sampling
                .as_ref()
                .map(|s| s.names[k].clone())
                .or_else(|| eval.as_ref().map(|e| e[k][1].clone()))
                .unwrap_or_default();
            let (h_f, s_f, h_r) = sampling
                .as_ref()
                .map_or((None, None, None), |s| (Some(s.h_f[k]), s.s_f[k], Some(s.h_r[k])));
            let (off, on) = eval
                .as_ref()
                .and_then(|e| e.get(k))
                .map_or((None, None), |r| (parse_opt(&r[3]), parse_opt(&r[4])));
            let cell = |v: Option<usize>| v.map_or_else(|| "absent".into(), |x| x.to_string());
            let _ = writeln!(csv, "{k},{name},{},{},{},{},{}", cell(h_f), fmt_opt(s_f), cell(h_r), fmt_opt(off), fmt_opt(on));
            let _ = writeln!(
                table,
                "{:<20} H_r {:>5}  off {:.4}  on {:.4}",
                name,
                cell(h_r),
                off.unwrap_or(f64::NAN),
                on.unwrap_or(f64::NAN)
            );
            rows.push(json!({ "name": name, "h_f": h_f, "s_f": s_f, "h_r": h_r, "adapter_off": off, "adapter_on": on }));
        }
        write_text(&path, &csv)?;
        outputs.push(path);
        summary.insert("categories".into(), json!(rows));
    }

    if dir.verify().is_file() {
        let text = std::fs::read_to_string(dir.verify())?;
        let suites: Vec<serde_json::Value> = text
            .lines()
            .filter_map(|l| {
                let mut it = l.split_whitespace();
                Some(json!({ "suite": it.next()?, "passed": it.next()? == "pass" }))
            })
            .collect();
        summary.insert("verify".into(), json!(suites));
    }

    let path = out_dir.join("summary.json");
    let summary = serde_json::Value::Object(summary);
    write_text(&path, &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    outputs.push(path);
    Ok(StageOutput {
        inputs,
        outputs,
        summary,
        table,
        ..Default::default()
    })
}
