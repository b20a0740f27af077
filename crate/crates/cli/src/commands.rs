//! The `migc` subcommands.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use migc_bench::eval::{metrics_by_level, ImageKey};
use migc_bench::io::{read_jsonl, read_png, write_jsonl, write_metrics_csv, write_png};
use migc_bench::run::{bench_items, evaluate_items, gt_selfcheck};
use migc_bench::{build_benchmark, BenchLayout, EvalRecord, Metrics};
use migc_core::checkpoint;
use migc_core::diffusion::{sample, SampleOptions};
use migc_core::Model;
use serde_json::json;

use crate::artifacts::{sha256_file, RunDir};
use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::gradcheck;
use crate::pipeline::{self, Ablation, EpochLosses};
use crate::request::LayoutRequestFile;

#[derive(Debug, Parser)]
#[command(name = "migc", version, about = "Multi-instance generation on a toy diffusion model")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train MIGC (and optionally the stage-0 backbone).
    Train(TrainArgs),
    /// Generate images for a layout request.
    Generate(GenerateArgs),
    /// Build the synthetic benchmark, generate and evaluate.
    Bench(BenchArgs),
    /// Evaluate an existing image directory against a benchmark manifest.
    Eval(EvalArgs),
    /// Finite-difference check of every trainable block.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Parent directory for a new timestamped run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Write into exactly this (empty or missing) directory instead.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
}

impl OutArgs {
    fn create(&self, command: &str) -> Result<RunDir> {
        RunDir::create(&self.out, command, self.run_dir.as_deref())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Train the stage-0 backbone first.
    #[arg(long)]
    pub pretrain_backbone: bool,
    /// Stage-0 checkpoint to train MIGC on.
    #[arg(long, conflicts_with = "pretrain_backbone")]
    pub backbone: Option<PathBuf>,
    /// Stop after stage 0.
    #[arg(long, requires = "pretrain_backbone")]
    pub backbone_only: bool,
    #[arg(long, value_enum)]
    pub ablate: Option<Ablation>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub request: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of consecutive seeds starting at the request's seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Baseline sampling without MIGC.
    #[arg(long)]
    pub no_migc: bool,
    /// MIGC-active steps; defaults to the first half.
    #[arg(long)]
    pub migc_steps: Option<usize>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Omit to run only the ground-truth self-check.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate ground-truth renders first and stop if the evaluator fails.
    #[arg(long)]
    pub gt_selfcheck: bool,
    /// Sample without MIGC.
    #[arg(long, conflicts_with = "with_baseline")]
    pub no_migc: bool,
    /// Also run without MIGC and write a delta table.
    #[arg(long)]
    pub with_baseline: bool,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub save_images: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Layout manifest written by `bench` (`layouts.jsonl`).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of `L<level>_<layout>_s<seed>.png` images.
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Restrict to these blocks.
    #[arg(long = "block")]
    pub blocks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Negative control: drop part of the gradient on purpose.
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(&a).map(|p| println!("{}", p.display())),
        Command::Generate(a) => generate(&a).map(|p| println!("{}", p.display())),
        Command::Bench(a) => bench(&a).map(|p| println!("{}", p.display())),
        Command::Eval(a) => eval(&a).map(|p| println!("{}", p.display())),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn loss_csv(losses: &[EpochLosses]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in losses {
        w.serialize(l).map_err(|e| CliError::Usage(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn save_checkpoint(run: &RunDir, name: &str, model: &Model, meta: serde_json::Value) -> Result<PathBuf> {
    let p = run.file(name);
    checkpoint::save(model, meta, &p)?;
    Ok(p)
}

fn load_model(path: &Path) -> Result<Model> {
    Ok(checkpoint::load(path)?.0)
}

pub fn train(a: &TrainArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(&a.config)?;
    if !a.pretrain_backbone && a.backbone.is_none() {
        return Err(CliError::Usage(
            "no backbone: pass --backbone <checkpoint> or --pretrain-backbone".into(),
        ));
    }
    let backbone = a.backbone.as_deref().map(load_model).transpose()?;
    let mut run = a.out.create("train")?;
    run.add_input(&a.config)?;
    if let Some(p) = &a.backbone {
        run.add_input(p)?;
    }
    run.write_config(&cfg)?;
    let samples = pipeline::corpus(&cfg)?;
    let log = |tag: &'static str| {
        move |e: &EpochLosses| {
            eprintln!(
                "{tag} epoch {}: L_LDM {:.5} L_ihbt {:.5} L_total {:.5}",
                e.epoch, e.l_ldm, e.l_ihbt, e.l_total
            )
        }
    };
    let backbone = match backbone {
        Some(m) => m,
        None => {
            let (m, losses) = pipeline::pretrain_backbone(&cfg, &samples, log("backbone"))?;
            run.write("loss_backbone.csv", loss_csv(&losses)?)?;
            let meta = json!({"stage": "backbone", "epochs": cfg.pretrain.epochs, "config_sha256": cfg.digest()});
            save_checkpoint(&run, "backbone.ckpt", &m, meta)?;
            m
        }
    };
    if !a.backbone_only {
        let (m, losses) = pipeline::train_migc(&cfg, &backbone, a.ablate, &samples, log("migc"))?;
        run.write("loss.csv", loss_csv(&losses)?)?;
        let meta = json!({
            "stage": "migc",
            "ablation": a.ablate,
            "epochs": cfg.train.epochs,
            "lambda": Ablation::train_config(a.ablate, &cfg.train).lambda,
            "config_sha256": cfg.digest(),
            "backbone_sha256": m.backbone_hash(),
        });
        save_checkpoint(&run, "model.ckpt", &m, meta)?;
    }
    run.finish()
}

pub fn generate(a: &GenerateArgs) -> Result<PathBuf> {
    let file = LayoutRequestFile::load(&a.request)?;
    let base = file.resolve()?;
    let model = load_model(&a.checkpoint)?;
    if base.instances.len() > model.config.max_num {
        return Err(migc_core::CoreError::TooManyInstances {
            n: base.instances.len(),
            max_num: model.config.max_num,
        }
        .into());
    }
    let mut run = a.out.create("generate")?;
    run.add_input(&a.request)?;
    run.add_input(&a.checkpoint)?;
    let migc = !a.no_migc;
    let migc_steps = if migc {
        a.migc_steps.unwrap_or_else(|| model.config.migc_steps_for(base.steps))
    } else {
        0
    };
    for s in 0..a.seeds {
        let req = migc_core::GenerationRequest {
            seed: base.seed + s,
            ..base.clone()
        };
        let img = sample(&model, &req, SampleOptions { migc, migc_steps: Some(migc_steps) })?;
        let name = format!("seed_{}", req.seed);
        write_png(&run.file(&format!("{name}.png")), &img)?;
        let sidecar = json!({
            "prompt": req.prompt,
            "instances": req.instances,
            "seed": req.seed,
            "steps": req.steps,
            "cfg_scale": req.cfg_scale,
            "migc": migc,
            "migc_steps": migc_steps,
            "uncond_bypasses_migc": model.config.uncond_bypasses_migc,
            "checkpoint_sha256": sha256_file(&a.checkpoint)?,
        });
        run.write(&format!("{name}.json"), serde_json::to_string_pretty(&sidecar).expect("json"))?;
    }
    run.finish()
}

fn metrics_csv(records: &[EvalRecord]) -> Result<(Vec<u8>, Vec<(Option<usize>, Metrics)>)> {
    let rows = metrics_by_level(records)?;
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, &rows)?;
    Ok((buf, rows))
}

/// Rows of `metric(with) − metric(without)` per level and overall.
pub fn delta_table(with: &[(Option<usize>, Metrics)], without: &[(Option<usize>, Metrics)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Usage(e.to_string());
    w.write_record(["level", "isr_migc", "isr_no_migc", "isr_delta", "miou_migc", "miou_no_migc", "miou_delta"])
        .map_err(err)?;
    for ((lv, m), (_, b)) in with.iter().zip(without) {
        let level = lv.map_or("all".to_string(), |l| format!("L{l}"));
        let f = |v: f64| format!("{v:.6}");
        w.write_record([
            level,
            f(m.instance_success_rate),
            f(b.instance_success_rate),
            f(m.instance_success_rate - b.instance_success_rate),
            f(m.miou),
            f(b.miou),
            f(m.miou - b.miou),
        ])
        .map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Usage(e.to_string()))
}

fn write_records(run: &RunDir, name: &str, records: &[EvalRecord]) -> Result<()> {
    write_jsonl(&run.file(name), records)?;
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(&a.config)?;
    if a.checkpoint.is_none() && !a.gt_selfcheck {
        return Err(CliError::Usage("bench needs --checkpoint or --gt-selfcheck".into()));
    }
    let mut run = a.out.create("bench")?;
    run.add_input(&a.config)?;
    run.write_config(&cfg)?;
    let layouts = build_benchmark(&cfg.bench)?;
    write_jsonl(&run.file("layouts.jsonl"), &layouts)?;
    if a.gt_selfcheck {
        let m = gt_selfcheck(&layouts, cfg.bench.resolution, a.workers, &cfg.eval)?;
        eprintln!(
            "ground-truth self-check: instance success rate {:.4}, mIoU {:.4}",
            m.instance_success_rate, m.miou
        );
        run.write("gt_selfcheck.json", serde_json::to_string_pretty(&m).expect("json"))?;
    }
    if let Some(ck) = &a.checkpoint {
        run.add_input(ck)?;
        let model = load_model(ck)?;
        let images = |tag: &str| -> Result<Option<PathBuf>> {
            if !a.save_images {
                return Ok(None);
            }
            let d = run.file(&format!("images_{tag}"));
            std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
            Ok(Some(d))
        };
        let migc = !a.no_migc;
        let tag = if migc { "migc" } else { "no_migc" };
        let recs = pipeline::bench_model(&model, &layouts, &cfg, migc, a.workers, &cfg.eval, images(tag)?.as_deref())?;
        let (csv, rows) = metrics_csv(&recs)?;
        run.write("metrics.csv", &csv)?;
        write_records(&run, "verdicts.jsonl", &recs)?;
        std::io::stderr().write_all(&csv).ok();
        if a.with_baseline {
            let base =
                pipeline::bench_model(&model, &layouts, &cfg, false, a.workers, &cfg.eval, images("no_migc")?.as_deref())?;
            let (bcsv, brows) = metrics_csv(&base)?;
            run.write("metrics_no_migc.csv", &bcsv)?;
            write_records(&run, "verdicts_no_migc.jsonl", &base)?;
            let delta = delta_table(&rows, &brows)?;
            std::io::stderr().write_all(&delta).ok();
            run.write("delta.csv", delta)?;
        }
    }
    run.finish()
}

/// `L<level>_<layout>_s<seed>.png` back to its key.
pub fn parse_image_name(name: &str) -> Option<ImageKey> {
    let stem = name.strip_suffix(".png")?.strip_prefix('L')?;
    let mut parts = stem.split('_');
    let level = parts.next()?.parse().ok()?;
    let layout = parts.next()?.parse().ok()?;
    let seed = parts.next()?.strip_prefix('s')?.parse().ok()?;
    parts.next().is_none().then_some(ImageKey { level, layout, seed })
}

pub fn eval(a: &EvalArgs) -> Result<PathBuf> {
    let cfg = RunConfig::load(&a.config)?;
    let layouts: Vec<BenchLayout> = read_jsonl(&a.manifest)?;
    let mut run = a.out.create("eval")?;
    run.add_input(&a.config)?;
    run.add_input(&a.manifest)?;
    let mut keys = Vec::new();
    for entry in std::fs::read_dir(&a.images).map_err(|e| CliError::io(&a.images, e))? {
        let p = entry.map_err(|e| CliError::io(&a.images, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if let Some(k) = parse_image_name(&name) {
            keys.push(k);
        }
    }
    keys.sort();
    if keys.is_empty() {
        return Err(CliError::Usage(format!("no L<level>_<layout>_s<seed>.png images in {}", a.images.display())));
    }
    let find = |k: &ImageKey| {
        layouts
            .iter()
            .find(|l| l.level == k.level && l.layout == k.layout)
            .ok_or_else(|| CliError::Usage(format!("image L{}_{:03} is not in the manifest", k.level, k.layout)))
    };
    let mut items = Vec::new();
    for k in &keys {
        let l = find(k)?;
        items.extend(bench_items(std::slice::from_ref(l), &[k.seed]));
    }
    let recs = evaluate_items(&items, a.workers, &cfg.eval, |it| {
        read_png(&a.images.join(pipeline::image_name(it)))
    })?;
    let (csv, _) = metrics_csv(&recs)?;
    std::io::stderr().write_all(&csv).ok();
    run.write("metrics.csv", csv)?;
    write_records(&run, "verdicts.jsonl", &recs)?;
    run.finish()
}

pub fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    for b in &a.blocks {
        if !gradcheck::BLOCKS.iter().any(|(n, _)| n == b) {
            let names: Vec<&str> = gradcheck::BLOCKS.iter().map(|(n, _)| *n).collect();
            return Err(CliError::Usage(format!("unknown block '{b}'; blocks: {}", names.join(", "))));
        }
    }
    let reports = gradcheck::run_suite(a.seed, &a.blocks, a.corrupt_gradient)?;
    println!("{:<26} {:>7} {:>7} {:>12}  result", "block", "params", "coords", "max_rel_err");
    for r in &reports {
        println!(
            "{:<26} {:>7} {:>7} {:>12.3e}  {}",
            r.block,
            r.params,
            r.coords,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.block.as_str()).collect();
    if !failed.is_empty() {
        return Err(migc_core::CoreError::Numerical {
            stage: "gradcheck".into(),
            detail: format!("blocks above {:e}: {}", gradcheck::TOLERANCE, failed.join(", ")),
        }
        .into());
    }
    Ok(())
}
