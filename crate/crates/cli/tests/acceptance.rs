//! One check per acceptance criterion, each printed as a PASS/FAIL line.
//!
//! The end-to-end criterion trains a backbone and three MIGC variants and
//! benchmarks four samplers. Each finished stage is cached under the cargo
//! target directory, keyed by the digest of the run config, so reruns only
//! redo what is missing.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use migc_bench::eval::{compute_metrics, metrics_by_level};
use migc_bench::io::{read_jsonl, write_jsonl};
use migc_bench::{build_benchmark, BenchmarkSpec, EvalConfig, EvalRecord, Metrics};
use migc_cli::gradcheck;
use migc_cli::pipeline::{self, Ablation};
use migc_cli::RunConfig;
use migc_core::checkpoint;
use migc_core::geometry::{build_layout_attention_mask, iou_coords, MaskSet};
use migc_core::model::Conditioning;
use migc_core::train::{inhibition_loss, AttentionMapStack};
use migc_core::{BoundingBox, Color, Description, Mask, Model, ModelConfig, Shape};
use migc_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_migc");

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(t0: Instant, limit: Duration) -> Result<(), String> {
    ensure(t0.elapsed() <= limit, format!("took {:?}, limit {limit:?}", t0.elapsed()))
}

fn random_desc(rng: &mut impl Rng) -> Description {
    Description::new(
        Color::ALL[rng.random_range(0..Color::ALL.len())],
        Shape::ALL[rng.random_range(0..Shape::ALL.len())],
    )
}

fn random_box(rng: &mut impl Rng, grid: usize) -> BoundingBox {
    let x1 = rng.random_range(0..grid);
    let y1 = rng.random_range(0..grid);
    let x2 = rng.random_range(x1 + 1..=grid);
    let y2 = rng.random_range(y1 + 1..=grid);
    let g = grid as f64;
    BoundingBox::new(x1 as f64 / g, y1 as f64 / g, x2 as f64 / g, y2 as f64 / g).unwrap()
}

fn mask_semantics() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut pairs = 0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let n = rng.random_range(0..=4);
        let inst = (0..n)
            .map(|_| Mask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(0.4)).collect()).unwrap())
            .collect();
        let ms = MaskSet::from_masks(inst, h, w).map_err(|e| e.to_string())?;
        let regions = ms.regions();
        let a = build_layout_attention_mask(&regions).map_err(|e| e.to_string())?;
        for p in 0..h * w {
            for q in 0..h * w {
                let brute = regions.iter().any(|m| m.bits()[p] && m.bits()[q]);
                ensure(a.passes(p, q) == brute, format!("pair ({p}, {q}) differs on a {h}x{w} grid"))?;
                pairs += 1;
            }
        }
    }
    within(t0, Duration::from_secs(1))?;
    Ok(format!("200 mask sets, {pairs} pixel pairs equal"))
}

fn outside_max(t: &Tensor, m: &Mask) -> f64 {
    let hw = m.len();
    t.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| !m.bits()[i % hw])
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

fn support_invariants() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_sum: f64 = 0.0;
    let mut layers = 0;
    for pass in 0..100 {
        let model = gradcheck::fixture_model(100 + pass).map_err(|e| e.to_string())?;
        let n = rng.random_range(0..=model.config.max_num);
        let descs: Vec<_> = (0..n).map(|_| random_desc(&mut rng)).collect();
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng, 8)).collect();
        let cond = Conditioning::new(&descs, descs.clone(), boxes);
        let z = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(-2.0..2.0));
        let t = rng.random_range(1..=model.schedule.timesteps());
        let mut trace = Vec::new();
        model.denoise_traced(&z, t, &cond, true, Some(&mut trace)).map_err(|e| e.to_string())?;
        for tr in &trace {
            layers += 1;
            for i in 0..n {
                let m = &tr.masks.instances[i];
                ensure(outside_max(&tr.r_f[i], m) == 0.0, format!("pass {pass}: R_f[{i}] leaks"))?;
                ensure(outside_max(&tr.r_s[i], m) == 0.0, format!("pass {pass}: R_s[{i}] leaks"))?;
            }
            ensure(outside_max(&tr.r_bg, &tr.masks.background) == 0.0, format!("pass {pass}: R_bg leaks"))?;
            let hw = tr.masks.background.len();
            let slots = tr.weights.shape()[0];
            for p in 0..hw {
                let s: f64 = (0..slots).map(|k| tr.weights.data()[k * hw + p]).sum();
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
            let feats: Vec<&Tensor> = tr.slot_features.iter().flatten().collect();
            for (i, &r) in tr.r_final.data().iter().enumerate() {
                let lo = feats.iter().map(|f| f.data()[i]).fold(f64::INFINITY, f64::min);
                let hi = feats.iter().map(|f| f.data()[i]).fold(f64::NEG_INFINITY, f64::max);
                ensure(lo - 1e-12 <= r && r <= hi + 1e-12, format!("pass {pass}: R_final outside its bounds"))?;
            }
        }
    }
    ensure(worst_sum < 1e-6, format!("weights sum off by {worst_sum:e}"))?;
    within(t0, Duration::from_secs(10))?;
    Ok(format!("100 passes, {layers} MIGC layers, max |Σw − 1| = {worst_sum:.1e}"))
}

fn gradient_suite() -> Result<String, String> {
    let t0 = Instant::now();
    let reports = gradcheck::run_suite(0, &[], false).map_err(|e| e.to_string())?;
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    for r in &reports {
        ensure(r.passed, format!("{} at {:.2e} ({:?})", r.block, r.max_rel_err, r.worst))?;
    }
    within(t0, Duration::from_secs(120))?;
    let names: Vec<&str> = reports.iter().map(|r| r.block.as_str()).collect();
    Ok(format!("{} blocks [{}], max rel err {worst:.1e}", reports.len(), names.join(", ")))
}

fn zero_init_noop() -> Result<String, String> {
    let t0 = Instant::now();
    let model = Model::new(ModelConfig::default(), 4).map_err(|e| e.to_string())?;
    let r = model.config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(1..=6);
        let descs: Vec<_> = (0..n).map(|_| random_desc(&mut rng)).collect();
        let boxes: Vec<_> = (0..n).map(|_| random_box(&mut rng, 8)).collect();
        let cond = Conditioning::new(&descs, descs.clone(), boxes);
        let z = Tensor::from_fn(&[3, r, r], |_| rng.random_range(-2.0..2.0));
        let t = rng.random_range(1..=model.schedule.timesteps());
        let off = model.denoise_predict(&z, t, &cond, false).map_err(|e| e.to_string())?;
        let on = model.denoise_predict(&z, t, &cond, true).map_err(|e| e.to_string())?;
        worst = worst.max(off.max_abs_diff(&on));
    }
    ensure(worst < 1e-12, format!("max |Δε̂| = {worst:e}"))?;
    within(t0, Duration::from_secs(5))?;
    Ok(format!("20 inputs, max |Δε̂| = {worst:.1e}"))
}

fn inhibition_algebra() -> Result<String, String> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let e = |x: migc_core::CoreError| x.to_string();
    for _ in 0..50 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let bg = Mask::from_bits(h, w, (0..h * w).map(|_| rng.random_bool(0.6)).collect()).unwrap();
        let n = bg.count();
        // a map constant on the background
        let c = rng.random_range(-1.0..1.0);
        let map = Tensor::from_fn(&[h * w], |p| if bg.bits()[p] { c } else { rng.random_range(-5.0..5.0) });
        let l = inhibition_loss(&AttentionMapStack { maps: vec![map] }, &bg).map_err(e)?;
        ensure(l.abs() < 1e-12, format!("constant map gives {l}"))?;
        if n == 0 {
            continue;
        }
        // one spike of height s on the background
        let spike_at = bg.bits().iter().position(|&b| b).unwrap();
        let s = rng.random_range(0.1..3.0);
        let map = Tensor::from_fn(&[h * w], |p| if p == spike_at { s } else { 0.0 });
        let l = inhibition_loss(&AttentionMapStack { maps: vec![map.clone()] }, &bg).map_err(e)?;
        let closed = 2.0 * s * (n as f64 - 1.0) / n as f64;
        ensure((l - closed).abs() < 1e-9, format!("spike: {l} vs {closed}"))?;
        // a constant offset on the background changes nothing
        let k = rng.random_range(-2.0..2.0);
        let shifted = Tensor::from_fn(&[h * w], |p| map.data()[p] + if bg.bits()[p] { k } else { 0.0 });
        let l2 = inhibition_loss(&AttentionMapStack { maps: vec![shifted] }, &bg).map_err(e)?;
        ensure((l - l2).abs() < 1e-9, format!("offset changed {l} to {l2}"))?;
    }
    within(t0, Duration::from_secs(1))?;
    Ok("constant, spike and offset cases on 50 random grids".into())
}

fn evaluator_closure() -> Result<String, String> {
    let t0 = Instant::now();
    let spec = BenchmarkSpec::default();
    let layouts = build_benchmark(&spec).map_err(|e| e.to_string())?;
    let m = migc_bench::run::gt_selfcheck(&layouts, spec.resolution, 1, &EvalConfig::default())
        .map_err(|e| e.to_string())?;
    ensure(m.instance_success_rate == 1.0, format!("ISR {}", m.instance_success_rate))?;
    ensure(m.miou >= 0.95, format!("mIoU {}", m.miou))?;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let side = 24i64;
    let mut int_box = || {
        let x1 = rng.random_range(0..side - 1);
        let y1 = rng.random_range(0..side - 1);
        [x1, y1, rng.random_range(x1 + 1..=side), rng.random_range(y1 + 1..=side)]
    };
    for _ in 0..1000 {
        let (a, b) = (int_box(), int_box());
        let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
        let (mut inter, mut uni) = (0u64, 0u64);
        for y in 0..side {
            for x in 0..side {
                inter += (inside(a, x, y) && inside(b, x, y)) as u64;
                uni += (inside(a, x, y) || inside(b, x, y)) as u64;
            }
        }
        let f = |r: [i64; 4]| r.map(|v| v as f64);
        let v = iou_coords(f(a), f(b));
        ensure(v == inter as f64 / uni as f64, format!("IoU {a:?} {b:?}: {v} vs {inter}/{uni}"))?;
    }
    within(t0, Duration::from_secs(60))?;
    Ok(format!(
        "{} GT images: ISR {:.3}, mIoU {:.3}; 1000 IoU pairs exact",
        m.n_images, m.instance_success_rate, m.miou
    ))
}

/// Settings of the end-to-end run.
pub fn end_to_end_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.corpus.size = 5000;
    cfg
}

fn cache_dir(cfg: &RunConfig) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(&cfg.digest()[..16]);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn cached_model(path: &Path, build: impl FnOnce() -> Result<Model, String>) -> Result<Model, String> {
    if path.exists() {
        return checkpoint::load(path).map(|(m, _)| m).map_err(|e| e.to_string());
    }
    let m = build()?;
    checkpoint::save(&m, serde_json::json!({}), path).map_err(|e| e.to_string())?;
    Ok(m)
}

fn cached_records(path: &Path, build: impl FnOnce() -> Result<Vec<EvalRecord>, String>) -> Result<Vec<EvalRecord>, String> {
    if path.exists() {
        return read_jsonl(path).map_err(|e| e.to_string());
    }
    let r = build()?;
    write_jsonl(path, &r).map_err(|e| e.to_string())?;
    Ok(r)
}

fn level_metrics(records: &[EvalRecord], level: usize) -> Result<Metrics, String> {
    let r: Vec<EvalRecord> = records.iter().filter(|r| r.level == level).cloned().collect();
    compute_metrics(&r).map_err(|e| e.to_string())
}

fn end_to_end() -> Result<String, String> {
    let cfg = end_to_end_config();
    let dir = cache_dir(&cfg);
    let log = |tag: &'static str| move |e: &pipeline::EpochLosses| eprintln!("  {tag} {e:?}");
    let mut samples = None;
    let mut corpus = || -> Result<Vec<migc_core::TrainingSample>, String> {
        if samples.is_none() {
            samples = Some(pipeline::corpus(&cfg).map_err(|e| e.to_string())?);
        }
        Ok(samples.clone().unwrap())
    };
    let backbone = cached_model(&dir.join("backbone.ckpt"), || {
        let s = corpus()?;
        Ok(pipeline::pretrain_backbone(&cfg, &s, log("backbone")).map_err(|e| e.to_string())?.0)
    })?;
    let mut variant = |name: &str, ab: Option<Ablation>| {
        cached_model(&dir.join(format!("{name}.ckpt")), || {
            let s = corpus()?;
            Ok(pipeline::train_migc(&cfg, &backbone, ab, &s, log("migc")).map_err(|e| e.to_string())?.0)
        })
    };
    let full = variant("full", None)?;
    let no_ea = variant("no_ea", Some(Ablation::Ea))?;
    let no_loss = variant("no_loss", Some(Ablation::Loss))?;
    let layouts = build_benchmark(&cfg.bench).map_err(|e| e.to_string())?;
    let bench = |name: &str, m: &Model, migc: bool| {
        cached_records(&dir.join(format!("{name}.jsonl")), || {
            pipeline::bench_model(m, &layouts, &cfg, migc, 1, &cfg.eval, None).map_err(|e| e.to_string())
        })
    };
    let r_base = bench("bench_no_migc", &full, false)?;
    let r_full = bench("bench_full", &full, true)?;
    let r_no_ea = bench("bench_no_ea", &no_ea, true)?;
    let r_no_loss = bench("bench_no_loss", &no_loss, true)?;

    let m = |r: &[EvalRecord]| compute_metrics(r).map_err(|e| e.to_string());
    let (base, fullm, noea) = (m(&r_base)?, m(&r_full)?, m(&r_no_ea)?);
    let (l4_full, l4_noloss) = (level_metrics(&r_full, 4)?, level_metrics(&r_no_loss, 4)?);
    for (name, r) in [("no-migc", &r_base), ("full", &r_full), ("no-EA", &r_no_ea), ("λ=0", &r_no_loss)] {
        for (lv, mm) in metrics_by_level(r).map_err(|e| e.to_string())? {
            eprintln!(
                "  {name:<8} {:<4} ISR {:.4} mIoU {:.4} R {:.4}",
                lv.map_or("all".into(), |l| format!("L{l}")),
                mm.instance_success_rate,
                mm.miou,
                mm.image_success_rate
            );
        }
    }
    let summary = format!(
        "ISR full {:.4} / no-migc {:.4} / no-EA {:.4}; L4 mIoU λ=0.1 {:.4} / λ=0 {:.4}",
        fullm.instance_success_rate, base.instance_success_rate, noea.instance_success_rate, l4_full.miou, l4_noloss.miou
    );
    let a = fullm.instance_success_rate >= 1.5 * base.instance_success_rate
        && fullm.instance_success_rate > base.instance_success_rate;
    let b = noea.instance_success_rate < fullm.instance_success_rate;
    let c = l4_noloss.miou < l4_full.miou;
    ensure(a && b && c, format!("(a) {a} (b) {b} (c) {c}: {summary}"))?;
    Ok(summary)
}

const SMALL_BENCH: &str = r#"
[model]
sample_steps = 6

[bench]
levels = [2, 3, 4]
layouts_per_level = 3
seeds_per_layout = 2
"#;

fn determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ck = dir.path().join("model.ckpt");
    let mut model = Model::new(ModelConfig::default(), 8).map_err(|e| e.to_string())?;
    // nonzero MIGC so the flag matters
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for id in model.params.ids_with_prefix("migc.") {
        for v in model.params.value_mut(id).data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    checkpoint::save(&model, serde_json::json!({}), &ck).map_err(|e| e.to_string())?;
    let req = dir.path().join("req.json");
    std::fs::write(
        &req,
        r#"{"instances": [{"desc": "red circle", "box": [0, 0, 0.5, 0.5]},
                          {"desc": "green cross", "box": [0.5, 0.25, 1, 1]}], "seed": 11}"#,
    )
    .map_err(|e| e.to_string())?;
    let run = |args: &[&str]| -> Result<PathBuf, String> {
        let o = Command::new(BIN).args(args).output().map_err(|e| e.to_string())?;
        ensure(o.status.success(), String::from_utf8_lossy(&o.stderr).to_string())?;
        Ok(PathBuf::from(String::from_utf8_lossy(&o.stdout).trim()))
    };
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let gen = |name: &str| {
        run(&["generate", "--request", &s(&req), "--checkpoint", &s(&ck), "--run-dir", &s(&dir.path().join(name))])
    };
    let (g1, g2) = (gen("g1")?, gen("g2")?);
    let a = std::fs::read(g1.join("seed_11.png")).map_err(|e| e.to_string())?;
    let b = std::fs::read(g2.join("seed_11.png")).map_err(|e| e.to_string())?;
    ensure(a == b, "generated PNGs differ")?;

    let cfg = dir.path().join("bench.toml");
    std::fs::write(&cfg, SMALL_BENCH).map_err(|e| e.to_string())?;
    let bench = |workers: &str, name: &str| {
        run(&[
            "bench", "--config", &s(&cfg), "--checkpoint", &s(&ck), "--workers", workers,
            "--run-dir", &s(&dir.path().join(name)),
        ])
    };
    let (b1, b8) = (bench("1", "b1")?, bench("8", "b8")?);
    for f in ["metrics.csv", "verdicts.jsonl"] {
        let x = std::fs::read(b1.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b8.join(f)).map_err(|e| e.to_string())?;
        ensure(x == y, format!("{f} differs between 1 and 8 workers"))?;
    }
    Ok(format!("generate PNG identical ({} bytes); bench metrics identical for 1 and 8 workers", a.len()))
}

fn main() {
    let checks: [(&str, Check); 8] = [
        ("1 mask semantics", mask_semantics),
        ("2 support invariants", support_invariants),
        ("3 gradient suite", gradient_suite),
        ("4 zero-init no-op", zero_init_noop),
        ("5 inhibition-loss algebra", inhibition_algebra),
        ("6 evaluator closure", evaluator_closure),
        ("7 end-to-end directional", end_to_end),
        ("8 determinism", determinism),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {name}: PASS ({secs:.1} s) {msg}"),
            Err(msg) => {
                println!("criterion {name}: FAIL ({secs:.1} s) {msg}");
                failed.push(name);
            }
        }
    }
    if !failed.is_empty() {
        println!("{} of 8 criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
