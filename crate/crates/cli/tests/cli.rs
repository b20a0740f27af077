use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use migc_bench::io::read_jsonl;
use migc_bench::EvalRecord;
use migc_cli::artifacts::{Manifest, MANIFEST};
use migc_cli::commands::parse_image_name;
use migc_cli::gradcheck;
use migc_cli::request::LayoutRequestFile;
use migc_cli::RunConfig;
use migc_core::{Color, Shape};

const BIN: &str = env!("CARGO_BIN_EXE_migc");

/// Resolution-8 setup small enough to train, sample and bench in seconds.
const TINY: &str = r#"
seed = 3

[model]
resolution = 8
channels = [4, 8, 8]
groups = 2
time_dim = 8
text_dim = 6
head_dim = 4
max_num = 4
fourier_bands = 2
pos_hidden_mult = 2
sac_hidden = 4
cbam_reduction = 2
timesteps = 50
sample_steps = 4

[pretrain]
lr = 0.001
batch_size = 4
epochs = 1

[train]
lr = 0.001
batch_size = 4
epochs = 2
lambda = 0.1

[corpus]
size = 12
max_instances = 3

[bench]
levels = [2, 3]
layouts_per_level = 3
seeds_per_layout = 2
resolution = 8
min_side = 0.25
max_side = 0.5
"#;

fn migc(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn stdout_path(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    PathBuf::from(String::from_utf8(o.stdout.clone()).unwrap().trim())
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn config_roundtrips_and_rejects_unknown_keys() {
    let cfg = RunConfig::from_toml(TINY).unwrap();
    assert_eq!(cfg.train.lambda, 0.1);
    assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    assert!(RunConfig::from_toml("[train]\nlamda = 0.1\n").is_err());
    assert!(RunConfig::from_toml("colour = 1\n").is_err());
    assert!(RunConfig::from_toml("[eval]\niou_threshold = 1.5\n").is_err());
    assert!(RunConfig::from_toml("[eval.detector]\nshape_tolerance = -1.0\n").is_err());
    let mismatch = format!("{TINY}\n").replace("resolution = 8\nmin_side", "resolution = 16\nmin_side");
    assert!(RunConfig::from_toml(&mismatch).is_err());
}

#[test]
fn request_files_resolve() {
    let f: LayoutRequestFile = serde_json::from_str(
        r#"{"instances": [
            {"desc": "red circle", "box": [0, 0, 0.5, 0.5]},
            {"desc": "square", "box": [0.5, 0.5, 1, 1], "color": "blue"}
        ], "seed": 4}"#,
    )
    .unwrap();
    let r = f.resolve().unwrap();
    assert_eq!(r.prompt, "a red circle and a blue square");
    assert_eq!((r.steps, r.cfg_scale, r.seed), (50, 7.5, 4));
    assert_eq!(r.instances[1].desc.color, Color::Blue);
    assert_eq!(r.instances[1].desc.shape, Shape::Square);

    let bad = [
        r#"{"instances": [{"desc": "red circle", "box": [0.6, 0, 0.5, 1]}]}"#,
        r#"{"instances": [{"desc": "red circle", "box": [0, 0, 1, 1], "color": "blue"}]}"#,
        r#"{"instances": [{"desc": "purple circle", "box": [0, 0, 1, 1]}]}"#,
        r#"{"instances": [{"desc": "circle", "box": [0, 0, 1, 1]}]}"#,
    ];
    for b in bad {
        let f: LayoutRequestFile = serde_json::from_str(b).unwrap();
        assert!(f.resolve().is_err(), "{b}");
    }
    assert!(serde_json::from_str::<LayoutRequestFile>(r#"{"instances": [], "sede": 1}"#).is_err());
}

#[test]
fn image_names_parse() {
    let k = parse_image_name("L3_017_s2.png").unwrap();
    assert_eq!((k.level, k.layout, k.seed), (3, 17, 2));
    assert!(parse_image_name("L3_017.png").is_none());
    assert!(parse_image_name("x.png").is_none());
}

#[test]
fn gradcheck_suite_passes_and_catches_a_broken_gradient() {
    let reports = gradcheck::run_suite(0, &[], false).unwrap();
    let names: Vec<&str> = reports.iter().map(|r| r.block.as_str()).collect();
    for b in ["ea", "la", "sac", "pos_mlp", "backbone_resblocks"] {
        assert!(names.contains(&b), "{b} missing");
    }
    for r in &reports {
        assert!(r.passed, "{r:?}");
        assert!(r.params > 0);
    }
    let bad = gradcheck::run_suite(0, &["ea".into()], true).unwrap();
    assert!(!bad[0].passed);

    let o = migc(&["gradcheck", "--block", "sac", "--block", "pos_mlp"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("sac") && text.contains("pos_mlp") && text.contains("PASS"));
    let o = migc(&["gradcheck", "--block", "la", "--corrupt-gradient"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(migc(&["gradcheck", "--block", "nope"]).status.code(), Some(1));
}

#[test]
fn train_generate_bench_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), TINY);

    // no backbone given
    let o = migc(&["train", "--config", p(&cfg_path), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("backbone"));

    let run_a = dir.path().join("a");
    let a = stdout_path(&migc(&[
        "train", "--config", p(&cfg_path), "--pretrain-backbone", "--run-dir", p(&run_a),
    ]));
    for f in ["backbone.ckpt", "model.ckpt", "loss.csv", "loss_backbone.csv", "config.toml", MANIFEST] {
        assert!(a.join(f).exists(), "{f}");
    }
    let snapshot = RunConfig::load(&a.join("config.toml")).unwrap();
    assert_eq!(snapshot, RunConfig::from_toml(TINY).unwrap());
    let loss = std::fs::read_to_string(a.join("loss.csv")).unwrap();
    let mut lines = loss.lines();
    assert_eq!(lines.next(), Some("epoch,L_LDM,L_ihbt,L_total"));
    let first: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((first[3] - (first[1] + snapshot.train.lambda * first[2])).abs() < 1e-12);
    assert!(first[2] > 0.0);
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(a.join(MANIFEST)).unwrap()).unwrap();
    assert!(manifest.outputs.iter().any(|f| f.path == "model.ckpt"));

    // same seed, same first-epoch loss; reusing the stage-0 checkpoint
    let b = stdout_path(&migc(&[
        "train", "--config", p(&cfg_path), "--backbone", p(&a.join("backbone.ckpt")),
        "--run-dir", p(&dir.path().join("b")),
    ]));
    let loss_b = std::fs::read_to_string(b.join("loss.csv")).unwrap();
    let first_b: Vec<f64> = loss_b.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((first[3] - first_b[3]).abs() < 1e-6);

    let ablated = stdout_path(&migc(&[
        "train", "--config", p(&cfg_path), "--backbone", p(&a.join("backbone.ckpt")), "--ablate", "loss",
        "--run-dir", p(&dir.path().join("c")),
    ]));
    let loss_c = std::fs::read_to_string(ablated.join("loss.csv")).unwrap();
    let row: Vec<f64> = loss_c.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[3], row[1]);

    // generate: byte-identical reruns and the instance budget
    let req = dir.path().join("req.json");
    std::fs::write(
        &req,
        r#"{"instances": [{"desc": "red circle", "box": [0, 0, 0.5, 0.5]},
                          {"desc": "blue square", "box": [0.5, 0.5, 1, 1]}], "steps": 4}"#,
    )
    .unwrap();
    let ck = a.join("model.ckpt");
    let gen = |name: &str, extra: &[&str]| {
        let d = dir.path().join(name);
        let mut args = vec!["generate", "--request", p(&req), "--checkpoint", p(&ck), "--seeds", "2", "--run-dir", p(&d)];
        args.extend_from_slice(extra);
        stdout_path(&migc(&args))
    };
    let g1 = gen("g1", &[]);
    let g2 = gen("g2", &[]);
    for s in ["seed_0.png", "seed_1.png"] {
        assert_eq!(std::fs::read(g1.join(s)).unwrap(), std::fs::read(g2.join(s)).unwrap());
    }
    assert_ne!(std::fs::read(g1.join("seed_0.png")).unwrap(), std::fs::read(g1.join("seed_1.png")).unwrap());
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(g1.join("seed_0.json")).unwrap()).unwrap();
    assert_eq!(side["migc_steps"], 2);
    assert_eq!(side["cfg_scale"], 7.5);
    let base = gen("g3", &["--no-migc"]);
    let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(base.join("seed_0.json")).unwrap()).unwrap();
    assert_eq!(side["migc"], false);

    let five = dir.path().join("five.json");
    let inst = r#"{"desc": "red circle", "box": [0, 0, 0.5, 0.5]}"#;
    std::fs::write(&five, format!(r#"{{"instances": [{}]}}"#, vec![inst; 5].join(","))).unwrap();
    let o = migc(&["generate", "--request", p(&five), "--checkpoint", p(&ck), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("channel budget"));

    // bench with worker counts 1 and 3, baseline delta, then eval on the saved images
    let bench = |name: &str, workers: &str| {
        stdout_path(&migc(&[
            "bench", "--config", p(&cfg_path), "--checkpoint", p(&ck), "--gt-selfcheck", "--with-baseline",
            "--save-images", "--workers", workers, "--run-dir", p(&dir.path().join(name)),
        ]))
    };
    let b1 = bench("bench1", "1");
    let b3 = bench("bench3", "3");
    for f in ["metrics.csv", "metrics_no_migc.csv", "delta.csv", "verdicts.jsonl"] {
        assert_eq!(std::fs::read(b1.join(f)).unwrap(), std::fs::read(b3.join(f)).unwrap(), "{f}");
    }
    let metrics = std::fs::read_to_string(b1.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("level,n_images,instance_success_rate,miou,R\n"));
    assert!(metrics.contains("\nL2,6,") && metrics.contains("\nall,12,"));
    let delta = std::fs::read_to_string(b1.join("delta.csv")).unwrap();
    assert!(delta.starts_with("level,isr_migc,isr_no_migc,isr_delta"));
    let recs: Vec<EvalRecord> = read_jsonl(&b1.join("verdicts.jsonl")).unwrap();
    assert_eq!(recs.len(), 6 * 2 + 6 * 3);

    let ev = stdout_path(&migc(&[
        "eval", "--config", p(&cfg_path), "--manifest", p(&b1.join("layouts.jsonl")),
        "--images", p(&b1.join("images_migc")), "--run-dir", p(&dir.path().join("ev")),
    ]));
    assert_eq!(std::fs::read(ev.join("metrics.csv")).unwrap(), std::fs::read(b1.join("metrics.csv")).unwrap());
}

#[test]
fn broken_evaluator_exits_with_the_oracle_code() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{TINY}\n[eval]\niou_threshold = 0.999\n\n[eval.detector]\nshape_tolerance = 0.0\nmin_area_frac = 0.5\n");
    let cfg = write_config(dir.path(), &text);
    let o = migc(&["bench", "--config", p(&cfg), "--gt-selfcheck", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = write_config(dir.path(), "[model]\nbogus = 1\n");
    let o = migc(&["bench", "--config", p(&cfg), "--gt-selfcheck", "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
}
