use std::path::{Path, PathBuf};
use std::process::Command;

use adaptraj::adaptation::{offline_transitions, AdaptationMode};
use adaptraj::cli::{cmd_adapt, cmd_evaluate, cmd_generate, cmd_plot, cmd_train, manifest_path, read_dataset, BeliefFile, Checkpoint, DatasetManifest, EvaluationReport, ExperimentConfig, Protocol};
use adaptraj::data::episodes;
use adaptraj::model::{ModelConfig, ModelParameters};

fn tiny(dir: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig { output_dir: dir.to_path_buf(), ..Default::default() };
    c.data.train_scenes = 3;
    c.data.adapt_scenes = 3;
    c.data.eval_scenes = 3;
    c.model = ModelConfig::with_width(8);
    c.train.epochs = 1;
    c.train.particles = 4;
    c.online.particles = 8;
    c.online.steps = 3;
    c.offline.particles = 8;
    c.offline.counts = vec![0, 100, 200];
    c.offline.metrics.bootstrap = 50;
    c.offline.metrics.rank_samples = 64;
    c.adaptation.finetune_steps = 3;
    c.apply_seed();
    c
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(p: &Path) -> T {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn jsonl(p: &Path) -> Vec<serde_json::Value> {
    std::fs::read_to_string(p).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adaptraj"))
}

fn trained(dir: &Path) -> ExperimentConfig {
    let cfg = tiny(dir);
    cmd_generate(&cfg, None).unwrap();
    cmd_train(&cfg, None, None).unwrap();
    cfg
}

#[test]
fn noise_free_record_count_is_scenes_times_agents_times_frames() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.source.agents_min = 4;
    cfg.source.agents_max = 4;
    cfg.source.position_noise = 0.0;
    cfg.source.velocity_noise = 0.0;
    let files = cmd_generate(&cfg, Some(5)).unwrap();
    let m: DatasetManifest = read_json(&manifest_path(&files.source));
    assert_eq!(m.records, 5 * 4 * cfg.source.frames);
    let rows = std::fs::read_to_string(&files.source).unwrap().lines().filter(|l| !l.starts_with('#')).count();
    assert_eq!(rows, m.records);
    assert_eq!(read_dataset(&files.source).unwrap().record_count(), m.records);
}

#[test]
fn freq_preset_emits_both_sampling_rates() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::preset("freq-transfer").unwrap();
    cfg.output_dir = dir.path().to_path_buf();
    let files = cmd_generate(&cfg, Some(2)).unwrap();
    let src: DatasetManifest = read_json(&manifest_path(&files.source));
    let tgt: DatasetManifest = read_json(&manifest_path(&files.target_eval));
    assert_eq!(src.dt, 0.5);
    assert_eq!(tgt.dt, 0.1);
    assert_eq!(src.units, "m");
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = trained(d);
        cmd_evaluate(&cfg, Protocol::Online, None, None, None).unwrap();
    }
    for f in ["source.txt", "source.txt.manifest.json", "target_adapt.txt", "target_eval.txt", "checkpoint.json", "online_online_report.json", "online_online_curve.csv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between reruns");
    }
}

#[test]
fn zero_epochs_reproduce_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.epochs = 0;
    cmd_generate(&cfg, None).unwrap();
    let path = cmd_train(&cfg, None, None).unwrap();
    let ck: Checkpoint = read_json(&path);
    assert_eq!(ck.params().unwrap(), ModelParameters::init(&cfg.model).unwrap());
    assert_eq!(ck.config, ExperimentConfig { output_dir: PathBuf::new(), ..cfg });
}

#[test]
fn resuming_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let first = dir.path().join("first.json");
    std::fs::rename(dir.path().join("checkpoint.json"), &first).unwrap();
    let mut out = Vec::new();
    for _ in 0..2 {
        let p = cmd_train(&cfg, None, Some(&first)).unwrap();
        out.push(std::fs::read(p).unwrap());
    }
    assert_eq!(out[0], out[1]);
    assert_ne!(out[0], std::fs::read(&first).unwrap());
}

#[test]
fn validation_loss_is_logged_every_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.train.epochs = 3;
    cmd_generate(&cfg, None).unwrap();
    cmd_train(&cfg, None, None).unwrap();
    let rows = jsonl(&dir.path().join("train_log.jsonl"));
    assert_eq!(rows[0]["config_hash"], cfg.hash().unwrap());
    let epochs: Vec<u64> = rows.iter().filter(|r| r["split"] == "validation").map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, vec![0, 1, 2, 3]);
    let ck: Checkpoint = read_json(&dir.path().join("checkpoint.json"));
    let best = rows
        .iter()
        .filter(|r| r["split"] == "validation")
        .min_by(|a, b| a["loss"].as_f64().unwrap().total_cmp(&b["loss"].as_f64().unwrap()))
        .unwrap();
    assert_eq!(ck.best_epoch as u64, best["epoch"].as_u64().unwrap());
}

#[test]
fn k0_adaptation_leaves_the_prior() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.adaptation.mode = AdaptationMode::K0;
    cmd_adapt(&cfg, None, None).unwrap();
    let ck: Checkpoint = read_json(&dir.path().join("checkpoint.json"));
    let belief: BeliefFile = read_json(&dir.path().join("belief.json"));
    assert_eq!(belief.belief, ck.prior);
    assert_eq!(jsonl(&dir.path().join("adapt_trace.jsonl")).len(), 1);
}

#[test]
fn offline_trace_has_one_record_per_update() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.adaptation.mode = AdaptationMode::Offline;
    cmd_adapt(&cfg, None, None).unwrap();
    let params = {
        let ck: Checkpoint = read_json(&dir.path().join("checkpoint.json"));
        ck.params().unwrap()
    };
    let ds = read_dataset(&dir.path().join("target_adapt.txt")).unwrap();
    let spec = adaptraj::data::EpisodeSpec { stride: cfg.data.adapt_stride, ..cfg.episode_spec() };
    let n = offline_transitions(&params, &episodes(&ds, &spec).unwrap()).unwrap().len();
    let rows = jsonl(&dir.path().join("adapt_trace.jsonl"));
    assert_eq!(rows.len() - 1, n);
    assert!(rows[1..].iter().all(|r| r["kind"] == "exact"));
}

#[test]
fn hybrid_runs_exactly_m_exact_updates_first() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.adaptation.mode = AdaptationMode::Hybrid;
    cfg.adaptation.switch_count = 100;
    cmd_adapt(&cfg, None, None).unwrap();
    let rows = jsonl(&dir.path().join("adapt_trace.jsonl"));
    let kinds: Vec<&str> = rows[1..].iter().map(|r| r["kind"].as_str().unwrap()).collect();
    let first_gradient = kinds.iter().position(|k| *k == "gradient").unwrap();
    assert_eq!(first_gradient, 100);
    assert_eq!(kinds.iter().filter(|k| **k == "exact").count(), 100);
    assert_eq!(kinds.len(), 100 + cfg.adaptation.finetune_steps);
    assert!(dir.path().join("checkpoint_adapted.json").exists());
}

#[test]
fn offline_curve_has_one_row_per_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    cfg.adaptation.mode = AdaptationMode::Offline;
    let report = cmd_evaluate(&cfg, Protocol::Offline, None, None, None).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("offline_offline_curve.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), format!("# config_hash={}", cfg.hash().unwrap()));
    assert!(lines.next().unwrap().starts_with("updates,"));
    let updates: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(updates, cfg.offline.counts);
    for u in &cfg.offline.counts {
        assert!(dir.path().join(format!("offline_offline_calibration_{u}.csv")).exists());
    }
    let r: EvaluationReport = read_json(&report);
    assert_eq!(r.offline.unwrap().len(), cfg.offline.counts.len());
}

#[test]
fn plots_are_valid_svg_with_an_ideal_diagonal() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = trained(dir.path());
    let online = cmd_evaluate(&cfg, Protocol::Online, None, None, None).unwrap();
    cfg.adaptation.mode = AdaptationMode::Offline;
    let offline = cmd_evaluate(&cfg, Protocol::Offline, None, None, None).unwrap();
    let svgs = cmd_plot(&[online, offline], None).unwrap();
    assert!(!svgs.is_empty());
    for p in &svgs {
        let text = std::fs::read_to_string(p).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(text.contains(&cfg.hash().unwrap()));
    }
    let cal = svgs.iter().find(|p| p.ends_with("offline_calibration.svg")).unwrap();
    let text = std::fs::read_to_string(cal).unwrap();
    let doc = roxmltree::Document::parse(&text).unwrap();
    let ideal = doc.descendants().find(|n| n.attribute("class") == Some("ideal")).unwrap();
    assert_eq!(ideal.tag_name().name(), "line");
}

#[test]
fn empty_plot_list_is_a_usage_error() {
    let out = bin().arg("plot").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let out = bin().args(["generate", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("width"));

    let out = bin().args(["train", "--data"]).arg(dir.path().join("missing.txt")).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(4));

    let out = bin().args(["generate", "--preset", "no-such-preset"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().args(["train", "--preset", "freq-transfer", "--seed", "9", "--epochs", "4", "--print-config", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let cfg: ExperimentConfig = toml::from_str(&text).unwrap();
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.epochs, 4);
    assert_eq!(cfg.target.dt, 0.1);
    assert_eq!(cfg.output_dir, dir.path());

    let file = dir.path().join("resolved.toml");
    std::fs::write(&file, &text).unwrap();
    let again = bin().args(["train", "--print-config", "--config"]).arg(&file).output().unwrap();
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn subcommands_run_end_to_end_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.toml");
    let mut cfg = tiny(dir.path());
    cfg.output_dir = PathBuf::from(dir.path());
    std::fs::write(&cfg_path, cfg.to_toml().unwrap()).unwrap();
    let run = |args: &[&str]| {
        let out = bin().args(args).arg("--config").arg(&cfg_path).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["generate"]);
    run(&["train"]);
    run(&["adapt", "--mode", "finetune"]);
    run(&["evaluate", "--protocol", "online"]);
    run(&["gradcheck"]);
    for f in ["source.txt", "checkpoint.json", "checkpoint_adapted.json", "belief.json", "adapt_trace.jsonl", "online_online_report.json", "gradcheck.json"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let ck: Checkpoint = read_json(&dir.path().join("checkpoint_adapted.json"));
    assert_eq!(ck.format, adaptraj::cli::CHECKPOINT_FORMAT);
}
