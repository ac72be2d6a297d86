use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sela_cli::config::{grid_lora, RunConfig};
use sela_cli::run::{adaptable_params, read_pretrain_log, Layout};
use sela_core::adapt::Method;
use sela_core::lora::LoraConfig;
use sela_core::metrics::{read_results_csv, MetricRecord};
use sela_core::model::ModelDims;
use sela_core::scenes::SceneSizes;

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.out_dir = out.to_path_buf();
    cfg.corpus.scenarios = vec!["white".into(), "hum".into()];
    cfg.corpus.snr_ranges = vec![[0.0, 5.0]];
    cfg.corpus.sizes = SceneSizes {
        adapt_clips: 3,
        noise_clips: 2,
        test_pairs: 2,
        adapt_secs: 1.0,
        test_secs: 1.0,
    };
    cfg.model.dims = ModelDims {
        bands: 8,
        hidden: 8,
    };
    cfg.pretrain.train.epochs = 3;
    cfg.pretrain.train.steps_per_epoch = 2;
    cfg.pretrain.train.batch = 2;
    cfg.pretrain.train.segment_secs = 0.5;
    cfg.pretrain.corpus.speakers = vec![0, 1];
    cfg.pretrain.corpus.utterances = 4;
    cfg.pretrain.corpus.utterance_secs = 1.0;
    cfg.pretrain.corpus.noise_clips = 2;
    cfg.pretrain.corpus.noise_secs = 1.0;
    cfg.adapt.session.batch = 2;
    cfg.adapt.session.updates = 2;
    cfg.adapt.session.segment_secs = 0.5;
    cfg.adapt.session.probe_pairs = 1;
    cfg
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

fn workspace() -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let config = dir.path().join("run.toml");
    fs::write(&config, tiny_config(&out).to_toml()).unwrap();
    Workspace {
        _dir: dir,
        config,
        out,
    }
}

fn sela(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sela"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env_remove("SELA_OUT_DIR")
        .output()
        .unwrap()
}

fn ok(config: &Path, args: &[&str]) -> String {
    let out = sela(config, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pipeline(ws: &Workspace) {
    ok(&ws.config, &["synth-data"]);
    ok(&ws.config, &["pretrain"]);
    ok(&ws.config, &["adapt"]);
    ok(&ws.config, &["eval"]);
    ok(&ws.config, &["report"]);
}

fn files_under(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_is_deterministic() {
    let a = workspace();
    let b = workspace();
    pipeline(&a);
    pipeline(&b);
    let (la, lb) = (Layout::new(&a.out), Layout::new(&b.out));
    assert_eq!(
        fs::read(la.results()).unwrap(),
        fs::read(lb.results()).unwrap()
    );
    for run in [
        "lora-isolated",
        "lora-sequential",
        "remixit-isolated",
        "remixit-sequential",
    ] {
        let t = |l: &Layout| fs::read(l.runs().join(run).join("trajectory.csv")).unwrap();
        assert_eq!(t(&la), t(&lb), "{run}");
    }
    assert_eq!(files_under(&la.corpus()), files_under(&lb.corpus()));
    assert_eq!(
        fs::read(la.checkpoint()).unwrap(),
        fs::read(lb.checkpoint()).unwrap()
    );

    // One epoch-mean loss per configured epoch.
    assert_eq!(read_pretrain_log(&la.pretrain_log()).unwrap().len(), 3);

    // Eval again without adapting: identical output.
    let before = fs::read(la.results()).unwrap();
    ok(&a.config, &["eval", "--jobs", "2"]);
    assert_eq!(fs::read(la.results()).unwrap(), before);

    // Grid: (2 methods + pretrained) x 2 modes rows, 1 SNR range.
    let report = fs::read_to_string(la.report_csv()).unwrap();
    assert_eq!(report.lines().count() - 1, 3 * 2);
    let text = fs::read_to_string(la.report_text()).unwrap();
    for label in ["pretrained", "lora", "remixit", "isolated", "sequential"] {
        assert!(text.contains(label), "{label} missing from report");
    }
    assert!(!la.root.join("results.csv.partial").exists());
}

#[test]
fn synth_data_is_reproducible_and_counts_scenes() {
    let ws = workspace();
    ok(&ws.config, &["synth-data"]);
    let layout = Layout::new(&ws.out);
    let first = files_under(&layout.corpus());
    ok(&ws.config, &["synth-data"]);
    assert_eq!(files_under(&layout.corpus()), first);
    let scenes = fs::read_dir(layout.corpus().join("scenes"))
        .unwrap()
        .count();
    assert_eq!(scenes, 2);
}

fn rows_for<'a>(rows: &'a [MetricRecord], method: &str, mode: &str) -> Vec<&'a MetricRecord> {
    rows.iter()
        .filter(|r| r.method == method && r.mode == mode)
        .collect()
}

#[test]
fn zero_updates_reproduce_the_pretrained_metrics() {
    let ws = workspace();
    ok(&ws.config, &["synth-data"]);
    ok(&ws.config, &["pretrain"]);
    ok(
        &ws.config,
        &[
            "adapt",
            "--updates",
            "0",
            "--method",
            "lora",
            "--method",
            "remixit",
            "--mode",
            "sequential",
        ],
    );
    ok(&ws.config, &["eval"]);
    let rows = read_results_csv(&Layout::new(&ws.out).results()).unwrap();
    let base = rows_for(&rows, "pretrained", "sequential");
    assert_eq!(base.len(), 4);
    for method in ["lora", "remixit"] {
        let adapted = rows_for(&rows, method, "sequential");
        assert_eq!(adapted.len(), base.len());
        for (a, b) in adapted.iter().zip(&base) {
            assert_eq!((a.si_sdr_db, a.snr_db), (b.si_sdr_db, b.snr_db));
        }
    }
}

#[test]
fn rank_scale_grid_adds_labelled_runs() {
    let ws = workspace();
    ok(&ws.config, &["synth-data"]);
    ok(&ws.config, &["pretrain"]);
    let out = ok(
        &ws.config,
        &[
            "adapt",
            "--method",
            "lora",
            "--mode",
            "isolated",
            "--updates",
            "1",
            "--rank-scale-grid",
            "2:1,1:8",
        ],
    );
    // rank r on both 8x8 layers: 2 * r * (8 + 8)
    assert!(out.contains("lora-r2-s1"), "{out}");
    assert!(out.contains("adaptable 64 of"), "{out}");
    assert!(out.contains("lora-r1-s8"), "{out}");
    assert!(out.contains("adaptable 32 of"), "{out}");
    ok(&ws.config, &["eval"]);
    let report = ok(&ws.config, &["report"]);
    assert!(report.contains("lora-r2-s1") && report.contains("lora-r1-s8"));
}

#[test]
fn parameter_accounting_at_reference_dims() {
    let dims = ModelDims::REFERENCE;
    let lora = LoraConfig::reference();
    assert_eq!(adaptable_params(Method::Lora, dims, &lora), 512);
    assert_eq!(adaptable_params(Method::Remixit, dims, &lora), 230_144);
    for (rank, expected) in [(16, 8_192), (32, 16_384), (64, 32_768), (1, 512)] {
        let cfg = grid_lora(&lora, rank, 1.0);
        assert_eq!(adaptable_params(Method::Lora, dims, &cfg), expected);
    }
}

#[test]
fn out_dir_env_overrides_config() {
    let ws = workspace();
    let other = ws.out.with_file_name("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_sela"))
        .arg("--config")
        .arg(&ws.config)
        .arg("synth-data")
        .env("SELA_OUT_DIR", &other)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(other.join("corpus").join("manifest.toml").exists());
    assert!(!ws.out.exists());
}

#[test]
fn exit_codes() {
    let ws = workspace();
    // Missing config file: I/O.
    let missing = ws.config.with_file_name("absent.toml");
    assert_eq!(sela(&missing, &["synth-data"]).status.code(), Some(2));

    // Unknown key: contract violation.
    let bad = ws.config.with_file_name("bad.toml");
    let text = fs::read_to_string(&ws.config).unwrap() + "\nextra = 1\n";
    fs::write(&bad, text).unwrap();
    assert_eq!(sela(&bad, &["synth-data"]).status.code(), Some(1));

    // Stages out of order: contract violation.
    assert_eq!(sela(&ws.config, &["adapt"]).status.code(), Some(1));
    assert_eq!(sela(&ws.config, &["pretrain"]).status.code(), Some(1));

    // Bad flag value: usage error.
    assert_eq!(
        sela(&ws.config, &["adapt", "--method", "full"])
            .status
            .code(),
        Some(1)
    );

    // Output below a regular file: I/O.
    let blocker = ws.config.with_file_name("blocker");
    fs::write(&blocker, b"x").unwrap();
    let mut cfg = RunConfig::read(&ws.config).unwrap();
    cfg.out_dir = blocker.join("out");
    let blocked = ws.config.with_file_name("blocked.toml");
    fs::write(&blocked, cfg.to_toml()).unwrap();
    assert_eq!(sela(&blocked, &["synth-data"]).status.code(), Some(2));
}
