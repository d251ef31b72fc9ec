use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use uavnav_cli::commands::{EVAL_EPISODES, EVAL_JSON, RFT_CHECKPOINT, SFT_CHECKPOINT, SFT_LAST, SFT_LOG};
use uavnav_cli::RunConfig;
use uavnav_core::dataset::read_corpus;
use uavnav_policy::eval::EpisodeReport;
use uavnav_policy::sft::SftStepLog;
use uavnav_policy::{Checkpoint, EvalSummary};

const SMALL: &[&str] = &[
    "--trajectories",
    "10",
    "--set",
    "data.test_trajectories=4",
    "--set",
    "data.rft_subset_size=24",
    "--set",
    "model.hidden=16",
    "--set",
    "model.heads=2",
    "--set",
    "model.blocks=1",
    "--set",
    "model.wp_hidden=16",
    "--set",
    "sft.micro_batch=2",
    "--set",
    "sft.grad_accum=2",
    "--set",
    "sft.max_steps=6",
    "--set",
    "sft.lr=0.001",
    "--set",
    "rft.micro_batch=2",
    "--set",
    "rft.grad_accum=1",
    "--set",
    "rft.max_steps=2",
    "--set",
    "rft.max_new_tokens=16",
    "--set",
    "eval.max_new_tokens=24",
    "--set",
    "eval.max_steps=6",
];

fn uavnav(cmd: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavnav"))
        .arg(cmd)
        .arg("--out")
        .arg(out)
        .args(SMALL)
        .args(extra)
        .env("UAVNAV_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn built() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(&uavnav("build-data", dir.path(), &[]));
    dir
}

#[test]
fn build_data_writes_every_artifact() {
    let dir = built();
    for f in ["train.corpus", "val.corpus", "test.corpus", "rft_subset.json", "stats.json", "stats.tsv", "config.conf"] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    let train = read_corpus(&dir.path().join("train.corpus")).unwrap();
    let val = read_corpus(&dir.path().join("val.corpus")).unwrap();
    let test = read_corpus(&dir.path().join("test.corpus")).unwrap();
    assert_eq!(train.trajectories.len() + val.trajectories.len(), 10);
    assert_eq!(test.trajectories.len(), 4);
}

#[test]
fn same_seed_gives_identical_files() {
    let a = built();
    let b = built();
    for f in ["train.corpus", "val.corpus", "test.corpus", "rft_subset.json", "stats.json", "config.conf"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f} differs");
    }
    let c = tempfile::tempdir().unwrap();
    ok(&uavnav("build-data", c.path(), &["--seed", "5"]));
    assert_ne!(fs::read(a.path().join("train.corpus")).unwrap(), fs::read(c.path().join("train.corpus")).unwrap());
}

#[test]
fn resolved_config_reproduces_the_run() {
    let a = built();
    let b = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_uavnav"))
        .args(["build-data", "--config"])
        .arg(a.path().join("config.conf"))
        .arg("--out")
        .arg(b.path())
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(fs::read(a.path().join("config.conf")).unwrap(), fs::read(b.path().join("config.conf")).unwrap());
    assert_eq!(fs::read(a.path().join("train.corpus")).unwrap(), fs::read(b.path().join("train.corpus")).unwrap());
    let cfg = RunConfig::resolve(Some(&b.path().join("config.conf")), &[]).unwrap();
    assert_eq!(cfg.data.trajectories, 10);
}

#[test]
fn exit_codes_follow_the_contract() {
    let dir = tempfile::tempdir().unwrap();
    let none = Command::new(env!("CARGO_BIN_EXE_uavnav")).output().unwrap();
    assert_eq!(none.status.code(), Some(1));

    let bad_key = uavnav("build-data", dir.path(), &["--set", "sft.no_such_key=1"]);
    assert_eq!(bad_key.status.code(), Some(1));
    let err = stderr(&bad_key);
    assert!(err.starts_with("error[usage]: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);

    let bad_value = uavnav("build-data", dir.path(), &["--set", "rft.group_size=1"]);
    assert_eq!(bad_value.status.code(), Some(1));

    let no_data = uavnav("train-sft", dir.path(), &[]);
    assert_eq!(no_data.status.code(), Some(2));
    assert!(stderr(&no_data).starts_with("error[data]: corpus not found"));
}

#[test]
fn reinforcement_needs_a_supervised_checkpoint() {
    let dir = built();
    let o = uavnav("train-rft", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("sft checkpoint required"), "{err}");
    assert!(err.contains(SFT_CHECKPOINT));
}

#[test]
fn dry_run_checks_without_training() {
    let dir = built();
    let out = ok(&uavnav("train-sft", dir.path(), &["--dry-run"]));
    assert!(out.contains("6 optimizer steps"), "{out}");
    assert!(!dir.path().join(SFT_CHECKPOINT).exists());
    assert!(!dir.path().join(SFT_LOG).exists());
}

fn log_records(path: &Path) -> Vec<SftStepLog> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn interrupted_training_resumes_where_it_stopped() {
    let full = built();
    ok(&uavnav("train-sft", full.path(), &[]));
    let whole = log_records(&full.path().join(SFT_LOG));
    assert_eq!(whole.len(), 6);

    let part = built();
    let o = ok(&uavnav("train-sft", part.path(), &["--stop-after", "3"]));
    assert!(o.contains("interrupted at step 3"), "{o}");
    assert_eq!(Checkpoint::load(&part.path().join(SFT_LAST)).unwrap().step, 3);
    assert!(!part.path().join(SFT_CHECKPOINT).exists());
    ok(&uavnav("train-sft", part.path(), &["--resume"]));
    let resumed = log_records(&part.path().join(SFT_LOG));
    assert_eq!(resumed.len(), 6);
    let (a, b) = (&whole[3], &resumed[3]);
    assert_eq!(b.step, 3);
    assert!((a.total - b.total).abs() <= 1e-6, "{} vs {}", a.total, b.total);
    assert!((a.lambda - b.lambda).abs() <= 1e-6);
    assert_eq!(whole, resumed);
    assert_eq!(
        fs::read(full.path().join(SFT_CHECKPOINT)).unwrap(),
        fs::read(part.path().join(SFT_CHECKPOINT)).unwrap()
    );
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = built();
    ok(&uavnav("train-sft", dir.path(), &[]));
    let rft = ok(&uavnav("train-rft", dir.path(), &[]));
    assert!(rft.contains("rft done: 2 steps"), "{rft}");
    let sft = Checkpoint::load(&dir.path().join(SFT_CHECKPOINT)).unwrap().model;
    let tuned = Checkpoint::load(&dir.path().join(RFT_CHECKPOINT)).unwrap().model;
    assert_eq!(sft.group_checksum(uavnav_policy::Group::Wp), tuned.group_checksum(uavnav_policy::Group::Wp));

    let eval_dir = dir.path().join("eval");
    let ckpt = dir.path().join(RFT_CHECKPOINT);
    let o = Command::new(env!("CARGO_BIN_EXE_uavnav"))
        .args(["eval", "--head", "both", "--trace", "--data"])
        .arg(dir.path())
        .arg("--out")
        .arg(&eval_dir)
        .arg("--checkpoint")
        .arg(&ckpt)
        .args(SMALL)
        .output()
        .unwrap();
    let table = ok(&o);
    assert_eq!(table.lines().filter(|l| l.starts_with("== ")).count(), 2, "{table}");
    let text = fs::read_to_string(eval_dir.join(EVAL_JSON)).unwrap();
    let summary = EvalSummary::from_json(&text).unwrap();
    assert_eq!(summary.heads.len(), 2);
    assert_eq!(EvalSummary::from_json(&summary.to_json()).unwrap(), summary);
    assert_eq!(summary.table(), table);
    let episodes: Vec<EpisodeReport> = fs::read_to_string(eval_dir.join(EVAL_EPISODES))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(episodes.len(), 8);
    assert_eq!(uavnav_policy::eval::summarize(&episodes).unwrap(), summary);
    assert!(eval_dir.join("config.conf").is_file());
}

fn oracle(dir: &Path, max_steps: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavnav"))
        .args(["eval", "--oracle", "--out"])
        .arg(dir)
        .args(SMALL)
        .arg("--set")
        .arg(format!("eval.max_steps={max_steps}"))
        .output()
        .unwrap()
}

#[test]
fn oracle_self_check_passes() {
    let dir = built();
    let out = ok(&oracle(dir.path(), 40));
    assert!(out.contains("oracle self-check passed"), "{out}");
    let summary = EvalSummary::from_json(&fs::read_to_string(dir.path().join(EVAL_JSON)).unwrap()).unwrap();
    for h in &summary.heads {
        assert_eq!(h.sr_percent, 100.0);
        assert_eq!(h.mean_ade, Some(0.0));
    }
}

#[test]
fn one_head_gives_one_section() {
    let dir = built();
    let o = Command::new(env!("CARGO_BIN_EXE_uavnav"))
        .args(["eval", "--random-walk", "--head", "lm", "--out"])
        .arg(dir.path())
        .args(SMALL)
        .output()
        .unwrap();
    let out = ok(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("== ")).count(), 1);
}

#[test]
fn truncated_oracle_fails_the_self_check() {
    let dir = built();
    let o = oracle(dir.path(), 3);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).starts_with("error[runtime]: oracle self-check failed"));
}
