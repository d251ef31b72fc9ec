//! The pipeline stages. Each writes its artifacts and the resolved config
//! into its output directory.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uavnav_core::dataset::{
    build_corpus, corpus_stats, read_corpus, select_rft_subset, straight_quota, write_corpus, Corpus, LexicalScorer, Split,
    TrajectorySample,
};
use uavnav_core::rewards::LexicalVerifier;
use uavnav_core::DiscreteAction;
use uavnav_policy::eval::{summarize, EvalSet, EvalSummary, ExpertPolicy, Head, ModelPolicy, Policy, RandomWalkPolicy};
use uavnav_policy::example::{examples_from, Example};
use uavnav_policy::grpo::{train_rft, RftState};
use uavnav_policy::sft::{train_sft, Control, SftState};
use uavnav_policy::{Checkpoint, DualHeadModel, Group};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const CONFIG_FILE: &str = "config.conf";
pub const TRAIN_CORPUS: &str = "train.corpus";
pub const VAL_CORPUS: &str = "val.corpus";
pub const TEST_CORPUS: &str = "test.corpus";
pub const SUBSET_FILE: &str = "rft_subset.json";
pub const STATS_JSON: &str = "stats.json";
pub const STATS_TSV: &str = "stats.tsv";
pub const SFT_CHECKPOINT: &str = "sft.ckpt";
pub const SFT_BEST: &str = "sft_best.ckpt";
pub const SFT_LAST: &str = "sft_last.ckpt";
pub const SFT_LOG: &str = "sft_metrics.jsonl";
pub const RFT_CHECKPOINT: &str = "rft.ckpt";
pub const RFT_LAST: &str = "rft_last.ckpt";
pub const RFT_LOG: &str = "rft_metrics.jsonl";
pub const EVAL_JSON: &str = "eval_summary.json";
pub const EVAL_TABLE: &str = "eval_table.txt";
pub const EVAL_EPISODES: &str = "eval_episodes.jsonl";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Creates `out` and records the resolved config in it.
pub fn prepare_out(out: &Path, cfg: &RunConfig) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.render().as_bytes())
}

fn load_corpus(dir: &Path, name: &str) -> CliResult<Corpus> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(CliError::data(format!("corpus not found: {} (run build-data first)", path.display())));
    }
    read_corpus(&path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn load_checkpoint(path: &Path, what: &str) -> CliResult<Checkpoint> {
    if !path.exists() {
        return Err(CliError::data(format!("{what} required: {} not found", path.display())));
    }
    Checkpoint::load(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    ck.save(path).map_err(|e| io_err(path, e))
}

fn examples(corpus: &Corpus, split: Split) -> CliResult<Vec<Example>> {
    let vocab = corpus.vocabulary().map_err(|e| CliError::data(e.to_string()))?;
    examples_from(&vocab, &corpus.samples_in(split)).map_err(|e| CliError::data(e.to_string()))
}

/// Selection file written next to the corpora.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetFile {
    pub requested: usize,
    pub size: usize,
    pub straight: usize,
    pub straight_fraction: f64,
    pub ids: Vec<u64>,
}

/// Largest subset size up to `requested` whose class quotas the pool can fill.
pub fn feasible_subset_size(samples: &[&TrajectorySample], requested: usize, straight_fraction: f64) -> usize {
    let straight = samples.iter().filter(|s| s.action_label == DiscreteAction::Straight).count();
    let critical = samples.len() - straight;
    let mut n = requested;
    while n > 0 {
        let q = straight_quota(n, straight_fraction);
        if q <= straight && n - q <= critical {
            break;
        }
        n -= 1;
    }
    n
}

pub fn build_data(cfg: &RunConfig, out: &Path, dry_run: bool) -> CliResult<()> {
    if dry_run {
        println!(
            "config ok: {} trajectories (+{} test), subset {} at straight fraction {}",
            cfg.data.trajectories, cfg.data.test_trajectories, cfg.rft_subset_size, cfg.rft_straight_fraction
        );
        return Ok(());
    }
    prepare_out(out, cfg)?;
    let corpus = build_corpus(&cfg.data).map_err(|e| CliError::runtime(format!("corpus generation failed: {e}")))?;
    for (split, name) in [(Split::Train, TRAIN_CORPUS), (Split::Val, VAL_CORPUS), (Split::Test, TEST_CORPUS)] {
        let path = out.join(name);
        write_corpus(&path, &corpus.subset(split)).map_err(|e| io_err(&path, e))?;
    }
    let train = corpus.samples_in(Split::Train);
    let size = feasible_subset_size(&train, cfg.rft_subset_size, cfg.rft_straight_fraction);
    if size < cfg.rft_subset_size {
        log::warn!("reinforcement subset reduced from {} to {size} samples", cfg.rft_subset_size);
    }
    let subset = select_rft_subset(&train, &LexicalScorer, size, cfg.rft_straight_fraction)
        .map_err(|e| CliError::runtime(e.to_string()))?;
    let file = SubsetFile {
        requested: cfg.rft_subset_size,
        size,
        straight: straight_quota(size, cfg.rft_straight_fraction),
        straight_fraction: cfg.rft_straight_fraction,
        ids: subset.iter().map(|s| s.id).collect(),
    };
    write_file(&out.join(SUBSET_FILE), serde_json::to_string_pretty(&file).expect("serializable").as_bytes())?;
    let stats = corpus_stats(&corpus);
    write_file(&out.join(STATS_JSON), stats.to_json().as_bytes())?;
    write_file(&out.join(STATS_TSV), stats.to_tsv().as_bytes())?;
    println!(
        "corpus: {} trajectories, {} samples ({} relabeled); subset {size}; mean length {:.1} m, mean critical ops {:.2}",
        corpus.trajectories.len(),
        corpus.samples.len(),
        corpus.relabeled,
        stats.mean_length_m,
        stats.mean_critical_ops
    );
    Ok(())
}

fn merged(parts: Vec<Corpus>) -> Corpus {
    let mut it = parts.into_iter();
    let mut all = it.next().expect("at least one part");
    for c in it {
        all.trajectories.extend(c.trajectories);
        all.samples.extend(c.samples);
        all.relabeled += c.relabeled;
    }
    all
}

pub fn stats(data: &Path, json: bool) -> CliResult<()> {
    let parts = [TRAIN_CORPUS, VAL_CORPUS, TEST_CORPUS]
        .iter()
        .map(|n| load_corpus(data, n))
        .collect::<CliResult<Vec<_>>>()?;
    let s = corpus_stats(&merged(parts));
    if json {
        println!("{}", s.to_json());
    } else {
        print!("{}", s.to_tsv());
    }
    Ok(())
}

/// Keeps the log records of steps before `step` and reopens the log for appending.
fn open_log(path: &Path, resume_step: Option<usize>) -> CliResult<fs::File> {
    let kept: Vec<String> = match (resume_step, fs::read_to_string(path)) {
        (Some(step), Ok(text)) => text
            .lines()
            .filter(|l| {
                serde_json::from_str::<serde_json::Value>(l)
                    .ok()
                    .and_then(|v| v.get("step").and_then(|s| s.as_u64()))
                    .is_some_and(|s| (s as usize) < step)
            })
            .map(|l| format!("{l}\n"))
            .collect(),
        _ => Vec::new(),
    };
    write_file(path, kept.concat().as_bytes())?;
    fs::OpenOptions::new().append(true).open(path).map_err(|e| io_err(path, e))
}

fn append<T: Serialize>(log: &mut fs::File, path: &Path, rec: &T) -> CliResult<()> {
    let line = serde_json::to_string(rec).expect("serializable");
    writeln!(log, "{line}").map_err(|e| io_err(path, e))
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub resume: bool,
    pub dry_run: bool,
    /// Stops (with a resumable checkpoint) after this many optimizer steps.
    pub stop_after: Option<usize>,
}

fn sft_checkpoint(state: &SftState, cfg: &RunConfig, with_optimizer: bool) -> Checkpoint {
    let mut ck = Checkpoint::new(state.model.clone());
    ck.step = state.step as u64;
    ck.extras.insert("log_lambda".into(), state.log_lambda);
    ck.meta.insert("stage".into(), "sft".into());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    if with_optimizer {
        ck.optimizer = Some(state.opt.clone());
    }
    ck
}

pub fn train_sft_cmd(cfg: &RunConfig, data: &Path, out: &Path, opts: &TrainOptions) -> CliResult<()> {
    let train_c = load_corpus(data, TRAIN_CORPUS)?;
    let val_c = load_corpus(data, VAL_CORPUS)?;
    let train = examples(&train_c, Split::Train)?;
    let val = examples(&val_c, Split::Val)?;
    if train.is_empty() {
        return Err(CliError::data("training split is empty"));
    }
    let vocab = train_c.vocabulary().map_err(|e| CliError::data(e.to_string()))?;
    let features = train_c.samples[0].frames[0].feature_len();
    let mcfg = cfg.model.model_config(vocab.len(), features);
    mcfg.validate().map_err(CliError::usage)?;
    let total = cfg.sft.total_steps(train.len());
    if opts.dry_run {
        println!("sft dry run: {} train / {} val samples, {total} optimizer steps", train.len(), val.len());
        return Ok(());
    }
    prepare_out(out, cfg)?;
    let last_path = out.join(SFT_LAST);
    let mut state = if opts.resume {
        let ck = load_checkpoint(&last_path, "sft resume checkpoint")?;
        if ck.model.config != mcfg {
            return Err(CliError::data("resume checkpoint does not match the configured model"));
        }
        let mut st = SftState::new(ck.model, &cfg.sft);
        st.step = ck.step as usize;
        st.log_lambda = ck.extras.get("log_lambda").copied().unwrap_or(cfg.sft.log_lambda_init);
        st.opt = ck.optimizer.ok_or_else(|| CliError::data("resume checkpoint has no optimizer state"))?;
        st
    } else {
        let model = DualHeadModel::new(mcfg, cfg.model_seed()).map_err(CliError::usage)?;
        SftState::new(model, &cfg.sft)
    };
    let log_path = out.join(SFT_LOG);
    let mut log = open_log(&log_path, opts.resume.then_some(state.step))?;
    let start = state.step;
    let mut failure: Option<CliError> = None;
    let outcome = train_sft(&mut state, &train, &val, &cfg.sft, &mut |rec, st| {
        if let Err(e) = append(&mut log, &log_path, rec) {
            failure = Some(e);
            return Control::Stop;
        }
        let stop = opts.stop_after.is_some_and(|n| st.step - start >= n);
        if stop || (cfg.sft_checkpoint_every > 0 && st.step % cfg.sft_checkpoint_every == 0) {
            if let Err(e) = save_checkpoint(&sft_checkpoint(st, cfg, true), &last_path) {
                failure = Some(e);
                return Control::Stop;
            }
        }
        if stop {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .map_err(|e| CliError::runtime(format!("sft failed: {e}")))?;
    if let Some(e) = failure {
        return Err(e);
    }
    if outcome.interrupted {
        println!("sft interrupted at step {} of {total}; resume with --resume", state.step);
        return Ok(());
    }
    save_checkpoint(&sft_checkpoint(&state, cfg, true), &last_path)?;
    save_checkpoint(&sft_checkpoint(&state, cfg, false), &out.join(SFT_CHECKPOINT))?;
    if let Some((model, ll)) = outcome.best {
        let best = SftState {
            model,
            log_lambda: ll,
            ..state.clone()
        };
        save_checkpoint(&sft_checkpoint(&best, cfg, false), &out.join(SFT_BEST))?;
    }
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "sft done: {total} steps, lambda {:.4}, val total {} -> {}",
        state.lambda(&cfg.sft),
        fmt(outcome.initial_val),
        fmt(outcome.final_val)
    );
    Ok(())
}

fn rft_checkpoint(state: &RftState, cfg: &RunConfig, with_optimizer: bool) -> Checkpoint {
    let mut ck = Checkpoint::new(state.model.clone());
    ck.step = state.step as u64;
    ck.meta.insert("stage".into(), "rft".into());
    ck.meta.insert("seed".into(), cfg.seed.to_string());
    ck.meta.insert("wp_checksum".into(), state.model.group_checksum(Group::Wp));
    if with_optimizer {
        ck.optimizer = Some(state.opt.clone());
    }
    ck
}

pub fn train_rft_cmd(cfg: &RunConfig, data: &Path, out: &Path, sft: Option<&Path>, opts: &TrainOptions) -> CliResult<()> {
    let sft_path: PathBuf = sft.map_or_else(|| out.join(SFT_CHECKPOINT), Path::to_path_buf);
    let sft_ck = load_checkpoint(&sft_path, "sft checkpoint")?;
    let train_c = load_corpus(data, TRAIN_CORPUS)?;
    let subset_path = data.join(SUBSET_FILE);
    let text = fs::read_to_string(&subset_path)
        .map_err(|e| CliError::data(format!("subset not found: {} ({e})", subset_path.display())))?;
    let file: SubsetFile =
        serde_json::from_str(&text).map_err(|e| CliError::data(format!("{}: {e}", subset_path.display())))?;
    let by_id: std::collections::HashMap<u64, &TrajectorySample> = train_c.samples.iter().map(|s| (s.id, s)).collect();
    let picked = file
        .ids
        .iter()
        .map(|id| by_id.get(id).copied().ok_or_else(|| CliError::data(format!("subset sample {id} not in the training corpus"))))
        .collect::<CliResult<Vec<_>>>()?;
    let vocab = train_c.vocabulary().map_err(|e| CliError::data(e.to_string()))?;
    let subset = examples_from(&vocab, &picked).map_err(|e| CliError::data(e.to_string()))?;
    if subset.is_empty() {
        return Err(CliError::data("reinforcement subset is empty"));
    }
    if sft_ck.model.config.vocab != vocab.len() {
        return Err(CliError::data("sft checkpoint vocabulary does not match the corpus"));
    }
    let total = cfg.rft.total_steps(subset.len());
    if opts.dry_run {
        println!("rft dry run: {} subset samples, {total} optimizer steps", subset.len());
        return Ok(());
    }
    prepare_out(out, cfg)?;
    let last_path = out.join(RFT_LAST);
    let mut state = RftState::new(sft_ck.model, &cfg.rft);
    if opts.resume {
        let ck = load_checkpoint(&last_path, "rft resume checkpoint")?;
        if ck.model.config != state.model.config {
            return Err(CliError::data("resume checkpoint does not match the sft model"));
        }
        state.model = ck.model;
        state.step = ck.step as usize;
        state.opt = ck.optimizer.ok_or_else(|| CliError::data("resume checkpoint has no optimizer state"))?;
    }
    let log_path = out.join(RFT_LOG);
    let mut log = open_log(&log_path, opts.resume.then_some(state.step))?;
    let start = state.step;
    let mut failure: Option<CliError> = None;
    let outcome = train_rft(&mut state, &subset, &cfg.rft, &vocab, &LexicalVerifier, &cfg.rewards, &mut |rec, st| {
        if let Err(e) = append(&mut log, &log_path, rec) {
            failure = Some(e);
            return Control::Stop;
        }
        let stop = opts.stop_after.is_some_and(|n| st.step - start >= n);
        if stop || (cfg.rft_checkpoint_every > 0 && st.step % cfg.rft_checkpoint_every == 0) {
            if let Err(e) = save_checkpoint(&rft_checkpoint(st, cfg, true), &last_path) {
                failure = Some(e);
                return Control::Stop;
            }
        }
        if stop {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .map_err(|e| CliError::runtime(format!("rft failed: {e}")))?;
    if let Some(e) = failure {
        return Err(e);
    }
    if outcome.interrupted {
        println!("rft interrupted at step {} of {total}; resume with --resume", state.step);
        return Ok(());
    }
    save_checkpoint(&rft_checkpoint(&state, cfg, true), &last_path)?;
    save_checkpoint(&rft_checkpoint(&state, cfg, false), &out.join(RFT_CHECKPOINT))?;
    let n = outcome.logs.len();
    let mean = |l: &[uavnav_policy::grpo::RftStepLog]| l.iter().map(|r| r.reward_total).sum::<f64>() / l.len().max(1) as f64;
    let d = (n / 10).max(1).min(n);
    println!(
        "rft done: {total} steps, reward {:.3} (first tenth) -> {:.3} (last tenth), waypoint head {}",
        mean(&outcome.logs[..d]),
        mean(&outcome.logs[n - d..]),
        &outcome.wp_checksum[..12]
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalPolicy {
    Checkpoint,
    Oracle,
    RandomWalk,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub heads: Vec<Head>,
    pub policy: EvalPolicy,
    pub checkpoint: Option<PathBuf>,
    pub trace: bool,
}

pub fn eval_cmd(cfg: &RunConfig, data: &Path, out: &Path, opts: &EvalOptions) -> CliResult<EvalSummary> {
    let test = load_corpus(data, TEST_CORPUS)?;
    let set = EvalSet::from_corpus(&test, Split::Test, cfg.eval_episodes).map_err(|e| CliError::data(e.to_string()))?;
    if set.is_empty() {
        return Err(CliError::data("test split has no trajectories"));
    }
    let vocab = test.vocabulary().map_err(|e| CliError::data(e.to_string()))?;
    let loaded;
    let policy: Box<dyn Policy> = match opts.policy {
        EvalPolicy::Oracle => Box::new(ExpertPolicy),
        EvalPolicy::RandomWalk => Box::new(RandomWalkPolicy),
        EvalPolicy::Checkpoint => {
            let path = opts
                .checkpoint
                .clone()
                .ok_or_else(|| CliError::data("checkpoint required: pass --checkpoint, --oracle or --random-walk"))?;
            loaded = load_checkpoint(&path, "checkpoint")?.model;
            if loaded.config.vocab != vocab.len() {
                return Err(CliError::data("checkpoint vocabulary does not match the test corpus"));
            }
            Box::new(ModelPolicy {
                model: &loaded,
                vocab: &vocab,
                max_new_tokens: cfg.eval.max_new_tokens,
                with_waypoints: true,
            })
        }
    };
    prepare_out(out, cfg)?;
    let mut reports = Vec::new();
    for &h in &opts.heads {
        reports.extend(set.run(policy.as_ref(), h, &cfg.eval));
    }
    let summary = summarize(&reports).map_err(|e| CliError::runtime(e.to_string()))?;
    let table = summary.table();
    print!("{table}");
    write_file(&out.join(EVAL_TABLE), table.as_bytes())?;
    write_file(&out.join(EVAL_JSON), summary.to_json().as_bytes())?;
    if opts.trace {
        let lines: String = reports
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect();
        write_file(&out.join(EVAL_EPISODES), lines.as_bytes())?;
    }
    if opts.policy == EvalPolicy::Oracle {
        let ok = summary
            .heads
            .iter()
            .all(|h| h.sr_percent == 100.0 && h.mean_ade.map_or(true, |a| a <= 1e-9));
        if !ok {
            return Err(CliError::runtime("oracle self-check failed: expert injection must give SR 100% and ADE 0"));
        }
        println!("oracle self-check passed");
    }
    Ok(summary)
}
