use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hiergrpo::eval::{
    evaluate, render_accuracy_table, render_intermediate_table, render_length_table, render_report,
    EvalReport, TraceRecord,
};
use hiergrpo::grpo::{StateRecord, TrainState, Trainer};
use hiergrpo::pipeline::{build_vocab, evaluate_policy, new_policy, prompts, schema_for};
use hiergrpo::policy::{PolicyCheckpoint, Vocabulary};
use hiergrpo::reward::{score_trace, GroundTruth};
use hiergrpo::synthworld::{
    generate_world, manifest_string, read_manifest, sample_pairs, specimen_manifest, summarize,
    PairSample, Split,
};
use hiergrpo::trace::{token_length, Whitespace};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::rundir::{create_dir, jsonl, pretty, read_json, read_to_string, write_atomic, RunLock};

/// Resolved inputs shared by the config-driven commands.
pub struct Context {
    pub cfg: RunConfig,
    pub run_dir: PathBuf,
    pub manifest: PathBuf,
}

pub enum Outcome {
    Done,
    /// Finished, but some inputs were skipped.
    Partial,
}

fn load_manifest(path: &Path) -> Result<Vec<PairSample>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_manifest(BufReader::new(f))?)
}

pub fn gen_data(ctx: &Context, out: Option<&Path>) -> Result<Outcome, CliError> {
    let _lock = RunLock::acquire(&ctx.run_dir)?;
    let cfg = &ctx.cfg;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.run_dir.join("data"));
    let world = generate_world(&cfg.world)?;
    let pairs = sample_pairs(&world, &cfg.quotas())?;
    let summary = summarize(&world, &pairs);
    write_atomic(&dir.join("pairs.jsonl"), manifest_string(&pairs).as_bytes())?;
    write_atomic(
        &dir.join("specimens.jsonl"),
        specimen_manifest(&world).as_bytes(),
    )?;
    write_atomic(&dir.join("summary.json"), &pretty(&summary))?;
    write_atomic(&dir.join("config.json"), cfg.to_pretty_json().as_bytes())?;
    println!(
        "{} specimens, {} pairs -> {}",
        summary.specimens,
        summary.pairs,
        dir.display()
    );
    println!(
        "{:<22}{:>7}{:>7}{:>7}{:>10}{:>10}",
        "stratum", "train", "val", "test", "mean d", "median d"
    );
    for s in &summary.strata {
        println!(
            "{:<22}{:>7}{:>7}{:>7}{:>10.3}{:>10.3}",
            s.stratum.display_name(),
            s.train,
            s.val,
            s.test,
            s.mean_distance,
            s.median_distance
        );
    }
    Ok(Outcome::Done)
}

pub struct TrainOptions {
    pub force: bool,
    pub resume: bool,
    pub stop_after: Option<usize>,
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainCheckpoint {
    version: u32,
    /// Digest of the full resolved config except paths.
    run_hash: String,
    vocab_hash: String,
    state: StateRecord,
}

fn run_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.paths = Default::default();
    hiergrpo::sha256_hex(c.to_pretty_json().as_bytes())
}

fn vocab_for(cfg: &RunConfig, data: &[PairSample]) -> Vocabulary {
    build_vocab(data, &schema_for(cfg.world.mode, &cfg.reward))
}

pub fn train(ctx: &Context, opts: &TrainOptions) -> Result<Outcome, CliError> {
    let _lock = RunLock::acquire(&ctx.run_dir)?;
    let cfg = &ctx.cfg;
    let data = load_manifest(&ctx.manifest)?;
    let schema = schema_for(cfg.world.mode, &cfg.reward);
    let vocab = vocab_for(cfg, &data);
    let vocab_hash = vocab.hash();
    let dir = ctx.run_dir.join("train");
    let ckpt_path = dir.join("checkpoint.json");
    let policy_path = dir.join("policy.json");
    let hist_path = dir.join("history.jsonl");
    let feature_dim = data
        .first()
        .map_or(cfg.world.feature_dim, |p| p.features_a.len());
    if feature_dim != cfg.world.feature_dim {
        return Err(CliError::Data(format!(
            "manifest features have {feature_dim} dimensions, config says {}",
            cfg.world.feature_dim
        )));
    }
    let fresh = new_policy(
        vocab,
        feature_dim,
        &cfg.policy,
        cfg.reward.variant,
        cfg.seed,
    );
    let train_prompts = prompts(&data, Split::Train, &schema);
    let hash = run_hash(cfg);

    let (state, history) = if opts.resume {
        if !ckpt_path.exists() {
            return Err(CliError::Config(format!(
                "--resume given but {} does not exist",
                ckpt_path.display()
            )));
        }
        let ck: TrainCheckpoint = read_json(&ckpt_path)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(CliError::Data(format!(
                "unsupported checkpoint version {}",
                ck.version
            )));
        }
        if ck.run_hash != hash {
            return Err(CliError::Config(
                "checkpoint was written under a different config".into(),
            ));
        }
        if ck.vocab_hash != vocab_hash {
            return Err(CliError::Data(
                "checkpoint vocabulary does not match the manifest".into(),
            ));
        }
        let state = TrainState::from_record(&fresh, &ck.state)?;
        let text = read_to_string(&hist_path)?;
        let kept: Vec<&str> = text.lines().take(state.step + 1).collect();
        if kept.len() != state.step + 1 {
            return Err(CliError::Data(format!(
                "{} is shorter than the checkpoint",
                hist_path.display()
            )));
        }
        (state, kept.join("\n") + "\n")
    } else {
        if (ckpt_path.exists() || policy_path.exists()) && !opts.force {
            return Err(CliError::Config(format!(
                "{} already holds a run; pass --force to overwrite or --resume to continue",
                dir.display()
            )));
        }
        for p in [&ckpt_path, &policy_path, &hist_path] {
            if p.exists() {
                fs::remove_file(p).map_err(|e| CliError::io(p, e))?;
            }
        }
        (TrainState::new(fresh), String::new())
    };

    let mut trainer = Trainer::new(
        &train_prompts,
        cfg.grpo.clone(),
        cfg.reward.clone(),
        cfg.sampling.clone(),
        state,
        cfg.seed,
    )?;
    create_dir(&dir)?;
    write_atomic(&dir.join("config.json"), cfg.to_pretty_json().as_bytes())?;
    let mut history_file =
        BufWriter::new(File::create(&hist_path).map_err(|e| CliError::io(&hist_path, e))?);
    let io = |e| CliError::io(&hist_path, e);
    if history.is_empty() {
        let header = json!({ "header": {
            "version": crate::config::CONFIG_VERSION,
            "seed": cfg.seed,
            "config_hash": cfg.model_hash(),
            "vocab_hash": vocab_hash,
            "train_pairs": train_prompts.len(),
            "total_steps": trainer.total_steps(),
            "reward": cfg.reward,
            "grpo": cfg.grpo,
            "sampling": cfg.sampling,
            "policy": cfg.policy,
        }});
        writeln!(history_file, "{header}").map_err(io)?;
    } else {
        history_file.write_all(history.as_bytes()).map_err(io)?;
    }
    history_file.flush().map_err(io)?;

    let save = |state: &TrainState<f64>| {
        let ck = TrainCheckpoint {
            version: CHECKPOINT_VERSION,
            run_hash: hash.clone(),
            vocab_hash: vocab_hash.clone(),
            state: state.to_record(),
        };
        write_atomic(&ckpt_path, &pretty(&ck))
    };
    let spe = trainer.steps_per_epoch();
    let mut epoch_reward = 0.0;
    while !trainer.is_done() {
        if opts.stop_after.is_some_and(|n| trainer.state.step >= n) {
            save(&trainer.state)?;
            eprintln!(
                "stopped after step {}; continue with --resume",
                trainer.state.step
            );
            return Ok(Outcome::Done);
        }
        let m = trainer.step()?;
        writeln!(
            history_file,
            "{}",
            serde_json::to_string(&m).expect("metrics serialize")
        )
        .map_err(io)?;
        history_file.flush().map_err(io)?;
        epoch_reward += m.mean_reward;
        if (m.step + 1) % spe == 0 {
            eprintln!(
                "epoch {:>3}/{}  mean reward {:.4}",
                m.epoch + 1,
                cfg.grpo.epochs,
                epoch_reward / spe as f64
            );
            epoch_reward = 0.0;
        }
        let every = cfg.grpo.checkpoint_every;
        if every > 0 && trainer.state.step % every == 0 {
            save(&trainer.state)?;
        }
    }
    save(&trainer.state)?;
    let think_levels = cfg.reward.variant == hiergrpo::reward::RewardVariant::Intermediate;
    let ck = PolicyCheckpoint::from_policy(&trainer.state.policy, think_levels, &cfg.model_hash());
    write_atomic(&policy_path, &pretty(&ck))?;
    println!(
        "trained {} steps -> {}",
        trainer.state.step,
        policy_path.display()
    );
    Ok(Outcome::Done)
}

pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub split: Option<Split>,
    pub untrained: bool,
    pub out: Option<PathBuf>,
}

fn write_report(
    dir: &Path,
    name: &str,
    report: &EvalReport,
    cfg: &RunConfig,
) -> Result<String, CliError> {
    let tables = render_report(name, report);
    write_atomic(&dir.join("report.json"), &pretty(report))?;
    write_atomic(&dir.join("tables.txt"), tables.as_bytes())?;
    write_atomic(&dir.join("config.json"), cfg.to_pretty_json().as_bytes())?;
    Ok(tables)
}

fn run_name(ctx: &Context) -> String {
    ctx.run_dir
        .file_name()
        .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
}

pub fn eval(ctx: &Context, opts: &EvalOptions) -> Result<Outcome, CliError> {
    let _lock = RunLock::acquire(&ctx.run_dir)?;
    let cfg = &ctx.cfg;
    let data = load_manifest(&ctx.manifest)?;
    let vocab = vocab_for(cfg, &data);
    let feature_dim = data
        .first()
        .map_or(cfg.world.feature_dim, |p| p.features_a.len());
    let policy = if opts.untrained {
        new_policy(
            vocab,
            feature_dim,
            &cfg.policy,
            cfg.reward.variant,
            cfg.seed,
        )
    } else {
        let path = opts
            .checkpoint
            .clone()
            .unwrap_or_else(|| ctx.run_dir.join("train").join("policy.json"));
        let ck: PolicyCheckpoint = read_json(&path)?;
        if ck.vocab_hash != vocab.hash() {
            return Err(CliError::Data(format!(
                "{}: vocabulary does not match the manifest",
                path.display()
            )));
        }
        if ck.config_hash != cfg.model_hash() {
            return Err(CliError::Config(format!(
                "{}: trained under a different model config (variant, reward mode, feature size or policy settings)",
                path.display()
            )));
        }
        ck.into_policy(vocab, &cfg.model_hash())?
    };
    let split = opts.split.unwrap_or(cfg.eval.split);
    let eval_cfg = hiergrpo::eval::EvalConfig {
        split,
        ..cfg.eval.clone()
    };
    let (traces, report) = evaluate_policy(
        &policy,
        &data,
        split,
        &cfg.reward,
        &eval_cfg,
        cfg.sampling.max_tokens,
    )?;
    let stage = if opts.untrained {
        "eval-untrained"
    } else {
        "eval"
    };
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| ctx.run_dir.join(stage).join(split.as_str()));
    write_atomic(&dir.join("traces.jsonl"), &jsonl(&traces))?;
    print!("{}", write_report(&dir, &run_name(ctx), &report, cfg)?);
    Ok(Outcome::Done)
}

pub struct ScoreOptions {
    pub traces: PathBuf,
    pub out: Option<PathBuf>,
}

#[derive(Serialize)]
struct RewardLine<'a> {
    pair_id: &'a str,
    r_struct: f64,
    r_corr: f64,
    r_attr: f64,
    r_total: f64,
    format_valid: bool,
    token_length: usize,
}

pub fn score_traces(ctx: &Context, opts: &ScoreOptions) -> Result<Outcome, CliError> {
    let _lock = RunLock::acquire(&ctx.run_dir)?;
    let cfg = &ctx.cfg;
    let data = load_manifest(&ctx.manifest)?;
    let schema = schema_for(cfg.world.mode, &cfg.reward);
    let text = read_to_string(&opts.traces)?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord = serde_json::from_str(line).map_err(|e| {
            CliError::Data(format!("{} line {}: {e}", opts.traces.display(), i + 1))
        })?;
        records.push(r);
    }
    let index: HashMap<&str, &PairSample> = data.iter().map(|p| (p.id.as_str(), p)).collect();
    let (known, orphans): (Vec<TraceRecord>, Vec<TraceRecord>) = records
        .into_iter()
        .partition(|r| index.contains_key(r.pair_id.as_str()));
    for o in &orphans {
        eprintln!("warning: skipping trace for unknown pair {:?}", o.pair_id);
    }
    let mut rewards = Vec::with_capacity(known.len());
    for r in &known {
        let p = index[r.pair_id.as_str()];
        let truth = GroundTruth::from_lineages(&p.lineage_a, &p.lineage_b, p.label, &schema);
        let (b, doc) = score_trace::<f64>(&r.trace, &truth, &schema, &cfg.reward)?;
        rewards.push(RewardLine {
            pair_id: &r.pair_id,
            r_struct: b.r_struct,
            r_corr: b.r_corr,
            r_attr: b.r_attr,
            r_total: b.r_total,
            format_valid: doc.is_some(),
            token_length: token_length(&r.trace, &Whitespace),
        });
    }
    let report = evaluate(
        &known,
        &data,
        &schema,
        cfg.reward.variant.level_requirement(),
        &cfg.eval,
        &Whitespace,
    )?;
    let dir = opts
        .out
        .clone()
        .unwrap_or_else(|| ctx.run_dir.join("score"));
    write_atomic(&dir.join("rewards.jsonl"), &jsonl(&rewards))?;
    print!("{}", write_report(&dir, &run_name(ctx), &report, cfg)?);
    if orphans.is_empty() {
        Ok(Outcome::Done)
    } else {
        eprintln!(
            "{} of {} traces skipped",
            orphans.len(),
            orphans.len() + known.len()
        );
        Ok(Outcome::Partial)
    }
}

/// One row of the cross-run comparison.
#[derive(Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub strata: Vec<(String, f64)>,
    pub macro_average: Option<f64>,
    pub weighted_average: Option<f64>,
    pub format_adherence: f64,
    pub mean_length: f64,
}

pub struct ReportOptions {
    /// `name=path` or bare paths (named after their parent directory).
    pub inputs: Vec<String>,
    pub json: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub fn report(opts: &ReportOptions) -> Result<Outcome, CliError> {
    if opts.inputs.is_empty() {
        return Err(CliError::Config(
            "report needs at least one report.json".into(),
        ));
    }
    let mut named = Vec::new();
    for input in &opts.inputs {
        let (name, path) = match input.split_once('=') {
            Some((n, p)) => (n.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(input);
                let n = p
                    .parent()
                    .and_then(Path::file_name)
                    .map_or("report".into(), |n| n.to_string_lossy().into_owned());
                (n, p)
            }
        };
        let r: EvalReport = read_json(&path)?;
        named.push((name, r));
    }
    let first = &named[0].1;
    if named.iter().any(|(_, r)| r.kind != first.kind) {
        return Err(CliError::Data(
            "reports cover different hierarchy kinds".into(),
        ));
    }
    let refs: Vec<(&str, &EvalReport)> = named.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let mut text = String::from("Verification accuracy (%)\n");
    text.push_str(&render_accuracy_table(&refs));
    for (n, r) in &refs {
        if let Some(t) = &r.intermediate {
            text.push_str(&format!("\nIntermediate prediction accuracy (%), {n}\n"));
            text.push_str(&render_intermediate_table(t));
        }
    }
    text.push_str("\nOutput length (tokens)\n");
    let lengths: Vec<(&str, &hiergrpo::eval::LengthStats)> =
        refs.iter().map(|(n, r)| (*n, &r.length)).collect();
    text.push_str(&render_length_table(&lengths));
    print!("{text}");
    if let Some(out) = &opts.out {
        write_atomic(out, text.as_bytes())?;
    }
    if let Some(path) = &opts.json {
        let rows: Vec<ComparisonRow> = refs
            .iter()
            .map(|(n, r)| ComparisonRow {
                name: n.to_string(),
                strata: r
                    .strata
                    .iter()
                    .map(|s| (s.name.clone(), s.accuracy))
                    .collect(),
                macro_average: r.macro_average,
                weighted_average: r.weighted_average,
                format_adherence: r.format_adherence,
                mean_length: r.length.mean,
            })
            .collect();
        write_atomic(path, &pretty(&json!({ "kind": first.kind, "rows": rows })))?;
    }
    Ok(Outcome::Done)
}
