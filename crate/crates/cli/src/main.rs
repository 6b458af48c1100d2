//! Command-line surface for the kbpoison framework.
//!
//! Subcommands map onto the experiment harness: `gen-synthetic` writes a
//! benchmark corpus, `optimize` searches for a trigger, and the remaining
//! commands evaluate it under metrics, ablations, sweeps, embedder transfer,
//! defenses and the embedding projection dump. Outputs land in the config's
//! output directory with the resolved-config hash in every filename.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbpoison::config::{load_config, ExperimentConfig};
use kbpoison::corpus::Trigger;
use kbpoison::defense::{evaluate_under_defense, DefenseKind, DefenseReport};
use kbpoison::error::Error;
use kbpoison::eval::{
    ablate, ablated_config, evaluate, projection_csv, projection_dataset, sweep,
    AblationComponent, MetricsReport, SweepAxis,
};
use kbpoison::kbase::{export_kb, retrieve, trace_csv_header, trace_csv_rows};
use kbpoison::pipeline::{build_world, World};
use kbpoison::synth::{write_to_dir, SynthParams};

#[derive(Parser)]
#[command(name = "kbpoison", version, about = "Red-team simulation of knowledge-base poisoning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path overrides, e.g. --set retrieval.k=8
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        load_config(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, vocabulary, outcome rules and synonym
    /// table, plus a ready-to-run config wired to those files.
    GenSynthetic {
        #[arg(long, default_value = "synthetic")]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        vocab_size: usize,
        #[arg(long, default_value_t = 5000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        eval: usize,
        /// Comma-separated action labels.
        #[arg(long, default_value = "cruise,yield,reroute,halt")]
        actions: String,
        #[arg(long, default_value = "halt")]
        target_action: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Run the trigger search and write the trigger JSON plus the trace.
    Optimize(ConfigArgs),
    /// Evaluate a trigger file against the poisoned store.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        trigger: PathBuf,
        /// Also export the poisoned knowledge base as JSONL.
        #[arg(long)]
        export_kb: bool,
    },
    /// Re-run the attack with loss components disabled and tabulate metrics.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Components to disable together (comma-separated: uni,cpt,tar,coh).
        /// When omitted, runs the full method and each single ablation.
        #[arg(long)]
        disable: Option<String>,
    },
    /// Sweep the poison count or trigger length.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// poison_count | trigger_length
        #[arg(long)]
        axis: String,
        /// Comma-separated integer values.
        #[arg(long)]
        values: String,
    },
    /// Optimize on every configured embedder and evaluate every pair.
    Transfer(ConfigArgs),
    /// Evaluate a trigger under defenses.
    Defend {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        trigger: PathBuf,
        /// ppl | letter | word | rephrase (comma-separated for several).
        #[arg(long, default_value = "ppl")]
        defense: String,
    },
    /// Dump the 2-D PCA projection of benign/triggered/center/poisoned-key
    /// embeddings.
    Project {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        trigger: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenSynthetic {
            out_dir,
            vocab_size,
            train,
            eval,
            actions,
            target_action,
            seed,
        } => gen_synthetic(out_dir, vocab_size, train, eval, &actions, &target_action, seed),
        Command::Optimize(args) => cmd_optimize(&args.load()?),
        Command::Evaluate {
            config,
            trigger,
            export_kb,
        } => cmd_evaluate(&config.load()?, &trigger, export_kb),
        Command::Ablate { config, disable } => cmd_ablate(&config.load()?, disable.as_deref()),
        Command::Sweep {
            config,
            axis,
            values,
        } => cmd_sweep(&config.load()?, &axis, &values),
        Command::Transfer(args) => cmd_transfer(&args.load()?),
        Command::Defend {
            config,
            trigger,
            defense,
        } => cmd_defend(&config.load()?, &trigger, &defense),
        Command::Project { config, trigger } => cmd_project(&config.load()?, &trigger),
    }
}

fn gen_synthetic(
    out_dir: PathBuf,
    vocab_size: usize,
    train: usize,
    eval: usize,
    actions: &str,
    target_action: &str,
    seed: u64,
) -> Result<(), Error> {
    let actions: Vec<String> = actions.split(',').map(|s| s.trim().to_string()).collect();
    let params = SynthParams {
        vocab_size,
        train,
        eval,
        actions,
        target_action: target_action.to_string(),
        seed,
        ..SynthParams::default()
    };
    let files = write_to_dir(&params, &out_dir)?;

    // A ready-to-run configuration wired to the generated files, with the
    // optimizer tuned for this corpus scale.
    let mut cfg = ExperimentConfig::default();
    cfg.paths.corpus = files.corpus.clone();
    cfg.paths.vocab = Some(files.vocab.clone());
    cfg.paths.outcome_rules = files.outcome_rules.clone();
    cfg.paths.synonyms = Some(files.synonyms.clone());
    cfg.paths.output_dir = out_dir.join("runs");
    cfg.poison.target_action = target_action.to_string();
    cfg.split.train_ratio = train as f64 / (train + eval) as f64;
    cfg.seeds.data = seed;
    cfg.embedder.kind = kbpoison::embedder::EmbedderKind::PositionWeightedPool;
    cfg.lm.order = 2;
    cfg.optimizer.beam_width = 6;
    cfg.optimizer.coherence_samples = 8;
    cfg.optimizer.temperature = 0.05;
    cfg.optimizer.eta_tar = 0.55;
    cfg.optimizer.accumulation_steps = 2;
    cfg.optimizer.target_batch_size = 24;
    cfg.optimizer.max_iters = 250;
    cfg.optimizer.patience = 60;
    let cfg_path = out_dir.join("config.json");
    cfg.save(&cfg_path)?;

    println!("corpus:        {}", files.corpus.display());
    println!("vocabulary:    {}", files.vocab.display());
    println!("outcome rules: {}", files.outcome_rules.display());
    println!("synonyms:      {}", files.synonyms.display());
    println!("config:        {}", cfg_path.display());
    Ok(())
}

fn ensure_output_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Error> {
    let dir = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&dir)?;
    // Every run directory carries the fully resolved config so results are
    // re-runnable from their own artifacts.
    let resolved = cfg.resolved();
    let path = dir.join(format!("resolved_config_{}.json", cfg.hash()));
    resolved.save(&path)?;
    Ok(dir)
}

fn trigger_json(
    world: &World,
    trigger: &Trigger,
    breakdown: &kbpoison::losses::LossBreakdown,
) -> serde_json::Value {
    serde_json::json!({
        "tokens": trigger.token_ids(),
        "text": trigger.text(&world.vocab),
        "objective": breakdown.objective,
        "losses": {
            "uniqueness": breakdown.uniqueness,
            "compactness": breakdown.compactness,
            "target": breakdown.target,
            "coherence": breakdown.coherence,
        },
    })
}

fn load_trigger(path: &PathBuf, world: &World) -> Result<Trigger, Error> {
    let body = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&body)?;
    let tokens = value
        .get("tokens")
        .and_then(|t| t.as_array())
        .ok_or_else(|| Error::invalid("trigger file is missing a tokens array"))?;
    let ids: Vec<u32> = tokens
        .iter()
        .map(|t| {
            t.as_u64()
                .map(|v| v as u32)
                .ok_or_else(|| Error::invalid("trigger tokens must be integers"))
        })
        .collect::<Result<_, _>>()?;
    for &id in &ids {
        if id as usize >= world.vocab.len() {
            return Err(Error::invalid(format!(
                "trigger token {id} does not fit the vocabulary of {} (embedder/vocab mismatch)",
                world.vocab.len()
            )));
        }
    }
    Trigger::new(ids)
}

fn write_metrics(
    dir: &PathBuf,
    stem: &str,
    hash: &str,
    reports: &[(String, MetricsReport)],
) -> Result<(), Error> {
    let csv_path = dir.join(format!("{stem}_{hash}.csv"));
    let mut csv = format!("label,{}\n", MetricsReport::csv_header());
    for (label, report) in reports {
        csv.push_str(&format!("{label},{}\n", report.csv_row()));
    }
    std::fs::write(&csv_path, csv)?;
    let json_path = dir.join(format!("{stem}_{hash}.json"));
    let values: Vec<serde_json::Value> = reports
        .iter()
        .map(|(label, r)| serde_json::json!({"label": label, "report": r}))
        .collect();
    std::fs::write(&json_path, serde_json::to_string_pretty(&values)?)?;
    println!("wrote {}", csv_path.display());
    Ok(())
}

fn cmd_optimize(cfg: &ExperimentConfig) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let world = build_world(cfg)?;
    let outcome = world.optimize_trigger()?;

    let trigger_path = dir.join(format!("trigger_{hash}.json"));
    let payload = trigger_json(&world, &outcome.best.trigger, &outcome.best.breakdown);
    std::fs::write(&trigger_path, serde_json::to_string_pretty(&payload)?)?;

    let trace_path = dir.join(format!("trace_{hash}.jsonl"));
    std::fs::write(&trace_path, outcome.trace.to_jsonl())?;

    println!(
        "optimized trigger {:?} objective {} after {} iterations",
        outcome.best.trigger.text(&world.vocab),
        outcome.best.breakdown.objective,
        outcome.iterations_run,
    );
    println!("wrote {}", trigger_path.display());
    println!("wrote {}", trace_path.display());
    Ok(())
}

fn cmd_evaluate(cfg: &ExperimentConfig, trigger_path: &PathBuf, export: bool) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let world = build_world(cfg)?;
    let trigger = load_trigger(trigger_path, &world)?;
    let kb = world.poisoned_kb(&trigger)?;
    let report = evaluate(&world, &kb, &trigger)?;
    let baseline = kbpoison::eval::baseline_accuracy(&world, &world.kb_clean)?;

    write_metrics(
        &dir,
        "metrics",
        &hash,
        &[
            ("attack".to_string(), report.clone()),
            // Baseline row reuses the schema; only acc is meaningful.
            (
                "non_attack_baseline".to_string(),
                MetricsReport {
                    asr_r: 0.0,
                    asr_a: 0.0,
                    asr_a_defined: false,
                    asr_t: 0.0,
                    acc: baseline,
                    ..report.clone()
                },
            ),
        ],
    )?;

    // Retrieval trace for the triggered eval set.
    let mut trace = String::from(trace_csv_header());
    trace.push('\n');
    let k = cfg.retrieval.k.min(kb.len());
    for pair in world.eval_pairs(&trigger)? {
        let emb = kbpoison::embedder::embed(&world.spec, &pair.triggered.token_ids)?;
        let result = retrieve(&kb, &emb, k)?;
        trace.push_str(&trace_csv_rows(&pair.triggered.scenario_id, &kb, &result));
    }
    let trace_path = dir.join(format!("retrieval_trace_{hash}.csv"));
    std::fs::write(&trace_path, trace)?;
    println!("wrote {}", trace_path.display());

    if export {
        let kb_path = dir.join(format!("kb_poisoned_{hash}.jsonl"));
        export_kb(&kb, &kb_path, &world.spec)?;
        println!("wrote {}", kb_path.display());
    }
    println!(
        "asr_r {} asr_a {} asr_t {} acc {} (baseline {})",
        report.asr_r, report.asr_a, report.asr_t, report.acc, baseline
    );
    Ok(())
}

fn parse_components(s: &str) -> Result<Vec<AblationComponent>, Error> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| AblationComponent::parse(p.trim()))
        .collect()
}

fn cmd_ablate(cfg: &ExperimentConfig, disable: Option<&str>) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let mut rows = Vec::new();
    match disable {
        Some(spec) => {
            let components = parse_components(spec)?;
            ablated_config(cfg, &components)?; // validate the combination early
            let run = ablate(cfg, &components)?;
            let label = if components.is_empty() {
                "full".to_string()
            } else {
                format!(
                    "without_{}",
                    components.iter().map(|c| c.name()).collect::<Vec<_>>().join("_")
                )
            };
            rows.push((label, run.report));
        }
        None => {
            let full = ablate(cfg, &[])?;
            rows.push(("full".to_string(), full.report));
            for component in [
                AblationComponent::Uniqueness,
                AblationComponent::Compactness,
                AblationComponent::Target,
                AblationComponent::Coherence,
            ] {
                let run = ablate(cfg, &[component])?;
                rows.push((format!("without_{}", component.name()), run.report));
            }
        }
    }
    write_metrics(&dir, "ablation", &hash, &rows)
}

fn cmd_sweep(cfg: &ExperimentConfig, axis: &str, values: &str) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let axis = SweepAxis::parse(axis)?;
    let values: Vec<usize> = values
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|e| Error::config(format!("sweep value {p:?}: {e}")))
        })
        .collect::<Result<_, _>>()?;
    let points = sweep(cfg, axis, &values)?;
    let csv = kbpoison::eval::sweep_csv(axis, &points);
    let path = dir.join(format!("sweep_{hash}.csv"));
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_transfer(cfg: &ExperimentConfig) -> Result<(), Error> {
    if cfg.transfer_embedders.is_empty() {
        return Err(Error::config(
            "transfer_embedders: transfer needs at least one extra embedder",
        ));
    }
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let mut embedders = vec![cfg.embedder];
    embedders.extend(cfg.transfer_embedders.iter().copied());
    let matrix = kbpoison::eval::transfer(cfg, &embedders)?;
    let path = dir.join(format!("transfer_{hash}.csv"));
    std::fs::write(&path, matrix.csv())?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_defend(cfg: &ExperimentConfig, trigger_path: &PathBuf, defenses: &str) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let world = build_world(cfg)?;
    let trigger = load_trigger(trigger_path, &world)?;
    let kb = world.poisoned_kb(&trigger)?;
    let mut csv = format!("{}\n", DefenseReport::csv_header());
    for name in defenses.split(',').filter(|p| !p.trim().is_empty()) {
        let kind = DefenseKind::parse(name.trim())?;
        let report = evaluate_under_defense(&world, &kb, &trigger, kind)?;
        println!(
            "{}: filtered {} post-defense asr_r {}",
            report.defense, report.filtered_fraction, report.report.asr_r
        );
        csv.push_str(&format!("{}\n", report.csv_row()));
    }
    let path = dir.join(format!("defense_{hash}.csv"));
    std::fs::write(&path, csv)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_project(cfg: &ExperimentConfig, trigger_path: &PathBuf) -> Result<(), Error> {
    let dir = ensure_output_dir(cfg)?;
    let hash = cfg.hash();
    let world = build_world(cfg)?;
    let trigger = load_trigger(trigger_path, &world)?;
    let kb = world.poisoned_kb(&trigger)?;
    let dataset = projection_dataset(&world, &kb, &trigger)?;
    let projected = kbpoison::eval::project(&dataset, 2)?;
    let path = dir.join(format!("projection_{hash}.csv"));
    std::fs::write(&path, projection_csv(&projected))?;
    println!("wrote {}", path.display());
    Ok(())
}
