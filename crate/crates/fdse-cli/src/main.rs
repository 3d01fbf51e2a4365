//! Command-line front end: dataset generation, federated training runs,
//! label-free adaptation, and run comparison reports.
//!
//! Exit codes: 0 success, 2 configuration errors, 3 data errors,
//! 4 runtime errors.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{resolve_out, ExperimentConfig};
use fdse_core::data::{derive_rng, generate_benchmark, load_dataset, save_dataset, Benchmark};
use fdse_core::error::{ErrorCategory, FdseError, Result};
use fdse_core::federation::{
    accuracy_counts, adapt_consistency, adapt_stats, AdaptTrace, FederatedRun, Method,
    RoundMetrics, RunSummary, SharedAggregator,
};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const RUN_SCHEMA: &str = "fdse-run/v1";

#[derive(Parser)]
#[command(name = "fdse", version, about = "Desk-scale federated learning simulator with domain-shift-erasing layer decomposition")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain dataset directory.
    Generate(GenerateArgs),
    /// Train one federated method and persist metrics and checkpoints.
    Train(TrainArgs),
    /// Adapt a trained run to a target domain without labels.
    Adapt(AdaptArgs),
    /// Summarize one or more run directories into a comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Experiment config TOML; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Destination dataset directory.
    #[arg(long)]
    out: String,
    /// Generator seed (overrides data_seed from the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Use only the first N configured domains.
    #[arg(long)]
    domains: Option<usize>,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory (overrides out_dir from the config).
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Client-task thread count; results are identical for any value.
    #[arg(long)]
    parallel_clients: Option<usize>,
    /// Rule for shared tensors: min_norm (default) or average.
    #[arg(long)]
    shared_aggregator: Option<SharedAggregator>,
    /// Dataset directory (overrides the config; otherwise generated).
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    data_seed: Option<u64>,
    /// Domain id held out of training for later adaptation.
    #[arg(long)]
    holdout: Option<String>,
    /// Continue from a checkpoint file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Reuse a run directory that already holds metrics.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct AdaptArgs {
    /// Run directory produced by `fdse train`.
    #[arg(long)]
    run: String,
    /// Target domain id from the run's dataset.
    #[arg(long)]
    target: String,
    /// Adaptation epochs (passes over the unlabeled target data); 0 leaves
    /// the model untouched.
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    /// Adaptation learning rate; defaults to 0.1x the training rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Report file (defaults to <run>/adapt_<target>.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to compare.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Per-domain series CSV destination.
    #[arg(long, default_value = "report_series.csv")]
    series: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct SummaryFile {
    schema: String,
    holdout: Option<String>,
    /// Domain ids in client order.
    train_domains: Vec<String>,
    summary: RunSummary,
}

#[derive(Debug, Serialize)]
struct AdaptReport {
    schema: String,
    target: String,
    method: Method,
    epochs: usize,
    lr: f64,
    seen_during_training: bool,
    before_accuracy: f64,
    after_accuracy: f64,
    /// Present for consistency-driven adaptation.
    trace: Option<AdaptTrace>,
    /// Batches consumed per statistics pass, for stat-refresh adaptation.
    stat_batches: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Adapt(a) => cmd_adapt(a),
        Cmd::Report(a) => cmd_report(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e.category() {
                ErrorCategory::Config => ExitCode::from(2),
                ErrorCategory::Data => ExitCode::from(3),
                ErrorCategory::Runtime => ExitCode::from(4),
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn dir_non_empty(path: &Path) -> bool {
    std::fs::read_dir(path).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn build_benchmark(cfg: &ExperimentConfig) -> Result<Benchmark> {
    match &cfg.dataset {
        Some(dir) => load_dataset(Path::new(dir)),
        None => generate_benchmark(&cfg.generator, &cfg.domains, cfg.data_seed),
    }
}

/// Split the benchmark into training domains and the held-out one.
fn split_holdout(bench: Benchmark, holdout: &Option<String>) -> Result<(Benchmark, Option<fdse_core::data::DomainData>)> {
    let Some(id) = holdout else { return Ok((bench, None)) };
    let ids: Vec<String> = bench.domains.iter().map(|d| d.spec.id.clone()).collect();
    if !ids.contains(id) {
        return Err(FdseError::Config(format!(
            "holdout '{}' not in dataset (available: {})",
            id,
            ids.join(", ")
        )));
    }
    let mut train = Vec::new();
    let mut held = None;
    for d in bench.domains {
        if &d.spec.id == id {
            held = Some(d);
        } else {
            train.push(d);
        }
    }
    if train.is_empty() {
        return Err(FdseError::Config("holding out the only domain leaves no clients".into()));
    }
    Ok((Benchmark { num_classes: bench.num_classes, shape: bench.shape, domains: train }, held))
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.data_seed = seed;
    }
    if let Some(n) = a.domains {
        if n == 0 || n > cfg.domains.len() {
            return Err(FdseError::Config(format!(
                "--domains {} out of range (config has {})",
                n,
                cfg.domains.len()
            )));
        }
        cfg.domains.truncate(n);
    }
    cfg.holdout = None;
    cfg.validate()?;

    let out = resolve_out(&a.out);
    if dir_non_empty(&out) && !a.force {
        return Err(FdseError::Config(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let bench = generate_benchmark(&cfg.generator, &cfg.domains, cfg.data_seed)?;
    save_dataset(&out, &bench)?;
    cfg.save(&out.join("generate-config.toml"))?;

    println!(
        "dataset: {} domains x {} classes, sample shape {:?}, seed {}",
        bench.domains.len(),
        bench.num_classes,
        bench.shape,
        cfg.data_seed
    );
    for d in &bench.domains {
        let data = d.train.features.data();
        let n = data.len() as f64;
        let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = data.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / n;
        println!(
            "  {}: angle {:.3} gain {:?} offset {:?} noise {:.3} | train mean {:+.4} std {:.4}",
            d.spec.id,
            d.spec.angle,
            d.spec.gain,
            d.spec.offset,
            d.spec.noise,
            mean,
            var.sqrt()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn apply_train_overrides(cfg: &mut ExperimentConfig, a: &TrainArgs) {
    if let Some(v) = a.method {
        cfg.trainer.method = v;
    }
    if let Some(v) = a.rounds {
        cfg.trainer.rounds = v;
    }
    if let Some(v) = a.seed {
        cfg.trainer.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.trainer.lr = v;
    }
    if let Some(v) = a.lambda {
        cfg.trainer.lambda = v;
    }
    if let Some(v) = a.tau {
        cfg.trainer.tau = v;
    }
    if let Some(v) = a.local_epochs {
        cfg.trainer.local_epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.trainer.batch_size = v;
    }
    if let Some(v) = a.eval_every {
        cfg.trainer.eval_every = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.trainer.checkpoint_every = v;
    }
    if let Some(v) = a.parallel_clients {
        cfg.trainer.parallel_clients = v;
    }
    if let Some(v) = a.shared_aggregator {
        cfg.trainer.shared_aggregator = v;
    }
    if let Some(v) = &a.dataset {
        cfg.dataset = Some(v.clone());
    }
    if let Some(v) = a.data_seed {
        cfg.data_seed = v;
    }
    if let Some(v) = &a.holdout {
        cfg.holdout = Some(v.clone());
    }
    if let Some(v) = &a.out {
        cfg.out_dir = Some(v.clone());
    }
}

fn jsonl_writer(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(path)
        .map_err(|e| FdseError::io(path.display().to_string(), e))?;
    Ok(std::io::BufWriter::new(f))
}

fn write_jsonl<T: Serialize>(w: &mut impl Write, record: &T, path: &Path) -> Result<()> {
    let line = serde_json::to_string(record)
        .map_err(|e| FdseError::parse(path.display().to_string(), e.to_string()))?;
    writeln!(w, "{}", line).map_err(|e| FdseError::io(path.display().to_string(), e))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    apply_train_overrides(&mut cfg, &a);
    cfg.validate()?;

    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| FdseError::Config("no run directory: pass --out or set out_dir".into()))?;
    let out = resolve_out(&out_dir);
    let metrics_path = out.join("metrics.jsonl");
    if metrics_path.exists() && !a.force {
        return Err(FdseError::Config(format!(
            "{} already holds a run; pass --force to overwrite",
            out.display()
        )));
    }
    std::fs::create_dir_all(&out).map_err(|e| FdseError::io(out.display().to_string(), e))?;

    if cfg.trainer.parallel_clients > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.trainer.parallel_clients)
            .build_global()
            .ok();
    }

    let bench = build_benchmark(&cfg)?;
    let (train_bench, _) = split_holdout(bench, &cfg.holdout)?;
    let arch = cfg.resolve_arch(train_bench.num_classes);
    let train_domains: Vec<String> =
        train_bench.domains.iter().map(|d| d.spec.id.clone()).collect();

    cfg.save(&out.join("config.toml"))?;
    println!("resolved config written to {}", out.join("config.toml").display());

    let mut run = FederatedRun::<f32>::new(cfg.trainer.clone(), arch, &train_bench)?;
    if let Some(ckpt) = &a.resume {
        run.load_checkpoint(ckpt)?;
        println!("resumed from {} at round {}", ckpt.display(), run.round);
    }

    let mut metrics_w = jsonl_writer(&metrics_path)?;
    let agg_path = out.join("aggregation.jsonl");
    let mut agg_w = if cfg.trainer.method == Method::Fdse { Some(jsonl_writer(&agg_path)?) } else { None };

    if cfg.trainer.rounds == 0 {
        let m = run.evaluate_only()?;
        write_jsonl(&mut metrics_w, &m, &metrics_path)?;
        print_round(&m);
    }
    while run.round < cfg.trainer.rounds {
        let (m, report) = run.step_round()?;
        write_jsonl(&mut metrics_w, &m, &metrics_path)?;
        if let (Some(w), Some(rep)) = (agg_w.as_mut(), report.as_ref()) {
            write_jsonl(w, rep, &agg_path)?;
        }
        if m.val_avg.is_some() {
            print_round(&m);
        }
        if cfg.trainer.checkpoint_every > 0 && run.round % cfg.trainer.checkpoint_every == 0 {
            run.save_checkpoint(&out.join(format!("ckpt_round{}.tb", run.round)))?;
        }
    }
    metrics_w.flush().map_err(|e| FdseError::io(metrics_path.display().to_string(), e))?;
    if let Some(w) = agg_w.as_mut() {
        w.flush().map_err(|e| FdseError::io(agg_path.display().to_string(), e))?;
    }

    let summary = run.summary();
    if summary.best_round.is_some() {
        run.restore_best()?;
        run.save_checkpoint(&out.join("best.tb"))?;
    }
    let sf = SummaryFile {
        schema: RUN_SCHEMA.to_string(),
        holdout: cfg.holdout.clone(),
        train_domains,
        summary: summary.clone(),
    };
    let sp = out.join("summary.json");
    let text = serde_json::to_string_pretty(&sf)
        .map_err(|e| FdseError::parse(sp.display().to_string(), e.to_string()))?;
    std::fs::write(&sp, text).map_err(|e| FdseError::io(sp.display().to_string(), e))?;

    match (summary.best_round, summary.best_val_avg) {
        (Some(r), Some(v)) => println!(
            "{}: best round {} | val AVG {:.2}% | test ALL {} AVG {}",
            summary.method,
            r,
            v * 100.0,
            fmt_pct(summary.test_all_at_best),
            fmt_pct(summary.test_avg_at_best),
        ),
        _ => println!("{}: no evaluated rounds", summary.method),
    }
    println!("run artifacts in {}", out.display());
    Ok(())
}

fn fmt_pct(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{:.2}%", x * 100.0),
        None => "-".to_string(),
    }
}

fn print_round(m: &RoundMetrics) {
    println!(
        "round {:>4} | lr {:.5} | val AVG {} | test ALL {} AVG {}",
        m.round,
        m.lr,
        fmt_pct(m.val_avg),
        fmt_pct(m.test_all),
        fmt_pct(m.test_avg),
    );
}

fn cmd_adapt(a: AdaptArgs) -> Result<()> {
    let run_dir = resolve_out(&a.run);
    let cfg = ExperimentConfig::load(&run_dir.join("config.toml"))?;
    let bench = build_benchmark(&cfg)?;
    let all_ids: Vec<String> = bench.domains.iter().map(|d| d.spec.id.clone()).collect();
    if !all_ids.contains(&a.target) {
        return Err(FdseError::Config(format!(
            "target '{}' not in dataset (available: {})",
            a.target,
            all_ids.join(", ")
        )));
    }
    let target = bench.domains.iter().find(|d| d.spec.id == a.target).unwrap().clone();
    let (train_bench, _) = split_holdout(bench, &cfg.holdout)?;
    let arch = cfg.resolve_arch(train_bench.num_classes);

    let mut run = FederatedRun::<f32>::new(cfg.trainer.clone(), arch, &train_bench)?;
    let best = run_dir.join("best.tb");
    if !best.exists() {
        return Err(FdseError::Config(format!(
            "{} has no best.tb; train to completion first",
            run_dir.display()
        )));
    }
    run.load_checkpoint(&best)?;

    let seen = train_bench.domains.iter().position(|d| d.spec.id == a.target);
    let mut model = match seen {
        Some(k) => run.assemble(k)?,
        None => run.unseen_model()?,
    };

    let (bc, bt) = accuracy_counts(&mut model, &target.test)?;
    let before = bc as f64 / bt as f64;
    let lr = a.lr.unwrap_or(0.1 * cfg.trainer.lr);

    let mut trace = None;
    let mut stat_batches = None;
    if a.epochs > 0 {
        match cfg.trainer.method {
            Method::Fdse => {
                let mut rng = derive_rng(cfg.trainer.seed, &[4]);
                // Adaptation is label-free and runs on the data being
                // evaluated: the target domain's test split.
                trace = Some(adapt_consistency(
                    &mut model,
                    &target.test,
                    a.epochs,
                    lr,
                    &cfg.trainer,
                    &mut rng,
                )?);
            }
            _ => {
                let mut total = 0;
                for _ in 0..a.epochs {
                    total = adapt_stats(&mut model, &target.test, cfg.trainer.batch_size)?;
                }
                stat_batches = Some(total);
            }
        }
    }
    let (ac, at) = accuracy_counts(&mut model, &target.test)?;
    let after = ac as f64 / at as f64;

    let report = AdaptReport {
        schema: RUN_SCHEMA.to_string(),
        target: a.target.clone(),
        method: cfg.trainer.method,
        epochs: a.epochs,
        lr,
        seen_during_training: seen.is_some(),
        before_accuracy: before,
        after_accuracy: after,
        trace,
        stat_batches,
    };
    let out = a.out.unwrap_or_else(|| run_dir.join(format!("adapt_{}.json", a.target)));
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| FdseError::parse(out.display().to_string(), e.to_string()))?;
    std::fs::write(&out, text).map_err(|e| FdseError::io(out.display().to_string(), e))?;

    println!(
        "adapt {} -> {}: accuracy {:.2}% -> {:.2}% ({} epochs, lr {:.6})",
        report.method,
        report.target,
        before * 100.0,
        after * 100.0,
        report.epochs,
        report.lr
    );
    if let Some(t) = &report.trace {
        let fmt: Vec<String> = t.epoch_loss.iter().map(|v| format!("{:.6}", v)).collect();
        println!("consistency loss before adaptation, then after each epoch: [{}]", fmt.join(", "));
    }
    println!("wrote {}", out.display());
    Ok(())
}

struct RunRecord {
    dir: String,
    summary: SummaryFile,
    rounds: Vec<RoundMetrics>,
}

fn load_run(dir: &Path) -> Result<RunRecord> {
    let sp = dir.join("summary.json");
    let disp = sp.display().to_string();
    let text = std::fs::read_to_string(&sp).map_err(|e| FdseError::io(&disp, e))?;
    let summary: SummaryFile =
        serde_json::from_str(&text).map_err(|e| FdseError::parse(&disp, e.to_string()))?;
    if summary.schema != RUN_SCHEMA {
        return Err(FdseError::parse(
            &disp,
            format!("schema '{}', expected '{}'", summary.schema, RUN_SCHEMA),
        ));
    }
    let mp = dir.join("metrics.jsonl");
    let mdisp = mp.display().to_string();
    let text = std::fs::read_to_string(&mp).map_err(|e| FdseError::io(&mdisp, e))?;
    let mut rounds = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let m: RoundMetrics = serde_json::from_str(line)
            .map_err(|e| FdseError::parse(&mdisp, format!("line {}: {}", i + 1, e)))?;
        rounds.push(m);
    }
    Ok(RunRecord { dir: dir.display().to_string(), summary, rounds })
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs: Vec<RunRecord> = a.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;

    let header = ["run", "method", "rounds", "best", "val AVG", "test ALL", "test AVG"];
    let mut rows: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in &runs {
        let s = &r.summary.summary;
        rows.push(vec![
            r.dir.clone(),
            s.method.to_string(),
            s.rounds_run.to_string(),
            s.best_round.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
            fmt_pct(s.best_val_avg),
            fmt_pct(s.test_all_at_best),
            fmt_pct(s.test_avg_at_best),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    for row in &rows {
        let line: Vec<String> =
            row.iter().zip(&widths).map(|(cell, w)| format!("{:<width$}", cell, width = w)).collect();
        println!("{}", line.join("  "));
    }

    // Per-domain breakdown at each run's best round.
    for r in &runs {
        let Some(best) = r.summary.summary.best_round else { continue };
        let Some(m) = r.rounds.iter().find(|m| m.round == best) else { continue };
        let cells: Vec<String> = m
            .clients
            .iter()
            .map(|c| {
                let id = r
                    .summary
                    .train_domains
                    .get(c.client)
                    .cloned()
                    .unwrap_or_else(|| format!("client{}", c.client));
                format!("{} {}", id, fmt_pct(c.test_accuracy))
            })
            .collect();
        println!("{} per-domain test at round {}: {}", r.dir, best, cells.join(" | "));
    }

    let series = resolve_out(&a.series);
    let sdisp = series.display().to_string();
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&series).map_err(|e| FdseError::io(&sdisp, e))?,
    );
    writeln!(w, "run,method,round,client,domain,val_accuracy,test_accuracy")
        .map_err(|e| FdseError::io(&sdisp, e))?;
    for r in &runs {
        for m in &r.rounds {
            for c in &m.clients {
                let (Some(va), Some(ta)) = (c.val_accuracy, c.test_accuracy) else { continue };
                let id = r
                    .summary
                    .train_domains
                    .get(c.client)
                    .cloned()
                    .unwrap_or_else(|| format!("client{}", c.client));
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    r.dir, r.summary.summary.method, m.round, c.client, id, va, ta
                )
                .map_err(|e| FdseError::io(&sdisp, e))?;
            }
        }
    }
    w.flush().map_err(|e| FdseError::io(&sdisp, e))?;
    println!("series written to {}", series.display());
    Ok(())
}
