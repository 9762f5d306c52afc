//! `dbpsim`: batch runner, scenario validator, history reporter and server launcher.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dbpsim_core::engine::ScriptEntry;
use dbpsim_core::history::{LabelMetrics, Metrics};
use dbpsim_core::storage::{load_commands, load_history, save_history, TraceExport};
use dbpsim_core::{load_scenario, HistoryStore, Label, Mode, Session, SessionStatus};
use serde::{Deserialize, Serialize};

/// Exit codes are part of the interface.
mod exit {
    pub const COMPLETED: u8 = 0;
    pub const ERROR: u8 = 1;
    pub const STUCK: u8 = 2;
    pub const FAULTED: u8 = 3;
    pub const INCOMPLETE: u8 = 4;
}

#[derive(Parser)]
#[command(
    name = "dbpsim",
    version,
    about = "Rule- and context-driven business process simulation"
)]
struct Cli {
    /// TOML file supplying defaults for any flag (keys as flag names, `-` or `_`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario in batch mode.
    Run(RunArgs),
    /// Validate a scenario file.
    Validate {
        scenario: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Print history metrics.
    Report(ReportArgs),
    /// Label a recorded instance good, bad or unlabeled.
    Label(LabelArgs),
}

#[derive(Args)]
struct RunArgs {
    scenario: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Command script applied at step boundaries.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    /// Where to write the canonical trace export.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "DBPSIM_HISTORY")]
    history: Option<PathBuf>,
    /// Run this many instances with consecutive seeds.
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    host: Option<String>,
    #[arg(long, env = "DBPSIM_HISTORY")]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, env = "DBPSIM_HISTORY")]
    history: Option<PathBuf>,
    #[arg(long)]
    scenario_hash: Option<String>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct LabelArgs {
    instance_id: String,
    /// good, bad or unlabeled
    label: String,
    #[arg(long, env = "DBPSIM_HISTORY")]
    history: Option<PathBuf>,
    #[arg(long, default_value = "cli")]
    actor: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct Config {
    seed: Option<u64>,
    script: Option<PathBuf>,
    #[serde(alias = "max_steps")]
    max_steps: Option<u64>,
    out: Option<PathBuf>,
    history: Option<PathBuf>,
    runs: Option<u64>,
    json: Option<bool>,
    port: Option<u16>,
    host: Option<String>,
    #[serde(alias = "scenario_hash")]
    scenario_hash: Option<String>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("DBPSIM_LOG").unwrap_or_else(|_| "info".into()))
        .init();
    let cli = Cli::parse();
    let result = load_config(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::Run(a) => run(a, cfg),
        Command::Validate { scenario, json } => validate(&scenario, json),
        Command::Serve(a) => serve(a, cfg),
        Command::Report(a) => report(a, cfg),
        Command::Label(a) => label(a),
    });
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::ERROR)
        }
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn open_history(path: Option<&Path>) -> Result<HistoryStore> {
    match path {
        Some(p) if p.exists() => load_history(&read(p)?).with_context(|| format!("loading {}", p.display())),
        _ => Ok(HistoryStore::new()),
    }
}

fn write_history(path: &Path, store: &HistoryStore) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, save_history(store)).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn exit_code(status: SessionStatus) -> u8 {
    match status {
        SessionStatus::Completed => exit::COMPLETED,
        SessionStatus::Stuck => exit::STUCK,
        SessionStatus::Faulted => exit::FAULTED,
        _ => exit::INCOMPLETE,
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct RunSummary {
    instance_id: String,
    seed: u64,
    status: SessionStatus,
    steps: usize,
    total_time: u64,
    total_cost: f64,
    activity_sequence: Vec<String>,
    fault: Option<String>,
}

fn run(a: RunArgs, cfg: Config) -> Result<u8> {
    let scenario = match load_scenario(&read(&a.scenario)?) {
        Ok(s) => Arc::new(s),
        Err(e) => {
            eprintln!("{}: invalid scenario\n{e}", a.scenario.display());
            return Ok(exit::ERROR);
        }
    };
    let script: Vec<ScriptEntry> = match a.script.or(cfg.script) {
        Some(p) => {
            load_commands(&read(&p)?)
                .with_context(|| format!("loading {}", p.display()))?
                .commands
        }
        None => Vec::new(),
    };
    let history_path = a.history.or(cfg.history);
    let mut store = open_history(history_path.as_deref())?;
    let max_steps = a.max_steps.or(cfg.max_steps);
    let out = a.out.or(cfg.out);
    let runs = a.runs.or(cfg.runs).unwrap_or(1);
    let json = a.json || cfg.json.unwrap_or(false);
    let first_seed = a.seed.or(cfg.seed).unwrap_or_else(|| scenario.default_seed());
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    if runs > 1 && out.is_some() {
        bail!("--out needs a single run");
    }

    let mut summaries = Vec::new();
    let mut worst = exit::COMPLETED;
    for k in 0..runs {
        let seed = first_seed.wrapping_add(k);
        let mut session = Session::new(scenario.clone(), store.allocate_instance_id(), seed, Mode::Batch);
        session.queue_script(script.iter().cloned());
        let status = session.run(max_steps, &store);
        if let Some(path) = &out {
            std::fs::write(path, TraceExport::from_session(&session).to_json())
                .with_context(|| format!("writing {}", path.display()))?;
        }
        if let Some(inst) = session.to_historical() {
            store.record(inst)?;
        }
        worst = worst.max(exit_code(status));
        summaries.push(RunSummary {
            instance_id: session.instance_id().to_owned(),
            seed,
            status,
            steps: session.trace().len(),
            total_time: session.total_time(),
            total_cost: session.total_cost(),
            activity_sequence: session.activity_sequence().to_vec(),
            fault: session.fault().map(ToString::to_string),
        });
    }
    if let Some(p) = &history_path {
        write_history(p, &store)?;
    }

    if json {
        let body = if summaries.len() == 1 {
            serde_json::to_string_pretty(&summaries[0])?
        } else {
            serde_json::to_string_pretty(&summaries)?
        };
        println!("{body}");
    } else if summaries.len() == 1 {
        let s = &summaries[0];
        println!(
            "{} {:?} steps={} time={} cost={} sequence={}",
            s.instance_id,
            s.status,
            s.steps,
            s.total_time,
            s.total_cost,
            s.activity_sequence.join(",")
        );
        if let Some(f) = &s.fault {
            println!("fault: {f}");
        }
    } else {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for s in &summaries {
            *counts.entry(format!("{:?}", s.status)).or_default() += 1;
        }
        let parts: Vec<String> = counts.iter().map(|(k, v)| format!("{k}={v}")).collect();
        println!("{} runs: {}", summaries.len(), parts.join(" "));
    }
    Ok(worst)
}

fn validate(path: &Path, json: bool) -> Result<u8> {
    match load_scenario(&read(path)?) {
        Ok(s) => {
            if json {
                let body = serde_json::json!({
                    "valid": true,
                    "scenarioHash": s.hash,
                    "activities": s.activities.len(),
                    "rules": s.rules.len(),
                });
                println!("{}", serde_json::to_string_pretty(&body)?);
            } else {
                println!(
                    "{}: ok ({} activities, {} rules, hash {})",
                    path.display(),
                    s.activities.len(),
                    s.rules.len(),
                    s.hash
                );
            }
            Ok(exit::COMPLETED)
        }
        Err(e) => {
            if json {
                let body = serde_json::json!({ "valid": false, "diagnostics": e.diagnostics });
                println!("{}", serde_json::to_string_pretty(&body)?);
            } else {
                for d in &e.diagnostics {
                    eprintln!("{}:{d}", path.display());
                }
            }
            Ok(exit::ERROR)
        }
    }
}

fn serve(a: ServeArgs, cfg: Config) -> Result<u8> {
    let history_path = a.history.or(cfg.history);
    let store = open_history(history_path.as_deref())?;
    let host = a.host.or(cfg.host).unwrap_or_else(|| "127.0.0.1".into());
    let port = a.port.or(cfg.port).unwrap_or(8080);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        let addr = listener.local_addr()?;
        // Printed on stdout so callers binding port 0 can find the address.
        println!("listening on http://{addr}");
        let state = dbpsim_server::AppState::new(store, history_path);
        dbpsim_server::serve(listener, state, shutdown_signal()).await?;
        Ok::<_, anyhow::Error>(())
    })?;
    Ok(exit::COMPLETED)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

fn fmt_aggregate(a: Option<dbpsim_core::history::Aggregate>) -> [String; 3] {
    match a {
        Some(a) => [a.mean, a.min, a.max].map(|v| {
            let t = format!("{v:.3}");
            t.trim_end_matches('0').trim_end_matches('.').to_owned()
        }),
        None => ["-", "-", "-"].map(String::from),
    }
}

fn metrics_rows(m: &Metrics) -> Vec<(String, &LabelMetrics)> {
    let mut rows = vec![("all".to_string(), &m.all)];
    for (label, lm) in &m.by_label {
        rows.push((label_name(*label).to_owned(), lm));
    }
    rows
}

fn label_name(label: Label) -> &'static str {
    match label {
        Label::GoodPractice => "good",
        Label::BadPractice => "bad",
        Label::Unlabeled => "unlabeled",
    }
}

fn report(a: ReportArgs, cfg: Config) -> Result<u8> {
    let history_path = a.history.or(cfg.history);
    let store = open_history(history_path.as_deref())?;
    let json = a.json || cfg.json.unwrap_or(false);
    let hashes: Vec<String> = match a.scenario_hash.or(cfg.scenario_hash) {
        Some(h) => {
            if store.scenario(&h).next().is_none() {
                eprintln!("warning: no instances recorded for scenario {h}");
                Vec::new()
            } else {
                vec![h]
            }
        }
        None => store.scenario_hashes().map(str::to_owned).collect(),
    };
    let metrics: Vec<Metrics> = hashes.iter().map(|h| store.metrics(h)).collect();
    if json {
        println!("{}", serde_json::to_string_pretty(&metrics)?);
        return Ok(exit::COMPLETED);
    }
    println!(
        "{:<16} {:<14} {:>6} {:>10} {:>8} {:>8} {:>10} {:>8} {:>8}",
        "scenario", "label", "count", "time.mean", "time.min", "time.max", "cost.mean", "cost.min", "cost.max"
    );
    for m in &metrics {
        for (label, lm) in metrics_rows(m) {
            let [tm, tn, tx] = fmt_aggregate(lm.total_time);
            let [cm, cn, cx] = fmt_aggregate(lm.total_cost);
            println!(
                "{:<16} {:<14} {:>6} {:>10} {:>8} {:>8} {:>10} {:>8} {:>8}",
                &m.scenario_hash[..m.scenario_hash.len().min(16)],
                label,
                lm.count,
                tm,
                tn,
                tx,
                cm,
                cn,
                cx
            );
        }
    }
    Ok(exit::COMPLETED)
}

fn label(a: LabelArgs) -> Result<u8> {
    let Some(path) = a.history else {
        bail!("no history file (use --history or DBPSIM_HISTORY)");
    };
    let mut store = open_history(Some(&path))?;
    let label = dbpsim_server::parse_label(&a.label)
        .with_context(|| format!("unknown label '{}' (good|bad|unlabeled)", a.label))?;
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    store.label(&a.instance_id, label, &a.actor, now)?;
    write_history(&path, &store)?;
    println!("{} labelled {}", a.instance_id, label_name(label));
    Ok(exit::COMPLETED)
}
