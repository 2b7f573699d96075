//! Command-line verbs.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use phonconv::classify::NEAREST_PROTOTYPE;
use phonconv::config::FeatureConfig;
use phonconv::experiment::{
    generate_synthetic_cohort, report_from_archives, run_experiment, shadowing_domain,
    CohortGroup, CohortSpec, ExperimentScript, DEFAULT_BASELINE_UTTERANCES,
    DEFAULT_POST_UTTERANCES, DEFAULT_SHADOWING_UTTERANCES,
};
use phonconv::session::{verify_replay, SessionArchive};

use crate::app::router;
use crate::hub::Hub;

#[derive(Debug, Parser)]
#[command(name = "phonconv", version, about = "Adaptive spoken-dialogue server with phonetic convergence")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Re-run an archived session and check that it reproduces its event log.
    Replay {
        #[arg(long)]
        archive: PathBuf,
    },
    /// Run a shadowing experiment over a directory of utterance streams.
    Experiment(ExperimentArgs),
    /// Build a report from archived sessions.
    Report {
        #[arg(long)]
        archives: PathBuf,
        #[arg(long)]
        feature: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic participant cohort and its experiment domain.
    Cohort(CohortArgs),
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Feature configuration file; repeat for several. Defaults to the
    /// shipped configuration.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Dialogue domain file; repeat for several.
    #[arg(long, required = true)]
    pub domain: Vec<PathBuf>,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub domain: PathBuf,
    /// Directory of `*.jsonl` utterance streams, one per participant.
    #[arg(long)]
    pub responses: PathBuf,
    /// Output file of the report.
    #[arg(long)]
    pub report: PathBuf,
    /// Feature configuration; defaults to the shipped configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory to write one session archive per participant into.
    #[arg(long)]
    pub archives: Option<PathBuf>,
    /// Classifier kind trained on the stimuli when the config declares none
    /// for the target feature.
    #[arg(long, default_value = NEAREST_PROTOTYPE)]
    pub classifier: String,
}

#[derive(Debug, Args)]
pub struct CohortArgs {
    #[arg(long, default_value = "ae")]
    pub feature: String,
    /// Output directory for the streams, the design manifest and
    /// `domain.xml`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub participants: usize,
    /// Groups as `degree:proportion`, e.g. `0.05:0.23`.
    #[arg(long = "group", default_values_t = ["0.05:0.23".to_string(), "0.5:0.5".to_string(), "0.95:0.27".to_string()])]
    pub groups: Vec<String>,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_BASELINE_UTTERANCES)]
    pub baseline: usize,
    #[arg(long, default_value_t = DEFAULT_SHADOWING_UTTERANCES)]
    pub shadowing: usize,
    #[arg(long, default_value_t = DEFAULT_POST_UTTERANCES)]
    pub post: usize,
}

fn load_config(path: Option<&Path>) -> Result<FeatureConfig> {
    match path {
        Some(p) => FeatureConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(FeatureConfig::builtin()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub async fn serve(args: ServeArgs) -> Result<()> {
    let configs = if args.config.is_empty() {
        vec![FeatureConfig::builtin()]
    } else {
        args.config
            .iter()
            .map(|p| load_config(Some(p)))
            .collect::<Result<_>>()?
    };
    let domains = args.domain.iter().map(|p| read(p)).collect::<Result<_>>()?;
    let hub = Hub::new(configs, domains)?;
    log::info!(
        "configs {:?}, domains {:?}",
        hub.config_ids(),
        hub.domain_ids()
    );
    let addr: SocketAddr = format!("{}:{}", args.host, args.port)
        .parse()
        .context("bad host or port")?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    println!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(hub)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

pub fn replay(archive: &Path) -> Result<String> {
    let archive = SessionArchive::from_json(&read(archive)?)?;
    let session = verify_replay(&archive)?;
    Ok(format!(
        "session {}: {} turns, {} events replayed identically",
        session.id(),
        session.turns().len(),
        session.events().len()
    ))
}

pub fn experiment(args: &ExperimentArgs) -> Result<String> {
    let config = load_config(args.config.as_deref())?;
    let domain = read(&args.domain)?;
    let sources = ExperimentScript::load_sources(&args.responses)?;
    if sources.is_empty() {
        bail!("no *.jsonl streams in {}", args.responses.display());
    }
    let script = ExperimentScript::new(config, domain, &args.classifier, sources)?;
    let outcome = run_experiment(&script)?;
    if let Some(dir) = &args.archives {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for archive in &outcome.archives {
            let path = dir.join(format!("{}.json", archive.session_id));
            fs::write(&path, archive.to_json()).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    write_report(&args.report, &outcome.report.to_delimited_string())?;
    Ok(format!(
        "{} participants run, {} failed; feature {}; report in {}",
        outcome.archives.len(),
        outcome.report.failures.len(),
        script.feature_id,
        args.report.display()
    ))
}

fn write_report(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn report(archives: &Path, feature: &str, out: &Path) -> Result<String> {
    let mut paths: Vec<PathBuf> = fs::read_dir(archives)
        .with_context(|| format!("reading {}", archives.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut loaded = Vec::new();
    for path in &paths {
        loaded.push(
            SessionArchive::from_json(&read(path)?)
                .with_context(|| format!("loading {}", path.display()))?,
        );
    }
    if loaded.is_empty() {
        bail!("no *.json archives in {}", archives.display());
    }
    let report = report_from_archives(&loaded, feature)?;
    write_report(out, &report.to_delimited_string())?;
    Ok(format!(
        "{} archives, {} failed; report in {}",
        loaded.len(),
        report.failures.len(),
        out.display()
    ))
}

fn parse_group(raw: &str) -> Result<CohortGroup> {
    let (degree, proportion) = raw
        .split_once(':')
        .with_context(|| format!("group {raw:?} is not degree:proportion"))?;
    Ok(CohortGroup {
        degree: degree.trim().parse().with_context(|| format!("degree in {raw:?}"))?,
        proportion: proportion
            .trim()
            .parse()
            .with_context(|| format!("proportion in {raw:?}"))?,
    })
}

pub fn cohort(args: &CohortArgs) -> Result<String> {
    let config = load_config(args.config.as_deref())?;
    let def = config
        .feature(&args.feature)
        .with_context(|| format!("feature {:?} is not configured", args.feature))?;
    let spec = CohortSpec {
        feature_id: args.feature.clone(),
        participants: args.participants,
        groups: args.groups.iter().map(|g| parse_group(g)).collect::<Result<_>>()?,
        noise: args.noise,
        seed: args.seed,
        baseline_utterances: args.baseline,
        shadowing_utterances: args.shadowing,
        post_utterances: args.post,
    };
    let cohort = generate_synthetic_cohort(&spec, def)?;
    cohort.write_to(&args.out)?;
    let domain_path = args.out.join("domain.xml");
    fs::write(
        &domain_path,
        shadowing_domain(def, args.baseline, args.shadowing, args.post),
    )
    .with_context(|| format!("writing {}", domain_path.display()))?;
    Ok(format!(
        "{} participants (groups {:?}) and domain.xml written to {}",
        cohort.participants.len(),
        spec.group_sizes(),
        args.out.display()
    ))
}

pub async fn run(cli: Cli) -> Result<()> {
    let message = match cli.command {
        Command::Serve(args) => return serve(args).await,
        Command::Replay { archive } => replay(&archive)?,
        Command::Experiment(args) => experiment(&args)?,
        Command::Report {
            archives,
            feature,
            out,
        } => report(&archives, &feature, &out)?,
        Command::Cohort(args) => cohort(&args)?,
    };
    println!("{message}");
    Ok(())
}
