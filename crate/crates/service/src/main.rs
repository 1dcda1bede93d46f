use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dynmap_core::bus::read_scene_stream;
use dynmap_core::eval::{compute_metrics, render_table, run_eval, write_records, EvalError, EvalOptions, Pipeline, ReportConfig};
use dynmap_core::llm::BackendConfig;
use dynmap_core::pipeline::{render_stream, ScenePipeline};
use dynmap_core::qa::{generate_dataset, load_templates, read_dataset, write_dataset, GenOptions, TemplateSet};
use dynmap_service::{load_network, load_prompts, load_sim_config, QueryEngine, Service, ServiceConfig};

#[derive(Parser)]
#[command(name = "dynmap", version, about = "Cooperative-perception dynamic map with natural-language queries")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulation commands.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
    /// QA dataset commands.
    Qa {
        #[command(subcommand)]
        cmd: QaCmd,
    },
    /// Evaluation commands.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// Run the live scene service.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Answer one question against a freshly simulated scene.
    Ask(AskArgs),
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate and write the linguistic scene stream as JSONL.
    Run(SimArgs),
}

#[derive(Args)]
struct SimArgs {
    /// Simulation config (JSON); defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Road network (JSON); the bundled crossing when omitted.
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = dynmap_core::bus::DEFAULT_QUEUE_CAPACITY)]
    queue_capacity: usize,
    #[arg(long, default_value_t = dynmap_core::bus::DEFAULT_SCENE_HZ)]
    scene_hz: f64,
    #[arg(long, default_value_t = dynmap_core::pipeline::DEFAULT_AV_RANGE)]
    av_range: f64,
}

#[derive(Subcommand)]
enum QaCmd {
    /// Generate QA pairs from a scene stream.
    Generate(QaArgs),
}

#[derive(Args)]
struct QaArgs {
    #[arg(long)]
    scenes: PathBuf,
    /// Template library (JSONL); the built-in library when omitted.
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(short = 'n', long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Leave out the radius prefix.
    #[arg(long)]
    no_prefix: bool,
    /// Output file; `dataset.jsonl` next to the scenes when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Answer and grade a dataset.
    Run(EvalArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Scene stream the dataset was built from; `scenes.jsonl` next to the
    /// dataset when omitted.
    #[arg(long)]
    scenes: Option<PathBuf>,
    /// cop, osp1, osp2, osp3 or osp4.
    #[arg(long, default_value = "cop")]
    pipeline: String,
    /// Backend config (JSON).
    #[arg(long)]
    backend: PathBuf,
    #[arg(long)]
    network: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    /// Strip the radius prefix from every question.
    #[arg(long)]
    no_prefix: bool,
    /// Drop the restrictive existence rule from the classification prompt.
    #[arg(long)]
    no_rule: bool,
    /// Skip the enhancement call.
    #[arg(long)]
    no_enhance: bool,
    /// Concurrent requests; the backend's setting when omitted.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Output directory for grade records and the report; the dataset's
    /// directory when omitted.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AskArgs {
    question: String,
    /// Service config; a keyword-rule mock backend when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ego: Option<String>,
    /// Simulated seconds to run before answering.
    #[arg(long, default_value_t = 10.0)]
    warmup: f64,
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn sim_run(a: SimArgs) -> Result<()> {
    let sim = load_sim_config(a.config.as_deref())?;
    let network = Arc::new(load_network(a.network.as_deref())?);
    let opts = dynmap_core::pipeline::PipelineOptions {
        queue_capacity: a.queue_capacity,
        scene_hz: a.scene_hz,
        av_range: a.av_range,
        bus_latency_ms: 0.0,
    };
    let mut scenes = Vec::new();
    let world = ScenePipeline::new(sim, network, &opts)?.run(|s| scenes.push(s))?;
    write(&a.out, &render_stream(&scenes))?;
    let objects: usize = scenes.iter().map(|s| s.objects.len()).sum();
    eprintln!(
        "{} scenes ({:.1} objects/scene) over {:.1} s -> {}; {}",
        scenes.len(),
        objects as f64 / scenes.len().max(1) as f64,
        world.time(),
        a.out.display(),
        serde_json::to_string(world.stats())?
    );
    Ok(())
}

fn qa_generate(a: QaArgs) -> Result<()> {
    let scenes = read_scene_stream(&read(&a.scenes)?)?;
    let templates = match &a.templates {
        Some(p) => load_templates(p)?,
        None => TemplateSet::shipped(),
    };
    let opts = GenOptions {
        n: a.n,
        seed: a.seed,
        prefix_on: !a.no_prefix,
    };
    let ds = generate_dataset(&scenes, &templates, &opts)?;
    let out = a.out.unwrap_or_else(|| sibling(&a.scenes, "dataset.jsonl"));
    write(&out, &write_dataset(&ds.pairs))?;
    eprint!("{}", ds.histogram.render());
    eprintln!("{} pairs -> {}", ds.pairs.len(), out.display());
    Ok(())
}

fn eval_run(a: EvalArgs) -> Result<()> {
    let pipeline: Pipeline = a.pipeline.parse()?;
    let pairs = read_dataset(&read(&a.dataset)?)?;
    let scenes_path = a.scenes.clone().unwrap_or_else(|| sibling(&a.dataset, "scenes.jsonl"));
    let scenes: HashMap<u64, _> = read_scene_stream(&read(&scenes_path)?)?
        .into_iter()
        .map(|s| (s.scene_id, s))
        .collect();
    let network = load_network(a.network.as_deref())?;
    let cfg = BackendConfig::from_json(&read(&a.backend)?)?;
    let backend = cfg.build(&pairs, &network.road_aliases())?;
    let prompts = load_prompts(a.prompts.as_deref(), !a.no_rule)?;
    let opts = EvalOptions {
        pipeline,
        prefix_on: !a.no_prefix,
        enhance: !a.no_enhance,
        concurrency: a.concurrency.unwrap_or_else(|| cfg.concurrency()),
    };
    let out_dir = a.out_dir.unwrap_or_else(|| sibling(&a.dataset, ""));
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let tag = format!(
        "{pipeline}{}{}",
        if opts.prefix_on { "" } else { ".no-s" },
        if a.no_rule { ".no-r" } else { "" }
    );
    let records_path = out_dir.join(format!("grades.{tag}.jsonl"));
    let records = match run_eval(&pairs, &scenes, backend.as_ref(), &prompts, Some(&network), &opts) {
        Ok(r) => r,
        Err(EvalError::Fatal { error, records }) => {
            write(&records_path, &write_records(&records))?;
            bail!(
                "backend failed after {} of {} questions: {error} (partial records in {})",
                records.len(),
                pairs.len(),
                records_path.display()
            );
        }
        Err(e) => return Err(e.into()),
    };
    write(&records_path, &write_records(&records))?;
    let report = compute_metrics(
        &records,
        ReportConfig {
            model: backend.model_id(),
            pipeline,
            prefix_on: opts.prefix_on,
            rule_on: !a.no_rule,
        },
    )?;
    let report_path = out_dir.join(format!("report.{tag}.json"));
    write(&report_path, &serde_json::to_string_pretty(&report)?)?;
    print!("{}", render_table(&report));
    eprintln!("records -> {}\nreport -> {}", records_path.display(), report_path.display());
    Ok(())
}

async fn serve(config: PathBuf) -> Result<()> {
    let cfg = ServiceConfig::load(&config)?;
    let listen = cfg.listen.clone();
    let mut service = Service::start(cfg)?;
    let listener = tokio::net::TcpListener::bind(&listen)
        .await
        .with_context(|| format!("binding {listen}"))?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, service.router())
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    service.shutdown();
    Ok(())
}

fn ask(a: AskArgs) -> Result<()> {
    let cfg = match &a.config {
        Some(p) => ServiceConfig::load(p)?,
        None => ServiceConfig::new(BackendConfig::MockOracle { dataset: None }),
    };
    let network = Arc::new(load_network(cfg.network.as_deref())?);
    let mut sim = load_sim_config(cfg.sim_config.as_deref())?;
    sim.duration = a.warmup;
    let mut last = None;
    ScenePipeline::new(sim, Arc::clone(&network), &cfg.pipeline_options())?.run(|s| last = Some(s))?;
    let Some(scene) = last else {
        bail!("warm-up of {} s produced no scene", a.warmup);
    };
    let engine = QueryEngine::from_config(&cfg, network)?;
    let result = engine.answer(&a.question, a.ego.as_deref(), &scene)?;
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Sim { cmd: SimCmd::Run(a) } => sim_run(a),
        Cmd::Qa { cmd: QaCmd::Generate(a) } => qa_generate(a),
        Cmd::Eval { cmd: EvalCmd::Run(a) } => eval_run(a),
        Cmd::Serve { config } => tokio::runtime::Runtime::new()?.block_on(serve(config)),
        Cmd::Ask(a) => ask(a),
    }
}
