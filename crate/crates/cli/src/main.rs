mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use restraint_core::analysis::{
    cost_compare, pareto_point, pareto_rerank, tier_report, write_csv, Oracle, ParetoPoint, Report,
    SweepMode,
};
use restraint_core::emit::{
    emit_dpo_pairs, emit_rloo, emit_sft, write_jsonl, EmitManifest, EmitOptions,
};
use restraint_core::query::{read_queries, write_queries};
use restraint_core::record::read_records;
use restraint_core::runner::{run_batch, search_all, BatchOptions, RunManifest};
use restraint_core::search::select_best;
use restraint_core::sim::{make_world, SimBackend, SimWorld, TierMix, WorldSpec};
use restraint_core::{
    HttpBackend, LanguageModel, Query, ReplayBackend, ReplayScript, SearchConfig, SearchMode,
    SearchRecord, TemplateSet, Tier,
};

#[derive(Parser)]
#[command(
    name = "restraint",
    version,
    about = "Self-restraining search, dataset emission and reports"
)]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search every query and write records plus a manifest.
    Run(RunArgs),
    /// Turn records into training data.
    Emit(EmitArgs),
    /// Sweep the target accuracy.
    Pareto(ParetoArgs),
    #[command(subcommand)]
    Report(ReportCommand),
    #[command(subcommand)]
    Simulate(SimulateCommand),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Sim,
    Replay,
    Http,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Iterative,
    Wide,
}

#[derive(Args, Clone)]
struct SearchArgs {
    /// JSON or TOML file mirroring the search config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendKind,
    #[arg(long)]
    rho_star: Option<f64>,
    /// Claim threshold for rewrite prompts (defaults to the target accuracy).
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    iterations: Option<u32>,
    #[arg(long)]
    width: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "biography")]
    task: String,
    /// Assess every claim occurrence instead of caching per query.
    #[arg(long)]
    no_cache: bool,
    /// Directory of template overrides.
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Script for the replay backend.
    #[arg(long)]
    replay_script: Option<PathBuf>,
    /// World file for the simulator (generated from the seed otherwise).
    #[arg(long)]
    world: Option<PathBuf>,
    /// Entities in a generated world.
    #[arg(long, default_value_t = 100)]
    world_entities: usize,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// JSONL query file; the simulator can generate queries from its world.
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// Skip queries already in the output file.
    #[arg(long)]
    resume: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmitKind {
    Sft,
    Dpo,
    Rloo,
}

#[derive(Args)]
struct EmitArgs {
    #[arg(value_enum)]
    kind: EmitKind,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Search config (for the selection objective).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Abstention text; `{task_phrase}` is substituted.
    #[arg(long)]
    abstention: Option<String>,
    /// Use the safe write prompt as the training prompt.
    #[arg(long)]
    safe_prompt: bool,
}

#[derive(Args)]
struct ParetoArgs {
    /// Records to re-rank. Required unless --full.
    #[arg(long)]
    records: Option<PathBuf>,
    #[arg(
        long = "rho",
        value_delimiter = ',',
        default_value = "0.2,0.35,0.5,0.65,0.8"
    )]
    rho: Vec<f64>,
    /// Run a separate search per target instead of re-ranking.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long)]
    queries: Option<PathBuf>,
    #[arg(long)]
    max_queries: Option<usize>,
    #[arg(long, default_value_t = 4)]
    workers: usize,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Utility, accuracy, abstention and length per popularity tier.
    Tiers {
        #[arg(long)]
        records: PathBuf,
        /// World to judge claims with; expected accuracy is reported without it.
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Token usage of two runs over the same queries.
    Cost {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SimulateCommand {
    /// Generate a world file.
    Make {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        entities: usize,
        #[arg(long, default_value_t = 0.1)]
        invented_fraction: f64,
        #[arg(long, default_value_t = 6)]
        facts_per_entity: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a world file.
    Inspect {
        #[arg(long)]
        world: PathBuf,
    },
    /// Write one query per entity.
    Queries {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value = "biography")]
        task: String,
        #[arg(long)]
        tier: Option<Tier>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match cli.command {
        Command::Run(args) => run(args),
        Command::Emit(args) => emit(args),
        Command::Pareto(args) => pareto(args),
        Command::Report(cmd) => report(cmd),
        Command::Simulate(cmd) => simulate(cmd),
    }
}

/// Everything a search needs, resolved from the config file and flags.
struct Setup {
    config: SearchConfig,
    templates: TemplateSet,
    lm: Box<dyn LanguageModel>,
    world: Option<Arc<SimWorld>>,
}

fn resolve_config(args: &SearchArgs) -> Result<(SearchConfig, config::FileConfig)> {
    let file = match &args.config {
        Some(p) => config::load(p)?,
        None => config::FileConfig::default(),
    };
    let mut c = file.search.clone();
    if let Some(mode) = args.mode {
        c.mode = match mode {
            ModeArg::Iterative => SearchMode::Iterative,
            ModeArg::Wide => SearchMode::Wide,
        };
        if c.mode == SearchMode::Wide && args.iterations.is_none() {
            c.max_iterations = 1;
        }
    }
    if let Some(v) = args.rho_star {
        c.rho_star = v;
    }
    if let Some(v) = args.threshold {
        c.claim_threshold = Some(v);
    }
    if let Some(v) = args.iterations {
        c.max_iterations = v;
    }
    if let Some(v) = args.width {
        c.width = v;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if args.no_cache {
        c.cache_enabled = false;
    }
    c.validate().context("invalid search config")?;
    Ok((c, file))
}

fn templates_for(task: &str, dir: Option<&Path>) -> Result<TemplateSet> {
    Ok(match dir {
        Some(d) => TemplateSet::load_dir(task, d)?,
        None => TemplateSet::builtin(task)?,
    })
}

fn setup(args: &SearchArgs) -> Result<Setup> {
    let (config, file) = resolve_config(args)?;
    let templates = templates_for(&args.task, args.templates.as_deref())?;
    let mut world = None;
    let lm: Box<dyn LanguageModel> = match args.backend {
        BackendKind::Sim => {
            let w = match (&args.world, &file.world) {
                (Some(path), _) => SimWorld::load(path)?,
                (None, Some(spec)) => make_world(spec)?,
                (None, None) => make_world(&WorldSpec {
                    seed: config.seed,
                    n_entities: args.world_entities,
                    ..WorldSpec::default()
                })?,
            };
            let w = Arc::new(w);
            world = Some(w.clone());
            Box::new(SimBackend::new(w, file.sim.clone()))
        }
        BackendKind::Replay => {
            let path = args
                .replay_script
                .as_ref()
                .context("--backend replay needs --replay-script")?;
            Box::new(ReplayBackend::new(ReplayScript::from_file(path)?))
        }
        BackendKind::Http => {
            let mut http = file.http.clone();
            if let Some(u) = &args.base_url {
                http.base_url = u.clone();
            }
            if let Some(m) = &args.model {
                http.model = m.clone();
            }
            Box::new(HttpBackend::new(http))
        }
    };
    Ok(Setup {
        config,
        templates,
        lm,
        world,
    })
}

fn load_queries(
    path: Option<&Path>,
    setup: &Setup,
    task: &str,
    max: Option<usize>,
) -> Result<Vec<Query>> {
    let mut queries = match (path, &setup.world) {
        (Some(p), _) => read_queries(p)?,
        (None, Some(w)) => w.queries(task),
        (None, None) => bail!("--queries is required for this backend"),
    };
    let other: Vec<&str> = queries
        .iter()
        .filter(|q| q.task != task)
        .map(|q| q.query_id.as_str())
        .collect();
    if !other.is_empty() {
        log::warn!(
            "{} queries name a task other than `{task}`; using `{task}` templates",
            other.len()
        );
    }
    if let Some(n) = max {
        queries.truncate(n);
    }
    if queries.is_empty() {
        bail!("no queries to run");
    }
    Ok(queries)
}

fn run(args: RunArgs) -> Result<()> {
    let setup = setup(&args.search)?;
    let queries = load_queries(
        args.queries.as_deref(),
        &setup,
        &args.search.task,
        args.max_queries,
    )?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    if let Some(w) = &setup.world {
        if args.search.world.is_none() {
            w.save(&args.out.join("world.json"))?;
        }
    }
    let records = args.out.join("records.jsonl");
    let options = BatchOptions {
        workers: args.workers,
        resume: args.resume,
        ..BatchOptions::default()
    };
    let manifest = run_batch(
        &queries,
        &setup.config,
        &*setup.lm,
        &setup.templates,
        &records,
        &options,
    )?;
    manifest.save(&args.out.join("manifest.json"))?;
    println!(
        "{}: {} completed, {} incomplete, {} skipped -> {}",
        manifest.run_id,
        manifest.counts.completed,
        manifest.counts.incomplete,
        manifest.counts.skipped,
        records.display()
    );
    println!(
        "tokens: generation {}, eval {} ({} calls, cache hit rate {:.3})",
        manifest.ledger.generation_tokens(),
        manifest.ledger.eval_tokens(),
        manifest.ledger.eval_calls,
        manifest.ledger.cache_hit_rate()
    );
    Ok(())
}

fn emit(args: EmitArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let config = match &args.config {
        Some(p) => config::load(p)?.search,
        None => SearchConfig::default(),
    };
    let mut options = EmitOptions {
        safe_prompt: args.safe_prompt,
        ..EmitOptions::default()
    };
    if let Some(a) = args.abstention {
        options.abstention_template = a;
    }
    let mut templates: BTreeMap<String, TemplateSet> = BTreeMap::new();
    let mut skipped = 0;
    let mut count = 0;
    let mut items = Vec::new();
    for r in &records {
        if !templates.contains_key(&r.task) {
            templates.insert(
                r.task.clone(),
                templates_for(&r.task, args.templates.as_deref())?,
            );
        }
        let t = &templates[&r.task];
        if r.incomplete {
            skipped += 1;
        }
        match args.kind {
            EmitKind::Sft => {
                if let Some(ex) = emit_sft(r, &config, t, &options)? {
                    items.push(serde_json::to_value(ex)?);
                }
            }
            EmitKind::Dpo => {
                for p in emit_dpo_pairs(r, t, &options)? {
                    items.push(serde_json::to_value(p)?);
                }
            }
            EmitKind::Rloo => {
                for ex in emit_rloo(r, t, &options)? {
                    items.push(serde_json::to_value(ex)?);
                }
            }
        }
        count += 1;
    }
    write_jsonl(&args.out, &items)?;
    let kind = match args.kind {
        EmitKind::Sft => "sft",
        EmitKind::Dpo => "dpo",
        EmitKind::Rloo => "rloo",
    };
    let manifest = EmitManifest {
        kind: kind.to_string(),
        records: count,
        skipped,
        examples: items.len(),
        prompt_template: if args.safe_prompt {
            "safe_write"
        } else {
            "write"
        }
        .to_string(),
        mean_centered: matches!(args.kind, EmitKind::Rloo).then_some(true),
    };
    let sidecar = args.out.with_extension("manifest.json");
    std::fs::write(&sidecar, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", sidecar.display()))?;
    println!(
        "{kind}: {} examples from {count} records ({skipped} skipped) -> {}",
        items.len(),
        args.out.display()
    );
    Ok(())
}

/// Run id of the manifest next to a record file, if any.
fn run_id_for(records: &Path) -> String {
    let manifest = records.with_file_name("manifest.json");
    RunManifest::load(&manifest)
        .map(|m| m.run_id)
        .unwrap_or_else(|_| "unknown".to_string())
}

fn write_report<T: serde::Serialize>(
    out: &Path,
    name: &str,
    run_id: &str,
    rows: &[T],
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(format!("{name}.csv")), run_id, rows)?;
    let report = Report {
        run_id: run_id.to_string(),
        kind: name.to_string(),
        rows: rows.to_vec_json()?,
    };
    std::fs::write(
        out.join(format!("{name}.json")),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(())
}

trait ToJsonRows {
    fn to_vec_json(&self) -> Result<Vec<serde_json::Value>>;
}

impl<T: serde::Serialize> ToJsonRows for [T] {
    fn to_vec_json(&self) -> Result<Vec<serde_json::Value>> {
        self.iter().map(|r| Ok(serde_json::to_value(r)?)).collect()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into())
}

fn print_pareto(points: &[ParetoPoint]) {
    println!("rho*   claims  accuracy  abstain  utility@0.5");
    for p in points {
        println!(
            "{:<6} {:>6.2}  {:>8}  {:>7.3}  {:>11.3}",
            p.rho_star,
            p.mean_claims_per_answer,
            fmt_opt(p.mean_accuracy),
            p.abstention_rate,
            p.mean_utility_at_half
        );
    }
}

fn pareto(args: ParetoArgs) -> Result<()> {
    if args.rho.len() < 2 {
        bail!("--rho needs at least two values");
    }
    let (points, run_id) = if args.full {
        let setup = setup(&args.search)?;
        let queries = load_queries(
            args.queries.as_deref(),
            &setup,
            &args.search.task,
            args.max_queries,
        )?;
        let oracle = setup.world.as_deref().map(|w| w as &dyn Oracle);
        let mut points = Vec::new();
        for &rho in &args.rho {
            let config = SearchConfig {
                rho_star: rho,
                ..setup.config.clone()
            };
            let records = search_all(
                &queries,
                &config,
                &*setup.lm,
                &setup.templates,
                args.workers,
            )?;
            let complete: Vec<&SearchRecord> = records.iter().filter(|r| !r.incomplete).collect();
            let chosen: Vec<_> = complete
                .iter()
                .map(|r| (*r, select_best(r, &config)))
                .collect();
            points.push(pareto_point(rho, SweepMode::Full, &chosen, oracle)?);
        }
        (points, "full-sweep".to_string())
    } else {
        let path = args
            .records
            .as_ref()
            .context("--records is required unless --full")?;
        let records = read_records(path)?;
        let world = match &args.search.world {
            Some(p) => Some(SimWorld::load(p)?),
            None => None,
        };
        let oracle = world.as_ref().map(|w| w as &dyn Oracle);
        (
            pareto_rerank(&records, &args.rho, oracle)?,
            run_id_for(path),
        )
    };
    write_report(&args.out, "pareto", &run_id, &points)?;
    print_pareto(&points);
    Ok(())
}

fn report(cmd: ReportCommand) -> Result<()> {
    match cmd {
        ReportCommand::Tiers {
            records,
            world,
            config,
            out,
        } => {
            let recs = read_records(&records)?;
            let config = match &config {
                Some(p) => config::load(p)?.search,
                None => SearchConfig::default(),
            };
            let world = match &world {
                Some(p) => Some(SimWorld::load(p)?),
                None => None,
            };
            let rows = tier_report(&recs, &config, world.as_ref().map(|w| w as &dyn Oracle))?;
            write_report(&out, "tiers", &run_id_for(&records), &rows)?;
            println!("tier      n   utility  accuracy  abstain  claims");
            for r in &rows {
                println!(
                    "{:<8} {:>3}  {:>8.3}  {:>8}  {:>7.3}  {:>6}",
                    r.tier.as_str(),
                    r.n_queries,
                    r.mean_utility,
                    fmt_opt(r.accuracy),
                    r.abstention_rate,
                    fmt_opt(r.claims_per_non_abstaining_answer)
                );
            }
        }
        ReportCommand::Cost { a, b, out } => {
            let cmp = cost_compare(&read_records(&a)?, &read_records(&b)?)?;
            let mut rows = cmp.rows.clone();
            rows.push(cmp.total.clone());
            write_report(&out, "cost", &run_id_for(&a), &rows)?;
            let t = &cmp.total;
            println!("                 a            b");
            println!(
                "eval tokens      {:<12} {}",
                t.eval_tokens_a, t.eval_tokens_b
            );
            println!(
                "gen tokens       {:<12} {}",
                t.generation_tokens_a, t.generation_tokens_b
            );
            println!("eval calls       {:<12} {}", t.eval_calls_a, t.eval_calls_b);
            println!(
                "cache hit rate   {:<12.3} {:.3}",
                t.cache_hit_rate_a, t.cache_hit_rate_b
            );
            println!(
                "mean best EU     {:<12.3} {:.3}",
                t.best_utility_a, t.best_utility_b
            );
        }
    }
    Ok(())
}

fn simulate(cmd: SimulateCommand) -> Result<()> {
    match cmd {
        SimulateCommand::Make {
            seed,
            entities,
            invented_fraction,
            facts_per_entity,
            out,
        } => {
            let world = make_world(&WorldSpec {
                seed,
                n_entities: entities,
                tier_mix: TierMix::even(invented_fraction),
                facts_per_entity,
                ..WorldSpec::default()
            })?;
            world.save(&out)?;
            println!("{} entities -> {}", world.entities.len(), out.display());
        }
        SimulateCommand::Inspect { world } => {
            let w = SimWorld::load(&world)?;
            println!("seed {} · {} entities", w.spec.seed, w.entities.len());
            for tier in Tier::ALL {
                let n = w.entities.iter().filter(|e| e.tier == tier).count();
                println!(
                    "{:<8} {:>4}  mean knowledge {}",
                    tier.as_str(),
                    n,
                    fmt_opt(w.mean_knowledge(tier))
                );
            }
        }
        SimulateCommand::Queries {
            world,
            task,
            tier,
            out,
        } => {
            let w = SimWorld::load(&world)?;
            let qs: Vec<Query> = w
                .queries(&task)
                .into_iter()
                .filter(|q| tier.is_none() || q.tier == tier)
                .collect();
            write_queries(&out, &qs)?;
            println!("{} queries -> {}", qs.len(), out.display());
        }
    }
    Ok(())
}
