use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use cdt_core::codex::{deserialize_tree, CodifiedDecisionTree};
use cdt_core::corpus::{write_lines, write_pairs};
use cdt_core::evalharness::{report_jsonl, report_table, PredictionCache, ReportRow};
use cdt_core::grounding::{generate_action, traverse, RankKind};
use cdt_core::induction::{Goal, Inducer};
use cdt_core::oracle::planted::{PlantedCorpus, WorldSpec};
use cdt_core::oracle::{export_distillation_set, OracleCall};
use cdt_core::verbalize::{verbalize, wikify};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use tracing::info;

use crate::api::{router, AppState};
use crate::config::{load_corpus, OracleBackend, RunConfig};
use crate::error::CliError;
use crate::evaluation::{run_evaluation, EvalPlan, StrategyName};
use crate::store::Store;

#[derive(Debug, Parser)]
#[command(name = "cdt", version, about = "Induce, inspect, ground and evaluate codified decision trees")]
pub struct Cli {
    /// TOML run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Grow a tree from a corpus.
    Induce(InduceArgs),
    /// Print the grounding bundle for a scene.
    Traverse(SceneArgs),
    /// Generate the next action for a scene, grounded on the tree.
    Ground(GroundArgs),
    /// Score prediction strategies on a held-out split.
    Evaluate(EvaluateArgs),
    /// Print the tree as if-then rules.
    Verbalize(TreeArgs),
    /// Render the tree as a chaptered profile.
    Wikify(WikifyArgs),
    /// Sample recorded oracle calls as a fine-tuning set.
    ExportDistill(DistillArgs),
    /// Write a synthetic rule world and its corpus.
    GenSynthetic(SyntheticArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct OracleArgs {
    /// Use the offline oracle for this world file instead of the configured backend.
    #[arg(long)]
    world: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    character: Option<String>,
    #[arg(long)]
    window: Option<usize>,
}

#[derive(Debug, Args)]
struct InduceArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Tree document destination; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    calls: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    theta_acc: Option<f64>,
    #[arg(long)]
    theta_rej: Option<f64>,
    #[arg(long)]
    theta_f: Option<f64>,
    #[arg(long)]
    d_max: Option<u32>,
    #[arg(long)]
    min_node_data: Option<usize>,
    #[arg(long)]
    boosted_budget: Option<usize>,
    /// Keep rejected hypotheses on their nodes, marked abolished.
    #[arg(long)]
    keep_abolished: bool,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Grow a goal-driven tree for scenes whose latest actor is this character.
    #[arg(long)]
    related: Option<String>,
    #[arg(long, requires = "related")]
    instruction: Option<String>,
}

#[derive(Debug, Args)]
struct TreeArgs {
    #[arg(long)]
    tree: PathBuf,
}

#[derive(Debug, Args)]
struct SceneArgs {
    #[arg(long)]
    tree: PathBuf,
    /// Scene text file, `Actor: text` per line; `-` reads standard input.
    #[arg(long)]
    scene: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
}

#[derive(Debug, Args)]
struct GroundArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, value_parser = parse_rank)]
    rank: Option<RankKind>,
    #[arg(long)]
    k: Option<usize>,
}

fn parse_rank(s: &str) -> Result<RankKind, String> {
    s.parse()
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Table,
    Jsonl,
    /// Full results, per-pair scores included.
    Json,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Repeatable or comma-separated: vanilla, profile, ricl, eta, cdt, cdt_text.
    #[arg(long = "strategy", value_delimiter = ',', default_value = "cdt")]
    strategies: Vec<StrategyName>,
    #[arg(long)]
    tree: Option<PathBuf>,
    /// ACTOR=PATH, a goal-driven tree used when ACTOR acted last.
    #[arg(long = "relation-tree", value_parser = parse_relation)]
    relation_trees: Vec<(String, PathBuf)>,
    /// Profile text file for the `profile` strategy.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, conflicts_with = "all_test")]
    train_fraction: Option<f64>,
    /// Score every pair; no training split.
    #[arg(long)]
    all_test: bool,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long, value_parser = parse_rank)]
    rank: Option<RankKind>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum, default_value = "table")]
    format: ReportFormat,
}

fn parse_relation(s: &str) -> Result<(String, PathBuf), String> {
    let (actor, path) = s.split_once('=').ok_or("expected ACTOR=PATH")?;
    Ok((actor.to_string(), PathBuf::from(path)))
}

#[derive(Debug, Args)]
struct WikifyArgs {
    #[arg(long)]
    tree: PathBuf,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Print the chapter structure as JSON instead of markdown.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct DistillArgs {
    /// Recorded calls, one JSON object per line (written by `induce --calls`).
    #[arg(long)]
    calls: PathBuf,
    #[arg(long)]
    fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    /// Pair file destination.
    #[arg(long)]
    out: PathBuf,
    /// World file destination, usable as `--world`.
    #[arg(long)]
    world_out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    rules: Option<usize>,
    #[arg(long)]
    decoys: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    character: Option<String>,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    bind: Option<String>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[command(flatten)]
    oracle: OracleArgs,
}

/// Parses `args` and runs the subcommand. Returns the process exit status.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or_default();
            let message = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("{}", CliError::Usage(message.to_string()).to_json_line());
            return 2;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit_code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = RunConfig::load_or_default(cli.config.as_deref())?;
    match cli.command {
        Command::Induce(args) => induce(config, args),
        Command::Traverse(args) => traverse_cmd(config, args),
        Command::Ground(args) => ground(config, args),
        Command::Evaluate(args) => evaluate(config, args),
        Command::Verbalize(args) => emit(&verbalize(&read_tree(&args.tree)?)),
        Command::Wikify(args) => wikify_cmd(config, args),
        Command::ExportDistill(args) => export_distill(args),
        Command::GenSynthetic(args) => gen_synthetic(args),
        Command::Serve(args) => serve(config, args),
    }
}

fn emit(text: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| CliError::operational("io", e))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::operational("io", format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, CliError> {
    if path == Path::new("-") {
        let mut text = String::new();
        std::io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| CliError::operational("io", e))?;
        return Ok(text);
    }
    std::fs::read_to_string(path).map_err(|e| CliError::operational("io", format!("{}: {e}", path.display())))
}

fn read_tree(path: &Path) -> Result<CodifiedDecisionTree, CliError> {
    deserialize_tree(&read_text(path)?).map_err(|e| CliError::operational("tree", format!("{}: {e}", path.display())))
}

fn apply_oracle(config: &mut RunConfig, args: &OracleArgs) {
    if let Some(world) = &args.world {
        config.oracle = OracleBackend::Planted { world: world.clone() };
    }
}

fn apply_corpus(config: &mut RunConfig, args: &CorpusArgs) {
    if let Some(p) = &args.corpus {
        config.corpus.path = Some(p.clone());
    }
    if let Some(c) = &args.character {
        config.corpus.character = Some(c.clone());
    }
    if let Some(w) = args.window {
        config.corpus.window = Some(w);
    }
}

fn corpus_from(config: &RunConfig) -> Result<cdt_core::corpus::Corpus, CliError> {
    let path = config
        .corpus
        .path
        .as_deref()
        .ok_or_else(|| CliError::Usage("a corpus is required (--corpus or [corpus] path)".into()))?;
    load_corpus(path, config.corpus.character.as_deref(), config.corpus.window)
}

fn induce(mut config: RunConfig, args: InduceArgs) -> Result<(), CliError> {
    apply_corpus(&mut config, &args.corpus);
    apply_oracle(&mut config, &args.oracle);
    let ind = &mut config.induction;
    macro_rules! set {
        ($($field:ident),*) => {$(if let Some(v) = args.$field { ind.$field = v; })*};
    }
    set!(seed, theta_acc, theta_rej, theta_f, d_max, min_node_data);
    if args.boosted_budget.is_some() {
        ind.boosted_budget = args.boosted_budget;
    }
    ind.keep_abolished |= args.keep_abolished;
    if let Some(p) = args.parallelism {
        config.parallelism = p;
    }
    for (slot, flag) in [
        (&mut config.output.tree, args.out),
        (&mut config.output.log, args.log),
        (&mut config.output.calls, args.calls),
    ] {
        if flag.is_some() {
            *slot = flag;
        }
    }
    config.induction.validate().map_err(|e| CliError::Config(e.0))?;
    let corpus = corpus_from(&config)?;
    if let Some(related) = args.related {
        let instruction = args
            .instruction
            .unwrap_or_else(|| format!("Focus on how {} acts toward {related}.", corpus.character));
        config.goal = Some(Goal { related, instruction });
    }
    let oracles = config.oracles()?;
    let inducer = Inducer::new(&corpus, &config.induction, &oracles, config.goal.clone(), config.parallelism)
        .map_err(|e| CliError::operational("induction", e))?;
    let (tree, log) = inducer
        .run(inducer.initial_state(), &mut |s| {
            info!(nodes = s.nodes_grown, pending = s.pending.len(), calls = s.oracle_calls(), "checkpoint")
        })
        .map_err(|interrupted| CliError::operational("induction", interrupted.error))?;
    if let Some(path) = &config.output.log {
        write_file(path, &log.to_jsonl())?;
    }
    if let Some(path) = &config.output.calls {
        write_lines(path, &log.calls).map_err(|e| CliError::operational("io", e))?;
    }
    match &config.output.tree {
        Some(path) => {
            write_file(path, &tree.to_document())?;
            let summary = json!({
                "tree": path,
                "character": tree.character,
                "nodes": tree.nodes.len(),
                "depth": tree.max_depth(),
                "statements": tree.accepted_statement_count(),
                "abolished": log.abolished().count(),
                "oracle_calls": log.calls.len() as u64 + log.hypothesizer_calls,
            });
            emit(&format!("{summary}\n"))
        }
        None => emit(&tree.to_document()),
    }
}

fn traverse_cmd(mut config: RunConfig, args: SceneArgs) -> Result<(), CliError> {
    apply_oracle(&mut config, &args.oracle);
    let tree = read_tree(&args.tree)?;
    let scene = read_text(&args.scene)?;
    let oracles = config.oracles()?;
    let bundle = traverse(&tree, &scene, oracles.discriminator.as_ref()).map_err(|e| CliError::operational("traversal", e))?;
    emit(&bundle.to_document())
}

fn ground(mut config: RunConfig, args: GroundArgs) -> Result<(), CliError> {
    apply_oracle(&mut config, &args.scene.oracle);
    let mut policy = config.grounding;
    policy.kind = args.rank.unwrap_or(policy.kind);
    policy.k = args.k.unwrap_or(policy.k);
    if policy.k == 0 {
        return Err(CliError::Config("k must be at least 1".into()));
    }
    let tree = read_tree(&args.scene.tree)?;
    let scene = read_text(&args.scene.scene)?;
    let oracles = config.oracles()?;
    let generation = generate_action(&scene, &tree, &policy, &oracles, &config.templates()?)
        .map_err(|e| CliError::operational("grounding", e))?;
    emit(&(serde_json::to_string_pretty(&generation).expect("generation serializes") + "\n"))
}

fn evaluate(mut config: RunConfig, args: EvaluateArgs) -> Result<(), CliError> {
    apply_corpus(&mut config, &args.corpus);
    apply_oracle(&mut config, &args.oracle);
    let mut policy = config.grounding;
    policy.kind = args.rank.unwrap_or(policy.kind);
    policy.k = args.k.unwrap_or(policy.k);
    let train_fraction = if args.all_test {
        None
    } else {
        Some(args.train_fraction.unwrap_or(config.evaluation.train_fraction))
    };
    let tree = args.tree.as_deref().map(read_tree).transpose()?;
    if config.corpus.character.is_none() {
        config.corpus.character = tree.as_ref().map(|t| t.character.clone());
    }
    let corpus = corpus_from(&config)?;
    let relation_trees = args
        .relation_trees
        .iter()
        .map(|(actor, path)| read_tree(path).map(|t| (actor.clone(), t)))
        .collect::<Result<BTreeMap<_, _>, _>>()?;
    let profile = args.profile.as_deref().map(read_text).transpose()?;
    let cache = match args.cache.or(config.evaluation.cache.clone()) {
        Some(path) => PredictionCache::open(path).map_err(|e| CliError::operational("cache", e))?,
        None => PredictionCache::in_memory(),
    };
    let oracles = config.oracles()?;
    let plan = EvalPlan {
        corpus: &corpus,
        train_fraction,
        strategies: args.strategies,
        tree,
        relation_trees,
        profile,
        policy,
    };
    let results = run_evaluation(plan, &oracles, &config.templates()?, &cache).map_err(|e| match e {
        crate::evaluation::PlanError::Argument(m) => CliError::Usage(m),
        other => CliError::operational("evaluation", other),
    })?;
    let rows: Vec<ReportRow> = results.iter().map(ReportRow::from).collect();
    match args.format {
        ReportFormat::Table => emit(&report_table(&rows)),
        ReportFormat::Jsonl => emit(&report_jsonl(&rows)),
        ReportFormat::Json => emit(&(serde_json::to_string_pretty(&results).expect("results serialize") + "\n")),
    }
}

fn wikify_cmd(mut config: RunConfig, args: WikifyArgs) -> Result<(), CliError> {
    apply_oracle(&mut config, &args.oracle);
    let tree = read_tree(&args.tree)?;
    let oracles = config.oracles()?;
    let doc = wikify(&tree, oracles.rp_generator.as_ref(), &config.templates()?)
        .map_err(|e| CliError::operational("wikify", e))?;
    if args.json {
        emit(&(serde_json::to_string_pretty(&doc).expect("document serializes") + "\n"))
    } else {
        emit(&doc.render())
    }
}

fn export_distill(args: DistillArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&args.fraction) {
        return Err(CliError::Usage(format!("fraction must be within [0, 1], got {}", args.fraction)));
    }
    let text = read_text(&args.calls)?;
    let calls = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<OracleCall>(l)
                .map_err(|e| CliError::operational("calls", format!("line {}: {e}", i + 1)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let sample = export_distillation_set(&calls, args.fraction, args.seed);
    let lines: String = sample
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect();
    match &args.out {
        Some(path) => write_file(path, &lines),
        None => emit(&lines),
    }
}

fn gen_synthetic(args: SyntheticArgs) -> Result<(), CliError> {
    let mut spec = WorldSpec::default();
    spec.seed = args.seed.unwrap_or(spec.seed);
    spec.n_pairs = args.pairs.unwrap_or(spec.n_pairs);
    spec.n_rules = args.rules.unwrap_or(spec.n_rules);
    spec.n_decoys = args.decoys.unwrap_or(spec.n_decoys);
    spec.noise_rate = args.noise.unwrap_or(spec.noise_rate);
    if let Some(c) = args.character {
        spec.character = c;
    }
    let planted = PlantedCorpus::generate(&spec);
    write_pairs(&args.out, &planted.pairs).map_err(|e| CliError::operational("io", e))?;
    let world = serde_json::to_string_pretty(&planted.world).expect("world serializes");
    write_file(&args.world_out, &(world + "\n"))?;
    let summary = json!({
        "pairs": planted.pairs.len(),
        "character": spec.character,
        "rules": planted.world.rules.iter().map(|r| r.statement()).collect::<Vec<_>>(),
        "rule_rates": planted.rule_rates,
        "decoy_rates": planted.decoy_rates,
    });
    emit(&format!("{summary}\n"))
}

fn serve(mut config: RunConfig, args: ServeArgs) -> Result<(), CliError> {
    apply_oracle(&mut config, &args.oracle);
    let bind = args.bind.unwrap_or_else(|| config.service.bind.clone());
    let store_path = args.store.unwrap_or_else(|| config.service.store.clone());
    let store = Store::open(&store_path).map_err(|e| CliError::operational("store", e))?;
    let oracles = config.oracles()?;
    let templates = config.templates()?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::operational("runtime", e))?;
    runtime.block_on(async move {
        let state = AppState::new(store, oracles, templates, config).map_err(|e| CliError::operational("store", e))?;
        let resumed = state.jobs.resume_pending().map_err(|e| CliError::operational("store", e))?;
        let listener = tokio::net::TcpListener::bind(&bind)
            .await
            .map_err(|e| CliError::operational("bind", format!("{bind}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::operational("bind", e))?;
        info!(%addr, store = %store_path.display(), resumed, "listening");
        eprintln!("{}", json!({"listening": addr.to_string()}));
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| CliError::operational("serve", e))
    })
}
