//! `enerflow`: energy-aware graph optimization from the command line.

mod costspec;
mod report;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use enerflow::cost::{normalization_refs, CostTable};
use enerflow::graph::{from_json_str, to_json_string, validate};
use enerflow::profile::load_or_empty;
use enerflow::rules::parse_rule_set;
use enerflow::search::{ablation, constrained_optimize, outer_search};
use enerflow::{
    models, CostDatabase, CostError, CostFunction, Graph, Objective, ProfileError, Profiler, ProfilerSpec,
    SearchConfig, SearchError, SubstitutionRule,
};
use serde_json::{json, Map, Value};
use thiserror::Error;

use costspec::CostSpec;
use report::{node_rows, Comparison, ConfigEcho, RunReport, Summary};

#[derive(Parser)]
#[command(name = "enerflow", version, about = "Energy-aware optimization of DNN computation graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for an equivalent graph and algorithm assignment.
    Optimize(OptimizeArgs),
    /// Fill the cost database for every node of a graph.
    Profile(ProfileArgs),
    /// Write a built-in model as graph JSON.
    Gen(GenArgs),
    /// Compare origin, inner-only, outer-only and full search.
    Compare(CompareArgs),
}

#[derive(Args)]
struct DbArgs {
    /// Cost database (JSON Lines). Missing files start empty.
    #[arg(long, env = "ENERFLOW_DB")]
    db: Option<PathBuf>,
    /// synthetic[:seed=N] | external:cmd=TEMPLATE | none
    #[arg(long)]
    profiler: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    graph: PathBuf,
    /// all | fusion-only | none | comma-separated rule names
    #[arg(long, default_value = "all")]
    rules: String,
    /// time | energy | power | linear:w=F | product:w=F |
    /// mix:time=F,energy=F,power=F | constrained:time<=F
    #[arg(long, default_value = "energy")]
    cost: String,
    #[arg(long, default_value_t = 1.05)]
    alpha: f64,
    /// Inner-search radius; 1 for time, energy, linear and constrained, else 2
    #[arg(long)]
    d: Option<usize>,
    #[arg(long, default_value_t = 100_000)]
    max_queue: usize,
    /// Operator-count cap for candidate graphs; defaults to 4× the input's
    #[arg(long)]
    max_graph_nodes: Option<usize>,
    #[command(flatten)]
    db: DbArgs,
}

#[derive(Args)]
struct OptimizeArgs {
    #[command(flatten)]
    search: SearchArgs,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Do not print the report
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    graph: PathBuf,
    #[command(flatten)]
    db: DbArgs,
}

#[derive(Args)]
struct GenArgs {
    /// toy-squeeze | toy-resnet | chain:N | table1
    model: String,
    /// Output file; standard output when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    search: SearchArgs,
    /// Also write the comparison as JSON
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    External(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Infeasible(_) => 2,
            CliError::Missing(_) => 3,
            CliError::External(_) => 4,
        }
    }
}

impl From<CostError> for CliError {
    fn from(e: CostError) -> Self {
        match e {
            CostError::MissingEntry { .. } => CliError::Missing(format!("{e} (or drop --profiler none)")),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<ProfileError> for CliError {
    fn from(e: ProfileError) -> Self {
        match e {
            ProfileError::CommandFailed { .. }
            | ProfileError::BadOutput(_)
            | ProfileError::NoApplicableAlgorithm(_) => CliError::External(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Cost(c) => c.into(),
            SearchError::Profile(p) => p.into(),
            SearchError::Infeasible { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Invalid(other.to_string()),
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn read_graph(path: &Path) -> Result<Graph, CliError> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let g = from_json_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    validate(&g).map_err(|vs| {
        let lines: Vec<String> = vs.iter().map(ToString::to_string).collect();
        invalid(format!("{}: invalid graph:\n  {}", path.display(), lines.join("\n  ")))
    })?;
    Ok(g)
}

/// Prints to standard output; a reader that closes the pipe early is not an
/// error.
fn emit(text: &str) {
    let mut out = io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|()| out.flush());
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

/// Database plus the profiler that fills its gaps, if any.
struct Session {
    db: CostDatabase,
    profiler: Option<Profiler>,
    profiler_desc: String,
}

impl Session {
    fn open(args: &DbArgs) -> Result<Self, CliError> {
        let db = match &args.db {
            Some(p) => load_or_empty(p)?,
            None => CostDatabase::new(),
        };
        let spec = match args.profiler.as_deref() {
            Some("none") => None,
            None | Some("synthetic") => Some(ProfilerSpec::Synthetic { seed: args.seed }),
            Some(s) => Some(s.parse::<ProfilerSpec>()?),
        };
        let profiler_desc = spec.as_ref().map_or("none".to_string(), ToString::to_string);
        let profiler = spec.map(|s| {
            let p = Profiler::new(s);
            match &args.db {
                Some(path) => p.with_store(path),
                None => p,
            }
        });
        Ok(Session { db, profiler, profiler_desc })
    }

    fn ensure(&mut self, g: &Graph) -> Result<usize, CliError> {
        match self.profiler.as_mut() {
            Some(p) => Ok(p.ensure_profiled(g, &mut self.db)?),
            None => Ok(0),
        }
    }
}

struct Prepared {
    g0: Graph,
    rules: Vec<SubstitutionRule>,
    spec: CostSpec,
    cfg: SearchConfig,
    session: Session,
    /// Scoring function for reports; for constrained runs, energy.
    f: CostFunction,
}

fn prepare(args: &SearchArgs) -> Result<Prepared, CliError> {
    let g0 = read_graph(&args.graph)?;
    let rules = parse_rule_set(&args.rules).map_err(invalid)?;
    let spec: CostSpec = args.cost.parse().map_err(|e: String| invalid(format!("--cost: {e}")))?;
    let cfg = SearchConfig {
        alpha: args.alpha,
        d: args.d.unwrap_or_else(|| spec.default_d()),
        max_queue: args.max_queue,
        max_graph_nodes: args.max_graph_nodes,
        seed: args.db.seed,
        inner_enabled: true,
    };
    cfg.validate()?;
    let mut session = Session::open(&args.db)?;
    session.ensure(&g0)?;
    // resolve entries up front so gaps surface before any search work
    CostTable::build(&g0, &session.db)?;
    let f = match spec {
        CostSpec::Plain(o) if spec.normalized() => CostFunction::with_refs(o, normalization_refs(&g0, &session.db)?),
        CostSpec::Plain(o) => CostFunction::new(o),
        CostSpec::Constrained { .. } => CostFunction::new(Objective::Energy),
    };
    f.validate().map_err(invalid)?;
    Ok(Prepared { g0, rules, spec, cfg, session, f })
}

fn optimize(args: &OptimizeArgs) -> Result<(), CliError> {
    let Prepared { g0, rules, spec, cfg, mut session, f } = prepare(&args.search)?;
    let profiler = session.profiler.as_mut();
    let result = match spec {
        CostSpec::Plain(_) => outer_search(&g0, &rules, &mut session.db, &f, &cfg, profiler)?,
        CostSpec::Constrained { time_le } => {
            let mut r = constrained_optimize(&g0, &rules, &mut session.db, &cfg, time_le, profiler)?;
            r.cost = f.evaluate(&r.metrics);
            r
        }
    };

    let table = CostTable::build(&g0, &session.db)?;
    let origin_metrics = table.metrics(&table.first_assignment())?;
    let origin = Summary::new(&origin_metrics, f.evaluate(&origin_metrics), g0.op_count());
    let config = ConfigEcho {
        graph: args.search.graph.display().to_string(),
        rules: rules.iter().map(|r| r.name().to_string()).collect(),
        alpha: cfg.alpha,
        d: cfg.d,
        seed: cfg.seed,
        profiler: session.profiler_desc.clone(),
        max_queue: cfg.max_queue,
        max_graph_nodes: cfg.node_cap(&g0),
    };
    let nodes = node_rows(&result.graph, &result.assignment, &session.db)?;
    let refs = spec.normalized().then_some(f.refs);
    let report = RunReport::new(spec.to_string(), refs, config, origin, &result, nodes);

    fs::create_dir_all(&args.out).map_err(|e| invalid(format!("{}: {e}", args.out.display())))?;
    write(&args.out.join("graph.json"), &(to_json_string(&result.graph) + "\n"))?;
    let assignment: Map<String, Value> = result
        .assignment
        .iter()
        .map(|(id, alg)| (id.to_string(), json!({"alg": alg.0, "label": alg.label()})))
        .collect();
    write(&args.out.join("assignment.json"), &(serde_json::to_string_pretty(&assignment).expect("json") + "\n"))?;
    write(&args.out.join("report.json"), &(serde_json::to_string_pretty(&report).expect("json") + "\n"))?;
    if !args.quiet {
        emit(&format!("{}\nwrote {}\n", report.render(), args.out.display()));
    }
    Ok(())
}

fn profile(args: &ProfileArgs) -> Result<(), CliError> {
    if args.db.db.is_none() {
        return Err(invalid("profile needs --db or ENERFLOW_DB"));
    }
    let g = read_graph(&args.graph)?;
    let mut session = Session::open(&args.db)?;
    if session.profiler.is_none() {
        return Err(invalid("profile needs a profiler"));
    }
    let added = session.ensure(&g)?;
    emit(&format!("{added} new records\n"));
    Ok(())
}

fn gen(args: &GenArgs) -> Result<(), CliError> {
    let g = models::by_name(&args.model).map_err(invalid)?;
    let text = to_json_string(&g) + "\n";
    match &args.out {
        Some(p) => write(p, &text),
        None => {
            emit(&text);
            Ok(())
        }
    }
}

fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let Prepared { g0, rules, spec, cfg, mut session, f } = prepare(&args.search)?;
    if let CostSpec::Constrained { .. } = spec {
        return Err(invalid("compare needs an unconstrained --cost"));
    }
    let a = ablation(&g0, &rules, &mut session.db, &f, &cfg, session.profiler.as_mut())?;
    let cmp = Comparison::new(&f, &a);
    emit(&cmp.render());
    if let Some(p) = &args.json {
        write(p, &(serde_json::to_string_pretty(&cmp).expect("json") + "\n"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are invalid input; help and version are not errors
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Optimize(a) => optimize(a),
        Command::Profile(a) => profile(a),
        Command::Gen(a) => gen(a),
        Command::Compare(a) => compare(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
