use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use automl_core::dataset::{load_csv, LoadOptions, DEFAULT_LABEL_COLUMN};
use automl_core::explain::{export_tree, local_surrogate, permutation_importance, sample_background};
use automl_core::models::{forest::mix_seed, ModelArtifact};
use automl_core::pipeline::{
    reconstruct, replay, run_pipeline, shapley_for, PipelineConfig, PipelineOutcome, RunOptions, ShapleyChoice,
};
use automl_core::preprocess::Balance;
use automl_core::profiler::profile_dataset;
use automl_core::scorecard::{compare_scorecards, load_questionnaire, score_tool, Scorecard};
use automl_core::tracking::{compare_runs, render_report, RunStore};

const TRACKING_ENV: &str = "AUTOML_TRACKING_ROOT";

#[derive(Parser)]
#[command(name = "automl", version, about = "Recall-prioritized AutoML for tabular malware detection")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads (defaults to the logical CPU count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run store directory; overrides the config file.
    #[arg(long, global = true, env = TRACKING_ENV)]
    tracking_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Profile a CSV dataset.
    Profile(ProfileArgs),
    /// Execute the full pipeline from a config file, or replay a stored run.
    Run(RunArgs),
    /// Explain the model of a finished run.
    Explain(ExplainArgs),
    /// Score transparency questionnaires.
    Score(ScoreArgs),
    /// Compare runs (CSV) or scorecards.
    Compare(CompareArgs),
    /// Render the markdown report of a finished run.
    Report(ReportArgs),
}

#[derive(Args)]
struct ProfileArgs {
    dataset: PathBuf,
    #[arg(long, default_value = DEFAULT_LABEL_COLUMN)]
    label: String,
    #[arg(long)]
    positive_label: Option<String>,
    /// Where to write the profile JSON (default: `<stem>.profile.json`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BalanceArg {
    Off,
    UniqueUndersample,
}

#[derive(Args)]
struct RunArgs {
    /// TOML pipeline config.
    #[arg(required_unless_present = "replay")]
    config: Option<PathBuf>,
    /// Re-execute a stored run from its config snapshot.
    #[arg(long, conflicts_with = "config")]
    replay: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, value_enum)]
    balance: Option<BalanceArg>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    no_hpo: bool,
    #[arg(long)]
    no_explain: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Importance,
    Shapley,
    Surrogate,
    Tree,
}

#[derive(Args)]
struct ExplainArgs {
    run_id: String,
    #[arg(long, value_enum, default_value = "importance")]
    method: Method,
    /// Permutation repeats, Shapley samples or surrogate perturbations.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Test-partition row explained by `shapley` and `surrogate`.
    #[arg(long, default_value_t = 0)]
    instance: usize,
    /// Ensemble member to explain instead of the full model.
    #[arg(long)]
    member: Option<String>,
    #[arg(long)]
    exact: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(required = true)]
    questionnaires: Vec<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Run ids, or questionnaire files with `--scorecards`.
    #[arg(required = true)]
    items: Vec<String>,
    /// Metric or param key; bare names fall back to `test.<name>`.
    #[arg(long = "metric")]
    metrics: Vec<String>,
    /// Sort rows by this column, descending.
    #[arg(long)]
    sort: Option<String>,
    #[arg(long)]
    markdown: bool,
    #[arg(long)]
    scorecards: bool,
}

#[derive(Args)]
struct ReportArgs {
    run_id: String,
    /// Print the report instead of its path.
    #[arg(long)]
    print: bool,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let root = cli.tracking_root.clone();
    match cli.command {
        Command::Profile(a) => cmd_profile(a, cli.json),
        Command::Run(a) => cmd_run(a, root, cli.json),
        Command::Explain(a) => cmd_explain(a, &store_at(root)?, cli.json),
        Command::Score(a) => cmd_score(a, cli.json),
        Command::Compare(a) => cmd_compare(a, root, cli.json),
        Command::Report(a) => cmd_report(a, &store_at(root)?),
    }
}

fn store_at(root: Option<PathBuf>) -> Result<RunStore> {
    let root = root.unwrap_or_else(|| PathBuf::from(automl_core::pipeline::DEFAULT_TRACKING_ROOT));
    RunStore::open(&root).with_context(|| format!("opening run store {}", root.display()))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_profile(a: ProfileArgs, json: bool) -> Result<()> {
    let opts = LoadOptions {
        label_column: a.label,
        positive_label: a.positive_label,
        strict: false,
    };
    let ds = load_csv(&a.dataset, &opts).with_context(|| format!("loading {}", a.dataset.display()))?;
    let profile = profile_dataset(&ds)?;
    let text = serde_json::to_string_pretty(&profile)?;
    let out = a.out.unwrap_or_else(|| {
        let stem = a.dataset.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        PathBuf::from(format!("{stem}.profile.json"))
    });
    std::fs::write(&out, &text).with_context(|| format!("writing {}", out.display()))?;
    if json {
        println!("{text}");
        return Ok(());
    }
    let k = &profile.kind_counts;
    println!("dataset          {}", profile.source_id);
    println!("rows             {}", profile.n_rows);
    println!("features         {}", profile.n_cols);
    println!("  binary         {}", k.binary);
    println!("  numeric        {}", k.numeric);
    println!("  categorical    {}", k.categorical);
    println!("benign/malware   {}/{}", profile.class_counts[0], profile.class_counts[1]);
    match profile.imbalance_ratio {
        Some(r) => println!("imbalance        {r:.3}"),
        None => println!("imbalance        single class"),
    }
    println!("missing cells    {}", profile.missing_cells);
    println!("duplicate rows   {}", profile.duplicate_rows);
    println!("label conflicts  {}", profile.label_conflicts);
    println!("profile written  {}", out.display());
    Ok(())
}

fn cmd_run(a: RunArgs, root: Option<PathBuf>, json: bool) -> Result<()> {
    let outcome = if let Some(id) = &a.replay {
        let store = store_at(root)?;
        replay(&store, id).with_context(|| format!("replaying run {id}"))?
    } else {
        let path = a.config.as_ref().expect("clap enforces config or --replay");
        let mut cfg = PipelineConfig::load(path).with_context(|| format!("loading config {}", path.display()))?;
        if let Some(d) = a.dataset {
            cfg.dataset.path = d;
        }
        if let Some(l) = a.label {
            cfg.dataset.label_column = l;
        }
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        if let Some(t) = a.trials {
            cfg.hpo.n_trials = t;
        }
        if let Some(b) = a.balance {
            cfg.preprocess.balance = match b {
                BalanceArg::Off => Balance::Off,
                BalanceArg::UniqueUndersample => Balance::UniqueUndersample,
            };
        }
        if a.name.is_some() {
            cfg.name = a.name;
        }
        if a.no_hpo {
            cfg.hpo.enabled = false;
        }
        if a.no_explain {
            cfg.explain.enabled = false;
        }
        if let Some(r) = root {
            cfg.tracking.root = r;
        }
        cfg.validate()?;
        let store = store_at(Some(cfg.tracking.root.clone()))?;
        run_pipeline(&cfg, &store, &RunOptions::default())?
    };
    print_outcome(&outcome, json)
}

fn print_outcome(o: &PipelineOutcome, json: bool) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(o)?);
        return Ok(());
    }
    println!("run        {}", o.run_id);
    println!("recall     {:.4}", o.test.recall);
    println!("mcc        {:.4}", o.test.mcc);
    println!("wall time  {:.2} s", o.wall_seconds);
    if o.n_child_runs > 0 {
        println!("trials     {}", o.n_child_runs);
    }
    Ok(())
}

fn pick_model<'a>(model: &'a ModelArtifact, member: Option<&str>) -> Result<&'a ModelArtifact> {
    match (member, model) {
        (None, m) => Ok(m),
        (Some(name), ModelArtifact::Ensemble(e)) => e
            .member(name)
            .with_context(|| format!("model has no member {name:?}")),
        (Some(name), _) => bail!("model is not an ensemble; cannot select member {name:?}"),
    }
}

fn cmd_explain(a: ExplainArgs, store: &RunStore, json: bool) -> Result<()> {
    let rec = reconstruct(store, &a.run_id).with_context(|| format!("loading run {}", a.run_id))?;
    let model = pick_model(&rec.model, a.member.as_deref())?;
    let ecfg = &rec.config.explain;
    let seed = a.seed.unwrap_or(mix_seed(rec.config.seed, 5));
    let names = rec.test.feature_names().to_vec();
    let text = match a.method {
        Method::Importance => {
            let report = permutation_importance(
                model,
                &rec.test,
                ecfg.importance_metric,
                a.samples.unwrap_or(ecfg.importance_repeats),
                seed,
            )?;
            if json {
                serde_json::to_string_pretty(&report)? + "\n"
            } else {
                report.to_csv()
            }
        }
        Method::Shapley => {
            let choice = if a.exact { ShapleyChoice::Exact } else { ShapleyChoice::Sampled };
            let attr = shapley_for(
                model,
                &rec.train,
                &rec.test,
                a.instance,
                choice,
                ecfg.background_rows,
                a.samples.unwrap_or(ecfg.shapley_samples),
                seed,
            )?;
            if json {
                serde_json::to_string_pretty(&attr)? + "\n"
            } else {
                attr.to_csv(&names)
            }
        }
        Method::Surrogate => {
            if a.instance >= rec.test.n_rows() {
                bail!("instance {} outside the {} test rows", a.instance, rec.test.n_rows());
            }
            let bg = sample_background(rec.train.features(), ecfg.background_rows, mix_seed(seed, 11));
            let local = local_surrogate(
                model,
                rec.test.features().row(a.instance),
                &bg,
                a.samples.unwrap_or(ecfg.surrogate_perturbations),
                ecfg.kernel_width,
                seed,
            )?;
            serde_json::to_string_pretty(&local)? + "\n"
        }
        Method::Tree => {
            let tree = match model {
                ModelArtifact::Tree(t) => t,
                ModelArtifact::Ensemble(e) => match e.member("tree") {
                    Some(ModelArtifact::Tree(t)) => t,
                    _ => bail!("the ensemble has no decision-tree member"),
                },
                other => bail!("a {} model has no single tree to export", other.kind()),
            };
            export_tree(tree, &names)
        }
    };
    emit(&text, a.out.as_deref())
}

fn load_cards(paths: &[PathBuf]) -> Result<Vec<Scorecard>> {
    paths
        .iter()
        .map(|p| {
            let q = load_questionnaire(p).with_context(|| format!("reading {}", p.display()))?;
            score_tool(&q).with_context(|| format!("scoring {}", p.display()))
        })
        .collect()
}

fn cmd_score(a: ScoreArgs, json: bool) -> Result<()> {
    let cards = load_cards(&a.questionnaires)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&cards)?);
    } else if let [one] = cards.as_slice() {
        print!("{}", one.to_text());
    } else {
        print!("{}", compare_scorecards(&cards)?);
    }
    Ok(())
}

fn cmd_compare(a: CompareArgs, root: Option<PathBuf>, json: bool) -> Result<()> {
    if a.scorecards {
        let paths: Vec<PathBuf> = a.items.iter().map(PathBuf::from).collect();
        let cards = load_cards(&paths)?;
        if json {
            println!("{}", serde_json::to_string_pretty(&cards)?);
        } else {
            print!("{}", compare_scorecards(&cards)?);
        }
        return Ok(());
    }
    let store = store_at(root)?;
    let runs = a
        .items
        .iter()
        .map(|id| store.get_run(id))
        .collect::<automl_core::Result<Vec<_>>>()?;
    let requested = if a.metrics.is_empty() {
        vec!["recall".to_string(), "mcc".to_string(), "resource.total.wall_seconds".to_string()]
    } else {
        a.metrics.clone()
    };
    let has = |k: &str| runs.iter().any(|r| r.metric(k).is_some() || r.params.contains_key(k));
    let keys: Vec<String> = requested
        .into_iter()
        .map(|k| {
            let test_key = format!("test.{k}");
            if !has(&k) && has(&test_key) {
                test_key
            } else {
                k
            }
        })
        .collect();
    let mut table = compare_runs(&store, &a.items, &keys)?;
    if let Some(col) = &a.sort {
        let col = if keys.contains(col) { col.clone() } else { format!("test.{col}") };
        table.sort_by(&col, true)?;
    }
    if json {
        println!("{}", serde_json::to_string_pretty(&table)?);
    } else if a.markdown {
        print!("{}", table.to_markdown());
    } else {
        print!("{}", table.to_csv());
    }
    Ok(())
}

fn cmd_report(a: ReportArgs, store: &RunStore) -> Result<()> {
    let text = render_report(store, &a.run_id).with_context(|| format!("rendering run {}", a.run_id))?;
    if a.print {
        print!("{text}");
    } else {
        println!("{}", store.run_dir(&a.run_id).join(automl_core::tracking::REPORT_FILE).display());
    }
    Ok(())
}
