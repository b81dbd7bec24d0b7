use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use rap_core::dqn::{checkpoint, QNetwork};
use rap_core::gsi::{build_importance_table, ImportanceTable};
use rap_core::harness::{
    ablation_compare, band_statistic, beta_monotonicity_violations, overhead_report, run_eval,
    save_csv, seed_curves_rows, seed_robustness, sweep_alpha_beta, train_policy, EvalReport,
    ExperimentConfig, PolicyKind, Setup,
};
use rap_core::memory::ModelSpec;
use rap_core::surrogate::SurrogateModel;
use rap_core::workload::{self, TraceRecord};
use rap_core::Error;

const IMPORTANCE_FILE: &str = "importance.csv";
const SURROGATE_FILE: &str = "surrogate.cfg";
const POLICY_FILE: &str = "policy.qnet";

#[derive(Parser)]
#[command(name = "rap", version, about = "Runtime-adaptive block pruning experiments")]
struct Cli {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed of the step being run.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for caches, checkpoints and CSV results.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TraceKind {
    Train,
    Eval,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Write the surrogate perplexity model described by the config.
    SurrogateGen {
        /// Destination; defaults to <out-dir>/surrogate.cfg.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the per-bucket importance cache.
    GsiBuild,
    /// Train the DQN controller.
    Train {
        /// Training trace (JSONL); generated from the config when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Evaluate one policy, or all of them, over the evaluation trace.
    Eval {
        #[arg(long, default_value = "all")]
        policy: String,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Compare RAP against the static baselines with bootstrap intervals.
    Ablate {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// GSI-static evaluation over the alpha/beta grid.
    Sweep {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Retrain with several seeds and report the spread of final returns.
    Robustness {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Generate a request/budget trace.
    TraceGen {
        #[arg(long, value_enum, default_value = "eval")]
        kind: TraceKind,
        #[arg(long)]
        count: Option<usize>,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time full pruning decisions of the trained controller.
    Overhead {
        #[arg(long)]
        trace: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: Option<u64>,
    out_dir: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn ensure_out_dir(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("creating {}", self.out_dir.display()))
    }

    fn spec_and_surrogate(&self) -> Result<(ModelSpec, SurrogateModel)> {
        let spec = self.cfg.model_spec().context("loading model spec")?;
        let surrogate = self.cfg.surrogate_model(&spec).context("loading surrogate")?;
        Ok((spec, surrogate))
    }

    /// Setup backed by the importance cache from `gsi-build`.
    fn setup(&self) -> Result<Setup> {
        let (spec, surrogate) = self.spec_and_surrogate()?;
        let tables = ImportanceTable::load(self.path(IMPORTANCE_FILE), Some(&surrogate.checksum()))?;
        Ok(Setup::new(spec, surrogate, tables, self.cfg.reward, self.cfg.norms)?)
    }

    fn network(&self) -> Result<QNetwork> {
        let (header, net) = checkpoint::load(self.path(POLICY_FILE))?;
        if header.config_hash != self.train_config().hash() {
            eprintln!("note: checkpoint was trained with a different [dqn] config");
        }
        Ok(net)
    }

    fn train_config(&self) -> rap_core::dqn::DqnConfig {
        let mut dqn = self.cfg.dqn.clone();
        if let Some(seed) = self.seed {
            dqn.seed = seed;
        }
        dqn
    }

    fn trace(&self, path: Option<&Path>, kind: TraceKind) -> Result<Vec<TraceRecord>> {
        if let Some(path) = path {
            return Ok(workload::load(path)?);
        }
        let gen = match kind {
            TraceKind::Train => &self.cfg.train_trace,
            TraceKind::Eval => &self.cfg.eval_trace,
        };
        Ok(workload::generate(gen)?.collect())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Ctx {
        cfg,
        seed: cli.seed,
        out_dir: cli.out_dir,
    };
    match cli.command {
        Command::Config => {
            print!("{}", ctx.cfg.to_toml_string());
            Ok(())
        }
        Command::SurrogateGen { out } => surrogate_gen(&ctx, out),
        Command::GsiBuild => gsi_build(&ctx),
        Command::Train { trace } => train(&ctx, trace.as_deref()),
        Command::Eval { policy, trace } => eval(&ctx, &policy, trace.as_deref()),
        Command::Ablate { trace } => ablate(&ctx, trace.as_deref()),
        Command::Sweep { trace } => sweep(&ctx, trace.as_deref()),
        Command::Robustness { trace } => robustness(&ctx, trace.as_deref()),
        Command::TraceGen { kind, count, out } => trace_gen(&ctx, kind, count, out),
        Command::Overhead { trace } => overhead(&ctx, trace.as_deref()),
    }
}

fn surrogate_gen(ctx: &Ctx, out: Option<PathBuf>) -> Result<()> {
    let (_, surrogate) = ctx.spec_and_surrogate()?;
    let path = match out {
        Some(p) => p,
        None => {
            ctx.ensure_out_dir()?;
            ctx.path(SURROGATE_FILE)
        }
    };
    surrogate.save(&path)?;
    println!("wrote {} (checksum {})", path.display(), surrogate.checksum());
    Ok(())
}

fn gsi_build(ctx: &Ctx) -> Result<()> {
    ctx.ensure_out_dir()?;
    let (spec, surrogate) = ctx.spec_and_surrogate()?;
    let (tables, traces) = build_importance_table(&surrogate, &spec, &surrogate.checksum())?;
    tables.save(ctx.path(IMPORTANCE_FILE), &spec.name)?;
    surrogate.save(ctx.path(SURROGATE_FILE))?;
    for (bucket, trace) in traces.iter().enumerate() {
        let head: Vec<String> = trace.removed.iter().take(8).map(|b| b.to_string()).collect();
        println!("bucket {bucket}: first removals {}", head.join(" "));
    }
    println!("wrote {}", ctx.path(IMPORTANCE_FILE).display());
    Ok(())
}

fn train(ctx: &Ctx, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let records = ctx.trace(trace, TraceKind::Train)?;
    let dqn = ctx.train_config();
    let out = train_policy(&setup, &records, &dqn)?;
    checkpoint::save(ctx.path(POLICY_FILE), &out.net, dqn.seed, dqn.hash())?;
    save_csv(&out.curve, ctx.path("curve.csv"))?;
    println!(
        "trained {} episodes, {} steps, {} updates; {} parameters",
        out.curve.len(),
        out.total_steps,
        out.updates,
        out.net.n_params()
    );
    Ok(())
}

fn eval(ctx: &Ctx, policy: &str, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let records = ctx.trace(trace, TraceKind::Eval)?;
    let kinds: Vec<PolicyKind> = if policy == "all" {
        PolicyKind::ALL.to_vec()
    } else {
        match PolicyKind::parse(policy) {
            Some(k) => vec![k],
            None => bail!("unknown policy `{policy}` (rap, gsi_static, one_shot, random_drop, all)"),
        }
    };
    let net = if kinds.contains(&PolicyKind::Rap) {
        Some(ctx.network()?)
    } else {
        None
    };
    let seed = ctx.seed.unwrap_or(ctx.cfg.bootstrap.seed);
    let mut reports = Vec::new();
    let mut logs = Vec::new();
    for kind in kinds {
        let (report, l) = run_eval(&setup, kind, &records, net.as_ref(), seed)?;
        let recomputed = EvalReport::from_logs(kind, &l);
        if recomputed != report {
            bail!("{kind}: report does not match its rollout logs");
        }
        reports.push(report);
        logs.extend(l);
    }
    save_csv(&reports, ctx.path("eval.csv"))?;
    save_csv(&logs, ctx.path("rollouts.csv"))?;
    #[derive(serde::Serialize)]
    struct Timing {
        policy: PolicyKind,
        mean_latency_us: f64,
    }
    let timing: Vec<Timing> = reports
        .iter()
        .map(|r| Timing {
            policy: r.policy,
            mean_latency_us: r.mean_latency_us,
        })
        .collect();
    save_csv(&timing, ctx.path("eval_timing.csv"))?;
    for r in &reports {
        println!(
            "{:<12} log_ppl {:.4}  retained_ippl {:.4}  feasible {:.3}  mha {:.2}  ffn {:.2}",
            r.policy.as_str(),
            r.mean_log_ppl,
            r.mean_retained_ippl,
            r.feasibility_rate,
            r.mean_mha_pruned,
            r.mean_ffn_pruned
        );
    }
    Ok(())
}

fn ablate(ctx: &Ctx, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let records = ctx.trace(trace, TraceKind::Eval)?;
    let net = match ctx.network() {
        Ok(net) => Some(net),
        Err(e) => match e.downcast_ref::<Error>() {
            Some(Error::MissingArtifact { .. }) => {
                eprintln!("note: {e}; comparing static policies only");
                None
            }
            _ => return Err(e),
        },
    };
    let mut boot = ctx.cfg.bootstrap;
    if let Some(seed) = ctx.seed {
        boot.seed = seed;
    }
    let ab = ablation_compare(&setup, &records, net.as_ref(), &boot)?;
    save_csv(&ab.rows, ctx.path("ablation.csv"))?;
    save_csv(&ab.logs, ctx.path("ablation_rollouts.csv"))?;
    if let Some(d) = &ab.rap_vs_random {
        save_csv(std::slice::from_ref(d), ctx.path("ablation_paired.csv"))?;
    }
    for r in &ab.rows {
        println!(
            "{:<12} log_ppl {:.4}  [{:.4}, {:.4}]",
            r.policy.as_str(),
            r.mean_log_ppl,
            r.ci_low,
            r.ci_high
        );
    }
    println!("ordering holds: {}", ab.ordering_holds());
    if let Some(d) = &ab.rap_vs_random {
        println!(
            "rap - random_drop: {:.4} [{:.4}, {:.4}] separated: {}",
            d.mean,
            d.ci_low,
            d.ci_high,
            d.separated()
        );
    }
    Ok(())
}

fn sweep(ctx: &Ctx, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let records = ctx.trace(trace, TraceKind::Eval)?;
    let rows = sweep_alpha_beta(&setup, &records, &ctx.cfg.sweep)?;
    save_csv(&rows, ctx.path("sweep.csv"))?;
    let violations = beta_monotonicity_violations(&rows);
    println!("{} grid points, {} monotonicity violations", rows.len(), violations.len());
    if let Some((a, b1, b2)) = violations.first() {
        bail!("retained memory rose from beta {b1} to {b2} at alpha {a}");
    }
    Ok(())
}

fn robustness(ctx: &Ctx, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let records = ctx.trace(trace, TraceKind::Train)?;
    let r = seed_robustness(&setup, &records, &ctx.cfg.dqn, &ctx.cfg.robustness)?;
    save_csv(&seed_curves_rows(&r.curves), ctx.path("robustness.csv"))?;
    #[derive(serde::Serialize)]
    struct Summary {
        seed: u64,
        trailing_mean: f64,
    }
    let summary: Vec<Summary> = r
        .curves
        .iter()
        .zip(&r.trailing_means)
        .map(|(c, &m)| Summary {
            seed: c.seed,
            trailing_mean: m,
        })
        .collect();
    save_csv(&summary, ctx.path("robustness_summary.csv"))?;
    debug_assert_eq!(band_statistic(&r.trailing_means), r.band);
    for s in &summary {
        println!("seed {}: trailing mean return {:.5}", s.seed, s.trailing_mean);
    }
    println!("band: {:.2}%", 100.0 * r.band);
    Ok(())
}

fn trace_gen(ctx: &Ctx, kind: TraceKind, count: Option<usize>, out: Option<PathBuf>) -> Result<()> {
    let mut gen = match kind {
        TraceKind::Train => ctx.cfg.train_trace.clone(),
        TraceKind::Eval => ctx.cfg.eval_trace.clone(),
    };
    if let Some(seed) = ctx.seed {
        gen.seed = seed;
    }
    if let Some(count) = count {
        gen.count = count;
    }
    let records: Vec<TraceRecord> = workload::generate(&gen)?.collect();
    match out {
        Some(path) => workload::save_trace(&records, &path)?,
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            workload::write_trace(&records, &mut lock)?;
            lock.flush()?;
        }
    }
    Ok(())
}

fn overhead(ctx: &Ctx, trace: Option<&Path>) -> Result<()> {
    let setup = ctx.setup()?;
    let net = ctx.network()?;
    let records = ctx.trace(trace, TraceKind::Eval)?;
    let report = overhead_report(&setup, &net, &records)?;
    save_csv(std::slice::from_ref(&report), ctx.path("overhead.csv"))?;
    println!(
        "{} parameters; {} decisions, mean {:.1} us, p99 {:.1} us, max {:.1} us; mha {:.2} ffn {:.2} pruned",
        report.param_count,
        report.decisions,
        report.mean_latency_us,
        report.p99_latency_us,
        report.max_latency_us,
        report.mean_mha_pruned,
        report.mean_ffn_pruned
    );
    Ok(())
}
