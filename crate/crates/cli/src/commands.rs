use std::path::Path;

use anyhow::{anyhow, bail, Context};
use serde::Serialize;
use serde_json::json;

use routelab::checkpoint;
use routelab::gradcheck::mode_scores;
use routelab::layer::Activation;
use routelab::metrics::diagnostics;
use routelab::routing::{route, RoutingBudget, RoutingMode, Scope};
use routelab::scoring::{CompatibilityMatrix, UnifiedScoreConfig};
use routelab::suites::{run_suite, Suite, SuiteReport};
use routelab::task::{make_task, TaskConfig};
use routelab::train::{compare_modes, train_full, ModelSpec, ScopeKind, TrainConfig, TrainError, VERSION};
use routelab::Matrix;

use crate::args::{
    out_dir, resolve, CompareArgs, ExperimentArgs, GradcheckArgs, ReportArgs, RouteArgs, TrainArgs, VerifyArgs,
};
use crate::plots::{emit_plots, AnyReport};

/// How a command that ran to completion ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    PropertyFailure,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> anyhow::Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> anyhow::Result<()> {
    write_file(dir, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn prepare(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// `run_meta.json`: what produced the directory.
fn write_meta(dir: &Path, command: &str, seed: Option<u64>, config: serde_json::Value) -> anyhow::Result<()> {
    write_json(
        dir,
        "run_meta.json",
        &json!({"tool": "routelab", "version": VERSION, "command": command, "seed": seed, "config": config}),
    )
}

fn parse_mode(s: Option<&str>) -> anyhow::Result<RoutingMode> {
    let s = s.ok_or_else(|| anyhow!("--mode is required (tc, ec or usmoe)"))?;
    Ok(s.parse()?)
}

fn parse_alpha(a: Option<f64>) -> anyhow::Result<UnifiedScoreConfig> {
    Ok(UnifiedScoreConfig::new(a.unwrap_or(UnifiedScoreConfig::DEFAULT_ALPHA))?)
}

fn parse_scope_kind(s: Option<&str>, default: ScopeKind) -> anyhow::Result<ScopeKind> {
    match s {
        None => Ok(default),
        Some("sequence") => Ok(ScopeKind::Sequence),
        Some("batch") => Ok(ScopeKind::Batch),
        Some(other) => bail!("unknown scope '{other}', expected sequence or batch"),
    }
}

fn parse_activation(s: Option<&str>) -> anyhow::Result<Activation> {
    match s.unwrap_or("tanh") {
        "tanh" => Ok(Activation::Tanh),
        "identity" => Ok(Activation::Identity),
        other => bail!("unknown activation '{other}', expected tanh or identity"),
    }
}

pub fn route_cmd(cli: &RouteArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let path = args.scores.as_ref().ok_or_else(|| anyhow!("--scores is required"))?;
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let matrix = Matrix::from_csv_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let mode = parse_mode(args.mode.as_deref())?;
    let alpha = parse_alpha(args.alpha)?;
    let budget: RoutingBudget = args
        .budget
        .as_deref()
        .ok_or_else(|| anyhow!("--budget is required"))?
        .parse()?;
    let scope = match parse_scope_kind(args.scope.as_deref(), ScopeKind::Batch)? {
        ScopeKind::Batch => Scope::Batch,
        ScopeKind::Sequence => Scope::Sequence {
            seq_len: args.seq_len.ok_or_else(|| anyhow!("--scope sequence needs --seq-len"))?,
        },
    };
    let raw = CompatibilityMatrix::raw(matrix);
    let scores = match args.basis.as_deref().unwrap_or("scores") {
        "scores" => raw,
        "logits" => mode_scores(&raw, mode, alpha)?,
        other => bail!("unknown basis '{other}', expected scores or logits"),
    };
    let plan = route(&scores, mode, budget, scope)?;

    let dir = out_dir(&args.out);
    prepare(&dir)?;
    let mask: String = (0..plan.tokens())
        .map(|i| {
            let row: Vec<&str> = (0..plan.experts())
                .map(|j| if plan.is_selected(i, j) { "1" } else { "0" })
                .collect();
            row.join(",") + "\n"
        })
        .collect();
    write_file(&dir, "mask.csv", &mask)?;
    write_file(&dir, "gates.csv", &plan.gates().to_csv_string())?;
    let certificate = (mode == RoutingMode::Usmoe).then(|| plan.certificate_holds(scores.scores()));
    let pairs: Vec<(usize, usize)> = plan.pairs().collect();
    let groups = scope.groups(plan.tokens())?.len();
    write_json(
        &dir,
        "summary.json",
        &json!({
            "mode": mode, "budget": budget.to_string(), "budget_used": plan.budget_used(),
            "pairs": pairs, "objective": plan.objective(scores.scores()),
            "dropped_tokens": plan.dropped_tokens(),
            "diagnostics": diagnostics(&plan, groups)?,
            "certificate": certificate,
        }),
    )?;
    write_meta(&dir, "route", args.seed, serde_json::to_value(&args)?)?;
    for (i, j) in &pairs {
        println!("{i},{j}");
    }
    Ok(if certificate == Some(false) {
        eprintln!("budget certificate failed");
        Outcome::PropertyFailure
    } else {
        Outcome::Success
    })
}

fn report_suites(dir: &Path, reports: &[SuiteReport]) -> anyhow::Result<Outcome> {
    let mut ok = true;
    for r in reports {
        println!(
            "{}: {}/{} passed, max error {:e}, certificate {}/{}, invariant violations {}",
            r.suite,
            r.passed,
            r.instances,
            r.max_error,
            r.certificate_checks - r.certificate_failures,
            r.certificate_checks,
            r.invariant_violations
        );
        if !r.all_passed() {
            ok = false;
            let cdir = dir.join("counterexamples");
            prepare(&cdir)?;
            for c in &r.counterexamples {
                write_json(&cdir, &format!("{}-{}.json", r.suite, c.index), c)?;
            }
        }
    }
    Ok(if ok { Outcome::Success } else { Outcome::PropertyFailure })
}

pub fn verify_cmd(cli: &VerifyArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let seed = args.seed.unwrap_or(0);
    let suites: Vec<Suite> = match args.suite.as_deref().unwrap_or("all") {
        "all" => vec![
            Suite::Proposition,
            Suite::Dominance,
            Suite::TopkInvariance,
            Suite::ForwardEquivalence,
        ],
        name => vec![name.parse()?],
    };
    let reports = suites
        .iter()
        .map(|s| run_suite(*s, args.instances.unwrap_or(s.default_instances()), seed))
        .collect::<routelab::Result<Vec<_>>>()?;
    let dir = out_dir(&args.out);
    prepare(&dir)?;
    write_json(&dir, "verify_report.json", &json!({"version": VERSION, "seed": seed, "suites": reports}))?;
    write_meta(&dir, "verify", Some(seed), serde_json::to_value(&args)?)?;
    report_suites(&dir, &reports)
}

pub fn gradcheck_cmd(cli: &GradcheckArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let seed = args.seed.unwrap_or(0);
    let report = run_suite(Suite::Gradcheck, args.instances.unwrap_or(Suite::Gradcheck.default_instances()), seed)?;
    let dir = out_dir(&args.out);
    prepare(&dir)?;
    write_json(&dir, "gradcheck_report.json", &report)?;
    write_meta(&dir, "gradcheck", Some(seed), serde_json::to_value(&args)?)?;
    report_suites(&dir, std::slice::from_ref(&report))
}

/// Fully resolved task, model and optimizer settings.
#[derive(Debug, Clone, Serialize)]
pub struct Experiment {
    pub task: TaskConfig,
    pub model: ModelSpec,
    pub model_seed: u64,
    pub train: TrainConfig,
}

pub fn experiment(e: &ExperimentArgs, mode: RoutingMode) -> anyhow::Result<Experiment> {
    let seed = e.seed.unwrap_or(0);
    let mut task = TaskConfig::new(
        e.task_seed.unwrap_or(seed),
        e.clusters.unwrap_or(4),
        e.d.unwrap_or(8),
        e.noise_std.unwrap_or(0.1),
        e.corrupt.unwrap_or(0.0),
    );
    if let Some(v) = e.center_std {
        task.center_std = v;
    }
    if let Some(v) = e.token_std {
        task.token_std = v;
    }
    if let Some(v) = e.noise_token_std {
        task.noise_token_std = v;
    }
    let model = ModelSpec {
        n_experts: e.experts.unwrap_or(4),
        d_ff: e.d_ff.unwrap_or(16),
        activation: parse_activation(e.activation.as_deref())?,
    };
    let defaults = TrainConfig::new(mode, seed);
    let train = TrainConfig {
        alpha: parse_alpha(e.alpha)?.alpha(),
        budget: match e.budget.as_deref() {
            Some(b) => b.parse()?,
            None => defaults.budget,
        },
        scope: parse_scope_kind(e.scope.as_deref(), defaults.scope)?,
        steps: e.steps.unwrap_or(defaults.steps),
        batch: e.batch.unwrap_or(defaults.batch),
        seq_len: e.seq_len.unwrap_or(defaults.seq_len),
        learning_rate: e.lr.unwrap_or(defaults.learning_rate),
        eval_batches: e.eval_batches.unwrap_or(defaults.eval_batches),
        ..defaults
    };
    Ok(Experiment {
        task,
        model,
        model_seed: e.model_seed.unwrap_or(seed),
        train,
    })
}

pub fn train_cmd(cli: &TrainArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let mode = parse_mode(args.mode.as_deref())?;
    let mut exp = experiment(&args.exp, mode)?;
    let task = make_task(exp.task)?;
    let init = match &args.init {
        Some(path) => {
            let p = checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let dims = p.dims();
            exp.model = ModelSpec {
                n_experts: dims.n,
                d_ff: dims.d_ff,
                activation: p.activation,
            };
            p
        }
        None => exp.model.init(exp.task.d, exp.model_seed)?,
    };
    let dir = out_dir(&args.exp.out);
    prepare(&dir)?;
    write_meta(&dir, "train", Some(exp.train.seed), serde_json::to_value(&exp)?)?;
    let (report, outcome) = match train_full(&task, &init, &exp.train) {
        Ok((report, params)) => {
            checkpoint::save(&params, &dir.join("checkpoint.json"))?;
            (report, Outcome::Success)
        }
        Err(TrainError::Diverged { step, report }) => {
            eprintln!("training diverged at step {step}");
            (*report, Outcome::PropertyFailure)
        }
        Err(TrainError::Setup(e)) => return Err(e.into()),
    };
    write_file(&dir, "run_report.json", &(report.to_json()? + "\n"))?;
    emit_plots(&AnyReport::Run(Box::new(report.clone())), &dir)?;
    println!(
        "{}: final train loss {}, eval loss {}, certificate failures {}",
        report.mode,
        report.train_loss.last().copied().unwrap_or(f64::NAN),
        report.final_eval_loss,
        report.certificate_failures
    );
    if report.certificate_failures > 0 {
        return Ok(Outcome::PropertyFailure);
    }
    Ok(outcome)
}

pub fn compare_cmd(cli: &CompareArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let modes: Vec<RoutingMode> = args
        .modes
        .as_deref()
        .unwrap_or("tc,ec,usmoe")
        .split(',')
        .map(|m| m.trim().parse())
        .collect::<routelab::Result<_>>()?;
    let exps = modes
        .iter()
        .map(|&m| experiment(&args.exp, m))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let first = exps.first().ok_or_else(|| anyhow!("--modes lists no mode"))?;
    let task = make_task(first.task)?;
    let cfgs: Vec<TrainConfig> = exps.iter().map(|e| e.train).collect();
    let dir = out_dir(&args.exp.out);
    prepare(&dir)?;
    write_meta(
        &dir,
        "compare",
        Some(first.train.seed),
        json!({"task": first.task, "model": first.model, "model_seed": first.model_seed, "runs": cfgs}),
    )?;
    let report = match compare_modes(&task, &first.model, first.model_seed, &cfgs) {
        Ok(r) => r,
        Err(TrainError::Diverged { step, report }) => {
            write_file(&dir, "diverged_run_report.json", &(report.to_json()? + "\n"))?;
            eprintln!("{} diverged at step {step}", report.mode);
            return Ok(Outcome::PropertyFailure);
        }
        Err(TrainError::Setup(e)) => return Err(e.into()),
    };
    write_file(&dir, "compare_report.json", &(report.to_json()? + "\n"))?;
    print!("{}", report.summary_csv());
    let failures: usize = report.runs.iter().map(|r| r.certificate_failures).sum();
    emit_plots(&AnyReport::Compare(report), &dir)?;
    Ok(if failures > 0 { Outcome::PropertyFailure } else { Outcome::Success })
}

pub fn report_cmd(cli: &ReportArgs) -> anyhow::Result<Outcome> {
    let args = resolve(cli, cli.config.as_deref())?;
    let input = args.input.as_ref().ok_or_else(|| anyhow!("--input is required"))?;
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let report = AnyReport::parse(&text)?;
    let dir = out_dir(&args.out);
    let written = emit_plots(&report, &dir)?;
    write_meta(&dir, "report", None, serde_json::to_value(&args)?)?;
    for p in written {
        println!("{}", p.display());
    }
    Ok(Outcome::Success)
}
