//! Desk-scale SGD harness comparing routing mechanisms on a [`SyntheticTask`].
//!
//! The model is a single SMoE layer trained on squared error. Routing is
//! recomputed from the current router weights at every step; gradients reach
//! the router through the gates only.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::gradcheck::{gating_for, mode_scores};
use crate::layer::{backward, forward, Activation, Gating, LayerDims, LayerGradients, MoeLayerParams};
use crate::metrics::{diagnostics, RoutingDiagnostics};
use crate::numerics::{Matrix, Rng};
use crate::routing::{route, RoutingBudget, RoutingMode, RoutingPlan, Scope};
use crate::scoring::{logits, UnifiedScoreConfig};
use crate::task::{Batch, SyntheticTask};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Sequence,
    Batch,
}

impl ScopeKind {
    pub fn scope(self, seq_len: usize) -> Scope {
        match self {
            ScopeKind::Sequence => Scope::Sequence { seq_len },
            ScopeKind::Batch => Scope::Batch,
        }
    }
}

/// Architecture of the layer being trained; the token width comes from the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_experts: usize,
    pub d_ff: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn dims(&self, d: usize) -> LayerDims {
        LayerDims {
            d,
            d_ff: self.d_ff,
            n: self.n_experts,
        }
    }

    /// Seeded initial parameters.
    pub fn init(&self, d: usize, seed: u64) -> Result<MoeLayerParams> {
        MoeLayerParams::init(self.dims(d), self.activation, &mut Rng::new(seed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: RoutingMode,
    pub alpha: f64,
    pub budget: RoutingBudget,
    pub scope: ScopeKind,
    pub steps: usize,
    /// Sequences per step.
    pub batch: usize,
    pub seq_len: usize,
    pub learning_rate: f64,
    /// Seeds the data stream.
    pub seed: u64,
    pub eval_batches: usize,
}

impl TrainConfig {
    pub const DEFAULT_LEARNING_RATE: f64 = 0.05;

    pub fn new(mode: RoutingMode, seed: u64) -> Self {
        Self {
            mode,
            alpha: UnifiedScoreConfig::DEFAULT_ALPHA,
            budget: RoutingBudget::PerToken(2),
            scope: ScopeKind::Sequence,
            steps: 2000,
            batch: 8,
            seq_len: 16,
            learning_rate: Self::DEFAULT_LEARNING_RATE,
            seed,
            eval_batches: 8,
        }
    }

    pub fn with_mode(&self, mode: RoutingMode) -> Self {
        Self { mode, ..*self }
    }

    pub fn validate(&self, n_experts: usize) -> Result<()> {
        UnifiedScoreConfig::new(self.alpha)?;
        self.budget.validate()?;
        if self.batch == 0 || self.seq_len == 0 {
            return Err(Error::Config("batch and seq_len must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        let group = match self.scope {
            ScopeKind::Sequence => self.seq_len,
            ScopeKind::Batch => self.seq_len * self.batch,
        };
        match self.mode {
            RoutingMode::TokenChoice => {
                let k = self.budget.per_token(group, n_experts)?;
                if k == 0 || k > n_experts {
                    return Err(Error::InvalidBudget(format!("token choice k = {k} with N = {n_experts}")));
                }
            }
            RoutingMode::ExpertChoice => {
                let cap = self.budget.per_expert(group, n_experts)?;
                if cap == 0 || cap > group {
                    return Err(Error::InvalidBudget(format!("expert choice cap = {cap} with T = {group}")));
                }
            }
            RoutingMode::Usmoe => {}
        }
        Ok(())
    }

    fn shares_hyperparameters_with(&self, other: &TrainConfig) -> bool {
        self.steps == other.steps
            && self.batch == other.batch
            && self.seq_len == other.seq_len
            && self.learning_rate == other.learning_rate
            && self.seed == other.seed
            && self.eval_batches == other.eval_batches
    }

    fn unified(&self) -> UnifiedScoreConfig {
        UnifiedScoreConfig::new(self.alpha).expect("validated alpha")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub drop_ratio: f64,
    pub experts_per_sequence: f64,
    pub load_cv: f64,
    pub budget_used: usize,
}

impl From<&RoutingDiagnostics> for StepDiagnostics {
    fn from(d: &RoutingDiagnostics) -> Self {
        Self {
            drop_ratio: d.drop_ratio,
            experts_per_sequence: d.experts_per_sequence,
            load_cv: d.load_cv,
            budget_used: d.budget_used,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "state")]
pub enum RunStatus {
    Completed,
    Diverged { step: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub version: String,
    pub mode: RoutingMode,
    pub config: TrainConfig,
    pub task: crate::task::TaskConfig,
    pub model: ModelSpec,
    pub seed: u64,
    pub train_loss: Vec<f64>,
    pub diagnostics: Vec<StepDiagnostics>,
    pub final_eval_loss: f64,
    pub eval_diagnostics: Option<RoutingDiagnostics>,
    /// usmoe steps whose plan failed the global top-c certificate.
    pub certificate_failures: usize,
    pub status: RunStatus,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// `step,train_loss` with one row per recorded step.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,train_loss\n");
        for (s, l) in self.train_loss.iter().enumerate() {
            let _ = writeln!(out, "{s},{l}");
        }
        out
    }

    pub fn diagnostics_csv(&self) -> String {
        let mut out = String::from("step,drop_ratio,experts_per_sequence,load_cv,budget_used\n");
        for (s, d) in self.diagnostics.iter().enumerate() {
            let _ = writeln!(
                out,
                "{s},{},{},{},{}",
                d.drop_ratio, d.experts_per_sequence, d.load_cv, d.budget_used
            );
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at step {step}")]
    Diverged { step: usize, report: Box<RunReport> },
    #[error(transparent)]
    Setup(#[from] Error),
}

/// Result of running one batch through the layer.
pub struct StepOutcome {
    pub loss: f64,
    pub plan: RoutingPlan,
    pub scores: Matrix,
    pub output: Matrix,
}

/// Routes a batch with `cfg`'s mechanism and evaluates the mean over tokens of
/// the squared error `|y - target|^2`.
pub fn evaluate_batch(params: &MoeLayerParams, batch: &Batch, cfg: &TrainConfig) -> Result<StepOutcome> {
    let raw = logits(&batch.inputs, &params.router_weights)?;
    let scores = mode_scores(&raw, cfg.mode, cfg.unified())?;
    let plan = route(&scores, cfg.mode, cfg.budget, cfg.scope.scope(batch.seq_len))?;
    let output = forward(&batch.inputs, params, &plan)?.output;
    let rows = batch.inputs.rows() as f64;
    let loss = output
        .data()
        .iter()
        .zip(batch.targets.data())
        .map(|(y, t)| (y - t) * (y - t))
        .sum::<f64>()
        / rows;
    Ok(StepOutcome {
        loss,
        plan,
        scores: scores.into_scores(),
        output,
    })
}

/// Gradient of [`evaluate_batch`]'s loss.
pub fn loss_gradients(params: &MoeLayerParams, batch: &Batch, outcome: &StepOutcome, gating: Gating) -> Result<LayerGradients> {
    let rows = batch.inputs.rows() as f64;
    let upstream = Matrix::from_fn(outcome.output.rows(), outcome.output.cols(), |i, j| {
        2.0 * (outcome.output.get(i, j) - batch.targets.get(i, j)) / rows
    });
    backward(&batch.inputs, params, &outcome.plan, gating, &upstream)
}

/// In-place SGD update.
pub fn apply_sgd(params: &mut MoeLayerParams, grads: &LayerGradients, lr: f64) {
    let step = |p: &mut [f64], g: &[f64]| {
        for (p, g) in p.iter_mut().zip(g) {
            *p -= lr * g;
        }
    };
    step(params.router_weights.data_mut(), grads.router_weights.data());
    for (e, g) in params.experts.iter_mut().zip(&grads.experts) {
        step(e.w_in.data_mut(), g.w_in.data());
        step(&mut e.b_in, &g.b_in);
        step(e.w_out.data_mut(), g.w_out.data());
        step(&mut e.b_out, &g.b_out);
    }
}

pub fn train(task: &SyntheticTask, model: &MoeLayerParams, cfg: &TrainConfig) -> std::result::Result<RunReport, TrainError> {
    train_full(task, model, cfg).map(|(report, _)| report)
}

/// [`train`] that also hands back the final parameters.
pub fn train_full(
    task: &SyntheticTask,
    model: &MoeLayerParams,
    cfg: &TrainConfig,
) -> std::result::Result<(RunReport, MoeLayerParams), TrainError> {
    let dims = model.dims();
    if dims.d != task.config.d {
        return Err(Error::Config(format!("model width {} differs from task width {}", dims.d, task.config.d)).into());
    }
    cfg.validate(dims.n)?;
    let gating = gating_for(cfg.mode, cfg.unified());
    let data = Rng::new(cfg.seed);
    let mut params = model.clone();
    let mut report = RunReport {
        version: VERSION.to_string(),
        mode: cfg.mode,
        config: *cfg,
        task: task.config,
        model: ModelSpec {
            n_experts: dims.n,
            d_ff: dims.d_ff,
            activation: model.activation,
        },
        seed: cfg.seed,
        train_loss: Vec::with_capacity(cfg.steps),
        diagnostics: Vec::with_capacity(cfg.steps),
        final_eval_loss: f64::NAN,
        eval_diagnostics: None,
        certificate_failures: 0,
        status: RunStatus::Completed,
    };

    let train_stream = data.child(TRAIN_STREAM);
    for step in 0..cfg.steps {
        let batch = task.sample(&mut train_stream.child(step as u64), cfg.batch, cfg.seq_len);
        let outcome = evaluate_batch(&params, &batch, cfg)?;
        if !outcome.loss.is_finite() {
            report.status = RunStatus::Diverged { step };
            return Err(TrainError::Diverged {
                step,
                report: Box::new(report),
            });
        }
        let diag = diagnostics(&outcome.plan, cfg.batch)?;
        if cfg.mode == RoutingMode::Usmoe && !outcome.plan.certificate_holds(&outcome.scores) {
            report.certificate_failures += 1;
        }
        report.train_loss.push(outcome.loss);
        report.diagnostics.push(StepDiagnostics::from(&diag));
        if cfg.learning_rate > 0.0 {
            let grads = loss_gradients(&params, &batch, &outcome, gating)?;
            apply_sgd(&mut params, &grads, cfg.learning_rate);
        }
    }

    let eval_stream = data.child(EVAL_STREAM);
    let mut total = 0.0;
    let mut plans = Vec::new();
    for b in 0..cfg.eval_batches {
        let batch = task.sample(&mut eval_stream.child(b as u64), cfg.batch, cfg.seq_len);
        let outcome = evaluate_batch(&params, &batch, cfg)?;
        total += outcome.loss;
        plans.push(outcome.plan);
    }
    if cfg.eval_batches > 0 {
        report.final_eval_loss = total / cfg.eval_batches as f64;
        report.eval_diagnostics = Some(diagnostics(&plans[0], cfg.batch)?);
    }
    if !report.final_eval_loss.is_finite() && cfg.eval_batches > 0 {
        report.status = RunStatus::Diverged { step: cfg.steps };
        return Err(TrainError::Diverged {
            step: cfg.steps,
            report: Box::new(report),
        });
    }
    Ok((report, params))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub version: String,
    pub base_model_seed: u64,
    pub model: ModelSpec,
    pub runs: Vec<RunReport>,
}

impl CompareReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Column label per run: the mode name, suffixed by position when repeated.
    pub fn labels(&self) -> Vec<String> {
        self.runs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let same = self.runs.iter().filter(|o| o.mode == r.mode).count() > 1;
                if same {
                    format!("{}_{i}", r.mode)
                } else {
                    r.mode.to_string()
                }
            })
            .collect()
    }

    /// Side-by-side loss curves: `step,<mode>,<mode>,...`.
    pub fn loss_csv(&self) -> String {
        let labels = self.labels();
        let mut out = format!("step,{}\n", labels.join(","));
        let steps = self.runs.iter().map(|r| r.train_loss.len()).max().unwrap_or(0);
        for s in 0..steps {
            let cells: Vec<String> = self
                .runs
                .iter()
                .map(|r| r.train_loss.get(s).map(|v| v.to_string()).unwrap_or_default())
                .collect();
            let _ = writeln!(out, "{s},{}", cells.join(","));
        }
        out
    }

    /// Side-by-side diagnostics: `step,<mode>_drop_ratio,<mode>_experts_per_sequence,<mode>_load_cv,...`.
    pub fn diagnostics_csv(&self) -> String {
        let mut header = vec!["step".to_string()];
        for label in self.labels() {
            for field in ["drop_ratio", "experts_per_sequence", "load_cv"] {
                header.push(format!("{label}_{field}"));
            }
        }
        let mut out = header.join(",") + "\n";
        let steps = self.runs.iter().map(|r| r.diagnostics.len()).max().unwrap_or(0);
        for s in 0..steps {
            let mut cells = vec![s.to_string()];
            for r in &self.runs {
                match r.diagnostics.get(s) {
                    Some(d) => cells.extend([d.drop_ratio, d.experts_per_sequence, d.load_cv].map(|v| v.to_string())),
                    None => cells.extend(std::iter::repeat_n(String::new(), 3)),
                }
            }
            out += &cells.join(",");
            out.push('\n');
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("mode,final_train_loss,final_eval_loss,mean_drop_ratio,certificate_failures\n");
        for (label, r) in self.labels().iter().zip(&self.runs) {
            let mean_drop = r.diagnostics.iter().map(|d| d.drop_ratio).sum::<f64>() / r.diagnostics.len().max(1) as f64;
            let _ = writeln!(
                out,
                "{label},{},{},{mean_drop},{}",
                r.train_loss.last().copied().unwrap_or(f64::NAN),
                r.final_eval_loss,
                r.certificate_failures
            );
        }
        out
    }
}

/// Trains every config from the same initial parameters and data stream.
pub fn compare_modes(
    task: &SyntheticTask,
    model: &ModelSpec,
    base_model_seed: u64,
    cfgs: &[TrainConfig],
) -> std::result::Result<CompareReport, TrainError> {
    let Some(first) = cfgs.first() else {
        return Err(Error::Config("compare needs at least one config".into()).into());
    };
    if let Some(bad) = cfgs.iter().find(|c| !c.shares_hyperparameters_with(first)) {
        return Err(Error::Config(format!(
            "config for {} does not share steps/batch/seq_len/learning_rate/seed/eval_batches with the first",
            bad.mode
        ))
        .into());
    }
    let init = model.init(task.config.d, base_model_seed)?;
    let runs = cfgs
        .iter()
        .map(|cfg| train(task, &init, cfg))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(CompareReport {
        version: VERSION.to_string(),
        base_model_seed,
        model: *model,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::ExpertParams;
    use crate::task::{make_task, TaskConfig};

    fn small_cfg(mode: RoutingMode) -> TrainConfig {
        TrainConfig {
            steps: 30,
            batch: 2,
            eval_batches: 2,
            ..TrainConfig::new(mode, 4)
        }
    }

    const MODEL: ModelSpec = ModelSpec {
        n_experts: 4,
        d_ff: 16,
        activation: Activation::Tanh,
    };

    #[test]
    fn zero_learning_rate_freezes_the_model() {
        let task = make_task(TaskConfig::new(1, 4, 8, 0.1, 0.0)).unwrap();
        let init = MODEL.init(8, 2).unwrap();
        let cfg = TrainConfig { learning_rate: 0.0, ..small_cfg(RoutingMode::Usmoe) };
        let a = train(&task, &init, &cfg).unwrap();
        // same parameters, fresh data each step: evaluate step 0's batch again
        let rng = Rng::new(cfg.seed).child(TRAIN_STREAM);
        for step in [0usize, 7, 29] {
            let batch = task.sample(&mut rng.child(step as u64), cfg.batch, cfg.seq_len);
            let l = evaluate_batch(&init, &batch, &cfg).unwrap().loss;
            assert_eq!(l, a.train_loss[step]);
        }
        // and with a fixed batch the series is exactly constant
        let batch = task.sample(&mut Rng::new(0), 2, 16);
        let losses: Vec<f64> = (0..5).map(|_| evaluate_batch(&init, &batch, &cfg).unwrap().loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn realizable_optimum_has_zero_loss() {
        let task = make_task(TaskConfig::new(7, 4, 8, 0.0, 0.0)).unwrap();
        let experts = task.maps.iter().map(|m| ExpertParams::linear(m, 16).unwrap()).collect();
        let params = MoeLayerParams::new(Matrix::zeros(8, 4), experts, Activation::Identity).unwrap();
        let batch = task.sample(&mut Rng::new(3), 4, 16);
        let sel: Vec<_> = batch.clusters.iter().enumerate().map(|(i, c)| (i, c.unwrap(), 1.0)).collect();
        let plan = RoutingPlan::from_selections(64, 4, &sel, RoutingMode::TokenChoice, Scope::Batch).unwrap();
        let out = forward(&batch.inputs, &params, &plan).unwrap().output;
        assert!(out.max_abs_diff(&batch.targets) < 1e-12);
    }

    #[test]
    fn runs_are_deterministic() {
        let task = make_task(TaskConfig::new(1, 4, 8, 0.1, 0.25)).unwrap();
        let init = MODEL.init(8, 2).unwrap();
        for mode in RoutingMode::ALL {
            let a = train(&task, &init, &small_cfg(mode)).unwrap();
            let b = train(&task, &init, &small_cfg(mode)).unwrap();
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
            assert_eq!(a.certificate_failures, 0);
        }
    }

    #[test]
    fn sgd_step_decreases_loss_to_first_order() {
        let task = make_task(TaskConfig::new(2, 4, 8, 0.0, 0.0)).unwrap();
        let params = MODEL.init(8, 5).unwrap();
        let batch = task.sample(&mut Rng::new(9), 2, 16);
        for mode in RoutingMode::ALL {
            let cfg = small_cfg(mode);
            let before = evaluate_batch(&params, &batch, &cfg).unwrap();
            let grads = loss_gradients(&params, &batch, &before, gating_for(mode, cfg.unified())).unwrap();
            let sq: f64 = std::iter::once(grads.router_weights.data())
                .chain(grads.experts.iter().flat_map(|g| [g.w_in.data(), &g.b_in[..], g.w_out.data(), &g.b_out[..]]))
                .flat_map(|s| s.iter())
                .map(|g| g * g)
                .sum();
            let eps = 1e-4;
            let mut stepped = params.clone();
            apply_sgd(&mut stepped, &grads, eps);
            // keep the routing of the first evaluation fixed
            let plan = crate::layer::regate(&batch.inputs, &stepped, &before.plan, gating_for(mode, cfg.unified())).unwrap();
            let out = forward(&batch.inputs, &stepped, &plan).unwrap().output;
            let after = out.data().iter().zip(batch.targets.data()).map(|(y, t)| (y - t) * (y - t)).sum::<f64>() / 32.0;
            assert!(after <= before.loss - eps * 0.9 * sq, "{mode}: {after} vs {} - {}", before.loss, eps * sq);
        }
    }

    #[test]
    fn fractional_budget_selects_exactly_per_sequence() {
        let task = make_task(TaskConfig::new(3, 4, 8, 0.1, 0.0)).unwrap();
        let init = MODEL.init(8, 1).unwrap();
        let cfg = TrainConfig { budget: RoutingBudget::Fractional(1.5), ..small_cfg(RoutingMode::Usmoe) };
        let r = train(&task, &init, &cfg).unwrap();
        assert!(r.diagnostics.iter().all(|d| d.budget_used == 24 * cfg.batch));
    }

    #[test]
    fn divergence_is_reported() {
        let task = make_task(TaskConfig::new(3, 4, 8, 0.1, 0.0)).unwrap();
        let init = MODEL.init(8, 1).unwrap();
        let cfg = TrainConfig { learning_rate: 1e6, steps: 200, ..small_cfg(RoutingMode::TokenChoice) };
        match train(&task, &init, &cfg) {
            Err(TrainError::Diverged { step, report }) => {
                assert_eq!(report.status, RunStatus::Diverged { step });
                assert_eq!(report.train_loss.len(), step);
            }
            other => panic!("expected divergence, got {:?}", other.map(|r| r.final_eval_loss)),
        }
    }

    #[test]
    fn compare_rejects_mismatched_hyperparameters() {
        let task = make_task(TaskConfig::new(3, 4, 8, 0.1, 0.0)).unwrap();
        let a = small_cfg(RoutingMode::TokenChoice);
        let b = TrainConfig { learning_rate: 0.1, ..small_cfg(RoutingMode::Usmoe) };
        assert!(compare_modes(&task, &MODEL, 1, &[a, b]).is_err());
        assert!(compare_modes(&task, &MODEL, 1, &[]).is_err());
    }

    #[test]
    fn single_mode_compare_is_train() {
        let task = make_task(TaskConfig::new(3, 4, 8, 0.1, 0.0)).unwrap();
        let cfg = small_cfg(RoutingMode::ExpertChoice);
        let cmp = compare_modes(&task, &MODEL, 11, &[cfg]).unwrap();
        let direct = train(&task, &MODEL.init(8, 11).unwrap(), &cfg).unwrap();
        assert_eq!(cmp.runs, vec![direct]);
        assert_eq!(cmp.loss_csv().lines().count(), cfg.steps + 1);
    }

    #[test]
    fn invalid_budgets_are_rejected_up_front() {
        let task = make_task(TaskConfig::new(3, 4, 8, 0.1, 0.0)).unwrap();
        let init = MODEL.init(8, 1).unwrap();
        let cfg = TrainConfig { budget: RoutingBudget::Fractional(1.5), ..small_cfg(RoutingMode::TokenChoice) };
        assert!(matches!(train(&task, &init, &cfg), Err(TrainError::Setup(_))));
        let cfg = TrainConfig { budget: RoutingBudget::GlobalPairs(18), ..small_cfg(RoutingMode::ExpertChoice) };
        assert!(train(&task, &init, &cfg).is_err());
    }
}
