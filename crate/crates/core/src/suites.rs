//! Seeded verification suites shared by the command line and the acceptance
//! tests. Instance `i` of a suite run with seed `s` draws everything from
//! `Rng::new(s).child(i)`, so single failures can be replayed in isolation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::gradcheck::{mode_scores, MicroInstance, DEFAULT_FD_STEP};
use crate::layer::{
    forward, forward_dense_reference, jacobian_report, Activation, JacobianMode, LayerDims,
    MoeLayerParams,
};
use crate::metrics::diagnostics;
use crate::numerics::{stable_softmax, Matrix, Rng};
use crate::oracle::{check_proposition, verify_mechanism_gap};
use crate::routing::{
    dominance_profile, route, route_usmoe, RoutingBudget, RoutingMode, Scope,
};
use crate::scoring::{logits, unified_scores, CompatibilityMatrix, UnifiedScoreConfig};
use crate::select::top_k_indices;

/// Forward outputs must agree to this absolute tolerance.
pub const FORWARD_TOL: f64 = 1e-12;
/// Finite-difference relative error bound for gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Jacobian closed-form reconstruction bound.
pub const JACOBIAN_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Proposition,
    Dominance,
    TopkInvariance,
    ForwardEquivalence,
    Gradcheck,
}

impl Suite {
    pub const ALL: [Suite; 5] = [
        Suite::Proposition,
        Suite::Dominance,
        Suite::TopkInvariance,
        Suite::ForwardEquivalence,
        Suite::Gradcheck,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Suite::Proposition => "proposition",
            Suite::Dominance => "dominance",
            Suite::TopkInvariance => "topk-invariance",
            Suite::ForwardEquivalence => "forward-equivalence",
            Suite::Gradcheck => "gradcheck",
        }
    }

    pub fn default_instances(&self) -> usize {
        match self {
            Suite::Proposition => 500,
            Suite::Dominance => 1000,
            Suite::TopkInvariance => 1000,
            Suite::ForwardEquivalence => 200,
            Suite::Gradcheck => 20,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.label() == s)
            .ok_or_else(|| Error::Parse(format!("unknown suite '{s}'")))
    }
}

/// One instance's verdict. `error` is the suite's headline discrepancy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceResult {
    pub index: usize,
    pub passed: bool,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    pub index: usize,
    pub detail: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub instances: usize,
    pub passed: usize,
    pub failed: usize,
    pub max_error: f64,
    /// Usmoe plans whose global top-c certificate was checked, and failures.
    pub certificate_checks: usize,
    pub certificate_failures: usize,
    /// Token-choice plans that dropped a token or expert-choice plans with
    /// unequal load.
    pub invariant_violations: usize,
    pub results: Vec<InstanceResult>,
    pub counterexamples: Vec<Counterexample>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.failed == 0 && self.certificate_failures == 0 && self.invariant_violations == 0
    }
}

#[derive(Default)]
struct Tally {
    certificate_checks: usize,
    certificate_failures: usize,
    invariant_violations: usize,
}

impl Tally {
    fn certificate(&mut self, ok: bool) -> bool {
        self.certificate_checks += 1;
        if !ok {
            self.certificate_failures += 1;
        }
        ok
    }
}

/// Outcome of a single instance: pass flag, headline error, and a
/// counterexample payload used only on failure.
type Verdict = (bool, f64, serde_json::Value);

pub fn run_suite(suite: Suite, instances: usize, seed: u64) -> Result<SuiteReport> {
    let root = Rng::new(seed);
    let mut tally = Tally::default();
    let mut results = Vec::with_capacity(instances);
    let mut counterexamples = Vec::new();
    for index in 0..instances {
        let mut rng = root.child(index as u64);
        let (passed, error, detail) = match suite {
            Suite::Proposition => proposition_instance(&mut rng, &mut tally)?,
            Suite::Dominance => dominance_instance(&mut rng, &mut tally)?,
            Suite::TopkInvariance => topk_instance(&mut rng)?,
            Suite::ForwardEquivalence => forward_instance(&mut rng, &mut tally)?,
            Suite::Gradcheck => gradcheck_instance(&mut rng, &mut tally)?,
        };
        if !passed {
            counterexamples.push(Counterexample { index, detail });
        }
        results.push(InstanceResult { index, passed, error });
    }
    let passed = results.iter().filter(|r| r.passed).count();
    Ok(SuiteReport {
        suite,
        seed,
        instances,
        passed,
        failed: instances - passed,
        max_error: results.iter().map(|r| r.error).fold(0.0, f64::max),
        certificate_checks: tally.certificate_checks,
        certificate_failures: tally.certificate_failures,
        invariant_violations: tally.invariant_violations,
        results,
        counterexamples,
    })
}

/// Standard normal logits; one draw in four is rounded to the nearest
/// integer in `[-1, 1]` so that exact ties show up regularly.
fn random_logits(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let tied = rng.uniform() < 0.25;
    Matrix::from_fn(rows, cols, |_, _| {
        let v = rng.normal();
        if tied {
            v.round().clamp(-1.0, 1.0)
        } else {
            v
        }
    })
}

fn proposition_instance(rng: &mut Rng, tally: &mut Tally) -> Result<Verdict> {
    let t = rng.int_range(2, 6);
    let n = rng.int_range(2, 5);
    let c = rng.int_range(1, 12);
    let raw = CompatibilityMatrix::raw(random_logits(rng, t, n));
    let scores = unified_scores(&raw, UnifiedScoreConfig::default())?.into_scores();
    let check = check_proposition(&scores, c)?;
    let cert = tally.certificate(check.certificate);
    let error = (check.usmoe_objective - check.oracle.optimal_objective).abs();
    let detail = json!({
        "scores": scores.data(), "tokens": t, "experts": n, "c": c,
        "usmoe_objective": check.usmoe_objective,
        "oracle_objective": check.oracle.optimal_objective,
        "oracle_mask": check.oracle.optimal_mask,
    });
    Ok((check.holds && cert, error, detail))
}

fn dominance_instance(rng: &mut Rng, tally: &mut Tally) -> Result<Verdict> {
    let n = rng.int_range(2, 5);
    let c = n * rng.int_range(1, n);
    let s = random_logits(rng, n, n);
    let cm = CompatibilityMatrix::raw(s.clone());
    let gap = verify_mechanism_gap(&s, c)?;
    let profile = dominance_profile(&cm, c)?;
    let plan = route_usmoe(&cm, RoutingBudget::GlobalPairs(c), Scope::Batch)?;
    let cert = tally.certificate(plan.certificate_holds(&s));
    // shortfall of the global objective behind the better baseline
    let error = (gap.m_tc.max(gap.m_ec) - gap.m_usmoe).max(0.0);
    let detail = json!({
        "scores": s.data(), "size": n, "c": c,
        "m_tc": gap.m_tc, "m_ec": gap.m_ec, "m_usmoe": gap.m_usmoe,
        "profile": profile,
    });
    Ok((gap.holds() && profile.global_dominates() && cert, error, detail))
}

fn topk_instance(rng: &mut Rng) -> Result<Verdict> {
    let n = rng.int_range(2, 8);
    let scale = rng.uniform_range(0.1, 10.0);
    let row: Vec<f64> = random_logits(rng, 1, n).data().iter().map(|v| v * scale).collect();
    let probs = stable_softmax(&row)?;
    let mut mismatched = Vec::new();
    for k in 1..=n {
        let mut a = top_k_indices(&row, k);
        let mut b = top_k_indices(&probs, k);
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            mismatched.push(json!({"k": k, "raw": a, "softmax": b}));
        }
    }
    let passed = mismatched.is_empty();
    let detail = json!({"row": row, "mismatches": mismatched});
    Ok((passed, mismatched.len() as f64, detail))
}

fn random_dims(rng: &mut Rng) -> LayerDims {
    LayerDims {
        d: rng.int_range(2, 8),
        d_ff: rng.int_range(2, 12),
        n: rng.int_range(2, 5),
    }
}

fn forward_instance(rng: &mut Rng, tally: &mut Tally) -> Result<Verdict> {
    let dims = random_dims(rng);
    let seq_len = rng.int_range(2, 6);
    let seqs = rng.int_range(1, 3);
    let activation = if rng.uniform() < 0.5 { Activation::Tanh } else { Activation::Identity };
    let params = MoeLayerParams::init(dims, activation, rng)?;
    let h = Matrix::random_normal(seq_len * seqs, dims.d, 1.0, rng);
    let raw = logits(&h, &params.router_weights)?;
    let scope = Scope::Sequence { seq_len };
    let alpha = UnifiedScoreConfig::default();

    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    let mut ok = true;
    for mode in RoutingMode::ALL {
        let budget = match mode {
            RoutingMode::TokenChoice => RoutingBudget::PerToken(rng.int_range(1, dims.n)),
            RoutingMode::ExpertChoice => RoutingBudget::PerExpert(rng.int_range(1, seq_len)),
            RoutingMode::Usmoe => RoutingBudget::GlobalPairs(rng.int_range(1, seq_len * dims.n)),
        };
        let scores = mode_scores(&raw, mode, alpha)?;
        let plan = route(&scores, mode, budget, scope)?;
        let fast = forward(&h, &params, &plan)?.output;
        let dense = forward_dense_reference(&h, &params, &plan)?.output;
        let diff = fast.max_abs_diff(&dense);
        worst = worst.max(diff);
        let diag = diagnostics(&plan, seqs)?;
        let invariant = match mode {
            RoutingMode::TokenChoice => diag.drop_ratio == 0.0,
            RoutingMode::ExpertChoice => diag.load_cv == 0.0,
            RoutingMode::Usmoe => tally.certificate(plan.certificate_holds(scores.scores())),
        };
        if !invariant && mode != RoutingMode::Usmoe {
            tally.invariant_violations += 1;
        }
        if diff > FORWARD_TOL || !invariant {
            ok = false;
            failures.push(json!({"mode": mode, "budget": budget, "max_abs_diff": diff, "invariant": invariant}));
        }
    }
    let detail = json!({"dims": dims, "seq_len": seq_len, "sequences": seqs, "failures": failures});
    Ok((ok, worst, detail))
}

/// Micro layer shape fixed by the gradient suite.
pub const GRADCHECK_DIMS: LayerDims = LayerDims { d: 8, d_ff: 16, n: 4 };
pub const GRADCHECK_TOKENS: usize = 5;

fn gradcheck_instance(rng: &mut Rng, tally: &mut Tally) -> Result<Verdict> {
    let seed = rng.next_u64();
    let alpha = UnifiedScoreConfig::default();
    let mut ok = true;
    let mut worst = 0.0f64;
    let mut modes = Vec::new();
    for mode in RoutingMode::ALL {
        let inst = MicroInstance::new(seed, GRADCHECK_DIMS, GRADCHECK_TOKENS, mode)?;
        let report = inst.check(DEFAULT_FD_STEP)?;
        worst = worst.max(report.max_rel_error);
        let mut mode_ok = report.blocks.iter().all(|b| b.max_rel_error < GRAD_REL_TOL);
        if mode == RoutingMode::Usmoe {
            let raw = logits(&inst.h, &inst.params.router_weights)?;
            let scores = mode_scores(&raw, mode, alpha)?;
            mode_ok &= tally.certificate(inst.plan.certificate_holds(scores.scores()));
        }
        ok &= mode_ok;
        modes.push(json!({"mode": mode, "passed": mode_ok, "blocks": report.blocks}));
    }

    let inst = MicroInstance::new(seed, GRADCHECK_DIMS, GRADCHECK_TOKENS, RoutingMode::Usmoe)?;
    let mut jacobians = Vec::new();
    for (mode, terms) in [
        (JacobianMode::TokenChoice, GRADCHECK_DIMS.n),
        (JacobianMode::Usmoe(alpha), 2 * GRADCHECK_DIMS.n),
    ] {
        let r = jacobian_report(inst.h.row(0), &inst.params, mode)?;
        let jac_ok = r.decomposition_error <= JACOBIAN_TOL
            && r.routing_terms.len() == terms
            && r.max_rel_error < GRAD_REL_TOL;
        worst = worst.max(r.max_rel_error);
        ok &= jac_ok;
        jacobians.push(json!({
            "mode": mode, "passed": jac_ok,
            "decomposition_error": r.decomposition_error,
            "routing_terms": r.routing_terms.len(),
            "max_rel_error": r.max_rel_error,
        }));
    }
    Ok((ok, worst, json!({"seed": seed, "modes": modes, "jacobians": jacobians})))
}
