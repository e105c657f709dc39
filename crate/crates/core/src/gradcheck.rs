//! Central finite-difference checks of [`backward`](crate::layer::backward).
//!
//! The probe loss is `L = sum(upstream * y)`. Each scalar parameter is nudged
//! by `+-step`, gates are recomputed with the routing mask frozen, and the
//! difference quotient is compared with the analytic gradient.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::layer::{
    backward, forward, max_relative_error, regate, Activation, Gating, LayerDims, MoeLayerParams,
    REL_ERROR_FLOOR,
};
use crate::numerics::{Matrix, Rng};
use crate::routing::{route, RoutingBudget, RoutingMode, RoutingPlan, Scope};
use crate::scoring::{
    expert_choice_scores, logits, token_choice_scores, unified_scores, CompatibilityMatrix,
    UnifiedScoreConfig,
};

pub const DEFAULT_FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub block: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub max_rel_error: f64,
}

fn probe_loss(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan, gating: Gating, upstream: &Matrix) -> Result<f64> {
    let plan = regate(h, params, plan, gating)?;
    let y = forward(h, params, &plan)?.output;
    Ok(y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum())
}

fn numeric_block(
    len: usize,
    step: f64,
    mut loss_at: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    (0..len)
        .map(|idx| Ok((loss_at(idx, step)? - loss_at(idx, -step)?) / (2.0 * step)))
        .collect()
}

pub fn check_gradients(
    h: &Matrix,
    params: &MoeLayerParams,
    plan: &RoutingPlan,
    gating: Gating,
    upstream: &Matrix,
    step: f64,
) -> Result<GradCheckReport> {
    let plan = regate(h, params, plan, gating)?;
    let grads = backward(h, params, &plan, gating, upstream)?;
    let mut blocks = Vec::new();
    let mut push = |name: String, analytic: &[f64], numeric: Vec<f64>| {
        blocks.push(BlockError {
            block: name,
            entries: analytic.len(),
            max_rel_error: max_relative_error(analytic, &numeric, REL_ERROR_FLOOR),
        });
    };

    let num = numeric_block(h.data().len(), step, |idx, delta| {
        let mut hp = h.clone();
        hp.data_mut()[idx] += delta;
        probe_loss(&hp, params, &plan, gating, upstream)
    })?;
    push("h".into(), grads.h.data(), num);

    let num = numeric_block(params.router_weights.data().len(), step, |idx, delta| {
        let mut p = params.clone();
        p.router_weights.data_mut()[idx] += delta;
        probe_loss(h, &p, &plan, gating, upstream)
    })?;
    push("router_weights".into(), grads.router_weights.data(), num);

    for (j, g) in grads.experts.iter().enumerate() {
        let num = numeric_block(g.w_in.data().len(), step, |idx, delta| {
            let mut p = params.clone();
            p.experts[j].w_in.data_mut()[idx] += delta;
            probe_loss(h, &p, &plan, gating, upstream)
        })?;
        push(format!("expert{j}.w_in"), g.w_in.data(), num);

        let num = numeric_block(g.b_in.len(), step, |idx, delta| {
            let mut p = params.clone();
            p.experts[j].b_in[idx] += delta;
            probe_loss(h, &p, &plan, gating, upstream)
        })?;
        push(format!("expert{j}.b_in"), &g.b_in, num);

        let num = numeric_block(g.w_out.data().len(), step, |idx, delta| {
            let mut p = params.clone();
            p.experts[j].w_out.data_mut()[idx] += delta;
            probe_loss(h, &p, &plan, gating, upstream)
        })?;
        push(format!("expert{j}.w_out"), g.w_out.data(), num);

        let num = numeric_block(g.b_out.len(), step, |idx, delta| {
            let mut p = params.clone();
            p.experts[j].b_out[idx] += delta;
            probe_loss(h, &p, &plan, gating, upstream)
        })?;
        push(format!("expert{j}.b_out"), &g.b_out, num);
    }

    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        blocks,
        max_rel_error,
    })
}

/// Gate mapping that produced the scores each mode routes on.
pub fn gating_for(mode: RoutingMode, alpha: UnifiedScoreConfig) -> Gating {
    match mode {
        RoutingMode::TokenChoice => Gating::Softmax,
        RoutingMode::ExpertChoice => Gating::Sigmoid,
        RoutingMode::Usmoe => Gating::Unified(alpha),
    }
}

/// Score matrix a mode routes on.
pub fn mode_scores(raw: &CompatibilityMatrix, mode: RoutingMode, alpha: UnifiedScoreConfig) -> Result<CompatibilityMatrix> {
    match mode {
        RoutingMode::TokenChoice => token_choice_scores(raw),
        RoutingMode::ExpertChoice => expert_choice_scores(raw),
        RoutingMode::Usmoe => unified_scores(raw, alpha),
    }
}

/// A seeded random layer, token batch, routing plan and probe direction.
#[derive(Debug, Clone)]
pub struct MicroInstance {
    pub params: MoeLayerParams,
    pub h: Matrix,
    pub plan: RoutingPlan,
    pub gating: Gating,
    pub upstream: Matrix,
}

impl MicroInstance {
    /// Routing budget: `2x` for token choice and usmoe, two tokens per expert
    /// for expert choice.
    pub fn new(seed: u64, dims: LayerDims, tokens: usize, mode: RoutingMode) -> Result<Self> {
        let rng = Rng::new(seed);
        let params = MoeLayerParams::init(dims, Activation::Tanh, &mut rng.child(0))?;
        let h = Matrix::random_normal(tokens, dims.d, 1.0, &mut rng.child(1));
        let upstream = Matrix::random_normal(tokens, dims.d, 1.0, &mut rng.child(2));
        let alpha = UnifiedScoreConfig::default();
        let raw = logits(&h, &params.router_weights)?;
        let scores = mode_scores(&raw, mode, alpha)?;
        let budget = match mode {
            RoutingMode::ExpertChoice => RoutingBudget::PerExpert(2.min(tokens)),
            _ => RoutingBudget::PerToken(2.min(dims.n)),
        };
        let plan = route(&scores, mode, budget, Scope::Sequence { seq_len: tokens })?;
        Ok(Self {
            params,
            h,
            plan,
            gating: gating_for(mode, alpha),
            upstream,
        })
    }

    pub fn check(&self, step: f64) -> Result<GradCheckReport> {
        check_gradients(&self.h, &self.params, &self.plan, self.gating, &self.upstream, step)
    }
}
