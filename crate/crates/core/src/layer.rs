//! SMoE layer: `y_i = sum_j gate_ij * FFN_j(h_i)` over the experts selected for token `i`.
//!
//! Gradients follow the frozen-mask convention. The top-k selection is a
//! constant; gradients reach the router only through the gate values, which
//! are recomputed from the logits `h W` by the score mapping in [`Gating`].

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{sigmoid, softmax_unchecked, Matrix, Rng};
use crate::routing::RoutingPlan;
use crate::scoring::UnifiedScoreConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Identity => x,
        }
    }

    /// Derivative at pre-activation `x`.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Self::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Self::Identity => 1.0,
        }
    }
}

/// Two-layer feed-forward expert `x -> act(x W_in + b_in) W_out + b_out`
/// acting on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl ExpertParams {
    pub fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            w_in: Matrix::zeros(d, d_ff),
            b_in: vec![0.0; d_ff],
            w_out: Matrix::zeros(d_ff, d),
            b_out: vec![0.0; d],
        }
    }

    pub fn random(d: usize, d_ff: usize, rng: &mut Rng) -> Self {
        Self {
            w_in: Matrix::random_normal(d, d_ff, 1.0 / (d as f64).sqrt(), rng),
            b_in: (0..d_ff).map(|_| 0.1 * rng.normal()).collect(),
            w_out: Matrix::random_normal(d_ff, d, 1.0 / (d_ff as f64).sqrt(), rng),
            b_out: (0..d).map(|_| 0.1 * rng.normal()).collect(),
        }
    }

    /// Expert computing `x -> x M` exactly under [`Activation::Identity`]
    /// (the hidden layer copies the input into its first `d` units).
    pub fn linear(map: &Matrix, d_ff: usize) -> Result<Self> {
        let d = map.rows();
        if map.cols() != d || d_ff < d {
            return Err(mismatch(
                "ExpertParams::linear",
                format!("map must be square with d_ff >= d, got {:?} and d_ff {d_ff}", map.shape()),
            ));
        }
        let mut e = Self::zeros(d, d_ff);
        for i in 0..d {
            e.w_in.set(i, i, 1.0);
            e.w_out.row_mut(i).copy_from_slice(map.row(i));
        }
        Ok(e)
    }

    pub fn d(&self) -> usize {
        self.w_in.rows()
    }

    pub fn d_ff(&self) -> usize {
        self.w_in.cols()
    }

    fn check(&self, d: usize, d_ff: usize) -> Result<()> {
        let ok = self.w_in.shape() == (d, d_ff)
            && self.b_in.len() == d_ff
            && self.w_out.shape() == (d_ff, d)
            && self.b_out.len() == d;
        if !ok {
            return Err(mismatch("ExpertParams", format!("expected d = {d}, d_ff = {d_ff}")));
        }
        if !(self.w_in.is_finite()
            && self.w_out.is_finite()
            && self.b_in.iter().chain(&self.b_out).all(|v| v.is_finite()))
        {
            return Err(Error::Config("expert parameters must be finite".into()));
        }
        Ok(())
    }

    /// Batched forward over the rows of `x`; returns (pre-activation, hidden, output).
    fn forward_batch(&self, x: &Matrix, act: Activation) -> (Matrix, Matrix, Matrix) {
        let mut pre = x.matmul(&self.w_in).expect("expert input width");
        for i in 0..pre.rows() {
            for (p, b) in pre.row_mut(i).iter_mut().zip(&self.b_in) {
                *p += b;
            }
        }
        let hidden = pre.map(|v| act.apply(v));
        let mut out = hidden.matmul(&self.w_out).expect("expert hidden width");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&self.b_out) {
                *o += b;
            }
        }
        (pre, hidden, out)
    }

    /// Single-row forward written with explicit loops.
    pub fn apply_row(&self, x: &[f64], act: Activation) -> Vec<f64> {
        let (d, d_ff) = (self.d(), self.d_ff());
        let mut hidden = vec![0.0; d_ff];
        for (m, hm) in hidden.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, &xk) in x.iter().enumerate().take(d) {
                acc += xk * self.w_in.get(k, m);
            }
            *hm = act.apply(acc + self.b_in[m]);
        }
        (0..d)
            .map(|a| {
                let mut acc = 0.0;
                for (m, &hm) in hidden.iter().enumerate() {
                    acc += hm * self.w_out.get(m, a);
                }
                acc + self.b_out[a]
            })
            .collect()
    }

    /// `J[a][b] = d out_a / d x_b`.
    pub fn jacobian(&self, x: &[f64], act: Activation) -> Matrix {
        let (d, d_ff) = (self.d(), self.d_ff());
        let slope: Vec<f64> = (0..d_ff)
            .map(|m| {
                let pre: f64 = (0..d).map(|k| x[k] * self.w_in.get(k, m)).sum::<f64>() + self.b_in[m];
                act.derivative(pre)
            })
            .collect();
        Matrix::from_fn(d, d, |a, b| {
            (0..d_ff)
                .map(|m| self.w_out.get(m, a) * slope[m] * self.w_in.get(b, m))
                .sum()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d: usize,
    pub d_ff: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayerParams {
    /// d x N; column j is the embedding of expert j.
    pub router_weights: Matrix,
    pub experts: Vec<ExpertParams>,
    pub activation: Activation,
}

impl MoeLayerParams {
    pub fn new(router_weights: Matrix, experts: Vec<ExpertParams>, activation: Activation) -> Result<Self> {
        let p = Self {
            router_weights,
            experts,
            activation,
        };
        p.validate()?;
        Ok(p)
    }

    /// Router ~ N(0, 1/d), experts with fan-in scaled Gaussian weights.
    pub fn init(dims: LayerDims, activation: Activation, rng: &mut Rng) -> Result<Self> {
        let router = Matrix::random_normal(dims.d, dims.n, 1.0 / (dims.d as f64).sqrt(), rng);
        let experts = (0..dims.n)
            .map(|_| ExpertParams::random(dims.d, dims.d_ff, rng))
            .collect();
        Self::new(router, experts, activation)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, n) = self.router_weights.shape();
        if d == 0 || n == 0 {
            return Err(Error::Config("layer needs d >= 1 and N >= 1".into()));
        }
        if self.experts.len() != n {
            return Err(mismatch(
                "MoeLayerParams",
                format!("router has {n} columns but {} experts", self.experts.len()),
            ));
        }
        if !self.router_weights.is_finite() {
            return Err(Error::Config("router weights must be finite".into()));
        }
        let d_ff = self.experts[0].d_ff();
        if d_ff == 0 {
            return Err(Error::Config("layer needs d_ff >= 1".into()));
        }
        self.experts.iter().try_for_each(|e| e.check(d, d_ff))
    }

    pub fn dims(&self) -> LayerDims {
        LayerDims {
            d: self.router_weights.rows(),
            d_ff: self.experts[0].d_ff(),
            n: self.router_weights.cols(),
        }
    }

    /// Embedding `e_j` of expert `j` (column `j` of the router).
    pub fn expert_embedding(&self, j: usize) -> Vec<f64> {
        self.router_weights.column(j)
    }
}

/// How gate values depend on the logits during differentiation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gating {
    /// Gates are constants.
    Detached,
    /// Row-wise softmax (token choice).
    Softmax,
    /// Elementwise sigmoid (expert choice).
    Sigmoid,
    /// `(1 - alpha) * softmax + alpha * sigmoid`.
    Unified(UnifiedScoreConfig),
}

impl Gating {
    /// Maps a row of logits to gate scores. `Detached` yields `None`.
    pub fn map_row(&self, z: &[f64]) -> Option<Vec<f64>> {
        match *self {
            Gating::Detached => None,
            Gating::Softmax => Some(softmax_unchecked(z)),
            Gating::Sigmoid => Some(z.iter().map(|&v| sigmoid(v)).collect()),
            Gating::Unified(cfg) => {
                let p = softmax_unchecked(z);
                Some(
                    p.iter()
                        .zip(z)
                        .map(|(&p, &v)| cfg.beta() * p + cfg.alpha() * sigmoid(v))
                        .collect(),
                )
            }
        }
    }

    /// Pulls `dL/dgate` (one entry per expert, zero where unselected) back to `dL/dz`.
    fn pullback_row(&self, z: &[f64], gate_grad: &[f64]) -> Vec<f64> {
        let softmax_part = |w: f64, out: &mut [f64]| {
            let p = softmax_unchecked(z);
            let dot: f64 = p.iter().zip(gate_grad).map(|(p, a)| p * a).sum();
            for ((o, &pm), &am) in out.iter_mut().zip(&p).zip(gate_grad) {
                *o += w * pm * (am - dot);
            }
        };
        let sigmoid_part = |w: f64, out: &mut [f64]| {
            for ((o, &zm), &am) in out.iter_mut().zip(z).zip(gate_grad) {
                let s = sigmoid(zm);
                *o += w * am * s * (1.0 - s);
            }
        };
        let mut dz = vec![0.0; z.len()];
        match *self {
            Gating::Detached => {}
            Gating::Softmax => softmax_part(1.0, &mut dz),
            Gating::Sigmoid => sigmoid_part(1.0, &mut dz),
            Gating::Unified(cfg) => {
                softmax_part(cfg.beta(), &mut dz);
                sigmoid_part(cfg.alpha(), &mut dz);
            }
        }
        dz
    }
}

/// Gate matrix `map(h W)` for all tokens; `None` when gates are detached.
pub fn gate_scores(h: &Matrix, params: &MoeLayerParams, gating: Gating) -> Result<Option<Matrix>> {
    if gating == Gating::Detached {
        return Ok(None);
    }
    let z = h.matmul(&params.router_weights)?;
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let row = gating.map_row(z.row(i)).expect("attached gating");
        out.row_mut(i).copy_from_slice(&row);
    }
    Ok(Some(out))
}

/// Keeps the plan's mask and replaces its gates with `map(h W)`.
pub fn regate(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan, gating: Gating) -> Result<RoutingPlan> {
    match gate_scores(h, params, gating)? {
        None => Ok(plan.clone()),
        Some(g) => plan.with_gates(g),
    }
}

/// Per token, `(expert, gate * FFN_expert(h_token))` in ascending expert order.
pub type Contributions = Vec<Vec<(usize, Vec<f64>)>>;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub output: Matrix,
    pub plan: RoutingPlan,
    pub contributions: Option<Contributions>,
}

fn check_shapes(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan) -> Result<()> {
    let dims = params.dims();
    if h.cols() != dims.d {
        return Err(mismatch("forward", format!("tokens have width {}, layer expects {}", h.cols(), dims.d)));
    }
    if plan.tokens() != h.rows() || plan.experts() != dims.n {
        return Err(mismatch(
            "forward",
            format!(
                "plan is {}x{}, inputs need {}x{}",
                plan.tokens(),
                plan.experts(),
                h.rows(),
                dims.n
            ),
        ));
    }
    Ok(())
}

fn gather(h: &Matrix, tokens: &[usize]) -> Matrix {
    let mut m = Matrix::zeros(tokens.len(), h.cols());
    for (r, &i) in tokens.iter().enumerate() {
        m.row_mut(r).copy_from_slice(h.row(i));
    }
    m
}

fn dispatch(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan, record: bool) -> Result<LayerOutput> {
    check_shapes(h, params, plan)?;
    let mut output = Matrix::zeros(h.rows(), h.cols());
    let mut contributions = record.then(|| vec![Vec::new(); h.rows()]);
    for (j, expert) in params.experts.iter().enumerate() {
        let tokens: Vec<usize> = plan.tokens_of(j).collect();
        if tokens.is_empty() {
            continue;
        }
        let (_, _, out) = expert.forward_batch(&gather(h, &tokens), params.activation);
        for (r, &i) in tokens.iter().enumerate() {
            let g = plan.gates().get(i, j);
            for (o, &v) in output.row_mut(i).iter_mut().zip(out.row(r)) {
                *o += g * v;
            }
            if let Some(c) = contributions.as_mut() {
                c[i].push((j, out.row(r).iter().map(|v| g * v).collect()));
            }
        }
    }
    Ok(LayerOutput {
        output,
        plan: plan.clone(),
        contributions,
    })
}

/// Dispatch/combine forward: each expert runs only on the tokens routed to it.
pub fn forward(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan) -> Result<LayerOutput> {
    dispatch(h, params, plan, false)
}

pub fn forward_with_contributions(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan) -> Result<LayerOutput> {
    dispatch(h, params, plan, true)
}

/// Evaluates every expert on every token, then masks. Reference for [`forward`].
pub fn forward_dense_reference(h: &Matrix, params: &MoeLayerParams, plan: &RoutingPlan) -> Result<LayerOutput> {
    check_shapes(h, params, plan)?;
    let dims = params.dims();
    let mut output = Matrix::zeros(h.rows(), dims.d);
    for i in 0..h.rows() {
        for (j, expert) in params.experts.iter().enumerate() {
            let y = expert.apply_row(h.row(i), params.activation);
            let keep = if plan.is_selected(i, j) { 1.0 } else { 0.0 };
            if keep == 0.0 {
                continue;
            }
            let g = plan.gates().get(i, j) * keep;
            for (o, v) in output.row_mut(i).iter_mut().zip(y) {
                *o += g * v;
            }
        }
    }
    Ok(LayerOutput {
        output,
        plan: plan.clone(),
        contributions: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGradients {
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub h: Matrix,
    pub router_weights: Matrix,
    pub experts: Vec<ExpertGradients>,
}

/// Gradients of a scalar loss given `upstream = dL/dy` (T x d).
///
/// The forward pass uses the plan's gates; gate sensitivities are taken from
/// `gating` evaluated at the current `h` and router weights, so the plan's
/// gates should have been produced by the same mapping.
pub fn backward(
    h: &Matrix,
    params: &MoeLayerParams,
    plan: &RoutingPlan,
    gating: Gating,
    upstream: &Matrix,
) -> Result<LayerGradients> {
    check_shapes(h, params, plan)?;
    if upstream.shape() != h.shape() {
        return Err(mismatch("backward", "upstream gradient must match the output shape"));
    }
    let dims = params.dims();
    let act = params.activation;
    let mut grad_h = Matrix::zeros(h.rows(), dims.d);
    let mut gate_grad = Matrix::zeros(h.rows(), dims.n);
    let mut experts = Vec::with_capacity(dims.n);

    for (j, expert) in params.experts.iter().enumerate() {
        let tokens: Vec<usize> = plan.tokens_of(j).collect();
        let mut g = ExpertGradients {
            w_in: Matrix::zeros(dims.d, dims.d_ff),
            b_in: vec![0.0; dims.d_ff],
            w_out: Matrix::zeros(dims.d_ff, dims.d),
            b_out: vec![0.0; dims.d],
        };
        if !tokens.is_empty() {
            let x = gather(h, &tokens);
            let (pre, hidden, out) = expert.forward_batch(&x, act);
            // dL/d(expert output) = gate * upstream
            let mut d_out = Matrix::zeros(tokens.len(), dims.d);
            for (r, &i) in tokens.iter().enumerate() {
                let gate = plan.gates().get(i, j);
                let up = upstream.row(i);
                let dot: f64 = up.iter().zip(out.row(r)).map(|(u, o)| u * o).sum();
                gate_grad.set(i, j, dot);
                for (d, &u) in d_out.row_mut(r).iter_mut().zip(up) {
                    *d = gate * u;
                }
            }
            g.w_out = hidden.transpose().matmul(&d_out)?;
            for r in 0..tokens.len() {
                for (b, v) in g.b_out.iter_mut().zip(d_out.row(r)) {
                    *b += v;
                }
            }
            let mut d_pre = d_out.matmul(&expert.w_out.transpose())?;
            for r in 0..tokens.len() {
                for (dp, &p) in d_pre.row_mut(r).iter_mut().zip(pre.row(r)) {
                    *dp *= act.derivative(p);
                }
            }
            g.w_in = x.transpose().matmul(&d_pre)?;
            for r in 0..tokens.len() {
                for (b, v) in g.b_in.iter_mut().zip(d_pre.row(r)) {
                    *b += v;
                }
            }
            let d_x = d_pre.matmul(&expert.w_in.transpose())?;
            for (r, &i) in tokens.iter().enumerate() {
                for (gh, v) in grad_h.row_mut(i).iter_mut().zip(d_x.row(r)) {
                    *gh += v;
                }
            }
        }
        experts.push(g);
    }

    let mut grad_router = Matrix::zeros(dims.d, dims.n);
    if gating != Gating::Detached {
        let z = h.matmul(&params.router_weights)?;
        let mut dz = Matrix::zeros(h.rows(), dims.n);
        for i in 0..h.rows() {
            let row = gating.pullback_row(z.row(i), gate_grad.row(i));
            dz.row_mut(i).copy_from_slice(&row);
        }
        grad_router = h.transpose().matmul(&dz)?;
        let through_router = dz.matmul(&params.router_weights.transpose())?;
        for (gh, v) in grad_h.data_mut().iter_mut().zip(through_router.data()) {
            *gh += v;
        }
    }

    Ok(LayerGradients {
        h: grad_h,
        router_weights: grad_router,
        experts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingBranch {
    Softmax,
    Sigmoid,
}

/// One summand `coefficient * embedding^T` of the routing-sensitivity term.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneTerm {
    pub branch: RoutingBranch,
    pub expert: usize,
    pub coefficient: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl RankOneTerm {
    pub fn outer(&self) -> Matrix {
        let d = self.coefficient.len();
        Matrix::from_fn(d, self.embedding.len(), |a, b| self.coefficient[a] * self.embedding[b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    TokenChoice,
    Usmoe(UnifiedScoreConfig),
}

impl JacobianMode {
    fn gating(&self) -> Gating {
        match *self {
            JacobianMode::TokenChoice => Gating::Softmax,
            JacobianMode::Usmoe(cfg) => Gating::Unified(cfg),
        }
    }
}

/// Jacobian of one token's output with respect to its input under top-1 routing.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianReport {
    pub selected_expert: usize,
    pub gate: f64,
    /// From the backward pass, one unit upstream vector per output coordinate.
    pub analytic: Matrix,
    /// Central differences with the routing mask frozen.
    pub numeric: Matrix,
    pub max_rel_error: f64,
    /// `gate * J_FFN` of the selected expert.
    pub gate_frozen: Matrix,
    pub routing_terms: Vec<RankOneTerm>,
    /// Largest entrywise gap between `analytic` and `gate_frozen + sum(routing_terms)`.
    pub decomposition_error: f64,
}

impl JacobianReport {
    pub fn closed_form(&self) -> Matrix {
        let mut total = self.gate_frozen.clone();
        for term in &self.routing_terms {
            for (t, v) in total.data_mut().iter_mut().zip(term.outer().data()) {
                *t += v;
            }
        }
        total
    }
}

/// Finite-difference step used by [`jacobian_report`].
pub const JACOBIAN_FD_STEP: f64 = 1e-5;

/// Entrywise `|a - b| / max(|a|, |b|, floor)`, maximized.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Relative-error floor shared by the gradient checks.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Routes `h_row` to its top-1 expert under `mode` and builds the report.
pub fn jacobian_report(h_row: &[f64], params: &MoeLayerParams, mode: JacobianMode) -> Result<JacobianReport> {
    let h = Matrix::new(1, h_row.len(), h_row.to_vec())?;
    let scores = gate_scores(&h, params, mode.gating())?.expect("attached gating");
    let k = crate::select::top_k_indices(scores.row(0), 1)[0];
    let plan = RoutingPlan::from_selections(
        1,
        params.dims().n,
        &[(0, k, scores.get(0, k))],
        crate::routing::RoutingMode::TokenChoice,
        crate::routing::Scope::Batch,
    )?;
    jacobian_report_for_plan(h_row, params, &plan, mode)
}

/// Report for an explicit single-token plan; the plan must select exactly one expert.
pub fn jacobian_report_for_plan(
    h_row: &[f64],
    params: &MoeLayerParams,
    plan: &RoutingPlan,
    mode: JacobianMode,
) -> Result<JacobianReport> {
    let dims = params.dims();
    let h = Matrix::new(1, h_row.len(), h_row.to_vec())?;
    if plan.tokens() != 1 {
        return Err(mismatch("jacobian_report", "plan must cover a single token"));
    }
    let selected: Vec<usize> = plan.experts_of(0).collect();
    let [k] = selected[..] else {
        return Err(Error::Config(format!(
            "jacobian report needs top-1 routing, plan selects {} experts",
            selected.len()
        )));
    };
    let gating = mode.gating();
    let plan = regate(&h, params, plan, gating)?;
    let d = dims.d;

    let mut analytic = Matrix::zeros(d, d);
    for a in 0..d {
        let mut up = Matrix::zeros(1, d);
        up.set(0, a, 1.0);
        let grads = backward(&h, params, &plan, gating, &up)?;
        analytic.row_mut(a).copy_from_slice(grads.h.row(0));
    }

    let mut numeric = Matrix::zeros(d, d);
    for b in 0..d {
        let eval = |delta: f64| -> Result<Vec<f64>> {
            let mut hp = h.clone();
            hp.set(0, b, hp.get(0, b) + delta);
            let p = regate(&hp, params, &plan, gating)?;
            Ok(forward(&hp, params, &p)?.output.row(0).to_vec())
        };
        let plus = eval(JACOBIAN_FD_STEP)?;
        let minus = eval(-JACOBIAN_FD_STEP)?;
        for a in 0..d {
            numeric.set(a, b, (plus[a] - minus[a]) / (2.0 * JACOBIAN_FD_STEP));
        }
    }

    // Closed form for y = g_k(z) E_k(x), z = x W:
    //   J = g_k J_FFN + sum_j (dg_k/dz_j) E_k e_j^T
    // with dg_k/dz_j = p_k (delta_kj - p_j) for the softmax branch and
    // sigma_k (1 - sigma_k) delta_kj for the sigmoid branch.
    let expert_out = params.experts[k].apply_row(h_row, params.activation);
    let gate = plan.gates().get(0, k);
    let gate_frozen = params.experts[k].jacobian(h_row, params.activation).scale(gate);
    let z = h.matmul(&params.router_weights)?;
    let p = softmax_unchecked(z.row(0));
    let branch_terms = |branch: RoutingBranch, weight: f64| -> Vec<RankOneTerm> {
        (0..dims.n)
            .map(|j| {
                let delta = if j == k { 1.0 } else { 0.0 };
                let sens = match branch {
                    RoutingBranch::Softmax => p[k] * (delta - p[j]),
                    RoutingBranch::Sigmoid => {
                        let s = sigmoid(z.get(0, k));
                        s * (1.0 - s) * delta
                    }
                };
                RankOneTerm {
                    branch,
                    expert: j,
                    coefficient: expert_out.iter().map(|e| weight * sens * e).collect(),
                    embedding: params.expert_embedding(j),
                }
            })
            .collect()
    };
    let routing_terms = match mode {
        JacobianMode::TokenChoice => branch_terms(RoutingBranch::Softmax, 1.0),
        JacobianMode::Usmoe(cfg) => {
            let mut terms = branch_terms(RoutingBranch::Softmax, cfg.beta());
            terms.extend(branch_terms(RoutingBranch::Sigmoid, cfg.alpha()));
            terms
        }
    };

    let mut report = JacobianReport {
        selected_expert: k,
        gate,
        max_rel_error: max_relative_error(analytic.data(), numeric.data(), REL_ERROR_FLOOR),
        analytic,
        numeric,
        gate_frozen,
        routing_terms,
        decomposition_error: 0.0,
    };
    report.decomposition_error = report.analytic.max_abs_diff(&report.closed_form());
    Ok(report)
}
