//! Sparse routing plans under a computational budget.
//!
//! Three mechanisms share one plan type:
//! * token choice: every token keeps its `k` best experts (row-wise top-k),
//! * expert choice: every expert keeps its `cap` best tokens (column-wise top-k),
//! * unified (`usmoe`): the `c` best token-expert pairs of the flattened score
//!   matrix, jointly over both dimensions.
//!
//! Selection ties always go to the smaller row-major index.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::Matrix;
use crate::scoring::CompatibilityMatrix;
use crate::select::top_k_indices;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RoutingMode {
    #[serde(rename = "tc")]
    TokenChoice,
    #[serde(rename = "ec")]
    ExpertChoice,
    #[serde(rename = "usmoe")]
    Usmoe,
}

impl RoutingMode {
    pub const ALL: [RoutingMode; 3] = [Self::TokenChoice, Self::ExpertChoice, Self::Usmoe];

    pub fn label(&self) -> &'static str {
        match self {
            Self::TokenChoice => "tc",
            Self::ExpertChoice => "ec",
            Self::Usmoe => "usmoe",
        }
    }
}

impl fmt::Display for RoutingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for RoutingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tc" => Ok(Self::TokenChoice),
            "ec" => Ok(Self::ExpertChoice),
            "usmoe" => Ok(Self::Usmoe),
            other => Err(Error::Parse(format!("unknown routing mode '{other}'"))),
        }
    }
}

/// Which tokens compete with each other during selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    /// Consecutive blocks of `seq_len` rows are routed independently.
    Sequence { seq_len: usize },
    /// All rows compete jointly.
    Batch,
}

impl Scope {
    /// Row ranges that are routed independently.
    pub fn groups(&self, rows: usize) -> Result<Vec<Range<usize>>> {
        match *self {
            Scope::Batch => Ok(std::iter::once(0..rows).collect()),
            Scope::Sequence { seq_len } => {
                if seq_len == 0 || !rows.is_multiple_of(seq_len) {
                    return Err(mismatch(
                        "scope",
                        format!("{rows} rows do not split into sequences of {seq_len}"),
                    ));
                }
                Ok((0..rows / seq_len)
                    .map(|s| s * seq_len..(s + 1) * seq_len)
                    .collect())
            }
        }
    }
}

/// Round-half-up to a non-negative integer.
pub fn round_half_up(x: f64) -> usize {
    if x <= 0.0 {
        0
    } else {
        (x + 0.5).floor() as usize
    }
}

/// Per-group selection budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingBudget {
    /// At most `c` token-expert pairs.
    GlobalPairs(usize),
    /// `k` experts per token, i.e. `c = k * T`.
    PerToken(usize),
    /// `cap` tokens per expert, i.e. `c = cap * N`.
    PerExpert(usize),
    /// A possibly non-integer average number of experts per token:
    /// `c = round_half_up(k_frac * T)`.
    Fractional(f64),
}

impl RoutingBudget {
    /// Effective pair count for a group of `t` tokens and `n` experts, clamped to `[0, t * n]`.
    pub fn resolve(&self, t: usize, n: usize) -> usize {
        let c = match *self {
            Self::GlobalPairs(c) => c,
            Self::PerToken(k) => k.saturating_mul(t),
            Self::PerExpert(cap) => cap.saturating_mul(n),
            Self::Fractional(k) => round_half_up(k * t as f64),
        };
        c.min(t * n)
    }

    /// Experts per token implied by the budget; fails unless `c` splits evenly over tokens.
    pub fn per_token(&self, t: usize, n: usize) -> Result<usize> {
        if let Self::PerToken(k) = *self {
            return Ok(k);
        }
        let c = self.resolve(t, n);
        if t == 0 || !c.is_multiple_of(t) {
            return Err(Error::InvalidBudget(format!(
                "{self} gives {c} pairs, not a whole number of experts per token for T = {t}"
            )));
        }
        Ok(c / t)
    }

    /// Tokens per expert implied by the budget; fails unless `c` splits evenly over experts.
    pub fn per_expert(&self, t: usize, n: usize) -> Result<usize> {
        if let Self::PerExpert(cap) = *self {
            return Ok(cap);
        }
        let c = self.resolve(t, n);
        if n == 0 || !c.is_multiple_of(n) {
            return Err(Error::InvalidBudget(format!(
                "{self} gives {c} pairs, not a whole number of tokens per expert for N = {n}"
            )));
        }
        Ok(c / n)
    }

    pub fn validate(&self) -> Result<()> {
        if let Self::Fractional(k) = *self {
            if !(k.is_finite() && k > 0.0) {
                return Err(Error::InvalidBudget(format!(
                    "fractional budget must be positive, got {k}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RoutingBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::GlobalPairs(c) => write!(f, "{c}"),
            Self::PerToken(k) => write!(f, "{k}x"),
            Self::PerExpert(cap) => write!(f, "cap{cap}"),
            Self::Fractional(k) => write!(f, "{k}x"),
        }
    }
}

/// `"12"` is twelve pairs, `"1.5x"` is 1.5 experts per token, `"cap4"` is four tokens per expert.
impl FromStr for RoutingBudget {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |e: &dyn fmt::Display| Error::Parse(format!("bad budget '{s}': {e}"));
        let budget = if let Some(k) = s.strip_suffix('x') {
            let k: f64 = k.parse().map_err(|e| bad(&e))?;
            if k.fract() == 0.0 && k >= 1.0 {
                Self::PerToken(k as usize)
            } else {
                Self::Fractional(k)
            }
        } else if let Some(cap) = s.strip_prefix("cap") {
            Self::PerExpert(cap.parse().map_err(|e| bad(&e))?)
        } else {
            Self::GlobalPairs(s.parse().map_err(|e| bad(&e))?)
        };
        budget.validate()?;
        Ok(budget)
    }
}

/// Binary routing mask plus the gate applied to each selected pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingPlan {
    mask: Vec<bool>,
    gates: Matrix,
    mode: RoutingMode,
    scope: Scope,
    budget: usize,
    budget_used: usize,
}

impl RoutingPlan {
    /// Plan from explicit (token, expert, gate) selections.
    pub fn from_selections(
        tokens: usize,
        experts: usize,
        selections: &[(usize, usize, f64)],
        mode: RoutingMode,
        scope: Scope,
    ) -> Result<Self> {
        let mut mask = vec![false; tokens * experts];
        let mut gates = Matrix::zeros(tokens, experts);
        for &(i, j, g) in selections {
            if i >= tokens || j >= experts {
                return Err(mismatch(
                    "RoutingPlan::from_selections",
                    format!("pair ({i}, {j}) outside {tokens}x{experts}"),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { index: i * experts + j, value: g });
            }
            mask[i * experts + j] = true;
            gates.set(i, j, g);
        }
        let used = mask.iter().filter(|&&m| m).count();
        Ok(Self {
            mask,
            gates,
            mode,
            scope,
            budget: used,
            budget_used: used,
        })
    }

    fn from_mask(
        mask: Vec<bool>,
        scores: &Matrix,
        mode: RoutingMode,
        scope: Scope,
        budget: usize,
    ) -> Self {
        let mut gates = Matrix::zeros(scores.rows(), scores.cols());
        for (idx, (g, &s)) in gates.data_mut().iter_mut().zip(scores.data()).enumerate() {
            if mask[idx] {
                *g = s;
            }
        }
        let budget_used = mask.iter().filter(|&&m| m).count();
        Self {
            mask,
            gates,
            mode,
            scope,
            budget,
            budget_used,
        }
    }

    pub fn tokens(&self) -> usize {
        self.gates.rows()
    }

    pub fn experts(&self) -> usize {
        self.gates.cols()
    }

    pub fn mode(&self) -> RoutingMode {
        self.mode
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    /// Configured budget summed over scope groups.
    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn budget_used(&self) -> usize {
        self.budget_used
    }

    pub fn gates(&self) -> &Matrix {
        &self.gates
    }

    pub fn mask_bits(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_selected(&self, token: usize, expert: usize) -> bool {
        self.mask[token * self.experts() + expert]
    }

    pub fn mask_matrix(&self) -> Matrix {
        Matrix::from_fn(self.tokens(), self.experts(), |i, j| {
            if self.is_selected(i, j) {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Selected experts of a token in ascending order.
    pub fn experts_of(&self, token: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.experts()).filter(move |&j| self.is_selected(token, j))
    }

    /// Tokens routed to an expert in ascending order.
    pub fn tokens_of(&self, expert: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.tokens()).filter(move |&i| self.is_selected(i, expert))
    }

    /// Selected `(token, expert)` pairs in row-major order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.experts();
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(move |(idx, _)| (idx / n, idx % n))
    }

    pub fn dropped_tokens(&self) -> Vec<usize> {
        (0..self.tokens())
            .filter(|&i| self.experts_of(i).next().is_none())
            .collect()
    }

    /// `<scores, mask>`, accumulated in row-major order.
    pub fn objective(&self, scores: &Matrix) -> f64 {
        assert_eq!(scores.shape(), self.gates.shape(), "objective shape mismatch");
        self.pairs().map(|(i, j)| scores.get(i, j)).sum()
    }

    /// Replaces the gate values while keeping the mask.
    pub fn with_gates(&self, gates: Matrix) -> Result<Self> {
        if gates.shape() != self.gates.shape() {
            return Err(mismatch("RoutingPlan::with_gates", "gate shape differs"));
        }
        let mut gates = gates;
        for (g, &m) in gates.data_mut().iter_mut().zip(&self.mask) {
            if !m {
                *g = 0.0;
            }
        }
        Ok(Self {
            gates,
            ..self.clone()
        })
    }

    /// Global top-c certificate: inside every scope group, the smallest
    /// selected score is at least the largest unselected one. When they are
    /// equal, every tied selected pair must precede every tied unselected one.
    pub fn certificate_holds(&self, scores: &Matrix) -> bool {
        let Ok(groups) = self.scope.groups(self.tokens()) else {
            return false;
        };
        let n = self.experts();
        groups.into_iter().all(|g| {
            let lo = g.start * n;
            let hi = g.end * n;
            let mut worst_sel: Option<(f64, usize)> = None;
            let mut best_unsel: Option<(f64, usize)> = None;
            for idx in lo..hi {
                let v = scores.data()[idx];
                if self.mask[idx] {
                    if worst_sel.is_none_or(|(w, _)| v <= w) {
                        worst_sel = Some((v, idx));
                    }
                } else if best_unsel.is_none_or(|(b, _)| v > b) {
                    best_unsel = Some((v, idx));
                }
            }
            match (worst_sel, best_unsel) {
                (Some((w, wi)), Some((b, bi))) => w > b || (w == b && wi < bi),
                _ => true,
            }
        })
    }
}

fn check_scores(scores: &CompatibilityMatrix) -> Result<()> {
    if scores.tokens() == 0 || scores.experts() == 0 {
        return Err(Error::EmptyInput("routing scores"));
    }
    Ok(())
}

/// Row-wise top-k. Never drops a token. Scope does not affect the selection
/// and is recorded as [`Scope::Batch`].
pub fn route_token_choice(scores: &CompatibilityMatrix, k: usize) -> Result<RoutingPlan> {
    check_scores(scores)?;
    let (t, n) = (scores.tokens(), scores.experts());
    if k == 0 || k > n {
        return Err(Error::InvalidBudget(format!(
            "token choice needs 1 <= k <= N = {n}, got {k}"
        )));
    }
    let s = scores.scores();
    let mut mask = vec![false; t * n];
    for i in 0..t {
        for j in top_k_indices(s.row(i), k) {
            mask[i * n + j] = true;
        }
    }
    Ok(RoutingPlan::from_mask(
        mask,
        s,
        RoutingMode::TokenChoice,
        Scope::Batch,
        t * k,
    ))
}

/// Column-wise top-`cap` inside each scope group. Tokens that no expert picks are dropped.
pub fn route_expert_choice(
    scores: &CompatibilityMatrix,
    cap: usize,
    scope: Scope,
) -> Result<RoutingPlan> {
    check_scores(scores)?;
    let (t, n) = (scores.tokens(), scores.experts());
    let groups = scope.groups(t)?;
    let s = scores.scores();
    let mut mask = vec![false; t * n];
    for g in &groups {
        if cap == 0 || cap > g.len() {
            return Err(Error::InvalidBudget(format!(
                "expert choice needs 1 <= cap <= T = {}, got {cap}",
                g.len()
            )));
        }
        for j in 0..n {
            let col: Vec<f64> = g.clone().map(|i| s.get(i, j)).collect();
            for off in top_k_indices(&col, cap) {
                mask[(g.start + off) * n + j] = true;
            }
        }
    }
    Ok(RoutingPlan::from_mask(
        mask,
        s,
        RoutingMode::ExpertChoice,
        scope,
        groups.len() * n * cap,
    ))
}

/// Global top-c over the flattened scores of each scope group. Gates are the
/// selected scores themselves, with no renormalization.
pub fn route_usmoe(
    scores: &CompatibilityMatrix,
    budget: RoutingBudget,
    scope: Scope,
) -> Result<RoutingPlan> {
    check_scores(scores)?;
    budget.validate()?;
    let (t, n) = (scores.tokens(), scores.experts());
    let groups = scope.groups(t)?;
    let s = scores.scores();
    let mut mask = vec![false; t * n];
    let mut total = 0;
    for g in &groups {
        let c = budget.resolve(g.len(), n);
        total += c;
        let flat = &s.data()[g.start * n..g.end * n];
        for off in top_k_indices(flat, c) {
            mask[g.start * n + off] = true;
        }
    }
    Ok(RoutingPlan::from_mask(mask, s, RoutingMode::Usmoe, scope, total))
}

/// Dispatches to the mechanism for `mode`, translating the budget into `k`
/// or `cap` for the per-token and per-expert routers.
pub fn route(
    scores: &CompatibilityMatrix,
    mode: RoutingMode,
    budget: RoutingBudget,
    scope: Scope,
) -> Result<RoutingPlan> {
    check_scores(scores)?;
    let n = scores.experts();
    let group_len = scope
        .groups(scores.tokens())?
        .first()
        .map_or(0, |g| g.len());
    match mode {
        RoutingMode::TokenChoice => {
            let k = budget.per_token(group_len, n)?;
            let plan = route_token_choice(scores, k)?;
            Ok(RoutingPlan { scope, ..plan })
        }
        RoutingMode::ExpertChoice => {
            let cap = budget.per_expert(group_len, n)?;
            route_expert_choice(scores, cap, scope)
        }
        RoutingMode::Usmoe => route_usmoe(scores, budget, scope),
    }
}

/// Ascending raw scores picked by each mechanism at an equal budget `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceProfile {
    pub token_choice: Vec<f64>,
    pub expert_choice: Vec<f64>,
    pub global: Vec<f64>,
}

impl DominanceProfile {
    /// Whether the global profile is pointwise at least both baselines.
    pub fn global_dominates(&self) -> bool {
        let dominates = |other: &[f64]| {
            other.len() == self.global.len()
                && self.global.iter().zip(other).all(|(u, o)| u >= o)
        };
        dominates(&self.token_choice) && dominates(&self.expert_choice)
    }
}

fn sorted_selection(plan: &RoutingPlan, raw: &Matrix) -> Vec<f64> {
    let mut v: Vec<f64> = plan.pairs().map(|(i, j)| raw.get(i, j)).collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Selections of the three mechanisms on the raw basis with exactly `c` pairs
/// each. `c` must divide evenly by both T and N.
pub fn dominance_profile(raw: &CompatibilityMatrix, c: usize) -> Result<DominanceProfile> {
    check_scores(raw)?;
    let (t, n) = (raw.tokens(), raw.experts());
    if !c.is_multiple_of(t) || !c.is_multiple_of(n) {
        return Err(Error::Indivisible { c, t, n });
    }
    let tc = route_token_choice(raw, c / t)?;
    let ec = route_expert_choice(raw, c / n, Scope::Batch)?;
    let u = route_usmoe(raw, RoutingBudget::GlobalPairs(c), Scope::Batch)?;
    let s = raw.scores();
    Ok(DominanceProfile {
        token_choice: sorted_selection(&tc, s),
        expert_choice: sorted_selection(&ec, s),
        global: sorted_selection(&u, s),
    })
}
