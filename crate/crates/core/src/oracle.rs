//! Exact solver for the budgeted assignment problem
//!
//! ```text
//! maximize  <S, X>   over X in {0,1}^{T x N}   subject to  sum(X) <= c
//! ```
//!
//! by explicit enumeration of masks. It shares no code with the routers: it
//! never sorts scores, so agreement with the global top-c router is a genuine
//! cross-check rather than a tautology.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::routing::{
    route_expert_choice, route_token_choice, route_usmoe, RoutingBudget, Scope,
};
use crate::scoring::CompatibilityMatrix;

/// Upper bound on the number of candidate masks `solve_exact` will visit.
/// Every instance with `T * N <= 24` fits, whatever the budget.
pub const MAX_ENUMERATED_MASKS: u128 = 1 << 28;

/// Objectives closer than this are treated as ties.
pub const OBJECTIVE_TIE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub tokens: usize,
    pub experts: usize,
    /// Row-major flattened optimal mask.
    pub optimal_mask: Vec<bool>,
    pub optimal_objective: f64,
    pub num_masks_enumerated: u64,
    /// Distinct masks within [`OBJECTIVE_TIE_TOL`] of the optimum.
    pub num_optima: u64,
}

impl OracleResult {
    pub fn selected_pairs(&self) -> Vec<(usize, usize)> {
        self.optimal_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(idx, _)| (idx / self.experts, idx % self.experts))
            .collect()
    }
}

fn binomial(n: u128, k: u128) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1))
}

/// Number of masks `solve_exact` would visit for an `m`-entry matrix.
pub fn candidate_count(m: usize, c: usize, exact_cardinality: bool) -> u128 {
    let c = c.min(m) as u128;
    let m = m as u128;
    if exact_cardinality {
        binomial(m, c)
    } else {
        (0..=c).map(|k| binomial(m, k)).sum()
    }
}

struct Search<'a> {
    values: &'a [f64],
    limit: usize,
    exact: bool,
    chosen: Vec<usize>,
    best: f64,
    best_set: Vec<usize>,
    optima: u64,
    visited: u64,
}

impl Search<'_> {
    fn visit(&mut self, sum: f64) {
        self.visited += 1;
        if self.visited == 1 || sum > self.best + OBJECTIVE_TIE_TOL {
            self.best = sum;
            self.best_set.clone_from(&self.chosen);
            self.optima = 1;
        } else if sum >= self.best - OBJECTIVE_TIE_TOL {
            self.optima += 1;
            // keep the lexicographically first mask, but track the true maximum
            self.best = self.best.max(sum);
        }
    }

    // Pre-order over increasing index lists, i.e. lexicographic order.
    fn descend(&mut self, start: usize, sum: f64) {
        if !self.exact || self.chosen.len() == self.limit {
            self.visit(sum);
        }
        if self.chosen.len() == self.limit {
            return;
        }
        let need = self.limit - self.chosen.len();
        let last = if self.exact {
            self.values.len() + 1 - need
        } else {
            self.values.len()
        };
        for idx in start..last {
            self.chosen.push(idx);
            self.descend(idx + 1, sum + self.values[idx]);
            self.chosen.pop();
        }
    }
}

/// Brute-force optimum of the budgeted assignment problem.
///
/// When every score is strictly positive only masks with exactly
/// `min(c, T*N)` selections can be optimal, so only those are visited.
/// Otherwise all masks with at most `c` selections are visited, including the
/// empty one. Among tied optima the mask whose sorted selection list is
/// lexicographically smallest is returned.
pub fn solve_exact(scores: &Matrix, c: usize) -> Result<OracleResult> {
    let m = scores.rows() * scores.cols();
    if m == 0 {
        return Err(Error::EmptyInput("solve_exact"));
    }
    let limit = c.min(m);
    let exact = scores.data().iter().all(|&v| v > 0.0);
    let masks = candidate_count(m, limit, exact);
    if masks > MAX_ENUMERATED_MASKS {
        return Err(Error::EnumerationBound {
            masks,
            limit: MAX_ENUMERATED_MASKS,
        });
    }
    let mut search = Search {
        values: scores.data(),
        limit,
        exact,
        chosen: Vec::with_capacity(limit),
        best: f64::NEG_INFINITY,
        best_set: Vec::new(),
        optima: 0,
        visited: 0,
    };
    search.descend(0, 0.0);
    let mut optimal_mask = vec![false; m];
    for &idx in &search.best_set {
        optimal_mask[idx] = true;
    }
    Ok(OracleResult {
        tokens: scores.rows(),
        experts: scores.cols(),
        optimal_mask,
        optimal_objective: search.best,
        num_masks_enumerated: search.visited,
        num_optima: search.optima,
    })
}

/// Outcome of comparing the global top-c router against the exact optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionCheck {
    pub c: usize,
    pub usmoe_objective: f64,
    pub oracle: OracleResult,
    pub certificate: bool,
    pub holds: bool,
}

pub fn check_proposition(scores: &Matrix, c: usize) -> Result<PropositionCheck> {
    let oracle = solve_exact(scores, c)?;
    let cm = CompatibilityMatrix::raw(scores.clone());
    let plan = route_usmoe(&cm, RoutingBudget::GlobalPairs(c), Scope::Batch)?;
    let usmoe_objective = plan.objective(scores);
    let holds = (usmoe_objective - oracle.optimal_objective).abs() <= OBJECTIVE_TIE_TOL;
    Ok(PropositionCheck {
        c,
        usmoe_objective,
        certificate: plan.certificate_holds(scores),
        oracle,
        holds,
    })
}

/// True iff global top-c routing attains the exact optimum.
///
/// The router always spends the full budget, so with negative scores present
/// (where leaving slots empty can be strictly better) this can be false.
pub fn verify_proposition(scores: &Matrix, c: usize) -> Result<bool> {
    Ok(check_proposition(scores, c)?.holds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismGap {
    pub m_tc: f64,
    pub m_ec: f64,
    pub m_usmoe: f64,
}

impl MechanismGap {
    pub fn holds(&self) -> bool {
        self.m_usmoe >= self.m_tc && self.m_usmoe >= self.m_ec
    }
}

/// Objectives of the three mechanisms at the same budget on the same raw
/// matrix. `c` must be divisible by both T and N.
pub fn verify_mechanism_gap(scores: &Matrix, c: usize) -> Result<MechanismGap> {
    let (t, n) = scores.shape();
    if t == 0 || n == 0 {
        return Err(Error::EmptyInput("verify_mechanism_gap"));
    }
    if !c.is_multiple_of(t) || !c.is_multiple_of(n) {
        return Err(Error::Indivisible { c, t, n });
    }
    let cm = CompatibilityMatrix::raw(scores.clone());
    let tc = route_token_choice(&cm, c / t)?;
    let ec = route_expert_choice(&cm, c / n, Scope::Batch)?;
    let u = route_usmoe(&cm, RoutingBudget::GlobalPairs(c), Scope::Batch)?;
    Ok(MechanismGap {
        m_tc: tc.objective(scores),
        m_ec: ec.objective(scores),
        m_usmoe: u.objective(scores),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn single_selection_is_global_argmax() {
        let s = mat(&[&[0.1, 0.3], &[0.9, 0.2]]);
        let r = solve_exact(&s, 1).unwrap();
        assert_eq!(r.selected_pairs(), vec![(1, 0)]);
        assert_eq!(r.optimal_objective, 0.9);
        assert_eq!(r.num_masks_enumerated, 4);
    }

    #[test]
    fn zero_matrix() {
        for c in 0..=4 {
            let r = solve_exact(&Matrix::zeros(2, 2), c).unwrap();
            assert_eq!(r.optimal_objective, 0.0);
            assert!(r.num_optima >= 1);
        }
    }

    #[test]
    fn worked_three_by_two() {
        let s = mat(&[&[0.9, 0.1], &[0.4, 0.8], &[0.7, 0.2]]);
        let r = solve_exact(&s, 3).unwrap();
        assert_eq!(r.num_masks_enumerated, 20);
        assert!((r.optimal_objective - 2.4).abs() < 1e-12);
        assert_eq!(r.selected_pairs(), vec![(0, 0), (1, 1), (2, 0)]);
        assert!(verify_proposition(&s, 3).unwrap());
    }

    #[test]
    fn ties_are_counted() {
        let s = mat(&[&[1.0, 1.0], &[0.0, 0.0]]);
        let check = check_proposition(&s, 1).unwrap();
        assert!(check.holds);
        assert!(check.oracle.num_optima > 1);
        assert_eq!(check.oracle.selected_pairs(), vec![(0, 0)]);
    }

    #[test]
    fn full_budget_is_trivially_optimal() {
        let s = mat(&[&[0.3, 0.5], &[0.2, 0.9]]);
        let r = solve_exact(&s, 4).unwrap();
        assert_eq!(r.num_masks_enumerated, 1);
        assert!(r.optimal_mask.iter().all(|&b| b));
        assert!(verify_proposition(&s, 4).unwrap());
    }

    #[test]
    fn negative_scores_use_the_inequality_constraint() {
        let s = mat(&[&[2.0, -1.0], &[-3.0, -0.5]]);
        let r = solve_exact(&s, 3).unwrap();
        assert_eq!(r.optimal_objective, 2.0);
        assert_eq!(r.selected_pairs(), vec![(0, 0)]);
        // 1 + 4 + 6 + 4 masks of size 0..=3
        assert_eq!(r.num_masks_enumerated, 15);
        // the router is forced to fill all three slots
        assert!(!verify_proposition(&s, 3).unwrap());
    }

    #[test]
    fn enumeration_bound() {
        let s = Matrix::from_fn(6, 6, |i, j| -((i * 6 + j) as f64));
        assert!(matches!(solve_exact(&s, 18), Err(Error::EnumerationBound { .. })));
        // every instance with T*N <= 24 fits
        assert!(candidate_count(24, 24, false) <= MAX_ENUMERATED_MASKS);
        assert_eq!(candidate_count(5, 2, true), 10);
        assert_eq!(candidate_count(4, 2, false), 11);
    }

    #[test]
    fn oracle_beats_every_enumerated_mask() {
        // independent check: explicit bitmask loop over all subsets
        let mut rng = Rng::new(17);
        for _ in 0..40 {
            let s = Matrix::random_normal(3, 3, 1.0, &mut rng);
            let c = rng.int_range(0, 9);
            let r = solve_exact(&s, c).unwrap();
            let mut best = f64::NEG_INFINITY;
            for bits in 0u32..(1 << 9) {
                if bits.count_ones() as usize <= c {
                    let v: f64 = (0..9).filter(|b| bits >> b & 1 == 1).map(|b| s.data()[b]).sum();
                    best = best.max(v);
                }
            }
            assert!((best - r.optimal_objective).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_monotone_in_budget_for_nonnegative_scores() {
        let mut rng = Rng::new(2);
        for _ in 0..20 {
            let s = Matrix::random_uniform(3, 4, 0.0, 1.0, &mut rng);
            let mut prev = f64::NEG_INFINITY;
            for c in 0..=12 {
                let r = solve_exact(&s, c).unwrap();
                assert!(r.optimal_objective >= prev);
                let recomputed: f64 = r.selected_pairs().iter().map(|&(i, j)| s.get(i, j)).sum();
                assert!((recomputed - r.optimal_objective).abs() <= 1e-12);
                assert!(r.selected_pairs().len() <= c);
                prev = r.optimal_objective;
            }
        }
    }

    #[test]
    fn mechanism_gap_examples() {
        let g = verify_mechanism_gap(&mat(&[&[5.0, 4.0], &[1.0, 2.0]]), 2).unwrap();
        assert_eq!(g.m_tc, 7.0);
        assert_eq!(g.m_usmoe, 9.0);
        assert!(g.holds());

        let g = verify_mechanism_gap(&mat(&[&[0.3, 0.6], &[0.3, 0.6]]), 2).unwrap();
        assert_eq!(g.m_tc, g.m_usmoe);
        assert!(g.m_ec <= g.m_usmoe);

        assert!(matches!(
            verify_mechanism_gap(&mat(&[&[5.0, 4.0], &[1.0, 2.0]]), 1),
            Err(Error::Indivisible { .. })
        ));
    }

    #[test]
    fn identical_rows_equalize_all_mechanisms() {
        let s = mat(&[&[0.2, 0.7, 0.1], &[0.2, 0.7, 0.1], &[0.2, 0.7, 0.1]]);
        let g = verify_mechanism_gap(&s, 3).unwrap();
        // TC and the global router both take the 0.7 column; EC with cap 1
        // must spend a slot in every column, so it only ties on constant matrices.
        assert_eq!(g.m_tc, g.m_usmoe);
        assert!((g.m_ec - 1.0).abs() < 1e-12);
        assert!(g.holds());

        let g = verify_mechanism_gap(&Matrix::from_fn(3, 3, |_, _| 0.4), 3).unwrap();
        assert_eq!(g.m_tc, g.m_usmoe);
        assert_eq!(g.m_ec, g.m_usmoe);
    }
}
