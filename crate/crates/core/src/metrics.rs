//! Routing diagnostics and FLOPs accounting.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Result};
use crate::routing::{RoutingBudget, RoutingPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDiagnostics {
    /// Fraction of tokens with no expert at all.
    pub drop_ratio: f64,
    pub dropped_tokens: usize,
    /// Mean number of distinct experts with at least one token, per sequence.
    pub experts_per_sequence: f64,
    pub load_per_expert: Vec<usize>,
    /// Population standard deviation of the load over its mean (0 when idle).
    pub load_cv: f64,
    pub budget_used: usize,
}

/// Diagnostics of a plan whose rows are `num_sequences` equal-length sequences.
pub fn diagnostics(plan: &RoutingPlan, num_sequences: usize) -> Result<RoutingDiagnostics> {
    let (t, n) = (plan.tokens(), plan.experts());
    if num_sequences == 0 || t % num_sequences != 0 {
        return Err(mismatch(
            "diagnostics",
            format!("{t} tokens do not split into {num_sequences} sequences"),
        ));
    }
    let seq_len = t / num_sequences;
    let dropped = plan.dropped_tokens().len();
    let load: Vec<usize> = (0..n).map(|j| plan.tokens_of(j).count()).collect();
    let mean = load.iter().sum::<usize>() as f64 / n as f64;
    let load_cv = if mean == 0.0 {
        0.0
    } else {
        let var = load.iter().map(|&l| (l as f64 - mean).powi(2)).sum::<f64>() / n as f64;
        var.sqrt() / mean
    };
    let used_per_seq: usize = (0..num_sequences)
        .map(|s| {
            (0..n)
                .filter(|&j| (s * seq_len..(s + 1) * seq_len).any(|i| plan.is_selected(i, j)))
                .count()
        })
        .sum();
    Ok(RoutingDiagnostics {
        drop_ratio: dropped as f64 / t as f64,
        dropped_tokens: dropped,
        experts_per_sequence: used_per_seq as f64 / num_sequences as f64,
        load_per_expert: load,
        load_cv,
        budget_used: plan.budget_used(),
    })
}

/// Shapes entering the cost model. `fixed_flops` stands for compute outside
/// the MoE layer (attention, embeddings) that does not change with routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopDims {
    pub d: u64,
    pub d_ff: u64,
    pub n: u64,
    pub t: u64,
    #[serde(default)]
    pub fixed_flops: u64,
}

/// FLOPs with a multiply-add counted as 2 and activations ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub selected_pairs: u64,
    pub expert_flops: u64,
    pub router_flops: u64,
    pub fixed_flops: u64,
    pub total_flops: u64,
}

impl FlopDims {
    /// Cost of one token through one two-layer expert.
    pub fn per_pair_flops(&self) -> u64 {
        2 * self.d * self.d_ff + 2 * self.d_ff * self.d
    }
}

pub fn flops_estimate(dims: FlopDims, budget: RoutingBudget) -> FlopsEstimate {
    let selected_pairs = budget.resolve(dims.t as usize, dims.n as usize) as u64;
    let expert_flops = selected_pairs * dims.per_pair_flops();
    let router_flops = 2 * dims.t * dims.d * dims.n;
    FlopsEstimate {
        selected_pairs,
        expert_flops,
        router_flops,
        fixed_flops: dims.fixed_flops,
        total_flops: expert_flops + router_flops + dims.fixed_flops,
    }
}

/// An exact ratio `num / den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// Exact equality of the two fractions.
    pub fn same_as(&self, other: &Ratio) -> bool {
        self.num as u128 * other.den as u128 == other.num as u128 * self.den as u128
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsComparison {
    pub expert: Ratio,
    pub total: Ratio,
}

impl FlopsEstimate {
    pub fn compare_to(&self, baseline: &FlopsEstimate) -> FlopsComparison {
        FlopsComparison {
            expert: Ratio {
                num: self.expert_flops,
                den: baseline.expert_flops,
            },
            total: Ratio {
                num: self.total_flops,
                den: baseline.total_flops,
            },
        }
    }
}

/// Non-expert compute, in units of one token's k=1 expert cost, implied by a
/// reported total-FLOPs ratio between an average of `k_small` and `k_big`
/// experts per token: solves `(f + k_small) / (f + k_big) = ratio` for `f`.
pub fn implied_fixed_share(ratio: f64, k_small: f64, k_big: f64) -> f64 {
    (k_small - ratio * k_big) / (ratio - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Matrix, Rng};
    use crate::routing::{
        route_expert_choice, route_token_choice, RoutingMode, Scope,
    };
    use crate::scoring::CompatibilityMatrix;
    use proptest::prelude::*;

    fn plan_from_mask(rows: &[&[u8]]) -> RoutingPlan {
        let sel: Vec<_> = rows
            .iter()
            .enumerate()
            .flat_map(|(i, r)| r.iter().enumerate().filter(|(_, &m)| m == 1).map(move |(j, _)| (i, j, 1.0)))
            .collect();
        RoutingPlan::from_selections(rows.len(), rows[0].len(), &sel, RoutingMode::Usmoe, Scope::Batch).unwrap()
    }

    #[test]
    fn counting_example() {
        let d = diagnostics(&plan_from_mask(&[&[1, 0], &[0, 1], &[0, 0]]), 1).unwrap();
        assert!((d.drop_ratio - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(d.load_per_expert, vec![1, 1]);
        assert_eq!(d.experts_per_sequence, 2.0);
        assert_eq!(d.budget_used, 2);
    }

    #[test]
    fn full_mask_is_uniform() {
        let d = diagnostics(&plan_from_mask(&[&[1, 1, 1], &[1, 1, 1]]), 2).unwrap();
        assert_eq!(d.drop_ratio, 0.0);
        assert_eq!(d.load_cv, 0.0);
        assert_eq!(d.experts_per_sequence, 3.0);
    }

    #[test]
    fn expert_choice_worked_example_drops_half() {
        let s = CompatibilityMatrix::raw(Matrix::from_rows(&[[0.9, 0.8], [0.2, 0.1]]).unwrap());
        let plan = route_expert_choice(&s, 1, Scope::Batch).unwrap();
        let d = diagnostics(&plan, 1).unwrap();
        assert_eq!(d.drop_ratio, 0.5);
        assert_eq!(d.load_cv, 0.0);
    }

    #[test]
    fn bad_sequence_count() {
        let p = plan_from_mask(&[&[1, 0], &[0, 1], &[0, 0]]);
        assert!(diagnostics(&p, 2).is_err());
        assert!(diagnostics(&p, 0).is_err());
    }

    #[test]
    fn fractional_flops() {
        let dims = FlopDims { d: 512, d_ff: 2048, n: 16, t: 256, fixed_flops: 0 };
        let a = flops_estimate(dims, RoutingBudget::Fractional(1.5));
        let b = flops_estimate(dims, RoutingBudget::PerToken(2));
        let cmp = a.compare_to(&b);
        assert!(cmp.expert.same_as(&Ratio { num: 3, den: 4 }));
        assert_eq!(cmp.expert.value(), 0.75);
        assert_eq!(a.router_flops, b.router_flops);

        let zero = flops_estimate(dims, RoutingBudget::GlobalPairs(0));
        assert_eq!(zero.expert_flops, 0);
        assert_eq!(zero.router_flops, a.router_flops);
    }

    #[test]
    fn total_ratio_matches_closed_form() {
        // (fixed + 1.5 F) / (fixed + 2 F) with F = T * per-pair cost
        let dims = FlopDims { d: 64, d_ff: 128, n: 8, t: 32, fixed_flops: 1_000_000 };
        let a = flops_estimate(dims, RoutingBudget::Fractional(1.5));
        let b = flops_estimate(dims, RoutingBudget::PerToken(2));
        let fixed = dims.fixed_flops + a.router_flops;
        let f = dims.t * dims.per_pair_flops();
        // multiply through by 2 to keep 1.5 F integral
        let closed = Ratio { num: 2 * fixed + 3 * f, den: 2 * fixed + 4 * f };
        assert!(a.compare_to(&b).total.same_as(&closed));
    }

    #[test]
    fn reported_total_ratio_implies_sizeable_fixed_compute() {
        // 6.6753e10 vs 7.7620e10 FLOPs at 1.5 vs 2 experts per token
        let r = 6.6753 / 7.7620;
        let f = implied_fixed_share(r, 1.5, 2.0);
        assert!((f - 1.5721).abs() < 1e-3, "{f}");
        assert!(((f + 1.5) / (f + 2.0) - r).abs() < 1e-12);
    }

    #[test]
    fn routers_obey_their_invariants() {
        let mut rng = Rng::new(99);
        for _ in 0..50 {
            let s = CompatibilityMatrix::raw(Matrix::random_normal(8, 4, 1.0, &mut rng));
            let tc = route_token_choice(&s, 1).unwrap();
            assert_eq!(diagnostics(&tc, 2).unwrap().drop_ratio, 0.0);
            let ec = route_expert_choice(&s, 3, Scope::Sequence { seq_len: 4 }).unwrap();
            let d = diagnostics(&ec, 2).unwrap();
            assert_eq!(d.load_cv, 0.0);
            assert_eq!(d.load_per_expert.iter().sum::<usize>(), d.budget_used);
        }
    }

    proptest! {
        #[test]
        fn expert_flops_strictly_monotone(c1 in 0usize..64, c2 in 0usize..64) {
            let dims = FlopDims { d: 8, d_ff: 16, n: 4, t: 16, fixed_flops: 0 };
            let a = flops_estimate(dims, RoutingBudget::GlobalPairs(c1));
            let b = flops_estimate(dims, RoutingBudget::GlobalPairs(c2));
            if c1 < c2 {
                prop_assert!(a.expert_flops < b.expert_flops);
            }
        }

        #[test]
        fn diagnostics_permutation_equivariant(bits in prop::collection::vec(0u8..2, 6 * 4), seed in 0u64..500) {
            let rows: Vec<Vec<u8>> = bits.chunks(4).map(|c| c.to_vec()).collect();
            let mut perm: Vec<usize> = (0..4).collect();
            Rng::new(seed).shuffle(&mut perm);
            let permuted: Vec<Vec<u8>> = rows.iter().map(|r| perm.iter().map(|&p| r[p]).collect()).collect();
            let as_refs = |m: &Vec<Vec<u8>>| -> RoutingPlan {
                let refs: Vec<&[u8]> = m.iter().map(|r| r.as_slice()).collect();
                plan_from_mask(&refs)
            };
            let a = diagnostics(&as_refs(&rows), 2).unwrap();
            let b = diagnostics(&as_refs(&permuted), 2).unwrap();
            for (j, &p) in perm.iter().enumerate() {
                prop_assert_eq!(b.load_per_expert[j], a.load_per_expert[p]);
            }
            prop_assert_eq!(a.drop_ratio, b.drop_ratio);
            prop_assert_eq!(a.experts_per_sequence, b.experts_per_sequence);
        }
    }
}
