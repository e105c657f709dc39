//! Token-expert score matrices.
//!
//! Raw logits come from `h · W`. Three mappings turn them into routing scores:
//! row-wise softmax (token choice), elementwise sigmoid (expert choice), and the
//! unified score `(1 - alpha) * softmax + alpha * sigmoid`.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{sigmoid, softmax_unchecked, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreBasis {
    RawLogits,
    SoftmaxRows,
    /// Softmax over the tokens of each scope group, per expert column.
    SoftmaxColumns,
    Sigmoid,
    Unified,
}

/// A T x N matrix of token-expert scores tagged with how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibilityMatrix {
    scores: Matrix,
    basis: ScoreBasis,
}

impl CompatibilityMatrix {
    pub fn raw(scores: Matrix) -> Self {
        Self {
            scores,
            basis: ScoreBasis::RawLogits,
        }
    }

    /// Wraps an already-mapped matrix, checking the basis range invariants.
    pub fn with_basis(scores: Matrix, basis: ScoreBasis) -> Result<Self> {
        match basis {
            ScoreBasis::SoftmaxRows => {
                for i in 0..scores.rows() {
                    let s: f64 = scores.row(i).iter().sum();
                    if (s - 1.0).abs() > 1e-12 {
                        return Err(Error::Config(format!(
                            "softmax row {i} sums to {s}, not 1"
                        )));
                    }
                }
            }
            ScoreBasis::Sigmoid | ScoreBasis::Unified => {
                if let Some(v) = scores.data().iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                    return Err(Error::Config(format!(
                        "{basis:?} scores must lie in (0, 1), found {v}"
                    )));
                }
            }
            ScoreBasis::RawLogits | ScoreBasis::SoftmaxColumns => {}
        }
        Ok(Self { scores, basis })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn basis(&self) -> ScoreBasis {
        self.basis
    }

    pub fn tokens(&self) -> usize {
        self.scores.rows()
    }

    pub fn experts(&self) -> usize {
        self.scores.cols()
    }

    pub fn into_scores(self) -> Matrix {
        self.scores
    }

    fn expect_raw(&self, op: &'static str) -> Result<()> {
        if self.basis != ScoreBasis::RawLogits {
            return Err(Error::Config(format!(
                "{op} expects raw logits, got {:?}",
                self.basis
            )));
        }
        Ok(())
    }
}

/// Mixing weight of the unified score. `alpha` weights the sigmoid
/// (expert-choice) term; the softmax weight is always `1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct UnifiedScoreConfig {
    alpha: f64,
}

impl UnifiedScoreConfig {
    pub const DEFAULT_ALPHA: f64 = 0.5;

    pub fn new(alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::InvalidAlpha(alpha));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        1.0 - self.alpha
    }
}

impl Default for UnifiedScoreConfig {
    fn default() -> Self {
        Self {
            alpha: Self::DEFAULT_ALPHA,
        }
    }
}

impl TryFrom<f64> for UnifiedScoreConfig {
    type Error = Error;
    fn try_from(alpha: f64) -> Result<Self> {
        Self::new(alpha)
    }
}

impl From<UnifiedScoreConfig> for f64 {
    fn from(cfg: UnifiedScoreConfig) -> f64 {
        cfg.alpha
    }
}

pub fn logits(h: &Matrix, router_weights: &Matrix) -> Result<CompatibilityMatrix> {
    if h.cols() != router_weights.rows() {
        return Err(mismatch(
            "logits",
            format!(
                "tokens have width {} but router expects {}",
                h.cols(),
                router_weights.rows()
            ),
        ));
    }
    Ok(CompatibilityMatrix::raw(h.matmul(router_weights)?))
}

fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&softmax_unchecked(m.row(i)));
    }
    out
}

pub fn token_choice_scores(raw: &CompatibilityMatrix) -> Result<CompatibilityMatrix> {
    raw.expect_raw("token_choice_scores")?;
    Ok(CompatibilityMatrix {
        scores: softmax_rows(&raw.scores),
        basis: ScoreBasis::SoftmaxRows,
    })
}

/// Elementwise sigmoid: each entry depends on its own logit only.
pub fn expert_choice_scores(raw: &CompatibilityMatrix) -> Result<CompatibilityMatrix> {
    raw.expect_raw("expert_choice_scores")?;
    Ok(CompatibilityMatrix {
        scores: raw.scores.map(sigmoid),
        basis: ScoreBasis::Sigmoid,
    })
}

/// Legacy expert-choice mapping: softmax over tokens for every expert,
/// separately inside each block of `group_len` consecutive rows.
///
/// Normalizing across tokens leaks information between positions; it is kept
/// only for comparison against the sigmoid mapping.
pub fn expert_choice_softmax_columns(
    raw: &CompatibilityMatrix,
    group_len: usize,
) -> Result<CompatibilityMatrix> {
    raw.expect_raw("expert_choice_softmax_columns")?;
    let t = raw.tokens();
    if group_len == 0 || !t.is_multiple_of(group_len) {
        return Err(mismatch(
            "expert_choice_softmax_columns",
            format!("{t} tokens do not split into groups of {group_len}"),
        ));
    }
    let mut out = Matrix::zeros(t, raw.experts());
    for start in (0..t).step_by(group_len) {
        for j in 0..raw.experts() {
            let col: Vec<f64> = (start..start + group_len)
                .map(|i| raw.scores.get(i, j))
                .collect();
            for (off, p) in softmax_unchecked(&col).into_iter().enumerate() {
                out.set(start + off, j, p);
            }
        }
    }
    Ok(CompatibilityMatrix {
        scores: out,
        basis: ScoreBasis::SoftmaxColumns,
    })
}

pub fn unified_scores(
    raw: &CompatibilityMatrix,
    cfg: UnifiedScoreConfig,
) -> Result<CompatibilityMatrix> {
    raw.expect_raw("unified_scores")?;
    let tc = softmax_rows(&raw.scores);
    let (a, b) = (cfg.alpha(), cfg.beta());
    let mut out = Matrix::zeros(raw.tokens(), raw.experts());
    for ((o, &p), &z) in out
        .data_mut()
        .iter_mut()
        .zip(tc.data())
        .zip(raw.scores.data())
    {
        *o = b * p + a * sigmoid(z);
    }
    Ok(CompatibilityMatrix {
        scores: out,
        basis: ScoreBasis::Unified,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::select::top_k_indices;
    use proptest::prelude::*;

    fn raw(rows: &[&[f64]]) -> CompatibilityMatrix {
        CompatibilityMatrix::raw(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn logits_examples() {
        let w = Matrix::from_rows(&[[0.3, 0.7], [0.9, 0.1]]).unwrap();
        assert_eq!(logits(&Matrix::identity(2), &w).unwrap().scores(), &w);
        let h = Matrix::from_rows(&[[1.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        assert_eq!(logits(&h, &w).unwrap().scores().data(), &[1.0, 1.0]);
        assert!(logits(&Matrix::zeros(2, 3), &w).is_err());
    }

    #[test]
    fn random_logits_match_triple_loop() {
        let mut rng = Rng::new(3);
        let h = Matrix::random_normal(4, 8, 1.0, &mut rng);
        let w = Matrix::random_normal(8, 3, 1.0, &mut rng);
        let got = logits(&h, &w).unwrap();
        let want = Matrix::from_fn(4, 3, |i, j| (0..8).map(|k| h.get(i, k) * w.get(k, j)).sum());
        assert!(got.scores().max_abs_diff(&want) <= 1e-14);
    }

    #[test]
    fn token_choice_examples() {
        let tc = token_choice_scores(&raw(&[&[0.0, 0.0], &[0.0, 0.0]])).unwrap();
        assert_eq!(tc.scores().data(), &[0.5; 4]);

        let r = raw(&[&[1.0, 3.0, 2.0]]);
        let tc = token_choice_scores(&r).unwrap();
        let mut before = top_k_indices(r.scores().row(0), 2);
        let mut after = top_k_indices(tc.scores().row(0), 2);
        before.sort_unstable();
        after.sort_unstable();
        assert_eq!(before, vec![1, 2]);
        assert_eq!(after, before);

        let tc = token_choice_scores(&raw(&[&[1.0, 2.0, 3.0]])).unwrap();
        for (got, want) in tc.scores().data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn expert_choice_examples() {
        let ec = expert_choice_scores(&raw(&[&[0.0]])).unwrap();
        assert_eq!(ec.scores().data(), &[0.5]);
        let ec = expert_choice_scores(&raw(&[&[2.0, -2.0]])).unwrap();
        assert!((ec.scores().get(0, 0) - 0.880797).abs() < 1e-6);
        assert!((ec.scores().get(0, 1) - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn expert_choice_has_no_cross_token_dependence() {
        let a = raw(&[&[0.3, -1.0], &[2.0, 0.1]]);
        let b = raw(&[&[0.3, -1.0], &[-7.0, 0.1]]);
        let ea = expert_choice_scores(&a).unwrap();
        let eb = expert_choice_scores(&b).unwrap();
        assert_eq!(ea.scores().row(0), eb.scores().row(0));
    }

    #[test]
    fn softmax_columns_normalize_per_group() {
        let r = raw(&[&[0.0, 1.0], &[0.0, 2.0], &[5.0, 0.0], &[5.0, 0.0]]);
        let ec = expert_choice_softmax_columns(&r, 2).unwrap();
        assert_eq!(ec.basis(), ScoreBasis::SoftmaxColumns);
        for start in [0, 2] {
            for j in 0..2 {
                let s = ec.scores().get(start, j) + ec.scores().get(start + 1, j);
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(ec.scores().get(2, 0), 0.5);
        assert!(expert_choice_softmax_columns(&r, 3).is_err());
    }

    #[test]
    fn unified_examples() {
        let r = raw(&[&[1.0, 2.0], &[-0.5, 0.25]]);
        let u0 = unified_scores(&r, UnifiedScoreConfig::new(0.0).unwrap()).unwrap();
        assert_eq!(u0.scores(), token_choice_scores(&r).unwrap().scores());
        let u1 = unified_scores(&r, UnifiedScoreConfig::new(1.0).unwrap()).unwrap();
        assert_eq!(u1.scores(), expert_choice_scores(&r).unwrap().scores());

        // softmax([1,2]) = [0.268941, 0.731059]; sigmoid([1,2]) = [0.731059, 0.880797]
        let u = unified_scores(&raw(&[&[1.0, 2.0]]), UnifiedScoreConfig::default()).unwrap();
        assert!((u.scores().get(0, 0) - 0.5000).abs() < 1e-4);
        assert!((u.scores().get(0, 1) - 0.8060).abs() < 1e-4);
    }

    #[test]
    fn alpha_validation() {
        assert!(matches!(UnifiedScoreConfig::new(-0.1), Err(Error::InvalidAlpha(_))));
        assert!(UnifiedScoreConfig::new(1.5).is_err());
        let c = UnifiedScoreConfig::new(0.3).unwrap();
        assert_eq!(c.alpha() + c.beta(), 1.0);
        let bad: std::result::Result<UnifiedScoreConfig, _> = serde_json::from_str("2.0");
        assert!(bad.is_err());
    }

    #[test]
    fn mappings_reject_mapped_input() {
        let r = raw(&[&[1.0, 2.0]]);
        let tc = token_choice_scores(&r).unwrap();
        assert!(token_choice_scores(&tc).is_err());
        assert!(unified_scores(&tc, UnifiedScoreConfig::default()).is_err());
    }

    #[test]
    fn basis_invariants_checked() {
        let m = Matrix::from_rows(&[[0.2, 0.7]]).unwrap();
        assert!(CompatibilityMatrix::with_basis(m.clone(), ScoreBasis::SoftmaxRows).is_err());
        assert!(CompatibilityMatrix::with_basis(m, ScoreBasis::Unified).is_ok());
        let m = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        assert!(CompatibilityMatrix::with_basis(m, ScoreBasis::Sigmoid).is_err());
    }

    proptest! {
        #[test]
        fn unified_is_convex_and_linear_in_alpha(
            vals in prop::collection::vec(-6.0f64..6.0, 12),
            a1 in 0.0f64..1.0,
            a2 in 0.0f64..1.0,
        ) {
            let r = CompatibilityMatrix::raw(Matrix::new(3, 4, vals).unwrap());
            let tc = token_choice_scores(&r).unwrap();
            let ec = expert_choice_scores(&r).unwrap();
            let u1 = unified_scores(&r, UnifiedScoreConfig::new(a1).unwrap()).unwrap();
            let u2 = unified_scores(&r, UnifiedScoreConfig::new(a2).unwrap()).unwrap();
            prop_assert_eq!(u1.scores().shape(), (3, 4));
            for idx in 0..12 {
                let (p, s) = (tc.scores().data()[idx], ec.scores().data()[idx]);
                let u = u1.scores().data()[idx];
                prop_assert!(u >= p.min(s) - 1e-15 && u <= p.max(s) + 1e-15);
                // slope in alpha is (s - p)
                let slope = u2.scores().data()[idx] - u;
                prop_assert!((slope - (a2 - a1) * (s - p)).abs() <= 1e-14);
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 15)) {
            let r = CompatibilityMatrix::raw(Matrix::new(5, 3, vals).unwrap());
            let tc = token_choice_scores(&r).unwrap();
            prop_assert!(CompatibilityMatrix::with_basis(tc.scores().clone(), ScoreBasis::SoftmaxRows).is_ok());
        }
    }
}
