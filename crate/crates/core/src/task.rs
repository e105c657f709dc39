//! Synthetic expert-separable regression task.
//!
//! Tokens sit near one of `num_clusters` centers and the target of a token in
//! cluster `c` is `x A_c` plus noise, so each cluster is best served by its own
//! expert. A fixed fraction of every sequence can be replaced by pure-noise
//! tokens whose target is zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::routing::round_half_up;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub seed: u64,
    pub num_clusters: usize,
    pub d: usize,
    /// Standard deviation of the additive target noise.
    pub noise_std: f64,
    /// Fraction of each sequence replaced by noise tokens, in `[0, 1)`.
    pub corrupt_fraction: f64,
    /// Standard deviation of the cluster centers.
    #[serde(default = "TaskConfig::default_center_std")]
    pub center_std: f64,
    /// Spread of tokens around their center.
    #[serde(default = "TaskConfig::default_token_std")]
    pub token_std: f64,
    /// Spread of noise tokens around the origin. Defaults to the center
    /// scale so noise tokens cannot be told apart by their norm alone.
    #[serde(default = "TaskConfig::default_center_std")]
    pub noise_token_std: f64,
}

impl TaskConfig {
    fn default_center_std() -> f64 {
        1.0
    }

    fn default_token_std() -> f64 {
        0.25
    }

    pub fn new(seed: u64, num_clusters: usize, d: usize, noise_std: f64, corrupt_fraction: f64) -> Self {
        Self {
            seed,
            num_clusters,
            d,
            noise_std,
            corrupt_fraction,
            center_std: Self::default_center_std(),
            token_std: Self::default_token_std(),
            noise_token_std: Self::default_center_std(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.d == 0 {
            return Err(Error::Config("task needs at least one cluster and d >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.corrupt_fraction) {
            return Err(Error::Config(format!(
                "corrupt_fraction must lie in [0, 1), got {}",
                self.corrupt_fraction
            )));
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("center_std", self.center_std),
            ("token_std", self.token_std),
            ("noise_token_std", self.noise_token_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }

    /// Noise tokens per sequence of length `seq_len`.
    pub fn corrupted_per_sequence(&self, seq_len: usize) -> usize {
        round_half_up(self.corrupt_fraction * seq_len as f64).min(seq_len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub centers: Vec<Vec<f64>>,
    /// Row-vector maps: target = x A_c.
    pub maps: Vec<Matrix>,
}

/// A batch of `num_sequences` sequences stacked row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
    /// Cluster of every token; `None` for noise tokens.
    pub clusters: Vec<Option<usize>>,
    pub seq_len: usize,
}

impl Batch {
    pub fn num_sequences(&self) -> usize {
        self.inputs.rows() / self.seq_len
    }
}

const CENTER_STREAM: u64 = 0;
const MAP_STREAM: u64 = 1;

pub fn make_task(config: TaskConfig) -> Result<SyntheticTask> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let mut rng = root.child(CENTER_STREAM);
    let centers = (0..config.num_clusters)
        .map(|_| (0..config.d).map(|_| config.center_std * rng.normal()).collect())
        .collect();
    let mut rng = root.child(MAP_STREAM);
    let maps = (0..config.num_clusters)
        .map(|_| Matrix::random_normal(config.d, config.d, 1.0 / (config.d as f64).sqrt(), &mut rng))
        .collect();
    Ok(SyntheticTask {
        config,
        centers,
        maps,
    })
}

impl SyntheticTask {
    /// Noise-free target of a clean token.
    pub fn clean_target(&self, cluster: usize, x: &[f64]) -> Vec<f64> {
        let a = &self.maps[cluster];
        (0..self.config.d)
            .map(|j| x.iter().enumerate().map(|(k, &xk)| xk * a.get(k, j)).sum())
            .collect()
    }

    /// Deterministic batch drawn from `rng`.
    pub fn sample(&self, rng: &mut Rng, num_sequences: usize, seq_len: usize) -> Batch {
        let d = self.config.d;
        let rows = num_sequences * seq_len;
        let mut inputs = Matrix::zeros(rows, d);
        let mut targets = Matrix::zeros(rows, d);
        let mut clusters = vec![None; rows];
        let corrupt = self.config.corrupted_per_sequence(seq_len);
        for s in 0..num_sequences {
            let mut positions: Vec<usize> = (0..seq_len).collect();
            rng.shuffle(&mut positions);
            let noisy = &positions[..corrupt];
            for t in 0..seq_len {
                let i = s * seq_len + t;
                if noisy.contains(&t) {
                    // zero target
                    for v in inputs.row_mut(i) {
                        *v = self.config.noise_token_std * rng.normal();
                    }
                    continue;
                }
                let c = rng.int_range(0, self.config.num_clusters - 1);
                clusters[i] = Some(c);
                let x: Vec<f64> = self.centers[c]
                    .iter()
                    .map(|&m| m + self.config.token_std * rng.normal())
                    .collect();
                let y = self.clean_target(c, &x);
                inputs.row_mut(i).copy_from_slice(&x);
                for (o, v) in targets.row_mut(i).iter_mut().zip(y) {
                    *o = v + self.config.noise_std * rng.normal();
                }
            }
        }
        Batch {
            inputs,
            targets,
            clusters,
            seq_len,
        }
    }
}
