//! Server-side aggregation kernels: pairwise parameter distances, the
//! attention function and its derivative, the attentive message-passing
//! similarity matrix, Fisher-trace aggregation weights, the two-stage
//! aggregate, and the size-weighted mean baseline.
//!
//! Stage one mixes every client's uploaded vector into a per-client
//! intermediate model `z_i` using similarity weights; stage two blends the
//! intermediates with Fisher-trace weights `gamma` into the payload `p_i`
//! sent back down. The second stage is a single gamma-weighted mixture, so
//! all `p_i` coincide; personalization enters through `z_i` and through
//! the head layers that never leave the client.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{linear_combination, ParamVector};

/// Keeps every self-weight strictly positive when a row of off-diagonal
/// similarity mass would otherwise exceed 1.
const ROW_MASS_EPS: f64 = 1e-3;

/// Distance metric selecting how client similarity is measured (`dm`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMetric {
    Euclidean,
    #[default]
    Manhattan,
    Cosine,
}

impl std::fmt::Display for DistanceMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            DistanceMetric::Euclidean => "euclidean",
            DistanceMetric::Manhattan => "manhattan",
            DistanceMetric::Cosine => "cosine",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for DistanceMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "manhattan" => Ok(Self::Manhattan),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!(
                "unknown distance metric {other:?}, expected one of euclidean, manhattan, cosine"
            ))),
        }
    }
}

/// Distance between two parameter vectors: squared L2 for `euclidean`,
/// L1 for `manhattan`, and `1 - similarity` for `cosine` so that larger
/// values always mean less similar.
pub fn pairwise_distance(a: &ParamVector, b: &ParamVector, metric: DistanceMetric) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Integrity(format!(
            "distance between vectors of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let a = a.as_slice();
    let b = b.as_slice();
    let d = match metric {
        DistanceMetric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
        DistanceMetric::Manhattan => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>(),
        DistanceMetric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            // the guard makes two zero vectors come out at distance 1
            1.0 - dot / (na * nb + 1e-8)
        }
    };
    Ok(d)
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "attention scale sigma must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// Attention function `A(d) = 1 - exp(-d / sigma)`, in `[0, 1)`.
pub fn attention(d: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok(1.0 - (-d / sigma).exp())
}

/// Derivative of [`attention`]: `(1 / sigma) * exp(-d / sigma)`. Positive
/// and strictly decreasing in the distance, so near clients get larger
/// collaboration weights.
pub fn attention_derivative(d: f64, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    Ok((-d / sigma).exp() / sigma)
}

/// Row-stochastic similarity matrix: entry `(i, j)` is the weight of
/// client `j`'s upload in client `i`'s intermediate model.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    xi: Array2<f64>,
    pub metric: DistanceMetric,
    pub alpha: f64,
    pub sigma: f64,
}

impl SimilarityMatrix {
    pub fn num_clients(&self) -> usize {
        self.xi.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.xi[[i, j]]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.xi.row(i).to_vec()
    }
}

/// Build the similarity matrix over the uploaded vectors. Off-diagonals
/// are `alpha * A'(distance)`; if a row's off-diagonal mass exceeds
/// `1 - eps` it is rescaled so the self-weight stays positive; the
/// diagonal closes each row to sum exactly 1.
pub fn similarity_weights(
    params: &[ParamVector],
    metric: DistanceMetric,
    alpha: f64,
    sigma: f64,
) -> Result<SimilarityMatrix> {
    if params.is_empty() {
        return Err(Error::Empty("similarity_weights over no clients".into()));
    }
    if alpha < 0.0 || !alpha.is_finite() {
        return Err(Error::Config(format!(
            "similarity scale alpha must be nonnegative, got {alpha}"
        )));
    }
    check_sigma(sigma)?;
    let m = params.len();
    let mut xi = Array2::zeros((m, m));
    for i in 0..m {
        for j in (i + 1)..m {
            let d = pairwise_distance(&params[i], &params[j], metric)?;
            let w = alpha * attention_derivative(d, sigma)?;
            xi[[i, j]] = w;
            xi[[j, i]] = w;
        }
    }
    for i in 0..m {
        let off_mass: f64 = (0..m).filter(|&j| j != i).map(|j| xi[[i, j]]).sum();
        if off_mass > 1.0 - ROW_MASS_EPS {
            let scale = (1.0 - ROW_MASS_EPS) / off_mass;
            for j in 0..m {
                if j != i {
                    xi[[i, j]] *= scale;
                }
            }
        }
        let off_mass: f64 = (0..m).filter(|&j| j != i).map(|j| xi[[i, j]]).sum();
        xi[[i, i]] = 1.0 - off_mass;
    }
    Ok(SimilarityMatrix {
        xi,
        metric,
        alpha,
        sigma,
    })
}

/// Stage-one aggregate: `z_i = sum_j xi[i][j] * v_j`.
pub fn amp_aggregate(xi: &SimilarityMatrix, params: &[ParamVector]) -> Result<Vec<ParamVector>> {
    if params.len() != xi.num_clients() {
        return Err(Error::Integrity(format!(
            "{} parameter vectors for a {}-client similarity matrix",
            params.len(),
            xi.num_clients()
        )));
    }
    (0..params.len())
        .map(|i| linear_combination(&xi.row(i), params))
        .collect()
}

/// Simplex weights derived from per-client Fisher-trace values.
#[derive(Debug, Clone)]
pub struct AggregationWeights {
    gamma: Vec<f64>,
}

impl AggregationWeights {
    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn uniform(m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Empty("uniform weights over no clients".into()));
        }
        Ok(Self {
            gamma: vec![1.0 / m as f64; m],
        })
    }
}

/// Normalize Fisher traces into aggregation weights
/// `gamma_i = tfim_i / sum(tfim)`; all-zero traces fall back to uniform.
pub fn fim_weights(tfim: &[f64]) -> Result<AggregationWeights> {
    if tfim.is_empty() {
        return Err(Error::Empty("fim_weights over no clients".into()));
    }
    if let Some(bad) = tfim.iter().find(|t| **t < 0.0 || !t.is_finite()) {
        return Err(Error::Integrity(format!(
            "Fisher trace must be finite and nonnegative, got {bad}"
        )));
    }
    let total: f64 = tfim.iter().sum();
    if total == 0.0 {
        return AggregationWeights::uniform(tfim.len());
    }
    Ok(AggregationWeights {
        gamma: tfim.iter().map(|t| t / total).collect(),
    })
}

/// Stage-two aggregate: `p_i = sum_j gamma_j * z_j`. The mixture does not
/// depend on `i`, so every client receives the same vector.
pub fn fim_aggregate(weights: &AggregationWeights, z: &[ParamVector]) -> Result<Vec<ParamVector>> {
    if weights.gamma().len() != z.len() {
        return Err(Error::Integrity(format!(
            "{} gamma weights for {} intermediate models",
            weights.gamma().len(),
            z.len()
        )));
    }
    let blended = linear_combination(weights.gamma(), z)?;
    Ok(vec![blended; z.len()])
}

/// Size-weighted mean `sum_i (n_i / sum(n)) * v_i` (FedAvg baseline).
pub fn fedavg_aggregate(params: &[ParamVector], sizes: &[usize]) -> Result<ParamVector> {
    if params.is_empty() {
        return Err(Error::Empty("fedavg_aggregate over no clients".into()));
    }
    if params.len() != sizes.len() {
        return Err(Error::Integrity(format!(
            "{} parameter vectors for {} sizes",
            params.len(),
            sizes.len()
        )));
    }
    let total: usize = sizes.iter().sum();
    if total == 0 {
        return Err(Error::Integrity(
            "fedavg_aggregate with zero total samples".into(),
        ));
    }
    let weights: Vec<f64> = sizes.iter().map(|&n| n as f64 / total as f64).collect();
    linear_combination(&weights, params)
}
