//! Training ratios, contribution vectors and the balanced water-filling
//! allocation over a vector of per-layer parameter counts.
//!
//! For a client training a fraction `q_l` of layer `l` (which holds `h_l`
//! parameters), the overall training ratio is `r = Σ q_l h_l / Σ h_l` and the
//! contribution vector `x_l = q_l h_l / (r Σ h_j)` describes how the trained
//! parameters are spread over layers. The most balanced feasible contribution
//! vector is the Euclidean projection of the uniform vector onto
//! `{x : Σ x = 1, 0 ≤ x_l ≤ x̄_l}` with caps `x̄_l = h_l / (r Σ h_j)`, whose
//! solution is `x*_l = min(x̄_l, τ)` for a water level `τ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Topology;

/// Trainable parameters per layer, biases included.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u64>", into = "Vec<u64>")]
pub struct LayerCounts(Vec<u64>);

impl TryFrom<Vec<u64>> for LayerCounts {
    type Error = Error;

    fn try_from(v: Vec<u64>) -> Result<Self> {
        LayerCounts::new(v)
    }
}

impl From<LayerCounts> for Vec<u64> {
    fn from(c: LayerCounts) -> Self {
        c.0
    }
}

impl LayerCounts {
    pub fn new(counts: Vec<u64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::InvalidArgument("layer counts must be non-empty".into()));
        }
        if counts.iter().any(|&h| h == 0) {
            return Err(Error::InvalidArgument(format!("every layer count must be >= 1, got {counts:?}")));
        }
        Ok(Self(counts))
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|&h| h as f64).sum()
    }

    fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.0.iter().map(|&h| h as f64)
    }
}

/// Per-layer trainable proportions, overall ratio and contribution vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    pub q: Vec<f64>,
    pub r: f64,
    pub x: Vec<f64>,
}

/// `h_l = (d_{l-1} + 1) · d_l` for every dense layer.
pub fn layer_counts_mlp(topology: &Topology) -> LayerCounts {
    LayerCounts(topology.sizes().windows(2).map(|w| ((w[0] + 1) * w[1]) as u64).collect())
}

fn check_q(q: &[f64], h: &LayerCounts) -> Result<()> {
    if q.len() != h.len() {
        return Err(Error::Shape(format!("allocation has {} entries for {} layers", q.len(), h.len())));
    }
    if let Some(bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!("allocation entry {bad} outside [0, 1]")));
    }
    Ok(())
}

/// `r = Σ q_l h_l / Σ h_l`.
pub fn training_ratio(q: &[f64], h: &LayerCounts) -> Result<f64> {
    check_q(q, h)?;
    Ok(q.iter().zip(h.as_f64()).map(|(q, h)| q * h).sum::<f64>() / h.total())
}

/// Contribution vector of an allocation, normalised to sum to one.
pub fn contribution_vector(q: &[f64], h: &LayerCounts) -> Result<Vec<f64>> {
    check_q(q, h)?;
    let trained: Vec<f64> = q.iter().zip(h.as_f64()).map(|(q, h)| q * h).collect();
    let sum: f64 = trained.iter().sum();
    if sum <= 0.0 {
        return Err(Error::InvalidArgument("allocation trains no parameters".into()));
    }
    Ok(trained.into_iter().map(|t| t / sum).collect())
}

fn check_ratio(r: f64) -> Result<()> {
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("training ratio must lie in (0, 1], got {r}")));
    }
    Ok(())
}

/// Caps `x̄_l = h_l / (r Σ h_j)`.
pub fn contribution_caps(r: f64, h: &LayerCounts) -> Result<Vec<f64>> {
    check_ratio(r)?;
    let denom = r * h.total();
    Ok(h.as_f64().map(|h| h / denom).collect())
}

/// Water level `τ` with `Σ min(cap_l, τ) = 1`, found by scanning the sorted
/// caps. Requires `Σ cap_l ≥ 1`. When every cap binds, the largest cap is
/// returned.
pub fn water_level(caps: &[f64]) -> Result<f64> {
    let total: f64 = caps.iter().sum();
    if caps.is_empty() || total < 1.0 - 1e-12 {
        return Err(Error::Infeasible(format!("caps sum to {total} < 1")));
    }
    let mut sorted = caps.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mut remaining = 1.0;
    for (i, &cap) in sorted.iter().enumerate() {
        let level = remaining / (sorted.len() - i) as f64;
        if level <= cap {
            return Ok(level);
        }
        remaining -= cap;
    }
    Ok(*sorted.last().unwrap())
}

/// Most balanced feasible contribution vector `x*_l = min(x̄_l, τ)`.
pub fn balanced_contribution(r: f64, h: &LayerCounts) -> Result<Vec<f64>> {
    let caps = contribution_caps(r, h)?;
    let tau = water_level(&caps)?;
    let x: Vec<f64> = caps.iter().map(|&c| c.min(tau)).collect();
    // absorb rounding so the vector sums to one
    let sum: f64 = x.iter().sum();
    Ok(x.into_iter().map(|v| v / sum).collect())
}

/// An allocation mapped back from a contribution vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub q: Vec<f64>,
    /// Training ratio realised by `q`; differs from the requested ratio only
    /// when clipping to `[0, 1]` was needed.
    pub r: f64,
    pub clipped: bool,
}

/// `q_l = x_l · r · Σ h_j / h_l`, clipped to `[0, 1]`.
pub fn contribution_to_allocation(x: &[f64], r: f64, h: &LayerCounts) -> Result<Allocation> {
    if x.len() != h.len() {
        return Err(Error::Shape(format!("contribution has {} entries for {} layers", x.len(), h.len())));
    }
    let caps = contribution_caps(r, h)?;
    if let Some((l, _)) = x.iter().zip(&caps).enumerate().find(|(_, (x, cap))| **x > **cap + 1e-9 || **x < -1e-9) {
        return Err(Error::Infeasible(format!("contribution {} of layer {l} exceeds its cap {}", x[l], caps[l])));
    }
    let total = h.total();
    let mut clipped = false;
    let q: Vec<f64> = x
        .iter()
        .zip(h.as_f64())
        .map(|(x, h)| {
            let raw = x * r * total / h;
            let c = raw.clamp(0.0, 1.0);
            if c != raw {
                clipped = true;
            }
            c
        })
        .collect();
    let realized = training_ratio(&q, h)?;
    if (realized - r).abs() > 1e-6 {
        tracing::debug!(requested = r, realized, "clipping changed the training ratio");
    }
    Ok(Allocation { q, r: realized, clipped })
}

/// Balanced allocation for ratio `r`: `Q*`, its realised ratio and `X*`.
pub fn balanced_allocation(r: f64, h: &LayerCounts) -> Result<AllocationPlan> {
    let x = balanced_contribution(r, h)?;
    let alloc = contribution_to_allocation(&x, r, h)?;
    Ok(AllocationPlan { q: alloc.q, r: alloc.r, x })
}

/// `J(X) = ½ ‖X − 1/L‖²`.
pub fn balance_objective(x: &[f64]) -> f64 {
    let u = 1.0 / x.len() as f64;
    0.5 * x.iter().map(|v| (v - u) * (v - u)).sum::<f64>()
}

/// Relative excess of `J(X)` over `J(X*)` at ratio `r`.
///
/// When `J(X*) = 0` (the uniform vector is feasible) the ratio is undefined;
/// it is reported as `0` if `X` is uniform as well and as an error otherwise.
pub fn imbalance_error(x: &[f64], h: &LayerCounts, r: f64) -> Result<f64> {
    if x.len() != h.len() {
        return Err(Error::Shape(format!("contribution has {} entries for {} layers", x.len(), h.len())));
    }
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("contribution vector sums to {sum}, not 1")));
    }
    let best = balance_objective(&balanced_contribution(r, h)?);
    let j = balance_objective(x);
    if best <= 1e-20 {
        return if j <= 1e-20 {
            Ok(0.0)
        } else {
            Err(Error::Numerical("imbalance error undefined: the uniform contribution is feasible".into()))
        };
    }
    Ok(((j - best) / best).max(0.0))
}

/// Imbalance error of an allocation evaluated at the ratio it realises.
pub fn allocation_imbalance(q: &[f64], h: &LayerCounts) -> Result<f64> {
    let r = training_ratio(q, h)?;
    imbalance_error(&contribution_vector(q, h)?, h, r)
}

/// Population standard deviation of the entries.
pub fn contribution_std(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Number of selected blocks out of `granularity`: `round(q · granularity)`
/// rounded half-up, and at least one whenever `q > 0`.
pub fn quantized_count(q: f64, granularity: usize) -> usize {
    if q <= 0.0 {
        return 0;
    }
    let n = (q * granularity as f64 + 0.5).floor() as usize;
    n.clamp(1, granularity)
}

/// Allocation rounded to the given per-layer granularity (units, channels or
/// sub-layers).
pub fn quantize_allocation(q: &[f64], granularity: &[usize]) -> Result<Vec<f64>> {
    if q.len() != granularity.len() {
        return Err(Error::Shape("allocation and granularity lengths differ".into()));
    }
    if granularity.iter().any(|&g| g == 0) {
        return Err(Error::InvalidArgument("granularity must be >= 1".into()));
    }
    Ok(q.iter().zip(granularity).map(|(&q, &g)| quantized_count(q, g) as f64 / g as f64).collect())
}
