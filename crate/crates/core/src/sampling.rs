//! Variance-optimal client sampling under a communication budget.
//!
//! Client `k` is included independently with probability `p_k` and, when
//! selected, contributes `(n_k / p_k) U_k` to the aggregate. The estimator
//! variance `Σ n_k² ‖U_k‖² (1/p_k − 1)` is minimised subject to
//! `Σ r_k p_k = κ`, where `r_k` is the fraction of the model client `k`
//! uploads (all ones recovers the plain "κ clients in expectation" budget).
//!
//! The KKT solution keeps `p_k = 1` for a saturated set and gives every other
//! client (the set 𝒪) a probability proportional to `n_k ‖U_k‖ / √r_k`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Probability given to clients whose update is exactly zero while others
/// are not.
pub const ZERO_NORM_PROBABILITY: f64 = 1e-6;

const BUDGET_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingInput {
    /// Local dataset sizes `n_k`.
    pub n: Vec<f64>,
    /// Update norms `‖U_k‖`.
    pub norms: Vec<f64>,
    /// Training ratios `r_k ∈ (0, 1]`.
    pub r: Vec<f64>,
    /// Budget `κ`.
    pub kappa: f64,
}

impl SamplingInput {
    /// Input for the original budget `Σ p_k = κ` (every `r_k = 1`).
    pub fn uniform_cost(n: Vec<f64>, norms: Vec<f64>, kappa: f64) -> Self {
        let r = vec![1.0; n.len()];
        Self { n, norms, r, kappa }
    }

    fn validate(&self) -> Result<()> {
        let k = self.n.len();
        if k == 0 {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        if self.norms.len() != k || self.r.len() != k {
            return Err(Error::Shape(format!(
                "n, norms and r lengths differ ({k}, {}, {})",
                self.norms.len(),
                self.r.len()
            )));
        }
        if self.n.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("dataset sizes must be finite and >= 0".into()));
        }
        if self.norms.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("update norms must be finite and >= 0".into()));
        }
        if self.r.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
            return Err(Error::InvalidArgument("training ratios must lie in (0, 1]".into()));
        }
        let total: f64 = self.r.iter().sum();
        if !(self.kappa > 0.0) || self.kappa > total * (1.0 + BUDGET_TOLERANCE) {
            return Err(Error::Infeasible(format!("budget κ = {} outside (0, Σ r_k = {total}]", self.kappa)));
        }
        Ok(())
    }
}

/// Validated inclusion probabilities, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Probabilities(Vec<f64>);

impl Probabilities {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(Error::InvalidArgument(format!("probability {bad} outside (0, 1]")));
        }
        Ok(Self(p))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for Probabilities {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Probabilities::new(v)
    }
}

impl From<Probabilities> for Vec<f64> {
    fn from(p: Probabilities) -> Self {
        p.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingDecision {
    pub probabilities: Probabilities,
    /// Clients with `p_k < 1` (the set 𝒪), ascending.
    pub unsaturated: Vec<usize>,
    /// True when every norm was zero and the proportional fallback was used.
    pub fallback: bool,
}

/// Optimal probabilities for the budget `Σ r_k p_k = κ`.
///
/// 𝒪 is built by sorting clients by `v_k = n_k ‖U_k‖ / √r_k`, seeding it with
/// the smallest until its `r`-mass exceeds `Σ r − κ`, then growing it while
/// the next candidate still satisfies `v_k < λ(𝒪 ∪ {k})` with
/// `λ(S) = Σ_S √r_j n_j ‖U_j‖ / (κ − Σ r + Σ_S r_j)`.
pub fn ocs_plt_probabilities(input: &SamplingInput) -> Result<SamplingDecision> {
    input.validate()?;
    let k = input.n.len();
    let total_r: f64 = input.r.iter().sum();

    let weight: Vec<f64> = (0..k).map(|i| input.n[i] * input.norms[i]).collect();
    if weight.iter().all(|&w| w == 0.0) {
        // cold start: every client at κ / Σ r
        let p = (input.kappa / total_r).min(1.0);
        let probabilities = Probabilities::new(vec![p; k])?;
        let unsaturated = if p < 1.0 { (0..k).collect() } else { Vec::new() };
        return Ok(SamplingDecision { probabilities, unsaturated, fallback: true });
    }

    let mut p = vec![1.0; k];
    let zero: Vec<usize> = (0..k).filter(|&i| weight[i] == 0.0).collect();
    let zero_mass: f64 = zero.iter().map(|&i| input.r[i] * ZERO_NORM_PROBABILITY).sum();
    let kappa = input.kappa - zero_mass;
    let active: Vec<usize> = (0..k).filter(|&i| weight[i] > 0.0).collect();
    let active_r: f64 = active.iter().map(|&i| input.r[i]).sum();
    for &i in &zero {
        p[i] = ZERO_NORM_PROBABILITY;
    }
    if kappa <= 0.0 {
        return Err(Error::Infeasible("budget does not cover zero-norm clients' floor".into()));
    }

    let mut unsaturated: Vec<usize> = zero.clone();
    if kappa >= active_r * (1.0 - BUDGET_TOLERANCE) {
        // every informative client saturates; zero-norm clients take the rest
        let zero_r: f64 = zero.iter().map(|&i| input.r[i]).sum();
        if zero_r > 0.0 {
            let share = ((input.kappa - active_r) / zero_r).clamp(ZERO_NORM_PROBABILITY, 1.0);
            for &i in &zero {
                p[i] = share;
            }
        }
    } else {
        let key = |i: usize| weight[i] / input.r[i].sqrt();
        let mut order = active.clone();
        order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));

        let excess = active_r - kappa;
        let mut members = 0;
        let mut mass = 0.0;
        let mut num = 0.0;
        while members < order.len() && mass <= excess {
            let i = order[members];
            mass += input.r[i];
            num += input.r[i].sqrt() * weight[i];
            members += 1;
        }
        while members < order.len() {
            let i = order[members];
            let cand_mass = mass + input.r[i];
            let cand_num = num + input.r[i].sqrt() * weight[i];
            let level = cand_num / (kappa - active_r + cand_mass);
            if key(i) < level {
                mass = cand_mass;
                num = cand_num;
                members += 1;
            } else {
                break;
            }
        }
        let slack = kappa - active_r + mass;
        if !(slack > 0.0) || !(num > 0.0) {
            return Err(Error::Infeasible("degenerate sampling denominator".into()));
        }
        for &i in &order[..members] {
            p[i] = (slack / input.r[i].sqrt() * weight[i] / num).min(1.0);
            unsaturated.push(i);
        }
    }
    unsaturated.sort_unstable();
    unsaturated.retain(|&i| p[i] < 1.0);
    Ok(SamplingDecision { probabilities: Probabilities::new(p)?, unsaturated, fallback: false })
}

/// Independent inclusion with probability `p_k`, deterministic per seed.
pub fn select_clients(probabilities: &Probabilities, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, "select", &[]);
    select_with(probabilities, &mut rng)
}

pub fn select_with<R: Rng + ?Sized>(probabilities: &Probabilities, rng: &mut R) -> Vec<usize> {
    probabilities
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &p)| p >= 1.0 || rng.random::<f64>() < p)
        .map(|(i, _)| i)
        .collect()
}

/// `Σ_{k∈A} (n_k / p_k) U_k / Σ_j n_j`; unbiased for `Σ_k n_k U_k / Σ_j n_j`.
///
/// `updates[k]` is client `k`'s (already masked) update; only selected
/// entries are read. An empty selection yields the zero vector.
pub fn aggregate_unbiased<U: AsRef<[f64]>>(
    selected: &[usize],
    updates: &[U],
    probabilities: &Probabilities,
    n: &[f64],
) -> Result<Vec<f64>> {
    if updates.len() != n.len() || probabilities.len() != n.len() {
        return Err(Error::Shape("updates, probabilities and n lengths differ".into()));
    }
    let dim = updates.first().map(|u| u.as_ref().len()).unwrap_or(0);
    let mut out = vec![0.0; dim];
    if selected.is_empty() {
        tracing::debug!("empty client selection; zero aggregate");
        return Ok(out);
    }
    let total: f64 = n.iter().sum();
    if !(total > 0.0) {
        return Ok(out);
    }
    for &k in selected {
        let u = updates.get(k).ok_or_else(|| Error::Shape(format!("no update for client {k}")))?.as_ref();
        if u.len() != dim {
            return Err(Error::Shape("update lengths differ".into()));
        }
        let scale = n[k] / probabilities.as_slice()[k] / total;
        out.iter_mut().zip(u).for_each(|(o, v)| *o += scale * v);
    }
    Ok(out)
}

/// Closed-form variance of the unnormalised estimator,
/// `Σ n_k² ‖U_k‖² (1/p_k − 1)`.
pub fn estimator_variance(probabilities: &[f64], n: &[f64], norms: &[f64]) -> f64 {
    probabilities.iter().zip(n).zip(norms).map(|((p, n), u)| n * n * u * u * (1.0 / p - 1.0)).sum()
}
