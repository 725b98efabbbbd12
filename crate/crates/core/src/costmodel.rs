//! Analytic per-round cost model and convergence-bound calculator.
//!
//! Units: compute speed in FLOP/s, bandwidth in bits/s, sizes in bytes,
//! time in seconds. A transfer of `b` bytes over a `B` bit/s link takes
//! `b / (B / 8)` seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    /// FLOP/s.
    pub compute: f64,
    /// Downlink, bits/s.
    pub downlink: f64,
    /// Uplink, bits/s.
    pub uplink: f64,
    /// Fixed per-round latency, seconds.
    pub latency: f64,
}

impl DeviceProfile {
    /// Profile from GFLOP/s, Mb/s and seconds.
    pub fn from_units(gflops: f64, down_mbps: f64, up_mbps: f64, latency: f64) -> Self {
        Self { compute: gflops * 1e9, downlink: down_mbps * 1e6, uplink: up_mbps * 1e6, latency }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.compute, self.downlink, self.uplink].iter().all(|v| *v > 0.0 && v.is_finite())
            && self.latency >= 0.0
            && self.latency.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("device profile must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Workload {
    /// Model parameter count `P`.
    pub params: f64,
    /// Bytes per parameter `s`.
    pub bytes_per_param: f64,
    /// Local iterations per round `τ`.
    pub local_iters: f64,
    /// Forward FLOPs per parameter per iteration `α`.
    pub forward_flops: f64,
    /// Backward FLOPs per parameter per iteration `β`.
    pub backward_flops: f64,
}

impl Workload {
    /// Workload with the usual `β = 2α`.
    pub fn new(params: f64, bytes_per_param: f64, local_iters: f64, forward_flops: f64) -> Self {
        Self { params, bytes_per_param, local_iters, forward_flops, backward_flops: 2.0 * forward_flops }
    }

    pub fn validate(&self) -> Result<()> {
        let v = [self.params, self.bytes_per_param, self.local_iters, self.forward_flops, self.backward_flops];
        if v.iter().all(|x| *x >= 0.0 && x.is_finite()) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("workload values must be finite and >= 0: {self:?}")))
        }
    }

    /// Model size in bytes, `P s`.
    pub fn model_bytes(&self) -> f64 {
        self.params * self.bytes_per_param
    }

    fn forward_work(&self) -> f64 {
        self.forward_flops * self.local_iters * self.params
    }

    fn backward_work(&self) -> f64 {
        self.backward_flops * self.local_iters * self.params
    }
}

fn check_ratio(r: f64) -> Result<()> {
    if (0.0..=1.0).contains(&r) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("training ratio {r} outside [0, 1]")))
    }
}

/// Per-round FLOPs, `(α + β r) τ P`.
pub fn computation_cost(workload: &Workload, r: f64) -> Result<f64> {
    check_ratio(r)?;
    Ok(workload.forward_work() + r * workload.backward_work())
}

/// `(download, upload)` bytes per round: the full model down, the trained
/// fraction up.
pub fn communication_cost(workload: &Workload, r: f64) -> Result<(f64, f64)> {
    check_ratio(r)?;
    let size = workload.model_bytes();
    Ok((size, r * size))
}

/// Time that does not depend on the ratio: latency, forward pass and download.
fn fixed_time(p: &DeviceProfile, w: &Workload) -> f64 {
    p.latency + w.forward_work() / p.compute + w.model_bytes() / (p.downlink / 8.0)
}

/// Time per unit of training ratio: backward pass and upload.
fn ratio_time(p: &DeviceProfile, w: &Workload) -> f64 {
    w.backward_work() / p.compute + w.model_bytes() / (p.uplink / 8.0)
}

pub fn round_time(profile: &DeviceProfile, workload: &Workload, r: f64) -> Result<f64> {
    profile.validate()?;
    workload.validate()?;
    check_ratio(r)?;
    Ok(fixed_time(profile, workload) + r * ratio_time(profile, workload))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Equalization {
    /// Target round time.
    pub target: f64,
    /// Per-client ratios, clipped to `[0, 1]`.
    pub ratios: Vec<f64>,
    /// Per-client round time at the chosen ratio.
    pub times: Vec<f64>,
    /// `max_k` of `times`.
    pub round_time: f64,
    /// Clients whose unclipped ratio left `[0, 1]`.
    pub clipped: Vec<usize>,
    /// Clients that cannot meet the target even at ratio 0.
    pub infeasible: Vec<usize>,
}

/// Ratios that make every client finish at `target` (default: the fastest
/// full-model round time).
pub fn equalize_ratios(profiles: &[DeviceProfile], workload: &Workload, target: Option<f64>) -> Result<Equalization> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no device profiles".into()));
    }
    workload.validate()?;
    for p in profiles {
        p.validate()?;
    }
    let full: Vec<f64> = profiles.iter().map(|p| fixed_time(p, workload) + ratio_time(p, workload)).collect();
    let target = match target {
        Some(t) if t > 0.0 && t.is_finite() => t,
        Some(t) => return Err(Error::InvalidArgument(format!("target round time must be positive, got {t}"))),
        None => full.iter().copied().fold(f64::INFINITY, f64::min),
    };
    let mut ratios = Vec::with_capacity(profiles.len());
    let mut clipped = Vec::new();
    let mut infeasible = Vec::new();
    for (k, p) in profiles.iter().enumerate() {
        let fixed = fixed_time(p, workload);
        let slope = ratio_time(p, workload);
        let raw = if slope > 0.0 { (target - fixed) / slope } else { 1.0 };
        if raw < 0.0 {
            infeasible.push(k);
            tracing::warn!(client = k, target, fixed, "target round time below the client's fixed cost");
        }
        if !(0.0..=1.0).contains(&raw) {
            clipped.push(k);
        }
        ratios.push(raw.clamp(0.0, 1.0));
    }
    let times: Vec<f64> =
        profiles.iter().zip(&ratios).map(|(p, r)| fixed_time(p, workload) + r * ratio_time(p, workload)).collect();
    let round_time = times.iter().copied().fold(0.0, f64::max);
    Ok(Equalization { target, ratios, times, round_time, clipped, infeasible })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEfficiency {
    pub ratio: f64,
    pub time_full: f64,
    pub time_partial: f64,
    pub flops_full: f64,
    pub flops_partial: f64,
    /// `1 − (α + β r)/(α + β)`.
    pub comp_saving: f64,
    pub bytes_full: f64,
    pub bytes_partial: f64,
    /// `1 − r`.
    pub uplink_saving: f64,
    /// `(1 − r)/2`.
    pub total_comm_saving: f64,
    /// `T_round^full − T_k^full`.
    pub idle_full: f64,
    /// `T_round^partial − T_k^partial`; zero under exact equalization.
    pub idle_partial: f64,
    /// Idle time of full-model training removed by equalization, `idle_full`.
    pub idle_avoided: f64,
    /// `idle_avoided / T_round^full`.
    pub idle_avoided_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub clients: Vec<ClientEfficiency>,
    pub round_full: f64,
    pub round_partial: f64,
    /// `1 − T_round^partial / T_round^full`.
    pub time_saving: f64,
}

pub fn efficiency_report(profiles: &[DeviceProfile], workload: &Workload, ratios: &[f64]) -> Result<EfficiencyReport> {
    if profiles.is_empty() {
        return Err(Error::InvalidArgument("no device profiles".into()));
    }
    if profiles.len() != ratios.len() {
        return Err(Error::Shape(format!("{} profiles but {} ratios", profiles.len(), ratios.len())));
    }
    let time_full: Vec<f64> = profiles.iter().map(|p| round_time(p, workload, 1.0)).collect::<Result<_>>()?;
    let time_partial: Vec<f64> =
        profiles.iter().zip(ratios).map(|(p, &r)| round_time(p, workload, r)).collect::<Result<_>>()?;
    let round_full = time_full.iter().copied().fold(0.0, f64::max);
    let round_partial = time_partial.iter().copied().fold(0.0, f64::max);
    let flops_full = computation_cost(workload, 1.0)?;
    let bytes_full = 2.0 * workload.model_bytes();
    let clients = ratios
        .iter()
        .enumerate()
        .map(|(k, &r)| {
            let flops_partial = computation_cost(workload, r)?;
            let (down, up) = communication_cost(workload, r)?;
            let idle_full = round_full - time_full[k];
            let idle_partial = round_partial - time_partial[k];
            let idle_avoided = idle_full;
            Ok(ClientEfficiency {
                ratio: r,
                time_full: time_full[k],
                time_partial: time_partial[k],
                flops_full,
                flops_partial,
                comp_saving: if flops_full > 0.0 { 1.0 - flops_partial / flops_full } else { 0.0 },
                bytes_full,
                bytes_partial: down + up,
                uplink_saving: 1.0 - r,
                total_comm_saving: (1.0 - r) / 2.0,
                idle_full,
                idle_partial,
                idle_avoided,
                idle_avoided_fraction: if round_full > 0.0 { idle_avoided / round_full } else { 0.0 },
            })
        })
        .collect::<Result<_>>()?;
    let time_saving = if round_full > 0.0 { 1.0 - round_partial / round_full } else { 0.0 };
    Ok(EfficiencyReport { clients, round_full, round_partial, time_saving })
}

/// Round-time saving from the limiting client's ratio alone:
/// `(1 − r̂)·(ratio-dependent time) / T^full` of that client.
pub fn delta_time_closed_form(limiting: &DeviceProfile, workload: &Workload, r_hat: f64) -> Result<f64> {
    let full = round_time(limiting, workload, 1.0)?;
    Ok((1.0 - r_hat) * ratio_time(limiting, workload) / full)
}

/// Inputs of the one-step recursion `D⁺ = (1 − zη) D + η² B`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceConstants {
    pub z: f64,
    pub b: f64,
    pub d0: f64,
}

/// Problem constants from which `z` and `B` are assembled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceComponents {
    pub mu: f64,
    /// Lower bound on the per-coordinate participation rate.
    pub rho_min: f64,
    pub smoothness: f64,
    pub sigma_sq: f64,
    pub grad_bound_sq: f64,
    pub local_iters: f64,
    /// Heterogeneity gap `Λ`.
    pub heterogeneity: f64,
    pub nu: f64,
    /// Model dimension `d`.
    pub dim: f64,
    /// Client weights `c_k`.
    pub weights: Vec<f64>,
    /// Client training ratios `r_k`.
    pub ratios: Vec<f64>,
    pub d0: f64,
}

/// `min(1, √(d r))`.
pub fn ratio_factor(dim: f64, r: f64) -> f64 {
    (dim * r).sqrt().min(1.0)
}

impl ConvergenceConstants {
    pub fn new(z: f64, b: f64, d0: f64) -> Result<Self> {
        if !(z > 0.0) || !(b >= 0.0) || !(d0 >= 0.0) || !z.is_finite() || !b.is_finite() || !d0.is_finite() {
            return Err(Error::InvalidArgument(format!("need z > 0, B >= 0, D0 >= 0 (got {z}, {b}, {d0})")));
        }
        Ok(Self { z, b, d0 })
    }

    /// `z = μ ρ`, `Γ = Σ c_k min(1, √(d r_k))²`,
    /// `B = 2τ²(G² + σ²)Γ + 2 L ν Λ + σ² Γ`.
    pub fn from_components(c: &ConvergenceComponents) -> Result<Self> {
        if c.weights.len() != c.ratios.len() {
            return Err(Error::Shape("weights and ratios lengths differ".into()));
        }
        let gamma: f64 = c.weights.iter().zip(&c.ratios).map(|(w, r)| w * ratio_factor(c.dim, *r).powi(2)).sum();
        let z = c.mu * c.rho_min;
        let b = 2.0 * c.local_iters.powi(2) * (c.grad_bound_sq + c.sigma_sq) * gamma
            + 2.0 * c.smoothness * c.nu * c.heterogeneity
            + c.sigma_sq * gamma;
        Self::new(z, b, c.d0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    /// Fixed step `η ∈ (0, 1/z)`.
    Constant { eta: f64 },
    /// `η_t = 1 / (z (t + 1))`.
    Decaying,
}

/// `D^0 ..= D^horizon` of the recursion evaluated with equality.
pub fn convergence_bound(constants: &ConvergenceConstants, schedule: Schedule, horizon: usize) -> Result<Vec<f64>> {
    let ConvergenceConstants { z, b, d0 } = *constants;
    ConvergenceConstants::new(z, b, d0)?;
    if let Schedule::Constant { eta } = schedule {
        if !(eta > 0.0 && eta * z < 1.0) {
            return Err(Error::InvalidArgument(format!("constant step {eta} must lie in (0, 1/z = {})", 1.0 / z)));
        }
    }
    let mut out = Vec::with_capacity(horizon + 1);
    let mut d = d0;
    out.push(d);
    for t in 0..horizon {
        let eta = match schedule {
            Schedule::Constant { eta } => eta,
            Schedule::Decaying => 1.0 / (z * (t as f64 + 1.0)),
        };
        d = (1.0 - z * eta) * d + eta * eta * b;
        out.push(d);
    }
    Ok(out)
}

/// Closed-form envelope of the recursion at round `t`: `(1 − zη)^t D0 + ηB/z`
/// for a constant step, `C/(t + 1)` with `C = max(D0 + B/z², B/z²)` for the
/// decaying one. The decaying envelope is eventually exceeded: the recursion
/// gives `t D^t = (B/z²) H_t`, which grows like `ln t`.
pub fn bound_envelope(constants: &ConvergenceConstants, schedule: Schedule, t: usize) -> f64 {
    let ConvergenceConstants { z, b, d0 } = *constants;
    match schedule {
        Schedule::Constant { eta } => (1.0 - z * eta).powi(t as i32) * d0 + eta * b / z,
        Schedule::Decaying => (d0 + b / (z * z)).max(b / (z * z)) / (t as f64 + 1.0),
    }
}
