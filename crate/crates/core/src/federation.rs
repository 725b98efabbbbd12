//! Round orchestration: broadcast, masked local training and aggregation.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{balanced_allocation, layer_counts_mlp};
use crate::assignment::{
    assign_rotational, baseline_mask, coverage_report, default_sublayers, materialize_mask, partition_layers,
    BaselineStrategy,
};
use crate::config::{ExperimentConfig, LocalMode, NormSource, SamplingMode, Strategy};
use crate::data::{empty_shards, generate_synthetic, partition_dirichlet, Batch, Dataset, PartitionSpec};
use crate::error::{Error, Result};
use crate::metrics::DynamicsTracker;
use crate::model::{evaluate, init_params, loss_and_gradient, masked_sgd_step_in_place, ParamMask, ParamSet, Topology};
use crate::rng;
use crate::sampling::{aggregate_unbiased, ocs_plt_probabilities, select_with, SamplingInput};

/// Bytes per transmitted parameter (`f64`).
pub const BYTES_PER_PARAM: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub enum MaskSource {
    Fixed(ParamMask),
    Baseline { strategy: BaselineStrategy, ratio: f64 },
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub shard: Dataset,
    pub lr: f64,
    pub mask: MaskSource,
}

impl ClientState {
    pub fn num_samples(&self) -> usize {
        self.shard.len()
    }

    pub fn mask_at(&self, round: usize, topology: &Topology, seed: u64) -> Result<ParamMask> {
        match &self.mask {
            MaskSource::Fixed(m) => Ok(m.clone()),
            MaskSource::Baseline { strategy, ratio } => {
                baseline_mask(*strategy, self.id, round, *ratio, topology, rng::derive_seed(seed, "masks", &[]))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LocalSteps {
    /// Full passes over the shard, `⌈n_k / batch⌉` steps each.
    Epochs(usize),
    Iterations(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalConfig {
    pub steps: LocalSteps,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub params: ParamSet,
    /// `W_k^{t,τ} − W^t`.
    pub update: ParamSet,
    pub steps: usize,
}

/// Masked local SGD from the broadcast parameters.
///
/// Batches follow a shuffled order of the shard drawn from the `batches`
/// stream of `(round, client)`, reshuffled every pass. A batch at least as
/// large as the shard uses the shard as-is.
pub fn local_train(
    global: &ParamSet,
    client: &ClientState,
    mask: &ParamMask,
    local: &LocalConfig,
    round: usize,
    seed: u64,
) -> Result<LocalResult> {
    if local.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    if !(client.lr > 0.0) {
        return Err(Error::InvalidArgument(format!("client {} learning rate must be > 0", client.id)));
    }
    let n = client.shard.len();
    let topology = global.topology();
    if n == 0 {
        return Ok(LocalResult { params: global.clone(), update: ParamSet::zeros(topology), steps: 0 });
    }
    let per_epoch = n.div_ceil(local.batch_size);
    let total_steps = match local.steps {
        LocalSteps::Epochs(e) => e * per_epoch,
        LocalSteps::Iterations(i) => i,
    };
    let mut params = global.clone();
    let nan = |step: usize| {
        Error::Numerical(format!("non-finite loss for client {} in round {round} at step {step}", client.id))
    };
    if local.batch_size >= n {
        for step in 0..total_steps {
            let (loss, grad) = loss_and_gradient(&params, &client.shard.as_batch())?;
            if !loss.is_finite() {
                return Err(nan(step));
            }
            masked_sgd_step_in_place(&mut params, &grad, mask, client.lr);
        }
    } else {
        let mut rng = rng::stream(seed, "batches", &[round as u64, client.id as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        let dim = client.shard.dim();
        let mut features = Vec::with_capacity(local.batch_size * dim);
        let mut labels = Vec::with_capacity(local.batch_size);
        for step in 0..total_steps {
            let pos = step % per_epoch;
            if pos == 0 {
                order.shuffle(&mut rng);
            }
            let idx = &order[pos * local.batch_size..((pos + 1) * local.batch_size).min(n)];
            features.clear();
            labels.clear();
            for &i in idx {
                features.extend_from_slice(client.shard.row(i));
                labels.push(client.shard.labels()[i]);
            }
            let batch = Batch { features: &features, labels: &labels, dim };
            let (loss, grad) = loss_and_gradient(&params, &batch)?;
            if !loss.is_finite() {
                return Err(nan(step));
            }
            masked_sgd_step_in_place(&mut params, &grad, mask, client.lr);
        }
    }
    if !params.is_finite() {
        return Err(Error::Numerical(format!("non-finite parameters for client {} in round {round}", client.id)));
    }
    let update = params.sub(global)?;
    Ok(LocalResult { params, update, steps: total_steps })
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, Copy)]
pub struct Contribution<'a> {
    pub params: &'a ParamSet,
    pub mask: &'a ParamMask,
    pub weight: f64,
}

/// Per-unit weighted mean over the clients that trained the unit. Units no
/// client trained (or whose trainers all have zero weight) keep the global
/// value.
pub fn aggregate_masked(global: &ParamSet, contributions: &[Contribution<'_>]) -> Result<ParamSet> {
    for c in contributions {
        global.check_same(c.params)?;
        if c.mask.units().len() != global.topology().num_layers() {
            return Err(Error::Shape("mask layer count differs from topology".into()));
        }
        if !(c.weight >= 0.0) {
            return Err(Error::InvalidArgument("aggregation weights must be >= 0".into()));
        }
    }
    let mut out = global.clone();
    let topology = global.topology().clone();
    let mut coeffs: Vec<(usize, f64)> = Vec::with_capacity(contributions.len());
    for (l, layout) in topology.layouts().into_iter().enumerate() {
        for j in 0..layout.units {
            let total: f64 = contributions.iter().filter(|c| c.mask.layer(l)[j]).map(|c| c.weight).sum();
            if !(total > 0.0) {
                continue;
            }
            coeffs.clear();
            coeffs.extend(
                contributions
                    .iter()
                    .enumerate()
                    .filter(|(_, c)| c.mask.layer(l)[j])
                    .map(|(k, c)| (k, c.weight / total)),
            );
            let w = layout.unit_weights(j);
            let b = layout.unit_bias(j);
            for i in w.chain(std::iter::once(b)) {
                out.as_mut_slice()[i] = coeffs.iter().map(|&(k, c)| c * contributions[k].params.as_slice()[i]).sum();
            }
        }
    }
    Ok(out)
}

/// Plain weighted average `Σ_k (n_k / Σ n) W_k` over all contributions.
pub fn fedavg_aggregate(global: &ParamSet, contributions: &[(&ParamSet, f64)]) -> Result<ParamSet> {
    for (p, w) in contributions {
        global.check_same(p)?;
        if !(*w >= 0.0) {
            return Err(Error::InvalidArgument("aggregation weights must be >= 0".into()));
        }
    }
    let total: f64 = contributions.iter().map(|(_, w)| w).sum();
    if !(total > 0.0) {
        return Ok(global.clone());
    }
    let mut out = ParamSet::zeros(global.topology());
    for (p, w) in contributions {
        let c = w / total;
        out.as_mut_slice().iter_mut().zip(p.as_slice()).for_each(|(o, v)| *o += c * v);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    /// Plain weighted average of full models.
    Plain,
    /// Per-unit weighted average over each unit's trainers.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Participation {
    Full,
    /// Independent inclusion with variance-optimal probabilities; the budget
    /// counts clients or trained-parameter ratios.
    Sampled {
        ratio_weighted: bool,
        kappa: f64,
        norms: NormSource,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundSetup {
    pub local: LocalConfig,
    pub aggregation: Aggregation,
    pub participation: Participation,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub pre_loss: f64,
    pub pre_accuracy: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub mg: f64,
    pub ep: Option<f64>,
    pub layer_mg: Vec<f64>,
    pub layer_ep: Vec<Option<f64>>,
    /// `‖U_k‖` for clients that trained this round.
    pub update_norms: Vec<Option<f64>>,
    pub selected: Vec<usize>,
    pub probabilities: Option<Vec<f64>>,
    /// `Σ p_k` (expected participants) when sampling.
    pub expected_clients: Option<f64>,
    /// `Σ r_k p_k` (expected trained-parameter mass) when sampling.
    pub expected_ratio_mass: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

impl RoundRecord {
    pub fn participants(&self) -> usize {
        self.selected.len()
    }
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    pub round: usize,
    pub params: ParamSet,
    pub history: Vec<RoundRecord>,
    tracker: DynamicsTracker,
    last_norms: Vec<Option<f64>>,
    last_eval: Option<(f64, f64)>,
}

impl GlobalState {
    pub fn new(params: ParamSet, num_clients: usize, ep_window: usize) -> Result<Self> {
        let tracker = DynamicsTracker::new(params.topology().num_layers(), ep_window)?;
        Ok(Self {
            round: 0,
            params,
            history: Vec::new(),
            tracker,
            last_norms: vec![None; num_clients],
            last_eval: None,
        })
    }
}

fn train_all(
    state: &GlobalState,
    clients: &[ClientState],
    masks: &[ParamMask],
    who: &[usize],
    setup: &RoundSetup,
) -> Result<Vec<LocalResult>> {
    who.par_iter()
        .map(|&k| local_train(&state.params, &clients[k], &masks[k], &setup.local, state.round, setup.seed))
        .collect()
}

/// Sampling probabilities for this round, from the known update norms.
fn round_probabilities(
    clients: &[ClientState],
    masks: &[ParamMask],
    norms: &[Option<f64>],
    ratio_weighted: bool,
    kappa: f64,
    topology: &Topology,
) -> Result<Vec<f64>> {
    // clients never observed borrow the largest known norm so they stay in play
    let known = norms.iter().flatten().copied().fold(0.0, f64::max);
    let input = SamplingInput {
        n: clients.iter().map(|c| c.num_samples() as f64).collect(),
        norms: norms.iter().map(|v| v.unwrap_or(known)).collect(),
        r: if ratio_weighted {
            masks.iter().map(|m| m.training_ratio(topology).max(f64::MIN_POSITIVE)).collect()
        } else {
            vec![1.0; clients.len()]
        },
        kappa,
    };
    Ok(ocs_plt_probabilities(&input)?.probabilities.into())
}

/// One communication round; appends a record to the history.
pub fn run_round(
    state: &mut GlobalState,
    clients: &[ClientState],
    setup: &RoundSetup,
    validation: &Dataset,
) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::InvalidArgument("no clients".into()));
    }
    let topology = state.params.topology().clone();
    let round = state.round;
    let (pre_accuracy, pre_loss) = match state.last_eval {
        Some(v) => v,
        None => evaluate(&state.params, validation)?,
    };
    let masks: Vec<ParamMask> =
        clients.iter().map(|c| c.mask_at(round, &topology, setup.seed)).collect::<Result<_>>()?;
    let weights: Vec<f64> = clients.iter().map(|c| c.num_samples() as f64).collect();
    let everyone: Vec<usize> = (0..clients.len()).collect();
    let mut update_norms = vec![None; clients.len()];

    let previous = state.params.clone();
    let (next, selected, trained, probabilities) = match setup.participation {
        Participation::Full => {
            let results = train_all(state, clients, &masks, &everyone, setup)?;
            for (k, r) in results.iter().enumerate() {
                update_norms[k] = Some(r.update.norm());
            }
            let next = match setup.aggregation {
                Aggregation::Plain => {
                    let c: Vec<(&ParamSet, f64)> = results.iter().zip(&weights).map(|(r, &w)| (&r.params, w)).collect();
                    fedavg_aggregate(&state.params, &c)?
                }
                Aggregation::Masked => {
                    let c: Vec<Contribution<'_>> = results
                        .iter()
                        .zip(&masks)
                        .zip(&weights)
                        .map(|((r, m), &w)| Contribution { params: &r.params, mask: m, weight: w })
                        .collect();
                    aggregate_masked(&state.params, &c)?
                }
            };
            (next, everyone.clone(), everyone.clone(), None)
        }
        Participation::Sampled { ratio_weighted, kappa, norms } => {
            let mut sel_rng = rng::stream(setup.seed, "sampling", &[round as u64]);
            let (probs, selected, updates) = match norms {
                NormSource::Exact => {
                    let results = train_all(state, clients, &masks, &everyone, setup)?;
                    let exact: Vec<Option<f64>> = results.iter().map(|r| Some(r.update.norm())).collect();
                    let probs = round_probabilities(clients, &masks, &exact, ratio_weighted, kappa, &topology)?;
                    let p = crate::sampling::Probabilities::new(probs.clone())?;
                    let selected = select_with(&p, &mut sel_rng);
                    update_norms = exact;
                    let updates: Vec<Option<ParamSet>> = results.into_iter().map(|r| Some(r.update)).collect();
                    (probs, selected, updates)
                }
                NormSource::Stale => {
                    let probs =
                        round_probabilities(clients, &masks, &state.last_norms, ratio_weighted, kappa, &topology)?;
                    let p = crate::sampling::Probabilities::new(probs.clone())?;
                    let selected = select_with(&p, &mut sel_rng);
                    let results = train_all(state, clients, &masks, &selected, setup)?;
                    let mut updates: Vec<Option<ParamSet>> = vec![None; clients.len()];
                    for (&k, r) in selected.iter().zip(results) {
                        update_norms[k] = Some(r.update.norm());
                        updates[k] = Some(r.update);
                    }
                    (probs, selected, updates)
                }
            };
            let zero = ParamSet::zeros(&topology);
            let dense: Vec<&[f64]> = updates.iter().map(|u| u.as_ref().unwrap_or(&zero).as_slice()).collect();
            let p = crate::sampling::Probabilities::new(probs.clone())?;
            let delta = aggregate_unbiased(&selected, &dense, &p, &weights)?;
            let mut next = state.params.clone();
            next.as_mut_slice().iter_mut().zip(&delta).for_each(|(w, d)| *w += d);
            let trained: Vec<usize> = (0..clients.len()).filter(|&k| updates[k].is_some()).collect();
            (next, selected, trained, Some(probs))
        }
    };
    if !next.is_finite() {
        return Err(Error::Numerical(format!("non-finite global parameters after round {round}")));
    }
    for (k, v) in update_norms.iter().enumerate() {
        if v.is_some() {
            state.last_norms[k] = *v;
        }
    }
    let bytes_up = selected.iter().map(|&k| (masks[k].trained_params(&topology) * BYTES_PER_PARAM) as u64).sum();
    let bytes_down = (trained.len() * topology.num_params() * BYTES_PER_PARAM) as u64;
    let snapshot = state.tracker.observe(&previous, &next)?;
    let (accuracy, loss) = evaluate(&next, validation)?;
    let (expected_clients, expected_ratio_mass) = match &probabilities {
        Some(p) => {
            (Some(p.iter().sum()), Some(p.iter().zip(&masks).map(|(p, m)| p * m.training_ratio(&topology)).sum()))
        }
        None => (None, None),
    };
    state.history.push(RoundRecord {
        round,
        pre_loss,
        pre_accuracy,
        loss,
        accuracy,
        mg: snapshot.mg,
        ep: snapshot.ep,
        layer_mg: snapshot.layer_mg,
        layer_ep: snapshot.layer_ep,
        update_norms,
        selected,
        probabilities,
        expected_clients,
        expected_ratio_mass,
        bytes_up,
        bytes_down,
    });
    state.params = next;
    state.last_eval = Some((accuracy, loss));
    state.round += 1;
    Ok(())
}

/// Everything needed to run an experiment, built from a config.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: Topology,
    pub clients: Vec<ClientState>,
    pub validation: Dataset,
    pub round: RoundSetup,
    pub initial: ParamSet,
    /// Requested per-client training ratios.
    pub ratios: Vec<f64>,
    /// Trained-parameter fraction of each client's round-0 mask.
    pub realized_ratios: Vec<f64>,
    /// Trainer count per sub-layer for fixed-assignment strategies.
    pub coverage: Option<Vec<Vec<usize>>>,
    pub empty_shards: Vec<usize>,
}

pub fn build_setup(config: &ExperimentConfig) -> Result<Setup> {
    config.validate()?;
    let topology = config.topology()?;
    let seed = config.seed;
    let total = config.data.train_samples + config.data.validation_samples;
    let all = generate_synthetic(
        total,
        topology.input_dim(),
        topology.num_classes(),
        config.data.class_separation,
        rng::derive_seed(seed, "data", &[]),
    )?;
    let train_idx: Vec<usize> = (0..config.data.train_samples).collect();
    let val_idx: Vec<usize> = (config.data.train_samples..total).collect();
    let train = all.subset(&train_idx);
    let validation = all.subset(&val_idx);
    let spec = PartitionSpec {
        num_clients: config.partition.num_clients,
        concentration: config.partition.alpha,
        seed: rng::derive_seed(seed, "partition", &[]),
    };
    let shards = partition_dirichlet(&train, &spec)?;
    let empty = empty_shards(&shards);
    let ratios = config.client_ratios()?;

    let mut coverage = None;
    let sources: Vec<MaskSource> = match config.strategy {
        Strategy::FedAvg => vec![MaskSource::Fixed(ParamMask::full(&topology)); ratios.len()],
        Strategy::FedPlt => {
            let h = layer_counts_mlp(&topology);
            let q: Vec<Vec<f64>> =
                ratios.iter().map(|&r| balanced_allocation(r, &h).map(|plan| plan.q)).collect::<Result<_>>()?;
            let counts = config.sublayers.clone().unwrap_or_else(|| default_sublayers(&topology));
            let partition = partition_layers(&topology, &counts)?;
            let assignments = assign_rotational(&q, &partition)?;
            coverage = Some(coverage_report(&assignments, &partition));
            assignments
                .iter()
                .map(|a| materialize_mask(a, &partition, &topology).map(MaskSource::Fixed))
                .collect::<Result<_>>()?
        }
        other => {
            let strategy = other.baseline().expect("baseline strategy");
            ratios.iter().map(|&ratio| MaskSource::Baseline { strategy, ratio }).collect()
        }
    };
    let clients: Vec<ClientState> = shards
        .into_iter()
        .zip(sources)
        .enumerate()
        .map(|(id, (shard, mask))| ClientState { id, shard, lr: config.lr, mask })
        .collect();
    let realized_ratios = clients
        .iter()
        .map(|c| c.mask_at(0, &topology, seed).map(|m| m.training_ratio(&topology)))
        .collect::<Result<_>>()?;
    let steps = match config.local.mode {
        LocalMode::Epochs => LocalSteps::Epochs(config.local.count),
        LocalMode::Iterations => LocalSteps::Iterations(config.local.count),
    };
    let participation = match config.sampling.mode {
        SamplingMode::None => Participation::Full,
        mode => Participation::Sampled {
            ratio_weighted: mode == SamplingMode::OcsPlt,
            kappa: config.sampling.kappa.expect("validated"),
            norms: config.sampling.norms,
        },
    };
    let aggregation = if config.strategy == Strategy::FedAvg { Aggregation::Plain } else { Aggregation::Masked };
    Ok(Setup {
        initial: init_params(&topology, rng::derive_seed(seed, "init", &[])),
        topology,
        clients,
        validation,
        round: RoundSetup {
            local: LocalConfig { steps, batch_size: config.batch_size },
            aggregation,
            participation,
            seed,
        },
        ratios,
        realized_ratios,
        coverage,
        empty_shards: empty,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub history: Vec<RoundRecord>,
    pub initial_params: ParamSet,
    pub final_params: ParamSet,
    pub final_accuracy: f64,
    pub final_loss: f64,
    pub ratios: Vec<f64>,
    pub realized_ratios: Vec<f64>,
    pub coverage: Option<Vec<Vec<usize>>>,
    pub empty_shards: Vec<usize>,
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    let setup = build_setup(config)?;
    if !setup.empty_shards.is_empty() {
        tracing::info!(clients = ?setup.empty_shards, "clients with empty shards take part with zero weight");
    }
    let mut state = GlobalState::new(setup.initial.clone(), setup.clients.len(), config.ep_window)?;
    for _ in 0..config.rounds {
        run_round(&mut state, &setup.clients, &setup.round, &setup.validation)?;
        if let Some(r) = state.history.last() {
            tracing::debug!(round = r.round, loss = r.loss, accuracy = r.accuracy, "round complete");
        }
    }
    let (final_accuracy, final_loss) = evaluate(&state.params, &setup.validation)?;
    Ok(ExperimentResult {
        history: state.history,
        initial_params: setup.initial,
        final_params: state.params,
        final_accuracy,
        final_loss,
        ratios: setup.ratios,
        realized_ratios: setup.realized_ratios,
        coverage: setup.coverage,
        empty_shards: setup.empty_shards,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-round metrics CSV: `round,loss,accuracy,mg,ep,bytes_up,bytes_down,participants`
/// followed by `mg_l{i}` and `ep_l{i}` per layer. Absent EP values are empty.
pub fn write_metrics_csv<W: Write>(history: &[RoundRecord], num_layers: usize, mut w: W) -> Result<()> {
    let mut header = String::from("round,loss,accuracy,mg,ep,bytes_up,bytes_down,participants");
    for l in 0..num_layers {
        header.push_str(&format!(",mg_l{l}"));
    }
    for l in 0..num_layers {
        header.push_str(&format!(",ep_l{l}"));
    }
    writeln!(w, "{header}")?;
    for r in history {
        let mut line = format!(
            "{},{},{},{},{},{},{},{}",
            r.round,
            r.loss,
            r.accuracy,
            r.mg,
            opt(r.ep),
            r.bytes_up,
            r.bytes_down,
            r.participants()
        );
        for v in &r.layer_mg {
            line.push_str(&format!(",{v}"));
        }
        for v in &r.layer_ep {
            line.push_str(&format!(",{}", opt(*v)));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
