//! Sub-layer partitioning, rotational assignment and mask construction.
//!
//! Also hosts the mask-level emulations of the baseline strategies (random
//! neuron dropping, fixed prefix sub-models, rolling windows, deep-layer-only
//! training).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocation::quantized_count;
use crate::error::{Error, Result};
use crate::model::{ParamMask, Topology};
use crate::rng;

/// Default number of sub-layers for hidden layers.
pub const DEFAULT_HIDDEN_SUBLAYERS: usize = 8;

/// Contiguous unit blocks for every trainable layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SublayerPartition {
    blocks: Vec<Vec<Range<usize>>>,
}

impl SublayerPartition {
    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// Number of sub-layers `𝓗_l`.
    pub fn count(&self, layer: usize) -> usize {
        self.blocks[layer].len()
    }

    pub fn blocks(&self, layer: usize) -> &[Range<usize>] {
        &self.blocks[layer]
    }

    pub fn counts(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }
}

/// `min(8, d_l)` sub-layers for hidden layers and one for the output layer.
pub fn default_sublayers(topology: &Topology) -> Vec<usize> {
    let last = topology.num_layers() - 1;
    (0..topology.num_layers())
        .map(|l| if l == last { 1 } else { DEFAULT_HIDDEN_SUBLAYERS.min(topology.units(l)) })
        .collect()
}

/// Splits layer `l` into `sublayers[l]` blocks whose sizes differ by at most
/// one; the larger blocks come first.
pub fn partition_layers(topology: &Topology, sublayers: &[usize]) -> Result<SublayerPartition> {
    if sublayers.len() != topology.num_layers() {
        return Err(Error::Shape(format!("{} sub-layer counts for {} layers", sublayers.len(), topology.num_layers())));
    }
    let mut blocks = Vec::with_capacity(sublayers.len());
    for (l, &count) in sublayers.iter().enumerate() {
        let units = topology.units(l);
        if count == 0 || count > units {
            return Err(Error::InvalidArgument(format!("layer {l}: {count} sub-layers for {units} units")));
        }
        let base = units / count;
        let extra = units % count;
        let mut start = 0;
        let layer: Vec<Range<usize>> = (0..count)
            .map(|h| {
                let len = base + usize::from(h < extra);
                let r = start..start + len;
                start += len;
                r
            })
            .collect();
        blocks.push(layer);
    }
    Ok(SublayerPartition { blocks })
}

/// Sub-layer indices assigned to one client, per layer, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SublayerAssignment {
    pub layers: Vec<Vec<usize>>,
}

impl SublayerAssignment {
    /// Fraction of units of each layer covered by the assignment.
    pub fn realized_fractions(&self, partition: &SublayerPartition) -> Vec<f64> {
        self.layers
            .iter()
            .enumerate()
            .map(|(l, sel)| {
                let blocks = partition.blocks(l);
                let total: usize = blocks.iter().map(|b| b.len()).sum();
                let chosen: usize = sel.iter().map(|&h| blocks[h].len()).sum();
                chosen as f64 / total as f64
            })
            .collect()
    }
}

/// Cyclic-window assignment with cumulative offsets.
///
/// Client `k` takes `n_{k,l} = round(q_{k,l} 𝓗_l)` consecutive sub-layers of
/// layer `l` starting where client `k-1` stopped (modulo `𝓗_l`), so each
/// sub-layer ends up with a trainer count within one of the mean.
pub fn assign_rotational(allocations: &[Vec<f64>], partition: &SublayerPartition) -> Result<Vec<SublayerAssignment>> {
    let layers = partition.num_layers();
    let mut offsets = vec![0usize; layers];
    let mut out = Vec::with_capacity(allocations.len());
    for (k, q) in allocations.iter().enumerate() {
        if q.len() != layers {
            return Err(Error::Shape(format!("client {k}: allocation has {} entries for {layers} layers", q.len())));
        }
        let mut sel = Vec::with_capacity(layers);
        for l in 0..layers {
            let count = partition.count(l);
            let n = quantized_count(q[l], count);
            let mut chosen: Vec<usize> = (0..n).map(|j| (offsets[l] + j) % count).collect();
            chosen.sort_unstable();
            offsets[l] = (offsets[l] + n) % count;
            sel.push(chosen);
        }
        out.push(SublayerAssignment { layers: sel });
    }
    Ok(out)
}

/// Unit mask covering exactly the assigned blocks.
pub fn materialize_mask(
    assignment: &SublayerAssignment,
    partition: &SublayerPartition,
    topology: &Topology,
) -> Result<ParamMask> {
    if assignment.layers.len() != topology.num_layers() || partition.num_layers() != topology.num_layers() {
        return Err(Error::Shape("assignment, partition and topology disagree on layer count".into()));
    }
    let mut mask = ParamMask::empty(topology);
    for (l, sel) in assignment.layers.iter().enumerate() {
        for &h in sel {
            let block =
                partition.blocks(l).get(h).ok_or_else(|| Error::Shape(format!("layer {l} has no sub-layer {h}")))?;
            if block.end > topology.units(l) {
                return Err(Error::Shape(format!("sub-layer {h} of layer {l} exceeds layer width")));
            }
            for j in block.clone() {
                mask.set(l, j, true);
            }
        }
    }
    Ok(mask)
}

/// Trainer count `|𝒮_{l,h}|` for every sub-layer.
pub fn coverage_report(assignments: &[SublayerAssignment], partition: &SublayerPartition) -> Vec<Vec<usize>> {
    let mut counts: Vec<Vec<usize>> = (0..partition.num_layers()).map(|l| vec![0; partition.count(l)]).collect();
    for a in assignments {
        for (l, sel) in a.layers.iter().enumerate() {
            for &h in sel {
                counts[l][h] += 1;
            }
        }
    }
    counts
}

/// Mask strategies used as comparison points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineStrategy {
    FedDrop,
    HeteroFl,
    FedRolex,
    FedPmt,
}

impl BaselineStrategy {
    /// Whether the mask can change between rounds.
    pub fn is_dynamic(self) -> bool {
        matches!(self, BaselineStrategy::FedDrop | BaselineStrategy::FedRolex)
    }
}

impl FromStr for BaselineStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feddrop" => Ok(Self::FedDrop),
            "heterofl" => Ok(Self::HeteroFl),
            "fedrolex" => Ok(Self::FedRolex),
            "fedpmt" => Ok(Self::FedPmt),
            other => Err(Error::InvalidArgument(format!("unknown baseline strategy `{other}`"))),
        }
    }
}

impl fmt::Display for BaselineStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FedDrop => "feddrop",
            Self::HeteroFl => "heterofl",
            Self::FedRolex => "fedrolex",
            Self::FedPmt => "fedpmt",
        })
    }
}

/// Mask of a baseline strategy for `client` at `round`. The output layer is
/// always trained.
///
/// * `FedDrop`: every hidden unit kept independently with probability `ratio`,
///   redrawn each round.
/// * `HeteroFl`: the first `⌈ratio·d_l⌉` units of each hidden layer.
/// * `FedRolex`: `⌈ratio·d_l⌉` consecutive units starting at `round mod d_l`,
///   wrapping around.
/// * `FedPmt`: whole layers, deepest first, while the trained-parameter
///   fraction stays within `ratio`; shallower layers are frozen.
pub fn baseline_mask(
    strategy: BaselineStrategy,
    client: usize,
    round: usize,
    ratio: f64,
    topology: &Topology,
    seed: u64,
) -> Result<ParamMask> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio must lie in (0, 1], got {ratio}")));
    }
    let layers = topology.num_layers();
    let out = layers - 1;
    let mut mask = ParamMask::empty(topology);
    for j in 0..topology.units(out) {
        mask.set(out, j, true);
    }
    let width = |l: usize| ((ratio * topology.units(l) as f64).ceil() as usize).clamp(1, topology.units(l));
    match strategy {
        BaselineStrategy::FedDrop => {
            let mut rng = rng::stream(seed, "feddrop", &[client as u64, round as u64]);
            for l in 0..out {
                for j in 0..topology.units(l) {
                    if rng.random::<f64>() < ratio {
                        mask.set(l, j, true);
                    }
                }
            }
        }
        BaselineStrategy::HeteroFl => {
            for l in 0..out {
                for j in 0..width(l) {
                    mask.set(l, j, true);
                }
            }
        }
        BaselineStrategy::FedRolex => {
            for l in 0..out {
                let d = topology.units(l);
                let start = round % d;
                for i in 0..width(l) {
                    mask.set(l, (start + i) % d, true);
                }
            }
        }
        BaselineStrategy::FedPmt => {
            let total = topology.num_params() as f64;
            let mut trained = mask.trained_params(topology) as f64;
            for l in (0..out).rev() {
                let add = ((topology.sizes()[l] + 1) * topology.units(l)) as f64;
                if (trained + add) / total > ratio + 1e-12 {
                    break;
                }
                trained += add;
                for j in 0..topology.units(l) {
                    mask.set(l, j, true);
                }
            }
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn topo(s: &[usize]) -> Topology {
        Topology::new(s.to_vec()).unwrap()
    }

    #[test]
    fn partition_examples() {
        let t = topo(&[4, 512, 10, 3]);
        let p = partition_layers(&t, &[8, 4, 1]).unwrap();
        assert!(p.blocks(0).iter().all(|b| b.len() == 64));
        let sizes: Vec<usize> = p.blocks(1).iter().map(|b| b.len()).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
        assert_eq!(p.blocks(2), &[0..3]);
        assert!(partition_layers(&t, &[8, 11, 1]).is_err());
        assert!(partition_layers(&t, &[8, 0, 1]).is_err());
        assert!(partition_layers(&t, &[8, 4]).is_err());
    }

    #[test]
    fn default_sublayer_counts() {
        assert_eq!(default_sublayers(&topo(&[784, 512, 256, 128, 10])), vec![8, 8, 8, 1]);
        assert_eq!(default_sublayers(&topo(&[4, 5, 3])), vec![5, 1]);
    }

    #[test]
    fn perfect_rotation() {
        let t = topo(&[2, 8, 2]);
        let p = partition_layers(&t, &[4, 1]).unwrap();
        let a = assign_rotational(&vec![vec![0.25, 1.0]; 4], &p).unwrap();
        assert_eq!(coverage_report(&a, &p)[0], vec![1, 1, 1, 1]);
        let windows: Vec<Vec<usize>> = a.iter().map(|c| c.layers[0].clone()).collect();
        assert_eq!(windows, vec![vec![0], vec![1], vec![2], vec![3]]);
    }

    #[test]
    fn full_clients_cover_everything() {
        let t = topo(&[2, 8, 2]);
        let p = partition_layers(&t, &[4, 1]).unwrap();
        let a = assign_rotational(&vec![vec![1.0, 1.0]; 3], &p).unwrap();
        assert_eq!(coverage_report(&a, &p), vec![vec![3; 4], vec![3]]);
    }

    #[test]
    fn half_clients_balanced() {
        let t = topo(&[2, 8, 2]);
        let p = partition_layers(&t, &[4, 1]).unwrap();
        let a = assign_rotational(&vec![vec![0.5, 1.0]; 6], &p).unwrap();
        assert_eq!(coverage_report(&a, &p)[0], vec![3, 3, 3, 3]);
        // wrap-around window of client 2 is {0, 1}, client 1 is {2, 3}
        assert_eq!(a[1].layers[0], vec![2, 3]);
    }

    #[test]
    fn masks_from_assignments() {
        let t = topo(&[784, 512, 256, 128, 10]);
        let p = partition_layers(&t, &default_sublayers(&t)).unwrap();
        let full = SublayerAssignment { layers: vec![(0..8).collect(), (0..8).collect(), (0..8).collect(), vec![0]] };
        assert!(materialize_mask(&full, &p, &t).unwrap().is_full());

        let one = SublayerAssignment { layers: vec![vec![3], vec![], vec![], vec![0]] };
        let m = materialize_mask(&one, &p, &t).unwrap();
        assert_eq!(m.trained_params_in_layer(&t, 0), 64 * 785);
        assert_eq!(m.trained_params_in_layer(&t, 1), 0);
        assert!(m.layer(0)[192] && !m.layer(0)[191] && m.layer(0)[255] && !m.layer(0)[256]);

        let bad = SublayerAssignment { layers: vec![vec![9], vec![], vec![], vec![]] };
        assert!(materialize_mask(&bad, &p, &t).is_err());
    }

    #[test]
    fn realized_fraction_close_to_request() {
        let t = topo(&[10, 64, 32, 3]);
        let p = partition_layers(&t, &[8, 8, 1]).unwrap();
        let q = vec![vec![0.3, 0.77, 1.0]];
        let a = assign_rotational(&q, &p).unwrap();
        for (l, f) in a[0].realized_fractions(&p).iter().enumerate() {
            assert!((f - q[0][l]).abs() <= 1.0 / p.count(l) as f64);
        }
    }

    #[test]
    fn heterofl_full_ratio() {
        let t = topo(&[4, 6, 5, 3]);
        let a = baseline_mask(BaselineStrategy::HeteroFl, 0, 0, 1.0, &t, 1).unwrap();
        let b = baseline_mask(BaselineStrategy::HeteroFl, 0, 7, 1.0, &t, 1).unwrap();
        assert!(a.is_full());
        assert_eq!(a, b);
        let half = baseline_mask(BaselineStrategy::HeteroFl, 0, 0, 0.5, &t, 1).unwrap();
        assert_eq!(half.layer(0), &[true, true, true, false, false, false]);
        assert_eq!(half.layer(1), &[true, true, true, false, false]);
    }

    #[test]
    fn fedrolex_shifts_by_one() {
        let t = topo(&[3, 10, 2]);
        let m0 = baseline_mask(BaselineStrategy::FedRolex, 0, 0, 0.3, &t, 1).unwrap();
        let m1 = baseline_mask(BaselineStrategy::FedRolex, 0, 1, 0.3, &t, 1).unwrap();
        let on = |m: &ParamMask| m.layer(0).iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect::<Vec<_>>();
        assert_eq!(on(&m0), vec![0, 1, 2]);
        assert_eq!(on(&m1), vec![1, 2, 3]);
        let m9 = baseline_mask(BaselineStrategy::FedRolex, 0, 9, 0.3, &t, 1).unwrap();
        assert_eq!(on(&m9), vec![0, 1, 9]);
    }

    #[test]
    fn fedpmt_trains_deep_suffix() {
        let t = topo(&[784, 512, 256, 128, 10]);
        let layer_q = |m: &ParamMask| (0..4).map(|l| m.layer_fraction(l)).collect::<Vec<_>>();
        let m = baseline_mask(BaselineStrategy::FedPmt, 0, 0, 0.30, &t, 0).unwrap();
        assert_eq!(layer_q(&m), vec![0.0, 1.0, 1.0, 1.0]);
        let m = baseline_mask(BaselineStrategy::FedPmt, 0, 0, 0.07, &t, 0).unwrap();
        assert_eq!(layer_q(&m), vec![0.0, 0.0, 1.0, 1.0]);
        let m = baseline_mask(BaselineStrategy::FedPmt, 0, 0, 0.01, &t, 0).unwrap();
        assert_eq!(layer_q(&m), vec![0.0, 0.0, 0.0, 1.0]);
        assert!(baseline_mask(BaselineStrategy::FedPmt, 0, 0, 1.0, &t, 0).unwrap().is_full());
    }

    #[test]
    fn feddrop_changes_per_round_and_keeps_output() {
        let t = topo(&[4, 32, 16, 3]);
        let a = baseline_mask(BaselineStrategy::FedDrop, 2, 0, 0.5, &t, 9).unwrap();
        let b = baseline_mask(BaselineStrategy::FedDrop, 2, 1, 0.5, &t, 9).unwrap();
        assert_ne!(a, b);
        assert_eq!(a, baseline_mask(BaselineStrategy::FedDrop, 2, 0, 0.5, &t, 9).unwrap());
        assert!(a.layer(2).iter().all(|&x| x));
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("FedRolex".parse::<BaselineStrategy>().unwrap(), BaselineStrategy::FedRolex);
        assert!("fedfoo".parse::<BaselineStrategy>().is_err());
        let t = topo(&[2, 2]);
        assert!(baseline_mask(BaselineStrategy::FedDrop, 0, 0, 0.0, &t, 0).is_err());
    }
}
