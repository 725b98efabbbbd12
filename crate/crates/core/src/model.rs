//! Dense multilayer perceptron with explicit per-layer parameter blocks.
//!
//! Hidden layers use ReLU, the output layer is a softmax trained with mean
//! categorical cross-entropy. Parameters live in one flat `f64` buffer; layer
//! `l` occupies `(d_{l-1} + 1) * d_l` entries laid out as a unit-major weight
//! matrix (row `j` holds the incoming weights of output unit `j`) followed by
//! the `d_l` biases. Each output unit therefore owns exactly `d_{l-1} + 1`
//! parameters, which is the granularity used by masks.

use std::io::{Read, Write};
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FPLW";
const CHECKPOINT_VERSION: u32 = 1;

/// Layer widths `[d0, d1, ..., dL]`: input dimension then `L` layer widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Topology {
    sizes: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Topology {
    type Error = Error;

    fn try_from(sizes: Vec<usize>) -> Result<Self> {
        Topology::new(sizes)
    }
}

impl From<Topology> for Vec<usize> {
    fn from(t: Topology) -> Self {
        t.sizes
    }
}

/// Position of one dense layer inside the flat parameter buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub offset: usize,
    pub fan_in: usize,
    pub units: usize,
}

impl LayerLayout {
    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.units
    }

    pub fn is_empty(&self) -> bool {
        self.units == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.units
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.fan_in * self.units;
        start..start + self.units
    }

    /// Incoming weights of unit `j`.
    pub fn unit_weights(&self, j: usize) -> Range<usize> {
        let start = self.offset + j * self.fan_in;
        start..start + self.fan_in
    }

    pub fn unit_bias(&self, j: usize) -> usize {
        self.offset + self.fan_in * self.units + j
    }
}

impl Topology {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Topology("need an input size and at least one layer".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Topology(format!("all layer sizes must be >= 1, got {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Number of trainable layers `L`.
    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Width `d_l` of trainable layer `l` (0-based).
    pub fn units(&self, layer: usize) -> usize {
        self.sizes[layer + 1]
    }

    pub fn layouts(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.sizes
            .windows(2)
            .map(|w| {
                let l = LayerLayout { offset, fan_in: w[0], units: w[1] };
                offset += l.len();
                l
            })
            .collect()
    }

    pub fn layout(&self, layer: usize) -> LayerLayout {
        self.layouts()[layer]
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
    }
}

/// Parameters of the whole network, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    topology: Topology,
    data: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradient = ParamSet;

impl ParamSet {
    pub fn zeros(topology: &Topology) -> Self {
        Self { topology: topology.clone(), data: vec![0.0; topology.num_params()] }
    }

    pub fn from_vec(topology: &Topology, data: Vec<f64>) -> Result<Self> {
        if data.len() != topology.num_params() {
            return Err(Error::Shape(format!(
                "{} values for a topology with {} parameters",
                data.len(),
                topology.num_params()
            )));
        }
        Ok(Self { topology: topology.clone(), data })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn layer(&self, l: usize) -> &[f64] {
        &self.data[self.topology.layout(l).range()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamSet) -> Result<ParamSet> {
        self.check_same(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(ParamSet { topology: self.topology.clone(), data })
    }

    pub(crate) fn check_same(&self, other: &ParamSet) -> Result<()> {
        if self.topology != other.topology {
            return Err(Error::Shape(format!("topology {:?} vs {:?}", self.topology.sizes(), other.topology.sizes())));
        }
        Ok(())
    }

    /// Writes a checkpoint: `FPLW`, version u32, number of sizes u32, the sizes
    /// as u32, then every parameter as little-endian f64 in layer order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.topology.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.topology.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != CHECKPOINT_VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut sizes = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            sizes.push(u32::from_le_bytes(b4) as usize);
        }
        let topology = Topology::new(sizes)?;
        let mut data = Vec::with_capacity(topology.num_params());
        let mut b8 = [0u8; 8];
        for _ in 0..topology.num_params() {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Ok(Self { topology, data })
    }
}

/// Unit-level training mask: `units[l][j]` selects output unit `j` of layer
/// `l`, together with its incoming weights and bias.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamMask {
    units: Vec<Vec<bool>>,
}

impl ParamMask {
    pub fn full(topology: &Topology) -> Self {
        Self { units: (0..topology.num_layers()).map(|l| vec![true; topology.units(l)]).collect() }
    }

    pub fn empty(topology: &Topology) -> Self {
        Self { units: (0..topology.num_layers()).map(|l| vec![false; topology.units(l)]).collect() }
    }

    pub fn from_units(topology: &Topology, units: Vec<Vec<bool>>) -> Result<Self> {
        if units.len() != topology.num_layers() || units.iter().enumerate().any(|(l, u)| u.len() != topology.units(l)) {
            return Err(Error::Shape("mask does not match topology".into()));
        }
        Ok(Self { units })
    }

    pub fn units(&self) -> &[Vec<bool>] {
        &self.units
    }

    pub fn layer(&self, l: usize) -> &[bool] {
        &self.units[l]
    }

    pub fn set(&mut self, layer: usize, unit: usize, on: bool) {
        self.units[layer][unit] = on;
    }

    pub fn is_full(&self) -> bool {
        self.units.iter().flatten().all(|&b| b)
    }

    pub fn selected_units(&self, layer: usize) -> usize {
        self.units[layer].iter().filter(|&&b| b).count()
    }

    /// Fraction of layer `l`'s units selected (equal to its parameter fraction).
    pub fn layer_fraction(&self, layer: usize) -> f64 {
        self.selected_units(layer) as f64 / self.units[layer].len() as f64
    }

    pub fn trained_params_in_layer(&self, topology: &Topology, layer: usize) -> usize {
        self.selected_units(layer) * (topology.sizes()[layer] + 1)
    }

    pub fn trained_params(&self, topology: &Topology) -> usize {
        (0..self.units.len()).map(|l| self.trained_params_in_layer(topology, l)).sum()
    }

    /// Fraction of all parameters that are trained.
    pub fn training_ratio(&self, topology: &Topology) -> f64 {
        self.trained_params(topology) as f64 / topology.num_params() as f64
    }

    /// Units with the selection flipped.
    pub fn complement(&self) -> Self {
        Self { units: self.units.iter().map(|l| l.iter().map(|b| !b).collect()).collect() }
    }

    /// Parameter-level indicator in the flat layout.
    pub fn coordinates(&self, topology: &Topology) -> Vec<bool> {
        let mut out = vec![false; topology.num_params()];
        for (l, layout) in topology.layouts().into_iter().enumerate() {
            for (j, &on) in self.units[l].iter().enumerate() {
                if on {
                    out[layout.unit_weights(j)].iter_mut().for_each(|b| *b = true);
                    out[layout.unit_bias(j)] = true;
                }
            }
        }
        out
    }

    /// Zeroes every coordinate outside the mask, in place.
    pub fn apply(&self, params: &mut ParamSet) {
        for (l, layout) in params.topology.layouts().into_iter().enumerate() {
            for (j, &on) in self.units[l].iter().enumerate() {
                if !on {
                    params.data[layout.unit_weights(j)].iter_mut().for_each(|v| *v = 0.0);
                    params.data[layout.unit_bias(j)] = 0.0;
                }
            }
        }
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(topology: &Topology, seed: u64) -> ParamSet {
    let mut rng = rng::stream(seed, "init", &[]);
    let mut params = ParamSet::zeros(topology);
    for layout in topology.layouts() {
        let bound = (6.0 / (layout.fan_in + layout.units) as f64).sqrt();
        for w in &mut params.data[layout.weights()] {
            *w = rng.random_range(-bound..=bound);
        }
    }
    params
}

fn check_batch(params: &ParamSet, batch: &Batch<'_>) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    if batch.dim != params.topology.input_dim() {
        return Err(Error::Shape(format!(
            "batch dimension {} vs model input {}",
            batch.dim,
            params.topology.input_dim()
        )));
    }
    if batch.features.len() != batch.len() * batch.dim {
        return Err(Error::Shape("batch features and labels disagree".into()));
    }
    let classes = params.topology.num_classes();
    if let Some(y) = batch.labels.iter().find(|&&y| y as usize >= classes) {
        return Err(Error::Shape(format!("label {y} outside {classes} model outputs")));
    }
    Ok(())
}

/// Activations of every layer for a batch; `acts[0]` is the input.
fn forward_activations(params: &ParamSet, batch: &Batch<'_>) -> Vec<Vec<f64>> {
    let n = batch.len();
    let layouts = params.topology.layouts();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layouts.len() + 1);
    acts.push(batch.features.to_vec());
    for (l, layout) in layouts.iter().enumerate() {
        let input = &acts[l];
        let w = &params.data[layout.weights()];
        let b = &params.data[layout.biases()];
        let last = l + 1 == layouts.len();
        let mut out = vec![0.0; n * layout.units];
        for s in 0..n {
            let x = &input[s * layout.fan_in..(s + 1) * layout.fan_in];
            let o = &mut out[s * layout.units..(s + 1) * layout.units];
            for (j, oj) in o.iter_mut().enumerate() {
                let row = &w[j * layout.fan_in..(j + 1) * layout.fan_in];
                let z = b[j] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
                *oj = if last { z } else { z.max(0.0) };
            }
        }
        acts.push(out);
    }
    acts
}

/// Row-wise softmax of logits and per-sample cross-entropy.
fn softmax_xent(logits: &[f64], labels: &[u32], classes: usize) -> (Vec<f64>, Vec<f64>) {
    let mut probs = vec![0.0; logits.len()];
    let mut losses = Vec::with_capacity(labels.len());
    for (s, &y) in labels.iter().enumerate() {
        let z = &logits[s * classes..(s + 1) * classes];
        let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for c in 0..classes {
            probs[s * classes + c] = (z[c] - lse).exp();
        }
        losses.push(lse - z[y as usize]);
    }
    (probs, losses)
}

/// Logits and mean cross-entropy of the batch.
pub fn forward(params: &ParamSet, batch: &Batch<'_>) -> Result<(Vec<f64>, f64)> {
    check_batch(params, batch)?;
    let mut acts = forward_activations(params, batch);
    let logits = acts.pop().unwrap();
    let (_, losses) = softmax_xent(&logits, batch.labels, params.topology.num_classes());
    let loss = losses.iter().sum::<f64>() / batch.len() as f64;
    Ok((logits, loss))
}

/// Row-wise softmax probabilities for a batch.
pub fn predict_proba(params: &ParamSet, batch: &Batch<'_>) -> Result<Vec<f64>> {
    check_batch(params, batch)?;
    let mut acts = forward_activations(params, batch);
    let logits = acts.pop().unwrap();
    Ok(softmax_xent(&logits, batch.labels, params.topology.num_classes()).0)
}

/// Mean loss and its exact gradient with respect to every parameter.
pub fn loss_and_gradient(params: &ParamSet, batch: &Batch<'_>) -> Result<(f64, Gradient)> {
    check_batch(params, batch)?;
    let n = batch.len();
    let classes = params.topology.num_classes();
    let layouts = params.topology.layouts();
    let acts = forward_activations(params, batch);
    let (probs, losses) = softmax_xent(acts.last().unwrap(), batch.labels, classes);
    let loss = losses.iter().sum::<f64>() / n as f64;

    let inv_n = 1.0 / n as f64;
    // dL/dz for the output layer
    let mut delta = probs;
    for (s, &y) in batch.labels.iter().enumerate() {
        delta[s * classes + y as usize] -= 1.0;
    }
    delta.iter_mut().for_each(|d| *d *= inv_n);

    let mut grad = ParamSet::zeros(&params.topology);
    for l in (0..layouts.len()).rev() {
        let layout = layouts[l];
        let input = &acts[l];
        {
            let g = &mut grad.data[layout.range()];
            let (gw, gb) = g.split_at_mut(layout.fan_in * layout.units);
            for s in 0..n {
                let x = &input[s * layout.fan_in..(s + 1) * layout.fan_in];
                let d = &delta[s * layout.units..(s + 1) * layout.units];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    gb[j] += dj;
                    let row = &mut gw[j * layout.fan_in..(j + 1) * layout.fan_in];
                    row.iter_mut().zip(x).for_each(|(g, xi)| *g += dj * xi);
                }
            }
        }
        if l == 0 {
            break;
        }
        let w = &params.data[layout.weights()];
        let mut prev = vec![0.0; n * layout.fan_in];
        for s in 0..n {
            let d = &delta[s * layout.units..(s + 1) * layout.units];
            let p = &mut prev[s * layout.fan_in..(s + 1) * layout.fan_in];
            for (j, &dj) in d.iter().enumerate() {
                if dj == 0.0 {
                    continue;
                }
                let row = &w[j * layout.fan_in..(j + 1) * layout.fan_in];
                p.iter_mut().zip(row).for_each(|(pi, wi)| *pi += dj * wi);
            }
            // ReLU derivative of the previous hidden layer
            let a = &input[s * layout.fan_in..(s + 1) * layout.fan_in];
            p.iter_mut().zip(a).for_each(|(pi, &ai)| {
                if ai <= 0.0 {
                    *pi = 0.0
                }
            });
        }
        delta = prev;
    }
    Ok((loss, grad))
}

pub fn backward(params: &ParamSet, batch: &Batch<'_>) -> Result<Gradient> {
    loss_and_gradient(params, batch).map(|(_, g)| g)
}

/// In-place SGD step restricted to `mask`; masked-out entries are not touched.
pub fn masked_sgd_step_in_place(params: &mut ParamSet, gradient: &Gradient, mask: &ParamMask, lr: f64) {
    for (l, layout) in params.topology.layouts().into_iter().enumerate() {
        for (j, &on) in mask.units[l].iter().enumerate() {
            if !on {
                continue;
            }
            let w = layout.unit_weights(j);
            params.data[w.clone()].iter_mut().zip(&gradient.data[w]).for_each(|(p, g)| *p -= lr * g);
            let b = layout.unit_bias(j);
            params.data[b] -= lr * gradient.data[b];
        }
    }
}

pub fn masked_sgd_step(params: &ParamSet, gradient: &Gradient, mask: &ParamMask, lr: f64) -> Result<ParamSet> {
    params.check_same(gradient)?;
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be > 0, got {lr}")));
    }
    let mut out = params.clone();
    masked_sgd_step_in_place(&mut out, gradient, mask, lr);
    Ok(out)
}

/// Accuracy and mean loss over a dataset.
pub fn evaluate(params: &ParamSet, dataset: &Dataset) -> Result<(f64, f64)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty dataset".into()));
    }
    let (logits, loss) = forward(params, &dataset.as_batch())?;
    let classes = params.topology.num_classes();
    let correct = dataset
        .labels()
        .iter()
        .enumerate()
        .filter(|(s, &y)| {
            let row = &logits[s * classes..(s + 1) * classes];
            argmax(row) == y as usize
        })
        .count();
    Ok((correct as f64 / dataset.len() as f64, loss))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
