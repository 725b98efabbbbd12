//! Synthetic datasets and Dirichlet label-skew partitioning.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;

const MAGIC: &[u8; 4] = b"FPLT";
const FORMAT_VERSION: u32 = 1;

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<u32>,
    dim: usize,
    num_classes: usize,
}

/// A borrowed mini-batch.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: &'a [f64],
    pub labels: &'a [u32],
    pub dim: usize,
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u32>, dim: usize, num_classes: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("feature dimension must be >= 1".into()));
        }
        if num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} feature values for {} labels of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Self { features, labels, dim, num_classes })
    }

    pub fn empty(dim: usize, num_classes: usize) -> Self {
        Self { features: Vec::new(), labels: Vec::new(), dim, num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_batch(&self) -> Batch<'_> {
        Batch { features: &self.features, labels: &self.labels, dim: self.dim }
    }

    /// New dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Dataset { features, labels, dim: self.dim, num_classes: self.num_classes }
    }

    /// Count of samples per class.
    pub fn class_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &y in &self.labels {
            counts[y as usize] += 1;
        }
        counts
    }

    /// Writes the flat binary format: `FPLT`, version u32, n u64, dim u32,
    /// classes u32 (little-endian), then f32 features row-major, then u32 labels.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        for &v in &self.features {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        for &y in &self.labels {
            w.write_all(&y.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let mut n = [0u8; 8];
        r.read_exact(&mut n)?;
        let n = u64::from_le_bytes(n) as usize;
        let dim = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let mut features = Vec::with_capacity(n * dim);
        let mut buf = [0u8; 4];
        for _ in 0..n * dim {
            r.read_exact(&mut buf)?;
            features.push(f64::from(f32::from_le_bytes(buf)));
        }
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(read_u32(&mut r)?);
        }
        Dataset::new(features, labels, dim, num_classes)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Class-conditional Gaussian blobs with unit noise.
///
/// Labels cycle through the classes before shuffling, so every class holds
/// `num_samples / C` samples up to one. When `feature_dim >= C` the class means
/// sit on scaled basis vectors with pairwise distance exactly
/// `class_separation`; otherwise they are random directions of norm
/// `class_separation / 2`.
pub fn generate_synthetic(
    num_samples: usize,
    feature_dim: usize,
    num_classes: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 {
        return Err(Error::InvalidArgument("num_classes must be >= 2".into()));
    }
    if num_samples < num_classes {
        return Err(Error::InvalidArgument(format!("num_samples {num_samples} < num_classes {num_classes}")));
    }
    if feature_dim == 0 {
        return Err(Error::InvalidArgument("feature_dim must be >= 1".into()));
    }
    if !(class_separation >= 0.0) || !class_separation.is_finite() {
        return Err(Error::InvalidArgument("class_separation must be finite and >= 0".into()));
    }

    let mut rng = rng::stream(seed, "synthetic", &[]);
    let means: Vec<Vec<f64>> = if feature_dim >= num_classes {
        let scale = class_separation / std::f64::consts::SQRT_2;
        (0..num_classes)
            .map(|c| {
                let mut m = vec![0.0; feature_dim];
                m[c] = scale;
                m
            })
            .collect()
    } else {
        (0..num_classes)
            .map(|_| {
                let v: Vec<f64> = (0..feature_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.into_iter().map(|x| x / norm * class_separation / 2.0).collect()
            })
            .collect()
    };

    let mut labels: Vec<u32> = (0..num_samples).map(|i| (i % num_classes) as u32).collect();
    labels.shuffle(&mut rng);

    let mut features = Vec::with_capacity(num_samples * feature_dim);
    for &y in &labels {
        for &mu in &means[y as usize] {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + noise);
        }
    }
    Dataset::new(features, labels, feature_dim, num_classes)
}

/// Parameters of a Dirichlet label-skew split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionSpec {
    pub num_clients: usize,
    pub concentration: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::InvalidArgument("num_clients must be >= 1".into()));
        }
        if !(self.concentration > 0.0) || !self.concentration.is_finite() {
            return Err(Error::InvalidArgument("Dirichlet concentration must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Splits `dataset` across `spec.num_clients` shards.
///
/// For each class a proportion vector is drawn from `Dirichlet(α, …, α)` and
/// each sample of that class is sent to a client drawn from it. Shards keep
/// the input order of their samples. Empty shards are allowed.
pub fn partition_dirichlet(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("cannot partition an empty dataset".into()));
    }
    let k = spec.num_clients;
    let mut rng = rng::stream(spec.seed, "partition", &[]);
    let gamma =
        Gamma::new(spec.concentration, 1.0).map_err(|e| Error::InvalidArgument(format!("gamma distribution: {e}")))?;

    let mut cumulative: Vec<Vec<f64>> = Vec::with_capacity(dataset.num_classes());
    for _ in 0..dataset.num_classes() {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
        let total: f64 = draws.iter().sum();
        let props: Vec<f64> = if total > 0.0 && total.is_finite() {
            draws.iter().map(|d| d / total).collect()
        } else {
            // every gamma draw underflowed: all mass on one client
            let mut p = vec![0.0; k];
            p[rng.random_range(0..k)] = 1.0;
            p
        };
        let mut acc = 0.0;
        cumulative.push(
            props
                .iter()
                .map(|p| {
                    acc += p;
                    acc
                })
                .collect(),
        );
    }

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in dataset.labels().iter().enumerate() {
        let cdf = &cumulative[y as usize];
        let u: f64 = rng.random::<f64>() * cdf[k - 1];
        let client = cdf.partition_point(|&c| c <= u).min(k - 1);
        members[client].push(i);
    }

    let shards: Vec<Dataset> = members.iter().map(|idx| dataset.subset(idx)).collect();
    let empty = empty_shards(&shards);
    if !empty.is_empty() {
        tracing::warn!(clients = ?empty, "Dirichlet partition produced empty shards");
    }
    Ok(shards)
}

/// Indices of shards holding no samples.
pub fn empty_shards(shards: &[Dataset]) -> Vec<usize> {
    shards.iter().enumerate().filter(|(_, s)| s.is_empty()).map(|(i, _)| i).collect()
}
