//! Training-dynamics diagnostics.
//!
//! Magnitude Gradient (MG) is the squared norm of the round-to-round
//! parameter change. Effective Perturbation (EP) is the norm of the summed
//! changes over a sliding window divided by the sum of their norms; it lies
//! in `[0, 1]` and equals one only for positively collinear updates.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::model::ParamSet;

/// Default EP window, in rounds.
pub const DEFAULT_EP_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Model,
    Layer(usize),
}

fn scoped<'a>(p: &'a ParamSet, scope: Scope) -> Result<&'a [f64]> {
    match scope {
        Scope::Model => Ok(p.as_slice()),
        Scope::Layer(l) if l < p.topology().num_layers() => Ok(p.layer(l)),
        Scope::Layer(l) => Err(Error::Shape(format!("no layer {l}"))),
    }
}

/// `‖a − b‖²`.
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn magnitude_gradient(current: &ParamSet, previous: &ParamSet, scope: Scope) -> Result<f64> {
    current.check_same(previous)?;
    Ok(squared_distance(scoped(current, scope)?, scoped(previous, scope)?))
}

/// EP of a sequence of deltas; `None` when every delta is zero.
pub fn effective_perturbation<D: AsRef<[f64]>>(deltas: &[D]) -> Option<f64> {
    let first = deltas.first()?.as_ref();
    let mut sum = vec![0.0; first.len()];
    let mut norms = 0.0;
    for d in deltas {
        let d = d.as_ref();
        norms += d.iter().map(|v| v * v).sum::<f64>().sqrt();
        sum.iter_mut().zip(d).for_each(|(s, v)| *s += v);
    }
    if norms == 0.0 {
        return None;
    }
    let ep = sum.iter().map(|v| v * v).sum::<f64>().sqrt() / norms;
    Some(ep.min(1.0))
}

/// Ring buffer of the most recent deltas.
#[derive(Debug, Clone)]
pub struct UpdateWindow {
    capacity: usize,
    deltas: VecDeque<Vec<f64>>,
}

impl UpdateWindow {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidArgument("EP window must be >= 1".into()));
        }
        Ok(Self { capacity, deltas: VecDeque::with_capacity(capacity) })
    }

    pub fn push(&mut self, delta: Vec<f64>) -> Result<()> {
        if let Some(front) = self.deltas.front() {
            if front.len() != delta.len() {
                return Err(Error::Shape("delta length changed within window".into()));
            }
        }
        if self.deltas.len() == self.capacity {
            self.deltas.pop_front();
        }
        self.deltas.push_back(delta);
        Ok(())
    }

    pub fn is_full(&self) -> bool {
        self.deltas.len() == self.capacity
    }

    /// EP over the window; absent until the window is full or when every
    /// delta is zero.
    pub fn effective_perturbation(&self) -> Option<f64> {
        if !self.is_full() {
            return None;
        }
        let v: Vec<&Vec<f64>> = self.deltas.iter().collect();
        effective_perturbation(&v)
    }
}

/// MG and EP for one round, model-wide and per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsSnapshot {
    pub mg: f64,
    pub ep: Option<f64>,
    pub layer_mg: Vec<f64>,
    pub layer_ep: Vec<Option<f64>>,
}

/// Tracks model-level and layer-level windows across rounds.
#[derive(Debug, Clone)]
pub struct DynamicsTracker {
    model: UpdateWindow,
    layers: Vec<UpdateWindow>,
}

impl DynamicsTracker {
    pub fn new(num_layers: usize, window: usize) -> Result<Self> {
        Ok(Self {
            model: UpdateWindow::new(window)?,
            layers: (0..num_layers).map(|_| UpdateWindow::new(window)).collect::<Result<_>>()?,
        })
    }

    pub fn observe(&mut self, previous: &ParamSet, current: &ParamSet) -> Result<DynamicsSnapshot> {
        let delta = current.sub(previous)?;
        let mg = delta.as_slice().iter().map(|v| v * v).sum();
        let mut layer_mg = Vec::with_capacity(self.layers.len());
        let mut layer_ep = Vec::with_capacity(self.layers.len());
        for (l, window) in self.layers.iter_mut().enumerate() {
            let d = delta.layer(l);
            layer_mg.push(d.iter().map(|v| v * v).sum());
            window.push(d.to_vec())?;
            layer_ep.push(window.effective_perturbation());
        }
        self.model.push(delta.into_vec())?;
        Ok(DynamicsSnapshot { mg, ep: self.model.effective_perturbation(), layer_mg, layer_ep })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Topology};

    #[test]
    fn mg_examples() {
        let t = Topology::new(vec![2, 3, 2]).unwrap();
        let a = init_params(&t, 1);
        assert_eq!(magnitude_gradient(&a, &a, Scope::Model).unwrap(), 0.0);
        let mut b = a.clone();
        b.as_mut_slice()[4] += 2.0;
        assert_eq!(magnitude_gradient(&b, &a, Scope::Model).unwrap(), 4.0);
        assert!(magnitude_gradient(&b, &a, Scope::Layer(5)).is_err());
    }

    #[test]
    fn model_mg_is_sum_of_layer_mg() {
        let t = Topology::new(vec![5, 7, 4, 3]).unwrap();
        let a = init_params(&t, 1);
        let b = init_params(&t, 2);
        let total = magnitude_gradient(&b, &a, Scope::Model).unwrap();
        let layers: f64 = (0..3).map(|l| magnitude_gradient(&b, &a, Scope::Layer(l)).unwrap()).sum();
        assert!((total - layers).abs() < 1e-12);
    }

    #[test]
    fn ep_canonical_cases() {
        let d = vec![1.0, -2.0, 0.5];
        assert!((effective_perturbation(&[d.clone(), d.clone(), d.clone()]).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = d.iter().map(|v| -v).collect();
        assert_eq!(effective_perturbation(&[d.clone(), neg]).unwrap(), 0.0);
        let ep = effective_perturbation(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((ep - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert_eq!(effective_perturbation(&[vec![0.0; 3], vec![0.0; 3]]), None);
        assert_eq!(effective_perturbation::<Vec<f64>>(&[]), None);
    }

    #[test]
    fn window_fills_before_reporting() {
        let mut w = UpdateWindow::new(3).unwrap();
        w.push(vec![1.0]).unwrap();
        w.push(vec![1.0]).unwrap();
        assert_eq!(w.effective_perturbation(), None);
        w.push(vec![1.0]).unwrap();
        assert_eq!(w.effective_perturbation(), Some(1.0));
        w.push(vec![-1.0]).unwrap();
        // window now (1, 1, -1)
        assert!((w.effective_perturbation().unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(w.push(vec![1.0, 2.0]).is_err());
        assert!(UpdateWindow::new(0).is_err());
    }

    #[test]
    fn tracker_reports_layers() {
        let t = Topology::new(vec![3, 4, 2]).unwrap();
        let mut tr = DynamicsTracker::new(2, 1).unwrap();
        let a = init_params(&t, 1);
        let b = init_params(&t, 2);
        let s = tr.observe(&a, &b).unwrap();
        assert_eq!(s.ep, Some(1.0));
        assert!((s.mg - s.layer_mg.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(s.layer_ep.len(), 2);
    }
}
