//! SGD with heavy-ball momentum and mask re-projection.

use crate::error::{Error, Result};
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    /// One velocity buffer per layer; empty until the first step.
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Vec<f64>>) {
        self.velocity = velocity;
    }

    /// `v ← μ·v + g; W ← W − η·v; W ← W ⊙ Γ`.
    pub fn step(&mut self, model: &mut Model, grads: &[Option<Tensor>]) -> Result<()> {
        let count = model.layers().len();
        if grads.len() != count {
            return Err(Error::InvalidArgument(format!(
                "{} gradient slots for {count} layers",
                grads.len()
            )));
        }
        if self.velocity.len() != count {
            self.velocity = model.layers().iter().map(|l| vec![0.0; l.weights.len()]).collect();
        }
        for (idx, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let layer = model.layer_mut(idx);
            if grad.shape() != layer.weights.shape() {
                return Err(Error::ShapeMismatch {
                    layer: idx,
                    expected: format!("{:?}", layer.weights.shape()),
                    found: format!("{:?}", grad.shape()),
                });
            }
            let v = &mut self.velocity[idx];
            for ((w, vi), g) in layer.weights.data_mut().iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = self.momentum * *vi + g;
                *w -= self.lr * *vi;
            }
            layer.project();
        }
        Ok(())
    }
}
