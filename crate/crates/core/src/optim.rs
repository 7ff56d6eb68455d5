//! Classical momentum SGD: `v <- mu * v + g; p <- p - lr * v`.

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub momentum: f64,
    pub learning_rate: f64,
    velocities: Vec<Vec<T>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, momentum: f64, learning_rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("sgd", format!("momentum {momentum} outside [0, 1)")));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid("sgd", format!("learning rate {learning_rate} must be positive")));
        }
        let velocities = params
            .iter()
            .map(|(_, _, t)| vec![T::zero(); t.numel()])
            .collect();
        Ok(Self {
            momentum,
            learning_rate,
            velocities,
        })
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        &self.velocities[index]
    }

    pub fn velocity_mut(&mut self, index: usize) -> &mut [T] {
        &mut self.velocities[index]
    }

    pub fn len(&self) -> usize {
        self.velocities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocities.is_empty()
    }

    /// One update over every parameter holding a gradient. Parameters with
    /// `grad == None` are left untouched, velocity included.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if params.len() != self.velocities.len() {
            return Err(invalid(
                "sgd",
                format!("{} velocities for {} parameters", self.velocities.len(), params.len()),
            ));
        }
        let (mu, lr) = (self.momentum, self.learning_rate);
        for id in params.ids().collect::<Vec<_>>() {
            let vel = &mut self.velocities[id.index()];
            let t = params.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            if grad.len() != vel.len() {
                return Err(invalid("sgd", "gradient and velocity sizes differ"));
            }
            for ((p, v), g) in t.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                let nv = mu * v.to_f64() + g.to_f64();
                *v = T::from_f64(nv);
                *p = T::from_f64(p.to_f64() - lr * nv);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}
