use crate::error::{Result, TensorError};
use crate::params::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Adaptive moments with bias correction.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Applies gradient updates to a [`ParamSet`] and zeroes its grad slots.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    moments: Vec<Option<Moments>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            steps: 0,
            moments: Vec::new(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        let any = params
            .iter()
            .any(|(_, e)| e.trainable && e.grad.is_some());
        if !any {
            return Err(TensorError::MissingGradients);
        }
        self.steps += 1;
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        let t = self.steps as i32;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let (trainable, grad) = {
                let e = params.entry(id);
                (e.trainable, e.grad.as_ref().map(|g| g.data().to_vec()))
            };
            let Some(grad) = grad else { continue };
            if !trainable {
                continue;
            }
            let w = params.get_mut(id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (x, g) in w.iter_mut().zip(&grad) {
                        *x -= self.lr * g;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let mom = self.moments[id.index()].get_or_insert_with(|| Moments {
                        m: vec![0.0; grad.len()],
                        v: vec![0.0; grad.len()],
                    });
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..w.len() {
                        let g = grad[i];
                        mom.m[i] = beta1 * mom.m[i] + (1.0 - beta1) * g;
                        mom.v[i] = beta2 * mom.v[i] + (1.0 - beta2) * g * g;
                        let mhat = mom.m[i] / bc1;
                        let vhat = mom.v[i] / bc2;
                        w[i] -= self.lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        params.zero_grad();
        Ok(())
    }
}
