use super::param::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
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

/// Optimizer hyper-parameters plus the adaptive moment buffers (Adam only).
#[derive(Clone, Debug)]
pub struct OptimState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    kind: OptimizerKind,
    moments: Option<Vec<(Vec<f64>, Vec<f64>)>>,
    step: u64,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, learning_rate: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and weight decay non-negative (got {learning_rate}, {weight_decay})"
            )));
        }
        Ok(OptimState {
            learning_rate,
            weight_decay,
            kind,
            moments: None,
            step: 0,
        })
    }

    pub fn sgd(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::Sgd, learning_rate, weight_decay)
    }

    pub fn adam(learning_rate: f64, weight_decay: f64) -> Result<Self> {
        Self::new(OptimizerKind::adam(), learning_rate, weight_decay)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn has_moments(&self) -> bool {
        self.moments.is_some()
    }
}

/// Applies one update to every trainable parameter and clears all gradients.
///
/// Weight decay is the coupled L2 form: `grad += weight_decay * param`.
pub fn optimizer_step(params: &mut ParamStore, state: &mut OptimState) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.trainable && p.grad.is_none()) {
        return Err(Error::InvalidArgument(format!("parameter {} has no gradient", p.name)));
    }
    state.step += 1;
    let (lr, wd) = (state.learning_rate, state.weight_decay);
    match state.kind {
        OptimizerKind::Sgd => {
            for p in params.iter_mut().filter(|p| p.trainable) {
                let g = p.grad.take().expect("checked above");
                for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * (g + wd * *w);
                }
            }
        }
        OptimizerKind::Adam { beta1, beta2, eps } => {
            let moments = state.moments.get_or_insert_with(|| {
                params
                    .iter()
                    .map(|p| {
                        let n = if p.trainable { p.value.numel() } else { 0 };
                        (vec![0.0; n], vec![0.0; n])
                    })
                    .collect()
            });
            let t = state.step as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            for (p, (m, v)) in params.iter_mut().zip(moments.iter_mut()) {
                if !p.trainable {
                    continue;
                }
                let g = p.grad.take().expect("checked above");
                for (i, (w, g)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                    let g = g + wd * *w;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                    *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
    params.clear_grads();
    Ok(())
}
