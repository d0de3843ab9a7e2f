use super::mlp::{MlpGrads, MlpParams};
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

/// One heavy-ball step on flat slices: `v <- momentum*v + g; w <- w - lr*v`.
pub fn sgd_update(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64) {
    for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
}

/// SGD with optional momentum. Velocities live in the optimizer and
/// persist across [`Sgd::step`] calls.
#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<MlpGrads>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(invalid(format!("learning rate must be > 0, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFinite { op: "sgd_step" });
        }
        check_layout(params, grads)?;
        let velocity = self
            .velocity
            .get_or_insert_with(|| MlpGrads::zeros_like(params));
        check_layout(params, velocity)?;
        let (lr, m) = (self.lr, self.momentum);
        for (l, g) in grads.weights.iter().enumerate() {
            sgd_update(
                params.weights_mut()[l].data_mut(),
                velocity.weights[l].data_mut(),
                g.data(),
                lr,
                m,
            );
        }
        for (l, g) in grads.biases.iter().enumerate() {
            sgd_update(
                params.biases_mut()[l].data_mut(),
                velocity.biases[l].data_mut(),
                g.data(),
                lr,
                m,
            );
        }
        Ok(())
    }
}

fn check_layout(params: &MlpParams, grads: &MlpGrads) -> Result<()> {
    let same = |a: &[Tensor], b: &[Tensor]| {
        a.len() == b.len()
            && a.iter()
                .zip(b)
                .all(|(x, y)| x.rows() == y.rows() && x.cols() == y.cols())
    };
    if !same(params.weights(), &grads.weights) || !same(params.biases(), &grads.biases) {
        return Err(invalid("gradient layout does not match parameters"));
    }
    Ok(())
}
