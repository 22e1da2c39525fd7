use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Classic momentum without dampening or Nesterov:
/// `v ← m·v + g`, `w ← w − lr·v`.
pub fn sgd_momentum_step<T: Real>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
) {
    assert!(param.len() == grad.len() && grad.len() == velocity.len());
    let lr = T::of(lr);
    let m = T::of(momentum);
    for ((w, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = m * *v + g;
        *w = *w - lr * *v;
    }
}

/// Momentum buffers for a fixed parameter list. A fresh optimizer is built
/// for every time step.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    momentum: f64,
    velocity: Vec<Vec<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(params: &[&Tensor<T>], momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Parameter(format!("momentum {momentum} outside [0, 1)")));
        }
        Ok(Sgd {
            momentum,
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        })
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update. `grads[i] == None` means a zero gradient. Every
    /// gradient is checked before any parameter is touched.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Option<&[T]>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer holds {} buffers, got {} parameters and {} gradients",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, (param, g)) in params.iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if g.len() != param.len() {
                return Err(Error::Dimension(format!(
                    "gradient of parameter {p} has {} elements, expected {}",
                    g.len(),
                    param.len()
                )));
            }
            if let Some((index, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFinite {
                    param: p,
                    index,
                    value: v.f64(),
                });
            }
        }
        for ((param, g), v) in params.into_iter().zip(grads).zip(&mut self.velocity) {
            match g {
                Some(g) => sgd_momentum_step(param.data_mut(), g, v, lr, self.momentum),
                None => {
                    let zeros = vec![T::zero(); v.len()];
                    sgd_momentum_step(param.data_mut(), &zeros, v, lr, self.momentum);
                }
            }
        }
        Ok(())
    }
}
