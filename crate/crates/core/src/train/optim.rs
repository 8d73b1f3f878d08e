use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Real;

pub const RMSPROP_ALPHA: f64 = 0.99;
pub const RMSPROP_EPS: f64 = 1e-8;

/// Squared-gradient accumulators, one per store tensor.
#[derive(Clone, Debug)]
pub struct RmspropState<T> {
    pub alpha: T,
    pub eps: T,
    pub lr: T,
    accum: Vec<Option<Vec<T>>>,
}

impl<T: Real> RmspropState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            alpha: T::lit(RMSPROP_ALPHA),
            eps: T::lit(RMSPROP_EPS),
            lr: T::lit(lr),
            accum: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = T::lit(lr);
    }

    pub fn accumulator(&self, index: usize) -> Option<&[T]> {
        self.accum.get(index).and_then(|a| a.as_deref())
    }
}

/// One update of every learnable tensor:
/// `v <- a v + (1 - a) g^2`, `theta <- theta - lr g / (sqrt(v) + eps)`. Gradients are consumed.
pub fn rmsprop_step<T: Real>(store: &mut ParamStore<T>, state: &mut RmspropState<T>) -> Result<()> {
    if state.accum.len() < store.len() {
        state.accum.resize(store.len(), None);
    }
    // Check first so a missing gradient leaves every tensor untouched.
    if let Some((_, p)) = store.iter().find(|(_, p)| p.learnable() && p.tensor.grad().is_none()) {
        return Err(Error::MissingGrad(p.name.clone()));
    }
    let (alpha, eps, lr) = (state.alpha, state.eps, state.lr);
    let one_minus = T::one() - alpha;
    for (id, p) in store.iter_mut() {
        if !p.learnable() {
            continue;
        }
        let g = p.tensor.take_grad().expect("checked above");
        let v = state.accum[id.index()].get_or_insert_with(|| vec![T::zero(); g.len()]);
        for ((theta, vi), gi) in p.tensor.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
            *vi = alpha * *vi + one_minus * *gi * *gi;
            *theta -= lr * *gi / (vi.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate at a 1-based epoch: `base` through `decay_epoch`, `base / factor` after.
pub fn lr_at(epoch: usize, base: f64, decay_epoch: usize, factor: f64) -> f64 {
    if epoch > decay_epoch {
        base / factor
    } else {
        base
    }
}
