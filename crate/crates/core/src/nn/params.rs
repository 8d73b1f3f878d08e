use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// False for buffers such as batch-norm running statistics.
    pub trainable: bool,
    /// Trainable but excluded from gradients and updates for now.
    pub frozen: bool,
}

impl<T> Param<T> {
    pub fn learnable(&self) -> bool {
        self.trainable && !self.frozen
    }
}

/// Flat, ordered list of uniquely named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param {
            name,
            tensor,
            trainable,
            frozen: false,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Freezes or unfreezes every trainable tensor whose name starts with `prefix`.
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Scalar count of trainable tensors under `prefix`.
    pub fn num_trainable(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                    frozen: p.frozen,
                })
                .collect(),
        }
    }

    /// Named `f32` copies of every tensor, in store order.
    pub fn export(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.cast())).collect()
    }

    /// Overwrites tensors from `(name, tensor)` pairs.
    ///
    /// Every store tensor under `prefix` must be present with a matching shape.
    pub fn import(&mut self, tensors: &[(String, Tensor<f32>)], prefix: &str) -> Result<()> {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Mismatch(format!("checkpoint lacks tensor {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Mismatch(format!(
                    "tensor {} has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    t.shape(),
                    p.tensor.shape()
                )));
            }
            let keep = p.tensor.requires_grad();
            p.tensor = t.cast::<T>().with_requires_grad(keep);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running-stat updates, dropout.
    Train,
    /// Running statistics, no dropout; a pure function of the inputs.
    Eval,
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are copied onto the tape the first time a layer asks for them;
/// [`Session::backward`] writes the resulting gradients back into the store.
pub struct Session<'s, T: Real> {
    pub tape: Tape<T>,
    store: &'s mut ParamStore<T>,
    bound: Vec<Option<Var>>,
    mode: Mode,
    rng: Option<&'s mut ChaCha8Rng>,
}

impl<'s, T: Real> Session<'s, T> {
    pub fn new(store: &'s mut ParamStore<T>, mode: Mode, rng: Option<&'s mut ChaCha8Rng>) -> Self {
        let n = store.len();
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; n],
            mode,
            rng,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> Option<&mut ChaCha8Rng> {
        self.rng.as_deref_mut()
    }

    /// Tape variable for a parameter; learnable tensors become gradient leaves.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let v = if p.learnable() {
            self.tape.param(&p.tensor)
        } else {
            self.tape.constant(p.tensor.clone())
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    /// Backpropagates `loss` and stores gradients on every bound learnable tensor.
    pub fn backward(&mut self, loss: Var) -> Result<T> {
        self.tape.backward(loss)?;
        for (i, v) in self.bound.iter().enumerate() {
            let Some(v) = *v else { continue };
            let p = &mut self.store.params[i];
            if !p.learnable() {
                continue;
            }
            if let Some(g) = self.tape.grad(v) {
                p.tensor.set_grad(g.to_vec())?;
            }
        }
        Ok(self.tape.item(loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros([2]), true).unwrap();
        assert!(s.add("a", Tensor::zeros([2]), true).is_err());
    }

    #[test]
    fn session_writes_back_grads_for_learnable_only() {
        let mut s = ParamStore::<f64>::new();
        let a = s.add("net.a", Tensor::full([3], 2.0), true).unwrap();
        let b = s.add("net.b", Tensor::full([3], 1.0), false).unwrap();
        let c = s.add("other.c", Tensor::full([3], 3.0), true).unwrap();
        s.set_frozen("other.", true);
        let mut sess = Session::new(&mut s, Mode::Train, None);
        let (av, bv, cv) = (sess.param(a), sess.param(b), sess.param(c));
        assert_eq!(sess.param(a), av);
        let ab = sess.tape.mul(av, bv).unwrap();
        let abc = sess.tape.mul(ab, cv).unwrap();
        let l = sess.tape.sum(abc);
        assert_eq!(sess.backward(l).unwrap(), 18.0);
        assert_eq!(s.tensor(a).grad().unwrap(), &[3.0, 3.0, 3.0]);
        assert!(s.tensor(b).grad().is_none());
        assert!(s.tensor(c).grad().is_none());
    }

    #[test]
    fn import_checks_names_and_shapes() {
        let mut s = ParamStore::<f32>::new();
        s.add("p.w", Tensor::zeros([2, 2]), true).unwrap();
        s.add("q.w", Tensor::zeros([1]), true).unwrap();
        let good = vec![("p.w".to_string(), Tensor::full([2, 2], 1.0))];
        s.import(&good, "p.").unwrap();
        assert_eq!(s.tensor(ParamId(0)).data(), &[1.0; 4]);
        assert!(s.import(&good, "").is_err());
        let bad = vec![("p.w".to_string(), Tensor::full([4], 1.0))];
        assert!(s.import(&bad, "p.").is_err());
    }
}
