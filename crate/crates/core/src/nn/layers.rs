use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore, Session};
use crate::error::{Error, Result};
use crate::graph::chebyshev_conv;
use crate::tensor::{Real, SparseMatrix, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Uniform in `(-s, s)` with `s = sqrt(6 / fan_in)`.
pub fn fan_in_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let s = (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::lit(rng.gen_range(-s..s))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Adds a `[n]` bias to every row of `x` (`[.., n]`).
pub fn add_bias<T: Real>(s: &mut Session<'_, T>, x: Var, bias: Var) -> Result<Var> {
    let shape = s.tape.shape(x).to_vec();
    let n = *shape.last().ok_or_else(|| Error::shape("add_bias", &shape, &[]))?;
    if s.tape.shape(bias) != [n] {
        return Err(Error::shape("add_bias", &shape, s.tape.shape(bias)));
    }
    let rows = shape.iter().product::<usize>() / n.max(1);
    let ones = s.tape.constant(Tensor::full([rows, 1], T::one()));
    let b = s.tape.reshape(bias, [1, n])?;
    let tiled = s.tape.matmul(ones, b)?;
    let tiled = s.tape.reshape(tiled, shape)?;
    s.tape.add(x, tiled)
}

/// `y = x W + b` on `[B, n_in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub n_in: usize,
    pub n_out: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        n_in: usize,
        n_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            fan_in_uniform(&[n_in, n_out], n_in, rng),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([n_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            n_in,
            n_out,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let shape = s.tape.shape(x);
        if shape.len() != 2 || shape[1] != self.n_in {
            return Err(Error::shape("linear", shape, &[self.n_in, self.n_out]));
        }
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                add_bias(s, y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.n_in * self.n_out + if self.bias.is_some() { self.n_out } else { 0 }
    }
}

/// Per-feature batch normalization over the rows of `[N, C]`.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub features: usize,
}

impl BatchNorm1d {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, features: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([features], T::one()), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros([features]), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros([features]), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::full([features], T::one()), false)?,
            features,
        })
    }

    /// Training: batch statistics (biased variance), then running-stat update with
    /// momentum 0.1 of the same biased statistics. Eval, or a frozen `gamma`: running statistics.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        if !s.training() || s.store().get(self.gamma).frozen {
            let store = s.store();
            let mean = store.tensor(self.running_mean).data().to_vec();
            let var = store.tensor(self.running_var).data().to_vec();
            let (y, _) = s.tape.batch_norm(x, g, b, T::lit(BN_EPS), Some((&mean, &var)))?;
            return Ok(y);
        }
        let (y, stats) = s.tape.batch_norm(x, g, b, T::lit(BN_EPS), None)?;
        let stats = stats.expect("training statistics");
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let store = s.store_mut();
        for (r, v) in store
            .tensor_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&stats.mean)
        {
            *r = keep * *r + m * *v;
        }
        for (r, v) in store.tensor_mut(self.running_var).data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * *v;
        }
        Ok(y)
    }
}

/// Inverted dropout: in training, zero with probability `p` and scale survivors by `1 / (1 - p)`.
pub fn dropout<T: Real>(s: &mut Session<'_, T>, x: Var, p: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !s.training() || p == 0.0 {
        return Ok(x);
    }
    let shape = s.tape.shape(x).to_vec();
    let n = shape.iter().product();
    let keep = T::lit(1.0 / (1.0 - p));
    let rng = s
        .rng()
        .ok_or_else(|| Error::Config("training-mode dropout needs a random generator".into()))?;
    let mask: Vec<T> = (0..n)
        .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
        .collect();
    let m = s.tape.constant_from(shape, mask)?;
    s.tape.mul(x, m)
}

pub fn relu_dropout<T: Real>(s: &mut Session<'_, T>, x: Var, p: f64) -> Result<Var> {
    let r = s.tape.relu(x);
    dropout(s, r, p)
}

/// Chebyshev graph convolution with learnable `Θ: [K, f_in, f_out]`.
#[derive(Clone, Debug)]
pub struct ChebConv {
    pub theta: ParamId,
    pub bias: Option<ParamId>,
    pub order: usize,
    pub f_in: usize,
    pub f_out: usize,
}

impl ChebConv {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        order: usize,
        f_in: usize,
        f_out: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("Chebyshev order K must be >= 1".into()));
        }
        let theta = store.add(
            format!("{name}.theta"),
            fan_in_uniform(&[order, f_in, f_out], order * f_in, rng),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([f_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            theta,
            bias,
            order,
            f_in,
            f_out,
        })
    }

    /// `x`: `[B, V, f_in]` -> `[B, V, f_out]`.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, lap: &Rc<SparseMatrix<T>>) -> Result<Var> {
        let theta = s.param(self.theta);
        let y = chebyshev_conv(&mut s.tape, x, lap, theta)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                add_bias(s, y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.order * self.f_in * self.f_out + if self.bias.is_some() { self.f_out } else { 0 }
    }
}

/// Chebyshev conv, batch norm over all `B * V` rows, ReLU.
#[derive(Clone, Debug)]
pub struct GraphConvBlock {
    pub conv: ChebConv,
    pub bn: BatchNorm1d,
}

impl GraphConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        order: usize,
        f_in: usize,
        f_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            conv: ChebConv::new(store, &format!("{name}.conv"), order, f_in, f_out, false, rng)?,
            bn: BatchNorm1d::new(store, &format!("{name}.bn"), f_out)?,
        })
    }

    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, lap: &Rc<SparseMatrix<T>>) -> Result<Var> {
        let y = self.conv.forward(s, x, lap)?;
        let shape = s.tape.shape(y).to_vec();
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        let flat = s.tape.reshape(y, [rows, self.conv.f_out])?;
        let n = self.bn.forward(s, flat)?;
        let r = s.tape.relu(n);
        s.tape.reshape(r, shape)
    }

    pub fn num_params(&self) -> usize {
        self.conv.num_params() + 2 * self.conv.f_out
    }
}
