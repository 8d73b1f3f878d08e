use rand_chacha::ChaCha8Rng;

use super::layers::{relu_dropout, BatchNorm1d, Linear};
use super::params::{ParamStore, Session};
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

/// `x + drop(relu(bn(fc(drop(relu(bn(fc(x))))))))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub fc1: Linear,
    pub bn1: BatchNorm1d,
    pub fc2: Linear,
    pub bn2: BatchNorm1d,
}

impl ResidualBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), width, width, true, rng)?,
            bn1: BatchNorm1d::new(store, &format!("{name}.bn1"), width)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), width, width, true, rng)?,
            bn2: BatchNorm1d::new(store, &format!("{name}.bn2"), width)?,
        })
    }

    fn forward<T: Real>(&self, s: &mut Session<'_, T>, x: Var, p: f64) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = self.bn1.forward(s, h)?;
        let h = relu_dropout(s, h, p)?;
        let h = self.fc2.forward(s, h)?;
        let h = self.bn2.forward(s, h)?;
        let h = relu_dropout(s, h, p)?;
        s.tape.add(x, h)
    }
}

/// Lifts a normalized 2D pose to a root-relative 3D pose.
#[derive(Clone, Debug)]
pub struct PoseNet {
    pub input: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub output: Linear,
    pub num_joints: usize,
    pub root_index: usize,
    pub dropout: f64,
    /// Millimeters per output unit.
    pub coord_scale: f64,
}

impl PoseNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        num_joints: usize,
        root_index: usize,
        hidden: usize,
        dropout: f64,
        coord_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if root_index >= num_joints {
            return Err(Error::IndexOutOfRange {
                what: "root joint",
                index: root_index,
                len: num_joints,
            });
        }
        Ok(Self {
            input: Linear::new(store, &format!("{name}.input"), 2 * num_joints, hidden, true, rng)?,
            blocks: (0..2)
                .map(|i| ResidualBlock::new(store, &format!("{name}.block{i}"), hidden, rng))
                .collect::<Result<_>>()?,
            output: Linear::new(store, &format!("{name}.output"), hidden, 3 * num_joints, true, rng)?,
            num_joints,
            root_index,
            dropout,
            coord_scale,
        })
    }

    /// `[B, 2J]` normalized 2D pose -> `[B, J, 3]` root-relative pose in mm.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, p2d_norm: Var) -> Result<Var> {
        let shape = s.tape.shape(p2d_norm).to_vec();
        if shape.len() != 2 || shape[1] != 2 * self.num_joints {
            return Err(Error::shape("posenet", &shape, &[0, 2 * self.num_joints]));
        }
        let b = shape[0];
        let mut h = self.input.forward(s, p2d_norm)?;
        for block in &self.blocks {
            h = block.forward(s, h, self.dropout)?;
        }
        let out = self.output.forward(s, h)?;
        let out = s.tape.scale(out, T::lit(self.coord_scale));
        let out = s.tape.reshape(out, [b, self.num_joints, 3])?;
        let root = s.tape.gather(out, 1, &vec![self.root_index; self.num_joints])?;
        s.tape.sub(out, root)
    }
}
