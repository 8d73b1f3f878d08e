use std::rc::Rc;

use crate::data::{normalize_2d_pose, MeshTemplate, PoseSample};
use crate::error::{Error, Result};
use crate::losses::{mesh_loss_parts, pose_loss, total_mesh_loss, LossWeights};
use crate::nn::{Nets, Session};
use crate::tensor::{Real, SparseMatrix, Tensor, Var};

/// Network-ready tensors for a list of samples.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, J, 2]`, per-instance normalized.
    pub p2d: Tensor<T>,
    /// `[B, J, 3]` mm.
    pub pose3d: Tensor<T>,
    /// `[B, V, 3]` mm.
    pub mesh: Option<Tensor<T>>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.p2d.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stacks samples into a batch; `inputs_2d[i]` replaces `samples[i].pose2d` as network input.
pub fn assemble_batch<T: Real>(
    samples: &[&PoseSample],
    inputs_2d: &[Vec<[f64; 2]>],
    with_mesh: bool,
) -> Result<Batch<T>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if samples.len() != inputs_2d.len() {
        return Err(Error::shape("assemble_batch", &[samples.len()], &[inputs_2d.len()]));
    }
    let b = samples.len();
    let j = samples[0].pose3d_gt.len();
    let mut p2d = Vec::with_capacity(b * j * 2);
    let mut pose3d = Vec::with_capacity(b * j * 3);
    let nv = if with_mesh {
        samples[0]
            .mesh_gt
            .as_ref()
            .ok_or_else(|| Error::Config("sample has no groundtruth mesh".into()))?
            .len()
    } else {
        0
    };
    let mut mesh = Vec::with_capacity(b * nv * 3);
    for (s, input) in samples.iter().zip(inputs_2d) {
        if s.pose3d_gt.len() != j || input.len() != j {
            return Err(Error::shape(
                "assemble_batch",
                &[j],
                &[s.pose3d_gt.len().min(input.len())],
            ));
        }
        let (norm, _) = normalize_2d_pose(input)?;
        p2d.extend(norm.iter().flatten().map(|&v| T::lit(v)));
        pose3d.extend(s.pose3d_gt.iter().flatten().map(|&v| T::lit(v)));
        if with_mesh {
            let m = s
                .mesh_gt
                .as_ref()
                .ok_or_else(|| Error::Config("sample has no groundtruth mesh".into()))?;
            if m.len() != nv {
                return Err(Error::shape("assemble_batch", &[nv], &[m.len()]));
            }
            mesh.extend(m.iter().flatten().map(|&v| T::lit(v)));
        }
    }
    Ok(Batch {
        p2d: Tensor::new([b, j, 2], p2d)?,
        pose3d: Tensor::new([b, j, 3], pose3d)?,
        mesh: if with_mesh {
            Some(Tensor::new([b, nv, 3], mesh)?)
        } else {
            None
        },
    })
}

/// Template-derived constants of the mesh losses.
#[derive(Clone, Debug)]
pub struct MeshContext<T> {
    pub regressor: Rc<SparseMatrix<T>>,
    pub faces: Vec<[usize; 3]>,
    pub root_index: usize,
}

impl<T: Real> MeshContext<T> {
    pub fn new(template: &MeshTemplate) -> Result<Self> {
        Ok(Self {
            regressor: Rc::new(SparseMatrix::from_dense(
                template.num_joints(),
                template.num_vertices(),
                &template.regressor_dense(),
            )?),
            faces: template.faces.clone(),
            root_index: template.root_index,
        })
    }
}

/// Where MeshNet's 3D pose input comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoseSource {
    PoseNet,
    Groundtruth,
}

/// Tape outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[B, J, 3]`: PoseNet output, or the groundtruth pose when bypassed.
    pub pose: Var,
    pub mesh: Option<Var>,
}

pub fn forward_batch<T: Real>(
    s: &mut Session<'_, T>,
    nets: &Nets<'_>,
    batch: &Batch<T>,
    with_mesh: bool,
    source: PoseSource,
) -> Result<Forward> {
    let b = batch.len();
    let j = nets.posenet.num_joints;
    let p2d = s.input(batch.p2d.clone());
    let pose = match source {
        PoseSource::PoseNet => {
            let flat = s.tape.reshape(p2d, [b, 2 * j])?;
            nets.posenet.forward(s, flat)?
        }
        PoseSource::Groundtruth => s.input(batch.pose3d.clone()),
    };
    let mesh = if with_mesh {
        Some(nets.meshnet()?.forward(s, p2d, pose)?)
    } else {
        None
    };
    Ok(Forward { pose, mesh })
}

/// Loss component values of one step. Mesh terms are `None` in stage one.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub pose: Option<f64>,
    pub vertex: Option<f64>,
    pub joint: Option<f64>,
    pub normal: Option<f64>,
    pub edge: Option<f64>,
    pub total: f64,
}

/// Stage-one objective: `L_pose` of PoseNet.
pub fn pose_objective<T: Real>(s: &mut Session<'_, T>, nets: &Nets<'_>, batch: &Batch<T>) -> Result<(Var, LossValues)> {
    let f = forward_batch(s, nets, batch, false, PoseSource::PoseNet)?;
    let gt = s.input(batch.pose3d.clone());
    let l = pose_loss(&mut s.tape, f.pose, gt)?;
    let v = s.tape.item(l).as_f64();
    Ok((
        l,
        LossValues {
            pose: Some(v),
            total: v,
            ..LossValues::default()
        },
    ))
}

/// Stage-two objective: weighted mesh loss (edge term gated by `epoch`) plus,
/// optionally, `pose_weight * L_pose`.
pub fn full_objective<T: Real>(
    s: &mut Session<'_, T>,
    nets: &Nets<'_>,
    batch: &Batch<T>,
    ctx: &MeshContext<T>,
    weights: &LossWeights,
    epoch: usize,
    include_pose: bool,
) -> Result<(Var, LossValues)> {
    let f = forward_batch(s, nets, batch, true, PoseSource::PoseNet)?;
    let mesh = f.mesh.expect("mesh requested");
    let gt_mesh = s.input(
        batch
            .mesh
            .clone()
            .ok_or_else(|| Error::Config("batch has no groundtruth mesh".into()))?,
    );
    let gt_pose = s.input(batch.pose3d.clone());
    let parts = mesh_loss_parts(&mut s.tape, mesh, gt_mesh, gt_pose, &ctx.regressor, &ctx.faces)?;
    let mut total = total_mesh_loss(&mut s.tape, &parts, weights, epoch)?;
    let item = |s: &Session<'_, T>, v: Var| s.tape.item(v).as_f64();
    let mut values = LossValues {
        vertex: Some(item(s, parts.vertex)),
        joint: Some(item(s, parts.joint)),
        normal: Some(item(s, parts.normal)),
        edge: Some(item(s, parts.edge)),
        ..LossValues::default()
    };
    if include_pose {
        let lp = pose_loss(&mut s.tape, f.pose, gt_pose)?;
        values.pose = Some(item(s, lp));
        total = s.tape.add(total, lp)?;
    }
    values.total = item(s, total);
    Ok((total, values))
}
