use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{ChebConv, GraphConvBlock, Linear};
use super::params::{ParamStore, Session};
use crate::coarsen::{graclus_coarsen, CoarseningHierarchy};
use crate::data::MeshTemplate;
use crate::error::{Error, Result};
use crate::graph::ScaledLaplacian;
use crate::tensor::{Real, SparseMatrix, Var};

/// Where each mesh level's additive skip comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// Output of the level's first block added to the output of its second.
    #[default]
    WithinLevel,
    /// Level input (upsampled from the coarser level, projected if widths differ)
    /// added to the output of the level's second block.
    AcrossLevel,
}

/// Two graph-conv blocks on one mesh level.
#[derive(Clone, Debug)]
pub struct MeshStage {
    pub level: usize,
    pub block1: GraphConvBlock,
    pub block2: GraphConvBlock,
    pub proj: Option<Linear>,
}

/// Graph-convolutional mesh regressor from a 2D+3D pose.
#[derive(Clone, Debug)]
pub struct MeshNet {
    pub pose_blocks: Vec<GraphConvBlock>,
    pub lift: Linear,
    pub stages: Vec<MeshStage>,
    pub head: ChebConv,
    pub hierarchy: CoarseningHierarchy,
    pub pose_laplacian: ScaledLaplacian,
    pub widths: Vec<usize>,
    pub residual: ResidualMode,
    pub num_joints: usize,
    pub coord_scale: f64,
}

/// Expands or truncates `widths` to `n` entries by repeating the last one.
pub fn resolve_widths(widths: &[usize], n: usize) -> Result<Vec<usize>> {
    let last = *widths
        .last()
        .ok_or_else(|| Error::Config("widths must not be empty".into()))?;
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::Config("widths must be positive".into()));
    }
    if widths.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Config(format!("widths {widths:?} must be non-increasing")));
    }
    Ok((0..n).map(|i| widths.get(i).copied().unwrap_or(last)).collect())
}

struct Operators<T> {
    pose: Rc<SparseMatrix<T>>,
    levels: Vec<Rc<SparseMatrix<T>>>,
}

impl MeshNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        template: &MeshTemplate,
        widths: &[usize],
        order: usize,
        levels: usize,
        coarsen_seed: u64,
        residual: ResidualMode,
        coord_scale: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let hierarchy = graclus_coarsen(&template.mesh_graph()?, levels, coarsen_seed)?;
        let pose_laplacian = ScaledLaplacian::new(&template.pose_graph()?);
        let widths = resolve_widths(widths, levels + 1)?;
        let j = template.num_joints();
        let w0 = widths[0];
        let pose_blocks = vec![
            GraphConvBlock::new(store, &format!("{name}.pose0"), order, 5, w0, rng)?,
            GraphConvBlock::new(store, &format!("{name}.pose1"), order, w0, w0, rng)?,
        ];
        let coarse = hierarchy.level_size(levels);
        let lift = Linear::new(store, &format!("{name}.lift"), j * w0, coarse * w0, true, rng)?;
        let mut stages = Vec::with_capacity(levels + 1);
        let mut f_in = w0;
        for (i, &w) in widths.iter().enumerate() {
            let level = levels - i;
            let stage_name = format!("{name}.level{level}");
            let proj = if residual == ResidualMode::AcrossLevel && f_in != w {
                Some(Linear::new(store, &format!("{stage_name}.proj"), f_in, w, false, rng)?)
            } else {
                None
            };
            stages.push(MeshStage {
                level,
                block1: GraphConvBlock::new(store, &format!("{stage_name}.block1"), order, f_in, w, rng)?,
                block2: GraphConvBlock::new(store, &format!("{stage_name}.block2"), order, w, w, rng)?,
                proj,
            });
            f_in = w;
        }
        let head = ChebConv::new(store, &format!("{name}.head"), order, f_in, 3, true, rng)?;
        Ok(Self {
            pose_blocks,
            lift,
            stages,
            head,
            hierarchy,
            pose_laplacian,
            widths,
            residual,
            num_joints: j,
            coord_scale,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.hierarchy.num_original()
    }

    fn operators<T: Real>(&self) -> Operators<T> {
        Operators {
            pose: Rc::new(self.pose_laplacian.sparse().cast()),
            levels: (0..=self.hierarchy.num_coarsenings())
                .map(|c| Rc::new(self.hierarchy.laplacian(c).sparse().cast()))
                .collect(),
        }
    }

    /// `p2d_norm: [B, J, 2]`, `p3d: [B, J, 3]` in mm -> `[B, V, 3]` in mm.
    pub fn forward<T: Real>(&self, s: &mut Session<'_, T>, p2d_norm: Var, p3d: Var) -> Result<Var> {
        let j = self.num_joints;
        let s2 = s.tape.shape(p2d_norm).to_vec();
        let s3 = s.tape.shape(p3d).to_vec();
        if s2.len() != 3 || s2[1] != j || s2[2] != 2 || s3 != [s2[0], j, 3] {
            return Err(Error::shape("meshnet", &s2, &s3));
        }
        let b = s2[0];
        let ops = self.operators::<T>();
        let p3 = s.tape.scale(p3d, T::lit(1.0 / self.coord_scale));
        let mut x = s.tape.concat(&[p2d_norm, p3], 2)?;
        for block in &self.pose_blocks {
            x = block.forward(s, x, &ops.pose)?;
        }
        let flat = s.tape.reshape(x, [b, j * self.widths[0]])?;
        let lifted = self.lift.forward(s, flat)?;
        let coarse = self.hierarchy.level_size(self.hierarchy.num_coarsenings());
        x = s.tape.reshape(lifted, [b, coarse, self.widths[0]])?;
        for stage in &self.stages {
            let lap = &ops.levels[stage.level];
            let h1 = stage.block1.forward(s, x, lap)?;
            let h2 = stage.block2.forward(s, h1, lap)?;
            let out = match self.residual {
                ResidualMode::WithinLevel => s.tape.add(h1, h2)?,
                ResidualMode::AcrossLevel => {
                    let skip = match &stage.proj {
                        Some(p) => {
                            let shape = s.tape.shape(x).to_vec();
                            let rows = shape[0] * shape[1];
                            let flat = s.tape.reshape(x, [rows, shape[2]])?;
                            let y = p.forward(s, flat)?;
                            s.tape.reshape(y, [shape[0], shape[1], p.n_out])?
                        }
                        None => x,
                    };
                    s.tape.add(h2, skip)?
                }
            };
            x = if stage.level > 0 {
                self.hierarchy.upsample(&mut s.tape, out, stage.level - 1)?
            } else {
                out
            };
        }
        let y = self.head.forward(s, x, &ops.levels[0])?;
        let y = s.tape.scale(y, T::lit(self.coord_scale));
        self.hierarchy.apply_perm(&mut s.tape, y)
    }

    /// Trainable scalars.
    pub fn num_params(&self) -> usize {
        let stages: usize = self
            .stages
            .iter()
            .map(|st| st.block1.num_params() + st.block2.num_params() + st.proj.as_ref().map_or(0, Linear::num_params))
            .sum();
        self.pose_blocks.iter().map(GraphConvBlock::num_params).sum::<usize>()
            + self.lift.num_params()
            + stages
            + self.head.num_params()
    }

    /// Trainable scalars of the same layer sequence with every graph convolution
    /// replaced by a dense layer over the flattened vertex features.
    pub fn fc_equivalent_params(&self) -> usize {
        let dense = |v: usize, fi: usize, fo: usize| v * fi * v * fo + v * fo;
        let j = self.num_joints;
        let w0 = self.widths[0];
        let mut n = dense(j, 5, w0) + dense(j, w0, w0) + self.lift.num_params();
        let mut f_in = w0;
        for st in &self.stages {
            let v = self.hierarchy.level_size(st.level);
            let w = st.block1.conv.f_out;
            n += dense(v, f_in, w) + dense(v, w, w);
            f_in = w;
        }
        n + dense(self.hierarchy.level_size(0), f_in, 3)
    }
}
