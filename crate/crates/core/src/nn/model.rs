use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::meshnet::{MeshNet, ResidualMode};
use super::params::{Mode, ParamStore, Session};
use super::posenet::PoseNet;
use crate::data::{Checkpoint, MeshTemplate};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const POSENET: &str = "posenet";
pub const MESHNET: &str = "meshnet";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// PoseNet hidden width.
    pub hidden: usize,
    pub dropout: f64,
    /// MeshNet feature width per level, coarsest first.
    pub widths: Vec<usize>,
    /// Chebyshev order K.
    pub cheb_order: usize,
    /// Number of coarsening steps C.
    pub levels: usize,
    pub coarsen_seed: u64,
    pub residual: ResidualMode,
    /// Millimeters per network output unit; 3D inputs are divided by it.
    pub coord_scale_mm: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Narrow PoseNet without dropout, sized for overfitting a few dozen samples on a CPU.
    pub fn desk() -> Self {
        Self {
            hidden: 256,
            dropout: 0.0,
            widths: vec![64, 64, 32, 32],
            cheb_order: 3,
            levels: 3,
            coarsen_seed: 0,
            residual: ResidualMode::WithinLevel,
            coord_scale_mm: 100.0,
        }
    }

    pub fn paper() -> Self {
        Self {
            hidden: 4096,
            dropout: 0.5,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.cheb_order == 0 {
            return Err(Error::Config(
                "hidden width and Chebyshev order must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.coord_scale_mm > 0.0) {
            return Err(Error::Config("coord_scale_mm must be positive".into()));
        }
        super::meshnet::resolve_widths(&self.widths, self.levels + 1).map(|_| ())
    }
}

/// Manifest `config` section of a model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelManifest {
    pub model: ModelConfig,
    pub num_joints: usize,
    pub root_index: usize,
    /// Absent for PoseNet-only checkpoints.
    pub num_vertices: Option<usize>,
    /// Anything else the writer wants to keep (run config, template spec).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Borrowed network descriptors handed to [`Pose2Mesh::run`].
pub struct Nets<'a> {
    pub posenet: &'a PoseNet,
    pub meshnet: Option<&'a MeshNet>,
}

impl Nets<'_> {
    pub fn meshnet(&self) -> Result<&MeshNet> {
        self.meshnet
            .ok_or_else(|| Error::Config("model has no MeshNet (PoseNet-only checkpoint)".into()))
    }
}

/// PoseNet plus optional MeshNet sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Pose2Mesh<T: Real = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub posenet: PoseNet,
    pub meshnet: Option<MeshNet>,
}

impl<T: Real> Pose2Mesh<T> {
    /// Stage-one model: PoseNet only.
    pub fn posenet_only(config: &ModelConfig, num_joints: usize, root_index: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let posenet = PoseNet::new(
            &mut store,
            POSENET,
            num_joints,
            root_index,
            config.hidden,
            config.dropout,
            config.coord_scale_mm,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            posenet,
            meshnet: None,
        })
    }

    /// Full model. PoseNet parameters are initialized exactly as in [`Self::posenet_only`].
    pub fn full(config: &ModelConfig, template: &MeshTemplate, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let posenet = PoseNet::new(
            &mut store,
            POSENET,
            template.num_joints(),
            template.root_index,
            config.hidden,
            config.dropout,
            config.coord_scale_mm,
            &mut rng,
        )?;
        let meshnet = MeshNet::new(
            &mut store,
            MESHNET,
            template,
            &config.widths,
            config.cheb_order,
            config.levels,
            config.coarsen_seed,
            config.residual,
            config.coord_scale_mm,
            &mut rng,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            posenet,
            meshnet: Some(meshnet),
        })
    }

    pub fn num_joints(&self) -> usize {
        self.posenet.num_joints
    }

    pub fn root_index(&self) -> usize {
        self.posenet.root_index
    }

    /// Runs `f` in a fresh [`Session`] over this model's parameters.
    pub fn run<R>(
        &mut self,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
        f: impl FnOnce(&mut Session<'_, T>, &Nets<'_>) -> Result<R>,
    ) -> Result<R> {
        let nets = Nets {
            posenet: &self.posenet,
            meshnet: self.meshnet.as_ref(),
        };
        let mut s = Session::new(&mut self.store, mode, rng);
        f(&mut s, &nets)
    }

    /// Same architecture with parameters converted to `U`.
    pub fn cast<U: Real>(&self) -> Pose2Mesh<U> {
        Pose2Mesh {
            config: self.config.clone(),
            store: self.store.cast(),
            posenet: self.posenet.clone(),
            meshnet: self.meshnet.clone(),
        }
    }

    pub fn manifest(&self, extra: serde_json::Value) -> ModelManifest {
        ModelManifest {
            model: self.config.clone(),
            num_joints: self.num_joints(),
            root_index: self.root_index(),
            num_vertices: self.meshnet.as_ref().map(MeshNet::num_vertices),
            extra,
        }
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Result<Checkpoint> {
        Ok(Checkpoint {
            config: serde_json::to_value(self.manifest(extra))?,
            tensors: self.store.export(),
        })
    }

    /// Rebuilds a model from a checkpoint; full checkpoints need the template.
    pub fn from_checkpoint(ck: &Checkpoint, template: Option<&MeshTemplate>) -> Result<(Self, ModelManifest)> {
        let manifest: ModelManifest = serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format {
            what: "checkpoint config",
            msg: e.to_string(),
        })?;
        let mut model = match (manifest.num_vertices, template) {
            (None, _) => Self::posenet_only(&manifest.model, manifest.num_joints, manifest.root_index, 0)?,
            (Some(nv), Some(t)) => {
                if nv != t.num_vertices()
                    || manifest.num_joints != t.num_joints()
                    || manifest.root_index != t.root_index
                {
                    return Err(Error::Mismatch(format!(
                        "checkpoint expects {nv} vertices / {} joints (root {}), template has {} / {} (root {})",
                        manifest.num_joints,
                        manifest.root_index,
                        t.num_vertices(),
                        t.num_joints(),
                        t.root_index
                    )));
                }
                Self::full(&manifest.model, t, 0)?
            }
            (Some(_), None) => return Err(Error::Config("full checkpoint needs a template".into())),
        };
        model.store.import(&ck.tensors, "")?;
        Ok((model, manifest))
    }

    /// Copies PoseNet tensors from a (stage-one) checkpoint.
    pub fn load_posenet(&mut self, ck: &Checkpoint) -> Result<()> {
        let manifest: ModelManifest = serde_json::from_value(ck.config.clone()).map_err(|e| Error::Format {
            what: "checkpoint config",
            msg: e.to_string(),
        })?;
        if manifest.num_joints != self.num_joints()
            || manifest.root_index != self.root_index()
            || manifest.model.hidden != self.config.hidden
        {
            return Err(Error::Mismatch(format!(
                "PoseNet checkpoint has {} joints (root {}), hidden {}; model has {} (root {}), hidden {}",
                manifest.num_joints,
                manifest.root_index,
                manifest.model.hidden,
                self.num_joints(),
                self.root_index(),
                self.config.hidden
            )));
        }
        self.store.import(&ck.tensors, &format!("{POSENET}."))
    }
}
