use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pipeline::{assemble_batch, forward_batch, PoseSource};
use crate::data::{synthesize_pose_errors, ErrorSynthConfig, MeshTemplate, PoseSample};
use crate::error::{Error, Result};
use crate::metrics::{f_score, mean_distance, mpvpe, procrustes_align, tau_key, MetricsReport};
use crate::nn::{Mode, Pose2Mesh};
use crate::tensor::Real;

/// Source of the network's pose input at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Groundtruth 2D pose through PoseNet.
    #[default]
    Gt2d,
    /// Groundtruth 3D pose straight into MeshNet.
    Gt3d,
    /// Groundtruth 2D pose corrupted by error synthesis.
    Synth,
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt2d" => Ok(Self::Gt2d),
            "gt3d" => Ok(Self::Gt3d),
            "synth" => Ok(Self::Synth),
            _ => Err(Error::Config(format!("unknown input mode {s:?} (gt2d|gt3d|synth)"))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gt2d => "gt2d",
            Self::Gt3d => "gt3d",
            Self::Synth => "synth",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub input: InputMode,
    /// F-score thresholds in mm.
    pub taus: Vec<f64>,
    /// Procrustes-align meshes before the F-score.
    pub f_score_align: bool,
    /// Joints entering MPJPE and PA-MPJPE; all when absent.
    pub joint_mask: Option<Vec<usize>>,
    /// Corruption used by [`InputMode::Synth`]; its `seed` drives the draws.
    pub error_synth: ErrorSynthConfig,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            input: InputMode::Gt2d,
            taus: vec![5.0, 15.0],
            f_score_align: true,
            joint_mask: None,
            error_synth: ErrorSynthConfig::default(),
            batch_size: 64,
        }
    }
}

/// Network outputs for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// PoseNet output, or the groundtruth pose in [`InputMode::Gt3d`].
    pub pose3d: Vec<[f64; 3]>,
    pub mesh: Option<Vec<[f64; 3]>>,
}

fn rows3(v: &[f64]) -> Vec<[f64; 3]> {
    v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Eval-mode forward over `samples`. Meshes are produced when the model has a MeshNet.
pub fn predict<T: Real>(
    model: &mut Pose2Mesh<T>,
    samples: &[PoseSample],
    input: InputMode,
    synth: &ErrorSynthConfig,
    symmetry_pairs: &[(usize, usize)],
    batch_size: usize,
) -> Result<Vec<Prediction>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let with_mesh = model.meshnet.is_some();
    if input == InputMode::Gt3d && !with_mesh {
        return Err(Error::Config("gt3d input needs a model with MeshNet".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(synth.seed);
    let inputs = samples
        .iter()
        .map(|s| match input {
            InputMode::Synth => synthesize_pose_errors(&s.pose2d, symmetry_pairs, synth, &mut rng),
            _ => Ok(s.pose2d.clone()),
        })
        .collect::<Result<Vec<_>>>()?;
    let source = if input == InputMode::Gt3d {
        PoseSource::Groundtruth
    } else {
        PoseSource::PoseNet
    };
    let mut out = Vec::with_capacity(samples.len());
    let refs: Vec<&PoseSample> = samples.iter().collect();
    for (chunk, inp) in refs.chunks(batch_size.max(1)).zip(inputs.chunks(batch_size.max(1))) {
        let batch = assemble_batch::<T>(chunk, inp, false)?;
        let (pose, mesh) = model.run(Mode::Eval, None, |s, nets| {
            let f = forward_batch(s, nets, &batch, with_mesh, source)?;
            let pose: Vec<f64> = s.tape.value(f.pose).iter().map(|v| v.as_f64()).collect();
            let mesh: Option<Vec<f64>> = f.mesh.map(|m| s.tape.value(m).iter().map(|v| v.as_f64()).collect());
            Ok((pose, mesh))
        })?;
        let b = chunk.len();
        let pj = pose.len() / b;
        for i in 0..b {
            out.push(Prediction {
                pose3d: rows3(&pose[i * pj..(i + 1) * pj]),
                mesh: mesh.as_ref().map(|m| {
                    let mv = m.len() / b;
                    rows3(&m[i * mv..(i + 1) * mv])
                }),
            });
        }
    }
    Ok(out)
}

fn select(p: &[[f64; 3]], root: [f64; 3], mask: Option<&[usize]>) -> Vec<[f64; 3]> {
    let idx: Vec<usize> = match mask {
        Some(m) => m.to_vec(),
        None => (0..p.len()).collect(),
    };
    idx.iter()
        .map(|&i| [p[i][0] - root[0], p[i][1] - root[1], p[i][2] - root[2]])
        .collect()
}

/// Dataset metrics. With a MeshNet, joint errors are measured on joints regressed
/// from the predicted mesh; otherwise on the PoseNet output.
pub fn evaluate<T: Real>(
    model: &mut Pose2Mesh<T>,
    template: Option<&MeshTemplate>,
    samples: &[PoseSample],
    cfg: &EvalConfig,
) -> Result<MetricsReport> {
    cfg.error_synth.validate()?;
    if model.meshnet.is_some() && template.is_none() {
        return Err(Error::Config("evaluating a full model needs the template".into()));
    }
    let j = model.num_joints();
    let root = model.root_index();
    if let Some(mask) = &cfg.joint_mask {
        if mask.is_empty() {
            return Err(Error::Config("joint mask is empty".into()));
        }
        if let Some(&bad) = mask.iter().find(|&&i| i >= j) {
            return Err(Error::IndexOutOfRange {
                what: "joint mask",
                index: bad,
                len: j,
            });
        }
    }
    let pairs = template.map(|t| t.symmetry_pairs.as_slice()).unwrap_or(&[]);
    let preds = predict(model, samples, cfg.input, &cfg.error_synth, pairs, cfg.batch_size)?;
    let mask = cfg.joint_mask.as_deref();
    let root_row = template.map(|t| t.joint_regressor[t.root_index].clone());
    let mut mpjpe_sum = 0.0;
    let mut pa_sum = 0.0;
    let mut mpvpe_sum = 0.0;
    let mut mesh_count = 0usize;
    let mut f_sums: BTreeMap<String, f64> = cfg.taus.iter().map(|&t| (tau_key(t), 0.0)).collect();
    for (s, p) in samples.iter().zip(&preds) {
        let joints = match (&p.mesh, template) {
            (Some(m), Some(t)) => t.regress_joints(m),
            _ => p.pose3d.clone(),
        };
        let pred = select(&joints, joints[root], mask);
        let gt = select(&s.pose3d_gt, s.pose3d_gt[root], mask);
        mpjpe_sum += mean_distance(&pred, &gt)?;
        pa_sum += mean_distance(&procrustes_align(&pred, &gt)?.apply(&pred), &gt)?;
        if let (Some(m), Some(gt_m), Some(row)) = (&p.mesh, &s.mesh_gt, &root_row) {
            mpvpe_sum += mpvpe(m, gt_m, row)?;
            for &tau in &cfg.taus {
                *f_sums.get_mut(&tau_key(tau)).expect("key") += f_score(m, gt_m, tau, cfg.f_score_align)?;
            }
            mesh_count += 1;
        }
    }
    let n = samples.len() as f64;
    let has_mesh = mesh_count > 0;
    Ok(MetricsReport {
        mpjpe_mm: mpjpe_sum / n,
        pa_mpjpe_mm: pa_sum / n,
        mpvpe_mm: has_mesh.then(|| mpvpe_sum / mesh_count as f64),
        f_at: if has_mesh {
            f_sums.into_iter().map(|(k, v)| (k, v / mesh_count as f64)).collect()
        } else {
            BTreeMap::new()
        },
        samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn input_mode_round_trips() {
        for m in [InputMode::Gt2d, InputMode::Gt3d, InputMode::Synth] {
            assert_eq!(m.to_string().parse::<InputMode>().unwrap(), m);
        }
        assert!("gt4d".parse::<InputMode>().is_err());
    }
}
