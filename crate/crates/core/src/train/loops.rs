use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::optim::{lr_at, rmsprop_step, RmspropState};
use super::pipeline::{assemble_batch, full_objective, pose_objective, Batch, LossValues, MeshContext};
use crate::data::{synthesize_pose_errors, MeshTemplate, PoseSample};
use crate::error::{Error, Result};
use crate::nn::{Mode, Pose2Mesh, MESHNET, POSENET};
use crate::tensor::Real;

/// One optimizer step of the loss trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    /// 1-based.
    pub epoch: usize,
    /// 1-based, counted across the stage.
    pub iter: usize,
    pub lr: f64,
    pub losses: LossValues,
}

pub const TRACE_HEADER: &str = "epoch,iter,lr,L_pose,L_vertex,L_joint,L_normal,L_edge,L_total";

/// CSV with [`TRACE_HEADER`]; terms absent from a stage are left empty.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let l = &r.losses;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.iter,
            r.lr,
            opt(l.pose),
            opt(l.vertex),
            opt(l.joint),
            opt(l.normal),
            opt(l.edge),
            l.total
        );
    }
    s
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    std::fs::write(path, trace_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Result of a training stage.
#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub trace: Vec<TraceRow>,
    /// Learnable tensors whose gradient was exactly zero at every step.
    pub dead_params: Vec<String>,
}

/// Splits a shuffled index list into batches; a trailing batch of one joins the previous one.
pub fn batch_indices(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

/// Independent random streams of one stage.
struct StageRngs {
    shuffle: ChaCha8Rng,
    synth: ChaCha8Rng,
    dropout: ChaCha8Rng,
}

impl StageRngs {
    fn new(seed: u64, stage: u64) -> Self {
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(stage * 16 + k);
            r
        };
        Self {
            shuffle: stream(0),
            synth: stream(1),
            dropout: stream(2),
        }
    }
}

struct Stage<'a> {
    epochs: usize,
    base_lr: f64,
    decay_epoch: usize,
    max_iterations: Option<usize>,
    with_mesh: bool,
    symmetry_pairs: &'a [(usize, usize)],
}

fn run_stage<T: Real>(
    model: &mut Pose2Mesh<T>,
    data: &[PoseSample],
    cfg: &TrainConfig,
    stage: &Stage<'_>,
    rngs: &mut StageRngs,
    mut objective: impl FnMut(
        &mut crate::nn::Session<'_, T>,
        &crate::nn::Nets<'_>,
        &Batch<T>,
        usize,
    ) -> Result<(crate::tensor::Var, LossValues)>,
) -> Result<TrainOutcome> {
    if data.len() < 2 {
        return Err(if data.is_empty() {
            Error::EmptyDataset
        } else {
            Error::Config("training needs at least 2 samples (batch normalization)".into())
        });
    }
    let mut state = RmspropState::new(stage.base_lr);
    let mut alive = vec![false; model.store.len()];
    let mut trace = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut iter = 0;
    'epochs: for epoch in 1..=stage.epochs {
        let lr = lr_at(epoch, stage.base_lr, stage.decay_epoch, cfg.decay_factor);
        state.set_lr(lr);
        order.shuffle(&mut rngs.shuffle);
        for idx in batch_indices(&order, cfg.batch_size) {
            let samples: Vec<&PoseSample> = idx.iter().map(|&i| &data[i]).collect();
            let inputs = samples
                .iter()
                .map(|s| {
                    if cfg.synthesize_errors {
                        synthesize_pose_errors(&s.pose2d, stage.symmetry_pairs, &cfg.error_synth, &mut rngs.synth)
                    } else {
                        Ok(s.pose2d.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = assemble_batch::<T>(&samples, &inputs, stage.with_mesh)?;
            let losses = model.run(Mode::Train, Some(&mut rngs.dropout), |s, nets| {
                let (loss, values) = objective(s, nets, &batch, epoch)?;
                s.backward(loss)?;
                Ok(values)
            })?;
            if !losses.total.is_finite() {
                return Err(Error::NonFinite { coord: iter });
            }
            for (id, p) in model.store.iter() {
                if let Some(g) = p.tensor.grad() {
                    alive[id.index()] |= g.iter().any(|v| *v != T::zero());
                }
            }
            rmsprop_step(&mut model.store, &mut state)?;
            iter += 1;
            trace.push(TraceRow {
                epoch,
                iter,
                lr,
                losses,
            });
            log::debug!("epoch {epoch} iter {iter} loss {}", losses.total);
            if stage.max_iterations.is_some_and(|m| iter >= m) {
                break 'epochs;
            }
        }
    }
    let dead_params = model
        .store
        .iter()
        .filter(|(id, p)| p.learnable() && !alive[id.index()])
        .map(|(_, p)| p.name.clone())
        .collect();
    Ok(TrainOutcome { trace, dead_params })
}

/// Stage one: PoseNet alone under `L_pose`, with fresh input-error synthesis every epoch.
pub fn train_posenet<T: Real>(
    model: &mut Pose2Mesh<T>,
    data: &[PoseSample],
    symmetry_pairs: &[(usize, usize)],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_joints(model, data)?;
    let stage = Stage {
        epochs: cfg.stage1_epochs,
        base_lr: cfg.stage1_lr,
        decay_epoch: cfg.stage1_decay_epoch,
        max_iterations: None,
        with_mesh: false,
        symmetry_pairs,
    };
    let mut rngs = StageRngs::new(cfg.seed, 1);
    // A full model keeps its MeshNet untouched in this stage.
    let mesh_prefix = format!("{MESHNET}.");
    model.store.set_frozen(&mesh_prefix, true);
    let out = run_stage(model, data, cfg, &stage, &mut rngs, |s, nets, batch, _| {
        pose_objective(s, nets, batch)
    });
    model.store.set_frozen(&mesh_prefix, false);
    let mut out = out?;
    out.dead_params.retain(|n| !n.starts_with(&mesh_prefix));
    Ok(out)
}

/// Stage two: the whole cascade end to end under the mesh loss (plus `L_pose` if enabled).
pub fn train_full<T: Real>(
    model: &mut Pose2Mesh<T>,
    template: &MeshTemplate,
    data: &[PoseSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_joints(model, data)?;
    let meshnet = model
        .meshnet
        .as_ref()
        .ok_or_else(|| Error::Config("stage two needs a model with MeshNet".into()))?;
    if meshnet.num_vertices() != template.num_vertices() {
        return Err(Error::Mismatch(format!(
            "model has {} vertices, template {}",
            meshnet.num_vertices(),
            template.num_vertices()
        )));
    }
    let ctx = MeshContext::<T>::new(template)?;
    let stage = Stage {
        epochs: cfg.stage2_epochs,
        base_lr: cfg.stage2_lr,
        decay_epoch: cfg.stage2_decay_epoch,
        max_iterations: cfg.stage2_max_iterations,
        with_mesh: true,
        symmetry_pairs: &template.symmetry_pairs,
    };
    let prefix = format!("{POSENET}.");
    if cfg.freeze_posenet {
        model.store.set_frozen(&prefix, true);
    }
    let mut rngs = StageRngs::new(cfg.seed, 2);
    let out = run_stage(model, data, cfg, &stage, &mut rngs, |s, nets, batch, epoch| {
        full_objective(s, nets, batch, &ctx, &cfg.loss, epoch, cfg.include_pose_loss_stage2)
    });
    if cfg.freeze_posenet {
        model.store.set_frozen(&prefix, false);
    }
    let mut out = out?;
    if cfg.freeze_posenet {
        out.dead_params.retain(|n| !n.starts_with(&prefix));
    }
    Ok(out)
}

fn check_joints<T: Real>(model: &Pose2Mesh<T>, data: &[PoseSample]) -> Result<()> {
    let j = model.num_joints();
    if let Some((i, s)) = data
        .iter()
        .enumerate()
        .find(|(_, s)| s.pose2d.len() != j || s.pose3d_gt.len() != j)
    {
        return Err(Error::Mismatch(format!(
            "sample {i} has {} joints, model expects {j}",
            s.pose2d.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_merges() {
        let order: Vec<usize> = (0..9).collect();
        let b = batch_indices(&order, 4);
        assert_eq!(b.len(), 2);
        assert_eq!(b[1], vec![4, 5, 6, 7, 8]);
        assert_eq!(batch_indices(&order[..8], 4).len(), 2);
        assert_eq!(batch_indices(&order[..3], 4), vec![vec![0, 1, 2]]);
    }

    #[test]
    fn csv_leaves_absent_terms_empty() {
        let rows = [TraceRow {
            epoch: 1,
            iter: 1,
            lr: 0.001,
            losses: LossValues {
                pose: Some(2.5),
                total: 2.5,
                ..LossValues::default()
            },
        }];
        let csv = trace_csv(&rows);
        assert_eq!(csv.lines().nth(1).unwrap(), "1,1,0.001,2.5,,,,,2.5");
    }
}
