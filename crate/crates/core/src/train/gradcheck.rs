use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pipeline::{assemble_batch, pose_objective, MeshContext};
use crate::data::{generate_synthetic_dataset, TemplateSpec};
use crate::error::Result;
use crate::losses::{edge_loss, joint_loss, normal_loss, pose_loss, vertex_loss};
use crate::nn::{BatchNorm1d, ChebConv, GraphConvBlock, Linear, Mode, ModelConfig, ParamStore, Pose2Mesh, Session};
use crate::tensor::{gradient_check_with, GradCheckReport, Tensor, Var};

/// Tolerance for single layers and losses.
pub const UNIT_TOLERANCE: f64 = 1e-5;
/// Tolerance for whole networks.
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-6;
/// Step for checks whose inputs are mesh coordinates in mm.
pub const MM_EPSILON: f64 = 1e-3;
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub component: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl GradCheckEntry {
    /// Within tolerance, with at most a tenth of the coordinates skipped as kinks.
    pub fn passed(&self) -> bool {
        self.report.max_rel_err < self.tolerance && self.report.skipped_fraction() <= MAX_SKIPPED_FRACTION
    }
}

/// Checks gradients of every learnable tensor of `store`.
///
/// `loss(store, backward)` evaluates the objective; with `backward` it must also
/// leave gradients in the store. Tensors larger than `per_tensor` are checked on a
/// seeded random subset of coordinates.
pub fn check_store(
    store: &mut ParamStore<f64>,
    per_tensor: usize,
    seed: u64,
    epsilon: f64,
    mut loss: impl FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
) -> Result<GradCheckReport> {
    store.clear_grads();
    loss(store, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.learnable()).map(|(id, _)| id).collect();
    let mut report = GradCheckReport::default();
    for id in ids {
        let n = store.tensor(id).len();
        let analytic = store.tensor_mut(id).take_grad().unwrap_or_else(|| vec![0.0; n]);
        let mut coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            sample(&mut rng, n, per_tensor).into_vec()
        };
        coords.sort_unstable();
        let r = gradient_check_with(&analytic, &coords, epsilon, |coord, delta| {
            let orig = store.tensor(id).data()[coord];
            store.tensor_mut(id).data_mut()[coord] = orig + delta;
            let v = loss(store, false);
            store.tensor_mut(id).data_mut()[coord] = orig;
            v
        })?;
        report.merge(&r);
    }
    store.clear_grads();
    Ok(report)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).expect("shape")
}

/// Perturbs BN running statistics so eval-mode normalization is not the identity.
fn randomize_running_stats(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for (_, p) in store.iter_mut() {
        if p.name.ends_with(".running_mean") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-0.1..0.1));
        } else if p.name.ends_with(".running_var") {
            p.tensor
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(0.5..1.5));
        }
    }
}

fn run(
    store: &mut ParamStore<f64>,
    mode: Mode,
    backward: bool,
    f: impl FnOnce(&mut Session<'_, f64>) -> Result<Var>,
) -> Result<f64> {
    let mut s = Session::new(store, mode, None);
    let l = f(&mut s)?;
    if backward {
        s.backward(l)
    } else {
        Ok(s.tape.item(l))
    }
}

/// Weighted sum of the output so every coordinate gets a distinct gradient.
fn probe(s: &mut Session<'_, f64>, y: Var, w: &Tensor<f64>) -> Result<Var> {
    let wv = s.input(w.clone());
    let p = s.tape.mul(y, wv)?;
    Ok(s.tape.sum(p))
}

/// Layers and losses on small random inputs, then both networks and the full
/// cascade on the tube-man template (eval-mode BN, no dropout, batch of three).
pub fn run_gradcheck_suite(config: &ModelConfig, per_tensor: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = GRADCHECK_EPSILON;
    let unit = |component: &str, report| GradCheckEntry {
        component: component.to_string(),
        report,
        tolerance: UNIT_TOLERANCE,
    };

    // Linear, w.r.t. input, weight and bias.
    {
        let mut store = ParamStore::new();
        let layer = Linear::new(&mut store, "fc", 4, 2, true, &mut rng)?;
        let x = store.add("x", random_tensor(&mut rng, &[3, 4], 1.0), true)?;
        let bias = layer.bias.expect("bias");
        *store.tensor_mut(bias) = random_tensor(&mut rng, &[2], 1.0);
        let w = random_tensor(&mut rng, &[3, 2], 1.0);
        let r = check_store(&mut store, usize::MAX, seed, eps, |st, bw| {
            run(st, Mode::Eval, bw, |s| {
                let xv = s.param(x);
                let y = layer.forward(s, xv)?;
                probe(s, y, &w)
            })
        })?;
        out.push(unit("linear", r));
    }

    // Batch norm with batch statistics.
    {
        let mut store = ParamStore::new();
        let bn = BatchNorm1d::new(&mut store, "bn", 3)?;
        *store.tensor_mut(bn.gamma) = random_tensor(&mut rng, &[3], 2.0);
        *store.tensor_mut(bn.beta) = random_tensor(&mut rng, &[3], 1.0);
        let x = store.add("x", random_tensor(&mut rng, &[5, 3], 1.0), true)?;
        let w = random_tensor(&mut rng, &[5, 3], 1.0);
        let r = check_store(&mut store, usize::MAX, seed, eps, |st, bw| {
            run(st, Mode::Train, bw, |s| {
                let xv = s.param(x);
                let y = bn.forward(s, xv)?;
                probe(s, y, &w)
            })
        })?;
        out.push(unit("batchnorm", r));
    }

    let (template, samples) = generate_synthetic_dataset(&TemplateSpec::tube_man(), 3, seed)?;
    // An odd batch keeps L1 sign sums off exact zero, where the difference quotient is pure rounding.
    let b = samples.len();
    let pose_lap: Rc<crate::tensor::SparseMatrix<f64>> = Rc::new(
        crate::graph::ScaledLaplacian::new(&template.pose_graph()?)
            .sparse()
            .clone(),
    );
    let j = template.num_joints();

    // Chebyshev convolution and the conv-BN-ReLU block on the pose graph.
    {
        let mut store = ParamStore::new();
        let conv = ChebConv::new(&mut store, "conv", 3, 2, 3, true, &mut rng)?;
        let x = store.add("x", random_tensor(&mut rng, &[2, j, 2], 1.0), true)?;
        let w = random_tensor(&mut rng, &[2, j, 3], 1.0);
        let r = check_store(&mut store, usize::MAX, seed, eps, |st, bw| {
            run(st, Mode::Eval, bw, |s| {
                let xv = s.param(x);
                let y = conv.forward(s, xv, &pose_lap)?;
                probe(s, y, &w)
            })
        })?;
        out.push(unit("chebyshev_conv", r));

        let mut store = ParamStore::new();
        let block = GraphConvBlock::new(&mut store, "block", 3, 2, 3, &mut rng)?;
        let x = store.add("x", random_tensor(&mut rng, &[2, j, 2], 1.0), true)?;
        let r = check_store(&mut store, usize::MAX, seed, eps, |st, bw| {
            run(st, Mode::Train, bw, |s| {
                let xv = s.param(x);
                let y = block.forward(s, xv, &pose_lap)?;
                probe(s, y, &w)
            })
        })?;
        out.push(unit("graph_conv_block", r));
    }

    // Losses w.r.t. the prediction, on a perturbed groundtruth mesh.
    {
        let ctx = MeshContext::<f64>::new(&template)?;
        let v = template.num_vertices();
        let gt_mesh: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.mesh_gt.as_ref().expect("mesh").iter().flatten().copied())
            .collect();
        let gt_mesh = Tensor::new([b, v, 3], gt_mesh)?;
        let gt_pose: Vec<f64> = samples
            .iter()
            .flat_map(|s| s.pose3d_gt.iter().flatten().copied())
            .collect();
        let gt_pose = Tensor::new([b, j, 3], gt_pose)?;
        let noisy = |rng: &mut ChaCha8Rng, t: &Tensor<f64>| {
            let mut t = t.clone();
            t.data_mut().iter_mut().for_each(|x| *x += rng.gen_range(-20.0..20.0));
            t
        };
        type LossFn = fn(&mut crate::tensor::Tape<f64>, Var, Var, Var, &MeshContext<f64>) -> Result<Var>;
        let cases: [(&str, bool, LossFn); 5] = [
            ("loss_pose", false, |t, p, g, _, _| pose_loss(t, p, g)),
            ("loss_vertex", true, |t, p, g, _, _| vertex_loss(t, p, g)),
            ("loss_joint", true, |t, p, _, gp, c| joint_loss(t, p, &c.regressor, gp)),
            ("loss_normal", true, |t, p, g, _, c| normal_loss(t, p, &c.faces, g)),
            ("loss_edge", true, |t, p, g, _, c| edge_loss(t, p, &c.faces, g)),
        ];
        for (name, on_mesh, f) in cases {
            let gt = if on_mesh { &gt_mesh } else { &gt_pose };
            let mut store = ParamStore::new();
            let pred = store.add("pred", noisy(&mut rng, gt), true)?;
            // Millimetre coordinates and sums near 1e4: a 1e-6 step is mostly rounding.
            let r = check_store(&mut store, per_tensor.max(64), seed, MM_EPSILON, |st, bw| {
                run(st, Mode::Eval, bw, |s| {
                    let p = s.param(pred);
                    let g = s.input(gt.clone());
                    let gp = s.input(gt_pose.clone());
                    f(&mut s.tape, p, g, gp, &ctx)
                })
            })?;
            out.push(unit(name, r));
        }
    }

    // Networks, f64, eval-mode BN with non-trivial running statistics.
    let cfg = ModelConfig {
        dropout: 0.0,
        ..config.clone()
    };
    let mut model = Pose2Mesh::<f64>::full(&cfg, &template, seed)?;
    randomize_running_stats(&mut model.store, &mut rng);
    let refs: Vec<_> = samples.iter().collect();
    let inputs: Vec<_> = samples.iter().map(|s| s.pose2d.clone()).collect();
    let batch = assemble_batch::<f64>(&refs, &inputs, true)?;
    let Pose2Mesh {
        store,
        posenet,
        meshnet,
        ..
    } = &mut model;
    let nets = crate::nn::Nets {
        posenet,
        meshnet: meshnet.as_ref(),
    };
    let model_entry = |component: &str, report| GradCheckEntry {
        component: component.to_string(),
        report,
        tolerance: MODEL_TOLERANCE,
    };

    store.set_frozen(crate::nn::MESHNET, true);
    let r = check_store(store, per_tensor, seed, eps, |st, bw| {
        run(st, Mode::Eval, bw, |s| Ok(pose_objective(s, &nets, &batch)?.0))
    })?;
    store.set_frozen(crate::nn::MESHNET, false);
    out.push(model_entry("posenet", r));

    // MeshNet and the cascade are probed with fixed random output weights: at
    // random init the mesh losses sum thousands of L1 residuals, and a
    // difference step crossing one of their kinks is not a gradient error.
    let w_mesh = random_tensor(&mut rng, &[b, template.num_vertices(), 3], 1.0);
    let w_pose = random_tensor(&mut rng, &[b, j, 3], 1.0);
    store.set_frozen(crate::nn::POSENET, true);
    let r = check_store(store, per_tensor, seed, eps, |st, bw| {
        run(st, Mode::Eval, bw, |s| {
            let f = super::pipeline::forward_batch(s, &nets, &batch, true, super::pipeline::PoseSource::Groundtruth)?;
            probe(s, f.mesh.expect("mesh"), &w_mesh)
        })
    })?;
    store.set_frozen(crate::nn::POSENET, false);
    out.push(model_entry("meshnet", r));

    let r = check_store(store, per_tensor, seed, eps, |st, bw| {
        run(st, Mode::Eval, bw, |s| {
            let f = super::pipeline::forward_batch(s, &nets, &batch, true, super::pipeline::PoseSource::PoseNet)?;
            let pm = probe(s, f.mesh.expect("mesh"), &w_mesh)?;
            let pp = probe(s, f.pose, &w_pose)?;
            s.tape.add(pm, pp)
        })
    })?;
    out.push(model_entry("pose2mesh", r));
    Ok(out)
}
