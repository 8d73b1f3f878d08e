use std::hint::black_box;
use std::rc::Rc;

use criterion::{criterion_group, criterion_main, Criterion};
use pose2mesh::coarsen::graclus_coarsen;
use pose2mesh::graph::ScaledLaplacian;
use pose2mesh::nn::{ChebConv, Mode, ModelConfig, ParamStore, Pose2Mesh, Session};
use pose2mesh::train::{assemble_batch, forward_batch, full_objective, MeshContext, PoseSource};
use pose2mesh_bench::{random_tensor, tube_man};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BATCH: usize = 16;

fn cheb_conv(c: &mut Criterion) {
    let (template, _) = tube_man(1);
    let lap = Rc::new(
        ScaledLaplacian::new(&template.mesh_graph().unwrap())
            .sparse()
            .cast::<f32>(),
    );
    let v = template.num_vertices();
    let mut store = ParamStore::<f32>::new();
    let conv = ChebConv::new(&mut store, "c", 3, 32, 32, true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let x = random_tensor(&[BATCH, v, 32], 1);
    c.bench_function("cheb_conv_forward_backward_198v_32ch", |b| {
        b.iter(|| {
            let mut s = Session::new(&mut store, Mode::Train, None);
            let xv = s.input(x.clone());
            let y = conv.forward(&mut s, xv, &lap).unwrap();
            let l = s.tape.sum(y);
            black_box(s.backward(l).unwrap());
        })
    });
}

fn coarsening(c: &mut Criterion) {
    let (template, _) = tube_man(1);
    let g = template.mesh_graph().unwrap();
    c.bench_function("graclus_coarsen_198v_3_levels", |b| {
        b.iter(|| black_box(graclus_coarsen(&g, 3, 0).unwrap()))
    });
}

fn meshnet(c: &mut Criterion) {
    let (template, samples) = tube_man(BATCH);
    let mut model = Pose2Mesh::<f32>::full(&ModelConfig::desk(), &template, 0).unwrap();
    let refs: Vec<_> = samples.iter().collect();
    let inputs: Vec<_> = samples.iter().map(|s| s.pose2d.clone()).collect();
    let batch = assemble_batch::<f32>(&refs, &inputs, true).unwrap();
    c.bench_function("meshnet_forward_eval_b16", |b| {
        b.iter(|| {
            let mesh = model
                .run(Mode::Eval, None, |s, nets| {
                    let f = forward_batch(s, nets, &batch, true, PoseSource::Groundtruth)?;
                    Ok(s.tape.value(f.mesh.unwrap())[0])
                })
                .unwrap();
            black_box(mesh)
        })
    });

    let ctx = MeshContext::<f32>::new(&template).unwrap();
    let weights = Default::default();
    c.bench_function("pose2mesh_loss_and_gradient_b16", |b| {
        b.iter(|| {
            let total = model
                .run(Mode::Train, None, |s, nets| {
                    let (l, values) = full_objective(s, nets, &batch, &ctx, &weights, 1, true)?;
                    s.backward(l)?;
                    Ok(values.total)
                })
                .unwrap();
            black_box(total)
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = cheb_conv, coarsening, meshnet
}
criterion_main!(benches);
