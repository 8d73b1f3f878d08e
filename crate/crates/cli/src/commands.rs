use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pose2mesh::coarsen::graclus_coarsen;
use pose2mesh::data::{
    generate_synthetic_dataset, generate_template, load_dataset, load_template, save_dataset, save_template, write_obj,
    Checkpoint, MeshTemplate, PoseSample,
};
use pose2mesh::nn::Pose2Mesh;
use pose2mesh::train::{
    evaluate, predict, run_gradcheck_suite, train_full, train_posenet, write_trace_csv, InputMode, TrainOutcome,
};
use pose2mesh::{Error, Result};
use serde_json::json;

use crate::config::{Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "pose2mesh",
    version,
    about = "2D pose to 3D mesh: data, training, evaluation"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Default, Args)]
pub struct CommonArgs {
    /// JSON run config layered over the profile defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub profile: Option<Profile>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub template: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Pose input source: gt2d, gt3d or synth.
    #[arg(long, global = true)]
    pub input: Option<InputMode>,
    /// F-score threshold in mm; repeatable.
    #[arg(long = "tau", global = true)]
    pub taus: Vec<f64>,
    /// Number of mesh coarsening steps.
    #[arg(long, global = true)]
    pub levels: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write template.json, train.jsonl and test.jsonl.
    GenData,
    /// Coarsen the template's mesh graph and report level sizes.
    Coarsen {
        /// Print every level and verify the hierarchy.
        #[arg(long)]
        inspect: bool,
    },
    /// Finite-difference check of every layer, loss and network.
    Gradcheck {
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        per_tensor: usize,
    },
    /// Stage one: PoseNet alone.
    TrainPose,
    /// Stage two: the whole model (runs stage one first without --checkpoint).
    TrainFull,
    /// Metrics report as JSON.
    Eval,
    /// Predict one sample's mesh as OBJ.
    Infer {
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Template rest mesh, or a sample's groundtruth mesh with --index, as OBJ.
    ExportObj {
        #[arg(long)]
        index: Option<usize>,
    },
}

/// Config file, then profile, then flags.
pub fn resolve(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path, args.profile)?,
        None => RunConfig::profile(args.profile.unwrap_or_default()),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.train.seed = cfg.seed;
    if let Some(levels) = args.levels {
        cfg.model.levels = levels;
    }
    if let Some(input) = args.input {
        cfg.eval.input = input;
    }
    if !args.taus.is_empty() {
        cfg.eval.taus = args.taus.clone();
    }
    let paths = &mut cfg.paths;
    for (slot, flag) in [
        (&mut paths.template, &args.template),
        (&mut paths.dataset, &args.dataset),
        (&mut paths.checkpoint, &args.checkpoint),
        (&mut paths.out, &args.out),
    ] {
        if flag.is_some() {
            slot.clone_from(flag);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(&cli.common)?;
    if let Some(out) = &cfg.paths.out {
        fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
        write_text(&out.join("config.json"), &cfg.to_json()?)?;
    }
    match &cli.command {
        Command::GenData => gen_data(&cfg),
        Command::Coarsen { inspect } => coarsen(&cfg, *inspect),
        Command::Gradcheck { per_tensor } => gradcheck(&cfg, *per_tensor),
        Command::TrainPose => train_pose_cmd(&cfg).map(|_| ()),
        Command::TrainFull => train_full_cmd(&cfg),
        Command::Eval => eval(&cfg),
        Command::Infer { index } => infer(&cfg, *index),
        Command::ExportObj { index } => export_obj(&cfg, *index),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing --{flag} (or paths.{flag} in the config)")))
}

/// From `--template`, else generated from the config's template spec.
fn template(cfg: &RunConfig) -> Result<MeshTemplate> {
    match &cfg.paths.template {
        Some(p) => load_template(p),
        None => generate_template(&cfg.template),
    }
}

fn dataset(cfg: &RunConfig) -> Result<Vec<PoseSample>> {
    let data = load_dataset(required(&cfg.paths.dataset, "dataset")?)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(data)
}

fn checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    Checkpoint::load(required(&cfg.paths.checkpoint, "checkpoint")?)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let (n_train, n_test) = (cfg.data.train_samples, cfg.data.test_samples);
    let (template, mut samples) = generate_synthetic_dataset(&cfg.template, n_train + n_test, cfg.seed)?;
    let test = samples.split_off(n_train);
    save_template(&out.join("template.json"), &template)?;
    save_dataset(&out.join("train.jsonl"), &samples)?;
    save_dataset(&out.join("test.jsonl"), &test)?;
    println!(
        "template: {} vertices, {} faces, {} joints",
        template.num_vertices(),
        template.faces.len(),
        template.num_joints()
    );
    println!("train: {n_train} samples, test: {n_test} samples -> {}", out.display());
    Ok(())
}

fn coarsen(cfg: &RunConfig, inspect: bool) -> Result<()> {
    let t = template(cfg)?;
    let h = graclus_coarsen(&t.mesh_graph()?, cfg.model.levels, cfg.model.coarsen_seed)?;
    let sizes: Vec<String> = (0..=h.num_coarsenings()).map(|c| h.level_size(c).to_string()).collect();
    if !inspect {
        println!("{} vertices: {}", t.num_vertices(), sizes.join(" -> "));
        return Ok(());
    }
    println!("template vertices: {}", t.num_vertices());
    let mut problems = Vec::new();
    for c in 0..=h.num_coarsenings() {
        let g = h.level(c);
        let fake = h.num_fake(c);
        println!(
            "level {c}: {} vertices ({} real, {fake} fake)",
            h.level_size(c),
            h.level_size(c) - fake
        );
        if c < h.num_coarsenings() && h.level_size(c) != 2 * h.level_size(c + 1) {
            problems.push(format!("level {c} is not twice level {}", c + 1));
        }
        if let Some(v) = (0..g.num_vertices()).find(|&v| g.is_fake(v) && g.degree(v) != 0) {
            problems.push(format!("fake vertex {v} of level {c} has neighbors"));
        }
    }
    if problems.is_empty() {
        println!("doubling: ok");
        Ok(())
    } else {
        Err(Error::Degenerate(problems.join("; ")))
    }
}

fn gradcheck(cfg: &RunConfig, per_tensor: usize) -> Result<()> {
    let start = Instant::now();
    let report = run_gradcheck_suite(&cfg.model, per_tensor, cfg.seed)?;
    let mut failed = Vec::new();
    let mut rows = Vec::new();
    for e in &report {
        let ok = e.passed();
        println!(
            "{:<18} max_rel_err {:.3e}  tol {:.0e}  checked {:>4}  kinks {:>2}  {}",
            e.component,
            e.report.max_rel_err,
            e.tolerance,
            e.report.checked,
            e.report.skipped,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(e.component.clone());
        }
        rows.push(json!({
            "component": e.component,
            "max_rel_err": e.report.max_rel_err,
            "tolerance": e.tolerance,
            "checked": e.report.checked,
            "skipped_kinks": e.report.skipped,
            "passed": ok,
        }));
    }
    println!("{} components in {:.1?}", report.len(), start.elapsed());
    if let Some(out) = &cfg.paths.out {
        write_text(&out.join("gradcheck.json"), &serde_json::to_string_pretty(&rows)?)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Mismatch(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )))
    }
}

fn report_stage(stage: usize, outcome: &TrainOutcome) {
    let (first, last) = match (outcome.trace.first(), outcome.trace.last()) {
        (Some(f), Some(l)) => (f.losses.total, l.losses.total),
        _ => return,
    };
    println!(
        "stage {stage}: {} steps, loss {first:.4} -> {last:.4}",
        outcome.trace.len()
    );
    if !outcome.dead_params.is_empty() {
        log::warn!(
            "parameters that never received a gradient: {}",
            outcome.dead_params.join(", ")
        );
    }
}

/// Trains PoseNet and writes `posenet.ckpt` and `trace_stage1.csv`.
fn train_pose_cmd(cfg: &RunConfig) -> Result<Checkpoint> {
    let out = required(&cfg.paths.out, "out")?;
    let t = template(cfg)?;
    let data = dataset(cfg)?;
    let mut model = Pose2Mesh::<f32>::posenet_only(&cfg.model, t.num_joints(), t.root_index, cfg.seed)?;
    let outcome = train_posenet(&mut model, &data, &t.symmetry_pairs, &cfg.train)?;
    report_stage(1, &outcome);
    write_trace_csv(&out.join("trace_stage1.csv"), &outcome.trace)?;
    let ck = model.to_checkpoint(json!({ "stage": 1, "seed": cfg.seed }))?;
    ck.save(&out.join("posenet.ckpt"))?;
    Ok(ck)
}

/// Trains the whole model and writes `model.ckpt` and `trace_stage2.csv`.
fn train_full_cmd(cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let t = template(cfg)?;
    let data = dataset(cfg)?;
    let stage1 = match &cfg.paths.checkpoint {
        Some(p) => Checkpoint::load(p)?,
        None => train_pose_cmd(cfg)?,
    };
    let mut model = Pose2Mesh::<f32>::full(&cfg.model, &t, cfg.seed)?;
    model.load_posenet(&stage1)?;
    let outcome = train_full(&mut model, &t, &data, &cfg.train)?;
    report_stage(2, &outcome);
    write_trace_csv(&out.join("trace_stage2.csv"), &outcome.trace)?;
    model
        .to_checkpoint(json!({ "stage": 2, "seed": cfg.seed }))?
        .save(&out.join("model.ckpt"))
}

fn load_model(cfg: &RunConfig, t: &MeshTemplate) -> Result<Pose2Mesh<f64>> {
    let (model, _) = Pose2Mesh::<f32>::from_checkpoint(&checkpoint(cfg)?, Some(t))?;
    if model.num_joints() != t.num_joints() {
        return Err(Error::Mismatch(format!(
            "checkpoint has {} joints, template {}",
            model.num_joints(),
            t.num_joints()
        )));
    }
    Ok(model.cast())
}

fn eval(cfg: &RunConfig) -> Result<()> {
    let t = template(cfg)?;
    let data = dataset(cfg)?;
    let mut model = load_model(cfg, &t)?;
    let report = evaluate(&mut model, Some(&t), &data, &cfg.eval)?;
    let text = report.to_json()?;
    println!("{text}");
    if let Some(out) = &cfg.paths.out {
        write_text(&out.join("metrics.json"), &text)?;
    }
    Ok(())
}

fn sample_at(data: &[PoseSample], index: usize) -> Result<&PoseSample> {
    data.get(index).ok_or(Error::IndexOutOfRange {
        what: "dataset",
        index,
        len: data.len(),
    })
}

fn infer(cfg: &RunConfig, index: usize) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let t = template(cfg)?;
    let data = dataset(cfg)?;
    let sample = sample_at(&data, index)?.clone();
    let mut model = load_model(cfg, &t)?;
    if model.meshnet.is_none() {
        return Err(Error::Config("infer needs a full model checkpoint".into()));
    }
    let pred = predict(
        &mut model,
        &[sample],
        cfg.eval.input,
        &cfg.eval.error_synth,
        &t.symmetry_pairs,
        1,
    )?;
    let mesh = pred[0].mesh.as_ref().expect("full model predicts a mesh");
    let path = out.join(format!("mesh_{index}.obj"));
    write_obj(&path, mesh, &t.faces)?;
    println!("{}", path.display());
    Ok(())
}

fn export_obj(cfg: &RunConfig, index: Option<usize>) -> Result<()> {
    let out = required(&cfg.paths.out, "out")?;
    let t = template(cfg)?;
    let (path, vertices) = match index {
        None => (out.join("template.obj"), t.vertices.clone()),
        Some(i) => {
            let data = dataset(cfg)?;
            let mesh = sample_at(&data, i)?
                .mesh_gt
                .clone()
                .ok_or_else(|| Error::Config(format!("sample {i} has no mesh")))?;
            (out.join(format!("sample_{i}.obj")), mesh)
        }
    };
    if vertices.len() != t.num_vertices() {
        return Err(Error::Mismatch(format!(
            "mesh has {} vertices, template {}",
            vertices.len(),
            t.num_vertices()
        )));
    }
    write_obj(&path, &vertices, &t.faces)?;
    println!("{}", path.display());
    Ok(())
}
