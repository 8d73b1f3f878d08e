//! Templates, samples, pose preprocessing, the procedural body generator and file formats.

mod generator;
mod io;
mod pose;
mod template;

pub use generator::{
    forward_kinematics, generate_synthetic_dataset, generate_template, linear_blend_skinning, pose_template,
    sample_pose, JointSpec, TemplateSpec,
};
pub use io::{
    format_g6, load_dataset, load_template, obj_string, parse_obj, save_dataset, save_template, write_obj, Checkpoint,
    CheckpointManifest, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use pose::{normalize_2d_pose, synthesize_pose_errors, Camera, ErrorSynthConfig, PoseNormalization, PoseSample};
pub use template::MeshTemplate;
