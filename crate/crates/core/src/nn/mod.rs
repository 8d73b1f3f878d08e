//! Layers, parameter storage and the PoseNet / MeshNet assemblies.

mod layers;
mod meshnet;
mod model;
mod params;
mod posenet;

pub use layers::{
    add_bias, dropout, fan_in_uniform, relu_dropout, BatchNorm1d, ChebConv, GraphConvBlock, Linear, BN_EPS, BN_MOMENTUM,
};
pub use meshnet::{resolve_widths, MeshNet, MeshStage, ResidualMode};
pub use model::{ModelConfig, ModelManifest, Nets, Pose2Mesh, MESHNET, POSENET};
pub use params::{Mode, Param, ParamId, ParamStore, Session};
pub use posenet::{PoseNet, ResidualBlock};
