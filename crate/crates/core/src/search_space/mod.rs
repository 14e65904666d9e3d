//! The fusion search space: operators, cells, the relaxed fusion network and
//! the parallel task head, architecture weights and latency accounting.

mod arch;
mod cell;
mod config;
mod network;
mod operator;
mod params;

pub use arch::{
    derive_architecture, latency_regularizer, latency_term, parse_manifest, ArchitectureWeights,
    BoundArch, DiscreteArchitecture, EdgeLogits, LatencyTable, ManifestCell,
};
pub use cell::{CellKind, CellSpec, Mixing};
pub use config::{
    CellConfig, CustomOperator, NetworkLayout, SearchSpaceConfig, TaskLayout,
    DEFAULT_FUSION_CANDIDATES, DEFAULT_WIDTH,
};
pub use network::{
    build_fusion_network, build_task_head, ArchRef, FusionNetwork, Supernet, TaskHead, TaskKind,
};
pub use operator::{BoundOperator, OperatorKind, OperatorSpec, SPATIAL_ATTENTION_KERNEL};
pub use params::{NetworkParams, ParamVars};

use crate::error::Result;
use crate::tensor::Tensor;

/// Relaxed forward pass of the fusion network: every edge outputs the
/// normalized-weight combination of its candidates' outputs.
pub fn mixed_forward(
    net: &FusionNetwork,
    alpha: &ArchitectureWeights,
    params: &NetworkParams,
    a: &Tensor,
    b: &Tensor,
) -> Result<Tensor> {
    alpha.check_against(net)?;
    net.fuse(params, ArchRef::Logits(alpha), a, b)
}
