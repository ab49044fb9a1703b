//! The three miniature search spaces, architecture encoding, enumeration and
//! the weight-sharing supernet.

mod arch;
mod def;
mod gene;
mod supernet;

pub use arch::{
    count_architectures, count_block_paths, draw_unconstrained, encode_path, entry_scale,
    enumerate_architectures, enumerate_block_paths, enumerate_block_paths_at, path_exit_scale,
    reachable_entry_scales, sample_architectures, sample_paths, sample_paths_with,
    validate_architecture, validate_hytra_path, Architecture, PathValidity,
};
pub use def::{LayerDef, ScaleRules, SearchSpaceDef, SpaceName, DEFAULT_TRAVERSAL_CAP};
pub use gene::Gene;
pub use supernet::{NodeKey, Supernet, MBCONV_CANDIDATES};
