//! Routing of text conditionings to (cross-attention layer, timestep) cells.
//!
//! Layers are partitioned into subsets, the forward process `[0, 1000)` into
//! half-open stages, and a [`ConditioningGrid`] assigns one prompt to every
//! (subset, stage) pair. The denoiser's layer `i` at timestep `t` receives
//! `grid.resolve(i, t)`.

mod grid;
mod partition;
mod schedule;
mod spec;

use thiserror::Error;

pub use grid::{CellKey, CellPrompt, ConditioningGrid, GridMode};
pub use partition::*;
pub use schedule::{expand_prompt, Activity, ExpandPolicy, TokenSchedule};
pub use spec::GridDocument;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GridError {
    #[error("layer {layer} appears in both `{first}` and `{second}`")]
    OverlappingSubsets {
        layer: usize,
        first: String,
        second: String,
    },
    #[error("layer index {0} outside 1..16")]
    LayerOutOfRange(usize),
    #[error("layer {0} is not covered by any subset")]
    UncoveredLayer(usize),
    #[error("layer subset `{0}` is empty")]
    EmptySubset(String),
    #[error("unsupported layer resolution {0}")]
    InvalidResolution(u32),
    #[error("timestep gap [{lo},{hi})")]
    TimestepGap { lo: usize, hi: usize },
    #[error("timestep overlap [{lo},{hi})")]
    TimestepOverlap { lo: usize, hi: usize },
    #[error("stage `{id}` has invalid interval [{lo},{hi})")]
    InvalidInterval { id: String, lo: usize, hi: usize },
    #[error("timestep {0} outside [0,1000)")]
    TimestepOutOfRange(usize),
    #[error("invalid id `{0}` (must be non-empty and contain no `.`)")]
    InvalidId(String),
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("missing cell {0}")]
    MissingCell(String),
    #[error("unexpected cell {0}")]
    ExtraCell(String),
    #[error("{mode} grid cannot have {subsets} subsets x {stages} stages")]
    ModeShape {
        mode: GridMode,
        subsets: usize,
        stages: usize,
    },
    #[error("uniform grid has differing cells")]
    NonUniform,
    #[error("cell has neither text nor embedded conditioning")]
    EmptyCell,
    #[error("placeholder {0} appears more than once in a cell")]
    RepeatedPlaceholder(String),
    #[error("unknown placeholder token {0}")]
    UnknownPlaceholder(String),
    #[error("`{0}` is not a placeholder token")]
    NotAPlaceholder(String),
    #[error("unknown layer subset `{0}`")]
    UnknownSubset(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("grid config: {0}")]
    Config(String),
}
