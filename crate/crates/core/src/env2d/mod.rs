//! Synthetic spatially consistent wideband environment and epsilon-outage
//! capacity maps.

mod capacity;
mod field;
mod generator;
mod grid;

pub use capacity::{
    capacity_samples, fading_realization, outage_capacity_map, point_capacity_samples,
    FadingSampler, OutageCapacityMap,
};
pub use field::{FieldMethod, GaussianField, Kernel, CHOLESKY_MAX_POINTS, VECCHIA_NEIGHBORS};
pub use generator::{generate_environment, BaseStation, CellRect, EnvConfig, EnvironmentMap};
pub use grid::GridGeometry;
