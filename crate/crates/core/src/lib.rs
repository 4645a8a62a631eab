//! Stochastic multivolume simulation of metapopulations.
//!
//! A model is a set of patches (volumes) on an undirected habitat graph.
//! Each patch runs its own mass-action rule system, and dispersal rules
//! move individuals to adjacent patches. All patches advance together with
//! a common tau-leap, exchanging dispersed individuals at step boundaries.
//!
//! ```
//! use metasim::{coordinator, topology, SimulationConfig};
//! use metasim::topology::{MigrationCondition, TopologyKind};
//!
//! let model = topology::build_migration_model(
//!     TopologyKind::Ring,
//!     MigrationCondition::numbered(4).unwrap(),
//! );
//! let config = SimulationConfig { t_end: 0.5, seed: 7, ..Default::default() };
//! let trajectory = coordinator::run(model, config).unwrap();
//! assert_eq!(trajectory.times.len(), 51);
//! ```

// `!(x > 0.0)` deliberately treats NaN as non-positive.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod coordinator;
pub mod kinetics;
pub mod model;
pub mod modelspec;
pub mod rng;
pub mod topology;
pub mod trajectory;

pub use model::{
    validate_model, Count, Engine, MetapopulationModel, ModelError, ReactionRule, SimulationConfig,
    SpeciesTable, TopologyGraph, Volume,
};
pub use trajectory::Trajectory;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/kinetics.md")]
    mod kinetics {}
    #[doc = include_str!("../../../book/src/coordinator.md")]
    mod coordinator {}
    #[doc = include_str!("../../../book/src/topologies.md")]
    mod topologies {}
    #[doc = include_str!("../../../book/src/modelspec.md")]
    mod modelspec {}
    #[doc = include_str!("../../../book/src/analysis.md")]
    mod analysis {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
