//! Habitat graphs and the predator-prey scenarios built on them.
//!
//! Six-patch graphs are numbered `p0..p5`. The grid is 2x3, row-major
//! (`p0 p1 p2` over `p3 p4 p5`). The random graph's default edge set is
//! reconstructed from structural facts about it: `p4` has the highest degree
//! (four), exactly one length-2 path joins `p2` and `p5`, and `p3` lies at
//! distance three from `p2`. Pass explicit edges to [`build_random`] to use
//! a different one.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::model::{
    Count, MetapopulationModel, ReactionRule, SpeciesTable, TopologyGraph, Volume,
};

/// Prey birth `A + X -> 2X`.
pub const PREY_BIRTH: f64 = 0.1;
/// Predation `X + Y -> 2Y`.
pub const PREDATION: f64 = 0.01;
/// Predator death `Y -> 0`.
pub const PREDATOR_DEATH: f64 = 10.0;
pub const RESOURCE: Count = 200;
pub const PREY_INIT: Count = 1000;
pub const PREDATOR_INIT: Count = 1000;
/// Per-patch dispersal budget of the degree-weighted condition.
pub const DEGREE_WEIGHTED_TOTAL: f64 = 10.0;
pub const DEFAULT_NODES: usize = 6;

pub const RANDOM_DEFAULT_EDGES: [(usize, usize); 6] = [(0, 1), (0, 4), (1, 4), (2, 4), (4, 5), (3, 5)];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("unknown topology `{0}`")]
    UnknownTopology(String),
    #[error("unknown migration condition `{0}` (expected cond1..cond4)")]
    UnknownMigration(String),
    #[error("unknown initial condition `{0}` (expected IC1..IC4)")]
    UnknownInitialCondition(String),
    #[error("the set of Lotka-Volterra patches must not be empty")]
    EmptyLvSet,
    #[error("patch `{0}` is not part of the graph")]
    UnknownPatch(String),
    #[error("malformed scenario id `{0}`")]
    MalformedScenario(String),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TopologyKind {
    Chain,
    Grid,
    Star,
    Ring,
    Complete,
    Random,
}

impl TopologyKind {
    pub const ALL: [TopologyKind; 6] = [
        TopologyKind::Chain,
        TopologyKind::Grid,
        TopologyKind::Star,
        TopologyKind::Ring,
        TopologyKind::Complete,
        TopologyKind::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Chain => "chain",
            TopologyKind::Grid => "grid",
            TopologyKind::Star => "star",
            TopologyKind::Ring => "ring",
            TopologyKind::Complete => "complete",
            TopologyKind::Random => "random",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TopologyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| TopologyError::UnknownTopology(s.to_string()))
    }
}

fn graph(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> TopologyGraph {
    let mut g = TopologyGraph::new(n);
    for (a, b) in edges {
        g.add_edge(a, b, 1.0).expect("generated edge is valid");
    }
    g
}

pub fn build_chain(n: usize) -> TopologyGraph {
    graph(n, (1..n).map(|i| (i - 1, i)))
}

pub fn build_ring(n: usize) -> TopologyGraph {
    let mut g = build_chain(n);
    if n > 2 {
        g.add_edge(n - 1, 0, 1.0).expect("ring closure");
    }
    g
}

/// Star with hub `0`.
pub fn build_star(n: usize) -> TopologyGraph {
    graph(n, (1..n).map(|i| (0, i)))
}

pub fn build_complete(n: usize) -> TopologyGraph {
    graph(n, (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))))
}

/// Row-major lattice with 4-neighborhood.
pub fn build_grid(rows: usize, cols: usize) -> TopologyGraph {
    let id = |r: usize, c: usize| r * cols + c;
    let horizontal = (0..rows).flat_map(move |r| (1..cols).map(move |c| (id(r, c - 1), id(r, c))));
    let vertical = (1..rows).flat_map(move |r| (0..cols).map(move |c| (id(r - 1, c), id(r, c))));
    graph(rows * cols, horizontal.chain(vertical))
}

pub fn build_random(n: usize, edges: &[(usize, usize)]) -> Result<TopologyGraph, TopologyError> {
    Ok(TopologyGraph::from_edges(n, edges)?)
}

/// Six-node graph of the given kind.
pub fn build_graph(kind: TopologyKind) -> TopologyGraph {
    match kind {
        TopologyKind::Chain => build_chain(DEFAULT_NODES),
        TopologyKind::Grid => build_grid(2, 3),
        TopologyKind::Star => build_star(DEFAULT_NODES),
        TopologyKind::Ring => build_ring(DEFAULT_NODES),
        TopologyKind::Complete => build_complete(DEFAULT_NODES),
        TopologyKind::Random => graph(DEFAULT_NODES, RANDOM_DEFAULT_EDGES),
    }
}

/// How dispersal constants are assigned to the rules leaving a patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MigrationCondition {
    /// Every edge gets the same constant.
    Uniform(f64),
    /// Each patch splits `total` evenly over its edges: `total / deg`.
    DegreeWeighted(f64),
}

impl MigrationCondition {
    /// The four numbered conditions: 1, 10 and 20 per edge, or 10 per patch.
    pub fn numbered(k: u8) -> Option<Self> {
        match k {
            1 => Some(MigrationCondition::Uniform(1.0)),
            2 => Some(MigrationCondition::Uniform(10.0)),
            3 => Some(MigrationCondition::Uniform(20.0)),
            4 => Some(MigrationCondition::DegreeWeighted(DEGREE_WEIGHTED_TOTAL)),
            _ => None,
        }
    }

    pub fn number(&self) -> Option<u8> {
        (1..=4).find(|&k| MigrationCondition::numbered(k).as_ref() == Some(self))
    }

    pub fn constant_for_degree(&self, degree: usize) -> f64 {
        match *self {
            MigrationCondition::Uniform(c) => c,
            MigrationCondition::DegreeWeighted(total) => total / degree as f64,
        }
    }
}

impl fmt::Display for MigrationCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.number(), self) {
            (Some(k), _) => write!(f, "cond{k}"),
            (None, MigrationCondition::Uniform(c)) => write!(f, "uniform({c})"),
            (None, MigrationCondition::DegreeWeighted(t)) => write!(f, "degree-weighted({t})"),
        }
    }
}

impl FromStr for MigrationCondition {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.strip_prefix("cond")
            .and_then(|k| k.parse::<u8>().ok())
            .and_then(MigrationCondition::numbered)
            .ok_or_else(|| TopologyError::UnknownMigration(s.to_string()))
    }
}

/// Initial conditions for colonization runs: dispersal constant and the
/// prey count of each predator-free patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InitialCondition {
    Ic1,
    Ic2,
    Ic3,
    Ic4,
}

impl InitialCondition {
    pub const ALL: [InitialCondition; 4] = [
        InitialCondition::Ic1,
        InitialCondition::Ic2,
        InitialCondition::Ic3,
        InitialCondition::Ic4,
    ];

    pub fn dispersal_constant(self) -> f64 {
        match self {
            InitialCondition::Ic1 | InitialCondition::Ic2 => 1.0,
            InitialCondition::Ic3 | InitialCondition::Ic4 => 10.0,
        }
    }

    pub fn empty_patch_prey(self) -> Count {
        match self {
            InitialCondition::Ic1 | InitialCondition::Ic3 => 10,
            InitialCondition::Ic2 | InitialCondition::Ic4 => 100,
        }
    }
}

impl fmt::Display for InitialCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let k = InitialCondition::ALL.iter().position(|c| c == self).unwrap() + 1;
        write!(f, "IC{k}")
    }
}

impl FromStr for InitialCondition {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "IC1" => Ok(InitialCondition::Ic1),
            "IC2" => Ok(InitialCondition::Ic2),
            "IC3" => Ok(InitialCondition::Ic3),
            "IC4" => Ok(InitialCondition::Ic4),
            _ => Err(TopologyError::UnknownInitialCondition(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ColonizationCondition {
    pub ic: InitialCondition,
    /// Patches started with the full predator-prey state.
    pub lv_set: BTreeSet<usize>,
}

impl ColonizationCondition {
    pub fn new(ic: InitialCondition, lv_set: impl IntoIterator<Item = usize>) -> Self {
        ColonizationCondition {
            ic,
            lv_set: lv_set.into_iter().collect(),
        }
    }
}

pub fn patch_name(i: usize) -> String {
    format!("p{i}")
}

/// Species `A` (buffered), `X`, `Y` and the internal rules r1..r3.
pub fn lotka_volterra_species() -> (SpeciesTable, Vec<ReactionRule>) {
    let species = SpeciesTable::new([("A", true), ("X", false), ("Y", false)]).expect("static table");
    let (a, x, y) = (0, 1, 2);
    let rules = vec![
        ReactionRule::internal("r1", &[(a, 1), (x, 1)], &[(x, 2)], PREY_BIRTH).unwrap(),
        ReactionRule::internal("r2", &[(x, 1), (y, 1)], &[(y, 2)], PREDATION).unwrap(),
        ReactionRule::internal("r3", &[(y, 1)], &[], PREDATOR_DEATH).unwrap(),
    ];
    (species, rules)
}

/// One dispersal rule per neighbor for every patch, ids `d_p<j>`.
pub fn assign_dispersal(
    graph: &TopologyGraph,
    condition: MigrationCondition,
    species: usize,
) -> Vec<Vec<ReactionRule>> {
    (0..graph.n)
        .map(|i| {
            let adj = graph.adjacency(i);
            let c = condition.constant_for_degree(adj.len());
            adj.into_iter()
                .map(|j| {
                    ReactionRule::dispersal(format!("d_{}", patch_name(j)), species, c, j)
                        .expect("dispersal constants are non-negative")
                })
                .collect()
        })
        .collect()
}

fn lv_model_on(
    graph: TopologyGraph,
    condition: MigrationCondition,
    initial: impl Fn(usize) -> (Count, Count),
) -> MetapopulationModel {
    let (species, internal) = lotka_volterra_species();
    let y = species.index_of("Y").unwrap();
    let dispersal = assign_dispersal(&graph, condition, y);
    let volumes = dispersal
        .into_iter()
        .enumerate()
        .map(|(i, rules)| {
            let (x0, y0) = initial(i);
            let mut v = Volume::new(i, patch_name(i), vec![RESOURCE, x0, y0]);
            v.rules = internal.iter().cloned().chain(rules).collect();
            v
        })
        .collect();
    MetapopulationModel {
        species,
        graph,
        volumes,
        time: 0.0,
    }
}

/// Every patch starts from the full predator-prey state.
pub fn migration_model_on(graph: TopologyGraph, condition: MigrationCondition) -> MetapopulationModel {
    lv_model_on(graph, condition, |_| (PREY_INIT, PREDATOR_INIT))
}

pub fn build_migration_model(kind: TopologyKind, condition: MigrationCondition) -> MetapopulationModel {
    migration_model_on(build_graph(kind), condition)
}

/// Patches in `lv_set` start with the full state; the rest have no predators
/// and the condition's prey count. All patches carry r1..r3.
pub fn colonization_model_on(
    graph: TopologyGraph,
    colonization: &ColonizationCondition,
) -> Result<MetapopulationModel, TopologyError> {
    if colonization.lv_set.is_empty() {
        return Err(TopologyError::EmptyLvSet);
    }
    if let Some(&bad) = colonization.lv_set.iter().find(|&&i| i >= graph.n) {
        return Err(TopologyError::UnknownPatch(patch_name(bad)));
    }
    let ic = colonization.ic;
    let condition = MigrationCondition::Uniform(ic.dispersal_constant());
    Ok(lv_model_on(graph, condition, |i| {
        if colonization.lv_set.contains(&i) {
            (PREY_INIT, PREDATOR_INIT)
        } else {
            (ic.empty_patch_prey(), 0)
        }
    }))
}

pub fn build_colonization_model(
    kind: TopologyKind,
    colonization: &ColonizationCondition,
) -> Result<MetapopulationModel, TopologyError> {
    colonization_model_on(build_graph(kind), colonization)
}

/// Parses `p0,p5` (or `0,5`) into node indices.
pub fn parse_patch_set(s: &str) -> Result<BTreeSet<usize>, TopologyError> {
    s.split(',')
        .map(|t| {
            let t = t.trim();
            t.strip_prefix('p')
                .unwrap_or(t)
                .parse::<usize>()
                .map_err(|_| TopologyError::UnknownPatch(t.to_string()))
        })
        .collect()
}

pub fn format_patch_set(set: &BTreeSet<usize>) -> String {
    set.iter().map(|&i| patch_name(i)).collect::<Vec<_>>().join(",")
}

/// A built-in experiment, addressable as `migration:<topology>:cond<k>` or
/// `colonization:<topology>:IC<k>:<patches>`.
#[derive(Debug, Clone, PartialEq)]
pub enum Scenario {
    Migration {
        kind: TopologyKind,
        condition: MigrationCondition,
    },
    Colonization {
        kind: TopologyKind,
        colonization: ColonizationCondition,
    },
}

impl Scenario {
    pub fn build(&self) -> Result<MetapopulationModel, TopologyError> {
        match self {
            Scenario::Migration { kind, condition } => Ok(build_migration_model(*kind, *condition)),
            Scenario::Colonization { kind, colonization } => {
                build_colonization_model(*kind, colonization)
            }
        }
    }

    pub fn kind(&self) -> TopologyKind {
        match self {
            Scenario::Migration { kind, .. } | Scenario::Colonization { kind, .. } => *kind,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scenario::Migration { kind, condition } => write!(f, "migration:{kind}:{condition}"),
            Scenario::Colonization { kind, colonization } => write!(
                f,
                "colonization:{kind}:{}:{}",
                colonization.ic,
                format_patch_set(&colonization.lv_set)
            ),
        }
    }
}

impl FromStr for Scenario {
    type Err = TopologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts.as_slice() {
            ["migration", kind, cond] => Ok(Scenario::Migration {
                kind: kind.parse()?,
                condition: cond.parse()?,
            }),
            ["colonization", kind, ic, lv] => {
                let kind: TopologyKind = kind.parse()?;
                let lv_set = parse_patch_set(lv)?;
                if let Some(&bad) = lv_set.iter().find(|&&i| i >= DEFAULT_NODES) {
                    return Err(TopologyError::UnknownPatch(patch_name(bad)));
                }
                Ok(Scenario::Colonization {
                    kind,
                    colonization: ColonizationCondition {
                        ic: ic.parse()?,
                        lv_set,
                    },
                })
            }
            _ => Err(TopologyError::MalformedScenario(s.to_string())),
        }
    }
}

/// Placements of the initial predator-prey patches studied per topology.
pub const COLONIZATION_PLACEMENTS: &[(TopologyKind, &[usize])] = &[
    (TopologyKind::Chain, &[0, 5]),
    (TopologyKind::Chain, &[2]),
    (TopologyKind::Chain, &[0]),
    (TopologyKind::Grid, &[0]),
    (TopologyKind::Grid, &[1]),
    (TopologyKind::Star, &[1]),
    (TopologyKind::Star, &[1, 3]),
    (TopologyKind::Star, &[0]),
    (TopologyKind::Ring, &[0]),
    (TopologyKind::Complete, &[0]),
    (TopologyKind::Complete, &[0, 3]),
    (TopologyKind::Random, &[0]),
    (TopologyKind::Random, &[2]),
    (TopologyKind::Random, &[3]),
];

pub fn migration_scenarios() -> Vec<Scenario> {
    TopologyKind::ALL
        .into_iter()
        .flat_map(|kind| {
            (1..=4).map(move |k| Scenario::Migration {
                kind,
                condition: MigrationCondition::numbered(k).unwrap(),
            })
        })
        .collect()
}

pub fn colonization_scenarios() -> Vec<Scenario> {
    COLONIZATION_PLACEMENTS
        .iter()
        .flat_map(|&(kind, lv)| {
            InitialCondition::ALL.into_iter().map(move |ic| Scenario::Colonization {
                kind,
                colonization: ColonizationCondition::new(ic, lv.iter().copied()),
            })
        })
        .collect()
}

/// All built-in scenarios: migration first, then colonization.
pub fn all_scenarios() -> Vec<Scenario> {
    let mut all = migration_scenarios();
    all.extend(colonization_scenarios());
    all
}
