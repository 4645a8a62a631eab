//! Domain types: species, rules, volumes, the habitat graph and the whole
//! multivolume model, plus structural validation.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Individuals are counted with signed 64-bit integers so that a tentative
/// update can be checked for negativity before it is committed.
pub type Count = i64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("species name must not be empty")]
    EmptySpeciesName,
    #[error("duplicate species `{0}`")]
    DuplicateSpecies(String),
    #[error("species index {index} out of range (table has {len} species)")]
    SpeciesOutOfRange { index: usize, len: usize },
    #[error("node index {index} out of range (graph has {n} nodes)")]
    NodeOutOfRange { index: usize, n: usize },
    #[error("self-edge on node {0} is not allowed")]
    SelfEdge(usize),
    #[error("edge weight must be positive, got {0}")]
    BadWeight(f64),
    #[error("stochastic constant must be finite and non-negative, got {0}")]
    BadConstant(f64),
    #[error("stoichiometry must be positive")]
    ZeroStoichiometry,
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error("model is not runnable: {0} violation(s), first: {1}")]
    Invalid(usize, Violation),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Species {
    pub name: String,
    /// Buffered species enter propensities but are never changed by a rule.
    pub buffered: bool,
}

/// Ordered species declarations. The position of a species is its index in
/// every count vector of the model.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SpeciesTable {
    entries: Vec<Species>,
}

impl SpeciesTable {
    pub fn new<I, S>(entries: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (S, bool)>,
        S: Into<String>,
    {
        let mut table = SpeciesTable::default();
        for (name, buffered) in entries {
            table.push(name, buffered)?;
        }
        Ok(table)
    }

    pub fn push(&mut self, name: impl Into<String>, buffered: bool) -> Result<usize, ModelError> {
        let name = name.into();
        if name.is_empty() {
            return Err(ModelError::EmptySpeciesName);
        }
        if self.index_of(&name).is_some() {
            return Err(ModelError::DuplicateSpecies(name));
        }
        self.entries.push(Species { name, buffered });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|s| s.name == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.entries[index].name
    }

    pub fn is_buffered(&self, index: usize) -> bool {
        self.entries[index].buffered
    }

    pub fn iter(&self) -> impl Iterator<Item = &Species> {
        self.entries.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|s| s.name.clone()).collect()
    }

    fn check_index(&self, index: usize) -> Result<(), ModelError> {
        if index < self.len() {
            Ok(())
        } else {
            Err(ModelError::SpeciesOutOfRange {
                index,
                len: self.len(),
            })
        }
    }
}

/// A mass-action rule. Reactants and products are sparse stoichiometry maps
/// stored as vectors sorted by species index with no repeated species.
///
/// When `target` is set the rule is a dispersal (communication) rule: one
/// individual of its single reactant leaves this volume for `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReactionRule {
    pub id: String,
    pub reactants: Vec<(usize, u32)>,
    pub products: Vec<(usize, u32)>,
    pub constant: f64,
    pub target: Option<usize>,
}

fn normalize_terms(terms: &[(usize, u32)]) -> Result<Vec<(usize, u32)>, ModelError> {
    let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
    for &(species, stoich) in terms {
        if stoich == 0 {
            return Err(ModelError::ZeroStoichiometry);
        }
        *merged.entry(species).or_default() += stoich;
    }
    Ok(merged.into_iter().collect())
}

fn check_constant(constant: f64) -> Result<(), ModelError> {
    if constant.is_finite() && constant >= 0.0 {
        Ok(())
    } else {
        Err(ModelError::BadConstant(constant))
    }
}

impl ReactionRule {
    /// Internal rule; repeated species in either side are merged, so
    /// `[(x, 1), (x, 1)]` becomes `[(x, 2)]`.
    pub fn internal(
        id: impl Into<String>,
        reactants: &[(usize, u32)],
        products: &[(usize, u32)],
        constant: f64,
    ) -> Result<Self, ModelError> {
        check_constant(constant)?;
        Ok(ReactionRule {
            id: id.into(),
            reactants: normalize_terms(reactants)?,
            products: normalize_terms(products)?,
            constant,
            target: None,
        })
    }

    /// Dispersal rule `S -> (S, target)`.
    pub fn dispersal(
        id: impl Into<String>,
        species: usize,
        constant: f64,
        target: usize,
    ) -> Result<Self, ModelError> {
        check_constant(constant)?;
        Ok(ReactionRule {
            id: id.into(),
            reactants: vec![(species, 1)],
            products: vec![(species, 1)],
            constant,
            target: Some(target),
        })
    }

    pub fn is_dispersal(&self) -> bool {
        self.target.is_some()
    }

    /// Molecularity: total reactant stoichiometry.
    pub fn order(&self) -> u32 {
        self.reactants.iter().map(|&(_, k)| k).sum()
    }

    /// The species moved by a dispersal rule.
    pub fn dispersed_species(&self) -> Option<usize> {
        self.target.map(|_| self.reactants[0].0)
    }
}

/// State change caused by one firing of a rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetChange {
    /// Change applied in the volume that owns the rule.
    pub source: Vec<Count>,
    /// For dispersal rules, the target volume and the change delivered there.
    pub target: Option<(usize, Vec<Count>)>,
}

/// Products minus reactants with buffered species forced to zero. A
/// dispersal rule yields `-1` locally and `+1` at its target.
pub fn net_change(rule: &ReactionRule, species: &SpeciesTable) -> Result<NetChange, ModelError> {
    let mut source = vec![0; species.len()];
    for &(s, _) in rule.reactants.iter().chain(&rule.products) {
        species.check_index(s)?;
    }
    if let Some(target) = rule.target {
        let s = rule.reactants[0].0;
        let mut incoming = vec![0; species.len()];
        if !species.is_buffered(s) {
            source[s] = -1;
            incoming[s] = 1;
        }
        return Ok(NetChange {
            source,
            target: Some((target, incoming)),
        });
    }
    for &(s, k) in &rule.reactants {
        source[s] -= Count::from(k);
    }
    for &(s, k) in &rule.products {
        source[s] += Count::from(k);
    }
    for (s, delta) in source.iter_mut().enumerate() {
        if species.is_buffered(s) {
            *delta = 0;
        }
    }
    Ok(NetChange {
        source,
        target: None,
    })
}

/// A patch: integer counts and the rules that act on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Volume {
    pub index: usize,
    pub name: String,
    /// Patch area. Carried for completeness; kinetics do not scale by it.
    pub area: f64,
    pub counts: Vec<Count>,
    pub rules: Vec<ReactionRule>,
}

impl Volume {
    pub fn new(index: usize, name: impl Into<String>, counts: Vec<Count>) -> Self {
        Volume {
            index,
            name: name.into(),
            area: 1.0,
            counts,
            rules: Vec::new(),
        }
    }
}

/// Undirected weighted graph without self-edges. Edges are keyed by
/// `(min, max)` node pairs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TopologyGraph {
    pub n: usize,
    pub edges: BTreeMap<(usize, usize), f64>,
}

impl TopologyGraph {
    pub fn new(n: usize) -> Self {
        TopologyGraph {
            n,
            edges: BTreeMap::new(),
        }
    }

    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, ModelError> {
        let mut graph = TopologyGraph::new(n);
        for &(a, b) in edges {
            graph.add_edge(a, b, 1.0)?;
        }
        Ok(graph)
    }

    pub fn add_edge(&mut self, a: usize, b: usize, weight: f64) -> Result<(), ModelError> {
        for node in [a, b] {
            if node >= self.n {
                return Err(ModelError::NodeOutOfRange {
                    index: node,
                    n: self.n,
                });
            }
        }
        if a == b {
            return Err(ModelError::SelfEdge(a));
        }
        if !(weight.is_finite() && weight > 0.0) {
            return Err(ModelError::BadWeight(weight));
        }
        self.edges.insert((a.min(b), a.max(b)), weight);
        Ok(())
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains_key(&(a.min(b), a.max(b)))
    }

    /// Neighbors of `node` in increasing index order.
    pub fn adjacency(&self, node: usize) -> Vec<usize> {
        let mut adj: Vec<usize> = self
            .edges
            .keys()
            .filter_map(|&(a, b)| {
                if a == node {
                    Some(b)
                } else if b == node {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        adj.sort_unstable();
        adj.dedup();
        adj
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency(node).len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Hop distances from `source` (breadth-first); `None` for unreachable nodes.
    pub fn distances(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        let mut frontier = vec![source];
        dist[source] = Some(0);
        let mut d = 0;
        while !frontier.is_empty() {
            d += 1;
            let mut next = Vec::new();
            for &u in &frontier {
                for v in self.adjacency(u) {
                    if dist[v].is_none() {
                        dist[v] = Some(d);
                        next.push(v);
                    }
                }
            }
            frontier = next;
        }
        dist
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetapopulationModel {
    pub species: SpeciesTable,
    pub graph: TopologyGraph,
    pub volumes: Vec<Volume>,
    pub time: f64,
}

impl MetapopulationModel {
    pub fn volume_index(&self, name: &str) -> Option<usize> {
        self.volumes.iter().position(|v| v.name == name)
    }

    /// Sum of one species over all volumes.
    pub fn total(&self, species: usize) -> Count {
        self.volumes.iter().map(|v| v.counts[species]).sum()
    }

    /// Every invariant violation, or `Ok(())` if the model can be simulated.
    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let mut violations = validate_model(self);
        if violations.is_empty() {
            return Ok(());
        }
        let n = violations.len();
        Err(ModelError::Invalid(n, violations.swap_remove(0)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    NoDynamicSpecies,
    VolumeCountMismatch,
    VolumeIndexMismatch,
    CountLengthMismatch,
    NegativeCount,
    NonPositiveArea,
    SelfEdge,
    EdgeOutOfRange,
    BadEdgeWeight,
    SpeciesOutOfRange,
    BadConstant,
    ZeroStoichiometry,
    MalformedDispersal,
    DanglingTarget,
    NegativeTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// Human-readable location, e.g. `volume p0, rule d_p3`.
    pub location: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

/// Lists every structural problem in `model`. An empty list means the model
/// is runnable.
pub fn validate_model(model: &MetapopulationModel) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, location: String, message: String| {
        out.push(Violation {
            kind,
            location,
            message,
        })
    };
    let ns = model.species.len();

    if !model.species.iter().any(|s| !s.buffered) {
        push(
            ViolationKind::NoDynamicSpecies,
            "species".into(),
            "at least one non-buffered species is required".into(),
        );
    }
    if !(model.time >= 0.0) {
        push(
            ViolationKind::NegativeTime,
            "model".into(),
            format!("clock must be non-negative, got {}", model.time),
        );
    }
    if model.volumes.len() != model.graph.n {
        push(
            ViolationKind::VolumeCountMismatch,
            "graph".into(),
            format!(
                "{} volumes but graph has {} nodes",
                model.volumes.len(),
                model.graph.n
            ),
        );
    }
    for (&(a, b), &w) in &model.graph.edges {
        let location = format!("edge ({a},{b})");
        if a == b {
            push(ViolationKind::SelfEdge, location.clone(), "self-edge".into());
        }
        if a >= model.graph.n || b >= model.graph.n {
            push(
                ViolationKind::EdgeOutOfRange,
                location.clone(),
                "endpoint outside graph".into(),
            );
        }
        if !(w.is_finite() && w > 0.0) {
            push(
                ViolationKind::BadEdgeWeight,
                location,
                format!("weight must be positive, got {w}"),
            );
        }
    }

    for (i, volume) in model.volumes.iter().enumerate() {
        let vloc = format!("volume {}", volume.name);
        if volume.index != i {
            push(
                ViolationKind::VolumeIndexMismatch,
                vloc.clone(),
                format!("stored index {} at position {i}", volume.index),
            );
        }
        if !(volume.area.is_finite() && volume.area > 0.0) {
            push(
                ViolationKind::NonPositiveArea,
                vloc.clone(),
                format!("area must be positive, got {}", volume.area),
            );
        }
        if volume.counts.len() != ns {
            push(
                ViolationKind::CountLengthMismatch,
                vloc.clone(),
                format!("{} counts for {ns} species", volume.counts.len()),
            );
        }
        for (s, &c) in volume.counts.iter().enumerate() {
            if c < 0 {
                push(
                    ViolationKind::NegativeCount,
                    format!("{vloc}, species #{s}"),
                    format!("count {c} is negative"),
                );
            }
        }
        for rule in &volume.rules {
            let rloc = format!("{vloc}, rule {}", rule.id);
            if !(rule.constant.is_finite() && rule.constant >= 0.0) {
                push(
                    ViolationKind::BadConstant,
                    rloc.clone(),
                    format!("constant {} is not a non-negative number", rule.constant),
                );
            }
            for &(s, k) in rule.reactants.iter().chain(&rule.products) {
                if s >= ns {
                    push(
                        ViolationKind::SpeciesOutOfRange,
                        rloc.clone(),
                        format!("species index {s} out of range"),
                    );
                }
                if k == 0 {
                    push(
                        ViolationKind::ZeroStoichiometry,
                        rloc.clone(),
                        "zero stoichiometry".into(),
                    );
                }
            }
            if let Some(target) = rule.target {
                let single = rule.reactants.len() == 1
                    && rule.reactants[0].1 == 1
                    && rule.products == rule.reactants;
                if !single {
                    push(
                        ViolationKind::MalformedDispersal,
                        rloc.clone(),
                        "dispersal rules must move exactly one individual of one species".into(),
                    );
                }
                let adjacent = target < model.graph.n && target != i && model.graph.has_edge(i, target);
                if !adjacent {
                    let tname = model
                        .volumes
                        .get(target)
                        .map_or_else(|| format!("#{target}"), |v| v.name.clone());
                    push(
                        ViolationKind::DanglingTarget,
                        rloc,
                        format!("target {tname} is not adjacent to {}", volume.name),
                    );
                }
            }
        }
    }
    out
}

/// Which simulation algorithm drives a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Engine {
    ExactSsa,
    TauLeap,
}

impl fmt::Display for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Engine::ExactSsa => "ssa",
            Engine::TauLeap => "tau",
        })
    }
}

impl std::str::FromStr for Engine {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ssa" | "exact-ssa" => Ok(Engine::ExactSsa),
            "tau" | "tau-leap" => Ok(Engine::TauLeap),
            other => Err(ModelError::Config(format!("unknown engine `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub t_end: f64,
    pub seed: u64,
    pub engine: Engine,
    /// Tau-selection error-control parameter.
    pub epsilon: f64,
    /// Rules that can fire fewer times than this before exhausting a
    /// reactant are treated as critical.
    pub critical_threshold: u64,
    /// Number of exact events taken when a leap would be too short to pay off.
    pub ssa_fallback_steps: usize,
    pub record_interval: f64,
    /// Halvings of a rejected leap before switching to exact steps.
    pub max_leap_retries: u32,
    /// A run stops early once any count exceeds this bound.
    pub population_cap: Count,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            t_end: 10.0,
            seed: 0,
            engine: Engine::TauLeap,
            epsilon: 0.03,
            critical_threshold: 10,
            ssa_fallback_steps: 100,
            record_interval: 0.01,
            max_leap_retries: 20,
            population_cap: 1_000_000_000_000,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return err(format!("t_end must be positive, got {}", self.t_end));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return err(format!("epsilon must lie in (0, 1), got {}", self.epsilon));
        }
        if !(self.record_interval.is_finite() && self.record_interval > 0.0) {
            return err(format!(
                "record_interval must be positive, got {}",
                self.record_interval
            ));
        }
        if self.record_interval > self.t_end {
            return err(format!(
                "record_interval {} exceeds t_end {}",
                self.record_interval, self.t_end
            ));
        }
        if self.ssa_fallback_steps == 0 {
            return err("ssa_fallback_steps must be at least 1".into());
        }
        if self.population_cap <= 0 {
            return err("population_cap must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{self, TopologyKind};

    fn lv_species() -> SpeciesTable {
        SpeciesTable::new([("A", true), ("X", false), ("Y", false)]).unwrap()
    }

    #[test]
    fn species_table_rejects_duplicates_and_empty() {
        let mut t = lv_species();
        assert_eq!(t.push("X", false), Err(ModelError::DuplicateSpecies("X".into())));
        assert_eq!(t.push("", false), Err(ModelError::EmptySpeciesName));
        assert_eq!(t.index_of("Y"), Some(2));
    }

    #[test]
    fn net_change_of_lv_rules() {
        let sp = lv_species();
        let r1 = ReactionRule::internal("r1", &[(0, 1), (1, 1)], &[(1, 2)], 0.1).unwrap();
        assert_eq!(net_change(&r1, &sp).unwrap().source, vec![0, 1, 0]);
        let r3 = ReactionRule::internal("r3", &[(2, 1)], &[], 10.0).unwrap();
        assert_eq!(net_change(&r3, &sp).unwrap().source, vec![0, 0, -1]);
        let d = ReactionRule::dispersal("d", 2, 1.0, 1).unwrap();
        let nc = net_change(&d, &sp).unwrap();
        assert_eq!(nc.source, vec![0, 0, -1]);
        assert_eq!(nc.target, Some((1, vec![0, 0, 1])));
    }

    #[test]
    fn net_change_rejects_out_of_range_species() {
        let sp = lv_species();
        let bad = ReactionRule::internal("bad", &[(7, 1)], &[], 1.0).unwrap();
        assert!(matches!(
            net_change(&bad, &sp),
            Err(ModelError::SpeciesOutOfRange { index: 7, .. })
        ));
    }

    #[test]
    fn repeated_reactants_are_merged() {
        let r = ReactionRule::internal("r", &[(1, 1), (1, 1)], &[], 1.0).unwrap();
        assert_eq!(r.reactants, vec![(1, 2)]);
        assert_eq!(r.order(), 2);
    }

    #[test]
    fn graph_rejects_self_edges() {
        let mut g = TopologyGraph::new(3);
        assert_eq!(g.add_edge(1, 1, 1.0), Err(ModelError::SelfEdge(1)));
        g.add_edge(2, 0, 1.0).unwrap();
        assert!(g.has_edge(0, 2));
        assert_eq!(g.degree(0), 1);
    }

    #[test]
    fn chain_model_is_valid() {
        let model = topology::build_migration_model(
            TopologyKind::Chain,
            topology::MigrationCondition::DegreeWeighted(10.0),
        );
        assert!(validate_model(&model).is_empty());
    }

    #[test]
    fn dispersal_to_non_adjacent_patch_is_reported() {
        let mut model = topology::build_migration_model(
            TopologyKind::Chain,
            topology::MigrationCondition::Uniform(1.0),
        );
        let y = model.species.index_of("Y").unwrap();
        model.volumes[0]
            .rules
            .push(ReactionRule::dispersal("d_p3", y, 1.0, 3).unwrap());
        let v = validate_model(&model);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DanglingTarget);
        assert!(v[0].location.contains("p0"));
        assert!(v[0].location.contains("d_p3"));
    }

    #[test]
    fn count_length_mismatch_is_reported() {
        let mut model = topology::build_migration_model(
            TopologyKind::Chain,
            topology::MigrationCondition::Uniform(1.0),
        );
        model.volumes[2].counts.truncate(2);
        let v = validate_model(&model);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::CountLengthMismatch);
    }

    #[test]
    fn every_single_field_mutation_is_caught() {
        let base = topology::build_migration_model(
            TopologyKind::Grid,
            topology::MigrationCondition::Uniform(10.0),
        );
        let mutations: Vec<Box<dyn Fn(&mut MetapopulationModel)>> = vec![
            Box::new(|m| m.volumes[1].counts[1] = -1),
            Box::new(|m| m.volumes[3].counts.push(0)),
            Box::new(|m| m.volumes[0].area = 0.0),
            Box::new(|m| m.volumes[4].index = 9),
            Box::new(|m| {
                m.graph.edges.insert((2, 2), 1.0);
            }),
            Box::new(|m| {
                m.graph.edges.insert((0, 1), -3.0);
            }),
            Box::new(|m| m.volumes[2].rules[0].constant = -0.5),
            Box::new(|m| m.volumes[2].rules[0].reactants.push((11, 1))),
            Box::new(|m| m.volumes[5].rules[3].target = Some(0)),
            Box::new(|m| m.volumes[5].rules[3].reactants[0].1 = 2),
            Box::new(|m| {
                m.volumes.pop();
            }),
            Box::new(|m| m.time = -1.0),
        ];
        assert!(validate_model(&base).is_empty());
        for (i, mutate) in mutations.iter().enumerate() {
            let mut m = base.clone();
            mutate(&mut m);
            assert!(!validate_model(&m).is_empty(), "mutation {i} not detected");
        }
    }

    #[test]
    fn config_validation() {
        let mut c = SimulationConfig::default();
        assert!(c.validate().is_ok());
        c.epsilon = 1.0;
        assert!(c.validate().is_err());
        c = SimulationConfig {
            record_interval: 20.0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
