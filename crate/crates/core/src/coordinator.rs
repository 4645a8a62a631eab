//! The synchronized multivolume loop.
//!
//! Every global step:
//!
//! 1. each volume computes its propensities and a tau candidate;
//! 2. the common tau is the minimum candidate (exhausted volumes give `+inf`);
//! 3. if that tau is shorter than `10 / a_max` (the largest per-volume total
//!    propensity) the step is replaced by a burst of exact events on the
//!    joint system;
//! 4. otherwise all volumes leap by the common tau. Critical rules of all
//!    volumes race through a single exponential draw, so at most one critical
//!    firing happens system-wide per leap;
//! 5. if any volume would go negative the whole leap is discarded, tau is
//!    halved and every volume resamples (after too many halvings the step
//!    falls back to exact events);
//! 6. individuals sent by dispersal rules are delivered only after every
//!    volume has leapt;
//! 7. the clock advances by tau.
//!
//! Sampling follows the state at the latest event time not after each grid
//! point (sample-and-hold).

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::kinetics::{self, ApplyOutcome, FiringPlan, Message, PropensityVector, TauSelection};
use crate::model::{Count, Engine, MetapopulationModel, ModelError, SimulationConfig};
use crate::rng::Streams;
use crate::trajectory::{sample_grid, RunStats, Termination, Trajectory, TrajectoryMeta};

/// A leap shorter than this many expected events is taken exactly instead.
const FALLBACK_EVENTS: f64 = 10.0;

/// Dispersed individuals awaiting delivery at the end of a step.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MessageBuffer {
    entries: Vec<Message>,
}

impl MessageBuffer {
    pub fn push(&mut self, message: Message) {
        debug_assert!(message.amount >= 1);
        self.entries.push(message);
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Message] {
        &self.entries
    }

    /// Adds every message to its target and empties the buffer.
    pub fn deliver(&mut self, model: &mut MetapopulationModel) -> Vec<Message> {
        for m in &self.entries {
            let c = &mut model.volumes[m.target].counts[m.species];
            *c = c.saturating_add(m.amount);
        }
        std::mem::take(&mut self.entries)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepKind {
    Leap {
        /// `(volume, rule)` of the critical firing, if one won the race.
        critical: Option<(usize, usize)>,
        rejections: u32,
    },
    Exact {
        events: usize,
    },
}

/// What happened during one accepted global step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub start: f64,
    pub end: f64,
    pub kind: StepKind,
    /// `firings[v][j]`: times rule `j` of volume `v` fired in this step.
    pub firings: Vec<Vec<u64>>,
    pub delivered: Vec<Message>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepOutcome {
    Advanced(StepReport),
    /// Nothing can fire anywhere (or the end time was already reached).
    Terminated,
}

struct Recorder {
    grid: Vec<f64>,
    next: usize,
    trajectory: Trajectory,
}

impl Recorder {
    /// Records every pending grid point strictly before `time` with the
    /// current state, which is about to change at `time`.
    fn before(&mut self, time: f64, model: &MetapopulationModel) {
        while self.next < self.grid.len() && self.grid[self.next] < time {
            self.trajectory.push_sample(self.grid[self.next], &model.volumes);
            self.next += 1;
        }
    }

    fn finish(&mut self, model: &MetapopulationModel) {
        while self.next < self.grid.len() {
            self.trajectory.push_sample(self.grid[self.next], &model.volumes);
            self.next += 1;
        }
    }
}

/// Owns a model while it is simulated.
pub struct Simulator {
    model: MetapopulationModel,
    config: SimulationConfig,
    streams: Streams,
    buffer: MessageBuffer,
    recorder: Recorder,
    stats: RunStats,
}

impl Simulator {
    pub fn new(model: MetapopulationModel, config: SimulationConfig) -> Result<Self, ModelError> {
        config.validate()?;
        model.ensure_valid()?;
        if model.time >= config.t_end {
            return Err(ModelError::Config(format!(
                "model clock {} is already past t_end {}",
                model.time, config.t_end
            )));
        }
        let streams = Streams::new(config.seed, model.volumes.len());
        let grid: Vec<f64> = sample_grid(config.t_end, config.record_interval)
            .into_iter()
            .filter(|&g| g >= model.time)
            .collect();
        let trajectory = Trajectory::new(
            model.species.names(),
            model.volumes.iter().map(|v| v.name.clone()).collect(),
        );
        Ok(Simulator {
            model,
            config,
            streams,
            buffer: MessageBuffer::default(),
            recorder: Recorder {
                grid,
                next: 0,
                trajectory,
            },
            stats: RunStats::default(),
        })
    }

    pub fn model(&self) -> &MetapopulationModel {
        &self.model
    }

    pub fn time(&self) -> f64 {
        self.model.time
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.config
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    fn remaining(&self) -> f64 {
        self.config.t_end - self.model.time
    }

    fn propensities(&self) -> Vec<PropensityVector> {
        self.model.volumes.iter().map(PropensityVector::of).collect()
    }

    /// One synchronized step of the configured engine.
    pub fn step(&mut self) -> StepOutcome {
        match self.config.engine {
            Engine::TauLeap => self.global_step(),
            Engine::ExactSsa => self.ssa_fallback(self.config.ssa_fallback_steps),
        }
    }

    /// One tau-leaping step over all volumes with a common tau.
    pub fn global_step(&mut self) -> StepOutcome {
        if self.remaining() <= 0.0 {
            return StepOutcome::Terminated;
        }
        let props = self.propensities();
        let a_max = props.iter().map(|p| p.total).fold(0.0, f64::max);
        if !(a_max > 0.0) {
            return StepOutcome::Terminated;
        }
        let selections: Vec<TauSelection> = self
            .model
            .volumes
            .iter()
            .zip(&props)
            .map(|(v, p)| {
                if p.total > 0.0 {
                    kinetics::select_tau(
                        v,
                        &self.model.species,
                        p,
                        self.config.epsilon,
                        self.config.critical_threshold,
                    )
                } else {
                    TauSelection {
                        tau_candidate: f64::INFINITY,
                        critical: vec![false; v.rules.len()],
                    }
                }
            })
            .collect();
        let mut tau_noncritical = selections
            .iter()
            .map(|s| s.tau_candidate)
            .fold(f64::INFINITY, f64::min);
        if tau_noncritical < FALLBACK_EVENTS / a_max {
            return self.ssa_fallback(self.config.ssa_fallback_steps);
        }

        let critical_total: f64 = selections
            .iter()
            .zip(&props)
            .map(|(s, p)| s.critical_rules().map(|j| p.values[j]).sum::<f64>())
            .sum();

        let mut rejections = 0;
        loop {
            let tau_critical = if critical_total > 0.0 {
                let e: f64 = Exp1.sample(&mut self.streams.coordinator);
                e / critical_total
            } else {
                f64::INFINITY
            };
            let (mut tau, mut critical) = if tau_noncritical < tau_critical {
                (tau_noncritical, None)
            } else {
                let pick = self.streams.coordinator.random::<f64>() * critical_total;
                (tau_critical, Some(pick_critical(&selections, &props, pick)))
            };
            let remaining = self.remaining();
            let reaches_end = tau >= remaining;
            if reaches_end {
                tau = remaining;
                critical = None;
            }

            let plans: Vec<FiringPlan> = props
                .iter()
                .zip(&selections)
                .zip(self.streams.volumes.iter_mut())
                .enumerate()
                .map(|(v, ((p, s), rng))| {
                    let crit = critical.and_then(|(cv, j)| (cv == v).then_some(j));
                    kinetics::fire_leap(p, &s.critical, tau, crit, rng)
                })
                .collect();

            let mut accepted = Vec::with_capacity(plans.len());
            for (volume, plan) in self.model.volumes.iter().zip(&plans) {
                match kinetics::apply_plan(volume, &self.model.species, plan) {
                    ApplyOutcome::Accepted { counts, outbound } => accepted.push((counts, outbound)),
                    ApplyOutcome::Rejected => break,
                }
            }
            if accepted.len() < plans.len() {
                rejections += 1;
                self.stats.rejected_leaps += 1;
                if rejections > self.config.max_leap_retries {
                    return self.ssa_fallback(self.config.ssa_fallback_steps);
                }
                tau_noncritical = tau / 2.0;
                continue;
            }

            let start = self.model.time;
            let end = if reaches_end { self.config.t_end } else { start + tau };
            self.recorder.before(end, &self.model);
            for (volume, (counts, outbound)) in self.model.volumes.iter_mut().zip(accepted) {
                volume.counts = counts;
                for m in outbound {
                    self.buffer.push(m);
                }
            }
            let delivered = self.buffer.deliver(&mut self.model);
            self.model.time = end;
            self.stats.leaps += 1;
            if critical.is_some() {
                self.stats.critical_firings += 1;
            }
            return StepOutcome::Advanced(StepReport {
                start,
                end,
                kind: StepKind::Leap {
                    critical,
                    rejections,
                },
                firings: plans.into_iter().map(|p| p.counts).collect(),
                delivered,
            });
        }
    }

    /// Up to `steps` exact events on the joint system. The next event is
    /// drawn over all `(volume, rule)` pairs; dispersal delivers at once.
    /// Stops early at `t_end`; returns `Terminated` if no event was possible.
    pub fn ssa_fallback(&mut self, steps: usize) -> StepOutcome {
        let start = self.model.time;
        let mut firings: Vec<Vec<u64>> = self.model.volumes.iter().map(|v| vec![0; v.rules.len()]).collect();
        let mut delivered = Vec::new();
        let mut events = 0;
        let mut exhausted = false;
        self.stats.fallback_episodes += 1;
        for _ in 0..steps {
            let props = self.propensities();
            let total: f64 = props.iter().map(|p| p.total).sum();
            if !(total > 0.0) {
                exhausted = true;
                break;
            }
            let e: f64 = Exp1.sample(&mut self.streams.coordinator);
            let next = self.model.time + e / total;
            if next > self.config.t_end {
                self.model.time = self.config.t_end;
                break;
            }
            let mut pick = self.streams.coordinator.random::<f64>() * total;
            let mut chosen = None;
            for (v, p) in props.iter().enumerate() {
                if pick < p.total || v == props.len() - 1 {
                    if p.total > 0.0 {
                        chosen = Some((v, p.select(pick)));
                    }
                    break;
                }
                pick -= p.total;
            }
            // Rounding may land on an exhausted trailing volume.
            let (v, j) = chosen.unwrap_or_else(|| {
                let v = props.iter().rposition(|p| p.total > 0.0).unwrap();
                (v, props[v].select(props[v].total))
            });

            self.recorder.before(next, &self.model);
            let mut plan = FiringPlan::empty(props[v].values.len(), 0.0);
            plan.counts[j] = 1;
            match kinetics::apply_plan(&self.model.volumes[v], &self.model.species, &plan) {
                ApplyOutcome::Accepted { counts, outbound } => {
                    self.model.volumes[v].counts = counts;
                    for m in outbound {
                        self.buffer.push(m);
                    }
                    delivered.extend(self.buffer.deliver(&mut self.model));
                }
                ApplyOutcome::Rejected => unreachable!("positive propensity implies enough reactants"),
            }
            firings[v][j] += 1;
            self.model.time = next;
            events += 1;
            self.stats.exact_events += 1;
        }
        if events == 0 && exhausted {
            return StepOutcome::Terminated;
        }
        if events == 0 && self.model.time <= start {
            return StepOutcome::Terminated;
        }
        StepOutcome::Advanced(StepReport {
            start,
            end: self.model.time,
            kind: StepKind::Exact { events },
            firings,
            delivered,
        })
    }

    fn over_cap(&self) -> bool {
        let cap = self.config.population_cap;
        self.model.volumes.iter().any(|v| v.counts.iter().any(|&c| c > cap))
    }

    /// Steps until `t_end`, exhaustion or the population cap, calling
    /// `observer` after every accepted step.
    pub fn run_observed<F>(mut self, mut observer: F) -> Trajectory
    where
        F: FnMut(&StepReport, &MetapopulationModel),
    {
        let mut termination = Termination::Completed;
        while self.model.time < self.config.t_end {
            match self.step() {
                StepOutcome::Advanced(report) => observer(&report, &self.model),
                StepOutcome::Terminated => {
                    termination = Termination::Exhausted {
                        time: self.model.time,
                    };
                    break;
                }
            }
            if self.over_cap() {
                termination = Termination::PopulationCap {
                    time: self.model.time,
                };
                break;
            }
        }
        self.recorder.finish(&self.model);
        let mut trajectory = self.recorder.trajectory;
        trajectory.termination = termination;
        trajectory.stats = self.stats;
        trajectory.meta = Some(TrajectoryMeta {
            seed: self.config.seed,
            engine: self.config.engine.to_string(),
            scenario: String::new(),
            config: self.config,
        });
        trajectory
    }

    pub fn run(self) -> Trajectory {
        self.run_observed(|_, _| {})
    }
}

fn pick_critical(selections: &[TauSelection], props: &[PropensityVector], mut pick: f64) -> (usize, usize) {
    let mut last = None;
    for (v, (s, p)) in selections.iter().zip(props).enumerate() {
        for j in s.critical_rules() {
            let a = p.values[j];
            last = Some((v, j));
            if pick < a {
                return (v, j);
            }
            pick -= a;
        }
    }
    last.expect("critical race requires a critical rule")
}

/// Simulates `model` from its current clock to `config.t_end`.
pub fn run(model: MetapopulationModel, config: SimulationConfig) -> Result<Trajectory, ModelError> {
    Ok(Simulator::new(model, config)?.run())
}

/// Total count change per species implied by the firings of a step, using
/// each rule's net change (dispersal contributes zero system-wide).
pub fn implied_system_change(model: &MetapopulationModel, firings: &[Vec<u64>]) -> Vec<Count> {
    let mut total = vec![0; model.species.len()];
    for (volume, counts) in model.volumes.iter().zip(firings) {
        for (rule, &k) in volume.rules.iter().zip(counts) {
            let change = crate::model::net_change(rule, &model.species).expect("validated model");
            let mut add = |delta: &[Count]| {
                for (t, d) in total.iter_mut().zip(delta) {
                    *t += d * k as Count;
                }
            };
            add(&change.source);
            if let Some((_, incoming)) = &change.target {
                add(incoming);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ReactionRule, SpeciesTable, TopologyGraph, Volume};
    use crate::topology::{self, MigrationCondition, TopologyKind};

    fn config(t_end: f64, seed: u64) -> SimulationConfig {
        SimulationConfig {
            t_end,
            seed,
            record_interval: t_end / 10.0,
            ..Default::default()
        }
    }

    fn pure_death(volumes: usize, y0: Count) -> MetapopulationModel {
        let species = SpeciesTable::new([("Y", false)]).unwrap();
        let volumes = (0..volumes)
            .map(|i| {
                let mut v = Volume::new(i, format!("p{i}"), vec![y0]);
                v.rules = vec![ReactionRule::internal("death", &[(0, 1)], &[], 10.0).unwrap()];
                v
            })
            .collect::<Vec<_>>();
        MetapopulationModel {
            species,
            graph: TopologyGraph::new(volumes.len()),
            volumes,
            time: 0.0,
        }
    }

    #[test]
    fn exhausted_model_terminates() {
        let mut m = topology::build_migration_model(TopologyKind::Chain, MigrationCondition::numbered(4).unwrap());
        for v in &mut m.volumes {
            v.counts = vec![0, 0, 0];
        }
        let mut sim = Simulator::new(m, config(1.0, 1)).unwrap();
        assert_eq!(sim.global_step(), StepOutcome::Terminated);
        let traj = sim.run();
        assert!(matches!(traj.termination, Termination::Exhausted { time } if time == 0.0));
        assert_eq!(traj.len(), 11);
    }

    #[test]
    fn fallback_with_nothing_to_fire_terminates() {
        let m = pure_death(2, 0);
        let mut sim = Simulator::new(m, config(1.0, 1)).unwrap();
        assert_eq!(sim.ssa_fallback(100), StepOutcome::Terminated);
        assert_eq!(sim.time(), 0.0);
    }

    #[test]
    fn fallback_events_happen_only_where_propensity_is() {
        let mut m = pure_death(6, 0);
        m.volumes[3].counts = vec![50];
        let mut sim = Simulator::new(m, config(10.0, 5)).unwrap();
        match sim.ssa_fallback(20) {
            StepOutcome::Advanced(r) => {
                assert_eq!(r.kind, StepKind::Exact { events: 20 });
                for (v, f) in r.firings.iter().enumerate() {
                    assert_eq!(f[0] > 0, v == 3);
                }
            }
            StepOutcome::Terminated => panic!(),
        }
        assert_eq!(sim.model().volumes[3].counts, vec![30]);
    }

    #[test]
    fn dispersal_is_delivered_at_step_end() {
        let model = topology::build_migration_model(TopologyKind::Chain, MigrationCondition::numbered(4).unwrap());
        let mut sim = Simulator::new(model, config(1.0, 9)).unwrap();
        let before = sim.model().clone();
        let StepOutcome::Advanced(report) = sim.global_step() else {
            panic!("terminated")
        };
        let after = sim.model();
        let y = 2;
        for (v, volume) in after.volumes.iter().enumerate() {
            let rules = &before.volumes[v].rules;
            let mut expected = before.volumes[v].counts[y];
            for (rule, &k) in rules.iter().zip(&report.firings[v]) {
                let k = k as Count;
                match rule.id.as_str() {
                    "r2" => expected += k,
                    "r3" => expected -= k,
                    _ if rule.is_dispersal() => expected -= k,
                    _ => {}
                }
            }
            let received: Count = report.delivered.iter().filter(|m| m.target == v).map(|m| m.amount).sum();
            assert_eq!(volume.counts[y], expected + received);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let model = topology::build_migration_model(TopologyKind::Star, MigrationCondition::numbered(4).unwrap());
        let a = run(model.clone(), config(0.5, 77)).unwrap();
        let b = run(model.clone(), config(0.5, 77)).unwrap();
        let c = run(model, config(0.5, 78)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.to_csv_string(), c.to_csv_string());
    }

    #[test]
    fn single_sample_interval_gives_two_samples() {
        let model = pure_death(1, 100);
        let cfg = SimulationConfig {
            t_end: 0.3,
            record_interval: 0.3,
            ..Default::default()
        };
        let traj = run(model, cfg).unwrap();
        assert_eq!(traj.times, vec![0.0, 0.3]);
        assert_eq!(traj.series(0, 0)[0], 100);
    }

    #[test]
    fn invalid_model_is_rejected_before_stepping() {
        let mut model = pure_death(2, 10);
        model.volumes[1].counts.clear();
        assert!(run(model, config(1.0, 1)).is_err());
    }

    #[test]
    fn recorded_times_follow_the_grid() {
        let model = topology::build_migration_model(TopologyKind::Ring, MigrationCondition::numbered(4).unwrap());
        let traj = run(model, config(1.0, 3)).unwrap();
        assert_eq!(traj.times, sample_grid(1.0, 0.1));
        assert!(traj.times.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn firings_explain_every_step() {
        let model = topology::build_colonization_model(
            TopologyKind::Grid,
            &topology::ColonizationCondition::new(topology::InitialCondition::Ic3, [1]),
        )
        .unwrap();
        let sim = Simulator::new(model.clone(), config(1.0, 4)).unwrap();
        let mut prev = model;
        let mut steps = 0;
        sim.run_observed(|report, after| {
            let implied = implied_system_change(&prev, &report.firings);
            for s in 0..3 {
                assert_eq!(after.total(s) - prev.total(s), implied[s]);
            }
            assert!(report.end > report.start);
            prev = after.clone();
            steps += 1;
        });
        assert!(steps > 0);
    }
}
