//! Single-volume stochastic kinetics.
//!
//! Propensities follow mass action: `c * prod_s binom(x_s, k_s)` over the
//! reactant multiset. On top of that this module provides the Gillespie
//! direct-method step and the pieces of a modified (Cao-Gillespie-Petzold)
//! tau-leap: species-based step selection with critical rules, Poisson
//! firing, and the non-negativity check. None of these functions mutate a
//! volume; the coordinator decides when a result is committed.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};

use crate::model::{Count, ReactionRule, SpeciesTable, Volume};

/// Mass-action propensity of `rule` at the given state.
///
/// Buffered species are read like any other count.
pub fn propensity(rule: &ReactionRule, counts: &[Count]) -> f64 {
    let mut a = rule.constant;
    for &(s, k) in &rule.reactants {
        let n = counts[s];
        if n < Count::from(k) {
            return 0.0;
        }
        a *= combinations(n, k);
    }
    a
}

fn combinations(n: Count, k: u32) -> f64 {
    match k {
        1 => n as f64,
        2 => n as f64 * (n - 1) as f64 / 2.0,
        _ => (0..k).fold(1.0, |acc, i| acc * (n - Count::from(i)) as f64 / f64::from(i + 1)),
    }
}

/// Propensities of a volume's rules, in rule order.
#[derive(Debug, Clone, PartialEq)]
pub struct PropensityVector {
    pub values: Vec<f64>,
    pub total: f64,
}

impl PropensityVector {
    pub fn of(volume: &Volume) -> Self {
        Self::from_rules(&volume.rules, &volume.counts)
    }

    pub fn from_rules(rules: &[ReactionRule], counts: &[Count]) -> Self {
        let values: Vec<f64> = rules.iter().map(|r| propensity(r, counts)).collect();
        let total = values.iter().sum();
        PropensityVector { values, total }
    }

    /// Index `j` such that the cumulative sum first exceeds `threshold`.
    /// Zero-propensity rules are never returned.
    pub fn select(&self, threshold: f64) -> usize {
        let mut acc = 0.0;
        let mut last_positive = 0;
        for (j, &a) in self.values.iter().enumerate() {
            if a <= 0.0 {
                continue;
            }
            acc += a;
            last_positive = j;
            if threshold < acc {
                return j;
            }
        }
        // Rounding can leave `threshold` a hair above the accumulated sum.
        last_positive
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SsaEvent {
    Fire { dt: f64, rule: usize },
    Exhausted,
}

/// One Gillespie direct-method draw for an isolated volume.
pub fn ssa_step<R: Rng + ?Sized>(volume: &Volume, rng: &mut R) -> SsaEvent {
    let props = PropensityVector::of(volume);
    if !(props.total > 0.0) {
        return SsaEvent::Exhausted;
    }
    let e: f64 = Exp1.sample(rng);
    let dt = e / props.total;
    let rule = props.select(rng.random::<f64>() * props.total);
    SsaEvent::Fire { dt, rule }
}

/// Local state change per firing, with buffered species removed.
/// Dispersal rules contribute only their local decrement.
fn source_deltas(rule: &ReactionRule, species: &SpeciesTable) -> Vec<(usize, Count)> {
    if let Some(s) = rule.dispersed_species() {
        return if species.is_buffered(s) {
            Vec::new()
        } else {
            vec![(s, -1)]
        };
    }
    let mut deltas: Vec<(usize, Count)> = Vec::new();
    let mut add = |s: usize, d: Count| {
        if species.is_buffered(s) {
            return;
        }
        match deltas.iter_mut().find(|(t, _)| *t == s) {
            Some((_, v)) => *v += d,
            None => deltas.push((s, d)),
        }
    };
    for &(s, k) in &rule.reactants {
        add(s, -Count::from(k));
    }
    for &(s, k) in &rule.products {
        add(s, Count::from(k));
    }
    deltas.retain(|&(_, d)| d != 0);
    deltas
}

#[derive(Debug, Clone, PartialEq)]
pub struct TauSelection {
    /// Largest leap keeping the expected relative propensity change below
    /// epsilon; `+inf` when every firing rule is critical.
    pub tau_candidate: f64,
    /// `critical[j]` is true for rules that could exhaust a reactant within
    /// `critical_threshold` firings.
    pub critical: Vec<bool>,
}

impl TauSelection {
    pub fn critical_rules(&self) -> impl Iterator<Item = usize> + '_ {
        self.critical
            .iter()
            .enumerate()
            .filter_map(|(j, &c)| c.then_some(j))
    }
}

/// Species-based tau selection with critical-rule partitioning.
///
/// For every non-buffered reactant species `i` of a non-critical rule, with `mu_i = sum_j nu_ij a_j` and
/// `sigma2_i = sum_j nu_ij^2 a_j` over non-critical rules,
///
/// ```text
/// tau = min_i  min( max(eps x_i / g_i, 1) / |mu_i| , max(eps x_i / g_i, 1)^2 / sigma2_i )
/// ```
///
/// where `g_i` is the highest order of any rule having `i` as a reactant.
pub fn select_tau(
    volume: &Volume,
    species: &SpeciesTable,
    propensities: &PropensityVector,
    epsilon: f64,
    critical_threshold: u64,
) -> TauSelection {
    let ns = species.len();
    let deltas: Vec<Vec<(usize, Count)>> = volume
        .rules
        .iter()
        .map(|r| source_deltas(r, species))
        .collect();

    let critical: Vec<bool> = volume
        .rules
        .iter()
        .zip(&deltas)
        .zip(&propensities.values)
        .map(|((_, delta), &a)| {
            if a <= 0.0 {
                return false;
            }
            // Firings left before some consumed species runs out.
            let remaining = delta
                .iter()
                .filter(|&&(_, d)| d < 0)
                .map(|&(s, d)| volume.counts[s].max(0) / -d)
                .min();
            matches!(remaining, Some(l) if (l as u64) < critical_threshold)
        })
        .collect();

    let mut highest_order = vec![0u32; ns];
    for rule in &volume.rules {
        let order = rule.order();
        for &(s, _) in &rule.reactants {
            highest_order[s] = highest_order[s].max(order);
        }
    }

    let mut mu = vec![0.0; ns];
    let mut sigma2 = vec![0.0; ns];
    let mut involved = vec![false; ns];
    for (j, rule) in volume.rules.iter().enumerate() {
        let a = propensities.values[j];
        if critical[j] || a <= 0.0 {
            continue;
        }
        for &(s, _) in &rule.reactants {
            if !species.is_buffered(s) {
                involved[s] = true;
            }
        }
        for &(s, d) in &deltas[j] {
            let d = d as f64;
            mu[s] += d * a;
            sigma2[s] += d * d * a;
        }
    }

    let mut tau = f64::INFINITY;
    for s in (0..ns).filter(|&s| involved[s]) {
        let g = f64::from(highest_order[s].max(1));
        let bound = (epsilon * volume.counts[s] as f64 / g).max(1.0);
        if mu[s] != 0.0 {
            tau = tau.min(bound / mu[s].abs());
        }
        if sigma2[s] > 0.0 {
            tau = tau.min(bound * bound / sigma2[s]);
        }
    }
    TauSelection {
        tau_candidate: tau,
        critical,
    }
}

/// Number of firings of each rule in one leap.
#[derive(Debug, Clone, PartialEq)]
pub struct FiringPlan {
    pub counts: Vec<u64>,
    pub tau: f64,
}

impl FiringPlan {
    pub fn empty(rules: usize, tau: f64) -> Self {
        FiringPlan {
            counts: vec![0; rules],
            tau,
        }
    }
}

/// Samples one leap. Non-critical rules fire `Poisson(a_j tau)` times;
/// `critical_rule`, if any, fires exactly once; other critical rules do not
/// fire.
pub fn fire_leap<R: Rng + ?Sized>(
    propensities: &PropensityVector,
    critical: &[bool],
    tau: f64,
    critical_rule: Option<usize>,
    rng: &mut R,
) -> FiringPlan {
    let mut plan = FiringPlan::empty(propensities.values.len(), tau);
    for (j, &a) in propensities.values.iter().enumerate() {
        if critical.get(j).copied().unwrap_or(false) || a <= 0.0 {
            continue;
        }
        plan.counts[j] = sample_poisson(a * tau, rng);
    }
    if let Some(j) = critical_rule {
        plan.counts[j] = 1;
    }
    plan
}

fn sample_poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> u64 {
    if !(mean > 0.0) {
        return 0;
    }
    match Poisson::new(mean) {
        Ok(dist) => {
            let k: f64 = dist.sample(rng);
            k as u64
        }
        // Means beyond the sampler's range only occur in runaway growth,
        // which the population cap stops; the mean is an adequate stand-in.
        Err(_) => mean.min(u64::MAX as f64) as u64,
    }
}

/// Individuals leaving a volume through a dispersal rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Message {
    pub target: usize,
    pub species: usize,
    pub amount: Count,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApplyOutcome {
    Accepted {
        counts: Vec<Count>,
        outbound: Vec<Message>,
    },
    Rejected,
}

/// Applies a plan to a copy of the volume's counts. Dispersal firings are
/// decremented locally and returned as outbound messages. Any negative
/// count rejects the whole plan.
pub fn apply_plan(volume: &Volume, species: &SpeciesTable, plan: &FiringPlan) -> ApplyOutcome {
    let mut counts = volume.counts.clone();
    let mut outbound = Vec::new();
    for (rule, &k) in volume.rules.iter().zip(&plan.counts) {
        if k == 0 {
            continue;
        }
        let k = Count::try_from(k).unwrap_or(Count::MAX);
        if let (Some(target), Some(s)) = (rule.target, rule.dispersed_species()) {
            if species.is_buffered(s) {
                continue;
            }
            counts[s] = counts[s].saturating_sub(k);
            outbound.push(Message {
                target,
                species: s,
                amount: k,
            });
            continue;
        }
        for &(s, stoich) in &rule.reactants {
            if !species.is_buffered(s) {
                counts[s] = counts[s].saturating_sub(k.saturating_mul(Count::from(stoich)));
            }
        }
        for &(s, stoich) in &rule.products {
            if !species.is_buffered(s) {
                counts[s] = counts[s].saturating_add(k.saturating_mul(Count::from(stoich)));
            }
        }
    }
    if counts.iter().any(|&c| c < 0) {
        ApplyOutcome::Rejected
    } else {
        ApplyOutcome::Accepted { counts, outbound }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::topology::lotka_volterra_species;

    fn lv_volume(x: Count, y: Count) -> (SpeciesTable, Volume) {
        let (species, rules) = lotka_volterra_species();
        let mut v = Volume::new(0, "p0", vec![200, x, y]);
        v.rules = rules;
        (species, v)
    }

    fn death_only(y: Count) -> (SpeciesTable, Volume) {
        let (species, v) = lv_volume(0, y);
        let mut v = v;
        v.rules.retain(|r| r.id == "r3");
        (species, v)
    }

    #[test]
    fn propensity_examples() {
        let (_, v) = lv_volume(1000, 500);
        assert_eq!(propensity(&v.rules[0], &[200, 1000, 0]), 20000.0);
        assert_eq!(propensity(&v.rules[1], &[200, 0, 500]), 0.0);
        assert_eq!(propensity(&v.rules[2], &[200, 0, 1000]), 10000.0);
    }

    #[test]
    fn bimolecular_homo_propensity() {
        let r = ReactionRule::internal("dimer", &[(0, 2)], &[], 0.5).unwrap();
        assert_eq!(propensity(&r, &[10]), 0.5 * 45.0);
        assert_eq!(propensity(&r, &[1]), 0.0);
    }

    #[test]
    fn ssa_exhausted_when_nothing_can_fire() {
        let (_, v) = lv_volume(0, 0);
        // r1 still needs X; with X = 0 nothing fires.
        assert_eq!(ssa_step(&v, &mut stream(1, 0)), SsaEvent::Exhausted);
    }

    #[test]
    fn ssa_waiting_time_mean() {
        let (_, v) = death_only(1000);
        let mut rng = stream(7, 0);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            match ssa_step(&v, &mut rng) {
                SsaEvent::Fire { dt, rule } => {
                    assert_eq!(rule, 0);
                    sum += dt;
                }
                SsaEvent::Exhausted => unreachable!(),
            }
        }
        let mean = sum / n as f64;
        let se = 1e-4 / (n as f64).sqrt();
        assert!((mean - 1e-4).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn ssa_selection_is_proportional() {
        let species = SpeciesTable::new([("Y", false)]).unwrap();
        let _ = species;
        let mut v = Volume::new(0, "p0", vec![100]);
        v.rules = vec![
            ReactionRule::internal("a", &[(0, 1)], &[], 1.0).unwrap(),
            ReactionRule::internal("b", &[(0, 1)], &[], 1.0).unwrap(),
        ];
        let mut rng = stream(3, 0);
        let n = 100_000;
        let mut first = 0usize;
        for _ in 0..n {
            if let SsaEvent::Fire { rule: 0, .. } = ssa_step(&v, &mut rng) {
                first += 1;
            }
        }
        let p = first as f64 / n as f64;
        let sd = (0.25 / n as f64).sqrt();
        assert!((p - 0.5).abs() < 3.0 * sd, "p = {p}");
    }

    #[test]
    fn tau_for_single_death_rule() {
        let (species, v) = death_only(1000);
        let props = PropensityVector::of(&v);
        let sel = select_tau(&v, &species, &props, 0.03, 10);
        assert_eq!(sel.critical, vec![false]);
        assert!((sel.tau_candidate - 3e-3).abs() < 1e-15);
    }

    #[test]
    fn small_population_makes_rule_critical() {
        let (species, v) = death_only(5);
        let props = PropensityVector::of(&v);
        let sel = select_tau(&v, &species, &props, 0.03, 10);
        assert_eq!(sel.critical, vec![true]);
        assert!(sel.tau_candidate.is_infinite());
    }

    #[test]
    fn growth_rule_is_never_critical() {
        // r1 consumes only the buffered resource.
        let (species, v) = lv_volume(3, 0);
        let props = PropensityVector::of(&v);
        let sel = select_tau(&v, &species, &props, 0.03, 10);
        assert_eq!(sel.critical, vec![false, false, false]);
        // mu_X = 60, bound = 1 -> tau = min(1/60, 1/60)
        assert!((sel.tau_candidate - 1.0 / 60.0).abs() < 1e-15);
    }

    #[test]
    fn poisson_leap_mean() {
        let props = PropensityVector {
            values: vec![1e4],
            total: 1e4,
        };
        let mut rng = stream(11, 0);
        let n = 10_000;
        let sum: u64 = (0..n)
            .map(|_| fire_leap(&props, &[false], 3e-3, None, &mut rng).counts[0])
            .sum();
        let mean = sum as f64 / n as f64;
        let se = (30.0 / n as f64).sqrt();
        assert!((mean - 30.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn zero_propensities_give_empty_plan() {
        let props = PropensityVector {
            values: vec![0.0, 0.0],
            total: 0.0,
        };
        let plan = fire_leap(&props, &[false, false], 0.5, None, &mut stream(1, 1));
        assert_eq!(plan.counts, vec![0, 0]);
    }

    #[test]
    fn critical_rule_fires_once() {
        let props = PropensityVector {
            values: vec![0.0, 3.0, 0.0],
            total: 3.0,
        };
        let plan = fire_leap(&props, &[false, true, false], 0.5, Some(1), &mut stream(1, 1));
        assert_eq!(plan.counts, vec![0, 1, 0]);
    }

    #[test]
    fn apply_plan_arithmetic_and_rejection() {
        let (species, v) = lv_volume(1000, 1000);
        let plan = FiringPlan {
            counts: vec![3, 0, 2],
            tau: 0.1,
        };
        match apply_plan(&v, &species, &plan) {
            ApplyOutcome::Accepted { counts, outbound } => {
                assert_eq!(counts, vec![200, 1003, 998]);
                assert!(outbound.is_empty());
            }
            ApplyOutcome::Rejected => panic!("rejected"),
        }
        let plan = FiringPlan {
            counts: vec![0, 0, 1001],
            tau: 0.1,
        };
        assert_eq!(apply_plan(&v, &species, &plan), ApplyOutcome::Rejected);
    }

    #[test]
    fn apply_plan_splits_dispersal() {
        let (species, mut v) = lv_volume(1000, 1000);
        v.rules.push(ReactionRule::dispersal("d_p1", 2, 1.0, 1).unwrap());
        let plan = FiringPlan {
            counts: vec![0, 0, 0, 5],
            tau: 0.1,
        };
        assert_eq!(
            apply_plan(&v, &species, &plan),
            ApplyOutcome::Accepted {
                counts: vec![200, 1000, 995],
                outbound: vec![Message {
                    target: 1,
                    species: 2,
                    amount: 5
                }],
            }
        );
    }

    proptest::proptest! {
        #[test]
        fn propensity_is_monotone_in_reactants(x in 0i64..5000, y in 0i64..5000, s in 0usize..3) {
            let (_, v) = lv_volume(x, y);
            let base = [200, x, y];
            let mut more = base;
            more[s] += 1;
            for rule in &v.rules {
                proptest::prop_assert!(propensity(rule, &more) >= propensity(rule, &base));
            }
        }

        #[test]
        fn accepted_plans_never_go_negative(x in 0i64..50, y in 0i64..50, k in proptest::collection::vec(0u64..60, 3)) {
            let (species, v) = lv_volume(x, y);
            let plan = FiringPlan { counts: k, tau: 0.01 };
            if let ApplyOutcome::Accepted { counts, .. } = apply_plan(&v, &species, &plan) {
                proptest::prop_assert!(counts.iter().all(|&c| c >= 0));
            }
        }
    }
}
