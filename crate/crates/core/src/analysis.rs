//! Post-processing of recorded trajectories: extinction and oscillation
//! detection, per-patch outcome classification, symmetry statistics between
//! patches and phase-space export.

use serde::{Deserialize, Serialize};

use crate::model::Count;
use crate::trajectory::Trajectory;

/// Which trajectory columns hold the prey and the predator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub prey: String,
    pub predator: String,
}

impl Default for Roles {
    fn default() -> Self {
        Roles {
            prey: "X".into(),
            predator: "Y".into(),
        }
    }
}

impl Roles {
    pub fn indices(&self, trajectory: &Trajectory) -> Option<(usize, usize)> {
        Some((
            trajectory.species_index(&self.prey)?,
            trajectory.species_index(&self.predator)?,
        ))
    }
}

/// Earliest sample time from which the count stays at zero to the end.
pub fn detect_extinction(times: &[f64], values: &[Count]) -> Option<f64> {
    if values.last().copied() != Some(0) {
        return None;
    }
    let last_alive = values.iter().rposition(|&v| v != 0);
    let first_zero = last_alive.map_or(0, |k| k + 1);
    times.get(first_zero).copied()
}

/// Indices of local maxima with at least `min_prominence`.
///
/// A plateau counts as one maximum at its middle. Prominence is the peak
/// height minus the higher of the two lowest points reachable on either side
/// before meeting a strictly higher sample (or the series edge).
pub fn find_peaks(values: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = values.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if values[i - 1] < values[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && values[ahead] == values[i] {
                ahead += 1;
            }
            if values[ahead] < values[i] {
                let peak = (i + ahead - 1) / 2;
                if prominence(values, peak) >= min_prominence {
                    peaks.push(peak);
                }
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    peaks
}

fn prominence(values: &[f64], peak: usize) -> f64 {
    let height = values[peak];
    let mut left_min = height;
    for &v in values[..peak].iter().rev() {
        if v > height {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = height;
    for &v in &values[peak + 1..] {
        if v > height {
            break;
        }
        right_min = right_min.min(v);
    }
    height - left_min.max(right_min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AmplitudeStats {
    pub mean_peak: f64,
    /// Standard deviation of peak heights over their mean.
    pub cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    /// Mean spacing between consecutive peaks.
    pub period: f64,
    pub peak_times: Vec<f64>,
    pub amplitude: AmplitudeStats,
}

/// Default relative prominence: peaks must rise 20% of the series mean.
pub const DEFAULT_PROMINENCE_FRACTION: f64 = 0.2;

/// Peak-based oscillation detection. Needs at least 8 samples and 3 peaks.
/// `min_prominence` defaults to `0.2 * mean(values)`.
pub fn detect_oscillation(times: &[f64], values: &[f64], min_prominence: Option<f64>) -> Option<Oscillation> {
    if values.len() < 8 || values.len() != times.len() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let threshold = min_prominence.unwrap_or(DEFAULT_PROMINENCE_FRACTION * mean);
    if !(threshold > 0.0) {
        return None;
    }
    let peaks = find_peaks(values, threshold);
    if peaks.len() < 3 {
        return None;
    }
    let peak_times: Vec<f64> = peaks.iter().map(|&k| times[k]).collect();
    let period = (peak_times[peak_times.len() - 1] - peak_times[0]) / (peak_times.len() - 1) as f64;
    let heights: Vec<f64> = peaks.iter().map(|&k| values[k]).collect();
    let (mean_peak, sd) = mean_sd(&heights);
    Some(Oscillation {
        period,
        peak_times,
        amplitude: AmplitudeStats {
            mean_peak,
            cv: if mean_peak > 0.0 { sd / mean_peak } else { 0.0 },
        },
    })
}

/// Mean and population standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Index of the first sample at or after `fraction` of the time span.
pub fn trailing_start(times: &[f64], fraction: f64) -> usize {
    let (Some(&t0), Some(&t1)) = (times.first(), times.last()) else {
        return 0;
    };
    let from = t1 - fraction * (t1 - t0);
    times.iter().position(|&t| t >= from - 1e-12).unwrap_or(times.len())
}

/// Mean of the samples over the trailing `fraction` of the time span. On a
/// uniform grid this is the time average of the sample-and-hold signal.
pub fn trailing_mean(times: &[f64], values: &[f64], fraction: f64) -> f64 {
    let k = trailing_start(times, fraction);
    mean_sd(&values[k..]).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Classification {
    /// Predator-prey cycles are present.
    Oscillating,
    /// Prey went extinct.
    PreyExtinct,
    /// Predators never established.
    PredatorAbsent,
    /// Individuals pass through but no local cycles form.
    DispersalOnly,
}

impl Classification {
    pub fn name(self) -> &'static str {
        match self {
            Classification::Oscillating => "oscillating",
            Classification::PreyExtinct => "prey-extinct",
            Classification::PredatorAbsent => "predator-absent",
            Classification::DispersalOnly => "dispersal-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchOutcome {
    pub patch: usize,
    pub classification: Classification,
    pub extinction_time: Option<f64>,
    pub period_estimate: Option<f64>,
    pub amplitude_stats: Option<AmplitudeStats>,
}

impl PatchOutcome {
    pub fn colonized(&self) -> bool {
        self.classification == Classification::Oscillating
    }
}

/// Colonization thresholds. The defaults are heuristics: a patch counts as
/// colonized once it has held at least 50 predators, and as never reached
/// while it stays below 10.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyOptions {
    pub roles: Roles,
    pub establishment: Count,
    pub absence: Count,
    pub prominence_fraction: f64,
}

impl Default for ClassifyOptions {
    fn default() -> Self {
        ClassifyOptions {
            roles: Roles::default(),
            establishment: 50,
            absence: 10,
            prominence_fraction: DEFAULT_PROMINENCE_FRACTION,
        }
    }
}

fn oscillation_from(times: &[f64], values: &[f64], start: usize, fraction: f64) -> Option<Oscillation> {
    let (times, values) = (&times[start..], &values[start..]);
    let mean = mean_sd(values).0;
    detect_oscillation(times, values, Some(fraction * mean))
}

/// Outcome of one patch of a colonization run.
///
/// For a patch that started without predators: `predator-absent` if
/// predators never reached `absence`; `prey-extinct` if prey died out;
/// `oscillating` if predators reached `establishment`, prey cycles were
/// detected after that, and neither species is extinct at the end;
/// `dispersal-only` otherwise. Patches that started with predators are
/// classified by [`classify_patch`].
pub fn classify_colonization(
    trajectory: &Trajectory,
    patch: usize,
    initial_predators: Count,
    options: &ClassifyOptions,
) -> Option<PatchOutcome> {
    if initial_predators > 0 {
        return classify_patch(trajectory, patch, options);
    }
    let (prey_idx, pred_idx) = options.roles.indices(trajectory)?;
    let times = &trajectory.times;
    let prey = trajectory.series(patch, prey_idx);
    let pred = trajectory.series(patch, pred_idx);
    let prey_f: Vec<f64> = prey.iter().map(|&c| c as f64).collect();
    let extinction = detect_extinction(times, &prey);
    let max_pred = pred.iter().copied().max().unwrap_or(0);

    let mut outcome = PatchOutcome {
        patch,
        classification: Classification::DispersalOnly,
        extinction_time: extinction,
        period_estimate: None,
        amplitude_stats: None,
    };
    if max_pred < options.absence {
        outcome.classification = Classification::PredatorAbsent;
        return Some(outcome);
    }
    if extinction.is_some() {
        outcome.classification = Classification::PreyExtinct;
        return Some(outcome);
    }
    let Some(established) = pred.iter().position(|&c| c >= options.establishment) else {
        return Some(outcome);
    };
    let predators_persist = detect_extinction(times, &pred).is_none();
    if let Some(osc) = oscillation_from(times, &prey_f, established, options.prominence_fraction) {
        outcome.period_estimate = Some(osc.period);
        outcome.amplitude_stats = Some(osc.amplitude);
        if predators_persist {
            outcome.classification = Classification::Oscillating;
        }
    }
    Some(outcome)
}

/// Outcome of a patch that started with both species.
///
/// Prey extinction with predators still present is `dispersal-only`; prey
/// extinction with no predators left is `prey-extinct`; predator extinction
/// alone is `predator-absent`; otherwise `oscillating` if prey cycles are
/// detected over the whole run.
pub fn classify_patch(trajectory: &Trajectory, patch: usize, options: &ClassifyOptions) -> Option<PatchOutcome> {
    let (prey_idx, pred_idx) = options.roles.indices(trajectory)?;
    let times = &trajectory.times;
    let prey = trajectory.series(patch, prey_idx);
    let pred = trajectory.series(patch, pred_idx);
    let prey_extinct = detect_extinction(times, &prey);
    let pred_extinct = detect_extinction(times, &pred);
    let prey_f: Vec<f64> = prey.iter().map(|&c| c as f64).collect();
    let osc = oscillation_from(times, &prey_f, 0, options.prominence_fraction);
    let classification = match (prey_extinct, pred_extinct, &osc) {
        (Some(_), None, _) => Classification::DispersalOnly,
        (Some(_), Some(_), _) => Classification::PreyExtinct,
        (None, Some(_), _) => Classification::PredatorAbsent,
        (None, None, Some(_)) => Classification::Oscillating,
        (None, None, None) => Classification::DispersalOnly,
    };
    Some(PatchOutcome {
        patch,
        classification,
        extinction_time: prey_extinct,
        period_estimate: osc.as_ref().map(|o| o.period),
        amplitude_stats: osc.map(|o| o.amplitude),
    })
}

/// Dynamical-equivalence statistic for a pair of patches over the trailing
/// half of a run: `|mean_a - mean_b| / sqrt((var_a + var_b) / 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairStatistic {
    pub a: usize,
    pub b: usize,
    pub prey: f64,
    pub predator: f64,
}

impl PairStatistic {
    /// The larger of the prey and predator statistics.
    pub fn combined(&self) -> f64 {
        self.prey.max(self.predator)
    }
}

/// Standardized mean difference of two series.
pub fn standardized_difference(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let diff = (ma - mb).abs();
    let pooled = ((sa * sa + sb * sb) / 2.0).sqrt();
    if diff == 0.0 {
        0.0
    } else if pooled == 0.0 {
        f64::INFINITY
    } else {
        diff / pooled
    }
}

pub fn symmetry_report(trajectory: &Trajectory, pairs: &[(usize, usize)], roles: &Roles) -> Option<Vec<PairStatistic>> {
    let (prey_idx, pred_idx) = roles.indices(trajectory)?;
    let start = trailing_start(&trajectory.times, 0.5);
    let tail = |v: usize, s: usize| trajectory.series_f64(v, s)[start..].to_vec();
    Some(
        pairs
            .iter()
            .map(|&(a, b)| PairStatistic {
                a,
                b,
                prey: standardized_difference(&tail(a, prey_idx), &tail(b, prey_idx)),
                predator: standardized_difference(&tail(a, pred_idx), &tail(b, pred_idx)),
            })
            .collect(),
    )
}

/// `(prey, predator)` pairs at every sample time.
pub fn export_phase_space(trajectory: &Trajectory, patch: usize, roles: &Roles) -> Option<Vec<(Count, Count)>> {
    let (prey_idx, pred_idx) = roles.indices(trajectory)?;
    Some(
        (0..trajectory.len())
            .map(|k| {
                let s = trajectory.sample(patch, k);
                (s[prey_idx], s[pred_idx])
            })
            .collect(),
    )
}

/// Verdict for one patch across replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MajorityVerdict {
    pub patch: usize,
    pub colonized_runs: usize,
    pub runs: usize,
}

impl MajorityVerdict {
    /// Strict majority of replicates classified as oscillating.
    pub fn colonized(&self) -> bool {
        2 * self.colonized_runs > self.runs
    }
}

/// Tallies colonization outcomes of many replicates of the same scenario.
pub fn majority_verdicts(outcomes: &[Vec<PatchOutcome>]) -> Vec<MajorityVerdict> {
    let Some(first) = outcomes.first() else {
        return Vec::new();
    };
    first
        .iter()
        .map(|o| MajorityVerdict {
            patch: o.patch,
            colonized_runs: outcomes
                .iter()
                .filter(|run| run.iter().any(|p| p.patch == o.patch && p.colonized()))
                .count(),
            runs: outcomes.len(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize, dt: f64) -> Vec<f64> {
        (0..n).map(|k| k as f64 * dt).collect()
    }

    #[test]
    fn extinction_examples() {
        let t = grid(5, 1.0);
        assert_eq!(detect_extinction(&t, &[100, 50, 0, 0, 0]), Some(2.0));
        assert_eq!(detect_extinction(&t, &[100, 50, 0, 0, 3]), None);
        assert_eq!(detect_extinction(&t, &[1, 2, 3, 4, 5]), None);
        assert_eq!(detect_extinction(&t, &[0, 0, 0, 0, 0]), Some(0.0));
    }

    #[test]
    fn synthetic_sine_period() {
        let t = grid(501, 0.01);
        let v: Vec<f64> = t
            .iter()
            .map(|&t| 1000.0 + 500.0 * (2.0 * std::f64::consts::PI * t / 0.444).sin())
            .collect();
        let osc = detect_oscillation(&t, &v, None).unwrap();
        assert!((osc.period - 0.444).abs() < 0.01, "{}", osc.period);
        assert!(osc.amplitude.cv < 1e-3);
    }

    #[test]
    fn constant_and_monotone_series_do_not_oscillate() {
        let t = grid(100, 0.1);
        assert!(detect_oscillation(&t, &vec![7.0; 100], None).is_none());
        let up: Vec<f64> = (0..100).map(|k| k as f64).collect();
        assert!(detect_oscillation(&t, &up, None).is_none());
        assert!(detect_oscillation(&t[..5], &up[..5], None).is_none());
    }

    #[test]
    fn plateau_peak_is_found_once() {
        let v = [0.0, 5.0, 5.0, 5.0, 0.0, 6.0, 0.0];
        assert_eq!(find_peaks(&v, 1.0), vec![2, 5]);
    }

    #[test]
    fn small_bumps_are_not_prominent() {
        let v = [0.0, 10.0, 9.0, 9.5, 0.0];
        assert_eq!(find_peaks(&v, 2.0), vec![1]);
    }

    fn traj(prey: &[Count], pred: &[Count]) -> Trajectory {
        let mut t = Trajectory::new(vec!["X".into(), "Y".into()], vec!["p0".into()]);
        for (k, (&x, &y)) in prey.iter().zip(pred).enumerate() {
            t.push_row(k as f64 * 0.01, &[vec![x, y]]);
        }
        t
    }

    #[test]
    fn flat_zero_predators_are_absent() {
        let prey: Vec<Count> = (0..50).map(|k| 10 + k).collect();
        let t = traj(&prey, &[0; 50]);
        let o = classify_colonization(&t, 0, 0, &ClassifyOptions::default()).unwrap();
        assert_eq!(o.classification, Classification::PredatorAbsent);
    }

    #[test]
    fn extinct_prey_after_invasion() {
        let mut prey = vec![10, 100, 1000, 5000, 800, 20, 0];
        prey.extend([0; 10]);
        let pred: Vec<Count> = (0..prey.len() as Count).map(|k| 30 * k).collect();
        let t = traj(&prey, &pred);
        let o = classify_colonization(&t, 0, 0, &ClassifyOptions::default()).unwrap();
        assert_eq!(o.classification, Classification::PreyExtinct);
        assert_eq!(o.extinction_time, Some(0.06));
    }

    #[test]
    fn established_cycles_count_as_colonized() {
        let n = 400;
        let prey: Vec<Count> = (0..n)
            .map(|k| (1000.0 + 600.0 * (k as f64 * 0.01 * 2.0 * std::f64::consts::PI / 0.45).sin()) as Count)
            .collect();
        let pred: Vec<Count> = (0..n)
            .map(|k| (2000.0 + 900.0 * (k as f64 * 0.01 * 2.0 * std::f64::consts::PI / 0.45 - 1.2).sin()) as Count)
            .collect();
        let mut pred = pred;
        pred[0] = 0;
        let t = traj(&prey, &pred);
        let o = classify_colonization(&t, 0, 0, &ClassifyOptions::default()).unwrap();
        assert_eq!(o.classification, Classification::Oscillating);
        assert!((o.period_estimate.unwrap() - 0.45).abs() < 0.02);
    }

    #[test]
    fn identical_series_have_zero_statistic() {
        let prey: Vec<Count> = (0..100).map(|k| 500 + (k * 37) % 101).collect();
        let pred: Vec<Count> = (0..100).map(|k| 900 + (k * 13) % 71).collect();
        let mut t = Trajectory::new(vec!["X".into(), "Y".into()], vec!["p0".into(), "p1".into()]);
        for k in 0..100 {
            t.push_row(k as f64, &[vec![prey[k], pred[k]], vec![prey[k], pred[k]]]);
        }
        let r = symmetry_report(&t, &[(0, 1)], &Roles::default()).unwrap();
        assert_eq!(r[0].combined(), 0.0);
    }

    #[test]
    fn phase_space_points() {
        let t = traj(&[5; 4], &[7; 4]);
        assert_eq!(export_phase_space(&t, 0, &Roles::default()).unwrap(), vec![(5, 7); 4]);
        let t = traj(&[10, 20, 40], &[0, 0, 0]);
        let pts = export_phase_space(&t, 0, &Roles::default()).unwrap();
        assert!(pts.iter().all(|&(_, y)| y == 0));
    }

    #[test]
    fn majority_needs_more_than_half() {
        let outcome = |c| PatchOutcome {
            patch: 0,
            classification: c,
            extinction_time: None,
            period_estimate: None,
            amplitude_stats: None,
        };
        let runs = vec![
            vec![outcome(Classification::Oscillating)],
            vec![outcome(Classification::PreyExtinct)],
        ];
        assert!(!majority_verdicts(&runs)[0].colonized());
        let runs = vec![
            vec![outcome(Classification::Oscillating)],
            vec![outcome(Classification::Oscillating)],
            vec![outcome(Classification::PreyExtinct)],
        ];
        assert!(majority_verdicts(&runs)[0].colonized());
    }

    proptest::proptest! {
        #[test]
        fn extinction_never_moves_earlier_when_extended(
            base in proptest::collection::vec(0i64..4, 1..30),
            extra in proptest::collection::vec(0i64..4, 0..10),
        ) {
            let mut long = base.clone();
            long.extend(&extra);
            let t: Vec<f64> = (0..long.len()).map(|k| k as f64).collect();
            let short = detect_extinction(&t[..base.len()], &base);
            let extended = detect_extinction(&t, &long);
            if let (Some(a), Some(b)) = (short, extended) {
                proptest::prop_assert!(b >= a);
            }
            if short.is_none() {
                proptest::prop_assert!(extended.is_none() || extra.last() == Some(&0));
            }
        }

        #[test]
        fn monotone_series_never_oscillate(start in 0.0f64..1e4, steps in proptest::collection::vec(0.0f64..50.0, 8..200)) {
            let mut v = vec![start];
            for s in &steps {
                let last = *v.last().unwrap();
                v.push(last + s);
            }
            let t: Vec<f64> = (0..v.len()).map(|k| k as f64).collect();
            proptest::prop_assert!(detect_oscillation(&t, &v, None).is_none());
        }

        #[test]
        fn zero_predators_always_absent(prey in proptest::collection::vec(0i64..5000, 8..100)) {
            let pred = vec![0; prey.len()];
            let t = traj(&prey, &pred);
            let o = classify_colonization(&t, 0, 0, &ClassifyOptions::default()).unwrap();
            proptest::prop_assert_eq!(o.classification, Classification::PredatorAbsent);
        }
    }
}
