//! Experiments confronting simulated paths with the decomposition.
//!
//! Each check returns a [`Verdict`] holding the statistic, the threshold it
//! was compared against, and the raw per-replica numbers, so thresholds can
//! be revisited without re-running anything. Replicas run in parallel on
//! independent generator streams of one seed.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_traits::{One, Signed, Zero};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::decomposition::{
    bonded_components, brute_force_decompose, decompose, Decomposition, DecompositionError,
    BRUTE_FORCE_MAX_STATIONS,
};
use crate::model::{Cluster, Instance, ModelError, StaticPolicy};
use crate::rational::{format_rational, sign, to_f64, Rational};
use crate::sample::random_weights;
use crate::simulator::{
    properly_clustered, replica_rng, shape_statistic, ProcessKind, Routing, ScaledWeights,
    SimError, SimModel, Walker, RNG_NAME,
};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("experiment not applicable: {0}")]
    Inapplicable(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("LP and brute-force decompositions disagree: {0}")]
    Disagreement(String),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Comparison {
    AtLeast,
    AtMost,
    Below,
}

impl Comparison {
    pub fn holds(self, statistic: f64, threshold: f64) -> bool {
        match self {
            Comparison::AtLeast => statistic >= threshold,
            Comparison::AtMost => statistic <= threshold,
            Comparison::Below => statistic < threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub experiment: String,
    pub claim: String,
    pub statistic: f64,
    pub threshold: f64,
    pub comparison: Comparison,
    pub passed: bool,
    pub seed: u64,
    pub replicas: usize,
    pub rng: String,
    pub details: BTreeMap<String, serde_json::Value>,
    pub replica_stats: Vec<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Verdict {
    fn new(
        experiment: Experiment,
        claim: &str,
        statistic: f64,
        threshold: f64,
        comparison: Comparison,
        seed: u64,
        replicas: usize,
    ) -> Self {
        Verdict {
            experiment: experiment.name().to_string(),
            claim: claim.to_string(),
            statistic,
            threshold,
            comparison,
            passed: comparison.holds(statistic, threshold),
            seed,
            replicas,
            rng: RNG_NAME.to_string(),
            details: BTreeMap::new(),
            replica_stats: Vec::new(),
            note: None,
        }
    }

    fn detail(mut self, key: &str, value: serde_json::Value) -> Self {
        self.details.insert(key.to_string(), value);
        self
    }

    /// One line: `PASS speeds: statistic 8 at_least 7`.
    pub fn summary(&self) -> String {
        format!(
            "{} {}: statistic {} {} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.experiment,
            self.statistic,
            serde_json::to_value(self.comparison).expect("plain enum").as_str().unwrap_or(""),
            self.threshold
        )
    }
}

/// Long-format CSV of per-replica statistics:
/// `experiment,replica,statistic,value`.
pub fn write_replica_csv<W: Write>(verdicts: &[Verdict], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["experiment", "replica", "statistic", "value"])?;
    for v in verdicts {
        for (r, stats) in v.replica_stats.iter().enumerate() {
            for (k, x) in stats {
                w.write_record([v.experiment.as_str(), &r.to_string(), k, &x.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Speeds,
    Separation,
    Shape,
    Control,
    Stability,
    Weights,
    Dispersion,
}

impl Experiment {
    pub const ALL: [Experiment; 7] = [
        Experiment::Speeds,
        Experiment::Separation,
        Experiment::Shape,
        Experiment::Control,
        Experiment::Stability,
        Experiment::Weights,
        Experiment::Dispersion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Speeds => "speeds",
            Experiment::Separation => "separation",
            Experiment::Shape => "shape",
            Experiment::Control => "control",
            Experiment::Stability => "stability",
            Experiment::Weights => "weights",
            Experiment::Dispersion => "dispersion",
        }
    }

    fn default_horizon(self) -> u64 {
        match self {
            Experiment::Separation | Experiment::Control => 100_000,
            _ => 1_000_000,
        }
    }

    fn default_replicas(self) -> usize {
        match self {
            Experiment::Control => 32,
            Experiment::Dispersion | Experiment::Weights => 1,
            _ => 8,
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Experiment {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| VerifyError::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// Simulation budget shared by the Monte-Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Batch {
    pub horizon: u64,
    pub replicas: usize,
    pub seed: u64,
}

impl Batch {
    fn check(&self) -> Result<(), VerifyError> {
        if self.horizon == 0 {
            return Err(VerifyError::InvalidParameter("degenerate horizon 0".into()));
        }
        if self.replicas == 0 {
            return Err(VerifyError::InvalidParameter("replicas must be positive".into()));
        }
        Ok(())
    }

    fn map<T: Send>(&self, f: impl Fn(ChaCha8Rng) -> T + Sync) -> Vec<T> {
        (0..self.replicas as u64)
            .into_par_iter()
            .map(|r| f(replica_rng(self.seed, r)))
            .collect()
    }
}

/// LP decomposition, cross-checked against brute force when the instance is
/// small enough to enumerate.
pub fn agreed_decomposition(instance: &Instance) -> Result<Decomposition, VerifyError> {
    let lp = decompose(instance)?;
    if instance.n_stations() <= BRUTE_FORCE_MAX_STATIONS {
        let bf = brute_force_decompose(instance)?;
        if !lp.same_structure(&bf) {
            let show = |d: &Decomposition| {
                d.clusters
                    .iter()
                    .zip(&d.values)
                    .map(|(c, v)| format!("{c}:{}", format_rational(v)))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            return Err(VerifyError::Disagreement(format!("LP {} vs brute force {}", show(&lp), show(&bf))));
        }
    }
    Ok(lp)
}

fn station_values(instance: &Instance, decomposition: &Decomposition) -> Vec<f64> {
    (0..instance.n_stations())
        .map(|j| to_f64(&decomposition.values[decomposition.cluster_of(j).expect("partition")]))
        .collect()
}

fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Weighted speeds `w_j ξ_j(t) α / t` of the walk under JLW approach the
/// cluster values within `t^{-ε}`.
///
/// The condition is checked at the final step and at the ten preceding
/// sample points. A station passes when at least `quorum` replicas meet it
/// (all replicas by default).
pub fn check_speeds(
    instance: &Instance,
    decomposition: &Decomposition,
    batch: Batch,
    epsilon: f64,
    quorum: Option<usize>,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(VerifyError::InvalidParameter(format!("epsilon {epsilon} is outside (0, 1/2)")));
    }
    let quorum = quorum.unwrap_or(batch.replicas);
    if quorum == 0 || quorum > batch.replicas {
        return Err(VerifyError::InvalidParameter(format!(
            "quorum {quorum} must lie in 1..={}",
            batch.replicas
        )));
    }
    let t_final = batch.horizon as f64;
    let tolerance = t_final.powf(-epsilon);
    let min_gap = decomposition
        .values
        .windows(2)
        .map(|v| to_f64(&(&v[0] - &v[1])))
        .fold(f64::INFINITY, f64::min);
    if tolerance >= min_gap / 2.0 {
        return Err(VerifyError::InvalidParameter(format!(
            "degenerate horizon: T^-eps = {tolerance} is not below half the smallest cluster gap {min_gap}"
        )));
    }
    let model = SimModel::new(instance, &Routing::Jlw)?;
    let n = instance.n_stations();
    let target = station_values(instance, decomposition);
    let cadence = batch.horizon.div_ceil(crate::simulator::DEFAULT_SAMPLES).max(1);
    let checkpoints: Vec<u64> = (0..=10u64)
        .filter_map(|m| batch.horizon.checked_sub(m * cadence))
        .filter(|&t| t > 0)
        .collect();
    let alpha = model.alpha();
    let results = batch.map(|rng| {
        let mut walker = Walker::new(&model, ProcessKind::Walk, vec![0; n], rng);
        let mut ok = vec![true; n];
        let mut speed_at_t = vec![0.0; n];
        for step in 1..=batch.horizon {
            walker.step();
            if checkpoints.contains(&step) {
                let t = step as f64;
                for j in 0..n {
                    let speed = model.weights().value(j, walker.state()[j]) * alpha / t;
                    if (speed - target[j]).abs() >= t.powf(-epsilon) {
                        ok[j] = false;
                    }
                    if step == batch.horizon {
                        speed_at_t[j] = speed;
                    }
                }
            }
        }
        (ok, speed_at_t)
    });
    let pass_counts: Vec<usize> = (0..n).map(|j| results.iter().filter(|(ok, _)| ok[j]).count()).collect();
    let max_dev: Vec<f64> = (0..n)
        .map(|j| results.iter().map(|(_, s)| (s[j] - target[j]).abs()).fold(0.0, f64::max))
        .collect();
    let statistic = *pass_counts.iter().min().expect("at least one station") as f64;
    let mut v = Verdict::new(
        Experiment::Speeds,
        "weighted walk components in cluster k move at speed V_k, within t^-eps",
        statistic,
        quorum as f64,
        Comparison::AtLeast,
        batch.seed,
        batch.replicas,
    )
    .detail("epsilon", json!(epsilon))
    .detail("tolerance_at_horizon", json!(tolerance))
    .detail("target_speeds", json!(target))
    .detail("station_pass_counts", json!(pass_counts))
    .detail("max_abs_deviation", json!(max_dev))
    .detail("horizon", json!(batch.horizon));
    v.replica_stats = results
        .iter()
        .map(|(_, s)| s.iter().enumerate().map(|(j, x)| (format!("speed_{}", j + 1), *x)).collect())
        .collect();
    Ok(v)
}

/// Proper clustering is reached and then held over the final 20% of steps.
pub fn check_separation(
    instance: &Instance,
    decomposition: &Decomposition,
    batch: Batch,
    initial_state: Option<Vec<i64>>,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    if decomposition.k() < 2 {
        return Err(VerifyError::Inapplicable("a single cluster is always properly clustered".into()));
    }
    let n = instance.n_stations();
    let x0 = initial_state.unwrap_or_else(|| vec![0; n]);
    if x0.len() != n {
        return Err(VerifyError::InvalidParameter(format!("initial state needs {n} entries")));
    }
    let model = SimModel::new(instance, &Routing::Jlw)?;
    let window_start = batch.horizon - batch.horizon / 5;
    let results = batch.map(|rng| {
        let mut walker = Walker::new(&model, ProcessKind::Walk, x0.clone(), rng);
        let mut last_bad: Option<u64> = None;
        let mut clustered = 0u64;
        for step in 0..=batch.horizon {
            if step > 0 {
                walker.step();
            }
            let ok = properly_clustered(walker.state(), decomposition, model.weights());
            if ok {
                clustered += 1;
            } else {
                last_bad = Some(step);
            }
        }
        (last_bad, clustered)
    });
    let passing = results
        .iter()
        .filter(|(bad, _)| bad.is_none_or(|s| s < window_start))
        .count();
    let mut v = Verdict::new(
        Experiment::Separation,
        "the walk becomes properly clustered and stays so",
        passing as f64,
        batch.replicas as f64,
        Comparison::AtLeast,
        batch.seed,
        batch.replicas,
    )
    .detail("window_start", json!(window_start))
    .detail("initial_state", json!(x0));
    v.replica_stats = results
        .iter()
        .map(|(bad, c)| {
            BTreeMap::from([
                ("last_unclustered_step".to_string(), bad.map_or(-1.0, |s| s as f64)),
                ("clustered_fraction".to_string(), *c as f64 / (batch.horizon + 1) as f64),
            ])
        })
        .collect();
    Ok(v)
}

fn spread(state: &[i64], c: &Cluster, w: &ScaledWeights) -> f64 {
    let vals = c.members().iter().map(|&j| w.value(j, state[j]));
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    hi - lo
}

#[derive(Debug, Clone, Default)]
struct ShapeTally {
    above: [u64; 3],
    /// Excursion lengths above the base radius, by the half they start in.
    excursions: [Vec<u64>; 2],
}

fn mean_u64(v: &[u64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<u64>() as f64 / v.len() as f64
    }
}

/// Recurrence in shape on bonded sub-clusters: the largest weighted
/// difference inside the component spends less time above `2M` than above
/// `M`, less above `4M` than above `2M`, and its excursions above `M` have
/// the same mean length in both halves of the run (within 50%).
pub fn check_shape_recurrence(
    instance: &Instance,
    decomposition: &Decomposition,
    bonded: &[Vec<Cluster>],
    batch: Batch,
    radius: f64,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    if radius.is_nan() || radius <= 0.0 {
        return Err(VerifyError::InvalidParameter(format!("radius {radius} must be positive")));
    }
    let components: Vec<&Cluster> = bonded.iter().flatten().filter(|c| c.len() >= 2).collect();
    if components.is_empty() {
        return Err(VerifyError::Inapplicable("no bonded component has two or more stations".into()));
    }
    let model = SimModel::new(instance, &Routing::Jlw)?;
    let radii = [radius, 2.0 * radius, 4.0 * radius];
    let n = instance.n_stations();
    let half = batch.horizon / 2;
    let results = batch.map(|rng| {
        let mut walker = Walker::new(&model, ProcessKind::Walk, vec![0; n], rng);
        let mut tallies = vec![ShapeTally::default(); components.len()];
        let mut open: Vec<Option<u64>> = vec![None; components.len()];
        for step in 1..=batch.horizon {
            walker.step();
            for (c, comp) in components.iter().enumerate() {
                let d = spread(walker.state(), comp, model.weights());
                for (r, &m) in radii.iter().enumerate() {
                    if d > m {
                        tallies[c].above[r] += 1;
                    }
                }
                match (open[c], d > radius) {
                    (None, true) => open[c] = Some(step),
                    (Some(start), false) => {
                        let h = usize::from(start > half);
                        tallies[c].excursions[h].push(step - start);
                        open[c] = None;
                    }
                    _ => {}
                }
            }
        }
        tallies
    });
    let total_steps = (batch.horizon * batch.replicas as u64) as f64;
    let mut failures = 0u64;
    let mut per_component = Vec::new();
    for (c, comp) in components.iter().enumerate() {
        let fractions: Vec<f64> = (0..3)
            .map(|r| results.iter().map(|t| t[c].above[r]).sum::<u64>() as f64 / total_steps)
            .collect();
        let decreasing = fractions
            .windows(2)
            .all(|f| f[1] <= f[0] && (f[0] == 0.0 || f[1] < f[0]));
        let pooled = |h: usize| -> Vec<u64> { results.iter().flat_map(|t| t[c].excursions[h].clone()).collect() };
        let (first, second) = (pooled(0), pooled(1));
        let (m1, m2) = (mean_u64(&first), mean_u64(&second));
        let stable = match (first.is_empty(), second.is_empty()) {
            (true, true) => true,
            (false, false) => (m2 - m1).abs() <= 0.5 * m1,
            _ => false,
        };
        failures += u64::from(!decreasing) + u64::from(!stable);
        per_component.push(json!({
            "component": comp.one_based(),
            "radii": radii,
            "fraction_above": fractions,
            "fractions_decreasing": decreasing,
            "mean_return_time_first_half": m1,
            "mean_return_time_second_half": m2,
            "excursions": [first.len(), second.len()],
            "return_time_stable": stable,
        }));
    }
    let mut v = Verdict::new(
        Experiment::Shape,
        "pairwise weighted differences within a bonded component are recurrent",
        failures as f64,
        0.0,
        Comparison::AtMost,
        batch.seed,
        batch.replicas,
    )
    .detail("components", json!(per_component))
    .detail("clusters", json!(decomposition.clusters.iter().map(Cluster::one_based).collect::<Vec<_>>()));
    v.replica_stats = results
        .iter()
        .map(|t| {
            let mut m = BTreeMap::new();
            for (c, tally) in t.iter().enumerate() {
                m.insert(format!("c{}_above_M", c + 1), tally.above[0] as f64 / batch.horizon as f64);
                m.insert(format!("c{}_excursions", c + 1), (tally.excursions[0].len() + tally.excursions[1].len()) as f64);
            }
            m
        })
        .collect();
    v.note = Some("time fractions are compared across radii M, 2M, 4M".into());
    Ok(v)
}

/// Control for the shape check: two stations of one cluster lying in
/// different bonded components drift apart diffusively, so the mean of
/// `|w_a ξ_a − w_b ξ_b|` grows like `t^{1/2}`.
pub fn check_diffusive_control(
    instance: &Instance,
    decomposition: &Decomposition,
    bonded: &[Vec<Cluster>],
    batch: Batch,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    let pair = bonded
        .iter()
        .find(|comps| comps.len() >= 2)
        .map(|comps| (comps[0].members()[0], comps[1].members()[0]))
        .ok_or_else(|| VerifyError::Inapplicable("every cluster is bonded".into()))?;
    let model = SimModel::new(instance, &Routing::Jlw)?;
    let n = instance.n_stations();
    let start = (batch.horizon / 1000).max(100).min(batch.horizon);
    let grid: Vec<u64> = {
        let points = 20;
        let ratio = (batch.horizon as f64 / start as f64).powf(1.0 / (points - 1) as f64);
        let mut g: Vec<u64> = (0..points).map(|p| (start as f64 * ratio.powi(p)).round() as u64).collect();
        g.dedup();
        g
    };
    let results = batch.map(|rng| {
        let mut walker = Walker::new(&model, ProcessKind::Walk, vec![0; n], rng);
        let mut out = Vec::with_capacity(grid.len());
        let mut next = 0;
        for step in 1..=batch.horizon {
            walker.step();
            if next < grid.len() && step == grid[next] {
                let w = model.weights();
                let s = walker.state();
                out.push((w.value(pair.0, s[pair.0]) - w.value(pair.1, s[pair.1])).abs());
                next += 1;
            }
        }
        out
    });
    let means: Vec<f64> = (0..grid.len())
        .map(|g| results.iter().map(|r| r[g]).sum::<f64>() / batch.replicas as f64)
        .collect();
    let usable: Vec<(f64, f64)> = grid
        .iter()
        .zip(&means)
        .filter(|(_, m)| **m > 0.0)
        .map(|(t, m)| ((*t as f64).ln(), m.ln()))
        .collect();
    let (xs, ys): (Vec<f64>, Vec<f64>) = usable.into_iter().unzip();
    let exponent = if xs.len() >= 2 { ols_slope(&xs, &ys) } else { f64::NAN };
    let mut v = Verdict::new(
        Experiment::Control,
        "stations in different bonded components separate diffusively",
        (exponent - 0.5).abs(),
        0.15,
        Comparison::AtMost,
        batch.seed,
        batch.replicas,
    )
    .detail("stations", json!([pair.0 + 1, pair.1 + 1]))
    .detail("exponent", json!(exponent))
    .detail("grid", json!(grid))
    .detail("mean_abs_difference", json!(means))
    .detail("clusters", json!(decomposition.clusters.iter().map(Cluster::one_based).collect::<Vec<_>>()));
    v.note = Some("expected non-tight: the difference is null recurrent".into());
    Ok(v)
}

/// The queue under JLW is stable when `V_1 < 0` and grows linearly on
/// `C_1` when `V_1 > 0`.
///
/// The stable branch is a proxy: at least `min_returns` returns of the
/// total queue to zero, and the mean total over the final half within 25%
/// of its mean over the second quarter.
pub fn check_stability(
    instance: &Instance,
    decomposition: &Decomposition,
    batch: Batch,
    min_returns: u64,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    let v1 = &decomposition.values[0];
    if v1.is_zero() {
        return Err(VerifyError::Inapplicable("V_1 = 0 is the critical case".into()));
    }
    let model = SimModel::new(instance, &Routing::Jlw)?;
    let n = instance.n_stations();
    let alpha = model.alpha();
    if v1.is_negative() {
        let q1 = batch.horizon / 4;
        let q2 = batch.horizon / 2;
        let results = batch.map(|rng| {
            let mut walker = Walker::new(&model, ProcessKind::Queue, vec![0; n], rng);
            let mut returns = 0u64;
            let (mut sum_q2, mut sum_half) = (0.0, 0.0);
            let mut prev = 0i64;
            for step in 1..=batch.horizon {
                walker.step();
                let total: i64 = walker.state().iter().sum();
                if total == 0 && prev > 0 {
                    returns += 1;
                }
                prev = total;
                if step > q1 && step <= q2 {
                    sum_q2 += total as f64;
                } else if step > q2 {
                    sum_half += total as f64;
                }
            }
            let m_q2 = sum_q2 / (q2 - q1).max(1) as f64;
            let m_half = sum_half / (batch.horizon - q2).max(1) as f64;
            (returns, m_q2, m_half)
        });
        let ok = |(r, a, b): &(u64, f64, f64)| *r >= min_returns && (b - a).abs() <= 0.25 * a.max(f64::MIN_POSITIVE);
        let passing = results.iter().filter(|r| ok(r)).count();
        let mut v = Verdict::new(
            Experiment::Stability,
            "V_1 < 0: the queue under JLW is stable",
            passing as f64,
            batch.replicas as f64,
            Comparison::AtLeast,
            batch.seed,
            batch.replicas,
        )
        .detail("v1", json!(format_rational(v1)))
        .detail("min_returns", json!(min_returns))
        .detail("returns", json!(results.iter().map(|r| r.0).collect::<Vec<_>>()));
        v.replica_stats = results
            .iter()
            .map(|(r, a, b)| {
                BTreeMap::from([
                    ("returns_to_zero".to_string(), *r as f64),
                    ("mean_total_second_quarter".to_string(), *a),
                    ("mean_total_final_half".to_string(), *b),
                ])
            })
            .collect();
        v.note = Some("stationarity proxy; simulation cannot certify positive recurrence".into());
        Ok(v)
    } else {
        let c1 = &decomposition.clusters[0];
        let w = model.weights();
        let max_w = c1.members().iter().map(|&j| w.weight(j)).fold(0.0, f64::max);
        let expected = c1.len() as f64 * to_f64(v1) / alpha;
        let threshold = expected / (2.0 * max_w);
        let cadence = batch.horizon.div_ceil(1000).max(1);
        let slopes = batch.map(|rng| {
            let mut walker = Walker::new(&model, ProcessKind::Queue, vec![0; n], rng);
            let (mut xs, mut ys) = (vec![0.0], vec![0.0]);
            for step in 1..=batch.horizon {
                walker.step();
                if step % cadence == 0 || step == batch.horizon {
                    xs.push(step as f64);
                    ys.push(c1.members().iter().map(|&j| w.value(j, walker.state()[j])).sum());
                }
            }
            ols_slope(&xs, &ys)
        });
        let passing = slopes.iter().filter(|&&s| s >= threshold).count();
        let rel: Vec<f64> = slopes.iter().map(|s| (s - expected).abs() / expected).collect();
        let mut v = Verdict::new(
            Experiment::Stability,
            "V_1 > 0: the weighted queue on C_1 grows linearly",
            passing as f64,
            batch.replicas as f64,
            Comparison::AtLeast,
            batch.seed,
            batch.replicas,
        )
        .detail("v1", json!(format_rational(v1)))
        .detail("slope_threshold", json!(threshold))
        .detail("expected_slope", json!(expected))
        .detail("slopes", json!(slopes))
        .detail("max_relative_error", json!(rel.iter().copied().fold(0.0, f64::max)));
        v.replica_stats = slopes
            .iter()
            .zip(&rel)
            .map(|(s, r)| BTreeMap::from([("slope".to_string(), *s), ("relative_error".to_string(), *r)]))
            .collect();
        Ok(v)
    }
}

/// `sign(V_1)` is the same for every positive weight vector.
pub fn check_weight_invariance(instance: &Instance, weight_samples: &[Vec<Rational>]) -> Result<Verdict, VerifyError> {
    if weight_samples.len() < 2 {
        return Err(VerifyError::InvalidParameter("need at least two weight vectors".into()));
    }
    let mut signs = Vec::new();
    let mut values = Vec::new();
    for w in weight_samples {
        if w.len() != instance.n_stations() {
            return Err(VerifyError::InvalidParameter(format!(
                "weight vector has {} entries, expected {}",
                w.len(),
                instance.n_stations()
            )));
        }
        if w.iter().any(|x| !x.is_positive()) {
            return Err(VerifyError::InvalidParameter("weights must be positive".into()));
        }
        let d = decompose(&instance.with_weights(w.clone())?)?;
        signs.push(sign(&d.values[0]));
        values.push(format_rational(&d.values[0]));
    }
    let mut distinct = signs.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(Verdict::new(
        Experiment::Weights,
        "the sign of V_1 does not depend on the weights",
        distinct.len() as f64,
        1.0,
        Comparison::AtMost,
        0,
        0,
    )
    .detail("v1", json!(values))
    .detail("signs", json!(signs))
    .detail(
        "weights",
        json!(weight_samples
            .iter()
            .map(|w| w.iter().map(format_rational).collect::<Vec<_>>())
            .collect::<Vec<_>>()),
    ))
}

/// `(1/2α) Σ_{j∈C} α_j (γ w_j − 1)` with `α_j = μ_j + Σ_i λ_i π(i)_j` and
/// `γ = Σ_{j∈C} 1/w_j`: the exact mean increment of the shape statistic per
/// jump under a policy that equalizes weighted drifts on `C`.
pub fn dispersion_constant(instance: &Instance, cluster: &Cluster, policy: &StaticPolicy) -> Rational {
    let w = instance.weights();
    let gamma: Rational = cluster.members().iter().map(|&j| w[j].recip()).sum();
    let mut total = Rational::zero();
    for &j in cluster.members() {
        let inflow: Rational = instance
            .neighbourhoods()
            .iter()
            .zip(policy.rows())
            .map(|(nb, row)| &nb.rate * &row[j])
            .sum();
        let alpha_j = &instance.service_rates()[j] + inflow;
        total += alpha_j * (&gamma * &w[j] - Rational::one());
    }
    total / (instance.event_rate() * Rational::from_integer(2.into()))
}

/// The same constant with JLW's state-dependent rates `α_j(x)`.
pub fn jlw_dispersion_bound(model: &SimModel, cluster: &Cluster, state: &[i64]) -> f64 {
    let w = model.weights();
    let gamma: f64 = cluster.members().iter().map(|&j| 1.0 / w.weight(j)).sum();
    let total: f64 = cluster
        .members()
        .iter()
        .map(|&j| model.station_event_rate(j, state) * (gamma * w.weight(j) - 1.0))
        .sum();
    total / (2.0 * model.alpha())
}

/// A state with `w_j x_j` close to `(K − k) · gap` on `C_k`.
pub fn clustered_start(instance: &Instance, decomposition: &Decomposition, gap: i64) -> Vec<i64> {
    let k = decomposition.k() as i64;
    let mut x = vec![0; instance.n_stations()];
    for (idx, c) in decomposition.clusters.iter().enumerate() {
        let level = Rational::from_integer(((k - 1 - idx as i64) * gap).into());
        for &j in c.members() {
            x[j] = (&level / &instance.weights()[j]).floor().to_integer().try_into().unwrap_or(i64::MAX);
        }
    }
    x
}

#[derive(Debug, Clone, Default)]
struct SegmentSums {
    sums: Vec<f64>,
    counts: Vec<u64>,
}

impl SegmentSums {
    fn mean_and_se(&self) -> (f64, f64) {
        let total: u64 = self.counts.iter().sum();
        if total == 0 {
            return (0.0, 0.0);
        }
        let mean = self.sums.iter().sum::<f64>() / total as f64;
        let k = self.sums.len() as f64;
        let ss: f64 = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (s - mean * c as f64).powi(2))
            .sum();
        let se = if k > 1.0 { (ss * k / (k - 1.0)).sqrt() / total as f64 } else { f64::INFINITY };
        (mean, se)
    }
}

/// Mean increment of the shape statistic at properly clustered states,
/// under the witness and under JLW.
///
/// The chain is restarted from a properly clustered state every
/// `segment_len` steps; segments are independent, which gives the
/// standard error. Sampling stops once `batch.horizon` properly clustered
/// steps are collected per routing (or after twenty times that many steps).
pub fn check_dispersion(
    instance: &Instance,
    decomposition: &Decomposition,
    batch: Batch,
    segment_len: u64,
) -> Result<Verdict, VerifyError> {
    batch.check()?;
    if segment_len < 2 {
        return Err(VerifyError::InvalidParameter("segment length must be at least 2".into()));
    }
    let clusters: Vec<(usize, &Cluster)> = decomposition
        .clusters
        .iter()
        .enumerate()
        .filter(|(_, c)| c.len() >= 2)
        .collect();
    let witness_model = SimModel::new(instance, &Routing::Static(decomposition.witness.clone()))?;
    let jlw_model = SimModel::new(instance, &Routing::Jlw)?;
    let max_w = (0..instance.n_stations()).map(|j| jlw_model.weights().weight(j)).fold(0.0, f64::max);
    let gap = ((4 * segment_len) as f64 * max_w).ceil() as i64 + 1;
    let x0 = clustered_start(instance, decomposition, gap);
    let cap = batch.horizon.saturating_mul(20);

    let sample = |model: &SimModel, stream: u64, excess: bool| -> (Vec<SegmentSums>, u64, u64) {
        let mut out = vec![SegmentSums::default(); clusters.len()];
        let mut walker = Walker::new(model, ProcessKind::Walk, x0.clone(), replica_rng(batch.seed, stream));
        let mut used = 0u64;
        let mut total = 0u64;
        while used < batch.horizon && total < cap {
            walker.reset(x0.clone());
            for o in out.iter_mut() {
                o.sums.push(0.0);
                o.counts.push(0);
            }
            for _ in 0..segment_len {
                let before = walker.state().to_vec();
                let clustered = properly_clustered(&before, decomposition, model.weights());
                walker.step();
                total += 1;
                if !clustered {
                    continue;
                }
                used += 1;
                for (slot, (_, c)) in out.iter_mut().zip(&clusters) {
                    let mut d = shape_statistic(walker.state(), c, model.weights())
                        - shape_statistic(&before, c, model.weights());
                    if excess {
                        d -= jlw_dispersion_bound(model, c, &before);
                    }
                    *slot.sums.last_mut().expect("pushed above") += d;
                    *slot.counts.last_mut().expect("pushed above") += 1;
                }
                if used >= batch.horizon {
                    break;
                }
            }
        }
        (out, used, total)
    };

    let ((w_sums, w_used, w_total), (j_sums, j_used, j_total)) = rayon::join(
        || sample(&witness_model, 0, false),
        || sample(&jlw_model, 1, true),
    );
    let mut statistic: f64 = 0.0;
    let mut per_cluster = Vec::new();
    for (slot, (k, c)) in clusters.iter().enumerate() {
        let exact = dispersion_constant(instance, c, &decomposition.witness);
        let target = to_f64(&exact);
        let (wm, wse) = w_sums[slot].mean_and_se();
        let z_w = if wse > 0.0 { (wm - target) / wse } else if wm == target { 0.0 } else { f64::INFINITY };
        let (jm, jse) = j_sums[slot].mean_and_se();
        let z_j = if jse > 0.0 { jm / jse } else if jm <= 0.0 { 0.0 } else { f64::INFINITY };
        statistic = statistic.max(z_w.abs()).max(z_j);
        per_cluster.push(json!({
            "cluster": c.one_based(),
            "index": k + 1,
            "closed_form": format_rational(&exact),
            "witness_mean": wm,
            "witness_se": wse,
            "witness_z": z_w,
            "jlw_mean_excess": jm,
            "jlw_se": jse,
            "jlw_z": z_j,
        }));
    }
    let mut v = Verdict::new(
        Experiment::Dispersion,
        "mean shape increment equals the closed form under the witness and is bounded under JLW",
        statistic,
        4.0,
        Comparison::AtMost,
        batch.seed,
        1,
    )
    .detail("clusters", json!(per_cluster))
    .detail("segment_len", json!(segment_len))
    .detail("initial_state", json!(x0))
    .detail("witness_steps", json!([w_used, w_total]))
    .detail("jlw_steps", json!([j_used, j_total]));
    if w_used < batch.horizon || j_used < batch.horizon {
        v.note = Some("step cap reached before the requested number of clustered steps".into());
    }
    Ok(v)
}

/// Overrides shared by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct VerifyOptions {
    pub seed: u64,
    pub horizon: Option<u64>,
    pub replicas: Option<usize>,
    pub epsilon: f64,
    pub radius: f64,
    pub quorum: Option<usize>,
    pub initial_state: Option<Vec<i64>>,
    pub weight_samples: Vec<Vec<Rational>>,
    pub min_returns: u64,
    pub segment_len: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            horizon: None,
            replicas: None,
            epsilon: 0.2,
            radius: 5.0,
            quorum: None,
            initial_state: None,
            weight_samples: Vec::new(),
            min_returns: 100,
            segment_len: 1000,
        }
    }
}

impl VerifyOptions {
    fn batch(&self, experiment: Experiment) -> Batch {
        Batch {
            horizon: self.horizon.unwrap_or(experiment.default_horizon()),
            replicas: self.replicas.unwrap_or(experiment.default_replicas()),
            seed: self.seed,
        }
    }
}

/// Runs one experiment on the agreed decomposition of `instance`.
pub fn run_experiment(experiment: Experiment, instance: &Instance, options: &VerifyOptions) -> Result<Verdict, VerifyError> {
    let d = agreed_decomposition(instance)?;
    run_with(experiment, instance, &d, options)
}

fn run_with(
    experiment: Experiment,
    instance: &Instance,
    d: &Decomposition,
    options: &VerifyOptions,
) -> Result<Verdict, VerifyError> {
    let batch = options.batch(experiment);
    match experiment {
        Experiment::Speeds => check_speeds(instance, d, batch, options.epsilon, options.quorum),
        Experiment::Separation => check_separation(instance, d, batch, options.initial_state.clone()),
        Experiment::Shape => {
            let bonded = bonded_components(instance, d)?;
            check_shape_recurrence(instance, d, &bonded, batch, options.radius)
        }
        Experiment::Control => {
            let bonded = bonded_components(instance, d)?;
            check_diffusive_control(instance, d, &bonded, batch)
        }
        Experiment::Stability => check_stability(instance, d, batch, options.min_returns),
        Experiment::Weights => {
            let samples = if options.weight_samples.is_empty() {
                let mut rng = replica_rng(options.seed, 0);
                let mut s = vec![instance.weights().to_vec()];
                s.extend((0..4).map(|_| random_weights(&mut rng, instance.n_stations())));
                s
            } else {
                options.weight_samples.clone()
            };
            check_weight_invariance(instance, &samples)
        }
        Experiment::Dispersion => check_dispersion(instance, d, batch, options.segment_len),
    }
}

/// Every applicable experiment; inapplicable ones are skipped and named.
pub fn run_all(instance: &Instance, options: &VerifyOptions) -> Result<(Vec<Verdict>, Vec<String>), VerifyError> {
    let d = agreed_decomposition(instance)?;
    let mut verdicts = Vec::new();
    let mut skipped = Vec::new();
    for e in Experiment::ALL {
        match run_with(e, instance, &d, options) {
            Ok(v) => verdicts.push(v),
            Err(VerifyError::Inapplicable(why)) => skipped.push(format!("{e}: {why}")),
            Err(VerifyError::InvalidParameter(why)) if options.horizon.is_none() => {
                skipped.push(format!("{e}: {why}"))
            }
            Err(err) => return Err(err),
        }
    }
    Ok((verdicts, skipped))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RawInstance;
    use crate::rational::{from_int, ratio};

    fn inst(n: usize, nbs: &[(&[usize], Rational)], mu: &[Rational], w: &[Rational]) -> Instance {
        Instance::new_relaxed(RawInstance {
            n_stations: n,
            neighbourhoods: nbs.iter().map(|(m, r)| (m.to_vec(), r.clone())).collect(),
            service_rates: mu.to_vec(),
            weights: w.to_vec(),
        })
        .unwrap()
    }

    fn ones(n: usize) -> Vec<Rational> {
        vec![from_int(1); n]
    }

    fn batch(horizon: u64, replicas: usize) -> Batch {
        Batch {
            horizon,
            replicas,
            seed: 17,
        }
    }

    fn single(lambda: Rational) -> Instance {
        inst(1, &[(&[0], lambda)], &ones(1), &ones(1))
    }

    #[test]
    fn verdict_pass_flag_follows_comparison() {
        assert!(Comparison::AtLeast.holds(3.0, 3.0));
        assert!(!Comparison::Below.holds(3.0, 3.0));
        assert!(Comparison::AtMost.holds(-1.0, 0.0));
        let v = check_weight_invariance(&single(ratio(4, 5)), &[ones(1), vec![from_int(3)]]).unwrap();
        assert_eq!(v.passed, v.comparison.holds(v.statistic, v.threshold));
        assert!(v.summary().starts_with("PASS weights"));
    }

    #[test]
    fn weight_invariance_examples() {
        let stable = inst(
            2,
            &[(&[0, 1], from_int(1)), (&[0], ratio(1, 2))],
            &ones(2),
            &ones(2),
        );
        let samples = vec![ones(2), vec![from_int(1), from_int(2)], vec![from_int(3), from_int(1)]];
        let v = check_weight_invariance(&stable, &samples).unwrap();
        assert!(v.passed);
        assert_eq!(v.details["signs"], json!([-1, -1, -1]));

        let unstable = single(ratio(5, 4));
        let v = check_weight_invariance(&unstable, &[ones(1), vec![ratio(1, 2)]]).unwrap();
        assert_eq!(v.details["v1"], json!(["1/4", "1/8"]));

        assert!(check_weight_invariance(&unstable, &[ones(1)]).is_err());
        assert!(check_weight_invariance(&unstable, &[ones(1), vec![from_int(0)]]).is_err());
    }

    #[test]
    fn dispersion_constant_hand_values() {
        // symmetric pair, w = 1, witness splits evenly: (1/2α) Σ α_j (2 - 1)
        let pair = inst(2, &[(&[0, 1], from_int(2))], &ones(2), &ones(2));
        let d = decompose(&pair).unwrap();
        let c = &d.clusters[0];
        assert_eq!(dispersion_constant(&pair, c, &d.witness), ratio(1, 2));
        // a singleton cluster has γ w_j = 1
        let s = single(ratio(4, 5));
        let d = decompose(&s).unwrap();
        assert_eq!(dispersion_constant(&s, &d.clusters[0], &d.witness), from_int(0));
    }

    #[test]
    fn jlw_bound_equals_closed_form_on_the_symmetric_pair() {
        let pair = inst(2, &[(&[0, 1], from_int(2))], &ones(2), &ones(2));
        let model = SimModel::new(&pair, &Routing::Jlw).unwrap();
        let c = Cluster::new(vec![0, 1]).unwrap();
        for x in [[0, 0], [3, -1], [-7, 2]] {
            assert!((jlw_dispersion_bound(&model, &c, &x) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn inapplicable_cases_are_errors() {
        let pair = inst(2, &[(&[0, 1], from_int(3))], &ones(2), &ones(2));
        let d = decompose(&pair).unwrap();
        assert!(matches!(
            check_separation(&pair, &d, batch(100, 1), None),
            Err(VerifyError::Inapplicable(_))
        ));
        let critical = inst(2, &[(&[0, 1], from_int(2))], &ones(2), &ones(2));
        let d = decompose(&critical).unwrap();
        assert!(matches!(
            check_stability(&critical, &d, batch(100, 1), 1),
            Err(VerifyError::Inapplicable(_))
        ));
        let isolated = inst(2, &[(&[0], ratio(1, 2)), (&[1], ratio(1, 2))], &ones(2), &ones(2));
        let d = decompose(&isolated).unwrap();
        let bonded = bonded_components(&isolated, &d).unwrap();
        assert!(matches!(
            check_shape_recurrence(&isolated, &d, &bonded, batch(100, 1), 5.0),
            Err(VerifyError::Inapplicable(_))
        ));
    }

    #[test]
    fn speeds_reject_bad_parameters() {
        let s = single(ratio(5, 4));
        let d = decompose(&s).unwrap();
        for eps in [0.0, 0.5, 0.7] {
            assert!(check_speeds(&s, &d, batch(1000, 2), eps, None).is_err());
        }
        assert!(check_speeds(&s, &d, batch(0, 2), 0.2, None).is_err());
        assert!(check_speeds(&s, &d, batch(1000, 2), 0.2, Some(3)).is_err());
        let two = inst(2, &[(&[0], ratio(9, 10)), (&[1], ratio(8, 10))], &ones(2), &ones(2));
        let d = decompose(&two).unwrap();
        // gap 1/10 needs T^-eps < 1/20
        assert!(check_speeds(&two, &d, batch(1000, 1), 0.2, None).is_err());
    }

    #[test]
    fn single_station_speed_is_lambda_minus_mu() {
        let s = single(ratio(5, 4));
        let d = decompose(&s).unwrap();
        let v = check_speeds(&s, &d, batch(200_000, 4), 0.2, None).unwrap();
        assert!(v.passed, "{v:?}");
    }

    #[test]
    fn isolated_stations_move_at_their_own_speeds() {
        let s = inst(
            2,
            &[(&[0], from_int(2)), (&[1], ratio(1, 2))],
            &ones(2),
            &[from_int(1), from_int(3)],
        );
        let d = decompose(&s).unwrap();
        assert_eq!(d.values, vec![from_int(1), ratio(-3, 2)]);
        let v = check_speeds(&s, &d, batch(200_000, 4), 0.2, None).unwrap();
        assert!(v.passed, "{v:?}");
        assert_eq!(v.details["target_speeds"], json!([1.0, -1.5]));
    }

    #[test]
    fn separation_of_isolated_walks_started_equal() {
        let s = inst(2, &[(&[0], from_int(2)), (&[1], ratio(1, 2))], &ones(2), &ones(2));
        let d = decompose(&s).unwrap();
        let v = check_separation(&s, &d, batch(50_000, 4), Some(vec![10, 10])).unwrap();
        assert!(v.passed, "{v:?}");
    }

    #[test]
    fn verdicts_are_reproducible() {
        let s = single(ratio(4, 5));
        let opts = VerifyOptions {
            seed: 3,
            horizon: Some(20_000),
            replicas: Some(2),
            ..VerifyOptions::default()
        };
        let a = run_experiment(Experiment::Stability, &s, &opts).unwrap();
        let b = run_experiment(Experiment::Stability, &s, &opts).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn clustered_start_is_properly_clustered() {
        let golden = inst(
            3,
            &[(&[0], from_int(2)), (&[0, 1], from_int(1)), (&[1, 2], from_int(1))],
            &ones(3),
            &ones(3),
        );
        let d = decompose(&golden).unwrap();
        assert_eq!(d.k(), 2);
        let w = ScaledWeights::new(golden.weights()).unwrap();
        let x = clustered_start(&golden, &d, 100);
        assert_eq!(x, vec![100, 0, 0]);
        assert!(properly_clustered(&x, &d, &w));
        let reweighted = golden.with_weights(vec![from_int(3), ratio(1, 2), from_int(2)]).unwrap();
        let d = decompose(&reweighted).unwrap();
        let w = ScaledWeights::new(reweighted.weights()).unwrap();
        assert!(properly_clustered(&clustered_start(&reweighted, &d, 100), &d, &w));
    }

    #[test]
    fn experiment_names_round_trip() {
        for e in Experiment::ALL {
            assert_eq!(e.name().parse::<Experiment>().unwrap(), e);
        }
        assert!("nope".parse::<Experiment>().is_err());
    }

    #[test]
    fn replica_csv_has_long_format() {
        let s = single(ratio(4, 5));
        let d = decompose(&s).unwrap();
        let v = check_stability(&s, &d, batch(5_000, 2), 1).unwrap();
        let mut buf = Vec::new();
        write_replica_csv(&[v], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("experiment,replica,statistic,value\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
    }
}
