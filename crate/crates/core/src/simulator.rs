//! Uniformized jump-chain simulation of the queue process and the
//! unreflected random walk.
//!
//! Every step draws one event at the constant total rate
//! `α = Σ λ_i + Σ μ_j`: an arrival at neighbourhood `i` with probability
//! `λ_i / α`, a service completion at station `j` with probability
//! `μ_j / α`. A completion at an empty queue is a self-loop. Real time is
//! `steps / α`.

use std::io::Write;

use num_integer::Integer;
use num_traits::{One, ToPrimitive};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::Decomposition;
use crate::model::{Cluster, Instance, StaticPolicy};
use crate::rational::{to_f64, Rational};

/// Generator used for every simulation; recorded in reports.
pub const RNG_NAME: &str = "ChaCha8";

/// Target number of recorded samples when no cadence is given.
pub const DEFAULT_SAMPLES: u64 = 10_000;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("neighbourhood {0} does not exist")]
    UnknownNeighbourhood(usize),
    #[error("weights cannot be scaled to 64-bit integers")]
    WeightOverflow,
}

/// Independent stream `replica` of the generator seeded with `seed`.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    /// Queue lengths on ℕ^N, reflected at zero.
    Queue,
    /// The same dynamics without reflection, on ℤ^N.
    Walk,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Routing {
    Jlw,
    Static(StaticPolicy),
}

/// Weights as integers over a common denominator, so that JLW ties are
/// detected exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScaledWeights {
    numerators: Vec<i64>,
    denominator: i64,
}

impl ScaledWeights {
    pub fn new(weights: &[Rational]) -> Result<Self, SimError> {
        let lcm = weights
            .iter()
            .fold(num_bigint::BigInt::one(), |acc, w| acc.lcm(w.denom()));
        let numerators = weights
            .iter()
            .map(|w| (w * Rational::from_integer(lcm.clone())).to_integer().to_i64())
            .collect::<Option<Vec<i64>>>()
            .ok_or(SimError::WeightOverflow)?;
        let denominator = lcm.to_i64().ok_or(SimError::WeightOverflow)?;
        Ok(ScaledWeights {
            numerators,
            denominator,
        })
    }

    pub fn len(&self) -> usize {
        self.numerators.len()
    }

    pub fn is_empty(&self) -> bool {
        self.numerators.is_empty()
    }

    /// `w_j x_j` times the common denominator.
    #[inline]
    pub fn scaled(&self, station: usize, x: i64) -> i128 {
        self.numerators[station] as i128 * x as i128
    }

    #[inline]
    pub fn value(&self, station: usize, x: i64) -> f64 {
        self.scaled(station, x) as f64 / self.denominator as f64
    }

    pub fn weight(&self, station: usize) -> f64 {
        self.numerators[station] as f64 / self.denominator as f64
    }

    pub fn max_weight(&self) -> f64 {
        (0..self.len()).map(|j| self.weight(j)).fold(0.0, f64::max)
    }
}

/// Station of `members` minimizing `w_j x_j`; ties are split uniformly using
/// `draw ∈ [0, 1)`.
pub fn jlw_route(state: &[i64], weights: &ScaledWeights, members: &[usize], draw: f64) -> usize {
    let mut best = i128::MAX;
    let mut count = 0usize;
    for &j in members {
        let v = weights.scaled(j, state[j]);
        if v < best {
            best = v;
            count = 1;
        } else if v == best {
            count += 1;
        }
    }
    let pick = ((draw * count as f64) as usize).min(count - 1);
    members
        .iter()
        .copied()
        .filter(|&j| weights.scaled(j, state[j]) == best)
        .nth(pick)
        .expect("pick is within the tie set")
}

#[derive(Debug, Clone)]
enum Router {
    Jlw,
    Static(Vec<(Vec<usize>, WeightedIndex<f64>)>),
}

/// Float rates and samplers derived once from an instance.
#[derive(Debug, Clone)]
pub struct SimModel {
    members: Vec<Vec<usize>>,
    arrival_rates: Vec<f64>,
    service_rates: Vec<f64>,
    alpha: f64,
    events: WeightedIndex<f64>,
    weights: ScaledWeights,
    router: Router,
}

impl SimModel {
    pub fn new(instance: &Instance, routing: &Routing) -> Result<Self, SimError> {
        let members: Vec<Vec<usize>> = instance
            .neighbourhoods()
            .iter()
            .map(|nb| nb.members.clone())
            .collect();
        let arrival_rates: Vec<f64> = instance.neighbourhoods().iter().map(|nb| to_f64(&nb.rate)).collect();
        let service_rates: Vec<f64> = instance.service_rates().iter().map(to_f64).collect();
        let events = WeightedIndex::new(arrival_rates.iter().chain(&service_rates).copied())
            .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
        let router = match routing {
            Routing::Jlw => Router::Jlw,
            Routing::Static(policy) => {
                let mut tables = Vec::with_capacity(members.len());
                for (i, m) in members.iter().enumerate() {
                    let probs: Vec<f64> = m.iter().map(|&j| to_f64(policy.prob(i, j))).collect();
                    let table = WeightedIndex::new(&probs)
                        .map_err(|e| SimError::InvalidConfig(format!("policy row {}: {e}", i + 1)))?;
                    tables.push((m.clone(), table));
                }
                Router::Static(tables)
            }
        };
        Ok(SimModel {
            alpha: to_f64(&instance.event_rate()),
            members,
            arrival_rates,
            service_rates,
            events,
            weights: ScaledWeights::new(instance.weights())?,
            router,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.service_rates.len()
    }

    pub fn n_neighbourhoods(&self) -> usize {
        self.members.len()
    }

    /// Uniformization rate `α(1)`.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn weights(&self) -> &ScaledWeights {
        &self.weights
    }

    pub fn members(&self, neighbourhood: usize) -> &[usize] {
        &self.members[neighbourhood]
    }

    pub fn arrival_rate(&self, neighbourhood: usize) -> f64 {
        self.arrival_rates[neighbourhood]
    }

    pub fn service_rate(&self, station: usize) -> f64 {
        self.service_rates[station]
    }

    pub fn is_jlw(&self) -> bool {
        matches!(self.router, Router::Jlw)
    }

    /// Station an arrival at `neighbourhood` joins in `state`.
    pub fn route<R: Rng + ?Sized>(&self, neighbourhood: usize, state: &[i64], rng: &mut R) -> usize {
        match &self.router {
            Router::Jlw => jlw_route(state, &self.weights, &self.members[neighbourhood], rng.random()),
            Router::Static(tables) => {
                let (stations, table) = &tables[neighbourhood];
                stations[table.sample(rng)]
            }
        }
    }

    /// Rate at which `station` changes under this model's routing at `state`
    /// (service plus expected routed arrivals).
    pub fn station_event_rate(&self, station: usize, state: &[i64]) -> f64 {
        let mut rate = self.service_rates[station];
        for (i, m) in self.members.iter().enumerate() {
            if m.binary_search(&station).is_err() {
                continue;
            }
            rate += self.arrival_rates[i] * self.routing_probability(i, station, state);
        }
        rate
    }

    /// Probability that an arrival at `neighbourhood` joins `station`.
    pub fn routing_probability(&self, neighbourhood: usize, station: usize, state: &[i64]) -> f64 {
        let m = &self.members[neighbourhood];
        match &self.router {
            Router::Jlw => {
                let best = m.iter().map(|&j| self.weights.scaled(j, state[j])).min().expect("non-empty");
                if self.weights.scaled(station, state[station]) != best {
                    return 0.0;
                }
                let ties = m.iter().filter(|&&j| self.weights.scaled(j, state[j]) == best).count();
                1.0 / ties as f64
            }
            Router::Static(tables) => {
                let (stations, table) = &tables[neighbourhood];
                let total: f64 = table.weights().sum();
                stations
                    .iter()
                    .zip(table.weights())
                    .find(|(j, _)| **j == station)
                    .map_or(0.0, |(_, w)| w / total)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Event {
    Arrival { neighbourhood: usize, station: usize },
    Departure { station: usize },
    /// Service event at an empty queue.
    IdleService { station: usize },
}

/// Draws one uniformized event and applies it to `state`.
pub fn step<R: Rng + ?Sized>(model: &SimModel, kind: ProcessKind, state: &mut [i64], rng: &mut R) -> Event {
    let e = model.events.sample(rng);
    let n_arrivals = model.members.len();
    if e < n_arrivals {
        let station = model.route(e, state, rng);
        state[station] += 1;
        Event::Arrival {
            neighbourhood: e,
            station,
        }
    } else {
        let station = e - n_arrivals;
        if kind == ProcessKind::Queue && state[station] == 0 {
            Event::IdleService { station }
        } else {
            state[station] -= 1;
            Event::Departure { station }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub instance: Instance,
    pub kind: ProcessKind,
    pub routing: Routing,
    pub initial_state: Vec<i64>,
    /// Number of jump-chain steps.
    pub horizon: u64,
    pub seed: u64,
    /// Steps between recorded samples; `None` picks `⌈horizon / 10⁴⌉`.
    pub cadence: Option<u64>,
}

impl SimConfig {
    /// Zero initial state, default cadence.
    pub fn new(instance: Instance, kind: ProcessKind, routing: Routing, horizon: u64, seed: u64) -> Self {
        let n = instance.n_stations();
        SimConfig {
            instance,
            kind,
            routing,
            initial_state: vec![0; n],
            horizon,
            seed,
            cadence: None,
        }
    }

    pub fn cadence(&self) -> u64 {
        self.cadence
            .unwrap_or_else(|| self.horizon.div_ceil(DEFAULT_SAMPLES))
            .max(1)
    }

    pub fn check(&self) -> Result<(), SimError> {
        let n = self.instance.n_stations();
        if self.initial_state.len() != n {
            return Err(SimError::InvalidConfig(format!(
                "initial state has {} entries, expected {n}",
                self.initial_state.len()
            )));
        }
        if self.kind == ProcessKind::Queue && self.initial_state.iter().any(|&x| x < 0) {
            return Err(SimError::InvalidConfig(
                "queue initial state must be non-negative".into(),
            ));
        }
        if self.cadence == Some(0) {
            return Err(SimError::InvalidConfig("cadence must be positive".into()));
        }
        if let Routing::Static(p) = &self.routing {
            if p.rows().len() != self.instance.neighbourhoods().len() {
                return Err(SimError::InvalidConfig("policy does not match instance".into()));
            }
        }
        Ok(())
    }
}

/// Per-station and per-neighbourhood event tallies.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub steps: u64,
    pub arrivals: Vec<u64>,
    pub departures: Vec<u64>,
    pub idle_services: Vec<u64>,
    pub neighbourhood_events: Vec<u64>,
}

impl Counters {
    pub fn new(n_stations: usize, n_neighbourhoods: usize) -> Self {
        Counters {
            steps: 0,
            arrivals: vec![0; n_stations],
            departures: vec![0; n_stations],
            idle_services: vec![0; n_stations],
            neighbourhood_events: vec![0; n_neighbourhoods],
        }
    }

    pub fn record(&mut self, event: &Event) {
        self.steps += 1;
        match *event {
            Event::Arrival {
                neighbourhood,
                station,
            } => {
                self.neighbourhood_events[neighbourhood] += 1;
                self.arrivals[station] += 1;
            }
            Event::Departure { station } => self.departures[station] += 1,
            Event::IdleService { station } => self.idle_services[station] += 1,
        }
    }
}

/// A running simulation with its own generator.
#[derive(Debug, Clone)]
pub struct Walker<'m> {
    model: &'m SimModel,
    kind: ProcessKind,
    state: Vec<i64>,
    rng: ChaCha8Rng,
    counters: Counters,
}

impl<'m> Walker<'m> {
    pub fn new(model: &'m SimModel, kind: ProcessKind, initial: Vec<i64>, rng: ChaCha8Rng) -> Self {
        let counters = Counters::new(model.n_stations(), model.n_neighbourhoods());
        Walker {
            model,
            kind,
            state: initial,
            rng,
            counters,
        }
    }

    pub fn step(&mut self) -> Event {
        let event = step(self.model, self.kind, &mut self.state, &mut self.rng);
        self.counters.record(&event);
        event
    }

    pub fn state(&self) -> &[i64] {
        &self.state
    }

    /// Moves to `state`, keeping the generator and the counters.
    pub fn reset(&mut self, state: Vec<i64>) {
        self.state = state;
    }

    pub fn steps(&self) -> u64 {
        self.counters.steps
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn model(&self) -> &SimModel {
        self.model
    }
}

/// Sampled path plus event tallies.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub alpha: f64,
    pub seed: u64,
    pub steps: Vec<u64>,
    /// `steps / α`.
    pub times: Vec<f64>,
    pub states: Vec<Vec<i64>>,
    pub counters: Counters,
}

impl Trajectory {
    pub fn final_state(&self) -> &[i64] {
        self.states.last().expect("initial state is always recorded")
    }

    /// `step,time,station_1..station_N` rows.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.states.first().map_or(0, |s| s.len());
        let mut header = vec!["step".to_string(), "time".to_string()];
        header.extend((1..=n).map(|j| format!("station_{j}")));
        w.write_record(&header)?;
        for ((step, time), state) in self.steps.iter().zip(&self.times).zip(&self.states) {
            let mut row = vec![step.to_string(), time.to_string()];
            row.extend(state.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Sidecar JSON with counters, seed and generator.
    pub fn counters_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rng": RNG_NAME,
            "seed": self.seed,
            "alpha": self.alpha,
            "counters": self.counters,
        })
    }
}

/// Runs `config.horizon` steps, recording the initial state, every
/// `cadence`-th state and the final state.
pub fn run(config: &SimConfig) -> Result<Trajectory, SimError> {
    config.check()?;
    let model = SimModel::new(&config.instance, &config.routing)?;
    let cadence = config.cadence();
    let mut walker = Walker::new(&model, config.kind, config.initial_state.clone(), replica_rng(config.seed, 0));
    let mut traj = Trajectory {
        alpha: model.alpha(),
        seed: config.seed,
        steps: vec![0],
        times: vec![0.0],
        states: vec![config.initial_state.clone()],
        counters: Counters::default(),
    };
    for n in 1..=config.horizon {
        walker.step();
        if n % cadence == 0 || n == config.horizon {
            traj.steps.push(n);
            traj.times.push(n as f64 / model.alpha());
            traj.states.push(walker.state().to_vec());
        }
    }
    traj.counters = walker.counters().clone();
    Ok(traj)
}

/// Per-neighbourhood probabilities for extra or dropped arrivals.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ThinningSpec {
    pub probabilities: Vec<(usize, f64)>,
}

impl ThinningSpec {
    pub fn none() -> Self {
        ThinningSpec::default()
    }

    /// Same probability on every neighbourhood.
    pub fn uniform(n_neighbourhoods: usize, p: f64) -> Self {
        ThinningSpec {
            probabilities: (0..n_neighbourhoods).map(|i| (i, p)).collect(),
        }
    }

    fn dense(&self, n: usize) -> Result<Vec<f64>, SimError> {
        let mut out = vec![0.0; n];
        for &(i, p) in &self.probabilities {
            if i >= n {
                return Err(SimError::UnknownNeighbourhood(i));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(SimError::InvalidConfig(format!(
                    "probability {p} for neighbourhood {} is outside [0, 1]",
                    i + 1
                )));
            }
            out[i] = p;
        }
        Ok(out)
    }
}

/// Three walks on one event stream: `lower` loses a thinned share of the
/// arrivals, `upper` receives an extra thinned stream, `middle` is the
/// plain JLW walk.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTriple {
    pub steps: Vec<u64>,
    pub lower: Vec<Vec<i64>>,
    pub middle: Vec<Vec<i64>>,
    pub upper: Vec<Vec<i64>>,
    /// Extra arrivals received by `upper`, per station.
    pub extra_arrivals: Vec<u64>,
    /// Arrivals withheld from `lower`, per neighbourhood.
    pub dropped_arrivals: Vec<u64>,
    /// Steps at which `lower ≤ middle ≤ upper` failed.
    pub violations: u64,
    pub first_violation: Option<u64>,
}

fn dominated(a: &[i64], b: &[i64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y)
}

/// Runs the monotone coupling. The middle walk follows the lower walk's
/// choice whenever their components at that station agree, and the upper
/// walk follows the middle walk's choice under the same condition;
/// otherwise each walk routes by its own JLW choice.
pub fn coupled_run(
    config: &SimConfig,
    extra: &ThinningSpec,
    dropped: &ThinningSpec,
) -> Result<CouplingTriple, SimError> {
    config.check()?;
    if config.kind != ProcessKind::Walk || config.routing != Routing::Jlw {
        return Err(SimError::InvalidConfig("coupling needs the walk under JLW".into()));
    }
    let model = SimModel::new(&config.instance, &Routing::Jlw)?;
    let n_nb = model.n_neighbourhoods();
    let n = model.n_stations();
    let extra_p = extra.dense(n_nb)?;
    let drop_p = dropped.dense(n_nb)?;
    let extra_rates: Vec<f64> = (0..n_nb).map(|i| extra_p[i] * model.arrival_rate(i)).collect();
    let table = WeightedIndex::new(
        model
            .arrival_rates
            .iter()
            .chain(&model.service_rates)
            .chain(&extra_rates)
            .copied(),
    )
    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    let weights = model.weights();
    let mut rng = replica_rng(config.seed, 0);
    let mut lo = config.initial_state.clone();
    let mut mid = lo.clone();
    let mut hi = lo.clone();
    let cadence = config.cadence();
    let mut out = CouplingTriple {
        steps: vec![0],
        lower: vec![lo.clone()],
        middle: vec![mid.clone()],
        upper: vec![hi.clone()],
        extra_arrivals: vec![0; n],
        dropped_arrivals: vec![0; n_nb],
        violations: 0,
        first_violation: None,
    };
    for step_no in 1..=config.horizon {
        let e = table.sample(&mut rng);
        if e < n_nb {
            let members = model.members(e);
            let lower_choice = if rng.random::<f64>() < drop_p[e] {
                out.dropped_arrivals[e] += 1;
                None
            } else {
                let m = jlw_route(&lo, weights, members, rng.random());
                lo[m] += 1;
                Some((m, lo[m] - 1))
            };
            let j = match lower_choice {
                Some((m, before)) if mid[m] == before => m,
                _ => jlw_route(&mid, weights, members, rng.random()),
            };
            let l = if hi[j] == mid[j] {
                j
            } else {
                jlw_route(&hi, weights, members, rng.random())
            };
            mid[j] += 1;
            hi[l] += 1;
        } else if e < n_nb + n {
            let j = e - n_nb;
            lo[j] -= 1;
            mid[j] -= 1;
            hi[j] -= 1;
        } else {
            let i = e - n_nb - n;
            let l = jlw_route(&hi, weights, model.members(i), rng.random());
            hi[l] += 1;
            out.extra_arrivals[l] += 1;
        }
        if !(dominated(&lo, &mid) && dominated(&mid, &hi)) {
            out.violations += 1;
            out.first_violation.get_or_insert(step_no);
        }
        if step_no % cadence == 0 || step_no == config.horizon {
            out.steps.push(step_no);
            out.lower.push(lo.clone());
            out.middle.push(mid.clone());
            out.upper.push(hi.clone());
        }
    }
    Ok(out)
}

/// `¼ Σ_{l,r∈C} (w_l x_l − w_r x_r)² / (w_l w_r)`.
pub fn shape_statistic(state: &[i64], cluster: &Cluster, weights: &ScaledWeights) -> f64 {
    let m = cluster.members();
    let mut total = 0.0;
    for (a, &l) in m.iter().enumerate() {
        for &r in &m[a + 1..] {
            let d = (weights.scaled(l, state[l]) - weights.scaled(r, state[r])) as f64;
            let den = weights.numerators[l] as f64 * weights.numerators[r] as f64;
            total += d * d / den;
        }
    }
    // ordered pairs count each unordered pair twice
    total / 2.0
}

/// Weighted components strictly ordered across the cluster hierarchy:
/// every station of an earlier cluster above every station of a later one.
pub fn properly_clustered(state: &[i64], decomposition: &Decomposition, weights: &ScaledWeights) -> bool {
    let mut floor_so_far: Option<i128> = None;
    for c in &decomposition.clusters {
        let vals = c.members().iter().map(|&j| weights.scaled(j, state[j]));
        let (lo, hi) = vals.fold((i128::MAX, i128::MIN), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if let Some(f) = floor_so_far {
            if hi >= f {
                return false;
            }
        }
        floor_so_far = Some(floor_so_far.map_or(lo, |f| f.min(lo)));
    }
    true
}
