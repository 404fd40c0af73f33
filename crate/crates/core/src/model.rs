//! Problem description: stations, neighbourhoods, rates, weights and static
//! routing policies.
//!
//! Stations and neighbourhoods are 0-based in memory. Everything that crosses
//! a file or report boundary is 1-based.

use std::collections::BTreeMap;
use std::fmt;

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rational::{format_rational, parse_rational, Rational};

/// One arrival stream: the stations it may join and its Poisson rate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Neighbourhood {
    pub members: Vec<usize>,
    pub rate: Rational,
}

/// A validated, canonical supermarket model.
///
/// Canonical means: members sorted and unique, neighbourhoods with zero rate
/// removed, and neighbourhoods with identical member sets merged with their
/// rates summed. Neighbourhood order is lexicographic in the member lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    n_stations: usize,
    neighbourhoods: Vec<Neighbourhood>,
    service_rates: Vec<Rational>,
    weights: Vec<Rational>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoStations,
    ServiceRateCount { expected: usize, found: usize },
    WeightCount { expected: usize, found: usize },
    EmptyNeighbourhood { neighbourhood: usize },
    StationOutOfRange { neighbourhood: usize, station: usize },
    NegativeArrivalRate { neighbourhood: usize },
    NonPositiveServiceRate { station: usize },
    NonPositiveWeight { station: usize },
    NoPositiveArrivalStream,
    GraphNotConnected { unreachable: Vec<usize> },
}

impl fmt::Display for Violation {
    /// Indices are printed 1-based.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoStations => write!(f, "instance has no stations"),
            Violation::ServiceRateCount { expected, found } => {
                write!(f, "expected {expected} service rates, found {found}")
            }
            Violation::WeightCount { expected, found } => {
                write!(f, "expected {expected} weights, found {found}")
            }
            Violation::EmptyNeighbourhood { neighbourhood } => {
                write!(f, "neighbourhood {} is empty", neighbourhood + 1)
            }
            Violation::StationOutOfRange {
                neighbourhood,
                station,
            } => write!(
                f,
                "neighbourhood {} references station {} out of range",
                neighbourhood + 1,
                station
            ),
            Violation::NegativeArrivalRate { neighbourhood } => {
                write!(f, "neighbourhood {} has a negative arrival rate", neighbourhood + 1)
            }
            Violation::NonPositiveServiceRate { station } => {
                write!(f, "station {} has a non-positive service rate", station + 1)
            }
            Violation::NonPositiveWeight { station } => {
                write!(f, "station {} has a non-positive weight", station + 1)
            }
            Violation::NoPositiveArrivalStream => write!(f, "no positive arrival stream"),
            Violation::GraphNotConnected { unreachable } => {
                let names: Vec<String> = unreachable.iter().map(|s| (s + 1).to_string()).collect();
                write!(
                    f,
                    "graph not connected (stations {} unreachable from station 1)",
                    names.join(", ")
                )
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid instance: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("station index {index} out of range for {n_stations} stations")]
    StationOutOfRange { index: usize, n_stations: usize },
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("malformed instance file: {0}")]
    Malformed(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Raw instance data. Station indices are 0-based but not yet checked.
#[derive(Debug, Clone)]
pub struct RawInstance {
    pub n_stations: usize,
    pub neighbourhoods: Vec<(Vec<usize>, Rational)>,
    pub service_rates: Vec<Rational>,
    pub weights: Vec<Rational>,
}

/// Checks the standing assumptions and reports every violation found.
pub fn validate(raw: &RawInstance) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = raw.n_stations;
    if n == 0 {
        out.push(Violation::NoStations);
    }
    if raw.service_rates.len() != n {
        out.push(Violation::ServiceRateCount {
            expected: n,
            found: raw.service_rates.len(),
        });
    }
    if raw.weights.len() != n {
        out.push(Violation::WeightCount {
            expected: n,
            found: raw.weights.len(),
        });
    }
    for (station, mu) in raw.service_rates.iter().enumerate() {
        if !mu.is_positive() {
            out.push(Violation::NonPositiveServiceRate { station });
        }
    }
    for (station, w) in raw.weights.iter().enumerate() {
        if !w.is_positive() {
            out.push(Violation::NonPositiveWeight { station });
        }
    }
    let mut structurally_ok = n > 0;
    for (i, (members, rate)) in raw.neighbourhoods.iter().enumerate() {
        if members.is_empty() {
            out.push(Violation::EmptyNeighbourhood { neighbourhood: i });
            structurally_ok = false;
        }
        for &s in members {
            if s >= n {
                // reported 1-based, matching the file
                out.push(Violation::StationOutOfRange {
                    neighbourhood: i,
                    station: s + 1,
                });
                structurally_ok = false;
            }
        }
        if rate.is_negative() {
            out.push(Violation::NegativeArrivalRate { neighbourhood: i });
        }
    }
    let active: Vec<&Vec<usize>> = raw
        .neighbourhoods
        .iter()
        .filter(|(_, r)| r.is_positive())
        .map(|(m, _)| m)
        .collect();
    if active.is_empty() {
        out.push(Violation::NoPositiveArrivalStream);
    } else if structurally_ok {
        let unreachable = unreachable_stations(n, active.iter().map(|m| m.as_slice()));
        if !unreachable.is_empty() {
            out.push(Violation::GraphNotConnected { unreachable });
        }
    }
    out
}

/// Stations not connected to station 0 in the station/neighbourhood graph.
fn unreachable_stations<'a>(n: usize, sets: impl Iterator<Item = &'a [usize]>) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for set in sets {
        if let Some((&first, rest)) = set.split_first() {
            for &s in rest {
                let (a, b) = (find(&mut parent, first), find(&mut parent, s));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    let root = find(&mut parent, 0);
    (0..n).filter(|&s| find(&mut parent, s) != root).collect()
}

impl Instance {
    /// Validates and canonicalizes.
    pub fn new(raw: RawInstance) -> Result<Self, ModelError> {
        Self::build(raw, false)
    }

    /// Like [`Instance::new`] but accepts a disconnected station graph.
    /// Decomposition and simulation are well defined on such systems; they
    /// simply split into independent parts.
    pub fn new_relaxed(raw: RawInstance) -> Result<Self, ModelError> {
        Self::build(raw, true)
    }

    fn build(raw: RawInstance, allow_disconnected: bool) -> Result<Self, ModelError> {
        let violations: Vec<Violation> = validate(&raw)
            .into_iter()
            .filter(|v| !(allow_disconnected && matches!(v, Violation::GraphNotConnected { .. })))
            .collect();
        if !violations.is_empty() {
            return Err(ModelError::Invalid(violations));
        }
        let mut merged: BTreeMap<Vec<usize>, Rational> = BTreeMap::new();
        for (mut members, rate) in raw.neighbourhoods {
            if !rate.is_positive() {
                continue;
            }
            members.sort_unstable();
            members.dedup();
            *merged.entry(members).or_insert_with(Rational::zero) += rate;
        }
        Ok(Instance {
            n_stations: raw.n_stations,
            neighbourhoods: merged
                .into_iter()
                .map(|(members, rate)| Neighbourhood { members, rate })
                .collect(),
            service_rates: raw.service_rates,
            weights: raw.weights,
        })
    }

    pub fn n_stations(&self) -> usize {
        self.n_stations
    }

    pub fn neighbourhoods(&self) -> &[Neighbourhood] {
        &self.neighbourhoods
    }

    pub fn service_rates(&self) -> &[Rational] {
        &self.service_rates
    }

    pub fn weights(&self) -> &[Rational] {
        &self.weights
    }

    pub fn total_arrival_rate(&self) -> Rational {
        self.neighbourhoods.iter().map(|n| &n.rate).sum()
    }

    pub fn total_service_rate(&self) -> Rational {
        self.service_rates.iter().sum()
    }

    /// Uniformization rate: every arrival stream plus every server.
    pub fn event_rate(&self) -> Rational {
        self.total_arrival_rate() + self.total_service_rate()
    }

    pub fn to_raw(&self) -> RawInstance {
        RawInstance {
            n_stations: self.n_stations,
            neighbourhoods: self
                .neighbourhoods
                .iter()
                .map(|n| (n.members.clone(), n.rate.clone()))
                .collect(),
            service_rates: self.service_rates.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Same system under a different JLW weight vector.
    pub fn with_weights(&self, weights: Vec<Rational>) -> Result<Self, ModelError> {
        let mut raw = self.to_raw();
        raw.weights = weights;
        Instance::new_relaxed(raw)
    }

    /// All arrival and service rates multiplied by `factor`.
    pub fn scaled_rates(&self, factor: &Rational) -> Result<Self, ModelError> {
        let mut raw = self.to_raw();
        for (_, r) in raw.neighbourhoods.iter_mut() {
            *r *= factor;
        }
        for mu in raw.service_rates.iter_mut() {
            *mu *= factor;
        }
        Instance::new_relaxed(raw)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        Instance::new(raw_from_json(text)?)
    }

    pub fn to_file(&self) -> InstanceFile {
        InstanceFile {
            stations: self.n_stations,
            neighbourhoods: self
                .neighbourhoods
                .iter()
                .map(|n| NeighbourhoodFile {
                    members: n.members.iter().map(|s| s + 1).collect(),
                    rate: format_rational(&n.rate),
                })
                .collect(),
            service_rates: self.service_rates.iter().map(format_rational).collect(),
            weights: self.weights.iter().map(format_rational).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("instance serializes")
    }
}

/// Parses the on-disk format without validating it.
pub fn raw_from_json(text: &str) -> Result<RawInstance, ModelError> {
    let file: InstanceFile =
        serde_json::from_str(text).map_err(|e| ModelError::Malformed(e.to_string()))?;
    file.into_raw()
}

/// On-disk instance format (1-based stations, rates as strings).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InstanceFile {
    pub stations: usize,
    pub neighbourhoods: Vec<NeighbourhoodFile>,
    pub service_rates: Vec<String>,
    pub weights: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeighbourhoodFile {
    pub members: Vec<usize>,
    pub rate: String,
}

impl InstanceFile {
    pub fn into_raw(self) -> Result<RawInstance, ModelError> {
        let parse = |field: &str, text: &str| {
            parse_rational(text).map_err(|e| ModelError::Malformed(format!("{field}: {e}")))
        };
        let mut neighbourhoods = Vec::with_capacity(self.neighbourhoods.len());
        for (i, nb) in self.neighbourhoods.iter().enumerate() {
            let rate = parse(&format!("neighbourhoods[{}].rate", i + 1), &nb.rate)?;
            let mut members = Vec::with_capacity(nb.members.len());
            for &m in &nb.members {
                if m == 0 {
                    return Err(ModelError::Malformed(format!(
                        "neighbourhoods[{}].members: stations are numbered from 1",
                        i + 1
                    )));
                }
                members.push(m - 1);
            }
            neighbourhoods.push((members, rate));
        }
        let service_rates = self
            .service_rates
            .iter()
            .enumerate()
            .map(|(j, t)| parse(&format!("service_rates[{}]", j + 1), t))
            .collect::<Result<_, _>>()?;
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(j, t)| parse(&format!("weights[{}]", j + 1), t))
            .collect::<Result<_, _>>()?;
        Ok(RawInstance {
            n_stations: self.stations,
            neighbourhoods,
            service_rates,
            weights,
        })
    }
}

/// A non-empty, sorted set of stations.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Cluster(Vec<usize>);

impl Cluster {
    pub fn new(mut members: Vec<usize>) -> Option<Self> {
        members.sort_unstable();
        members.dedup();
        (!members.is_empty()).then_some(Cluster(members))
    }

    pub fn members(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, station: usize) -> bool {
        self.0.binary_search(&station).is_ok()
    }

    /// 1-based member list.
    pub fn one_based(&self) -> Vec<usize> {
        self.0.iter().map(|s| s + 1).collect()
    }
}

impl fmt::Display for Cluster {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.one_based().iter().map(|s| s.to_string()).collect();
        write!(f, "{{{}}}", names.join(","))
    }
}

/// State-independent routing: row `i` is the distribution of neighbourhood
/// `i`'s arrivals over all stations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StaticPolicy {
    rows: Vec<Vec<Rational>>,
}

impl StaticPolicy {
    pub fn new(instance: &Instance, rows: Vec<Vec<Rational>>) -> Result<Self, ModelError> {
        let nbs = instance.neighbourhoods();
        if rows.len() != nbs.len() {
            return Err(ModelError::InvalidPolicy(format!(
                "expected {} rows, found {}",
                nbs.len(),
                rows.len()
            )));
        }
        for (i, (row, nb)) in rows.iter().zip(nbs).enumerate() {
            if row.len() != instance.n_stations() {
                return Err(ModelError::InvalidPolicy(format!(
                    "row {} has {} entries, expected {}",
                    i + 1,
                    row.len(),
                    instance.n_stations()
                )));
            }
            let mut total = Rational::zero();
            for (j, p) in row.iter().enumerate() {
                if p.is_negative() {
                    return Err(ModelError::InvalidPolicy(format!(
                        "row {} has a negative entry at station {}",
                        i + 1,
                        j + 1
                    )));
                }
                if !p.is_zero() && nb.members.binary_search(&j).is_err() {
                    return Err(ModelError::InvalidPolicy(format!(
                        "row {} routes to station {} outside its neighbourhood",
                        i + 1,
                        j + 1
                    )));
                }
                total += p;
            }
            if !total.is_one() {
                return Err(ModelError::InvalidPolicy(format!(
                    "row {} sums to {}, not 1",
                    i + 1,
                    format_rational(&total)
                )));
            }
        }
        Ok(StaticPolicy { rows })
    }

    pub fn rows(&self) -> &[Vec<Rational>] {
        &self.rows
    }

    pub fn prob(&self, neighbourhood: usize, station: usize) -> &Rational {
        &self.rows[neighbourhood][station]
    }

    /// Uniform split of every neighbourhood over its members.
    pub fn uniform(instance: &Instance) -> Self {
        let n = instance.n_stations();
        let rows = instance
            .neighbourhoods()
            .iter()
            .map(|nb| {
                let share = Rational::new(1.into(), (nb.members.len() as i64).into());
                let mut row = vec![Rational::zero(); n];
                for &j in &nb.members {
                    row[j] = share.clone();
                }
                row
            })
            .collect();
        StaticPolicy { rows }
    }

    /// Pointwise `(1 - t) * self + t * other`.
    pub fn mix(&self, other: &StaticPolicy, t: &Rational) -> StaticPolicy {
        let s = Rational::one() - t;
        let rows = self
            .rows
            .iter()
            .zip(&other.rows)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| &s * x + t * y).collect())
            .collect();
        StaticPolicy { rows }
    }
}

/// Arrival inflow at `station` under `policy`, minus its service rate.
pub fn static_drift(
    instance: &Instance,
    policy: &StaticPolicy,
    station: usize,
) -> Result<Rational, ModelError> {
    if station >= instance.n_stations() {
        return Err(ModelError::StationOutOfRange {
            index: station,
            n_stations: instance.n_stations(),
        });
    }
    let inflow: Rational = instance
        .neighbourhoods()
        .iter()
        .zip(policy.rows())
        .map(|(nb, row)| &nb.rate * &row[station])
        .sum();
    Ok(inflow - &instance.service_rates()[station])
}

/// `w_j * static_drift(j)`.
pub fn weighted_drift(
    instance: &Instance,
    policy: &StaticPolicy,
    station: usize,
) -> Result<Rational, ModelError> {
    Ok(&instance.weights()[station] * static_drift(instance, policy, station)?)
}

/// Edges `(neighbourhood, station)` that carry positive routing mass.
pub fn policy_graph(instance: &Instance, policy: &StaticPolicy) -> Vec<(usize, usize)> {
    let mut edges = Vec::new();
    for (i, nb) in instance.neighbourhoods().iter().enumerate() {
        for &j in &nb.members {
            if policy.prob(i, j).is_positive() {
                edges.push((i, j));
            }
        }
    }
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{from_int, ratio};

    fn raw(n: usize, nbs: &[(&[usize], i64)], mu: &[i64], w: &[i64]) -> RawInstance {
        RawInstance {
            n_stations: n,
            neighbourhoods: nbs.iter().map(|(m, r)| (m.to_vec(), from_int(*r))).collect(),
            service_rates: mu.iter().map(|&x| from_int(x)).collect(),
            weights: w.iter().map(|&x| from_int(x)).collect(),
        }
    }

    #[test]
    fn minimal_instance_is_valid() {
        assert!(validate(&raw(1, &[(&[0], 1)], &[1], &[1])).is_empty());
    }

    #[test]
    fn isolated_station_is_reported() {
        let v = validate(&raw(2, &[(&[0], 1)], &[1, 1], &[1, 1]));
        assert_eq!(v, vec![Violation::GraphNotConnected { unreachable: vec![1] }]);
        assert!(v[0].to_string().contains("graph not connected"));
    }

    #[test]
    fn zero_rate_only_is_reported() {
        let v = validate(&raw(2, &[(&[0, 1], 0)], &[1, 1], &[1, 1]));
        assert_eq!(v, vec![Violation::NoPositiveArrivalStream]);
        assert_eq!(v[0].to_string(), "no positive arrival stream");
    }

    #[test]
    fn structural_violations_name_their_index() {
        let mut r = raw(2, &[(&[0, 5], 1), (&[], 1)], &[1, 0], &[1]);
        r.neighbourhoods[0].1 = from_int(-1);
        let v = validate(&r);
        assert!(v.contains(&Violation::WeightCount { expected: 2, found: 1 }));
        assert!(v.contains(&Violation::StationOutOfRange { neighbourhood: 0, station: 6 }));
        assert!(v.contains(&Violation::EmptyNeighbourhood { neighbourhood: 1 }));
        assert!(v.contains(&Violation::NonPositiveServiceRate { station: 1 }));
        assert!(v.contains(&Violation::NegativeArrivalRate { neighbourhood: 0 }));
    }

    #[test]
    fn relaxed_constructor_accepts_isolated_stations() {
        let r = raw(2, &[(&[0], 1), (&[1], 1)], &[1, 1], &[1, 1]);
        assert!(Instance::new(r.clone()).is_err());
        assert_eq!(Instance::new_relaxed(r).unwrap().neighbourhoods().len(), 2);
        let r = raw(2, &[(&[0], 0)], &[1, 1], &[1, 1]);
        assert!(Instance::new_relaxed(r).is_err());
    }

    #[test]
    fn duplicates_merge_and_zero_rates_drop() {
        let inst = Instance::new(raw(
            2,
            &[(&[1, 0], 1), (&[0, 1], 2), (&[0], 0), (&[1], 1)],
            &[1, 1],
            &[1, 1],
        ))
        .unwrap();
        assert_eq!(
            inst.neighbourhoods(),
            &[
                Neighbourhood { members: vec![0, 1], rate: from_int(3) },
                Neighbourhood { members: vec![1], rate: from_int(1) },
            ]
        );
    }

    fn two_station() -> Instance {
        Instance::new(raw(2, &[(&[0, 1], 3)], &[1, 1], &[1, 2])).unwrap()
    }

    #[test]
    fn drift_hand_values() {
        let inst = two_station();
        let pi = StaticPolicy::new(&inst, vec![vec![ratio(5, 9), ratio(4, 9)]]).unwrap();
        assert_eq!(static_drift(&inst, &pi, 0).unwrap(), ratio(2, 3));
        assert_eq!(static_drift(&inst, &pi, 1).unwrap(), ratio(1, 3));
        assert!(matches!(
            static_drift(&inst, &pi, 2),
            Err(ModelError::StationOutOfRange { .. })
        ));
        let single = Instance::new(raw(1, &[(&[0], 1)], &[1], &[1])).unwrap();
        let id = StaticPolicy::uniform(&single);
        assert_eq!(static_drift(&single, &id, 0).unwrap(), from_int(0));
    }

    #[test]
    fn policy_graph_edges() {
        let inst = two_station();
        let a = StaticPolicy::new(&inst, vec![vec![from_int(1), from_int(0)]]).unwrap();
        assert_eq!(policy_graph(&inst, &a), vec![(0, 0)]);
        let b = StaticPolicy::uniform(&inst);
        assert_eq!(policy_graph(&inst, &b), vec![(0, 0), (0, 1)]);
    }

    #[test]
    fn policy_rows_must_be_on_the_simplex() {
        let inst = two_station();
        assert!(StaticPolicy::new(&inst, vec![vec![from_int(0), from_int(0)]]).is_err());
        assert!(StaticPolicy::new(&inst, vec![vec![ratio(3, 2), ratio(-1, 2)]]).is_err());
        let three = Instance::new(raw(3, &[(&[0, 1], 1), (&[1, 2], 1)], &[1, 1, 1], &[1, 1, 1]))
            .unwrap();
        let bad = vec![
            vec![ratio(1, 2), ratio(1, 4), ratio(1, 4)],
            vec![from_int(0), from_int(1), from_int(0)],
        ];
        assert!(StaticPolicy::new(&three, bad).is_err());
    }

    #[test]
    fn json_round_trip_is_one_based() {
        let text = r#"{"stations": 2,
            "neighbourhoods": [{"members": [1, 2], "rate": "3"}],
            "service_rates": ["1", "1.0"], "weights": ["1", "2/1"]}"#;
        let inst = Instance::from_json(text).unwrap();
        assert_eq!(inst, two_station());
        let back = Instance::from_json(&inst.to_json()).unwrap();
        assert_eq!(back, inst);
        assert!(inst.to_json().contains("\"members\": [\n        1,\n        2\n      ]"));
    }

    #[test]
    fn malformed_json_names_the_field() {
        let text = r#"{"stations": 1, "neighbourhoods": [{"members": [1], "rate": "x"}],
            "service_rates": ["1"], "weights": ["1"]}"#;
        let err = Instance::from_json(text).unwrap_err().to_string();
        assert!(err.contains("neighbourhoods[1].rate"), "{err}");
    }
}
