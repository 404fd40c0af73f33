//! Hierarchical minimax decomposition of the station set.
//!
//! The authoritative path solves a sequence of exact LPs: at stage `k` the
//! minimax weighted drift over the not-yet-assigned stations is computed
//! subject to the earlier clusters holding their values, and the stations
//! that every optimal policy pins at that value form `C_k`. A subset
//! enumeration over the conservation-of-mass score serves as an
//! independent oracle for small instances.

use std::collections::{BTreeMap, HashSet};

use num_traits::{One, Signed, Zero};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lp::{LinearProgram, LpError, Relation, Sense};
use crate::model::{Cluster, Instance, ModelError, StaticPolicy};
use crate::rational::{format_rational, parse_rational, Rational};

/// Largest instance `brute_force_decompose` will enumerate.
pub const BRUTE_FORCE_MAX_STATIONS: usize = 20;

#[derive(Debug, Error)]
pub enum DecompositionError {
    #[error(transparent)]
    Lp(#[from] LpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("station {0} is not in the retained set")]
    NotRetained(usize),
    #[error("{n} stations exceeds the enumeration limit of {max}")]
    TooLarge { n: usize, max: usize },
    #[error("stage {stage}: union of maximizing subsets does not attain the maximum")]
    UnionClosure { stage: usize },
    #[error("internal decomposition error: {0}")]
    Internal(String),
}

/// One merged arrival stream of a reduced system.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergedStream {
    /// `S = S_i ∩ D`, sorted.
    pub members: Vec<usize>,
    pub rate: Rational,
    /// Indices of the original neighbourhoods merged into this stream.
    pub sources: Vec<usize>,
}

/// The system reduced onto a retained station set `D`.
#[derive(Debug, Clone)]
pub struct ReducedSystem<'a> {
    base: &'a Instance,
    retained: Cluster,
    streams: Vec<MergedStream>,
}

impl<'a> ReducedSystem<'a> {
    pub fn base(&self) -> &'a Instance {
        self.base
    }

    pub fn retained(&self) -> &Cluster {
        &self.retained
    }

    pub fn streams(&self) -> &[MergedStream] {
        &self.streams
    }

    /// `S -> λ_S(D)`.
    pub fn merged_rates(&self) -> BTreeMap<Vec<usize>, Rational> {
        self.streams
            .iter()
            .map(|s| (s.members.clone(), s.rate.clone()))
            .collect()
    }

    fn check_subset(&self, c: &Cluster) -> Result<(), DecompositionError> {
        match c.members().iter().find(|&&j| !self.retained.contains(j)) {
            Some(&j) => Err(DecompositionError::NotRetained(j)),
            None => Ok(()),
        }
    }

    /// Total rate of merged streams supported entirely inside `c`.
    fn supported_rate(&self, c: &Cluster) -> Rational {
        self.streams
            .iter()
            .filter(|s| s.members.iter().all(|&j| c.contains(j)))
            .map(|s| &s.rate)
            .sum()
    }
}

/// Intersects every neighbourhood with `d`, merging coinciding
/// intersections and dropping empty ones.
pub fn reduce<'a>(instance: &'a Instance, d: &Cluster) -> ReducedSystem<'a> {
    let mut merged: BTreeMap<Vec<usize>, (Rational, Vec<usize>)> = BTreeMap::new();
    for (i, nb) in instance.neighbourhoods().iter().enumerate() {
        let s: Vec<usize> = nb.members.iter().copied().filter(|&j| d.contains(j)).collect();
        if s.is_empty() {
            continue;
        }
        let entry = merged.entry(s).or_insert_with(|| (Rational::zero(), Vec::new()));
        entry.0 += &nb.rate;
        entry.1.push(i);
    }
    ReducedSystem {
        base: instance,
        retained: d.clone(),
        streams: merged
            .into_iter()
            .filter(|(_, (rate, _))| rate.is_positive())
            .map(|(members, (rate, sources))| MergedStream {
                members,
                rate,
                sources,
            })
            .collect(),
    }
}

pub fn all_stations(instance: &Instance) -> Cluster {
    Cluster::new((0..instance.n_stations()).collect()).expect("instances have stations")
}

/// Closed form of the minimized average weighted drift on `c`: every
/// supported stream goes to a minimum-weight member.
pub fn restricted_drift(reduced: &ReducedSystem, c: &Cluster) -> Result<Rational, DecompositionError> {
    reduced.check_subset(c)?;
    let w = reduced.base.weights();
    let mu = reduced.base.service_rates();
    let inflow: Rational = reduced
        .streams
        .iter()
        .filter(|s| s.members.iter().all(|&j| c.contains(j)))
        .map(|s| {
            let wmin = s.members.iter().map(|&j| &w[j]).min().expect("non-empty stream");
            &s.rate * wmin
        })
        .sum();
    let service: Rational = c.members().iter().map(|&j| &w[j] * &mu[j]).sum();
    Ok((inflow - service) / Rational::from_integer((c.len() as i64).into()))
}

/// The common weighted drift a mass-conserving policy would give every
/// station of `c`: `(λ(𝒩_D(C)) − μ(C)) / Σ_C 1/w_j`.
pub fn harmonic_drift(reduced: &ReducedSystem, c: &Cluster) -> Result<Rational, DecompositionError> {
    reduced.check_subset(c)?;
    let w = reduced.base.weights();
    let mu = reduced.base.service_rates();
    let service: Rational = c.members().iter().map(|&j| &mu[j]).sum();
    let gamma: Rational = c.members().iter().map(|&j| w[j].recip()).sum();
    Ok((reduced.supported_rate(c) - service) / gamma)
}

/// Routing variables `x[s][j]` of a reduced system, one per
/// (stream, allowed member) pair, with the simplex rows already added.
struct RoutingLp<'r, 'a> {
    reduced: &'r ReducedSystem<'a>,
    lp: LinearProgram,
    /// `(stream, station, variable)`
    edges: Vec<(usize, usize, usize)>,
}

impl<'r, 'a> RoutingLp<'r, 'a> {
    fn new(reduced: &'r ReducedSystem<'a>, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let mut lp = LinearProgram::new();
        let mut edges = Vec::new();
        for (s, stream) in reduced.streams.iter().enumerate() {
            let mut row = Vec::new();
            for &j in &stream.members {
                if allowed(s, j) {
                    let v = lp.add_var();
                    edges.push((s, j, v));
                    row.push((v, Rational::one()));
                }
            }
            lp.add_constraint(row, Relation::Eq, Rational::one());
        }
        RoutingLp { reduced, lp, edges }
    }

    /// Linear part of `w_j * V(j; x)`; the constant is `-w_j μ_j`.
    fn drift_terms(&self, j: usize) -> Vec<(usize, Rational)> {
        let w = &self.reduced.base.weights()[j];
        self.edges
            .iter()
            .filter(|(_, st, _)| *st == j)
            .map(|(s, _, v)| (*v, w * &self.reduced.streams[*s].rate))
            .collect()
    }

    fn drift_constant(&self, j: usize) -> Rational {
        -(&self.reduced.base.weights()[j] * &self.reduced.base.service_rates()[j])
    }

    /// `w_j V(j) (rel) value`
    fn constrain_drift(&mut self, j: usize, relation: Relation, value: &Rational) {
        let terms = self.drift_terms(j);
        let rhs = value - self.drift_constant(j);
        self.lp.add_constraint(terms, relation, rhs);
    }

    fn constrain_all(&mut self, constraints: &[(Cluster, Rational)]) {
        for (c, v) in constraints {
            for &j in c.members() {
                self.constrain_drift(j, Relation::Eq, v);
            }
        }
    }
}

fn unconstrained_stations(reduced: &ReducedSystem, constraints: &[(Cluster, Rational)]) -> Vec<usize> {
    reduced
        .retained
        .members()
        .iter()
        .copied()
        .filter(|&j| !constraints.iter().any(|(c, _)| c.contains(j)))
        .collect()
}

/// Minimum over feasible policies of the maximum weighted drift over the
/// stations not named in `constraints`, with each constrained cluster held
/// at its value.
pub fn minimax_value(
    reduced: &ReducedSystem,
    constraints: &[(Cluster, Rational)],
) -> Result<Rational, DecompositionError> {
    let free = unconstrained_stations(reduced, constraints);
    if free.is_empty() {
        return Err(DecompositionError::Internal(
            "every retained station is already constrained".into(),
        ));
    }
    let mut rl = RoutingLp::new(reduced, |_, _| true);
    rl.constrain_all(constraints);
    let t = rl.lp.add_free_var();
    for &j in &free {
        let mut terms = rl.drift_terms(j);
        terms.push((t, -Rational::one()));
        let rhs = -rl.drift_constant(j);
        rl.lp.add_constraint(terms, Relation::Le, rhs);
    }
    rl.lp.set_objective(Sense::Minimize, vec![(t, Rational::one())]);
    Ok(rl.lp.solve()?.objective)
}

/// Stations held at `level` by every policy whose unconstrained weighted
/// drifts are all at most `level`.
pub fn pin_cluster(
    reduced: &ReducedSystem,
    constraints: &[(Cluster, Rational)],
    level: &Rational,
) -> Result<Cluster, DecompositionError> {
    let free = unconstrained_stations(reduced, constraints);
    let build = || {
        let mut rl = RoutingLp::new(reduced, |_, _| true);
        rl.constrain_all(constraints);
        for &j in &free {
            rl.constrain_drift(j, Relation::Le, level);
        }
        rl
    };

    // Any feasible point rules out the stations it holds strictly below
    // the level; only the rest need their own minimization.
    let mut probe = build();
    let mut all_terms = Vec::new();
    for &j in &free {
        all_terms.extend(probe.drift_terms(j));
    }
    probe.lp.set_objective(Sense::Minimize, all_terms);
    let point = probe.lp.solve()?;
    let drift_at = |rl: &RoutingLp, j: usize, x: &[Rational]| -> Rational {
        rl.drift_terms(j)
            .iter()
            .map(|(v, a)| a * &x[*v])
            .sum::<Rational>()
            + rl.drift_constant(j)
    };

    let mut pinned = Vec::new();
    for &j in &free {
        if drift_at(&probe, j, &point.values) < *level {
            continue;
        }
        let mut rl = build();
        let terms = rl.drift_terms(j);
        rl.lp.set_objective(Sense::Minimize, terms);
        let sol = rl.lp.solve()?;
        if sol.objective.clone() + rl.drift_constant(j) == *level {
            pinned.push(j);
        }
    }
    Cluster::new(pinned).ok_or_else(|| {
        DecompositionError::Internal(format!(
            "no station pinned at level {}",
            format_rational(level)
        ))
    })
}

/// Ordered clusters with strictly decreasing values and a witness policy
/// achieving every value exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    pub clusters: Vec<Cluster>,
    pub values: Vec<Rational>,
    pub witness: StaticPolicy,
}

impl Decomposition {
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    /// Index of the cluster containing `station`.
    pub fn cluster_of(&self, station: usize) -> Option<usize> {
        self.clusters.iter().position(|c| c.contains(station))
    }

    /// `D_k = C_k ∪ C_{k+1} ∪ ... ∪ C_K` for every stage.
    pub fn stage_domains(&self) -> Vec<Cluster> {
        (0..self.k())
            .map(|k| {
                let members = self.clusters[k..]
                    .iter()
                    .flat_map(|c| c.members().iter().copied())
                    .collect();
                Cluster::new(members).expect("clusters are non-empty")
            })
            .collect()
    }

    /// Same clusters and values, ignoring the witness.
    pub fn same_structure(&self, other: &Decomposition) -> bool {
        self.clusters == other.clusters && self.values == other.values
    }

    pub fn to_report(&self, instance: &Instance) -> DecompositionReport {
        DecompositionReport {
            clusters: self.clusters.iter().map(|c| c.one_based()).collect(),
            values: self.values.iter().map(format_rational).collect(),
            neighbourhoods: instance
                .neighbourhoods()
                .iter()
                .map(|nb| nb.members.iter().map(|s| s + 1).collect())
                .collect(),
            witness: self
                .witness
                .rows()
                .iter()
                .map(|row| row.iter().map(format_rational).collect())
                .collect(),
        }
    }
}

/// JSON form of a decomposition: 1-based clusters, exact fraction strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub clusters: Vec<Vec<usize>>,
    pub values: Vec<String>,
    pub neighbourhoods: Vec<Vec<usize>>,
    pub witness: Vec<Vec<String>>,
}

impl DecompositionReport {
    pub fn into_decomposition(self, instance: &Instance) -> Result<Decomposition, ModelError> {
        let bad = |m: &str| ModelError::Malformed(m.to_string());
        let clusters = self
            .clusters
            .into_iter()
            .map(|c| {
                if c.contains(&0) {
                    return Err(bad("clusters are 1-based"));
                }
                Cluster::new(c.into_iter().map(|s| s - 1).collect()).ok_or_else(|| bad("empty cluster"))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let values = self
            .values
            .iter()
            .map(|v| parse_rational(v).map_err(|e| bad(&e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let rows = self
            .witness
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| parse_rational(v).map_err(|e| bad(&e.to_string())))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if clusters.len() != values.len() {
            return Err(bad("clusters and values differ in length"));
        }
        Ok(Decomposition {
            clusters,
            values,
            witness: StaticPolicy::new(instance, rows)?,
        })
    }
}

/// Iterated-LP decomposition.
pub fn decompose(instance: &Instance) -> Result<Decomposition, DecompositionError> {
    let everything = all_stations(instance);
    let reduced = reduce(instance, &everything);
    let mut constraints: Vec<(Cluster, Rational)> = Vec::new();
    let mut assigned = 0;
    while assigned < instance.n_stations() {
        let value = minimax_value(&reduced, &constraints)?;
        if let Some((_, prev)) = constraints.last() {
            if value >= *prev {
                return Err(DecompositionError::Internal(format!(
                    "stage value {} does not decrease below {}",
                    format_rational(&value),
                    format_rational(prev)
                )));
            }
        }
        let cluster = pin_cluster(&reduced, &constraints, &value)?;
        assigned += cluster.len();
        constraints.push((cluster, value));
    }
    let (clusters, values): (Vec<_>, Vec<_>) = constraints.into_iter().unzip();
    let witness = synthesize_witness(instance, &clusters, &values)?;
    Ok(Decomposition {
        clusters,
        values,
        witness,
    })
}

/// Cluster index of the latest cluster a stream touches; all of the
/// stream's mass belongs there.
fn stream_tiers(reduced: &ReducedSystem, clusters: &[Cluster]) -> Result<Vec<usize>, DecompositionError> {
    reduced
        .streams
        .iter()
        .map(|s| {
            s.members
                .iter()
                .map(|&j| {
                    clusters
                        .iter()
                        .position(|c| c.contains(j))
                        .ok_or_else(|| DecompositionError::Internal(format!("station {j} unassigned")))
                })
                .try_fold(0, |acc, k| k.map(|k| acc.max(k)))
        })
        .collect()
}

fn witness_polytope<'r, 'a>(
    reduced: &'r ReducedSystem<'a>,
    clusters: &[Cluster],
    values: &[Rational],
) -> Result<RoutingLp<'r, 'a>, DecompositionError> {
    let tiers = stream_tiers(reduced, clusters)?;
    let mut rl = RoutingLp::new(reduced, |s, j| clusters[tiers[s]].contains(j));
    let constraints: Vec<(Cluster, Rational)> = clusters.iter().cloned().zip(values.iter().cloned()).collect();
    rl.constrain_all(&constraints);
    Ok(rl)
}

fn policy_from_edges(
    instance: &Instance,
    reduced: &ReducedSystem,
    edges: &[(usize, usize, usize)],
    values: &[Rational],
) -> Result<StaticPolicy, DecompositionError> {
    let n = instance.n_stations();
    let mut rows = vec![vec![Rational::zero(); n]; instance.neighbourhoods().len()];
    for &(s, j, v) in edges {
        for &i in &reduced.streams[s].sources {
            rows[i][j] = values[v].clone();
        }
    }
    Ok(StaticPolicy::new(instance, rows)?)
}

/// A static policy holding `w_j V(j) = V_k` on every `C_k`, routing each
/// neighbourhood only into the latest cluster it touches.
pub fn synthesize_witness(
    instance: &Instance,
    clusters: &[Cluster],
    values: &[Rational],
) -> Result<StaticPolicy, DecompositionError> {
    let everything = all_stations(instance);
    let reduced = reduce(instance, &everything);
    let rl = witness_polytope(&reduced, clusters, values)?;
    let sol = rl.lp.solve()?;
    policy_from_edges(instance, &reduced, &rl.edges, &sol.values)
}

/// Maximal bonded sub-clusters of each `C_k`, in cluster order.
///
/// An edge is kept when some policy in the witness polytope routes
/// positive mass along it; the polytope is convex, so one policy carries
/// all kept edges at once.
pub fn bonded_components(
    instance: &Instance,
    decomposition: &Decomposition,
) -> Result<Vec<Vec<Cluster>>, DecompositionError> {
    let everything = all_stations(instance);
    let reduced = reduce(instance, &everything);
    let rl = witness_polytope(&reduced, &decomposition.clusters, &decomposition.values)?;
    let mut positive: Vec<(usize, usize)> = Vec::new();
    for &(s, j, v) in &rl.edges {
        let already = reduced.streams[s]
            .sources
            .iter()
            .any(|&i| decomposition.witness.prob(i, j).is_positive());
        if already {
            positive.push((s, j));
            continue;
        }
        let mut lp = rl.lp.clone();
        lp.set_objective(Sense::Maximize, vec![(v, Rational::one())]);
        if lp.solve()?.objective.is_positive() {
            positive.push((s, j));
        }
    }

    let n = instance.n_stations();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut anchor: BTreeMap<usize, usize> = BTreeMap::new();
    for (s, j) in positive {
        match anchor.get(&s) {
            None => {
                anchor.insert(s, j);
            }
            Some(&a) => {
                let (ra, rj) = (find(&mut parent, a), find(&mut parent, j));
                if ra != rj {
                    parent[ra] = rj;
                }
            }
        }
    }
    Ok(decomposition
        .clusters
        .iter()
        .map(|c| {
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &j in c.members() {
                groups.entry(find(&mut parent, j)).or_default().push(j);
            }
            let mut comps: Vec<Cluster> = groups
                .into_values()
                .map(|m| Cluster::new(m).expect("non-empty group"))
                .collect();
            comps.sort();
            comps
        })
        .collect())
}

/// Subset-enumeration decomposition: at each stage the union of all
/// subsets maximizing `harmonic_drift` becomes the next cluster.
pub fn brute_force_decompose(instance: &Instance) -> Result<Decomposition, DecompositionError> {
    let n = instance.n_stations();
    if n > BRUTE_FORCE_MAX_STATIONS {
        return Err(DecompositionError::TooLarge {
            n,
            max: BRUTE_FORCE_MAX_STATIONS,
        });
    }
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut clusters = Vec::new();
    let mut values = Vec::new();
    let mut stage = 0;
    while !remaining.is_empty() {
        stage += 1;
        let d = Cluster::new(remaining.clone()).expect("non-empty");
        let reduced = reduce(instance, &d);
        let (best, maximizers) = stage_maximizers(&reduced)?;
        let union_mask = maximizers.iter().fold(0u32, |acc, m| acc | m);
        if !union_closed(&maximizers, union_mask) {
            return Err(DecompositionError::UnionClosure { stage });
        }
        let cluster = mask_to_cluster(&d, union_mask);
        if harmonic_drift(&reduced, &cluster)? != best {
            return Err(DecompositionError::UnionClosure { stage });
        }
        remaining.retain(|j| !cluster.contains(*j));
        clusters.push(cluster);
        values.push(best);
    }
    let witness = synthesize_witness(instance, &clusters, &values)?;
    Ok(Decomposition {
        clusters,
        values,
        witness,
    })
}

fn mask_to_cluster(d: &Cluster, mask: u32) -> Cluster {
    let members = d
        .members()
        .iter()
        .enumerate()
        .filter(|(b, _)| mask & (1 << b) != 0)
        .map(|(_, &j)| j)
        .collect();
    Cluster::new(members).expect("non-empty mask")
}

/// Maximum harmonic drift over all non-empty subsets of the retained set,
/// with every maximizing subset as a bitmask over the retained members.
fn stage_maximizers(reduced: &ReducedSystem) -> Result<(Rational, Vec<u32>), DecompositionError> {
    let d = reduced.retained();
    let size = d.len();
    let bit_of = |j: usize| d.members().binary_search(&j).expect("retained");
    let stream_masks: Vec<(u32, &Rational)> = reduced
        .streams
        .iter()
        .map(|s| (s.members.iter().fold(0u32, |m, &j| m | (1 << bit_of(j))), &s.rate))
        .collect();
    let w = reduced.base.weights();
    let mu = reduced.base.service_rates();
    let inv_w: Vec<Rational> = d.members().iter().map(|&j| w[j].recip()).collect();
    let mut best: Option<Rational> = None;
    let mut maximizers = Vec::new();
    for mask in 1u32..(1u32 << size) {
        let mut service = Rational::zero();
        let mut gamma = Rational::zero();
        for (b, &j) in d.members().iter().enumerate() {
            if mask & (1 << b) != 0 {
                service += &mu[j];
                gamma += &inv_w[b];
            }
        }
        let supported: Rational = stream_masks
            .iter()
            .filter(|(m, _)| m & !mask == 0)
            .map(|(_, r)| *r)
            .sum();
        let score = (supported - service) / gamma;
        match &best {
            Some(b) if score < *b => {}
            Some(b) if score == *b => maximizers.push(mask),
            _ => {
                best = Some(score);
                maximizers.clear();
                maximizers.push(mask);
            }
        }
    }
    Ok((best.expect("at least one subset"), maximizers))
}

/// Pairwise union closure of the maximizing family (checked exhaustively
/// for small families, via the total union otherwise).
fn union_closed(maximizers: &[u32], union_mask: u32) -> bool {
    let set: HashSet<u32> = maximizers.iter().copied().collect();
    if maximizers.len() <= 256 {
        for (a, x) in maximizers.iter().enumerate() {
            for y in &maximizers[a + 1..] {
                if !set.contains(&(x | y)) {
                    return false;
                }
            }
        }
        true
    } else {
        set.contains(&union_mask)
    }
}
