//! Random instances and policies for property tests and batch checks.

use num_traits::Zero;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::model::{Instance, RawInstance, StaticPolicy};
use crate::rational::{from_int, ratio, Rational};

/// Shape of the random instances drawn by [`random_instance`].
#[derive(Debug, Clone)]
pub struct InstanceShape {
    pub max_stations: usize,
    /// Rates are `k/10` with `k` drawn from `1..=max_rate_tenths`.
    pub max_rate_tenths: i64,
    pub weights: Vec<Rational>,
}

impl Default for InstanceShape {
    fn default() -> Self {
        InstanceShape {
            max_stations: 8,
            max_rate_tenths: 30,
            weights: vec![from_int(1), ratio(1, 2), from_int(2), from_int(3)],
        }
    }
}

fn tenths<R: Rng + ?Sized>(rng: &mut R, max: i64) -> Rational {
    ratio(rng.random_range(1..=max), 10)
}

/// A connected instance; draws are repeated until the neighbourhood graph
/// connects.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, shape: &InstanceShape) -> Instance {
    loop {
        let n = rng.random_range(1..=shape.max_stations);
        let m = rng.random_range(1..=n + 2);
        let neighbourhoods = (0..m)
            .map(|_| {
                let size = rng.random_range(1..=n.min(3));
                let mut members: Vec<usize> = rand::seq::index::sample(rng, n, size).into_vec();
                members.sort_unstable();
                (members, tenths(rng, shape.max_rate_tenths))
            })
            .collect();
        let raw = RawInstance {
            n_stations: n,
            neighbourhoods,
            service_rates: (0..n).map(|_| tenths(rng, shape.max_rate_tenths)).collect(),
            weights: (0..n)
                .map(|_| shape.weights.choose(rng).expect("non-empty weight set").clone())
                .collect(),
        };
        if let Ok(instance) = Instance::new(raw) {
            return instance;
        }
    }
}

/// Positive weights `p/q` with `p ∈ 1..=9`, `q ∈ 1..=4`.
pub fn random_weights<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<Rational> {
    (0..n)
        .map(|_| ratio(rng.random_range(1..=9), rng.random_range(1..=4)))
        .collect()
}

/// A static policy with small-integer proportions, including zero entries.
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, instance: &Instance) -> StaticPolicy {
    let n = instance.n_stations();
    let rows = instance
        .neighbourhoods()
        .iter()
        .map(|nb| {
            let mut parts: Vec<i64> = nb.members.iter().map(|_| rng.random_range(0..=5)).collect();
            if parts.iter().all(|&p| p == 0) {
                let k = rng.random_range(0..parts.len());
                parts[k] = 1;
            }
            let total: i64 = parts.iter().sum();
            let mut row = vec![Rational::zero(); n];
            for (&j, &p) in nb.members.iter().zip(&parts) {
                row[j] = ratio(p, total);
            }
            row
        })
        .collect();
    StaticPolicy::new(instance, rows).expect("rows are distributions over members")
}
