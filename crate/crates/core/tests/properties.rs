use jlw_core::decomposition::{minimax_value, pin_cluster, reduce};
use jlw_core::model::weighted_drift;
use jlw_core::rational::{format_rational, parse_rational, ratio, sign};
use jlw_core::sample::{random_instance, random_policy, random_weights, InstanceShape};
use jlw_core::simulator::{replica_rng, ThinningSpec};
use jlw_core::{
    brute_force_decompose, coupled_run, decompose, jlw_route, run, shape_statistic,
    static_drift, Cluster, Instance, ProcessKind, Rational, Routing, ScaledWeights, SimConfig,
};
use proptest::prelude::*;

fn instance_from(seed: u64) -> Instance {
    let shape = InstanceShape {
        max_stations: 6,
        ..InstanceShape::default()
    };
    random_instance(&mut replica_rng(seed, 0), &shape)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn drift_conserves_arrival_mass(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let pi = random_policy(&mut replica_rng(seed, 1), &inst);
        let total: Rational = (0..inst.n_stations())
            .map(|j| static_drift(&inst, &pi, j).unwrap() + &inst.service_rates()[j])
            .sum();
        prop_assert_eq!(total, inst.total_arrival_rate());
    }

    #[test]
    fn drift_is_affine_in_the_policy(seed in any::<u64>(), t in 0i64..=8) {
        let inst = instance_from(seed);
        let a = random_policy(&mut replica_rng(seed, 1), &inst);
        let b = random_policy(&mut replica_rng(seed, 2), &inst);
        let t = ratio(t, 8);
        let mixed = a.mix(&b, &t);
        for j in 0..inst.n_stations() {
            let expect = (Rational::from_integer(1.into()) - &t) * static_drift(&inst, &a, j).unwrap()
                + &t * static_drift(&inst, &b, j).unwrap();
            prop_assert_eq!(static_drift(&inst, &mixed, j).unwrap(), expect);
        }
    }

    #[test]
    fn lp_matches_brute_force(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let lp = decompose(&inst).unwrap();
        let bf = brute_force_decompose(&inst).unwrap();
        prop_assert_eq!(&lp.clusters, &bf.clusters);
        prop_assert_eq!(&lp.values, &bf.values);
    }

    #[test]
    fn values_strictly_decrease_and_clusters_partition(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let d = decompose(&inst).unwrap();
        for w in d.values.windows(2) {
            prop_assert!(w[0] > w[1]);
        }
        let mut seen: Vec<usize> = d.clusters.iter().flat_map(|c| c.members().to_vec()).collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..inst.n_stations()).collect::<Vec<_>>());
    }

    #[test]
    fn unconstrained_reduction_reproduces_each_stage(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let d = decompose(&inst).unwrap();
        for (k, domain) in d.stage_domains().iter().enumerate() {
            let reduced = reduce(&inst, domain);
            let v = minimax_value(&reduced, &[]).unwrap();
            prop_assert_eq!(&v, &d.values[k]);
            prop_assert_eq!(&pin_cluster(&reduced, &[], &v).unwrap(), &d.clusters[k]);
        }
    }

    #[test]
    fn witness_equalizes_weighted_drift(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let d = decompose(&inst).unwrap();
        for (c, v) in d.clusters.iter().zip(&d.values) {
            for &j in c.members() {
                prop_assert_eq!(&weighted_drift(&inst, &d.witness, j).unwrap(), v);
            }
        }
    }

    #[test]
    fn scaling_rates_scales_values(seed in any::<u64>(), num in 1i64..6, den in 1i64..6) {
        let inst = instance_from(seed);
        let c = ratio(num, den);
        let d = decompose(&inst).unwrap();
        let scaled = decompose(&inst.scaled_rates(&c).unwrap()).unwrap();
        prop_assert_eq!(&scaled.clusters, &d.clusters);
        let expect: Vec<Rational> = d.values.iter().map(|v| v * &c).collect();
        prop_assert_eq!(scaled.values, expect);
    }

    #[test]
    fn scaling_weights_scales_values(seed in any::<u64>(), num in 1i64..6, den in 1i64..6) {
        let inst = instance_from(seed);
        let c = ratio(num, den);
        let d = decompose(&inst).unwrap();
        let w: Vec<Rational> = inst.weights().iter().map(|w| w * &c).collect();
        let re = decompose(&inst.with_weights(w).unwrap()).unwrap();
        prop_assert_eq!(&re.clusters, &d.clusters);
        let expect: Vec<Rational> = d.values.iter().map(|v| v * &c).collect();
        prop_assert_eq!(re.values, expect);
    }

    #[test]
    fn sign_of_top_value_ignores_weights(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let base = sign(&decompose(&inst).unwrap().values[0]);
        let w = random_weights(&mut replica_rng(seed, 3), inst.n_stations());
        prop_assert_eq!(sign(&decompose(&inst.with_weights(w).unwrap()).unwrap().values[0]), base);
    }

    #[test]
    fn instance_json_round_trips(seed in any::<u64>()) {
        let inst = instance_from(seed);
        prop_assert_eq!(Instance::from_json(&inst.to_json()).unwrap(), inst);
    }

    #[test]
    fn rational_text_round_trips(n in -10_000i64..10_000, d in 1i64..10_000) {
        let r = ratio(n, d);
        prop_assert_eq!(parse_rational(&format_rational(&r)).unwrap(), r);
    }

    #[test]
    fn jlw_route_picks_a_weighted_minimum(
        state in proptest::collection::vec(-20i64..20, 4),
        members in proptest::sample::subsequence(vec![0usize, 1, 2, 3], 1..=4),
        draw in 0.0f64..1.0,
    ) {
        let w = ScaledWeights::new(&[ratio(1, 1), ratio(1, 2), ratio(2, 1), ratio(3, 1)]).unwrap();
        let j = jlw_route(&state, &w, &members, draw);
        prop_assert!(members.contains(&j));
        for &l in &members {
            prop_assert!(w.scaled(j, state[j]) <= w.scaled(l, state[l]));
        }
    }

    #[test]
    fn shape_statistic_is_non_negative_and_shift_invariant(
        state in proptest::collection::vec(-50i64..50, 3),
        shift in -5i64..5,
    ) {
        let w = ScaledWeights::new(&[ratio(1, 1), ratio(1, 2), ratio(1, 3)]).unwrap();
        let c = Cluster::new(vec![0, 1, 2]).unwrap();
        let f = shape_statistic(&state, &c, &w);
        prop_assert!(f >= 0.0);
        // g = (1/w_j) = (1, 2, 3)
        let moved = [state[0] + shift, state[1] + 2 * shift, state[2] + 3 * shift];
        prop_assert!((shape_statistic(&moved, &c, &w) - f).abs() < 1e-9 * (1.0 + f));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn coupling_sandwich_holds(seed in any::<u64>(), p_extra in 0.0f64..1.0, p_drop in 0.0f64..1.0) {
        let inst = instance_from(seed);
        let m = inst.neighbourhoods().len();
        let cfg = SimConfig::new(inst, ProcessKind::Walk, Routing::Jlw, 5_000, seed);
        let t = coupled_run(&cfg, &ThinningSpec::uniform(m, p_extra), &ThinningSpec::uniform(m, p_drop)).unwrap();
        prop_assert_eq!(t.violations, 0);
    }

    #[test]
    fn queue_paths_stay_non_negative(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let mut cfg = SimConfig::new(inst, ProcessKind::Queue, Routing::Jlw, 3_000, seed);
        cfg.cadence = Some(1);
        let t = run(&cfg).unwrap();
        prop_assert!(t.states.iter().flatten().all(|&x| x >= 0));
    }

    #[test]
    fn walk_goes_negative_when_some_value_is_negative(seed in any::<u64>()) {
        let inst = instance_from(seed);
        let d = decompose(&inst).unwrap();
        prop_assume!(sign(d.values.last().unwrap()) < 0);
        let mut cfg = SimConfig::new(inst, ProcessKind::Walk, Routing::Jlw, 20_000, seed);
        cfg.cadence = Some(10);
        let t = run(&cfg).unwrap();
        let negative = t.states.iter().filter(|s| s.iter().any(|&x| x < 0)).count();
        prop_assert!(negative > 0);
    }
}
