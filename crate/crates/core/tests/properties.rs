use pcroute::checkpoint::{Checkpoint, Phase, TrainingMetadata};
use pcroute::driver::PreferenceVector;
use pcroute::gnn::{self, GnnConfig, Readout};
use pcroute::network::{self, EdgeId};
use pcroute::paths;
use pcroute::rewards::{self, AttributeWeights, RewardWeights};
use pcroute::scenarios::{self, Scenario};
use pcroute::sim::SimConfig;
use proptest::prelude::*;

fn preference() -> impl Strategy<Value = PreferenceVector> {
    (0..3usize, 0..3usize, 0..2usize, 0..2usize).prop_map(|(r, l, c, t)| {
        let road = ["straight", "curved", "ramp"][r];
        let lanes = ["one", "two", "three"][l];
        let complexity = ["simple", "complex"][c];
        let traffic = ["low", "high"][t];
        PreferenceVector::parse(&format!("{road},{lanes},{complexity},{traffic}")).unwrap()
    })
}

proptest! {
    #[test]
    fn time_reward_is_bounded_and_symmetric(ideal in 1.0..500.0f64, ratio in 0.0..1.5f64) {
        let late = rewards::time_reward(ideal, ideal * (1.0 + ratio)).unwrap();
        prop_assert!((0.0..=1.0).contains(&late));
        if ratio < 1.0 {
            let early = rewards::time_reward(ideal, ideal * (1.0 - ratio)).unwrap();
            prop_assert!((early - late).abs() < 1e-12);
        }
        prop_assert!(late <= rewards::time_reward(ideal, ideal * (1.0 + ratio / 2.0)).unwrap() + 1e-15);
    }

    #[test]
    fn edge_similarity_stays_in_unit_interval(p in preference(), q in preference(), w in proptest::array::uniform4(0.01..5.0f64)) {
        let weights = AttributeWeights { road_type: w[0], lanes: w[1], complexity: w[2], traffic: w[3] };
        let s = rewards::edge_similarity(&p, &q.attributes(), &weights);
        prop_assert!((0.0..=1.0).contains(&s.combined));
        prop_assert!(s.combined <= s.cosine + 1e-12);
        if p == q {
            prop_assert!((s.combined - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_outside_the_simplex_are_rejected(a in -1.0..2.0f64, b in -1.0..2.0f64, c in -1.0..2.0f64) {
        let ok = RewardWeights::new(a, b, c).is_ok();
        let valid = a >= 0.0 && b >= 0.0 && c >= 0.0 && (a + b + c - 1.0).abs() < 1e-9;
        prop_assert_eq!(ok, valid);
    }

    #[test]
    fn candidates_are_simple_connected_and_sorted(s in 0..16usize, t in 0..16usize, k in 1..7usize, occ in proptest::collection::vec(0.0..0.9f64, 48)) {
        prop_assume!(s != t);
        let net = scenarios::grid4x4();
        let mut state = net.free_flow_state();
        for (d, o) in state.dynamics.iter_mut().zip(&occ) {
            d.travel_time *= 1.0 + 4.0 * o;
        }
        let set = paths::k_candidate_paths(&net, &state, s, t, k).unwrap();
        prop_assert!(!set.is_empty() && set.len() <= k);
        prop_assert!(set.costs.windows(2).all(|w| w[0] <= w[1]));
        for (i, r) in set.routes.iter().enumerate() {
            prop_assert_eq!(net.endpoints(r[0]).0, s);
            prop_assert_eq!(net.endpoints(*r.last().unwrap()).1, t);
            prop_assert!(r.windows(2).all(|w| net.endpoints(w[0]).1 == net.endpoints(w[1]).0));
            prop_assert!(pcroute::service::is_simple(&net, r));
            prop_assert!(set.routes[..i].iter().all(|o| o != r));
        }
    }

    #[test]
    fn encoded_state_is_normalized(occ in proptest::collection::vec(0.0..1.0f64, 80), usage in proptest::collection::vec(0.0..30.0f64, 80)) {
        let net = scenarios::twolane_vs_onelane();
        let mut state = net.free_flow_state();
        for (i, d) in state.dynamics.iter_mut().enumerate() {
            d.occupancy = occ[i];
            d.usage = usage[i];
            d.future_usage = usage[(i + 7) % 80];
            d.mean_speed *= 1.0 - occ[i] * 0.9;
        }
        let m = network::encode_state(&net, &state).unwrap();
        prop_assert_eq!(m.rows, net.num_edges());
        prop_assert!(m.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn simulation_conserves_vehicles(seed in 0..1000u64, n in 1..60usize) {
        let scenario = Scenario::builtin("grid4x4-trap").unwrap();
        let net = scenario.network.clone();
        let mut sim = scenario.simulation(SimConfig::default()).unwrap();
        let state = net.free_flow_state();
        let mut x = seed;
        for i in 0..n {
            x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let s = (x >> 33) as usize % 16;
            let t = (s + 1 + (x >> 40) as usize % 15) % 16;
            let route = paths::k_candidate_paths(&net, &state, s, t, 1).unwrap().routes.remove(0);
            sim.inject_vehicle(route, (i / 4) as f64).unwrap();
        }
        for _ in 0..400 {
            let st = sim.step();
            prop_assert!(st.dynamics.iter().all(|d| (0.0..=1.0).contains(&d.occupancy)));
            prop_assert_eq!(sim.arrived_count() + sim.on_network_count() + sim.pending_count(), n);
        }
        prop_assert!(sim.is_idle());
        prop_assert!(sim.vehicles().iter().all(|v| v.travel_time().is_some_and(|t| t > 0.0)));
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(seed in any::<u64>(), hidden in 1..8usize, layers in 1..4usize, sum in any::<bool>(), p in proptest::option::of(preference())) {
        let cfg = GnnConfig { hidden, layers, seed, readout: if sum { Readout::Sum } else { Readout::Mean }, ..Default::default() };
        let params = gnn::init(&cfg).unwrap();
        let meta = TrainingMetadata {
            phase: if p.is_some() { Phase::Preference } else { Phase::Generic },
            scenario: "grid4x4".into(),
            episodes: 1,
            best_episode: 0,
            best_eval_reward: 0.1 + 0.2,
            weights: RewardWeights::generic(),
            k: 4,
        };
        let c = Checkpoint::new("m", &params, seed, meta, p);
        let back = Checkpoint::from_json(&c.to_json()).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.params().unwrap().tree, params.tree);
    }

    #[test]
    fn selection_column_marks_exactly_the_route(s in 0..16usize, t in 0..16usize) {
        prop_assume!(s != t);
        let net = scenarios::grid4x4();
        let state = net.free_flow_state();
        let base = network::encode_state(&net, &state).unwrap();
        let route = paths::k_candidate_paths(&net, &state, s, t, 1).unwrap().routes.remove(0);
        let x = pcroute::dqn::with_selection(&base, &route);
        for e in 0..net.num_edges() {
            let marked = x.get(e, network::col::SELECTED) == 1.0;
            prop_assert_eq!(marked, route.contains(&EdgeId(e)));
        }
        let q = gnn::q_value(&gnn::init(&GnnConfig { hidden: 4, layers: 1, ..Default::default() }).unwrap(), &x, &net.topology()).unwrap();
        prop_assert!(q.is_finite());
    }
}
