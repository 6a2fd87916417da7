use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use msmcr_core::catalog::{build_graph, split_interactions, Catalog};
use msmcr_core::environment::{Action, ConvState, EnvConfig, EpisodeRecord, Feedback, Mode, Outcome};
use msmcr_core::evalkit::{compute_metrics, hn_score, RandomAgent};
use msmcr_core::graph_embed::{train_transe, TransEConfig};
use msmcr_core::policy::{interest_context, Agent};
use msmcr_core::recommender::{FrozenRecommender, ModelConfig, RecModel};
use msmcr_core::simulator::{build_all_sessions, SimUserState, SimulatorConfig};
use msmcr_core::synth::{benchmark_catalog, BenchmarkConfig};

fn small_catalog(seed: u64) -> Catalog {
    benchmark_catalog(&BenchmarkConfig { users: 8, items: 40, genres: 3, features: 9, features_per_genre: 3, min_interactions: 5, max_interactions: 9, seed, ..Default::default() }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_each_history(seed in 0u64..1000, train in 0.3f64..0.9) {
        let c = small_catalog(seed % 7);
        let rest = (1.0 - train) / 2.0;
        let s = split_interactions(&c, [train, rest, 1.0 - train - rest], seed).unwrap();
        for u in 0..c.n_users() {
            let mut joined: Vec<_> = [&s.train, &s.valid, &s.test].iter().flat_map(|p| p.interactions[u].iter().map(|i| (i.ts, i.item))).collect();
            joined.sort_unstable();
            let mut orig: Vec<_> = c.interactions[u].iter().map(|i| (i.ts, i.item)).collect();
            orig.sort_unstable();
            prop_assert_eq!(joined, orig);
        }
    }

    #[test]
    fn episodes_keep_environment_invariants(seed in 0u64..10_000, max_turns in 1usize..12, list_size in 1usize..6, reject_filters in any::<bool>()) {
        let c = small_catalog(seed % 5);
        let kg = train_transe(&build_graph(&c), &TransEConfig { dim: 4, epochs: 3, ..Default::default() });
        let sessions = build_all_sessions(&c, &kg, &SimulatorConfig::default(), 1, seed);
        let env = EnvConfig { max_turns, list_size, reject_filters_items: reject_filters, ..Default::default() };
        let agent = RandomAgent { list_size };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in &sessions {
            let mut state = ConvState::reset(c.n_items(), c.n_attrs());
            let mut sim = SimUserState::new(s);
            while !state.done {
                let action = agent.act(s, &state, &mut rng).unwrap();
                let (v, a, active) = (state.v_cand.clone(), state.a_cand.clone(), sim.activated);
                let step = state.step(&action, &mut sim, &c.item_attrs, &env).unwrap();
                if let Action::Ask { attribute } = action {
                    if !active && !s.activation.contains(&attribute) {
                        prop_assert_eq!(&step.feedback, &Feedback::Unknown);
                    }
                    prop_assert!(!state.a_cand.contains(&attribute));
                }
                prop_assert!(state.v_cand.is_subset(&v) && state.a_cand.is_subset(&a));
                prop_assert!(state.v_cand.contains(&s.target()));
            }
            prop_assert!(state.transcript.len() <= max_turns);
            let turns: Vec<usize> = state.transcript.iter().map(|e| e.turn).collect();
            prop_assert_eq!(turns, (1..=state.transcript.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn scores_stay_in_unit_interval(seed in 0u64..1000, n_prev in 1usize..4, n_acc in 0usize..3) {
        let c = small_catalog(seed % 3);
        let g = build_graph(&c);
        let model = RecModel::new(ModelConfig { dim: 8, seed, ..Default::default() }, &g).unwrap();
        let rec = Arc::new(FrozenRecommender::new(model, &g));
        let prev: Vec<usize> = (0..n_prev).map(|i| (seed as usize + i * 7) % c.n_items()).collect();
        let prev_attrs: Vec<Vec<usize>> = prev.iter().map(|&v| c.item_attrs[v].clone()).collect();
        let mut state = ConvState::reset(c.n_items(), c.n_attrs());
        state.a_acc = (0..n_acc).collect();
        let ctx = interest_context((seed as usize) % c.n_users(), &prev, &prev_attrs, &state);
        let table = rec.score(&ctx, &state.v_cand, &state.a_cand);
        prop_assert_eq!(table.item_scores.len(), c.n_items());
        prop_assert!(table.item_scores.values().chain(table.attr_scores.values()).all(|s| s.is_finite() && (-1.0..=1.0).contains(s)));
    }

    #[test]
    fn metrics_are_order_free_and_well_formed(
        outcomes in prop::collection::vec((prop::option::of((1usize..=10, 1usize..=10)), prop::option::of(1usize..=10)), 1..40),
        rotation in 0usize..40,
    ) {
        let records: Vec<EpisodeRecord> = outcomes.iter().enumerate().map(|(i, (o, act))| EpisodeRecord {
            schema_version: 1,
            session_id: format!("s{i}"),
            mode: Mode::Simulated,
            agent: "p".into(),
            user: "u".into(),
            previous_items: vec![],
            target: None,
            turns: vec![],
            outcome: match o { Some((t, k)) => Outcome::Success { turn: *t, rank: *k }, None => Outcome::Failure { turns: 10 } },
            activation_turn: *act,
            activation_tracked: true,
        }).collect();
        let m = compute_metrics(&records, 10, 10).unwrap();
        let mut shuffled = records.clone();
        shuffled.rotate_left(rotation % records.len());
        shuffled.reverse();
        let p = compute_metrics(&shuffled, 10, 10).unwrap();
        prop_assert_eq!(&m.sr_at, &p.sr_at);
        prop_assert_eq!(&m.ar_at, &p.ar_at);
        prop_assert!((m.at - p.at).abs() < 1e-12 && (m.hn - p.hn).abs() < 1e-12);
        prop_assert!(m.sr_at.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.ar_at.as_ref().unwrap().windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((1.0..=10.0).contains(&m.at));
        let any_success = outcomes.iter().any(|(o, _)| o.is_some());
        prop_assert_eq!(m.hn > 0.0, any_success);
        if !any_success {
            prop_assert_eq!(m.at, 10.0);
        }
    }

    #[test]
    fn hn_decreases_in_turn_and_rank(t in 1usize..30, k in 1usize..30) {
        prop_assert!(hn_score(t, k) > hn_score(t + 1, k));
        prop_assert!(hn_score(t, k) > hn_score(t, k + 1));
        prop_assert!(hn_score(t, k) > 0.0);
    }
}

#[test]
fn catalog_round_trips_through_jsonl() {
    let c = small_catalog(1);
    let back = msmcr_core::catalog::parse_dataset(&c.to_jsonl(), msmcr_core::catalog::DataFormat::Jsonl).unwrap();
    assert_eq!(back, c);
    let g = build_graph(&c);
    for (v, attrs) in c.item_attrs.iter().enumerate() {
        let degree: BTreeSet<usize> = g.edges_av.iter().filter(|e| e.1 == v).map(|e| e.0).collect();
        assert_eq!(degree.len(), attrs.len());
    }
}
