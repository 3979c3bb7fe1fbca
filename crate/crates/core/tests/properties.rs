use std::collections::BTreeMap;

use geochord::cluster::{em_fit_weighted, gmm_from_kmeans, kmeans, ClusterPath};
use geochord::experiment::{MetricsReport, ReportRow};
use geochord::geokey::{deinterleave, encode_grid, morton, point_to_key, ring_distance};
use geochord::rng::seeded;
use geochord::route::{lookup, optimal_latencies, path_expected_latency};
use geochord::swarm::{pso_step_with, Bounds, Particle, PsoParams};
use geochord::{GeoPoint, RingKey, SimConfig, Simulator};
use proptest::prelude::*;

fn small_net(n: usize, k: usize, seed: u64) -> Simulator {
    Simulator::new(SimConfig {
        nodes: n,
        k,
        seed,
        ..SimConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn morton_round_trips(x in 0u64..1 << 16, y in 0u64..1 << 16, level in 16u32..=32) {
        prop_assert_eq!(deinterleave(morton(x, y, level), level), (x, y));
    }

    #[test]
    fn same_cell_shares_key_prefix(x in 0.0f64..1000.0, y in 0.0f64..1000.0, dx in 0.0f64..1.0, dy in 0.0f64..1.0, level in 1u32..=12) {
        let cell = 1000.0 / (1u64 << level) as f64;
        let a = GeoPoint::new(x, y);
        let g = encode_grid(a, level, 1000.0).unwrap();
        let b = GeoPoint::new(
            (g.cell_x as f64 + dx) * cell,
            (g.cell_y as f64 + dy) * cell,
        );
        prop_assume!(b.in_region(1000.0) && encode_grid(b, level, 1000.0).unwrap() == g);
        let (ka, kb) = (point_to_key(a, 1000.0, 32).unwrap(), point_to_key(b, 1000.0, 32).unwrap());
        prop_assert_eq!(ka.prefix(2 * level), kb.prefix(2 * level));
    }

    #[test]
    fn ring_distance_is_symmetric_and_triangular(a in any::<u32>(), b in any::<u32>(), c in any::<u32>()) {
        let key = |v: u32| RingKey::new(v as u64, 32).unwrap();
        let (a, b, c) = (key(a), key(b), key(c));
        let d = |x: &RingKey, y: &RingKey| ring_distance(x, y).unwrap();
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= 1 << 31);
    }

    #[test]
    fn arc_membership_matches_clockwise_distance(a in any::<u16>(), b in any::<u16>(), x in any::<u16>()) {
        let key = |v: u16| RingKey::new(v as u64, 16).unwrap();
        let (a, b, x) = (key(a), key(b), key(x));
        let expected = a == b || (a.clockwise_to(&x) != 0 && a.clockwise_to(&x) <= a.clockwise_to(&b));
        prop_assert_eq!(x.in_arc(&a, &b), expected);
    }

    #[test]
    fn cluster_path_prefixes(digits in proptest::collection::vec(0u8..4, 0..8), cut in 0usize..8) {
        let p = digits.iter().fold(ClusterPath::root(), |p, &d| p.child(d));
        let cut = cut.min(p.depth());
        let t = p.truncated(cut);
        prop_assert!(p.starts_with(&t));
        prop_assert_eq!(t.depth(), cut);
        prop_assert_eq!(p.shared_prefix_len(&t), cut);
        prop_assert_eq!(t.shared_prefix_len(&p), cut);
    }

    #[test]
    fn pso_position_stays_in_bounds(
        pos in proptest::collection::vec(-1.0f64..1.0, 4),
        vel in proptest::collection::vec(-10.0f64..10.0, 4),
        g in proptest::collection::vec(-1.0f64..1.0, 4),
        r in proptest::collection::vec(0.0f64..1.0, 8),
    ) {
        let bounds = Bounds::uniform(4, -1.0, 1.0);
        let mut p = Particle::new(pos, vel);
        pso_step_with(&mut p, &g, &PsoParams::default(), Some(&bounds), &r[..4], &r[4..]).unwrap();
        prop_assert!(p.position.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn pso_rest_point_is_fixed(pos in proptest::collection::vec(-5.0f64..5.0, 3), r in proptest::collection::vec(0.0f64..1.0, 6)) {
        let mut p = Particle::new(pos.clone(), vec![0.0; 3]);
        pso_step_with(&mut p, &pos, &PsoParams::default(), None, &r[..3], &r[3..]).unwrap();
        prop_assert_eq!(p.position, pos);
    }

    #[test]
    fn report_csv_json_agree(
        rows in proptest::collection::vec(("[a-z]{1,6}", "[a-z0-9.]{0,6}", "[a-z_]{1,8}", -1e9f64..1e9, proptest::option::of(0.0f64..1e3)), 0..12)
    ) {
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .map(|(k, v, stat, value, stderr)| ReportRow {
                experiment: "storage".into(),
                point: BTreeMap::from([(k, v)]),
                statistic: stat,
                value,
                stderr,
            })
            .collect();
        let r = MetricsReport {
            version: 1,
            experiment: "storage".into(),
            seeds: vec![1],
            rows,
            artifacts: BTreeMap::new(),
        };
        let csv = MetricsReport::from_csv(&r.to_csv(), vec![1]).unwrap();
        let json = MetricsReport::from_json(&r.to_json()).unwrap();
        prop_assert_eq!(&csv.rows, &r.rows);
        prop_assert_eq!(&json.rows, &r.rows);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn tables_respect_storage_bound(n in 2usize..160, k in 2usize..5, seed in 0u64..1000) {
        let sim = small_net(n, k, seed);
        let shape = sim.overlay.shape;
        for node in &sim.overlay.nodes {
            prop_assert!(node.table.finger_count() <= shape.finger_bound());
            prop_assert!(node.table.total_entries() <= shape.entry_bound());
        }
    }

    #[test]
    fn lookups_reach_owner_without_loops(n in 2usize..120, seed in 0u64..1000, picks in proptest::collection::vec((any::<u16>(), any::<u32>()), 20)) {
        let sim = small_net(n, 2, seed);
        let ov = &sim.overlay;
        for (s, raw) in picks {
            let s = s as usize % n;
            let key = RingKey::new(raw as u64, 32).unwrap();
            let hops = lookup(ov, s, &key).unwrap();
            prop_assert_eq!(hops.last().copied(), ov.owner_of(&key));
            let mut seen = hops.clone();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), hops.len());
            let d = *hops.last().unwrap();
            prop_assert!(path_expected_latency(ov, &hops) + 1e-9 >= optimal_latencies(ov, s)[d]);
        }
    }

    #[test]
    fn broadcast_reaches_everyone_once(n in 1usize..200, seed in 0u64..1000, src in any::<u16>()) {
        let mut sim = small_net(n, 2, seed);
        let r = sim.broadcast(src as usize % n, b"x").unwrap();
        prop_assert_eq!(r.reached, n);
        prop_assert_eq!(r.messages, n as u64 - 1);
        prop_assert!(r.receipts.values().all(|&c| c == 1));
    }

    #[test]
    fn fail_fraction_is_exact(n in 10usize..200, frac in 0.0f64..0.9, seed in 0u64..1000) {
        let mut sim = small_net(n, 2, seed);
        let failed = sim.fail_fraction(frac).unwrap();
        prop_assert_eq!(sim.overlay.live_count(), n - failed.len());
        prop_assert!((failed.len() as f64 - frac * n as f64).abs() <= 1.0);
    }

    #[test]
    fn em_never_decreases_likelihood(seed in 0u64..10_000, k in 1usize..5, n in 10usize..200) {
        use rand::Rng;
        let mut rng = seeded(seed);
        let pts: Vec<[f64; 2]> = (0..n).map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)]).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..3.0)).collect();
        let km = kmeans(&pts, k.min(n), seed, 50, 1e-9).unwrap();
        let fit = em_fit_weighted(&pts, &w, gmm_from_kmeans(&pts, &km), 0.0, 40);
        prop_assert!(fit.log_likelihoods.windows(2).all(|p| p[1] >= p[0] - 1e-9));
    }
}
