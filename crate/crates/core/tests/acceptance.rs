//! End-to-end acceptance suite. Runs every criterion, prints one line each,
//! and exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use geochord::cluster::{em_fit_weighted, gmm_from_kmeans, kmeans};
use geochord::experiment::{
    linear_fit, run_experiment, traffic_mixture, Experiment, ExperimentKind, MetricsReport,
};
use geochord::geokey::{estimate_location, flag_outliers, AnchorObservation, PropagationModel};
use geochord::nettest::{fec_decode, fec_encode, frame_delivery_probability};
use geochord::rng::{derive, seeded};
use geochord::route::{lookup, optimal_latencies, path_expected_latency};
use geochord::swarm::{mean_traffic_latency, minimize, record_traffic, Bounds, Objective, Optimizer, PsoParams, SwarmConfig};
use geochord::{GeoPoint, SimConfig, Simulator};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn config(nodes: usize) -> SimConfig {
    SimConfig {
        nodes,
        repetitions: 1,
        ..SimConfig::default()
    }
}

fn run(kind: ExperimentKind, cfg: SimConfig) -> MetricsReport {
    run_experiment(&Experiment::new(kind, cfg)).expect("experiment runs")
}

fn storage_bound() -> Outcome {
    let cfg = SimConfig {
        k: 2,
        height: Some(5),
        neighborhood: 4,
        ..config(1024)
    };
    let r = run(ExperimentKind::Storage, cfg);
    let fingers_bound: usize = (0..=5).sum();
    let s = r.value("successors", &[]).unwrap();
    let entry_bound = fingers_bound as f64 + 4.0 + s;
    let rows: Vec<(f64, f64)> = {
        let f: BTreeMap<_, _> = r.select("fingers", &[]).map(|row| (row.point["node"].clone(), row.value)).collect();
        r.select("entries", &[])
            .map(|row| (f[&row.point["node"]], row.value))
            .collect()
    };
    let worst_f = rows.iter().map(|r| r.0).fold(0.0, f64::max);
    let worst_e = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    outcome(
        rows.len() == 1024 && worst_f <= fingers_bound as f64 && worst_e <= entry_bound,
        format!("{} nodes, max fingers {worst_f} <= {fingers_bound}, max entries {worst_e} <= {entry_bound}", rows.len()),
    )
}

fn path_length() -> Outcome {
    let cfg = SimConfig {
        sweep: vec![64, 256, 1024],
        pairs: 1000,
        ..config(64)
    };
    let r = run(ExperimentKind::PathLength, cfg);
    let mut ok = true;
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    let mut parts = Vec::new();
    for n in [64usize, 256, 1024] {
        let ns = n.to_string();
        let lg = (n as f64).log2();
        let ours = r.value("mean_hops", &[("n", &ns), ("series", "ours")]).unwrap();
        let chord = r.value("mean_hops", &[("n", &ns), ("series", "chord")]).unwrap();
        ok &= ours <= 1.5 * lg && (0.4 * lg..=0.6 * lg).contains(&chord);
        parts.push(format!("N={n} ours {ours:.2} chord {:.2}·log2N", chord / lg));
        xs.push(lg);
        ys.push(ours);
    }
    let (_, slope, r2) = linear_fit(&xs, &ys);
    ok &= r2 >= 0.9;
    outcome(ok, format!("{}; fit slope {slope:.3} R2 {r2:.4}", parts.join(", ")))
}

fn peer_latency() -> Outcome {
    let oracle = (2.0 + 2f64.sqrt() + 5.0 * 1f64.asinh()) / 15.0 * 1000.0;
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [2usize, 4] {
        let cfg = SimConfig {
            k,
            pairs: 4000,
            repetitions: 3,
            jitter: 0.0,
            velocity: 1.0,
            ..config(1024)
        };
        let r = run(ExperimentKind::PeerLatency, cfg);
        let l0 = r.value("mean_latency", &[("level", "0")]).unwrap();
        ok &= (l0 / oracle - 1.0).abs() <= 0.02;
        let want = (k as f64).powf(-0.5);
        let ratios: Vec<f64> = r.select("ratio_to_parent", &[]).map(|row| row.value).collect();
        ok &= !ratios.is_empty() && ratios.iter().all(|q| (q / want - 1.0).abs() <= 0.15);
        parts.push(format!(
            "k={k} level0 {l0:.1} vs {oracle:.1}, ratios {:?} vs {want:.3}",
            ratios.iter().map(|q| (q * 1000.0).round() / 1000.0).collect::<Vec<_>>()
        ));
    }
    outcome(ok, parts.join("; "))
}

fn path_latency() -> Outcome {
    let cfg = SimConfig {
        pairs: 1000,
        repetitions: 5,
        ..config(1024)
    };
    let r = run(ExperimentKind::PathLatency, cfg);
    let ours = r.value("mean_latency", &[("series", "ours")]).unwrap();
    let chord = r.value("mean_latency", &[("series", "chord")]).unwrap();
    outcome(ours < chord, format!("N=1024, 5 seeds: ours {ours:.1} < chord {chord:.1}"))
}

fn routing_quality() -> Outcome {
    let mut rng = seeded(55);
    let sim = Simulator::new(config(256)).unwrap();
    let ov = &sim.overlay;
    let mut stretch = Vec::new();
    for _ in 0..200 {
        let s = rng.random_range(0..256);
        let mut d = rng.random_range(0..256);
        while d == s {
            d = rng.random_range(0..256);
        }
        let hops = lookup(ov, s, &ov.nodes[d].id.key).unwrap();
        stretch.push(path_expected_latency(ov, &hops) / optimal_latencies(ov, s)[d]);
    }
    stretch.sort_by(f64::total_cmp);
    let median = (stretch[99] + stretch[100]) / 2.0;

    let mut failures = 0usize;
    let mut total = 0usize;
    for (n, seed) in [(2, 1), (16, 2), (16, 3), (64, 4), (64, 5)] {
        let sim = Simulator::new(SimConfig { seed, ..config(n) }).unwrap();
        let ov = &sim.overlay;
        for s in 0..n {
            for d in 0..n {
                total += 1;
                if lookup(ov, s, &ov.nodes[d].id.key).ok().and_then(|h| h.last().copied()) != Some(d) {
                    failures += 1;
                }
            }
        }
    }
    outcome(
        median <= 2.0 && failures == 0,
        format!("median stretch {median:.3} at N=256; {}/{total} exhaustive lookups delivered", total - failures),
    )
}

fn broadcast() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for n in [16usize, 256] {
        let mut sim = Simulator::new(config(n)).unwrap();
        let r = sim.broadcast(3, b"announce").unwrap();
        let live = sim.overlay.live_addrs();
        let once = live.iter().all(|a| r.receipts.get(a) == Some(&1)) && r.receipts.len() == live.len();
        let upper = n as u64 * (n as f64).log2().ceil() as u64;
        ok &= once && r.reached == n && (n as u64 - 1..=upper).contains(&r.messages);
        parts.push(format!("N={n} reached {} messages {} in [{}, {upper}]", r.reached, r.messages, n - 1));
    }
    outcome(ok, parts.join("; "))
}

fn fec() -> Outcome {
    let mut rng = seeded(77);
    let mut bad = 0;
    for i in 0..10_000u64 {
        let len = rng.random_range(0..512);
        let payload: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        let k = rng.random_range(1..=16);
        let f = fec_encode(&payload, k, i).unwrap();
        let drop = rng.random_range(0..=k);
        let rest: Vec<_> = f.shards.iter().filter(|s| s.index != drop).cloned().collect();
        if fec_decode(&rest).as_deref() != Ok(&payload[..]) {
            bad += 1;
        }
    }
    let mut sim = Simulator::new(SimConfig {
        loss: 0.05,
        shards: 4,
        ..config(8)
    })
    .unwrap();
    for i in 0..20_000 {
        sim.send(i % 8, (i + 1) % 8, b"frame payload bytes").unwrap();
    }
    let m = sim.run(f64::INFINITY).unwrap();
    let want = frame_delivery_probability(4, 0.05);
    let got = m.delivery_rate();
    outcome(
        bad == 0 && (got - want).abs() <= 0.01,
        format!("{bad} reconstruction failures in 10^4; delivery {got:.4} vs {want:.4}"),
    )
}

fn localization() -> Outcome {
    let model = PropagationModel { velocity: 1.0 };
    let side = 1000.0;
    let diameter = side * 2f64.sqrt();
    let mut rng = seeded(88);
    let noise = Normal::new(0.0, 0.01).unwrap();
    let trials = 1000;
    let (mut exact_worst, mut within, mut flagged) = (0.0f64, 0usize, 0usize);
    let pt = |rng: &mut geochord::rng::SimRng| GeoPoint::new(rng.random_range(0.0..side), rng.random_range(0.0..side));
    for _ in 0..trials {
        let truth = pt(&mut rng);
        let anchors: Vec<GeoPoint> = (0..8).map(|_| pt(&mut rng)).collect();
        let obs = |scale: &mut dyn FnMut() -> f64| -> Vec<AnchorObservation> {
            anchors
                .iter()
                .map(|a| AnchorObservation {
                    anchor: *a,
                    rtt: 2.0 * truth.distance(a) / model.velocity * scale(),
                })
                .collect()
        };
        if let Ok(e) = estimate_location(&obs(&mut || 1.0), &model) {
            exact_worst = exact_worst.max(e.point.distance(&truth) / diameter);
        } else {
            exact_worst = f64::INFINITY;
        }
        let noisy = obs(&mut || 1.0 + noise.sample(&mut rng));
        if estimate_location(&noisy, &model).is_ok_and(|e| e.point.distance(&truth) <= 0.05 * diameter) {
            within += 1;
        }
        let mut corrupted = noisy;
        let victim = rng.random_range(0..8);
        corrupted[victim].rtt *= 10.0;
        if flag_outliers(&corrupted, &model, 3.0).contains(&victim) {
            flagged += 1;
        }
    }
    let (w, f) = (within as f64 / trials as f64, flagged as f64 / trials as f64);
    outcome(
        exact_worst <= 1e-6 && w >= 0.95 && f >= 0.99,
        format!("zero-noise worst {exact_worst:.2e}; 1% noise within 5%: {w:.3}; corrupted flagged: {f:.3}"),
    )
}

fn optimizer_run(n: usize, seed: u64, epochs: usize) -> (f64, Vec<f64>, Optimizer, Vec<Vec<f64>>) {
    let cfg = SimConfig {
        seed,
        ..config(n)
    };
    let mut sim = Simulator::new(cfg.clone()).unwrap();
    let targets = traffic_mixture(cfg.side, seed);
    let (ov, rng) = sim.parts();
    record_traffic(ov, 20, &targets, rng);
    let initial = mean_traffic_latency(&sim.overlay);
    let mut opt = Optimizer::new(&sim.overlay, SwarmConfig::default(), Objective::default(), &mut seeded(derive(seed, 3)));
    let mut latencies = Vec::new();
    let mut gbests = Vec::new();
    for _ in 0..epochs {
        opt.run_epoch(&mut sim).unwrap();
        latencies.push(mean_traffic_latency(&sim.overlay));
        gbests.push(opt.swarms.values().map(|s| s.gbest_fitness()).collect());
    }
    (initial, latencies, opt, gbests)
}

fn estimation() -> Outcome {
    let mut em_bad = 0;
    for d in 0..100u64 {
        let mut rng = seeded(derive(900, d));
        let k = rng.random_range(1..=4);
        let n = rng.random_range(20..300);
        let centers: Vec<[f64; 2]> = (0..k).map(|_| [rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)]).collect();
        let spread = Normal::new(0.0, rng.random_range(5.0..150.0)).unwrap();
        let pts: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let c = centers[i % k];
                [c[0] + spread.sample(&mut rng), c[1] + spread.sample(&mut rng)]
            })
            .collect();
        let km = kmeans(&pts, k, d, 100, 1e-9).unwrap();
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let fit = em_fit_weighted(&pts, &weights, gmm_from_kmeans(&pts, &km), 0.0, 60);
        if fit.log_likelihoods.windows(2).any(|w| w[1] < w[0] - 1e-9) {
            em_bad += 1;
        }
    }

    let bounds = Bounds::uniform(10, -5.0, 5.0);
    let solved = (0..10u64)
        .filter(|&s| {
            let best = minimize(
                |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>(),
                &bounds,
                30,
                2000,
                &PsoParams::default(),
                &mut seeded(1000 + s),
            );
            best.fitness < 1e-3
        })
        .count();

    let (initial, latencies, _, gbests) = optimizer_run(64, 1, 150);
    let worst = latencies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let monotone = gbests.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| b <= a));
    outcome(
        em_bad == 0 && solved >= 9 && worst <= initial && monotone,
        format!(
            "EM non-monotone {em_bad}/100; sphere solved {solved}/10; traffic latency initial {initial:.1} worst {worst:.1} final {:.1}; gbest monotone {monotone}",
            latencies.last().unwrap()
        ),
    )
}

fn convergence() -> Outcome {
    let (_, _, opt, _) = optimizer_run(64, 2, 260);
    let s = &opt.summaries;
    let Some(sat) = s.iter().position(|e| e.saturated == 64) else {
        return outcome(false, "never saturated within 260 epochs");
    };
    let quiet = s[sat + 1..].iter().all(|e| e.messages == 0 && e.t_c == 0.0 && e.t_p == 0.0);
    let last_accept = s.iter().rposition(|e| e.accepted > 0).map_or(0, |i| i + 1);
    let tail = &s[last_accept..];
    let declining = tail.windows(2).all(|w| w[1].t_c <= w[0].t_c && w[1].t_p <= w[0].t_p);
    outcome(
        quiet && declining && sat + 1 < s.len(),
        format!(
            "saturated at epoch {sat}; {} quiet epochs after; t_c/t_p non-increasing over {} epochs after last accept",
            s.len() - sat - 1,
            tail.len()
        ),
    )
}

fn churn() -> Outcome {
    let mut sim = Simulator::new(config(256)).unwrap();
    let failed = sim.fail_fraction(0.1).unwrap();
    let rounds = 3 * (256f64.log2().ceil() as usize);
    let (ov, rng) = sim.parts();
    for _ in 0..rounds {
        ov.stabilize_round(rng);
    }
    let ov = &sim.overlay;
    let live = ov.live_addrs();
    let mut ok = 0usize;
    for &s in &live {
        for &d in &live {
            let key = ov.nodes[d].id.key;
            if lookup(ov, s, &key).is_ok_and(|h| h.last() == Some(&d) && ov.owner_of(&key) == Some(d)) {
                ok += 1;
            }
        }
    }
    let total = live.len() * live.len();
    outcome(
        !failed.is_empty() && ok == total,
        format!("failed {}; {rounds} rounds; {ok}/{total} survivor lookups succeed", failed.len()),
    )
}

fn determinism() -> Outcome {
    let mut differing = Vec::new();
    for kind in ExperimentKind::ALL {
        let cfg = SimConfig {
            nodes: 48,
            pairs: 100,
            repetitions: 2,
            epochs: 4,
            ..SimConfig::default()
        };
        let a = run(kind, cfg.clone()).to_csv();
        let b = run(kind, cfg).to_csv();
        if a != b {
            differing.push(kind.name());
        }
    }
    outcome(differing.is_empty(), format!("7 experiments re-run; differing: {differing:?}"))
}

type Criterion = (&'static str, fn() -> Outcome, Duration);

fn main() {
    let criteria: [Criterion; 12] = [
        ("storage bound", storage_bound, Duration::from_secs(10)),
        ("path length", path_length, Duration::from_secs(60)),
        ("peer-latency decay", peer_latency, Duration::from_secs(60)),
        ("path latency vs flat chord", path_latency, Duration::from_secs(120)),
        ("routing quality", routing_quality, Duration::MAX),
        ("broadcast", broadcast, Duration::MAX),
        ("fec", fec, Duration::MAX),
        ("localization", localization, Duration::MAX),
        ("estimation", estimation, Duration::MAX),
        ("convergence to zero overhead", convergence, Duration::MAX),
        ("churn", churn, Duration::MAX),
        ("determinism", determinism, Duration::MAX),
    ];
    let mut failed = 0;
    for (i, (name, f, budget)) in criteria.into_iter().enumerate() {
        let t = Instant::now();
        let o = f();
        let took = t.elapsed();
        let pass = o.pass && took <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {} ({:.1}s)",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            o.detail,
            took.as_secs_f64()
        );
    }
    println!("{} of 12 criteria passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
