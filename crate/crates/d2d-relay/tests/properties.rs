use std::f64::consts::LN_2;

use proptest::prelude::*;

use d2d_relay::allocator::{
    dual_update, solve, solve_nominal, verify_kkt, AllocationProblem, DualState, NominalProvider, SolverOptions,
};
use d2d_relay::baselines::{oracle_solve, rate_gain, solve_reference};
use d2d_relay::chance::{
    bernstein_protection_hop1, chance_provider, sensitivity_theta, table3_params, DistributionFamily, Hop,
    TradeoffConfig,
};
use d2d_relay::harness::{drop_instance, drop_problems};
use d2d_relay::propagation::{
    end_to_end_rate, gain_from_pathloss, path_loss_access_db, path_loss_backhaul_db, rate_on_rb, unit_sinr,
    FadingDraw,
};
use d2d_relay::robustness::{
    protection_gain_hop1, protection_gain_hop2, protection_interference, robust_provider, ProtectionNorm,
    UncertaintyModel,
};
use d2d_relay::topology::{
    generate_topology, realize_channels, reference_node_hop1, reference_node_hop2, Node, ReferenceMode,
    ScenarioConfig, UeKind,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn relay(seed: u64, num_rbs: usize) -> AllocationProblem {
    let sc = ScenarioConfig {
        num_rbs,
        ..ScenarioConfig::default()
    };
    drop_problems(&sc, seed, 0).unwrap()[0].clone()
}

fn tiny(seed: u64) -> AllocationProblem {
    let p = relay(seed, 3);
    p.select_ues(&[0, p.num_ues() - 1])
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

proptest! {
    #[test]
    fn rate_increases_with_power(p in 1e-6f64..10.0, dp in 1e-6f64..1.0, g in 1e-3f64..1e9) {
        prop_assert!(rate_on_rb(p + dp, g, 180e3) > rate_on_rb(p, g, 180e3));
    }

    #[test]
    fn two_hop_rate_is_symmetric_half_min(a in 0.0f64..1e8, b in 0.0f64..1e8) {
        prop_assert_eq!(end_to_end_rate(a, b), end_to_end_rate(b, a));
        prop_assert_eq!(end_to_end_rate(a, b), a.min(b) / 2.0);
    }

    #[test]
    fn pathloss_round_trip(d in 1e-3f64..5.0) {
        for pl in [path_loss_access_db(d, FadingDraw::NONE).unwrap(), path_loss_backhaul_db(d, FadingDraw::NONE).unwrap()] {
            let back = -10.0 * gain_from_pathloss(pl).log10();
            prop_assert!(((back - pl) / pl).abs() <= 1e-12);
        }
    }

    #[test]
    fn sinr_falls_with_interference(h in 1e-15f64..1e-6, i in 0.0f64..1e-9, di in 1e-15f64..1e-9) {
        let s2 = 1e-14;
        prop_assert!(unit_sinr(h, i + di, s2).unwrap() < unit_sinr(h, i, s2).unwrap());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn topology_invariants(seed in any::<u64>(), cues in 3usize..20, pairs in 0usize..12, d_dd in 5.0f64..120.0) {
        let cfg = ScenarioConfig { rng_seed: seed, num_cues: cues, num_d2d_pairs: pairs, d2d_pair_distance_m: d_dd, ..ScenarioConfig::default() };
        let topo = generate_topology(&cfg).unwrap();
        let mut served = 0;
        let mut seen = std::collections::BTreeSet::new();
        for l in 0..topo.num_relays() {
            for u in topo.relay_users(l) {
                prop_assert!(seen.insert(u.tx()));
                served += 1;
            }
        }
        prop_assert_eq!(served, cues + pairs);
        for ue in &topo.ues {
            match ue.kind {
                UeKind::Cue => {
                    let d = dist(ue.position, topo.relay_positions[ue.serving_relay]);
                    prop_assert!(d >= cfg.min_ue_relay_distance_m - 1e-9 && d <= cfg.relay_cell_radius_m + 1e-9, "distance {}", d);
                }
                UeKind::D2dTx => {
                    let rx = &topo.ues[ue.peer.unwrap()];
                    prop_assert!((dist(ue.position, rx.position) - d_dd).abs() <= 1e-9);
                }
                UeKind::D2dRx => {}
            }
        }
    }

    #[test]
    fn reference_nodes_are_maxima(seed in any::<u64>()) {
        let cfg = ScenarioConfig { rng_seed: seed, ..ScenarioConfig::default() };
        let topo = generate_topology(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ch = realize_channels(&topo, &cfg, &mut rng, true).unwrap();
        for l in 0..topo.num_relays() {
            let r = reference_node_hop2(l, &topo, &ch, ReferenceMode::PerRb);
            for rb in 0..cfg.num_rbs {
                for u in topo.ues.iter().filter(|u| u.kind == UeKind::D2dRx && u.serving_relay != l) {
                    prop_assert!(ch.gain(Node::Relay(l), Node::Ue(u.id), rb) <= r.gain[rb]);
                }
            }
        }
        for ue in topo.ues.iter().filter(|u| u.kind != UeKind::D2dRx) {
            let r = reference_node_hop1(ue.id, &topo, &ch, ReferenceMode::PerRb);
            for rb in 0..cfg.num_rbs {
                for j in (0..topo.num_relays()).filter(|&j| j != ue.serving_relay) {
                    prop_assert!(ch.gain(Node::Ue(ue.id), Node::Relay(j), rb) <= r.gain[rb]);
                }
            }
        }
    }

    #[test]
    fn dual_update_projects(seed in 0u64..500, scale in 0.0f64..10.0, t in 1usize..200) {
        let p = relay(seed, 13);
        let solved = solve_nominal(&p, &opts()).unwrap();
        let mut dual = DualState::new(&p, scale);
        dual.lambda.iter_mut().enumerate().for_each(|(i, l)| *l = scale * (i % 3) as f64);
        let next = dual_update(&dual, &p, &solved.solution, &NominalProvider, 0.5, t);
        prop_assert!(next.is_projected());
        for ue in 0..p.num_ues() {
            for rb in 0..p.num_rbs() {
                prop_assert!(next.omega[ue][rb] >= p.omega_floor(ue, rb, &NominalProvider));
            }
        }
    }

    #[test]
    fn zero_protection_is_nominal(seed in 0u64..500) {
        let p = relay(seed, 13);
        let zero = robust_provider(&UncertaintyModel::zero(p.num_ues(), p.num_rbs()), &p).unwrap();
        prop_assert_eq!(solve(&p, zero, &opts()).unwrap(), solve_nominal(&p, &opts()).unwrap());
    }

    #[test]
    fn converged_allocation_is_feasible(seed in 0u64..500) {
        let p = relay(seed, 13);
        let s = solve_nominal(&p, &opts()).unwrap();
        prop_assume!(s.solution.converged);
        let k = verify_kkt(&p, &s.solution, &s.dual, NominalProvider, 1e-6);
        prop_assert!(k.max_primal <= 1e-6, "primal residual {}", k.max_primal);
    }

    #[test]
    fn more_protection_never_raises_rate(seed in 0u64..500, lo in 0.0f64..0.2, extra in 0.01f64..0.3) {
        let p = relay(seed, 13);
        let (u, n) = (p.num_ues(), p.num_rbs());
        let rate = |psi: f64| {
            let m = UncertaintyModel::uniform(u, n, psi, psi, psi);
            solve(&p, robust_provider(&m, &p).unwrap(), &opts()).unwrap().solution.sum_rate
        };
        let nominal = solve_nominal(&p, &opts()).unwrap().solution.sum_rate;
        let (a, b) = (rate(lo), rate(lo + extra));
        // optima are ordered exactly; each solve is within 2% of its optimum
        prop_assert!(b <= a * 1.02, "{} > {}", b, a);
        prop_assert!(a <= nominal * 1.02, "{} > {}", a, nominal);
    }

    #[test]
    fn oracle_bounds_allocator(seed in 0u64..500) {
        let p = tiny(seed);
        let oracle = oracle_solve(&p, &NominalProvider).unwrap();
        // with no assignment meeting every target there is no optimum to match
        prop_assume!(oracle.feasible);
        let o = oracle.sum_rate;
        let solved = solve_nominal(&p, &opts()).unwrap().solution;
        prop_assert!(solved.converged);
        let a = solved.sum_rate;
        prop_assert!(o >= a * (1.0 - 0.02));
        prop_assert!((o - a).abs() <= 0.02 * o);
    }

    #[test]
    fn chance_rate_grows_with_theta(seed in 0u64..500, lo in 0.02f64..0.4, extra in 0.01f64..0.5) {
        let p = relay(seed, 13);
        let (u, n) = (p.num_ues(), p.num_rbs());
        let params = vec![table3_params(DistributionFamily::UnimodalSymmetric); u];
        let m = UncertaintyModel::uniform(u, n, 0.2, 0.2, 0.2);
        let rate = |th: f64| {
            let tr = TradeoffConfig::from_fraction(&p, vec![th; n], vec![th; n], 0.2);
            solve(&p, chance_provider(&tr, &params, &m, &p).unwrap(), &opts()).unwrap().solution.sum_rate
        };
        // the optimum is monotone and the allocator stays within 2% of it
        let (a, b) = (rate(lo), rate((lo + extra).min(0.95)));
        prop_assert!(b >= a * (1.0 - 0.02), "{} < {}", b, a);
    }

    #[test]
    fn direct_pairs_meet_both_targets(seed in 0u64..500) {
        let sc = ScenarioConfig { d2d_ring_radius_m: 80.0, ..ScenarioConfig::default() };
        let (topo, ch, cfg) = drop_instance(&sc, seed, 0).unwrap();
        let r = solve_reference(&topo, &ch, &cfg, &opts()).unwrap();
        let noise = ch.sigma2_w * (1.0 + cfg.ibar_over_noise);
        let bw = 180e3;
        for d in r.d2d_direct.iter().filter(|d| d.admitted) {
            let cue = d.shared_cue.unwrap();
            let l = topo.ues[cue].serving_relay;
            let row = r.cue_ids[l].iter().position(|&c| c == cue).unwrap();
            let sol = &r.cue_alloc[l];
            let per_rb = d.power_w / d.rb_set.len() as f64;
            let (mut rd, mut rc) = (0.0, 0.0);
            for &rb in &d.rb_set {
                let (p1, p2) = (sol.p1[row][rb], sol.p2[row][rb]);
                let sig = per_rb * ch.gain(Node::Ue(d.tx), Node::Ue(d.rx), rb);
                let a = sig / (noise + p1 * ch.gain(Node::Ue(cue), Node::Ue(d.rx), rb));
                let b = sig / (noise + p2 * ch.gain(Node::Relay(l), Node::Ue(d.rx), rb));
                rd += 0.5 * bw * ((1.0 + a).log2() + (1.0 + b).log2());
                let s1 = p1 * ch.gain(Node::Ue(cue), Node::Relay(l), rb) / (noise + per_rb * ch.gain(Node::Ue(d.tx), Node::Relay(l), rb));
                let s2 = p2 * ch.gain(Node::Relay(l), Node::Enb, rb) / (noise + per_rb * ch.gain(Node::Ue(d.tx), Node::Enb, rb));
                rc += 0.5 * bw * (1.0 + s1.min(s2)).ln() / LN_2;
            }
            prop_assert!((rd - d.rate_bps).abs() <= 1e-9 * rd);
            prop_assert!(rd >= cfg.qos_d2d_bps * (1.0 - 1e-9));
            prop_assert!(rc >= cfg.qos_cue_bps * (1.0 - 1e-9), "CUE rate {}", rc);
        }
    }
}

proptest! {
    #[test]
    fn protection_is_monotone(s in prop::collection::vec(0.0f64..0.2, 1..6), g in 1e-12f64..1e-6, psi in 0.0f64..1.0, extra in 0.0f64..1.0, ibar in 1e-15f64..1e-10) {
        let u = s.len();
        let g_ref = vec![g; u];
        let ratios = vec![0.7; u];
        let lo = UncertaintyModel::uniform(u, 1, psi, psi, psi);
        let hi = UncertaintyModel::uniform(u, 1, psi + extra, psi + extra, psi + extra);
        let a1 = protection_gain_hop1(0, &s, &lo, &g_ref);
        prop_assert!(a1 >= 0.0);
        prop_assert!(protection_gain_hop1(0, &s, &hi, &g_ref) >= a1);
        prop_assert!(protection_gain_hop2(0, &s, &hi, &g_ref, &ratios) >= protection_gain_hop2(0, &s, &lo, &g_ref, &ratios));
        prop_assert!(protection_interference(0, 0, &hi, ibar) >= protection_interference(0, 0, &lo, ibar));
    }

    #[test]
    fn euclidean_protection_is_dual_norm(s in prop::collection::vec(0.0f64..10.0, 1..8), psi in 0.0f64..1.0) {
        let u = s.len();
        let m = UncertaintyModel::uniform(u, 1, psi, psi, 0.0).with_norm(ProtectionNorm::Dual { alpha: 2.0 });
        let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = protection_gain_hop1(0, &s, &m, &vec![1.0; u]);
        prop_assert!((got - psi * norm).abs() <= 1e-12 * (psi * norm).max(1e-300));
    }

    #[test]
    fn bernstein_margin_falls_with_theta(s in prop::collection::vec(1e-3f64..0.2, 1..6), th in 0.01f64..0.9, dth in 0.001f64..0.09) {
        let u = s.len();
        let ghat = vec![1e-9; u];
        let sym = vec![table3_params(DistributionFamily::UnimodalSymmetric); u];
        prop_assert!(bernstein_protection_hop1(&s, &ghat, th + dth, &sym).unwrap() < bernstein_protection_hop1(&s, &ghat, th, &sym).unwrap());
        let flat = vec![table3_params(DistributionFamily::BoundedSupport); u];
        prop_assert_eq!(bernstein_protection_hop1(&s, &ghat, th + dth, &flat).unwrap(), bernstein_protection_hop1(&s, &ghat, th, &flat).unwrap());
    }

    #[test]
    fn sensitivity_sign_and_steepness(s in prop::collection::vec(1e-3f64..0.2, 1..6), th in 0.01f64..0.99, mult in 0.0f64..1e9) {
        let u = s.len();
        let ghat = vec![1e-9; u];
        let params = vec![table3_params(DistributionFamily::UnimodalBounded); u];
        prop_assert!(sensitivity_theta(Hop::First, &s, &ghat, th, &params, None, mult).unwrap() <= 0.0);
        prop_assume!(mult > 0.0);
        let s1 = sensitivity_theta(Hop::First, &s, &ghat, 0.1, &params, None, mult).unwrap();
        let s5 = sensitivity_theta(Hop::First, &s, &ghat, 0.5, &params, None, mult).unwrap();
        prop_assert!(s1.abs() > s5.abs());
    }

    #[test]
    fn equal_rates_gain_nothing(x in 1e-3f64..1e9) {
        let g = rate_gain(x, x);
        prop_assert_eq!(g.pct, 0.0);
        prop_assert!(!g.undefined);
    }
}
