//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The report always exits 0 so the rest of the suite keeps running; set
//! `ACCEPTANCE_STRICT=1` to exit nonzero when any criterion fails.

use std::process::ExitCode;
use std::time::Instant;

use d2d_relay::allocator::{solve, solve_nominal, verify_kkt, AllocationProblem, NominalProvider, SolverOptions};
use d2d_relay::baselines::oracle_solve;
use d2d_relay::chance::{
    chance_provider, sensitivity_theta, table3_params, DistributionFamily, Hop, TradeoffConfig,
};
use d2d_relay::harness::{drop_problems, emit_results, run_experiment, ExperimentSpec, Mode, OutputFormat, Sweep, SweepVariable};
use d2d_relay::robustness::{cost_of_robustness, protection_deltas, robust_provider, UncertaintyModel};
use d2d_relay::topology::ScenarioConfig;

const MASTER_SEED: u64 = 2024;
const DROPS: usize = 25;

// criterion 1
const C1_ITER_CAP: usize = 50;
const C1_SHARE: f64 = 0.90;
const C1_MEDIAN_CAP: f64 = 20.0;
// criterion 2
const C2_INSTANCES: usize = 20;
const C2_GAP: f64 = 0.02;
const C2_KKT_TOL: f64 = 1e-4;
// criterion 3: float round-off allowance on the ordering
const C3_SLACK: f64 = 1e-9;
// criterion 4
const C4_PSI: [f64; 2] = [0.01, 0.05];
const C4_INSTANCES: usize = 10;
const C4_REL_TOL: f64 = 0.50;
// criterion 6
const C6_THETAS: [f64; 6] = [0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
const C6_REL_TOL: f64 = 0.20;
const C6_FD_STEP: f64 = 0.01;
// criterion 7
const C7_DISTANCES: [f64; 11] = [20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0, 110.0, 120.0];
const C7_RING_M: f64 = 80.0;
// criterion 9
const C9_SLOPE_FACTOR: f64 = 1.3;
const C9_REPEATS: usize = 7;
const C9_DROPS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, o: &Outcome) {
    println!("{} criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn small_instance(k: usize) -> AllocationProblem {
    let sc = ScenarioConfig {
        num_rbs: 3,
        ..ScenarioConfig::default()
    };
    let full = drop_problems(&sc, MASTER_SEED, k).expect("drop")[0].clone();
    full.select_ues(&[0, full.num_ues() - 1])
}

fn c1_convergence() -> Outcome {
    let mut iters = Vec::new();
    let mut sizes = Vec::new();
    for k in 0..DROPS {
        let mut worst = 0;
        let mut ok = true;
        for p in drop_problems(&ScenarioConfig::default(), MASTER_SEED, k).expect("drop") {
            sizes.push(p.num_ues());
            let s = solve_nominal(&p, &opts()).expect("solve").solution;
            ok &= s.converged;
            worst = worst.max(s.iterations);
        }
        iters.push(if ok { worst } else { usize::MAX });
    }
    let within = iters.iter().filter(|&&i| i <= C1_ITER_CAP).count();
    let mut sorted = iters.clone();
    sorted.sort_unstable();
    let median = 0.5 * (sorted[(DROPS - 1) / 2] as f64 + sorted[DROPS / 2] as f64);
    let share = within as f64 / DROPS as f64;
    let eight = sizes.iter().all(|&u| u == 8);
    Outcome {
        pass: eight && share >= C1_SHARE && median <= C1_MEDIAN_CAP,
        detail: format!(
            "{within}/{DROPS} drops converged within {C1_ITER_CAP} iterations, median {median}, max {}, 8 users per relay: {eight}",
            sorted.last().copied().unwrap_or(0)
        ),
    }
}

fn c2_oracle() -> Outcome {
    let mut worst_gap = 0.0f64;
    let mut worst_kkt = 0.0f64;
    let mut kkt_fail = 0;
    for k in 0..C2_INSTANCES {
        let p = small_instance(k);
        let a = solve_nominal(&p, &opts()).expect("solve");
        let o = oracle_solve(&p, &NominalProvider).expect("oracle");
        let gap = ((o.sum_rate - a.solution.sum_rate) / o.sum_rate).abs();
        let kkt = verify_kkt(&p, &a.solution, &a.dual, NominalProvider, C2_KKT_TOL);
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(kkt.max_primal.max(kkt.max_slackness).max(kkt.max_stationarity));
        if !kkt.passed() {
            kkt_fail += 1;
        }
    }
    Outcome {
        pass: worst_gap <= C2_GAP && kkt_fail == 0,
        detail: format!("worst oracle gap {worst_gap:.3e}, worst KKT residual {worst_kkt:.3e}, KKT failures {kkt_fail}/{C2_INSTANCES}"),
    }
}

fn c3_ordering() -> Outcome {
    let (mut nc, mut cr) = (0, 0);
    let mut worst_cr = 0.0f64;
    let params = table3_params(DistributionFamily::UnimodalSymmetric);
    for k in 0..DROPS {
        let (mut rn, mut rc, mut rr) = (0.0, 0.0, 0.0);
        for p in drop_problems(&ScenarioConfig::default(), MASTER_SEED, k).expect("drop") {
            let (u, n) = (p.num_ues(), p.num_rbs());
            let m = UncertaintyModel::uniform(u, n, 0.2, 0.2, 0.2);
            rn += solve_nominal(&p, &opts()).expect("nominal").solution.sum_rate;
            rr += solve(&p, robust_provider(&m, &p).expect("model"), &opts()).expect("robust").solution.sum_rate;
            let tr = TradeoffConfig::from_fraction(&p, vec![0.2; n], vec![0.2; n], 0.2);
            let cp = chance_provider(&tr, &vec![params; u], &m, &p).expect("chance");
            rc += solve(&p, cp, &opts()).expect("chance").solution.sum_rate;
        }
        if rc > rn * (1.0 + C3_SLACK) {
            nc += 1;
        }
        if rr > rc * (1.0 + C3_SLACK) {
            cr += 1;
            worst_cr = worst_cr.max((rr - rc) / rc);
        }
    }
    Outcome {
        pass: nc == 0 && cr == 0,
        detail: format!(
            "nominal < chance on {nc}/{DROPS} drops, chance < robust on {cr}/{DROPS} drops (largest shortfall {:.3}%)",
            100.0 * worst_cr
        ),
    }
}

fn c4_cost_estimate() -> Outcome {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for psi in C4_PSI {
        for k in 0..C4_INSTANCES {
            let p = small_instance(k);
            let (u, n) = (p.num_ues(), p.num_rbs());
            let nom = solve_nominal(&p, &opts()).expect("nominal");
            let m = UncertaintyModel::uniform(u, n, psi, psi, psi);
            let prov = robust_provider(&m, &p).expect("model");
            let deltas = protection_deltas(&prov, &p, &nom.solution.s);
            let rob = solve(&p, prov, &opts()).expect("robust");
            let c = cost_of_robustness(&nom.dual, &deltas, nom.solution.sum_rate, rob.solution.sum_rate);
            if c.r_delta_direct > 0.0 {
                checked += 1;
                worst = worst.max(((c.r_delta_estimate - c.r_delta_direct) / c.r_delta_direct).abs());
            }
        }
    }
    Outcome {
        pass: checked > 0 && worst <= C4_REL_TOL,
        detail: format!("worst relative error {worst:.3e} over {checked} instances with positive loss"),
    }
}

fn c5_table() -> Outcome {
    let got = [
        table3_params(DistributionFamily::BoundedSupport),
        table3_params(DistributionFamily::UnimodalBounded),
        table3_params(DistributionFamily::UnimodalSymmetric),
    ];
    let want = [(1.0, 0.0), (0.5, 1.0 / 12f64.sqrt()), (0.0, 1.0 / 3f64.sqrt())];
    let exact = got
        .iter()
        .zip(want)
        .all(|(g, (e, t))| g.eta_plus.to_bits() == f64::to_bits(e) && g.tau.to_bits() == f64::to_bits(t));
    Outcome {
        pass: exact,
        detail: format!("{:?}", got.iter().map(|g| (g.eta_plus, g.tau)).collect::<Vec<_>>()),
    }
}

fn c6_sensitivity() -> Outcome {
    let p = drop_problems(&ScenarioConfig::default(), MASTER_SEED, 0).expect("drop")[0].clone();
    let (u, n) = (p.num_ues(), p.num_rbs());
    let params = vec![table3_params(DistributionFamily::UnimodalSymmetric); u];
    let m = UncertaintyModel::uniform(u, n, 0.2, 0.2, 0.0);
    let r_nom = solve_nominal(&p, &opts()).expect("nominal").solution.sum_rate;
    let run = |th: f64| {
        let tr = TradeoffConfig::from_fraction(&p, vec![th; n], vec![th; n], 0.2);
        let s = solve(&p, chance_provider(&tr, &params, &m, &p).expect("chance"), &opts()).expect("solve");
        (tr, s)
    };
    let mut worst = 0.0f64;
    let mut s_at = Vec::new();
    for th in C6_THETAS {
        let h = C6_FD_STEP * th;
        let fd = ((r_nom - run(th + h).1.solution.sum_rate) - (r_nom - run(th - h).1.solution.sum_rate)) / (2.0 * h);
        let (tr, s) = run(th);
        let mut analytic = 0.0;
        for rb in 0..n {
            let col: Vec<f64> = (0..u).map(|ue| s.solution.s[ue][rb]).collect();
            let g1: Vec<f64> = (0..u).map(|ue| tr.g_hat1[ue][rb]).collect();
            let g2: Vec<f64> = (0..u).map(|ue| tr.g_hat2[ue][rb]).collect();
            let ratios: Vec<f64> = (0..u).map(|ue| p.ratio(ue, rb)).collect();
            analytic += sensitivity_theta(Hop::First, &col, &g1, th, &params, None, s.dual.psi[rb]).expect("s1");
            analytic += sensitivity_theta(Hop::Second, &col, &g2, th, &params, Some(&ratios), s.dual.phi[rb]).expect("s2");
        }
        let err = if fd == 0.0 { f64::INFINITY } else { ((analytic - fd) / fd).abs() };
        worst = worst.max(err);
        s_at.push(analytic);
    }
    let steep = s_at[1].abs() > s_at[5].abs();
    Outcome {
        pass: worst <= C6_REL_TOL && steep,
        detail: format!(
            "worst relative error {worst:.3e}, |S(0.1)| = {:.4e}, |S(0.5)| = {:.4e}",
            s_at[1].abs(),
            s_at[5].abs()
        ),
    }
}

/// Non-decreasing least-squares fit (pool adjacent violators).
fn isotonic(y: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, usize)> = Vec::new();
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (b, nb) = blocks[blocks.len() - 1];
            let (a, na) = blocks[blocks.len() - 2];
            if a <= b {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((a * na as f64 + b * nb as f64) / (na + nb) as f64, na + nb));
        }
    }
    blocks.into_iter().flat_map(|(v, n)| std::iter::repeat_n(v, n)).collect()
}

fn sign_changes(y: &[f64]) -> usize {
    y.windows(2).filter(|w| (w[0] < 0.0) != (w[1] < 0.0)).count()
}

fn c7_trend() -> Outcome {
    let spec = ExperimentSpec {
        mode: Mode::Nominal,
        num_drops: DROPS,
        master_seed: MASTER_SEED,
        scenario: ScenarioConfig {
            d2d_ring_radius_m: C7_RING_M,
            ..ScenarioConfig::default()
        },
        sweep: Some(Sweep {
            variable: SweepVariable::D2dPairDistance,
            values: C7_DISTANCES.to_vec(),
        }),
        ..ExperimentSpec::default()
    };
    let rows = run_experiment(&spec, 0).expect("sweep");
    let gain: Vec<f64> = rows.iter().map(|r| r.rate_gain_pct.unwrap_or(f64::INFINITY)).collect();
    let smooth = isotonic(&gain);
    let first = gain[0];
    let last = gain[gain.len() - 1];
    let changes = sign_changes(&smooth);
    Outcome {
        pass: first < 0.0 && last > 0.0 && changes == 1,
        detail: format!(
            "gain % by distance {:?}, raw sign changes {}, smoothed sign changes {changes}",
            gain.iter().map(|g| (g * 100.0).round() / 100.0).collect::<Vec<_>>(),
            sign_changes(&gain)
        ),
    }
}

fn csv_of(spec: &ExperimentSpec, workers: usize) -> Vec<u8> {
    let mut buf = Vec::new();
    emit_results(&run_experiment(spec, workers).expect("run"), OutputFormat::Csv, &mut buf).expect("emit");
    buf
}

fn c8_determinism() -> Outcome {
    let spec = ExperimentSpec {
        mode: Mode::Chance,
        num_drops: 6,
        master_seed: MASTER_SEED,
        sweep: Some(Sweep {
            variable: SweepVariable::Theta,
            values: vec![0.05, 0.2, 0.8],
        }),
        ..ExperimentSpec::default()
    };
    let a = csv_of(&spec, 1);
    let b = csv_of(&spec, 1);
    let c = csv_of(&spec, 4);
    Outcome {
        pass: a == b && a == c,
        detail: format!("{} bytes, repeat identical: {}, 4 workers identical: {}", a.len(), a == b, a == c),
    }
}

fn per_iteration_secs(num_rbs: usize) -> f64 {
    let sc = ScenarioConfig {
        num_rbs,
        ..ScenarioConfig::default()
    };
    let problems: Vec<AllocationProblem> = (0..C9_DROPS)
        .flat_map(|k| drop_problems(&sc, MASTER_SEED, k).expect("drop"))
        .collect();
    let mut best = f64::INFINITY;
    for _ in 0..C9_REPEATS {
        let mut secs = 0.0;
        let mut iters = 0;
        for p in &problems {
            let t0 = Instant::now();
            let s = solve_nominal(p, &opts()).expect("solve");
            secs += t0.elapsed().as_secs_f64();
            iters += s.solution.iterations;
        }
        best = best.min(secs / iters as f64);
    }
    best
}

fn c9_scaling() -> Outcome {
    let t13 = per_iteration_secs(13);
    let t26 = per_iteration_secs(26);
    let ratio = t26 / t13;
    Outcome {
        pass: ratio <= 2.0 * C9_SLOPE_FACTOR,
        detail: format!("per-iteration time {:.3e} s at N=13, {:.3e} s at N=26, ratio {ratio:.2}", t13, t26),
    }
}

fn main() -> ExitCode {
    type Check = fn() -> Outcome;
    let criteria: [(&str, Check); 9] = [
        ("convergence speed", c1_convergence),
        ("oracle equivalence", c2_oracle),
        ("robustness ordering", c3_ordering),
        ("cost estimate", c4_cost_estimate),
        ("distribution table", c5_table),
        ("trade-off sensitivity", c6_sensitivity),
        ("distance threshold", c7_trend),
        ("determinism", c8_determinism),
        ("complexity scaling", c9_scaling),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        report(i + 1, name, &o);
        failed += usize::from(!o.pass);
    }
    println!("{} of 9 criteria passed", 9 - failed);
    if failed == 0 || std::env::var_os("ACCEPTANCE_STRICT").is_none() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
