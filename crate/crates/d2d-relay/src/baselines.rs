//! Comparison schemes: direct D2D underlay without relaying, and an
//! exhaustive oracle for small single-relay instances.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::allocator::{solve_nominal, AllocationProblem, AllocationSolution, ProtectionProvider, SolverOptions};
use crate::error::{Error, Result};
use crate::propagation::dbm_to_watts;
use crate::topology::{relay_problem, ChannelRealization, NetworkTopology, Node, ScenarioConfig};

/// One D2D pair in the direct scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectD2d {
    pub tx: usize,
    pub rx: usize,
    /// UE id of the CUE whose RBs are reused.
    pub shared_cue: Option<usize>,
    pub rb_set: Vec<usize>,
    /// Total transmit power, split evenly over `rb_set`.
    pub power_w: f64,
    pub rate_bps: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSolution {
    /// Relay-aided CUE allocation, one entry per relay.
    pub cue_alloc: Vec<AllocationSolution>,
    /// CUE ids in the order of each relay's problem rows.
    pub cue_ids: Vec<Vec<usize>>,
    /// CUE rates after D2D reuse, by CUE id order of `cue_ids`.
    pub cue_rate_bps: Vec<Vec<f64>>,
    pub d2d_direct: Vec<DirectD2d>,
}

impl ReferenceSolution {
    pub fn mean_d2d_rate(&self) -> f64 {
        if self.d2d_direct.is_empty() {
            return 0.0;
        }
        self.d2d_direct.iter().map(|d| d.rate_bps).sum::<f64>() / self.d2d_direct.len() as f64
    }

    pub fn sum_rate(&self) -> f64 {
        self.cue_rate_bps.iter().flatten().sum::<f64>() + self.d2d_direct.iter().map(|d| d.rate_bps).sum::<f64>()
    }
}

/// A CUE transmission reused by a D2D pair: UE id, serving relay and the
/// per-RB powers of both hops.
struct CueLink {
    ue: usize,
    relay: usize,
    rbs: Vec<usize>,
    p1: Vec<f64>,
    p2: Vec<f64>,
}

struct Env<'a> {
    ch: &'a ChannelRealization,
    noise: f64,
    bw: f64,
}

impl Env<'_> {
    fn cue_rate(&self, c: &CueLink, d2d_tx: Option<(usize, f64)>) -> f64 {
        let mut rate = 0.0;
        for (k, &rb) in c.rbs.iter().enumerate() {
            let (i1, i2) = match d2d_tx {
                Some((tx, p)) => (
                    p * self.ch.gain(Node::Ue(tx), Node::Relay(c.relay), rb),
                    p * self.ch.gain(Node::Ue(tx), Node::Enb, rb),
                ),
                None => (0.0, 0.0),
            };
            let s1 = c.p1[k] * self.ch.gain(Node::Ue(c.ue), Node::Relay(c.relay), rb) / (self.noise + i1);
            let s2 = c.p2[k] * self.ch.gain(Node::Relay(c.relay), Node::Enb, rb) / (self.noise + i2);
            rate += 0.5 * self.bw * s1.min(s2).ln_1p() / LN_2;
        }
        rate
    }

    /// Single-hop rate of a pair over the CUE's RBs. The CUE transmits in the
    /// first half of the slot and its relay in the second.
    fn d2d_rate(&self, c: &CueLink, tx: usize, rx: usize, power_w: f64) -> f64 {
        let per_rb = power_w / c.rbs.len() as f64;
        let mut rate = 0.0;
        for (k, &rb) in c.rbs.iter().enumerate() {
            let sig = per_rb * self.ch.gain(Node::Ue(tx), Node::Ue(rx), rb);
            let i1 = c.p1[k] * self.ch.gain(Node::Ue(c.ue), Node::Ue(rx), rb);
            let i2 = c.p2[k] * self.ch.gain(Node::Relay(c.relay), Node::Ue(rx), rb);
            let half1 = (sig / (self.noise + i1)).ln_1p();
            let half2 = (sig / (self.noise + i2)).ln_1p();
            rate += self.bw * 0.5 * (half1 + half2) / LN_2;
        }
        rate
    }
}

/// Smallest `p` in `[0, hi]` with `f(p) >= target` for non-decreasing `f`.
fn least_power(hi: f64, target: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    if f(hi) < target {
        return None;
    }
    let (mut lo, mut up) = (0.0, hi);
    for _ in 0..100 {
        let mid = 0.5 * (lo + up);
        if f(mid) >= target {
            up = mid;
        } else {
            lo = mid;
        }
    }
    Some(up)
}

/// Largest `p` in `[lo, hi]` with `f(p) >= target` for non-increasing `f`, given `f(lo) >= target`.
fn most_power(lo: f64, hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    if f(hi) >= target {
        return hi;
    }
    let (mut a, mut b) = (lo, hi);
    for _ in 0..100 {
        let mid = 0.5 * (a + b);
        if f(mid) >= target {
            a = mid;
        } else {
            b = mid;
        }
    }
    a
}

/// Direct D2D underlay: CUEs keep their relay-aided allocation, and each
/// pair may reuse the RBs of one CUE when both QoS targets survive.
pub fn solve_reference(
    topology: &NetworkTopology,
    realization: &ChannelRealization,
    config: &ScenarioConfig,
    opts: &SolverOptions,
) -> Result<ReferenceSolution> {
    let noise = config.ibar_over_noise * realization.sigma2_w + realization.sigma2_w;
    let env = Env {
        ch: realization,
        noise,
        bw: crate::propagation::RB_BANDWIDTH_HZ,
    };
    let mut cue_alloc = Vec::new();
    let mut cue_ids = Vec::new();
    let mut links: Vec<CueLink> = Vec::new();
    for l in 0..topology.num_relays() {
        let (full, users) = relay_problem(l, topology, realization, config);
        let rows: Vec<usize> = (0..users.len()).filter(|&i| !users[i].is_d2d()).collect();
        let ids: Vec<usize> = rows.iter().map(|&i| users[i].tx()).collect();
        if rows.is_empty() {
            cue_alloc.push(AllocationSolution::from_allocation(&full, vec![], vec![], vec![]));
            cue_ids.push(ids);
            continue;
        }
        let pick = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> { rows.iter().map(|&i| m[i].clone()).collect() };
        let problem = AllocationProblem {
            h1: pick(&full.h1),
            h2: pick(&full.h2),
            g1_ref: pick(&full.g1_ref),
            g2_ref: pick(&full.g2_ref),
            p_ue_max_w: rows.iter().map(|&i| full.p_ue_max_w[i]).collect(),
            qos_bps: rows.iter().map(|&i| full.qos_bps[i]).collect(),
            i_bar_w: pick(&full.i_bar_w),
            ..full.clone()
        };
        let sol = solve_nominal(&problem, opts)?.solution;
        for (row, &ue) in ids.iter().enumerate() {
            let rbs: Vec<usize> = (0..problem.num_rbs()).filter(|&rb| sol.x[row][rb] > 0.5).collect();
            links.push(CueLink {
                ue,
                relay: l,
                p1: rbs.iter().map(|&rb| sol.p1[row][rb]).collect(),
                p2: rbs.iter().map(|&rb| sol.p2[row][rb]).collect(),
                rbs,
            });
        }
        cue_alloc.push(sol);
        cue_ids.push(ids);
    }
    links.sort_by_key(|c| c.ue);

    let p_max = dbm_to_watts(config.p_ue_max_dbm);
    let mut taken = vec![None::<(usize, f64)>; links.len()];
    let mut d2d_direct = Vec::new();
    let pairs = topology
        .ues
        .iter()
        .filter(|u| u.kind == crate::topology::UeKind::D2dTx);
    for tx_rec in pairs {
        let tx = tx_rec.id;
        let rx = tx_rec.peer.expect("transmitter has a peer");
        let mut entry = DirectD2d {
            tx,
            rx,
            shared_cue: None,
            rb_set: Vec::new(),
            power_w: 0.0,
            rate_bps: 0.0,
            admitted: false,
        };
        for (k, c) in links.iter().enumerate() {
            if taken[k].is_some() || c.rbs.is_empty() {
                continue;
            }
            let Some(p_min) = least_power(p_max, config.qos_d2d_bps, |p| env.d2d_rate(c, tx, rx, p)) else {
                continue;
            };
            let cue_ok = |p: f64| env.cue_rate(c, Some((tx, p)));
            if cue_ok(p_min) < config.qos_cue_bps {
                continue;
            }
            let p = most_power(p_min, p_max, config.qos_cue_bps, cue_ok);
            taken[k] = Some((tx, p));
            entry.shared_cue = Some(c.ue);
            entry.rb_set = c.rbs.clone();
            entry.power_w = p;
            entry.rate_bps = env.d2d_rate(c, tx, rx, p);
            entry.admitted = true;
            break;
        }
        d2d_direct.push(entry);
    }

    let mut cue_rate_bps: Vec<Vec<f64>> = cue_ids.iter().map(|ids| vec![0.0; ids.len()]).collect();
    for (k, c) in links.iter().enumerate() {
        let row = cue_ids[c.relay].iter().position(|&u| u == c.ue).expect("known CUE");
        cue_rate_bps[c.relay][row] = env.cue_rate(c, taken[k]);
    }
    Ok(ReferenceSolution {
        cue_alloc,
        cue_ids,
        cue_rate_bps,
        d2d_direct,
    })
}

/// Relative gain of `r_prop` over `r_ref` in percent; `None` when `r_ref` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateGain {
    pub pct: f64,
    pub undefined: bool,
}

pub fn rate_gain(r_prop: f64, r_ref: f64) -> RateGain {
    if r_ref > 0.0 {
        RateGain {
            pct: (r_prop - r_ref) / r_ref * 100.0,
            undefined: false,
        }
    } else {
        RateGain {
            pct: f64::INFINITY,
            undefined: true,
        }
    }
}

pub const ORACLE_MAX_RBS: usize = 4;
pub const ORACLE_MAX_UES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub sum_rate: f64,
    pub solution: AllocationSolution,
    /// Some assignment met every QoS target.
    pub feasible: bool,
    pub assignments_checked: usize,
}

/// Exhaustive search over binary RB assignments with exact inner powers.
pub fn oracle_solve(problem: &AllocationProblem, protect: &impl ProtectionProvider) -> Result<OracleResult> {
    problem.validate()?;
    let u = problem.num_ues();
    let n = problem.num_rbs();
    if n > ORACLE_MAX_RBS || u > ORACLE_MAX_UES {
        return Err(Error::TooLarge(format!(
            "{u} UEs x {n} RBs exceeds {ORACLE_MAX_UES} x {ORACLE_MAX_RBS}"
        )));
    }
    let omega: Vec<Vec<f64>> = (0..u)
        .map(|ue| (0..n).map(|rb| problem.omega_floor(ue, rb, protect)).collect())
        .collect();
    let links: Vec<Vec<OracleLink>> = (0..u)
        .map(|ue| (0..n).map(|rb| OracleLink::new(problem, protect, &omega, ue, rb)).collect())
        .collect();

    let total = (u + 1).pow(n as u32);
    // (feasible, sum rate, x, s)
    type Best = (bool, f64, Vec<Vec<f64>>, Vec<Vec<f64>>);
    let mut best: Option<Best> = None;
    for code in 0..total {
        let mut owner = vec![None; n];
        let mut c = code;
        for o in owner.iter_mut() {
            let v = c % (u + 1);
            c /= u + 1;
            *o = (v > 0).then(|| v - 1);
        }
        let s = oracle_powers(problem, &links, &owner);
        let rates: Vec<f64> = (0..u)
            .map(|ue| (0..n).map(|rb| links[ue][rb].rate(s[ue][rb])).sum())
            .collect();
        let feasible = (0..u).all(|ue| rates[ue] >= problem.qos_bps[ue] * (1.0 - 1e-9));
        let value: f64 = rates.iter().sum();
        let better = match &best {
            None => true,
            Some((f, v, _, _)) => (feasible && !f) || (feasible == *f && value > *v),
        };
        if better {
            let mut x = vec![vec![0.0; n]; u];
            for (rb, o) in owner.iter().enumerate() {
                if let Some(ue) = o {
                    x[*ue][rb] = 1.0;
                }
            }
            best = Some((feasible, value, x, s));
        }
    }
    let (feasible, sum_rate, x, s) = best.expect("at least the empty assignment");
    let solution = AllocationSolution::from_allocation(problem, x, s, omega);
    Ok(OracleResult {
        sum_rate,
        solution,
        feasible,
        assignments_checked: total,
    })
}

#[derive(Debug, Clone, Copy)]
struct OracleLink {
    /// omega / h1: power below which nothing is poured.
    base: f64,
    ratio: f64,
    cap: f64,
    snr_per_w: f64,
    bw: f64,
}

impl OracleLink {
    fn new(problem: &AllocationProblem, protect: &impl ProtectionProvider, omega: &[Vec<f64>], ue: usize, rb: usize) -> Self {
        let r = problem.ratio(ue, rb);
        let mut alone = vec![0.0; problem.num_ues()];
        alone[ue] = 1.0;
        let a1 = problem.g1_ref[ue][rb] + protect.delta_gain_hop1(rb, &alone);
        let a2 = r * problem.g2_ref[ue][rb] + protect.delta_gain_hop2(rb, &alone);
        let lim = |th: f64, a: f64| if a > 0.0 { th / a } else { f64::INFINITY };
        OracleLink {
            base: omega[ue][rb] / problem.h1[ue][rb],
            ratio: r,
            cap: lim(problem.i_th1_w[rb], a1).min(lim(problem.i_th2_w[rb], a2)),
            snr_per_w: problem.h1[ue][rb] / omega[ue][rb],
            bw: problem.rb_bandwidth_hz,
        }
    }

    fn rate(&self, s: f64) -> f64 {
        0.5 * self.bw * (s * self.snr_per_w).ln_1p() / LN_2
    }

    /// Power at water level `level` when relay power costs `cost` per watt of relay power.
    fn pour(&self, level: f64, cost: f64) -> f64 {
        let eff = level / (1.0 + cost * self.ratio * level);
        (eff - self.base).clamp(0.0, self.cap)
    }
}

const LEVEL_REL_TOL: f64 = 1e-9;

/// Water level in `(0, inf)` where `used(level)` reaches `budget`; `used` is non-decreasing.
fn find_level(budget: f64, used: impl Fn(f64) -> f64) -> f64 {
    let mut hi = 1e-12;
    while used(hi) < budget {
        hi *= 2.0;
        if hi > 1e30 {
            return f64::INFINITY;
        }
    }
    let mut lo = hi / 2.0;
    if used(lo) >= budget {
        lo = 0.0;
    }
    while hi - lo > LEVEL_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if used(mid) < budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Sum-rate-optimal powers for a fixed assignment.
fn oracle_powers(problem: &AllocationProblem, links: &[Vec<OracleLink>], owner: &[Option<usize>]) -> Vec<Vec<f64>> {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let mine: Vec<Vec<usize>> = (0..u)
        .map(|ue| (0..n).filter(|&rb| owner[rb] == Some(ue)).collect())
        .collect();
    let fill = |cost: f64| -> Vec<Vec<f64>> {
        let mut s = vec![vec![0.0; n]; u];
        for ue in 0..u {
            if mine[ue].is_empty() {
                continue;
            }
            let used = |level: f64| mine[ue].iter().map(|&rb| links[ue][rb].pour(level, cost)).sum::<f64>();
            let level = find_level(problem.p_ue_max_w[ue], used);
            for &rb in &mine[ue] {
                s[ue][rb] = if level.is_finite() {
                    links[ue][rb].pour(level, cost)
                } else {
                    links[ue][rb].cap
                };
            }
        }
        s
    };
    let relay_use = |s: &Vec<Vec<f64>>| -> f64 {
        (0..u)
            .flat_map(|ue| (0..n).map(move |rb| (ue, rb)))
            .map(|(ue, rb)| links[ue][rb].ratio * s[ue][rb])
            .sum()
    };
    let free = fill(0.0);
    if relay_use(&free) <= problem.p_relay_max_w {
        return free;
    }
    // raise the relay price until the relay budget holds
    let mut hi = 1.0;
    while relay_use(&fill(hi)) > problem.p_relay_max_w {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > LEVEL_REL_TOL * hi {
        let mid = 0.5 * (lo + hi);
        if relay_use(&fill(mid)) > problem.p_relay_max_w {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    fill(hi)
}
