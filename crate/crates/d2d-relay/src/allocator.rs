//! Dual-decomposition RB and power allocation for one relay.
//!
//! Every iterate: candidate water-filling powers for each (UE, RB), RB
//! assignment by the largest indicator `chi`, exact power-coupling prices for
//! that assignment, then projected subgradient steps on all multipliers.
//! A short local search over RB handovers and swaps finishes the last iterate.

use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::{rate_on_rb, second_hop_power};

/// Floor applied to the water-filling denominator.
pub const DELTA_DENOM_FLOOR: f64 = 1e-12;

const BISECT_ITERS: usize = 200;
/// Moves re-planned exactly per local-search pass.
const POLISH_TRIALS: usize = 4;
/// Smallest relative sum-rate gain worth a local-search move.
const POLISH_MIN_GAIN: f64 = 1e-4;
/// Relative indicator margin a challenger needs per elapsed iteration.
const HYSTERESIS_PER_ITER: f64 = 1e-3;

/// Solver input for one relay. Per-user arrays are indexed `[ue][rb]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationProblem {
    /// UE -> relay gains.
    pub h1: Vec<Vec<f64>>,
    /// relay -> eNB (CUE) or relay -> D2D receiver gains.
    pub h2: Vec<Vec<f64>>,
    /// Reference cross gain towards the strongest first-hop victim.
    pub g1_ref: Vec<Vec<f64>>,
    /// Reference cross gain towards the strongest second-hop victim.
    pub g2_ref: Vec<Vec<f64>>,
    pub p_ue_max_w: Vec<f64>,
    pub p_relay_max_w: f64,
    pub i_th1_w: Vec<f64>,
    pub i_th2_w: Vec<f64>,
    pub qos_bps: Vec<f64>,
    pub sigma2_w: f64,
    /// Estimated interference.
    pub i_bar_w: Vec<Vec<f64>>,
    pub rb_bandwidth_hz: f64,
}

impl AllocationProblem {
    /// The same relay restricted to the listed UEs, in that order.
    pub fn select_ues(&self, ues: &[usize]) -> AllocationProblem {
        let rows = |m: &Vec<Vec<f64>>| ues.iter().map(|&i| m[i].clone()).collect();
        AllocationProblem {
            h1: rows(&self.h1),
            h2: rows(&self.h2),
            g1_ref: rows(&self.g1_ref),
            g2_ref: rows(&self.g2_ref),
            p_ue_max_w: ues.iter().map(|&i| self.p_ue_max_w[i]).collect(),
            qos_bps: ues.iter().map(|&i| self.qos_bps[i]).collect(),
            i_bar_w: rows(&self.i_bar_w),
            ..self.clone()
        }
    }

    pub fn num_ues(&self) -> usize {
        self.h1.len()
    }

    pub fn num_rbs(&self) -> usize {
        self.i_th1_w.len()
    }

    /// h1 / h2, the relay power spent per watt of UE power.
    pub fn ratio(&self, ue: usize, rb: usize) -> f64 {
        self.h1[ue][rb] / self.h2[ue][rb]
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.num_ues();
        let n = self.num_rbs();
        if n == 0 {
            return Err(Error::InvalidInput("no resource blocks".into()));
        }
        let shaped = |name: &str, m: &Vec<Vec<f64>>| -> Result<()> {
            if m.len() != u || m.iter().any(|row| row.len() != n) {
                return Err(Error::InvalidInput(format!("{name} must be {u}x{n}")));
            }
            Ok(())
        };
        shaped("h1", &self.h1)?;
        shaped("h2", &self.h2)?;
        shaped("g1_ref", &self.g1_ref)?;
        shaped("g2_ref", &self.g2_ref)?;
        shaped("i_bar_w", &self.i_bar_w)?;
        if self.p_ue_max_w.len() != u || self.qos_bps.len() != u || self.i_th2_w.len() != n {
            return Err(Error::InvalidInput("vector lengths disagree".into()));
        }
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !self.h1.iter().chain(&self.h2).flatten().all(|&g| pos(g)) {
            return Err(Error::InvalidInput("direct gains must be positive".into()));
        }
        if !self
            .g1_ref
            .iter()
            .chain(&self.g2_ref)
            .chain(&self.i_bar_w)
            .flatten()
            .all(|&g| g >= 0.0 && g.is_finite())
        {
            return Err(Error::InvalidInput(
                "reference gains and interference must be non-negative".into(),
            ));
        }
        if !self.p_ue_max_w.iter().all(|&p| pos(p)) || !pos(self.p_relay_max_w) {
            return Err(Error::InvalidInput("power budgets must be positive".into()));
        }
        if !self.i_th1_w.iter().chain(&self.i_th2_w).all(|&t| pos(t)) {
            return Err(Error::InvalidInput("thresholds must be positive".into()));
        }
        if !self.qos_bps.iter().all(|&q| q >= 0.0 && q.is_finite()) {
            return Err(Error::InvalidInput("QoS targets must be non-negative".into()));
        }
        if !pos(self.sigma2_w) || !pos(self.rb_bandwidth_hz) {
            return Err(Error::InvalidInput("noise and bandwidth must be positive".into()));
        }
        Ok(())
    }

    /// Lower bound of omega for one (UE, RB).
    pub fn omega_floor(&self, ue: usize, rb: usize, protect: &impl ProtectionProvider) -> f64 {
        self.i_bar_w[ue][rb] + protect.delta_interference(ue, rb) + self.sigma2_w
    }

    /// 0.5 B (1 + lambda) / ln 2
    fn weight(&self, lambda: f64) -> f64 {
        0.5 * self.rb_bandwidth_hz * (1.0 + lambda) / LN_2
    }
}

/// Protection margins added to the interference constraints. Every output is
/// non-negative; the nominal problem uses zero everywhere.
pub trait ProtectionProvider {
    /// Margin on the first-hop interference constraint of `rb`. `s[ue]` is the actual power of each UE on that RB.
    fn delta_gain_hop1(&self, rb: usize, s: &[f64]) -> f64;
    fn delta_gain_hop2(&self, rb: usize, s: &[f64]) -> f64;
    /// Margin added to the estimated interference of one (UE, RB).
    fn delta_interference(&self, ue: usize, rb: usize) -> f64;
    /// Per-UE linear coefficient multiplying `psi` next to the reference gain.
    fn delta_pow_coeff_hop1(&self, ue: usize, rb: usize) -> f64;
    /// Per-UE linear coefficient multiplying `phi * h1/h2` next to the reference gain.
    fn delta_pow_coeff_hop2(&self, ue: usize, rb: usize) -> f64;
    /// Called with the latest actual powers `[ue][rb]`.
    fn observe(&mut self, _s: &[Vec<f64>]) {}
}

/// Perfect channel knowledge.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalProvider;

impl ProtectionProvider for NominalProvider {
    fn delta_gain_hop1(&self, _rb: usize, _s: &[f64]) -> f64 {
        0.0
    }
    fn delta_gain_hop2(&self, _rb: usize, _s: &[f64]) -> f64 {
        0.0
    }
    fn delta_interference(&self, _ue: usize, _rb: usize) -> f64 {
        0.0
    }
    fn delta_pow_coeff_hop1(&self, _ue: usize, _rb: usize) -> f64 {
        0.0
    }
    fn delta_pow_coeff_hop2(&self, _ue: usize, _rb: usize) -> f64 {
        0.0
    }
}

impl<P: ProtectionProvider + ?Sized> ProtectionProvider for &mut P {
    fn delta_gain_hop1(&self, rb: usize, s: &[f64]) -> f64 {
        (**self).delta_gain_hop1(rb, s)
    }
    fn delta_gain_hop2(&self, rb: usize, s: &[f64]) -> f64 {
        (**self).delta_gain_hop2(rb, s)
    }
    fn delta_interference(&self, ue: usize, rb: usize) -> f64 {
        (**self).delta_interference(ue, rb)
    }
    fn delta_pow_coeff_hop1(&self, ue: usize, rb: usize) -> f64 {
        (**self).delta_pow_coeff_hop1(ue, rb)
    }
    fn delta_pow_coeff_hop2(&self, ue: usize, rb: usize) -> f64 {
        (**self).delta_pow_coeff_hop2(ue, rb)
    }
    fn observe(&mut self, s: &[Vec<f64>]) {
        (**self).observe(s)
    }
}

/// Lagrange multipliers plus the auxiliary omega.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualState {
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub nu: f64,
    pub psi: Vec<f64>,
    pub phi: Vec<f64>,
    pub lambda: Vec<f64>,
    pub varrho: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
}

impl DualState {
    /// All multipliers at `init`, omega at its nominal lower bound.
    pub fn new(problem: &AllocationProblem, init: f64) -> Self {
        let u = problem.num_ues();
        let n = problem.num_rbs();
        DualState {
            mu: vec![init; n],
            rho: vec![init; u],
            nu: init,
            psi: vec![init; n],
            phi: vec![init; n],
            lambda: vec![init; u],
            varrho: vec![vec![init; n]; u],
            omega: (0..u)
                .map(|ue| (0..n).map(|rb| problem.i_bar_w[ue][rb] + problem.sigma2_w).collect())
                .collect(),
        }
    }

    pub fn is_projected(&self) -> bool {
        self.mu
            .iter()
            .chain(&self.rho)
            .chain(&self.psi)
            .chain(&self.phi)
            .chain(&self.lambda)
            .chain(self.varrho.iter().flatten())
            .chain(std::iter::once(&self.nu))
            .all(|&v| v >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationSolution {
    pub x: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub omega: Vec<Vec<f64>>,
    pub p1: Vec<Vec<f64>>,
    pub p2: Vec<Vec<f64>>,
    pub rate: Vec<f64>,
    pub sum_rate: f64,
    pub converged: bool,
    pub iterations: usize,
    /// QoS could not be met, or lambda crossed the ceiling.
    pub infeasible: bool,
    /// Sum-rate after each iteration.
    pub history: Vec<f64>,
}

impl AllocationSolution {
    /// Fill in p1, p2 and the rates from x, S and omega.
    pub fn from_allocation(
        problem: &AllocationProblem,
        x: Vec<Vec<f64>>,
        s: Vec<Vec<f64>>,
        omega: Vec<Vec<f64>>,
    ) -> Self {
        let u = problem.num_ues();
        let n = problem.num_rbs();
        let mut p1 = vec![vec![0.0; n]; u];
        let mut p2 = vec![vec![0.0; n]; u];
        let mut rate = vec![0.0; u];
        for ue in 0..u {
            for rb in 0..n {
                if x[ue][rb] > 0.0 {
                    let p = s[ue][rb] / x[ue][rb];
                    let w = omega[ue][rb];
                    let g1 = problem.h1[ue][rb] / w;
                    let g2 = problem.h2[ue][rb] / w;
                    p1[ue][rb] = p;
                    p2[ue][rb] = second_hop_power(p, g1, g2).unwrap_or(0.0);
                    rate[ue] += x[ue][rb] * rate_on_rb(p, g1, problem.rb_bandwidth_hz);
                }
            }
        }
        let sum_rate = rate.iter().sum();
        AllocationSolution {
            x,
            s,
            omega,
            p1,
            p2,
            rate,
            sum_rate,
            converged: false,
            iterations: 0,
            infeasible: false,
            history: Vec::new(),
        }
    }

    pub fn owner(&self, rb: usize) -> Option<usize> {
        (0..self.x.len()).find(|&ue| self.x[ue][rb] > 0.5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SolverOptions {
    pub step_a: f64,
    pub t_max: usize,
    /// Relative sum-rate change that counts as converged.
    pub epsilon: f64,
    pub mult_init: f64,
    pub lambda_ceiling: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            step_a: 0.001,
            t_max: 500,
            epsilon: 1e-3,
            mult_init: 1e-3,
            lambda_ceiling: 1e6,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_a > 0.0) || self.t_max == 0 || !(self.epsilon > 0.0) {
            return Err(Error::Config("step-a, t-max and epsilon must be positive".into()));
        }
        if !(self.mult_init >= 0.0) || !(self.lambda_ceiling > 0.0) {
            return Err(Error::Config("mult-init must be >= 0 and lambda-ceiling > 0".into()));
        }
        Ok(())
    }
}

/// Water-filling power of one UE on one RB: `[delta - omega/h1]+`.
pub fn waterfill_power(
    ue: usize,
    rb: usize,
    dual: &DualState,
    problem: &AllocationProblem,
    protect: &impl ProtectionProvider,
) -> f64 {
    let r = problem.ratio(ue, rb);
    let den = dual.rho[ue]
        + dual.nu * r
        + dual.psi[rb] * (problem.g1_ref[ue][rb] + protect.delta_pow_coeff_hop1(ue, rb))
        + dual.phi[rb] * r * (problem.g2_ref[ue][rb] + protect.delta_pow_coeff_hop2(ue, rb));
    let delta = problem.weight(dual.lambda[ue]) / den.max(DELTA_DENOM_FLOOR);
    (delta - dual.omega[ue][rb] / problem.h1[ue][rb]).max(0.0)
}

/// RB indicator value for exclusive use (x = 1, S = P).
pub fn chi(lambda: f64, power: f64, h1: f64, omega: f64, rb_bandwidth_hz: f64) -> f64 {
    let z = power * h1 / omega;
    0.5 * (1.0 + lambda) * rb_bandwidth_hz * (z.ln_1p() - z / (1.0 + z)) / LN_2
}

/// Winner of one RB given candidate powers, or `None` when no UE qualifies.
pub fn rb_indicator(
    rb: usize,
    candidate_power: &[f64],
    dual: &DualState,
    problem: &AllocationProblem,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (ue, &p) in candidate_power.iter().enumerate() {
        if !(p > 0.0) {
            continue;
        }
        let c = chi(
            dual.lambda[ue],
            p,
            problem.h1[ue][rb],
            dual.omega[ue][rb],
            problem.rb_bandwidth_hz,
        );
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((ue, c));
        }
    }
    match best {
        Some((ue, c)) if dual.mu[rb] <= c => Some(ue),
        _ => None,
    }
}

/// Rate of each UE for time shares `x`, actual powers `s` and `omega`.
pub fn user_rates(problem: &AllocationProblem, x: &[Vec<f64>], s: &[Vec<f64>], omega: &[Vec<f64>]) -> Vec<f64> {
    (0..problem.num_ues())
        .map(|ue| {
            (0..problem.num_rbs())
                .filter(|&rb| x[ue][rb] > 0.0)
                .map(|rb| {
                    let z = s[ue][rb] * problem.h1[ue][rb] / (x[ue][rb] * omega[ue][rb]);
                    0.5 * x[ue][rb] * problem.rb_bandwidth_hz * z.ln_1p() / LN_2
                })
                .sum()
        })
        .collect()
}

fn column(s: &[Vec<f64>], rb: usize) -> Vec<f64> {
    s.iter().map(|row| row[rb]).collect()
}

/// Left-hand sides of the two interference constraints on `rb`.
pub fn interference_load(
    problem: &AllocationProblem,
    s: &[Vec<f64>],
    rb: usize,
    protect: &impl ProtectionProvider,
) -> (f64, f64) {
    let col = column(s, rb);
    let mut l1 = protect.delta_gain_hop1(rb, &col);
    let mut l2 = protect.delta_gain_hop2(rb, &col);
    for (ue, &v) in col.iter().enumerate() {
        l1 += v * problem.g1_ref[ue][rb];
        l2 += problem.ratio(ue, rb) * v * problem.g2_ref[ue][rb];
    }
    (l1, l2)
}

/// d L / d omega for one (UE, RB).
pub fn omega_gradient(
    problem: &AllocationProblem,
    lambda: f64,
    varrho: f64,
    x: f64,
    s: f64,
    h1: f64,
    omega: f64,
) -> f64 {
    let sh = s * h1;
    let gain = if x > 0.0 && sh > 0.0 {
        0.5 * problem.rb_bandwidth_hz * (lambda + 1.0) * x * sh / (omega * (x * omega + sh) * LN_2)
    } else {
        0.0
    };
    gain - varrho
}

/// One projected subgradient step on every multiplier, step `a / sqrt(t)`.
pub fn dual_update(
    dual: &DualState,
    problem: &AllocationProblem,
    solution: &AllocationSolution,
    protect: &impl ProtectionProvider,
    step_a: f64,
    t: usize,
) -> DualState {
    let step = step_a / (t.max(1) as f64).sqrt();
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let x = &solution.x;
    let s = &solution.s;
    let pos = |v: f64| v.max(0.0);
    let mut next = dual.clone();

    for rb in 0..n {
        let share: f64 = (0..u).map(|ue| x[ue][rb]).sum();
        next.mu[rb] = pos(dual.mu[rb] + step * (share - 1.0));
        let (l1, l2) = interference_load(problem, s, rb, protect);
        next.psi[rb] = pos(dual.psi[rb] + step * (l1 - problem.i_th1_w[rb]));
        next.phi[rb] = pos(dual.phi[rb] + step * (l2 - problem.i_th2_w[rb]));
    }
    let mut relay = 0.0;
    for ue in 0..u {
        let total: f64 = s[ue].iter().sum();
        next.rho[ue] = pos(dual.rho[ue] + step * (total - problem.p_ue_max_w[ue]));
        relay += (0..n).map(|rb| problem.ratio(ue, rb) * s[ue][rb]).sum::<f64>();
    }
    next.nu = pos(dual.nu + step * (relay - problem.p_relay_max_w));

    let rates = user_rates(problem, x, s, &dual.omega);
    for ue in 0..u {
        next.lambda[ue] = pos(dual.lambda[ue] + step * (problem.qos_bps[ue] - rates[ue]));
        for rb in 0..n {
            let floor = problem.omega_floor(ue, rb, protect);
            let w = dual.omega[ue][rb];
            next.varrho[ue][rb] = pos(dual.varrho[ue][rb] + step * (floor - w));
            let grad = omega_gradient(
                problem,
                dual.lambda[ue],
                dual.varrho[ue][rb],
                x[ue][rb],
                s[ue][rb],
                problem.h1[ue][rb],
                w,
            );
            next.omega[ue][rb] = (w - step * grad).max(floor);
        }
    }
    next
}

/// Largest power a UE may put on an RB it owns alone, from both
/// interference constraints, with the hop-1 and hop-2 slopes.
#[derive(Debug, Clone, Copy)]
struct RbCap {
    cap: f64,
    slope1: f64,
    slope2: f64,
    hop1_binds: bool,
}

fn rb_cap(problem: &AllocationProblem, protect: &impl ProtectionProvider, ue: usize, rb: usize) -> RbCap {
    let mut unit = vec![0.0; problem.num_ues()];
    unit[ue] = 1.0;
    // margins are positively homogeneous in S, so one probe gives the slope
    let slope1 = problem.g1_ref[ue][rb] + protect.delta_gain_hop1(rb, &unit);
    let slope2 = problem.ratio(ue, rb) * problem.g2_ref[ue][rb] + protect.delta_gain_hop2(rb, &unit);
    let cap1 = if slope1 > 0.0 { problem.i_th1_w[rb] / slope1 } else { f64::INFINITY };
    let cap2 = if slope2 > 0.0 { problem.i_th2_w[rb] / slope2 } else { f64::INFINITY };
    RbCap {
        cap: cap1.min(cap2),
        slope1,
        slope2,
        hop1_binds: cap1 <= cap2,
    }
}

/// Monotone bisection: smallest `x` in `[lo, hi]` with `f(x) <= target`, `f` non-increasing.
fn bisect_down(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..BISECT_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) <= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

struct Slot {
    rb: usize,
    level_floor: f64,
    ratio: f64,
    cap: RbCap,
}

/// Exact powers and power-coupling prices for a fixed binary assignment.
struct PowerPlan {
    s: Vec<Vec<f64>>,
    rho: Vec<f64>,
    nu: f64,
    psi: Vec<f64>,
    phi: Vec<f64>,
}

fn slot_power(w: f64, price: f64, slot: &Slot) -> f64 {
    if price <= 0.0 {
        return slot.cap.cap;
    }
    (w / price - slot.level_floor).clamp(0.0, slot.cap.cap)
}

fn user_power_for_nu(w: f64, budget: f64, nu: f64, slots: &[Slot]) -> (f64, f64) {
    let total = |rho: f64| slots.iter().map(|sl| slot_power(w, rho + nu * sl.ratio, sl)).sum::<f64>();
    if slots.is_empty() {
        return (0.0, 0.0);
    }
    let free = total(0.0);
    if free <= budget {
        return (0.0, free);
    }
    let hi = slots
        .iter()
        .map(|sl| w / sl.level_floor)
        .fold(0.0, f64::max);
    let rho = bisect_down(0.0, hi, budget, total);
    (rho, total(rho))
}

fn plan_powers(
    problem: &AllocationProblem,
    protect: &impl ProtectionProvider,
    owner: &[Option<usize>],
    lambda: &[f64],
    omega: &[Vec<f64>],
) -> PowerPlan {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let mut slots: Vec<Vec<Slot>> = (0..u).map(|_| Vec::new()).collect();
    for (rb, o) in owner.iter().enumerate() {
        if let Some(ue) = *o {
            slots[ue].push(Slot {
                rb,
                level_floor: omega[ue][rb] / problem.h1[ue][rb],
                ratio: problem.ratio(ue, rb),
                cap: rb_cap(problem, protect, ue, rb),
            });
        }
    }
    let weights: Vec<f64> = lambda.iter().map(|&l| problem.weight(l)).collect();
    let solve_users = |nu: f64| -> Vec<f64> {
        (0..u)
            .map(|ue| user_power_for_nu(weights[ue], problem.p_ue_max_w[ue], nu, &slots[ue]).0)
            .collect()
    };
    let relay_load = |nu: f64| -> f64 {
        let rho = solve_users(nu);
        (0..u)
            .map(|ue| {
                slots[ue]
                    .iter()
                    .map(|sl| sl.ratio * slot_power(weights[ue], rho[ue] + nu * sl.ratio, sl))
                    .sum::<f64>()
            })
            .sum()
    };
    let nu = if relay_load(0.0) <= problem.p_relay_max_w {
        0.0
    } else {
        let hi = (0..u)
            .flat_map(|ue| slots[ue].iter().map(move |sl| (ue, sl)))
            .map(|(ue, sl)| weights[ue] / (sl.ratio * sl.level_floor))
            .fold(0.0, f64::max);
        bisect_down(0.0, hi, problem.p_relay_max_w, relay_load)
    };
    let rho = solve_users(nu);

    let mut s = vec![vec![0.0; n]; u];
    let mut psi = vec![0.0; n];
    let mut phi = vec![0.0; n];
    for ue in 0..u {
        for sl in &slots[ue] {
            let price = rho[ue] + nu * sl.ratio;
            let p = slot_power(weights[ue], price, sl);
            s[ue][sl.rb] = p;
            let uncapped = if price > 0.0 { weights[ue] / price - sl.level_floor } else { f64::INFINITY };
            if uncapped > sl.cap.cap {
                // the cap holds the power down: price the binding constraint
                let extra = (weights[ue] / (sl.cap.cap + sl.level_floor) - price).max(0.0);
                if sl.cap.hop1_binds {
                    psi[sl.rb] = extra / sl.cap.slope1;
                } else {
                    phi[sl.rb] = extra / sl.cap.slope2;
                }
            }
        }
    }
    PowerPlan { s, rho, nu, psi, phi }
}

fn binary_x(owner: &[Option<usize>], u: usize) -> Vec<Vec<f64>> {
    let mut x = vec![vec![0.0; owner.len()]; u];
    for (rb, o) in owner.iter().enumerate() {
        if let Some(ue) = *o {
            x[ue][rb] = 1.0;
        }
    }
    x
}

/// Copy the exact power prices of `plan` into `dual` and balance varrho.
fn price_plan(
    dual: &mut DualState,
    problem: &AllocationProblem,
    owner: &[Option<usize>],
    x: &[Vec<f64>],
    plan: &PowerPlan,
    omega: &[Vec<f64>],
) {
    dual.rho.clone_from(&plan.rho);
    dual.nu = plan.nu;
    dual.psi.clone_from(&plan.psi);
    dual.phi.clone_from(&plan.phi);
    dual.omega = omega.to_vec();
    for ue in 0..problem.num_ues() {
        for rb in 0..problem.num_rbs() {
            let g = omega_gradient(problem, dual.lambda[ue], 0.0, x[ue][rb], plan.s[ue][rb], problem.h1[ue][rb], omega[ue][rb]);
            dual.varrho[ue][rb] = g.max(0.0);
        }
    }
    for (rb, o) in owner.iter().enumerate() {
        if o.is_none() {
            dual.mu[rb] = 0.0;
        }
    }
}

/// Relative shortfall of one UE against its rate target.
fn short_of(problem: &AllocationProblem, ue: usize, rate: f64) -> f64 {
    let q = problem.qos_bps[ue];
    if q > 0.0 {
        ((q * (1.0 - 1e-9) - rate) / q).max(0.0)
    } else {
        0.0
    }
}

fn qos_shortfall(problem: &AllocationProblem, rate: &[f64]) -> f64 {
    rate.iter().enumerate().map(|(ue, &r)| short_of(problem, ue, r)).sum()
}

#[derive(Clone, Copy)]
enum Move {
    Handover(usize),
    Swap(usize),
}

/// Local search on the final assignment over handovers of one RB and swaps of
/// two. Every move is first scored to first order at the current prices, the
/// few best are re-planned exactly, and one is kept if it cuts the rate-target
/// shortfall, or keeps it at zero and raises the sum-rate.
fn polish(
    problem: &AllocationProblem,
    protect: &impl ProtectionProvider,
    caps: &[Vec<RbCap>],
    mut owner: Vec<Option<usize>>,
    mut plan: PowerPlan,
    lambda: &[f64],
    omega: &[Vec<f64>],
) -> Option<(Vec<Option<usize>>, PowerPlan)> {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let weights: Vec<f64> = lambda.iter().map(|&l| problem.weight(l)).collect();
    let nats = 0.5 * problem.rb_bandwidth_hz / LN_2;
    let exact = |owner: &[Option<usize>]| {
        let plan = plan_powers(problem, protect, owner, lambda, omega);
        let rate = user_rates(problem, &binary_x(owner, u), &plan.s, omega);
        ((qos_shortfall(problem, &rate), rate.iter().sum::<f64>()), plan)
    };
    let better = |a: (f64, f64), b: (f64, f64)| {
        if a.0 < b.0 - 1e-12 {
            true
        } else {
            a.0 <= b.0 && a.1 > b.1 * (1.0 + POLISH_MIN_GAIN)
        }
    };
    let mut key = {
        let rate = user_rates(problem, &binary_x(&owner, u), &plan.s, omega);
        (qos_shortfall(problem, &rate), rate.iter().sum::<f64>())
    };
    let mut moved = false;
    // every accepted move strictly improves, the cap only bounds the work
    for _ in 0..u * n {
        let floor = |ue: usize, rb: usize| omega[ue][rb] / problem.h1[ue][rb];
        let rates = user_rates(problem, &binary_x(&owner, u), &plan.s, omega);
        let spare: Vec<f64> = (0..u)
            .map(|ue| (problem.p_ue_max_w[ue] - plan.s[ue].iter().sum::<f64>()).max(0.0))
            .collect();
        // rate change when `ue` drops `rb`, net of what the freed power buys elsewhere
        let lose = |ue: usize, rb: usize| {
            let p = plan.s[ue][rb];
            let price = plan.rho[ue] + plan.nu * problem.ratio(ue, rb);
            nats * ((p / floor(ue, rb)).ln_1p() - price / weights[ue] * p)
        };
        // rate change when `ue` takes `rb` at its current water level
        let gain = |ue: usize, rb: usize| {
            let price = plan.rho[ue] + plan.nu * problem.ratio(ue, rb);
            let slot = Slot {
                rb,
                level_floor: floor(ue, rb),
                ratio: problem.ratio(ue, rb),
                cap: caps[ue][rb],
            };
            let mut p = slot_power(weights[ue], price, &slot);
            if plan.rho[ue] <= 0.0 {
                p = p.min(spare[ue]);
            }
            nats * ((p / slot.level_floor).ln_1p() - price / weights[ue] * p)
        };
        // one table per pass keeps each candidate move O(1)
        let delta: Vec<Vec<f64>> = (0..u)
            .map(|ue| {
                (0..n)
                    .map(|rb| if owner[rb] == Some(ue) { -lose(ue, rb) } else { gain(ue, rb) })
                    .collect()
            })
            .collect();
        let base = (qos_shortfall(problem, &rates), rates.iter().sum::<f64>());
        let estimate = |changes: &[(usize, f64)]| {
            let (mut short, mut sum) = base;
            for &(ue, d) in changes {
                let r = (rates[ue] + d).max(0.0);
                short += short_of(problem, ue, r) - short_of(problem, ue, rates[ue]);
                sum += r - rates[ue];
            }
            (short.max(0.0), sum)
        };
        let mut moves: Vec<((f64, f64), usize, Move)> = Vec::new();
        for rb in 0..n {
            for ue in 0..u {
                if owner[rb] != Some(ue) {
                    let g = (ue, delta[ue][rb]);
                    let est = match owner[rb] {
                        Some(v) => estimate(&[g, (v, delta[v][rb])]),
                        None => estimate(&[g]),
                    };
                    if better(est, key) {
                        moves.push((est, rb, Move::Handover(ue)));
                    }
                }
            }
            for other in rb + 1..n {
                if let (Some(a), Some(b)) = (owner[rb], owner[other]) {
                    if a != b {
                        let est = estimate(&[
                            (a, delta[a][other] + delta[a][rb]),
                            (b, delta[b][rb] + delta[b][other]),
                        ]);
                        if better(est, key) {
                            moves.push((est, rb, Move::Swap(other)));
                        }
                    }
                }
            }
        }
        moves.sort_by(|x, y| x.0 .0.total_cmp(&y.0 .0).then(y.0 .1.total_cmp(&x.0 .1)));
        let mut accepted = false;
        for (_, rb, m) in moves.into_iter().take(POLISH_TRIALS) {
            let mut o = owner.clone();
            match m {
                Move::Handover(ue) => o[rb] = Some(ue),
                Move::Swap(other) => o.swap(rb, other),
            }
            let (k, p) = exact(&o);
            if better(k, key) {
                (key, plan, owner, moved, accepted) = (k, p, o, true, true);
                break;
            }
        }
        if !accepted {
            break;
        }
    }
    moved.then_some((owner, plan))
}

/// Give every UE with a rate target at least one RB, taking it where the
/// indicator loses least and never leaving the previous owner empty.
fn ensure_every_user_served(
    owner: &mut [Option<usize>],
    chis: &[Vec<f64>],
    problem: &AllocationProblem,
) {
    let u = problem.num_ues();
    let mut count = vec![0usize; u];
    for o in owner.iter().flatten() {
        count[*o] += 1;
    }
    for w in 0..u {
        if count[w] > 0 || problem.qos_bps[w] <= 0.0 {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (rb, o) in owner.iter().enumerate() {
            let incumbent = match *o {
                None => 0.0,
                Some(v) if count[v] >= 2 => chis[v][rb],
                Some(_) => continue,
            };
            let loss = incumbent - chis[w][rb];
            if best.is_none_or(|(_, b)| loss < b) {
                best = Some((rb, loss));
            }
        }
        if let Some((rb, _)) = best {
            if let Some(v) = owner[rb] {
                count[v] -= 1;
            }
            owner[rb] = Some(w);
            count[w] += 1;
        }
    }
}

/// Output of [`solve`]: the allocation and the multipliers it is stationary for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solved {
    pub solution: AllocationSolution,
    pub dual: DualState,
}

/// Run the iteration for one relay.
pub fn solve<P: ProtectionProvider>(
    problem: &AllocationProblem,
    mut protect: P,
    opts: &SolverOptions,
) -> Result<Solved> {
    problem.validate()?;
    opts.validate()?;
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let floors: Vec<Vec<f64>> = (0..u)
        .map(|ue| (0..n).map(|rb| problem.omega_floor(ue, rb, &protect)).collect())
        .collect();
    let caps: Vec<Vec<RbCap>> = (0..u)
        .map(|ue| (0..n).map(|rb| rb_cap(problem, &protect, ue, rb)).collect())
        .collect();

    let s0: Vec<Vec<f64>> = (0..u)
        .map(|ue| vec![problem.p_ue_max_w[ue] / n as f64; n])
        .collect();
    protect.observe(&s0);

    let mut dual = DualState::new(problem, opts.mult_init);
    // running means of the exact power prices, used to pick candidates
    let mut mean_rho = dual.rho.clone();
    let mut mean_nu = dual.nu;
    let mut prev_owner: Vec<Option<usize>> = vec![None; n];
    let mut mean_lambda = dual.lambda.clone();
    let mut history = Vec::new();
    let mut last: Option<Solved> = None;
    let mut converged = false;
    let mut lambda_blown = false;

    for t in 1..=opts.t_max {
        let keep = (t - 1) as f64 / t as f64;
        // candidate prices: a UE cannot spend more than its budget on one RB
        if t >= 2 {
            // the starting value is left out of the mean
            let k = (t - 1) as f64;
            for (m, l) in mean_lambda.iter_mut().zip(&dual.lambda) {
                *m = if t == 2 { *l } else { ((k - 1.0) * *m + l) / k };
            }
        }
        let mut cand = dual.clone();
        cand.nu = mean_nu;
        cand.lambda.clone_from(&mean_lambda);
        cand.omega.clone_from(&floors);
        cand.psi.iter_mut().for_each(|v| *v = 0.0);
        cand.phi.iter_mut().for_each(|v| *v = 0.0);
        for ue in 0..u {
            let w = problem.weight(cand.lambda[ue]);
            let best_floor = (0..n)
                .map(|rb| floors[ue][rb] / problem.h1[ue][rb])
                .fold(f64::INFINITY, f64::min);
            cand.rho[ue] = mean_rho[ue].max(w / (problem.p_ue_max_w[ue] + best_floor));
        }
        let mut power = vec![vec![0.0; n]; u];
        let mut chis = vec![vec![0.0; n]; u];
        for ue in 0..u {
            for rb in 0..n {
                let p = waterfill_power(ue, rb, &cand, problem, &protect).min(caps[ue][rb].cap);
                power[ue][rb] = p;
                chis[ue][rb] = chi(
                    cand.lambda[ue],
                    p,
                    problem.h1[ue][rb],
                    floors[ue][rb],
                    problem.rb_bandwidth_hz,
                );
            }
        }
        let mut owner: Vec<Option<usize>> = (0..n)
            .map(|rb| {
                let col = column(&power, rb);
                rb_indicator(rb, &col, &cand, problem)
            })
            .collect();
        // an incumbent keeps its RB unless beaten by a margin that widens over time
        let margin = 1.0 + HYSTERESIS_PER_ITER * (t - 1) as f64;
        for rb in 0..n {
            if let (Some(new), Some(old)) = (owner[rb], prev_owner[rb]) {
                if new != old && power[old][rb] > 0.0 && chis[new][rb] < margin * chis[old][rb] {
                    owner[rb] = Some(old);
                }
            }
        }
        ensure_every_user_served(&mut owner, &chis, problem);
        prev_owner.clone_from(&owner);

        // omega sits on its floor and varrho balances its gradient there
        let omega = floors.clone();
        let plan = plan_powers(problem, &protect, &owner, &mean_lambda, &omega);
        let x = binary_x(&owner, u);
        let mut used = dual.clone();
        used.lambda.clone_from(&mean_lambda);
        for (m, r) in mean_rho.iter_mut().zip(&plan.rho) {
            *m = keep * *m + r / t as f64;
        }
        mean_nu = keep * mean_nu + plan.nu / t as f64;
        price_plan(&mut used, problem, &owner, &x, &plan, &omega);
        protect.observe(&plan.s);

        let mut solution = AllocationSolution::from_allocation(problem, x, plan.s, omega);
        history.push(solution.sum_rate);
        solution.iterations = t;

        let mut from = used.clone();
        from.lambda.clone_from(&dual.lambda);
        let next = dual_update(&from, problem, &solution, &protect, opts.step_a, t);
        let qos_met = (0..u).all(|ue| solution.rate[ue] >= problem.qos_bps[ue] * (1.0 - 1e-9));
        let done = match last.as_ref() {
            Some(prev) if qos_met => {
                let r = solution.sum_rate;
                (r - prev.solution.sum_rate).abs() <= opts.epsilon * r.abs().max(f64::MIN_POSITIVE)
            }
            _ => false,
        };
        last = Some(Solved { solution, dual: used });
        if next.lambda.iter().any(|&l| l > opts.lambda_ceiling) {
            lambda_blown = true;
            break;
        }
        if done {
            converged = true;
            break;
        }
        dual = next;
    }

    let mut out = last.expect("at least one iteration");
    if !lambda_blown {
        let owner: Vec<Option<usize>> = (0..n).map(|rb| out.solution.owner(rb)).collect();
        let plan = PowerPlan {
            s: out.solution.s.clone(),
            rho: out.dual.rho.clone(),
            nu: out.dual.nu,
            psi: out.dual.psi.clone(),
            phi: out.dual.phi.clone(),
        };
        if let Some((owner, plan)) = polish(problem, &protect, &caps, owner, plan, &out.dual.lambda, &floors) {
            let x = binary_x(&owner, u);
            price_plan(&mut out.dual, problem, &owner, &x, &plan, &floors);
            let iterations = out.solution.iterations;
            out.solution = AllocationSolution::from_allocation(problem, x, plan.s, floors.clone());
            out.solution.iterations = iterations;
        }
    }
    out.solution.history = history;
    out.solution.converged = converged;
    let qos_short = (0..u).any(|ue| out.solution.rate[ue] < problem.qos_bps[ue] * (1.0 - 1e-9));
    out.solution.infeasible = lambda_blown || qos_short;
    Ok(out)
}

/// The unprotected solver.
pub fn solve_nominal(problem: &AllocationProblem, opts: &SolverOptions) -> Result<Solved> {
    solve(problem, NominalProvider, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktViolation {
    pub check: String,
    pub index: Vec<usize>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct KktReport {
    pub max_primal: f64,
    pub max_slackness: f64,
    pub max_stationarity: f64,
    pub violations: Vec<KktViolation>,
}

impl KktReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Primal feasibility, complementary slackness and power / omega stationarity.
/// Feasibility is relative to each right-hand side; slackness products are
/// relative to the sum-rate; stationarity is relative to the power itself.
pub fn verify_kkt<P: ProtectionProvider>(
    problem: &AllocationProblem,
    solution: &AllocationSolution,
    dual: &DualState,
    mut protect: P,
    tol: f64,
) -> KktReport {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let x = &solution.x;
    let s = &solution.s;
    protect.observe(s);
    let scale = solution.sum_rate.abs().max(1.0);
    let mut rep = KktReport::default();
    let note = |rep: &mut KktReport, kind: u8, check: &str, index: Vec<usize>, residual: f64| {
        let slot = match kind {
            0 => &mut rep.max_primal,
            1 => &mut rep.max_slackness,
            _ => &mut rep.max_stationarity,
        };
        *slot = slot.max(residual);
        if !(residual <= tol) {
            rep.violations.push(KktViolation {
                check: check.to_string(),
                index,
                residual,
            });
        }
    };

    let rates = user_rates(problem, x, s, &solution.omega);
    let mut relay = 0.0;
    for ue in 0..u {
        let total: f64 = s[ue].iter().sum();
        let pmax = problem.p_ue_max_w[ue];
        note(&mut rep, 0, "ue-power", vec![ue], ((total - pmax) / pmax).max(0.0));
        note(&mut rep, 1, "ue-power", vec![ue], (dual.rho[ue] * (total - pmax)).abs() / scale);
        let q = problem.qos_bps[ue];
        let short = if q > 0.0 { ((q - rates[ue]) / q).max(0.0) } else { 0.0 };
        note(&mut rep, 0, "qos", vec![ue], short);
        note(&mut rep, 1, "qos", vec![ue], (dual.lambda[ue] * (q - rates[ue])).abs() / scale);
        for rb in 0..n {
            relay += problem.ratio(ue, rb) * s[ue][rb];
            if s[ue][rb] < 0.0 || !(0.0..=1.0).contains(&x[ue][rb]) {
                note(&mut rep, 0, "bounds", vec![ue, rb], 1.0);
            }
            let floor = problem.omega_floor(ue, rb, &protect);
            let w = solution.omega[ue][rb];
            note(&mut rep, 0, "omega-floor", vec![ue, rb], ((floor - w) / floor).max(0.0));
            note(&mut rep, 1, "omega-floor", vec![ue, rb], (dual.varrho[ue][rb] * (w - floor)).abs() / scale);
            let grad = omega_gradient(problem, dual.lambda[ue], dual.varrho[ue][rb], x[ue][rb], s[ue][rb], problem.h1[ue][rb], w);
            let mag = (grad + dual.varrho[ue][rb]).abs().max(dual.varrho[ue][rb]);
            if mag > 0.0 {
                note(&mut rep, 2, "omega", vec![ue, rb], grad.abs() / mag);
            }
            if x[ue][rb] > 0.0 {
                let p = s[ue][rb] / x[ue][rb];
                let mut at = dual.clone();
                at.omega[ue][rb] = w;
                let wf = waterfill_power(ue, rb, &at, problem, &protect);
                let denom = p.max(wf).max(f64::MIN_POSITIVE);
                note(&mut rep, 2, "power", vec![ue, rb], (p - wf).abs() / denom);
            }
        }
    }
    let pr = problem.p_relay_max_w;
    note(&mut rep, 0, "relay-power", vec![], ((relay - pr) / pr).max(0.0));
    note(&mut rep, 1, "relay-power", vec![], (dual.nu * (relay - pr)).abs() / scale);
    for rb in 0..n {
        let share: f64 = (0..u).map(|ue| x[ue][rb]).sum();
        note(&mut rep, 0, "rb-share", vec![rb], (share - 1.0).max(0.0));
        note(&mut rep, 1, "rb-share", vec![rb], (dual.mu[rb] * (share - 1.0)).abs() / scale);
        let (l1, l2) = interference_load(problem, s, rb, &protect);
        let (t1, t2) = (problem.i_th1_w[rb], problem.i_th2_w[rb]);
        note(&mut rep, 0, "interference-hop1", vec![rb], ((l1 - t1) / t1).max(0.0));
        note(&mut rep, 0, "interference-hop2", vec![rb], ((l2 - t2) / t2).max(0.0));
        note(&mut rep, 1, "interference-hop1", vec![rb], (dual.psi[rb] * (l1 - t1)).abs() / scale);
        note(&mut rep, 1, "interference-hop2", vec![rb], (dual.phi[rb] * (l2 - t2)).abs() / scale);
    }
    rep
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    pub(crate) fn one_by_one(h: f64, pmax: f64) -> AllocationProblem {
        AllocationProblem {
            h1: vec![vec![h]],
            h2: vec![vec![h]],
            g1_ref: vec![vec![0.0]],
            g2_ref: vec![vec![0.0]],
            p_ue_max_w: vec![pmax],
            p_relay_max_w: 1e9,
            i_th1_w: vec![1.0],
            i_th2_w: vec![1.0],
            qos_bps: vec![0.0],
            sigma2_w: 1e-15,
            i_bar_w: vec![vec![0.0]],
            rb_bandwidth_hz: 180e3,
        }
    }
}
