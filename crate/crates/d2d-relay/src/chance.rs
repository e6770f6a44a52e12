//! Chance-constrained protection via Bernstein approximation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationProblem, DualState, ProtectionProvider};
use crate::error::{Error, Result};
use crate::robustness::{margin_cost, protection_interference, ProtectionDeltas, UncertaintyModel};

/// Family the normalized gain error is assumed to belong to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionFamily {
    BoundedSupport,
    UnimodalBounded,
    #[default]
    UnimodalSymmetric,
}

impl FromStr for DistributionFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bounded-support" => Ok(DistributionFamily::BoundedSupport),
            "unimodal-bounded" => Ok(DistributionFamily::UnimodalBounded),
            "unimodal-symmetric" => Ok(DistributionFamily::UnimodalSymmetric),
            other => Err(Error::Config(format!("unknown distribution family '{other}'"))),
        }
    }
}

impl fmt::Display for DistributionFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DistributionFamily::BoundedSupport => "bounded-support",
            DistributionFamily::UnimodalBounded => "unimodal-bounded",
            DistributionFamily::UnimodalSymmetric => "unimodal-symmetric",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BernsteinParams {
    pub eta_plus: f64,
    pub tau: f64,
    pub family: DistributionFamily,
}

pub fn table3_params(family: DistributionFamily) -> BernsteinParams {
    let (eta_plus, tau) = match family {
        DistributionFamily::BoundedSupport => (1.0, 0.0),
        DistributionFamily::UnimodalBounded => (0.5, 1.0 / 12f64.sqrt()),
        DistributionFamily::UnimodalSymmetric => (0.0, 1.0 / 3f64.sqrt()),
    };
    BernsteinParams {
        eta_plus,
        tau,
        family,
    }
}

/// Violation probabilities and error half-widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffConfig {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub g_hat1: Vec<Vec<f64>>,
    pub g_hat2: Vec<Vec<f64>>,
}

impl TradeoffConfig {
    /// Half-widths as a fraction of the reference gains of `problem`.
    pub fn from_fraction(problem: &AllocationProblem, theta1: Vec<f64>, theta2: Vec<f64>, fraction: f64) -> Self {
        let scale = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.iter().map(|r| r.iter().map(|g| g * fraction).collect()).collect()
        };
        TradeoffConfig {
            theta1,
            theta2,
            g_hat1: scale(&problem.g1_ref),
            g_hat2: scale(&problem.g2_ref),
        }
    }

    pub fn validate(&self, num_ues: usize, num_rbs: usize) -> Result<()> {
        if self.theta1.len() != num_rbs
            || self.theta2.len() != num_rbs
            || self.g_hat1.len() != num_ues
            || self.g_hat2.len() != num_ues
            || self.g_hat1.iter().chain(&self.g_hat2).any(|r| r.len() != num_rbs)
        {
            return Err(Error::Config("tradeoff config dimensions disagree".into()));
        }
        for &t in self.theta1.iter().chain(&self.theta2) {
            check_theta(t)?;
        }
        if !self.g_hat1.iter().chain(&self.g_hat2).flatten().all(|&g| g >= 0.0 && g.is_finite()) {
            return Err(Error::Config("error half-widths must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_theta(theta: f64) -> Result<()> {
    if theta > 0.0 && theta < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("violation probability {theta} outside (0, 1)")))
    }
}

fn kappa(theta: f64) -> f64 {
    (2.0 * (1.0 / theta).ln()).sqrt()
}

/// `y[ue]` is the scaled error term of each UE: S * ghat (times h1/h2 on hop 2).
fn bernstein(y: &[f64], theta: f64, params: &[BernsteinParams]) -> Result<f64> {
    check_theta(theta)?;
    let linear: f64 = y.iter().zip(params).map(|(v, p)| p.eta_plus * v).sum();
    let spread: f64 = y.iter().zip(params).map(|(v, p)| (p.tau * v).powi(2)).sum();
    Ok(linear + kappa(theta) * spread.sqrt())
}

pub fn bernstein_protection_hop1(s: &[f64], ghat: &[f64], theta: f64, params: &[BernsteinParams]) -> Result<f64> {
    let y: Vec<f64> = s.iter().zip(ghat).map(|(a, b)| a * b).collect();
    bernstein(&y, theta, params)
}

pub fn bernstein_protection_hop2(
    s: &[f64],
    ghat: &[f64],
    theta: f64,
    params: &[BernsteinParams],
    ratios: &[f64],
) -> Result<f64> {
    let y: Vec<f64> = s.iter().zip(ghat).zip(ratios).map(|((a, b), r)| a * b * r).collect();
    bernstein(&y, theta, params)
}

/// Derivative of the margin with respect to each `y[ue]`. At `y = 0` the
/// square-root term is replaced by its value along each axis.
fn bernstein_slope(y: &[f64], theta: f64, params: &[BernsteinParams]) -> Vec<f64> {
    let k = kappa(theta);
    let norm: f64 = y
        .iter()
        .zip(params)
        .map(|(v, p)| (p.tau * v).powi(2))
        .sum::<f64>()
        .sqrt();
    y.iter()
        .zip(params)
        .map(|(v, p)| {
            let spread = if norm > 0.0 { p.tau * p.tau * v / norm } else { p.tau };
            p.eta_plus + k * spread
        })
        .collect()
}

/// Provider using Bernstein margins on both hops and the worst-case
/// interference margin of `model`.
#[derive(Debug, Clone)]
pub struct ChanceProvider {
    tradeoff: TradeoffConfig,
    params: Vec<BernsteinParams>,
    model: UncertaintyModel,
    /// `[rb][ue]`
    ghat1: Vec<Vec<f64>>,
    ghat2: Vec<Vec<f64>>,
    ratio: Vec<Vec<f64>>,
    i_bar: Vec<Vec<f64>>,
    /// `[ue][rb]` slopes at the last observed powers.
    coeff1: Vec<Vec<f64>>,
    coeff2: Vec<Vec<f64>>,
}

pub fn chance_provider(
    tradeoff: &TradeoffConfig,
    params: &[BernsteinParams],
    model: &UncertaintyModel,
    problem: &AllocationProblem,
) -> Result<ChanceProvider> {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    tradeoff.validate(u, n)?;
    model.validate()?;
    if params.len() != u || model.num_ues() != u || model.num_rbs() != n {
        return Err(Error::Config("chance provider dimensions disagree".into()));
    }
    let by_rb = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n).map(|rb| (0..u).map(|ue| m[ue][rb]).collect()).collect()
    };
    let mut out = ChanceProvider {
        tradeoff: tradeoff.clone(),
        params: params.to_vec(),
        model: model.clone(),
        ghat1: by_rb(&tradeoff.g_hat1),
        ghat2: by_rb(&tradeoff.g_hat2),
        ratio: (0..n)
            .map(|rb| (0..u).map(|ue| problem.ratio(ue, rb)).collect())
            .collect(),
        i_bar: problem.i_bar_w.clone(),
        coeff1: vec![vec![0.0; n]; u],
        coeff2: vec![vec![0.0; n]; u],
    };
    out.observe(&vec![vec![0.0; n]; u]);
    Ok(out)
}

impl ChanceProvider {
    fn y1(&self, rb: usize, s: &[f64]) -> Vec<f64> {
        s.iter().zip(&self.ghat1[rb]).map(|(a, b)| a * b).collect()
    }

    fn y2(&self, rb: usize, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.ghat2[rb])
            .zip(&self.ratio[rb])
            .map(|((a, b), r)| a * b * r)
            .collect()
    }
}

impl ProtectionProvider for ChanceProvider {
    fn delta_gain_hop1(&self, rb: usize, s: &[f64]) -> f64 {
        bernstein(&self.y1(rb, s), self.tradeoff.theta1[rb], &self.params).expect("validated theta")
    }
    fn delta_gain_hop2(&self, rb: usize, s: &[f64]) -> f64 {
        bernstein(&self.y2(rb, s), self.tradeoff.theta2[rb], &self.params).expect("validated theta")
    }
    fn delta_interference(&self, ue: usize, rb: usize) -> f64 {
        protection_interference(ue, rb, &self.model, self.i_bar[ue][rb])
    }
    fn delta_pow_coeff_hop1(&self, ue: usize, rb: usize) -> f64 {
        self.coeff1[ue][rb]
    }
    fn delta_pow_coeff_hop2(&self, ue: usize, rb: usize) -> f64 {
        self.coeff2[ue][rb]
    }
    fn observe(&mut self, s: &[Vec<f64>]) {
        let u = self.params.len();
        for rb in 0..self.ghat1.len() {
            let col: Vec<f64> = (0..u).map(|ue| s[ue][rb]).collect();
            let d1 = bernstein_slope(&self.y1(rb, &col), self.tradeoff.theta1[rb], &self.params);
            let d2 = bernstein_slope(&self.y2(rb, &col), self.tradeoff.theta2[rb], &self.params);
            for ue in 0..u {
                // chain rule back to S; the hop-2 ratio is applied by the caller
                self.coeff1[ue][rb] = d1[ue] * self.ghat1[rb][ue];
                self.coeff2[ue][rb] = d2[ue] * self.ghat2[rb][ue];
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Hop {
    First,
    Second,
}

/// Rate of change of the first-order robustness cost with the violation
/// probability of one constraint. `ratios` is required for the second hop.
pub fn sensitivity_theta(
    hop: Hop,
    s: &[f64],
    ghat: &[f64],
    theta: f64,
    params: &[BernsteinParams],
    ratios: Option<&[f64]>,
    multiplier: f64,
) -> Result<f64> {
    check_theta(theta)?;
    let y: Vec<f64> = match hop {
        Hop::First => s.iter().zip(ghat).map(|(a, b)| a * b).collect(),
        Hop::Second => {
            let r = ratios.ok_or_else(|| Error::InvalidInput("second hop needs h1/h2 ratios".into()))?;
            s.iter().zip(ghat).zip(r).map(|((a, b), r)| a * b * r).collect()
        }
    };
    let spread: f64 = y.iter().zip(params).map(|(v, p)| (p.tau * v).powi(2)).sum::<f64>().sqrt();
    if spread == 0.0 || multiplier == 0.0 {
        return Ok(0.0);
    }
    let k = kappa(theta);
    if k == 0.0 {
        return Err(Error::Domain(format!("sensitivity is singular at {theta}")));
    }
    Ok(-multiplier * spread / (theta * k))
}

pub fn cost_estimate_chance(dual: &DualState, margins: &ProtectionDeltas) -> f64 {
    margin_cost(dual, margins)
}
