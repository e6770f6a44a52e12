//! Worst-case protection of the interference constraints and the cost of
//! that protection.

use serde::{Deserialize, Serialize};

use crate::allocator::{AllocationProblem, DualState, ProtectionProvider};
use crate::error::{Error, Result};

/// How the norm of the weighted power vector is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ProtectionNorm {
    /// Upper bound by the l1 norm.
    #[default]
    Linearized,
    /// Exact dual norm of an l-alpha uncertainty set, alpha >= 2.
    Dual { alpha: f64 },
}

impl ProtectionNorm {
    /// Order of the norm applied to the weighted power vector.
    pub fn beta(self) -> f64 {
        match self {
            ProtectionNorm::Linearized => 1.0,
            ProtectionNorm::Dual { alpha } => 1.0 + 1.0 / (alpha - 1.0),
        }
    }
}

/// Bounded uncertainty of the cross gains and the estimated interference.
///
/// The weight matrices are diagonal; `m1[rb][ue]` holds the diagonal entry,
/// and the protection uses its inverse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyModel {
    pub psi1: Vec<f64>,
    pub psi2: Vec<f64>,
    pub upsilon: Vec<Vec<f64>>,
    pub m1: Vec<Vec<f64>>,
    pub m2: Vec<Vec<f64>>,
    pub m_i: Vec<Vec<f64>>,
    pub norm: ProtectionNorm,
}

impl UncertaintyModel {
    /// Same bounds on every RB, identity weights.
    pub fn uniform(num_ues: usize, num_rbs: usize, psi1: f64, psi2: f64, upsilon: f64) -> Self {
        UncertaintyModel {
            psi1: vec![psi1; num_rbs],
            psi2: vec![psi2; num_rbs],
            upsilon: vec![vec![upsilon; num_rbs]; num_ues],
            m1: vec![vec![1.0; num_ues]; num_rbs],
            m2: vec![vec![1.0; num_ues]; num_rbs],
            m_i: vec![vec![1.0; num_rbs]; num_ues],
            norm: ProtectionNorm::Linearized,
        }
    }

    pub fn zero(num_ues: usize, num_rbs: usize) -> Self {
        Self::uniform(num_ues, num_rbs, 0.0, 0.0, 0.0)
    }

    pub fn with_norm(mut self, norm: ProtectionNorm) -> Self {
        self.norm = norm;
        self
    }

    pub fn num_rbs(&self) -> usize {
        self.psi1.len()
    }

    pub fn num_ues(&self) -> usize {
        self.upsilon.len()
    }

    pub fn validate(&self) -> Result<()> {
        let u = self.num_ues();
        let n = self.num_rbs();
        let bad_shape = self.psi2.len() != n
            || self.upsilon.iter().any(|r| r.len() != n)
            || self.m_i.len() != u
            || self.m_i.iter().any(|r| r.len() != n)
            || self.m1.len() != n
            || self.m2.len() != n
            || self.m1.iter().chain(&self.m2).any(|r| r.len() != u);
        if bad_shape {
            return Err(Error::Config("uncertainty model dimensions disagree".into()));
        }
        let ok = |v: &f64| *v >= 0.0 && v.is_finite();
        if !self.psi1.iter().chain(&self.psi2).all(ok) || !self.upsilon.iter().flatten().all(ok) {
            return Err(Error::Config("uncertainty bounds must be non-negative".into()));
        }
        if !self.m1.iter().chain(&self.m2).flatten().all(|&m| m != 0.0 && m.is_finite()) {
            return Err(Error::Config("weight matrix is not invertible".into()));
        }
        if !self.m_i.iter().flatten().all(ok) {
            return Err(Error::Config("interference weights must be non-negative".into()));
        }
        if let ProtectionNorm::Dual { alpha } = self.norm {
            if !(alpha >= 2.0) || !alpha.is_finite() {
                return Err(Error::Config(format!("norm order {alpha} must be >= 2")));
            }
        }
        Ok(())
    }
}

fn weighted_norm(values: impl Iterator<Item = f64>, beta: f64) -> f64 {
    if beta == 1.0 {
        values.map(f64::abs).sum()
    } else {
        values.map(|v| v.abs().powf(beta)).sum::<f64>().powf(1.0 / beta)
    }
}

/// First-hop margin on `rb` for per-UE powers `s` and reference gains `g_ref`.
pub fn protection_gain_hop1(rb: usize, s: &[f64], model: &UncertaintyModel, g_ref: &[f64]) -> f64 {
    let m = &model.m1[rb];
    let terms = s.iter().enumerate().map(|(u, &v)| v * g_ref[u] / m[u]);
    model.psi1[rb] * weighted_norm(terms, model.norm.beta())
}

/// Second-hop margin on `rb`; `ratios[ue]` is h1/h2.
pub fn protection_gain_hop2(
    rb: usize,
    s: &[f64],
    model: &UncertaintyModel,
    g_ref: &[f64],
    ratios: &[f64],
) -> f64 {
    let m = &model.m2[rb];
    let terms = s.iter().enumerate().map(|(u, &v)| ratios[u] * v * g_ref[u] / m[u]);
    model.psi2[rb] * weighted_norm(terms, model.norm.beta())
}

pub fn protection_interference(ue: usize, rb: usize, model: &UncertaintyModel, i_bar_w: f64) -> f64 {
    model.upsilon[ue][rb] * model.m_i[ue][rb] * i_bar_w
}

/// Provider backed by an [`UncertaintyModel`] for one relay problem.
#[derive(Debug, Clone)]
pub struct RobustProvider {
    model: UncertaintyModel,
    /// `[rb][ue]` layouts so a column is contiguous.
    g1: Vec<Vec<f64>>,
    g2: Vec<Vec<f64>>,
    ratio: Vec<Vec<f64>>,
    i_bar: Vec<Vec<f64>>,
}

pub fn robust_provider(model: &UncertaintyModel, problem: &AllocationProblem) -> Result<RobustProvider> {
    model.validate()?;
    let u = problem.num_ues();
    let n = problem.num_rbs();
    if model.num_ues() != u || model.num_rbs() != n {
        return Err(Error::Config(format!(
            "uncertainty model is {}x{}, problem is {u}x{n}",
            model.num_ues(),
            model.num_rbs()
        )));
    }
    let by_rb = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        (0..n).map(|rb| (0..u).map(|ue| m[ue][rb]).collect()).collect()
    };
    Ok(RobustProvider {
        model: model.clone(),
        g1: by_rb(&problem.g1_ref),
        g2: by_rb(&problem.g2_ref),
        ratio: (0..n)
            .map(|rb| (0..u).map(|ue| problem.ratio(ue, rb)).collect())
            .collect(),
        i_bar: problem.i_bar_w.clone(),
    })
}

impl RobustProvider {
    pub fn model(&self) -> &UncertaintyModel {
        &self.model
    }
}

impl ProtectionProvider for RobustProvider {
    fn delta_gain_hop1(&self, rb: usize, s: &[f64]) -> f64 {
        protection_gain_hop1(rb, s, &self.model, &self.g1[rb])
    }
    fn delta_gain_hop2(&self, rb: usize, s: &[f64]) -> f64 {
        protection_gain_hop2(rb, s, &self.model, &self.g2[rb], &self.ratio[rb])
    }
    fn delta_interference(&self, ue: usize, rb: usize) -> f64 {
        protection_interference(ue, rb, &self.model, self.i_bar[ue][rb])
    }
    fn delta_pow_coeff_hop1(&self, ue: usize, rb: usize) -> f64 {
        self.model.psi1[rb] * self.g1[rb][ue] / self.model.m1[rb][ue]
    }
    fn delta_pow_coeff_hop2(&self, ue: usize, rb: usize) -> f64 {
        self.model.psi2[rb] * self.g2[rb][ue] / self.model.m2[rb][ue]
    }
}

/// Margins of a provider evaluated at powers `s[ue][rb]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionDeltas {
    pub hop1: Vec<f64>,
    pub hop2: Vec<f64>,
    pub interference: Vec<Vec<f64>>,
}

pub fn protection_deltas(
    protect: &impl ProtectionProvider,
    problem: &AllocationProblem,
    s: &[Vec<f64>],
) -> ProtectionDeltas {
    let u = problem.num_ues();
    let n = problem.num_rbs();
    let col = |rb: usize| -> Vec<f64> { s.iter().map(|row| row[rb]).collect() };
    ProtectionDeltas {
        hop1: (0..n).map(|rb| protect.delta_gain_hop1(rb, &col(rb))).collect(),
        hop2: (0..n).map(|rb| protect.delta_gain_hop2(rb, &col(rb))).collect(),
        interference: (0..u)
            .map(|ue| (0..n).map(|rb| protect.delta_interference(ue, rb)).collect())
            .collect(),
    }
}

/// First-order sum-rate loss: multipliers times margins.
pub fn margin_cost(dual: &DualState, deltas: &ProtectionDeltas) -> f64 {
    let gains: f64 = dual
        .psi
        .iter()
        .zip(&deltas.hop1)
        .chain(dual.phi.iter().zip(&deltas.hop2))
        .map(|(k, d)| k * d)
        .sum();
    let interference: f64 = dual
        .varrho
        .iter()
        .flatten()
        .zip(deltas.interference.iter().flatten())
        .map(|(k, d)| k * d)
        .sum();
    gains + interference
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub r_nominal: f64,
    pub r_robust: f64,
    pub r_delta_direct: f64,
    pub r_delta_estimate: f64,
}

pub fn cost_of_robustness(
    nominal_dual: &DualState,
    deltas: &ProtectionDeltas,
    r_nominal: f64,
    r_robust: f64,
) -> CostReport {
    CostReport {
        r_nominal,
        r_robust,
        r_delta_direct: r_nominal - r_robust,
        r_delta_estimate: margin_cost(nominal_dual, deltas),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_ue(psi: f64) -> UncertaintyModel {
        UncertaintyModel::uniform(2, 1, psi, psi, 0.0)
    }

    #[test]
    fn hop1_examples() {
        let g = [1e-9, 1e-9];
        assert_eq!(protection_gain_hop1(0, &[1.0, 1.0], &two_ue(0.0), &g), 0.0);
        let lin = protection_gain_hop1(0, &[1.0, 1.0], &two_ue(0.2), &g);
        assert_relative_eq!(lin, 4e-10, max_relative = 1e-12);
        let l2 = two_ue(0.2).with_norm(ProtectionNorm::Dual { alpha: 2.0 });
        let v = protection_gain_hop1(0, &[1.0, 1.0], &l2, &g);
        assert_relative_eq!(v, 0.2 * 2f64.sqrt() * 1e-9, max_relative = 1e-12);
        assert!(v <= lin);
    }

    #[test]
    fn hop2_ratio_doubles() {
        let g = [1e-9, 1e-9];
        let m = two_ue(0.2);
        let one = protection_gain_hop2(0, &[1.0, 1.0], &m, &g, &[1.0, 1.0]);
        let two = protection_gain_hop2(0, &[1.0, 1.0], &m, &g, &[2.0, 2.0]);
        assert_relative_eq!(one, 4e-10, max_relative = 1e-12);
        assert_relative_eq!(two, 2.0 * one, max_relative = 1e-12);
        assert_eq!(protection_gain_hop2(0, &[1.0, 1.0], &two_ue(0.0), &g, &[2.0, 2.0]), 0.0);
    }

    #[test]
    fn interference_examples() {
        let sigma2 = 7.16e-16;
        let mut m = UncertaintyModel::uniform(1, 1, 0.0, 0.0, 0.0);
        assert_eq!(protection_interference(0, 0, &m, 2.0 * sigma2), 0.0);
        m.upsilon[0][0] = 0.5;
        assert_relative_eq!(protection_interference(0, 0, &m, 2.0 * sigma2), sigma2, max_relative = 1e-12);
        m.upsilon[0][0] = 0.2;
        assert_relative_eq!(protection_interference(0, 0, &m, 1e-13), 2e-14, max_relative = 1e-12);
    }

    #[test]
    fn singular_weights_rejected() {
        let mut m = two_ue(0.1);
        m.m1[0][1] = 0.0;
        assert!(matches!(m.validate(), Err(Error::Config(_))));
        let bad = two_ue(0.1).with_norm(ProtectionNorm::Dual { alpha: 1.5 });
        assert!(bad.validate().is_err());
    }

    #[test]
    fn slack_constraints_cost_nothing() {
        let p = crate::allocator::tests_support::one_by_one(1e-9, 0.2);
        let dual = DualState::new(&p, 0.0);
        let deltas = ProtectionDeltas {
            hop1: vec![1e-11],
            hop2: vec![1e-11],
            interference: vec![vec![1e-15]],
        };
        let rep = cost_of_robustness(&dual, &deltas, 1e6, 1e6);
        assert_eq!(rep.r_delta_estimate, 0.0);
        assert_eq!(rep.r_delta_direct, 0.0);
    }
}
