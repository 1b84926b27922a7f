//! Numeric audits of the regularized performance bound, the unregularized
//! error-propagation bound, and the fixed-reference suboptimality gap.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{cliff_chain, cliff_decision_state, ADVANCE, BAIL};
use crate::error::{LabError, Result};
use crate::mdp::{optimal_q_exact, optimal_q_exact_restricted, policy_evaluation_exact, Mdp, QTable, TabularPolicy};
use crate::pretrain::soften_pretrained;
use crate::regularized::{
    frozen_exact_iterate, proto_exact_iterate, unregularized_iterate, v_max_alpha, IterationTrace, NoiseSpec,
    PolyakState, ScheduleState,
};

/// Slack on the `‖Q^k‖∞ ≤ v_max` precondition check.
const PRECONDITION_TOL: f64 = 1e-9;

/// `(2/(1−γ))·eps_avg_norm + (4/(1−γ))·v_max_a/(k+1)`.
pub fn theorem1_rhs(k: usize, eps_avg_norm: f64, v_max_a: f64, gamma: f64) -> f64 {
    2.0 / (1.0 - gamma) * eps_avg_norm + 4.0 / (1.0 - gamma) * v_max_a / (k as f64 + 1.0)
}

/// `(2γ/(1−γ))·Σ_j γ^{k−j}‖ε_j‖∞ + (2/(1−γ))·γ^{k+1}·v_max`; `eps_norms` holds `‖ε_0‖ … ‖ε_k‖`.
pub fn no_reg_rhs(k: usize, eps_norms: &[f64], v_max: f64, gamma: f64) -> Result<f64> {
    if eps_norms.len() != k + 1 {
        return Err(LabError::Data(format!("expected {} noise norms for k = {k}, got {}", k + 1, eps_norms.len())));
    }
    let discounted: f64 = eps_norms.iter().enumerate().map(|(j, e)| gamma.powi((k - j) as i32) * e).sum();
    Ok(2.0 * gamma / (1.0 - gamma) * discounted + 2.0 / (1.0 - gamma) * gamma.powi(k as i32 + 1) * v_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub k: usize,
    pub measured_gap: f64,
    pub rhs: f64,
    pub satisfied: bool,
    /// `‖Q^k‖∞ ≤ v_max` for the value estimate carried at iteration `k`.
    pub precondition_ok: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundAudit {
    pub records: Vec<AuditRecord>,
}

impl BoundAudit {
    pub fn violations(&self) -> usize {
        self.records.iter().filter(|r| !r.satisfied).count()
    }

    pub fn precondition_failures(&self) -> usize {
        self.records.iter().filter(|r| !r.precondition_ok).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,measured_gap,rhs,satisfied,precondition_ok\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.k, r.measured_gap, r.rhs, r.satisfied, r.precondition_ok);
        }
        out
    }
}

fn record(k: usize, measured_gap: f64, rhs: f64, q_norm: f64, v_bound: f64) -> AuditRecord {
    AuditRecord { k, measured_gap, rhs, satisfied: measured_gap <= rhs, precondition_ok: q_norm <= v_bound + PRECONDITION_TOL }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub gamma: f64,
    pub r_max: f64,
    /// Coefficient used for `v_max^α`; for annealed runs pass the initial one.
    pub alpha: f64,
    pub n_actions: usize,
}

impl AuditConfig {
    pub fn for_mdp(mdp: &Mdp, alpha: f64) -> Self {
        AuditConfig { gamma: mdp.discount(), r_max: mdp.r_max(), alpha, n_actions: mdp.n_actions() }
    }
}

/// Checks the regularized bound at every recorded `k`, using the exact
/// running average of the recorded noise tables.
pub fn audit_proto_bound(trace: &IterationTrace, noise_record: &[QTable], cfg: &AuditConfig) -> Result<BoundAudit> {
    if noise_record.len() != trace.records.len() {
        return Err(LabError::Data(format!(
            "{} noise tables for {} trace records",
            noise_record.len(),
            trace.records.len()
        )));
    }
    if trace.records.iter().any(|r| r.alpha != cfg.alpha) {
        log::warn!("annealed trace: auditing against the initial-alpha bound (alpha = {})", cfg.alpha);
    }
    let v = v_max_alpha(cfg.r_max, cfg.alpha, cfg.n_actions, cfg.gamma)?;
    let mut sum: Option<QTable> = None;
    let mut records = Vec::with_capacity(trace.records.len());
    for (j, (rec, eps)) in trace.records.iter().zip(noise_record).enumerate() {
        if rec.k != j {
            return Err(LabError::Data(format!("trace record {j} has k = {}", rec.k)));
        }
        let acc = sum.get_or_insert_with(|| QTable::zeros(eps.n_states(), eps.n_actions()));
        for (a, e) in acc.values_mut().iter_mut().zip(eps.values()) {
            *a += e;
        }
        let avg_norm = acc.max_abs() / (j as f64 + 1.0);
        records.push(record(rec.k, rec.gap, theorem1_rhs(rec.k, avg_norm, v, cfg.gamma), rec.q_norm, v));
    }
    Ok(BoundAudit { records })
}

/// Checks the unregularized propagation bound against an unregularized trace.
pub fn audit_noreg_bound(trace: &IterationTrace, cfg: &AuditConfig) -> Result<BoundAudit> {
    if trace.noise.len() != trace.records.len() {
        return Err(LabError::Data("noise record and trace lengths differ".into()));
    }
    let v = v_max_alpha(cfg.r_max, 0.0, cfg.n_actions, cfg.gamma)?;
    let norms: Vec<f64> = trace.noise.iter().map(QTable::max_abs).collect();
    trace
        .records
        .iter()
        .map(|rec| Ok(record(rec.k, rec.gap, no_reg_rhs(rec.k, &norms[..=rec.k], v, cfg.gamma)?, rec.q_norm, v)))
        .collect::<Result<Vec<_>>>()
        .map(|records| BoundAudit { records })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationReport {
    pub n_seeds: usize,
    pub k_max: usize,
    /// Mean over seeds of each run's trailing-half mean gap.
    pub proto_mean: f64,
    /// Mean over seeds of each run's trailing-half gap standard deviation.
    pub proto_std: f64,
    pub noreg_mean: f64,
    pub noreg_std: f64,
    /// Per-seed trailing means `(proto, noreg)`.
    pub per_seed: Vec<(f64, f64)>,
}

/// Mean and population standard deviation of the gaps with `k > k_max / 2`.
pub fn trailing_stats(trace: &IterationTrace) -> (f64, f64) {
    let k_max = trace.records.last().map_or(0, |r| r.k);
    let tail: Vec<f64> = trace.records.iter().filter(|r| 2 * r.k > k_max).map(|r| r.gap).collect();
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Parameters of [`propagation_experiment`] beyond the MDP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropagationConfig {
    pub noise_amplitude: f64,
    pub n_seeds: usize,
    pub k_max: usize,
    /// Constant coefficient of the regularized runs.
    pub alpha: f64,
    pub tau: f64,
}

/// Regularized and unregularized iteration from the uniform policy, fed the
/// same uniform noise stream per seed.
pub fn propagation_experiment(mdp: &Mdp, cfg: &PropagationConfig) -> Result<PropagationReport> {
    if cfg.n_seeds < 20 {
        return Err(LabError::Config(format!("propagation needs at least 20 seeds, got {}", cfg.n_seeds)));
    }
    if cfg.k_max < 2 {
        return Err(LabError::Config("k_max must be >= 2".into()));
    }
    let pi0 = TabularPolicy::uniform(mdp.n_states(), mdp.n_actions());
    let q0 = policy_evaluation_exact(mdp, &pi0)?;
    let schedule = ScheduleState::constant(cfg.alpha)?;
    let polyak = PolyakState::new(pi0.clone(), cfg.tau)?;
    let mut per_seed = Vec::with_capacity(cfg.n_seeds);
    let (mut ps, mut ns) = (0.0, 0.0);
    for seed in 0..cfg.n_seeds as u64 {
        let noise = NoiseSpec::uniform(cfg.noise_amplitude, seed);
        let proto = proto_exact_iterate(mdp, &pi0, &schedule, &polyak, &noise, cfg.k_max)?;
        let noreg = unregularized_iterate(mdp, &q0, &noise, cfg.k_max)?;
        let (pm, pstd) = trailing_stats(&proto);
        let (nm, nstd) = trailing_stats(&noreg);
        per_seed.push((pm, nm));
        ps += pstd;
        ns += nstd;
    }
    let n = cfg.n_seeds as f64;
    Ok(PropagationReport {
        n_seeds: cfg.n_seeds,
        k_max: cfg.k_max,
        proto_mean: per_seed.iter().map(|p| p.0).sum::<f64>() / n,
        proto_std: ps / n,
        noreg_mean: per_seed.iter().map(|p| p.1).sum::<f64>() / n,
        noreg_std: ns / n,
        per_seed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub length: usize,
    pub gamma: f64,
    pub v_max: f64,
    /// `‖Q* − Q*_Π‖∞` with `Π` the policies supported on `supp(π₀)`.
    pub margin: f64,
    /// `margin / (1 − γ)`.
    pub upper: f64,
    pub frozen_gap: f64,
    pub proto_gap: f64,
    /// Frozen gaps at `k = k_max / 2` and `k = k_max`.
    pub frozen_gap_half: f64,
    pub frozen_gap_full: f64,
}

impl GapReport {
    pub fn frozen_in_band(&self) -> bool {
        self.margin > 0.0 && self.frozen_gap >= self.margin - 1e-9 && self.frozen_gap <= self.upper
    }

    pub fn proto_converged(&self) -> bool {
        self.proto_gap <= 1e-3 * self.v_max
    }

    pub fn k_independent(&self) -> bool {
        (self.frozen_gap_half - self.frozen_gap_full).abs() <= 1e-6
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapDemoConfig {
    pub gamma: f64,
    pub alpha: f64,
    pub k_max: usize,
    /// `false` puts the advance action back into `π₀`'s support.
    pub exclude_optimal: bool,
}

impl Default for GapDemoConfig {
    fn default() -> Self {
        GapDemoConfig { gamma: 0.9, alpha: 0.05, k_max: 400, exclude_optimal: true }
    }
}

/// Fixed-reference vs. evolving-reference iteration on [`cliff_chain`]: the
/// fixed reference can never advance at the decision state, the softened
/// evolving one can.
pub fn fixed_gap_demo(length: usize, cfg: &GapDemoConfig) -> Result<GapReport> {
    if length < 3 {
        return Err(LabError::Config(format!("fixed_gap_demo needs length >= 3, got {length}")));
    }
    if cfg.k_max < 2 {
        return Err(LabError::Config("k_max must be >= 2".into()));
    }
    let mdp = cliff_chain(length, cfg.gamma)?;
    let decision = cliff_decision_state(length);
    let rows = (0..length)
        .map(|s| if s == decision && cfg.exclude_optimal { vec![0.0, 1.0] } else { vec![0.5, 0.5] })
        .collect::<Vec<_>>();
    debug_assert_eq!((ADVANCE, BAIL), (0, 1));
    let pi0 = TabularPolicy::from_rows(rows)?;
    let allowed: Vec<Vec<bool>> = (0..length).map(|s| pi0.row(s).iter().map(|&p| p > 0.0).collect()).collect();
    let qstar = optimal_q_exact(&mdp)?;
    let qpi = optimal_q_exact_restricted(&mdp, Some(&allowed))?;
    let margin = qstar.max_diff(&qpi);

    let schedule = ScheduleState::constant(cfg.alpha)?;
    let none = NoiseSpec::none();
    let frozen = frozen_exact_iterate(&mdp, &pi0, &schedule, &none, cfg.k_max)?;
    let soft = soften_pretrained(&pi0);
    let proto = proto_exact_iterate(&mdp, &soft, &schedule, &PolyakState::new(soft.clone(), 1.0)?, &none, cfg.k_max)?;
    Ok(GapReport {
        length,
        gamma: cfg.gamma,
        v_max: mdp.v_max(),
        margin,
        upper: margin / (1.0 - cfg.gamma),
        frozen_gap: frozen.final_gap(),
        proto_gap: proto.final_gap(),
        frozen_gap_half: frozen.records[cfg.k_max / 2].gap,
        frozen_gap_full: frozen.records[cfg.k_max].gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvSpec};
    use crate::regularized::{IterationRecord, NoiseDistribution};

    #[test]
    fn theorem1_rhs_examples() {
        assert!((theorem1_rhs(0, 0.0, 377.2588722239781, 0.99) - 150903.5489).abs() < 1e-3);
        assert!(theorem1_rhs(1_000_000, 0.0, 5.0, 0.9) < 1e-3 * theorem1_rhs(0, 0.0, 5.0, 0.9));
        assert!((theorem1_rhs(7, 0.3, 0.0, 0.9) - 6.0).abs() < 1e-12);
    }

    #[test]
    fn no_reg_rhs_examples() {
        assert!((no_reg_rhs(0, &[0.0], 10.0, 0.9).unwrap() - 180.0).abs() < 1e-9);
        let k = 10_000;
        let limit = 2.0 * 0.9 * 0.5 / (0.1f64 * 0.1);
        let got = no_reg_rhs(k, &vec![0.5; k + 1], 10.0, 0.9).unwrap();
        assert!((got - limit).abs() <= 0.01 * limit);
        assert!(no_reg_rhs(3, &[0.0; 3], 10.0, 0.9).is_err());
        let mut prev = f64::INFINITY;
        for k in 0..50 {
            let v = no_reg_rhs(k, &vec![0.0; k + 1], 10.0, 0.9).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn audit_flags_synthetic_violation() {
        let rec = |k, gap| IterationRecord { k, gap, alpha: 0.0, max_kl: 0.0, expected_return: 0.0, q_norm: 0.5 };
        let trace = IterationTrace {
            records: vec![rec(0, 1.0), rec(1, 1e6)],
            noise: vec![QTable::zeros(1, 2); 2],
            final_policy: TabularPolicy::uniform(1, 2),
        };
        let cfg = AuditConfig { gamma: 0.9, r_max: 1.0, alpha: 0.0, n_actions: 2 };
        let audit = audit_proto_bound(&trace, &trace.noise, &cfg).unwrap();
        assert!(audit.records[0].satisfied);
        assert!(!audit.records[1].satisfied);
        assert_eq!(audit.violations(), 1);
        assert!(audit_proto_bound(&trace, &trace.noise[..1], &cfg).is_err());
        assert!(audit.to_csv().starts_with("k,measured_gap,rhs,satisfied,precondition_ok\n0,"));
    }

    #[test]
    fn constant_bias_single_state() {
        // One state, two actions: a shared shift leaves every improvement step unchanged,
        // so the gap is the noise-free one while the bound gains exactly 2b/(1-γ).
        let mdp = Mdp::new(vec![vec![vec![1.0], vec![1.0]]], vec![vec![1.0, 0.4]], 0.9, vec![1.0]).unwrap();
        let pi0 = TabularPolicy::uniform(1, 2);
        let sched = ScheduleState::constant(0.5).unwrap();
        let polyak = PolyakState::new(pi0.clone(), 1.0).unwrap();
        let b = 0.25;
        let biased = NoiseSpec { amplitude: b, distribution: NoiseDistribution::Constant, seed: 0 };
        let with = proto_exact_iterate(&mdp, &pi0, &sched, &polyak, &biased, 50).unwrap();
        let without = proto_exact_iterate(&mdp, &pi0, &sched, &polyak, &NoiseSpec::none(), 50).unwrap();
        for (x, y) in with.records.iter().zip(&without.records) {
            assert!((x.gap - y.gap).abs() <= 1e-9);
        }
        let cfg = AuditConfig::for_mdp(&mdp, 0.5);
        let audit = audit_proto_bound(&with, &with.noise, &cfg).unwrap();
        let clean = audit_proto_bound(&without, &without.noise, &cfg).unwrap();
        for (a, c) in audit.records.iter().zip(&clean.records) {
            assert!((a.rhs - c.rhs - 2.0 * b / 0.1).abs() < 1e-9);
        }
        assert_eq!(audit.violations(), 0);
    }

    #[test]
    fn single_state_unregularized_noise_statistics() {
        // Q(a1) − Q(a2) = Δ for every policy, so each step picks the wrong action
        // independently with P(ε2 − ε1 > Δ) = (2a − Δ)² / (8a²), costing γΔ/(1−γ).
        let (r1, r2, gamma, amp) = (1.0, 0.6, 0.9, 0.5);
        let mdp = Mdp::new(vec![vec![vec![1.0], vec![1.0]]], vec![vec![r1, r2]], gamma, vec![1.0]).unwrap();
        let delta: f64 = r1 - r2;
        let p = (2.0 * amp - delta).powi(2) / (8.0 * amp * amp);
        let g = gamma * delta / (1.0 - gamma);
        let q0 = optimal_q_exact(&mdp).unwrap();
        let mut gaps = Vec::new();
        for seed in 0..20 {
            let t = unregularized_iterate(&mdp, &q0, &NoiseSpec::uniform(amp, seed), 2_000).unwrap();
            gaps.extend(t.records.iter().filter(|r| r.k > 1_000).map(|r| r.gap));
        }
        let n = gaps.len() as f64;
        let mean = gaps.iter().sum::<f64>() / n;
        let var = gaps.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((mean - p * g).abs() <= 0.1 * p * g, "mean {mean} vs {}", p * g);
        assert!((var - p * (1.0 - p) * g * g).abs() <= 0.1 * p * (1.0 - p) * g * g);
        assert!(mean <= 2.0 * amp / (1.0 - gamma));
    }

    #[test]
    fn propagation_needs_seeds() {
        let mdp = make_env(&EnvSpec::random(0, 3, 2, 2)).unwrap();
        let cfg = PropagationConfig { noise_amplitude: 0.0, n_seeds: 5, k_max: 10, alpha: 0.1, tau: 1.0 };
        assert!(propagation_experiment(&mdp, &cfg).unwrap_err().is_config());
    }

    #[test]
    fn noise_free_propagation_converges() {
        let mdp = make_env(&EnvSpec::random(1, 5, 3, 2)).unwrap();
        let cfg = PropagationConfig { noise_amplitude: 0.0, n_seeds: 20, k_max: 400, alpha: 0.02, tau: 1.0 };
        let rep = propagation_experiment(&mdp, &cfg).unwrap();
        assert!(rep.proto_mean <= 1e-6 && rep.noreg_mean <= 1e-6, "{rep:?}");
    }

    #[test]
    fn gap_demo_with_full_support_closes() {
        let rep = fixed_gap_demo(5, &GapDemoConfig { exclude_optimal: false, ..Default::default() }).unwrap();
        assert_eq!(rep.margin, 0.0);
        assert!(rep.frozen_gap <= 1e-2 * rep.v_max, "{rep:?}");
        assert!(fixed_gap_demo(2, &GapDemoConfig::default()).is_err());
    }
}
