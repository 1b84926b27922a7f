//! Exact KL-regularized policy iteration against an evolving reference,
//! the fixed-reference and unregularized contrasts, and the schedule and
//! reference-mixing state they share.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::{
    greedy_policy, kl_row, optimal_q_exact, policy_evaluation_exact, q_from_next_values, solve_state_values, Mdp,
    QTable, TabularPolicy,
};
use crate::rng;

/// Below this coefficient improvement falls back to the greedy policy.
pub const ALPHA_EPS: f64 = 1e-12;

/// Linear anneal `α = α₀ · max(0, 1 − η · step / budget)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub alpha0: f64,
    pub eta: f64,
    pub budget: u64,
    pub step: u64,
    pub current_alpha: f64,
}

impl ScheduleState {
    pub fn new(alpha0: f64, eta: f64, budget: u64) -> Result<Self> {
        if !(alpha0 >= 0.0 && alpha0.is_finite()) {
            return Err(LabError::Config(format!("alpha0 must be finite and >= 0, got {alpha0}")));
        }
        if !(0.0..=1.0).contains(&eta) {
            return Err(LabError::Config(format!("eta must lie in [0, 1], got {eta}")));
        }
        if budget == 0 {
            return Err(LabError::Config("schedule budget must be positive".into()));
        }
        Ok(ScheduleState { alpha0, eta, budget, step: 0, current_alpha: alpha0 })
    }

    /// Constant coefficient (`η = 0`).
    pub fn constant(alpha: f64) -> Result<Self> {
        Self::new(alpha, 0.0, 1)
    }

    pub fn alpha_at(&self, step: u64) -> f64 {
        self.alpha0 * (1.0 - self.eta * step as f64 / self.budget as f64).max(0.0)
    }
}

/// Advances one step, recomputing α from the step count.
pub fn advance_schedule(s: &ScheduleState) -> ScheduleState {
    let step = s.step + 1;
    ScheduleState { step, current_alpha: s.alpha_at(step), ..s.clone() }
}

/// Slowly moving reference policy `π̄`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyakState {
    pub reference: TabularPolicy,
    pub tau: f64,
}

impl PolyakState {
    pub fn new(reference: TabularPolicy, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(LabError::Config(format!("tau must lie in (0, 1], got {tau}")));
        }
        Ok(PolyakState { reference, tau })
    }
}

/// `π̄ ← τ π_new + (1 − τ) π̄`, entrywise.
pub fn polyak_update(polyak: &PolyakState, pi_new: &TabularPolicy) -> PolyakState {
    let tau = polyak.tau;
    let mut reference = polyak.reference.clone();
    if tau == 1.0 {
        reference = pi_new.clone();
    } else {
        for s in 0..reference.n_states() {
            let row: Vec<f64> =
                polyak.reference.row(s).iter().zip(pi_new.row(s)).map(|(r, p)| tau * p + (1.0 - tau) * r).collect();
            reference.set_row(s, &row);
        }
    }
    PolyakState { reference, tau }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseDistribution {
    /// `U[−a, a]` per entry.
    Uniform,
    /// `N(0, a²)` per entry.
    Gaussian,
    /// `+a` on every entry.
    Constant,
}

/// Additive value-estimation noise injected after every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub amplitude: f64,
    pub distribution: NoiseDistribution,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { amplitude: 0.0, distribution: NoiseDistribution::Uniform, seed: 0 }
    }

    pub fn uniform(amplitude: f64, seed: u64) -> Self {
        NoiseSpec { amplitude, distribution: NoiseDistribution::Uniform, seed }
    }

    fn validate(&self) -> Result<()> {
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(LabError::Config(format!("noise amplitude must be finite and >= 0, got {}", self.amplitude)));
        }
        Ok(())
    }
}

struct NoiseSource {
    spec: NoiseSpec,
    rng: rng::StreamRng,
}

impl NoiseSource {
    fn new(spec: &NoiseSpec) -> Result<Self> {
        spec.validate()?;
        Ok(NoiseSource { spec: spec.clone(), rng: rng::stream(spec.seed, 0, "value-noise") })
    }

    fn draw(&mut self, n_states: usize, n_actions: usize) -> QTable {
        let a = self.spec.amplitude;
        let mut eps = QTable::zeros(n_states, n_actions);
        if a == 0.0 {
            return eps;
        }
        let normal = Normal::new(0.0, a).expect("finite amplitude");
        for v in eps.values_mut() {
            *v = match self.spec.distribution {
                NoiseDistribution::Uniform => self.rng.gen_range(-a..=a),
                NoiseDistribution::Gaussian => normal.sample(&mut self.rng),
                NoiseDistribution::Constant => a,
            };
        }
        eps
    }
}

fn add_in_place(q: &mut QTable, eps: &QTable) {
    for (v, e) in q.values_mut().iter_mut().zip(eps.values()) {
        *v += e;
    }
}

/// One row of an [`IterationTrace`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    /// `‖Q* − Q^{π_k}‖∞` against the exact optimal values.
    pub gap: f64,
    pub alpha: f64,
    /// `max_s KL(π_k(·|s) ‖ reference(·|s))` for the reference used to build `π_k`.
    pub max_kl: f64,
    pub expected_return: f64,
    /// `‖Q^k‖∞` of the value estimate the iteration carries (noise included).
    pub q_norm: f64,
}

/// Full record of an exact iteration run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub records: Vec<IterationRecord>,
    /// `ε_j` for `j = 0..=k_max`.
    pub noise: Vec<QTable>,
    pub final_policy: TabularPolicy,
}

impl IterationTrace {
    pub fn final_gap(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.gap)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,gap,alpha,max_kl,return,q_norm\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.k, r.gap, r.alpha, r.max_kl, r.expected_return, r.q_norm));
        }
        out
    }
}

/// Closed-form maximizer of `E_π[q(s,·)] − α KL(π(·|s) ‖ π_ref(·|s))` per state:
/// `π(a|s) ∝ π_ref(a|s) exp(q(s,a)/α)`. Zero-mass reference actions stay at zero.
pub fn kl_regularized_improvement(q: &QTable, pi_ref: &TabularPolicy, alpha: f64) -> Result<TabularPolicy> {
    if !(alpha > 0.0) {
        return Err(LabError::Contract(format!(
            "KL improvement needs alpha > 0 (got {alpha}); use greedy_policy for alpha = 0"
        )));
    }
    let mut out = pi_ref.clone();
    let mut row = vec![0.0; q.n_actions()];
    for s in 0..q.n_states() {
        improve_row(q.row(s), pi_ref.row(s), alpha, &mut row).map_err(|reason| LabError::InvalidPolicy { state: s, reason })?;
        out.set_row(s, &row);
    }
    Ok(out)
}

/// Single-row form of [`kl_regularized_improvement`].
pub(crate) fn improve_row(q: &[f64], reference: &[f64], alpha: f64, out: &mut [f64]) -> std::result::Result<(), String> {
    let mut max_logit = f64::NEG_INFINITY;
    for (&qa, &ra) in q.iter().zip(reference) {
        if ra > 0.0 {
            max_logit = max_logit.max(ra.ln() + qa / alpha);
        }
    }
    if max_logit == f64::NEG_INFINITY {
        return Err("reference row has no positive mass".into());
    }
    let mut total = 0.0;
    for ((o, &qa), &ra) in out.iter_mut().zip(q).zip(reference) {
        *o = if ra > 0.0 { (ra.ln() + qa / alpha - max_logit).exp() } else { 0.0 };
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(())
}

/// Per-state `KL(pi ‖ reference)`, reporting the first support violation.
pub fn kl_per_state(pi: &TabularPolicy, reference: &TabularPolicy) -> Result<Vec<f64>> {
    (0..pi.n_states())
        .map(|s| kl_row(pi.row(s), reference.row(s)).map_err(|a| LabError::Support { state: s, action: a }))
        .collect()
}

/// Fixed point of the regularized evaluation operator
/// `Q(s,a) = r(s,a) + γ E_{s'}[Σ_{a'} π_k(a'|s')(Q(s',a') − α log(π_k(a'|s')/π_{k−1}(a'|s')))]`,
/// solved exactly as standard evaluation with the per-state penalty `α KL` folded in.
pub fn regularized_policy_evaluation_exact(
    mdp: &Mdp,
    pi_k: &TabularPolicy,
    pi_km1: &TabularPolicy,
    alpha: f64,
) -> Result<QTable> {
    if !(alpha >= 0.0) {
        return Err(LabError::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    let kl = if alpha > 0.0 { kl_per_state(pi_k, pi_km1)? } else { vec![0.0; mdp.n_states()] };
    let b: Vec<f64> = (0..mdp.n_states())
        .map(|s| {
            let r: f64 = (0..mdp.n_actions()).map(|a| pi_k.prob(s, a) * mdp.reward(s, a)).sum();
            r - alpha * kl[s]
        })
        .collect();
    let w = solve_state_values(mdp, pi_k, &b)?;
    Ok(q_from_next_values(mdp, &w))
}

/// One application of the regularized evaluation operator (test oracle).
pub fn apply_regularized_operator(
    mdp: &Mdp,
    pi_k: &TabularPolicy,
    pi_km1: &TabularPolicy,
    alpha: f64,
    q: &QTable,
) -> Result<QTable> {
    let kl = kl_per_state(pi_k, pi_km1)?;
    let w: Vec<f64> = (0..mdp.n_states())
        .map(|s| q.row(s).iter().zip(pi_k.row(s)).map(|(x, p)| p * x).sum::<f64>() - alpha * kl[s])
        .collect();
    Ok(q_from_next_values(mdp, &w))
}

/// `(r_max + α ln|A|) / (1 − γ)`.
pub fn v_max_alpha(r_max: f64, alpha: f64, n_actions: usize, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(LabError::Domain(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if n_actions == 0 {
        return Err(LabError::Domain("n_actions must be >= 1".into()));
    }
    Ok((r_max + alpha * (n_actions as f64).ln()) / (1.0 - gamma))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Reference {
    /// Polyak average of past iterates.
    Evolving,
    /// Always the initial policy.
    Fixed,
}

struct Oracle<'a> {
    mdp: &'a Mdp,
    qstar: QTable,
}

impl<'a> Oracle<'a> {
    fn new(mdp: &'a Mdp) -> Result<Self> {
        Ok(Oracle { mdp, qstar: optimal_q_exact(mdp)? })
    }

    fn gap_and_return(&self, pi: &TabularPolicy) -> Result<(f64, f64)> {
        let q = policy_evaluation_exact(self.mdp, pi)?;
        let v = q.policy_values(pi);
        let ret = self.mdp.initial_dist().iter().zip(&v.values).map(|(r, x)| r * x).sum();
        Ok((self.qstar.max_diff(&q), ret))
    }
}

fn check_alignment(mdp: &Mdp, pi0: &TabularPolicy) -> Result<()> {
    if pi0.n_states() != mdp.n_states() || pi0.n_actions() != mdp.n_actions() {
        return Err(LabError::Config("initial policy does not match the MDP dimensions".into()));
    }
    pi0.validate()
}

fn regularized_iterate(
    mdp: &Mdp,
    pi0: &TabularPolicy,
    schedule: &ScheduleState,
    polyak: &PolyakState,
    noise: &NoiseSpec,
    k_max: usize,
    mode: Reference,
) -> Result<IterationTrace> {
    check_alignment(mdp, pi0)?;
    if k_max == 0 {
        return Err(LabError::Config("k_max must be >= 1".into()));
    }
    let oracle = Oracle::new(mdp)?;
    let mut source = NoiseSource::new(noise)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let v_bound = v_max_alpha(mdp.r_max(), schedule.alpha0, na, mdp.discount())?;

    let mut schedule = schedule.clone();
    let mut polyak = polyak.clone();
    let mut pi = pi0.clone();
    let mut q = policy_evaluation_exact(mdp, &pi)?;
    let eps = source.draw(ns, na);
    add_in_place(&mut q, &eps);
    let mut noise_record = vec![eps];

    let (gap, ret) = oracle.gap_and_return(&pi)?;
    let mut records = vec![IterationRecord {
        k: 0,
        gap,
        alpha: schedule.current_alpha,
        max_kl: 0.0,
        expected_return: ret,
        q_norm: q.max_abs(),
    }];

    for k in 1..=k_max {
        let alpha = schedule.current_alpha;
        let reference = match mode {
            Reference::Evolving => {
                polyak = polyak_update(&polyak, &pi);
                polyak.reference.clone()
            }
            Reference::Fixed => pi0.clone(),
        };
        let next = if alpha < ALPHA_EPS { greedy_policy(&q) } else { kl_regularized_improvement(&q, &reference, alpha)? };
        let max_kl = if alpha < ALPHA_EPS {
            0.0
        } else {
            kl_per_state(&next, &reference)?.into_iter().fold(0.0, f64::max)
        };
        q = if alpha < ALPHA_EPS {
            policy_evaluation_exact(mdp, &next)?
        } else {
            regularized_policy_evaluation_exact(mdp, &next, &reference, alpha)?
        };
        let eps = source.draw(ns, na);
        add_in_place(&mut q, &eps);
        noise_record.push(eps);
        if q.max_abs() > v_bound {
            log::warn!("iteration {k}: |Q| = {} exceeds v_max^alpha = {v_bound}", q.max_abs());
        }
        pi = next;
        let (gap, ret) = oracle.gap_and_return(&pi)?;
        records.push(IterationRecord { k, gap, alpha, max_kl, expected_return: ret, q_norm: q.max_abs() });
        schedule = advance_schedule(&schedule);
    }
    Ok(IterationTrace { records, noise: noise_record, final_policy: pi })
}

/// Alternates regularized improvement against the Polyak reference with
/// exact regularized evaluation, injecting noise after every evaluation.
pub fn proto_exact_iterate(
    mdp: &Mdp,
    pi0: &TabularPolicy,
    schedule: &ScheduleState,
    polyak: &PolyakState,
    noise: &NoiseSpec,
    k_max: usize,
) -> Result<IterationTrace> {
    if !pi0.is_strictly_positive() && schedule.alpha0 > 0.0 {
        return Err(LabError::Config("initial policy must be strictly positive".into()));
    }
    regularized_iterate(mdp, pi0, schedule, polyak, noise, k_max, Reference::Evolving)
}

/// Same loop, but every improvement and every penalty uses the fixed `π₀`.
pub fn frozen_exact_iterate(
    mdp: &Mdp,
    pi0: &TabularPolicy,
    schedule: &ScheduleState,
    noise: &NoiseSpec,
    k_max: usize,
) -> Result<IterationTrace> {
    let polyak = PolyakState::new(pi0.clone(), 1.0)?;
    regularized_iterate(mdp, pi0, schedule, &polyak, noise, k_max, Reference::Fixed)
}

/// Noisy greedy policy iteration started from the estimate `q0`.
pub fn unregularized_iterate(mdp: &Mdp, q0: &QTable, noise: &NoiseSpec, k_max: usize) -> Result<IterationTrace> {
    if q0.n_states() != mdp.n_states() || q0.n_actions() != mdp.n_actions() {
        return Err(LabError::Config("q0 does not match the MDP dimensions".into()));
    }
    let oracle = Oracle::new(mdp)?;
    let mut source = NoiseSource::new(noise)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut q = q0.clone();
    let eps = source.draw(ns, na);
    add_in_place(&mut q, &eps);
    let mut noise_record = vec![eps];
    let mut records = Vec::with_capacity(k_max + 1);
    let mut pi = greedy_policy(&q);
    for k in 0..=k_max {
        pi = greedy_policy(&q);
        let (gap, ret) = oracle.gap_and_return(&pi)?;
        records.push(IterationRecord { k, gap, alpha: 0.0, max_kl: 0.0, expected_return: ret, q_norm: q.max_abs() });
        if k == k_max {
            break;
        }
        q = policy_evaluation_exact(mdp, &pi)?;
        let eps = source.draw(ns, na);
        add_in_place(&mut q, &eps);
        noise_record.push(eps);
    }
    Ok(IterationTrace { records, noise: noise_record, final_policy: pi })
}
