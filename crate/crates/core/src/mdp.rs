//! Finite MDPs, tabular policies and value tables, plus the exact
//! unregularized dynamic-programming routines used as oracles everywhere
//! else in the crate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Row-sum tolerance for every probability vector in the crate.
pub const PROB_TOL: f64 = 1e-12;

fn check_distribution(row: &[f64], what: &str) -> std::result::Result<(), String> {
    let mut sum = 0.0;
    for &p in row {
        if !p.is_finite() || p < 0.0 {
            return Err(format!("{what} has invalid entry {p}"));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(format!("{what} sums to {sum}, not 1"));
    }
    Ok(())
}

/// A finite discounted MDP with dense transition and reward tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpRepr", into = "MdpRepr")]
pub struct Mdp {
    n_states: usize,
    n_actions: usize,
    // [s][a][s'] flattened
    transition: Vec<f64>,
    // [s][a] flattened
    reward: Vec<f64>,
    discount: f64,
    initial_dist: Vec<f64>,
    r_max: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpRepr {
    n_states: usize,
    n_actions: usize,
    transition: Vec<Vec<Vec<f64>>>,
    reward: Vec<Vec<f64>>,
    discount: f64,
    initial_dist: Vec<f64>,
}

impl TryFrom<MdpRepr> for Mdp {
    type Error = LabError;

    fn try_from(r: MdpRepr) -> Result<Self> {
        let mdp = Mdp::new(r.transition, r.reward, r.discount, r.initial_dist)?;
        if mdp.n_states != r.n_states || mdp.n_actions != r.n_actions {
            return Err(LabError::Config(format!(
                "declared dimensions {}x{} do not match tables {}x{}",
                r.n_states, r.n_actions, mdp.n_states, mdp.n_actions
            )));
        }
        Ok(mdp)
    }
}

impl From<Mdp> for MdpRepr {
    fn from(m: Mdp) -> Self {
        let transition = (0..m.n_states)
            .map(|s| (0..m.n_actions).map(|a| m.next_dist(s, a).to_vec()).collect())
            .collect();
        let reward = m.reward.chunks(m.n_actions).map(|r| r.to_vec()).collect();
        MdpRepr {
            n_states: m.n_states,
            n_actions: m.n_actions,
            transition,
            reward,
            discount: m.discount,
            initial_dist: m.initial_dist,
        }
    }
}

impl Mdp {
    /// Builds and validates an MDP from nested `[s][a][s']` and `[s][a]` tables.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(LabError::Config("MDP needs at least one state".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(LabError::Config("MDP needs at least one action".into()));
        }
        if !(discount > 0.0 && discount < 1.0) {
            return Err(LabError::Config(format!("discount {discount} outside (0, 1)")));
        }
        if reward.len() != n_states || initial_dist.len() != n_states {
            return Err(LabError::Config("reward / initial_dist dimension mismatch".into()));
        }
        let mut flat_t = Vec::with_capacity(n_states * n_actions * n_states);
        let mut flat_r = Vec::with_capacity(n_states * n_actions);
        for (s, (rows, rew)) in transition.iter().zip(&reward).enumerate() {
            if rows.len() != n_actions || rew.len() != n_actions {
                return Err(LabError::Config(format!("state {s} has wrong action count")));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(LabError::Config(format!("transition row ({s},{a}) has wrong length")));
                }
                check_distribution(row, &format!("transition row ({s},{a})")).map_err(LabError::Config)?;
                flat_t.extend_from_slice(row);
            }
            for &r in rew {
                if !r.is_finite() {
                    return Err(LabError::Config(format!("reward at state {s} is not finite")));
                }
            }
            flat_r.extend_from_slice(rew);
        }
        check_distribution(&initial_dist, "initial distribution").map_err(LabError::Config)?;
        let r_max = flat_r.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(Mdp {
            n_states,
            n_actions,
            transition: flat_t,
            reward: flat_r,
            discount,
            initial_dist,
            r_max,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// `r_max / (1 - γ)`.
    pub fn v_max(&self) -> f64 {
        self.r_max / (1.0 - self.discount)
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn next_dist(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    /// Same MDP with every reward replaced by `f(r)`.
    pub fn map_rewards(&self, f: impl Fn(f64) -> f64) -> Result<Mdp> {
        let mut out = self.clone();
        out.reward.iter_mut().for_each(|r| *r = f(*r));
        if out.reward.iter().any(|r| !r.is_finite()) {
            return Err(LabError::Config("mapped reward is not finite".into()));
        }
        out.r_max = out.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        Ok(out)
    }

    /// Expected next-state value `Σ_{s'} P(s'|s,a) v(s')`.
    pub fn expect_next(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.next_dist(s, a).iter().zip(v).map(|(p, x)| p * x).sum()
    }
}

/// Per-state action distributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for TabularPolicy {
    type Error = LabError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        TabularPolicy::from_rows(rows)
    }
}

impl From<TabularPolicy> for Vec<Vec<f64>> {
    fn from(p: TabularPolicy) -> Self {
        p.probs.chunks(p.n_actions).map(|r| r.to_vec()).collect()
    }
}

impl TabularPolicy {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, |r| r.len());
        if n_states == 0 || n_actions == 0 {
            return Err(LabError::Config("policy must be non-empty".into()));
        }
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for (s, row) in rows.iter().enumerate() {
            if row.len() != n_actions {
                return Err(LabError::InvalidPolicy { state: s, reason: "ragged row".into() });
            }
            check_distribution(row, "policy row")
                .map_err(|reason| LabError::InvalidPolicy { state: s, reason })?;
            probs.extend_from_slice(row);
        }
        Ok(TabularPolicy { n_states, n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_states,
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    /// Deterministic policy taking `actions[s]` in state `s`.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let mut probs = vec![0.0; actions.len() * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        TabularPolicy { n_states: actions.len(), n_actions, probs }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    /// Overwrites one row; the caller guarantees it is a distribution.
    pub(crate) fn set_row(&mut self, s: usize, row: &[f64]) {
        self.probs[s * self.n_actions..(s + 1) * self.n_actions].copy_from_slice(row);
    }

    /// Checks every row sums to one within [`PROB_TOL`].
    pub fn validate(&self) -> Result<()> {
        for s in 0..self.n_states {
            check_distribution(self.row(s), "policy row")
                .map_err(|reason| LabError::InvalidPolicy { state: s, reason })?;
        }
        Ok(())
    }

    /// `(1 - w) * self + w * uniform`; keeps every action strictly positive for `w > 0`.
    pub fn soften(&self, w: f64) -> Self {
        let u = 1.0 / self.n_actions as f64;
        let probs = self.probs.iter().map(|p| (1.0 - w) * p + w * u).collect();
        TabularPolicy { probs, ..*self }
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.probs.iter().all(|&p| p > 0.0)
    }

    /// Total-variation distance per state.
    pub fn tv_per_state(&self, other: &TabularPolicy) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| 0.5 * self.row(s).iter().zip(other.row(s)).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .collect()
    }

    /// Largest per-state total-variation distance.
    pub fn max_tv(&self, other: &TabularPolicy) -> f64 {
        self.tv_per_state(other).into_iter().fold(0.0, f64::max)
    }

    fn dims_match(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.n_states != n_states || self.n_actions != n_actions {
            return Err(LabError::Config(format!(
                "policy is {}x{}, expected {}x{}",
                self.n_states, self.n_actions, n_states, n_actions
            )));
        }
        Ok(())
    }
}

/// `KL(p || q)` for one row with the `0 log 0 = 0` convention.
///
/// Returns `Err(action)` when `p` has mass where `q` has none.
pub fn kl_row(p: &[f64], q: &[f64]) -> std::result::Result<f64, usize> {
    let mut kl = 0.0;
    for (a, (&pa, &qa)) in p.iter().zip(q).enumerate() {
        if pa > 0.0 {
            if qa <= 0.0 {
                return Err(a);
            }
            kl += pa * (pa / qa).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Action values `Q(s, a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for QTable {
    type Error = LabError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_states = rows.len();
        let n_actions = rows.first().map_or(0, |r| r.len());
        if n_states == 0 || n_actions == 0 || rows.iter().any(|r| r.len() != n_actions) {
            return Err(LabError::Config("Q table must be a non-empty rectangular matrix".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(LabError::Config("Q table has non-finite entries".into()));
        }
        Ok(QTable { n_states, n_actions, values })
    }
}

impl From<QTable> for Vec<Vec<f64>> {
    fn from(q: QTable) -> Self {
        q.values.chunks(q.n_actions).map(|r| r.to_vec()).collect()
    }
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(n_states * n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                values.push(f(s, a));
            }
        }
        QTable { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `‖self - other‖∞`.
    pub fn max_diff(&self, other: &QTable) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `V(s) = max_a Q(s, a)`.
    pub fn max_values(&self) -> VTable {
        VTable {
            values: (0..self.n_states).map(|s| self.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect(),
        }
    }

    /// `V(s) = Σ_a π(a|s) Q(s, a)`.
    pub fn policy_values(&self, pi: &TabularPolicy) -> VTable {
        VTable {
            values: (0..self.n_states)
                .map(|s| self.row(s).iter().zip(pi.row(s)).map(|(q, p)| p * q).sum())
                .collect(),
        }
    }
}

/// State values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VTable {
    pub values: Vec<f64>,
}

/// Solves `(I - γ P_π) w = b` for the per-state values of `pi`.
pub(crate) fn solve_state_values(mdp: &Mdp, pi: &TabularPolicy, b: &[f64]) -> Result<Vec<f64>> {
    let n = mdp.n_states();
    let g = mdp.discount();
    let mut m = DMatrix::<f64>::identity(n, n);
    for s in 0..n {
        for a in 0..mdp.n_actions() {
            let p = pi.prob(s, a);
            if p == 0.0 {
                continue;
            }
            for (s2, &t) in mdp.next_dist(s, a).iter().enumerate() {
                m[(s, s2)] -= g * p * t;
            }
        }
    }
    let rhs = DVector::from_column_slice(b);
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| LabError::Internal("singular policy-evaluation system".into()))?;
    Ok(sol.iter().cloned().collect())
}

/// `Q(s, a) = r(s, a) + γ Σ_{s'} P(s'|s,a) w(s')`.
pub(crate) fn q_from_next_values(mdp: &Mdp, w: &[f64]) -> QTable {
    let g = mdp.discount();
    QTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| mdp.reward(s, a) + g * mdp.expect_next(s, a, w))
}

/// Exact `Q^π` from a dense linear solve over states.
pub fn policy_evaluation_exact(mdp: &Mdp, pi: &TabularPolicy) -> Result<QTable> {
    pi.dims_match(mdp.n_states(), mdp.n_actions())?;
    let b: Vec<f64> = (0..mdp.n_states())
        .map(|s| (0..mdp.n_actions()).map(|a| pi.prob(s, a) * mdp.reward(s, a)).sum())
        .collect();
    let w = solve_state_values(mdp, pi, &b)?;
    Ok(q_from_next_values(mdp, &w))
}

/// One application of the policy-evaluation operator `T^π`.
pub fn apply_policy_operator(mdp: &Mdp, pi: &TabularPolicy, q: &QTable) -> QTable {
    let v = q.policy_values(pi);
    q_from_next_values(mdp, &v.values)
}

/// One application of the Bellman optimality operator.
pub fn apply_optimality_operator(mdp: &Mdp, q: &QTable) -> QTable {
    let v = q.max_values();
    q_from_next_values(mdp, &v.values)
}

/// Value iteration from zero until the Bellman-optimality residual is at most `tol`.
pub fn value_iteration_optimal(mdp: &Mdp, tol: f64) -> Result<QTable> {
    value_iteration_restricted(mdp, None, tol)
}

/// Value iteration where the max at each state ranges only over actions with
/// `allowed[s][a] == true`. Values for disallowed actions are still reported
/// as one-step lookaheads on the restricted value.
pub fn value_iteration_restricted(mdp: &Mdp, allowed: Option<&[Vec<bool>]>, tol: f64) -> Result<QTable> {
    if !(tol > 0.0) {
        return Err(LabError::Config(format!("tolerance must be positive, got {tol}")));
    }
    if let Some(mask) = allowed {
        if mask.len() != mdp.n_states() || mask.iter().any(|r| r.len() != mdp.n_actions() || !r.iter().any(|&b| b)) {
            return Err(LabError::Config("action mask must allow at least one action per state".into()));
        }
    }
    let restricted_max = |q: &QTable| -> Vec<f64> {
        (0..mdp.n_states())
            .map(|s| {
                (0..mdp.n_actions())
                    .filter(|&a| allowed.is_none_or(|m| m[s][a]))
                    .map(|a| q.get(s, a))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    };
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    // Contraction guarantees termination; the cap only guards pathological tol.
    for _ in 0..1_000_000 {
        let next = q_from_next_values(mdp, &restricted_max(&q));
        let residual = next.max_diff(&q);
        q = next;
        if residual <= tol {
            return Ok(q);
        }
    }
    Err(LabError::Internal("value iteration did not reach tolerance".into()))
}

/// Greedy policy with lowest-index tie-breaking.
pub fn greedy_policy(q: &QTable) -> TabularPolicy {
    let actions: Vec<usize> = (0..q.n_states()).map(|s| argmax_first(q.row(s))).collect();
    TabularPolicy::deterministic(q.n_actions(), &actions)
}

pub(crate) fn argmax_first(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `J(π) = ρᵀ V^π`.
pub fn expected_return(mdp: &Mdp, pi: &TabularPolicy) -> Result<f64> {
    let q = policy_evaluation_exact(mdp, pi)?;
    let v = q.policy_values(pi);
    Ok(mdp.initial_dist().iter().zip(&v.values).map(|(r, x)| r * x).sum())
}

/// Exact optimal action values: value iteration followed by policy-iteration
/// polishing, so the result is `Q^{π*}` to linear-solve precision.
pub fn optimal_q_exact(mdp: &Mdp) -> Result<QTable> {
    optimal_q_exact_restricted(mdp, None)
}

/// As [`optimal_q_exact`] with the policy class limited to `allowed` actions.
pub fn optimal_q_exact_restricted(mdp: &Mdp, allowed: Option<&[Vec<bool>]>) -> Result<QTable> {
    let mut q = value_iteration_restricted(mdp, allowed, 1e-9)?;
    let pick = |q: &QTable| -> Vec<usize> {
        (0..q.n_states())
            .map(|s| {
                let mut best: Option<usize> = None;
                for a in 0..q.n_actions() {
                    if allowed.is_none_or(|m| m[s][a]) && best.is_none_or(|b| q.get(s, a) > q.get(s, b)) {
                        best = Some(a);
                    }
                }
                best.unwrap_or(0)
            })
            .collect()
    };
    let mut actions = pick(&q);
    for _ in 0..(mdp.n_states() * mdp.n_actions() + 10) {
        let pi = TabularPolicy::deterministic(mdp.n_actions(), &actions);
        q = policy_evaluation_exact(mdp, &pi)?;
        let next = pick(&q);
        // Only switch on strict improvement beyond rounding to avoid cycling on ties.
        let improved: Vec<usize> = next
            .iter()
            .enumerate()
            .map(|(s, &a)| if q.get(s, a) > q.get(s, actions[s]) + 1e-12 { a } else { actions[s] })
            .collect();
        if improved == actions {
            return Ok(q);
        }
        actions = improved;
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvSpec};

    fn one_state(r: f64, gamma: f64) -> Mdp {
        Mdp::new(vec![vec![vec![1.0]]], vec![vec![r]], gamma, vec![1.0]).unwrap()
    }

    #[test]
    fn geometric_series_single_state() {
        let mdp = one_state(1.0, 0.5);
        let pi = TabularPolicy::uniform(1, 1);
        let q = policy_evaluation_exact(&mdp, &pi).unwrap();
        assert!((q.get(0, 0) - 2.0).abs() < 1e-12);
        assert!((expected_return(&mdp, &pi).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reward_gives_zero_values() {
        let mdp = make_env(&EnvSpec::random(3, 4, 3, 2)).unwrap().map_rewards(|_| 0.0).unwrap();
        let pi = TabularPolicy::uniform(4, 3);
        assert_eq!(policy_evaluation_exact(&mdp, &pi).unwrap().max_abs(), 0.0);
        assert_eq!(value_iteration_optimal(&mdp, 1e-10).unwrap().max_abs(), 0.0);
        assert_eq!(expected_return(&mdp, &pi).unwrap(), 0.0);
    }

    #[test]
    fn exact_evaluation_is_operator_fixed_point() {
        for seed in 0..10 {
            let mdp = make_env(&EnvSpec::random(seed, 6, 3, 3)).unwrap();
            let pi = TabularPolicy::uniform(6, 3);
            let q = policy_evaluation_exact(&mdp, &pi).unwrap();
            assert!(apply_policy_operator(&mdp, &pi, &q).max_diff(&q) <= 1e-10);
            // operator-iteration oracle
            let mut it = QTable::zeros(6, 3);
            for _ in 0..10_000 {
                it = apply_policy_operator(&mdp, &pi, &it);
            }
            assert!(it.max_diff(&q) <= 1e-8);
        }
    }

    #[test]
    fn two_state_chain_closed_form() {
        let mdp = make_env(&EnvSpec::Chain { length: 2, slip_prob: 0.0, gamma: 0.9 }).unwrap();
        let q = value_iteration_optimal(&mdp, 1e-12).unwrap();
        // forward from s0 reaches the rewarding self-loop after one step
        assert!((q.get(0, 0) - 0.9 / 0.1).abs() < 1e-9);
        assert!((q.get(1, 0) - 1.0 / 0.1).abs() < 1e-9);
        // backward from s0 stays put, then goes forward: γ · γ/(1-γ)
        assert!((q.get(0, 1) - 0.9 * 9.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_tie_break_lowest_index() {
        let q = QTable::try_from(vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 2.0]]).unwrap();
        let pi = greedy_policy(&q);
        assert_eq!(pi.row(0), &[1.0, 0.0]);
        assert_eq!(pi.row(1), &[1.0, 0.0]);
        assert_eq!(pi.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn greedy_of_optimal_q_is_optimal_on_gridworld() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.1)).unwrap();
        let q = value_iteration_optimal(&mdp, 1e-12).unwrap();
        let pi = greedy_policy(&q);
        let opt: f64 = mdp
            .initial_dist()
            .iter()
            .zip(optimal_q_exact(&mdp).unwrap().max_values().values)
            .map(|(r, v)| r * v)
            .sum();
        assert!((expected_return(&mdp, &pi).unwrap() - opt).abs() < 1e-6);
    }

    #[test]
    fn greedy_reaches_goal_within_four_steps_noise_free() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.0)).unwrap();
        let pi = greedy_policy(&value_iteration_optimal(&mdp, 1e-12).unwrap());
        let goal = 8;
        for start in 0..9 {
            let mut s = start;
            let mut steps = 0;
            while s != goal {
                let a = (0..4).find(|&a| pi.prob(s, a) == 1.0).unwrap();
                s = mdp.next_dist(s, a).iter().position(|&p| p == 1.0).unwrap();
                steps += 1;
                assert!(steps <= 4, "start {start} needs more than 4 steps");
            }
        }
    }

    #[test]
    fn optimal_return_matches_value_iteration_oracle() {
        let mdp = make_env(&EnvSpec::random(7, 5, 3, 2)).unwrap();
        let qstar = value_iteration_optimal(&mdp, 1e-12).unwrap();
        let pi = greedy_policy(&qstar);
        let oracle: f64 = mdp.initial_dist().iter().zip(qstar.max_values().values).map(|(r, v)| r * v).sum();
        assert!((expected_return(&mdp, &pi).unwrap() - oracle).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(Mdp::new(vec![vec![vec![0.5]]], vec![vec![0.0]], 0.9, vec![1.0]).is_err());
        assert!(Mdp::new(vec![vec![vec![1.0]]], vec![vec![0.0]], 1.0, vec![1.0]).is_err());
        assert!(Mdp::new(vec![vec![vec![1.0]]], vec![vec![0.0]], 0.9, vec![0.7]).is_err());
        assert!(TabularPolicy::from_rows(vec![vec![0.6, 0.6]]).is_err());
        assert!(TabularPolicy::from_rows(vec![vec![-0.5, 1.5]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.1)).unwrap();
        let text = serde_json::to_string(&mdp).unwrap();
        let back: Mdp = serde_json::from_str(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn kl_row_conventions() {
        assert_eq!(kl_row(&[0.0, 1.0], &[0.5, 0.5]).unwrap(), (2.0f64).ln());
        assert_eq!(kl_row(&[0.5, 0.5], &[1.0, 0.0]), Err(1));
        assert_eq!(kl_row(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
    }
}
