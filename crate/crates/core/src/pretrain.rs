//! Offline data collection and the pretraining routes: behavior cloning,
//! fitted Q evaluation, and in-sample fitted Q-iteration.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::{DOWN, LEFT, RIGHT, UP};
use crate::error::{LabError, Result};
use crate::mdp::{greedy_policy, optimal_q_exact, Mdp, QTable, TabularPolicy};
use crate::rng::{self, sample_categorical};

/// Episodes are cut after this many steps and restart from the initial distribution.
pub const HORIZON: usize = 200;

/// Probability each action receives when a pretrained policy is softened.
pub const SOFTEN_MASS: f64 = 1e-3;

/// Default cap on FQE / FQI sweeps; both stop early once a sweep changes nothing.
pub const DEFAULT_FIT_ITERS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub source_seed: u64,
    pub behavior_descriptor: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainMethod {
    BcFqe,
    InsampleFqi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainResult {
    pub policy: TabularPolicy,
    pub q: QTable,
    pub method: PretrainMethod,
}

/// Data-collection policy as written in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BehaviorSpec {
    Uniform,
    /// Greedy with respect to the exact optimal values, mixed with `epsilon` uniform.
    Optimal { epsilon: f64 },
    /// Gridworld boustrophedon walk (see [`serpentine_actions`]), mixed with `epsilon` uniform.
    Serpentine { width: usize, height: usize, epsilon: f64 },
    /// Explicit probability table.
    Table { probs: TabularPolicy },
}

impl BehaviorSpec {
    /// Compact command-line form: `uniform`, `optimal:0.1`, `serpentine:3x3:0.1`.
    /// Anything starting with `{` is read as JSON.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.starts_with('{') {
            return serde_json::from_str(text).map_err(|e| LabError::Config(format!("bad behavior JSON: {e}")));
        }
        let bad = |msg: &str| LabError::Config(format!("bad behavior spec `{text}`: {msg}"));
        let eps = |v: Option<&str>| -> Result<f64> { v.unwrap_or("0").parse().map_err(|_| bad("epsilon is not a number")) };
        let parts: Vec<&str> = text.split(':').collect();
        match parts.as_slice() {
            ["uniform"] => Ok(BehaviorSpec::Uniform),
            ["optimal", rest @ ..] if rest.len() <= 1 => Ok(BehaviorSpec::Optimal { epsilon: eps(rest.first().copied())? }),
            ["serpentine", dims, rest @ ..] if rest.len() <= 1 => {
                let (w, h) = dims.split_once('x').ok_or_else(|| bad("expected WxH"))?;
                let int = |v: &str| v.parse::<usize>().map_err(|_| bad("expected an integer"));
                Ok(BehaviorSpec::Serpentine { width: int(w)?, height: int(h)?, epsilon: eps(rest.first().copied())? })
            }
            _ => Err(bad("expected uniform, optimal[:EPS] or serpentine:WxH[:EPS]")),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            BehaviorSpec::Uniform => "uniform".into(),
            BehaviorSpec::Optimal { epsilon } => format!("optimal(eps={epsilon})"),
            BehaviorSpec::Serpentine { width, height, epsilon } => format!("serpentine({width}x{height},eps={epsilon})"),
            BehaviorSpec::Table { .. } => "table".into(),
        }
    }

    pub fn build(&self, mdp: &Mdp) -> Result<TabularPolicy> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let eps_mix = |pi: TabularPolicy, eps: f64| -> Result<TabularPolicy> {
            if !(0.0..=1.0).contains(&eps) {
                return Err(LabError::Config(format!("behavior epsilon must lie in [0, 1], got {eps}")));
            }
            Ok(pi.soften(eps))
        };
        let pi = match self {
            BehaviorSpec::Uniform => TabularPolicy::uniform(ns, na),
            BehaviorSpec::Optimal { epsilon } => eps_mix(greedy_policy(&optimal_q_exact(mdp)?), *epsilon)?,
            BehaviorSpec::Serpentine { width, height, epsilon } => {
                if width * height != ns || na != 4 {
                    return Err(LabError::Config(format!(
                        "serpentine behavior needs a {width}x{height} gridworld, the MDP has {ns} states and {na} actions"
                    )));
                }
                eps_mix(TabularPolicy::deterministic(4, &serpentine_actions(*width, *height)), *epsilon)?
            }
            BehaviorSpec::Table { probs } => probs.clone(),
        };
        if pi.n_states() != ns || pi.n_actions() != na {
            return Err(LabError::Config("behavior policy does not match the MDP dimensions".into()));
        }
        Ok(pi)
    }
}

/// Row-by-row sweep of a gridworld from the origin: even rows run right, odd
/// rows run left, each row end steps down, and the bottom row heads to the far
/// corner. On grids at least 2 wide and 3 tall this is strictly longer than the
/// shortest route to that corner.
pub fn serpentine_actions(width: usize, height: usize) -> Vec<usize> {
    let mut actions = vec![UP; width * height];
    for y in 0..height {
        for x in 0..width {
            actions[y * width + x] = if y + 1 == height {
                if x + 1 < width {
                    RIGHT
                } else {
                    UP
                }
            } else if y % 2 == 0 {
                if x + 1 < width {
                    RIGHT
                } else {
                    DOWN
                }
            } else if x > 0 {
                LEFT
            } else {
                DOWN
            };
        }
    }
    actions
}

/// Rolls `behavior` out from the initial distribution, cutting episodes at [`HORIZON`].
pub fn collect_dataset(mdp: &Mdp, behavior: &TabularPolicy, n_transitions: usize, seed: u64) -> Result<TransitionDataset> {
    collect_with_descriptor(mdp, behavior, n_transitions, seed, "table")
}

pub fn collect_with_descriptor(
    mdp: &Mdp,
    behavior: &TabularPolicy,
    n_transitions: usize,
    seed: u64,
    descriptor: &str,
) -> Result<TransitionDataset> {
    if n_transitions == 0 {
        return Err(LabError::Config("n_transitions must be >= 1".into()));
    }
    if behavior.n_states() != mdp.n_states() || behavior.n_actions() != mdp.n_actions() {
        return Err(LabError::Config("behavior policy does not match the MDP dimensions".into()));
    }
    let mut env_rng = rng::stream(seed, 0, "collect-env");
    let mut act_rng = rng::stream(seed, 0, "collect-action");
    let mut transitions = Vec::with_capacity(n_transitions);
    let mut s = sample_categorical(&mut env_rng, mdp.initial_dist());
    let mut t = 0;
    while transitions.len() < n_transitions {
        let a = sample_categorical(&mut act_rng, behavior.row(s));
        let s_next = sample_categorical(&mut env_rng, mdp.next_dist(s, a));
        transitions.push(Transition { s, a, r: mdp.reward(s, a), s_next, done: false });
        t += 1;
        if t == HORIZON {
            t = 0;
            s = sample_categorical(&mut env_rng, mdp.initial_dist());
        } else {
            s = s_next;
        }
    }
    Ok(TransitionDataset { transitions, source_seed: seed, behavior_descriptor: descriptor.to_string() })
}

fn check_ids(data: &TransitionDataset, n_states: usize, n_actions: usize) -> Result<()> {
    for (i, t) in data.transitions.iter().enumerate() {
        if t.s >= n_states || t.s_next >= n_states || t.a >= n_actions {
            return Err(LabError::Data(format!(
                "transition {i} ({} {} -> {}) lies outside a {n_states}x{n_actions} MDP",
                t.s, t.a, t.s_next
            )));
        }
        if !t.r.is_finite() {
            return Err(LabError::Data(format!("transition {i} has a non-finite reward")));
        }
    }
    Ok(())
}

/// `π(a|s) = count(s,a) / count(s)`; unvisited states get the uniform row.
pub fn behavior_cloning(data: &TransitionDataset, n_states: usize, n_actions: usize) -> Result<TabularPolicy> {
    check_ids(data, n_states, n_actions)?;
    let mut counts = vec![vec![0.0; n_actions]; n_states];
    for t in &data.transitions {
        counts[t.s][t.a] += 1.0;
    }
    let rows = counts
        .into_iter()
        .map(|row| {
            let total: f64 = row.iter().sum();
            if total == 0.0 {
                vec![1.0 / n_actions as f64; n_actions]
            } else {
                row.into_iter().map(|c| c / total).collect()
            }
        })
        .collect();
    TabularPolicy::from_rows(rows)
}

/// Per-pair averages of the dataset: the Bellman backups used by FQE and FQI
/// are means over transitions from `(s, a)`, so they only depend on these.
struct EmpiricalModel {
    n_states: usize,
    n_actions: usize,
    /// Mean reward per pair; `None` when unseen.
    mean_reward: Vec<Option<f64>>,
    /// Non-terminal successors with their empirical weight.
    successors: Vec<Vec<(usize, f64)>>,
    /// `supported[s][a]`: action `a` observed at `s`.
    supported: Vec<Vec<bool>>,
}

impl EmpiricalModel {
    fn new(data: &TransitionDataset, n_states: usize, n_actions: usize) -> Result<Self> {
        check_ids(data, n_states, n_actions)?;
        let n = n_states * n_actions;
        let mut count = vec![0usize; n];
        let mut reward_sum = vec![0.0; n];
        let mut next_count = vec![std::collections::BTreeMap::<usize, usize>::new(); n];
        for t in &data.transitions {
            let i = t.s * n_actions + t.a;
            count[i] += 1;
            reward_sum[i] += t.r;
            if !t.done {
                *next_count[i].entry(t.s_next).or_default() += 1;
            }
        }
        let mean_reward = (0..n).map(|i| (count[i] > 0).then(|| reward_sum[i] / count[i] as f64)).collect();
        let successors = (0..n)
            .map(|i| next_count[i].iter().map(|(&sp, &c)| (sp, c as f64 / count[i] as f64)).collect())
            .collect();
        let supported = (0..n_states).map(|s| (0..n_actions).map(|a| count[s * n_actions + a] > 0).collect()).collect();
        Ok(EmpiricalModel { n_states, n_actions, mean_reward, successors, supported })
    }

    /// Iterates `Q ← r̄ + γ Σ w · next_value(Q, s')` on seen pairs until a sweep changes
    /// no entry by more than `1e-13` or `n_iters` sweeps have run. Unseen pairs stay 0.
    fn iterate(&self, gamma: f64, n_iters: usize, next_value: impl Fn(&QTable, usize) -> f64) -> QTable {
        let mut q = QTable::zeros(self.n_states, self.n_actions);
        let mut v = vec![0.0; self.n_states];
        for _ in 0..n_iters {
            for (s, vs) in v.iter_mut().enumerate() {
                *vs = next_value(&q, s);
            }
            let mut change: f64 = 0.0;
            for (i, slot) in q.values_mut().iter_mut().enumerate() {
                if let Some(r) = self.mean_reward[i] {
                    let new = r + gamma * self.successors[i].iter().map(|&(sp, w)| w * v[sp]).sum::<f64>();
                    change = change.max((new - *slot).abs());
                    *slot = new;
                }
            }
            if change <= 1e-13 {
                break;
            }
        }
        q
    }
}

fn check_fit_args(gamma: f64, n_iters: usize) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(LabError::Config(format!("gamma must lie in [0, 1), got {gamma}")));
    }
    if n_iters == 0 {
        return Err(LabError::Config("n_iters must be >= 1".into()));
    }
    Ok(())
}

/// Fitted Q evaluation of `pi` on the dataset; unseen pairs are held at 0.
pub fn fitted_q_evaluation(
    data: &TransitionDataset,
    pi: &TabularPolicy,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    n_iters: usize,
) -> Result<QTable> {
    check_fit_args(gamma, n_iters)?;
    if pi.n_states() != n_states || pi.n_actions() != n_actions {
        return Err(LabError::Config("policy does not match the dataset dimensions".into()));
    }
    let model = EmpiricalModel::new(data, n_states, n_actions)?;
    Ok(model.iterate(gamma, n_iters, |q, s| q.row(s).iter().zip(pi.row(s)).map(|(x, p)| p * x).sum()))
}

/// Fitted Q-iteration whose max ranges only over actions observed at the next
/// state (no observed action means the next state bootstraps 0).
pub fn insample_q_iteration(
    data: &TransitionDataset,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    n_iters: usize,
) -> Result<(QTable, Vec<Vec<bool>>)> {
    check_fit_args(gamma, n_iters)?;
    let model = EmpiricalModel::new(data, n_states, n_actions)?;
    let q = model.iterate(gamma, n_iters, |q, s| {
        q.row(s)
            .iter()
            .zip(&model.supported[s])
            .filter(|(_, &ok)| ok)
            .map(|(&x, _)| x)
            .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
            .unwrap_or(0.0)
    });
    Ok((q, model.supported))
}

/// Gives every action at least [`SOFTEN_MASS`] so later KL terms stay finite.
pub fn soften_pretrained(pi: &TabularPolicy) -> TabularPolicy {
    pi.soften(SOFTEN_MASS * pi.n_actions() as f64)
}

/// In-sample pretraining: π₀ is greedy within the dataset support (uniform at
/// states with no data), then softened; Q⁰ is the FQE of that π₀.
pub fn insample_fqi(
    data: &TransitionDataset,
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    n_iters: usize,
) -> Result<PretrainResult> {
    let (q_fit, supported) = insample_q_iteration(data, n_states, n_actions, gamma, n_iters)?;
    let rows = (0..n_states)
        .map(|s| {
            let mut row = vec![0.0; n_actions];
            let best = (0..n_actions)
                .filter(|&a| supported[s][a])
                .fold(None, |best: Option<usize>, a| match best {
                    Some(b) if q_fit.get(s, b) >= q_fit.get(s, a) => Some(b),
                    _ => Some(a),
                });
            match best {
                Some(a) => row[a] = 1.0,
                None => row.fill(1.0 / n_actions as f64),
            }
            row
        })
        .collect();
    let policy = soften_pretrained(&TabularPolicy::from_rows(rows)?);
    let q = fitted_q_evaluation(data, &policy, n_states, n_actions, gamma, n_iters)?;
    Ok(PretrainResult { policy, q, method: PretrainMethod::InsampleFqi })
}

/// Behavior cloning followed by FQE of the (softened) cloned policy.
pub fn bc_fqe(data: &TransitionDataset, n_states: usize, n_actions: usize, gamma: f64, n_iters: usize) -> Result<PretrainResult> {
    let policy = soften_pretrained(&behavior_cloning(data, n_states, n_actions)?);
    let q = fitted_q_evaluation(data, &policy, n_states, n_actions, gamma, n_iters)?;
    Ok(PretrainResult { policy, q, method: PretrainMethod::BcFqe })
}

pub fn pretrain(method: PretrainMethod, data: &TransitionDataset, mdp: &Mdp) -> Result<PretrainResult> {
    let (ns, na, g) = (mdp.n_states(), mdp.n_actions(), mdp.discount());
    match method {
        PretrainMethod::BcFqe => bc_fqe(data, ns, na, g, DEFAULT_FIT_ITERS),
        PretrainMethod::InsampleFqi => insample_fqi(data, ns, na, g, DEFAULT_FIT_ITERS),
    }
}

/// Positional decimal with 17 significant digits, which round-trips any f64.
pub fn format_decimal17(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.16e}");
    let exp: i32 = sci.rsplit('e').next().and_then(|e| e.parse().ok()).unwrap_or(0);
    let decimals = (16 - exp).max(0) as usize;
    format!("{x:.decimals$}")
}

const HEADER_PREFIX: &str = "# proto-lab dataset v1 seed=";

impl TransitionDataset {
    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX}{}\n", self.source_seed);
        if !self.behavior_descriptor.is_empty() {
            let _ = writeln!(out, "# behavior={}", self.behavior_descriptor);
        }
        for t in &self.transitions {
            let _ = writeln!(out, "{} {} {} {} {}", t.s, t.a, format_decimal17(t.r), t.s_next, u8::from(t.done));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LabError::Data("empty dataset file".into()))?;
        let seed = header
            .strip_prefix(HEADER_PREFIX)
            .and_then(|s| s.trim().parse::<u64>().ok())
            .ok_or_else(|| LabError::Data(format!("bad dataset header: {header:?}")))?;
        let mut behavior_descriptor = String::new();
        let mut transitions = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(b) = comment.trim().strip_prefix("behavior=") {
                    behavior_descriptor = b.to_string();
                }
                continue;
            }
            let bad = || LabError::Data(format!("line {}: expected `s a r s_next done`, got {line:?}", i + 2));
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(bad());
            }
            let done = match fields[4] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            };
            transitions.push(Transition {
                s: fields[0].parse().map_err(|_| bad())?,
                a: fields[1].parse().map_err(|_| bad())?,
                r: fields[2].parse().map_err(|_| bad())?,
                s_next: fields[3].parse().map_err(|_| bad())?,
                done,
            });
        }
        Ok(TransitionDataset { transitions, source_seed: seed, behavior_descriptor })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvSpec};
    use crate::mdp::{expected_return, policy_evaluation_exact};

    fn dataset(ts: &[(usize, usize, f64, usize, bool)]) -> TransitionDataset {
        TransitionDataset {
            transitions: ts.iter().map(|&(s, a, r, s_next, done)| Transition { s, a, r, s_next, done }).collect(),
            source_seed: 0,
            behavior_descriptor: String::new(),
        }
    }

    /// Every (s, a) once with its deterministic successor.
    fn exhaustive(mdp: &Mdp) -> TransitionDataset {
        let mut ts = Vec::new();
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let sp = mdp.next_dist(s, a).iter().position(|&p| p == 1.0).unwrap();
                ts.push((s, a, mdp.reward(s, a), sp, false));
            }
        }
        dataset(&ts)
    }

    #[test]
    fn collection_is_deterministic_and_sized() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.1)).unwrap();
        let pi = TabularPolicy::uniform(9, 4);
        let a = collect_dataset(&mdp, &pi, 500, 3).unwrap();
        assert_eq!(a, collect_dataset(&mdp, &pi, 500, 3).unwrap());
        assert_eq!(collect_dataset(&mdp, &pi, 5, 3).unwrap().transitions.len(), 5);
        assert!(collect_dataset(&mdp, &pi, 0, 3).is_err());
    }

    #[test]
    fn bc_frequencies() {
        let d = dataset(&[(0, 0, 0.0, 1, false), (0, 0, 0.0, 1, false), (0, 0, 0.0, 1, false), (0, 1, 0.0, 1, false)]);
        let pi = behavior_cloning(&d, 2, 2).unwrap();
        assert_eq!(pi.row(0), &[0.75, 0.25]);
        assert_eq!(pi.row(1), &[0.5, 0.5]);
    }

    #[test]
    fn bc_recovers_deterministic_behavior() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.2)).unwrap();
        let actions = serpentine_actions(3, 3);
        let behavior = TabularPolicy::deterministic(4, &actions);
        let d = collect_dataset(&mdp, &behavior, 10_000, 1).unwrap();
        let pi = behavior_cloning(&d, 9, 4).unwrap();
        for t in &d.transitions {
            assert_eq!(pi.row(t.s), behavior.row(t.s));
        }
    }

    #[test]
    fn fqe_full_coverage_matches_exact() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.0)).unwrap();
        let pi = TabularPolicy::from_rows(vec![vec![0.1, 0.4, 0.2, 0.3]; 9]).unwrap();
        let q = fitted_q_evaluation(&exhaustive(&mdp), &pi, 9, 4, 0.9, 1000).unwrap();
        assert!(q.max_diff(&policy_evaluation_exact(&mdp, &pi).unwrap()) <= 1e-6);
    }

    #[test]
    fn fqe_conventions() {
        let d = dataset(&[(0, 1, 1.0, 1, true)]);
        let q = fitted_q_evaluation(&d, &TabularPolicy::uniform(2, 2), 2, 2, 0.7, 10).unwrap();
        assert_eq!(q.get(0, 1), 1.0);
        assert_eq!(q.get(0, 0), 0.0);
        assert_eq!(q.get(1, 0), 0.0);
    }

    #[test]
    fn insample_full_coverage_matches_optimal() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.0)).unwrap();
        let (q, _) = insample_q_iteration(&exhaustive(&mdp), 9, 4, 0.9, 10_000).unwrap();
        assert!(q.max_diff(&optimal_q_exact(&mdp).unwrap()) <= 1e-6);
    }

    #[test]
    fn insample_restricted_support_is_suboptimal() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.0)).unwrap();
        let behavior = TabularPolicy::deterministic(4, &serpentine_actions(3, 3));
        let d = collect_dataset(&mdp, &behavior, 2_000, 0).unwrap();
        let pre = insample_fqi(&d, 9, 4, 0.9, 10_000).unwrap();
        let seen: Vec<Vec<bool>> =
            (0..9).map(|s| (0..4).map(|a| d.transitions.iter().any(|t| t.s == s && t.a == a)).collect()).collect();
        for s in 0..9 {
            let outside: f64 = (0..4).filter(|&a| !seen[s][a]).map(|a| pre.policy.prob(s, a)).sum();
            assert!(outside <= SOFTEN_MASS * 4.0);
        }
        let restricted = crate::mdp::optimal_q_exact_restricted(&mdp, Some(&seen)).unwrap();
        let opt = expected_return(&mdp, &greedy_policy(&optimal_q_exact(&mdp).unwrap())).unwrap();
        let ret = expected_return(&mdp, &pre.policy).unwrap();
        let restricted_ret: f64 = restricted.max_values().values[0];
        assert!(ret < opt - 1e-3);
        assert!(ret <= restricted_ret + 1e-9);
    }

    #[test]
    fn insample_single_transition() {
        let d = dataset(&[(1, 2, 0.5, 0, false)]);
        let pre = insample_fqi(&d, 3, 3, 0.9, 100).unwrap();
        assert!(pre.policy.prob(1, 2) >= 1.0 - 3.0 * SOFTEN_MASS);
        assert_eq!(pre.policy.row(0), &[1.0 / 3.0; 3]);
        assert!(pre.policy.is_strictly_positive());
    }

    #[test]
    fn dataset_text_round_trip() {
        let mut d = dataset(&[(0, 1, 0.1, 2, false), (2, 0, 1.0 / 3.0, 1, true), (1, 1, -2.5e-7, 0, false)]);
        d.source_seed = 42;
        d.behavior_descriptor = "uniform".into();
        let text = d.to_text();
        assert!(text.starts_with("# proto-lab dataset v1 seed=42\n"));
        assert!(text.contains("0.33333333333333331"));
        assert_eq!(TransitionDataset::from_text(&text).unwrap(), d);
        assert!(TransitionDataset::from_text("0 1 0.5 2 0\n").is_err());
    }

    #[test]
    fn decimal17_formats() {
        assert_eq!(format_decimal17(1.0), "1.0000000000000000");
        assert_eq!(format_decimal17(0.0), "0");
        assert_eq!(format_decimal17(123456.0), "123456.00000000000");
        for x in [0.1, 1e-5, 3.0e10, -7.25, f64::MIN_POSITIVE * 1e10] {
            assert_eq!(format_decimal17(x).parse::<f64>().unwrap(), x);
            assert!(!format_decimal17(x).contains('e'));
        }
    }

    #[test]
    fn serpentine_is_longer_than_shortest_route() {
        let mdp = make_env(&EnvSpec::gridworld(3, 3, 0.0)).unwrap();
        let serp = TabularPolicy::deterministic(4, &serpentine_actions(3, 3));
        let opt = optimal_q_exact(&mdp).unwrap().max_values().values[0];
        assert!(expected_return(&mdp, &serp).unwrap() < opt - 0.1);
    }
}
