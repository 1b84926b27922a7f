//! Deterministic-policy variant: squared-distance regularization toward the
//! reference action, value rescaling by `λ = β / mean|Q|`, and exhaustive
//! argmax over a fixed action grid on a finite-state toy environment.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::finetune::{FinetuneRecord, FinetuneTrace};
use crate::mdp::{expected_return, Mdp, QTable, TabularPolicy};
use crate::pretrain::{Transition, HORIZON};
use crate::regularized::{advance_schedule, ScheduleState};
use crate::rng::{self, sample_categorical};

/// Floor on `mean|Q|` in [`lambda_scale`].
pub const LAMBDA_FLOOR: f64 = 1e-8;

/// Probability of moving on to the next state; otherwise the state repeats.
pub const TOY_ADVANCE_PROB: f64 = 0.8;

/// Cycle of `n_states` states with a per-state target action.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousToyEnv {
    pub n_states: usize,
    pub target_action: Vec<f64>,
    pub reward_scale: f64,
    pub gamma: f64,
}

impl ContinuousToyEnv {
    /// Targets spread over `[-0.6, 0.6]`, interleaved so neighbouring states differ.
    pub fn new(n_states: usize, reward_scale: f64, gamma: f64) -> Result<Self> {
        if n_states == 0 {
            return Err(LabError::Config("n_states must be positive".into()));
        }
        if !(reward_scale > 0.0 && reward_scale.is_finite()) {
            return Err(LabError::Config(format!("reward_scale must be positive, got {reward_scale}")));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(LabError::Config(format!("gamma must lie in (0, 1), got {gamma}")));
        }
        let half = n_states.div_ceil(2);
        let target_action = (0..n_states)
            .map(|s| {
                let rank = if s % 2 == 0 { s / 2 } else { half + s / 2 };
                if n_states == 1 {
                    0.0
                } else {
                    -0.6 + 1.2 * rank as f64 / (n_states - 1) as f64
                }
            })
            .collect();
        Ok(ContinuousToyEnv { n_states, target_action, reward_scale, gamma })
    }

    pub fn reward(&self, s: usize, a: f64) -> f64 {
        let d = a.clamp(-1.0, 1.0) - self.target_action[s];
        self.reward_scale * (1.0 - d * d)
    }

    pub fn next_dist(&self, s: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        row[(s + 1) % self.n_states] += TOY_ADVANCE_PROB;
        row[s] += 1.0 - TOY_ADVANCE_PROB;
        row
    }

    /// `r_max / (1 − γ)`.
    pub fn v_max(&self) -> f64 {
        self.reward_scale / (1.0 - self.gamma)
    }

    /// Single-action MDP induced by a fixed deterministic policy, starting in state 0.
    fn induced_mdp(&self, pi: &DeterministicPolicy) -> Result<Mdp> {
        let transition = (0..self.n_states).map(|s| vec![self.next_dist(s)]).collect();
        let reward = (0..self.n_states).map(|s| vec![self.reward(s, pi.action[s])]).collect();
        let mut rho = vec![0.0; self.n_states];
        rho[0] = 1.0;
        Mdp::new(transition, reward, self.gamma, rho)
    }

    pub fn expected_return(&self, pi: &DeterministicPolicy) -> Result<f64> {
        let mdp = self.induced_mdp(pi)?;
        expected_return(&mdp, &TabularPolicy::uniform(self.n_states, 1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub action: Vec<f64>,
}

impl DeterministicPolicy {
    pub fn constant(n_states: usize, a: f64) -> Self {
        DeterministicPolicy { action: vec![a.clamp(-1.0, 1.0); n_states] }
    }

    pub fn mean_abs_error(&self, target: &[f64]) -> f64 {
        self.action.iter().zip(target).map(|(a, t)| (a - t).abs()).sum::<f64>() / target.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub resolution: usize,
}

impl Default for ActionGrid {
    fn default() -> Self {
        ActionGrid { resolution: 201 }
    }
}

impl ActionGrid {
    pub fn new(resolution: usize) -> Result<Self> {
        if resolution < 3 || resolution.is_multiple_of(2) {
            return Err(LabError::Config(format!("grid resolution must be odd and >= 3, got {resolution}")));
        }
        Ok(ActionGrid { resolution })
    }

    pub fn spacing(&self) -> f64 {
        2.0 / (self.resolution - 1) as f64
    }

    pub fn point(&self, i: usize) -> f64 {
        -1.0 + 2.0 * i as f64 / (self.resolution - 1) as f64
    }

    pub fn nearest(&self, a: f64) -> usize {
        let x = (a.clamp(-1.0, 1.0) + 1.0) / 2.0 * (self.resolution - 1) as f64;
        (x.round() as usize).min(self.resolution - 1)
    }
}

/// `β / mean|q|`, with the mean floored at [`LAMBDA_FLOOR`].
pub fn lambda_scale(q_values: &[f64], beta: f64) -> Result<f64> {
    if q_values.is_empty() {
        return Err(LabError::Contract("lambda_scale needs at least one value".into()));
    }
    let mean = q_values.iter().map(|q| q.abs()).sum::<f64>() / q_values.len() as f64;
    Ok(beta / mean.max(LAMBDA_FLOOR))
}

/// Grid index maximizing `lam·q[i] − alpha·(x_i − center)²`; ties go to the
/// point nearest `center`, then to the lower index.
pub fn regularized_argmax(q_row: &[f64], center: f64, alpha: f64, lam: f64, grid: &ActionGrid) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for (i, &q) in q_row.iter().enumerate() {
        let d = grid.point(i) - center;
        let val = lam * q - alpha * d * d;
        let better = val > best_val || (val == best_val && (grid.point(i) - center).abs() < (grid.point(best) - center).abs());
        if better {
            best = i;
            best_val = val;
        }
    }
    best
}

/// Per state, the grid action maximizing `lam·q(s,a) − alpha·(a − pi_k(s))²`.
pub fn mse_regularized_improvement(
    q: &QTable,
    pi_k: &DeterministicPolicy,
    alpha: f64,
    lam: f64,
    grid: &ActionGrid,
) -> Result<DeterministicPolicy> {
    if q.n_actions() != grid.resolution || q.n_states() != pi_k.action.len() {
        return Err(LabError::Config("value table does not match the grid or policy".into()));
    }
    let action =
        (0..q.n_states()).map(|s| grid.point(regularized_argmax(q.row(s), pi_k.action[s], alpha, lam, grid))).collect();
    Ok(DeterministicPolicy { action })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterministicConfig {
    pub lr_q: f64,
    pub batch: usize,
    pub steps: u64,
    pub schedule: ScheduleState,
    pub tau: f64,
    pub seed: u64,
    pub top_seed: u64,
    pub eval_interval: Option<u64>,
    pub beta: f64,
    pub grid: ActionGrid,
    /// Overrides the per-batch `λ` (regression checks only).
    pub fixed_lambda: Option<f64>,
}

impl DeterministicConfig {
    pub fn new(alpha0: f64, steps: u64, seed: u64) -> Result<Self> {
        Ok(DeterministicConfig {
            lr_q: 0.5,
            batch: 32,
            steps,
            schedule: ScheduleState::new(alpha0, 0.9, steps.max(1))?,
            tau: 5e-3,
            seed,
            top_seed: 0,
            eval_interval: None,
            beta: 4.0,
            grid: ActionGrid::default(),
            fixed_lambda: None,
        })
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_q > 0.0 && self.lr_q <= 1.0) {
            return Err(LabError::Config(format!("lr_q must lie in (0, 1], got {}", self.lr_q)));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(LabError::Config("batch and steps must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LabError::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LabError::Config(format!("beta must be positive, got {}", self.beta)));
        }
        if self.eval_interval == Some(0) {
            return Err(LabError::Config("eval_interval must be >= 1".into()));
        }
        ActionGrid::new(self.grid.resolution)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterministicOutcome {
    pub trace: FinetuneTrace,
    pub policy: DeterministicPolicy,
    pub reference: DeterministicPolicy,
    pub q: QTable,
    /// Grid index acted on at every environment step.
    pub actions_taken: Vec<usize>,
}

/// Online loop: act with the current policy snapped to the grid, TD on the
/// state × grid table (initialized at `v_max`, so untried actions look best),
/// improvement on minibatch states, Polyak on the action vector.
pub fn proto_td3_finetune(
    env: &ContinuousToyEnv,
    pi0: &DeterministicPolicy,
    cfg: &DeterministicConfig,
) -> Result<DeterministicOutcome> {
    cfg.validate()?;
    if pi0.action.len() != env.n_states || pi0.action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
        return Err(LabError::Config("initial policy must give one action in [-1, 1] per state".into()));
    }
    let grid = cfg.grid;
    let mut env_rng = rng::stream(cfg.top_seed, cfg.seed, "env");
    let mut batch_rng = rng::stream(cfg.top_seed, cfg.seed, "minibatch");
    let ns = env.n_states;
    let next: Vec<Vec<f64>> = (0..ns).map(|s| env.next_dist(s)).collect();
    let mut q = QTable::from_fn(ns, grid.resolution, |_, _| env.v_max());
    let mut pi = pi0.clone();
    let mut reference = pi0.clone();
    let mut schedule = cfg.schedule.clone();
    let eval_every = cfg.eval_interval.unwrap_or(cfg.steps / 200).max(1);
    let mut buffer: Vec<Transition> = Vec::new();
    let mut records = Vec::new();
    let mut actions_taken = Vec::with_capacity(cfg.steps as usize);

    let mut s = 0;
    let mut t_episode = 0;
    for step in 1..=cfg.steps {
        let a = grid.nearest(pi.action[s]);
        actions_taken.push(a);
        let s_next = sample_categorical(&mut env_rng, &next[s]);
        buffer.push(Transition { s, a, r: env.reward(s, grid.point(a)), s_next, done: false });
        t_episode += 1;
        if t_episode == HORIZON {
            t_episode = 0;
            s = 0;
        } else {
            s = s_next;
        }

        let alpha = schedule.current_alpha;
        let batch: Vec<Transition> = (0..cfg.batch).map(|_| buffer[batch_rng.gen_range(0..buffer.len())]).collect();

        let targets: Vec<f64> = batch
            .iter()
            .map(|t| {
                let sp = t.s_next;
                let d = pi.action[sp] - reference.action[sp];
                t.r + env.gamma * (q.get(sp, grid.nearest(reference.action[sp])) - alpha * d * d)
            })
            .collect();
        for (t, target) in batch.iter().zip(targets) {
            let old = q.get(t.s, t.a);
            q.set(t.s, t.a, old + cfg.lr_q * (target - old));
        }

        let lam = match cfg.fixed_lambda {
            Some(l) => l,
            None => lambda_scale(&batch.iter().map(|t| q.get(t.s, t.a)).collect::<Vec<_>>(), cfg.beta)?,
        };
        let mut seen: Vec<usize> = Vec::new();
        for t in &batch {
            if !seen.contains(&t.s) {
                seen.push(t.s);
                pi.action[t.s] = grid.point(regularized_argmax(q.row(t.s), reference.action[t.s], alpha, lam, &grid));
            }
        }
        for (r, p) in reference.action.iter_mut().zip(&pi.action) {
            *r = (cfg.tau * p + (1.0 - cfg.tau) * *r).clamp(-1.0, 1.0);
        }
        schedule = advance_schedule(&schedule);

        if step % eval_every == 0 {
            let tv = pi.action.iter().zip(&pi0.action).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let mse = pi.action.iter().zip(&reference.action).map(|(a, b)| (a - b) * (a - b)).fold(0.0, f64::max);
            records.push(FinetuneRecord { env_step: step, ret: env.expected_return(&pi)?, alpha, tv_to_pi0: tv, max_kl: mse });
        }
    }
    Ok(DeterministicOutcome {
        trace: FinetuneTrace { records, divergence_column: "max_mse".into() },
        policy: pi,
        reference,
        q,
        actions_taken,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_examples() {
        assert_eq!(lambda_scale(&[2.0, -2.0, 2.0, -2.0], 4.0).unwrap(), 2.0);
        assert!((lambda_scale(&[377.2589], 4.0).unwrap() - 0.010603).abs() < 1e-6);
        assert_eq!(lambda_scale(&[0.0], 4.0).unwrap(), 4.0 / LAMBDA_FLOOR);
        assert!(lambda_scale(&[], 4.0).is_err());
    }

    #[test]
    fn improvement_limits() {
        let grid = ActionGrid::default();
        let q = QTable::from_fn(1, 201, |_, i| {
            let a = grid.point(i);
            -(a - 0.5) * (a - 0.5)
        });
        let pi = DeterministicPolicy { action: vec![-0.5] };
        let mid = mse_regularized_improvement(&q, &pi, 1.0, 1.0, &grid).unwrap();
        assert!(mid.action[0].abs() < 1e-12);
        let frozen = mse_regularized_improvement(&q, &DeterministicPolicy { action: vec![-0.503] }, 1e9, 1.0, &grid).unwrap();
        assert!((frozen.action[0] + 0.5).abs() < 1e-12);
        let greedy = mse_regularized_improvement(&q, &pi, 0.0, 1.0, &grid).unwrap();
        assert!((greedy.action[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn grid_snapping() {
        let g = ActionGrid::default();
        assert_eq!(g.point(100), 0.0);
        assert_eq!(g.nearest(0.6), 160);
        assert_eq!(g.nearest(-2.0), 0);
        assert!(ActionGrid::new(4).is_err());
        assert!(ActionGrid::new(1).is_err());
    }

    #[test]
    fn toy_targets_are_staggered() {
        let env = ContinuousToyEnv::new(4, 1.0, 0.9).unwrap();
        assert_eq!(env.target_action.len(), 4);
        let expect = [-0.6, 0.2, -0.2, 0.6];
        for (a, e) in env.target_action.iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
        assert_eq!(env.reward(0, -0.6), 1.0);
        assert!(env.reward(0, 1.0) >= -3.0);
    }

    #[test]
    fn dominating_regularizer_keeps_pi0() {
        let env = ContinuousToyEnv::new(4, 1.0, 0.9).unwrap();
        let pi0 = DeterministicPolicy::constant(4, 0.0);
        let mut cfg = DeterministicConfig::new(1e9, 5_000, 1).unwrap();
        cfg.schedule.eta = 0.0;
        let out = proto_td3_finetune(&env, &pi0, &cfg).unwrap();
        assert!(out.policy.action.iter().all(|a| a.abs() <= cfg.grid.spacing()));
    }

    /// Independent grid Q-learning with a greedy deterministic policy rewritten
    /// on minibatch states (lowest index among exact ties, nearest to the old action first).
    fn grid_q_learning(env: &ContinuousToyEnv, pi0: &DeterministicPolicy, cfg: &DeterministicConfig) -> (QTable, Vec<usize>) {
        let grid = cfg.grid;
        let n = grid.resolution;
        let mut env_rng = rng::stream(cfg.top_seed, cfg.seed, "env");
        let mut batch_rng = rng::stream(cfg.top_seed, cfg.seed, "minibatch");
        let mut q = QTable::from_fn(env.n_states, n, |_, _| env.v_max());
        let mut act: Vec<usize> = pi0.action.iter().map(|&a| grid.nearest(a)).collect();
        let mut buf = Vec::new();
        let mut taken = Vec::new();
        let (mut s, mut t) = (0, 0);
        for _ in 0..cfg.steps {
            let a = act[s];
            taken.push(a);
            let sp = sample_categorical(&mut env_rng, &env.next_dist(s));
            buf.push((s, a, env.reward(s, grid.point(a)), sp));
            t += 1;
            if t == HORIZON {
                t = 0;
                s = 0;
            } else {
                s = sp;
            }
            let batch: Vec<_> = (0..cfg.batch).map(|_| buf[batch_rng.gen_range(0..buf.len())]).collect();
            let targets: Vec<f64> = batch.iter().map(|&(_, _, r, sp)| r + env.gamma * q.get(sp, act[sp])).collect();
            for (&(s, a, _, _), y) in batch.iter().zip(targets) {
                let old = q.get(s, a);
                q.set(s, a, old + cfg.lr_q * (y - old));
            }
            let mut seen = Vec::new();
            for &(s, ..) in &batch {
                if seen.contains(&s) {
                    continue;
                }
                seen.push(s);
                let row = q.row(s);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let center = grid.point(act[s]);
                let mut best = None::<usize>;
                for i in (0..n).filter(|&i| row[i] == max) {
                    if best.is_none_or(|b| (grid.point(i) - center).abs() < (grid.point(b) - center).abs()) {
                        best = Some(i);
                    }
                }
                act[s] = best.unwrap();
            }
        }
        (q, taken)
    }

    #[test]
    fn zero_alpha_reduces_to_grid_q_learning() {
        let env = ContinuousToyEnv::new(3, 1.0, 0.8).unwrap();
        let pi0 = DeterministicPolicy::constant(3, 0.3);
        let mut cfg = DeterministicConfig::new(0.0, 3_000, 2).unwrap();
        cfg.fixed_lambda = Some(1.0);
        cfg.tau = 1.0;
        cfg.grid = ActionGrid::new(21).unwrap();
        let out = proto_td3_finetune(&env, &pi0, &cfg).unwrap();
        let (q, taken) = grid_q_learning(&env, &pi0, &cfg);
        assert_eq!(out.q, q);
        assert_eq!(out.actions_taken, taken);
    }
}
