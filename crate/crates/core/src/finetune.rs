//! Sample-based online finetuning: replay buffer, TD critic with the
//! regularized target, per-state closed-form improvement, Polyak reference
//! and per-step α anneal.

use std::collections::VecDeque;
use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::{argmax_first, expected_return, kl_row, Mdp, QTable, TabularPolicy};
use crate::pretrain::{PretrainResult, Transition, TransitionDataset, HORIZON};
use crate::regularized::{advance_schedule, improve_row, ScheduleState, ALPHA_EPS};
use crate::rng::{self, sample_categorical};

/// How the online replay buffer relates to the offline dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BufferStrategy {
    /// Uniform over offline ∪ online.
    Merged,
    /// The first `n` offline transitions are copied into the online ring; only the ring is sampled.
    Seeded { n: usize },
    /// Half of every minibatch from each source (offline share rounded down).
    Symmetric,
}

#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    online: VecDeque<Transition>,
    capacity: usize,
    offline: Vec<Transition>,
    strategy: BufferStrategy,
}

impl ReplayBuffer {
    pub fn new(offline: &TransitionDataset, strategy: BufferStrategy, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(LabError::Config("buffer capacity must be >= 1".into()));
        }
        let mut buf = ReplayBuffer { online: VecDeque::new(), capacity, offline: Vec::new(), strategy };
        match strategy {
            BufferStrategy::Seeded { n } => {
                for t in offline.transitions.iter().take(n) {
                    buf.push(*t);
                }
            }
            BufferStrategy::Merged | BufferStrategy::Symmetric => buf.offline = offline.transitions.clone(),
        }
        Ok(buf)
    }

    pub fn push(&mut self, t: Transition) {
        if self.online.len() == self.capacity {
            self.online.pop_front();
        }
        self.online.push_back(t);
    }

    pub fn online_len(&self) -> usize {
        self.online.len()
    }

    pub fn offline_len(&self) -> usize {
        self.offline.len()
    }

    pub fn strategy(&self) -> BufferStrategy {
        self.strategy
    }
}

/// Draws `batch` transitions with replacement according to the buffer strategy.
pub fn sample_minibatch<R: Rng + ?Sized>(buf: &ReplayBuffer, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
    let (n_off, n_on) = (buf.offline.len(), buf.online.len());
    if n_off + n_on == 0 {
        return Err(LabError::EmptyBuffer);
    }
    let mut out = Vec::with_capacity(batch);
    let (from_off, from_on) = match buf.strategy {
        BufferStrategy::Symmetric if n_off > 0 && n_on > 0 => (batch / 2, batch - batch / 2),
        _ => (0, 0),
    };
    if from_off + from_on > 0 {
        for _ in 0..from_off {
            out.push(buf.offline[rng.gen_range(0..n_off)]);
        }
        for _ in 0..from_on {
            out.push(buf.online[rng.gen_range(0..n_on)]);
        }
    } else {
        for _ in 0..batch {
            let i = rng.gen_range(0..n_off + n_on);
            out.push(if i < n_off { buf.offline[i] } else { buf.online[i - n_off] });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneAlgo {
    /// Regularize against the Polyak reference.
    Proto,
    /// Regularize against the pretrained policy throughout.
    Frozen,
    /// Greedy improvement, no penalty.
    Noreg,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr_q: f64,
    pub batch: usize,
    /// Environment-step budget.
    pub steps: u64,
    pub algo: FinetuneAlgo,
    /// `budget` is normally `steps`.
    pub schedule: ScheduleState,
    pub tau: f64,
    pub seed: u64,
    pub top_seed: u64,
    /// Steps between exact evaluations; `None` means `steps / 200`.
    pub eval_interval: Option<u64>,
    pub buffer: BufferStrategy,
    /// Online ring capacity; `None` keeps every transition.
    pub capacity: Option<usize>,
}

impl FinetuneConfig {
    /// Structural defaults: η = 0.9, τ = 5e-3, merged buffer.
    pub fn new(algo: FinetuneAlgo, alpha0: f64, steps: u64, seed: u64) -> Result<Self> {
        Ok(FinetuneConfig {
            lr_q: 0.5,
            batch: 32,
            steps,
            algo,
            schedule: ScheduleState::new(alpha0, 0.9, steps.max(1))?,
            tau: 5e-3,
            seed,
            top_seed: 0,
            eval_interval: None,
            buffer: BufferStrategy::Merged,
            capacity: None,
        })
    }

    pub fn eval_every(&self) -> u64 {
        self.eval_interval.unwrap_or(self.steps / 200).max(1)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr_q > 0.0 && self.lr_q <= 1.0) {
            return Err(LabError::Config(format!("lr_q must lie in (0, 1], got {}", self.lr_q)));
        }
        if self.batch == 0 {
            return Err(LabError::Config("batch must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(LabError::Config("steps must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(LabError::Config(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if self.eval_interval == Some(0) {
            return Err(LabError::Config("eval_interval must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    pub env_step: u64,
    #[serde(rename = "return")]
    pub ret: f64,
    pub alpha: f64,
    /// Max over states of the total-variation distance to π₀.
    pub tv_to_pi0: f64,
    /// Max over states of the divergence to the reference (`max_mse` for the deterministic variant).
    pub max_kl: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneTrace {
    pub records: Vec<FinetuneRecord>,
    /// Name of the last CSV column.
    pub divergence_column: String,
}

impl FinetuneTrace {
    pub fn to_csv(&self) -> String {
        let mut out = format!("env_step,return,alpha,tv_to_pi0,{}\n", self.divergence_column);
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.env_step, r.ret, r.alpha, r.tv_to_pi0, r.max_kl);
        }
        out
    }

    pub fn final_return(&self) -> f64 {
        self.records.last().map_or(f64::NAN, |r| r.ret)
    }
}

/// Trace together with the learner's final tables.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneOutcome {
    pub trace: FinetuneTrace,
    pub q: QTable,
    pub policy: TabularPolicy,
    pub reference: TabularPolicy,
}

/// Critic, actor and reference tables of one finetuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub algo: FinetuneAlgo,
    pub q: QTable,
    pub pi: TabularPolicy,
    pub reference: TabularPolicy,
    pub pi0: TabularPolicy,
    pub gamma: f64,
    pub lr_q: f64,
    pub tau: f64,
}

impl Learner {
    pub fn new(algo: FinetuneAlgo, pre: &PretrainResult, gamma: f64, lr_q: f64, tau: f64) -> Self {
        Learner {
            algo,
            q: pre.q.clone(),
            pi: pre.policy.clone(),
            reference: pre.policy.clone(),
            pi0: pre.policy.clone(),
            gamma,
            lr_q,
            tau,
        }
    }

    fn penalty_reference(&self) -> Option<&TabularPolicy> {
        match self.algo {
            FinetuneAlgo::Proto => Some(&self.reference),
            FinetuneAlgo::Frozen => Some(&self.pi0),
            FinetuneAlgo::Noreg => None,
        }
    }

    /// `Σ_{a': π>0} π(a'|s) (Q(s,a') − α log(π(a'|s)/ref(a'|s)))`.
    fn soft_value(&self, s: usize, alpha: f64) -> Result<f64> {
        let (q, pi) = (self.q.row(s), self.pi.row(s));
        let reference = self.penalty_reference().filter(|_| alpha > 0.0);
        let mut w = 0.0;
        for a in 0..q.len() {
            let p = pi[a];
            if p > 0.0 {
                let pen = match reference {
                    Some(r) => {
                        let ra = r.prob(s, a);
                        if ra <= 0.0 {
                            return Err(LabError::Support { state: s, action: a });
                        }
                        alpha * (p / ra).ln()
                    }
                    None => 0.0,
                };
                w += p * (q[a] - pen);
            }
        }
        Ok(w)
    }

    /// TD step on every minibatch entry; targets use the tables from before the batch.
    pub fn critic_update(&mut self, batch: &[Transition], alpha: f64) -> Result<()> {
        let mut targets = Vec::with_capacity(batch.len());
        let mut cache: Vec<(usize, f64)> = Vec::new();
        for t in batch {
            let w = if t.done {
                0.0
            } else if let Some(&(_, w)) = cache.iter().find(|(s, _)| *s == t.s_next) {
                w
            } else {
                let w = self.soft_value(t.s_next, alpha)?;
                cache.push((t.s_next, w));
                w
            };
            targets.push(t.r + self.gamma * w);
        }
        for (t, target) in batch.iter().zip(targets) {
            let old = self.q.get(t.s, t.a);
            self.q.set(t.s, t.a, old + self.lr_q * (target - old));
        }
        Ok(())
    }

    /// Rewrites the policy rows of the states that appear in the minibatch.
    pub fn actor_update(&mut self, batch: &[Transition], alpha: f64) -> Result<()> {
        let na = self.q.n_actions();
        let mut row = vec![0.0; na];
        let mut done_states: Vec<usize> = Vec::new();
        for t in batch {
            if done_states.contains(&t.s) {
                continue;
            }
            done_states.push(t.s);
            let greedy = alpha < ALPHA_EPS || self.algo == FinetuneAlgo::Noreg;
            if greedy {
                row.fill(0.0);
                row[argmax_first(self.q.row(t.s))] = 1.0;
            } else {
                let reference = self.penalty_reference().expect("regularized algorithm");
                improve_row(self.q.row(t.s), reference.row(t.s), alpha, &mut row)
                    .map_err(|reason| LabError::InvalidPolicy { state: t.s, reason })?;
            }
            self.pi.set_row(t.s, &row);
        }
        Ok(())
    }

    pub fn reference_update(&mut self) {
        let tau = self.tau;
        for s in 0..self.pi.n_states() {
            let mixed: Vec<f64> =
                self.reference.row(s).iter().zip(self.pi.row(s)).map(|(r, p)| tau * p + (1.0 - tau) * r).collect();
            self.reference.set_row(s, &mixed);
        }
    }

    pub fn divergence(&self) -> Result<f64> {
        let reference = self.penalty_reference().unwrap_or(&self.reference);
        let mut worst: f64 = 0.0;
        for s in 0..self.pi.n_states() {
            let kl = kl_row(self.pi.row(s), reference.row(s)).map_err(|a| LabError::Support { state: s, action: a })?;
            worst = worst.max(kl);
        }
        Ok(worst)
    }
}

fn check_inputs(mdp: &Mdp, pre: &PretrainResult, data: &TransitionDataset, cfg: &FinetuneConfig) -> Result<()> {
    cfg.validate()?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    if pre.policy.n_states() != ns || pre.policy.n_actions() != na || pre.q.n_states() != ns || pre.q.n_actions() != na {
        return Err(LabError::Config("pretrained tables do not match the MDP dimensions".into()));
    }
    pre.policy.validate()?;
    if cfg.algo != FinetuneAlgo::Noreg && cfg.schedule.alpha0 > 0.0 && !pre.policy.is_strictly_positive() {
        return Err(LabError::Config("regularized finetuning needs a strictly positive pretrained policy".into()));
    }
    if let Some(t) = data.transitions.iter().find(|t| t.s >= ns || t.s_next >= ns || t.a >= na) {
        return Err(LabError::Data(format!("offline transition {t:?} lies outside the MDP")));
    }
    Ok(())
}

/// Runs the online loop and returns the evaluation trace.
pub fn finetune(mdp: &Mdp, pre: &PretrainResult, data: &TransitionDataset, cfg: &FinetuneConfig) -> Result<FinetuneTrace> {
    Ok(finetune_detailed(mdp, pre, data, cfg)?.trace)
}

pub fn finetune_detailed(
    mdp: &Mdp,
    pre: &PretrainResult,
    data: &TransitionDataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    check_inputs(mdp, pre, data, cfg)?;
    let mut env_rng = rng::stream(cfg.top_seed, cfg.seed, "env");
    let mut act_rng = rng::stream(cfg.top_seed, cfg.seed, "action");
    let mut batch_rng = rng::stream(cfg.top_seed, cfg.seed, "minibatch");
    let capacity = cfg.capacity.unwrap_or(usize::try_from(cfg.steps).unwrap_or(usize::MAX).saturating_add(data.transitions.len()));
    let mut buffer = ReplayBuffer::new(data, cfg.buffer, capacity)?;
    let mut learner = Learner::new(cfg.algo, pre, mdp.discount(), cfg.lr_q, cfg.tau);
    let mut schedule = cfg.schedule.clone();
    let eval_every = cfg.eval_every();
    let mut records = Vec::new();

    let mut s = sample_categorical(&mut env_rng, mdp.initial_dist());
    let mut t_episode = 0;
    for step in 1..=cfg.steps {
        let a = sample_categorical(&mut act_rng, learner.pi.row(s));
        let s_next = sample_categorical(&mut env_rng, mdp.next_dist(s, a));
        buffer.push(Transition { s, a, r: mdp.reward(s, a), s_next, done: false });
        t_episode += 1;
        if t_episode == HORIZON {
            t_episode = 0;
            s = sample_categorical(&mut env_rng, mdp.initial_dist());
        } else {
            s = s_next;
        }

        let alpha = schedule.current_alpha;
        let batch = sample_minibatch(&buffer, cfg.batch, &mut batch_rng)?;
        learner.critic_update(&batch, alpha)?;
        learner.actor_update(&batch, alpha)?;
        learner.reference_update();
        schedule = advance_schedule(&schedule);

        if step % eval_every == 0 {
            records.push(FinetuneRecord {
                env_step: step,
                ret: expected_return(mdp, &learner.pi)?,
                alpha,
                tv_to_pi0: learner.pi.max_tv(&learner.pi0),
                max_kl: learner.divergence()?,
            });
        }
    }
    Ok(FinetuneOutcome {
        trace: FinetuneTrace { records, divergence_column: "max_kl".into() },
        q: learner.q,
        policy: learner.pi,
        reference: learner.reference,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropReport {
    /// Minimum return within the first 5% of steps divided by the pretrained return.
    pub drop_fraction: f64,
    pub min_return: f64,
    pub min_step: u64,
    /// First evaluation step whose return reaches the pretrained return.
    pub recovery_step: Option<u64>,
}

/// Summarizes the early-finetuning dip of a trace.
pub fn evaluate_drop(trace: &FinetuneTrace, pre_return: f64) -> Result<DropReport> {
    let last = trace.records.last().ok_or_else(|| LabError::Data("empty finetune trace".into()))?;
    let horizon = 0.05 * last.env_step as f64;
    let mut window: Vec<&FinetuneRecord> = trace.records.iter().filter(|r| r.env_step as f64 <= horizon).collect();
    if window.is_empty() {
        window.push(&trace.records[0]);
    }
    let min = window.iter().fold(window[0], |m, r| if r.ret < m.ret { r } else { m });
    Ok(DropReport {
        drop_fraction: min.ret / pre_return,
        min_return: min.ret,
        min_step: min.env_step,
        recovery_step: trace.records.iter().find(|r| r.ret >= pre_return).map(|r| r.env_step),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvSpec};
    use crate::pretrain::PretrainMethod;

    fn data(ts: &[Transition]) -> TransitionDataset {
        TransitionDataset { transitions: ts.to_vec(), source_seed: 0, behavior_descriptor: String::new() }
    }

    fn tr(s: usize, a: usize, r: f64, s_next: usize) -> Transition {
        Transition { s, a, r, s_next, done: false }
    }

    #[test]
    fn symmetric_split() {
        let off = data(&[tr(0, 0, 0.0, 0); 3]);
        let mut buf = ReplayBuffer::new(&off, BufferStrategy::Symmetric, 10).unwrap();
        buf.push(tr(1, 1, 1.0, 1));
        let mut rng = rng::stream(0, 0, "t");
        let b = sample_minibatch(&buf, 8, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|t| t.s == 0).count(), 4);
        let b = sample_minibatch(&buf, 7, &mut rng).unwrap();
        assert_eq!(b.iter().filter(|t| t.s == 0).count(), 3);
    }

    #[test]
    fn merged_without_online_is_offline() {
        let off = data(&[tr(2, 0, 0.0, 0)]);
        let buf = ReplayBuffer::new(&off, BufferStrategy::Merged, 10).unwrap();
        let mut rng = rng::stream(0, 0, "t");
        assert!(sample_minibatch(&buf, 16, &mut rng).unwrap().iter().all(|t| t.s == 2));
        let empty = ReplayBuffer::new(&data(&[]), BufferStrategy::Symmetric, 10).unwrap();
        assert_eq!(sample_minibatch(&empty, 4, &mut rng), Err(LabError::EmptyBuffer));
    }

    #[test]
    fn seeded_copies_prefix_and_ring_evicts() {
        let off = data(&[tr(0, 0, 0.0, 0), tr(1, 0, 0.0, 0), tr(2, 0, 0.0, 0)]);
        let mut buf = ReplayBuffer::new(&off, BufferStrategy::Seeded { n: 2 }, 3).unwrap();
        assert_eq!((buf.online_len(), buf.offline_len()), (2, 0));
        buf.push(tr(5, 0, 0.0, 0));
        buf.push(tr(6, 0, 0.0, 0));
        assert_eq!(buf.online_len(), 3);
        let mut rng = rng::stream(0, 0, "t");
        assert!(sample_minibatch(&buf, 64, &mut rng).unwrap().iter().all(|t| t.s != 0));
    }

    #[test]
    fn uniform_sampling_frequencies() {
        let off = data(&(0..10).map(|i| tr(i, 0, 0.0, 0)).collect::<Vec<_>>());
        let buf = ReplayBuffer::new(&off, BufferStrategy::Merged, 1).unwrap();
        let mut rng = rng::stream(9, 0, "t");
        let mut counts = [0usize; 10];
        for _ in 0..1000 {
            for t in sample_minibatch(&buf, 100, &mut rng).unwrap() {
                counts[t.s] += 1;
            }
        }
        // binomial(100000, 0.1): σ ≈ 94.9
        let sigma = (100_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn zero_discount_td_target_is_reward() {
        let pre = PretrainResult {
            policy: TabularPolicy::uniform(2, 2),
            q: QTable::zeros(2, 2),
            method: PretrainMethod::BcFqe,
        };
        let mut l = Learner::new(FinetuneAlgo::Proto, &pre, 0.0, 1.0, 0.1);
        l.critic_update(&[tr(0, 1, 1.0, 1)], 0.5).unwrap();
        assert_eq!(l.q.get(0, 1), 1.0);
    }

    #[test]
    fn annealed_proto_matches_noreg_update() {
        let pre = PretrainResult {
            policy: TabularPolicy::deterministic(3, &[0, 2, 1, 1]),
            q: QTable::from_fn(4, 3, |s, a| (s * 3 + a) as f64 * 0.1),
            method: PretrainMethod::InsampleFqi,
        };
        let mut a = Learner::new(FinetuneAlgo::Proto, &pre, 0.9, 0.3, 0.01);
        let mut b = Learner::new(FinetuneAlgo::Noreg, &pre, 0.9, 0.3, 0.01);
        let batch = [tr(0, 1, 0.5, 2), tr(3, 0, 1.0, 1), tr(2, 2, 0.0, 0)];
        for l in [&mut a, &mut b] {
            l.critic_update(&batch, 0.0).unwrap();
            l.actor_update(&batch, 0.0).unwrap();
            l.reference_update();
        }
        assert_eq!(a.q, b.q);
        assert_eq!(a.pi, b.pi);
    }

    #[test]
    fn rows_stay_distributions() {
        let mdp = make_env(&EnvSpec::random(3, 6, 3, 3)).unwrap();
        let d = crate::pretrain::collect_dataset(&mdp, &TabularPolicy::uniform(6, 3), 300, 1).unwrap();
        let pre = crate::pretrain::pretrain(PretrainMethod::BcFqe, &d, &mdp).unwrap();
        let mut cfg = FinetuneConfig::new(FinetuneAlgo::Proto, 0.5, 2_000, 4).unwrap();
        cfg.eval_interval = Some(100);
        let out = finetune_detailed(&mdp, &pre, &d, &cfg).unwrap();
        out.policy.validate().unwrap();
        for s in 0..6 {
            assert!((out.policy.row(s).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert_eq!(out.trace.records.len(), 20);
        assert_eq!(finetune(&mdp, &pre, &d, &cfg).unwrap(), out.trace);
    }

    #[test]
    fn drop_report() {
        let mk = |rets: &[f64]| FinetuneTrace {
            records: rets
                .iter()
                .enumerate()
                .map(|(i, &ret)| FinetuneRecord { env_step: (i as u64 + 1) * 100, ret, alpha: 0.0, tv_to_pi0: 0.0, max_kl: 0.0 })
                .collect(),
            divergence_column: "max_kl".into(),
        };
        let mut rets = vec![1.0; 40];
        rets[0] = 0.4;
        rets[1] = 0.8;
        let r = evaluate_drop(&mk(&rets), 1.0).unwrap();
        assert_eq!((r.drop_fraction, r.min_step, r.recovery_step), (0.4, 100, Some(300)));
        let r = evaluate_drop(&mk(&(0..40).map(|i| 1.0 + i as f64).collect::<Vec<_>>()), 1.0).unwrap();
        assert!(r.drop_fraction >= 1.0);
        assert!(evaluate_drop(&mk(&[]), 1.0).is_err());
    }

    #[test]
    fn rejects_bad_configs() {
        let mdp = make_env(&EnvSpec::random(3, 2, 2, 2)).unwrap();
        let d = data(&[tr(0, 0, 0.0, 1)]);
        let pre = PretrainResult {
            policy: TabularPolicy::deterministic(2, &[0, 1]),
            q: QTable::zeros(2, 2),
            method: PretrainMethod::BcFqe,
        };
        let cfg = FinetuneConfig::new(FinetuneAlgo::Proto, 1.0, 10, 0).unwrap();
        assert!(finetune(&mdp, &pre, &d, &cfg).unwrap_err().is_config());
        let mut bad = cfg.clone();
        bad.lr_q = 0.0;
        assert!(finetune(&mdp, &pre, &d, &bad).unwrap_err().is_config());
    }
}
