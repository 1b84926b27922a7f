//! Built-in environments.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::mdp::Mdp;
use crate::rng;

fn default_gamma() -> f64 {
    0.9
}

fn default_goal() -> Option<[usize; 2]> {
    None
}

/// Environment description as it appears in run configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvSpec {
    /// Random MDP: `branching` reachable successors per pair, rewards in `[0, 1)`.
    Random {
        seed: u64,
        n_states: usize,
        n_actions: usize,
        branching: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Forward/backward chain with a rewarding self-loop at the far end.
    Chain {
        length: usize,
        slip_prob: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Four-action grid; reaching the goal pays 1 and restarts at the origin.
    Gridworld {
        width: usize,
        height: usize,
        /// `[x, y]`; defaults to the far corner.
        #[serde(default = "default_goal")]
        goal: Option<[usize; 2]>,
        noise: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Chain with an advance/bail choice; see [`cliff_chain`].
    CliffChain {
        length: usize,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
    /// Continuous-action toy used by the deterministic variant. Not a finite MDP.
    Toy {
        n_states: usize,
        #[serde(default = "default_reward_scale")]
        reward_scale: f64,
        #[serde(default = "default_gamma")]
        gamma: f64,
    },
}

fn default_reward_scale() -> f64 {
    1.0
}

impl EnvSpec {
    pub fn random(seed: u64, n_states: usize, n_actions: usize, branching: usize) -> Self {
        EnvSpec::Random { seed, n_states, n_actions, branching, gamma: 0.9 }
    }

    pub fn gridworld(width: usize, height: usize, noise: f64) -> Self {
        EnvSpec::Gridworld { width, height, goal: None, noise, gamma: 0.9 }
    }

    pub fn cliff_chain(length: usize) -> Self {
        EnvSpec::CliffChain { length, gamma: 0.9 }
    }

    /// Parses the compact command-line form, e.g. `gridworld:3x3`,
    /// `gridworld:4x4:noise=0.1,goal=3x0`, `chain:5:slip=0.1`,
    /// `random:seed=7,states=5,actions=3,branching=2`, `cliff_chain:6`, `toy:4`.
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |msg: &str| LabError::Config(format!("bad env spec `{text}`: {msg}"));
        let mut parts = text.splitn(3, ':');
        let kind = parts.next().unwrap_or_default();
        let first = parts.next();
        let rest = parts.next();
        let mut opts: Vec<(String, String)> = Vec::new();
        let kv_src = match kind {
            "random" => first,
            _ => rest,
        };
        if let Some(src) = kv_src {
            for item in src.split(',').filter(|s| !s.is_empty()) {
                let (k, v) = item.split_once('=').ok_or_else(|| bad("expected key=value"))?;
                opts.push((k.to_string(), v.to_string()));
            }
        }
        let take = |key: &str| opts.iter().find(|(k, _)| k == key).map(|(_, v)| v.clone());
        let num = |key: &str, default: f64| -> Result<f64> {
            take(key).map_or(Ok(default), |v| v.parse().map_err(|_| bad(&format!("`{key}` is not a number"))))
        };
        let int = |v: &str| -> Result<usize> { v.parse().map_err(|_| bad("expected an integer")) };
        let pair = |v: &str| -> Result<(usize, usize)> {
            let (a, b) = v.split_once('x').ok_or_else(|| bad("expected WxH"))?;
            Ok((int(a)?, int(b)?))
        };
        let known: &[&str] = match kind {
            "random" => &["seed", "states", "actions", "branching", "gamma"],
            "chain" => &["slip", "gamma"],
            "gridworld" => &["noise", "goal", "gamma"],
            "cliff_chain" => &["gamma"],
            "toy" => &["scale", "gamma"],
            _ => return Err(bad("unknown environment kind")),
        };
        if let Some((k, _)) = opts.iter().find(|(k, _)| !known.contains(&k.as_str())) {
            return Err(bad(&format!("unknown option `{k}`")));
        }
        let gamma = num("gamma", 0.9)?;
        let spec = match kind {
            "random" => EnvSpec::Random {
                seed: take("seed").map_or(Ok(0), |v| v.parse().map_err(|_| bad("seed")))?,
                n_states: int(&take("states").ok_or_else(|| bad("missing states"))?)?,
                n_actions: int(&take("actions").ok_or_else(|| bad("missing actions"))?)?,
                branching: take("branching").map_or(Ok(2), |v| int(&v))?,
                gamma,
            },
            "chain" => EnvSpec::Chain {
                length: int(first.ok_or_else(|| bad("missing length"))?)?,
                slip_prob: num("slip", 0.0)?,
                gamma,
            },
            "gridworld" => {
                let (width, height) = pair(first.ok_or_else(|| bad("missing WxH"))?)?;
                let goal = take("goal").map(|g| pair(&g)).transpose()?.map(|(x, y)| [x, y]);
                EnvSpec::Gridworld { width, height, goal, noise: num("noise", 0.0)?, gamma }
            }
            "cliff_chain" => EnvSpec::CliffChain { length: int(first.ok_or_else(|| bad("missing length"))?)?, gamma },
            _ => EnvSpec::Toy {
                n_states: int(first.ok_or_else(|| bad("missing state count"))?)?,
                reward_scale: num("scale", 1.0)?,
                gamma,
            },
        };
        Ok(spec)
    }
}

/// Builds the finite MDP described by `spec`.
pub fn make_env(spec: &EnvSpec) -> Result<Mdp> {
    match *spec {
        EnvSpec::Random { seed, n_states, n_actions, branching, gamma } => {
            random_mdp(seed, n_states, n_actions, branching, gamma)
        }
        EnvSpec::Chain { length, slip_prob, gamma } => chain(length, slip_prob, gamma),
        EnvSpec::Gridworld { width, height, goal, noise, gamma } => {
            let goal = goal.unwrap_or([width.saturating_sub(1), height.saturating_sub(1)]);
            gridworld(width, height, goal, noise, gamma)
        }
        EnvSpec::CliffChain { length, gamma } => cliff_chain(length, gamma),
        EnvSpec::Toy { .. } => Err(LabError::Config("the toy environment has continuous actions; it is not a finite MDP".into())),
    }
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(LabError::Config(format!("{name} must be positive")));
    }
    Ok(())
}

fn probability(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(LabError::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

fn random_mdp(seed: u64, n_states: usize, n_actions: usize, branching: usize, gamma: f64) -> Result<Mdp> {
    positive("n_states", n_states)?;
    positive("n_actions", n_actions)?;
    positive("branching", branching)?;
    let mut rng = rng::stream(seed, 0, "random-mdp");
    let k = branching.min(n_states);
    let mut transition = Vec::with_capacity(n_states);
    let mut reward = Vec::with_capacity(n_states);
    for _ in 0..n_states {
        let mut rows = Vec::with_capacity(n_actions);
        let mut rews = Vec::with_capacity(n_actions);
        for _ in 0..n_actions {
            let mut row = vec![0.0; n_states];
            let succ = sample(&mut rng, n_states, k);
            let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.05..1.0)).collect();
            let total: f64 = weights.iter().sum();
            for (idx, w) in succ.iter().zip(&weights) {
                row[idx] = w / total;
            }
            rows.push(row);
            rews.push(rng.gen::<f64>());
        }
        transition.push(rows);
        reward.push(rews);
    }
    let rho = vec![1.0 / n_states as f64; n_states];
    Mdp::new(transition, reward, gamma, rho)
}

fn chain(length: usize, slip: f64, gamma: f64) -> Result<Mdp> {
    positive("length", length)?;
    probability("slip_prob", slip)?;
    let n = length;
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    let mut reward = vec![vec![0.0; 2]; n];
    for s in 0..n {
        let fwd = (s + 1).min(n - 1);
        let back = s.saturating_sub(1);
        // action 0 moves forward, action 1 backward; a slip reverses the move
        transition[s][0][fwd] += 1.0 - slip;
        transition[s][0][back] += slip;
        transition[s][1][back] += 1.0 - slip;
        transition[s][1][fwd] += slip;
    }
    reward[n - 1][0] = 1.0;
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    Mdp::new(transition, reward, gamma, rho)
}

/// Gridworld action ids.
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;

fn gridworld(width: usize, height: usize, goal: [usize; 2], noise: f64, gamma: f64) -> Result<Mdp> {
    positive("width", width)?;
    positive("height", height)?;
    probability("noise", noise)?;
    if goal[0] >= width || goal[1] >= height {
        return Err(LabError::Config(format!("goal {goal:?} lies outside the {width}x{height} grid")));
    }
    let n = width * height;
    let id = |x: usize, y: usize| y * width + x;
    let goal_id = id(goal[0], goal[1]);
    let start = id(0, 0);
    let step = |x: usize, y: usize, dir: usize| -> usize {
        match dir {
            UP => id(x, y.saturating_sub(1)),
            DOWN => id(x, (y + 1).min(height - 1)),
            LEFT => id(x.saturating_sub(1), y),
            _ => id((x + 1).min(width - 1), y),
        }
    };
    let mut transition = vec![vec![vec![0.0; n]; 4]; n];
    let mut reward = vec![vec![0.0; 4]; n];
    for y in 0..height {
        for x in 0..width {
            let s = id(x, y);
            for a in 0..4 {
                if s == goal_id {
                    transition[s][a][start] = 1.0;
                    reward[s][a] = 1.0;
                    continue;
                }
                transition[s][a][step(x, y, a)] += 1.0 - noise;
                for dir in 0..4 {
                    transition[s][a][step(x, y, dir)] += noise / 4.0;
                }
            }
        }
    }
    let mut rho = vec![0.0; n];
    rho[start] = 1.0;
    Mdp::new(transition, reward, gamma, rho)
}

/// Payoff of the bail-out action in [`cliff_chain`].
pub const CLIFF_BAIL_REWARD: f64 = 0.1;

/// Action ids for [`cliff_chain`].
pub const ADVANCE: usize = 0;
pub const BAIL: usize = 1;

/// The state at which a support-restricted reference omits [`ADVANCE`].
pub fn cliff_decision_state(length: usize) -> usize {
    length.saturating_sub(2)
}

/// `length` states in a line. [`ADVANCE`] moves one step right for no reward;
/// [`BAIL`] pays [`CLIFF_BAIL_REWARD`] and returns to the start. The last
/// state is absorbing and pays 1 per step. Any policy class that cannot
/// advance at [`cliff_decision_state`] is stuck with the bail-out loop.
pub fn cliff_chain(length: usize, gamma: f64) -> Result<Mdp> {
    if length < 2 {
        return Err(LabError::Config("cliff_chain needs length >= 2".into()));
    }
    let n = length;
    let mut transition = vec![vec![vec![0.0; n]; 2]; n];
    let mut reward = vec![vec![0.0; 2]; n];
    for s in 0..n - 1 {
        transition[s][ADVANCE][s + 1] = 1.0;
        transition[s][BAIL][0] = 1.0;
        reward[s][BAIL] = CLIFF_BAIL_REWARD;
    }
    for a in 0..2 {
        transition[n - 1][a][n - 1] = 1.0;
        reward[n - 1][a] = 1.0;
    }
    let mut rho = vec![0.0; n];
    rho[0] = 1.0;
    Mdp::new(transition, reward, gamma, rho)
}
