//! Run configuration, multi-seed batch execution, report aggregation and
//! gnuplot script emission.
//!
//! Every artifact is a pure function of the config: floats are written with
//! Rust's shortest round-trip formatting and nothing time-dependent ever
//! reaches disk, so repeated runs give byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deterministic::{proto_td3_finetune, ActionGrid, ContinuousToyEnv, DeterministicConfig, DeterministicPolicy};
use crate::env::{make_env, EnvSpec};
use crate::error::{LabError, Result};
use crate::finetune::{evaluate_drop, finetune, BufferStrategy, DropReport, FinetuneAlgo, FinetuneConfig, FinetuneTrace};
use crate::mdp::{expected_return, policy_evaluation_exact, Mdp, TabularPolicy};
use crate::pretrain::{collect_with_descriptor, pretrain, BehaviorSpec, PretrainMethod, PretrainResult, TransitionDataset};
use crate::regularized::{
    frozen_exact_iterate, proto_exact_iterate, unregularized_iterate, IterationTrace, NoiseSpec, PolyakState,
    ScheduleState,
};
use crate::theory::{audit_noreg_bound, audit_proto_bound, AuditConfig, AuditRecord, BoundAudit};

pub const LEARNING_CURVES_CSV: &str = "learning_curves.csv";
pub const DEVIATION_CSV: &str = "deviation.csv";
pub const BOUND_AUDIT_CSV: &str = "bound_audit.csv";
pub const SUMMARY_JSON: &str = "summary.json";

/// Env var overriding the number of worker threads used by [`run_batch`].
pub const WORKERS_ENV: &str = "PROTO_LAB_WORKERS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainChoice {
    BcFqe,
    InsampleFqi,
    None,
}

impl PretrainChoice {
    fn method(self) -> Option<PretrainMethod> {
        match self {
            PretrainChoice::BcFqe => Some(PretrainMethod::BcFqe),
            PretrainChoice::InsampleFqi => Some(PretrainMethod::InsampleFqi),
            PretrainChoice::None => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algo {
    Proto,
    Frozen,
    Noreg,
    ProtoTd3,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Proto => "proto",
            Algo::Frozen => "frozen",
            Algo::Noreg => "noreg",
            Algo::ProtoTd3 => "proto_td3",
        }
    }

    fn tabular(self) -> Option<FinetuneAlgo> {
        match self {
            Algo::Proto => Some(FinetuneAlgo::Proto),
            Algo::Frozen => Some(FinetuneAlgo::Frozen),
            Algo::Noreg => Some(FinetuneAlgo::Noreg),
            Algo::ProtoTd3 => None,
        }
    }
}

/// Offline dataset used for pretraining. One dataset is shared by every seed
/// of a batch and is drawn from `top_seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub behavior: BehaviorSpec,
    pub size: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { behavior: BehaviorSpec::Uniform, size: 10_000 }
    }
}

fn default_buffer() -> BufferStrategy {
    BufferStrategy::Merged
}

fn default_beta() -> f64 {
    4.0
}

fn default_grid() -> usize {
    ActionGrid::default().resolution
}

/// One experiment: a finetuning pipeline repeated over `seeds`, plus the exact
/// iteration settings (`k_max`, `noise_amplitude`) used by the bound audit and
/// `iterate-exact`. `noise_amplitude` is absolute, not relative to `v_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvSpec,
    pub pretrain: PretrainChoice,
    pub algo: Algo,
    pub alpha0: f64,
    pub eta: f64,
    pub tau: f64,
    pub lr_q: f64,
    pub batch: usize,
    pub steps: u64,
    pub k_max: usize,
    pub noise_amplitude: f64,
    pub seeds: Vec<u64>,
    pub eval_interval: Option<u64>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub top_seed: u64,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default = "default_buffer")]
    pub buffer: BufferStrategy,
    #[serde(default)]
    pub capacity: Option<usize>,
    /// Proto-TD3 only.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Proto-TD3 only: number of action grid points on `[-1, 1]`.
    #[serde(default = "default_grid")]
    pub grid_resolution: usize,
}

impl RunConfig {
    /// Sparse-reward defaults (α₀ = 0.5, η = 0.9, τ = 5e-3) on a 3x3 gridworld.
    pub fn example(output_dir: impl Into<PathBuf>) -> Self {
        RunConfig {
            env: EnvSpec::gridworld(3, 3, 0.1),
            pretrain: PretrainChoice::InsampleFqi,
            algo: Algo::Proto,
            alpha0: 0.5,
            eta: 0.9,
            tau: 5e-3,
            lr_q: 0.5,
            batch: 32,
            steps: 20_000,
            k_max: 100,
            noise_amplitude: 0.0,
            seeds: vec![0, 1, 2],
            eval_interval: None,
            output_dir: output_dir.into(),
            top_seed: 0,
            dataset: DatasetConfig::default(),
            buffer: BufferStrategy::Merged,
            capacity: None,
            beta: 4.0,
            grid_resolution: default_grid(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| LabError::Config(format!("bad run config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("RunConfig always serializes")
    }

    /// Checks the fields owned by the harness; algorithm hyper-parameters are
    /// checked again by the modules that consume them.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("seeds must be distinct".into());
        }
        if !(self.alpha0 >= 0.0 && self.alpha0.is_finite()) {
            return bad(format!("alpha0 must be finite and >= 0, got {}", self.alpha0));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return bad(format!("eta must lie in [0, 1], got {}", self.eta));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau must lie in (0, 1], got {}", self.tau));
        }
        if !(self.lr_q > 0.0 && self.lr_q <= 1.0) {
            return bad(format!("lr_q must lie in (0, 1], got {}", self.lr_q));
        }
        if self.batch == 0 || self.steps == 0 {
            return bad("batch and steps must be >= 1".into());
        }
        if !(self.noise_amplitude >= 0.0 && self.noise_amplitude.is_finite()) {
            return bad(format!("noise_amplitude must be finite and >= 0, got {}", self.noise_amplitude));
        }
        if self.eval_interval == Some(0) {
            return bad("eval_interval must be >= 1".into());
        }
        let toy = matches!(self.env, EnvSpec::Toy { .. });
        match (self.algo, toy) {
            (Algo::ProtoTd3, false) => return bad("proto_td3 runs only on the toy env".into()),
            (Algo::ProtoTd3, true) if self.pretrain != PretrainChoice::None => {
                return bad("proto_td3 starts from a zero policy; set pretrain to none".into())
            }
            (a, true) if a != Algo::ProtoTd3 => return bad(format!("{} needs a finite env, not toy", a.name())),
            _ => {}
        }
        Ok(())
    }

    fn finetune_config(&self, algo: FinetuneAlgo, seed: u64) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            lr_q: self.lr_q,
            batch: self.batch,
            steps: self.steps,
            algo,
            schedule: ScheduleState::new(self.alpha0, self.eta, self.steps)?,
            tau: self.tau,
            seed,
            top_seed: self.top_seed,
            eval_interval: self.eval_interval,
            buffer: self.buffer,
            capacity: self.capacity,
        })
    }

    fn deterministic_config(&self, seed: u64) -> Result<DeterministicConfig> {
        Ok(DeterministicConfig {
            lr_q: self.lr_q,
            batch: self.batch,
            steps: self.steps,
            schedule: ScheduleState::new(self.alpha0, self.eta, self.steps)?,
            tau: self.tau,
            seed,
            top_seed: self.top_seed,
            eval_interval: self.eval_interval,
            beta: self.beta,
            grid: ActionGrid::new(self.grid_resolution)?,
            fixed_lambda: None,
        })
    }
}

/// Offline stage shared by all seeds: dataset plus pretrained tables. Without
/// pretraining the start is the uniform policy with its exact Q-values.
pub struct OfflineStage {
    pub mdp: Mdp,
    pub data: TransitionDataset,
    pub pre: PretrainResult,
}

pub fn offline_stage(cfg: &RunConfig) -> Result<OfflineStage> {
    let mdp = make_env(&cfg.env)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    match cfg.pretrain.method() {
        Some(method) => {
            let behavior = cfg.dataset.behavior.build(&mdp)?;
            let data = collect_with_descriptor(
                &mdp,
                &behavior,
                cfg.dataset.size,
                cfg.top_seed,
                &cfg.dataset.behavior.descriptor(),
            )?;
            let pre = pretrain(method, &data, &mdp)?;
            Ok(OfflineStage { mdp, data, pre })
        }
        None => {
            let policy = TabularPolicy::uniform(ns, na);
            let q = policy_evaluation_exact(&mdp, &policy)?;
            let data = TransitionDataset {
                transitions: Vec::new(),
                source_seed: cfg.top_seed,
                behavior_descriptor: "none".into(),
            };
            // The method tag is informational only when nothing was fitted.
            Ok(OfflineStage { mdp, data, pre: PretrainResult { policy, q, method: PretrainMethod::BcFqe } })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub env_step: u64,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationPoint {
    pub env_step: u64,
    pub tv_to_pi0: f64,
    #[serde(rename = "return")]
    pub ret: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub pretrained_return: f64,
    pub final_return: f64,
    pub drop: DropReport,
    pub deviation: Vec<DeviationPoint>,
}

/// Seed-wise worst case of the per-seed audits: the largest measured gap
/// against the smallest bound at each `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub n_seeds: usize,
    pub violations: usize,
    pub precondition_failures: usize,
    pub records: Vec<AuditRecord>,
}

impl AuditSummary {
    fn aggregate(audits: &[BoundAudit]) -> Result<Self> {
        let first = audits.first().ok_or_else(|| LabError::Internal("no audits to aggregate".into()))?;
        let mut records = first.records.clone();
        for a in &audits[1..] {
            if a.records.len() != records.len() {
                return Err(LabError::Internal("audits of one batch differ in length".into()));
            }
            for (acc, r) in records.iter_mut().zip(&a.records) {
                acc.measured_gap = acc.measured_gap.max(r.measured_gap);
                acc.rhs = acc.rhs.min(r.rhs);
                acc.satisfied &= r.satisfied;
                acc.precondition_ok &= r.precondition_ok;
            }
        }
        Ok(AuditSummary {
            n_seeds: audits.len(),
            violations: audits.iter().map(BoundAudit::violations).sum(),
            precondition_failures: audits.iter().map(BoundAudit::precondition_failures).sum(),
            records,
        })
    }
}

/// Aggregate of one config over its seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub algo: Algo,
    pub curve: Vec<CurvePoint>,
    pub seeds: Vec<SeedSummary>,
    pub audit: Option<AuditSummary>,
}

impl RunSummary {
    pub fn drop_fractions(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.drop.drop_fraction).collect()
    }

    pub fn final_returns(&self) -> Vec<f64> {
        self.seeds.iter().map(|s| s.final_return).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub runs: Vec<RunSummary>,
}

impl ComparisonReport {
    pub fn run(&self, label: &str) -> Option<&RunSummary> {
        self.runs.iter().find(|r| r.label == label)
    }

    pub fn learning_curves_csv(&self) -> String {
        let mut out = String::from("label,env_step,mean,min,max\n");
        for run in &self.runs {
            for p in &run.curve {
                let _ = writeln!(out, "{},{},{},{},{}", run.label, p.env_step, p.mean, p.min, p.max);
            }
        }
        out
    }

    pub fn deviation_csv(&self) -> String {
        let mut out = String::from("label,seed,env_step,tv_to_pi0,return\n");
        for run in &self.runs {
            for s in &run.seeds {
                for p in &s.deviation {
                    let _ = writeln!(out, "{},{},{},{},{}", run.label, s.seed, p.env_step, p.tv_to_pi0, p.ret);
                }
            }
        }
        out
    }

    pub fn bound_audit_csv(&self) -> String {
        let mut out = String::from("label,k,measured_gap,rhs,satisfied,precondition_ok\n");
        for run in &self.runs {
            for r in run.audit.iter().flat_map(|a| &a.records) {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{}",
                    run.label, r.k, r.measured_gap, r.rhs, r.satisfied, r.precondition_ok
                );
            }
        }
        out
    }

    /// Writes the three aggregate CSVs and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let summary = serde_json::to_string_pretty(self).map_err(|e| LabError::Internal(e.to_string()))? + "\n";
        let files = [
            (LEARNING_CURVES_CSV, self.learning_curves_csv()),
            (DEVIATION_CSV, self.deviation_csv()),
            (BOUND_AUDIT_CSV, self.bound_audit_csv()),
            (SUMMARY_JSON, summary),
        ];
        let mut written = Vec::new();
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body)?;
            written.push(path);
        }
        Ok(written)
    }
}

struct SeedRun {
    seed: u64,
    trace: FinetuneTrace,
    pretrained_return: f64,
    audit: Option<BoundAudit>,
}

fn worker_count(n_jobs: usize) -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(LabError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(n_jobs.clamp(1, cores)),
    }
}

/// Maps `f` over `seeds` on a dedicated pool, keeping seed order. The first
/// failure (in seed order) is returned tagged with its seed.
fn par_seeds<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count(seeds.len())?)
        .build()
        .map_err(|e| LabError::Internal(format!("cannot start worker pool: {e}")))?;
    let results: Vec<Result<T>> = pool.install(|| seeds.par_iter().map(|&s| f(s)).collect());
    results
        .into_iter()
        .zip(seeds)
        .map(|(r, &seed)| r.map_err(|e| LabError::Seed { seed, source: Box::new(e) }))
        .collect()
}

/// Noise-injected exact iteration for one seed, as selected by `cfg.algo`.
/// Proto uses the annealed schedule over `k_max` iterations and the config's `τ`.
fn exact_trace(cfg: &RunConfig, stage: &OfflineStage, seed: u64) -> Result<IterationTrace> {
    let noise = NoiseSpec::uniform(cfg.noise_amplitude, seed);
    let budget = cfg.k_max.max(1) as u64;
    match cfg.algo {
        Algo::Proto => {
            let schedule = ScheduleState::new(cfg.alpha0, cfg.eta, budget)?;
            let polyak = PolyakState::new(stage.pre.policy.clone(), cfg.tau)?;
            proto_exact_iterate(&stage.mdp, &stage.pre.policy, &schedule, &polyak, &noise, cfg.k_max)
        }
        Algo::Frozen => {
            let schedule = ScheduleState::new(cfg.alpha0, cfg.eta, budget)?;
            frozen_exact_iterate(&stage.mdp, &stage.pre.policy, &schedule, &noise, cfg.k_max)
        }
        Algo::Noreg => unregularized_iterate(&stage.mdp, &stage.pre.q, &noise, cfg.k_max),
        Algo::ProtoTd3 => Err(LabError::Config("exact iteration needs a tabular algo".into())),
    }
}

/// Bound audit for one seed. The bound assumes a constant `α` and the
/// previous policy as reference, so proto is audited with `η = 0`, `τ = 1`.
/// Frozen has no such bound and yields `None`.
fn audit_seed(cfg: &RunConfig, stage: &OfflineStage, seed: u64) -> Result<Option<BoundAudit>> {
    let noise = NoiseSpec::uniform(cfg.noise_amplitude, seed);
    match cfg.algo {
        Algo::Proto if cfg.alpha0 > 0.0 => {
            let schedule = ScheduleState::constant(cfg.alpha0)?;
            let polyak = PolyakState::new(stage.pre.policy.clone(), 1.0)?;
            let trace = proto_exact_iterate(&stage.mdp, &stage.pre.policy, &schedule, &polyak, &noise, cfg.k_max)?;
            let acfg = AuditConfig::for_mdp(&stage.mdp, cfg.alpha0);
            Ok(Some(audit_proto_bound(&trace, &trace.noise, &acfg)?))
        }
        Algo::Noreg => {
            let trace = unregularized_iterate(&stage.mdp, &stage.pre.q, &noise, cfg.k_max)?;
            Ok(Some(audit_noreg_bound(&trace, &AuditConfig::for_mdp(&stage.mdp, 0.0))?))
        }
        _ => Ok(None),
    }
}

fn run_tabular_seed(cfg: &RunConfig, stage: &OfflineStage, algo: FinetuneAlgo, seed: u64) -> Result<SeedRun> {
    let fcfg = cfg.finetune_config(algo, seed)?;
    let trace = finetune(&stage.mdp, &stage.pre, &stage.data, &fcfg)?;
    let pretrained_return = expected_return(&stage.mdp, &stage.pre.policy)?;
    let audit = if cfg.k_max > 0 { audit_seed(cfg, stage, seed)? } else { None };
    Ok(SeedRun { seed, trace, pretrained_return, audit })
}

fn run_toy_seed(cfg: &RunConfig, seed: u64) -> Result<SeedRun> {
    let EnvSpec::Toy { n_states, reward_scale, gamma } = cfg.env else {
        return Err(LabError::Config("proto_td3 runs only on the toy env".into()));
    };
    let env = ContinuousToyEnv::new(n_states, reward_scale, gamma)?;
    let pi0 = DeterministicPolicy::constant(n_states, 0.0);
    let out = proto_td3_finetune(&env, &pi0, &cfg.deterministic_config(seed)?)?;
    Ok(SeedRun { seed, trace: out.trace, pretrained_return: env.expected_return(&pi0)?, audit: None })
}

fn summarize(label: &str, algo: Algo, runs: &[SeedRun]) -> Result<RunSummary> {
    let n_points = runs[0].trace.records.len();
    let mut curve = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let step = runs[0].trace.records[i].env_step;
        let mut vals = Vec::with_capacity(runs.len());
        for r in runs {
            let rec = r
                .trace
                .records
                .get(i)
                .filter(|rec| rec.env_step == step)
                .ok_or_else(|| LabError::Internal("seed traces are not aligned on env_step".into()))?;
            vals.push(rec.ret);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        // Summation rounding can push a mean of equal values one ulp outside.
        curve.push(CurvePoint { env_step: step, mean: mean.clamp(min, max), min, max });
    }
    let seeds = runs
        .iter()
        .map(|r| {
            Ok(SeedSummary {
                seed: r.seed,
                pretrained_return: r.pretrained_return,
                final_return: r.trace.final_return(),
                drop: evaluate_drop(&r.trace, r.pretrained_return)?,
                deviation: r
                    .trace
                    .records
                    .iter()
                    .map(|x| DeviationPoint { env_step: x.env_step, tv_to_pi0: x.tv_to_pi0, ret: x.ret })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let audits: Vec<BoundAudit> = runs.iter().filter_map(|r| r.audit.clone()).collect();
    let audit = if audits.is_empty() { None } else { Some(AuditSummary::aggregate(&audits)?) };
    Ok(RunSummary { label: label.to_string(), algo, curve, seeds, audit })
}

/// Offline stage from files written by `collect` and `pretrain`. Without a
/// pretrained file the config's `pretrain` method is fitted to `data`.
pub fn offline_stage_from(cfg: &RunConfig, data: TransitionDataset, pre: Option<PretrainResult>) -> Result<OfflineStage> {
    let mdp = make_env(&cfg.env)?;
    let pre = match (pre, cfg.pretrain.method()) {
        (Some(p), _) => p,
        (None, Some(m)) => pretrain(m, &data, &mdp)?,
        (None, None) => return Err(LabError::Config("pretrain is none but no pretrained tables were given".into())),
    };
    if pre.policy.n_states() != mdp.n_states() || pre.policy.n_actions() != mdp.n_actions() {
        return Err(LabError::Config("pretrained tables do not match the env".into()));
    }
    Ok(OfflineStage { mdp, data, pre })
}

fn run_labelled(cfg: &RunConfig, label: &str, stage: Option<&OfflineStage>) -> Result<ComparisonReport> {
    cfg.validate()?;
    let runs = match (cfg.algo.tabular(), stage) {
        (Some(algo), Some(stage)) => par_seeds(&cfg.seeds, |seed| run_tabular_seed(cfg, stage, algo, seed))?,
        (Some(algo), None) => {
            let stage = offline_stage(cfg)?;
            par_seeds(&cfg.seeds, |seed| run_tabular_seed(cfg, &stage, algo, seed))?
        }
        (None, None) => par_seeds(&cfg.seeds, |seed| run_toy_seed(cfg, seed))?,
        (None, Some(_)) => return Err(LabError::Config("proto_td3 takes no offline stage".into())),
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    for r in &runs {
        fs::write(dir.join(format!("trace_seed{}.csv", r.seed)), r.trace.to_csv())?;
        if let Some(a) = &r.audit {
            fs::write(dir.join(format!("bound_audit_seed{}.csv", r.seed)), a.to_csv())?;
        }
    }
    let report = ComparisonReport { runs: vec![summarize(label, cfg.algo, &runs)?] };
    report.write(dir)?;
    Ok(report)
}

/// Runs every seed of `cfg` and writes, under `cfg.output_dir`, one
/// `trace_seed<N>.csv` per seed, per-seed bound audits when applicable, and
/// the aggregate CSVs plus `summary.json`.
pub fn run_batch(cfg: &RunConfig) -> Result<ComparisonReport> {
    run_labelled(cfg, cfg.algo.name(), None)
}

/// [`run_batch`] on a prepared offline stage instead of the config's dataset.
pub fn run_batch_with(cfg: &RunConfig, stage: &OfflineStage) -> Result<ComparisonReport> {
    run_labelled(cfg, cfg.algo.name(), Some(stage))
}

fn unique_labels(cfgs: &[RunConfig]) -> Vec<String> {
    let base: Vec<String> = cfgs.iter().map(|c| c.algo.name().to_string()).collect();
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    for b in &base {
        *seen.entry(b).or_default() += 1;
    }
    let mut used: BTreeMap<String, usize> = BTreeMap::new();
    base.iter()
        .map(|b| {
            if seen[b.as_str()] == 1 {
                return b.clone();
            }
            let n = used.entry(b.clone()).or_default();
            *n += 1;
            format!("{b}_{n}")
        })
        .collect()
}

/// Runs each config into `out/<label>/` and writes the merged aggregates and
/// plot scripts into `out`. Labels are the algo names, numbered on clashes.
pub fn compare(cfgs: &[RunConfig], out: &Path) -> Result<ComparisonReport> {
    if cfgs.is_empty() {
        return Err(LabError::Config("compare needs at least one config".into()));
    }
    let labels = unique_labels(cfgs);
    let mut runs = Vec::new();
    for (cfg, label) in cfgs.iter().zip(&labels) {
        let mut sub = cfg.clone();
        sub.output_dir = out.join(label);
        runs.extend(run_labelled(&sub, label, None)?.runs);
    }
    let report = ComparisonReport { runs };
    report.write(out)?;
    emit_plots(out)?;
    Ok(report)
}

/// Exact (model-based) iteration for every seed; writes `exact_seed<N>.csv`.
/// `stage` replaces the config's dataset and pretraining when given.
pub fn iterate_exact(cfg: &RunConfig, stage: Option<&OfflineStage>) -> Result<Vec<(u64, IterationTrace)>> {
    cfg.validate()?;
    if cfg.algo == Algo::ProtoTd3 {
        return Err(LabError::Config("iterate-exact needs a tabular algo".into()));
    }
    let owned;
    let stage = match stage {
        Some(s) => s,
        None => {
            owned = offline_stage(cfg)?;
            &owned
        }
    };
    let traces = par_seeds(&cfg.seeds, |seed| exact_trace(cfg, stage, seed))?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut out = Vec::with_capacity(traces.len());
    for (trace, &seed) in traces.into_iter().zip(&cfg.seeds) {
        fs::write(cfg.output_dir.join(format!("exact_seed{seed}.csv")), trace.to_csv())?;
        out.push((seed, trace));
    }
    Ok(out)
}

/// Bound audit for every seed; writes `bound_audit_seed<N>.csv` and the
/// seed-wise worst case as `bound_audit.csv`.
pub fn audit_bounds(cfg: &RunConfig, stage: Option<&OfflineStage>) -> Result<AuditSummary> {
    cfg.validate()?;
    match cfg.algo {
        Algo::Proto if cfg.alpha0 > 0.0 => {}
        Algo::Noreg => {}
        Algo::Proto => return Err(LabError::Config("the proto bound needs alpha0 > 0".into())),
        other => return Err(LabError::Config(format!("no error bound is defined for {}", other.name()))),
    }
    let owned;
    let stage = match stage {
        Some(s) => s,
        None => {
            owned = offline_stage(cfg)?;
            &owned
        }
    };
    let audits = par_seeds(&cfg.seeds, |seed| {
        audit_seed(cfg, stage, seed)?.ok_or_else(|| LabError::Internal("audit unexpectedly skipped".into()))
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    for (a, seed) in audits.iter().zip(&cfg.seeds) {
        fs::write(cfg.output_dir.join(format!("bound_audit_seed{seed}.csv")), a.to_csv())?;
    }
    let summary = AuditSummary::aggregate(&audits)?;
    let agg = BoundAudit { records: summary.records.clone() };
    fs::write(cfg.output_dir.join(BOUND_AUDIT_CSV), agg.to_csv())?;
    Ok(summary)
}

// Colour-blind safe palette; styles cycle past eight runs.
const PALETTE: [&str; 8] = ["#0072b2", "#d55e00", "#009e73", "#cc79a7", "#e69f00", "#56b4e9", "#f0e442", "#000000"];

fn labels_in(csv: &str) -> Vec<String> {
    let mut labels: Vec<String> = Vec::new();
    for line in csv.lines().skip(1) {
        if let Some(l) = line.split(',').next().filter(|l| !l.is_empty()) {
            if !labels.iter().any(|x| x == l) {
                labels.push(l.to_string());
            }
        }
    }
    labels
}

fn gp_header(output: &str, xlabel: &str, ylabel: &str) -> String {
    format!(
        "set datafile separator \",\"\n\
         set terminal svg size 900,600 dynamic enhanced\n\
         set output \"{output}\"\n\
         set key outside right\n\
         set grid\n\
         set xlabel \"{xlabel}\"\n\
         set ylabel \"{ylabel}\"\n"
    )
}

fn line_styles(labels: &[String]) -> String {
    let mut out = String::new();
    for (i, _) in labels.iter().enumerate() {
        let _ = writeln!(out, "set style line {} lc rgb \"{}\" lw 2 pt 7 ps 0.5", i + 1, PALETTE[i % PALETTE.len()]);
    }
    out
}

fn select(label: &str, col: usize) -> String {
    format!("(strcol(1) eq \"{label}\" ? ${col} : NaN)")
}

fn learning_curves_gp(labels: &[String]) -> String {
    let mut s = gp_header("learning_curves.svg", "environment steps", "expected return");
    s += &line_styles(labels);
    s += "set style fill transparent solid 0.2 noborder\n";
    if labels.is_empty() {
        return s + "print \"learning_curves.csv has no rows\"\n";
    }
    let mut parts = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let ls = i + 1;
        parts.push(format!(
            "\"{LEARNING_CURVES_CSV}\" skip 1 using 2:{}:{} with filledcurves ls {ls} notitle",
            select(l, 4),
            select(l, 5)
        ));
        parts.push(format!("\"{LEARNING_CURVES_CSV}\" skip 1 using 2:{} with lines ls {ls} title \"{l}\"", select(l, 3)));
    }
    s + "plot " + &parts.join(", \\\n     ") + "\n"
}

fn deviation_gp(labels: &[String]) -> String {
    let mut s = gp_header("deviation_scatter.svg", "total variation to initial policy", "expected return");
    s += &line_styles(labels);
    if labels.is_empty() {
        return s + "print \"deviation.csv has no rows\"\n";
    }
    let parts: Vec<String> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| format!("\"{DEVIATION_CSV}\" skip 1 using 4:{} with points ls {} title \"{l}\"", select(l, 5), i + 1))
        .collect();
    s + "plot " + &parts.join(", \\\n     ") + "\n"
}

fn bound_audit_gp(labels: &[String]) -> String {
    let mut s = gp_header("bound_audit.svg", "iteration k", "sup-norm gap");
    s += &line_styles(labels);
    s += "set logscale y\n";
    if labels.is_empty() {
        return s + "print \"bound_audit.csv has no rows\"\n";
    }
    let mut parts = Vec::new();
    for (i, l) in labels.iter().enumerate() {
        let ls = i + 1;
        parts.push(format!("\"{BOUND_AUDIT_CSV}\" skip 1 using 2:{} with lines ls {ls} title \"{l} measured_gap\"", select(l, 3)));
        parts.push(format!(
            "\"{BOUND_AUDIT_CSV}\" skip 1 using 2:{} with lines ls {ls} dt 2 title \"{l} rhs\"",
            select(l, 4)
        ));
    }
    s + "plot " + &parts.join(", \\\n     ") + "\n"
}

/// Writes `learning_curves.gp`, `deviation_scatter.gp` and `bound_audit.gp`
/// next to the aggregate CSVs they read. Each script renders an SVG when run
/// from inside `report_dir`.
pub fn emit_plots(report_dir: &Path) -> Result<Vec<PathBuf>> {
    let names = [LEARNING_CURVES_CSV, DEVIATION_CSV, BOUND_AUDIT_CSV];
    let missing: Vec<&str> = names.iter().copied().filter(|n| !report_dir.join(n).is_file()).collect();
    if !missing.is_empty() {
        return Err(LabError::Data(format!("{} is missing {}", report_dir.display(), missing.join(", "))));
    }
    let read = |n: &str| fs::read_to_string(report_dir.join(n));
    let scripts = [
        ("learning_curves.gp", learning_curves_gp(&labels_in(&read(LEARNING_CURVES_CSV)?))),
        ("deviation_scatter.gp", deviation_gp(&labels_in(&read(DEVIATION_CSV)?))),
        ("bound_audit.gp", bound_audit_gp(&labels_in(&read(BOUND_AUDIT_CSV)?))),
    ];
    let mut written = Vec::new();
    for (name, body) in scripts {
        let path = report_dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
    }
    Ok(written)
}

/// Loads a finite MDP written by `gen-env`.
pub fn load_mdp(path: &Path) -> Result<Mdp> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("bad env file {}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let body = serde_json::to_string_pretty(value).map_err(|e| LabError::Internal(e.to_string()))? + "\n";
    fs::write(path, body)?;
    Ok(())
}

pub fn load_pretrained(path: &Path) -> Result<PretrainResult> {
    let text = fs::read_to_string(path).map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("bad pretrain file {}: {e}", path.display())))
}
